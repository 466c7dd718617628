//! Exact cosine search over an in-memory gallery.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::model::DalgModel;
use crate::tensor::Tensor;

/// Allowed deviation of a stored row norm from 1.
pub const NORM_TOLERANCE: f64 = 1e-6;

/// Gallery of unit-norm descriptors stored as `f32` rows.
#[derive(Clone, Debug, PartialEq)]
pub struct GalleryIndex {
    ids: Vec<String>,
    dim: usize,
    rows: Vec<f32>,
    inv_norms: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub index: usize,
    pub id: String,
    pub score: f64,
}

fn norm_f32(row: &[f32]) -> f64 {
    libm::sqrt(row.iter().map(|&v| f64::from(v) * f64::from(v)).sum())
}

impl GalleryIndex {
    /// Normalises each row of `descriptors [N, C]` and stores it.
    pub fn build(ids: Vec<String>, descriptors: &Tensor) -> Result<Self> {
        let s = descriptors.shape();
        if s.len() != 2 || s[0] != ids.len() {
            return Err(Error::shape("index_build", s, &[ids.len()]));
        }
        let mut rows = Vec::with_capacity(descriptors.numel());
        for row in descriptors.data().chunks(s[1]) {
            let n = libm::sqrt(row.iter().map(|v| v * v).sum());
            if n == 0.0 {
                return Err(Error::ZeroNorm("index_build"));
            }
            rows.extend(row.iter().map(|v| (v / n) as f32));
        }
        Self::from_rows(ids, s[1], rows)
    }

    /// Wraps already-normalised rows; checks ids and norms.
    pub fn from_rows(ids: Vec<String>, dim: usize, rows: Vec<f32>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("descriptor width must be positive".into()));
        }
        if rows.len() != ids.len() * dim {
            return Err(Error::Invalid(format!(
                "{} values for {} ids of width {dim}",
                rows.len(),
                ids.len()
            )));
        }
        let mut seen = BTreeSet::new();
        for id in &ids {
            if !seen.insert(id.as_str()) {
                return Err(Error::Duplicate(id.clone()));
            }
        }
        let mut inv_norms = Vec::with_capacity(ids.len());
        for (row, id) in rows.chunks(dim).zip(&ids) {
            let n = norm_f32(row);
            if !n.is_finite() || (n - 1.0).abs() > NORM_TOLERANCE {
                return Err(Error::Invalid(format!("row `{id}` has norm {n}, expected 1")));
            }
            inv_norms.push(1.0 / n);
        }
        Ok(GalleryIndex {
            ids,
            dim,
            rows,
            inv_norms,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn rows(&self) -> &[f32] {
        &self.rows
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// Cosine similarity of `query` against every row, in row order.
    pub fn scores(&self, query: &[f64]) -> Result<Vec<f64>> {
        if query.len() != self.dim {
            return Err(Error::shape("search", &[query.len()], &[self.dim]));
        }
        let qn = libm::sqrt(query.iter().map(|v| v * v).sum());
        if qn == 0.0 {
            return Err(Error::ZeroNorm("search"));
        }
        Ok(self
            .rows
            .chunks(self.dim)
            .zip(&self.inv_norms)
            .map(|(row, inv)| {
                let d: f64 = row.iter().zip(query).map(|(&r, q)| f64::from(r) * q).sum();
                d * inv / qn
            })
            .collect())
    }

    /// Top `k` rows by cosine; equal scores are ordered by ascending id.
    pub fn search(&self, query: &[f64], k: usize) -> Result<Vec<Hit>> {
        if self.is_empty() {
            return Err(Error::Empty("search"));
        }
        if k == 0 {
            return Err(Error::Invalid("k must be at least 1".into()));
        }
        let scores = self.scores(query)?;
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .total_cmp(&scores[a])
                .then_with(|| self.ids[a].cmp(&self.ids[b]))
        });
        Ok(order
            .into_iter()
            .take(k)
            .map(|i| Hit {
                index: i,
                id: self.ids[i].clone(),
                score: scores[i],
            })
            .collect())
    }
}

/// Descriptors `[N, C]` for `images`, one forward pass per image, run in
/// batches of `batch`.
pub fn extract(model: &DalgModel, images: &[Tensor], batch: usize) -> Result<Tensor> {
    let size = model.cfg.backbone.image_size;
    let ch = model.cfg.backbone.in_channels;
    if let Some(bad) = images.iter().find(|t| t.shape() != [size, size, ch]) {
        return Err(Error::shape("extract", bad.shape(), &[size, size, ch]));
    }
    if images.is_empty() {
        return Err(Error::Empty("extract"));
    }
    let mut parts = Vec::new();
    for chunk in images.chunks(batch.max(1)) {
        parts.push(model.describe(&Tensor::stack(chunk)?)?);
    }
    let c = model.cfg.descriptor_dim();
    let data: Vec<f64> = parts.into_iter().flat_map(Tensor::into_data).collect();
    Tensor::new(alloc::vec![images.len(), c], data)
}
