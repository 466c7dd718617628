//! JSON documents and netpbm images read and written by the commands.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use dalg_core::metrics::{GroundTruth, QueryTruth};
use dalg_core::runconfig::{ResolvedConfig, RunConfig};
use dalg_core::Tensor;
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(Error::io(path))?;
    serde_json::from_str(&text).map_err(|source| Error::Schema {
        path: path.to_path_buf(),
        source,
    })
}

/// Pretty JSON with a trailing newline; output is a pure function of
/// `value`.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| Error::Schema {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_bytes(path, text.as_bytes())
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, bytes).map_err(Error::io(path))
}

pub fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent().filter(|d| !d.as_os_str().is_empty()) {
        Some(dir) => fs::create_dir_all(dir).map_err(Error::io(dir)),
        None => Ok(()),
    }
}

pub fn create_writer(path: &Path) -> Result<BufWriter<File>> {
    ensure_parent(path)?;
    Ok(BufWriter::new(File::create(path).map_err(Error::io(path))?))
}

/// Config document, or the defaults when `path` is `None`.
pub fn load_run_config(path: Option<&Path>) -> Result<RunConfig> {
    match path {
        Some(p) if !p.is_file() => Err(Error::Usage(format!("config file {} not found", p.display()))),
        Some(p) => read_json(p),
        None => Ok(RunConfig::default()),
    }
}

/// Descriptors with the config of the model that produced them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptorSet {
    pub config: Option<ResolvedConfig>,
    pub dim: usize,
    pub items: Vec<DescriptorItem>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DescriptorItem {
    pub id: String,
    pub descriptor: Vec<f64>,
}

impl DescriptorSet {
    pub fn from_tensor(config: Option<ResolvedConfig>, ids: Vec<String>, desc: &Tensor) -> Self {
        let dim = desc.shape()[1];
        let items = ids
            .into_iter()
            .zip(desc.data().chunks(dim))
            .map(|(id, d)| DescriptorItem {
                id,
                descriptor: d.to_vec(),
            })
            .collect();
        DescriptorSet { config, dim, items }
    }

    pub fn validate(&self, path: &Path) -> Result<()> {
        if let Some(bad) = self.items.iter().find(|i| i.descriptor.len() != self.dim) {
            return Err(Error::Usage(format!(
                "{}: descriptor `{}` has {} values, expected {}",
                path.display(),
                bad.id,
                bad.descriptor.len(),
                self.dim
            )));
        }
        Ok(())
    }

    pub fn ids(&self) -> Vec<String> {
        self.items.iter().map(|i| i.id.clone()).collect()
    }

    pub fn tensor(&self) -> Result<Tensor> {
        let data = self.items.iter().flat_map(|i| i.descriptor.iter().copied()).collect();
        Ok(Tensor::new(vec![self.items.len(), self.dim], data)?)
    }
}

pub fn read_descriptors(path: &Path) -> Result<DescriptorSet> {
    let set: DescriptorSet = read_json(path)?;
    set.validate(path)?;
    Ok(set)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum TruthDoc {
    Graded(QueryTruth),
    Flat(FlatTruth),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct FlatTruth {
    positive: BTreeSet<String>,
    #[serde(default)]
    junk: BTreeSet<String>,
}

/// Ground truth in either the `{easy, hard, junk}` or the flat
/// `{positive, junk}` form, per query id.
pub fn read_ground_truth(path: &Path) -> Result<GroundTruth> {
    let doc: BTreeMap<String, TruthDoc> = read_json(path)?;
    let gt: GroundTruth = doc
        .into_iter()
        .map(|(q, t)| {
            let t = match t {
                TruthDoc::Graded(t) => t,
                TruthDoc::Flat(f) => QueryTruth::flat(f.positive, f.junk),
            };
            (q, t)
        })
        .collect();
    for (q, t) in &gt {
        t.validate(q)?;
    }
    Ok(gt)
}

/// RGB image as `[H, W, 3]` in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor> {
    let img = image::ImageReader::open(path)
        .map_err(Error::io(path))?
        .with_guessed_format()
        .map_err(Error::io(path))?
        .decode()
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| f64::from(v) / 255.0).collect();
    Ok(Tensor::new(vec![h as usize, w as usize, 3], data)?)
}

/// Binary PPM (P6) from `[H, W, 3]` values in `[0, 1]`.
pub fn write_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    let bytes: Vec<u8> = image.data().iter().map(|v| to_byte(*v)).collect();
    encode(path, &bytes, s[1], s[0], ExtendedColorType::Rgb8, PnmSubtype::Pixmap(SampleEncoding::Binary))
}

/// Binary PGM (P5) of `map [H, W]`, min-max scaled to `0..=255`. A constant
/// map becomes all zeros.
pub fn write_pgm(path: &Path, map: &Tensor) -> Result<()> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(Error::Usage(format!("expected an H x W map, got {s:?}")));
    }
    encode(
        path,
        &min_max_bytes(map.data()),
        s[1],
        s[0],
        ExtendedColorType::L8,
        PnmSubtype::Graymap(SampleEncoding::Binary),
    )
}

pub fn min_max_bytes(values: &[f64]) -> Vec<u8> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0; values.len()];
    }
    values.iter().map(|v| to_byte((v - lo) / (hi - lo))).collect()
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode(path: &Path, bytes: &[u8], w: usize, h: usize, color: ExtendedColorType, sub: PnmSubtype) -> Result<()> {
    let mut out = create_writer(path)?;
    PnmEncoder::new(&mut out)
        .with_subtype(sub)
        .write_image(bytes, w as u32, h as u32, color)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?;
    out.flush().map_err(Error::io(path))
}

/// Image files directly inside `dir`, sorted by name; ids are file stems.
pub fn list_images(dir: &Path) -> Result<Vec<(String, PathBuf)>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(Error::io(dir))? {
        let path = entry.map_err(Error::io(dir))?.path();
        let is_image = matches!(
            path.extension().and_then(|e| e.to_str()),
            Some("ppm" | "pgm" | "pnm")
        );
        if path.is_file() && is_image {
            let id = path
                .file_stem()
                .and_then(|s| s.to_str())
                .ok_or_else(|| Error::Usage(format!("{}: file name is not UTF-8", path.display())))?
                .to_string();
            out.push((id, path));
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(Error::Usage(format!("{}: no .ppm images found", dir.display())));
    }
    Ok(out)
}
