//! Synthetic retrieval benchmark: train on the generated set, then index a
//! held-out gallery and score held-out queries against it.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::data::{generate_image, generate_synthetic, Sample};
use crate::error::Result;
use crate::metrics::{evaluate, gap, EvalReport, GroundTruth, Prediction, QueryTruth};
use crate::model::DalgModel;
use crate::retrieval::{extract, GalleryIndex};
use crate::runconfig::ResolvedConfig;
use crate::tensor::Tensor;
use crate::train::{train, TrainLog, TrainObserver};

pub struct HeldOut {
    pub gallery: Vec<Sample>,
    pub queries: Vec<Sample>,
}

/// Per class: indices `images_per_class..+gallery_per_class` form the
/// gallery and the next `queries_per_class` the queries.
pub fn held_out(cfg: &ResolvedConfig) -> HeldOut {
    let spec = &cfg.data;
    let (g, q) = (cfg.eval.gallery_per_class, cfg.eval.queries_per_class);
    let mut gallery = Vec::with_capacity(spec.n_classes * g);
    let mut queries = Vec::with_capacity(spec.n_classes * q);
    for class in 0..spec.n_classes {
        let start = spec.images_per_class;
        for index in start..start + g + q {
            let (prefix, dst) = if index < start + g {
                ("g", &mut gallery)
            } else {
                ("q", &mut queries)
            };
            dst.push(Sample {
                id: format!("{prefix}{class:03}_{index:04}"),
                label: class,
                index,
                image: generate_image(spec, class, index),
            });
        }
    }
    HeldOut { gallery, queries }
}

/// Medium-protocol truth: every gallery image of the query's class is a
/// positive.
pub fn ground_truth(split: &HeldOut) -> GroundTruth {
    split
        .queries
        .iter()
        .map(|q| {
            let pos = split
                .gallery
                .iter()
                .filter(|g| g.label == q.label)
                .map(|g| g.id.clone())
                .collect();
            (q.id.clone(), QueryTruth::flat(pos, Default::default()))
        })
        .collect()
}

fn images(samples: &[Sample]) -> Vec<Tensor> {
    samples.iter().map(|s| s.image.clone()).collect()
}

/// Index, search and score; GAP uses the label and score of the top hit.
pub fn evaluate_model(model: &DalgModel, cfg: &ResolvedConfig, split: &HeldOut) -> Result<EvalReport> {
    let e = &cfg.eval;
    let gallery = extract(model, &images(&split.gallery), e.batch_size)?;
    let index = GalleryIndex::build(split.gallery.iter().map(|s| s.id.clone()).collect(), &gallery)?;
    let queries = extract(model, &images(&split.queries), e.batch_size)?;
    let c = index.dim();
    let depth = e.mp_ks.iter().copied().chain([e.k]).max().unwrap_or(e.k);
    let label_of: BTreeMap<&str, usize> = split.gallery.iter().map(|s| (s.id.as_str(), s.label)).collect();
    let mut rankings = Vec::with_capacity(split.queries.len());
    let mut predictions = Vec::with_capacity(split.queries.len());
    for (q, desc) in split.queries.iter().zip(queries.data().chunks(c)) {
        let hits = index.search(desc, depth)?;
        let top = &hits[0];
        predictions.push(Prediction {
            query: q.id.clone(),
            label: format!("{}", label_of[top.id.as_str()]),
            confidence: top.score,
        });
        rankings.push((q.id.clone(), hits.into_iter().map(|h| h.id).collect()));
    }
    let mut report = evaluate(&rankings, &ground_truth(split), e.protocol, e.k, &e.mp_ks)?;
    let labels: BTreeMap<String, String> = split
        .queries
        .iter()
        .map(|q| (q.id.clone(), format!("{}", q.label)))
        .collect();
    report.gap = Some(gap(&predictions, &labels)?);
    Ok(report)
}

pub struct RunOutcome {
    pub model: DalgModel,
    pub log: TrainLog,
    pub report: EvalReport,
}

/// Builds the model, trains it on the synthetic set and evaluates it.
pub fn run(cfg: &ResolvedConfig, observer: &mut dyn TrainObserver) -> Result<RunOutcome> {
    cfg.validate()?;
    let set = generate_synthetic(&cfg.data)?;
    let mut model = DalgModel::new(&cfg.model, cfg.seed)?;
    let labels: Vec<usize> = set.iter().map(|s| s.label).collect();
    let log = train(&mut model, &images(&set), &labels, &cfg.train, observer)?;
    let report = evaluate_model(&model, cfg, &held_out(cfg))?;
    Ok(RunOutcome { model, log, report })
}
