//! Command implementations behind the CLI. Every function takes resolved
//! inputs and writes its artifacts; none of them touch the process state.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use dalg_core::bench::{self, HeldOut};
use dalg_core::data::generate_synthetic;
use dalg_core::metrics::{evaluate, EvalReport, GroundTruth, Protocol};
use dalg_core::retrieval::{extract, GalleryIndex};
use dalg_core::runconfig::{ResolvedConfig, RunConfig, Variants};
use dalg_core::train::{EpochSummary, StepRecord, TrainObserver};
use dalg_core::{AttentionVariant, DalgModel, FusionKind, LocalVariant, StopGradient, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::files::{self, DescriptorSet};
use crate::formats;

pub const CHECKPOINT_FILE: &str = "model.dalg";
pub const CONFIG_FILE: &str = "config.json";
pub const LOG_FILE: &str = "train_log.ndjson";
pub const REPORT_FILE: &str = "report.json";

/// Reads the run document (defaults when absent), applies `--seed` and
/// resolves it. Nothing is computed before this succeeds.
pub fn resolve_run(config: Option<&Path>, seed: Option<u64>) -> Result<ResolvedConfig> {
    let mut run: RunConfig = files::load_run_config(config)?;
    if let Some(s) = seed {
        run.seed = s;
    }
    Ok(run.resolve()?)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum ConfigDoc {
    Resolved(Box<ResolvedConfig>),
    Run(Box<RunConfig>),
}

/// Model settings for a checkpoint: `config` if given, else the
/// `config.json` written next to the checkpoint by `train`.
pub fn checkpoint_config(checkpoint: &Path, config: Option<&Path>) -> Result<ResolvedConfig> {
    let path = match config {
        Some(p) => p.to_path_buf(),
        None => checkpoint.with_file_name(CONFIG_FILE),
    };
    match files::read_json::<ConfigDoc>(&path)? {
        ConfigDoc::Resolved(r) => {
            r.validate()?;
            Ok(*r)
        }
        ConfigDoc::Run(r) => Ok(r.resolve()?),
    }
}

pub fn load_model(checkpoint: &Path, cfg: &ResolvedConfig) -> Result<DalgModel> {
    let mut model = DalgModel::new(&cfg.model, cfg.seed)?;
    formats::restore_checkpoint(checkpoint, &mut model.store)?;
    Ok(model)
}

#[derive(Serialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum LogLine<'a> {
    Step {
        #[serde(flatten)]
        record: &'a StepRecord,
        wall_ms: u128,
    },
    Epoch {
        #[serde(flatten)]
        summary: &'a EpochSummary,
        map: f64,
        wall_ms: u128,
    },
}

/// Writes one NDJSON line per step and per epoch, the latter with the
/// held-out mAP.
struct LogObserver<'a, W: Write> {
    out: W,
    start: Instant,
    cfg: &'a ResolvedConfig,
    split: &'a HeldOut,
    error: Option<Error>,
    path: PathBuf,
}

impl<W: Write> LogObserver<'_, W> {
    fn line(&mut self, line: &LogLine<'_>) {
        if self.error.is_some() {
            return;
        }
        let text = serde_json::to_string(line).expect("log lines serialise");
        if let Err(e) = writeln!(self.out, "{text}") {
            self.error = Some(Error::io(self.path.clone())(e));
        }
    }
}

impl<W: Write> TrainObserver for LogObserver<'_, W> {
    fn on_step(&mut self, record: &StepRecord) {
        let wall_ms = self.start.elapsed().as_millis();
        self.line(&LogLine::Step { record, wall_ms });
    }

    fn on_epoch(&mut self, model: &DalgModel, summary: &EpochSummary) -> dalg_core::Result<()> {
        let map = bench::evaluate_model(model, self.cfg, self.split)?.map;
        let wall_ms = self.start.elapsed().as_millis();
        self.line(&LogLine::Epoch { summary, map, wall_ms });
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: ResolvedConfig,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub final_epoch: Option<EpochSummary>,
    pub eval: EvalReport,
}

/// Trains on the synthetic set and writes the checkpoint, resolved config,
/// NDJSON log and final report into `out`.
pub fn cmd_train(cfg: &ResolvedConfig, out: &Path) -> Result<TrainReport> {
    std::fs::create_dir_all(out).map_err(Error::io(out))?;
    files::write_json(&out.join(CONFIG_FILE), cfg)?;
    let split = bench::held_out(cfg);
    let log_path = out.join(LOG_FILE);
    let mut observer = LogObserver {
        out: files::create_writer(&log_path)?,
        start: Instant::now(),
        cfg,
        split: &split,
        error: None,
        path: log_path.clone(),
    };
    let set = generate_synthetic(&cfg.data)?;
    let images: Vec<Tensor> = set.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<usize> = set.iter().map(|s| s.label).collect();
    let mut model = DalgModel::new(&cfg.model, cfg.seed)?;
    let log = dalg_core::train::train(&mut model, &images, &labels, &cfg.train, &mut observer)?;
    if let Some(e) = observer.error.take() {
        return Err(e);
    }
    observer.out.flush().map_err(Error::io(&log_path))?;
    formats::save_checkpoint(&out.join(CHECKPOINT_FILE), &model.store)?;
    let report = TrainReport {
        config: cfg.clone(),
        steps: log.steps.len(),
        initial_loss: log.steps.first().map_or(f64::NAN, |s| s.total_loss),
        final_loss: log.steps.last().map_or(f64::NAN, |s| s.total_loss),
        final_epoch: log.epochs.last().copied(),
        eval: bench::evaluate_model(&model, cfg, &split)?,
    };
    files::write_json(&out.join(REPORT_FILE), &report)?;
    Ok(report)
}

/// Describes every image in `images` (a directory of PPM files).
pub fn cmd_extract(checkpoint: &Path, config: Option<&Path>, images: &Path, out: &Path) -> Result<DescriptorSet> {
    let cfg = checkpoint_config(checkpoint, config)?;
    let model = load_model(checkpoint, &cfg)?;
    let mut ids = Vec::new();
    let mut tensors = Vec::new();
    for (id, path) in files::list_images(images)? {
        tensors.push(files::read_image(&path)?);
        ids.push(id);
    }
    let before = model.forward_count();
    let desc = extract(&model, &tensors, cfg.eval.batch_size)?;
    debug_assert_eq!(model.forward_count() - before, tensors.len() as u64);
    let set = DescriptorSet::from_tensor(Some(cfg), ids, &desc);
    files::write_json(out, &set)?;
    Ok(set)
}

pub fn cmd_index(descriptors: &Path, out: &Path) -> Result<GalleryIndex> {
    let set = files::read_descriptors(descriptors)?;
    let index = GalleryIndex::build(set.ids(), &set.tensor()?)?;
    formats::save_index(out, &index)?;
    Ok(index)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchHit {
    pub id: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryHits {
    pub query: String,
    pub hits: Vec<SearchHit>,
}

pub fn search_all(index: &GalleryIndex, queries: &DescriptorSet, k: usize) -> Result<Vec<QueryHits>> {
    if queries.dim != index.dim() {
        return Err(Error::Usage(format!(
            "query descriptors have width {}, index has {}",
            queries.dim,
            index.dim()
        )));
    }
    queries
        .items
        .iter()
        .map(|q| {
            let hits = index
                .search(&q.descriptor, k)?
                .into_iter()
                .map(|h| SearchHit { id: h.id, score: h.score })
                .collect();
            Ok(QueryHits {
                query: q.id.clone(),
                hits,
            })
        })
        .collect()
}

pub fn cmd_search(index: &Path, queries: &Path, k: usize, out: Option<&Path>) -> Result<Vec<QueryHits>> {
    let index = formats::load_index(index)?;
    let queries = files::read_descriptors(queries)?;
    let results = search_all(&index, &queries, k)?;
    if let Some(out) = out {
        files::write_json(out, &results)?;
    }
    Ok(results)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalArgs {
    pub protocol: Protocol,
    pub k: usize,
    pub mp_ks: Vec<usize>,
}

/// Ranks the whole gallery for every query in `gt` and scores it.
pub fn eval_rankings(index: &GalleryIndex, queries: &DescriptorSet, gt: &GroundTruth, args: &EvalArgs) -> Result<EvalReport> {
    let hits = search_all(index, queries, index.len())?;
    let rankings: Vec<(String, Vec<String>)> = hits
        .into_iter()
        .filter(|h| gt.contains_key(&h.query))
        .map(|h| (h.query, h.hits.into_iter().map(|x| x.id).collect()))
        .collect();
    if let Some(missing) = gt.keys().find(|q| !rankings.iter().any(|(r, _)| r == *q)) {
        return Err(Error::Usage(format!("ground-truth query `{missing}` has no descriptor")));
    }
    Ok(evaluate(&rankings, gt, args.protocol, args.k, &args.mp_ks)?)
}

pub fn cmd_eval(index: &Path, queries: &Path, gt: &Path, args: &EvalArgs, out: Option<&Path>) -> Result<EvalReport> {
    let index = formats::load_index(index)?;
    let queries = files::read_descriptors(queries)?;
    let gt = files::read_ground_truth(gt)?;
    let report = eval_rankings(&index, &queries, &gt, args)?;
    if let Some(out) = out {
        files::write_json(out, &report)?;
    }
    Ok(report)
}

/// Values per ablation axis; every axis defaults to all of its values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationMatrix {
    pub local: Vec<LocalVariant>,
    pub attention: Vec<AttentionVariant>,
    pub fusion: Vec<FusionKind>,
    pub stop_gradient: Vec<StopGradient>,
}

impl Default for AblationMatrix {
    fn default() -> Self {
        AblationMatrix {
            local: LocalVariant::ALL.to_vec(),
            attention: AttentionVariant::ALL.to_vec(),
            fusion: FusionKind::ALL.to_vec(),
            stop_gradient: StopGradient::ALL.to_vec(),
        }
    }
}

impl AblationMatrix {
    pub fn entries(&self) -> Vec<Variants> {
        Variants::matrix()
            .into_iter()
            .filter(|v| {
                self.local.contains(&v.local)
                    && self.attention.contains(&v.attention)
                    && self.fusion.contains(&v.fusion)
                    && self.stop_gradient.contains(&v.stop_gradient)
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub config: ResolvedConfig,
    pub steps: usize,
    pub initial_loss: f64,
    pub final_loss: f64,
    pub map: f64,
    pub mp: Vec<(usize, f64)>,
    pub gap: Option<f64>,
}

/// Trains and evaluates every matrix entry on the synthetic benchmark with
/// the base config's seed. Writes `ablation.json` and `ablation.md`.
pub fn cmd_ablate(base: &RunConfig, matrix: &AblationMatrix, out: Option<&Path>) -> Result<Vec<AblationRow>> {
    let entries = matrix.entries();
    if entries.is_empty() {
        return Err(Error::Usage("ablation matrix is empty".into()));
    }
    // resolve everything first so schema errors surface before training
    let configs = entries
        .iter()
        .map(|v| {
            RunConfig {
                variants: *v,
                ..base.clone()
            }
            .resolve()
        })
        .collect::<dalg_core::Result<Vec<_>>>()?;
    let mut rows = Vec::with_capacity(configs.len());
    for cfg in configs {
        let outcome = bench::run(&cfg, &mut ())?;
        let steps = &outcome.log.steps;
        rows.push(AblationRow {
            label: cfg.variants.label(),
            steps: steps.len(),
            initial_loss: steps.first().map_or(f64::NAN, |s| s.total_loss),
            final_loss: steps.last().map_or(f64::NAN, |s| s.total_loss),
            map: outcome.report.map,
            mp: outcome.report.mp.clone(),
            gap: outcome.report.gap,
            config: cfg,
        });
    }
    if let Some(out) = out {
        files::write_json(&out.join("ablation.json"), &rows)?;
        files::write_bytes(&out.join("ablation.md"), ablation_table(&rows).as_bytes())?;
    }
    Ok(rows)
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let k = rows.first().map_or(0, |r| r.config.eval.k);
    let mut s = format!("| Variant | mAP@{k} | GAP | initial loss | final loss |\n|---|---|---|---|---|\n");
    for r in rows {
        s.push_str(&format!(
            "| {} | {:.4} | {:.4} | {:.4} | {:.4} |\n",
            r.label,
            r.map,
            r.gap.unwrap_or(f64::NAN),
            r.initial_loss,
            r.final_loss
        ));
    }
    s
}

/// Spatial attention map of one image as a PGM of the `f_l` grid.
pub fn cmd_viz_attn(checkpoint: &Path, config: Option<&Path>, image: &Path, out: &Path) -> Result<Tensor> {
    let cfg = checkpoint_config(checkpoint, config)?;
    let model = load_model(checkpoint, &cfg)?;
    let img = files::read_image(image)?;
    let s = img.shape().to_vec();
    let batch = img.reshape(&[1, s[0], s[1], s[2]])?;
    let map = model.attention_map(&batch)?;
    let hw = map.shape()[1..].to_vec();
    let map = map.reshape(&hw)?;
    files::write_pgm(out, &map)?;
    Ok(map)
}

/// Writes the training images, held-out gallery and queries as PPM files
/// plus the held-out ground truth.
pub fn cmd_gen_data(cfg: &ResolvedConfig, out: &Path) -> Result<()> {
    for s in generate_synthetic(&cfg.data)? {
        files::write_ppm(&out.join("train").join(format!("{}.ppm", s.id)), &s.image)?;
    }
    let split = bench::held_out(cfg);
    for (dir, set) in [("gallery", &split.gallery), ("queries", &split.queries)] {
        for s in set.iter() {
            files::write_ppm(&out.join(dir).join(format!("{}.ppm", s.id)), &s.image)?;
        }
    }
    files::write_json(&out.join("gt.json"), &bench::ground_truth(&split))?;
    files::write_json(&out.join(CONFIG_FILE), cfg)
}
