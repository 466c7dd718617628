use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use dalg_core::metrics::Protocol;

use crate::commands::{self, AblationMatrix, EvalArgs};
use crate::error::{Error, Result};
use crate::files;

#[derive(Debug, Parser)]
#[command(name = "dalg", version, about = "Train, index and evaluate attentive global descriptors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Run configuration document (JSON).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on the synthetic set; writes checkpoint, config, log and report.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Describe every PPM image in a directory.
    Extract {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Model config; defaults to config.json beside the checkpoint.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build a gallery index from extracted descriptors.
    Index {
        #[arg(long)]
        descriptors: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Top-K cosine search for every query descriptor.
    Search {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long, default_value_t = 10)]
        k: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// mAP@K and mP@K against a ground-truth document.
    Eval {
        #[arg(long)]
        index: PathBuf,
        #[arg(long)]
        queries: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long, value_enum, default_value_t = ProtocolArg::Medium)]
        protocol: ProtocolArg,
        #[arg(long, default_value_t = 100)]
        k: usize,
        /// Cut-offs for mP@K.
        #[arg(long, value_delimiter = ',', default_values_t = [1usize, 5, 10])]
        mp: Vec<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate every variant combination of the ablation axes.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Axis values to cover (JSON); all values when omitted.
        #[arg(long)]
        matrix: Option<PathBuf>,
        /// Overrides the training step cap for every entry.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Export the spatial attention map of one image as a PGM.
    VizAttn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Write the synthetic training, gallery and query images with ground truth.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, clap::ValueEnum)]
pub enum ProtocolArg {
    Medium,
    Hard,
}

impl From<ProtocolArg> for Protocol {
    fn from(p: ProtocolArg) -> Self {
        match p {
            ProtocolArg::Medium => Protocol::Medium,
            ProtocolArg::Hard => Protocol::Hard,
        }
    }
}

fn positive(k: usize, what: &str) -> Result<usize> {
    if k == 0 {
        return Err(Error::Usage(format!("{what} must be at least 1")));
    }
    Ok(k)
}

/// Runs one command; returns the line to print on success.
pub fn run(cli: Cli) -> Result<String> {
    match cli.command {
        Command::Train { common, out } => {
            let cfg = commands::resolve_run(common.config.as_deref(), common.seed)?;
            let r = commands::cmd_train(&cfg, &out)?;
            Ok(format!(
                "trained {} steps: loss {:.4} -> {:.4}, mAP@{} {:.4}; wrote {}",
                r.steps,
                r.initial_loss,
                r.final_loss,
                r.eval.k,
                r.eval.map,
                out.display()
            ))
        }
        Command::Extract {
            checkpoint,
            config,
            images,
            out,
        } => {
            let set = commands::cmd_extract(&checkpoint, config.as_deref(), &images, &out)?;
            Ok(format!("{} descriptors of width {} -> {}", set.items.len(), set.dim, out.display()))
        }
        Command::Index { descriptors, out } => {
            let idx = commands::cmd_index(&descriptors, &out)?;
            Ok(format!("indexed {} descriptors -> {}", idx.len(), out.display()))
        }
        Command::Search { index, queries, k, out } => {
            let results = commands::cmd_search(&index, &queries, positive(k, "--k")?, out.as_deref())?;
            let mut text = String::new();
            for r in &results {
                let ids: Vec<String> = r.hits.iter().map(|h| format!("{}:{:.6}", h.id, h.score)).collect();
                text.push_str(&format!("{}\t{}\n", r.query, ids.join(" ")));
            }
            Ok(text.trim_end().to_string())
        }
        Command::Eval {
            index,
            queries,
            gt,
            protocol,
            k,
            mp,
            out,
        } => {
            let args = EvalArgs {
                protocol: protocol.into(),
                k: positive(k, "--k")?,
                mp_ks: mp.into_iter().map(|m| positive(m, "--mp")).collect::<Result<_>>()?,
            };
            let r = commands::cmd_eval(&index, &queries, &gt, &args, out.as_deref())?;
            let mp: Vec<String> = r.mp.iter().map(|(k, v)| format!("mP@{k} {v:.4}")).collect();
            Ok(format!(
                "{} mAP@{} {:.4} {} ({} skipped)",
                r.protocol,
                r.k,
                r.map,
                mp.join(" "),
                r.skipped.len()
            ))
        }
        Command::Ablate {
            common,
            matrix,
            steps,
            out,
        } => {
            let mut base = files::load_run_config(common.config.as_deref())?;
            if let Some(s) = common.seed {
                base.seed = s;
            }
            if let Some(s) = steps {
                base.train.max_steps = Some(positive(s, "--steps")?);
            }
            let matrix: AblationMatrix = match matrix {
                Some(p) => files::read_json(&p)?,
                None => AblationMatrix::default(),
            };
            let rows = commands::cmd_ablate(&base, &matrix, Some(&out))?;
            Ok(commands::ablation_table(&rows).trim_end().to_string())
        }
        Command::VizAttn {
            checkpoint,
            config,
            image,
            out,
        } => {
            let map = commands::cmd_viz_attn(&checkpoint, config.as_deref(), &image, &out)?;
            let s = map.shape();
            Ok(format!("{}x{} attention map -> {}", s[0], s[1], out.display()))
        }
        Command::GenData { common, out } => {
            let cfg = commands::resolve_run(common.config.as_deref(), common.seed)?;
            commands::cmd_gen_data(&cfg, &out)?;
            Ok(format!("synthetic data -> {}", out.display()))
        }
    }
}
