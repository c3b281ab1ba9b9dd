use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use toast_core::checkpoint::Checkpoint;
use toast_core::config::RunConfig;
use toast_core::export::export_attention;
use toast_core::pipeline::{self, StageOutput};
use toast_core::topdown::VariantKind;
use toast_core::training::{flops_estimate, param_count, MethodKind};
use toast_core::Error;

#[derive(Parser)]
#[command(
    name = "toast",
    version,
    about = "Top-down attention steering on a small vision transformer"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Run configuration (TOML). Built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the stage's training seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    method: Option<MethodKind>,
    #[arg(long)]
    variant: Option<VariantKind>,
}

#[derive(Subcommand)]
enum Command {
    /// Train a backbone from scratch on the generic set.
    Pretrain {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a fresh top-down module against a pretrained backbone.
    Pretune {
        #[command(flatten)]
        common: Common,
        /// Backbone checkpoint.
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Transfer to the downstream task. A pre-tuned top-down module in the
    /// input checkpoint is reused by toast methods.
    Tune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Validation accuracy of a saved model.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        json: bool,
    },
    /// Write pass-1, similarity and pass-2 maps for one validation image.
    AttnExport {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        image_index: usize,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Trainable and total parameter counts.
    ReportParams {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        json: bool,
    },
    /// Transformer FLOPs relative to one feedforward pass.
    ReportFlops {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy)]
enum Stage {
    Pretrain,
    Pretune,
    Tune,
    Other,
}

fn load_config(common: &Common, stage: Stage) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(m) = common.method {
        cfg.method.kind = m;
    }
    if let Some(v) = common.variant {
        cfg.method.variant = v;
    }
    if let Some(seed) = common.seed {
        match stage {
            Stage::Pretrain => cfg.pretrain.seed = seed,
            Stage::Pretune => cfg.pretune.seed = seed,
            Stage::Tune => cfg.tune.seed = seed,
            Stage::Other => {}
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

fn metrics_path(out: &Path) -> PathBuf {
    out.with_extension("metrics.tsv")
}

fn finish(stage: &str, output: &StageOutput, out: &Path) -> Result<()> {
    output.checkpoint(stage).save(out)?;
    pipeline::write_metrics(&output.report, &metrics_path(out))?;
    match output.val_accuracy {
        Some(acc) => println!("{stage}: val_accuracy {acc:.4}, wrote {}", out.display()),
        None => println!(
            "{stage}: train_accuracy {:.4}, wrote {}",
            output.report.final_train_accuracy().unwrap_or(0.0),
            out.display()
        ),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Pretrain { common, out } => {
            let cfg = load_config(&common, Stage::Pretrain)?;
            finish("pretrain", &pipeline::pretrain(&cfg)?, &out)
        }
        Command::Pretune { common, ckpt, out } => {
            let cfg = load_config(&common, Stage::Pretune)?;
            let backbone = Checkpoint::load(&ckpt)?.backbone()?;
            finish("pretune", &pipeline::pretune(&cfg, backbone)?, &out)
        }
        Command::Tune { common, ckpt, out } => {
            let cfg = load_config(&common, Stage::Tune)?;
            let input = Checkpoint::load(&ckpt)?;
            let pretuned = if cfg.method.kind.uses_topdown() && input.method()?.kind.uses_topdown()
            {
                Some(input.topdown()?)
            } else {
                None
            };
            finish(
                "tune",
                &pipeline::tune(&cfg, input.backbone()?, pretuned)?,
                &out,
            )
        }
        Command::Eval { common, ckpt, json } => {
            let cfg = load_config(&common, Stage::Other)?;
            let ck = Checkpoint::load(&ckpt)?;
            let acc = pipeline::eval(&cfg, &ck)?;
            let recorded = pipeline::recorded_accuracy(&ck)?;
            if json {
                let v = serde_json::json!({ "val_accuracy": acc, "recorded": recorded });
                println!("{v}");
            } else {
                match recorded {
                    Some(r) => println!("val_accuracy {acc:?} (recorded {r:?})"),
                    None => println!("val_accuracy {acc:?}"),
                }
            }
            Ok(())
        }
        Command::AttnExport {
            config,
            ckpt,
            image_index,
            out_dir,
        } => {
            let common = Common {
                config,
                seed: None,
                method: None,
                variant: None,
            };
            let cfg = load_config(&common, Stage::Other)?;
            let model = Checkpoint::load(&ckpt)?.to_model()?;
            let val = cfg.dataset(&cfg.val_data)?;
            let Some(image) = val.images.get(image_index) else {
                return Err(Error::Config(format!(
                    "image index {image_index} out of range, validation set has {} images",
                    val.images.len()
                ))
                .into());
            };
            let export = export_attention(&model, image, &out_dir)?;
            println!("{}", export.summary());
            Ok(())
        }
        Command::ReportParams { common, json } => {
            let cfg = load_config(&common, Stage::Other)?;
            let c = param_count(&cfg.backbone, &cfg.method)?;
            if json {
                let mut v = serde_json::to_value(c)?;
                v["method"] = cfg.method.kind.name().into();
                println!("{v}");
            } else {
                println!(
                    "{:<14} {:>12} {:>12} {:>9}",
                    "method", "trainable", "total", "fraction"
                );
                println!(
                    "{:<14} {:>12} {:>12} {:>8.3}%",
                    cfg.method.kind.name(),
                    c.trainable,
                    c.total,
                    100.0 * c.fraction
                );
            }
            Ok(())
        }
        Command::ReportFlops { common, json } => {
            let cfg = load_config(&common, Stage::Other)?;
            let f = flops_estimate(&cfg.backbone, &cfg.method)?;
            if json {
                let mut v = serde_json::to_value(f)?;
                v["method"] = cfg.method.kind.name().into();
                v["variant"] = cfg.method.variant.name().into();
                println!("{v}");
            } else {
                println!(
                    "{:<14} {:<8} {:>8} {:>10} {:>7}",
                    "method", "variant", "relative", "feedback", "blocks"
                );
                println!(
                    "{:<14} {:<8} {:>7.3}x {:>9.4}x {:>7}",
                    cfg.method.kind.name(),
                    cfg.method.variant.name(),
                    f.relative,
                    f.feedback_overhead,
                    f.blocks_executed
                );
            }
            Ok(())
        }
    }
}

/// 3 for numeric blow-ups, 2 for every other library error (bad config,
/// missing or damaged files), 1 otherwise.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Divergence { .. } | Error::NonFinite { .. }) => 3,
        Some(_) => 2,
        None => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli).context("toast failed") {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
