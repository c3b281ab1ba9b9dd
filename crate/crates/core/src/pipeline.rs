//! The pretrain, pretune and tune stages as driven by a [`RunConfig`].
//! Each stage is a pure function of the config and its input parameters.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::BackboneParams;
use crate::binio::write_atomic;
use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::topdown::{FeedbackVariant, TopDownParams};
use crate::training::{self, evaluate, MethodConfig, MethodKind, Model, TrainReport};

/// Metadata key holding the validation accuracy measured after tuning.
pub const VAL_ACCURACY_KEY: &str = "val_accuracy";
pub const STAGE_KEY: &str = "stage";

pub struct StageOutput {
    pub model: Model<f32>,
    pub report: TrainReport,
    pub val_accuracy: Option<f64>,
}

impl StageOutput {
    /// Checkpoint of the model tagged with the stage and, after tuning, the
    /// validation accuracy.
    pub fn checkpoint(&self, stage: &str) -> Checkpoint {
        let mut ck = Checkpoint::from_model(&self.model);
        ck.metadata.insert(STAGE_KEY.into(), stage.into());
        if let Some(acc) = self.val_accuracy {
            ck.metadata
                .insert(VAL_ACCURACY_KEY.into(), format!("{acc:?}"));
        }
        ck
    }
}

fn check_labels(ds: &Dataset, n_classes: usize, what: &str) -> Result<()> {
    match ds.images.iter().map(|im| im.label).max() {
        Some(top) if top >= n_classes => Err(Error::Config(format!(
            "[{what}] has label {top} but the classifier has {n_classes} classes"
        ))),
        _ => Ok(()),
    }
}

/// Supervised training of a fresh backbone on `pretrain_data`.
pub fn pretrain(cfg: &RunConfig) -> Result<StageOutput> {
    let data = cfg.dataset(&cfg.pretrain_data)?;
    check_labels(&data, cfg.backbone.n_classes, "pretrain_data")?;
    let (backbone, report) = training::pretrain_backbone(&cfg.backbone, &data, &cfg.pretrain)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.pretrain.seed);
    let model = Model::new(
        backbone,
        MethodConfig::of(MethodKind::FullFinetune),
        &mut rng,
    )?;
    Ok(StageOutput {
        model,
        report,
        val_accuracy: None,
    })
}

/// Trains a fresh top-down module for `cfg.method` on `pretune_data`,
/// keeping `backbone` and its head fixed.
pub fn pretune(cfg: &RunConfig, backbone: BackboneParams<f32>) -> Result<StageOutput> {
    let kind = cfg.method.kind;
    if !kind.uses_topdown() {
        return Err(Error::Config(format!(
            "pretune needs toast or toast_lite, not {kind}"
        )));
    }
    let data = cfg.dataset(&cfg.pretune_data)?;
    check_labels(&data, backbone.config.n_classes, "pretune_data")?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.pretune.seed);
    let variant = FeedbackVariant::new(cfg.method.variant, backbone.config.layers)?;
    // Pre-tuning trains the full feedback path for both methods; toast_lite
    // gets its low-rank deltas when the model is assembled.
    let td = TopDownParams::init(&backbone.config, variant, &mut rng)?;
    let (td, report) = training::pretune(&backbone, td, &data, &cfg.pretune)?;
    let model = Model::with_topdown(backbone, cfg.method.clone(), td, &mut rng)?;
    Ok(StageOutput {
        model,
        report,
        val_accuracy: None,
    })
}

/// Fits `cfg.method` on `train_data` with a fresh head and reports
/// `val_data` accuracy. A pre-tuned module is used when the method has one.
pub fn tune(
    cfg: &RunConfig,
    backbone: BackboneParams<f32>,
    pretuned: Option<TopDownParams<f32>>,
) -> Result<StageOutput> {
    let train = cfg.dataset(&cfg.train_data)?;
    let val = cfg.dataset(&cfg.val_data)?;
    let n_classes = train.n_classes.max(val.n_classes);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.tune.seed);
    let mut backbone = backbone;
    backbone.reset_head(n_classes, &mut rng);
    let mut model = match pretuned {
        Some(td) if cfg.method.kind.uses_topdown() => {
            Model::with_topdown(backbone, cfg.method.clone(), td, &mut rng)?
        }
        _ => Model::new(backbone, cfg.method.clone(), &mut rng)?,
    };
    let report = training::tune(&mut model, &train, Some(&val), &cfg.tune)?;
    let val_accuracy = report
        .final_val_accuracy()
        .or(Some(evaluate(&model, &val)?));
    Ok(StageOutput {
        model,
        report,
        val_accuracy,
    })
}

/// Validation accuracy of a saved model.
pub fn eval(cfg: &RunConfig, ck: &Checkpoint) -> Result<f64> {
    let model = ck.to_model()?;
    evaluate(&model, &cfg.dataset(&cfg.val_data)?)
}

/// The accuracy recorded at save time, if any.
pub fn recorded_accuracy(ck: &Checkpoint) -> Result<Option<f64>> {
    ck.metadata
        .get(VAL_ACCURACY_KEY)
        .map(|v| {
            v.parse().map_err(|_| {
                Error::Config(format!(
                    "metadata `{VAL_ACCURACY_KEY}` is not a number: {v}"
                ))
            })
        })
        .transpose()
}

/// Writes [`metrics_tsv`] to `path`.
pub fn write_metrics(report: &TrainReport, path: &Path) -> Result<()> {
    write_atomic(path, metrics_tsv(report).as_bytes())
}

/// Tab-separated per-epoch table with one header line. The validation
/// column is present only when the stage measured it.
pub fn metrics_tsv(report: &TrainReport) -> String {
    let with_val = report.epochs.iter().any(|e| e.val_accuracy.is_some());
    let mut out = String::from("epoch\tloss\ttrain_accuracy");
    if with_val {
        out.push_str("\tval_accuracy");
    }
    out.push('\n');
    for e in &report.epochs {
        out.push_str(&format!(
            "{}\t{:.6}\t{:.6}",
            e.epoch, e.loss, e.train_accuracy
        ));
        if with_val {
            out.push_str(&format!("\t{:.6}", e.val_accuracy.unwrap_or(f64::NAN)));
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::training::EpochMetrics;

    #[test]
    fn metrics_table_has_header_and_rows() {
        let report = TrainReport {
            epochs: vec![
                EpochMetrics {
                    epoch: 1,
                    loss: 2.0,
                    train_accuracy: 0.25,
                    val_accuracy: Some(0.5),
                },
                EpochMetrics {
                    epoch: 2,
                    loss: 1.0,
                    train_accuracy: 0.75,
                    val_accuracy: Some(1.0),
                },
            ],
        };
        let text = metrics_tsv(&report);
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "epoch\tloss\ttrain_accuracy\tval_accuracy");
        assert_eq!(lines[2], "2\t1.000000\t0.750000\t1.000000");
        assert!(!metrics_tsv(&TrainReport::default()).contains("val"));
    }
}
