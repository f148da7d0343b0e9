//! File-level steps behind the command-line tool: generate a dataset, train
//! a checkpoint, evaluate it, verify gradients.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::config::RunConfig;
use crate::data::{generate, read_jsonl, write_jsonl, SynthSpec};
use crate::error::{Error, Result};
use crate::eval::evaluate;
use crate::gradcheck::{check_model, GradcheckOptions, GradcheckReport};
use crate::metrics::MetricReport;
use crate::model::{AblationFlags, CirModel, ModelConfig};
use crate::train::{train, TrainSummary};

fn ensure_parent(path: &Path) -> Result<()> {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
        }
        _ => Ok(()),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SynthCounts {
    pub train: usize,
    pub val: usize,
}

/// Writes `train.jsonl` and `val.jsonl` into the dataset directory.
pub fn synth(cfg: &RunConfig) -> Result<SynthCounts> {
    cfg.validate()?;
    let (train_set, val) = generate(&cfg.synth)?;
    let dir = &cfg.paths.dataset_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_jsonl(&cfg.paths.train_file(), &train_set)?;
    write_jsonl(&cfg.paths.val_file(), &val)?;
    Ok(SynthCounts {
        train: train_set.len(),
        val: val.len(),
    })
}

/// Trains on the dataset's train split, streaming one JSON line per epoch to
/// the train log, and writes the final checkpoint.
pub fn train_run(cfg: &RunConfig) -> Result<TrainSummary> {
    cfg.validate()?;
    let records = read_jsonl(&cfg.paths.train_file())?;
    let mut model = CirModel::new(&cfg.model, &cfg.ablation, cfg.training.seed)?;
    let log_path = &cfg.paths.train_log;
    ensure_parent(log_path)?;
    let mut log = fs::File::create(log_path).map_err(|e| Error::io(log_path, e))?;
    let summary = train(&mut model, &records, cfg, |epoch| {
        writeln!(log, "{}", epoch.to_json_line()).map_err(|e| Error::io(log_path, e))
    })?;
    ensure_parent(&cfg.paths.checkpoint)?;
    model.save(&cfg.paths.checkpoint)?;
    Ok(summary)
}

/// Evaluates a checkpoint, or the untrained model when `checkpoint` is
/// false, on the val split and writes the JSON report and text table.
pub fn eval_run(cfg: &RunConfig, checkpoint: bool) -> Result<MetricReport> {
    cfg.validate()?;
    let val = read_jsonl(&cfg.paths.val_file())?;
    let mut model = CirModel::new(&cfg.model, &cfg.ablation, cfg.training.seed)?;
    if checkpoint {
        model.load(&cfg.paths.checkpoint)?;
    }
    let report = evaluate(&model, &val)?.report;
    let path = &cfg.paths.report;
    ensure_parent(path)?;
    fs::write(path, report.to_json()).map_err(|e| Error::io(path, e))?;
    let text = cfg.paths.report_text();
    fs::write(&text, report.render()).map_err(|e| Error::io(&text, e))?;
    Ok(report)
}

pub const GRADCHECK_D: usize = 8;
pub const GRADCHECK_BATCH: usize = 3;
pub const GRADCHECK_TAC_LAYERS: usize = 2;

/// Gradient check of the full joint loss on a small model built from `cfg`
/// with `d = 8`, `M = 2` and a batch of three generated triplets.
pub fn gradcheck_run(cfg: &RunConfig, options: &GradcheckOptions) -> Result<GradcheckReport> {
    let model_cfg = ModelConfig {
        d: GRADCHECK_D,
        tac_layers: GRADCHECK_TAC_LAYERS,
        ..cfg.model.clone()
    };
    let spec = SynthSpec {
        n_train: GRADCHECK_BATCH,
        n_val: 1,
        ..cfg.synth.clone()
    };
    let check_cfg = RunConfig {
        model: model_cfg,
        synth: spec,
        ..cfg.clone()
    };
    check_cfg.validate()?;
    if let Some(group) = &options.corrupt_group {
        if !crate::model::GROUPS.contains(&group.as_str()) {
            return Err(Error::Config(format!("unknown parameter group {group}")));
        }
    }
    let (records, _) = generate(&check_cfg.synth)?;
    let batch: Vec<_> = records.iter().collect();
    let mut model = CirModel::new(&check_cfg.model, &check_cfg.ablation, cfg.training.seed)?;
    check_model(&mut model, &batch, &check_cfg.loss_options(), options)
}

/// The four objective variants of the ablation report, in table order.
pub fn ablation_variants() -> [(&'static str, AblationFlags); 4] {
    let base = AblationFlags::default();
    [
        (
            "baseline",
            AblationFlags {
                disable_tbia: true,
                disable_ctr: true,
                ..base.clone()
            },
        ),
        (
            "+tbia",
            AblationFlags {
                disable_ctr: true,
                ..base.clone()
            },
        ),
        (
            "+ctr",
            AblationFlags {
                disable_tbia: true,
                ..base.clone()
            },
        ),
        ("full", base),
    ]
}
