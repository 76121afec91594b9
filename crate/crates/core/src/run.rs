//! Whole runs driven by a [`RunConfig`]: training, rebuilding a model from a
//! checkpoint, and artifact output.

use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::network::Model;
use crate::skeleton::Dataset;
use crate::tensor::Scalar;
use crate::train::{run_pls, write_metrics_csv, Checkpoint, MetricRow, PlsReport, PlsSchedule};

/// Trains the configured model: one stage, or the whole progressive
/// schedule when `pls.enabled` is set.
pub fn run_training<T: Scalar>(
    cfg: &RunConfig,
    ds: &Dataset,
    on_row: &mut dyn FnMut(usize, &MetricRow),
) -> Result<PlsReport> {
    cfg.validate()?;
    let graph = cfg.graph()?;
    if graph.n_joints() != ds.n_joints {
        return Err(Error::config(format!(
            "graph `{}` has {} joints but the dataset has {}",
            graph.name(),
            graph.n_joints(),
            ds.n_joints
        )));
    }
    let schedule = if cfg.pls.enabled {
        cfg.pls_schedule()?
    } else {
        PlsSchedule::new(vec![cfg.model.grid], None, cfg.train.epochs)?
    };
    let n_classes = ds.n_classes();
    let seed = cfg.train.seed;
    let build = |grids: &[_]| cfg.model.build::<T>(&graph, n_classes, grids, seed);
    run_pls(&schedule, ds, &cfg.train, &build, &cfg.to_json(), &cfg.hash(), on_row)
}

/// Rebuilds the model a checkpoint was trained as and loads every tensor.
pub fn model_from_checkpoint<T: Scalar>(ckpt: &Checkpoint) -> Result<(RunConfig, Model<T>)> {
    let cfg: RunConfig = serde_json::from_value(ckpt.meta.config.clone())
        .map_err(|e| Error::Load(format!("embedded config: {e}")))?;
    let graph = cfg.graph()?;
    let n_classes = ckpt
        .tensors
        .get("head.bias")
        .map(|t| t.shape()[0])
        .ok_or_else(|| Error::Load("checkpoint has no head.bias".into()))?;
    let mut model = cfg.model.build::<T>(&graph, n_classes, &ckpt.meta.stages, cfg.train.seed)?;
    ckpt.apply(&mut model, true)?;
    if let Some(c) = &mut model.cascade {
        c.freeze_prefix(c.len())?;
    }
    Ok((cfg, model))
}

/// Writes `stage{k}.sk2g` and `stage{k}_metrics.csv` per stage, plus
/// `model.sk2g` / `metrics.csv` for the final stage.
pub fn write_run_artifacts(report: &PlsReport, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (k, s) in report.stages.iter().enumerate() {
        s.checkpoint.save(dir.join(format!("stage{}.sk2g", k + 1)))?;
        write_metrics_csv(dir.join(format!("stage{}_metrics.csv", k + 1)), &s.history)?;
    }
    let last = report.stages.last().expect("at least one stage");
    last.checkpoint.save(dir.join("model.sk2g"))?;
    write_metrics_csv(dir.join("metrics.csv"), &last.history)?;
    Ok(())
}

/// Final validation top-1 of a report.
pub fn final_top1(report: &PlsReport) -> f64 {
    report
        .stages
        .last()
        .and_then(|s| s.history.iter().rev().find(|r| r.split == crate::skeleton::Split::Val))
        .map_or(0.0, |r| r.top1)
}
