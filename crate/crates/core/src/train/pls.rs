use super::{train_stage, Checkpoint, CheckpointMeta, LoadReport, MetricRow, TrainConfig};
use crate::error::{Error, Result};
use crate::network::Model;
use crate::tensor::Scalar;
use crate::transform::{lambda_name, psi_name, GridSize};

/// Growing grid sizes, trained one stage at a time.
#[derive(Clone, Debug, PartialEq)]
pub struct PlsSchedule {
    pub grids: Vec<GridSize>,
    pub stage_epochs: Vec<usize>,
}

impl PlsSchedule {
    /// `stage_epochs` defaults to `epochs` for every stage.
    pub fn new(grids: Vec<GridSize>, stage_epochs: Option<Vec<usize>>, epochs: usize) -> Result<Self> {
        let stage_epochs = stage_epochs.unwrap_or_else(|| vec![epochs; grids.len()]);
        let s = PlsSchedule { grids, stage_epochs };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if self.grids.is_empty() {
            return Err(Error::config("grid schedule is empty"));
        }
        if self.stage_epochs.len() != self.grids.len() {
            return Err(Error::config(format!(
                "{} per-stage epoch counts for {} stages",
                self.stage_epochs.len(),
                self.grids.len()
            )));
        }
        if self.stage_epochs.contains(&0) {
            return Err(Error::config("every stage needs at least one epoch"));
        }
        for (k, w) in self.grids.windows(2).enumerate() {
            if w[1].cells() <= w[0].cells() {
                return Err(Error::config(format!(
                    "stage {} grid {} does not have more cells than stage {} grid {}",
                    k + 2,
                    w[1],
                    k + 1,
                    w[0]
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct StageReport {
    pub grid: GridSize,
    pub history: Vec<MetricRow>,
    pub checkpoint: Checkpoint,
    /// Warm-start outcome (absent for the first stage).
    pub warm_start: Option<LoadReport>,
}

#[derive(Clone, Debug)]
pub struct PlsReport {
    pub stages: Vec<StageReport>,
}

impl PlsReport {
    pub fn final_checkpoint(&self) -> &Checkpoint {
        &self.stages.last().expect("at least one stage").checkpoint
    }
}

/// Builds the model for stage `k` (0-based): a fresh model over
/// `grids[..=k]`, warm-started from `prev` and with stages `1..=k` frozen.
/// Every stored tensor must load with its exact shape.
pub fn prepare_stage<T: Scalar>(
    build: &dyn Fn(&[GridSize]) -> Result<Model<T>>,
    grids: &[GridSize],
    k: usize,
    prev: Option<&Checkpoint>,
) -> Result<(Model<T>, Option<LoadReport>)> {
    let mut model = build(&grids[..=k])?;
    let Some(prev) = prev else { return Ok((model, None)) };
    let report = prev.apply(&mut model, false)?;
    if !report.unused.is_empty() {
        return Err(Error::Load(format!("warm start left tensors unused: {}", report.unused.join(", "))));
    }
    let fresh = format!("stage{}.", k + 1);
    if let Some(bad) = report.missing.iter().find(|n| !n.starts_with(&fresh)) {
        return Err(Error::Load(format!("warm start did not provide {bad}")));
    }
    if let Some(c) = &mut model.cascade {
        c.freeze_prefix(k)?;
    }
    Ok((model, Some(report)))
}

/// Trains the schedule stage by stage. Stage 1 learns cascade and network
/// jointly; each later stage appends a transform pair, freezes every
/// earlier pair, warm-starts the network from the previous checkpoint and
/// trains again. The whole chain is built once up front so shape errors
/// surface before any training.
pub fn run_pls<T: Scalar>(
    schedule: &PlsSchedule,
    ds: &crate::skeleton::Dataset,
    cfg: &TrainConfig,
    build: &dyn Fn(&[GridSize]) -> Result<Model<T>>,
    config: &serde_json::Value,
    config_hash: &str,
    on_stage_row: &mut dyn FnMut(usize, &MetricRow),
) -> Result<PlsReport> {
    schedule.validate()?;
    cfg.validate()?;
    build(&schedule.grids)?;
    let mut stages: Vec<StageReport> = Vec::new();
    for (k, &grid) in schedule.grids.iter().enumerate() {
        let prev = stages.last().map(|s| &s.checkpoint);
        let (mut model, warm_start) = prepare_stage(build, &schedule.grids, k, prev)?;
        let stage_cfg = TrainConfig { epochs: schedule.stage_epochs[k], seed: cfg.seed.wrapping_add(k as u64), ..cfg.clone() };
        let history = train_stage(&mut model, ds, &stage_cfg, &mut |row| on_stage_row(k + 1, row))?;
        let frozen = (0..k).flat_map(|j| [lambda_name(j), psi_name(j)]).collect();
        let meta = CheckpointMeta {
            kind: model.kind(),
            grid,
            stages: schedule.grids[..=k].to_vec(),
            stage_index: k + 1,
            frozen,
            config_hash: config_hash.to_owned(),
            config: config.clone(),
            metrics: history.clone(),
        };
        let mut checkpoint = Checkpoint::from_model(&mut model, meta)?;
        let stored = &checkpoint.tensors;
        checkpoint.meta.frozen.retain(|n| stored.contains_key(n));
        stages.push(StageReport { grid, history, checkpoint, warm_start });
    }
    Ok(PlsReport { stages })
}
