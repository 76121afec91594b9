//! Multi-seed comparison of the design switches.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::network::ModelKind;
use crate::run::{final_top1, run_training, write_run_artifacts};
use crate::skeleton::Dataset;
use crate::tensor::Scalar;
use crate::transform::GitMode;

pub const STANDARD_ARMS: [&str; 4] = ["gcn-baseline", "git-only", "git+upt", "git+upt+pls"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Arm {
    /// Graph convolution on the raw skeleton.
    GcnBaseline,
    /// Surjective index transform straight from the joints.
    GitOnly,
    /// Adjacency-regulated up-sampling followed by a bijective index transform.
    GitUpt,
    /// `GitUpt` trained over the progressive grid schedule.
    GitUptPls,
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gcn-baseline" => Ok(Arm::GcnBaseline),
            "git-only" => Ok(Arm::GitOnly),
            "git+upt" => Ok(Arm::GitUpt),
            "git+upt+pls" => Ok(Arm::GitUptPls),
            other => Err(Error::config(format!(
                "unknown ablation arm `{other}` (expected one of {})",
                STANDARD_ARMS.join(", ")
            ))),
        }
    }
}

impl Arm {
    /// The base configuration with this arm's switches applied.
    pub fn configure(self, base: &RunConfig) -> RunConfig {
        let mut cfg = base.clone();
        let m = &mut cfg.model;
        cfg.pls.enabled = false;
        match self {
            Arm::GcnBaseline => m.kind = ModelKind::GcnBaseline,
            Arm::GitOnly => {
                m.kind = ModelKind::Ske2grid;
                m.use_upt = false;
                m.use_adjacency = false;
                m.git_mode = GitMode::Surjective;
            }
            Arm::GitUpt | Arm::GitUptPls => {
                m.kind = ModelKind::Ske2grid;
                m.use_upt = true;
                m.use_adjacency = true;
                m.git_mode = GitMode::Bijective;
                if self == Arm::GitUptPls {
                    cfg.pls.enabled = true;
                    cfg.pls.stages = base.ablation.pls_stages.clone();
                    cfg.model.grid = cfg.pls.stages[0];
                }
            }
        }
        cfg
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmRun {
    pub arm: String,
    pub seed: u64,
    pub top1: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArmSummary {
    pub arm: String,
    pub mean: f64,
    /// Sample standard deviation (0 for a single seed).
    pub std: f64,
    pub runs: usize,
}

/// Outcome of comparing two arms' mean accuracy.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trend {
    /// The expected ordering holds outside one standard deviation.
    Holds,
    /// The means differ by less than one standard deviation.
    Inconclusive,
    /// The ordering is reversed by more than one standard deviation.
    Violated,
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationReport {
    pub runs: Vec<ArmRun>,
    pub summaries: Vec<ArmSummary>,
}

impl AblationReport {
    fn from_runs(arms: &[String], runs: Vec<ArmRun>) -> Self {
        let summaries = arms
            .iter()
            .map(|a| {
                let v: Vec<f64> = runs.iter().filter(|r| &r.arm == a).map(|r| r.top1).collect();
                let n = v.len();
                let mean = v.iter().sum::<f64>() / n.max(1) as f64;
                let std = if n > 1 {
                    (v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
                } else {
                    0.0
                };
                ArmSummary { arm: a.clone(), mean, std, runs: n }
            })
            .collect();
        AblationReport { runs, summaries }
    }

    pub fn summary(&self, arm: &str) -> Option<&ArmSummary> {
        self.summaries.iter().find(|s| s.arm == arm)
    }

    /// Whether `better` beats or matches `worse`; a gap within the larger of
    /// the two standard deviations is inconclusive.
    pub fn trend(&self, better: &str, worse: &str) -> Option<Trend> {
        let (b, w) = (self.summary(better)?, self.summary(worse)?);
        let tol = b.std.max(w.std);
        Some(if b.mean >= w.mean && (b.mean - w.mean > tol || tol == 0.0) {
            Trend::Holds
        } else if (b.mean - w.mean).abs() <= tol {
            Trend::Inconclusive
        } else {
            Trend::Violated
        })
    }

    pub fn runs_csv(&self) -> String {
        let mut s = String::from("arm,seed,top1\n");
        for r in &self.runs {
            let _ = writeln!(s, "{},{},{}", r.arm, r.seed, r.top1);
        }
        s
    }

    pub fn summary_csv(&self) -> String {
        let mut s = String::from("arm,mean_top1,std_top1,runs\n");
        for a in &self.summaries {
            let _ = writeln!(s, "{},{},{},{}", a.arm, a.mean, a.std, a.runs);
        }
        s
    }

    /// Human-readable table, one row per arm.
    pub fn table(&self) -> String {
        let mut s = format!("{:<14} {:>8} {:>8} {:>5}\n", "arm", "mean", "std", "runs");
        for a in &self.summaries {
            let _ = writeln!(s, "{:<14} {:>7.2}% {:>7.2}% {:>5}", a.arm, 100.0 * a.mean, 100.0 * a.std, a.runs);
        }
        s
    }
}

/// Directory name of every arm; repeated arms get a numeric suffix.
fn arm_labels(arms: &[String]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for a in arms {
        let mut label = a.clone();
        let mut k = 2;
        while out.contains(&label) {
            label = format!("{a}-{k}");
            k += 1;
        }
        out.push(label);
    }
    out
}

/// Trains every arm on every seed of `base.ablation`. All arm configs are
/// checked before the first run. Runs execute in parallel when `parallel`
/// is set (each run itself stays single-threaded); results are ordered by
/// arm, then seed. With `out_dir`, each run writes its artifacts to
/// `out_dir/<arm>/seed<s>/` and the reports go to `out_dir`.
pub fn run_ablation<T: Scalar>(
    base: &RunConfig,
    ds: &Dataset,
    out_dir: Option<&Path>,
    parallel: bool,
) -> Result<AblationReport> {
    let ab = &base.ablation;
    if ab.arms.is_empty() || ab.seeds.is_empty() {
        return Err(Error::config("ablation needs at least one arm and one seed"));
    }
    let graph = base.graph()?;
    let labels = arm_labels(&ab.arms);
    let mut configs = Vec::new();
    for name in &ab.arms {
        let cfg = name.parse::<Arm>()?.configure(base);
        cfg.validate()?;
        cfg.model
            .build::<T>(&graph, ds.n_classes(), &cfg.grids(), 0)
            .map_err(|e| Error::config(format!("arm `{name}`: {e}")))?;
        configs.push(cfg);
    }
    let jobs: Vec<(usize, u64)> = (0..configs.len()).flat_map(|a| ab.seeds.iter().map(move |&s| (a, s))).collect();
    let run = |&(a, seed): &(usize, u64)| -> Result<ArmRun> {
        let mut cfg = configs[a].clone();
        cfg.train.seed = seed;
        let report = run_training::<T>(&cfg, ds, &mut |_, _| {})?;
        if let Some(dir) = out_dir {
            write_run_artifacts(&report, &dir.join(&labels[a]).join(format!("seed{seed}")))?;
        }
        Ok(ArmRun { arm: labels[a].clone(), seed, top1: final_top1(&report) })
    };
    let runs: Vec<ArmRun> = if parallel {
        jobs.par_iter().map(run).collect::<Result<_>>()?
    } else {
        jobs.iter().map(run).collect::<Result<_>>()?
    };
    let report = AblationReport::from_runs(&labels, runs);
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("ablation_runs.csv"), report.runs_csv())?;
        std::fs::write(dir.join("ablation_summary.csv"), report.summary_csv())?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(values: &[(&str, f64)]) -> AblationReport {
        let arms: Vec<String> = values.iter().map(|v| v.0.to_string()).collect::<Vec<_>>();
        let mut uniq = arms.clone();
        uniq.dedup();
        let runs = values.iter().enumerate().map(|(i, v)| ArmRun { arm: v.0.into(), seed: i as u64, top1: v.1 }).collect();
        AblationReport::from_runs(&uniq, runs)
    }

    #[test]
    fn summaries_and_trend() {
        let r = report(&[("a", 0.8), ("a", 0.9), ("b", 0.5), ("b", 0.6)]);
        let a = r.summary("a").unwrap();
        assert!((a.mean - 0.85).abs() < 1e-12);
        assert!((a.std - 0.05f64.hypot(0.05)).abs() < 1e-12);
        assert_eq!(r.trend("a", "b"), Some(Trend::Holds));
        assert_eq!(r.trend("b", "a"), Some(Trend::Violated));
        let r = report(&[("a", 0.8), ("a", 0.9), ("b", 0.84), ("b", 0.86)]);
        assert_eq!(r.trend("b", "a"), Some(Trend::Inconclusive));
        assert!(r.runs_csv().starts_with("arm,seed,top1\na,0,0.8\n"));
    }

    #[test]
    fn arm_switches() {
        let base = RunConfig::default();
        let g = Arm::GitOnly.configure(&base);
        assert!(!g.model.use_upt && g.model.git_mode == GitMode::Surjective);
        let p = Arm::GitUptPls.configure(&base);
        assert!(p.pls.enabled && p.grids().len() == 2);
        assert!("git+upt+pls".parse::<Arm>().is_ok() && "pls".parse::<Arm>().is_err());
        assert_eq!(arm_labels(&["a".into(), "a".into()]), vec!["a", "a-2"]);
    }
}
