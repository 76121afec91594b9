//! Declarative run configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::network::{Model, ModelConfig, ModelKind, Network, Preset};
use crate::skeleton::{
    generate_synthetic, load_dataset, AdjacencyNorm, AdjacencyOptions, Dataset, NoisePreset, SkeletonGraph,
    SynthParams,
};
use crate::tensor::Scalar;
use crate::train::{PlsSchedule, TrainConfig};
use crate::transform::{Cascade, GitMode, GreedyOrder, GridSize, StageConfig};

/// Coordinate noise: a named preset or an explicit standard deviation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Noise {
    Preset(NoisePreset),
    Sigma(f64),
}

impl Noise {
    pub fn sigma(self, amplitude: f64) -> f64 {
        match self {
            Noise::Preset(p) => p.sigma(amplitude),
            Noise::Sigma(s) => s,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    /// Existing dataset file; when absent the synthetic generator runs.
    pub path: Option<PathBuf>,
    pub graph: String,
    pub n_classes: usize,
    pub per_class: usize,
    pub frames: usize,
    pub noise: Noise,
    pub amplitude: f64,
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for DataSection {
    fn default() -> Self {
        DataSection {
            path: None,
            graph: "chain17".into(),
            n_classes: 5,
            per_class: 100,
            frames: 32,
            noise: Noise::Preset(NoisePreset::Moderate),
            amplitude: 1.0,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl DataSection {
    pub fn synth_params(&self) -> SynthParams {
        let mut p = SynthParams::new(
            self.n_classes,
            self.per_class,
            self.frames,
            self.noise.sigma(self.amplitude),
            self.seed,
        );
        p.amplitude = self.amplitude;
        p.val_fraction = self.val_fraction;
        p
    }

    /// Loads `path` or generates the synthetic set.
    pub fn dataset(&self) -> Result<Dataset> {
        match &self.path {
            Some(p) => load_dataset(p),
            None => generate_synthetic(&SkeletonGraph::builtin(&self.graph)?, &self.synth_params()),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub kind: ModelKind,
    pub preset: Preset,
    /// Grid of single-stage training.
    pub grid: GridSize,
    pub use_upt: bool,
    pub use_adjacency: bool,
    pub git_mode: GitMode,
    pub greedy: GreedyOrder,
    pub self_loops: bool,
    pub adjacency_norm: AdjacencyNorm,
    pub learnable_lambda: bool,
    pub learnable_psi: bool,
    /// Upper bound (times `1/N`) of the random up-sampling rows.
    pub lambda_init_scale: f64,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection {
            kind: ModelKind::Ske2grid,
            preset: Preset::Desk,
            grid: GridSize::new(5, 5),
            use_upt: true,
            use_adjacency: true,
            git_mode: GitMode::Bijective,
            greedy: GreedyOrder::Global,
            self_loops: true,
            adjacency_norm: AdjacencyNorm::None,
            learnable_lambda: true,
            learnable_psi: true,
            lambda_init_scale: 1.0,
        }
    }
}

/// Seed of the `k`-th (0-based) cascade stage.
fn stage_seed(seed: u64, k: usize) -> u64 {
    seed ^ ((k as u64 + 1) << 32)
}

impl ModelSection {
    pub fn adjacency_options(&self) -> AdjacencyOptions {
        AdjacencyOptions { self_loops: self.self_loops, normalize: self.adjacency_norm }
    }

    /// Construction options of the `k`-th (0-based) stage.
    pub fn stage_config(&self, k: usize, grid: GridSize) -> StageConfig {
        StageConfig {
            grid,
            use_upt: self.use_upt,
            use_adjacency: self.use_upt && self.use_adjacency && k == 0,
            git_mode: self.git_mode,
            greedy: self.greedy,
            learnable_lambda: self.learnable_lambda,
            learnable_psi: self.learnable_psi,
            lambda_init_scale: self.lambda_init_scale,
        }
    }

    /// Fresh model whose cascade has one stage per entry of `grids` (the
    /// baseline ignores `grids`).
    pub fn build<T: Scalar>(
        &self,
        graph: &SkeletonGraph,
        n_classes: usize,
        grids: &[GridSize],
        seed: u64,
    ) -> Result<Model<T>> {
        match self.kind {
            ModelKind::GcnBaseline => {
                let cfg = ModelConfig::preset(self.preset, self.kind, GridSize::new(1, graph.n_joints()), n_classes);
                let net = Network::baseline(cfg, graph.neighbors(self.self_loops), seed)?;
                Model::new(None, net, None)
            }
            ModelKind::Ske2grid => {
                let last = *grids.last().ok_or_else(|| Error::config("at least one grid is required"))?;
                let mut cascade = Cascade::new(graph.n_joints());
                for (k, &g) in grids.iter().enumerate() {
                    cascade.push_stage(&self.stage_config(k, g), stage_seed(seed, k))?;
                }
                let net = Network::new(ModelConfig::preset(self.preset, self.kind, last, n_classes), seed)?;
                let a = (self.use_upt && self.use_adjacency).then(|| graph.adjacency(self.adjacency_options()));
                Model::new(Some(cascade), net, a)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlsSection {
    /// `train` runs the schedule below instead of a single stage.
    pub enabled: bool,
    pub stages: Vec<GridSize>,
    /// Per-stage epochs; defaults to `train.epochs` for every stage.
    pub stage_epochs: Option<Vec<usize>>,
}

impl Default for PlsSection {
    fn default() -> Self {
        PlsSection { enabled: false, stages: vec![GridSize::new(5, 5), GridSize::new(6, 6)], stage_epochs: None }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationSection {
    pub arms: Vec<String>,
    pub seeds: Vec<u64>,
    /// Grid schedule of the progressive arm.
    pub pls_stages: Vec<GridSize>,
}

impl Default for AblationSection {
    fn default() -> Self {
        AblationSection {
            arms: crate::ablation::STANDARD_ARMS.iter().map(|s| s.to_string()).collect(),
            seeds: (0..5).collect(),
            pls_stages: vec![GridSize::new(5, 5), GridSize::new(6, 6)],
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataSection,
    pub model: ModelSection,
    pub train: TrainConfig,
    pub pls: PlsSection,
    pub ablation: AblationSection,
}

impl RunConfig {
    /// Parses TOML; unknown keys and type errors are config errors naming
    /// the offending key path.
    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::new(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::config(format!("at `{path}`: {}", e.into_inner().message().trim()))
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        SkeletonGraph::builtin(&self.data.graph)?;
        if self.data.path.is_none() {
            let p = self.data.synth_params();
            if p.n_classes < 2 || p.n_per_class < 2 || p.frames < 8 || !(p.noise >= 0.0) {
                return Err(Error::config("data: invalid generator settings"));
            }
        }
        if !(self.model.lambda_init_scale >= 0.0) {
            return Err(Error::config("model.lambda_init_scale must be non-negative"));
        }
        PlsSchedule::new(self.pls.stages.clone(), self.pls.stage_epochs.clone(), self.train.epochs)?;
        Ok(())
    }

    pub fn graph(&self) -> Result<SkeletonGraph> {
        SkeletonGraph::builtin(&self.data.graph)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }

    /// SHA-256 of the canonical JSON form, hex encoded.
    pub fn hash(&self) -> String {
        let json = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    /// Schedule used by the progressive trainer.
    pub fn pls_schedule(&self) -> Result<PlsSchedule> {
        PlsSchedule::new(self.pls.stages.clone(), self.pls.stage_epochs.clone(), self.train.epochs)
    }

    /// Grids of a single-stage run (or the whole schedule when progressive
    /// training is enabled).
    pub fn grids(&self) -> Vec<GridSize> {
        if self.pls.enabled {
            self.pls.stages.clone()
        } else {
            vec![self.model.grid]
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let back = RunConfig::from_toml(&cfg.to_toml()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash(), cfg.hash());
        assert_eq!(cfg.hash().len(), 64);
    }

    #[test]
    fn unknown_keys_name_their_path() {
        let err = RunConfig::from_toml("[train]\nlr = 0.1\nlearning_rate = 3\n").unwrap_err();
        assert!(err.is_config());
        assert!(err.to_string().contains("train"), "{err}");
        let err = RunConfig::from_toml("[model]\ngrid = \"5by5\"\n").unwrap_err();
        assert!(err.to_string().contains("model.grid"), "{err}");
    }

    #[test]
    fn partial_documents_use_defaults() {
        let cfg = RunConfig::from_toml("[model]\ngit_mode = \"surjective\"\nuse_upt = false\n[data]\nnoise = 0.3\n").unwrap();
        assert_eq!(cfg.model.git_mode, GitMode::Surjective);
        assert_eq!(cfg.data.noise, Noise::Sigma(0.3));
        assert_eq!(cfg.train.epochs, 30);
        assert_ne!(cfg.hash(), RunConfig::default().hash());
        let cfg = RunConfig::from_toml("[data]\nnoise = \"hard\"\n").unwrap();
        assert_eq!(cfg.data.noise, Noise::Preset(NoisePreset::Hard));
    }

    #[test]
    fn invalid_values_are_config_errors() {
        assert!(RunConfig::from_toml("[train]\nlr = 0.0\n").unwrap_err().is_config());
        assert!(RunConfig::from_toml("[pls]\nstages = [\"6x6\", \"5x5\"]\n").unwrap_err().is_config());
        assert!(RunConfig::from_toml("[data]\ngraph = \"octopus\"\n").unwrap_err().is_config());
    }

    #[test]
    fn builds_both_model_kinds() {
        let cfg = RunConfig::default();
        let g = cfg.graph().unwrap();
        let m = cfg.model.build::<f32>(&g, 5, &cfg.pls.stages, 0).unwrap();
        let c = m.cascade.as_ref().unwrap();
        assert_eq!(c.len(), 2);
        assert!(c.stages()[0].upt.as_ref().unwrap().use_adjacency);
        assert!(!c.stages()[1].upt.as_ref().unwrap().use_adjacency);
        let base = ModelSection { kind: ModelKind::GcnBaseline, ..cfg.model.clone() };
        let b = base.build::<f32>(&g, 5, &[], 0).unwrap();
        assert!(b.cascade.is_none());
    }
}
