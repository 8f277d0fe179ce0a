//! Declarative experiment configuration, loaded from a TOML file.

use std::path::{Path, PathBuf};

use serde::Deserialize;
use stlab_core::error::{Error, Result};
use stlab_core::models::ModelKind;
use stlab_core::training::TrainConfig;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub windows: WindowSpec,
    #[serde(default)]
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainOverrides,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub permutation: PermSpec,
    #[serde(default)]
    pub diagnostics: DiagSpec,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
}

fn default_alpha() -> f64 {
    0.05
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    /// Wide CSV of observations; requires `coords`.
    pub path: Option<PathBuf>,
    pub coords: Option<PathBuf>,
    /// Alternatively a generated dataset.
    pub synth: Option<SynthSpec>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub s: usize,
    pub n: usize,
    #[serde(default)]
    pub corr_len: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowSpec {
    pub t: usize,
    pub t_out: usize,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    /// Subset of the six kinds; all of them when omitted.
    pub models: Option<Vec<String>>,
    pub h: Option<usize>,
    /// Budget-matched width selection instead of a fixed `h`.
    pub target_params: Option<usize>,
    pub k: Option<usize>,
    /// Fixed causal depth for the agnostic CNN; mutually exclusive with the
    /// grid.
    pub t_past: Option<usize>,
    pub t_past_grid: Option<Vec<usize>>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub batch_size: Option<usize>,
    pub momentum: Option<f64>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub rmsprop_alpha: Option<f64>,
    pub epsilon: Option<f64>,
    pub max_epochs: Option<usize>,
    pub early_stop_patience: Option<usize>,
    pub lr_decay_factor: Option<f64>,
    pub lr_decay_patience: Option<usize>,
    pub coupled_l2: Option<bool>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PermSpec {
    #[serde(default)]
    pub enabled: bool,
    #[serde(default = "default_perm_seed")]
    pub seed: u64,
}

fn default_perm_seed() -> u64 {
    1
}

impl Default for PermSpec {
    fn default() -> Self {
        PermSpec {
            enabled: false,
            seed: default_perm_seed(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiagSpec {
    #[serde(default = "default_perms")]
    pub permutations: usize,
    #[serde(default = "default_atdm_k")]
    pub atdm_k: f64,
    #[serde(default = "default_ma_window")]
    pub ma_window: usize,
}

fn default_perms() -> usize {
    999
}

fn default_atdm_k() -> f64 {
    2.0
}

fn default_ma_window() -> usize {
    12
}

impl Default for DiagSpec {
    fn default() -> Self {
        DiagSpec {
            permutations: default_perms(),
            atdm_k: default_atdm_k(),
            ma_window: default_ma_window(),
        }
    }
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        let cfg: ExperimentConfig =
            toml::from_str(&text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        match (&self.dataset.path, &self.dataset.synth) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "dataset: choose either a file path or a synth spec, not both".into(),
                ))
            }
            (None, None) => {
                return Err(Error::Config("dataset: a path or synth spec is required".into()))
            }
            (Some(p), None) => {
                if !p.exists() {
                    return Err(Error::Config(format!("dataset file {} not found", p.display())));
                }
                match &self.dataset.coords {
                    None => {
                        return Err(Error::Config(
                            "dataset.coords is required with a dataset file".into(),
                        ))
                    }
                    Some(c) if !c.exists() => {
                        return Err(Error::Config(format!(
                            "coordinates file {} not found",
                            c.display()
                        )))
                    }
                    _ => {}
                }
            }
            (None, Some(s)) => {
                if s.s == 0 || s.n < 2 {
                    return Err(Error::Config("synth: need s >= 1 and n >= 2".into()));
                }
                if !(s.corr_len >= 0.0) {
                    return Err(Error::Config("synth: corr_len must be >= 0".into()));
                }
            }
        }
        if self.windows.t == 0 || self.windows.t_out == 0 {
            return Err(Error::Config("windows: t and t_out must be positive".into()));
        }
        for name in self.model_names() {
            name.parse::<ModelKind>()
                .map_err(|_| Error::Config(format!("unknown model kind {name:?}")))?;
        }
        if self.model.h.is_some() && self.model.target_params.is_some() {
            return Err(Error::Config("model: h and target_params are mutually exclusive".into()));
        }
        if self.model.t_past.is_some() && self.model.t_past_grid.is_some() {
            return Err(Error::Config(
                "model: t_past and t_past_grid are mutually exclusive".into(),
            ));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} outside (0, 1)", self.alpha)));
        }
        Ok(())
    }

    fn model_names(&self) -> Vec<String> {
        match &self.model.models {
            Some(list) => list.clone(),
            None => ModelKind::ALL.iter().map(|k| k.name().to_string()).collect(),
        }
    }

    pub fn model_kinds(&self) -> Result<Vec<ModelKind>> {
        self.model_names()
            .iter()
            .map(|n| {
                n.parse::<ModelKind>()
                    .map_err(|_| Error::Config(format!("unknown model kind {n:?}")))
            })
            .collect()
    }

    pub fn train_config(&self) -> TrainConfig {
        let d = TrainConfig::default();
        let o = &self.train;
        TrainConfig {
            batch_size: o.batch_size.unwrap_or(d.batch_size),
            momentum: o.momentum.unwrap_or(d.momentum),
            lr: o.lr.unwrap_or(d.lr),
            weight_decay: o.weight_decay.unwrap_or(d.weight_decay),
            rmsprop_alpha: o.rmsprop_alpha.unwrap_or(d.rmsprop_alpha),
            epsilon: o.epsilon.unwrap_or(d.epsilon),
            max_epochs: o.max_epochs.unwrap_or(d.max_epochs),
            early_stop_patience: o.early_stop_patience.unwrap_or(d.early_stop_patience),
            lr_decay_factor: o.lr_decay_factor.unwrap_or(d.lr_decay_factor),
            lr_decay_patience: o.lr_decay_patience.unwrap_or(d.lr_decay_patience),
            coupled_l2: o.coupled_l2.unwrap_or(d.coupled_l2),
            seed: self.seed,
        }
    }
}

/// Annotated configuration template, printed by the `template` subcommand.
pub const TEMPLATE: &str = r#"# Experiment configuration template.
# Exactly one of dataset.path / dataset.synth must be set.

seed = 0                     # master seed; fold/model seeds derive from it
alpha = 0.05
# out_dir = "out"

[dataset]
# path = "series.csv"        # wide CSV: timestamp column + one column per location
# coords = "coords.csv"      # sidecar: name,x,y

[dataset.synth]              # generated dataset (remove to use files above)
s = 25                       # locations, laid out on a square grid
n = 2000                     # timesteps
corr_len = 0.0               # spatial correlation length in grid units; 0 = independent
seed = 0

[windows]
t = 12                       # input window length
t_out = 3                    # forecast horizon

[model]
# models = ["A-CNN", "CNN", "A-ConvLSTM", "ConvLSTM", "A-GCN-LSTM", "GCN-LSTM"]
h = 4                        # hidden width; or use target_params for budget matching
# target_params = 1200
# k = 3                      # graph hop depth for the GCN variants
# t_past = 3                 # fixed causal depth for A-CNN
# t_past_grid = [2, 3, 5, 7] # or a validation grid search per fold

[train]
# batch_size = 256
# momentum = 0.9
# lr = 1e-3
# weight_decay = 1e-3
# rmsprop_alpha = 0.99
# epsilon = 1e-8
# max_epochs = 200
# early_stop_patience = 10
# lr_decay_factor = 0.5
# lr_decay_patience = 5
# coupled_l2 = false

[permutation]
enabled = false              # spatial permutation experiment
seed = 1

[diagnostics]
permutations = 999           # shuffles per timestep for the spatial p-value
atdm_k = 2.0
ma_window = 12
"#;
