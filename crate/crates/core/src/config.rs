//! Experiment configuration: presets, ablation flags and schema validation.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::data::GeneratorConfig;
use crate::error::{Error, Result};
use crate::model::{AdamWConfig, DEFAULT_TAU};
use crate::router::RoutingMode;
use crate::tensor::KeyStrategy;

/// Where the dataset comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    Generate(GeneratorConfig),
    Fixture(PathBuf),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Train/eval split shuffle.
    pub data: u64,
    /// Frozen head, static keys and expert initialization.
    pub model: u64,
    /// k-means++ seeding, random routing and batch order.
    pub clustering: u64,
}

/// Components removed for ablations. Rows of the ablation lattice remove them cumulatively.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Capacity large enough that no token is ever dropped.
    pub no_capacity: bool,
    /// Clusters matched to the (moving) experts instead of static keys.
    pub no_static_keys: bool,
    /// Tokens sent to uniformly random experts instead of being clustered.
    pub random_assignment: bool,
    /// KL debiasing term disabled.
    pub no_kl: bool,
}

impl Ablation {
    /// The five cumulative rows: full, −capacity, −keys, −cluster, −KL.
    pub fn lattice() -> [(&'static str, Ablation); 5] {
        let none = Ablation::default();
        let cap = Ablation { no_capacity: true, ..none };
        let keys = Ablation { no_static_keys: true, ..cap };
        let cluster = Ablation { random_assignment: true, ..keys };
        let kl = Ablation { no_kl: true, ..cluster };
        [("full", none), ("-capacity", cap), ("-keys", keys), ("-cluster", cluster), ("-kl", kl)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Four experts of 32 prompt tokens.
    Trip,
    /// Two experts of one prompt token.
    TripLite,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "trip" => Ok(Preset::Trip),
            "trip-lite" => Ok(Preset::TripLite),
            other => Err(Error::config("preset", format!("unknown preset `{other}` (expected trip or trip-lite)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub experts: usize,
    pub prompt_len: usize,
    pub dim: usize,
    pub train_alpha: f64,
    pub inference_alpha: f64,
    pub beta: f64,
    pub tau: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub rounds: usize,
    pub local_epochs: usize,
    pub key_strategy: KeyStrategy,
    /// Standard deviation of the initial expert entries.
    pub expert_init_std: f64,
    pub data: DataSource,
    pub target_domain: usize,
    pub eval_fraction: f64,
    pub seeds: Seeds,
    pub ablation: Ablation,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            experts: 4,
            prompt_len: 32,
            dim: 64,
            train_alpha: 1.0,
            inference_alpha: 2.0,
            beta: 0.8,
            tau: DEFAULT_TAU,
            lr: 4e-4,
            weight_decay: 0.01,
            batch_size: 16,
            rounds: 15,
            local_epochs: 1,
            key_strategy: KeyStrategy::Orthogonal,
            expert_init_std: 0.02,
            data: DataSource::Generate(GeneratorConfig::default()),
            target_domain: 3,
            eval_fraction: 0.1,
            seeds: Seeds::default(),
            ablation: Ablation::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn preset(preset: Preset) -> Self {
        let mut cfg = Self::default();
        cfg.apply_preset(preset);
        cfg
    }

    pub fn apply_preset(&mut self, preset: Preset) {
        (self.experts, self.prompt_len) = match preset {
            Preset::Trip => (4, 32),
            Preset::TripLite => (2, 1),
        };
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::Format {
            context: "config".into(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    /// Parameters one client uploads per round: `M·L·D`.
    pub fn uplink_params_per_client(&self) -> usize {
        self.experts * self.prompt_len * self.dim
    }

    pub fn routing_mode(&self) -> RoutingMode {
        if self.ablation.random_assignment {
            RoutingMode::Random
        } else if self.ablation.no_static_keys {
            RoutingMode::ExpertKeys
        } else {
            RoutingMode::StaticKeys
        }
    }

    pub fn effective_beta(&self) -> f64 {
        if self.ablation.no_kl {
            0.0
        } else {
            self.beta
        }
    }

    /// Training capacity factor; `M` when capacity is ablated, so `s = N+1`.
    pub fn effective_train_alpha(&self) -> f64 {
        if self.ablation.no_capacity {
            self.experts as f64
        } else {
            self.train_alpha
        }
    }

    pub fn effective_inference_alpha(&self) -> f64 {
        if self.ablation.no_capacity {
            self.experts as f64
        } else {
            self.inference_alpha
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }

    /// Checks every field, reporting all problems with their paths.
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        let mut nested = Vec::new();
        let mut check = |ok: bool, field: &str, msg: &str| {
            if !ok {
                errs.push(Error::config(field, msg));
            }
        };
        let positive = |v: f64| v > 0.0 && v.is_finite();
        let non_negative = |v: f64| v >= 0.0 && v.is_finite();
        check(self.experts >= 1, "experts", "must be at least 1");
        check(self.prompt_len >= 1, "prompt_len", "must be at least 1");
        check(self.dim >= 1, "dim", "must be at least 1");
        check(positive(self.train_alpha), "train_alpha", "must be positive");
        check(positive(self.inference_alpha), "inference_alpha", "must be positive");
        check(non_negative(self.beta), "beta", "must be non-negative");
        check(positive(self.tau), "tau", "must be positive");
        check(non_negative(self.lr), "lr", "must be non-negative");
        check(non_negative(self.weight_decay), "weight_decay", "must be non-negative");
        check(self.batch_size >= 1, "batch_size", "must be at least 1");
        check(non_negative(self.expert_init_std), "expert_init_std", "must be non-negative");
        check((0.0..1.0).contains(&self.eval_fraction), "eval_fraction", "must lie in [0, 1)");
        check(
            self.key_strategy != KeyStrategy::Orthogonal || self.experts <= self.dim,
            "key_strategy",
            "orthogonal keys need experts <= dim",
        );
        if let DataSource::Generate(gen) = &self.data {
            if let Err(e) = gen.validate() {
                nested = prefixed("data.generate", e);
            }
            check(gen.dim == self.dim, "data.generate.dim", "must equal dim");
            check(gen.tokens >= self.experts, "data.generate.tokens", "need at least one token per expert");
            check(gen.domains.len() >= 2, "data.generate.domains", "leave-one-domain-out needs at least two domains");
            check(
                gen.domains.iter().any(|d| d.id == self.target_domain),
                "target_domain",
                "not among the generated domains",
            );
        }
        errs.extend(nested);
        match errs.len() {
            0 => Ok(()),
            1 => Err(errs.pop().expect("one error")),
            _ => Err(Error::ConfigList(errs)),
        }
    }
}

fn prefixed(prefix: &str, err: Error) -> Vec<Error> {
    match err {
        Error::Config { field, message } => vec![Error::config(format!("{prefix}.{field}"), message)],
        Error::ConfigList(list) => list.into_iter().flat_map(|e| prefixed(prefix, e)).collect(),
        other => vec![other],
    }
}
