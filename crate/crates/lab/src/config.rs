//! Flat `section.key = value` experiment files.
//!
//! Lines are `key = value`; `#` starts a comment. Lists are comma separated.
//! Every key and its default is listed in [`KEYS`].

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use iib_core::envgen::{CrossLinesSpec, CsCmnistSpec, ImageSpec, ScmSpec};
use iib_core::models::{ArchConfig, DomainConditioning};
use iib_core::objectives::Method;
use iib_core::optim::OptimizerKind;
use iib_core::trainer::{Selection, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};

/// `(key, default, description)` for every recognised key.
pub const KEYS: &[(&str, &str, &str)] = &[
    ("dataset.name", "cs_cmnist", "generator: scm, cs_cmnist, cross_lines, vertical_line"),
    ("dataset.n_per_env", "2000", "samples per training environment (scm, cs_cmnist, vertical_line)"),
    ("dataset.n_per_class", "200", "samples per class and environment (cross_lines)"),
    ("dataset.n_test", "2000", "samples per test environment (scm, cs_cmnist, vertical_line)"),
    ("cs_cmnist.train_p", "1.0,0.9", "color agreement probability of each training environment"),
    ("cs_cmnist.test_p", "0.0", "color agreement probability of each test environment"),
    ("cs_cmnist.content_dim", "16", "content block width"),
    ("cs_cmnist.prototype_scale", "1.0", "norm of each class prototype"),
    ("cs_cmnist.content_noise", "0.5", "std of the content noise"),
    ("cross_lines.p_diag", "0.5", "own-configuration probability p_ii"),
    ("cross_lines.env_strength", "1.0,0.5", "per-environment factor mixing p_ii toward 1/11"),
    ("cross_lines.line_strength", "1.0", "B in the line value 0.5 + 0.5*sign*B"),
    ("image.hw", "8", "image height and width"),
    ("image.texture_amplitude", "0.25", "class texture amplitude"),
    ("image.noise_std", "0.2", "per-pixel noise std"),
    ("image.phase_jitter", "0.6", "per-sample texture phase std (radians)"),
    ("vertical_line.train_b", "-4,0", "line offsets B of the training environments"),
    ("vertical_line.test_b", "-4,-2,0,2,4", "line offsets B of the test environments"),
    ("scm.d_causal", "2", "causal block width"),
    ("scm.d_spurious", "2", "spurious block width"),
    ("scm.causal_mean_scale", "1.0", "causal mean magnitude"),
    ("scm.causal_noise", "1.0", "causal noise std"),
    ("scm.train_means", "2.0,1.0", "spurious mean of each training environment"),
    ("scm.test_means", "-2.0", "spurious mean of each test environment"),
    ("scm.label_prior", "0.5", "P(y = +1)"),
    ("grid.methods", "ERM,IRM,IB_ERM,IB_IRM,IIB,IIB_NO_INV,IIB_NO_IB", "methods to run"),
    ("grid.lambdas", "10", "invariance weights"),
    ("grid.betas", "1e-4", "bottleneck weights"),
    ("grid.seeds", "0,1,2,3,4", "data and training seeds"),
    ("train.iterations", "3000", "minimizer steps per run"),
    ("train.batch_size", "64", "samples per environment per step"),
    ("train.learning_rate", "1e-3", "learning rate of both optimizers"),
    ("train.adversary_steps", "1", "adversary updates per minimizer update"),
    ("train.adversary_reinit_every", "0", "reinitialize the adversary every N iterations (0 never)"),
    ("train.optimizer", "adam", "adam or sgd"),
    ("train.selection", "train-domain", "model selection: train-domain or leave-one-out"),
    ("train.validation_fraction", "0.2", "held-out share of each training environment"),
    ("train.eval_every", "100", "iterations between checkpoints"),
    ("train.stochastic_eval", "false", "evaluate on sampled codes instead of means"),
    ("train.irm_anneal_iters", "0", "IRM-penalty methods use weight 1 for this many iterations"),
    ("model.k_latent", "16", "code width"),
    ("model.encoder_hidden", "64", "encoder hidden width (0 for linear)"),
    ("model.predictor_hidden", "64", "predictor hidden width"),
    ("model.predictor_depth", "3", "predictor depth, 1 or 3"),
    ("model.domain_conditioning", "one_hot", "one_hot, per_domain or residual"),
    ("model.sigma_bias_init", "-2.0", "initial bias of the raw std head"),
    ("output.dir", "out", "output directory"),
    ("sweep.train_inline", "true", "train missing models during a sweep"),
];

/// The generator and its options; only the chosen generator's fields enter
/// cell hashes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum DatasetConfig {
    Scm {
        spec: ScmSpec,
        n_train_envs: usize,
        n_per_env: usize,
        n_test: usize,
    },
    CsCmnist {
        spec: CsCmnistSpec,
        train_p: Vec<f64>,
        test_p: Vec<f64>,
        n_per_env: usize,
        n_test: usize,
    },
    CrossLines {
        spec: CrossLinesSpec,
        p_diag: f64,
        n_per_class: usize,
    },
    VerticalLine {
        image: ImageSpec,
        train_b: Vec<f64>,
        test_b: Vec<f64>,
        n_per_env: usize,
        n_test: usize,
    },
}

impl DatasetConfig {
    pub fn name(&self) -> &'static str {
        match self {
            DatasetConfig::Scm { .. } => "scm",
            DatasetConfig::CsCmnist { .. } => "cs_cmnist",
            DatasetConfig::CrossLines { .. } => "cross_lines",
            DatasetConfig::VerticalLine { .. } => "vertical_line",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub methods: Vec<Method>,
    pub lambdas: Vec<f64>,
    pub betas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub irm_anneal_iters: usize,
    pub out_dir: PathBuf,
    pub sweep_train_inline: bool,
}

/// Raw `key -> value` pairs after defaults and overrides.
#[derive(Clone, Debug)]
pub struct RawConfig {
    values: BTreeMap<String, String>,
}

fn valid_keys() -> String {
    KEYS.iter().map(|k| k.0).collect::<Vec<_>>().join(", ")
}

impl Default for RawConfig {
    fn default() -> Self {
        Self {
            values: KEYS.iter().map(|(k, v, _)| (k.to_string(), v.to_string())).collect(),
        }
    }
}

impl RawConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut raw = RawConfig::default();
        let mut seen = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| LabError::Config(format!("line {}: expected `key = value`, got `{line}`", n + 1)))?;
            let key = key.trim();
            if let Some(prev) = seen.insert(key.to_string(), n + 1) {
                return Err(LabError::Config(format!("line {}: `{key}` already set on line {prev}", n + 1)));
            }
            raw.set(key, value.trim()).map_err(|e| match e {
                LabError::Config(m) => LabError::Config(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
        }
        Ok(raw)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match self.values.get_mut(key) {
            Some(v) => {
                *v = value.to_string();
                Ok(())
            }
            None => Err(LabError::Config(format!("unknown key `{key}`; valid keys: {}", valid_keys()))),
        }
    }

    fn get(&self, key: &str) -> &str {
        self.values.get(key).map(String::as_str).expect("key listed in KEYS")
    }

    fn num<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let v = self.get(key);
        v.parse()
            .map_err(|_| LabError::Config(format!("`{key}`: cannot parse `{v}`")))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Vec<T>> {
        let v = self.get(key);
        let items: Vec<T> = v
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse().map_err(|_| LabError::Config(format!("`{key}`: cannot parse `{s}`"))))
            .collect::<Result<_>>()?;
        if items.is_empty() {
            return Err(LabError::Config(format!("`{key}` must not be empty")));
        }
        Ok(items)
    }

    fn flag(&self, key: &str) -> Result<bool> {
        match self.get(key) {
            "true" => Ok(true),
            "false" => Ok(false),
            v => Err(LabError::Config(format!("`{key}`: expected true or false, got `{v}`"))),
        }
    }

    pub fn build(&self) -> Result<ExperimentConfig> {
        let image = ImageSpec {
            hw: self.num("image.hw")?,
            texture_amplitude: self.num("image.texture_amplitude")?,
            noise_std: self.num("image.noise_std")?,
            phase_jitter: self.num("image.phase_jitter")?,
        };
        let dataset = match self.get("dataset.name") {
            "scm" => {
                let d_spurious: usize = self.num("scm.d_spurious")?;
                let train: Vec<f64> = self.list("scm.train_means")?;
                let test: Vec<f64> = self.list("scm.test_means")?;
                DatasetConfig::Scm {
                    n_train_envs: train.len(),
                    spec: ScmSpec {
                        d_causal: self.num("scm.d_causal")?,
                        d_spurious,
                        causal_mean_scale: self.num("scm.causal_mean_scale")?,
                        causal_noise: self.num("scm.causal_noise")?,
                        env_means: train.iter().chain(&test).map(|&m| vec![m; d_spurious]).collect(),
                        label_prior: self.num("scm.label_prior")?,
                    },
                    n_per_env: self.num("dataset.n_per_env")?,
                    n_test: self.num("dataset.n_test")?,
                }
            }
            "cs_cmnist" => DatasetConfig::CsCmnist {
                spec: CsCmnistSpec {
                    content_dim: self.num("cs_cmnist.content_dim")?,
                    prototype_scale: self.num("cs_cmnist.prototype_scale")?,
                    content_noise: self.num("cs_cmnist.content_noise")?,
                },
                train_p: self.list("cs_cmnist.train_p")?,
                test_p: self.list("cs_cmnist.test_p")?,
                n_per_env: self.num("dataset.n_per_env")?,
                n_test: self.num("dataset.n_test")?,
            },
            "cross_lines" => DatasetConfig::CrossLines {
                spec: CrossLinesSpec {
                    image,
                    env_strength: self.list("cross_lines.env_strength")?,
                    line_strength: self.num("cross_lines.line_strength")?,
                },
                p_diag: self.num("cross_lines.p_diag")?,
                n_per_class: self.num("dataset.n_per_class")?,
            },
            "vertical_line" => DatasetConfig::VerticalLine {
                image,
                train_b: self.list("vertical_line.train_b")?,
                test_b: self.list("vertical_line.test_b")?,
                n_per_env: self.num("dataset.n_per_env")?,
                n_test: self.num("dataset.n_test")?,
            },
            other => {
                return Err(LabError::Config(format!(
                    "`dataset.name`: unknown generator `{other}`; valid: scm, cs_cmnist, cross_lines, vertical_line"
                )))
            }
        };
        let methods = self
            .get("grid.methods")
            .split(',')
            .map(str::trim)
            .filter(|s| !s.is_empty())
            .map(|s| s.parse::<Method>().map_err(|e| LabError::Config(format!("`grid.methods`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if methods.is_empty() {
            return Err(LabError::Config("`grid.methods` must not be empty".into()));
        }
        let optimizer = match self.get("train.optimizer") {
            "adam" => OptimizerKind::Adam,
            "sgd" => OptimizerKind::Sgd,
            v => return Err(LabError::Config(format!("`train.optimizer`: unknown `{v}`; valid: adam, sgd"))),
        };
        let domain_conditioning = match self.get("model.domain_conditioning") {
            "one_hot" => DomainConditioning::OneHot,
            "per_domain" => DomainConditioning::PerDomainHeads,
            "residual" => DomainConditioning::Residual,
            v => {
                return Err(LabError::Config(format!(
                    "`model.domain_conditioning`: unknown `{v}`; valid: one_hot, per_domain, residual"
                )))
            }
        };
        let train = TrainConfig {
            iterations: self.num("train.iterations")?,
            batch_size: self.num("train.batch_size")?,
            learning_rate: self.num("train.learning_rate")?,
            adversary_steps_per_min_step: self.num("train.adversary_steps")?,
            adversary_reinit_every: self.num("train.adversary_reinit_every")?,
            optimizer,
            seed: 0,
            selection: parse_selection(self.get("train.selection"))?,
            validation_fraction: self.num("train.validation_fraction")?,
            eval_every: self.num("train.eval_every")?,
            stochastic_eval: self.flag("train.stochastic_eval")?,
            debug_checks: false,
            arch: ArchConfig {
                k_latent: self.num("model.k_latent")?,
                encoder_hidden: self.num("model.encoder_hidden")?,
                predictor_hidden: self.num("model.predictor_hidden")?,
                predictor_depth: self.num("model.predictor_depth")?,
                domain_conditioning,
                sigma_bias_init: self.num("model.sigma_bias_init")?,
            },
        };
        train.validate().map_err(|e| LabError::Config(e.to_string()))?;
        let cfg = ExperimentConfig {
            dataset,
            methods,
            lambdas: self.list("grid.lambdas")?,
            betas: self.list("grid.betas")?,
            seeds: self.list("grid.seeds")?,
            train,
            irm_anneal_iters: self.num("train.irm_anneal_iters")?,
            out_dir: PathBuf::from(self.get("output.dir")),
            sweep_train_inline: self.flag("sweep.train_inline")?,
        };
        if cfg.lambdas.iter().chain(&cfg.betas).any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(LabError::Config("lambdas and betas must be finite and >= 0".into()));
        }
        Ok(cfg)
    }
}

pub fn parse_selection(v: &str) -> Result<Selection> {
    match v {
        "train-domain" => Ok(Selection::TrainingDomainValidation),
        "leave-one-out" => Ok(Selection::LeaveOneDomainOut),
        _ => Err(LabError::Config(format!(
            "unknown selection `{v}`; valid: train-domain, leave-one-out"
        ))),
    }
}

pub fn parse_config_str(text: &str) -> Result<ExperimentConfig> {
    RawConfig::parse(text)?.build()
}

pub fn parse_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| LabError::io(path, e))?;
    parse_config_str(&text)
}

/// Every key with its default, for `--help`.
pub fn keys_help() -> String {
    let width = KEYS.iter().map(|k| k.0.len()).max().unwrap_or(0);
    let mut out = String::from("Config keys (default in brackets):\n");
    for (k, v, d) in KEYS {
        out.push_str(&format!("  {k:<width$}  {d} [{v}]\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_build() {
        let cfg = parse_config_str("").unwrap();
        assert_eq!(cfg.methods.len(), 7);
        assert_eq!(cfg.seeds, vec![0, 1, 2, 3, 4]);
        assert_eq!(cfg.dataset.name(), "cs_cmnist");
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn every_key_has_help() {
        let help = keys_help();
        for (k, _, _) in KEYS {
            assert!(help.contains(k));
        }
    }
}
