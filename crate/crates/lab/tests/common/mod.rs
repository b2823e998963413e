#![allow(dead_code)]

use iib_lab::config::{parse_config_str, ExperimentConfig};

/// Model and training settings small enough to train a cell in well under a
/// second.
pub const TINY_TRAIN: &str = "
cs_cmnist.content_dim = 4
model.k_latent = 4
model.encoder_hidden = 8
model.predictor_hidden = 8
train.iterations = 12
train.eval_every = 6
train.batch_size = 16
";

/// `TINY_TRAIN` on a small cs_cmnist set.
pub fn tiny_text() -> String {
    format!("dataset.name = cs_cmnist\ndataset.n_per_env = 80\ndataset.n_test = 80\n{TINY_TRAIN}")
}

pub fn tiny(extra: &str) -> ExperimentConfig {
    parse_config_str(&format!("{}\n{extra}", tiny_text())).expect("tiny config parses")
}

pub fn tiny_vertical(extra: &str) -> ExperimentConfig {
    parse_config_str(&format!(
        "dataset.name = vertical_line\ndataset.n_per_env = 60\ndataset.n_test = 60\n{TINY_TRAIN}\n{extra}"
    ))
    .expect("tiny vertical-line config parses")
}
