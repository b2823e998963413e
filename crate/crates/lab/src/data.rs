//! Materializes a [`DatasetConfig`] for one data seed.

use iib_core::envgen::{
    gen_cross_lines_with, gen_cs_cmnist_with, gen_linear_scm, gen_vertical_line_with, EnvironmentDataset,
};
use iib_core::rng::derive_seed;
use iib_core::trainer::TrainData;

use crate::config::DatasetConfig;
use crate::error::Result;

const TEST_TAG: u64 = 0x7E57;

pub fn vertical_line_test_name(b: f64) -> String {
    format!("B={b}")
}

/// One vertical-line test environment; shared by training runs and sweeps
/// so both see identical samples.
pub fn vertical_line_test(cfg: &DatasetConfig, b: f64, seed: u64) -> Result<EnvironmentDataset> {
    match cfg {
        DatasetConfig::VerticalLine { image, n_test, .. } => {
            Ok(gen_vertical_line_with(image, b, *n_test, derive_seed(seed, TEST_TAG))?)
        }
        other => Err(crate::error::LabError::Config(format!(
            "vertical-line test set requested for dataset {}",
            other.name()
        ))),
    }
}

pub fn build(cfg: &DatasetConfig, seed: u64) -> Result<TrainData> {
    let test_seed = derive_seed(seed, TEST_TAG);
    Ok(match cfg {
        DatasetConfig::Scm {
            spec,
            n_train_envs,
            n_per_env,
            n_test,
        } => {
            let train_idx: Vec<usize> = (0..*n_train_envs).collect();
            let test_idx: Vec<usize> = (*n_train_envs..spec.env_means.len()).collect();
            let train = gen_linear_scm(spec, *n_per_env, &train_idx, seed)?;
            let test = gen_linear_scm(spec, *n_test, &test_idx, test_seed)?;
            TrainData {
                train,
                test: test.into_iter().map(|d| (format!("env{}", d.domain), d)).collect(),
            }
        }
        DatasetConfig::CsCmnist {
            spec,
            train_p,
            test_p,
            n_per_env,
            n_test,
        } => {
            let train = gen_cs_cmnist_with(spec, train_p, *n_per_env, seed)?;
            let test = gen_cs_cmnist_with(spec, test_p, *n_test, test_seed)?;
            TrainData {
                train,
                test: test_p.iter().map(|p| format!("p={p}")).zip(test).collect(),
            }
        }
        DatasetConfig::CrossLines {
            spec,
            p_diag,
            n_per_class,
        } => {
            let (train, test) = gen_cross_lines_with(spec, *n_per_class, *p_diag, seed)?;
            TrainData {
                train,
                test: vec![("no_lines".to_string(), test)],
            }
        }
        DatasetConfig::VerticalLine {
            image,
            train_b,
            n_per_env,
            test_b,
            ..
        } => {
            let train = train_b
                .iter()
                .enumerate()
                .map(|(e, &b)| {
                    Ok(gen_vertical_line_with(image, b, *n_per_env, derive_seed(seed, e as u64))?.with_domain(e))
                })
                .collect::<Result<Vec<_>>>()?;
            let test = test_b
                .iter()
                .map(|&b| Ok((vertical_line_test_name(b), vertical_line_test(cfg, b, seed)?)))
                .collect::<Result<Vec<_>>>()?;
            TrainData { train, test }
        }
    })
}
