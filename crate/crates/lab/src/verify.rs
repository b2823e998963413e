//! Oracle suites behind the `verify` subcommand.
//!
//! Each `measure_*` function returns raw numbers; [`run_all`] compares them
//! with fixed thresholds.

use std::time::Instant;

use iib_core::envgen::{EnvironmentDataset, GroupTag, SkewSpec};
use iib_core::gradcheck::finite_difference_check;
use iib_core::models::{CodeVars, GaussianCode, Model, ModelConfig};
use iib_core::objectives::{
    build_parts, compose_graph, irm_penalty, loss_bottleneck, loss_domain, loss_invariant, Batch, Method,
    ObjectiveSpec,
};
use iib_core::oracles::{
    exact_conditional_mi, mc_kl, min_norm_classifier, min_norm_comparison, sparse_invariant_search, DiscreteJoint,
    FeatureVerdict, ToyFeatureInstance, DEFAULT_INVARIANCE_TOL,
};
use iib_core::rng;
use iib_core::{Graph, ParameterSet, Result, Tensor, Var};
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

const GRAD_SEEDS: u64 = 10;
/// Some encoder coordinates have gradients near 1e-7; this step keeps
/// rounding noise well below them.
const GRAD_STEP: f64 = 1e-4;

fn normal(r: &mut rng::Rng) -> f64 {
    r.sample(StandardNormal)
}

fn toy_envs(seed: u64) -> Vec<EnvironmentDataset> {
    let mut r = rng::stream(seed, 0x77);
    (0..2)
        .map(|e| {
            let rows: Vec<Vec<f64>> = (0..6).map(|_| (0..3).map(|_| normal(&mut r)).collect()).collect();
            let labels: Vec<usize> = (0..6).map(|i| (i + e) % 3).collect();
            EnvironmentDataset::new(rows, vec![3], labels, 3, e, vec![GroupTag::Unassigned; 6], None)
                .expect("toy environments are valid")
        })
        .collect()
}

/// Linear heads and no hidden layer: every kernel is smooth in every
/// parameter.
fn toy_model(seed: u64, discriminator: bool) -> Model {
    let cfg = ModelConfig {
        k_latent: 3,
        encoder_hidden: 0,
        predictor_depth: 1,
        discriminator,
        sigma_bias_init: 0.0,
        ..ModelConfig::new(3, 3, 2)
    };
    Model::init(cfg, seed).expect("toy model is valid")
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientCheck {
    pub kernel: String,
    /// Worst relative error over all seeds.
    pub max_relative_error: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientSuite {
    pub checks: Vec<GradientCheck>,
    pub seeds: u64,
    pub seconds: f64,
}

impl GradientSuite {
    pub fn max_error(&self) -> f64 {
        self.checks.iter().map(|c| c.max_relative_error).fold(0.0, f64::max)
    }
}

type Kernel = Box<dyn Fn(&mut Graph, &Model, &Batch, &Tensor) -> Result<Var> + Sync + Send>;

fn kernels() -> Vec<(String, bool, Kernel)> {
    let mut ks: Vec<(String, bool, Kernel)> = vec![
        (
            "L_i".into(),
            false,
            Box::new(|g, m, b, eps| loss_invariant(g, m, b, Some(eps))),
        ),
        (
            "L_z".into(),
            false,
            Box::new(|g, m, b, _| {
                let x = g.constant(b.x.clone())?;
                let code: CodeVars = m.encode(g, x)?;
                loss_bottleneck(g, code)
            }),
        ),
        (
            "L_d".into(),
            false,
            Box::new(|g, m, b, eps| {
                let x = g.constant(b.x.clone())?;
                let code = m.encode(g, x)?;
                let z = m.sample_code(g, code, Some(eps))?;
                loss_domain(g, m, &m.params, z, b)
            }),
        ),
        (
            "irm_penalty".into(),
            false,
            Box::new(|g, m, b, eps| {
                let x = g.constant(b.x.clone())?;
                let code = m.encode(g, x)?;
                let z = m.sample_code(g, code, Some(eps))?;
                let logits = m.predict_invariant(g, z)?;
                irm_penalty(g, logits, &b.labels, &b.env_ranges)
            }),
        ),
    ];
    for method in Method::ALL {
        ks.push((
            format!("composite {method}"),
            method == Method::DomainAdv,
            Box::new(move |g, m, b, eps| {
                let spec = ObjectiveSpec::new(method, 3.0, 0.1);
                let parts = build_parts(g, m, b, &spec, Some(eps))?;
                let (min, adv) = compose_graph(g, &spec, parts.l_i, parts.l_z, parts.l_d, parts.irm_pen)?;
                match adv {
                    // Both composites through one scalar.
                    Some(a) => {
                        let s = g.scale(a, 0.37)?;
                        g.add(min, s)
                    }
                    None => Ok(min),
                }
            }),
        ));
    }
    ks
}

pub fn measure_gradients() -> Result<GradientSuite> {
    let start = Instant::now();
    let mut checks = Vec::new();
    for (name, disc, kernel) in kernels() {
        let mut worst: f64 = 0.0;
        for seed in 0..GRAD_SEEDS {
            let envs = toy_envs(seed);
            let refs: Vec<&EnvironmentDataset> = envs.iter().collect();
            let batch = Batch::full(&refs)?;
            let model = toy_model(seed, disc);
            let mut r = rng::stream(seed, 5);
            let eps = Tensor::matrix(batch.len(), 3, (0..batch.len() * 3).map(|_| normal(&mut r)).collect())?;
            let loss = |g: &mut Graph, p: &ParameterSet| {
                let mut m = model.clone();
                m.params = p.clone();
                kernel(g, &m, &batch, &eps)
            };
            worst = worst.max(finite_difference_check(loss, &model.params, GRAD_STEP)?);
        }
        checks.push(GradientCheck {
            kernel: name,
            max_relative_error: worst,
        });
    }
    Ok(GradientSuite {
        checks,
        seeds: GRAD_SEEDS,
        seconds: start.elapsed().as_secs_f64(),
    })
}

pub const KL_CODES: u64 = 20;
pub const KL_DRAWS: usize = 100_000;

/// Worst `|closed form − Monte Carlo|` over random codes.
pub fn measure_kl() -> Result<f64> {
    let mut worst: f64 = 0.0;
    for seed in 0..KL_CODES {
        let mut r = rng::stream(seed, 0x6B1);
        let k = r.random_range(1..6);
        let mean: Vec<f64> = (0..k).map(|_| normal(&mut r)).collect();
        let std: Vec<f64> = (0..k).map(|_| r.random_range(0.3..2.0)).collect();
        let code = GaussianCode::new(mean.clone(), std.clone())?;
        let mut g = Graph::new();
        let mu = g.constant(Tensor::matrix(1, k, mean)?)?;
        let sigma = g.constant(Tensor::matrix(1, k, std)?)?;
        let lz = loss_bottleneck(&mut g, CodeVars { mu, sigma })?;
        let closed = g.scalar(lz);
        worst = worst.max((closed - mc_kl(&code, KL_DRAWS, seed)?).abs());
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionalMiSuite {
    /// Largest conditional MI under `Y ⫫ D | Z`.
    pub max_ci_mi: f64,
    /// Largest spread of `P(Y | Z, D)` across `D` under `Y ⫫ D | Z`.
    pub max_ci_spread: f64,
    /// Largest disagreement between the entropy decomposition and direct
    /// summation on unconstrained joints.
    pub max_decomposition_error: f64,
}

pub const JOINTS: u64 = 100;

fn joint_dims(r: &mut rng::Rng) -> [usize; 3] {
    let mut d = || r.random_range(2..6);
    [d(), d(), d()]
}

pub fn measure_conditional_mi() -> Result<ConditionalMiSuite> {
    let mut s = ConditionalMiSuite {
        max_ci_mi: 0.0,
        max_ci_spread: 0.0,
        max_decomposition_error: 0.0,
    };
    for seed in 0..JOINTS {
        let mut r = rng::stream(seed, 0xC1);
        let j = DiscreteJoint::random_conditionally_independent(joint_dims(&mut r), seed)?;
        s.max_ci_mi = s.max_ci_mi.max(exact_conditional_mi(&j)?.abs());
        let [ny, nd, nz] = j.dims();
        for z in 0..nz {
            let conds: Vec<Vec<f64>> = (0..nd).filter_map(|d| j.conditional_y(z, d)).collect();
            for c in &conds[1..] {
                for y in 0..ny {
                    s.max_ci_spread = s.max_ci_spread.max((c[y] - conds[0][y]).abs());
                }
            }
        }
        let u = DiscreteJoint::random(joint_dims(&mut r), seed.wrapping_add(1 << 32))?;
        let decomposed = u.h_y_given_z() - u.h_y_given_dz();
        s.max_decomposition_error = s.max_decomposition_error.max((decomposed - u.conditional_mi_direct()).abs());
    }
    Ok(s)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSuite {
    pub seeds: u64,
    /// Seeds whose verdicts were `[Chosen, HigherRisk, HigherRisk, Infeasible]`.
    pub expected_verdicts: u64,
    pub seconds: f64,
}

pub const SEARCH_SEEDS: u64 = 10;

pub fn measure_sparse_search() -> Result<SearchSuite> {
    let start = Instant::now();
    let want = [
        FeatureVerdict::Chosen,
        FeatureVerdict::HigherRisk,
        FeatureVerdict::HigherRisk,
        FeatureVerdict::Infeasible,
    ];
    let mut ok = 0;
    for seed in 0..SEARCH_SEEDS {
        let inst = ToyFeatureInstance::canonical(400, 2, seed)?;
        let out = sparse_invariant_search(&inst, DEFAULT_INVARIANCE_TOL)?;
        let verdicts: Vec<FeatureVerdict> = out.features.iter().map(|f| f.verdict).collect();
        if out.chosen == Some(0) && verdicts == want {
            ok += 1;
        }
    }
    Ok(SearchSuite {
        seeds: SEARCH_SEEDS,
        expected_verdicts: ok,
        seconds: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormSuite {
    /// `‖w_min‖ / ‖w_all‖` on the default skew instance.
    pub ratio: f64,
    /// `|w − 1/min margin|` on a one-dimensional separable sample.
    pub one_d_error: f64,
}

pub fn measure_norms() -> Result<NormSuite> {
    let ratio = min_norm_comparison(&SkewSpec::default(), 0)?.ratio();
    let mut r = rng::stream(7, 0x1D);
    let margins: Vec<f64> = (0..30).map(|_| r.random_range(0.05..2.0)).collect();
    let y: Vec<f64> = (0..30).map(|i| if i % 3 == 0 { -1.0 } else { 1.0 }).collect();
    let rows: Vec<Vec<f64>> = margins.iter().zip(&y).map(|(m, s)| vec![m * s]).collect();
    let w = min_norm_classifier(&rows, &y)?;
    let exact = 1.0 / margins.iter().copied().fold(f64::INFINITY, f64::min);
    Ok(NormSuite {
        ratio,
        one_d_error: (w[0] - exact).abs(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

fn verdict(name: &str, passed: bool, detail: String) -> Verdict {
    Verdict {
        name: name.to_string(),
        passed,
        detail,
    }
}

/// All five suites with their pass thresholds. An oracle that errors counts
/// as failed.
pub fn run_all() -> Vec<Verdict> {
    let mut out = Vec::new();
    out.push(match measure_gradients() {
        Ok(s) => verdict(
            "gradients",
            s.max_error() <= 1e-5 && s.seconds <= 60.0,
            format!("max relative error {:.2e} over {} kernels, {:.1}s", s.max_error(), s.checks.len(), s.seconds),
        ),
        Err(e) => verdict("gradients", false, e.to_string()),
    });
    out.push(match measure_kl() {
        Ok(d) => verdict("kl", d <= 0.02, format!("max |closed - mc| {d:.4} over {KL_CODES} codes")),
        Err(e) => verdict("kl", false, e.to_string()),
    });
    out.push(match measure_conditional_mi() {
        Ok(s) => verdict(
            "conditional_mi",
            s.max_ci_mi <= 1e-12 && s.max_ci_spread <= 1e-12 && s.max_decomposition_error <= 1e-12,
            format!(
                "ci mi {:.1e}, ci spread {:.1e}, decomposition {:.1e}",
                s.max_ci_mi, s.max_ci_spread, s.max_decomposition_error
            ),
        ),
        Err(e) => verdict("conditional_mi", false, e.to_string()),
    });
    out.push(match measure_sparse_search() {
        Ok(s) => verdict(
            "sparse_search",
            s.expected_verdicts == s.seeds && s.seconds <= 10.0,
            format!("{}/{} seeds as expected, {:.2}s", s.expected_verdicts, s.seeds, s.seconds),
        ),
        Err(e) => verdict("sparse_search", false, e.to_string()),
    });
    out.push(match measure_norms() {
        Ok(s) => verdict(
            "min_norm",
            s.ratio < 0.8 && s.one_d_error <= 1e-4,
            format!("ratio {:.3}, 1-D error {:.1e}", s.ratio, s.one_d_error),
        ),
        Err(e) => verdict("min_norm", false, e.to_string()),
    });
    out
}
