//! Brute-force reference computations: exact information quantities on
//! discrete joints, a Monte Carlo KL estimator, the single-feature
//! invariant search and the min-norm margin comparison.

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::envgen::{gen_geoskew, GroupTag, SkewSpec};
use crate::error::{Error, Result};
use crate::models::GaussianCode;
use crate::rng;

const MASS_TOL: f64 = 1e-12;

fn check_table(p: &[f64], what: &str) -> Result<()> {
    if let Some(v) = p.iter().find(|v| !v.is_finite() || **v < 0.0) {
        return Err(Error::InvalidArgument(format!("{what}: entry {v} is not a probability")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > MASS_TOL {
        return Err(Error::InvalidArgument(format!("{what}: total mass {total} != 1")));
    }
    Ok(())
}

/// `x ln(x / y)` with `0 ln 0 = 0`.
fn xlogx_over(x: f64, y: f64) -> f64 {
    if x > 0.0 { x * (x / y).ln() } else { 0.0 }
}

/// `I(A; B)` in nats for a joint table `p[a][b]`.
pub fn exact_mi(p: &[Vec<f64>]) -> Result<f64> {
    let nb = p.first().map_or(0, Vec::len);
    if nb == 0 || p.iter().any(|r| r.len() != nb) {
        return Err(Error::InvalidArgument("joint table must be rectangular and non-empty".into()));
    }
    let flat: Vec<f64> = p.iter().flatten().copied().collect();
    check_table(&flat, "exact_mi")?;
    let pa: Vec<f64> = p.iter().map(|r| r.iter().sum()).collect();
    let pb: Vec<f64> = (0..nb).map(|b| p.iter().map(|r| r[b]).sum()).collect();
    let mut mi = 0.0;
    for (a, row) in p.iter().enumerate() {
        for (b, &v) in row.iter().enumerate() {
            mi += xlogx_over(v, pa[a] * pb[b]);
        }
    }
    Ok(mi)
}

/// Probability table over `(Y, D, Z)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteJoint {
    dims: [usize; 3],
    p: Vec<f64>,
}

impl DiscreteJoint {
    /// `p` is row-major in `(y, d, z)`.
    pub fn new(dims: [usize; 3], p: Vec<f64>) -> Result<Self> {
        if dims.contains(&0) || p.len() != dims.iter().product::<usize>() {
            return Err(Error::InvalidArgument(format!("{} entries for dims {dims:?}", p.len())));
        }
        check_table(&p, "DiscreteJoint")?;
        Ok(Self { dims, p })
    }

    /// Normalizes nonnegative weights.
    pub fn from_weights(dims: [usize; 3], w: Vec<f64>) -> Result<Self> {
        let total: f64 = w.iter().sum();
        if !(total > 0.0 && total.is_finite()) || w.iter().any(|v| *v < 0.0) {
            return Err(Error::InvalidArgument("weights must be nonnegative with positive sum".into()));
        }
        Self::new(dims, w.into_iter().map(|v| v / total).collect())
    }

    /// Unconstrained joint with uniform random weights.
    pub fn random(dims: [usize; 3], seed: u64) -> Result<Self> {
        let mut r = rng::stream(seed, 0x301);
        let n = dims.iter().product();
        Self::from_weights(dims, (0..n).map(|_| r.random::<f64>()).collect())
    }

    /// `p(z) p(d|z) p(y|z)`, so that `Y ⫫ D | Z` by construction.
    pub fn random_conditionally_independent(dims: [usize; 3], seed: u64) -> Result<Self> {
        let [ny, nd, nz] = dims;
        let mut r = rng::stream(seed, 0x302);
        let mut simplex = |k: usize| {
            let w: Vec<f64> = (0..k).map(|_| r.random::<f64>() + 1e-3).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|v| v / s).collect::<Vec<f64>>()
        };
        let pz = simplex(nz);
        let pd: Vec<Vec<f64>> = (0..nz).map(|_| simplex(nd)).collect();
        let py: Vec<Vec<f64>> = (0..nz).map(|_| simplex(ny)).collect();
        let mut w = vec![0.0; ny * nd * nz];
        for y in 0..ny {
            for d in 0..nd {
                for z in 0..nz {
                    w[(y * nd + d) * nz + z] = pz[z] * pd[z][d] * py[z][y];
                }
            }
        }
        Self::from_weights(dims, w)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn get(&self, y: usize, d: usize, z: usize) -> f64 {
        let [_, nd, nz] = self.dims;
        self.p[(y * nd + d) * nz + z]
    }

    pub fn p_z(&self, z: usize) -> f64 {
        let [ny, nd, _] = self.dims;
        (0..ny).flat_map(|y| (0..nd).map(move |d| (y, d))).map(|(y, d)| self.get(y, d, z)).sum()
    }

    pub fn p_dz(&self, d: usize, z: usize) -> f64 {
        (0..self.dims[0]).map(|y| self.get(y, d, z)).sum()
    }

    pub fn p_yz(&self, y: usize, z: usize) -> f64 {
        (0..self.dims[1]).map(|d| self.get(y, d, z)).sum()
    }

    /// `P(Y | Z = z, D = d)`, or `None` where `(d, z)` has no mass.
    pub fn conditional_y(&self, z: usize, d: usize) -> Option<Vec<f64>> {
        let m = self.p_dz(d, z);
        (m > 0.0).then(|| (0..self.dims[0]).map(|y| self.get(y, d, z) / m).collect())
    }

    /// `H(Y | Z)`.
    pub fn h_y_given_z(&self) -> f64 {
        let [ny, _, nz] = self.dims;
        let mut h = 0.0;
        for z in 0..nz {
            let pz = self.p_z(z);
            for y in 0..ny {
                h -= xlogx_over(self.p_yz(y, z), pz);
            }
        }
        h
    }

    /// `H(Y | D, Z)`.
    pub fn h_y_given_dz(&self) -> f64 {
        let [ny, nd, nz] = self.dims;
        let mut h = 0.0;
        for d in 0..nd {
            for z in 0..nz {
                let pdz = self.p_dz(d, z);
                for y in 0..ny {
                    h -= xlogx_over(self.get(y, d, z), pdz);
                }
            }
        }
        h
    }

    /// `Σ_z p(z) I(Y; D | Z = z)`, summed directly.
    pub fn conditional_mi_direct(&self) -> f64 {
        let [ny, nd, nz] = self.dims;
        let mut total = 0.0;
        for z in 0..nz {
            let pz = self.p_z(z);
            if pz <= 0.0 {
                continue;
            }
            let mut inner = 0.0;
            for y in 0..ny {
                for d in 0..nd {
                    let pyd = self.get(y, d, z) / pz;
                    inner += xlogx_over(pyd, (self.p_yz(y, z) / pz) * (self.p_dz(d, z) / pz));
                }
            }
            total += pz * inner;
        }
        total
    }
}

/// `I(Y; D | Z) = H(Y|Z) − H(Y|D,Z)`, clamped at 0.
pub fn exact_conditional_mi(joint: &DiscreteJoint) -> Result<f64> {
    check_table(&joint.p, "exact_conditional_mi")?;
    let v = joint.h_y_given_z() - joint.h_y_given_dz();
    debug_assert!(v >= -1e-12, "negative conditional MI {v}");
    Ok(v.max(0.0))
}

pub const MC_KL_MIN_DRAWS: usize = 10_000;

/// Monte Carlo `E_q[ln q(z) − ln r(z)]` for `q = N(μ, diag σ²)` and
/// `r = N(0, I)`.
pub fn mc_kl(code: &GaussianCode, n_draws: usize, seed: u64) -> Result<f64> {
    code.validate()?;
    if n_draws < MC_KL_MIN_DRAWS {
        return Err(Error::InvalidArgument(format!("need at least {MC_KL_MIN_DRAWS} draws, got {n_draws}")));
    }
    let mut r = rng::stream(seed, 0x3C1);
    let log_sigma: f64 = code.std.iter().map(|s| s.ln()).sum();
    let mut acc = 0.0;
    for _ in 0..n_draws {
        let mut v = -log_sigma;
        for (m, s) in code.mean.iter().zip(&code.std) {
            let e: f64 = r.sample(StandardNormal);
            let z = m + s * e;
            v += 0.5 * (z * z - e * e);
        }
        acc += v;
    }
    Ok(acc / n_draws as f64)
}

// ---------------------------------------------------------------------------
// Single-feature invariant search.

pub const TOY_FEATURES: [&str; 4] = ["Z_i", "Z_p", "Z_sk", "Z_sp"];
pub const DEFAULT_INVARIANCE_TOL: f64 = 0.02;

/// Samples of one environment: four scalar features each, labels in `{±1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyEnvironment {
    pub features: Vec<[f64; 4]>,
    pub labels: Vec<i8>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyFeatureInstance {
    pub envs: Vec<ToyEnvironment>,
}

impl ToyFeatureInstance {
    pub fn validate(&self) -> Result<()> {
        if self.envs.len() < 2 {
            return Err(Error::InvalidArgument(format!("need >= 2 environments, got {}", self.envs.len())));
        }
        for (e, env) in self.envs.iter().enumerate() {
            if env.labels.is_empty() || env.labels.len() != env.features.len() {
                return Err(Error::InvalidArgument(format!("environment {e}: label/feature count mismatch")));
            }
            if env.labels.iter().any(|&y| y != 1 && y != -1) {
                return Err(Error::InvalidArgument(format!("environment {e}: labels must be ±1")));
            }
            if env.features.iter().flatten().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite { op: "ToyFeatureInstance" });
            }
        }
        Ok(())
    }

    /// The four-feature construction, `n` samples per environment
    /// (multiple of 40), labels balanced within each class:
    ///
    /// - `Z_i = y·u`, `u ∈ [0.1, 1]`: separates the classes everywhere;
    /// - `Z_p`: agrees with `y` on exactly 3/4 of every environment;
    /// - `Z_sk`: `±1` for majority/minority group, independent of `y`;
    /// - `Z_sp`: agrees with `y` on 9/10 of the samples, sign flipped in
    ///   every other environment.
    pub fn canonical(n_per_env: usize, n_envs: usize, seed: u64) -> Result<Self> {
        if n_per_env == 0 || !n_per_env.is_multiple_of(40) || n_envs < 2 {
            return Err(Error::InvalidArgument("n_per_env must be a positive multiple of 40, n_envs >= 2".into()));
        }
        let envs = (0..n_envs)
            .map(|e| {
                let mut r = rng::stream(seed, 0x7F00 + e as u64);
                let flip = if e % 2 == 0 { 1.0 } else { -1.0 };
                let mut features = Vec::with_capacity(n_per_env);
                let mut labels = Vec::with_capacity(n_per_env);
                // Sample i has class i % 2; within each class a shuffled
                // `agree_of_20 / 20` fraction gets the flag.
                let pattern = |r: &mut rng::Rng, agree_of_20: usize| {
                    let mut a = vec![false; n_per_env];
                    for class in 0..2 {
                        let mut members: Vec<usize> = (class..n_per_env).step_by(2).collect();
                        members.shuffle(r);
                        let k = members.len() * agree_of_20 / 20;
                        for &i in &members[..k] {
                            a[i] = true;
                        }
                    }
                    a
                };
                let p_agree = pattern(&mut r, 15);
                let sp_agree = pattern(&mut r, 18);
                let group = pattern(&mut r, 16);
                for i in 0..n_per_env {
                    let y = if i % 2 == 0 { 1.0 } else { -1.0 };
                    let zi = y * r.random_range(0.1..=1.0);
                    let zp = if p_agree[i] { y } else { -y };
                    let zsk = if group[i] { 1.0 } else { -1.0 };
                    let zsp = flip * if sp_agree[i] { y } else { -y };
                    features.push([zi, zp, zsk, zsp]);
                    labels.push(y as i8);
                }
                ToyEnvironment { features, labels }
            })
            .collect();
        let inst = Self { envs };
        inst.validate()?;
        Ok(inst)
    }
}

/// `sign·(z − threshold) > 0` predicts `+1`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stump {
    pub sign: i8,
    pub threshold: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FeatureVerdict {
    Chosen,
    /// No single classifier is near-optimal in every environment.
    Infeasible,
    /// Invariant, but a lower-risk invariant feature exists.
    HigherRisk,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureReport {
    pub index: usize,
    pub name: String,
    /// Best achievable 0-1 risk in each environment on its own.
    pub per_env_optimal_risk: Vec<f64>,
    /// `min_c max_e [R^e(c) − R^e*]` over shared classifiers `c`.
    pub invariance_deviation: f64,
    pub feasible: bool,
    /// Pooled risk of the best feasible classifier, or of the most
    /// invariant one when infeasible.
    pub pooled_risk: f64,
    pub stump: Stump,
    pub verdict: FeatureVerdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchOutcome {
    /// `None` when no feature is invariant.
    pub chosen: Option<usize>,
    /// Set when no invariant feature beats the constant predictor by more
    /// than the tolerance.
    pub degenerate: bool,
    pub trivial_risk: f64,
    pub features: Vec<FeatureReport>,
}

struct Candidate {
    stump: Stump,
    env_risk: Vec<f64>,
    pooled: f64,
}

/// Every distinct stump on one feature: thresholds between consecutive
/// distinct pooled values plus both ends, both signs.
fn candidates(inst: &ToyFeatureInstance, f: usize) -> Vec<Candidate> {
    let mut pts: Vec<(f64, usize, i8)> = Vec::new();
    for (e, env) in inst.envs.iter().enumerate() {
        for (x, &y) in env.features.iter().zip(&env.labels) {
            pts.push((x[f], e, y));
        }
    }
    pts.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n_env: Vec<f64> = inst.envs.iter().map(|e| e.labels.len() as f64).collect();
    let n_total: f64 = n_env.iter().sum();
    // Errors of sign +1 with every point above the threshold.
    let mut err: Vec<f64> = inst
        .envs
        .iter()
        .map(|e| e.labels.iter().filter(|&&y| y < 0).count() as f64)
        .collect();
    let mut out = Vec::new();
    let mut push = |err: &[f64], threshold: f64| {
        for sign in [1i8, -1] {
            let e_counts: Vec<f64> = if sign > 0 {
                err.to_vec()
            } else {
                err.iter().zip(&n_env).map(|(e, n)| n - e).collect()
            };
            out.push(Candidate {
                stump: Stump { sign, threshold },
                env_risk: e_counts.iter().zip(&n_env).map(|(e, n)| e / n).collect(),
                pooled: e_counts.iter().sum::<f64>() / n_total,
            });
        }
    };
    push(&err, f64::NEG_INFINITY);
    let mut i = 0;
    while i < pts.len() {
        let v = pts[i].0;
        while i < pts.len() && pts[i].0 == v {
            let (_, e, y) = pts[i];
            err[e] += if y > 0 { 1.0 } else { -1.0 };
            i += 1;
        }
        let threshold = if i < pts.len() { 0.5 * (v + pts[i].0) } else { f64::INFINITY };
        push(&err, threshold);
    }
    out
}

/// Enumerates the four single-feature classifiers, keeps those whose best
/// shared classifier is within `invariance_tol` of optimal in every
/// environment, and picks the one with the lowest pooled risk (lowest index
/// on ties).
pub fn sparse_invariant_search(inst: &ToyFeatureInstance, invariance_tol: f64) -> Result<SearchOutcome> {
    inst.validate()?;
    if !(invariance_tol >= 0.0 && invariance_tol.is_finite()) {
        return Err(Error::InvalidArgument(format!("invariance_tol {invariance_tol} must be >= 0")));
    }
    let n_pos: usize = inst.envs.iter().map(|e| e.labels.iter().filter(|&&y| y > 0).count()).sum();
    let n_total: usize = inst.envs.iter().map(|e| e.labels.len()).sum();
    let trivial_risk = (n_pos.min(n_total - n_pos)) as f64 / n_total as f64;

    let mut features = Vec::with_capacity(4);
    for (f, name) in TOY_FEATURES.iter().enumerate() {
        let cands = candidates(inst, f);
        let n_env = inst.envs.len();
        let optimal: Vec<f64> = (0..n_env)
            .map(|e| cands.iter().map(|c| c.env_risk[e]).fold(f64::INFINITY, f64::min))
            .collect();
        let deviation = |c: &Candidate| {
            c.env_risk
                .iter()
                .zip(&optimal)
                .map(|(r, o)| r - o)
                .fold(0.0, f64::max)
        };
        let most_invariant = cands
            .iter()
            .min_by(|a, b| deviation(a).total_cmp(&deviation(b)).then(a.pooled.total_cmp(&b.pooled)))
            .expect("at least the constant stumps");
        let invariance_deviation = deviation(most_invariant);
        let feasible = invariance_deviation <= invariance_tol;
        let best = if feasible {
            cands
                .iter()
                .filter(|c| deviation(c) <= invariance_tol)
                .min_by(|a, b| a.pooled.total_cmp(&b.pooled))
                .expect("feasible")
        } else {
            most_invariant
        };
        features.push(FeatureReport {
            index: f,
            name: name.to_string(),
            per_env_optimal_risk: optimal,
            invariance_deviation,
            feasible,
            pooled_risk: best.pooled,
            stump: best.stump,
            verdict: if feasible { FeatureVerdict::HigherRisk } else { FeatureVerdict::Infeasible },
        });
    }
    let chosen = features
        .iter()
        .filter(|r| r.feasible)
        .min_by(|a, b| a.pooled_risk.total_cmp(&b.pooled_risk).then(a.index.cmp(&b.index)))
        .map(|r| r.index);
    if let Some(c) = chosen {
        features[c].verdict = FeatureVerdict::Chosen;
    }
    let degenerate = chosen.is_none_or(|c| features[c].pooled_risk >= trivial_risk - invariance_tol);
    Ok(SearchOutcome {
        chosen,
        degenerate,
        trivial_risk,
        features,
    })
}

// ---------------------------------------------------------------------------
// Minimum-norm margin classifiers.

pub const MIN_NORM_MAX_SWEEPS: usize = 100_000;
pub const MIN_NORM_TOL: f64 = 1e-6;

/// Minimum-norm `w` (no bias) with `y_i w·x_i ≥ 1` for every row, by
/// coordinate ascent on the dual `max Σα − ½‖Σ α_i y_i x_i‖²`, `α ≥ 0`.
/// Stops when every margin constraint holds within `MIN_NORM_TOL` and the
/// active ones are tight within it.
pub fn min_norm_classifier(rows: &[Vec<f64>], y: &[f64]) -> Result<Vec<f64>> {
    let d = rows.first().map_or(0, Vec::len);
    if d == 0 || rows.len() != y.len() || rows.iter().any(|r| r.len() != d) {
        return Err(Error::InvalidArgument("min_norm_classifier needs equal-width rows, one label each".into()));
    }
    let sq: Vec<f64> = rows.iter().map(|r| r.iter().map(|v| v * v).sum()).collect();
    if sq.contains(&0.0) {
        return Err(Error::NotSeparable("a zero row cannot reach margin 1".into()));
    }
    let mut alpha = vec![0.0; rows.len()];
    let mut w = vec![0.0; d];
    for _ in 0..MIN_NORM_MAX_SWEEPS {
        let mut worst: f64 = 0.0;
        for i in 0..rows.len() {
            let m = y[i] * rows[i].iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let slack = 1.0 - m;
            let violation = if alpha[i] > 0.0 { slack.abs() } else { slack.max(0.0) };
            worst = worst.max(violation);
            let new = (alpha[i] + slack / sq[i]).max(0.0);
            let delta = new - alpha[i];
            if delta != 0.0 {
                alpha[i] = new;
                for (wk, xk) in w.iter_mut().zip(&rows[i]) {
                    *wk += delta * y[i] * xk;
                }
            }
        }
        if worst <= MIN_NORM_TOL {
            return Ok(w);
        }
        let norm = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        if !norm.is_finite() || norm > 1e12 {
            break;
        }
    }
    Err(Error::NotSeparable(format!(
        "no margin-1 separator found within {MIN_NORM_MAX_SWEEPS} sweeps"
    )))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MinNormComparison {
    pub w_all: Vec<f64>,
    pub w_min: Vec<f64>,
    pub norm_all: f64,
    pub norm_min: f64,
}

impl MinNormComparison {
    pub fn ratio(&self) -> f64 {
        self.norm_min / self.norm_all
    }
}

/// Minimum-norm classifiers on the invariant block of a geometric-skew
/// sample: on every sample and on the minority group only.
pub fn min_norm_comparison(spec: &SkewSpec, seed: u64) -> Result<MinNormComparison> {
    let ds = gen_geoskew(spec, seed)?;
    let k = spec.invariant_dim;
    let mut all = (Vec::new(), Vec::new());
    let mut min = (Vec::new(), Vec::new());
    for i in 0..ds.len() {
        let x = ds.row(i)[..k].to_vec();
        let y = if ds.labels[i] == 1 { 1.0 } else { -1.0 };
        if ds.groups[i] == GroupTag::Minority {
            min.0.push(x.clone());
            min.1.push(y);
        }
        all.0.push(x);
        all.1.push(y);
    }
    let w_all = min_norm_classifier(&all.0, &all.1)?;
    let w_min = min_norm_classifier(&min.0, &min.1)?;
    let norm = |w: &[f64]| w.iter().map(|v| v * v).sum::<f64>().sqrt();
    Ok(MinNormComparison {
        norm_all: norm(&w_all),
        norm_min: norm(&w_min),
        w_all,
        w_min,
    })
}

#[cfg(test)]
mod tests;
