//! Loss kernels and the composite objective of every method.
//!
//! All values are in nats. The minimizer loss is optimized over the encoder
//! and the invariant predictor; the adversary loss over the domain group
//! only (the domain-aware predictor, or the discriminator for
//! [`Method::DomainAdv`]).

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::envgen::EnvironmentDataset;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::models::{CodeVars, Model};
use crate::params::ParameterSet;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "ERM")]
    Erm,
    #[serde(rename = "IRM")]
    Irm,
    #[serde(rename = "IB_ERM")]
    IbErm,
    #[serde(rename = "IB_IRM")]
    IbIrm,
    #[serde(rename = "IIB")]
    Iib,
    #[serde(rename = "IIB_NO_INV")]
    IibNoInv,
    #[serde(rename = "IIB_NO_IB")]
    IibNoIb,
    #[serde(rename = "DOMAIN_ADV")]
    DomainAdv,
}

/// Which term `λ` multiplies.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InvarianceTerm {
    None,
    IrmPenalty,
    /// `λ·(L_i − L_d)` with the domain-aware predictor.
    DomainGap,
    /// `−λ·L_disc` with a domain discriminator on z.
    Adversarial,
}

impl Method {
    pub const ALL: [Method; 8] = [
        Method::Erm,
        Method::Irm,
        Method::IbErm,
        Method::IbIrm,
        Method::Iib,
        Method::IibNoInv,
        Method::IibNoIb,
        Method::DomainAdv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Erm => "ERM",
            Method::Irm => "IRM",
            Method::IbErm => "IB_ERM",
            Method::IbIrm => "IB_IRM",
            Method::Iib => "IIB",
            Method::IibNoInv => "IIB_NO_INV",
            Method::IibNoIb => "IIB_NO_IB",
            Method::DomainAdv => "DOMAIN_ADV",
        }
    }

    /// Samples `z = μ + σ⊙ε` during training; otherwise `z = μ`.
    pub fn stochastic(self) -> bool {
        matches!(
            self,
            Method::IbErm | Method::IbIrm | Method::Iib | Method::IibNoInv | Method::IibNoIb
        )
    }

    pub fn has_bottleneck(self) -> bool {
        matches!(self, Method::IbErm | Method::IbIrm | Method::Iib | Method::IibNoInv)
    }

    /// The term `λ` scales; `IIB_NO_INV` keeps the domain-aware predictor
    /// (trained, measured) with `λ` forced to zero.
    pub fn invariance(self) -> InvarianceTerm {
        match self {
            Method::Irm | Method::IbIrm => InvarianceTerm::IrmPenalty,
            Method::Iib | Method::IibNoIb | Method::IibNoInv => InvarianceTerm::DomainGap,
            Method::DomainAdv => InvarianceTerm::Adversarial,
            Method::Erm | Method::IbErm => InvarianceTerm::None,
        }
    }

    pub fn has_lambda(self) -> bool {
        self.invariance() != InvarianceTerm::None && self != Method::IibNoInv
    }

    /// Trains a domain-group network with an adversary step.
    pub fn has_adversary(self) -> bool {
        matches!(self.invariance(), InvarianceTerm::DomainGap | InvarianceTerm::Adversarial)
    }

    /// Methods whose invariance term is undefined with a single domain.
    pub fn needs_multiple_envs(self) -> bool {
        self.has_lambda()
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Method::ALL.into_iter().find(|m| m.name() == norm).ok_or_else(|| {
            let valid: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
            Error::InvalidArgument(format!("unknown method `{s}`; valid: {}", valid.join(", ")))
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub method: Method,
    pub lambda: f64,
    pub beta: f64,
    /// IRM-penalty methods use weight 1 for this many iterations, then `λ`.
    pub irm_anneal_iters: usize,
}

pub const DEFAULT_LAMBDA: f64 = 10.0;
pub const DEFAULT_BETA: f64 = 1e-4;

impl ObjectiveSpec {
    /// Builds a spec with `λ`/`β` forced to zero where the method lacks the
    /// corresponding term.
    pub fn new(method: Method, lambda: f64, beta: f64) -> Self {
        Self {
            method,
            lambda: if method.has_lambda() { lambda } else { 0.0 },
            beta: if method.has_bottleneck() { beta } else { 0.0 },
            irm_anneal_iters: 0,
        }
    }

    pub fn defaults(method: Method) -> Self {
        Self::new(method, DEFAULT_LAMBDA, DEFAULT_BETA)
    }

    pub fn with_anneal(mut self, iters: usize) -> Self {
        self.irm_anneal_iters = iters;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) || !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "lambda and beta must be finite and >= 0, got {} and {}",
                self.lambda, self.beta
            )));
        }
        if !self.method.has_lambda() && self.lambda != 0.0 {
            return Err(Error::InvalidArgument(format!("{} takes no lambda, got {}", self.method, self.lambda)));
        }
        if !self.method.has_bottleneck() && self.beta != 0.0 {
            return Err(Error::InvalidArgument(format!("{} takes no beta, got {}", self.method, self.beta)));
        }
        Ok(())
    }

    /// The spec in force at `iteration` (IRM penalty annealing).
    pub fn at_iteration(&self, iteration: usize) -> Self {
        let mut s = *self;
        if self.method.invariance() == InvarianceTerm::IrmPenalty && iteration < self.irm_anneal_iters {
            s.lambda = 1.0;
        }
        s
    }
}

/// Per-step loss values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_i: f64,
    pub l_z: f64,
    /// Domain-aware loss `L_d`, or the discriminator loss for the
    /// domain-adversarial baseline.
    pub l_d: f64,
    pub irm_pen: f64,
    pub total_minimizer_loss: f64,
    pub total_adversary_loss: f64,
}

impl LossBreakdown {
    pub fn invariance_gap(&self) -> f64 {
        self.l_i - self.l_d
    }
}

/// Composite losses from component values. The adversary loss is zero for
/// methods without an adversary.
pub fn compose(spec: &ObjectiveSpec, l_i: f64, l_z: f64, l_d: f64, irm_pen: f64) -> Result<(f64, f64)> {
    spec.validate()?;
    let (lam, beta) = (spec.lambda, spec.beta);
    Ok(match spec.method.invariance() {
        InvarianceTerm::None => (l_i + beta * l_z, 0.0),
        InvarianceTerm::IrmPenalty => (l_i + beta * l_z + lam * irm_pen, 0.0),
        InvarianceTerm::DomainGap => (l_i + beta * l_z + lam * (l_i - l_d), l_d),
        InvarianceTerm::Adversarial => (l_i - lam * l_d, l_d),
    })
}

// ---------------------------------------------------------------------------
// Batches.

/// Samples pooled over environments, each environment a contiguous block.
/// Domain indices are positions in the list of datasets the batch was
/// built from.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Tensor,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
    pub env_ranges: Vec<Range<usize>>,
}

impl Batch {
    /// `indices[e]` selects rows of `envs[e]`.
    pub fn gather(envs: &[&EnvironmentDataset], indices: &[Vec<usize>]) -> Result<Self> {
        if envs.len() != indices.len() || envs.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} environments but {} index lists",
                envs.len(),
                indices.len()
            )));
        }
        let width = envs[0].input_dim();
        let n: usize = indices.iter().map(Vec::len).sum();
        let mut data = Vec::with_capacity(n * width);
        let mut labels = Vec::with_capacity(n);
        let mut domains = Vec::with_capacity(n);
        let mut env_ranges = Vec::with_capacity(envs.len());
        for (d, (ds, idx)) in envs.iter().zip(indices).enumerate() {
            if ds.input_dim() != width {
                return Err(Error::ShapeMismatch {
                    op: "Batch::gather",
                    left: vec![width],
                    right: vec![ds.input_dim()],
                });
            }
            if idx.is_empty() {
                return Err(Error::EmptyBatch("environment batch"));
            }
            let start = labels.len();
            for &i in idx {
                data.extend_from_slice(ds.row(i));
                labels.push(ds.labels[i]);
                domains.push(d);
            }
            env_ranges.push(start..labels.len());
        }
        Ok(Self {
            x: Tensor::matrix(n, width, data)?,
            labels,
            domains,
            env_ranges,
        })
    }

    /// Every sample of every environment.
    pub fn full(envs: &[&EnvironmentDataset]) -> Result<Self> {
        let idx: Vec<Vec<usize>> = envs.iter().map(|e| (0..e.len()).collect()).collect();
        Self::gather(envs, &idx)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

// ---------------------------------------------------------------------------
// Kernels.

/// Mean softmax cross-entropy.
pub fn cross_entropy(g: &mut Graph, logits: Var, labels: &[usize]) -> Result<Var> {
    if labels.is_empty() {
        return Err(Error::EmptyBatch("cross_entropy"));
    }
    g.softmax_cross_entropy(logits, labels)
}

/// `L_i`: mean cross-entropy of `f_i(sample_code(encode(x)))`.
pub fn loss_invariant(g: &mut Graph, model: &Model, batch: &Batch, eps: Option<&Tensor>) -> Result<Var> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("loss_invariant"));
    }
    let x = g.constant(batch.x.clone())?;
    let code = model.encode(g, x)?;
    let z = model.sample_code(g, code, eps)?;
    let logits = model.predict_invariant(g, z)?;
    cross_entropy(g, logits, &batch.labels)
}

/// `L_z`: mean over rows of `KL(N(μ, diag σ²) ‖ N(0, I))`.
pub fn loss_bottleneck(g: &mut Graph, code: CodeVars) -> Result<Var> {
    let sigma = g.value(code.sigma);
    if let Some(s) = sigma.data().iter().find(|&&s| s <= 0.0) {
        return Err(Error::InvalidArgument(format!("code std must be positive, got {s}")));
    }
    let mu2 = g.square(code.mu)?;
    let s2 = g.square(code.sigma)?;
    let ln_s2 = g.log(s2)?;
    let a = g.add(mu2, s2)?;
    let b = g.sub(a, ln_s2)?;
    let c = g.offset(b, -1.0)?;
    let per_row = g.row_sum(c)?;
    let m = g.mean(per_row)?;
    g.scale(m, 0.5)
}

/// `L_d`: mean cross-entropy of `f_d(z, d)`, evaluated with `params` for
/// the domain group (so an updated `f_d` can be attached to an existing
/// graph).
pub fn loss_domain(g: &mut Graph, model: &Model, params: &ParameterSet, z: Var, batch: &Batch) -> Result<Var> {
    if batch.domains.len() != batch.len() {
        return Err(Error::InvalidArgument(format!(
            "{} domain indices for {} samples",
            batch.domains.len(),
            batch.len()
        )));
    }
    let logits = model.predict_domain_with(g, params, z, &batch.domains)?;
    cross_entropy(g, logits, &batch.labels)
}

/// Discriminator cross-entropy against the domain index.
pub fn loss_discriminator(g: &mut Graph, model: &Model, params: &ParameterSet, z: Var, batch: &Batch) -> Result<Var> {
    let logits = model.discriminate_with(g, params, z)?;
    cross_entropy(g, logits, &batch.domains)
}

/// `Σ_e (∂/∂w R^e(w·logits)|_{w=1})²`.
///
/// With `p = softmax(L)` the derivative of the mean cross-entropy in the
/// dummy scale is `mean_n[Σ_k p_nk L_nk − L_{n,y_n}]`, a first-order
/// expression of the logits.
pub fn irm_penalty(g: &mut Graph, logits: Var, labels: &[usize], env_ranges: &[Range<usize>]) -> Result<Var> {
    if env_ranges.is_empty() {
        return Err(Error::EmptyBatch("irm_penalty"));
    }
    let mut total: Option<Var> = None;
    for r in env_ranges {
        if r.is_empty() {
            return Err(Error::EmptyBatch("irm_penalty environment"));
        }
        let l = g.slice_rows(logits, r.start, r.end)?;
        let k = g.value(l).cols();
        let mut onehot = vec![0.0; r.len() * k];
        for (i, &y) in labels[r.clone()].iter().enumerate() {
            onehot[i * k + y] = 1.0;
        }
        let p = g.softmax(l)?;
        let pl = g.mul(p, l)?;
        let oh = g.constant(Tensor::matrix(r.len(), k, onehot)?)?;
        let yl = g.mul(oh, l)?;
        let diff = g.sub(pl, yl)?;
        let rows = g.row_sum(diff)?;
        let grad_w = g.mean(rows)?;
        let sq = g.square(grad_w)?;
        total = Some(match total {
            Some(t) => g.add(t, sq)?,
            None => sq,
        });
    }
    Ok(total.expect("non-empty"))
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct Parts {
    pub code: CodeVars,
    pub z: Var,
    pub l_i: Var,
    pub l_z: Option<Var>,
    pub irm_pen: Option<Var>,
    /// `L_d` or the discriminator loss.
    pub l_d: Option<Var>,
}

/// Builds every component the method needs, sharing one encoder pass and
/// one `z` sample between `L_i` and `L_d`. `eps` is ignored for
/// deterministic methods.
pub fn build_parts(g: &mut Graph, model: &Model, batch: &Batch, spec: &ObjectiveSpec, eps: Option<&Tensor>) -> Result<Parts> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch("forward"));
    }
    let method = spec.method;
    let x = g.constant(batch.x.clone())?;
    let code = model.encode(g, x)?;
    let z = model.sample_code(g, code, if method.stochastic() { eps } else { None })?;
    let logits = model.predict_invariant(g, z)?;
    let l_i = cross_entropy(g, logits, &batch.labels)?;
    let l_z = if method.has_bottleneck() { Some(loss_bottleneck(g, code)?) } else { None };
    let irm_pen = if method.invariance() == InvarianceTerm::IrmPenalty {
        let det = if method.stochastic() { model.predict_invariant(g, code.mu)? } else { logits };
        Some(irm_penalty(g, det, &batch.labels, &batch.env_ranges)?)
    } else {
        None
    };
    let l_d = domain_term(g, model, &model.params, z, batch, method)?;
    Ok(Parts {
        code,
        z,
        l_i,
        l_z,
        irm_pen,
        l_d,
    })
}

/// The adversary's loss on `z` for methods with an adversary.
pub fn domain_term(
    g: &mut Graph,
    model: &Model,
    params: &ParameterSet,
    z: Var,
    batch: &Batch,
    method: Method,
) -> Result<Option<Var>> {
    Ok(match method.invariance() {
        InvarianceTerm::DomainGap => Some(loss_domain(g, model, params, z, batch)?),
        InvarianceTerm::Adversarial => Some(loss_discriminator(g, model, params, z, batch)?),
        _ => None,
    })
}

/// Graph version of [`compose`]: `(minimizer, adversary)`.
pub fn compose_graph(g: &mut Graph, spec: &ObjectiveSpec, l_i: Var, l_z: Option<Var>, l_d: Option<Var>, irm_pen: Option<Var>) -> Result<(Var, Option<Var>)> {
    spec.validate()?;
    let mut total = l_i;
    if let Some(lz) = l_z {
        if spec.beta != 0.0 {
            let t = g.scale(lz, spec.beta)?;
            total = g.add(total, t)?;
        }
    }
    let lam = spec.lambda;
    match spec.method.invariance() {
        InvarianceTerm::None => {}
        InvarianceTerm::IrmPenalty => {
            let pen = irm_pen.ok_or_else(|| Error::InvalidArgument("IRM penalty missing".into()))?;
            if lam != 0.0 {
                let t = g.scale(pen, lam)?;
                total = g.add(total, t)?;
            }
        }
        InvarianceTerm::DomainGap => {
            let ld = l_d.ok_or_else(|| Error::InvalidArgument("domain loss missing".into()))?;
            if lam != 0.0 {
                let gap = g.sub(l_i, ld)?;
                let t = g.scale(gap, lam)?;
                total = g.add(total, t)?;
            }
        }
        InvarianceTerm::Adversarial => {
            let ld = l_d.ok_or_else(|| Error::InvalidArgument("discriminator loss missing".into()))?;
            if lam != 0.0 {
                let t = g.scale(ld, -lam)?;
                total = g.add(total, t)?;
            }
        }
    }
    let adversary = if spec.method.has_adversary() { l_d } else { None };
    Ok((total, adversary))
}

/// Values of a forward pass, with totals recomputed by [`compose`].
pub fn breakdown(g: &Graph, spec: &ObjectiveSpec, parts: &Parts) -> Result<LossBreakdown> {
    let val = |v: Option<Var>| v.map(|v| g.scalar(v)).unwrap_or(0.0);
    let l_i = g.scalar(parts.l_i);
    let (l_z, l_d, irm_pen) = (val(parts.l_z), val(parts.l_d), val(parts.irm_pen));
    let (min, adv) = compose(spec, l_i, l_z, l_d, irm_pen)?;
    Ok(LossBreakdown {
        l_i,
        l_z,
        l_d,
        irm_pen,
        total_minimizer_loss: min,
        total_adversary_loss: adv,
    })
}
