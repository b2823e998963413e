//! Stochastic encoder `g`, invariant predictor `f_i` and domain-aware
//! predictor `f_d`, plus an optional domain discriminator for the
//! domain-adversarial baseline.
//!
//! Parameters live in one [`ParameterSet`]; the encoder in
//! [`ParamGroup::Encoder`], `f_i` in [`ParamGroup::Invariant`], and `f_d` and
//! the discriminator in [`ParamGroup::Domain`].

use std::io::{Read, Write};

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamGroup, ParamId, ParameterSet};
use crate::rng;
use crate::tensor::Tensor;

/// Lower bound added to the softplus std head.
pub const SIGMA_FLOOR: f64 = 1e-6;

/// How `f_d` consumes the domain index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum DomainConditioning {
    /// One network on `concat(z, one_hot(d))`.
    OneHot,
    /// One `f_i`-shaped network per domain.
    PerDomainHeads,
    /// `f_i(z)` with `f_i` held fixed, plus a correction network on
    /// `concat(z, one_hot(d))` whose output layer starts at zero.
    Residual,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub k_latent: usize,
    pub n_classes: usize,
    pub n_domains: usize,
    /// Width of the encoder's hidden layer; 0 makes both heads linear in x.
    pub encoder_hidden: usize,
    pub predictor_hidden: usize,
    /// 1 (linear) or 3 (two rectifier layers).
    pub predictor_depth: usize,
    pub domain_conditioning: DomainConditioning,
    /// Build a `z -> domain` classifier in the domain group.
    pub discriminator: bool,
    /// Initial bias of the raw std head; `softplus(-2) ≈ 0.127`.
    pub sigma_bias_init: f64,
}

/// The data-independent part of a [`ModelConfig`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub k_latent: usize,
    pub encoder_hidden: usize,
    pub predictor_hidden: usize,
    pub predictor_depth: usize,
    pub domain_conditioning: DomainConditioning,
    pub sigma_bias_init: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let c = ModelConfig::new(1, 1, 1);
        Self {
            k_latent: c.k_latent,
            encoder_hidden: c.encoder_hidden,
            predictor_hidden: c.predictor_hidden,
            predictor_depth: c.predictor_depth,
            domain_conditioning: c.domain_conditioning,
            sigma_bias_init: c.sigma_bias_init,
        }
    }
}

impl ModelConfig {
    pub fn from_arch(arch: &ArchConfig, input_dim: usize, n_classes: usize, n_domains: usize, discriminator: bool) -> Self {
        Self {
            input_dim,
            k_latent: arch.k_latent,
            n_classes,
            n_domains,
            encoder_hidden: arch.encoder_hidden,
            predictor_hidden: arch.predictor_hidden,
            predictor_depth: arch.predictor_depth,
            domain_conditioning: arch.domain_conditioning,
            discriminator,
            sigma_bias_init: arch.sigma_bias_init,
        }
    }

    pub fn new(input_dim: usize, n_classes: usize, n_domains: usize) -> Self {
        Self {
            input_dim,
            k_latent: 16,
            n_classes,
            n_domains,
            encoder_hidden: 64,
            predictor_hidden: 64,
            predictor_depth: 3,
            domain_conditioning: DomainConditioning::OneHot,
            discriminator: false,
            sigma_bias_init: -2.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("input_dim", self.input_dim),
            ("k_latent", self.k_latent),
            ("n_classes", self.n_classes),
            ("n_domains", self.n_domains),
        ] {
            if v == 0 {
                return Err(Error::InvalidArgument(format!("{name} must be >= 1")));
            }
        }
        if self.predictor_depth != 1 && self.predictor_depth != 3 {
            return Err(Error::InvalidArgument(format!(
                "predictor_depth must be 1 or 3, got {}",
                self.predictor_depth
            )));
        }
        if self.predictor_depth == 3 && self.predictor_hidden == 0 {
            return Err(Error::InvalidArgument("predictor_hidden must be >= 1 for depth 3".into()));
        }
        Ok(())
    }
}

/// Per-sample Gaussian code with diagonal covariance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianCode {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl GaussianCode {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        let code = Self { mean, std };
        code.validate()?;
        Ok(code)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mean.len() != self.std.len() || self.mean.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "GaussianCode",
                left: vec![self.mean.len()],
                right: vec![self.std.len()],
            });
        }
        if let Some(s) = self.std.iter().find(|&&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidArgument(format!("code std must be positive, got {s}")));
        }
        if self.mean.iter().any(|m| !m.is_finite()) {
            return Err(Error::NonFinite { op: "GaussianCode" });
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.mean.len()
    }

    /// `z = μ + σ ⊙ ε`.
    pub fn sample(&self, eps: &[f64]) -> Result<Vec<f64>> {
        if eps.len() != self.k() {
            return Err(Error::ShapeMismatch {
                op: "sample_code",
                left: vec![self.k()],
                right: vec![eps.len()],
            });
        }
        Ok(self.mean.iter().zip(&self.std).zip(eps).map(|((m, s), e)| m + s * e).collect())
    }
}

/// Graph handles of a batch of codes, each `[n, K]`.
#[derive(Clone, Copy, Debug)]
pub struct CodeVars {
    pub mu: Var,
    pub sigma: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    fn init(
        params: &mut ParameterSet,
        name: &str,
        group: ParamGroup,
        fan_in: usize,
        fan_out: usize,
        r: &mut rng::Rng,
    ) -> Result<Self> {
        let a = 1.0 / (fan_in as f64).sqrt();
        let w: Vec<f64> = (0..fan_in * fan_out).map(|_| r.random_range(-a..a)).collect();
        let b: Vec<f64> = (0..fan_out).map(|_| r.random_range(-a..a)).collect();
        Ok(Self {
            w: params.insert(format!("{name}.w"), group, Tensor::matrix(fan_in, fan_out, w)?)?,
            b: params.insert(format!("{name}.b"), group, Tensor::vector(b)?)?,
        })
    }

    fn forward(&self, g: &mut Graph, params: &ParameterSet, x: Var) -> Result<Var> {
        let w = g.param(params, self.w)?;
        let b = g.param(params, self.b)?;
        g.affine(x, w, b)
    }

    /// Weights enter as constants, so no gradient reaches them.
    fn forward_frozen(&self, g: &mut Graph, params: &ParameterSet, x: Var) -> Result<Var> {
        let w = g.constant(params.value(self.w).clone())?;
        let b = g.constant(params.value(self.b).clone())?;
        g.affine(x, w, b)
    }
}

/// Feedforward stack with rectifiers between layers.
#[derive(Clone, Debug, PartialEq, Eq)]
struct Mlp {
    layers: Vec<Linear>,
}

impl Mlp {
    fn init(
        params: &mut ParameterSet,
        name: &str,
        group: ParamGroup,
        dims: &[usize],
        r: &mut rng::Rng,
    ) -> Result<Self> {
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, d)| Linear::init(params, &format!("{name}.l{i}"), group, d[0], d[1], r))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    fn forward(&self, g: &mut Graph, params: &ParameterSet, x: Var) -> Result<Var> {
        self.run(g, params, x, false)
    }

    fn run(&self, g: &mut Graph, params: &ParameterSet, mut x: Var, frozen: bool) -> Result<Var> {
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                x = g.relu(x)?;
            }
            x = if frozen {
                layer.forward_frozen(g, params, x)?
            } else {
                layer.forward(g, params, x)?
            };
        }
        Ok(x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParameterSet,
    enc_hidden: Option<Linear>,
    enc_mu: Linear,
    enc_sigma: Linear,
    f_i: Mlp,
    f_d: Vec<Mlp>,
    disc: Option<Mlp>,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(seed, 0x0DE1);
        let mut params = ParameterSet::new();
        let c = &config;
        let (enc_hidden, head_in) = if c.encoder_hidden > 0 {
            let l = Linear::init(&mut params, "enc.hidden", ParamGroup::Encoder, c.input_dim, c.encoder_hidden, &mut r)?;
            (Some(l), c.encoder_hidden)
        } else {
            (None, c.input_dim)
        };
        let enc_mu = Linear::init(&mut params, "enc.mu", ParamGroup::Encoder, head_in, c.k_latent, &mut r)?;
        let enc_sigma = Linear::init(&mut params, "enc.sigma", ParamGroup::Encoder, head_in, c.k_latent, &mut r)?;
        params.value_mut(enc_sigma.b).data_mut().fill(c.sigma_bias_init);
        let dims = |input: usize, out: usize| {
            if c.predictor_depth == 1 {
                vec![input, out]
            } else {
                vec![input, c.predictor_hidden, c.predictor_hidden, out]
            }
        };
        let f_i = Mlp::init(&mut params, "fi", ParamGroup::Invariant, &dims(c.k_latent, c.n_classes), &mut r)?;
        let f_d = match c.domain_conditioning {
            DomainConditioning::OneHot | DomainConditioning::Residual => vec![Mlp::init(
                &mut params,
                "fd",
                ParamGroup::Domain,
                &dims(c.k_latent + c.n_domains, c.n_classes),
                &mut r,
            )?],
            DomainConditioning::PerDomainHeads => (0..c.n_domains)
                .map(|d| {
                    Mlp::init(
                        &mut params,
                        &format!("fd{d}"),
                        ParamGroup::Domain,
                        &dims(c.k_latent, c.n_classes),
                        &mut r,
                    )
                })
                .collect::<Result<_>>()?,
        };
        if c.domain_conditioning == DomainConditioning::Residual {
            let last = f_d[0].layers.last().expect("non-empty");
            params.value_mut(last.w).data_mut().fill(0.0);
            params.value_mut(last.b).data_mut().fill(0.0);
        }
        let disc = if c.discriminator {
            Some(Mlp::init(&mut params, "disc", ParamGroup::Domain, &dims(c.k_latent, c.n_domains), &mut r)?)
        } else {
            None
        };
        Ok(Self {
            config,
            params,
            enc_hidden,
            enc_mu,
            enc_sigma,
            f_i,
            f_d,
            disc,
        })
    }

    /// Fresh initial values for every parameter of `group`, drawn as if the
    /// model were initialized with `seed`.
    pub fn reinit_group(&mut self, group: ParamGroup, seed: u64) -> Result<()> {
        let fresh = Model::init(self.config.clone(), seed)?;
        for id in self.params.group_ids(group) {
            *self.params.value_mut(id) = fresh.params.value(id).clone();
        }
        Ok(())
    }

    pub fn has_discriminator(&self) -> bool {
        self.disc.is_some()
    }

    /// Mean and std heads for a batch `x: [n, input_dim]`.
    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<CodeVars> {
        let shape = g.value(x).shape().to_vec();
        if shape.len() != 2 || shape[1] != self.config.input_dim {
            return Err(Error::ShapeMismatch {
                op: "encode",
                left: shape,
                right: vec![self.config.input_dim],
            });
        }
        let h = match &self.enc_hidden {
            Some(l) => {
                let h = l.forward(g, &self.params, x)?;
                g.relu(h)?
            }
            None => x,
        };
        let mu = self.enc_mu.forward(g, &self.params, h)?;
        let raw = self.enc_sigma.forward(g, &self.params, h)?;
        let sp = g.softplus(raw)?;
        let sigma = g.offset(sp, SIGMA_FLOOR)?;
        Ok(CodeVars { mu, sigma })
    }

    /// `z = μ + σ ⊙ ε`; `None` takes the deterministic path `z = μ`.
    pub fn sample_code(&self, g: &mut Graph, code: CodeVars, eps: Option<&Tensor>) -> Result<Var> {
        let Some(eps) = eps else {
            return Ok(code.mu);
        };
        let e = g.constant(eps.clone())?;
        let noise = g.mul(code.sigma, e)?;
        g.add(code.mu, noise)
    }

    pub fn predict_invariant(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.check_code(g, z, "predict_invariant")?;
        self.f_i.forward(g, &self.params, z)
    }

    /// Logits of `f_d(z, d)`, one domain index per row of `z`.
    pub fn predict_domain(&self, g: &mut Graph, z: Var, domains: &[usize]) -> Result<Var> {
        self.predict_domain_with(g, &self.params, z, domains)
    }

    /// [`Model::predict_domain`] reading the domain group from `params`,
    /// which must share this model's layout.
    pub fn predict_domain_with(&self, g: &mut Graph, params: &ParameterSet, z: Var, domains: &[usize]) -> Result<Var> {
        self.check_code(g, z, "predict_domain")?;
        let n = g.value(z).rows();
        if domains.len() != n {
            return Err(Error::ShapeMismatch {
                op: "predict_domain",
                left: vec![n],
                right: vec![domains.len()],
            });
        }
        let nd = self.config.n_domains;
        if let Some(&d) = domains.iter().find(|&&d| d >= nd) {
            return Err(Error::DomainOutOfRange { index: d, n_domains: nd });
        }
        let one_hot_input = |g: &mut Graph| -> Result<Var> {
            let mut onehot = vec![0.0; n * nd];
            for (i, &d) in domains.iter().enumerate() {
                onehot[i * nd + d] = 1.0;
            }
            let oh = g.constant(Tensor::matrix(n, nd, onehot)?)?;
            g.concat_cols(z, oh)
        };
        match self.config.domain_conditioning {
            DomainConditioning::OneHot => {
                let input = one_hot_input(g)?;
                self.f_d[0].forward(g, params, input)
            }
            DomainConditioning::Residual => {
                // The base is read from this model's own f_i, not from `params`.
                let base = self.f_i.run(g, &self.params, z, true)?;
                let input = one_hot_input(g)?;
                let correction = self.f_d[0].forward(g, params, input)?;
                g.add(base, correction)
            }
            DomainConditioning::PerDomainHeads => {
                let k = self.config.n_classes;
                let mut out: Option<Var> = None;
                for (d, head) in self.f_d.iter().enumerate() {
                    if !domains.contains(&d) {
                        continue;
                    }
                    let logits = head.forward(g, params, z)?;
                    let mask: Vec<f64> = domains
                        .iter()
                        .flat_map(|&di| std::iter::repeat_n(if di == d { 1.0 } else { 0.0 }, k))
                        .collect();
                    let m = g.constant(Tensor::matrix(n, k, mask)?)?;
                    let masked = g.mul(logits, m)?;
                    out = Some(match out {
                        Some(acc) => g.add(acc, masked)?,
                        None => masked,
                    });
                }
                Ok(out.expect("at least one domain present"))
            }
        }
    }

    /// Domain logits for the domain-adversarial baseline.
    pub fn discriminate(&self, g: &mut Graph, z: Var) -> Result<Var> {
        self.discriminate_with(g, &self.params, z)
    }

    pub fn discriminate_with(&self, g: &mut Graph, params: &ParameterSet, z: Var) -> Result<Var> {
        self.check_code(g, z, "discriminate")?;
        let disc = self
            .disc
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("model was built without a discriminator".into()))?;
        disc.forward(g, params, z)
    }

    fn check_code(&self, g: &Graph, z: Var, op: &'static str) -> Result<()> {
        let shape = g.value(z).shape();
        if shape.len() != 2 || shape[1] != self.config.k_latent {
            return Err(Error::ShapeMismatch {
                op,
                left: shape.to_vec(),
                right: vec![self.config.k_latent],
            });
        }
        Ok(())
    }

    /// Codes for a batch of rows, outside any training graph.
    pub fn codes(&self, x: &Tensor) -> Result<Vec<GaussianCode>> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone())?;
        let code = self.encode(&mut g, xv)?;
        let (mu, sigma) = (g.value(code.mu), g.value(code.sigma));
        (0..mu.rows())
            .map(|i| GaussianCode::new(mu.row(i).to_vec(), sigma.row(i).to_vec()))
            .collect()
    }

    /// Invariant-predictor logits on the mean code (`ε = 0`).
    pub fn predict_logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let xv = g.constant(x.clone())?;
        let code = self.encode(&mut g, xv)?;
        let logits = self.predict_invariant(&mut g, code.mu)?;
        Ok(g.evaluate(logits))
    }

    pub fn save<W: Write>(&self, w: W) -> Result<()> {
        write_params(&self.params, w)
    }

    /// Replaces the parameter values with a checkpoint of the same layout.
    pub fn load_params(&mut self, params: ParameterSet) -> Result<()> {
        if params.len() != self.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model has {}",
                params.len(),
                self.params.len()
            )));
        }
        for (_, p) in self.params.iter() {
            let other = params.get(params.id(&p.name)?);
            if other.value.shape() != p.value.shape() || other.group != p.group {
                return Err(Error::Format(format!("checkpoint tensor `{}` differs in shape or group", p.name)));
            }
        }
        self.params = params_in_order(&self.params, &params)?;
        Ok(())
    }
}

fn params_in_order(layout: &ParameterSet, src: &ParameterSet) -> Result<ParameterSet> {
    let mut out = ParameterSet::new();
    for (_, p) in layout.iter() {
        out.insert(p.name.clone(), p.group, src.by_name(&p.name)?.clone())?;
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Parameter checkpoints.

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IIBP";
pub const CHECKPOINT_VERSION: u16 = 1;

/// Layout: magic `IIBP`, version `u16`, tensor count `u32`, then per tensor
/// a directory entry (name length `u16`, UTF-8 name, group `u8`, rank `u8`,
/// dims `u32`), then every tensor's values as little-endian `f64` in
/// directory order.
pub fn write_params<W: Write>(params: &ParameterSet, mut w: W) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, p) in params.iter() {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("name `{}` too long", p.name)))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(p.group.code());
        buf.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for (_, p) in params.iter() {
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_params<R: Read>(mut r: R) -> Result<ParameterSet> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut cur = bytes.as_slice();
    let mut take = |n: usize| -> Result<&[u8]> {
        if cur.len() < n {
            return Err(Error::Format("truncated IIBP stream".into()));
        }
        let (head, rest) = cur.split_at(n);
        cur = rest;
        Ok(head)
    };
    if take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not an IIBP stream".into()));
    }
    let version = u16::from_le_bytes(take(2)?.try_into().unwrap());
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported IIBP version {version}")));
    }
    let count = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    let mut dir = Vec::with_capacity(count);
    for _ in 0..count {
        let len = u16::from_le_bytes(take(2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(len)?.to_vec()).map_err(|_| Error::Format("non-UTF-8 tensor name".into()))?;
        let group = ParamGroup::from_code(take(1)?[0]).ok_or_else(|| Error::Format("bad group code".into()))?;
        let rank = take(1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize);
        }
        dir.push((name, group, shape));
    }
    let mut params = ParameterSet::new();
    for (name, group, shape) in dir {
        let n: usize = shape.iter().product();
        let raw = take(n * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        params.insert(name, group, Tensor::new(shape, data)?)?;
    }
    if !cur.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after IIBP payload", cur.len())));
    }
    Ok(params)
}
