//! Procedural multi-environment datasets.
//!
//! Every generator is a pure function of its spec and seed. Each environment
//! draws from its own RNG stream derived from `(seed, environment)`, so the
//! samples of one environment do not depend on which other environments are
//! requested alongside it.

mod images;
pub mod io;
pub mod lines;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

pub use images::ImageSpec;
pub use lines::{line_table, LineConfig, LineSlot, Orientation};

/// Group membership used by the skew constructions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum GroupTag {
    Unassigned,
    Majority,
    Minority,
}

impl GroupTag {
    pub fn code(self) -> u8 {
        match self {
            GroupTag::Unassigned => 0,
            GroupTag::Majority => 1,
            GroupTag::Minority => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(GroupTag::Unassigned),
            1 => Some(GroupTag::Majority),
            2 => Some(GroupTag::Minority),
            _ => None,
        }
    }
}

/// Labeled samples from one domain.
#[derive(Clone, Debug, PartialEq)]
pub struct EnvironmentDataset {
    /// `[n, input_dim]`, row per sample. Images are flattened channel-major.
    pub inputs: Tensor,
    /// Logical per-sample shape, e.g. `[d]` or `[3, 8, 8]`.
    pub feature_shape: Vec<usize>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
    pub domain: usize,
    pub groups: Vec<GroupTag>,
    /// Ground truth of the spurious mechanism, one row per sample. Not
    /// persisted by the binary container.
    pub spurious: Option<Tensor>,
}

impl EnvironmentDataset {
    pub fn new(
        rows: Vec<Vec<f64>>,
        feature_shape: Vec<usize>,
        labels: Vec<usize>,
        n_classes: usize,
        domain: usize,
        groups: Vec<GroupTag>,
        spurious: Option<Vec<Vec<f64>>>,
    ) -> Result<Self> {
        let inputs = Tensor::from_rows(&rows)?;
        let spurious = spurious.map(|s| Tensor::from_rows(&s)).transpose()?;
        let ds = Self {
            inputs,
            feature_shape,
            labels,
            n_classes,
            domain,
            groups,
            spurious,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.labels.len();
        if n == 0 {
            return Err(Error::EmptyBatch("EnvironmentDataset"));
        }
        if self.inputs.rows() != n || self.inputs.shape().len() != 2 {
            return Err(Error::ShapeMismatch {
                op: "EnvironmentDataset",
                left: self.inputs.shape().to_vec(),
                right: vec![n],
            });
        }
        if self.feature_shape.iter().product::<usize>() != self.inputs.cols() {
            return Err(Error::ShapeMismatch {
                op: "EnvironmentDataset",
                left: self.feature_shape.clone(),
                right: vec![self.inputs.cols()],
            });
        }
        if let Some(&bad) = self.labels.iter().find(|&&y| y >= self.n_classes) {
            return Err(Error::InvalidArgument(format!(
                "label {bad} out of range for {} classes",
                self.n_classes
            )));
        }
        if self.groups.len() != n {
            return Err(Error::InvalidArgument(format!("{} group tags for {n} samples", self.groups.len())));
        }
        if let Some(s) = &self.spurious {
            if s.rows() != n {
                return Err(Error::InvalidArgument(format!("{} spurious rows for {n} samples", s.rows())));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.inputs.row(i)
    }

    pub fn with_domain(mut self, domain: usize) -> Self {
        self.domain = domain;
        self
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::EmptyBatch("subset"));
        }
        let rows: Vec<Vec<f64>> = indices.iter().map(|&i| self.row(i).to_vec()).collect();
        let spurious = self
            .spurious
            .as_ref()
            .map(|s| indices.iter().map(|&i| s.row(i).to_vec()).collect());
        Self::new(
            rows,
            self.feature_shape.clone(),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.n_classes,
            self.domain,
            indices.iter().map(|&i| self.groups[i]).collect(),
            spurious,
        )
    }

    /// Deterministic shuffled split into `(train, validation)` with
    /// `round(fraction * n)` validation samples (at least one of each).
    pub fn split(&self, fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(fraction > 0.0 && fraction < 1.0) || self.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "cannot split {} samples with fraction {fraction}",
                self.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.len()).collect();
        let mut r = rng::stream(seed, 0x5911_7000 + self.domain as u64);
        shuffle(&mut order, &mut r);
        let n_val = ((fraction * self.len() as f64).round() as usize).clamp(1, self.len() - 1);
        let (val, train) = order.split_at(n_val);
        let mut train = train.to_vec();
        let mut val = val.to_vec();
        train.sort_unstable();
        val.sort_unstable();
        Ok((self.subset(&train)?, self.subset(&val)?))
    }
}

fn shuffle<T>(items: &mut [T], r: &mut Rng) {
    for i in (1..items.len()).rev() {
        let j = r.random_range(0..=i);
        items.swap(i, j);
    }
}

fn normal(r: &mut Rng) -> f64 {
    r.sample(StandardNormal)
}

fn sign_of_class(class: usize) -> f64 {
    2.0 * class as f64 - 1.0
}

// ---------------------------------------------------------------------------
// Linear SCM with environment-dependent spurious means.

/// Linear structural model: `z_c = y·μ_c·1 + N(0, σ_c²)`,
/// `z_s = y·μ_e + N(0, I)`, `x = [z_c, z_s]`, `y ∈ {±1}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScmSpec {
    pub d_causal: usize,
    pub d_spurious: usize,
    pub causal_mean_scale: f64,
    pub causal_noise: f64,
    /// One spurious mean per environment, each of length `d_spurious`.
    pub env_means: Vec<Vec<f64>>,
    /// `P(y = +1)`.
    pub label_prior: f64,
}

impl ScmSpec {
    pub fn validate(&self) -> Result<()> {
        if self.d_causal == 0 || self.d_spurious == 0 {
            return Err(Error::InvalidArgument("d_causal and d_spurious must be >= 1".into()));
        }
        if self.env_means.iter().any(|m| m.len() != self.d_spurious) {
            return Err(Error::InvalidArgument(format!(
                "every spurious mean needs {} entries",
                self.d_spurious
            )));
        }
        if !(0.0..=1.0).contains(&self.label_prior) {
            return Err(Error::InvalidArgument(format!("label_prior {} not a probability", self.label_prior)));
        }
        if self.causal_noise < 0.0 {
            return Err(Error::InvalidArgument("causal_noise must be >= 0".into()));
        }
        Ok(())
    }
}

pub fn gen_linear_scm(spec: &ScmSpec, n_per_env: usize, envs: &[usize], seed: u64) -> Result<Vec<EnvironmentDataset>> {
    spec.validate()?;
    if n_per_env == 0 {
        return Err(Error::InvalidArgument("n_per_env must be >= 1".into()));
    }
    envs.iter()
        .map(|&e| {
            let mean = spec.env_means.get(e).ok_or(Error::UnknownEnvironment {
                index: e,
                available: spec.env_means.len(),
            })?;
            let mut r = rng::stream(seed, 0x5C00 + e as u64);
            let mut rows = Vec::with_capacity(n_per_env);
            let mut labels = Vec::with_capacity(n_per_env);
            let mut spurious = Vec::with_capacity(n_per_env);
            for _ in 0..n_per_env {
                let class = usize::from(r.random::<f64>() < spec.label_prior);
                let y = sign_of_class(class);
                let mut x: Vec<f64> = (0..spec.d_causal)
                    .map(|_| y * spec.causal_mean_scale + spec.causal_noise * normal(&mut r))
                    .collect();
                let zs: Vec<f64> = mean.iter().map(|&m| y * m + normal(&mut r)).collect();
                x.extend_from_slice(&zs);
                rows.push(x);
                labels.push(class);
                spurious.push(zs);
            }
            EnvironmentDataset::new(
                rows,
                vec![spec.d_causal + spec.d_spurious],
                labels,
                2,
                e,
                vec![GroupTag::Unassigned; n_per_env],
                Some(spurious),
            )
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Geometric skew.

/// Majority/minority construction where a scalar spurious coordinate agrees
/// with the label on the majority group only.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkewSpec {
    pub n_majority: usize,
    pub n_minority: usize,
    pub spurious_margin: f64,
    pub invariant_dim: usize,
    /// Smallest invariant margin `y·z_inv[0]`; margins are uniform on
    /// `[min_margin, 1]`, so the closest point to the boundary approaches
    /// `min_margin` as the sample grows.
    pub min_margin: f64,
    /// Std of the label-independent invariant coordinates `1..invariant_dim`.
    pub nuisance_std: f64,
}

impl Default for SkewSpec {
    fn default() -> Self {
        Self {
            n_majority: 950,
            n_minority: 50,
            spurious_margin: 1.0,
            invariant_dim: 2,
            min_margin: 1e-3,
            nuisance_std: 0.1,
        }
    }
}

impl SkewSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_minority == 0 || self.n_majority <= self.n_minority {
            return Err(Error::InvalidArgument(format!(
                "need n_majority > n_minority >= 1, got {} and {}",
                self.n_majority, self.n_minority
            )));
        }
        if self.invariant_dim == 0 {
            return Err(Error::InvalidArgument("invariant_dim must be >= 1".into()));
        }
        if self.spurious_margin < 0.0 {
            return Err(Error::InvalidArgument("spurious_margin must be >= 0".into()));
        }
        if !(self.min_margin > 0.0 && self.min_margin <= 1.0) {
            return Err(Error::InvalidArgument("min_margin must lie in (0, 1]".into()));
        }
        Ok(())
    }
}

/// Features `[z_inv (invariant_dim), z_sp]`. Majority rows come first.
pub fn gen_geoskew(spec: &SkewSpec, seed: u64) -> Result<EnvironmentDataset> {
    spec.validate()?;
    let mut r = rng::stream(seed, 0x6E05);
    let n = spec.n_majority + spec.n_minority;
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut groups = Vec::with_capacity(n);
    let mut spurious = Vec::with_capacity(n);
    for i in 0..n {
        let class = usize::from(r.random::<bool>());
        let y = sign_of_class(class);
        let group = if i < spec.n_majority { GroupTag::Majority } else { GroupTag::Minority };
        let margin = spec.min_margin + (1.0 - spec.min_margin) * r.random::<f64>();
        let mut x = vec![y * margin];
        x.extend((1..spec.invariant_dim).map(|_| spec.nuisance_std * normal(&mut r)));
        let zsp = match group {
            GroupTag::Majority => spec.spurious_margin * y,
            _ => -spec.spurious_margin * y,
        };
        x.push(zsp);
        rows.push(x);
        labels.push(class);
        groups.push(group);
        spurious.push(vec![zsp]);
    }
    EnvironmentDataset::new(
        rows,
        vec![spec.invariant_dim + 1],
        labels,
        2,
        0,
        groups,
        Some(spurious),
    )
}

// ---------------------------------------------------------------------------
// Colored analogue: Gaussian class content plus a one-hot color block.

pub const N_COLOR_CLASSES: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsCmnistSpec {
    pub content_dim: usize,
    /// Norm of each class prototype.
    pub prototype_scale: f64,
    /// Std of the isotropic content noise.
    pub content_noise: f64,
}

impl Default for CsCmnistSpec {
    fn default() -> Self {
        Self {
            content_dim: 16,
            prototype_scale: 1.0,
            content_noise: 0.5,
        }
    }
}

/// Fixed class prototypes shared by every environment and every seed.
pub fn cs_cmnist_prototypes(spec: &CsCmnistSpec) -> Vec<Vec<f64>> {
    let mut r = rng::stream(0x0C0A_7E47, spec.content_dim as u64);
    (0..N_COLOR_CLASSES)
        .map(|_| {
            let v: Vec<f64> = (0..spec.content_dim).map(|_| normal(&mut r)).collect();
            let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
            v.into_iter().map(|a| a * spec.prototype_scale / norm).collect()
        })
        .collect()
}

pub fn gen_cs_cmnist_analogue(p_e: &[f64], n_per_env: usize, seed: u64) -> Result<Vec<EnvironmentDataset>> {
    gen_cs_cmnist_with(&CsCmnistSpec::default(), p_e, n_per_env, seed)
}

/// Environment `e` has color agreement probability `p_e[e]`; otherwise the
/// color index is uniform over all ten colors. Input is `[content, color]`.
pub fn gen_cs_cmnist_with(
    spec: &CsCmnistSpec,
    p_e: &[f64],
    n_per_env: usize,
    seed: u64,
) -> Result<Vec<EnvironmentDataset>> {
    if let Some(p) = p_e.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::InvalidArgument(format!("color probability {p} outside [0, 1]")));
    }
    if n_per_env == 0 || spec.content_dim == 0 {
        return Err(Error::InvalidArgument("n_per_env and content_dim must be >= 1".into()));
    }
    let prototypes = cs_cmnist_prototypes(spec);
    p_e.iter()
        .enumerate()
        .map(|(e, &p)| {
            let mut r = rng::stream(seed, 0xC5C0 + e as u64);
            let mut rows = Vec::with_capacity(n_per_env);
            let mut labels = Vec::with_capacity(n_per_env);
            let mut groups = Vec::with_capacity(n_per_env);
            let mut spurious = Vec::with_capacity(n_per_env);
            for _ in 0..n_per_env {
                let class = r.random_range(0..N_COLOR_CLASSES);
                let mut x: Vec<f64> = prototypes[class]
                    .iter()
                    .map(|&m| m + spec.content_noise * normal(&mut r))
                    .collect();
                let color = if r.random::<f64>() < p {
                    class
                } else {
                    r.random_range(0..N_COLOR_CLASSES)
                };
                x.extend((0..N_COLOR_CLASSES).map(|k| if k == color { 1.0 } else { 0.0 }));
                rows.push(x);
                labels.push(class);
                groups.push(if color == class { GroupTag::Majority } else { GroupTag::Minority });
                spurious.push(vec![color as f64]);
            }
            EnvironmentDataset::new(
                rows,
                vec![spec.content_dim + N_COLOR_CLASSES],
                labels,
                N_COLOR_CLASSES,
                e,
                groups,
                Some(spurious),
            )
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Image tasks.

/// Cross-Lines options beyond the positional arguments.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CrossLinesSpec {
    pub image: ImageSpec,
    /// Own-configuration probability of each training environment, given as
    /// a multiple of `p_diag` mixed toward the uninformative value `1/11`:
    /// `p = 1/11 + factor·(p_diag − 1/11)`.
    pub env_strength: Vec<f64>,
    /// `B` magnitude in the line value `0.5 + 0.5·sign·B`.
    pub line_strength: f64,
}

impl Default for CrossLinesSpec {
    fn default() -> Self {
        Self {
            image: ImageSpec::default(),
            env_strength: vec![1.0, 0.5],
            line_strength: 1.0,
        }
    }
}

/// Probability of an own-configuration draw that makes the line carry no
/// information about the class.
pub const CROSS_LINES_UNINFORMATIVE: f64 = 1.0 / 11.0;

pub fn gen_cross_lines(
    n_per_class: usize,
    p_diag: f64,
    image_hw: usize,
    seed: u64,
) -> Result<(Vec<EnvironmentDataset>, EnvironmentDataset)> {
    let spec = CrossLinesSpec {
        image: ImageSpec {
            hw: image_hw,
            ..ImageSpec::default()
        },
        ..CrossLinesSpec::default()
    };
    gen_cross_lines_with(&spec, n_per_class, p_diag, seed)
}

/// Training environments carry line overlays; the test set has none.
///
/// For a class-`i` image the line configuration is row `i` of the table with
/// probability `p` (majority group) and otherwise one of the ten remaining
/// rows uniformly, `(1 − p)/10` each (minority group).
pub fn gen_cross_lines_with(
    spec: &CrossLinesSpec,
    n_per_class: usize,
    p_diag: f64,
    seed: u64,
) -> Result<(Vec<EnvironmentDataset>, EnvironmentDataset)> {
    if !(p_diag > 0.0 && p_diag <= 1.0) {
        return Err(Error::InvalidArgument(format!("p_diag {p_diag} outside (0, 1]")));
    }
    spec.image.validate()?;
    if n_per_class == 0 || spec.env_strength.is_empty() {
        return Err(Error::InvalidArgument("need n_per_class >= 1 and one environment".into()));
    }
    let table = line_table();
    let classes = images::N_IMAGE_CLASSES;
    let base = CROSS_LINES_UNINFORMATIVE;
    let mut train = Vec::with_capacity(spec.env_strength.len());
    for (e, &factor) in spec.env_strength.iter().enumerate() {
        let p = (base + factor * (p_diag - base)).clamp(0.0, 1.0);
        let mut r = rng::stream(seed, 0xC105 + e as u64);
        let mut rows = Vec::with_capacity(classes * n_per_class);
        let mut labels = Vec::new();
        let mut groups = Vec::new();
        let mut spurious = Vec::new();
        for class in 0..classes {
            for _ in 0..n_per_class {
                let mut img = images::class_image(&spec.image, class, &mut r);
                let (config, group) = if r.random::<f64>() < p {
                    (class, GroupTag::Majority)
                } else {
                    let mut j = r.random_range(0..table.len() - 1);
                    if j >= class {
                        j += 1;
                    }
                    (j, GroupTag::Minority)
                };
                images::draw_lines(&spec.image, &mut img, &table[config], spec.line_strength);
                rows.push(img);
                labels.push(class);
                groups.push(group);
                spurious.push(vec![config as f64]);
            }
        }
        train.push(EnvironmentDataset::new(
            rows,
            spec.image.feature_shape(),
            labels,
            classes,
            e,
            groups,
            Some(spurious),
        )?);
    }
    let mut r = rng::stream(seed, 0xC105_7E57);
    let mut rows = Vec::with_capacity(classes * n_per_class);
    let mut labels = Vec::new();
    for class in 0..classes {
        for _ in 0..n_per_class {
            rows.push(images::class_image(&spec.image, class, &mut r));
            labels.push(class);
        }
    }
    let n = rows.len();
    let test = EnvironmentDataset::new(
        rows,
        spec.image.feature_shape(),
        labels,
        classes,
        spec.env_strength.len(),
        vec![GroupTag::Unassigned; n],
        None,
    )?;
    Ok((train, test))
}

pub const VERTICAL_LINE_MAX_B: f64 = 4.0;

pub fn gen_vertical_line(b: f64, n: usize, image_hw: usize, seed: u64) -> Result<EnvironmentDataset> {
    let spec = ImageSpec {
        hw: image_hw,
        ..ImageSpec::default()
    };
    gen_vertical_line_with(&spec, b, n, seed)
}

/// Base class images with the last channel mapped to
/// `(x + 4 + B·[on middle column]) / 9`.
///
/// The base images depend on `seed` only, so datasets that differ only in
/// `B` share their underlying samples.
pub fn gen_vertical_line_with(spec: &ImageSpec, b: f64, n: usize, seed: u64) -> Result<EnvironmentDataset> {
    if !(-VERTICAL_LINE_MAX_B..=VERTICAL_LINE_MAX_B).contains(&b) {
        return Err(Error::InvalidArgument(format!("B = {b} outside [-4, 4]")));
    }
    spec.validate()?;
    if n == 0 {
        return Err(Error::InvalidArgument("n must be >= 1".into()));
    }
    let mut r = rng::stream(seed, 0x7E47);
    let mut rows = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        let class = r.random_range(0..images::N_IMAGE_CLASSES);
        let mut img = images::class_image(spec, class, &mut r);
        images::vertical_line_transform(spec, &mut img, b);
        rows.push(img);
        labels.push(class);
    }
    EnvironmentDataset::new(
        rows,
        spec.feature_shape(),
        labels,
        images::N_IMAGE_CLASSES,
        0,
        vec![GroupTag::Unassigned; n],
        Some(vec![vec![b]; n]),
    )
}

#[cfg(test)]
mod tests;
