//! Alternating min-max training and model selection.

use std::time::Instant;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::envgen::{EnvironmentDataset, GroupTag};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::models::{ArchConfig, Model, ModelConfig};
use crate::objectives::{self, Batch, LossBreakdown, ObjectiveSpec};
use crate::optim::{Optimizer, OptimizerKind};
use crate::params::{ParamGroup, ParameterSet};
use crate::parallel::{self, Execution};
use crate::rng::{self, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Selection {
    TrainingDomainValidation,
    LeaveOneDomainOut,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    /// Samples drawn per environment per step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adversary_steps_per_min_step: usize,
    /// Reinitialize the domain group every this many iterations; 0 never.
    pub adversary_reinit_every: usize,
    pub optimizer: OptimizerKind,
    pub seed: u64,
    pub selection: Selection,
    pub validation_fraction: f64,
    pub eval_every: usize,
    /// Evaluate with one sampled code per example instead of the mean.
    pub stochastic_eval: bool,
    /// Verify after every update that only the intended group moved.
    pub debug_checks: bool,
    pub arch: ArchConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            iterations: 3000,
            batch_size: 64,
            learning_rate: 1e-3,
            adversary_steps_per_min_step: 1,
            adversary_reinit_every: 0,
            optimizer: OptimizerKind::Adam,
            seed: 0,
            selection: Selection::TrainingDomainValidation,
            validation_fraction: 0.2,
            eval_every: 100,
            stochastic_eval: false,
            debug_checks: false,
            arch: ArchConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.batch_size == 0 || self.eval_every == 0 {
            return Err(Error::InvalidArgument("iterations, batch_size and eval_every must be >= 1".into()));
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction <= 0.5) {
            return Err(Error::InvalidArgument(format!(
                "validation_fraction {} outside (0, 0.5]",
                self.validation_fraction
            )));
        }
        if self.adversary_steps_per_min_step == 0 {
            return Err(Error::InvalidArgument("adversary_steps_per_min_step must be >= 1".into()));
        }
        Ok(())
    }
}

/// Model, optimizers and iteration counter of one run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: Model,
    minimizer: Optimizer,
    adversary: Optimizer,
    pub iteration: usize,
}

impl TrainState {
    pub fn new(model: Model, cfg: &TrainConfig) -> Result<Self> {
        let minimizer = Optimizer::new(
            cfg.optimizer,
            cfg.learning_rate,
            &model.params,
            &[ParamGroup::Encoder, ParamGroup::Invariant],
        )?;
        let adversary = Optimizer::new(cfg.optimizer, cfg.learning_rate, &model.params, &[ParamGroup::Domain])?;
        Ok(Self {
            model,
            minimizer,
            adversary,
            iteration: 0,
        })
    }

    /// Fresh model for `envs` sized from the data.
    pub fn for_data(envs: &[&EnvironmentDataset], spec: &ObjectiveSpec, cfg: &TrainConfig) -> Result<Self> {
        let first = envs.first().ok_or(Error::EmptyBatch("training environments"))?;
        let mc = ModelConfig::from_arch(
            &cfg.arch,
            first.input_dim(),
            first.n_classes,
            envs.len(),
            spec.method == objectives::Method::DomainAdv,
        );
        Self::new(Model::init(mc, rng::derive_seed(cfg.seed, 1))?, cfg)
    }
}

fn check_env_count(spec: &ObjectiveSpec, got: usize) -> Result<()> {
    if got == 0 || (spec.method.needs_multiple_envs() && got < 2) {
        return Err(Error::TooFewEnvironments {
            method: spec.method.to_string(),
            got,
        });
    }
    Ok(())
}

fn sample_indices(n: usize, k: usize, r: &mut Rng) -> Vec<usize> {
    if k <= n {
        rand::seq::index::sample(r, n, k).into_vec()
    } else {
        (0..k).map(|_| r.random_range(0..n)).collect()
    }
}

fn gaussian(rows: usize, cols: usize, r: &mut Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| r.sample(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("positive shape")
}

fn assert_groups_unchanged(before: &ParameterSet, after: &ParameterSet, groups: &[ParamGroup], during: &str) -> Result<()> {
    for &group in groups {
        for id in before.group_ids(group) {
            let (a, b) = (before.value(id).data(), after.value(id).data());
            if a.iter().zip(b).any(|(x, y)| x.to_bits() != y.to_bits()) {
                return Err(Error::InvalidArgument(format!(
                    "{group:?} parameter `{}` changed during {during}",
                    before.get(id).name
                )));
            }
        }
    }
    Ok(())
}

/// One min-max step: draw a batch per environment and a shared `ε`, update
/// the domain group on the adversary loss, then update encoder and
/// invariant predictor on the minimizer loss with the domain group frozen.
/// Returns the losses measured before any update.
pub fn train_step(
    envs: &[&EnvironmentDataset],
    state: &mut TrainState,
    spec: &ObjectiveSpec,
    cfg: &TrainConfig,
    r: &mut Rng,
) -> Result<LossBreakdown> {
    check_env_count(spec, envs.len())?;
    let spec_t = spec.at_iteration(state.iteration);
    let indices: Vec<Vec<usize>> = envs.iter().map(|e| sample_indices(e.len(), cfg.batch_size, r)).collect();
    let batch = Batch::gather(envs, &indices)?;
    let eps = spec
        .method
        .stochastic()
        .then(|| gaussian(batch.len(), state.model.config.k_latent, r));

    if cfg.adversary_reinit_every > 0 && state.iteration > 0 && state.iteration.is_multiple_of(cfg.adversary_reinit_every) {
        let seed = rng::derive_seed(cfg.seed, 0xAD00 + state.iteration as u64);
        state.model.reinit_group(ParamGroup::Domain, seed)?;
        state.adversary = Optimizer::new(cfg.optimizer, cfg.learning_rate, &state.model.params, &[ParamGroup::Domain])?;
    }

    let mut g = Graph::new();
    let parts = objectives::build_parts(&mut g, &state.model, &batch, &spec_t, eps.as_ref())?;
    let measured = objectives::breakdown(&g, &spec_t, &parts)?;
    let (min_root, adv_root) = objectives::compose_graph(&mut g, &spec_t, parts.l_i, parts.l_z, parts.l_d, parts.irm_pen)?;

    let Some(adv_root) = adv_root else {
        let before = cfg.debug_checks.then(|| state.model.params.clone());
        let grads = g.backward(min_root, &state.model.params)?;
        state.minimizer.step(&mut state.model.params, &grads)?;
        if let Some(b) = before {
            assert_groups_unchanged(&b, &state.model.params, &[ParamGroup::Domain], "minimizer step")?;
        }
        state.iteration += 1;
        return Ok(measured);
    };

    // Adversary updates. The first reuses this graph; later ones see z as a
    // constant.
    let z_value = g.value(parts.z).clone();
    for k in 0..cfg.adversary_steps_per_min_step {
        let before = cfg.debug_checks.then(|| state.model.params.clone());
        let grads = if k == 0 {
            g.backward(adv_root, &state.model.params)?
        } else {
            let mut ga = Graph::new();
            let z = ga.constant(z_value.clone())?;
            let loss = objectives::domain_term(&mut ga, &state.model, &state.model.params, z, &batch, spec.method)?
                .expect("adversary methods have a domain term");
            ga.backward(loss, &state.model.params)?
        };
        state.adversary.step(&mut state.model.params, &grads)?;
        if let Some(b) = before {
            assert_groups_unchanged(&b, &state.model.params, &[ParamGroup::Encoder, ParamGroup::Invariant], "adversary step")?;
        }
    }

    // Minimizer update against the refreshed domain group.
    let params = state.model.params.clone();
    let l_d = objectives::domain_term(&mut g, &state.model, &params, parts.z, &batch, spec.method)?;
    let (min_root, _) = objectives::compose_graph(&mut g, &spec_t, parts.l_i, parts.l_z, l_d, parts.irm_pen)?;
    let grads = g.backward(min_root, &params)?;
    state.minimizer.step(&mut state.model.params, &grads)?;
    if cfg.debug_checks {
        assert_groups_unchanged(&params, &state.model.params, &[ParamGroup::Domain], "minimizer step")?;
    }
    state.iteration += 1;
    Ok(measured)
}

// ---------------------------------------------------------------------------
// Evaluation.

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvAccuracy {
    pub acc: f64,
    pub majority: Option<f64>,
    pub minority: Option<f64>,
}

const EVAL_CHUNK: usize = 256;

/// Accuracy of the invariant predictor, optionally with sampled codes.
/// Counts are integers summed per chunk, so the result does not depend on
/// evaluation order.
pub fn evaluate(model: &Model, ds: &EnvironmentDataset, exec: Execution, sample_seed: Option<u64>) -> Result<EnvAccuracy> {
    let n = ds.len();
    let n_chunks = n.div_ceil(EVAL_CHUNK);
    let per_chunk = parallel::map_range(exec, n_chunks, |c| -> Result<[usize; 5]> {
        let (start, end) = (c * EVAL_CHUNK, ((c + 1) * EVAL_CHUNK).min(n));
        let cols = ds.input_dim();
        let x = Tensor::matrix(end - start, cols, ds.inputs.data()[start * cols..end * cols].to_vec())?;
        let logits = match sample_seed {
            None => model.predict_logits(&x)?,
            Some(seed) => {
                let mut r = rng::stream(seed, c as u64);
                let mut g = Graph::new();
                let xv = g.constant(x)?;
                let code = model.encode(&mut g, xv)?;
                let eps = gaussian(end - start, model.config.k_latent, &mut r);
                let z = model.sample_code(&mut g, code, Some(&eps))?;
                let l = model.predict_invariant(&mut g, z)?;
                g.evaluate(l)
            }
        };
        // [correct, majority correct, majority total, minority correct, minority total]
        let mut counts = [0usize; 5];
        for i in 0..end - start {
            let row = logits.row(i);
            let pred = argmax(row);
            let ok = usize::from(pred == ds.labels[start + i]);
            counts[0] += ok;
            match ds.groups[start + i] {
                GroupTag::Majority => {
                    counts[1] += ok;
                    counts[2] += 1;
                }
                GroupTag::Minority => {
                    counts[3] += ok;
                    counts[4] += 1;
                }
                GroupTag::Unassigned => {}
            }
        }
        Ok(counts)
    });
    let mut total = [0usize; 5];
    for c in per_chunk {
        for (t, v) in total.iter_mut().zip(c?) {
            *t += v;
        }
    }
    let frac = |a: usize, b: usize| (b > 0).then(|| a as f64 / b as f64);
    Ok(EnvAccuracy {
        acc: total[0] as f64 / n as f64,
        majority: frac(total[1], total[2]),
        minority: frac(total[3], total[4]),
    })
}

/// Index of the largest entry; the first one on ties.
fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = k;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Runs and records.

pub const RECORD_SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub id: usize,
    pub iteration: usize,
    pub train: Vec<EnvAccuracy>,
    pub validation: Vec<EnvAccuracy>,
    pub test: Vec<EnvAccuracy>,
    /// Held-out-domain accuracy per fold, filled by leave-one-domain-out.
    pub fold_validation: Vec<f64>,
}

impl Checkpoint {
    pub fn mean_validation(&self) -> Option<f64> {
        mean(self.validation.iter().map(|a| a.acc))
    }

    pub fn mean_fold_validation(&self) -> Option<f64> {
        mean(self.fold_validation.iter().copied())
    }
}

fn mean(it: impl Iterator<Item = f64>) -> Option<f64> {
    let v: Vec<f64> = it.collect();
    (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub schema_version: u32,
    pub spec: ObjectiveSpec,
    pub seed: u64,
    pub losses: Vec<LossBreakdown>,
    pub checkpoints: Vec<Checkpoint>,
    pub test_names: Vec<String>,
    pub selection: Selection,
    /// Verdict of the configured strategy.
    pub selected: usize,
    pub selected_training_domain: usize,
    pub selected_leave_one_out: Option<usize>,
    /// Excluded from determinism comparisons.
    pub wall_clock_secs: f64,
}

impl RunRecord {
    pub fn selected_checkpoint(&self) -> &Checkpoint {
        &self.checkpoints[self.selected]
    }

    /// The record with wall-clock zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        Self {
            wall_clock_secs: 0.0,
            ..self.clone()
        }
    }
}

/// Training environments plus named test environments.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Vec<EnvironmentDataset>,
    pub test: Vec<(String, EnvironmentDataset)>,
}

#[derive(Clone, Debug)]
pub struct RunOutput {
    pub record: RunRecord,
    /// Parameters at the selected checkpoint.
    pub model: Model,
}

/// Argmax of the strategy's mean validation accuracy, earliest on ties.
pub fn select_model(record: &RunRecord, strategy: Selection) -> Result<usize> {
    select_from(&record.checkpoints, strategy)
}

fn select_from(checkpoints: &[Checkpoint], strategy: Selection) -> Result<usize> {
    if checkpoints.is_empty() {
        return Err(Error::InvalidArgument("record has no checkpoints".into()));
    }
    let mut best: Option<(usize, f64)> = None;
    for c in checkpoints {
        let score = match strategy {
            Selection::TrainingDomainValidation => c.mean_validation(),
            Selection::LeaveOneDomainOut => c.mean_fold_validation(),
        }
        .ok_or_else(|| Error::InvalidArgument(format!("checkpoint {} lacks {strategy:?} metrics", c.id)))?;
        if best.is_none_or(|(_, s)| score > s) {
            best = Some((c.id, score));
        }
    }
    Ok(best.expect("non-empty").0)
}

struct Trajectory {
    losses: Vec<LossBreakdown>,
    checkpoints: Vec<Checkpoint>,
    snapshots: Vec<ParameterSet>,
    model: Model,
}

/// Trains on `train` and evaluates on every `eval_every` iterations (and at
/// the end). `validation` and `test` are evaluated too; `holdout` fills
/// `fold_validation`.
fn trajectory(
    train: &[&EnvironmentDataset],
    validation: &[&EnvironmentDataset],
    test: &[&EnvironmentDataset],
    spec: &ObjectiveSpec,
    cfg: &TrainConfig,
    seed: u64,
    keep_snapshots: bool,
) -> Result<Trajectory> {
    let cfg = TrainConfig { seed, ..cfg.clone() };
    let mut state = TrainState::for_data(train, spec, &cfg)?;
    let mut r = rng::stream(seed, 3);
    // A run is sequential; concurrency lives in the grid runner.
    let exec = Execution::Sequential;
    let eval_seed = cfg.stochastic_eval.then(|| rng::derive_seed(seed, 4));
    let eval_all = |model: &Model, sets: &[&EnvironmentDataset]| -> Result<Vec<EnvAccuracy>> {
        sets.iter().map(|ds| evaluate(model, ds, exec, eval_seed)).collect()
    };
    let mut losses = Vec::with_capacity(cfg.iterations);
    let mut checkpoints = Vec::new();
    let mut snapshots = Vec::new();
    for it in 1..=cfg.iterations {
        losses.push(train_step(train, &mut state, spec, &cfg, &mut r)?);
        if it % cfg.eval_every == 0 || it == cfg.iterations {
            checkpoints.push(Checkpoint {
                id: checkpoints.len(),
                iteration: it,
                train: eval_all(&state.model, train)?,
                validation: eval_all(&state.model, validation)?,
                test: eval_all(&state.model, test)?,
                fold_validation: Vec::new(),
            });
            if keep_snapshots {
                snapshots.push(state.model.params.clone());
            }
        }
    }
    Ok(Trajectory {
        losses,
        checkpoints,
        snapshots,
        model: state.model,
    })
}

/// Full run: split every training environment into train/validation parts,
/// train, evaluate at checkpoints, select.
///
/// With [`Selection::LeaveOneDomainOut`] one extra run per training domain
/// is trained without that domain; its accuracy on the held-out domain at
/// each checkpoint feeds the fold mean.
pub fn run_training(data: &TrainData, spec: &ObjectiveSpec, cfg: &TrainConfig) -> Result<RunOutput> {
    cfg.validate()?;
    spec.validate()?;
    check_env_count(spec, data.train.len())?;
    let started = Instant::now();
    let split_seed = rng::derive_seed(cfg.seed, 2);
    let mut train_parts = Vec::new();
    let mut val_parts = Vec::new();
    for ds in &data.train {
        let (t, v) = ds.split(cfg.validation_fraction, split_seed)?;
        train_parts.push(t);
        val_parts.push(v);
    }
    let train: Vec<&EnvironmentDataset> = train_parts.iter().collect();
    let val: Vec<&EnvironmentDataset> = val_parts.iter().collect();
    let test: Vec<&EnvironmentDataset> = data.test.iter().map(|(_, d)| d).collect();

    let mut traj = trajectory(&train, &val, &test, spec, cfg, cfg.seed, true)?;

    let mut selected_leave_one_out = None;
    if cfg.selection == Selection::LeaveOneDomainOut {
        let n = train.len();
        if n < 2 || (spec.method.needs_multiple_envs() && n < 3) {
            return Err(Error::TooFewEnvironments {
                method: spec.method.to_string(),
                got: n.saturating_sub(1),
            });
        }
        for held in 0..n {
            let fold_train: Vec<&EnvironmentDataset> = (0..n).filter(|&e| e != held).map(|e| train[e]).collect();
            let holdout = data.train[held].clone();
            let fold_seed = rng::derive_seed(cfg.seed, 0xF01D + held as u64);
            let fold = trajectory(&fold_train, &[], &[&holdout], spec, cfg, fold_seed, false)?;
            for (c, f) in traj.checkpoints.iter_mut().zip(&fold.checkpoints) {
                c.fold_validation.push(f.test[0].acc);
            }
        }
        selected_leave_one_out = Some(select_from(&traj.checkpoints, Selection::LeaveOneDomainOut)?);
    }
    let selected_training_domain = select_from(&traj.checkpoints, Selection::TrainingDomainValidation)?;
    let selected = match cfg.selection {
        Selection::TrainingDomainValidation => selected_training_domain,
        Selection::LeaveOneDomainOut => selected_leave_one_out.expect("computed above"),
    };
    traj.model.params = traj.snapshots[selected].clone();
    let record = RunRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        spec: *spec,
        seed: cfg.seed,
        losses: traj.losses,
        checkpoints: traj.checkpoints,
        test_names: data.test.iter().map(|(n, _)| n.clone()).collect(),
        selection: cfg.selection,
        selected,
        selected_training_domain,
        selected_leave_one_out,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    };
    Ok(RunOutput {
        record,
        model: traj.model,
    })
}

#[cfg(test)]
mod tests;
