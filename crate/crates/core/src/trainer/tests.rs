use super::*;
use crate::envgen::{gen_linear_scm, ScmSpec};
use crate::objectives::Method;

fn scm(means: Vec<Vec<f64>>) -> ScmSpec {
    ScmSpec {
        d_causal: 2,
        d_spurious: 2,
        causal_mean_scale: 1.0,
        causal_noise: 1.0,
        env_means: means,
        label_prior: 0.5,
    }
}

fn small_cfg(iterations: usize) -> TrainConfig {
    TrainConfig {
        iterations,
        batch_size: 32,
        learning_rate: 1e-2,
        eval_every: 10,
        arch: ArchConfig {
            k_latent: 4,
            encoder_hidden: 8,
            predictor_hidden: 8,
            predictor_depth: 3,
            ..ArchConfig::default()
        },
        ..TrainConfig::default()
    }
}

fn two_envs(seed: u64) -> Vec<EnvironmentDataset> {
    gen_linear_scm(&scm(vec![vec![2.0, 2.0], vec![-1.0, 0.5]]), 200, &[0, 1], seed).unwrap()
}

fn data(seed: u64) -> TrainData {
    let test = gen_linear_scm(&scm(vec![vec![0.0, 0.0], vec![0.0, 0.0], vec![-2.0, -2.0]]), 200, &[2], seed + 1).unwrap();
    TrainData {
        train: two_envs(seed),
        test: vec![("flipped".into(), test.into_iter().next().unwrap())],
    }
}

fn group_values(p: &ParameterSet, group: ParamGroup) -> Vec<Vec<u64>> {
    p.group_ids(group)
        .into_iter()
        .map(|id| p.value(id).data().iter().map(|v| v.to_bits()).collect())
        .collect()
}

#[test]
fn zero_learning_rate_leaves_every_parameter_unchanged() {
    let envs = two_envs(1);
    let refs: Vec<&EnvironmentDataset> = envs.iter().collect();
    for method in Method::ALL {
        let spec = ObjectiveSpec::defaults(method);
        let cfg = TrainConfig {
            learning_rate: 0.0,
            adversary_steps_per_min_step: 2,
            ..small_cfg(5)
        };
        let mut state = TrainState::for_data(&refs, &spec, &cfg).unwrap();
        let before = state.model.params.clone();
        let mut r = rng::stream(1, 0);
        for _ in 0..5 {
            train_step(&refs, &mut state, &spec, &cfg, &mut r).unwrap();
        }
        assert_eq!(state.model.params, before, "{method}");
        assert_eq!(state.iteration, 5);
    }
}

#[test]
fn methods_without_adversary_never_touch_the_domain_group() {
    let envs = two_envs(2);
    let refs: Vec<&EnvironmentDataset> = envs.iter().collect();
    for method in Method::ALL.into_iter().filter(|m| !m.has_adversary()) {
        let spec = ObjectiveSpec::defaults(method);
        let cfg = TrainConfig {
            debug_checks: true,
            ..small_cfg(20)
        };
        let mut state = TrainState::for_data(&refs, &spec, &cfg).unwrap();
        let fd = group_values(&state.model.params, ParamGroup::Domain);
        let enc = group_values(&state.model.params, ParamGroup::Encoder);
        let mut r = rng::stream(2, 0);
        for _ in 0..20 {
            train_step(&refs, &mut state, &spec, &cfg, &mut r).unwrap();
        }
        assert_eq!(group_values(&state.model.params, ParamGroup::Domain), fd, "{method}");
        assert_ne!(group_values(&state.model.params, ParamGroup::Encoder), enc, "{method}");
    }
}

#[test]
fn adversarial_methods_update_every_group_and_pass_routing_checks() {
    let envs = two_envs(3);
    let refs: Vec<&EnvironmentDataset> = envs.iter().collect();
    for method in Method::ALL.into_iter().filter(|m| m.has_adversary()) {
        let spec = ObjectiveSpec::defaults(method);
        let cfg = TrainConfig {
            debug_checks: true,
            adversary_steps_per_min_step: 3,
            adversary_reinit_every: 7,
            ..small_cfg(15)
        };
        let mut state = TrainState::for_data(&refs, &spec, &cfg).unwrap();
        let before = state.model.params.clone();
        let mut r = rng::stream(3, 0);
        for _ in 0..15 {
            train_step(&refs, &mut state, &spec, &cfg, &mut r).unwrap();
        }
        for group in ParamGroup::ALL {
            assert_ne!(
                group_values(&state.model.params, group),
                group_values(&before, group),
                "{method} {group:?}"
            );
        }
    }
}

#[test]
fn one_environment_is_rejected_for_invariance_methods() {
    let envs = two_envs(4);
    let one = vec![&envs[0]];
    for method in Method::ALL {
        let spec = ObjectiveSpec::defaults(method);
        let cfg = small_cfg(1);
        let mut state = TrainState::for_data(&one, &spec, &cfg).unwrap();
        let out = train_step(&one, &mut state, &spec, &cfg, &mut rng::stream(0, 0));
        if method.needs_multiple_envs() {
            assert!(matches!(out, Err(Error::TooFewEnvironments { got: 1, .. })), "{method}");
        } else {
            assert!(out.is_ok(), "{method}");
        }
    }
    assert!(train_step(&[], &mut TrainState::for_data(&one, &ObjectiveSpec::defaults(Method::Erm), &small_cfg(1)).unwrap(),
        &ObjectiveSpec::defaults(Method::Erm), &small_cfg(1), &mut rng::stream(0, 0)).is_err());
}

#[test]
fn identical_environments_close_the_invariance_gap() {
    // Two copies of one environment: f_d can do no better than f_i.
    let base = two_envs(5).remove(0);
    let envs = [base.clone(), base.with_domain(1)];
    let refs: Vec<&EnvironmentDataset> = envs.iter().collect();
    let spec = ObjectiveSpec::defaults(Method::Iib);
    let cfg = TrainConfig {
        learning_rate: 5e-3,
        ..small_cfg(500)
    };
    let mut state = TrainState::for_data(&refs, &spec, &cfg).unwrap();
    let mut r = rng::stream(5, 0);
    let mut gaps = Vec::new();
    for _ in 0..500 {
        gaps.push(train_step(&refs, &mut state, &spec, &cfg, &mut r).unwrap().invariance_gap());
    }
    let tail = gaps[400..].iter().sum::<f64>() / 100.0;
    assert!(tail.abs() <= 0.05, "mean gap over the last 100 steps {tail}");
}

#[test]
fn training_is_reproducible_for_a_fixed_seed() {
    let d = data(6);
    let spec = ObjectiveSpec::defaults(Method::IbIrm).with_anneal(5);
    let cfg = TrainConfig {
        seed: 11,
        ..small_cfg(30)
    };
    let a = run_training(&d, &spec, &cfg).unwrap();
    let b = run_training(&d, &spec, &cfg).unwrap();
    assert_eq!(a.record.without_timing(), b.record.without_timing());
    assert_eq!(a.model.params, b.model.params);
    let c = run_training(&d, &spec, &TrainConfig { seed: 12, ..cfg }).unwrap();
    assert_ne!(a.record.losses, c.record.losses);
}

#[test]
fn run_records_one_checkpoint_per_interval_and_the_selected_model() {
    let d = data(7);
    let spec = ObjectiveSpec::defaults(Method::Erm);
    let cfg = small_cfg(35);
    let out = run_training(&d, &spec, &cfg).unwrap();
    let its: Vec<usize> = out.record.checkpoints.iter().map(|c| c.iteration).collect();
    assert_eq!(its, vec![10, 20, 30, 35]);
    assert_eq!(out.record.losses.len(), 35);
    let sel = out.record.selected_checkpoint();
    assert_eq!(sel.id, out.record.selected);
    assert_eq!(out.record.test_names, vec!["flipped".to_string()]);
    // The returned model reproduces the selected checkpoint's numbers.
    let acc = evaluate(&out.model, &d.test[0].1, Execution::Sequential, None).unwrap();
    assert_eq!(acc.acc, sel.test[0].acc);
    let json = serde_json::to_string(&out.record).unwrap();
    let back: RunRecord = serde_json::from_str(&json).unwrap();
    assert_eq!(back, out.record);
}

#[test]
fn leave_one_domain_out_fills_fold_metrics() {
    let mut train = gen_linear_scm(&scm(vec![vec![2.0, 2.0], vec![-1.0, 0.5], vec![0.5, -1.0]]), 150, &[0, 1, 2], 8).unwrap();
    let test = train.pop().unwrap();
    let d = TrainData {
        train,
        test: vec![("e2".into(), test)],
    };
    let cfg = TrainConfig {
        selection: Selection::LeaveOneDomainOut,
        ..small_cfg(20)
    };
    let out = run_training(&d, &ObjectiveSpec::defaults(Method::Erm), &cfg).unwrap();
    assert!(out.record.checkpoints.iter().all(|c| c.fold_validation.len() == 2));
    assert_eq!(Some(out.record.selected), out.record.selected_leave_one_out);
    // Two domains leave a single one per fold, too few for IRM.
    assert!(matches!(
        run_training(&d, &ObjectiveSpec::defaults(Method::Irm), &cfg),
        Err(Error::TooFewEnvironments { .. })
    ));
}

fn checkpoint(id: usize, val: &[f64], folds: &[f64]) -> Checkpoint {
    let acc = |a: f64| EnvAccuracy {
        acc: a,
        majority: None,
        minority: None,
    };
    Checkpoint {
        id,
        iteration: (id + 1) * 100,
        train: vec![],
        validation: val.iter().map(|&a| acc(a)).collect(),
        test: vec![],
        fold_validation: folds.to_vec(),
    }
}

fn record(checkpoints: Vec<Checkpoint>) -> RunRecord {
    RunRecord {
        schema_version: RECORD_SCHEMA_VERSION,
        spec: ObjectiveSpec::defaults(Method::Erm),
        seed: 0,
        losses: vec![],
        checkpoints,
        test_names: vec![],
        selection: Selection::TrainingDomainValidation,
        selected: 0,
        selected_training_domain: 0,
        selected_leave_one_out: None,
        wall_clock_secs: 0.0,
    }
}

#[test]
fn selection_takes_the_earliest_maximum() {
    let rec = record(vec![
        checkpoint(0, &[0.6], &[0.7, 0.5]),
        checkpoint(1, &[0.9], &[0.2, 0.2]),
        checkpoint(2, &[0.9], &[0.9, 0.9]),
    ]);
    assert_eq!(select_model(&rec, Selection::TrainingDomainValidation).unwrap(), 1);
    assert_eq!(select_model(&rec, Selection::LeaveOneDomainOut).unwrap(), 2);

    let single = record(vec![checkpoint(0, &[0.1], &[0.1])]);
    assert_eq!(select_model(&single, Selection::TrainingDomainValidation).unwrap(), 0);

    let rising = record((0..5).map(|i| checkpoint(i, &[0.5 + 0.1 * i as f64], &[])).collect());
    assert_eq!(select_model(&rising, Selection::TrainingDomainValidation).unwrap(), 4);
    assert!(select_model(&rising, Selection::LeaveOneDomainOut).is_err());
    assert!(select_model(&record(vec![]), Selection::TrainingDomainValidation).is_err());
}

#[test]
fn evaluation_is_invariant_to_order_and_execution() {
    let envs = two_envs(9);
    let refs: Vec<&EnvironmentDataset> = envs.iter().collect();
    let spec = ObjectiveSpec::defaults(Method::Erm);
    let cfg = small_cfg(30);
    let mut state = TrainState::for_data(&refs, &spec, &cfg).unwrap();
    let mut r = rng::stream(9, 0);
    for _ in 0..30 {
        train_step(&refs, &mut state, &spec, &cfg, &mut r).unwrap();
    }
    let pooled = envs[0].clone();
    let mut rev: Vec<usize> = (0..pooled.len()).collect();
    rev.reverse();
    let reversed = pooled.subset(&rev).unwrap();
    let a = evaluate(&state.model, &pooled, Execution::Sequential, None).unwrap();
    let b = evaluate(&state.model, &reversed, Execution::Parallel, None).unwrap();
    assert_eq!(a, b);
    assert!(a.acc > 0.5);
}

#[test]
fn stochastic_evaluation_is_seeded() {
    let envs = two_envs(10);
    let refs: Vec<&EnvironmentDataset> = envs.iter().collect();
    let spec = ObjectiveSpec::defaults(Method::Iib);
    let state = TrainState::for_data(&refs, &spec, &small_cfg(1)).unwrap();
    let a = evaluate(&state.model, &envs[0], Execution::Parallel, Some(3)).unwrap();
    let b = evaluate(&state.model, &envs[0], Execution::Sequential, Some(3)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { validation_fraction: 0.0, ..TrainConfig::default() },
        TrainConfig { validation_fraction: 0.6, ..TrainConfig::default() },
        TrainConfig { iterations: 0, ..TrainConfig::default() },
        TrainConfig { adversary_steps_per_min_step: 0, ..TrainConfig::default() },
    ] {
        assert!(bad.validate().is_err());
    }
}
