#![allow(clippy::needless_range_loop)]

use super::*;
use crate::graph::Graph;
use crate::models::CodeVars;
use crate::objectives::loss_bottleneck;
use crate::tensor::Tensor;

/// Column-major double sum, written independently of `exact_mi`.
fn mi_by_columns(p: &[Vec<f64>]) -> f64 {
    let (na, nb) = (p.len(), p[0].len());
    let mut total = 0.0;
    for b in 0..nb {
        let pb: f64 = (0..na).map(|a| p[a][b]).sum();
        for a in 0..na {
            let pa: f64 = p[a].iter().sum();
            if p[a][b] > 0.0 {
                total += p[a][b] * (p[a][b].ln() - pa.ln() - pb.ln());
            }
        }
    }
    total
}

#[test]
fn mutual_information_examples() {
    let ind = vec![vec![0.25, 0.25], vec![0.25, 0.25]];
    assert!(exact_mi(&ind).unwrap().abs() < 1e-15);
    let copy = vec![vec![0.5, 0.0], vec![0.0, 0.5]];
    assert!((exact_mi(&copy).unwrap() - 2f64.ln()).abs() < 1e-15);
    let p = vec![vec![0.4, 0.1], vec![0.1, 0.4]];
    let hand = 2.0 * 0.4 * 1.6f64.ln() + 2.0 * 0.1 * 0.4f64.ln();
    let v = exact_mi(&p).unwrap();
    assert!((v - hand).abs() < 1e-14);
    assert!((v - mi_by_columns(&p)).abs() < 1e-14);
    assert!((hand - 0.19274).abs() < 1e-5);
    assert!(exact_mi(&[vec![0.5, 0.4]]).is_err());
    assert!(exact_mi(&[vec![1.1, -0.1]]).is_err());
    assert!(exact_mi(&[vec![0.5], vec![0.25, 0.25]]).is_err());
}

#[test]
fn mutual_information_is_symmetric() {
    let mut r = rng::stream(1, 0);
    for _ in 0..50 {
        let (na, nb) = (r.random_range(1..5), r.random_range(1..5));
        let w: Vec<Vec<f64>> = (0..na).map(|_| (0..nb).map(|_| r.random::<f64>()).collect()).collect();
        let s: f64 = w.iter().flatten().sum();
        let p: Vec<Vec<f64>> = w.iter().map(|row| row.iter().map(|v| v / s).collect()).collect();
        let t: Vec<Vec<f64>> = (0..nb).map(|b| (0..na).map(|a| p[a][b]).collect()).collect();
        let (a, b) = (exact_mi(&p).unwrap(), exact_mi(&t).unwrap());
        assert!((a - b).abs() < 1e-12);
        assert!((a - mi_by_columns(&p)).abs() < 1e-12);
    }
}

#[test]
fn conditional_mi_vanishes_exactly_under_conditional_independence() {
    for seed in 0..100 {
        let dims = [2 + (seed as usize % 3), 2 + (seed as usize % 2), 3];
        let j = DiscreteJoint::random_conditionally_independent(dims, seed).unwrap();
        assert!(exact_conditional_mi(&j).unwrap().abs() <= 1e-12, "seed {seed}");
        for z in 0..dims[2] {
            let base = j.conditional_y(z, 0).unwrap();
            for d in 1..dims[1] {
                let c = j.conditional_y(z, d).unwrap();
                assert!(base.iter().zip(&c).all(|(a, b)| (a - b).abs() <= 1e-12), "seed {seed} z {z}");
            }
        }
    }
}

#[test]
fn conditional_mi_decomposition_matches_direct_sum() {
    for seed in 0..100 {
        let j = DiscreteJoint::random([2, 2, 3], seed).unwrap();
        let a = exact_conditional_mi(&j).unwrap();
        assert!((a - j.conditional_mi_direct()).abs() <= 1e-12, "seed {seed}");
        if a > 1e-9 {
            // Positive conditional MI means some conditional differs across d.
            let differs = (0..3).any(|z| {
                let (c0, c1) = (j.conditional_y(z, 0).unwrap(), j.conditional_y(z, 1).unwrap());
                (c0[0] - c1[0]).abs() > 1e-9
            });
            assert!(differs);
        }
    }
}

#[test]
fn conditional_mi_examples() {
    // Y = D for every z, both uniform.
    let n = 3;
    let mut w = vec![0.0; n * n * 2];
    for y in 0..n {
        for z in 0..2 {
            w[(y * n + y) * 2 + z] = 1.0;
        }
    }
    let j = DiscreteJoint::from_weights([n, n, 2], w).unwrap();
    assert!((exact_conditional_mi(&j).unwrap() - (n as f64).ln()).abs() < 1e-12);
    // Y a function of Z; D arbitrary.
    let mut w = vec![0.0; 2 * 2 * 4];
    for z in 0..4 {
        for d in 0..2 {
            w[((z % 2) * 2 + d) * 4 + z] = 1.0 + d as f64 + z as f64;
        }
    }
    let j = DiscreteJoint::from_weights([2, 2, 4], w).unwrap();
    assert_eq!(exact_conditional_mi(&j).unwrap(), 0.0);
    assert!(DiscreteJoint::new([1, 1, 2], vec![0.5, 0.6]).is_err());
    assert!(DiscreteJoint::new([1, 1, 2], vec![0.5]).is_err());
}

fn closed_form_kl(code: &GaussianCode) -> f64 {
    let mut g = Graph::new();
    let k = code.k();
    let mu = g.constant(Tensor::matrix(1, k, code.mean.clone()).unwrap()).unwrap();
    let sigma = g.constant(Tensor::matrix(1, k, code.std.clone()).unwrap()).unwrap();
    let l = loss_bottleneck(&mut g, CodeVars { mu, sigma }).unwrap();
    g.scalar(l)
}

#[test]
fn monte_carlo_kl_examples() {
    let n = 100_000;
    let std_normal = GaussianCode::new(vec![0.0; 3], vec![1.0; 3]).unwrap();
    assert!(mc_kl(&std_normal, n, 1).unwrap().abs() <= 3.0 / (n as f64).sqrt());
    let shifted = GaussianCode::new(vec![1.0, 0.0], vec![1.0, 1.0]).unwrap();
    assert!((mc_kl(&shifted, n, 2).unwrap() - 0.5).abs() < 0.01);
    assert!(mc_kl(&shifted, 9_999, 2).is_err());
}

#[test]
fn monte_carlo_kl_certifies_the_closed_form() {
    let mut r = rng::stream(3, 0);
    for seed in 0..20u64 {
        let k = r.random_range(1..5);
        let mean: Vec<f64> = (0..k).map(|_| r.random_range(-1.5..1.5)).collect();
        let std: Vec<f64> = (0..k).map(|_| r.random_range(0.3..1.5)).collect();
        let code = GaussianCode::new(mean, std).unwrap();
        let mc = mc_kl(&code, 100_000, seed).unwrap();
        let exact = closed_form_kl(&code);
        assert!((mc - exact).abs() <= 0.02, "seed {seed}: {mc} vs {exact}");
    }
}

#[test]
fn canonical_instance_selects_the_invariant_feature() {
    for seed in 0..10 {
        let inst = ToyFeatureInstance::canonical(400, 2, seed).unwrap();
        let out = sparse_invariant_search(&inst, DEFAULT_INVARIANCE_TOL).unwrap();
        assert_eq!(out.chosen, Some(0), "seed {seed}");
        assert!(!out.degenerate);
        let v: Vec<FeatureVerdict> = out.features.iter().map(|f| f.verdict).collect();
        assert_eq!(
            v,
            [FeatureVerdict::Chosen, FeatureVerdict::HigherRisk, FeatureVerdict::HigherRisk, FeatureVerdict::Infeasible]
        );
        assert_eq!(out.features[0].pooled_risk, 0.0);
        assert!((out.features[1].pooled_risk - 0.25).abs() < 1e-12);
        assert!((out.features[2].pooled_risk - 0.5).abs() < 1e-12);
        // The spurious feature is nearly optimal per environment, never jointly.
        assert!(out.features[3].per_env_optimal_risk.iter().all(|&r| r <= 0.1 + 1e-12));
        assert!(out.features[3].invariance_deviation > 0.3);
    }
}

#[test]
fn symmetric_noise_features_give_a_degenerate_outcome() {
    // Every feature is ±1 with equal counts inside each class.
    let mut r = rng::stream(4, 0);
    let envs = (0..2)
        .map(|_| {
            let labels: Vec<i8> = (0..400).map(|i| if i % 2 == 0 { 1 } else { -1 }).collect();
            let mut features = vec![[0.0; 4]; 400];
            for f in 0..4 {
                for class in 0..2 {
                    let mut members: Vec<usize> = (class..400).step_by(2).collect();
                    members.shuffle(&mut r);
                    for (k, &i) in members.iter().enumerate() {
                        features[i][f] = if k % 2 == 0 { 1.0 } else { -1.0 };
                    }
                }
            }
            ToyEnvironment { features, labels }
        })
        .collect();
    let out = sparse_invariant_search(&ToyFeatureInstance { envs }, DEFAULT_INVARIANCE_TOL).unwrap();
    assert!(out.degenerate);
    // Everything ties, so the fallback is the lowest feasible index.
    assert_eq!(out.chosen, Some(0));
    assert!(out.features.iter().all(|f| f.feasible && f.pooled_risk == 0.5));
}

#[test]
fn duplicated_invariant_feature_ties_to_the_lowest_index() {
    let mut inst = ToyFeatureInstance::canonical(200, 2, 5).unwrap();
    for env in &mut inst.envs {
        for x in &mut env.features {
            x[1] = x[0];
        }
    }
    let out = sparse_invariant_search(&inst, DEFAULT_INVARIANCE_TOL).unwrap();
    assert_eq!(out.chosen, Some(0));
    assert_eq!(out.features[1].verdict, FeatureVerdict::HigherRisk);
    assert_eq!(out.features[0].pooled_risk, out.features[1].pooled_risk);
}

#[test]
fn search_is_invariant_to_permutation_and_positive_scaling() {
    let inst = ToyFeatureInstance::canonical(200, 3, 6).unwrap();
    let base = sparse_invariant_search(&inst, DEFAULT_INVARIANCE_TOL).unwrap();
    let mut r = rng::stream(6, 1);
    let mut moved = inst.clone();
    for env in &mut moved.envs {
        let mut idx: Vec<usize> = (0..env.labels.len()).collect();
        idx.shuffle(&mut r);
        env.features = idx.iter().map(|&i| env.features[i]).collect();
        env.labels = idx.iter().map(|&i| env.labels[i]).collect();
        for x in &mut env.features {
            x[0] *= 7.5;
            x[2] *= 0.01;
        }
    }
    let out = sparse_invariant_search(&moved, DEFAULT_INVARIANCE_TOL).unwrap();
    assert_eq!(out.chosen, base.chosen);
    for (a, b) in out.features.iter().zip(&base.features) {
        assert_eq!(a.verdict, b.verdict);
        assert_eq!(a.pooled_risk, b.pooled_risk);
        assert_eq!(a.invariance_deviation, b.invariance_deviation);
    }
}

#[test]
fn search_rejects_bad_instances() {
    let inst = ToyFeatureInstance::canonical(40, 2, 0).unwrap();
    let one = ToyFeatureInstance { envs: inst.envs[..1].to_vec() };
    assert!(sparse_invariant_search(&one, 0.02).is_err());
    assert!(sparse_invariant_search(&inst, -1.0).is_err());
    assert!(ToyFeatureInstance::canonical(30, 2, 0).is_err());
}

#[test]
fn one_dimensional_min_norm_matches_closed_form() {
    let mut r = rng::stream(7, 0);
    let margins: Vec<f64> = (0..30).map(|_| r.random_range(0.05..2.0)).collect();
    let y: Vec<f64> = (0..30).map(|i| if i % 3 == 0 { -1.0 } else { 1.0 }).collect();
    let rows: Vec<Vec<f64>> = margins.iter().zip(&y).map(|(m, s)| vec![m * s]).collect();
    let w = min_norm_classifier(&rows, &y).unwrap();
    let exact = 1.0 / margins.iter().copied().fold(f64::INFINITY, f64::min);
    assert!((w[0] - exact).abs() <= 1e-4, "{} vs {exact}", w[0]);
}

#[test]
fn min_norm_detects_non_separable_data() {
    let rows = vec![vec![1.0, 0.0], vec![1.0, 0.0]];
    assert!(matches!(min_norm_classifier(&rows, &[1.0, -1.0]), Err(Error::NotSeparable(_))));
    assert!(matches!(min_norm_classifier(&[vec![0.0]], &[1.0]), Err(Error::NotSeparable(_))));
}

#[test]
fn minority_classifier_is_much_smaller() {
    let spec = SkewSpec::default();
    for seed in 0..3 {
        let c = min_norm_comparison(&spec, seed).unwrap();
        assert!(c.norm_min <= c.norm_all);
        assert!(c.ratio() < 0.8, "seed {seed}: ratio {}", c.ratio());
    }
}

#[test]
fn minority_subset_never_needs_a_larger_norm() {
    for seed in 0..5 {
        let spec = SkewSpec {
            n_majority: 60,
            n_minority: 20,
            min_margin: 0.2,
            ..SkewSpec::default()
        };
        let c = min_norm_comparison(&spec, seed).unwrap();
        assert!(c.norm_min <= c.norm_all + 1e-9);
    }
}
