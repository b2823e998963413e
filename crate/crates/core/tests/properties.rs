use iib_core::gradcheck::finite_difference_check;
use iib_core::oracles::{exact_mi, sparse_invariant_search, ToyFeatureInstance, DEFAULT_INVARIANCE_TOL};
use iib_core::rng;
use iib_core::{Graph, ParamGroup, ParameterSet, Result, Tensor, Var};
use proptest::prelude::*;
use rand::Rng;

type Op = fn(&mut Graph, Var, Var) -> Result<Var>;

fn params_2x3(seed: u64, away_from_zero: bool, positive: bool) -> ParameterSet {
    let mut r = rng::stream(seed, 0);
    let mut draw = || {
        let mut v: f64 = r.random_range(-2.0..2.0);
        if away_from_zero && v.abs() < 0.1 {
            v += 0.2f64.copysign(v);
        }
        if positive {
            v = v.abs() + 0.1;
        }
        v
    };
    let mut p = ParameterSet::new();
    p.insert("a", ParamGroup::Encoder, Tensor::matrix(2, 3, (0..6).map(|_| draw()).collect()).unwrap())
        .unwrap();
    p.insert("b", ParamGroup::Invariant, Tensor::matrix(2, 3, (0..6).map(|_| draw()).collect()).unwrap())
        .unwrap();
    p
}

/// A random linear read-out of `op(a, b)`, so every output coordinate
/// contributes with its own weight.
fn check_op(op: Op, seed: u64, away_from_zero: bool, positive: bool) -> f64 {
    let p = params_2x3(seed, away_from_zero, positive);
    let loss = move |g: &mut Graph, p: &ParameterSet| -> Result<Var> {
        let a = g.param_by_name(p, "a")?;
        let b = g.param_by_name(p, "b")?;
        let out = op(g, a, b)?;
        let shape = g.value(out).shape().to_vec();
        let n: usize = shape.iter().product();
        let mut r = rng::stream(seed, 1);
        let w = g.constant(Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect())?)?;
        let prod = g.mul(out, w)?;
        g.sum(prod)
    };
    finite_difference_check(loss, &p, 1e-5).unwrap()
}

fn ops() -> Vec<(&'static str, Op, bool, bool)> {
    vec![
        ("add", |g, a, b| g.add(a, b), false, false),
        ("sub", |g, a, b| g.sub(a, b), false, false),
        ("mul", |g, a, b| g.mul(a, b), false, false),
        ("square", |g, a, _| g.square(a), false, false),
        ("scale", |g, a, _| g.scale(a, -1.7), false, false),
        ("offset", |g, a, _| g.offset(a, 0.3), false, false),
        ("relu", |g, a, _| g.relu(a), true, false),
        ("exp", |g, a, _| g.exp(a), false, false),
        ("log", |g, a, _| g.log(a), false, true),
        ("softplus", |g, a, _| g.softplus(a), false, false),
        ("sum", |g, a, _| g.sum(a), false, false),
        ("mean", |g, a, _| g.mean(a), false, false),
        ("row_sum", |g, a, _| g.row_sum(a), false, false),
        ("softmax", |g, a, _| g.softmax(a), false, false),
        ("softmax_cross_entropy", |g, a, _| g.softmax_cross_entropy(a, &[2, 0]), false, false),
        ("concat_cols", |g, a, b| g.concat_cols(a, b), false, false),
        ("slice_rows", |g, a, _| g.slice_rows(a, 1, 2), false, false),
    ]
}

#[test]
fn every_op_matches_central_differences_on_ten_seeds() {
    for (name, op, away, positive) in ops() {
        for seed in 0..10 {
            let err = check_op(op, seed, away, positive);
            assert!(err <= 1e-6, "{name} seed {seed}: relative error {err}");
        }
    }
}

#[test]
fn affine_gradient_reaches_input_weights_and_bias() {
    for seed in 0..10 {
        let mut r = rng::stream(seed, 9);
        let mut p = ParameterSet::new();
        let mut m = |rows, cols| Tensor::matrix(rows, cols, (0..rows * cols).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap();
        p.insert("x", ParamGroup::Encoder, m(4, 3)).unwrap();
        p.insert("w", ParamGroup::Encoder, m(3, 2)).unwrap();
        p.insert("b", ParamGroup::Encoder, Tensor::vector(m(1, 2).into_data()).unwrap()).unwrap();
        let loss = move |g: &mut Graph, p: &ParameterSet| -> Result<Var> {
            let xv = g.param_by_name(p, "x")?;
            let w = g.param_by_name(p, "w")?;
            let b = g.param_by_name(p, "b")?;
            let y = g.affine(xv, w, b)?;
            g.softmax_cross_entropy(y, &[0, 1, 1, 0])
        };
        assert!(finite_difference_check(loss, &p, 1e-5).unwrap() <= 1e-6);
    }
}

fn table(weights: &[f64], rows: usize) -> Vec<Vec<f64>> {
    let s: f64 = weights.iter().sum();
    weights.chunks(weights.len() / rows).map(|c| c.iter().map(|v| v / s).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn mutual_information_is_symmetric_and_nonnegative(
        rows in 1usize..5,
        cols in 1usize..5,
        seed in any::<u64>(),
    ) {
        let mut r = rng::stream(seed, 0);
        let w: Vec<f64> = (0..rows * cols).map(|_| r.random::<f64>() + 1e-6).collect();
        let p = table(&w, rows);
        let t: Vec<Vec<f64>> = (0..cols).map(|b| (0..rows).map(|a| p[a][b]).collect()).collect();
        let (a, b) = (exact_mi(&p).unwrap(), exact_mi(&t).unwrap());
        prop_assert!((a - b).abs() <= 1e-12);
        prop_assert!(a >= -1e-12);
    }

    #[test]
    fn backward_is_linear_in_the_root(c1 in -3.0f64..3.0, c2 in -3.0f64..3.0, seed in 0u64..1000) {
        let p = params_2x3(seed, false, false);
        let grads = |k1: f64, k2: f64| {
            let mut g = Graph::new();
            let a = g.param_by_name(&p, "a").unwrap();
            let b = g.param_by_name(&p, "b").unwrap();
            let f = g.mul(a, b).unwrap();
            let f = g.softplus(f).unwrap();
            let f = g.sum(f).unwrap();
            let h = g.square(a).unwrap();
            let h = g.mean(h).unwrap();
            let f = g.scale(f, k1).unwrap();
            let h = g.scale(h, k2).unwrap();
            let root = g.add(f, h).unwrap();
            g.backward(root, &p).unwrap()
        };
        let (gf, gh, both) = (grads(1.0, 0.0), grads(0.0, 1.0), grads(c1, c2));
        for id in p.ids() {
            for ((x, y), z) in gf.get(id).data().iter().zip(gh.get(id).data()).zip(both.get(id).data()) {
                prop_assert!((c1 * x + c2 * y - z).abs() <= 1e-12 * (1.0 + z.abs()));
            }
        }
    }

    #[test]
    fn backward_is_repeatable(seed in 0u64..1000) {
        let p = params_2x3(seed, false, false);
        let run = || {
            let mut g = Graph::new();
            let a = g.param_by_name(&p, "a").unwrap();
            let s = g.softmax(a).unwrap();
            let l = g.log(s).unwrap();
            let root = g.sum(l).unwrap();
            let grads = g.backward(root, &p).unwrap();
            // A second sweep over the same graph gives the same answer.
            let again = g.backward(root, &p).unwrap();
            (grads, again)
        };
        let (a, b) = run();
        let (c, _) = run();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(&a, &c);
    }

    #[test]
    fn sparse_search_ignores_positive_feature_scaling(
        seed in 0u64..200,
        feature in 0usize..4,
        scale in 0.001f64..1000.0,
    ) {
        let inst = ToyFeatureInstance::canonical(80, 2, seed).unwrap();
        let mut scaled = inst.clone();
        for env in &mut scaled.envs {
            for x in &mut env.features {
                x[feature] *= scale;
            }
        }
        let a = sparse_invariant_search(&inst, DEFAULT_INVARIANCE_TOL).unwrap();
        let b = sparse_invariant_search(&scaled, DEFAULT_INVARIANCE_TOL).unwrap();
        prop_assert_eq!(a.chosen, b.chosen);
        for (x, y) in a.features.iter().zip(&b.features) {
            prop_assert_eq!(x.verdict, y.verdict);
            prop_assert_eq!(x.pooled_risk, y.pooled_risk);
        }
    }
}
