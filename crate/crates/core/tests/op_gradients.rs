//! Every differentiable graph operation against central finite differences,
//! on 20 random instances each.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rc3_core::gradcheck::rel_err;
use rc3_core::{Graph, Result, Tensor, Var};

const STEP: f64 = 1e-5;
const FLOOR: f64 = 1e-5;
const TOL: f64 = 1e-4;
const INSTANCES: u64 = 20;

type Build = fn(&mut Graph, &[Var]) -> Result<Var>;

struct Case {
    name: &'static str,
    shapes: &'static [&'static [usize]],
    positive: bool,
    build: Build,
}

/// `sum(w * op(inputs))` with fixed random weights, so that every output entry
/// reaches the gradient with a distinct coefficient.
fn readout(g: &mut Graph, case: &Case, inputs: &[Tensor], weights: &mut Option<Tensor>, rng: &mut ChaCha8Rng) -> (f64, Vec<Var>, Var) {
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = (case.build)(g, &vars).unwrap();
    let w = weights
        .get_or_insert_with(|| {
            let shape = g.shape(out).to_vec();
            let n = g.value(out).len();
            Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        })
        .clone();
    let w = g.constant(w);
    let prod = g.mul(out, w).unwrap();
    let loss = g.sum(prod);
    (g.scalar(loss), vars, loss)
}

fn check(case: &Case) -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..INSTANCES {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs: Vec<Tensor> = case
            .shapes
            .iter()
            .map(|s| {
                let n: usize = s.iter().product();
                let data = (0..n)
                    .map(|_| if case.positive { rng.random_range(0.2..2.0) } else { rng.random_range(-1.5..1.5) })
                    .collect();
                Tensor::new(s.to_vec(), data).unwrap()
            })
            .collect();
        let mut weights = None;
        let mut g = Graph::new();
        let (_, vars, loss) = readout(&mut g, case, &inputs, &mut weights, &mut rng);
        g.backward(loss).unwrap();
        let analytic: Vec<Vec<f64>> = vars.iter().map(|&v| g.grad(v).unwrap().to_vec()).collect();
        for (k, input) in inputs.iter().enumerate() {
            for i in 0..input.len() {
                let mut eval = |h: f64| {
                    let mut xs = inputs.clone();
                    xs[k].data_mut()[i] += h;
                    let mut g = Graph::new();
                    readout(&mut g, case, &xs, &mut weights, &mut rng).0
                };
                let numeric = (eval(STEP) - eval(-STEP)) / (2.0 * STEP);
                let e = rel_err(analytic[k][i], numeric, FLOOR);
                assert!(
                    e < TOL,
                    "{} seed {seed} input {k}[{i}]: analytic {} numeric {numeric}",
                    case.name,
                    analytic[k][i]
                );
                worst = worst.max(e);
            }
        }
    }
    worst
}

fn cases() -> Vec<Case> {
    vec![
        Case { name: "add", shapes: &[&[3, 4], &[3, 4]], positive: false, build: |g, v| g.add(v[0], v[1]) },
        Case { name: "sub", shapes: &[&[3, 4], &[3, 4]], positive: false, build: |g, v| g.sub(v[0], v[1]) },
        Case { name: "mul", shapes: &[&[3, 4], &[3, 4]], positive: false, build: |g, v| g.mul(v[0], v[1]) },
        Case { name: "scale", shapes: &[&[5]], positive: false, build: |g, v| Ok(g.scale(v[0], 0.7)) },
        Case { name: "neg", shapes: &[&[5]], positive: false, build: |g, v| Ok(g.neg(v[0])) },
        Case { name: "mul_scalar", shapes: &[&[2, 3], &[1]], positive: false, build: |g, v| g.mul_scalar(v[0], v[1]) },
        Case { name: "exp", shapes: &[&[4]], positive: false, build: |g, v| Ok(g.exp(v[0])) },
        Case { name: "log", shapes: &[&[4]], positive: true, build: |g, v| g.log(v[0]) },
        Case { name: "sigmoid", shapes: &[&[6]], positive: false, build: |g, v| Ok(g.sigmoid(v[0])) },
        Case { name: "gelu", shapes: &[&[6]], positive: false, build: |g, v| Ok(g.gelu(v[0])) },
        Case { name: "matmul", shapes: &[&[3, 4], &[4, 2]], positive: false, build: |g, v| g.matmul(v[0], v[1]) },
        Case { name: "matmul_nt", shapes: &[&[3, 4], &[2, 4]], positive: false, build: |g, v| g.matmul_nt(v[0], v[1]) },
        Case { name: "transpose", shapes: &[&[3, 5]], positive: false, build: |g, v| g.transpose(v[0]) },
        Case { name: "add_bias", shapes: &[&[3, 4], &[4]], positive: false, build: |g, v| g.add_bias(v[0], v[1]) },
        Case {
            name: "layer_norm",
            shapes: &[&[3, 5], &[5], &[5]],
            positive: false,
            build: |g, v| g.layer_norm(v[0], v[1], v[2]),
        },
        Case { name: "softmax_rows", shapes: &[&[2, 5]], positive: false, build: |g, v| g.softmax(v[0]) },
        Case { name: "softmax_vector", shapes: &[&[4]], positive: false, build: |g, v| g.softmax(v[0]) },
        Case { name: "softmax_causal", shapes: &[&[4, 4]], positive: false, build: |g, v| g.softmax_causal(v[0]) },
        Case { name: "gather_rows", shapes: &[&[5, 3]], positive: false, build: |g, v| g.gather_rows(v[0], &[4, 0, 4, 2]) },
        Case { name: "concat_rows", shapes: &[&[2, 3], &[1, 3]], positive: false, build: |g, v| g.concat_rows(&[v[0], v[1]]) },
        Case { name: "concat_cols", shapes: &[&[2, 3], &[2, 2]], positive: false, build: |g, v| g.concat_cols(&[v[0], v[1]]) },
        Case { name: "narrow_rows", shapes: &[&[4, 3]], positive: false, build: |g, v| g.narrow_rows(v[0], 1, 2) },
        Case { name: "narrow_cols", shapes: &[&[3, 5]], positive: false, build: |g, v| g.narrow_cols(v[0], 1, 3) },
        Case { name: "row", shapes: &[&[3, 4]], positive: false, build: |g, v| g.row(v[0], 2) },
        Case { name: "reshape", shapes: &[&[2, 6]], positive: false, build: |g, v| g.reshape(v[0], &[3, 4]) },
        Case { name: "sum", shapes: &[&[3, 4]], positive: false, build: |g, v| Ok(g.sum(v[0])) },
        Case { name: "mean", shapes: &[&[3, 4]], positive: false, build: |g, v| Ok(g.mean(v[0])) },
        Case { name: "mean_of", shapes: &[&[1], &[1], &[1]], positive: false, build: |g, v| g.mean_of(v) },
        Case { name: "stack", shapes: &[&[1], &[1], &[1]], positive: false, build: |g, v| g.stack(v) },
        Case { name: "euclid_dist", shapes: &[&[8], &[8]], positive: false, build: |g, v| g.euclid_dist(v[0], v[1]) },
        Case { name: "kl_div", shapes: &[&[5], &[5]], positive: true, build: |g, v| g.kl_div(v[0], v[1]) },
        Case {
            name: "kl_of_softmaxes",
            shapes: &[&[5], &[5]],
            positive: false,
            build: |g, v| {
                let p = g.softmax(v[0])?;
                let q = g.softmax(v[1])?;
                g.kl_div(p, q)
            },
        },
        Case {
            name: "cross_entropy",
            shapes: &[&[4, 6]],
            positive: false,
            build: |g, v| g.cross_entropy(v[0], &[Some(1), None, Some(5), Some(0)]),
        },
        Case {
            name: "bce_with_logits",
            shapes: &[&[5]],
            positive: false,
            build: |g, v| g.bce_with_logits(v[0], &[1.0, 0.0, 0.0, 1.0, 1.0]),
        },
    ]
}

#[test]
fn every_op_matches_central_differences() {
    let cases = cases();
    assert!(cases.len() >= 20);
    for c in &cases {
        let worst = check(c);
        assert!(worst < TOL, "{}: {worst}", c.name);
    }
}

#[test]
fn matmul_random_3x4_by_4x2_within_1e_6() {
    let c = &cases().into_iter().find(|c| c.name == "matmul").unwrap();
    assert!(check(c) < 1e-6);
}

#[test]
fn euclid_random_8_dim_within_1e_5() {
    let c = &cases().into_iter().find(|c| c.name == "euclid_dist").unwrap();
    assert!(check(c) < 1e-5);
}
