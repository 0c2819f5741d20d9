mod common;

use bdense::net::{loss_simple, sample_train_points};
use bdense::schedule::forward_diffuse_rows;
use bdense::*;
use common::{rel_err, MlpOracle};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-3;
const TOL: f64 = 1e-3;

/// Largest relative error between two gradient sets. Entries far below the
/// gradient scale are compared against `1e-5 * max |g|` instead of their own
/// magnitude, since f32 accumulation leaves them with no relative precision.
fn worst_rel(analytic: &[Vec<f64>], fd: &[Vec<f64>]) -> f64 {
    let scale = fd.iter().flatten().fold(0.0f64, |m, g| m.max(g.abs()));
    let floor = 1e-5 * scale;
    analytic
        .iter()
        .flatten()
        .zip(fd.iter().flatten())
        .map(|(&a, &b)| rel_err(a, b, floor))
        .fold(0.0, f64::max)
}

fn central_diff(f: &dyn Fn(&[Vec<f64>]) -> f64, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut x = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut g = vec![0.0; x[i].len()];
        for j in 0..x[i].len() {
            let orig = x[i][j];
            x[i][j] = orig + H;
            let plus = f(&x);
            x[i][j] = orig - H;
            let minus = f(&x);
            x[i][j] = orig;
            g[j] = (plus - minus) / (2.0 * H);
        }
        out.push(g);
    }
    out
}

type Builder = dyn Fn(&mut Tape, &[Var]) -> Var;

/// Runs `build` on the tape with every input trainable, reduces the result
/// with fixed random weights, and compares against finite differences of the
/// f64 `oracle` under the same reduction.
fn check_op(shapes: &[[usize; 2]], out_shape: [usize; 2], build: &Builder, oracle: &dyn Fn(&[Vec<f64>]) -> Vec<f64>, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let inputs: Vec<Tensor> = shapes
        .iter()
        .map(|s| Tensor::randn(&[s[0], s[1]], &mut rng).unwrap())
        .collect();
    let mix = Tensor::randn(&[out_shape[0], out_shape[1]], &mut rng).unwrap();

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone().with_requires_grad())).collect();
    let out = build(&mut tape, &vars);
    let m = tape.constant(mix.clone());
    let weighted = tape.mul(out, m).unwrap();
    let loss = tape.sum(weighted);
    tape.backward(loss).unwrap();
    let analytic: Vec<Vec<f64>> = vars
        .iter()
        .map(|&v| tape.grad(v).unwrap().iter().map(|&g| g as f64).collect())
        .collect();

    let mix64: Vec<f64> = mix.data().iter().map(|&v| v as f64).collect();
    let f = |x: &[Vec<f64>]| oracle(x).iter().zip(&mix64).map(|(o, w)| o * w).sum::<f64>();
    let x: Vec<Vec<f64>> = inputs.iter().map(|t| t.data().iter().map(|&v| v as f64).collect()).collect();
    worst_rel(&analytic, &central_diff(&f, &x))
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn matmul64(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            for j in 0..n {
                out[i * n + j] += a[i * k + p] * b[p * n + j];
            }
        }
    }
    out
}

#[test]
fn silu_matches_finite_differences_on_100_scalars() {
    let err = check_op(
        &[[1, 100]],
        [1, 100],
        &|t, v| t.silu(v[0]),
        &|x| x[0].iter().map(|&v| v * sigmoid(v)).collect(),
        7,
    );
    assert!(err < TOL, "silu max rel err {err}");
}

#[test]
fn matmul_sum_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let a = Tensor::randn(&[4, 3], &mut rng).unwrap();
    let b = Tensor::randn(&[3, 5], &mut rng).unwrap();
    let mut tape = Tape::new();
    let av = tape.leaf(a.clone().with_requires_grad());
    let bv = tape.constant(b.clone());
    let prod = tape.matmul(av, bv).unwrap();
    let s = tape.sum(prod);
    tape.backward(s).unwrap();
    let analytic = vec![tape.grad(av).unwrap().iter().map(|&g| g as f64).collect::<Vec<_>>()];
    let b64: Vec<f64> = b.data().iter().map(|&v| v as f64).collect();
    let f = |x: &[Vec<f64>]| matmul64(&x[0], &b64, 4, 3, 5).iter().sum::<f64>();
    let x = vec![a.data().iter().map(|&v| v as f64).collect::<Vec<_>>()];
    let err = worst_rel(&analytic, &central_diff(&f, &x));
    assert!(err < TOL, "matmul max rel err {err}");
}

fn op_errors(seed: u64) -> Vec<(&'static str, f64)> {
    let zip = |x: &[Vec<f64>], f: fn(f64, f64) -> f64| -> Vec<f64> { x[0].iter().zip(&x[1]).map(|(&a, &b)| f(a, b)).collect() };
    let mut rows = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
    let coeffs: Vec<f32> = (0..3).map(|_| rows.gen_range(-2.0..2.0)).collect();
    let c64: Vec<f64> = coeffs.iter().map(|&c| c as f64).collect();
    let cases: Vec<(&str, Vec<[usize; 2]>, [usize; 2], Box<Builder>, Box<dyn Fn(&[Vec<f64>]) -> Vec<f64>>)> = vec![
        ("add", vec![[3, 4], [3, 4]], [3, 4], Box::new(|t, v| t.add(v[0], v[1]).unwrap()), Box::new(move |x| zip(x, |a, b| a + b))),
        ("sub", vec![[3, 4], [3, 4]], [3, 4], Box::new(|t, v| t.sub(v[0], v[1]).unwrap()), Box::new(move |x| zip(x, |a, b| a - b))),
        ("mul", vec![[3, 4], [3, 4]], [3, 4], Box::new(|t, v| t.mul(v[0], v[1]).unwrap()), Box::new(move |x| zip(x, |a, b| a * b))),
        ("scale", vec![[3, 4]], [3, 4], Box::new(|t, v| t.scale(v[0], -1.7)), Box::new(|x| x[0].iter().map(|&a| a * -1.7f32 as f64).collect())),
        ("silu", vec![[3, 4]], [3, 4], Box::new(|t, v| t.silu(v[0])), Box::new(|x| x[0].iter().map(|&a| a * sigmoid(a)).collect())),
        (
            "matmul",
            vec![[3, 4], [4, 2]],
            [3, 2],
            Box::new(|t, v| t.matmul(v[0], v[1]).unwrap()),
            Box::new(|x| matmul64(&x[0], &x[1], 3, 4, 2)),
        ),
        (
            "add_bias",
            vec![[3, 4], [1, 4]],
            [3, 4],
            Box::new(|t, v| t.add_bias(v[0], v[1]).unwrap()),
            Box::new(|x| x[0].iter().enumerate().map(|(i, &a)| a + x[1][i % 4]).collect()),
        ),
        (
            "scale_rows",
            vec![[3, 4]],
            [3, 4],
            Box::new(move |t, v| t.scale_rows(v[0], &coeffs).unwrap()),
            Box::new(move |x| x[0].iter().enumerate().map(|(i, &a)| a * c64[i / 4]).collect()),
        ),
        (
            "concat_cols",
            vec![[3, 2], [3, 3]],
            [3, 5],
            Box::new(|t, v| t.concat_cols(v[0], v[1]).unwrap()),
            Box::new(|x| (0..3).flat_map(|r| x[0][r * 2..r * 2 + 2].iter().chain(&x[1][r * 3..r * 3 + 3]).copied().collect::<Vec<_>>()).collect()),
        ),
        (
            "slice_cols",
            vec![[3, 5]],
            [3, 2],
            Box::new(|t, v| t.slice_cols(v[0], 1, 3).unwrap()),
            Box::new(|x| (0..3).flat_map(|r| x[0][r * 5 + 1..r * 5 + 3].to_vec()).collect()),
        ),
        (
            "mse",
            vec![[3, 4], [3, 4]],
            [1, 1],
            Box::new(|t, v| t.reduce_loss(LossKind::Mse, v[0], v[1], 0.7).unwrap()),
            Box::new(|x| vec![0.7f32 as f64 * zip(x, |a, b| (a - b) * (a - b)).iter().sum::<f64>() / 12.0]),
        ),
    ];
    cases
        .into_iter()
        .map(|(name, shapes, out, build, oracle)| (name, check_op(&shapes, out, build.as_ref(), oracle.as_ref(), seed)))
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn every_op_matches_finite_differences(seed in any::<u64>()) {
        for (name, err) in op_errors(seed) {
            prop_assert!(err < TOL, "{name}: max rel err {err}");
        }
    }

    #[test]
    fn l1_gradient_is_scaled_sign(seed in any::<u64>(), weight in 0.0f32..3.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let target: Vec<f32> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let pred: Vec<f32> = target
            .iter()
            .map(|&t| t + if rng.gen() { 1.0 } else { -1.0 } * rng.gen_range(0.01f32..1.0))
            .collect();
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::matrix(3, 4, pred.clone()).unwrap().with_requires_grad());
        let t = tape.constant(Tensor::matrix(3, 4, target.clone()).unwrap());
        let loss = tape.reduce_loss(LossKind::L1, p, t, weight).unwrap();
        tape.backward(loss).unwrap();
        let f = |x: &[Vec<f64>]| weight as f64 * x[0].iter().zip(&target).map(|(a, &b)| (a - b as f64).abs()).sum::<f64>() / 12.0;
        let fd = central_diff(&f, &[pred.iter().map(|&v| v as f64).collect()]);
        let analytic = vec![tape.grad(p).unwrap().iter().map(|&g| g as f64).collect::<Vec<_>>()];
        let err = worst_rel(&analytic, &fd);
        prop_assert!(weight == 0.0 || err < TOL, "l1 max rel err {err}");
    }

    #[test]
    fn relu_matches_away_from_the_kink(seed in any::<u64>()) {
        // Inputs within H of zero straddle the kink, where differences are meaningless.
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f32> = (0..40)
            .map(|_| {
                let v: f32 = rng.gen_range(0.01..2.0);
                if rng.gen() { v } else { -v }
            })
            .collect();
        let mut tape = Tape::new();
        let xv = tape.leaf(Tensor::new(vec![40], x.clone()).unwrap().with_requires_grad());
        let r = tape.relu(xv);
        let s = tape.sum(r);
        tape.backward(s).unwrap();
        for (g, v) in tape.grad(xv).unwrap().iter().zip(&x) {
            prop_assert_eq!(*g, if *v > 0.0 { 1.0 } else { 0.0 });
        }
    }
}

/// Tape gradients and oracle finite differences of `loss_simple` on one random batch.
fn net_grads(hidden: Vec<usize>, batch: usize, seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let spec = NetSpec {
        hidden,
        sigma_data: 2.0,
        ..NetSpec::new(2)
    };
    let mut net = ScoreNet::new(spec, &mut rng).unwrap();
    let sched = NoiseSchedule::build(ScheduleSpec::vp_default(1024)).unwrap();
    let x0 = Tensor::randn(&[batch, 2], &mut rng).unwrap().scaled(2.0);
    let eps = Tensor::randn(&[batch, 2], &mut rng).unwrap();
    let points = sample_train_points(&sched, batch, &mut rng).unwrap();

    let mut tape = Tape::new();
    let (loss, bound) = loss_simple(&mut tape, &net, &x0, &eps, &points, None).unwrap();
    let value = tape.value(loss).item().unwrap() as f64;
    tape.backward(loss).unwrap();
    net.zero_grad();
    net.accumulate_grads(&tape, &bound).unwrap();
    let analytic: Vec<Vec<f64>> = net
        .named_tensors()
        .iter()
        .map(|(_, t)| t.grad().unwrap().iter().map(|&g| g as f64).collect())
        .collect();

    let z = forward_diffuse_rows(&x0, &eps, &points).unwrap();
    let inputs = MlpOracle::inputs(&net, &z, &points);
    let targets: Vec<Vec<f64>> = (0..batch)
        .map(|i| eps.row(i).iter().map(|&v| v as f64).collect())
        .collect();
    let mut oracle = MlpOracle::from_net(&net);
    let oracle_loss = oracle.loss(&inputs, &targets);
    assert!(rel_err(value, oracle_loss, 0.0) < 1e-5, "tape loss {value} vs oracle {oracle_loss}");
    (analytic, oracle.fd_grads(&inputs, &targets, H))
}

#[test]
fn two_layer_net_matches_finite_differences() {
    for seed in 0..3 {
        let (a, f) = net_grads(vec![32], 16, seed);
        let err = worst_rel(&a, &f);
        assert!(err < TOL, "seed {seed}: max rel err {err}");
    }
}

#[test]
fn default_net_matches_finite_differences() {
    let (a, f) = net_grads(vec![128, 128, 128], 8, 11);
    let err = worst_rel(&a, &f);
    assert!(err < TOL, "max rel err {err}");
}
