#![allow(dead_code)]

use crossnet::dataset::Dataset;
use crossnet::flow::TvL1Params;
use crossnet::stream::{StreamError, StreamKind, StreamNetwork, StreamSpec};
use crossnet::synth::{DatasetConfig, DatasetManifest};
use crossnet::tensor::gradcheck::{grad_check, grad_check_params_smooth, SmoothCheck};
use crossnet::tensor::{Graph, ParamSet, Tensor, TensorError, Var};
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

pub const CONV_TOL: f64 = 1e-4;
pub const LINEAR_TOL: f64 = 1e-5;
pub const NETWORK_TOL: f64 = 1e-3;
/// Smooth or piecewise-linear ops evaluated away from their kinks.
pub const OTHER_TOL: f64 = 1e-5;

pub fn uniform(rng: &mut SplitMix64, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Uniform values whose magnitude is at least `gap`, so kinks at zero sit
/// far outside the finite-difference stencil.
fn away_from_zero(rng: &mut SplitMix64, shape: &[usize], gap: f64) -> Tensor<f64> {
    let mut t = uniform(rng, shape, gap, 1.0);
    for v in t.data_mut() {
        if rng.random_bool(0.5) {
            *v = -*v;
        }
    }
    t
}

/// A random permutation of well-separated values: every window has a unique
/// maximum that no ±step perturbation can overtake.
fn distinct(rng: &mut SplitMix64, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut vals: Vec<f64> = (0..n).map(|i| i as f64 * 0.01).collect();
    for i in (1..n).rev() {
        vals.swap(i, rng.random_range(0..=i));
    }
    Tensor::new(shape.to_vec(), vals).unwrap()
}

pub struct GradCase {
    pub name: &'static str,
    pub tol: f64,
    pub err: f64,
}

/// Every differentiable op, checked w.r.t. each differentiable argument,
/// reduced to a scalar through an MSE against a fixed random target.
pub fn op_gradient_errors(seed: u64) -> Vec<GradCase> {
    let mut rng = SplitMix64::seed_from_u64(seed);
    let mut out = Vec::new();
    let mut case = |name, tol, err: Result<f64, TensorError>| out.push(GradCase { name, tol, err: err.unwrap() });

    let x = uniform(&mut rng, &[1, 2, 4, 6, 6], -1.0, 1.0);
    let w = uniform(&mut rng, &[3, 2, 3, 3, 3], -0.5, 0.5);
    let b = uniform(&mut rng, &[3], -0.5, 0.5);
    let target = uniform(&mut rng, &[1, 3, 4, 6, 6], -1.0, 1.0);
    let conv = |g: &mut Graph<f64>, x: Var, w: Var, b: Var| -> Result<Var, TensorError> {
        let y = g.conv3d(x, w, b, [1, 1, 1], [1, 1, 1])?;
        let t = g.constant(target.clone());
        g.mse(y, t)
    };
    let c = |g: &mut Graph<f64>, t: &Tensor<f64>| g.constant(t.clone());
    case("conv3d/input", CONV_TOL, grad_check(|g, v| { let (w, b) = (c(g, &w), c(g, &b)); conv(g, v, w, b) }, &x));
    case("conv3d/weight", CONV_TOL, grad_check(|g, v| { let (x, b) = (c(g, &x), c(g, &b)); conv(g, x, v, b) }, &w));
    case("conv3d/bias", CONV_TOL, grad_check(|g, v| { let (x, w) = (c(g, &x), c(g, &w)); conv(g, x, w, v) }, &b));

    let strided = uniform(&mut rng, &[1, 1, 5, 7, 7], -1.0, 1.0);
    let kw = uniform(&mut rng, &[2, 1, 2, 3, 3], -0.5, 0.5);
    let kb = uniform(&mut rng, &[2], -0.5, 0.5);
    case(
        "conv3d/strided",
        CONV_TOL,
        grad_check(
            |g, v| {
                let (w, b) = (c(g, &kw), c(g, &kb));
                let y = g.conv3d(v, w, b, [2, 2, 2], [0, 1, 1])?;
                let p = g.global_avg_pool(y)?;
                let t = g.constant(Tensor::full(&[1, 2], 0.3));
                g.mse(p, t)
            },
            &strided,
        ),
    );

    let r = away_from_zero(&mut rng, &[2, 3, 4], 0.05);
    let rt = uniform(&mut rng, &[2, 3, 4], -1.0, 1.0);
    case("relu", OTHER_TOL, grad_check(|g, v| { let y = g.relu(v)?; let t = c(g, &rt); g.mse(y, t) }, &r));

    let m = distinct(&mut rng, &[1, 2, 4, 4, 4]);
    let mt = uniform(&mut rng, &[1, 2, 2, 2, 2], -1.0, 1.0);
    case(
        "maxpool3d",
        OTHER_TOL,
        grad_check(|g, v| { let y = g.maxpool3d(v, [2, 2, 2], [2, 2, 2])?; let t = c(g, &mt); g.mse(y, t) }, &m),
    );

    let a = uniform(&mut rng, &[2, 3, 2, 3, 3], -1.0, 1.0);
    let at = uniform(&mut rng, &[2, 3], -1.0, 1.0);
    case("global_avg_pool", OTHER_TOL, grad_check(|g, v| { let y = g.global_avg_pool(v)?; let t = c(g, &at); g.mse(y, t) }, &a));

    let ad = uniform(&mut rng, &[1, 2, 3, 5, 4], -1.0, 1.0);
    let adt = uniform(&mut rng, &[1, 2, 2, 3, 6], -1.0, 1.0);
    case(
        "adaptive_avg_pool3d",
        OTHER_TOL,
        grad_check(|g, v| { let y = g.adaptive_avg_pool3d(v, [2, 3, 6])?; let t = c(g, &adt); g.mse(y, t) }, &ad),
    );

    let lx = uniform(&mut rng, &[3, 5], -1.0, 1.0);
    let lw = uniform(&mut rng, &[4, 5], -1.0, 1.0);
    let lb = uniform(&mut rng, &[4], -1.0, 1.0);
    let lt = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let lin = |g: &mut Graph<f64>, x: Var, w: Var, b: Var| -> Result<Var, TensorError> {
        let y = g.linear(x, w, b)?;
        let t = g.constant(lt.clone());
        g.mse(y, t)
    };
    case("linear/input", LINEAR_TOL, grad_check(|g, v| { let (w, b) = (c(g, &lw), c(g, &lb)); lin(g, v, w, b) }, &lx));
    case("linear/weight", LINEAR_TOL, grad_check(|g, v| { let (x, b) = (c(g, &lx), c(g, &lb)); lin(g, x, v, b) }, &lw));
    case("linear/bias", LINEAR_TOL, grad_check(|g, v| { let (x, w) = (c(g, &lx), c(g, &lw)); lin(g, x, w, v) }, &lb));

    let ma = uniform(&mut rng, &[2, 6], -2.0, 2.0);
    let mb = uniform(&mut rng, &[2, 6], -2.0, 2.0);
    case("mse/first", OTHER_TOL, grad_check(|g, v| { let t = c(g, &mb); g.mse(v, t) }, &ma));
    case("mse/second", OTHER_TOL, grad_check(|g, v| { let t = c(g, &ma); g.mse(t, v) }, &mb));

    let logits = uniform(&mut rng, &[4, 5], -3.0, 3.0);
    let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..5)).collect();
    case("softmax_cross_entropy", OTHER_TOL, grad_check(|g, v| g.softmax_cross_entropy(v, &labels), &logits));

    let ca = uniform(&mut rng, &[3, 2], -1.0, 1.0);
    let cb = uniform(&mut rng, &[3, 4], -1.0, 1.0);
    let ct = uniform(&mut rng, &[3, 6], -1.0, 1.0);
    case(
        "concat_cols",
        OTHER_TOL,
        grad_check(|g, v| { let b = c(g, &cb); let y = g.concat_cols(v, b)?; let t = c(g, &ct); g.mse(y, t) }, &ca),
    );

    let s = uniform(&mut rng, &[5], -1.0, 1.0);
    let st = uniform(&mut rng, &[5], -1.0, 1.0);
    case(
        "scale+add",
        OTHER_TOL,
        grad_check(
            |g, v| {
                let y = g.scale(v, -1.7)?;
                let t = c(g, &st);
                let z = g.add(y, t)?;
                let u = g.add(z, v)?;
                let zero = g.constant(Tensor::zeros(&[5]));
                g.mse(u, zero)
            },
            &s,
        ),
    );
    out
}

pub fn gradient_spec() -> StreamSpec {
    StreamSpec {
        num_classes: 3,
        block_channels: vec![2, 3, 3, 4],
        clip_shape: [8, 16, 16],
    }
}

fn stream_err(e: StreamError) -> TensorError {
    match e {
        StreamError::Tensor(t) => t,
        other => TensorError::Invalid {
            op: "stream",
            reason: other.to_string(),
        },
    }
}

/// Whole stream forward pass plus cross-entropy, w.r.t. every parameter,
/// over the coordinates whose stencil stays on one side of every kink.
pub fn network_gradient_check(seed: u64, kind: StreamKind) -> SmoothCheck {
    let spec = gradient_spec();
    let net = StreamNetwork::build(&spec, kind, seed).unwrap();
    let params: ParamSet<f64> = net.params.cast();
    let mut rng = SplitMix64::seed_from_u64(seed ^ 0x9e37);
    let [t, h, w] = spec.clip_shape;
    let clip = uniform(&mut rng, &[2, kind.in_channels(), t, h, w], 0.0, 1.0);
    let labels = [rng.random_range(0..3), rng.random_range(0..3)];
    grad_check_params_smooth(
        |g, p| {
            let x = g.constant(clip.clone());
            let taps = net.forward_graph(g, p, x).map_err(stream_err)?;
            g.softmax_cross_entropy(taps.logits, &labels)
        },
        &params,
        Some(12),
    )
    .unwrap()
}

pub fn small_config(seed: u64) -> DatasetConfig {
    DatasetConfig {
        seed,
        num_classes: 4,
        clips_per_class: 6,
        clip_shape: [8, 16, 16],
        ..DatasetConfig::default()
    }
}

pub fn small_spec(config: &DatasetConfig) -> StreamSpec {
    StreamSpec {
        num_classes: config.num_classes,
        block_channels: vec![4, 6, 8, 8],
        clip_shape: config.clip_shape,
    }
}

pub fn flow_params() -> TvL1Params {
    TvL1Params {
        min_level_size: 8,
        ..TvL1Params::default()
    }
}

pub fn render(config: &DatasetConfig) -> Dataset {
    Dataset::render(&DatasetManifest::plan(config).unwrap(), &flow_params()).unwrap()
}
