//! Helpers shared by the integration tests: random tensors, finite
//! differences and brute-force oracles.
#![allow(dead_code)]

pub mod grads;
pub mod losses;
pub mod oracles;

use hetseg::nn::{device, DType, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
pub const GRAD_TOL: f64 = 1e-4;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rng: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::from_vec(v, shape, &device()).unwrap()
}

/// Random per-pixel distributions over the class axis of `[B, K, H, W]`.
pub fn simplex(rng: &mut impl Rng, shape: [usize; 4]) -> Tensor {
    let z = uniform(rng, &shape, -3.0, 3.0);
    let e = z.exp().unwrap();
    e.broadcast_div(&e.sum_keepdim(1).unwrap()).unwrap()
}

/// Random one-hot masks `[B, K, H, W]`.
pub fn one_hot(rng: &mut impl Rng, shape: [usize; 4]) -> Tensor {
    let [b, k, h, w] = shape;
    let mut v = vec![0f64; b * k * h * w];
    for i in 0..b {
        for px in 0..h * w {
            let c = rng.random_range(0..k);
            v[(i * k + c) * h * w + px] = 1.0;
        }
    }
    Tensor::from_vec(v, (b, k, h, w), &device()).unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

/// `|a - n| / max(|a|, |n|, 1e-6)`.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn flat(t: &Tensor) -> Vec<f64> {
    t.flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

fn with_entry(t: &Tensor, i: usize, delta: f64) -> Tensor {
    let mut v = flat(t);
    v[i] += delta;
    Tensor::from_vec(v, t.shape(), &device()).unwrap()
}

/// Central difference at `FD_STEP`, or `None` when it disagrees with the
/// estimate at a tenth of the step: the interval then straddles a ReLU kink
/// and the probe is resampled.
fn central(eval: impl Fn(f64) -> f64) -> Option<f64> {
    let at = |h: f64| (eval(h) - eval(-h)) / (2.0 * h);
    let (coarse, fine) = (at(FD_STEP), at(FD_STEP / 10.0));
    (rel_err(coarse, fine) < GRAD_TOL).then_some(coarse)
}

const MAX_RESAMPLES: usize = 200;

/// Worst relative error over `probes` smooth coordinates drawn at random.
fn worst_error(
    rng: &mut impl Rng,
    analytic: &[f64],
    probes: usize,
    eval: impl Fn(usize, f64) -> f64,
) -> f64 {
    let mut worst = 0f64;
    for _ in 0..probes {
        let (i, numeric) = (0..MAX_RESAMPLES)
            .find_map(|_| {
                let i = rng.random_range(0..analytic.len());
                central(|h| eval(i, h)).map(|n| (i, n))
            })
            .expect("no smooth coordinate found");
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}

/// Worst relative error between the autograd gradient of `f` at `x` and
/// central differences over `probes` random coordinates.
pub fn input_grad_error(
    rng: &mut impl Rng,
    x: &Tensor,
    probes: usize,
    f: impl Fn(&Tensor) -> Tensor,
) -> f64 {
    let var = Var::from_tensor(x).unwrap();
    let grads = f(var.as_tensor()).backward().unwrap();
    let analytic = grads
        .get(var.as_tensor())
        .map(flat)
        .unwrap_or_else(|| vec![0.0; x.elem_count()]);
    worst_error(rng, &analytic, probes, |i, h| {
        scalar(&f(&with_entry(x, i, h)))
    })
}

/// Autograd gradient of `f` with respect to `var`.
pub fn param_grad(var: &Var, f: impl Fn() -> Tensor) -> Vec<f64> {
    let grads = f().backward().unwrap();
    flat(grads.get(var.as_tensor()).expect("parameter is unused"))
}

/// Same check for `probes` random entries of a parameter variable that `f`
/// reads internally.
pub fn param_grad_error(
    rng: &mut impl Rng,
    var: &Var,
    probes: usize,
    f: impl Fn() -> Tensor,
) -> f64 {
    let analytic = param_grad(var, &f);
    let original = var.as_tensor().copy().unwrap();
    worst_error(rng, &analytic, probes, |i, h| {
        var.set(&with_entry(&original, i, h)).unwrap();
        let v = scalar(&f());
        var.set(&original).unwrap();
        v
    })
}

/// Per-pixel pseudo-label oracle on a `[K, H*W]` class-major buffer: a pixel
/// gets class `c` iff `c` alone attains the maximum and exceeds `threshold`.
pub fn pseudo_oracle(p: &[f32], k: usize, threshold: f64) -> (Vec<f32>, f64) {
    let hw = p.len() / k;
    let mut out = vec![0f32; p.len()];
    let mut labelled = 0;
    for px in 0..hw {
        let col: Vec<f32> = (0..k).map(|c| p[c * hw + px]).collect();
        let max = col.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let winners: Vec<usize> = (0..k).filter(|&c| col[c] == max).collect();
        if winners.len() == 1 && f64::from(max) > threshold {
            out[winners[0] * hw + px] = 1.0;
            labelled += 1;
        }
    }
    (out, labelled as f64 / hw as f64)
}

/// Average precision by walking every positive and counting the items
/// scored at least as high as it.
pub fn ap_oracle(scores: &[f32], truth: &[bool]) -> Option<f64> {
    let positives: Vec<usize> = (0..scores.len()).filter(|&i| truth[i]).collect();
    if positives.is_empty() {
        return None;
    }
    let mut sum = 0.0;
    for &i in &positives {
        let above: Vec<usize> = (0..scores.len())
            .filter(|&j| scores[j] >= scores[i])
            .collect();
        let hits = above.iter().filter(|&&j| truth[j]).count();
        sum += hits as f64 / above.len() as f64;
    }
    Some(sum / positives.len() as f64)
}
