//! Central finite-difference checks of the analytic gradients, in `f64`.
//!
//! Every layer kind of [`LayerSpec`](super::LayerSpec) has a generator of small
//! random instances. A check projects the layer output onto a fixed random
//! tensor `R` (so that normalization layers get a non-trivial signal), and
//! compares `d <y, R> / d theta` for every parameter tensor and the input.
//! The error of one tensor is `||analytic - numeric|| / max(||analytic||, ||numeric||)`.

use ndarray::{ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::graph::{Activation, Graph, Var};
use super::layers::{Conv1d, GroupNorm, LayerNorm, Linear, TimeEmbedding};
use super::params::{Bound, ParamSet};
use crate::error::Result;

/// Step used for central differences.
pub const FD_EPS: f64 = 1e-4;

/// Layer kinds covered by the gradient checks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradCheckKind {
    Affine,
    Conv1dTemporal,
    GroupNorm,
    LayerNorm,
    Activation(Activation),
    ResidualAdd,
    Downsample,
    Upsample,
    SinusoidalTimeEmbed,
    /// Tape ops used by the networks but not exposed as layers: pooling,
    /// transposes, concatenation, broadcasts, elementwise minimum, exp and the
    /// Gaussian log-density.
    AuxiliaryOps,
}

impl GradCheckKind {
    pub fn all() -> Vec<GradCheckKind> {
        vec![
            GradCheckKind::Affine,
            GradCheckKind::Conv1dTemporal,
            GradCheckKind::GroupNorm,
            GradCheckKind::LayerNorm,
            GradCheckKind::Activation(Activation::Mish),
            GradCheckKind::Activation(Activation::Silu),
            GradCheckKind::Activation(Activation::Relu),
            GradCheckKind::Activation(Activation::Tanh),
            GradCheckKind::ResidualAdd,
            GradCheckKind::Downsample,
            GradCheckKind::Upsample,
            GradCheckKind::SinusoidalTimeEmbed,
            GradCheckKind::AuxiliaryOps,
        ]
    }

    pub fn name(&self) -> String {
        match self {
            GradCheckKind::Activation(a) => format!("activation({a:?})").to_lowercase(),
            other => format!("{other:?}"),
        }
    }
}

fn randn(shape: &[usize], rng: &mut ChaCha8Rng) -> ArrayD<f64> {
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.sample(StandardNormal))
}

/// Randomizes every parameter (normalization scales included) so no check
/// runs at a degenerate initialization.
fn jitter(ps: &mut ParamSet<f64>, rng: &mut ChaCha8Rng) {
    for p in ps.iter_mut() {
        p.value
            .mapv_inplace(|v| v + 0.3 * rng.sample::<f64, _>(StandardNormal));
    }
}

/// Max relative error over all parameter tensors and the input of `<f(x), R>`.
pub fn check_gradients<F>(
    params: &ParamSet<f64>,
    input: &ArrayD<f64>,
    input_differentiable: bool,
    seed: u64,
    f: F,
) -> Result<f64>
where
    F: Fn(&mut Graph<f64>, &Bound, Var) -> Result<Var>,
{
    let eval = |ps: &ParamSet<f64>, x: &ArrayD<f64>| -> Result<f64> {
        let mut g = Graph::new();
        let b = ps.bind(&mut g);
        let xv = g.input(x.clone(), true);
        let y = f(&mut g, &b, xv)?;
        let r = projection(g.shape(y), seed);
        Ok((g.value(y) * &r).sum())
    };

    let mut g = Graph::new();
    let bound = params.bind(&mut g);
    let xv = g.input(input.clone(), true);
    let y = f(&mut g, &bound, xv)?;
    let r = projection(g.shape(y), seed);
    let grads = g.backward_with(y, r)?;

    let mut worst = 0.0f64;
    let mut work = params.clone();
    for (id, v) in bound.vars().iter().enumerate() {
        let analytic = grads
            .wrt(*v)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(params.get(id).value.raw_dim()));
        let mut numeric = ArrayD::zeros(analytic.raw_dim());
        for j in 0..analytic.len() {
            let orig = flat(&work.get(id).value, j);
            set_flat(&mut work.get_mut(id).value, j, orig + FD_EPS);
            let up = eval(&work, input)?;
            set_flat(&mut work.get_mut(id).value, j, orig - FD_EPS);
            let down = eval(&work, input)?;
            set_flat(&mut work.get_mut(id).value, j, orig);
            set_flat(&mut numeric, j, (up - down) / (2.0 * FD_EPS));
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    if input_differentiable {
        let analytic = grads
            .wrt(xv)
            .cloned()
            .unwrap_or_else(|| ArrayD::zeros(input.raw_dim()));
        let mut numeric = ArrayD::zeros(input.raw_dim());
        let mut x = input.clone();
        for j in 0..input.len() {
            let orig = flat(&x, j);
            set_flat(&mut x, j, orig + FD_EPS);
            let up = eval(params, &x)?;
            set_flat(&mut x, j, orig - FD_EPS);
            let down = eval(params, &x)?;
            set_flat(&mut x, j, orig);
            set_flat(&mut numeric, j, (up - down) / (2.0 * FD_EPS));
        }
        worst = worst.max(rel_error(&analytic, &numeric));
    }
    Ok(worst)
}

fn projection(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    randn(shape, &mut rng)
}

fn flat(a: &ArrayD<f64>, j: usize) -> f64 {
    *a.iter().nth(j).unwrap()
}

fn set_flat(a: &mut ArrayD<f64>, j: usize, v: f64) {
    *a.iter_mut().nth(j).unwrap() = v;
}

fn rel_error(a: &ArrayD<f64>, n: &ArrayD<f64>) -> f64 {
    let diff = a
        .iter()
        .zip(n.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nn);
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

/// Pushes values away from the kink of ReLU / ties of `minimum`, where the
/// finite difference straddles a non-differentiable point.
fn away_from_zero(x: &mut ArrayD<f64>, margin: f64) {
    x.mapv_inplace(|v| {
        if v.abs() < margin {
            v + 4.0 * margin.copysign(v)
        } else {
            v
        }
    });
}

/// Runs `instances` random checks of one layer kind and returns the worst error.
pub fn check_kind(kind: GradCheckKind, instances: usize, seed: u64) -> Result<f64> {
    let mut worst = 0.0f64;
    for inst in 0..instances {
        let s = seed.wrapping_mul(1_000_003).wrapping_add(inst as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(s);
        worst = worst.max(check_instance(kind, &mut rng, s)?);
    }
    Ok(worst)
}

fn check_instance(kind: GradCheckKind, rng: &mut ChaCha8Rng, seed: u64) -> Result<f64> {
    let mut ps = ParamSet::<f64>::new();
    match kind {
        GradCheckKind::Affine => {
            let (n, i, o) = (
                rng.random_range(1..5),
                rng.random_range(1..7),
                rng.random_range(1..7),
            );
            let l = Linear::new(&mut ps, "affine", i, o, rng);
            jitter(&mut ps, rng);
            let x = randn(&[n, i], rng);
            check_gradients(&ps, &x, true, seed, |g, p, x| l.forward(g, p, x))
        }
        GradCheckKind::Conv1dTemporal => {
            let (b, ci, co) = (
                rng.random_range(1..3),
                rng.random_range(1..4),
                rng.random_range(1..5),
            );
            let k = [1, 3, 5][rng.random_range(0..3)];
            let h = rng.random_range(3..9);
            let l = Conv1d::new(&mut ps, "conv", ci, co, k, 1, rng);
            jitter(&mut ps, rng);
            let x = randn(&[b, ci, h], rng);
            check_gradients(&ps, &x, true, seed, |g, p, x| l.forward(g, p, x))
        }
        GradCheckKind::GroupNorm => {
            let groups = rng.random_range(1..4);
            let c = groups * rng.random_range(1..4);
            let (b, h) = (rng.random_range(1..3), rng.random_range(2..7));
            let l = GroupNorm::new(&mut ps, "gn", c, groups);
            jitter(&mut ps, rng);
            let x = randn(&[b, c, h], rng);
            check_gradients(&ps, &x, true, seed, |g, p, x| l.forward(g, p, x))
        }
        GradCheckKind::LayerNorm => {
            let (n, f) = (rng.random_range(1..5), rng.random_range(2..8));
            let l = LayerNorm::new(&mut ps, "ln", f);
            jitter(&mut ps, rng);
            let x = randn(&[n, f], rng);
            check_gradients(&ps, &x, true, seed, |g, p, x| l.forward(g, p, x))
        }
        GradCheckKind::Activation(act) => {
            let mut x = randn(&[rng.random_range(1..5), rng.random_range(1..6)], rng);
            x.mapv_inplace(|v| 2.0 * v);
            if act == Activation::Relu {
                away_from_zero(&mut x, 1e-2);
            }
            check_gradients(&ps, &x, true, seed, |g, _, x| Ok(g.activation(x, act)))
        }
        GradCheckKind::ResidualAdd => {
            // y = conv(x) + x, the skip path of a residual block.
            let (b, c, h) = (
                rng.random_range(1..3),
                rng.random_range(1..4),
                rng.random_range(3..8),
            );
            let l = Conv1d::new(&mut ps, "res", c, c, 3, 1, rng);
            jitter(&mut ps, rng);
            let x = randn(&[b, c, h], rng);
            check_gradients(&ps, &x, true, seed, |g, p, x| {
                let y = l.forward(g, p, x)?;
                Ok(g.add(y, x))
            })
        }
        GradCheckKind::Downsample => {
            let (b, c, h) = (
                rng.random_range(1..3),
                rng.random_range(1..4),
                2 * rng.random_range(2..5),
            );
            let l = Conv1d::new(&mut ps, "down", c, c, 3, 2, rng);
            jitter(&mut ps, rng);
            let x = randn(&[b, c, h], rng);
            check_gradients(&ps, &x, true, seed, |g, p, x| l.forward(g, p, x))
        }
        GradCheckKind::Upsample => {
            let (b, c, h) = (
                rng.random_range(1..3),
                rng.random_range(1..4),
                rng.random_range(2..5),
            );
            let l = Conv1d::new(&mut ps, "up", c, c, 3, 1, rng);
            jitter(&mut ps, rng);
            let x = randn(&[b, c, h], rng);
            check_gradients(&ps, &x, true, seed, |g, p, x| {
                let u = g.upsample2(x);
                l.forward(g, p, u)
            })
        }
        GradCheckKind::SinusoidalTimeEmbed => {
            // The raw embedding (gradient w.r.t. the step) and the full MLP.
            let dim = 2 * rng.random_range(1..5);
            let steps: Vec<f64> = (0..rng.random_range(1..4))
                .map(|_| rng.random_range(0.0..3.0))
                .collect();
            let k = ArrayD::from_shape_vec(IxDyn(&[steps.len()]), steps.clone()).unwrap();
            let raw =
                check_gradients(
                    &ps,
                    &k,
                    true,
                    seed,
                    |g, _, k| Ok(g.sinusoidal_embed(k, dim)),
                )?;
            let te = TimeEmbedding::new(&mut ps, "te", dim, rng);
            jitter(&mut ps, rng);
            let mlp = check_gradients(&ps, &k, false, seed, |g, p, _| te.forward(g, p, &steps))?;
            Ok(raw.max(mlp))
        }
        GradCheckKind::AuxiliaryOps => {
            let (b, c, h) = (
                rng.random_range(1..3),
                rng.random_range(1..4),
                rng.random_range(2..5),
            );
            let w = ps.add("w", randn(&[c, c], rng));
            let ls = ps.add("log_std", randn(&[c], rng).mapv(|v| 0.3 * v));
            let target = randn(&[b * h, c], rng).into_dimensionality().unwrap();
            let mut x = randn(&[b, c, h], rng);
            away_from_zero(&mut x, 1e-2);
            check_gradients(&ps, &x, true, seed, move |g, p, x| {
                let t = g.swap_last(x); // [b, h, c]
                let flat = g.reshape(t, &[b * h, c]);
                let mixed = g.matmul(flat, p.get(w));
                let m = g.minimum(mixed, flat);
                let lp = g.gaussian_log_prob(target.clone(), m, p.get(ls)); // [b h]
                let pooled = g.mean_time(x); // [b, c]
                let e = g.exp(pooled);
                let bt = g.broadcast_time(e, h); // [b, c, h]
                let cat = g.concat(bt, x, 1); // [b, 2c, h]
                let sq = g.square(cat);
                let s = g.scale(sq, 0.5);
                let s = g.add_scalar(s, 1.0);
                let r = g.reshape(s, &[b, 2 * c * h]);
                let rows = g.sum_last(r); // [b]
                let lp2 = g.reshape(lp, &[b, h]);
                let lps = g.sum_last(lp2);
                let tot = g.mul(rows, lps);
                let mean = g.mean(tot);
                let tot2 = g.sub(tot, rows);
                let sum = g.sum(tot2);
                Ok(g.add(sum, mean))
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_kind_passes_twenty_instances() {
        for kind in GradCheckKind::all() {
            let err = check_kind(kind, 20, 1).unwrap();
            assert!(err < 1e-4, "{}: relative error {err:e}", kind.name());
        }
    }

    #[test]
    fn checker_detects_a_wrong_gradient() {
        // Multiplying by a constant inside a custom op that the tape does not
        // know about must show up as a large error.
        let ps = ParamSet::<f64>::new();
        let x = ArrayD::from_elem(IxDyn(&[3]), 0.5);
        let err = check_gradients(&ps, &x, true, 3, |g, _, x| {
            let v = g.value(x).mapv(|v| v * v);
            let c = g.constant(v);
            Ok(g.add(c, x))
        })
        .unwrap();
        assert!(err > 0.1, "{err}");
    }
}
