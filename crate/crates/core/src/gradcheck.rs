//! Central finite-difference gradient checks.
//!
//! The numeric side only ever evaluates forward passes; it shares no code
//! with the backward kernels it checks.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::blocks::{build_mixed_link_block, build_network, build_transition, MixedLinkConfig, NetworkSpec, Position};
use crate::error::{invalid, Result};
use crate::graph::{Graph, Mode, Session, Var};
use crate::params::ParamStore;
use crate::tensor::{Precision, Shape, Tensor};

/// Step and pass threshold for one precision mode.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Tolerance {
    pub step: f64,
    pub max_rel_error: f64,
}

impl Tolerance {
    pub fn for_precision(p: Precision) -> Self {
        match p {
            Precision::F64 => Tolerance { step: 1e-5, max_rel_error: 1e-4 },
            Precision::F32 => Tolerance { step: 1e-3, max_rel_error: 1e-2 },
        }
    }
}

/// Comparison of analytic and numeric gradients for one input tensor.
#[derive(Clone, Debug, Serialize)]
pub struct GradComparison {
    pub input: usize,
    /// `max |a − n| / max(max |a|, max |n|)`
    pub rel_error: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    /// `max(max |a|, max |n|)` over the compared entries.
    pub scale: f64,
    /// Number of gradient entries probed.
    pub entries: usize,
    /// Entries left out because a ±step probe changed which ReLUs fire.
    pub skipped: usize,
}

fn grad_scale(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic.iter().chain(numeric).fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12)
}

/// Max-norm relative error between two gradient vectors.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> (f64, usize) {
    let scale = grad_scale(analytic, numeric);
    let mut worst = (0.0, 0);
    for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
        let e = (a - n).abs() / scale;
        if e > worst.0 || e.is_nan() {
            worst = (e, i);
        }
    }
    worst
}

/// Checks `∂loss/∂inputs` where `loss = f(graph, leaves)` is a scalar.
pub fn check<F>(inputs: &[Tensor], precision: Precision, step: f64, f: F) -> Result<Vec<GradComparison>>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new(precision);
    let leaves: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let loss = f(&mut g, &leaves)?;
    g.backward(loss)?;
    let analytic: Vec<Tensor> = leaves
        .iter()
        .zip(inputs)
        .map(|(v, t)| g.grad(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new(precision);
        let vars: Vec<Var> = xs.iter().map(|t| g.input(t.clone())).collect();
        let l = f(&mut g, &vars)?;
        Ok(g.value(l).item())
    };

    let mut out = Vec::with_capacity(inputs.len());
    let mut work: Vec<Tensor> = inputs.to_vec();
    for (i, a) in analytic.iter().enumerate() {
        let mut numeric = vec![0.0; a.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + step;
            let fp = eval(&work)?;
            work[i].data_mut()[j] = orig - step;
            let fm = eval(&work)?;
            work[i].data_mut()[j] = orig;
            *slot = (fp - fm) / (2.0 * step);
        }
        let (rel_error, worst_index) = relative_error(a.data(), &numeric);
        out.push(GradComparison {
            input: i,
            rel_error,
            worst_index,
            analytic: a.data().get(worst_index).copied().unwrap_or(0.0),
            numeric: numeric.get(worst_index).copied().unwrap_or(0.0),
            scale: grad_scale(a.data(), &numeric),
            entries: a.numel(),
            skipped: 0,
        });
    }
    Ok(out)
}

/// Finite-difference check of every parameter of `store` against the
/// gradients produced by a [`Session`] backward pass. Entries whose ±step
/// probes change the ReLU activation pattern straddle a kink, where the
/// central difference is not a derivative; they are excluded and counted.
pub fn check_params<F>(store: &ParamStore, precision: Precision, step: f64, f: F) -> Result<Vec<(String, GradComparison)>>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let run = |s: &mut ParamStore, backward: bool| -> Result<(f64, Vec<bool>)> {
        let mut sess = Session::new(s, Mode::Train).with_precision(precision);
        let loss = f(&mut sess)?;
        let v = sess.value(loss).item();
        let pattern = sess.graph.relu_pattern();
        if backward {
            sess.backward(loss)?;
        }
        Ok((v, pattern))
    };
    let mut work = store.clone();
    work.zero_grad();
    let (_, base) = run(&mut work, true)?;
    let analytic: Vec<(String, Tensor)> = work
        .iter()
        .map(|p| (p.name.clone(), p.grad.clone().unwrap_or_else(|| Tensor::zeros(p.value.shape()))))
        .collect();

    let mut out = Vec::new();
    for (name, a) in analytic {
        let mut numeric = vec![0.0; a.numel()];
        let mut kept = vec![true; a.numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let orig = work.value(&name)?.data()[j];
            work.get_mut(&name)?.value.data_mut()[j] = orig + step;
            let (fp, pp) = run(&mut work.clone(), false)?;
            work.get_mut(&name)?.value.data_mut()[j] = orig - step;
            let (fm, pm) = run(&mut work.clone(), false)?;
            work.get_mut(&name)?.value.data_mut()[j] = orig;
            *slot = (fp - fm) / (2.0 * step);
            kept[j] = pp == base && pm == base;
        }
        let skipped = kept.iter().filter(|k| !**k).count();
        let keep = |v: &[f64]| -> Vec<f64> { v.iter().zip(&kept).filter(|(_, k)| **k).map(|(x, _)| *x).collect() };
        let (an, nu) = (keep(a.data()), keep(&numeric));
        let (rel_error, kept_index) = relative_error(&an, &nu);
        let worst_index = kept.iter().enumerate().filter(|(_, k)| **k).nth(kept_index).map_or(0, |(i, _)| i);
        out.push((
            name,
            GradComparison {
                input: 0,
                rel_error,
                worst_index,
                analytic: a.data().get(worst_index).copied().unwrap_or(0.0),
                numeric: numeric.get(worst_index).copied().unwrap_or(0.0),
                scale: grad_scale(&an, &nu),
                entries: a.numel(),
                skipped,
            },
        ));
    }
    Ok(out)
}

// ── randomized per-op trials ─────────────────────────────────────────────

pub const OPS: &[&str] = &[
    "conv2d",
    "batch_norm",
    "batch_norm_eval",
    "relu",
    "channel_concat",
    "channel_add_at",
    "avg_pool",
    "max_pool",
    "global_avg_pool",
    "linear",
    "softmax_cross_entropy",
    "dropout",
    "transition",
    "mixed_block",
];

/// Worst result of one randomized trial.
#[derive(Clone, Debug, Serialize)]
pub struct TrialResult {
    pub op: String,
    pub seed: u64,
    pub rel_error: f64,
    /// Which tensor (input index or parameter name) held the worst entry.
    pub worst_input: String,
    pub worst_index: usize,
    /// Gradient entries probed across all inputs.
    pub entries: usize,
    /// Entries excluded for straddling a ReLU kink.
    pub skipped: usize,
}

pub fn randn(rng: &mut impl Rng, shape: Shape) -> Tensor {
    Tensor::from_fn(shape, |_| rng.sample::<f64, _>(StandardNormal))
}

fn dims(rng: &mut impl Rng) -> (usize, usize, usize, usize) {
    (rng.random_range(1..=2), rng.random_range(1..=4), rng.random_range(3..=6), rng.random_range(3..=6))
}

/// Rescales per-tensor errors to the largest gradient magnitude of the whole
/// trial, so a tensor whose gradient is tiny is judged by the absolute
/// error it contributes rather than by rounding noise relative to itself.
fn trial_errors<'a>(cmp: impl Iterator<Item = &'a GradComparison> + Clone) -> (f64, Vec<f64>) {
    let scale = cmp.clone().fold(1e-12f64, |m, c| m.max(c.scale));
    (scale, cmp.map(|c| c.rel_error * c.scale / scale).collect())
}

fn worst(op: &str, seed: u64, cmp: Vec<GradComparison>) -> TrialResult {
    let entries = cmp.iter().map(|c| c.entries).sum();
    let (_, errors) = trial_errors(cmp.iter());
    let (i, rel_error) = errors.iter().copied().enumerate().max_by(|a, b| a.1.total_cmp(&b.1)).expect("at least one input");
    let w = &cmp[i];
    TrialResult {
        op: op.to_string(),
        seed,
        rel_error,
        worst_input: format!("input {}", w.input),
        worst_index: w.worst_index,
        entries,
        skipped: 0,
    }
}

/// One randomized finite-difference trial for the named op.
pub fn run_trial(op: &str, seed: u64, precision: Precision) -> Result<TrialResult> {
    let tol = Tolerance::for_precision(precision);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, h, w) = dims(&mut rng);
    let xs = Shape::new(n, c, h, w);
    let cmp = match op {
        "conv2d" => {
            let f = rng.random_range(1..=3);
            let k = [1, 3][rng.random_range(0..2)];
            let stride = rng.random_range(1..=2);
            let pad = if k == 3 { rng.random_range(0..=1) } else { 0 };
            let x = randn(&mut rng, xs);
            let kern = randn(&mut rng, Shape::new(f, c, k, k));
            let probe_shape = {
                let mut g = Graph::default();
                let (a, b) = (g.input(x.clone()), g.input(kern.clone()));
                let y = g.conv2d(a, b, stride, pad)?;
                g.shape(y)
            };
            let probe = randn(&mut rng, probe_shape);
            check(&[x, kern], precision, tol.step, |g, v| {
                let y = g.conv2d(v[0], v[1], stride, pad)?;
                g.dot(y, probe.clone())
            })?
        }
        "batch_norm" | "batch_norm_eval" => {
            let x = randn(&mut rng, xs);
            let cs = Shape::new(1, c, 1, 1);
            let scale = randn(&mut rng, cs).map(|v| 1.0 + 0.5 * v);
            let shift = randn(&mut rng, cs);
            let mean: Vec<f64> = (0..c).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            let var: Vec<f64> = (0..c).map(|_| 0.5 + rng.random::<f64>()).collect();
            let probe = randn(&mut rng, xs);
            let train = op == "batch_norm";
            check(&[x, scale, shift], precision, tol.step, |g, v| {
                let mode = if train {
                    crate::graph::BnMode::Train { eps: 1e-5 }
                } else {
                    crate::graph::BnMode::Eval { mean: &mean, var: &var, eps: 1e-5 }
                };
                let (y, _) = g.batch_norm(v[0], v[1], v[2], mode)?;
                g.dot(y, probe.clone())
            })?
        }
        "relu" => {
            let x = randn(&mut rng, xs).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v });
            let probe = randn(&mut rng, xs);
            check(&[x], precision, tol.step, |g, v| {
                let y = g.relu(v[0]);
                g.dot(y, probe.clone())
            })?
        }
        "channel_concat" => {
            let c2 = rng.random_range(0..=3);
            let a = randn(&mut rng, xs);
            let b = randn(&mut rng, xs.with_c(c2));
            let probe = randn(&mut rng, xs.with_c(c + c2));
            check(&[a, b], precision, tol.step, |g, v| {
                let y = g.channel_concat(v[0], v[1])?;
                g.dot(y, probe.clone())
            })?
        }
        "channel_add_at" => {
            let k = rng.random_range(1..=c);
            let offset = rng.random_range(0..=c - k);
            let base = randn(&mut rng, xs);
            let delta = randn(&mut rng, xs.with_c(k));
            let probe = randn(&mut rng, xs);
            check(&[base, delta], precision, tol.step, |g, v| {
                let y = g.channel_add_at(v[0], v[1], offset)?;
                g.dot(y, probe.clone())
            })?
        }
        "avg_pool" => {
            let window = rng.random_range(1..=3);
            let stride = rng.random_range(1..=2);
            let x = randn(&mut rng, xs);
            let ys = Shape::new(n, c, (h - window) / stride + 1, (w - window) / stride + 1);
            let probe = randn(&mut rng, ys);
            check(&[x], precision, tol.step, |g, v| {
                let y = g.avg_pool(v[0], window, stride)?;
                g.dot(y, probe.clone())
            })?
        }
        "max_pool" => {
            let window = rng.random_range(2..=3);
            let stride = rng.random_range(1..=2);
            let pad = rng.random_range(0..=1);
            // distinct values 0.01 apart: no ties within a step of h
            let mut order: Vec<usize> = (0..xs.numel()).collect();
            order.shuffle(&mut rng);
            let x = Tensor::from_vec(xs, order.iter().map(|&i| i as f64 * 0.01 - 0.3).collect())?;
            let mut g0 = Graph::default();
            let xv = g0.input(x.clone());
            let y0 = g0.max_pool(xv, window, stride, pad)?;
            let probe = randn(&mut rng, g0.shape(y0));
            check(&[x], precision, tol.step, |g, v| {
                let y = g.max_pool(v[0], window, stride, pad)?;
                g.dot(y, probe.clone())
            })?
        }
        "global_avg_pool" => {
            let x = randn(&mut rng, xs);
            let probe = randn(&mut rng, Shape::new(n, c, 1, 1));
            check(&[x], precision, tol.step, |g, v| {
                let y = g.global_avg_pool(v[0])?;
                g.dot(y, probe.clone())
            })?
        }
        "linear" => {
            let k = rng.random_range(1..=5);
            let x = randn(&mut rng, Shape::new(n, c, 1, 1));
            let wt = randn(&mut rng, Shape::new(k, c, 1, 1));
            let b = randn(&mut rng, Shape::new(1, k, 1, 1));
            let probe = randn(&mut rng, Shape::new(n, k, 1, 1));
            check(&[x, wt, b], precision, tol.step, |g, v| {
                let y = g.linear(v[0], v[1], v[2])?;
                g.dot(y, probe.clone())
            })?
        }
        "softmax_cross_entropy" => {
            let k = rng.random_range(2..=6);
            let nb = rng.random_range(1..=4);
            let logits = randn(&mut rng, Shape::new(nb, k, 1, 1)).scale(2.0);
            let labels: Vec<usize> = (0..nb).map(|_| rng.random_range(0..k)).collect();
            check(&[logits], precision, tol.step, |g, v| g.softmax_cross_entropy(v[0], &labels))?
        }
        "dropout" => {
            let x = randn(&mut rng, xs);
            let mask: Vec<f64> = (0..xs.numel())
                .map(|_| if rng.random::<f64>() < 0.2 { 0.0 } else { 1.25 })
                .collect();
            let probe = randn(&mut rng, xs);
            check(&[x], precision, tol.step, |g, v| {
                let y = g.dropout_with_mask(v[0], mask.clone())?;
                g.dot(y, probe.clone())
            })?
        }
        "mixed_block" => return mixed_block_trial(seed, precision),
        "transition" => return transition_trial(seed, precision),
        other => return Err(invalid(format!("unknown op `{other}`; expected one of {OPS:?}"))),
    };
    Ok(worst(op, seed, cmp))
}

/// Minimum distance of any ReLU input from zero in a structured trial.
pub const KINK_MARGIN: f64 = 1e-3;

/// Moves BN affine parameters away from the identity initialization.
fn perturb_bn(store: &mut ParamStore, rng: &mut impl Rng) {
    for p in store.iter_mut() {
        if p.name.ends_with(".scale") || p.name.ends_with(".shift") {
            let noise = randn(rng, p.value.shape()).scale(0.3);
            p.value.add_assign(&noise);
        }
    }
}

/// Whether every ReLU input of one forward pass clears [`KINK_MARGIN`];
/// near the kink the central difference straddles a non-differentiable
/// point and the comparison is meaningless.
fn clear_of_kinks<F>(store: &ParamStore, precision: Precision, f: &F) -> Result<bool>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let mut scratch = store.clone();
    let mut s = Session::new(&mut scratch, Mode::Train).with_precision(precision);
    f(&mut s)?;
    Ok(s.graph.relu_kink_margin().unwrap_or(f64::INFINITY) >= KINK_MARGIN)
}

fn param_trial<F>(op: &str, seed: u64, store: &ParamStore, precision: Precision, f: F) -> Result<TrialResult>
where
    F: Fn(&mut Session) -> Result<Var>,
{
    let tol = Tolerance::for_precision(precision);
    let mut cmp = check_params(store, precision, tol.step, f)?;
    let entries = cmp.iter().map(|c| c.1.entries).sum();
    let skipped = cmp.iter().map(|c| c.1.skipped).sum();
    let (_, errors) = trial_errors(cmp.iter().map(|c| &c.1));
    let (i, rel_error) = errors.iter().copied().enumerate().max_by(|a, b| a.1.total_cmp(&b.1)).expect("at least one parameter");
    let (name, w) = cmp.swap_remove(i);
    Ok(TrialResult {
        op: op.into(),
        seed,
        rel_error,
        worst_input: name,
        worst_index: w.worst_index,
        entries,
        skipped,
    })
}

const MAX_REDRAWS: usize = 1000;

/// Draws configurations from `draw` until one clears the kink margin, then
/// checks every parameter (the input is registered as parameter `input`).
fn structured_trial<S, F>(op: &str, seed: u64, precision: Precision, mut draw: impl FnMut(&mut ChaCha8Rng) -> Result<(ParamStore, S)>, forward: F) -> Result<TrialResult>
where
    F: Fn(&S, &mut Session) -> Result<Var>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..MAX_REDRAWS {
        let (mut store, state) = draw(&mut rng)?;
        perturb_bn(&mut store, &mut rng);
        let f = |s: &mut Session| forward(&state, s);
        if clear_of_kinks(&store, precision, &f)? {
            return param_trial(op, seed, &store, precision, f);
        }
    }
    Err(invalid(format!("{op}: no kink-free draw for seed {seed}")))
}

/// Gradient check of a two-layer mixed link block: every parameter and the
/// block input.
pub fn mixed_block_trial(seed: u64, precision: Precision) -> Result<TrialResult> {
    structured_trial(
        "mixed_block",
        seed,
        precision,
        |rng| {
            let width = rng.random_range(3..=5);
            let k1 = rng.random_range(1..=width.min(3));
            let k2 = rng.random_range(1..=2);
            let position = if rng.random::<bool>() { Position::Fixed } else { Position::Unfixed };
            let cfg = MixedLinkConfig::new(k1, k2, position)?;
            let mut store = ParamStore::new();
            let block = build_mixed_link_block(&mut store, "block", width, 2, cfg, 1, rng)?;
            let xs = Shape::new(2, width, 4, 4);
            store.insert("input", randn(rng, xs))?;
            let probe = randn(rng, xs.with_c(width + 2 * k2));
            Ok((store, (block, probe)))
        },
        |(block, probe), s| {
            let x = s.param("input")?;
            let y = block.forward(s, x)?;
            s.graph.dot(y, probe.clone())
        },
    )
}

/// Gradient check of a transition (BN-ReLU-Conv-AvgPool).
pub fn transition_trial(seed: u64, precision: Precision) -> Result<TrialResult> {
    structured_trial(
        "transition",
        seed,
        precision,
        |rng| {
            let width = rng.random_range(2..=6);
            let theta = [0.5, 1.0][rng.random_range(0..2)];
            let mut store = ParamStore::new();
            let t = build_transition(&mut store, "transition", width, theta, rng)?;
            let xs = Shape::new(2, width, 4, 4);
            store.insert("input", randn(rng, xs))?;
            let probe = randn(rng, Shape::new(2, t.out_width, 2, 2));
            Ok((store, (t, probe)))
        },
        |(t, probe), s| {
            let x = s.param("input")?;
            let y = t.forward(s, x)?;
            s.graph.dot(y, probe.clone())
        },
    )
}

/// End-to-end check of a complete network on 8×8 inputs with two layers
/// per block, through the cross-entropy loss.
pub fn network_trial(seed: u64, precision: Precision) -> Result<TrialResult> {
    structured_trial(
        "network",
        seed,
        precision,
        |rng| {
            let k1 = rng.random_range(1..=2);
            let k2 = rng.random_range(1..=2);
            let position = if rng.random::<bool>() { Position::Fixed } else { Position::Unfixed };
            let mut spec = NetworkSpec::toy(8, 2, k1, k2, position, 3)?;
            spec.multiplier = 1;
            spec.compression = 0.5;
            let mut store = ParamStore::new();
            let net = build_network(&spec, &mut store, rng)?;
            store.insert("input", randn(rng, Shape::new(2, 3, 8, 8)))?;
            let labels: Vec<usize> = (0..2).map(|_| rng.random_range(0..3)).collect();
            Ok((store, (net, labels)))
        },
        |(net, labels), s| {
            let x = s.param("input")?;
            let logits = net.forward(s, x)?;
            s.graph.softmax_cross_entropy(logits, labels)
        },
    )
}
