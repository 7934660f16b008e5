//! SGD with Nesterov momentum, the step-decay schedule, He initialization,
//! a synthetic desk-scale dataset and the training loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::blocks::{build_network, LayerGraph, NetworkSpec, Position};
use crate::error::{invalid, Error, Result};
use crate::graph::{BnConfig, Mode, Session};
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};

/// Zero-mean normal weights with variance `2 / fan_in`, where
/// `fan_in = C·kh·kw` for a `F×C×kh×kw` kernel.
pub fn he_init(shape: Shape, rng: &mut impl Rng) -> Result<Tensor> {
    let fan_in = shape.c() * shape.h() * shape.w();
    if fan_in == 0 {
        return Err(invalid(format!("fan-in of {shape} is zero")));
    }
    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("finite std");
    Ok(Tensor::from_fn(shape, |_| normal.sample(rng)))
}

// ── optimizer ────────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SgdConfig {
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
}

/// One SGD step over every parameter with a gradient (missing gradients
/// count as zero):
///
/// ```text
/// g ← grad + wd·p
/// v ← μ·v + g
/// p ← p − lr·(g + μ·v)     (Nesterov; plain momentum uses p − lr·v)
/// ```
///
/// Velocity buffers start at zero; there is no dampening.
pub fn sgd_nesterov_step(store: &mut ParamStore, lr: f64, cfg: &SgdConfig) -> Result<()> {
    for p in store.iter_mut() {
        let shape = p.value.shape();
        if let Some(g) = &p.grad {
            if g.shape() != shape {
                return Err(Error::ShapeMismatch {
                    op: "sgd",
                    detail: format!("{}: grad {} vs param {shape}", p.name, g.shape()),
                });
            }
        }
        let v = p.velocity.get_or_insert_with(|| Tensor::zeros(shape));
        let grad = p.grad.as_ref().map(|g| g.data());
        let (pv, vv) = (p.value.data_mut(), v.data_mut());
        for i in 0..pv.len() {
            let g = grad.map_or(0.0, |g| g[i]) + cfg.weight_decay * pv[i];
            vv[i] = cfg.momentum * vv[i] + g;
            let step = if cfg.nesterov { g + cfg.momentum * vv[i] } else { vv[i] };
            pv[i] -= lr * step;
        }
    }
    Ok(())
}

// ── schedule ─────────────────────────────────────────────────────────────

/// Dropout rate used when dropout is switched on without a value.
pub const DROPOUT_RATE: f64 = 0.2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Fractions of `epochs` at which the rate is multiplied by `decay`.
    pub milestones: Vec<f64>,
    pub decay: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub nesterov: bool,
    /// Dropout after every convolution but the stem; 0 disables.
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 15,
            lr: 0.1,
            milestones: vec![0.5, 0.75],
            decay: 0.1,
            weight_decay: 1e-4,
            momentum: 0.9,
            nesterov: true,
            dropout: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(invalid(format!("learning rate must be a finite non-negative number, got {}", self.lr)));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return Err(invalid("batch_size and epochs must be positive"));
        }
        if !self.milestones.iter().all(|&m| m > 0.0 && m < 1.0) || !self.milestones.windows(2).all(|w| w[0] < w[1]) {
            return Err(invalid(format!("milestones must be strictly increasing in (0, 1): {:?}", self.milestones)));
        }
        if !(self.decay > 0.0 && self.decay < 1.0) {
            return Err(invalid(format!("decay must lie in (0, 1), got {}", self.decay)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(invalid(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        Ok(())
    }

    pub fn sgd(&self) -> SgdConfig {
        SgdConfig {
            momentum: self.momentum,
            weight_decay: self.weight_decay,
            nesterov: self.nesterov,
        }
    }

    /// Epoch index at which each milestone takes effect.
    pub fn milestone_epochs(&self, total: usize) -> Vec<usize> {
        self.milestones.iter().map(|m| (m * total as f64).round() as usize).collect()
    }
}

/// Piecewise-constant step decay: the rate is divided by `1/decay` at each
/// milestone epoch.
pub fn lr_schedule(epoch: usize, total: usize, cfg: &TrainConfig) -> f64 {
    let drops = cfg.milestone_epochs(total).into_iter().filter(|&m| epoch >= m).count();
    cfg.lr * cfg.decay.powi(drops as i32)
}

// ── toy dataset ──────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDatasetConfig {
    pub classes: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub size: usize,
    pub noise: f64,
    /// Random circular translation of each sample's pattern.
    pub translate: bool,
    pub seed: u64,
}

impl Default for ToyDatasetConfig {
    fn default() -> Self {
        ToyDatasetConfig {
            classes: 4,
            train_per_class: 64,
            test_per_class: 32,
            size: 16,
            noise: 0.5,
            translate: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyDataset {
    pub classes: usize,
    /// One `C×H×W` template per class, unit RMS.
    pub patterns: Vec<Tensor>,
    pub train_images: Tensor,
    pub train_labels: Vec<usize>,
    pub test_images: Tensor,
    pub test_labels: Vec<usize>,
}

/// Distinct spatial frequencies, none the negative of another, so the
/// cosine gratings they define are mutually orthogonal on the grid.
fn grating_frequencies(size: usize, count: usize) -> Vec<(isize, isize)> {
    let base = (size / 8).max(1) as isize;
    let half = (size / 2) as isize;
    let mut out: Vec<(isize, isize)> = Vec::new();
    let mut push = |f: (isize, isize)| {
        let norm = |v: isize| v.rem_euclid(size as isize);
        let taken = out.iter().any(|&(a, b)| {
            (norm(a) == norm(f.0) && norm(b) == norm(f.1)) || (norm(-a) == norm(f.0) && norm(-b) == norm(f.1))
        });
        if !taken && (f.0, f.1) != (0, 0) {
            out.push(f);
        }
    };
    let mut m = base;
    while m <= half {
        for f in [(0, m), (m, 0), (m, m), (m, -m)] {
            push(f);
        }
        m += base;
    }
    for a in 0..=half {
        for b in -half..=half {
            push((a, b));
        }
    }
    out.truncate(count);
    out
}

fn grating(channels: usize, size: usize, (fy, fx): (isize, isize), dy: usize, dx: usize) -> Tensor {
    let s = size as f64;
    Tensor::from_fn(Shape::new(1, channels, size, size), |[_, _, h, w]| {
        let phase = 2.0 * std::f64::consts::PI * (fy as f64 * (h + dy) as f64 + fx as f64 * (w + dx) as f64) / s;
        std::f64::consts::SQRT_2 * phase.cos()
    })
}

/// Class `c` images are the class grating (optionally translated) plus
/// Gaussian noise of standard deviation `noise`.
pub fn make_toy_dataset(cfg: &ToyDatasetConfig) -> Result<ToyDataset> {
    if cfg.classes < 2 {
        return Err(invalid("a toy dataset needs at least two classes"));
    }
    if cfg.size < 4 {
        return Err(invalid("toy images must be at least 4×4"));
    }
    let channels = 3;
    let freqs = grating_frequencies(cfg.size, cfg.classes);
    if freqs.len() < cfg.classes {
        return Err(invalid(format!("{}×{} images support at most {} classes", cfg.size, cfg.size, freqs.len())));
    }
    let patterns: Vec<Tensor> = freqs.iter().map(|&f| grating(channels, cfg.size, f, 0, 0)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut split = |per_class: usize| {
        let n = per_class * cfg.classes;
        let plane = channels * cfg.size * cfg.size;
        let mut data = Vec::with_capacity(n * plane);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let c = i % cfg.classes;
            let (dy, dx) = if cfg.translate {
                (rng.random_range(0..cfg.size), rng.random_range(0..cfg.size))
            } else {
                (0, 0)
            };
            let p = grating(channels, cfg.size, freqs[c], dy, dx);
            data.extend(p.data().iter().map(|v| v + cfg.noise * rng.sample::<f64, _>(StandardNormal)));
            labels.push(c);
        }
        (Tensor::from_vec(Shape::new(n, channels, cfg.size, cfg.size), data).expect("sized"), labels)
    };
    let (train_images, train_labels) = split(cfg.train_per_class);
    let (test_images, test_labels) = split(cfg.test_per_class);
    Ok(ToyDataset {
        classes: cfg.classes,
        patterns,
        train_images,
        train_labels,
        test_images,
        test_labels,
    })
}

/// Rows `idx` of a batch-major tensor.
pub fn gather(images: &Tensor, idx: &[usize]) -> Tensor {
    let s = images.shape();
    let per = s.c() * s.plane();
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&images.data()[i * per..(i + 1) * per]);
    }
    Tensor::from_vec(Shape::new(idx.len(), s.c(), s.h(), s.w()), data).expect("sized")
}

/// Accuracy of assigning each image to the closest class template.
pub fn nearest_pattern_accuracy(patterns: &[Tensor], images: &Tensor, labels: &[usize]) -> f64 {
    let per = images.shape().c() * images.shape().plane();
    let mut correct = 0;
    for (i, &y) in labels.iter().enumerate() {
        let img = &images.data()[i * per..(i + 1) * per];
        let mut best = (f64::INFINITY, 0);
        for (c, p) in patterns.iter().enumerate() {
            let d: f64 = img.iter().zip(p.data()).map(|(a, b)| (a - b) * (a - b)).sum();
            if d < best.0 {
                best = (d, c);
            }
        }
        correct += usize::from(best.1 == y);
    }
    correct as f64 / labels.len() as f64
}

// ── training loop ────────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean cross-entropy over the training set, evaluated after the epoch.
    pub loss: f64,
    pub train_acc: f64,
    pub test_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

pub const HISTORY_CSV_HEADER: &str = "epoch,lr,loss,train_acc,test_acc";

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(HISTORY_CSV_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!("{},{},{},{},{}\n", r.epoch, r.lr, r.loss, r.train_acc, r.test_acc));
        }
        out
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.records.last()
    }

    pub fn best_train_acc(&self) -> f64 {
        self.records.iter().map(|r| r.train_acc).fold(0.0, f64::max)
    }

    /// Trailing moving average of the loss column.
    pub fn smoothed_loss(&self, window: usize) -> Vec<f64> {
        let l: Vec<f64> = self.records.iter().map(|r| r.loss).collect();
        l.windows(window.max(1)).map(|w| w.iter().sum::<f64>() / w.len() as f64).collect()
    }
}

const EVAL_BATCH: usize = 128;

/// Eval-mode mean loss and accuracy over a labelled set.
pub fn evaluate(net: &LayerGraph, store: &mut ParamStore, images: &Tensor, labels: &[usize]) -> Result<(f64, f64)> {
    let n = labels.len();
    let (mut loss, mut correct) = (0.0, 0usize);
    for start in (0..n).step_by(EVAL_BATCH) {
        let idx: Vec<usize> = (start..(start + EVAL_BATCH).min(n)).collect();
        let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let mut s = Session::new(store, Mode::Eval);
        let (l, logits) = net.loss(&mut s, gather(images, &idx), &batch_labels)?;
        loss += s.value(l).item() * idx.len() as f64;
        let k = s.graph.shape(logits).c();
        for (row, &y) in s.value(logits).data().chunks(k).zip(&batch_labels) {
            let pred = row
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0;
            correct += usize::from(pred == y);
        }
    }
    Ok((loss / n as f64, correct as f64 / n as f64))
}

/// Sets every running statistic to the exact statistic of the full set,
/// with one training-mode pass in a single batch.
pub fn recompute_bn_stats(net: &LayerGraph, store: &mut ParamStore, images: &Tensor) -> Result<()> {
    let mut s = Session::new(store, Mode::Train).with_bn(BnConfig { eps: BnConfig::default().eps, momentum: 1.0 });
    let x = s.input(images.clone());
    net.forward(&mut s, x)?;
    Ok(())
}

/// Trains `net` with minibatch SGD. Metrics are recorded after every epoch
/// in eval mode, with running statistics recomputed over the training set
/// first; with a zero learning rate the history is therefore constant.
pub fn train_loop(net: &LayerGraph, store: &mut ParamStore, data: &ToyDataset, cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    let n = data.train_labels.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let sgd = cfg.sgd();
    let mut history = History::default();
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(epoch, cfg.epochs, cfg);
        order.shuffle(&mut rng);
        for (step, batch) in order.chunks(cfg.batch_size).enumerate() {
            let labels: Vec<usize> = batch.iter().map(|&i| data.train_labels[i]).collect();
            store.zero_grad();
            let mut s = Session::new(store, Mode::Train).with_dropout(cfg.dropout, cfg.seed ^ ((epoch as u64) << 32 | step as u64));
            let (loss, _) = net.loss(&mut s, gather(&data.train_images, batch), &labels)?;
            let lv = s.value(loss).item();
            if !lv.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    loss: lv,
                    history: Box::new(history),
                });
            }
            s.backward(loss)?;
            sgd_nesterov_step(store, lr, &sgd)?;
        }
        recompute_bn_stats(net, store, &data.train_images)?;
        let (loss, train_acc) = evaluate(net, store, &data.train_images, &data.train_labels)?;
        let (_, test_acc) = evaluate(net, store, &data.test_images, &data.test_labels)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss,
                history: Box::new(history),
            });
        }
        history.records.push(EpochRecord {
            epoch,
            lr,
            loss,
            train_acc,
            test_acc,
        });
    }
    Ok(history)
}

// ── toy experiment ───────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyNetworkConfig {
    pub layers_per_block: usize,
    pub k1: usize,
    pub k2: usize,
    pub position: Position,
}

impl Default for ToyNetworkConfig {
    fn default() -> Self {
        ToyNetworkConfig {
            layers_per_block: 2,
            k1: 4,
            k2: 4,
            position: Position::Unfixed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ToyResult {
    pub history: History,
    /// Nearest-pattern test accuracy, the baseline to beat.
    pub oracle_test_acc: f64,
    pub params: usize,
    pub seed: u64,
}

pub fn run_toy(data_cfg: &ToyDatasetConfig, net_cfg: &ToyNetworkConfig, cfg: &TrainConfig) -> Result<ToyResult> {
    let data = make_toy_dataset(data_cfg)?;
    let spec = NetworkSpec::toy(data_cfg.size, net_cfg.layers_per_block, net_cfg.k1, net_cfg.k2, net_cfg.position, data_cfg.classes)?;
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let net = build_network(&spec, &mut store, &mut rng)?;
    let history = train_loop(&net, &mut store, &data, cfg)?;
    Ok(ToyResult {
        history,
        oracle_test_acc: nearest_pattern_accuracy(&data.patterns, &data.test_images, &data.test_labels),
        params: store.num_elements(),
        seed: cfg.seed,
    })
}
