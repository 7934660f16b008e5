//! Randomized equivalence suites for the connection topologies.
//!
//! * `unrolling`: recursive and unrolled ResNet evaluators agree.
//! * `reduction`: mixed blocks configured as Arch-1/2/3 reproduce the
//!   ResNet, DenseNet and dual-path evaluators bit for bit.
//! * `width`: every embedding width follows `c0 + ℓ·k2`.
//! * `witness`: Fixed and Unfixed positions are distinguishable, and the
//!   inner link only touches its own channel window.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blocks::{arch_preset, build_bottleneck, build_mixed_link_block, Arch, BottleneckSpec, NetworkSpec};
use crate::error::{invalid, Result};
use crate::gradcheck::randn;
use crate::graph::{Mode, Session};
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};
use crate::topology::{self, ConstantTransform, MixedLinkConfig, Position, Transform, ZeroTransform};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Suite {
    Unrolling,
    Reduction,
    Width,
    Witness,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Unrolling, Suite::Reduction, Suite::Width, Suite::Witness];

    pub fn name(self) -> &'static str {
        match self {
            Suite::Unrolling => "unrolling",
            Suite::Reduction => "reduction",
            Suite::Width => "width",
            Suite::Witness => "witness",
        }
    }

    fn tag(self) -> u64 {
        self as u64 + 1
    }
}

impl std::str::FromStr for Suite {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| invalid(format!("unknown suite `{s}`; expected unrolling, reduction, width or witness")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VerifyConfig {
    pub suites: Vec<Suite>,
    /// Trials per depth (unrolling) or per architecture (reduction).
    pub trials: usize,
    pub min_layers: usize,
    pub max_layers: usize,
    pub max_width: usize,
    pub size: usize,
    pub batch: usize,
    /// Allowed deviation for the unrolling suite; reductions are exact.
    pub tolerance: f64,
    /// Restricts the reduction suite to one architecture (1, 2 or 3).
    pub arch: Option<usize>,
    pub seed: u64,
    /// Shifts every inner-link offset by one. Used to show the suites catch
    /// placement bugs.
    #[serde(skip)]
    pub inject_offset_bug: bool,
}

impl Default for VerifyConfig {
    fn default() -> Self {
        VerifyConfig {
            suites: Suite::ALL.to_vec(),
            trials: 100,
            min_layers: 2,
            max_layers: 8,
            max_width: 16,
            size: 8,
            batch: 2,
            tolerance: 1e-10,
            arch: None,
            seed: 0,
            inject_offset_bug: false,
        }
    }
}

impl VerifyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(invalid("trials must be at least 1"));
        }
        if self.min_layers == 0 || self.min_layers > self.max_layers {
            return Err(invalid(format!("layer range {}..={} is empty", self.min_layers, self.max_layers)));
        }
        if self.max_width < 2 || self.size == 0 || self.batch < 2 {
            return Err(invalid("max_width ≥ 2, size ≥ 1 and batch ≥ 2 are required"));
        }
        if let Some(a) = self.arch {
            if !(1..=3).contains(&a) {
                return Err(invalid(format!("reduction arch must be 1, 2 or 3, got {a}")));
            }
        }
        if !(self.tolerance >= 0.0) {
            return Err(invalid("tolerance must be non-negative"));
        }
        Ok(())
    }

    fn trial_seed(&self, suite: Suite, group: usize, trial: usize) -> u64 {
        self.seed ^ (suite.tag() << 40) ^ ((group as u64) << 24) ^ trial as u64
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Failure {
    /// Name of the violated invariant.
    pub invariant: String,
    /// Seed of the failing trial.
    pub seed: u64,
    /// Depth (unrolling) or architecture (reduction) of the failing trial;
    /// 0 for the other suites.
    pub group: usize,
    /// Index of the failing trial within its group.
    pub trial: usize,
    pub detail: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteReport {
    pub suite: Suite,
    pub trials: usize,
    pub max_deviation: f64,
    pub pass: bool,
    pub failure: Option<Failure>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VerifyReport {
    pub seed: u64,
    pub suites: Vec<SuiteReport>,
    pub pass: bool,
}

impl VerifyReport {
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for s in &self.suites {
            out.push_str(&format!(
                "{:<10} {} trials={} max_deviation={:e}\n",
                s.suite.name(),
                if s.pass { "PASS" } else { "FAIL" },
                s.trials,
                s.max_deviation
            ));
            if let Some(f) = &s.failure {
                out.push_str(&format!(
                    "  invariant `{}` violated (trial seed {}, group {}, trial {}): {}\n",
                    f.invariant, f.seed, f.group, f.trial, f.detail
                ));
            }
        }
        out.push_str(&format!("seed {} overall {}\n", self.seed, if self.pass { "PASS" } else { "FAIL" }));
        out
    }
}

/// Outcome of one trial: observed deviation and, on failure, what broke.
#[derive(Clone, Debug, PartialEq)]
pub struct Trial {
    pub deviation: f64,
    /// `(invariant, detail)` when the trial failed.
    pub violation: Option<(String, String)>,
}

impl Trial {
    fn ok(deviation: f64) -> Self {
        Trial { deviation, violation: None }
    }

    fn fail(deviation: f64, invariant: &str, detail: String) -> Self {
        Trial {
            deviation,
            violation: Some((invariant.to_string(), detail)),
        }
    }

    fn exact(deviation: f64, invariant: &str, bit_equal: bool) -> Self {
        if bit_equal {
            Trial::ok(deviation)
        } else {
            Trial::fail(deviation, invariant, format!("outputs differ, max |diff| = {deviation:e}"))
        }
    }
}

fn run_suite(cfg: &VerifyConfig, suite: Suite, groups: &[usize], mut f: impl FnMut(usize, u64) -> Result<Trial>) -> Result<SuiteReport> {
    let mut report = SuiteReport {
        suite,
        trials: 0,
        max_deviation: 0.0,
        pass: true,
        failure: None,
    };
    for &g in groups {
        for t in 0..cfg.trials {
            let seed = cfg.trial_seed(suite, g, t);
            let trial = match f(g, seed) {
                Ok(tr) => tr,
                Err(e) => Trial::fail(f64::INFINITY, "evaluation", e.to_string()),
            };
            report.trials += 1;
            report.max_deviation = report.max_deviation.max(trial.deviation);
            if let Some((invariant, detail)) = trial.violation {
                report.pass = false;
                report.failure = Some(Failure {
                    invariant,
                    seed,
                    group: g,
                    trial: t,
                    detail,
                });
                return Ok(report);
            }
        }
    }
    Ok(report)
}

pub fn run(cfg: &VerifyConfig) -> Result<VerifyReport> {
    cfg.validate()?;
    let mut suites = Vec::new();
    for &suite in &cfg.suites {
        let layer_range: Vec<usize> = (cfg.min_layers..=cfg.max_layers).collect();
        let report = match suite {
            Suite::Unrolling => run_suite(cfg, suite, &layer_range, |layers, seed| unrolling_trial(cfg, layers, seed))?,
            Suite::Reduction => {
                let archs: Vec<usize> = cfg.arch.map_or(vec![1, 2, 3], |a| vec![a]);
                run_suite(cfg, suite, &archs, |arch, seed| reduction_trial(cfg, arch, seed))?
            }
            Suite::Width => run_suite(cfg, suite, &[0], |_, seed| width_trial(cfg, seed))?,
            Suite::Witness => run_suite(cfg, suite, &[0], |_, seed| witness_trial(cfg, seed))?,
        };
        suites.push(report);
    }
    let pass = suites.iter().all(|s| s.pass);
    Ok(VerifyReport { seed: cfg.seed, suites, pass })
}

// ── trials ───────────────────────────────────────────────────────────────

fn random_bottlenecks(store: &mut ParamStore, rng: &mut ChaCha8Rng, widths: &[(usize, usize)]) -> Result<Vec<crate::blocks::Bottleneck>> {
    let multiplier = rng.random_range(1..=4);
    widths
        .iter()
        .enumerate()
        .map(|(i, &(in_width, out_width))| {
            let spec = BottleneckSpec { in_width, out_width, multiplier };
            build_bottleneck(store, &format!("h{}", i + 1), spec, rng)
        })
        .collect()
}

fn input(cfg: &VerifyConfig, rng: &mut ChaCha8Rng, width: usize) -> Tensor {
    randn(rng, Shape::new(cfg.batch, width, cfg.size, cfg.size))
}

/// Recursive vs unrolled ResNet on `layers` random width-preserving
/// bottlenecks.
pub fn unrolling_trial_deviation(cfg: &VerifyConfig, layers: usize, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = rng.random_range(1..=cfg.max_width);
    let mut store = ParamStore::new();
    let hs = random_bottlenecks(&mut store, &mut rng, &vec![(width, width); layers])?;
    let refs: Vec<&dyn Transform> = hs.iter().map(|h| h as &dyn Transform).collect();
    let x0 = input(cfg, &mut rng, width);
    let mut s = Session::new(&mut store, Mode::Train);
    let x = s.input(x0);
    let rec = topology::eval_resnet_recursive(&mut s, &refs, x)?;
    let unr = topology::eval_resnet_unrolled(&mut s, &refs, x)?;
    Ok(s.value(rec.embedding()).max_abs_diff(s.value(unr.embedding())))
}

fn unrolling_trial(cfg: &VerifyConfig, layers: usize, seed: u64) -> Result<Trial> {
    let d = unrolling_trial_deviation(cfg, layers, seed)?;
    Ok(if d <= cfg.tolerance {
        Trial::ok(d)
    } else {
        Trial::fail(d, "unrolling", format!("{layers} layers: max |recursive − unrolled| = {d:e} > {:e}", cfg.tolerance))
    })
}

fn mixed_forward(cfg: &VerifyConfig, s: &mut Session, block: &crate::blocks::MixedLinkBlock, x: crate::Var) -> Result<crate::Var> {
    if !cfg.inject_offset_bug {
        return block.forward(s, x);
    }
    let mut cur = x;
    for (h_in, h_out) in block.pairs() {
        let width = s.graph.shape(cur).c();
        let offset = block.config.inner_offset(width)? + 1;
        cur = topology::mixed_step_at(s, cur, h_in, h_out, offset)?;
    }
    Ok(cur)
}

/// Arch-1 vs recursive ResNet, Arch-2 vs DenseNet, Arch-3 vs dual path.
pub fn reduction_trial(cfg: &VerifyConfig, arch: usize, seed: u64) -> Result<Trial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = rng.random_range(cfg.min_layers..=cfg.max_layers);
    let width = rng.random_range(2..=cfg.max_width);
    let k1 = rng.random_range(1..=width);
    let k2 = rng.random_range(1..=cfg.max_width / 2);
    let which = Arch::from_index(arch).ok_or_else(|| invalid(format!("no reduction for arch {arch}")))?;
    let config = arch_preset(which, width, k1, k2)?;
    let mut store = ParamStore::new();
    let multiplier = rng.random_range(1..=4);
    let block = build_mixed_link_block(&mut store, "block", width, layers, config, multiplier, &mut rng)?;
    let x0 = input(cfg, &mut rng, width);
    let mut s = Session::new(&mut store, Mode::Train);
    let x = s.input(x0);
    let mixed = mixed_forward(cfg, &mut s, &block, x)?;
    let reference = match which {
        Arch::Arch1 => {
            let hs: Vec<&dyn Transform> = block.pairs().iter().map(|p| p.0.expect("inner transform")).collect();
            topology::eval_resnet_recursive(&mut s, &hs, x)?.embedding()
        }
        Arch::Arch2 => {
            let hs: Vec<&dyn Transform> = block.pairs().iter().map(|p| p.1.expect("outer transform")).collect();
            topology::eval_densenet(&mut s, &hs, x)?.embedding()
        }
        _ => topology::eval_dual_path_reference(&mut s, &block.pairs(), x, config.k1, config.k2)?,
    };
    let (a, b) = (s.value(mixed), s.value(reference));
    if a.shape() != b.shape() {
        return Ok(Trial::fail(f64::INFINITY, "reduction", format!("arch {arch}: shapes {} vs {}", a.shape(), b.shape())));
    }
    Ok(Trial::exact(a.max_abs_diff(b), &format!("reduction (arch {arch})"), a.bit_eq(b)))
}

/// Widths of a random block, both as built and as evaluated.
pub fn width_trial(cfg: &VerifyConfig, seed: u64) -> Result<Trial> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = rng.random_range(cfg.min_layers..=cfg.max_layers);
    let c0 = rng.random_range(1..=cfg.max_width);
    let k1 = rng.random_range(0..=c0);
    let k2 = rng.random_range(usize::from(k1 == 0)..=cfg.max_width / 2);
    let position = if rng.random_bool(0.5) { Position::Fixed } else { Position::Unfixed };
    let config = MixedLinkConfig::new(k1, k2, position)?;
    let mut store = ParamStore::new();
    let block = build_mixed_link_block(&mut store, "block", c0, layers, config, 1, &mut rng)?;
    let x0 = randn(&mut rng, Shape::new(cfg.batch, c0, 2, 2));
    let mut s = Session::new(&mut store, Mode::Train);
    let x = s.input(x0);
    let trace = topology::eval_mixed(&mut s, &block.pairs(), x, &config)?;
    let observed: Vec<usize> = trace.s.iter().map(|v| s.graph.shape(*v).c()).collect();
    let law: Vec<usize> = (0..=layers).map(|l| c0 + l * k2).collect();
    if observed != law || block.widths() != law {
        return Ok(Trial::fail(
            f64::INFINITY,
            "width law",
            format!("c0={c0} k1={k1} k2={k2}: observed {observed:?}, built {:?}, expected {law:?}", block.widths()),
        ));
    }
    // Network-level chain for a random CIFAR-layout spec.
    let spec = NetworkSpec::toy(8, layers, k1.max(1), k2, position, 2)?;
    let plan = spec.plan()?;
    let mut width = spec.stem.width;
    for (b, widths) in plan.block_widths.iter().enumerate() {
        let expect: Vec<usize> = (0..=layers).map(|l| width + l * k2).collect();
        if *widths != expect {
            return Ok(Trial::fail(f64::INFINITY, "width law", format!("block {}: {widths:?} vs {expect:?}", b + 1)));
        }
        width = plan.transitions.get(b).map_or(width, |t| t.1);
    }
    Ok(Trial::ok(0.0))
}

/// Fixed vs Unfixed on the documented witness, then the locality of the
/// inner link on random data.
pub fn witness_trial(cfg: &VerifyConfig, seed: u64) -> Result<Trial> {
    let mut store = ParamStore::new();
    let mut s = Session::new(&mut store, Mode::Train);
    let (fixed, unfixed) = witness_outputs(&mut s, cfg.inject_offset_bug)?;
    if fixed.bit_eq(&unfixed) {
        return Ok(Trial::fail(0.0, "fixed/unfixed witness", "both positions produced identical outputs".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = rng.random_range(2..=cfg.max_width);
    let k1 = rng.random_range(1..width);
    let position = if rng.random_bool(0.5) { Position::Fixed } else { Position::Unfixed };
    let config = MixedLinkConfig::new(k1, 0, position)?;
    let base = randn(&mut rng, Shape::new(cfg.batch, width, cfg.size, cfg.size));
    let delta = randn(&mut rng, Shape::new(cfg.batch, k1, cfg.size, cfg.size));
    let expected = config.inner_offset(width)?;
    let offset = expected + usize::from(cfg.inject_offset_bug);
    let h = FixedOutput(delta.clone());
    let x = s.input(base.clone());
    let y = match topology::mixed_step_at(&mut s, x, Some(&h), None, offset) {
        Ok(y) => s.value(y).clone(),
        Err(e) => return Ok(Trial::fail(f64::INFINITY, "locality", format!("width {width}, k1 {k1}, {position:?}: {e}"))),
    };
    let mut deviation = 0.0f64;
    for n in 0..cfg.batch {
        for c in 0..width {
            let inside = (expected..expected + k1).contains(&c);
            for (i, (&got, &b)) in y.plane(n, c).iter().zip(base.plane(n, c)).enumerate() {
                let want = if inside { b + delta.plane(n, c - expected)[i] } else { b };
                deviation = deviation.max((got - want).abs());
                if got.to_bits() != want.to_bits() {
                    return Ok(Trial::fail(
                        deviation,
                        "locality",
                        format!("width {width}, k1 {k1}, {position:?}: channel {c} changed outside window [{expected}, {})", expected + k1),
                    ));
                }
            }
        }
    }
    Ok(Trial::ok(deviation))
}

/// The witness: zero input of width 8, `H_in ≡ 1`, `H_out ≡ 0`,
/// `k1 = k2 = 2`. Fixed lights channels 0..2, Unfixed channels 6..8.
pub fn witness_outputs(s: &mut Session, inject_offset_bug: bool) -> Result<(Tensor, Tensor)> {
    let x = s.input(Tensor::zeros(Shape::new(1, 8, 2, 2)));
    let h_in = ConstantTransform { out: 2, value: 1.0 };
    let h_out = ZeroTransform { out: 2 };
    let mut run = |position| -> Result<Tensor> {
        let cfg = MixedLinkConfig::new(2, 2, position)?;
        let offset = cfg.inner_offset(8)? + usize::from(inject_offset_bug);
        let y = topology::mixed_step_at(s, x, Some(&h_in), Some(&h_out), offset.min(6))?;
        Ok(s.value(y).clone())
    };
    Ok((run(Position::Fixed)?, run(Position::Unfixed)?))
}

/// Transform returning a stored tensor, for exact locality checks.
struct FixedOutput(Tensor);

impl Transform for FixedOutput {
    fn out_channels(&self) -> usize {
        self.0.shape().c()
    }

    fn forward(&self, s: &mut Session, _x: crate::Var) -> Result<crate::Var> {
        Ok(s.graph.input(self.0.clone()))
    }
}
