//! Dense topology: layer `ℓ` consumes a connection of every earlier output.
//!
//! The evaluators here cover pure concatenation (DenseNet), pure addition in
//! both its recursive and unrolled forms (ResNet), the inner/outer link steps
//! and their mixture, and an independent dual-path evaluator used as an
//! oracle for the fixed-position mixture.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::graph::{Session, Var};
use crate::tensor::{Shape, Tensor};

/// A layer transform `H_ℓ` with a declared output width.
pub trait Transform {
    fn out_channels(&self) -> usize;
    fn forward(&self, s: &mut Session, x: Var) -> Result<Var>;
}

impl<T: Transform + ?Sized> Transform for &T {
    fn out_channels(&self) -> usize {
        (**self).out_channels()
    }

    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        (**self).forward(s, x)
    }
}

impl<T: Transform + ?Sized> Transform for Box<T> {
    fn out_channels(&self) -> usize {
        (**self).out_channels()
    }

    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        (**self).forward(s, x)
    }
}

/// Applies `h` and checks the declared width.
pub fn apply(h: &dyn Transform, s: &mut Session, x: Var) -> Result<Var> {
    let y = h.forward(s, x)?;
    let got = s.graph.shape(y).c();
    if got != h.out_channels() {
        return Err(Error::ChannelMismatch {
            op: "transform",
            expected: h.out_channels(),
            got,
        });
    }
    Ok(y)
}

/// Where the inner-link addition lands inside the running embedding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Position {
    /// Leading `k1` channels, the same range at every layer.
    #[default]
    Fixed,
    /// Trailing `k1` channels, following the growing boundary.
    Unfixed,
}

/// Inner link size `k1`, outer link size `k2` and the inner-link position.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct MixedLinkConfig {
    pub k1: usize,
    pub k2: usize,
    pub position: Position,
}

impl MixedLinkConfig {
    pub fn new(k1: usize, k2: usize, position: Position) -> Result<Self> {
        if k1 + k2 == 0 {
            return Err(invalid("k1 and k2 cannot both be zero"));
        }
        Ok(MixedLinkConfig { k1, k2, position })
    }

    /// First channel of the addition window for an embedding of `width`.
    pub fn inner_offset(&self, width: usize) -> Result<usize> {
        if self.k1 > width {
            return Err(Error::RangeOverflow {
                offset: 0,
                end: self.k1,
                width,
            });
        }
        Ok(match self.position {
            Position::Fixed => 0,
            Position::Unfixed => width - self.k1,
        })
    }

    /// Width after `layers` mixed steps from `width`.
    pub fn width_after(&self, width: usize, layers: usize) -> usize {
        width + layers * self.k2
    }
}

/// The connection function `C(·)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ConnectionKind {
    Sum,
    Concat,
    Mixed(MixedLinkConfig),
}

/// Per-layer record of an evaluation. `x[ℓ]` is the output of layer `ℓ`
/// (`x[0]` is the input), `s[ℓ]` the connection of `x[0..=ℓ]`, and `r[ℓ]`
/// the running residual of the recursive ResNet evaluator.
#[derive(Clone, Debug, Default)]
pub struct TopologyTrace {
    pub x: Vec<Var>,
    pub s: Vec<Var>,
    pub r: Vec<Var>,
}

impl TopologyTrace {
    fn start(x0: Var) -> Self {
        TopologyTrace {
            x: vec![x0],
            s: vec![x0],
            r: Vec::new(),
        }
    }

    pub fn layers(&self) -> usize {
        self.x.len() - 1
    }

    /// Final output `X_L`.
    pub fn output(&self) -> Var {
        *self.x.last().expect("trace holds X_0")
    }

    /// Final embedding `S_L`.
    pub fn embedding(&self) -> Var {
        *self.s.last().expect("trace holds S_0")
    }

    pub fn values(&self, s: &Session, which: &[Var]) -> Vec<Tensor> {
        which.iter().map(|v| s.value(*v).clone()).collect()
    }
}

fn sum_all(s: &mut Session, xs: &[Var]) -> Result<Var> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = s.graph.add(acc, x)?;
    }
    Ok(acc)
}

fn concat_all(s: &mut Session, xs: &[Var]) -> Result<Var> {
    let mut acc = xs[0];
    for &x in &xs[1..] {
        acc = s.graph.channel_concat(acc, x)?;
    }
    Ok(acc)
}

fn require_width(s: &Session, layers: &[&dyn Transform], x0: Var) -> Result<()> {
    let w = s.graph.shape(x0).c();
    for h in layers {
        if h.out_channels() != w {
            return Err(Error::ChannelMismatch {
                op: "additive connection",
                expected: w,
                got: h.out_channels(),
            });
        }
    }
    Ok(())
}

/// `X_ℓ = H_ℓ(C(X_0, …, X_{ℓ−1}))` for a general connection.
///
/// Under `Mixed`, each transform emits `k1 + k2` channels: the leading `k1`
/// are added into the embedding at the configured position and the trailing
/// `k2` are appended.
pub fn eval_dense_general(s: &mut Session, layers: &[&dyn Transform], x0: Var, connect: ConnectionKind) -> Result<TopologyTrace> {
    let mut t = TopologyTrace::start(x0);
    if connect == ConnectionKind::Sum {
        require_width(s, layers, x0)?;
    }
    for h in layers {
        if let ConnectionKind::Mixed(cfg) = connect {
            if h.out_channels() != cfg.k1 + cfg.k2 {
                return Err(Error::ChannelMismatch {
                    op: "mixed connection",
                    expected: cfg.k1 + cfg.k2,
                    got: h.out_channels(),
                });
            }
        }
        let input = t.embedding();
        let x = apply(*h, s, input)?;
        let next = match connect {
            ConnectionKind::Sum => s.graph.add(input, x)?,
            ConnectionKind::Concat => s.graph.channel_concat(input, x)?,
            ConnectionKind::Mixed(cfg) => {
                let width = s.graph.shape(input).c();
                let mut acc = input;
                if cfg.k1 > 0 {
                    let inner = s.graph.channel_slice(x, 0, cfg.k1)?;
                    acc = s.graph.channel_add_at(acc, inner, cfg.inner_offset(width)?)?;
                }
                if cfg.k2 > 0 {
                    let outer = s.graph.channel_slice(x, cfg.k1, cfg.k2)?;
                    acc = s.graph.channel_concat(acc, outer)?;
                }
                acc
            }
        };
        t.x.push(x);
        t.s.push(next);
    }
    Ok(t)
}

/// DenseNet: `X_ℓ = H_ℓ(X_0 ∥ X_1 ∥ … ∥ X_{ℓ−1})`, rebuilding the
/// concatenation from the stored outputs at every layer.
pub fn eval_densenet(s: &mut Session, layers: &[&dyn Transform], x0: Var) -> Result<TopologyTrace> {
    let mut t = TopologyTrace::start(x0);
    for h in layers {
        let input = concat_all(s, &t.x)?;
        let x = apply(*h, s, input)?;
        t.x.push(x);
        let all = concat_all(s, &t.x)?;
        t.s.push(all);
    }
    Ok(t)
}

/// ResNet, recursive form: `R_ℓ = H_ℓ(R_{ℓ−1}) + R_{ℓ−1}`, `X_ℓ = H_ℓ(R_{ℓ−1})`.
pub fn eval_resnet_recursive(s: &mut Session, layers: &[&dyn Transform], x0: Var) -> Result<TopologyTrace> {
    require_width(s, layers, x0)?;
    let mut t = TopologyTrace::start(x0);
    t.r.push(x0);
    let mut r = x0;
    for h in layers {
        let x = apply(*h, s, r)?;
        r = s.graph.add(x, r)?;
        t.x.push(x);
        t.r.push(r);
        t.s.push(r);
    }
    Ok(t)
}

/// ResNet, unrolled form: `X_ℓ = H_ℓ(X_0 + X_1 + … + X_{ℓ−1})`, summing the
/// stored outputs afresh at every layer.
pub fn eval_resnet_unrolled(s: &mut Session, layers: &[&dyn Transform], x0: Var) -> Result<TopologyTrace> {
    require_width(s, layers, x0)?;
    let mut t = TopologyTrace::start(x0);
    for h in layers {
        let input = sum_all(s, &t.x)?;
        let x = apply(*h, s, input)?;
        t.x.push(x);
        let all = sum_all(s, &t.x)?;
        t.s.push(all);
    }
    Ok(t)
}

/// Inner link: `S_{ℓ−1}` with `H_in(S_{ℓ−1})` added into channels
/// `[offset, offset + k1)`.
pub fn inner_link_step(s: &mut Session, s_prev: Var, h_in: &dyn Transform, offset: usize) -> Result<Var> {
    let width = s.graph.shape(s_prev).c();
    if offset + h_in.out_channels() > width {
        return Err(Error::RangeOverflow {
            offset,
            end: offset + h_in.out_channels(),
            width,
        });
    }
    let x = apply(h_in, s, s_prev)?;
    s.graph.channel_add_at(s_prev, x, offset)
}

/// Outer link: `S_{ℓ−1} ∥ H_out(S_{ℓ−1})`.
pub fn outer_link_step(s: &mut Session, s_prev: Var, h_out: &dyn Transform) -> Result<Var> {
    let x = apply(h_out, s, s_prev)?;
    s.graph.channel_concat(s_prev, x)
}

/// One mixed link step with an explicit addition offset. Both transforms
/// read `s_prev`; the addition happens first, then the concatenation.
pub fn mixed_step_at(s: &mut Session, s_prev: Var, h_in: Option<&dyn Transform>, h_out: Option<&dyn Transform>, offset: usize) -> Result<Var> {
    let width = s.graph.shape(s_prev).c();
    let inner = match h_in {
        Some(h) => {
            if offset + h.out_channels() > width {
                return Err(Error::RangeOverflow {
                    offset,
                    end: offset + h.out_channels(),
                    width,
                });
            }
            Some(apply(h, s, s_prev)?)
        }
        None => None,
    };
    let outer = match h_out {
        Some(h) => Some(apply(h, s, s_prev)?),
        None => None,
    };
    let mut acc = s_prev;
    if let Some(x) = inner {
        acc = s.graph.channel_add_at(acc, x, offset)?;
    }
    if let Some(x) = outer {
        acc = s.graph.channel_concat(acc, x)?;
    }
    Ok(acc)
}

fn check_pair(cfg: &MixedLinkConfig, h_in: Option<&dyn Transform>, h_out: Option<&dyn Transform>) -> Result<()> {
    let k1 = h_in.map_or(0, |h| h.out_channels());
    let k2 = h_out.map_or(0, |h| h.out_channels());
    if k1 != cfg.k1 || k2 != cfg.k2 {
        return Err(invalid(format!(
            "transforms produce (k1={k1}, k2={k2}) but the config says (k1={}, k2={})",
            cfg.k1, cfg.k2
        )));
    }
    Ok(())
}

/// `S_ℓ = (S_{ℓ−1} + H_in(S_{ℓ−1})) ∥ H_out(S_{ℓ−1})` with the addition
/// placed by `cfg.position`. A zero `k1` (or `k2`) is expressed by `None`.
pub fn mixed_step(s: &mut Session, s_prev: Var, h_in: Option<&dyn Transform>, h_out: Option<&dyn Transform>, cfg: &MixedLinkConfig) -> Result<Var> {
    check_pair(cfg, h_in, h_out)?;
    let offset = cfg.inner_offset(s.graph.shape(s_prev).c())?;
    mixed_step_at(s, s_prev, h_in, h_out, offset)
}

/// A pair of transforms for one mixed layer.
pub type LinkPair<'a> = (Option<&'a dyn Transform>, Option<&'a dyn Transform>);

/// Iterates [`mixed_step`]; `s[ℓ]` holds `S_ℓ`.
pub fn eval_mixed(s: &mut Session, layers: &[LinkPair<'_>], x0: Var, cfg: &MixedLinkConfig) -> Result<TopologyTrace> {
    let mut t = TopologyTrace::start(x0);
    for &(h_in, h_out) in layers {
        let next = mixed_step(s, t.embedding(), h_in, h_out, cfg)?;
        t.s.push(next);
    }
    Ok(t)
}

/// Dual-path evaluation: a residual path (the leading `k1` channels) updated
/// by addition, and a dense path grown by concatenation. Both transforms see
/// `residual ∥ dense`. Returns the final `residual ∥ dense`.
pub fn eval_dual_path_reference(s: &mut Session, layers: &[LinkPair<'_>], x0: Var, k1: usize, k2: usize) -> Result<Var> {
    let width = s.graph.shape(x0).c();
    if k1 > width {
        return Err(Error::RangeOverflow {
            offset: 0,
            end: k1,
            width,
        });
    }
    let mut residual = s.graph.channel_slice(x0, 0, k1)?;
    let mut dense = s.graph.channel_slice(x0, k1, width - k1)?;
    for &(h_in, h_out) in layers {
        if h_in.map_or(0, |h| h.out_channels()) != k1 || h_out.map_or(0, |h| h.out_channels()) != k2 {
            return Err(invalid("dual-path transform widths disagree with (k1, k2)"));
        }
        let joined = s.graph.channel_concat(residual, dense)?;
        let inner = h_in.map(|h| apply(h, s, joined)).transpose()?;
        let outer = h_out.map(|h| apply(h, s, joined)).transpose()?;
        if let Some(x) = inner {
            residual = s.graph.add(residual, x)?;
        }
        if let Some(x) = outer {
            dense = s.graph.channel_concat(dense, x)?;
        }
    }
    s.graph.channel_concat(residual, dense)
}

// ── simple transforms for witnesses and hand-checked examples ──────────

/// `H(x) = 0` with `out` channels.
#[derive(Clone, Debug)]
pub struct ZeroTransform {
    pub out: usize,
}

impl Transform for ZeroTransform {
    fn out_channels(&self) -> usize {
        self.out
    }

    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x).with_c(self.out);
        Ok(s.graph.input(Tensor::zeros(shape)))
    }
}

/// `H(x) = value` everywhere, with `out` channels.
#[derive(Clone, Debug)]
pub struct ConstantTransform {
    pub out: usize,
    pub value: f64,
}

impl Transform for ConstantTransform {
    fn out_channels(&self) -> usize {
        self.out
    }

    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let shape = s.graph.shape(x).with_c(self.out);
        Ok(s.graph.input(Tensor::full(shape, self.value)))
    }
}

/// Width-preserving `H(x) = scale·x + bias` (bias is a constant).
#[derive(Clone, Debug)]
pub struct AffineTransform {
    pub width: usize,
    pub scale: f64,
    pub bias: f64,
}

impl Transform for AffineTransform {
    fn out_channels(&self) -> usize {
        self.width
    }

    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = s.graph.scale(x, self.scale);
        if self.bias == 0.0 {
            return Ok(y);
        }
        let b = s.graph.input(Tensor::full(s.graph.shape(x), self.bias));
        s.graph.add(y, b)
    }
}

/// `H(x) = ReLU(conv(x))` with a stored kernel: the smallest learnable
/// non-linear transform.
#[derive(Clone, Debug)]
pub struct ConvRelu {
    pub kernel: String,
    pub out: usize,
    pub pad: usize,
}

impl Transform for ConvRelu {
    fn out_channels(&self) -> usize {
        self.out
    }

    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let y = s.conv(x, &self.kernel, 1, self.pad)?;
        Ok(s.relu(y))
    }
}

/// Spatially uniform input shape helper.
pub fn shape_of(batch: usize, width: usize, size: usize) -> Shape {
    Shape::new(batch, width, size, size)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mode;
    use crate::params::ParamStore;

    fn scalar(v: f64) -> Tensor {
        Tensor::scalar(v)
    }

    #[test]
    fn single_layer_is_connection_independent() {
        let mut store = ParamStore::new();
        let mut s = Session::new(&mut store, Mode::Train);
        let x0 = s.input(Tensor::full(shape_of(1, 2, 2), 0.5));
        let h = AffineTransform { width: 2, scale: 3.0, bias: 1.0 };
        let hs: [&dyn Transform; 1] = [&h];
        let mixed = ConnectionKind::Mixed(MixedLinkConfig::new(1, 1, Position::Fixed).unwrap());
        let mut outs = Vec::new();
        for c in [ConnectionKind::Sum, ConnectionKind::Concat, mixed] {
            let t = eval_dense_general(&mut s, &hs, x0, c).unwrap();
            outs.push(s.value(t.output()).clone());
        }
        assert!(outs.iter().all(|o| o.data().iter().all(|&v| v == 2.5)));
    }

    #[test]
    fn zero_transform_keeps_residual() {
        let mut store = ParamStore::new();
        let mut s = Session::new(&mut store, Mode::Train);
        let x0 = s.input(Tensor::full(shape_of(1, 3, 2), 1.25));
        let z = ZeroTransform { out: 3 };
        let hs: Vec<&dyn Transform> = vec![&z; 4];
        let t = eval_resnet_recursive(&mut s, &hs, x0).unwrap();
        for r in &t.r {
            assert!(s.value(*r).bit_eq(s.value(x0)));
        }
        assert_eq!(t.r.len(), 5);
        assert_eq!(t.r[0], t.x[0]);
    }

    #[test]
    fn scalar_recursion_by_hand() {
        // H1(r) = 2r + 1, H2(r) = -0.5r + 3, x0 = 1.5
        let mut store = ParamStore::new();
        let mut s = Session::new(&mut store, Mode::Train);
        let x0 = s.input(scalar(1.5));
        let h1 = AffineTransform { width: 1, scale: 2.0, bias: 1.0 };
        let h2 = AffineTransform { width: 1, scale: -0.5, bias: 3.0 };
        let t = eval_resnet_recursive(&mut s, &[&h1, &h2], x0).unwrap();
        let mut r = 1.5f64;
        for (a, b) in [(2.0, 1.0), (-0.5, 3.0)] {
            r += a * r + b;
        }
        assert_eq!(s.value(t.r[2]).item(), r);
    }

    #[test]
    fn unrolled_constant_closed_form() {
        // H(x) = 0·x + c: X_ℓ = c for ℓ ≥ 1, S_ℓ = x0 + ℓc
        let mut store = ParamStore::new();
        let mut s = Session::new(&mut store, Mode::Train);
        let x0 = s.input(Tensor::full(shape_of(1, 2, 3), 0.75));
        let h = AffineTransform { width: 2, scale: 0.0, bias: 0.5 };
        let hs: Vec<&dyn Transform> = vec![&h; 5];
        let t = eval_resnet_unrolled(&mut s, &hs, x0).unwrap();
        for l in 1..=5 {
            assert!(s.value(t.x[l]).data().iter().all(|&v| v == 0.5));
            assert!(s.value(t.s[l]).data().iter().all(|&v| v == 0.75 + 0.5 * l as f64));
        }
    }

    #[test]
    fn sum_requires_equal_widths() {
        let mut store = ParamStore::new();
        let mut s = Session::new(&mut store, Mode::Train);
        let x0 = s.input(Tensor::zeros(shape_of(1, 2, 2)));
        let h = ZeroTransform { out: 3 };
        assert!(eval_dense_general(&mut s, &[&h], x0, ConnectionKind::Sum).is_err());
        assert!(eval_resnet_unrolled(&mut s, &[&h], x0).is_err());
    }

    #[test]
    fn outer_link_width_trace() {
        let mut store = ParamStore::new();
        let mut s = Session::new(&mut store, Mode::Train);
        let mut cur = s.input(Tensor::zeros(shape_of(1, 24, 2)));
        let h = ConstantTransform { out: 12, value: 1.0 };
        let mut widths = vec![24];
        for _ in 0..3 {
            cur = outer_link_step(&mut s, cur, &h).unwrap();
            widths.push(s.graph.shape(cur).c());
        }
        assert_eq!(widths, vec![24, 36, 48, 60]);
    }

    #[test]
    fn inner_link_zero_and_trailing_window() {
        let mut store = ParamStore::new();
        let mut s = Session::new(&mut store, Mode::Train);
        let base = Tensor::from_fn(shape_of(2, 6, 2), |[n, c, h, w]| (n + 2 * c + 3 * h + 5 * w) as f64 * 0.1);
        let x = s.input(base.clone());
        let z = ZeroTransform { out: 2 };
        let y = inner_link_step(&mut s, x, &z, 3).unwrap();
        assert!(s.value(y).bit_eq(&base));

        let one = ConstantTransform { out: 2, value: 1.0 };
        let y = inner_link_step(&mut s, x, &one, 4).unwrap();
        let got = s.value(y);
        assert!(got.channel_range(0, 4).unwrap().bit_eq(&base.channel_range(0, 4).unwrap()));
        assert!(inner_link_step(&mut s, x, &one, 5).is_err());
    }

    #[test]
    fn fixed_and_unfixed_differ_on_witness() {
        let mut store = ParamStore::new();
        let mut s = Session::new(&mut store, Mode::Train);
        let x = s.input(Tensor::zeros(shape_of(1, 8, 2)));
        let h_in = ConstantTransform { out: 2, value: 1.0 };
        let h_out = ZeroTransform { out: 2 };
        let fixed = MixedLinkConfig::new(2, 2, Position::Fixed).unwrap();
        let unfixed = MixedLinkConfig::new(2, 2, Position::Unfixed).unwrap();
        let a = mixed_step(&mut s, x, Some(&h_in), Some(&h_out), &fixed).unwrap();
        let b = mixed_step(&mut s, x, Some(&h_in), Some(&h_out), &unfixed).unwrap();
        let (a, b) = (s.value(a).clone(), s.value(b).clone());
        assert_eq!(a.shape().c(), 10);
        for c in 0..10 {
            let ea = if c < 2 { 1.0 } else { 0.0 };
            let eb = if (6..8).contains(&c) { 1.0 } else { 0.0 };
            assert!(a.plane(0, c).iter().all(|&v| v == ea));
            assert!(b.plane(0, c).iter().all(|&v| v == eb));
        }
        assert!(!a.bit_eq(&b));
    }

    #[test]
    fn mixed_step_rejects_oversized_k1() {
        let mut store = ParamStore::new();
        let mut s = Session::new(&mut store, Mode::Train);
        let x = s.input(Tensor::zeros(shape_of(1, 2, 2)));
        let h = ZeroTransform { out: 3 };
        let cfg = MixedLinkConfig::new(3, 0, Position::Fixed).unwrap();
        assert!(matches!(
            mixed_step(&mut s, x, Some(&h), None, &cfg),
            Err(Error::RangeOverflow { .. })
        ));
    }

    #[test]
    fn config_rejects_empty() {
        assert!(MixedLinkConfig::new(0, 0, Position::Fixed).is_err());
        let c = MixedLinkConfig::new(4, 12, Position::Unfixed).unwrap();
        assert_eq!(c.inner_offset(24).unwrap(), 20);
        assert_eq!(c.width_after(24, 16), 216);
    }
}
