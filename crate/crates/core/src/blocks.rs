//! Trainable mixed link networks: bottlenecks, mixed link blocks,
//! transitions, stems and heads, plus the preset families.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::graph::{Session, Var};
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};
use crate::topology::{self, LinkPair, Transform};
use crate::train::he_init;

pub use crate::topology::{MixedLinkConfig, Position};

// ── parameter registration ───────────────────────────────────────────────

fn register_bn(store: &mut ParamStore, prefix: &str, c: usize) -> Result<()> {
    store.insert(format!("{prefix}.scale"), Tensor::full(Shape::new(1, c, 1, 1), 1.0))?;
    store.insert(format!("{prefix}.shift"), Tensor::zeros(Shape::new(1, c, 1, 1)))?;
    store.insert_buffer(format!("{prefix}.running_mean"), vec![0.0; c])?;
    store.insert_buffer(format!("{prefix}.running_var"), vec![1.0; c])?;
    Ok(())
}

fn register_conv(store: &mut ParamStore, name: &str, shape: Shape, rng: &mut impl Rng) -> Result<()> {
    store.insert(name, he_init(shape, rng)?)
}

// ── bottleneck ───────────────────────────────────────────────────────────

/// BN-ReLU-Conv(1×1)-BN-ReLU-Conv(3×3) with `multiplier · out_width`
/// intermediate channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BottleneckSpec {
    pub in_width: usize,
    pub out_width: usize,
    pub multiplier: usize,
}

impl BottleneckSpec {
    pub fn mid_width(&self) -> usize {
        self.multiplier * self.out_width
    }

    pub fn conv1_shape(&self) -> Shape {
        Shape::new(self.mid_width(), self.in_width, 1, 1)
    }

    pub fn conv2_shape(&self) -> Shape {
        Shape::new(self.out_width, self.mid_width(), 3, 3)
    }

    fn validate(&self) -> Result<()> {
        if self.in_width == 0 || self.out_width == 0 || self.multiplier == 0 {
            return Err(invalid(format!("bottleneck widths must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Bottleneck {
    pub prefix: String,
    pub spec: BottleneckSpec,
}

pub fn build_bottleneck(store: &mut ParamStore, prefix: &str, spec: BottleneckSpec, rng: &mut impl Rng) -> Result<Bottleneck> {
    spec.validate()?;
    register_bn(store, &format!("{prefix}.bn1"), spec.in_width)?;
    register_conv(store, &format!("{prefix}.conv1"), spec.conv1_shape(), rng)?;
    register_bn(store, &format!("{prefix}.bn2"), spec.mid_width())?;
    register_conv(store, &format!("{prefix}.conv2"), spec.conv2_shape(), rng)?;
    Ok(Bottleneck {
        prefix: prefix.to_string(),
        spec,
    })
}

impl Transform for Bottleneck {
    fn out_channels(&self) -> usize {
        self.spec.out_width
    }

    fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let p = &self.prefix;
        let y = s.batch_norm(x, &format!("{p}.bn1"))?;
        let y = s.relu(y);
        let y = s.conv(y, &format!("{p}.conv1"), 1, 0)?;
        let y = s.dropout(y)?;
        let y = s.batch_norm(y, &format!("{p}.bn2"))?;
        let y = s.relu(y);
        let y = s.conv(y, &format!("{p}.conv2"), 1, 1)?;
        s.dropout(y)
    }
}

// ── mixed link block ─────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct MixedLayer {
    pub h_in: Option<Bottleneck>,
    pub h_out: Option<Bottleneck>,
}

#[derive(Clone, Debug)]
pub struct MixedLinkBlock {
    pub in_width: usize,
    pub config: MixedLinkConfig,
    pub layers: Vec<MixedLayer>,
}

/// `layers` mixed steps from `in_width`, each with fresh bottlenecks for
/// `H_in` (`k1` outputs) and `H_out` (`k2` outputs).
pub fn build_mixed_link_block(store: &mut ParamStore, prefix: &str, in_width: usize, layers: usize, config: MixedLinkConfig, multiplier: usize, rng: &mut impl Rng) -> Result<MixedLinkBlock> {
    if config.k1 + config.k2 == 0 {
        return Err(invalid("k1 and k2 cannot both be zero"));
    }
    let mut out = Vec::with_capacity(layers);
    for l in 0..layers {
        let width = config.width_after(in_width, l);
        config.inner_offset(width)?;
        let mut make = |tag: &str, k: usize| -> Result<Option<Bottleneck>> {
            if k == 0 {
                return Ok(None);
            }
            let spec = BottleneckSpec {
                in_width: width,
                out_width: k,
                multiplier,
            };
            build_bottleneck(store, &format!("{prefix}.layer{}.{tag}", l + 1), spec, rng).map(Some)
        };
        let h_in = make("inner", config.k1)?;
        let h_out = make("outer", config.k2)?;
        out.push(MixedLayer { h_in, h_out });
    }
    Ok(MixedLinkBlock {
        in_width,
        config,
        layers: out,
    })
}

impl MixedLinkBlock {
    pub fn out_width(&self) -> usize {
        self.config.width_after(self.in_width, self.layers.len())
    }

    /// The transforms as `(H_in, H_out)` pairs for the topology evaluators.
    pub fn pairs(&self) -> Vec<LinkPair<'_>> {
        self.layers
            .iter()
            .map(|l| {
                (
                    l.h_in.as_ref().map(|b| b as &dyn Transform),
                    l.h_out.as_ref().map(|b| b as &dyn Transform),
                )
            })
            .collect()
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let mut cur = x;
        for (h_in, h_out) in self.pairs() {
            cur = topology::mixed_step(s, cur, h_in, h_out, &self.config)?;
        }
        Ok(cur)
    }

    /// Width of `S_ℓ` for ℓ = 0..=layers.
    pub fn widths(&self) -> Vec<usize> {
        (0..=self.layers.len()).map(|l| self.config.width_after(self.in_width, l)).collect()
    }
}

// ── transition, stem, head ───────────────────────────────────────────────

/// BN-ReLU-Conv(1×1) to `⌊θ·width⌋` channels, then 2×2 average pooling.
#[derive(Clone, Debug)]
pub struct Transition {
    pub prefix: String,
    pub in_width: usize,
    pub out_width: usize,
}

pub fn transition_width(in_width: usize, compression: f64) -> Result<usize> {
    if !(compression > 0.0 && compression <= 1.0) {
        return Err(invalid(format!("compression must lie in (0, 1], got {compression}")));
    }
    let w = (compression * in_width as f64).floor() as usize;
    if w == 0 {
        return Err(invalid(format!("compression {compression} leaves no channels of {in_width}")));
    }
    Ok(w)
}

pub fn build_transition(store: &mut ParamStore, prefix: &str, in_width: usize, compression: f64, rng: &mut impl Rng) -> Result<Transition> {
    let out_width = transition_width(in_width, compression)?;
    register_bn(store, &format!("{prefix}.bn"), in_width)?;
    register_conv(store, &format!("{prefix}.conv"), Shape::new(out_width, in_width, 1, 1), rng)?;
    Ok(Transition {
        prefix: prefix.to_string(),
        in_width,
        out_width,
    })
}

impl Transition {
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let p = &self.prefix;
        let y = s.batch_norm(x, &format!("{p}.bn"))?;
        let y = s.relu(y);
        let y = s.conv(y, &format!("{p}.conv"), 1, 0)?;
        let y = s.dropout(y)?;
        s.graph.avg_pool(y, 2, 2)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub window: usize,
    pub stride: usize,
    pub pad: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemSpec {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub width: usize,
    #[serde(default)]
    pub pool: Option<PoolSpec>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Cifar,
    Imagenet,
}

impl Family {
    /// Number of transitions between blocks.
    pub fn transitions(self) -> usize {
        match self {
            Family::Cifar => 2,
            Family::Imagenet => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockSpec {
    pub layers: usize,
    pub k1: usize,
    pub k2: usize,
    pub position: Position,
}

impl BlockSpec {
    pub fn config(&self) -> Result<MixedLinkConfig> {
        MixedLinkConfig::new(self.k1, self.k2, self.position)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputSpec {
    pub channels: usize,
    pub size: usize,
}

/// Complete description of a network, serializable as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub name: String,
    pub family: Family,
    pub input: InputSpec,
    pub stem: StemSpec,
    pub blocks: Vec<BlockSpec>,
    /// Bottleneck intermediate width multiplier `m`.
    pub multiplier: usize,
    /// Transition compression `θ`.
    pub compression: f64,
    pub classes: usize,
}

/// Stem width `max(k1, 2·k2)`.
pub fn stem_width(k1: usize, k2: usize) -> usize {
    k1.max(2 * k2)
}

/// Shapes along the network, derived from the spec alone.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Plan {
    pub stem_size: usize,
    /// Spatial size entering the first block (after the optional stem pool).
    pub block_sizes: Vec<usize>,
    /// `S_ℓ` widths inside each block, ℓ = 0..=layers.
    pub block_widths: Vec<Vec<usize>>,
    /// `(in width, out width, out size)` per transition.
    pub transitions: Vec<(usize, usize, usize)>,
    pub head_width: usize,
    pub head_size: usize,
}

impl NetworkSpec {
    /// CIFAR-style family: three equal blocks on 32×32 inputs, depth `L`
    /// with `n = (L − 4) / 6` layers per block.
    pub fn cifar(depth: usize, k1: usize, k2: usize, position: Position, multiplier: usize, compression: f64, classes: usize) -> Result<Self> {
        if depth < 10 || !(depth - 4).is_multiple_of(6) {
            return Err(invalid(format!("depth {depth} is not 6n + 4 for a whole n ≥ 1")));
        }
        let n = (depth - 4) / 6;
        let spec = NetworkSpec {
            name: format!("mixnet-{depth}"),
            family: Family::Cifar,
            input: InputSpec { channels: 3, size: 32 },
            stem: StemSpec {
                kernel: 3,
                stride: 1,
                pad: 1,
                width: stem_width(k1, k2),
                pool: None,
            },
            blocks: vec![BlockSpec { layers: n, k1, k2, position }; 3],
            multiplier,
            compression,
            classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// The ImageNet family: 105, 121 or 141.
    pub fn imagenet(preset: usize, multiplier: usize, compression: f64) -> Result<Self> {
        let (k, layers) = match preset {
            105 => (32, [6, 12, 20, 12]),
            121 => (40, [6, 12, 24, 16]),
            141 => (48, [6, 12, 30, 20]),
            other => return Err(invalid(format!("unknown ImageNet preset {other}; expected 105, 121 or 141"))),
        };
        let spec = NetworkSpec {
            name: format!("mixnet-{preset}"),
            family: Family::Imagenet,
            input: InputSpec { channels: 3, size: 224 },
            stem: StemSpec {
                kernel: 7,
                stride: 2,
                pad: 3,
                width: stem_width(k, k),
                pool: Some(PoolSpec { window: 3, stride: 2, pad: 1 }),
            },
            blocks: layers
                .iter()
                .map(|&n| BlockSpec {
                    layers: n,
                    k1: k,
                    k2: k,
                    position: Position::Unfixed,
                })
                .collect(),
            multiplier,
            compression,
            classes: 1000,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Named presets: `mixnet-100`, `mixnet-250`, `mixnet-190` (CIFAR,
    /// 10 classes) and `mixnet-105`, `mixnet-121`, `mixnet-141` (ImageNet).
    pub fn preset(name: &str, multiplier: usize, compression: f64) -> Result<Self> {
        let cifar = |depth, k| NetworkSpec::cifar(depth, k, k, Position::Unfixed, multiplier, compression, 10);
        match name {
            "mixnet-100" => cifar(100, 12),
            "mixnet-250" => cifar(250, 24),
            "mixnet-190" => cifar(190, 40),
            "mixnet-105" => NetworkSpec::imagenet(105, multiplier, compression),
            "mixnet-121" => NetworkSpec::imagenet(121, multiplier, compression),
            "mixnet-141" => NetworkSpec::imagenet(141, multiplier, compression),
            other => Err(invalid(format!("unknown preset `{other}`"))),
        }
    }

    /// Desk-scale network: CIFAR layout on `size`×`size` inputs.
    pub fn toy(size: usize, layers_per_block: usize, k1: usize, k2: usize, position: Position, classes: usize) -> Result<Self> {
        let spec = NetworkSpec {
            name: "mixnet-toy".into(),
            family: Family::Cifar,
            input: InputSpec { channels: 3, size },
            stem: StemSpec {
                kernel: 3,
                stride: 1,
                pad: 1,
                width: stem_width(k1, k2),
                pool: None,
            },
            blocks: vec![
                BlockSpec {
                    layers: layers_per_block,
                    k1,
                    k2,
                    position,
                };
                3
            ],
            multiplier: 4,
            compression: 1.0,
            classes,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() != self.family.transitions() + 1 {
            return Err(invalid(format!(
                "{:?} networks have {} blocks, got {}",
                self.family,
                self.family.transitions() + 1,
                self.blocks.len()
            )));
        }
        if self.multiplier == 0 || self.classes == 0 || self.stem.width == 0 {
            return Err(invalid("multiplier, classes and stem width must be positive"));
        }
        self.plan().map(|_| ())
    }

    /// Walks the width and spatial chains.
    pub fn plan(&self) -> Result<Plan> {
        let geom = crate::kernels::ConvGeometry {
            stride: self.stem.stride,
            pad: self.stem.pad,
        };
        let (stem_size, _) = crate::kernels::conv_output_hw(self.input.size, self.input.size, self.stem.kernel, self.stem.kernel, geom)
            .ok_or_else(|| invalid("stem does not fit the input"))?;
        let mut size = stem_size;
        if let Some(p) = self.stem.pool {
            let g = crate::kernels::ConvGeometry { stride: p.stride, pad: p.pad };
            size = crate::kernels::conv_output_hw(size, size, p.window, p.window, g)
                .ok_or_else(|| invalid("stem pool does not fit"))?
                .0;
        }
        let mut width = self.stem.width;
        let mut plan = Plan {
            stem_size,
            block_sizes: Vec::new(),
            block_widths: Vec::new(),
            transitions: Vec::new(),
            head_width: 0,
            head_size: 0,
        };
        for (b, block) in self.blocks.iter().enumerate() {
            let cfg = block.config()?;
            if cfg.k1 > width {
                return Err(invalid(format!("block {} has k1 = {} but only {width} channels enter it", b + 1, cfg.k1)));
            }
            plan.block_sizes.push(size);
            let widths: Vec<usize> = (0..=block.layers).map(|l| cfg.width_after(width, l)).collect();
            width = *widths.last().expect("non-empty");
            plan.block_widths.push(widths);
            if b + 1 < self.blocks.len() {
                let out = transition_width(width, self.compression)?;
                if size < 2 {
                    return Err(invalid(format!("feature map is {size}×{size} before transition {}", b + 1)));
                }
                size /= 2;
                plan.transitions.push((width, out, size));
                width = out;
            }
        }
        plan.head_width = width;
        plan.head_size = size;
        Ok(plan)
    }
}

// ── executable network ───────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub enum LayerNode {
    Stem { conv: String, stride: usize, pad: usize },
    MaxPool(PoolSpec),
    Block(MixedLinkBlock),
    Transition(Transition),
    Head { bn: String, fc: String },
}

/// Topologically ordered executable network bound to parameter names.
#[derive(Clone, Debug)]
pub struct LayerGraph {
    pub spec: NetworkSpec,
    pub nodes: Vec<LayerNode>,
}

/// Instantiates `spec`, registering He-initialized parameters in `store`.
pub fn build_network(spec: &NetworkSpec, store: &mut ParamStore, rng: &mut impl Rng) -> Result<LayerGraph> {
    let plan = spec.plan()?;
    let mut nodes = Vec::new();
    let st = spec.stem;
    register_conv(store, "stem.conv", Shape::new(st.width, spec.input.channels, st.kernel, st.kernel), rng)?;
    nodes.push(LayerNode::Stem {
        conv: "stem.conv".into(),
        stride: st.stride,
        pad: st.pad,
    });
    if let Some(p) = st.pool {
        nodes.push(LayerNode::MaxPool(p));
    }
    let mut width = st.width;
    for (b, block) in spec.blocks.iter().enumerate() {
        let blk = build_mixed_link_block(store, &format!("block{}", b + 1), width, block.layers, block.config()?, spec.multiplier, rng)?;
        width = blk.out_width();
        nodes.push(LayerNode::Block(blk));
        if b + 1 < spec.blocks.len() {
            let t = build_transition(store, &format!("transition{}", b + 1), width, spec.compression, rng)?;
            width = t.out_width;
            nodes.push(LayerNode::Transition(t));
        }
    }
    debug_assert_eq!(width, plan.head_width);
    register_bn(store, "head.bn", width)?;
    store.insert("head.fc.weight", he_init(Shape::new(spec.classes, width, 1, 1), rng)?)?;
    store.insert("head.fc.bias", Tensor::zeros(Shape::new(1, spec.classes, 1, 1)))?;
    nodes.push(LayerNode::Head {
        bn: "head.bn".into(),
        fc: "head.fc".into(),
    });
    Ok(LayerGraph { spec: spec.clone(), nodes })
}

/// Output of one node during a traced forward pass.
#[derive(Clone, Debug)]
pub struct StageOutput {
    pub name: String,
    pub var: Var,
}

impl LayerGraph {
    /// Logits `N×classes×1×1`.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        Ok(self.forward_traced(s, x)?.0)
    }

    pub fn forward_traced(&self, s: &mut Session, x: Var) -> Result<(Var, Vec<StageOutput>)> {
        let xs = s.graph.shape(x);
        if xs.c() != self.spec.input.channels {
            return Err(Error::ChannelMismatch {
                op: "network input",
                expected: self.spec.input.channels,
                got: xs.c(),
            });
        }
        let mut cur = x;
        let mut stages = Vec::with_capacity(self.nodes.len());
        let (mut nb, mut nt) = (0, 0);
        for node in &self.nodes {
            let name = match node {
                LayerNode::Stem { conv, stride, pad } => {
                    cur = s.conv(cur, conv, *stride, *pad)?;
                    "stem".to_string()
                }
                LayerNode::MaxPool(p) => {
                    cur = s.graph.max_pool(cur, p.window, p.stride, p.pad)?;
                    "pool".to_string()
                }
                LayerNode::Block(b) => {
                    cur = b.forward(s, cur)?;
                    nb += 1;
                    format!("block{nb}")
                }
                LayerNode::Transition(t) => {
                    cur = t.forward(s, cur)?;
                    nt += 1;
                    format!("transition{nt}")
                }
                LayerNode::Head { bn, fc } => {
                    let y = s.batch_norm(cur, bn)?;
                    let y = s.relu(y);
                    let y = s.graph.global_avg_pool(y)?;
                    cur = s.linear(y, fc)?;
                    "head".to_string()
                }
            };
            stages.push(StageOutput { name, var: cur });
        }
        Ok((cur, stages))
    }

    /// Mean cross-entropy of the logits for `x` against `labels`.
    pub fn loss(&self, s: &mut Session, x: Tensor, labels: &[usize]) -> Result<(Var, Var)> {
        let xv = s.input(x);
        let logits = self.forward(s, xv)?;
        let loss = s.graph.softmax_cross_entropy(logits, labels)?;
        Ok((loss, logits))
    }

    pub fn blocks(&self) -> impl Iterator<Item = &MixedLinkBlock> {
        self.nodes.iter().filter_map(|n| match n {
            LayerNode::Block(b) => Some(b),
            _ => None,
        })
    }
}

// ── Table-1 presets ──────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Arch {
    /// ResNet: full-width addition, no growth.
    Arch1,
    /// DenseNet: concatenation only.
    Arch2,
    /// Dual path: fixed addition plus growth.
    Arch3,
    /// MixNet: shifted addition plus growth.
    Arch4,
}

impl Arch {
    pub fn from_index(i: usize) -> Option<Arch> {
        [Arch::Arch1, Arch::Arch2, Arch::Arch3, Arch::Arch4].get(i.checked_sub(1)?).copied()
    }
}

/// Mixed link configuration reproducing one of the four architectures on a
/// trunk of `width` channels. `k1`/`k2` are ignored where the architecture
/// fixes them.
pub fn arch_preset(which: Arch, width: usize, k1: usize, k2: usize) -> Result<MixedLinkConfig> {
    match which {
        Arch::Arch1 => MixedLinkConfig::new(width, 0, Position::Fixed),
        Arch::Arch2 => MixedLinkConfig::new(0, k2, Position::Fixed),
        Arch::Arch3 | Arch::Arch4 => {
            if k1 == 0 || k2 == 0 {
                return Err(invalid(format!("{which:?} needs k1 > 0 and k2 > 0")));
            }
            let pos = if which == Arch::Arch3 { Position::Fixed } else { Position::Unfixed };
            MixedLinkConfig::new(k1, k2, pos)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mode;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bottleneck_shapes() {
        let spec = BottleneckSpec { in_width: 24, out_width: 12, multiplier: 4 };
        assert_eq!(spec.conv1_shape(), Shape::new(48, 24, 1, 1));
        assert_eq!(spec.conv2_shape(), Shape::new(12, 48, 3, 3));
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = build_bottleneck(&mut store, "b", spec, &mut rng).unwrap();
        let mut s = Session::new(&mut store, Mode::Train);
        let x = s.input(Tensor::full(Shape::new(2, 24, 5, 5), 0.3));
        let y = b.forward(&mut s, x).unwrap();
        assert_eq!(s.graph.shape(y), Shape::new(2, 12, 5, 5));
        let bad = BottleneckSpec { in_width: 0, out_width: 12, multiplier: 4 };
        assert!(build_bottleneck(&mut ParamStore::new(), "x", bad, &mut rng).is_err());
    }

    #[test]
    fn block_width_law() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = MixedLinkConfig::new(12, 12, Position::Unfixed).unwrap();
        let b = build_mixed_link_block(&mut store, "b", 24, 16, cfg, 1, &mut rng).unwrap();
        assert_eq!(b.out_width(), 216);
        let cfg = MixedLinkConfig::new(30, 12, Position::Fixed).unwrap();
        assert!(build_mixed_link_block(&mut store, "c", 24, 1, cfg, 1, &mut rng).is_err());
    }

    #[test]
    fn transition_widths() {
        assert_eq!(transition_width(216, 1.0).unwrap(), 216);
        assert_eq!(transition_width(216, 0.5).unwrap(), 108);
        assert_eq!(transition_width(215, 0.5).unwrap(), 107);
        assert!(transition_width(216, 0.0).is_err());
        assert!(transition_width(216, 1.5).is_err());
    }

    #[test]
    fn cifar_presets() {
        let s = NetworkSpec::cifar(100, 12, 12, Position::Unfixed, 4, 0.5, 10).unwrap();
        assert_eq!(s.stem.width, 24);
        assert!(s.blocks.iter().all(|b| b.layers == 16));
        assert_eq!(NetworkSpec::preset("mixnet-250", 4, 0.5).unwrap().blocks[0].layers, 41);
        let s190 = NetworkSpec::preset("mixnet-190", 4, 0.5).unwrap();
        assert_eq!(s190.blocks[0].layers, 31);
        assert_eq!(s190.stem.width, 80);
        assert!(NetworkSpec::cifar(101, 12, 12, Position::Fixed, 4, 0.5, 10).is_err());
    }

    #[test]
    fn imagenet_presets() {
        let s = NetworkSpec::imagenet(105, 4, 0.5).unwrap();
        assert_eq!(s.blocks.iter().map(|b| b.layers).collect::<Vec<_>>(), vec![6, 12, 20, 12]);
        assert_eq!((s.blocks[0].k1, s.blocks[0].k2), (32, 32));
        let s = NetworkSpec::imagenet(141, 4, 0.5).unwrap();
        assert_eq!(s.blocks.iter().map(|b| b.layers).collect::<Vec<_>>(), vec![6, 12, 30, 20]);
        assert_eq!(s.stem.width, 96);
        assert!(NetworkSpec::imagenet(50, 4, 0.5).is_err());
    }

    #[test]
    fn spatial_chains() {
        let p = NetworkSpec::preset("mixnet-100", 4, 0.5).unwrap().plan().unwrap();
        assert_eq!(p.block_sizes, vec![32, 16, 8]);
        let p = NetworkSpec::preset("mixnet-121", 4, 0.5).unwrap().plan().unwrap();
        assert_eq!(p.stem_size, 112);
        assert_eq!(p.block_sizes, vec![56, 28, 14, 7]);
        assert_eq!(p.head_size, 7);
    }

    #[test]
    fn arch_presets() {
        assert_eq!(arch_preset(Arch::Arch1, 16, 0, 0).unwrap(), MixedLinkConfig { k1: 16, k2: 0, position: Position::Fixed });
        let a2 = arch_preset(Arch::Arch2, 16, 5, 12).unwrap();
        assert_eq!((a2.k1, a2.k2), (0, 12));
        assert_eq!(arch_preset(Arch::Arch4, 16, 12, 12).unwrap(), MixedLinkConfig { k1: 12, k2: 12, position: Position::Unfixed });
        assert!(arch_preset(Arch::Arch3, 16, 0, 12).is_err());
        assert_eq!(Arch::from_index(3), Some(Arch::Arch3));
        assert_eq!(Arch::from_index(0), None);
    }

    #[test]
    fn spec_json_round_trip_and_unknown_keys() {
        let s = NetworkSpec::imagenet(121, 4, 0.5).unwrap();
        let text = serde_json::to_string_pretty(&s).unwrap();
        let back: NetworkSpec = serde_json::from_str(&text).unwrap();
        assert_eq!(back, s);
        let bad = text.replacen("\"classes\"", "\"klasses\"", 1);
        assert!(serde_json::from_str::<NetworkSpec>(&bad).is_err());
    }

    #[test]
    fn toy_network_runs() {
        let spec = NetworkSpec::toy(8, 1, 2, 2, Position::Unfixed, 3).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = build_network(&spec, &mut store, &mut rng).unwrap();
        let mut s = Session::new(&mut store, Mode::Train);
        let x = Tensor::full(Shape::new(2, 3, 8, 8), 0.1);
        let (loss, logits) = net.loss(&mut s, x, &[0, 2]).unwrap();
        assert_eq!(s.graph.shape(logits), Shape::new(2, 3, 1, 1));
        assert!(s.value(loss).item().is_finite());
    }
}
