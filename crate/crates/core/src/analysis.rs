//! Static accounting over a [`NetworkSpec`]: per-layer parameter and FLOP
//! rows, depth labels and comparison against published model sizes.
//!
//! Conventions: convolutions carry no bias, BN contributes `2·C` parameters
//! (running statistics are buffers, not parameters), a linear layer
//! contributes `K·C + K`. FLOPs are per batch item: a convolution costs
//! `2·F·C·kh·kw·H'·W'`, BN two per element, ReLU and element-wise addition
//! one per element, pooling one per window element, concatenation nothing.

use serde::Serialize;

use crate::blocks::{BottleneckSpec, Family, NetworkSpec, Position};
use crate::error::{invalid, Result};

/// `C×H×W` of one batch item.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct Dims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn new(c: usize, h: usize, w: usize) -> Self {
        Dims { c, h, w }
    }

    pub fn square(c: usize, size: usize) -> Self {
        Dims { c, h: size, w: size }
    }

    pub fn numel(&self) -> u64 {
        (self.c * self.h * self.w) as u64
    }

    pub fn plane(&self) -> u64 {
        (self.h * self.w) as u64
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportRow {
    pub name: String,
    pub kind: &'static str,
    pub input: Dims,
    pub output: Dims,
    pub params: u64,
    pub flops: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ReportConfig {
    pub name: String,
    pub family: Family,
    pub depth: usize,
    pub k1: usize,
    pub k2: usize,
    pub position: Position,
    pub multiplier: usize,
    pub compression: f64,
    pub classes: usize,
    pub input_size: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ParamReport {
    pub config: ReportConfig,
    pub rows: Vec<ReportRow>,
    pub total_params: u64,
    pub total_flops: u64,
    pub params_millions: f64,
    /// Parameters of the final linear layer alone.
    pub classifier_params: u64,
}

/// `L = 2·Σ n_b + 1 + T + 1`: two bottlenecks per layer, the stem, the
/// transitions and the classifier.
pub fn depth_label(spec: &NetworkSpec) -> usize {
    2 * spec.blocks.iter().map(|b| b.layers).sum::<usize>() + 1 + (spec.blocks.len() - 1) + 1
}

fn bn_relu(c: u64, plane: u64) -> u64 {
    3 * c * plane
}

fn bottleneck_row(name: String, spec: BottleneckSpec, input: Dims) -> ReportRow {
    let (c, mid, out) = (spec.in_width as u64, spec.mid_width() as u64, spec.out_width as u64);
    let hw = input.plane();
    ReportRow {
        name,
        kind: "bottleneck",
        input,
        output: Dims::new(spec.out_width, input.h, input.w),
        params: 2 * c + mid * c + 2 * mid + out * mid * 9,
        flops: bn_relu(c, hw) + 2 * mid * c * hw + bn_relu(mid, hw) + 2 * out * mid * 9 * hw,
    }
}

/// Builds the per-layer report. Row order follows the forward pass.
pub fn count_params(spec: &NetworkSpec) -> Result<ParamReport> {
    spec.validate()?;
    let plan = spec.plan()?;
    let mut rows = Vec::new();

    let st = spec.stem;
    let input = Dims::square(spec.input.channels, spec.input.size);
    let stem_out = Dims::square(st.width, plan.stem_size);
    let k2 = (st.kernel * st.kernel) as u64;
    rows.push(ReportRow {
        name: "stem.conv".into(),
        kind: "conv",
        input,
        output: stem_out,
        params: st.width as u64 * input.c as u64 * k2,
        flops: 2 * st.width as u64 * input.c as u64 * k2 * stem_out.plane(),
    });
    let mut cur = stem_out;
    if let Some(p) = st.pool {
        let out = Dims::square(st.width, plan.block_sizes[0]);
        rows.push(ReportRow {
            name: "stem.pool".into(),
            kind: "max_pool",
            input: cur,
            output: out,
            params: 0,
            flops: (p.window * p.window) as u64 * out.numel(),
        });
        cur = out;
    }

    for (b, block) in spec.blocks.iter().enumerate() {
        let cfg = block.config()?;
        for l in 0..block.layers {
            let prefix = format!("block{}.layer{}", b + 1, l + 1);
            let width = cur.c;
            let bspec = |out_width| BottleneckSpec {
                in_width: width,
                out_width,
                multiplier: spec.multiplier,
            };
            if cfg.k1 > 0 {
                rows.push(bottleneck_row(format!("{prefix}.inner"), bspec(cfg.k1), cur));
                rows.push(ReportRow {
                    name: format!("{prefix}.inner_link"),
                    kind: "channel_add_at",
                    input: cur,
                    output: cur,
                    params: 0,
                    flops: cfg.k1 as u64 * cur.plane(),
                });
            }
            if cfg.k2 > 0 {
                rows.push(bottleneck_row(format!("{prefix}.outer"), bspec(cfg.k2), cur));
                let out = Dims::new(width + cfg.k2, cur.h, cur.w);
                rows.push(ReportRow {
                    name: format!("{prefix}.outer_link"),
                    kind: "channel_concat",
                    input: cur,
                    output: out,
                    params: 0,
                    flops: 0,
                });
                cur = out;
            }
        }
        debug_assert_eq!(cur.c, *plan.block_widths[b].last().expect("non-empty"));
        if let Some(&(win, wout, size)) = plan.transitions.get(b) {
            let (c, f) = (win as u64, wout as u64);
            let out = Dims::square(wout, size);
            rows.push(ReportRow {
                name: format!("transition{}", b + 1),
                kind: "transition",
                input: cur,
                output: out,
                params: 2 * c + f * c,
                flops: bn_relu(c, cur.plane()) + 2 * f * c * cur.plane() + 4 * out.numel(),
            });
            cur = out;
        }
    }

    let c = cur.c as u64;
    let pooled = Dims::new(cur.c, 1, 1);
    rows.push(ReportRow {
        name: "head.pool".into(),
        kind: "bn_relu_gap",
        input: cur,
        output: pooled,
        params: 2 * c,
        flops: bn_relu(c, cur.plane()) + cur.numel(),
    });
    let k = spec.classes as u64;
    let classifier = k * c + k;
    rows.push(ReportRow {
        name: "head.fc".into(),
        kind: "linear",
        input: pooled,
        output: Dims::new(spec.classes, 1, 1),
        params: classifier,
        flops: 2 * k * c + k,
    });

    let total_params = rows.iter().map(|r| r.params).sum();
    let first = spec.blocks[0];
    Ok(ParamReport {
        config: ReportConfig {
            name: spec.name.clone(),
            family: spec.family,
            depth: depth_label(spec),
            k1: first.k1,
            k2: first.k2,
            position: first.position,
            multiplier: spec.multiplier,
            compression: spec.compression,
            classes: spec.classes,
            input_size: spec.input.size,
        },
        total_flops: rows.iter().map(|r| r.flops).sum(),
        total_params,
        params_millions: total_params as f64 / 1e6,
        classifier_params: classifier,
        rows,
    })
}

/// Same report; FLOPs are always filled in.
pub fn count_flops(spec: &NetworkSpec) -> Result<ParamReport> {
    count_params(spec)
}

impl ParamReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("name,kind,input,output,params,flops\n");
        for r in &self.rows {
            out.push_str(&format!("{},{},{},{},{},{}\n", r.name, r.kind, r.input, r.output, r.params, r.flops));
        }
        out
    }

    pub fn to_table(&self) -> String {
        let c = &self.config;
        let mut out = format!(
            "{} ({:?}, L = {}, k1 = {}, k2 = {}, {:?}, m = {}, theta = {}, classes = {})\n",
            c.name, c.family, c.depth, c.k1, c.k2, c.position, c.multiplier, c.compression, c.classes
        );
        let header = ["name", "kind", "input", "output", "params", "flops"];
        let cells: Vec<[String; 6]> = self
            .rows
            .iter()
            .map(|r| [r.name.clone(), r.kind.to_string(), r.input.to_string(), r.output.to_string(), r.params.to_string(), r.flops.to_string()])
            .collect();
        out.push_str(&render_table(&header, &cells, &[false, false, true, true, true, true]));
        out.push_str(&format!(
            "total params {} ({:.2}M), classifier {}, total flops {}\n",
            self.total_params, self.params_millions, self.classifier_params, self.total_flops
        ));
        out
    }

    /// Rows merged per stage (stem, blockN, transitionN, head).
    pub fn stages(&self) -> Vec<StageRow> {
        let mut out: Vec<StageRow> = Vec::new();
        let mut last_layer = "";
        for r in &self.rows {
            let mut parts = r.name.split('.');
            let stage = parts.next().expect("non-empty name");
            let layer = parts.next().filter(|p| p.starts_with("layer"));
            match out.last_mut() {
                Some(s) if s.stage == stage => {
                    s.output = r.output;
                    s.params += r.params;
                    s.flops += r.flops;
                }
                _ => out.push(StageRow {
                    stage: stage.to_string(),
                    input: r.input,
                    output: r.output,
                    layers: 0,
                    params: r.params,
                    flops: r.flops,
                }),
            }
            if let Some(l) = layer {
                if l != last_layer {
                    out.last_mut().expect("pushed").layers += 1;
                    last_layer = l;
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageRow {
    pub stage: String,
    pub input: Dims,
    pub output: Dims,
    /// Mixed link layers in the stage.
    pub layers: usize,
    pub params: u64,
    pub flops: u64,
}

pub fn render_table<const N: usize>(header: &[&str; N], rows: &[[String; N]], right: &[bool; N]) -> String {
    let mut widths: [usize; N] = header.map(|h| h.chars().count());
    for r in rows {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.chars().count());
        }
    }
    let line = |cells: Vec<&str>| {
        let mut s = String::new();
        for (i, c) in cells.iter().enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            let pad = widths[i] - c.chars().count();
            if right[i] {
                s.push_str(&" ".repeat(pad));
                s.push_str(c);
            } else {
                s.push_str(c);
                if i + 1 < N {
                    s.push_str(&" ".repeat(pad));
                }
            }
        }
        s.push('\n');
        s
    };
    let mut out = line(header.to_vec());
    for r in rows {
        out.push_str(&line(r.iter().map(String::as_str).collect()));
    }
    out
}

// ── comparison against published sizes ───────────────────────────────────

/// Published parameter totals in millions.
pub const REFERENCE_TOTALS: [(&str, f64); 6] = [
    ("mixnet-100", 1.5),
    ("mixnet-250", 29.0),
    ("mixnet-190", 48.5),
    ("mixnet-105", 11.16),
    ("mixnet-121", 21.86),
    ("mixnet-141", 41.07),
];

pub const DEFAULT_TOLERANCE: f64 = 0.10;

pub fn reference_total(preset: &str) -> Option<f64> {
    REFERENCE_TOTALS.iter().find(|(n, _)| *n == preset).map(|&(_, v)| v)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Comparison {
    pub millions: f64,
    pub reference: f64,
    pub rel_error: f64,
    pub pass: bool,
}

/// `pass ⇔ |total − reference| / reference ≤ tolerance`.
pub fn compare_to_reference(total_params: u64, reference_millions: f64, tolerance: f64) -> Result<Comparison> {
    if !(tolerance > 0.0) || !(reference_millions > 0.0) {
        return Err(invalid("tolerance and reference must be positive"));
    }
    let millions = total_params as f64 / 1e6;
    let rel_error = (millions - reference_millions).abs() / reference_millions;
    Ok(Comparison {
        millions,
        reference: reference_millions,
        rel_error,
        pass: rel_error <= tolerance,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridEntry {
    pub preset: String,
    pub total_params: u64,
    pub classifier_params: u64,
    #[serde(flatten)]
    pub comparison: Comparison,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridCell {
    pub multiplier: usize,
    pub compression: f64,
    pub entries: Vec<GridEntry>,
    pub max_rel_error: f64,
    pub all_pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GridReport {
    pub tolerance: f64,
    pub cells: Vec<GridCell>,
    /// Index of the passing cell with the smallest worst-case error.
    pub selected: Option<usize>,
    /// Index of the cell with the smallest worst-case error, pass or not.
    pub best: usize,
}

pub const GRID_MULTIPLIERS: [usize; 3] = [1, 2, 4];
pub const GRID_COMPRESSIONS: [f64; 2] = [0.5, 1.0];

/// Evaluates every `(m, θ)` cell against the published totals of `presets`.
pub fn param_grid(presets: &[&str], multipliers: &[usize], compressions: &[f64], tolerance: f64) -> Result<GridReport> {
    let mut cells = Vec::new();
    for &m in multipliers {
        for &theta in compressions {
            let mut entries = Vec::new();
            for &p in presets {
                let reference = reference_total(p).ok_or_else(|| invalid(format!("no published total for `{p}`")))?;
                let report = count_params(&NetworkSpec::preset(p, m, theta)?)?;
                entries.push(GridEntry {
                    preset: p.to_string(),
                    total_params: report.total_params,
                    classifier_params: report.classifier_params,
                    comparison: compare_to_reference(report.total_params, reference, tolerance)?,
                });
            }
            let max_rel_error = entries.iter().map(|e| e.comparison.rel_error).fold(0.0, f64::max);
            cells.push(GridCell {
                multiplier: m,
                compression: theta,
                all_pass: entries.iter().all(|e| e.comparison.pass),
                entries,
                max_rel_error,
            });
        }
    }
    if cells.is_empty() {
        return Err(invalid("empty grid"));
    }
    let by_error = |a: &(usize, &GridCell), b: &(usize, &GridCell)| a.1.max_rel_error.total_cmp(&b.1.max_rel_error);
    let best = cells.iter().enumerate().min_by(by_error).map(|(i, _)| i).expect("non-empty");
    let selected = cells.iter().enumerate().filter(|(_, c)| c.all_pass).min_by(by_error).map(|(i, _)| i);
    Ok(GridReport { tolerance, cells, selected, best })
}

impl GridReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("grid serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("m,theta,preset,total_params,classifier_params,millions,reference,rel_error,pass\n");
        for c in &self.cells {
            for e in &c.entries {
                out.push_str(&format!(
                    "{},{},{},{},{},{:.4},{},{:.6},{}\n",
                    c.multiplier, c.compression, e.preset, e.total_params, e.classifier_params, e.comparison.millions, e.comparison.reference, e.comparison.rel_error, e.comparison.pass
                ));
            }
        }
        out
    }

    pub fn to_table(&self) -> String {
        let header = ["m", "theta", "preset", "params", "reference", "rel_error", "pass"];
        let rows: Vec<[String; 7]> = self
            .cells
            .iter()
            .flat_map(|c| {
                c.entries.iter().map(move |e| {
                    [
                        c.multiplier.to_string(),
                        c.compression.to_string(),
                        e.preset.clone(),
                        format!("{:.2}M", e.comparison.millions),
                        format!("{}M", e.comparison.reference),
                        format!("{:.4}", e.comparison.rel_error),
                        if e.comparison.pass { "yes" } else { "no" }.to_string(),
                    ]
                })
            })
            .collect();
        let mut out = render_table(&header, &rows, &[true, true, false, true, true, true, false]);
        match self.selected {
            Some(i) => out.push_str(&format!(
                "selected m = {}, theta = {} (max rel error {:.4}, tolerance {})\n",
                self.cells[i].multiplier, self.cells[i].compression, self.cells[i].max_rel_error, self.tolerance
            )),
            None => {
                let b = &self.cells[self.best];
                out.push_str(&format!(
                    "no setting within tolerance {}; best m = {}, theta = {} (max rel error {:.4})\n",
                    self.tolerance, b.multiplier, b.compression, b.max_rel_error
                ));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_conv_count() {
        let spec = BottleneckSpec { in_width: 48, out_width: 12, multiplier: 1 };
        assert_eq!(spec.conv2_shape().numel(), 12 * 12 * 3 * 3);
        assert_eq!(12 * 48 * 3 * 3, 5184);
    }

    #[test]
    fn pointwise_flops_formula() {
        let spec = NetworkSpec::toy(32, 1, 24, 12, Position::Unfixed, 10).unwrap();
        let r = count_params(&spec).unwrap();
        let inner = r.rows.iter().find(|r| r.name == "block1.layer1.inner").unwrap();
        // stem width 24, m = 4: 1×1 conv 24 → 96 on 32×32 plus the rest
        let conv1 = 2 * 96 * 24 * 1024u64;
        assert!(inner.flops > conv1);
        assert_eq!(inner.params, 2 * 24 + 96 * 24 + 2 * 96 + 24 * 96 * 9);
    }

    #[test]
    fn halving_spatial_quarters_conv_flops() {
        let a = count_params(&NetworkSpec::toy(16, 1, 4, 4, Position::Fixed, 4).unwrap()).unwrap();
        let b = count_params(&NetworkSpec::toy(32, 1, 4, 4, Position::Fixed, 4).unwrap()).unwrap();
        for (x, y) in a.rows.iter().zip(&b.rows) {
            if x.kind == "conv" || x.kind == "bottleneck" {
                assert_eq!(4 * x.flops, y.flops, "{}", x.name);
                assert_eq!(x.params, y.params);
            }
        }
    }

    #[test]
    fn depth_labels() {
        let cases = [("mixnet-100", 100), ("mixnet-250", 250), ("mixnet-190", 190), ("mixnet-105", 105), ("mixnet-121", 121), ("mixnet-141", 141)];
        for (name, depth) in cases {
            assert_eq!(depth_label(&NetworkSpec::preset(name, 4, 0.5).unwrap()), depth, "{name}");
        }
    }

    #[test]
    fn totals_are_row_sums() {
        let r = count_params(&NetworkSpec::preset("mixnet-100", 4, 0.5).unwrap()).unwrap();
        assert_eq!(r.total_params, r.rows.iter().map(|r| r.params).sum::<u64>());
        assert_eq!(r.classifier_params, r.rows.last().unwrap().params);
        assert_eq!(r.to_csv(), count_params(&NetworkSpec::preset("mixnet-100", 4, 0.5).unwrap()).unwrap().to_csv());
    }

    #[test]
    fn comparison_arithmetic() {
        let c = compare_to_reference(1_480_000, 1.5, 0.10).unwrap();
        assert!(c.pass);
        assert!((c.rel_error - 0.02 / 1.5).abs() < 1e-12);
        assert!(!compare_to_reference(2_900_000, 1.5, 0.10).unwrap().pass);
        assert!(compare_to_reference(1, 1.5, 0.0).is_err());
    }

    #[test]
    fn stages_cover_rows() {
        let r = count_params(&NetworkSpec::preset("mixnet-105", 4, 0.5).unwrap()).unwrap();
        let st = r.stages();
        let names: Vec<&str> = st.iter().map(|s| s.stage.as_str()).collect();
        assert_eq!(names, ["stem", "block1", "transition1", "block2", "transition2", "block3", "transition3", "block4", "head"]);
        assert_eq!(st.iter().map(|s| s.params).sum::<u64>(), r.total_params);
        let sizes: Vec<usize> = st.iter().filter(|s| s.stage.starts_with("block")).map(|s| s.output.h).collect();
        assert_eq!(sizes, [56, 28, 14, 7]);
        let layers: Vec<usize> = st.iter().filter(|s| s.stage.starts_with("block")).map(|s| s.layers).collect();
        assert_eq!(layers, [6, 12, 20, 12]);
    }
}
