//! WebAssembly bindings for the browser demo. Each export returns a JSON
//! string; the plain functions below them are usable (and tested) natively.

use mixlink::analysis::{compare_to_reference, count_params, reference_total, DEFAULT_TOLERANCE};
use mixlink::blocks::{NetworkSpec, Position};
use mixlink::topology::MixedLinkConfig;
use mixlink::verify::{self, Suite, VerifyConfig};
use serde_json::{json, Value};
use wasm_bindgen::prelude::*;

fn position(fixed: bool) -> Position {
    if fixed {
        Position::Fixed
    } else {
        Position::Unfixed
    }
}

/// Channel layout of one mixed link block: for every layer, the window the
/// inner link adds into and the channels the outer link appends, plus how
/// often each final channel was written by an inner link.
pub fn layout(c0: usize, k1: usize, k2: usize, layers: usize, fixed: bool) -> Result<Value, String> {
    if layers == 0 || layers > 64 || c0 > 1024 {
        return Err("layers must be in 1..=64 and the input width at most 1024".into());
    }
    let cfg = MixedLinkConfig::new(k1, k2, position(fixed)).map_err(|e| e.to_string())?;
    let final_width = cfg.width_after(c0, layers);
    let mut writes = vec![0usize; final_width];
    let mut steps = Vec::with_capacity(layers);
    let mut width = c0;
    for l in 1..=layers {
        let offset = if k1 > 0 { cfg.inner_offset(width).map_err(|e| e.to_string())? } else { 0 };
        for w in &mut writes[offset..offset + k1] {
            *w += 1;
        }
        steps.push(json!({
            "layer": l,
            "width_in": width,
            "inner": [offset, offset + k1],
            "outer": [width, width + k2],
            "width_out": width + k2,
        }));
        width += k2;
    }
    Ok(json!({ "c0": c0, "k1": k1, "k2": k2, "fixed": fixed, "width": final_width, "steps": steps, "writes": writes }))
}

/// Stage summary and published-total comparison of a preset.
pub fn preset_report(preset: &str, multiplier: usize, compression: f64) -> Result<Value, String> {
    let spec = NetworkSpec::preset(preset, multiplier, compression).map_err(|e| e.to_string())?;
    let report = count_params(&spec).map_err(|e| e.to_string())?;
    let reference = reference_total(preset)
        .map(|r| compare_to_reference(report.total_params, r, DEFAULT_TOLERANCE))
        .transpose()
        .map_err(|e| e.to_string())?;
    Ok(json!({
        "preset": preset,
        "depth": report.config.depth,
        "multiplier": multiplier,
        "compression": compression,
        "total_params": report.total_params,
        "total_flops": report.total_flops,
        "reference": reference,
        "stages": report.stages(),
    }))
}

/// Runs one topology verification suite with a small trial budget.
pub fn verify_suite(suite: &str, trials: usize, seed: u64) -> Result<Value, String> {
    let suite: Suite = suite.parse().map_err(|e: mixlink::Error| e.to_string())?;
    if trials == 0 || trials > 200 {
        return Err("trials must be in 1..=200".into());
    }
    let cfg = VerifyConfig {
        suites: vec![suite],
        trials,
        seed,
        ..VerifyConfig::default()
    };
    let report = verify::run(&cfg).map_err(|e| e.to_string())?;
    serde_json::to_value(&report.suites[0]).map_err(|e| e.to_string())
}

fn export(v: Result<Value, String>) -> Result<String, JsError> {
    v.map(|v| v.to_string()).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn channel_layout(c0: usize, k1: usize, k2: usize, layers: usize, fixed: bool) -> Result<String, JsError> {
    export(layout(c0, k1, k2, layers, fixed))
}

#[wasm_bindgen]
pub fn param_report(preset: &str, multiplier: usize, compression: f64) -> Result<String, JsError> {
    export(preset_report(preset, multiplier, compression))
}

#[wasm_bindgen]
pub fn verify_topology(suite: &str, trials: usize, seed: u32) -> Result<String, JsError> {
    export(verify_suite(suite, trials, seed as u64))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixed_layout_rewrites_the_leading_channels() {
        let v = layout(4, 2, 3, 3, true).unwrap();
        assert_eq!(v["width"], 13);
        assert_eq!(v["steps"][2]["inner"], json!([0, 2]));
        assert_eq!(v["writes"][0], 3);
        assert_eq!(v["writes"][2], 0);
    }

    #[test]
    fn unfixed_layout_follows_the_newest_channels() {
        let v = layout(4, 2, 3, 3, false).unwrap();
        // Widths 4, 7, 10: windows [2,4), [5,7), [8,10).
        let windows: Vec<Value> = (0..3).map(|l| v["steps"][l]["inner"].clone()).collect();
        assert_eq!(windows, [json!([2, 4]), json!([5, 7]), json!([8, 10])]);
        assert_eq!(v["steps"][1]["outer"], json!([7, 10]));
        let writes: Vec<u64> = v["writes"].as_array().unwrap().iter().map(|w| w.as_u64().unwrap()).collect();
        assert_eq!(writes.iter().sum::<u64>(), 6);
        assert!(writes.iter().all(|&w| w <= 1));
    }

    #[test]
    fn layout_rejects_oversized_inner_link() {
        assert!(layout(1, 2, 0, 2, true).is_err());
        assert!(layout(4, 0, 0, 2, true).is_err());
        assert!(layout(4, 1, 1, 0, true).is_err());
    }

    #[test]
    fn preset_report_compares_to_published_total() {
        let v = preset_report("mixnet-105", 4, 0.5).unwrap();
        assert_eq!(v["depth"], 105);
        assert_eq!(v["reference"]["pass"], true);
        assert_eq!(v["stages"].as_array().unwrap().len(), 9);
        assert!(preset_report("mixnet-7", 4, 0.5).is_err());
    }

    #[test]
    fn verify_suites_pass() {
        for suite in ["unrolling", "reduction", "width", "witness"] {
            let v = verify_suite(suite, 3, 1).unwrap();
            assert_eq!(v["pass"], true, "{suite}: {v}");
        }
        assert!(verify_suite("nope", 3, 1).is_err());
    }
}
