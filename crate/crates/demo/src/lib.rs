//! wasm-bindgen surface for `www/index.html`. The plain functions do the work
//! and are tested natively; the `#[wasm_bindgen]` wrappers only convert errors.

use navseg::blocks::shape_trace;
use navseg::costmodel::{block_param_count, cost_reduction_ratio, network_cost_report, separable_conv_cost, standard_conv_cost};
use navseg::dataio::{synth_sample, SynthConfig};
use navseg::{NetworkSpec, Shape, Variant};
use serde_json::json;
use wasm_bindgen::prelude::*;

pub fn conv_costs(k: u32, c_in: u32, c_out: u32, h: u32, w: u32) -> navseg::Result<String> {
    let (k, ci, co, h, w) = (k as u64, c_in as u64, c_out as u64, h as u64, w as u64);
    let standard = standard_conv_cost(k, ci, co, h, w)?;
    let separable = separable_conv_cost(k, ci, co, h, w)?;
    Ok(json!({
        "standard": standard,
        "separable": separable,
        "ratio": cost_reduction_ratio(k, co),
        "measured_ratio": separable as f64 / standard as f64,
    })
    .to_string())
}

/// Per-block rows for `variant` at a `w × h` RGB input.
pub fn architecture(variant: &str, w: u32, h: u32) -> navseg::Result<String> {
    let variant: Variant = variant.parse()?;
    let spec = NetworkSpec::new(variant);
    let input = Shape::new(1, 3, h as usize, w as usize);
    let d = spec.required_divisor();
    if !input.h.is_multiple_of(d) || !input.w.is_multiple_of(d) {
        return Err(navseg::Error::InvalidArgument(format!("width and height must be multiples of {d}")));
    }
    let trace = shape_trace(&spec, input)?;
    let report = network_cost_report(&spec, input)?;
    let rows: Vec<_> = trace
        .iter()
        .zip(&spec.blocks)
        .zip(&report.per_block)
        .map(|((row, b), cost)| {
            json!({
                "block": row.block,
                "kind": row.kind.name(),
                "input": format!("{}×{}×{}", row.input.w, row.input.h, row.input.c),
                "output": format!("{}×{}×{}", row.output.w, row.output.h, row.output.c),
                "params": block_param_count(b),
                "macs": cost.macs,
            })
        })
        .collect();
    Ok(json!({ "rows": rows, "params": report.totals.params, "macs": report.totals.macs }).to_string())
}

/// RGBA bytes of scene `index`; navigable pixels are tinted when `overlay` is set.
pub fn scene_rgba(seed: u32, index: u32, w: u32, h: u32, overlay: bool) -> navseg::Result<Vec<u8>> {
    let (w, h) = (w as usize, h as usize);
    let s = synth_sample(seed as u64, index as u64, h, w, &SynthConfig::default())?;
    let plane = w * h;
    let img = s.image.data();
    let mut out = Vec::with_capacity(4 * plane);
    for i in 0..plane {
        let mut px = [img[i], img[plane + i], img[2 * plane + i]];
        if overlay && s.label.data[i] == 1 {
            px = [px[0] * 0.5, px[1] * 0.5 + 0.5, px[2] * 0.5];
        }
        out.extend(px.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
        out.push(255);
    }
    Ok(out)
}

fn js_err(e: navseg::Error) -> JsValue {
    JsValue::from_str(&e.to_string())
}

#[wasm_bindgen(js_name = convCosts)]
pub fn conv_costs_js(k: u32, c_in: u32, c_out: u32, h: u32, w: u32) -> Result<String, JsValue> {
    conv_costs(k, c_in, c_out, h, w).map_err(js_err)
}

#[wasm_bindgen(js_name = architecture)]
pub fn architecture_js(variant: &str, w: u32, h: u32) -> Result<String, JsValue> {
    architecture(variant, w, h).map_err(js_err)
}

#[wasm_bindgen(js_name = sceneRgba)]
pub fn scene_rgba_js(seed: u32, index: u32, w: u32, h: u32, overlay: bool) -> Result<Vec<u8>, JsValue> {
    scene_rgba(seed, index, w, h, overlay).map_err(js_err)
}
