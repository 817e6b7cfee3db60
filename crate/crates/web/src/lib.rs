//! wasm-bindgen bindings behind `www/index.html`. Every export returns JSON
//! text; the plain functions in [`demo`] do the work and are what the
//! native tests call.

use wasm_bindgen::prelude::*;

pub mod demo;

fn js(r: Result<String, String>) -> Result<String, JsValue> {
    r.map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen]
pub fn preset_names() -> String {
    demo::preset_names()
}

/// Per-visit status counts of one simulated trial.
#[wasm_bindgen]
pub fn trial_profile(preset: &str, replicate: u32) -> Result<String, JsValue> {
    js(demo::trial_profile(preset, u64::from(replicate)))
}

/// Relative variance increase over the share of IE patients that are
/// missing, holding `n`, the IE share and both response rates fixed.
#[wasm_bindgen]
pub fn variance_inflation_curve(n: f64, ie_share: f64, p1: f64, p2: f64, points: u32) -> Result<String, JsValue> {
    js(demo::variance_inflation_curve(n, ie_share, p1, p2, points as usize))
}

/// A few replicates of a preset through every imputation model.
#[wasm_bindgen]
pub fn mini_study(preset: &str, sims: u32, imputations: u32) -> Result<String, JsValue> {
    js(demo::mini_study(preset, sims as usize, imputations as usize))
}
