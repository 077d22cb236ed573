//! WebAssembly bindings for the static demo page in `www/`.
//!
//! Each exported function wraps a plain Rust function of the same name in
//! [`demo`], which the native tests exercise directly.

use wasm_bindgen::prelude::*;

pub mod demo;

fn js(e: String) -> JsError {
    JsError::new(&e)
}

/// Simulates one event and returns its log-scaled pad-plane image,
/// row-major, `resolution²` values in [0, 1].
#[wasm_bindgen]
pub fn render_event(
    species: &str,
    b_field: f64,
    noise_points: usize,
    resolution: usize,
    seed: u64,
) -> Result<Vec<f32>, JsError> {
    demo::render_event(species, b_field, noise_points, resolution, seed).map_err(js)
}

/// Scores comma-separated predicted cluster ids against true class ids and
/// returns the report as JSON.
#[wasm_bindgen]
pub fn score_labels(truth: &str, pred: &str) -> Result<String, JsError> {
    demo::score_labels(truth, pred).map_err(js)
}

/// Simulates a two-class dataset, extracts stand-in features and clusters
/// them with k-means; returns a JSON summary.
#[wasm_bindgen]
pub fn cluster_demo(
    protons: usize,
    carbons: usize,
    resolution: usize,
    runs: usize,
    seed: u64,
) -> Result<String, JsError> {
    demo::cluster_demo(protons, carbons, resolution, runs, seed).map_err(js)
}
