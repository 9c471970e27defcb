//! WebAssembly bindings for a one-page demo. Every export returns JSON text
//! (or a number) so the page needs no generated TypeScript glue beyond the
//! default loader. The `*_json` functions are plain Rust and run natively.

use mirror_core::data::PairedSample;
use mirror_core::encoders::{encode_slide, init_params, mean_over_heads, EncoderConfig};
use mirror_core::eval::c_index;
use mirror_core::synth::{generate_cohort, CohortConfig};
use serde::Serialize;
use wasm_bindgen::prelude::*;

#[derive(Debug, Serialize)]
pub struct SlideView {
    pub slide_id: String,
    pub subtype: usize,
    /// `(row, col)` per patch.
    pub coords: Vec<(i32, i32)>,
    pub tumor: Vec<bool>,
    /// Euclidean norm of each patch feature vector.
    pub norms: Vec<f64>,
}

#[derive(Debug, Serialize)]
pub struct AttentionView {
    pub coords: Vec<(i32, i32)>,
    pub tumor: Vec<bool>,
    /// Class-token attention averaged over heads; sums to 1.
    pub weights: Vec<f64>,
    /// Share of attention mass that lands on tumor patches.
    pub tumor_mass: f64,
}

fn demo_cohort(seed: u32, slide_noise: f64) -> Result<(PairedSample, Vec<bool>), String> {
    let cfg = CohortConfig {
        n_samples: 1,
        patches_min: 64,
        patches_max: 144,
        slide_noise,
        seed: u64::from(seed),
        ..CohortConfig::default()
    };
    let (ds, gt) = generate_cohort(&cfg).map_err(|e| e.to_string())?;
    let sample = ds.samples.into_iter().next().expect("one sample requested");
    let mask = gt.tumor_masks.into_iter().next().expect("one mask per sample");
    Ok((sample, mask))
}

pub fn slide_json(seed: u32, slide_noise: f64) -> Result<String, String> {
    let (s, tumor) = demo_cohort(seed, slide_noise)?;
    let norms = (0..s.bag.n_patches())
        .map(|i| s.bag.patch(i).iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt())
        .collect();
    let view = SlideView { slide_id: s.bag.slide_id.clone(), subtype: s.subtype, coords: s.bag.coords, tumor, norms };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

pub fn attention_json(seed: u32, slide_noise: f64, model_seed: u32) -> Result<String, String> {
    let (s, tumor) = demo_cohort(seed, slide_noise)?;
    let (enc, store) = init_params(&EncoderConfig::default(), u64::from(model_seed)).map_err(|e| e.to_string())?;
    let out = encode_slide(&enc, &store, &s.bag.to_tensor()).map_err(|e| e.to_string())?;
    let weights = mean_over_heads(&out.attention);
    let tumor_mass = weights.iter().zip(&tumor).filter(|(_, &t)| t).map(|(w, _)| w).sum();
    let view = AttentionView { coords: s.bag.coords, tumor, weights, tumor_mass };
    serde_json::to_string(&view).map_err(|e| e.to_string())
}

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>, String> {
    text.split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().map_err(|_| format!("bad {what} value `{t}`")))
        .collect()
}

/// Parses comma- or space-separated lists; events are `1`/`0`.
pub fn c_index_text(times: &str, events: &str, risks: &str) -> Result<f64, String> {
    let times: Vec<f64> = parse_list(times, "time")?;
    let events: Vec<u8> = parse_list(events, "event")?;
    let risks: Vec<f64> = parse_list(risks, "risk")?;
    if times.len() != events.len() || times.len() != risks.len() {
        return Err(format!("lengths differ: {} times, {} events, {} risks", times.len(), events.len(), risks.len()));
    }
    if events.iter().any(|&e| e > 1) {
        return Err("events must be 0 or 1".into());
    }
    let events: Vec<bool> = events.into_iter().map(|e| e == 1).collect();
    c_index(&times, &events, &risks).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn synth_slide(seed: u32, slide_noise: f64) -> Result<String, JsError> {
    slide_json(seed, slide_noise).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn slide_attention(seed: u32, slide_noise: f64, model_seed: u32) -> Result<String, JsError> {
    attention_json(seed, slide_noise, model_seed).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn concordance(times: &str, events: &str, risks: &str) -> Result<f64, JsError> {
    c_index_text(times, events, risks).map_err(|e| JsError::new(&e))
}
