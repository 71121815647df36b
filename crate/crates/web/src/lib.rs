//! WebAssembly bindings behind `web/index.html`.
//!
//! Every export wraps a plain Rust function that native tests call directly.

use std::sync::OnceLock;

use augdiff::augment::imageio::{from_unit, to_unit};
use augdiff::augment::phantom_pixels;
use augdiff::diffusion::{forward_noise, NoiseSchedule, ScheduleConfig};
use augdiff::lora::{account, parse_layer_table, Accounting};
use augdiff::model::{DiffusionModel, ModelConfig};
use augdiff::prompt::{ClassLabel, PromptSpec, PromptTemplate};
use augdiff::rng::RngStream;
use augdiff::text::Vocabulary;
use augdiff::unet::AdapterTarget;
use augdiff::Tensor;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const REFERENCE_DIMS: &str = include_str!("../../core/fixtures/sdv1-dims.csv");

/// Largest phantom side the page may request.
pub const MAX_SIDE: usize = 256;

fn label(name: &str) -> Result<ClassLabel, String> {
    name.parse().map_err(|e: augdiff::Error| e.to_string())
}

fn check_side(side: usize) -> Result<(), String> {
    if (8..=MAX_SIDE).contains(&side) {
        Ok(())
    } else {
        Err(format!("side {side} outside 8..={MAX_SIDE}"))
    }
}

/// Grayscale phantom of class `class`, row-major.
pub fn phantom(class: &str, side: usize, seed: u64) -> Result<Vec<u8>, String> {
    check_side(side)?;
    let mut rng = RngStream::new(seed, &format!("web/phantom/{class}"));
    Ok(phantom_pixels(label(class)?, side, &mut rng))
}

pub fn schedule() -> &'static NoiseSchedule {
    static SCHEDULE: OnceLock<NoiseSchedule> = OnceLock::new();
    SCHEDULE.get_or_init(|| NoiseSchedule::linear(&ScheduleConfig::default()).expect("default schedule"))
}

/// The phantom after `t` forward-noising steps, with noise drawn from `seed`.
pub fn noised(class: &str, side: usize, seed: u64, t: usize) -> Result<Vec<u8>, String> {
    let pixels = phantom(class, side, seed)?;
    let shape = [1, 1, side, side];
    let z0 = Tensor::new(&shape, to_unit(&pixels)).map_err(|e| e.to_string())?;
    let eps = RngStream::new(seed, "web/noise").normal_vec(side * side, 0.0, 1.0);
    let eps = Tensor::new(&shape, eps).map_err(|e| e.to_string())?;
    let zt = forward_noise(&z0, &[t], &eps, schedule()).map_err(|e| e.to_string())?;
    Ok(from_unit(zt.data()))
}

/// Gray to opaque RGBA for `ImageData`.
pub fn to_rgba(gray: &[u8]) -> Vec<u8> {
    gray.iter().flat_map(|&g| [g, g, g, 255]).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Exploration {
    pub prompt: String,
    pub token_ids: Vec<usize>,
    pub unknown_tokens: usize,
    pub rank: usize,
    pub reference: Accounting,
    pub reference_layers: usize,
    pub demo_model: Accounting,
    pub demo_layers: usize,
}

fn reference_table() -> &'static (Vec<AdapterTarget>, usize) {
    static TABLE: OnceLock<(Vec<AdapterTarget>, usize)> = OnceLock::new();
    TABLE.get_or_init(|| {
        let t = parse_layer_table(REFERENCE_DIMS.as_bytes(), "sdv1-dims.csv").expect("bundled layer table");
        (t.targets, t.total)
    })
}

fn demo_table() -> &'static (Vec<AdapterTarget>, usize) {
    static TABLE: OnceLock<(Vec<AdapterTarget>, usize)> = OnceLock::new();
    TABLE.get_or_init(|| {
        let model = DiffusionModel::new(ModelConfig::default(), 0).expect("default model");
        (model.unet.enumerate_layers(), model.unet_param_count())
    })
}

/// Renders the prompt for `adjective` and `class` and counts the adapter
/// parameters a rank-`rank` attachment would train.
pub fn explore(adjective: &str, class: &str, rank: usize) -> Result<Exploration, String> {
    let spec = PromptSpec::new(adjective, label(class)?).map_err(|e| e.to_string())?;
    let template = PromptTemplate::default();
    let prompt = template.render(&spec);
    let config = ModelConfig::default();
    let tokens = Vocabulary::from_template(&template).tokenize(&prompt, config.text.max_len);
    let real = tokens.real_len();
    let (ref_targets, ref_total) = reference_table();
    let (demo_targets, demo_total) = demo_table();
    Ok(Exploration {
        token_ids: tokens.ids[..real].to_vec(),
        unknown_tokens: tokens.unknown_count(),
        prompt,
        rank,
        reference: account(ref_targets, rank, *ref_total).map_err(|e| e.to_string())?,
        reference_layers: ref_targets.len(),
        demo_model: account(demo_targets, rank, *demo_total).map_err(|e| e.to_string())?,
        demo_layers: demo_targets.len(),
    })
}

#[wasm_bindgen]
pub fn phantom_rgba(class: &str, side: usize, seed: u32) -> Result<Vec<u8>, JsError> {
    phantom(class, side, seed.into()).map(|g| to_rgba(&g)).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn noised_rgba(class: &str, side: usize, seed: u32, t: usize) -> Result<Vec<u8>, JsError> {
    noised(class, side, seed.into(), t).map(|g| to_rgba(&g)).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn timesteps() -> usize {
    schedule().len()
}

/// `√ᾱ_t`, the weight left on the clean image.
#[wasm_bindgen]
pub fn signal_weight(t: usize) -> f64 {
    schedule().alpha_bars().get(t).map_or(f64::NAN, |ab| ab.sqrt())
}

#[wasm_bindgen]
pub fn explore_json(adjective: &str, class: &str, rank: usize) -> Result<String, JsError> {
    let e = explore(adjective, class, rank).map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&e).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen]
pub fn adjectives() -> Vec<String> {
    augdiff::prompt::ADJECTIVES.iter().map(|s| (*s).to_owned()).collect()
}
