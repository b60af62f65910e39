//! WebAssembly bindings for the static demo page in `www/`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use d3fnet::attention::{attention_maps, HeadProjections};
use d3fnet::rf::{analyze, shade};
use d3fnet::train::synth_tile;
use d3fnet::Tensor;

fn js_err(e: d3fnet::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Coverage map for comma-separated dilation rates. Returns a JSON string
/// `{rf_size, holes, coverage_fraction, uniformity, side, shades}` where
/// `shades` holds one gray level per cell, row-major.
#[wasm_bindgen]
pub fn rf_coverage(rates: &str) -> Result<String, JsError> {
    let rates = rates
        .split(',')
        .map(|r| r.trim().parse::<usize>())
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| JsError::new(&format!("rates: {e}")))?;
    let (map, report) = analyze(&rates).map_err(js_err)?;
    let value = serde_json::json!({
        "rates": report.rates,
        "rf_size": report.rf_size,
        "holes": report.holes,
        "coverage_fraction": report.coverage_fraction,
        "uniformity": report.uniformity,
        "side": map.side(),
        "shades": shade(&map),
    });
    Ok(value.to_string())
}

fn gaussian_tokens(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Vec<f64> {
    (0..n * d)
        .map(|_| {
            // Box-Muller
            let u: f64 = rng.random_range(f64::EPSILON..1.0);
            let v: f64 = rng.random();
            (-2.0 * u.ln()).sqrt() * (std::f64::consts::TAU * v).cos()
        })
        .collect()
}

fn tensor(n: usize, d: usize, data: Vec<f64>) -> Tensor<f64> {
    Tensor::from_vec(&[1, n, d], data).expect("sizes agree")
}

/// Attention maps for `n` random tokens whose queries and keys share a
/// common-mode component of relative strength `noise`. The second map sees
/// only that component. Returns `3·n·n` values: A1, A2 and A1 − λ·A2.
#[wasm_bindgen]
pub fn diff_attention_maps(n: usize, lambda: f64, noise: f64, seed: u64) -> Result<Vec<f64>, JsError> {
    if n == 0 || n > 64 {
        return Err(JsError::new("token count must be in 1..=64"));
    }
    if !(0.0..=1.0).contains(&lambda) {
        return Err(JsError::new("lambda must be in [0, 1]"));
    }
    let d = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let common_q = gaussian_tokens(&mut rng, n, d);
    let common_k = gaussian_tokens(&mut rng, n, d);
    let signal_q = gaussian_tokens(&mut rng, n, d);
    let signal_k = gaussian_tokens(&mut rng, n, d);
    let mix = |s: &[f64], c: &[f64]| -> Vec<f64> { s.iter().zip(c).map(|(s, c)| s + noise * c).collect() };
    let heads = HeadProjections {
        q1: tensor(n, d, mix(&signal_q, &common_q)),
        k1: tensor(n, d, mix(&signal_k, &common_k)),
        q2: tensor(n, d, common_q.iter().map(|c| noise * c).collect()),
        k2: tensor(n, d, common_k.iter().map(|c| noise * c).collect()),
        v: tensor(n, d, vec![0.0; n * d]),
    };
    let (a1, a2) = attention_maps(&heads).map_err(js_err)?;
    let mut out = Vec::with_capacity(3 * n * n);
    out.extend_from_slice(a1.data());
    out.extend_from_slice(a2.data());
    out.extend(a1.data().iter().zip(a2.data()).map(|(x, y)| x - lambda * y));
    Ok(out)
}

/// A synthetic tile as RGBA pixels, image on the left and mask on the
/// right (`2·size × size`).
#[wasm_bindgen]
pub fn synth_preview(seed: u64, index: usize, size: usize) -> Result<Vec<u8>, JsError> {
    let tile = synth_tile(seed, index, size).map_err(js_err)?;
    let mut rgba = Vec::with_capacity(size * size * 8);
    for y in 0..size {
        for x in 0..size {
            let i = y * size + x;
            rgba.extend_from_slice(&tile.rgb[i * 3..i * 3 + 3]);
            rgba.push(255);
        }
        for x in 0..size {
            let m = tile.mask[y * size + x];
            rgba.extend_from_slice(&[m, m, m, 255]);
        }
    }
    Ok(rgba)
}
