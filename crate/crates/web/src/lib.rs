//! WebAssembly bindings for the demo page. Every export takes plain numbers or
//! strings and returns JSON, so the page needs no generated types.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use copytrans::decoding::{brevity_penalty, sbwr_reward, CopyScaling, RerankConfig};
use copytrans::metrics::{copy_rates, rouge_l, rouge_n, RougeScore};
use copytrans::model::build_attention_mask;

/// Largest joint sequence the mask view will draw.
pub const MAX_GRID: usize = 64;

#[derive(Debug, Serialize)]
pub struct MaskGrid {
    pub source_len: usize,
    pub size: usize,
    /// `rows[i][j]` is 1 when position i may attend to position j.
    pub rows: Vec<Vec<u8>>,
}

pub fn mask_grid(source_len: usize, summary_len: usize) -> Result<MaskGrid, String> {
    let size = source_len + summary_len;
    if source_len == 0 || size > MAX_GRID {
        return Err(format!("need 1 ≤ |x| and |x| + |y| ≤ {MAX_GRID}"));
    }
    let mask = build_attention_mask(source_len, size).map_err(|e| e.to_string())?;
    let rows = mask
        .rows()
        .map(|r| r.iter().map(|&b| b as u8).collect())
        .collect();
    Ok(MaskGrid {
        source_len,
        size,
        rows,
    })
}

#[derive(Debug, Serialize)]
pub struct Curves {
    /// Copy rates in [0, 1] at which `bp` is sampled.
    pub copy_rate: Vec<f64>,
    pub bp: Vec<f64>,
    /// Word counts 0..=max_words and the SBWR bonus for each.
    pub words: Vec<usize>,
    pub sbwr: Vec<f64>,
}

pub fn curves(
    c: f64,
    scaling: &str,
    r_sbwr: f64,
    l_pred: f64,
    max_words: usize,
) -> Result<Curves, String> {
    let scaling = match scaling {
        "divide" => CopyScaling::Divide,
        "multiply" => CopyScaling::Multiply,
        "power" => CopyScaling::Power,
        other => return Err(format!("unknown scaling {other:?}")),
    };
    let cfg = RerankConfig {
        c,
        scaling,
        r_sbwr,
        ..RerankConfig::default()
    };
    cfg.validate().map_err(|e| e.to_string())?;
    if max_words > 200 {
        return Err("at most 200 words".into());
    }
    let copy_rate: Vec<f64> = (0..=100).map(|i| i as f64 / 100.0).collect();
    let bp = copy_rate
        .iter()
        .map(|&x| brevity_penalty(cfg.scaled_copy_rate(x)))
        .collect();
    let words: Vec<usize> = (0..=max_words).collect();
    let sbwr = words
        .iter()
        .map(|&w| sbwr_reward(w, l_pred, r_sbwr))
        .collect();
    Ok(Curves {
        copy_rate,
        bp,
        words,
        sbwr,
    })
}

#[derive(Debug, Serialize)]
pub struct Scores {
    /// Percent of summary n-grams (n = 1..4) found in the source.
    pub copy: [Option<f64>; 4],
    pub copy_average: Option<f64>,
    pub rouge1: RougeScore,
    pub rouge2: RougeScore,
    pub rouge_l: RougeScore,
}

pub fn score(summary: &str, reference: &str, source: &str) -> Scores {
    let copy = copy_rates(summary, source);
    Scores {
        copy: copy.rates,
        copy_average: copy.average,
        rouge1: rouge_n(summary, reference, 1),
        rouge2: rouge_n(summary, reference, 2),
        rouge_l: rouge_l(summary, reference),
    }
}

fn to_json<T: Serialize>(value: Result<T, String>) -> Result<String, JsError> {
    let value = value.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&value).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = maskGrid)]
pub fn mask_grid_js(source_len: usize, summary_len: usize) -> Result<String, JsError> {
    to_json(mask_grid(source_len, summary_len))
}

#[wasm_bindgen(js_name = rerankCurves)]
pub fn curves_js(
    c: f64,
    scaling: &str,
    r_sbwr: f64,
    l_pred: f64,
    max_words: usize,
) -> Result<String, JsError> {
    to_json(curves(c, scaling, r_sbwr, l_pred, max_words))
}

#[wasm_bindgen(js_name = scoreSummary)]
pub fn score_js(summary: &str, reference: &str, source: &str) -> Result<String, JsError> {
    to_json(Ok(score(summary, reference, source)))
}
