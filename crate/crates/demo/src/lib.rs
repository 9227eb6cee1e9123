//! WebAssembly bindings behind `www/index.html`.
//!
//! Three operations: turn gate scores into fusion weights, fuse per-specialist
//! next-token logits into one distribution, and render a weight heatmap from
//! the `heatmap.csv` table that `tokenfuse analyze` writes.

use tokenfuse::analysis::{heatmap_svg, SampleMean};
use tokenfuse::data::Domain;
use tokenfuse::gate;
use tokenfuse::numcore::{softmax, Tensor};
use wasm_bindgen::prelude::*;

fn weights_of(scores: &[f64]) -> Result<Vec<f64>, String> {
    let t = Tensor::new(vec![1, scores.len()], scores.to_vec()).map_err(|e| e.to_string())?;
    Ok(gate::fuse_weights(&t).map_err(|e| e.to_string())?.values().to_vec())
}

/// Fused next-token probabilities. `logits` holds one row of `vocab` values
/// per specialist, in the same order as `scores`. Returns the S weights
/// followed by the `vocab` probabilities.
fn fuse_rows(scores: &[f64], logits: &[f64], vocab: usize) -> Result<Vec<f64>, String> {
    let s = scores.len();
    if vocab == 0 || logits.len() != s * vocab {
        return Err(format!("expected {s} rows of {vocab} logits, got {} values", logits.len()));
    }
    let w = gate::fuse_weights(&Tensor::new(vec![1, s], scores.to_vec()).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let rows = logits
        .chunks_exact(vocab)
        .map(|r| Tensor::new(vec![1, vocab], r.to_vec()))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| e.to_string())?;
    let fused = gate::fuse_logits(&w, &rows.iter().collect::<Vec<_>>()).map_err(|e| e.to_string())?;
    let probs = softmax(fused.data()).map_err(|e| e.to_string())?;
    Ok(w.values().iter().copied().chain(probs).collect())
}

/// Parses `sample,domain,<specialist>...` rows; `#` lines are skipped.
fn parse_heatmap(csv: &str) -> Result<(Vec<SampleMean>, Vec<Domain>), String> {
    let mut lines = csv.lines().map(str::trim).filter(|l| !l.is_empty() && !l.starts_with('#'));
    let header = lines.next().ok_or("empty table")?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 3 || cols[0] != "sample" || cols[1] != "domain" {
        return Err("header must be sample,domain,<specialists>".into());
    }
    let specialists = cols[2..]
        .iter()
        .map(|c| c.parse::<Domain>().map_err(|e| e.to_string()))
        .collect::<Result<Vec<_>, _>>()?;
    let mut means = Vec::new();
    for (i, line) in lines.enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        if cells.len() != cols.len() {
            return Err(format!("row {} has {} cells, expected {}", i + 1, cells.len(), cols.len()));
        }
        let bad = |what: &str| format!("row {}: bad {what}", i + 1);
        means.push(SampleMean {
            sample: cells[0].parse().map_err(|_| bad("sample id"))?,
            domain: cells[1].parse().map_err(|_| bad("domain"))?,
            weights: cells[2..]
                .iter()
                .map(|c| c.parse::<f64>().map_err(|_| bad("weight")))
                .collect::<Result<_, _>>()?,
        });
    }
    if means.is_empty() {
        return Err("table has no rows".into());
    }
    Ok((means, specialists))
}

#[wasm_bindgen]
pub fn gate_weights(scores: &[f64]) -> Result<Vec<f64>, JsError> {
    weights_of(scores).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn fused_distribution(scores: &[f64], logits: &[f64], vocab: usize) -> Result<Vec<f64>, JsError> {
    fuse_rows(scores, logits, vocab).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn heatmap(csv: &str) -> Result<String, JsError> {
    let (means, specialists) = parse_heatmap(csv).map_err(|e| JsError::new(&e))?;
    Ok(heatmap_svg(&means, &specialists))
}
