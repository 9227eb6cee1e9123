//! Gate-weight analyses over teacher-forced response tokens: per-token
//! records, domain-average weight matrices, per-sample heatmaps and
//! token-level listings.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{write_atomic, Domain, Tokenizer, TrainingExample};
use crate::error::{Error, Result};
use crate::fuser::FusedModel;

/// Fusion weights at one response position of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenWeightRecord {
    pub sample: usize,
    pub domain: Domain,
    /// Index within the response span (0 = first response token).
    pub position: usize,
    /// The target token predicted at this position.
    pub token: usize,
    pub weights: Vec<f64>,
}

/// One record per response token of every example; `sample` is the index
/// into `examples`.
pub fn record_weights(model: &FusedModel, examples: &[TrainingExample]) -> Result<Vec<TokenWeightRecord>> {
    let mut out = Vec::new();
    for (sample, ex) in examples.iter().enumerate() {
        let wrapped = model.wrap(ex)?;
        let fused = model.fused_forward(&wrapped, false)?;
        for (position, (&token, w)) in wrapped.response_tokens().iter().zip(fused.weights.rows()).enumerate() {
            out.push(TokenWeightRecord {
                sample,
                domain: ex.domain,
                position,
                token,
                weights: w.to_vec(),
            });
        }
    }
    Ok(out)
}

/// Mean weight per (specialist, data domain) over response tokens.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeightMatrix {
    /// Domain tag of each specialist (row).
    pub specialists: Vec<Domain>,
    /// Data domain of each column.
    pub domains: Vec<Domain>,
    /// `values[row][col]`
    pub values: Vec<Vec<f64>>,
    /// Tokens averaged per column.
    pub counts: Vec<usize>,
}

impl WeightMatrix {
    pub fn column(&self, col: usize) -> Vec<f64> {
        self.values.iter().map(|r| r[col]).collect()
    }

    /// Per column: does the specialist of that domain hold the strict
    /// maximum? `None` when no specialist carries the column's domain.
    pub fn diagonal_dominance(&self) -> Vec<(Domain, Option<bool>)> {
        self.domains
            .iter()
            .enumerate()
            .map(|(c, &d)| {
                let own = self.specialists.iter().position(|&s| s == d);
                let dominant = own.map(|o| {
                    let col = self.column(c);
                    col.iter().enumerate().all(|(r, &v)| r == o || v < col[o])
                });
                (d, dominant)
            })
            .collect()
    }

    pub fn all_diagonal_dominant(&self) -> bool {
        self.diagonal_dominance().iter().all(|(_, d)| *d == Some(true))
    }

    /// Comma-separated table: header `specialist,<domain>...`, one row per
    /// specialist.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("specialist");
        for d in &self.domains {
            write!(s, ",{d}").unwrap();
        }
        s.push('\n');
        for (spec, row) in self.specialists.iter().zip(&self.values) {
            s.push_str(spec.as_str());
            for v in row {
                write!(s, ",{v}").unwrap();
            }
            s.push('\n');
        }
        s
    }
}

/// Column-wise means for the requested `domains`; each must have records.
pub fn average_weights(records: &[TokenWeightRecord], specialists: &[Domain], domains: &[Domain]) -> Result<WeightMatrix> {
    let s = specialists.len();
    let mut values = vec![vec![0.0; domains.len()]; s];
    let mut counts = vec![0usize; domains.len()];
    for r in records {
        if r.weights.len() != s {
            return Err(Error::Analysis(format!("record has {} weights for {s} specialists", r.weights.len())));
        }
        if let Some(c) = domains.iter().position(|&d| d == r.domain) {
            counts[c] += 1;
            for (row, w) in values.iter_mut().zip(&r.weights) {
                row[c] += w;
            }
        }
    }
    for (c, &n) in counts.iter().enumerate() {
        if n == 0 {
            return Err(Error::Analysis(format!("no records for the {} domain", domains[c])));
        }
        for row in values.iter_mut() {
            row[c] /= n as f64;
        }
    }
    Ok(WeightMatrix {
        specialists: specialists.to_vec(),
        domains: domains.to_vec(),
        values,
        counts,
    })
}

/// Mean weights of one sample over its response tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleMean {
    pub sample: usize,
    pub domain: Domain,
    pub weights: Vec<f64>,
}

/// Per-sample means ordered by (domain, sample id).
pub fn sample_means(records: &[TokenWeightRecord]) -> Vec<SampleMean> {
    let mut acc: BTreeMap<(usize, usize), (Domain, Vec<f64>, usize)> = BTreeMap::new();
    for r in records {
        let e = acc
            .entry((r.domain.index(), r.sample))
            .or_insert_with(|| (r.domain, vec![0.0; r.weights.len()], 0));
        e.1.iter_mut().zip(&r.weights).for_each(|(a, w)| *a += w);
        e.2 += 1;
    }
    acc.into_iter()
        .map(|((_, sample), (domain, sums, n))| SampleMean {
            sample,
            domain,
            weights: sums.into_iter().map(|s| s / n as f64).collect(),
        })
        .collect()
}

const CELL_W: usize = 4;
const CELL_H: usize = 40;
const LABEL_W: usize = 60;
const TOP: usize = 20;

/// Writes the per-sample mean weights as an S x N heatmap (`svg_path`, one
/// column per sample, one row per specialist) and as a table (`csv_path`,
/// columns `sample,domain,<specialist>...`). Output bytes depend only on
/// `records`.
pub fn export_heatmap(records: &[TokenWeightRecord], specialists: &[Domain], svg_path: &Path, csv_path: &Path) -> Result<()> {
    let means = sample_means(records);
    if means.is_empty() {
        return Err(Error::Analysis("no samples to plot".into()));
    }
    write_atomic(csv_path, heatmap_csv(&means, specialists).as_bytes())?;
    write_atomic(svg_path, heatmap_svg(&means, specialists).as_bytes())
}

pub fn heatmap_csv(means: &[SampleMean], specialists: &[Domain]) -> String {
    let mut s = String::from("sample,domain");
    for d in specialists {
        write!(s, ",{d}").unwrap();
    }
    s.push('\n');
    for m in means {
        write!(s, "{},{}", m.sample, m.domain).unwrap();
        for w in &m.weights {
            write!(s, ",{w}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// White (0) to dark blue (1).
fn shade(w: f64) -> (u8, u8, u8) {
    let w = w.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * w).round() as u8;
    (lerp(255.0, 8.0), lerp(255.0, 48.0), lerp(255.0, 107.0))
}

pub fn heatmap_svg(means: &[SampleMean], specialists: &[Domain]) -> String {
    let n = means.len();
    let width = LABEL_W + n * CELL_W + 10;
    let height = TOP + specialists.len() * CELL_H + 30;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}" shape-rendering="crispEdges">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#).unwrap();
    for (r, d) in specialists.iter().enumerate() {
        let y = TOP + r * CELL_H + CELL_H / 2 + 4;
        writeln!(s, r#"<text x="4" y="{y}" font-family="monospace" font-size="12">{d}</text>"#).unwrap();
    }
    for (c, m) in means.iter().enumerate() {
        let x = LABEL_W + c * CELL_W;
        for (r, &w) in m.weights.iter().enumerate() {
            let (red, green, blue) = shade(w);
            let y = TOP + r * CELL_H;
            writeln!(
                s,
                r#"<rect x="{x}" y="{y}" width="{CELL_W}" height="{CELL_H}" fill="rgb({red},{green},{blue})"><title>sample {} ({}): {w:.4}</title></rect>"#,
                m.sample, m.domain
            )
            .unwrap();
        }
    }
    // domain group labels under the first column of each run
    let base = TOP + specialists.len() * CELL_H + 16;
    let mut prev = None;
    for (c, m) in means.iter().enumerate() {
        if prev != Some(m.domain) {
            let x = LABEL_W + c * CELL_W;
            writeln!(s, r#"<text x="{x}" y="{base}" font-family="monospace" font-size="11">{}</text>"#, m.domain).unwrap();
            prev = Some(m.domain);
        }
    }
    s.push_str("</svg>\n");
    s
}

/// One response token with its fusion weights.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TokenCase {
    pub token: usize,
    pub text: String,
    pub weights: Vec<f64>,
}

pub fn token_case(model: &FusedModel, ex: &TrainingExample) -> Result<Vec<TokenCase>> {
    let records = record_weights(model, std::slice::from_ref(ex))?;
    Ok(records
        .into_iter()
        .map(|r| TokenCase {
            token: r.token,
            text: Tokenizer.display(r.token),
            weights: r.weights,
        })
        .collect())
}

/// Plain-text listing: one line per token, quoted token then its weights.
pub fn render_token_case(cases: &[TokenCase], specialists: &[Domain]) -> String {
    let mut s = format!("{:<8}", "token");
    for d in specialists {
        write!(s, " {:>6}", d.as_str()).unwrap();
    }
    s.push('\n');
    for c in cases {
        write!(s, "{:<8}", format!("'{}'", c.text)).unwrap();
        for w in &c.weights {
            write!(s, " {w:>6.3}").unwrap();
        }
        s.push('\n');
    }
    s
}

/// Coarse token classes for aggregating weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenClass {
    /// Digits and arithmetic symbols: `0-9 + - * / = ( ) .`
    Numeric,
    Alphabetic,
    Other,
}

impl TokenClass {
    pub fn of(token: usize) -> TokenClass {
        match Tokenizer.token_str(token) {
            Some(c) if c.is_ascii_digit() || "+-*/=().".contains(c) => TokenClass::Numeric,
            Some(c) if c.is_ascii_alphabetic() => TokenClass::Alphabetic,
            _ => TokenClass::Other,
        }
    }
}

/// Mean weight of `specialist` per token class, with token counts.
pub fn class_mean_weights(records: &[TokenWeightRecord], specialist: usize) -> BTreeMap<TokenClass, (f64, usize)> {
    let mut acc: BTreeMap<TokenClass, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = acc.entry(TokenClass::of(r.token)).or_default();
        e.0 += r.weights[specialist];
        e.1 += 1;
    }
    acc.values_mut().for_each(|(s, n)| *s /= *n as f64);
    acc
}
