//! Parameter forensics: first-order Taylor importance, parameter-erasure
//! sweeps, importance heatmaps and importance-decile drift.
//!
//! Importance is accumulated per sentence (batch of one) because the
//! absolute value sits inside the sum over examples; batching would let
//! signs cancel before the |.| is taken.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::container::Container;
use crate::corpusgen::encode_batches;
use crate::error::{Error, Result};
use crate::metrics;
use crate::nanoformer::{Model, ParamTag};

/// Per-parameter nonnegative scores aligned element-wise with the model.
#[derive(Debug, Clone)]
pub struct ImportanceMap {
    pub scores: BTreeMap<ParamTag, Vec<f64>>,
    /// Number of training examples averaged over.
    pub examples: usize,
    /// Which domain's data produced the map ("G" or "I").
    pub domain: String,
}

impl ImportanceMap {
    pub fn get(&self, tag: &ParamTag) -> Result<&[f64]> {
        self.scores
            .get(tag)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::config(format!("importance map does not cover '{tag}'")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({
            "format": "importance",
            "domain": self.domain,
            "examples": self.examples,
        });
        let mut c = Container::new(meta);
        for (tag, s) in &self.scores {
            c.insert("importance", tag.to_string(), vec![s.len()], s.clone());
        }
        c.save(path)
    }

    pub fn load(path: &Path) -> Result<ImportanceMap> {
        let c = Container::load(path)?;
        if c.meta.get("format").and_then(|v| v.as_str()) != Some("importance") {
            return Err(Error::Format("not an importance container".into()));
        }
        let domain = c
            .meta
            .get("domain")
            .and_then(|v| v.as_str())
            .unwrap_or("?")
            .to_string();
        let examples = c.meta.get("examples").and_then(|v| v.as_u64()).unwrap_or(0) as usize;
        let mut scores = BTreeMap::new();
        for (key, entry) in c.section("importance")? {
            scores.insert(key.parse::<ParamTag>()?, entry.data.clone());
        }
        Ok(ImportanceMap {
            scores,
            examples,
            domain,
        })
    }
}

/// First-order Taylor importance |dL/dw * w|, averaged over up to `t_limit`
/// training sentences. Per-sentence loss is the mean cross-entropy of that
/// sentence (teacher forcing); dropout stays off.
pub fn accumulate_importance(
    model: &Model,
    sentences: &[(Vec<u32>, Vec<u32>)],
    t_limit: usize,
    domain: &str,
) -> Result<ImportanceMap> {
    if t_limit < 1 {
        return Err(Error::config("t_limit must be at least 1"));
    }
    if sentences.is_empty() {
        return Err(Error::config("importance needs at least one sentence"));
    }
    let vocab = (model.config().src_vocab, model.config().tgt_vocab);
    let mut scores: BTreeMap<ParamTag, Vec<f64>> = model
        .params()
        .map(|(t, p)| (t.clone(), vec![0.0; p.numel()]))
        .collect();
    let mut work = model.clone();
    let used = sentences.len().min(t_limit);
    for (idx, pair) in sentences.iter().take(used).enumerate() {
        let batch = encode_batches(std::slice::from_ref(pair), 1, vocab)?.remove(0);
        work.zero_grads();
        let lg = work.loss_graph(&batch, None)?;
        let mut graph = lg.graph;
        graph.backward(lg.loss)?;
        work.absorb_grads(&graph, &lg.bound);
        for (tag, score) in scores.iter_mut() {
            let p = work.param(tag)?;
            let grad = p
                .grad()
                .ok_or_else(|| Error::Numeric(format!("no gradient for '{tag}' at sentence {idx}")))?;
            for ((s, &g), &w) in score.iter_mut().zip(grad).zip(p.data()) {
                let c = g * w;
                if !c.is_finite() {
                    return Err(Error::Numeric(format!(
                        "non-finite gradient contribution for '{tag}' at sentence {idx}"
                    )));
                }
                *s += c.abs();
            }
        }
    }
    for score in scores.values_mut() {
        for s in score.iter_mut() {
            *s /= used as f64;
        }
    }
    Ok(ImportanceMap {
        scores,
        examples: used,
        domain: domain.to_string(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EraseOrder {
    /// Most important parameters first.
    Descending,
    /// Least important parameters first.
    Ascending,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErasurePoint {
    pub fraction: f64,
    pub bleu: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ErasureCurve {
    pub tag: String,
    pub order: EraseOrder,
    pub points: Vec<ErasurePoint>,
    pub eval_set: String,
}

impl ErasureCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("fraction,bleu,mean_loss\n");
        for p in &self.points {
            let _ = writeln!(out, "{},{},{}", p.fraction, p.bleu, p.mean_loss);
        }
        out
    }

    /// Mean BLEU over the interior fractions (excludes 0 and 1).
    pub fn interior_mean_bleu(&self) -> f64 {
        let interior: Vec<f64> = self
            .points
            .iter()
            .filter(|p| p.fraction > 0.0 && p.fraction < 1.0)
            .map(|p| p.bleu)
            .collect();
        interior.iter().sum::<f64>() / interior.len().max(1) as f64
    }
}

/// Flat indices of `scores` ranked for erasure: by score (descending or
/// ascending), ties broken by lower flat index.
pub fn erase_ranking(scores: &[f64], order: EraseOrder) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    match order {
        EraseOrder::Descending => {
            idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)))
        }
        EraseOrder::Ascending => {
            idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap().then(a.cmp(&b)))
        }
    }
    idx
}

pub const DEFAULT_FRACTIONS: [f64; 11] = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// Mask an increasing share of one matrix to zero (most- or least-important
/// first) and score the result. The input model is never mutated; each
/// fraction runs on its own copy.
pub fn erase_and_eval(
    model: &Model,
    importance: &ImportanceMap,
    tag: &ParamTag,
    order: EraseOrder,
    fractions: &[f64],
    eval_pairs: &[(Vec<u32>, Vec<u32>)],
    decode_max_len: usize,
    eval_set: &str,
) -> Result<ErasureCurve> {
    model.param(tag)?;
    let scores = importance.get(tag)?;
    if fractions.is_empty() || fractions[0] != 0.0 || *fractions.last().unwrap() != 1.0 {
        return Err(Error::config(
            "erasure fractions must start at 0.0 and end at 1.0",
        ));
    }
    if fractions.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("erasure fractions must be strictly increasing"));
    }
    let ranking = erase_ranking(scores, order);
    let total = ranking.len();

    let points: Result<Vec<ErasurePoint>> = fractions
        .par_iter()
        .map(|&fraction| {
            let erased = (fraction * total as f64).floor() as usize;
            let mut copy = model.clone();
            {
                let data = copy.param_mut(tag)?.data_mut();
                for &i in &ranking[..erased] {
                    data[i] = 0.0;
                }
            }
            let bleu = metrics::bleu_on_pairs(&copy, eval_pairs, decode_max_len)?;
            let mean_loss = copy.mean_loss_eval(eval_pairs)?;
            Ok(ErasurePoint {
                fraction,
                bleu: bleu.bleu,
                mean_loss,
            })
        })
        .collect();

    Ok(ErasureCurve {
        tag: tag.to_string(),
        order,
        points: points?,
        eval_set: eval_set.to_string(),
    })
}

/// Grayscale heatmap (one pixel per parameter, row-major, min–max normalized
/// per matrix, lighter = more important) plus a CSV of the raw scores.
/// A constant matrix renders mid-gray.
pub fn export_heatmap(
    importance: &ImportanceMap,
    shape: &[usize],
    tag: &ParamTag,
    png_path: &Path,
    csv_path: &Path,
) -> Result<()> {
    let scores = importance.get(tag)?;
    let (rows, cols) = match shape {
        [r, c] => (*r, *c),
        [n] => (1usize, *n),
        other => {
            return Err(Error::config(format!(
                "cannot render heatmap for shape {other:?}"
            )))
        }
    };
    if rows * cols != scores.len() {
        return Err(Error::contract(format!(
            "shape {shape:?} does not match {} scores",
            scores.len()
        )));
    }
    let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = max - min;
    let pixels: Vec<u8> = scores
        .iter()
        .map(|&s| {
            let norm = if span > 0.0 { (s - min) / span } else { 0.5 };
            (norm * 255.0).round() as u8
        })
        .collect();
    let img = image::GrayImage::from_raw(cols as u32, rows as u32, pixels)
        .expect("buffer length matches dimensions");
    img.save(png_path)
        .map_err(|e| Error::Format(format!("{}: {e}", png_path.display())))?;

    let mut csv = String::new();
    for r in 0..rows {
        for c in 0..cols {
            if c > 0 {
                csv.push(',');
            }
            let _ = write!(csv, "{:?}", scores[r * cols + c]);
        }
        csv.push('\n');
    }
    std::fs::write(csv_path, csv).map_err(|e| Error::io(csv_path, e))?;
    Ok(())
}

/// Parse a heatmap CSV back into scores (used to audit bit-exact round trips).
pub fn read_heatmap_csv(path: &Path) -> Result<Vec<f64>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in text.lines() {
        for cell in line.split(',') {
            out.push(
                cell.parse::<f64>()
                    .map_err(|e| Error::Format(format!("bad float '{cell}': {e}")))?,
            );
        }
    }
    Ok(out)
}

/// Mean absolute drift per importance decile, averaged across modules.
/// Interval 0 holds each module's top-importance 10%.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DriftReport {
    pub interval_mean_distance: [f64; 10],
    pub modules: usize,
}

impl DriftReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("interval,mean_distance\n");
        for (i, d) in self.interval_mean_distance.iter().enumerate() {
            let _ = writeln!(out, "[{}%-{}%{},{}", i * 10, (i + 1) * 10, if i == 9 { "]" } else { ")" }, d);
        }
        out
    }
}

/// Decile boundaries: group k covers ranked indices
/// [floor(k·n/10), floor((k+1)·n/10)), so sizes differ by at most one.
pub fn decile_bounds(n: usize) -> [(usize, usize); 10] {
    let mut out = [(0usize, 0usize); 10];
    for (k, slot) in out.iter_mut().enumerate() {
        *slot = (k * n / 10, (k + 1) * n / 10);
    }
    out
}

/// Per-decile mean |w_G - w_I|, ranked by `importance_g` within each module,
/// then averaged across modules.
pub fn decile_drift(
    model_g: &Model,
    model_i: &Model,
    importance_g: &ImportanceMap,
) -> Result<DriftReport> {
    if model_g.config() != model_i.config() {
        return Err(Error::contract(
            "decile drift requires models with identical configs",
        ));
    }
    let mut sums = [0.0f64; 10];
    let mut modules = 0usize;
    for (tag, pg) in model_g.params() {
        let pi = model_i.param(tag)?;
        let scores = importance_g.get(tag)?;
        let n = pg.numel();
        if n < 10 {
            continue;
        }
        let ranking = erase_ranking(scores, EraseOrder::Descending);
        let bounds = decile_bounds(n);
        for (k, (lo, hi)) in bounds.iter().enumerate() {
            let mut acc = 0.0;
            for &idx in &ranking[*lo..*hi] {
                acc += (pg.data()[idx] - pi.data()[idx]).abs();
            }
            sums[k] += acc / (hi - lo) as f64;
        }
        modules += 1;
    }
    if modules == 0 {
        return Err(Error::contract("no module has at least 10 parameters"));
    }
    let mut interval_mean_distance = [0.0; 10];
    for k in 0..10 {
        interval_mean_distance[k] = sums[k] / modules as f64;
    }
    Ok(DriftReport {
        interval_mean_distance,
        modules,
    })
}

/// Brute-force loss change |L(w_e = 0) - L| for each sampled flat index of
/// one matrix, evaluated teacher-forced on a fixed batch of pairs. This is
/// the zeroing oracle the Taylor criterion is checked against; it only uses
/// forward evaluation.
pub fn brute_force_delta_loss(
    model: &Model,
    tag: &ParamTag,
    sample: &[usize],
    pairs: &[(Vec<u32>, Vec<u32>)],
) -> Result<Vec<f64>> {
    let base = model.mean_loss_eval(pairs)?;
    let mut work = model.clone();
    let mut out = Vec::with_capacity(sample.len());
    for &idx in sample {
        let n = work.param(tag)?.numel();
        if idx >= n {
            return Err(Error::Index(format!(
                "sample index {idx} out of range for '{tag}' ({n} elements)"
            )));
        }
        let orig = work.param(tag)?.data()[idx];
        work.param_mut(tag)?.data_mut()[idx] = 0.0;
        let loss = work.mean_loss_eval(pairs)?;
        work.param_mut(tag)?.data_mut()[idx] = orig;
        out.push((loss - base).abs());
    }
    Ok(out)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    let ra = average_ranks(a);
    let rb = average_ranks(b);
    pearson(&ra, &rb)
}

fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&i, &j| xs[i].partial_cmp(&xs[j]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[idx[j + 1]] == xs[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            ranks[idx[k]] = avg;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        return 0.0;
    }
    cov / (va * vb).sqrt()
}

/// Deterministic evenly spread sample of `count` flat indices out of `n`.
pub fn spread_sample(n: usize, count: usize) -> Vec<usize> {
    let count = count.min(n);
    (0..count).map(|k| k * n / count).collect()
}

/// Paths for one exported heatmap.
pub fn heatmap_paths(dir: &Path, domain: &str, tag: &ParamTag) -> (PathBuf, PathBuf) {
    let safe = tag.to_string().replace('.', "_");
    (
        dir.join(format!("heatmap_{domain}_{safe}.png")),
        dir.join(format!("heatmap_{domain}_{safe}.csv")),
    )
}
