// SPDX-License-Identifier: MIT OR Apache-2.0

//! Expert scores.
//!
//! A neuron's expertise for a concept is the Average Precision of its pooled
//! activations used as scores against the concept labels. AP is the step
//! function area under the precision-recall curve: samples with equal scores
//! form one threshold level, and
//!
//! ```text
//! AP = sum over levels t (descending) of precision(t) * (recall(t) - recall(t-1))
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actstore::{ColumnSource, LayerLayout, Pooling};
use crate::container;
use crate::error::{Result, XlgError};

pub const MAGIC: &[u8; 4] = b"XLGE";

/// Order-preserving map of an `f32` onto `u32`; `-0.0` and `+0.0` coincide.
#[inline]
fn ordered_f32(v: f32) -> u32 {
    let bits = (v + 0.0).to_bits();
    if bits >> 31 == 1 {
        !bits
    } else {
        bits | 0x8000_0000
    }
}

#[inline]
fn ordered_f64(v: f64) -> u64 {
    let bits = (v + 0.0).to_bits();
    if bits >> 63 == 1 {
        !bits
    } else {
        bits | 0x8000_0000_0000_0000
    }
}

fn class_counts(labels: &[u8]) -> Result<usize> {
    let mut n_pos = 0usize;
    for (i, &b) in labels.iter().enumerate() {
        match b {
            0 => {}
            1 => n_pos += 1,
            other => {
                return Err(XlgError::Argument(format!(
                    "label {other} at position {i} is not binary"
                )))
            }
        }
    }
    if n_pos == 0 || n_pos == labels.len() {
        return Err(XlgError::Undefined(format!(
            "average precision needs both classes ({n_pos} positives of {})",
            labels.len()
        )));
    }
    Ok(n_pos)
}

/// Sums precision times recall increment over threshold levels.
///
/// `levels` yields `(positives, negatives)` per level in descending score order.
fn sum_levels(levels: impl Iterator<Item = (usize, usize)>, n_pos: usize) -> f64 {
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut ap = 0.0f64;
    for (pos, neg) in levels {
        tp += pos;
        seen += pos + neg;
        // levels without positives add an exact zero
        ap += pos as f64 * (tp as f64 / seen as f64);
    }
    ap / n_pos as f64
}

/// Groups an ascending sequence of `(key, label)` into levels, highest key first.
fn levels_desc<K: PartialEq + Copy>(sorted: &[(K, u8)]) -> impl Iterator<Item = (usize, usize)> + '_ {
    let mut end = sorted.len();
    std::iter::from_fn(move || {
        if end == 0 {
            return None;
        }
        let key = sorted[end - 1].0;
        let mut pos = 0;
        let mut neg = 0;
        while end > 0 && sorted[end - 1].0 == key {
            if sorted[end - 1].1 == 1 {
                pos += 1;
            } else {
                neg += 1;
            }
            end -= 1;
        }
        Some((pos, neg))
    })
}

/// Average Precision of `scores` against binary `labels`.
pub fn average_precision(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(XlgError::Argument(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(XlgError::NonFiniteScore(i));
    }
    let n_pos = class_counts(labels)?;
    let mut pairs: Vec<(u64, u8)> = scores
        .iter()
        .zip(labels)
        .map(|(&s, &b)| (ordered_f64(s), b))
        .collect();
    pairs.sort_unstable();
    Ok(sum_levels(levels_desc(&pairs), n_pos))
}

/// Reusable per-worker state for scoring `f32` columns.
#[derive(Default)]
pub struct ApScratch {
    keys: Vec<u64>,
    tmp: Vec<u64>,
}

const RADIX_BITS: u32 = 11;
const RADIX_BUCKETS: usize = 1 << RADIX_BITS;
const RADIX_PASSES: usize = 3;

impl ApScratch {
    /// AP of one `f32` column. Labels are assumed already checked by the
    /// caller (`n_pos` positives, both classes present).
    fn column_ap(&mut self, column: &[f32], labels: &[u8], n_pos: usize) -> Result<f64> {
        self.keys.clear();
        for (i, (&v, &b)) in column.iter().zip(labels).enumerate() {
            if !v.is_finite() {
                return Err(XlgError::NonFiniteScore(i));
            }
            // 32-bit ordered key above, label in the lowest bit
            self.keys.push((u64::from(ordered_f32(v)) << 1) | u64::from(b));
        }
        if u32::try_from(self.keys.len()).is_ok() {
            self.radix_sort();
        } else {
            self.keys.sort_unstable_by_key(|k| k >> 1);
        }
        let keys = &self.keys;
        let mut end = keys.len();
        let levels = std::iter::from_fn(|| {
            if end == 0 {
                return None;
            }
            let level = keys[end - 1] >> 1;
            let mut pos = 0;
            let mut count = 0;
            while end > 0 && keys[end - 1] >> 1 == level {
                pos += (keys[end - 1] & 1) as usize;
                count += 1;
                end -= 1;
            }
            Some((pos, count - pos))
        });
        Ok(sum_levels(levels, n_pos))
    }

    /// LSD radix sort of `keys` by bits 1..33 (the label bit is left unordered).
    fn radix_sort(&mut self) {
        let n = self.keys.len();
        let mut hist = [[0u32; RADIX_BUCKETS]; RADIX_PASSES];
        let digit =
            |k: u64, pass: usize| ((k >> (1 + RADIX_BITS as usize * pass)) as usize) & (RADIX_BUCKETS - 1);
        for &k in &self.keys {
            for (p, h) in hist.iter_mut().enumerate() {
                h[digit(k, p)] += 1;
            }
        }
        self.tmp.resize(n, 0);
        for (p, h) in hist.iter_mut().enumerate() {
            // a pass where every key shares the digit is a no-op
            if h.iter().any(|&c| c as usize == n) {
                continue;
            }
            let mut sum = 0;
            for c in h.iter_mut() {
                let count = *c;
                *c = sum;
                sum += count;
            }
            for &k in &self.keys {
                let d = digit(k, p);
                self.tmp[h[d] as usize] = k;
                h[d] += 1;
            }
            std::mem::swap(&mut self.keys, &mut self.tmp);
        }
    }
}

/// AP of an `f32` score column (same result as [`average_precision`] on the widened values).
pub fn average_precision_f32(scores: &[f32], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(XlgError::Argument(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let n_pos = class_counts(labels)?;
    ApScratch::default().column_ap(scores, labels, n_pos)
}

/// AP expert scores for every neuron of one (concept, language, checkpoint).
#[derive(Debug, Clone, PartialEq)]
pub struct ExpertScoreVector {
    pub concept_id: String,
    pub language: String,
    pub checkpoint_step: u64,
    layout: LayerLayout,
    scores: Vec<f64>,
}

impl ExpertScoreVector {
    pub fn new(
        concept_id: impl Into<String>,
        language: impl Into<String>,
        checkpoint_step: u64,
        layout: LayerLayout,
        scores: Vec<f64>,
    ) -> Result<Self> {
        if scores.len() != layout.total() {
            return Err(XlgError::Validation(format!(
                "{} scores for a layout of {} neurons",
                scores.len(),
                layout.total()
            )));
        }
        if let Some(g) = scores.iter().position(|s| !(0.0..=1.0).contains(s)) {
            return Err(XlgError::Validation(format!(
                "score {} at neuron {g} outside [0, 1]",
                scores[g]
            )));
        }
        Ok(ExpertScoreVector {
            concept_id: concept_id.into(),
            language: language.into(),
            checkpoint_step,
            layout,
            scores,
        })
    }

    pub fn layout(&self) -> &LayerLayout {
        &self.layout
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct ScoreOptions {
    /// Columns per streamed block (0 picks about 16 MiB per block); one block buffer of `n_rows * block_width`
    /// floats is live per worker.
    pub block_width: usize,
}

impl ScoreOptions {
    fn width_for(&self, n_rows: usize) -> usize {
        if self.block_width > 0 {
            self.block_width
        } else {
            // about 16 MiB of f32 per block
            ((4usize << 20) / n_rows.max(1)).max(1)
        }
    }
}

/// Scores every column of `source`. Runs on the current rayon pool; the
/// result does not depend on the number of workers.
pub fn score_matrix<S: ColumnSource + ?Sized>(
    source: &S,
    options: ScoreOptions,
) -> Result<ExpertScoreVector> {
    let header = source.header();
    if header.pooling != Pooling::Max {
        return Err(XlgError::Validation(format!(
            "expert scoring needs max-pooled activations, got {:?}",
            header.pooling
        )));
    }
    let labels = source.labels();
    let n = source.n_rows();
    let m = source.n_cols();
    let n_pos = class_counts(labels)?;
    let width = options.width_for(n);
    let n_blocks = m.div_ceil(width);

    let blocks: Vec<Vec<f64>> = (0..n_blocks)
        .into_par_iter()
        .map_init(
            || (ApScratch::default(), Vec::<f32>::new()),
            |(scratch, buf), b| {
                let start = b * width;
                let w = width.min(m - start);
                buf.resize(w * n, 0.0);
                source.read_columns(start, buf)?;
                buf.chunks_exact(n)
                    .enumerate()
                    .map(|(c, col)| {
                        scratch
                            .column_ap(col, labels, n_pos)
                            .map_err(|e| XlgError::AtNeuron {
                                neuron: start + c,
                                source: Box::new(e),
                            })
                    })
                    .collect::<Result<Vec<f64>>>()
            },
        )
        .collect::<Result<_>>()?;

    let scores: Vec<f64> = blocks.into_iter().flatten().collect();
    ExpertScoreVector::new(
        header.concept_id.clone(),
        header.language.clone(),
        header.checkpoint_step,
        header.layout().clone(),
        scores,
    )
}

/// The `k` highest-scoring neurons, best first.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TopKSet {
    pub k: usize,
    pub members: Vec<usize>,
}

/// Selects the top `k` neurons by score; equal scores go to the lower index.
pub fn top_k(e: &ExpertScoreVector, k: usize) -> Result<TopKSet> {
    let m = e.len();
    if k == 0 || k > m {
        return Err(XlgError::Range(format!("k = {k} outside 1..={m}")));
    }
    let scores = e.scores();
    let by_rank = |a: &usize, b: &usize| scores[*b].total_cmp(&scores[*a]).then(a.cmp(b));
    let mut idx: Vec<usize> = (0..m).collect();
    if k < m {
        idx.select_nth_unstable_by(k - 1, by_rank);
        idx.truncate(k);
    }
    idx.sort_unstable_by(by_rank);
    Ok(TopKSet { k, members: idx })
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScoreHeader {
    concept_id: String,
    language: String,
    checkpoint_step: u64,
    layer_sizes: LayerLayout,
}

pub fn write_expert_scores(e: &ExpertScoreVector, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = ScoreHeader {
        concept_id: e.concept_id.clone(),
        language: e.language.clone(),
        checkpoint_step: e.checkpoint_step,
        layer_sizes: e.layout.clone(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let file = File::create(path).map_err(|err| XlgError::io(path, err))?;
    let mut out = BufWriter::new(file);
    let io = |err| XlgError::io(path, err);
    container::write_prefix(&mut out, MAGIC, &header).map_err(io)?;
    for s in &e.scores {
        out.write_all(&s.to_le_bytes()).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_expert_scores(path: impl AsRef<Path>) -> Result<ExpertScoreVector> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|err| XlgError::io(path, err))?;
    let mut input = BufReader::new(file);
    let raw = container::read_prefix(&mut input, MAGIC)?;
    let header: ScoreHeader = serde_json::from_slice(&raw)
        .map_err(|err| XlgError::Format(format!("{}: bad header: {err}", path.display())))?;
    let m = header.layer_sizes.total();
    let mut payload = Vec::with_capacity(m * 8);
    input
        .read_to_end(&mut payload)
        .map_err(|err| XlgError::io(path, err))?;
    if payload.len() != m * 8 {
        return Err(XlgError::Length {
            expected: m as u64 * 8,
            found: payload.len() as u64,
        });
    }
    let scores = payload
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    ExpertScoreVector::new(
        header.concept_id,
        header.language,
        header.checkpoint_step,
        header.layer_sizes,
        scores,
    )
}
