// SPDX-License-Identifier: MIT OR Apache-2.0

//! Activation storage.
//!
//! An XLGA file holds an `N x M` row-major `f32` matrix: one row per sentence
//! (max-pooled MLP activations) or per sampled token (hidden states), one
//! column per neuron. Statistics consume it column by column through
//! [`ColumnSource`], which both the in-memory [`ActivationMatrix`] and the
//! file-backed [`XlgaFile`] implement, so full-scale matrices never need to
//! fit in memory.

mod layout;
mod reader;

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::container;
use crate::corpus::ConceptDataset;
use crate::error::{Result, XlgError};
use crate::rng;

pub use layout::LayerLayout;
pub use reader::{ColumnBlocks, XlgaFile};

pub const MAGIC: &[u8; 4] = b"XLGA";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    /// Per-sentence maximum over token positions.
    Max,
    /// One sampled token position per row.
    Token,
}

/// Provenance of a token-pooled row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RowMeta {
    pub layer: usize,
    pub token_position: usize,
}

/// JSON header of an XLGA file. Field order is the on-disk order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixHeader {
    pub model_id: String,
    pub checkpoint_step: u64,
    pub concept_id: String,
    pub language: String,
    pub pooling: Pooling,
    pub layer_sizes: LayerLayout,
    pub n_rows: usize,
    pub sample_ids: Vec<String>,
    pub labels: Vec<u8>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hook_point: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub row_meta: Option<Vec<RowMeta>>,
}

impl MatrixHeader {
    pub fn layout(&self) -> &LayerLayout {
        &self.layer_sizes
    }

    pub fn n_cols(&self) -> usize {
        self.layer_sizes.total()
    }

    pub fn n_pos(&self) -> usize {
        self.labels.iter().filter(|&&b| b == 1).count()
    }

    /// Row-count, label and metadata invariants (everything but the payload).
    pub fn validate(&self) -> Result<()> {
        if self.sample_ids.len() != self.n_rows || self.labels.len() != self.n_rows {
            return Err(XlgError::Validation(format!(
                "n_rows = {} but {} sample ids and {} labels",
                self.n_rows,
                self.sample_ids.len(),
                self.labels.len()
            )));
        }
        if let Some(row) = self.labels.iter().position(|&b| b > 1) {
            return Err(XlgError::Validation(format!(
                "row {row}: label {} is not binary",
                self.labels[row]
            )));
        }
        match (self.pooling, &self.row_meta) {
            (Pooling::Max, Some(_)) => {
                return Err(XlgError::Validation(
                    "row_meta is only allowed for token pooling".into(),
                ))
            }
            (Pooling::Max, None) => {
                let mut seen = HashSet::with_capacity(self.n_rows);
                for id in &self.sample_ids {
                    if !seen.insert(id.as_str()) {
                        return Err(XlgError::Validation(format!("duplicate sample id {id:?}")));
                    }
                }
            }
            (Pooling::Token, None) => {
                return Err(XlgError::Validation(
                    "token pooling requires row_meta (layer, token_position)".into(),
                ))
            }
            (Pooling::Token, Some(meta)) => {
                if meta.len() != self.n_rows {
                    return Err(XlgError::Validation(format!(
                        "n_rows = {} but {} row_meta entries",
                        self.n_rows,
                        meta.len()
                    )));
                }
                // one sampled position per (sentence, layer)
                let mut seen = HashSet::with_capacity(self.n_rows);
                for (id, m) in self.sample_ids.iter().zip(meta) {
                    if !seen.insert((id.as_str(), m.layer)) {
                        return Err(XlgError::Validation(format!(
                            "sample {id:?} has more than one row for layer {}",
                            m.layer
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    fn to_json_bytes(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("header serializes")
    }

    pub(crate) fn payload_bytes(&self) -> u64 {
        self.n_rows as u64 * self.n_cols() as u64 * 4
    }
}

/// In-memory activation matrix (row-major `n_rows x M`).
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    header: MatrixHeader,
    values: Vec<f32>,
}

impl ActivationMatrix {
    /// Checks dimensions, labels and finiteness. Zero-row matrices are
    /// representable but cannot be written.
    pub fn new(header: MatrixHeader, values: Vec<f32>) -> Result<Self> {
        header.validate()?;
        let m = header.n_cols();
        if values.len() != header.n_rows * m {
            return Err(XlgError::Validation(format!(
                "{} values for a {} x {} matrix",
                values.len(),
                header.n_rows,
                m
            )));
        }
        check_finite(&values, m, 0)?;
        Ok(ActivationMatrix { header, values })
    }

    pub fn header(&self) -> &MatrixHeader {
        &self.header
    }

    pub fn header_mut(&mut self) -> HeaderMut<'_> {
        HeaderMut(&mut self.header)
    }

    pub fn layout(&self) -> &LayerLayout {
        &self.header.layer_sizes
    }

    pub fn n_rows(&self) -> usize {
        self.header.n_rows
    }

    pub fn n_cols(&self) -> usize {
        self.header.n_cols()
    }

    pub fn labels(&self) -> &[u8] {
        &self.header.labels
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn row(&self, r: usize) -> &[f32] {
        let m = self.n_cols();
        &self.values[r * m..(r + 1) * m]
    }

    pub fn get(&self, row: usize, col: usize) -> f32 {
        self.values[row * self.n_cols() + col]
    }

    pub fn column(&self, g: usize) -> Vec<f32> {
        let m = self.n_cols();
        self.values.iter().skip(g).step_by(m).copied().collect()
    }

    /// Applies the same row permutation to values, sample ids, labels and row metadata.
    pub fn permute_rows(&self, order: &[usize]) -> Result<Self> {
        let n = self.n_rows();
        let mut check = order.to_vec();
        check.sort_unstable();
        if check != (0..n).collect::<Vec<_>>() {
            return Err(XlgError::Argument("row order is not a permutation".into()));
        }
        let mut header = self.header.clone();
        header.sample_ids = order.iter().map(|&r| self.header.sample_ids[r].clone()).collect();
        header.labels = order.iter().map(|&r| self.header.labels[r]).collect();
        header.row_meta = self
            .header
            .row_meta
            .as_ref()
            .map(|meta| order.iter().map(|&r| meta[r]).collect());
        let mut values = Vec::with_capacity(self.values.len());
        for &r in order {
            values.extend_from_slice(self.row(r));
        }
        Ok(ActivationMatrix { header, values })
    }
}

/// Mutable access to the descriptive header fields that cannot break
/// the matrix invariants.
pub struct HeaderMut<'a>(&'a mut MatrixHeader);

impl HeaderMut<'_> {
    pub fn set_model_id(&mut self, id: impl Into<String>) -> &mut Self {
        self.0.model_id = id.into();
        self
    }

    pub fn set_checkpoint_step(&mut self, step: u64) -> &mut Self {
        self.0.checkpoint_step = step;
        self
    }

    pub fn set_hook_point(&mut self, hook: Option<String>) -> &mut Self {
        self.0.hook_point = hook;
        self
    }
}

pub(crate) fn check_finite(values: &[f32], m: usize, first_row: usize) -> Result<()> {
    if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
        return Err(XlgError::NonFinite {
            row: first_row + pos / m,
            neuron: pos % m,
            value: values[pos],
        });
    }
    Ok(())
}

/// Columnar access to an activation matrix.
///
/// `read_columns(start, buf)` fills `buf` column-major with
/// `buf.len() / n_rows` consecutive columns starting at global index `start`.
pub trait ColumnSource: Sync {
    fn header(&self) -> &MatrixHeader;

    fn read_columns(&self, start: usize, buf: &mut [f32]) -> Result<()>;

    fn n_rows(&self) -> usize {
        self.header().n_rows
    }

    fn n_cols(&self) -> usize {
        self.header().n_cols()
    }

    fn labels(&self) -> &[u8] {
        &self.header().labels
    }
}

impl ColumnSource for ActivationMatrix {
    fn header(&self) -> &MatrixHeader {
        &self.header
    }

    fn read_columns(&self, start: usize, buf: &mut [f32]) -> Result<()> {
        let n = self.n_rows();
        let m = self.n_cols();
        let width = column_width(buf.len(), n, start, m)?;
        for r0 in (0..n).step_by(TILE_ROWS) {
            let rows = TILE_ROWS.min(n - r0);
            let tile = &self.values[r0 * m..(r0 + rows) * m];
            scatter_tile(tile, m, start, width, r0, n, buf);
        }
        Ok(())
    }
}

/// Rows handled together when transposing into a column-major buffer, so
/// each column receives one contiguous run per tile.
pub(crate) const TILE_ROWS: usize = 16;

/// Copies columns `start..start + width` of a row-major tile (row stride
/// `stride`) into rows `r0..` of the column-major `buf` with `n` rows.
pub(crate) fn scatter_tile(
    tile: &[f32],
    stride: usize,
    start: usize,
    width: usize,
    r0: usize,
    n: usize,
    buf: &mut [f32],
) {
    let rows = tile.len() / stride;
    for c in 0..width {
        let dst = &mut buf[c * n + r0..c * n + r0 + rows];
        for (t, d) in dst.iter_mut().enumerate() {
            *d = tile[t * stride + start + c];
        }
    }
}

pub(crate) fn column_width(buf_len: usize, n: usize, start: usize, m: usize) -> Result<usize> {
    if n == 0 || !buf_len.is_multiple_of(n) {
        return Err(XlgError::Argument(format!(
            "column buffer of {buf_len} floats does not hold whole columns of {n} rows"
        )));
    }
    let width = buf_len / n;
    if start + width > m {
        return Err(XlgError::Range(format!(
            "columns {start}..{} outside 0..{m}",
            start + width
        )));
    }
    Ok(width)
}

/// Every column exactly once, ascending global index.
pub fn neuron_column_iter(matrix: &ActivationMatrix) -> impl Iterator<Item = (usize, Vec<f32>)> + '_ {
    (0..matrix.n_cols()).map(move |g| (g, matrix.column(g)))
}

pub fn write_activation_matrix(matrix: &ActivationMatrix, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if matrix.n_rows() == 0 {
        return Err(XlgError::Format(
            "refusing to write a matrix with zero rows".into(),
        ));
    }
    let file = File::create(path).map_err(|e| XlgError::io(path, e))?;
    let mut out = BufWriter::with_capacity(1 << 20, file);
    let io = |e| XlgError::io(path, e);
    container::write_prefix(&mut out, MAGIC, &matrix.header.to_json_bytes()).map_err(io)?;
    for chunk in matrix.values.chunks(1 << 16) {
        let bytes: Vec<u8> = chunk.iter().flat_map(|v| v.to_le_bytes()).collect();
        out.write_all(&bytes).map_err(io)?;
    }
    out.flush().map_err(io)
}

/// Incremental XLGA writer for matrices too large to hold in memory.
///
/// Rows are appended in order; `finish` fails unless exactly `n_rows` rows
/// were written.
pub struct XlgaWriter {
    out: BufWriter<File>,
    path: std::path::PathBuf,
    n_cols: usize,
    remaining: usize,
    rows_done: usize,
    scratch: Vec<u8>,
}

impl XlgaWriter {
    pub fn create(path: impl AsRef<Path>, header: &MatrixHeader) -> Result<Self> {
        let path = path.as_ref().to_path_buf();
        header.validate()?;
        if header.n_rows == 0 {
            return Err(XlgError::Format(
                "refusing to write a matrix with zero rows".into(),
            ));
        }
        let file = File::create(&path).map_err(|e| XlgError::io(&path, e))?;
        let mut out = BufWriter::with_capacity(1 << 20, file);
        container::write_prefix(&mut out, MAGIC, &header.to_json_bytes())
            .map_err(|e| XlgError::io(&path, e))?;
        Ok(XlgaWriter {
            out,
            path,
            n_cols: header.n_cols(),
            remaining: header.n_rows,
            rows_done: 0,
            scratch: Vec::new(),
        })
    }

    pub fn append_row(&mut self, row: &[f32]) -> Result<()> {
        if row.len() != self.n_cols {
            return Err(XlgError::Argument(format!(
                "row has {} values, expected {}",
                row.len(),
                self.n_cols
            )));
        }
        if self.remaining == 0 {
            return Err(XlgError::Argument("more rows than the header declares".into()));
        }
        check_finite(row, self.n_cols, self.rows_done)?;
        self.scratch.clear();
        self.scratch.extend(row.iter().flat_map(|v| v.to_le_bytes()));
        self.out
            .write_all(&self.scratch)
            .map_err(|e| XlgError::io(&self.path, e))?;
        self.remaining -= 1;
        self.rows_done += 1;
        Ok(())
    }

    pub fn finish(mut self) -> Result<()> {
        if self.remaining != 0 {
            return Err(XlgError::Argument(format!(
                "{} rows still missing",
                self.remaining
            )));
        }
        self.out.flush().map_err(|e| XlgError::io(&self.path, e))
    }
}

/// Reads and fully validates an XLGA file into memory.
pub fn read_activation_matrix(path: impl AsRef<Path>) -> Result<ActivationMatrix> {
    XlgaFile::open(path)?.read_all()
}

/// Header metadata for synthetic matrices.
#[derive(Debug, Clone)]
pub struct SynthMeta {
    pub model_id: String,
    pub checkpoint_step: u64,
}

impl Default for SynthMeta {
    fn default() -> Self {
        SynthMeta {
            model_id: "synthetic".into(),
            checkpoint_step: 0,
        }
    }
}

/// `count` distinct neurons of `0..m` for `concept`, ascending, drawn from the
/// stream `actstore/planted-set/<concept>`.
pub fn synth_planted_indices(seed: u64, concept_id: &str, m: usize, count: usize) -> Result<Vec<usize>> {
    if count > m {
        return Err(XlgError::Range(format!("cannot plant {count} of {m} neurons")));
    }
    let mut rng = rng::stream(seed, &format!("actstore/planted-set/{concept_id}"));
    let mut picked = rand::seq::index::sample(&mut rng, m, count).into_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Max-pooled matrix with planted expert neurons.
///
/// Every value is `N(0, noise_sd)` noise drawn from the stream
/// `actstore/planted/<concept>/<language>`; columns in `planted` additionally
/// receive `signal` on positive rows.
pub fn synth_planted_matrix(
    seed: u64,
    dataset: &ConceptDataset,
    layout: &LayerLayout,
    planted: &[usize],
    signal: f32,
    noise_sd: f32,
    meta: &SynthMeta,
) -> Result<ActivationMatrix> {
    let m = layout.total();
    if let Some(&bad) = planted.iter().find(|&&g| g >= m) {
        return Err(XlgError::Range(format!("planted neuron {bad} >= M = {m}")));
    }
    if !(signal > 0.0 && signal.is_finite()) {
        return Err(XlgError::Argument(format!("signal must be > 0, got {signal}")));
    }
    if !(noise_sd >= 0.0 && noise_sd.is_finite()) {
        return Err(XlgError::Argument(format!(
            "noise_sd must be >= 0, got {noise_sd}"
        )));
    }
    let mut is_planted = vec![false; m];
    for &g in planted {
        is_planted[g] = true;
    }
    let normal = Normal::new(0.0f32, noise_sd).expect("finite non-negative sd");
    let mut rng = rng::stream(
        seed,
        &format!("actstore/planted/{}/{}", dataset.concept_id, dataset.language),
    );
    let n = dataset.samples.len();
    let mut values = Vec::with_capacity(n * m);
    for sample in &dataset.samples {
        let boost = signal * f32::from(sample.label);
        for &p in &is_planted {
            // adding 0.0 turns a -0.0 noise draw into +0.0
            let noise = normal.sample(&mut rng) + 0.0;
            values.push(if p { noise + boost } else { noise });
        }
    }
    let header = MatrixHeader {
        model_id: meta.model_id.clone(),
        checkpoint_step: meta.checkpoint_step,
        concept_id: dataset.concept_id.clone(),
        language: dataset.language.clone(),
        pooling: Pooling::Max,
        layer_sizes: layout.clone(),
        n_rows: n,
        sample_ids: dataset.sample_ids(),
        labels: dataset.labels(),
        hook_point: None,
        row_meta: None,
    };
    ActivationMatrix::new(header, values)
}

/// One sampled hidden state.
#[derive(Debug, Clone, PartialEq)]
pub struct HiddenStateSample {
    pub language: String,
    pub layer: usize,
    pub sample_id: String,
    pub token_position: usize,
    pub vector: Vec<f32>,
}

/// Splits a token-pooled matrix into per-row hidden-state samples.
pub fn hidden_state_samples(matrix: &ActivationMatrix) -> Result<Vec<HiddenStateSample>> {
    let header = matrix.header();
    let meta = match (header.pooling, &header.row_meta) {
        (Pooling::Token, Some(meta)) => meta,
        _ => {
            return Err(XlgError::Validation(format!(
                "{}: hidden-state dumps need token pooling with row metadata",
                header.language
            )))
        }
    };
    Ok(meta
        .iter()
        .enumerate()
        .map(|(r, m)| HiddenStateSample {
            language: header.language.clone(),
            layer: m.layer,
            sample_id: header.sample_ids[r].clone(),
            token_position: m.token_position,
            vector: matrix.row(r).to_vec(),
        })
        .collect())
}
