// SPDX-License-Identifier: MIT OR Apache-2.0

//! Steering specs and generation-language statistics.
//!
//! A steering spec fixes the top-k expert neurons of one (concept, language)
//! to the median of their pooled activations over the positive samples. The
//! model adapter runs generation with those clamps and reports the detected
//! language of every generation; [`aggregate_language_frequencies`] turns
//! those records into per-checkpoint frequency tables.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use crate::actstore::ColumnSource;
use crate::error::{Result, XlgError};
use crate::expert::TopKSet;

pub const SPEC_VERSION: u32 = 1;
pub const DEFAULT_HOOK_POINT: &str = "mlp.post_activation";
pub const UNKNOWN_LANGUAGE: &str = "unknown";

/// One clamped neuron.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NeuronClamp {
    pub layer: usize,
    pub index: usize,
    pub value: f32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationParams {
    pub p: f64,
    pub temperature: f64,
    pub max_length: usize,
    pub n_seeds: usize,
    pub prompt: String,
}

impl Default for GenerationParams {
    fn default() -> Self {
        GenerationParams {
            p: 0.9,
            temperature: 0.8,
            max_length: 64,
            n_seeds: 100,
            prompt: "bos".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InterventionSpec {
    pub version: u32,
    pub concept_id: String,
    pub source_language: String,
    pub checkpoint_step: u64,
    pub hook_point: String,
    pub neurons: Vec<NeuronClamp>,
    pub generation: GenerationParams,
}

impl InterventionSpec {
    pub fn validate(&self) -> Result<()> {
        if self.version != SPEC_VERSION {
            return Err(XlgError::Validation(format!(
                "unsupported spec version {}",
                self.version
            )));
        }
        if self.neurons.is_empty() {
            return Err(XlgError::Validation("spec clamps no neurons".into()));
        }
        let mut seen = HashSet::with_capacity(self.neurons.len());
        for n in &self.neurons {
            if !seen.insert((n.layer, n.index)) {
                return Err(XlgError::Validation(format!(
                    "neuron (layer {}, index {}) clamped twice",
                    n.layer, n.index
                )));
            }
            if !n.value.is_finite() {
                return Err(XlgError::Validation(format!(
                    "neuron (layer {}, index {}) has non-finite clamp {}",
                    n.layer, n.index, n.value
                )));
            }
        }
        let g = &self.generation;
        if !(g.p > 0.0 && g.p <= 1.0) || !(g.temperature > 0.0) || g.max_length == 0 || g.n_seeds == 0 {
            return Err(XlgError::Validation(format!(
                "invalid generation parameters {g:?}"
            )));
        }
        Ok(())
    }

    /// Pretty JSON with a trailing newline; identical specs give identical bytes.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("spec serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let spec: InterventionSpec = serde_json::from_str(text).map_err(|e| XlgError::json(origin, &e))?;
        spec.validate()?;
        Ok(spec)
    }
}

fn median(values: &mut [f32]) -> f32 {
    values.sort_unstable_by(f32::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        ((f64::from(values[n / 2 - 1]) + f64::from(values[n / 2])) / 2.0) as f32
    }
}

/// Median pooled activation over positive rows for each selected neuron, in
/// the order of `neurons.members`. Reads one column at a time.
pub fn median_clamp_values<S: ColumnSource + ?Sized>(
    source: &S,
    neurons: &TopKSet,
) -> Result<Vec<NeuronClamp>> {
    let header = source.header();
    let positive: Vec<usize> = source
        .labels()
        .iter()
        .enumerate()
        .filter(|(_, &b)| b == 1)
        .map(|(r, _)| r)
        .collect();
    if positive.is_empty() {
        return Err(XlgError::Argument(format!(
            "concept {:?}, language {:?}: no positive samples to take a median over",
            header.concept_id, header.language
        )));
    }
    let layout = header.layout();
    let mut column = vec![0f32; source.n_rows()];
    let mut buf = Vec::with_capacity(positive.len());
    neurons
        .members
        .iter()
        .map(|&g| {
            let (layer, index) = layout.locate(g).ok_or_else(|| {
                XlgError::Range(format!(
                    "neuron {g} outside the layout of {} neurons",
                    layout.total()
                ))
            })?;
            source.read_columns(g, &mut column)?;
            buf.clear();
            buf.extend(positive.iter().map(|&r| column[r]));
            Ok(NeuronClamp {
                layer,
                index,
                value: median(&mut buf),
            })
        })
        .collect()
}

/// Assembles and validates an intervention spec.
pub fn emit_spec(
    concept_id: &str,
    source_language: &str,
    checkpoint_step: u64,
    clamps: Vec<NeuronClamp>,
    generation: Option<GenerationParams>,
    hook_point: Option<&str>,
) -> Result<InterventionSpec> {
    let spec = InterventionSpec {
        version: SPEC_VERSION,
        concept_id: concept_id.into(),
        source_language: source_language.into(),
        checkpoint_step,
        hook_point: hook_point.unwrap_or(DEFAULT_HOOK_POINT).into(),
        neurons: clamps,
        generation: generation.unwrap_or_default(),
    };
    spec.validate()?;
    Ok(spec)
}

/// Outcome of one steered generation, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub concept_id: String,
    pub source_language: String,
    pub checkpoint_step: u64,
    pub seed: u64,
    pub detected_language: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
}

pub fn parse_records_jsonl(text: &str, origin: &str) -> Result<Vec<GenerationRecord>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: GenerationRecord = serde_json::from_str(line).map_err(|e| XlgError::Parse {
            origin: origin.into(),
            line: i + 1,
            column: e.column(),
            message: e.to_string(),
        })?;
        out.push(rec);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageShare {
    pub language: String,
    pub count: usize,
    pub frequency: f64,
}

/// Detected-language distribution for one (checkpoint, source language).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrequencyGroup {
    pub checkpoint_step: u64,
    pub source_language: String,
    pub total: usize,
    /// Every detected label, by descending frequency then label.
    pub all: Vec<LanguageShare>,
    /// The first `top_n` entries of `all`.
    pub top: Vec<LanguageShare>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LanguageFrequencyReport {
    pub kind: String,
    pub version: u32,
    pub top_n: usize,
    pub groups: Vec<FrequencyGroup>,
}

pub const FREQUENCY_KIND: &str = "language_frequency";

/// Relative frequencies of detected languages per (checkpoint, source language).
pub fn aggregate_language_frequencies(
    records: &[GenerationRecord],
    top_n: usize,
) -> Result<LanguageFrequencyReport> {
    if records.is_empty() {
        return Err(XlgError::Argument("no generation records".into()));
    }
    let mut seen = BTreeSet::new();
    let mut counts: BTreeMap<(u64, &str), BTreeMap<&str, usize>> = BTreeMap::new();
    for r in records {
        let key = (
            r.concept_id.as_str(),
            r.source_language.as_str(),
            r.checkpoint_step,
            r.seed,
        );
        if !seen.insert(key) {
            return Err(XlgError::Validation(format!(
                "two records for concept {:?}, language {:?}, checkpoint {}, seed {}",
                key.0, key.1, key.2, key.3
            )));
        }
        let label = if r.detected_language.is_empty() {
            UNKNOWN_LANGUAGE
        } else {
            r.detected_language.as_str()
        };
        *counts
            .entry((r.checkpoint_step, r.source_language.as_str()))
            .or_default()
            .entry(label)
            .or_default() += 1;
    }
    let groups = counts
        .into_iter()
        .map(|((step, source), by_label)| {
            let total: usize = by_label.values().sum();
            let mut all: Vec<LanguageShare> = by_label
                .into_iter()
                .map(|(language, count)| LanguageShare {
                    language: language.to_string(),
                    count,
                    frequency: count as f64 / total as f64,
                })
                .collect();
            all.sort_by(|a, b| b.count.cmp(&a.count).then_with(|| a.language.cmp(&b.language)));
            let top = all.iter().take(top_n).cloned().collect();
            FrequencyGroup {
                checkpoint_step: step,
                source_language: source.to_string(),
                total,
                all,
                top,
            }
        })
        .collect();
    Ok(LanguageFrequencyReport {
        kind: FREQUENCY_KIND.into(),
        version: 1,
        top_n,
        groups,
    })
}
