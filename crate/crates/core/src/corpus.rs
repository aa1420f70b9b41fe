// SPDX-License-Identifier: MIT OR Apache-2.0

//! Concept-dataset manifests.
//!
//! A catalog lists, for every concept (an opaque sense key) and language, the
//! sample ids of the sentences that contain the concept (label 1) and of the
//! sentences drawn from other concepts (label 0). Sentences themselves never
//! enter the engine.

use std::collections::HashSet;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Result, XlgError};
use crate::rng;

pub const MANIFEST_VERSION: u32 = 1;

/// One labelled sentence reference.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sample {
    pub id: String,
    pub label: u8,
}

/// Positive and negative samples for one (concept, language) pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptDataset {
    pub concept_id: String,
    pub language: String,
    pub samples: Vec<Sample>,
}

impl ConceptDataset {
    pub fn n_pos(&self) -> usize {
        self.samples.iter().filter(|s| s.label == 1).count()
    }

    pub fn n_neg(&self) -> usize {
        self.samples.iter().filter(|s| s.label == 0).count()
    }

    pub fn labels(&self) -> Vec<u8> {
        self.samples.iter().map(|s| s.label).collect()
    }

    pub fn sample_ids(&self) -> Vec<String> {
        self.samples.iter().map(|s| s.id.clone()).collect()
    }

    fn validate(&self) -> Result<()> {
        let cell = || format!("concept {:?}, language {:?}", self.concept_id, self.language);
        let mut seen = HashSet::with_capacity(self.samples.len());
        for s in &self.samples {
            if s.label > 1 {
                return Err(XlgError::Validation(format!(
                    "{}: sample {:?} has label {} (expected 0 or 1)",
                    cell(),
                    s.id,
                    s.label
                )));
            }
            if !seen.insert(s.id.as_str()) {
                return Err(XlgError::Validation(format!(
                    "{}: duplicate sample id {:?}",
                    cell(),
                    s.id
                )));
            }
        }
        if self.n_pos() == 0 {
            return Err(XlgError::Validation(format!("{}: no positive samples", cell())));
        }
        if self.n_neg() == 0 {
            return Err(XlgError::Validation(format!("{}: no negative samples", cell())));
        }
        Ok(())
    }
}

/// Validated set of concept datasets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConceptCatalog {
    pub parallel: bool,
    concepts: Vec<String>,
    languages: Vec<String>,
    datasets: IndexMap<(String, String), ConceptDataset>,
}

impl ConceptCatalog {
    /// Builds a catalog from datasets, checking every invariant.
    ///
    /// Concept and language order follow first appearance.
    pub fn new(parallel: bool, datasets: Vec<ConceptDataset>) -> Result<Self> {
        let mut concepts = Vec::new();
        let mut languages = Vec::new();
        let mut map = IndexMap::with_capacity(datasets.len());
        for ds in datasets {
            ds.validate()?;
            if !concepts.contains(&ds.concept_id) {
                concepts.push(ds.concept_id.clone());
            }
            if !languages.contains(&ds.language) {
                languages.push(ds.language.clone());
            }
            let key = (ds.concept_id.clone(), ds.language.clone());
            if map.contains_key(&key) {
                return Err(XlgError::Validation(format!(
                    "duplicate dataset for concept {:?}, language {:?}",
                    key.0, key.1
                )));
            }
            map.insert(key, ds);
        }
        if map.is_empty() {
            return Err(XlgError::Validation("catalog contains no datasets".into()));
        }
        let catalog = ConceptCatalog {
            parallel,
            concepts,
            languages,
            datasets: map,
        };
        if parallel {
            catalog.check_parallel()?;
        }
        Ok(catalog)
    }

    fn check_parallel(&self) -> Result<()> {
        for concept in &self.concepts {
            let mut reference: Option<(&str, HashSet<&str>)> = None;
            for ds in self.datasets.values().filter(|d| &d.concept_id == concept) {
                let ids: HashSet<&str> = ds.samples.iter().map(|s| s.id.as_str()).collect();
                match &reference {
                    None => reference = Some((ds.language.as_str(), ids)),
                    Some((lang, ref_ids)) => {
                        if *ref_ids != ids {
                            return Err(XlgError::Validation(format!(
                                "parallel catalog: concept {:?} has different sample ids in {:?} and {:?}",
                                concept, lang, ds.language
                            )));
                        }
                    }
                }
            }
        }
        Ok(())
    }

    pub fn concepts(&self) -> &[String] {
        &self.concepts
    }

    pub fn languages(&self) -> &[String] {
        &self.languages
    }

    pub fn dataset(&self, concept: &str, language: &str) -> Option<&ConceptDataset> {
        self.datasets.get(&(concept.to_string(), language.to_string()))
    }

    pub fn datasets(&self) -> impl Iterator<Item = &ConceptDataset> {
        self.datasets.values()
    }

    /// Serializes to the manifest JSON document (pretty-printed, trailing newline).
    pub fn to_manifest_string(&self) -> String {
        let doc = ManifestDoc {
            version: MANIFEST_VERSION,
            parallel: self.parallel,
            concepts: self
                .concepts
                .iter()
                .map(|c| ManifestConcept {
                    concept_id: c.clone(),
                    per_language: self
                        .datasets
                        .values()
                        .filter(|d| &d.concept_id == c)
                        .map(|d| {
                            (
                                d.language.clone(),
                                ManifestSamples {
                                    samples: d.samples.clone(),
                                },
                            )
                        })
                        .collect(),
                })
                .collect(),
        };
        let mut out = serde_json::to_string_pretty(&doc).expect("manifest serializes");
        out.push('\n');
        out
    }

    /// Parses and validates a manifest document. `origin` names the source in errors.
    pub fn from_manifest_str(text: &str, origin: &str) -> Result<Self> {
        let doc: ManifestDoc = serde_json::from_str(text).map_err(|e| XlgError::json(origin, &e))?;
        if doc.version != MANIFEST_VERSION {
            return Err(XlgError::Validation(format!(
                "{origin}: unsupported manifest version {} (expected {MANIFEST_VERSION})",
                doc.version
            )));
        }
        let mut datasets = Vec::new();
        let mut seen = HashSet::new();
        for concept in doc.concepts {
            if !seen.insert(concept.concept_id.clone()) {
                return Err(XlgError::Validation(format!(
                    "{origin}: concept {:?} listed twice",
                    concept.concept_id
                )));
            }
            if concept.per_language.is_empty() {
                return Err(XlgError::Validation(format!(
                    "{origin}: concept {:?} has no languages",
                    concept.concept_id
                )));
            }
            for (language, entry) in concept.per_language {
                datasets.push(ConceptDataset {
                    concept_id: concept.concept_id.clone(),
                    language,
                    samples: entry.samples,
                });
            }
        }
        ConceptCatalog::new(doc.parallel, datasets)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestDoc {
    version: u32,
    parallel: bool,
    concepts: Vec<ManifestConcept>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestConcept {
    concept_id: String,
    per_language: IndexMap<String, ManifestSamples>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ManifestSamples {
    samples: Vec<Sample>,
}

/// Reads and validates a catalog manifest.
pub fn load_catalog(path: impl AsRef<Path>) -> Result<ConceptCatalog> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| XlgError::io(path, e))?;
    if bytes.starts_with(&[0xEF, 0xBB, 0xBF]) {
        return Err(XlgError::Validation(format!(
            "{}: manifest must not start with a byte-order mark",
            path.display()
        )));
    }
    let text = String::from_utf8(bytes)
        .map_err(|e| XlgError::Validation(format!("{}: manifest is not UTF-8: {e}", path.display())))?;
    ConceptCatalog::from_manifest_str(&text, &path.display().to_string())
}

pub fn write_catalog(catalog: &ConceptCatalog, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, catalog.to_manifest_string()).map_err(|e| XlgError::io(path, e))
}

/// Deterministic synthetic parallel catalog.
///
/// Every language of a concept shares the same sample ids and labels. Sample
/// ids are random hex tokens drawn from the stream `corpus/synth/<i>`.
pub fn synth_catalog(
    seed: u64,
    n_concepts: usize,
    languages: &[String],
    n_pos: usize,
    n_neg: usize,
) -> Result<ConceptCatalog> {
    if n_concepts == 0 || languages.is_empty() || n_pos == 0 || n_neg == 0 {
        return Err(XlgError::Argument(
            "synth_catalog needs at least one concept, language, positive and negative".into(),
        ));
    }
    let mut unique_langs: Vec<String> = Vec::with_capacity(languages.len());
    for l in languages {
        if unique_langs.contains(l) {
            return Err(XlgError::Argument(format!("language {l:?} listed twice")));
        }
        unique_langs.push(l.clone());
    }

    let mut datasets = Vec::with_capacity(n_concepts * languages.len());
    for c in 0..n_concepts {
        let concept_id = format!("synth-{c:04}");
        let mut rng = rng::stream(seed, &format!("corpus/synth/{c}"));
        let mut ids = HashSet::with_capacity(n_pos + n_neg);
        let mut samples = Vec::with_capacity(n_pos + n_neg);
        while samples.len() < n_pos + n_neg {
            let id = format!("s{:016x}", rng.random::<u64>());
            if ids.insert(id.clone()) {
                let label = u8::from(samples.len() < n_pos);
                samples.push(Sample { id, label });
            }
        }
        samples.shuffle(&mut rng);
        for lang in &unique_langs {
            datasets.push(ConceptDataset {
                concept_id: concept_id.clone(),
                language: lang.clone(),
                samples: samples.clone(),
            });
        }
    }
    ConceptCatalog::new(true, datasets)
}
