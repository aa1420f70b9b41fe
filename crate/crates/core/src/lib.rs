// SPDX-License-Identifier: MIT OR Apache-2.0

//! # xlg-core
//!
//! Analytics for concept-selective ("expert") neurons in multilingual
//! language models, operating on activation dumps produced by an external
//! model adapter.
//!
//! - [`corpus`]: concept-dataset manifests and synthetic catalogs.
//! - [`actstore`]: the XLGA activation container and column streaming.
//! - [`expert`]: Average Precision expert scores and top-k selection.
//! - [`align`]: cross-lingual correlation, kNN mutual information, overlap,
//!   and layer-wise expert profiles.
//! - [`probe`]: per-layer language-identity probing.
//! - [`steer`]: median-clamp intervention specs and generation-language
//!   frequency tables.
//!
//! All randomness flows through [`rng::stream`], and every parallel
//! computation produces the same bytes for any rayon pool size.

pub mod actstore;
pub mod align;
mod container;
pub mod corpus;
pub mod error;
pub mod expert;
pub mod probe;
pub mod rng;
pub mod steer;

pub use actstore::{
    read_activation_matrix, write_activation_matrix, ActivationMatrix, ColumnSource, LayerLayout,
    MatrixHeader, Pooling, XlgaFile,
};
pub use align::{
    build_alignment_report, fisher_z_average, layer_profile, mutual_information_knn, overlap_proportion,
    pearson, AlignOptions, AlignmentReport, LayerProfile,
};
pub use corpus::{load_catalog, synth_catalog, write_catalog, ConceptCatalog, ConceptDataset};
pub use error::{Result, XlgError};
pub use expert::{
    average_precision, read_expert_scores, score_matrix, top_k, write_expert_scores, ExpertScoreVector,
    ScoreOptions, TopKSet,
};
pub use probe::{evaluate_probe, probe_sweep, sample_positions, train_probe, ProbeReport};
pub use steer::{
    aggregate_language_frequencies, emit_spec, median_clamp_values, GenerationRecord, InterventionSpec,
    LanguageFrequencyReport,
};
