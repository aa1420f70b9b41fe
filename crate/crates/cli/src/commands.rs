// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::json;

use xlg_core::actstore::{
    hidden_state_samples, synth_planted_indices, synth_planted_matrix, ColumnBlocks, HiddenStateSample,
    SynthMeta,
};
use xlg_core::align::{vector_map, Metrics};
use xlg_core::probe::{synth_hidden_dumps, HiddenSynth, ProbeRun, SweepOptions};
use xlg_core::steer::{parse_records_jsonl, GenerationParams};
use xlg_core::{
    aggregate_language_frequencies, build_alignment_report, emit_spec, load_catalog, median_clamp_values,
    probe_sweep, read_activation_matrix, read_expert_scores, score_matrix, synth_catalog, top_k,
    write_activation_matrix, write_catalog, write_expert_scores, AlignOptions, ColumnSource, LayerLayout,
    Pooling, ScoreOptions, XlgError, XlgaFile,
};

use crate::args::{
    AlignArgs, ExpertsArgs, IngestArgs, LangFreqArgs, Metric, ProbeArgs, SteerSpecArgs, SynthArgs,
};
use crate::manifest::{manifest_path_for, Recorder};
use crate::UsageError;

/// Regular files in `dir` with extension `ext`, sorted by name.
pub(crate) fn list_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("listing {}", dir.display()))? {
        let path = entry
            .with_context(|| format!("listing {}", dir.display()))?
            .path();
        if path.is_file() && path.extension().is_some_and(|e| e == ext) {
            out.push(path);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(XlgError::Missing(format!("*.{ext} files in {}", dir.display())).into());
    }
    Ok(out)
}

/// File-name-safe rendering of an identifier.
fn safe_name(s: &str) -> String {
    s.chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || "-_.".contains(c) {
                c
            } else {
                '_'
            }
        })
        .collect()
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub(crate) fn pretty_json(value: &impl Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

pub(crate) fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Refuses to write over any of `inputs`.
pub(crate) fn guard_output(out: &Path, inputs: &[&Path]) -> Result<()> {
    let Ok(target) = out.canonicalize() else {
        return Ok(());
    };
    for input in inputs {
        if input.canonicalize().is_ok_and(|p| p == target) {
            return Err(UsageError(format!("--out {} would overwrite an input", out.display())).into());
        }
    }
    Ok(())
}

fn parent_dir(path: &Path) -> Result<()> {
    match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => create_dir(p),
        _ => Ok(()),
    }
}

pub fn synth(a: &SynthArgs) -> Result<()> {
    let layout = LayerLayout::new(a.layer_sizes.clone())?;
    let catalog = synth_catalog(
        a.seed,
        a.concepts as usize,
        &a.languages,
        a.n_pos as usize,
        a.n_neg as usize,
    )?;
    let act_dir = a.out.join("activations");
    create_dir(&act_dir)?;
    let mut rec = Recorder::new("synth", a);

    let catalog_path = a.out.join("catalog.json");
    write_catalog(&catalog, &catalog_path)?;
    rec.output(&catalog_path, "catalog.json");

    let mut planted = serde_json::Map::new();
    let mut planted_sets = BTreeMap::new();
    for c in catalog.concepts() {
        let set = synth_planted_indices(a.seed, c, layout.total(), a.planted)?;
        planted.insert(c.clone(), json!(set));
        planted_sets.insert(c.clone(), set);
    }
    let planted_doc = json!({
        "kind": "planted",
        "version": 1,
        "layer_sizes": layout.sizes(),
        "concepts": planted,
    });
    let planted_path = a.out.join("planted.json");
    write_text(&planted_path, &pretty_json(&planted_doc)?)?;
    rec.output(&planted_path, "planted.json");

    let meta = SynthMeta {
        model_id: a.model_id.clone(),
        checkpoint_step: a.checkpoint_step,
    };
    let datasets: Vec<_> = catalog.datasets().collect();
    let names: Vec<String> = datasets
        .par_iter()
        .map(|d| -> Result<String> {
            let m = synth_planted_matrix(
                a.seed,
                d,
                &layout,
                &planted_sets[&d.concept_id],
                a.signal,
                a.noise_sd,
                &meta,
            )?;
            let name = format!("{}__{}.xlga", safe_name(&d.concept_id), safe_name(&d.language));
            write_activation_matrix(&m, act_dir.join(&name))?;
            Ok(name)
        })
        .collect::<Result<_>>()?;
    let unique: BTreeSet<&String> = names.iter().collect();
    if unique.len() != names.len() {
        bail!("concept or language ids collide after file-name sanitising");
    }
    for name in &names {
        rec.output(&act_dir.join(name), format!("activations/{name}"));
    }

    if a.hidden_sentences > 0 {
        let hidden_dir = a.out.join("hidden");
        create_dir(&hidden_dir)?;
        let spec = HiddenSynth {
            languages: a.languages.clone(),
            sentences_per_language: a.hidden_sentences,
            n_layers: a.hidden_layers,
            dim: a.hidden_dim,
            separable_from_layer: a.hidden_separable_from,
            separation: a.hidden_separation,
            model_id: a.model_id.clone(),
            checkpoint_step: a.checkpoint_step,
        };
        for m in synth_hidden_dumps(a.seed, &spec)? {
            let name = format!("{}.xlga", safe_name(&m.header().language));
            let path = hidden_dir.join(&name);
            write_activation_matrix(&m, &path)?;
            rec.output(&path, format!("hidden/{name}"));
        }
    }
    rec.finish(&a.out.join("manifest.json"))
}

#[derive(Serialize)]
struct IndexEntry {
    file: String,
    concept_id: String,
    language: String,
    model_id: String,
    checkpoint_step: u64,
    n_rows: usize,
    n_pos: usize,
    layer_sizes: Vec<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    hook_point: Option<String>,
}

#[derive(Serialize)]
struct MissingCell {
    checkpoint_step: u64,
    concept_id: String,
    language: String,
}

pub fn ingest(a: &IngestArgs) -> Result<()> {
    let catalog = load_catalog(&a.catalog)?;
    let files = list_files(&a.activations, "xlga")?;
    guard_output(&a.out, &[&a.catalog, &a.activations])?;
    let mut rec = Recorder::new("ingest", a);
    rec.input("catalog", &a.catalog, None)?;
    for f in &files {
        rec.input("activations", f, Some(&a.activations))?;
    }

    let entries: Vec<IndexEntry> = files
        .par_iter()
        .map(|path| -> Result<IndexEntry> {
            let name = path.file_name().unwrap().to_string_lossy().into_owned();
            let file = XlgaFile::open(path).with_context(|| name.clone())?;
            let h = file.header();
            if h.pooling != Pooling::Max {
                return Err(XlgError::Validation(format!("{name}: expected max-pooled activations")).into());
            }
            let dataset = catalog.dataset(&h.concept_id, &h.language).ok_or_else(|| {
                XlgError::Validation(format!(
                    "{name}: concept {:?}, language {:?} is not in the catalog",
                    h.concept_id, h.language
                ))
            })?;
            let expected: BTreeMap<&str, u8> =
                dataset.samples.iter().map(|s| (s.id.as_str(), s.label)).collect();
            let found: BTreeMap<&str, u8> = h
                .sample_ids
                .iter()
                .map(String::as_str)
                .zip(h.labels.iter().copied())
                .collect();
            if expected != found {
                return Err(XlgError::Validation(format!(
                    "{name}: sample ids or labels differ from the catalog entry"
                ))
                .into());
            }
            // about 16 MiB per block
            let mut blocks = ColumnBlocks::new(&file, (4usize << 20) / h.n_rows);
            while let Some(block) = blocks.next() {
                block.with_context(|| name.clone())?;
            }
            Ok(IndexEntry {
                file: name,
                concept_id: h.concept_id.clone(),
                language: h.language.clone(),
                model_id: h.model_id.clone(),
                checkpoint_step: h.checkpoint_step,
                n_rows: h.n_rows,
                n_pos: h.n_pos(),
                layer_sizes: h.layout().sizes().to_vec(),
                hook_point: h.hook_point.clone(),
            })
        })
        .collect::<Result<_>>()?;

    let mut seen = BTreeSet::new();
    for e in &entries {
        if !seen.insert((e.checkpoint_step, e.concept_id.as_str(), e.language.as_str())) {
            return Err(XlgError::Validation(format!(
                "{}: second file for concept {:?}, language {:?}, checkpoint {}",
                e.file, e.concept_id, e.language, e.checkpoint_step
            ))
            .into());
        }
    }
    let steps: BTreeSet<u64> = entries.iter().map(|e| e.checkpoint_step).collect();
    let mut missing = Vec::new();
    for &step in &steps {
        for c in catalog.concepts() {
            for l in catalog.languages() {
                if catalog.dataset(c, l).is_some() && !seen.contains(&(step, c.as_str(), l.as_str())) {
                    missing.push(MissingCell {
                        checkpoint_step: step,
                        concept_id: c.clone(),
                        language: l.clone(),
                    });
                }
            }
        }
    }
    create_dir(&a.out)?;
    let index = json!({
        "kind": "ingest_index",
        "version": 1,
        "files": entries,
        "missing": missing,
    });
    let index_path = a.out.join("index.json");
    write_text(&index_path, &pretty_json(&index)?)?;
    rec.output(&index_path, "index.json");
    rec.finish(&a.out.join("manifest.json"))
}

#[derive(Serialize)]
struct TopKDoc<'a> {
    concept_id: &'a str,
    language: &'a str,
    checkpoint_step: u64,
    k: usize,
    members: &'a [usize],
    scores: Vec<f64>,
}

/// Scores one file, writing `<out>` and optionally `<stem>.topk.json` beside it.
fn score_one(input: &Path, out: &Path, a: &ExpertsArgs, rec: &mut Recorder, prefix: &str) -> Result<()> {
    let file = XlgaFile::open(input)?;
    let options = ScoreOptions {
        block_width: a.block_width,
    };
    let e = score_matrix(&file, options).with_context(|| format!("scoring {}", input.display()))?;
    write_expert_scores(&e, out)?;
    let out_name = out.file_name().unwrap().to_string_lossy().into_owned();
    rec.output(out, format!("{prefix}{out_name}"));
    if let Some(k) = a.top_k {
        let set = top_k(&e, k as usize)?;
        let doc = TopKDoc {
            concept_id: &e.concept_id,
            language: &e.language,
            checkpoint_step: e.checkpoint_step,
            k: set.k,
            members: &set.members,
            scores: set.members.iter().map(|&g| e.scores()[g]).collect(),
        };
        let stem = out.file_stem().unwrap().to_string_lossy().into_owned();
        let path = out.with_file_name(format!("{stem}.topk.json"));
        write_text(&path, &pretty_json(&doc)?)?;
        rec.output(&path, format!("{prefix}{stem}.topk.json"));
    }
    Ok(())
}

pub fn experts(a: &ExpertsArgs) -> Result<()> {
    let mut rec = Recorder::new("experts", a);
    if a.activations.is_dir() {
        let files = list_files(&a.activations, "xlga")?;
        guard_output(&a.out, &[&a.activations])?;
        for f in &files {
            rec.input("activations", f, Some(&a.activations))?;
        }
        create_dir(&a.out)?;
        for f in &files {
            let stem = f.file_stem().unwrap().to_string_lossy().into_owned();
            score_one(f, &a.out.join(format!("{stem}.xlge")), a, &mut rec, "")?;
        }
        rec.finish(&a.out.join("manifest.json"))
    } else {
        if a.out.is_dir() {
            return Err(UsageError(format!(
                "--out {} is a directory but --activations names a single file",
                a.out.display()
            ))
            .into());
        }
        guard_output(&a.out, &[&a.activations])?;
        rec.input("activations", &a.activations, None)?;
        parent_dir(&a.out)?;
        score_one(&a.activations, &a.out, a, &mut rec, "")?;
        rec.finish(&manifest_path_for(&a.out))
    }
}

fn metric_name(m: Metric) -> &'static str {
    match m {
        Metric::Corr => "correlation",
        Metric::Mi => "mutual_information",
        Metric::Overlap => "overlap",
    }
}

pub fn align(a: &AlignArgs) -> Result<()> {
    let files = list_files(&a.experts_dir, "xlge")?;
    guard_output(&a.out, &[&a.experts_dir])?;
    let mut rec = Recorder::new("align", a);
    let mut vectors = Vec::with_capacity(files.len());
    for f in &files {
        rec.input("experts-dir", f, Some(&a.experts_dir))?;
        vectors.push(read_expert_scores(f)?);
    }
    let map = vector_map(vectors)?;
    let options = AlignOptions {
        k: a.k as usize,
        mi_neighbors: a.mi_neighbors as usize,
        metrics: Metrics {
            correlation: a.metrics.contains(&Metric::Corr),
            mutual_information: a.metrics.contains(&Metric::Mi),
            overlap: a.metrics.contains(&Metric::Overlap),
        },
        languages: a.languages.clone(),
        keep_per_concept: a.per_concept,
        with_layer_profile: !a.no_layer_profile,
    };
    let report = build_alignment_report(&map, &options)?;
    parent_dir(&a.out)?;
    write_text(&a.out, &pretty_json(&report)?)?;
    rec.output(&a.out, a.out.file_name().unwrap().to_string_lossy());
    if a.csv {
        let stem = a.out.file_stem().unwrap().to_string_lossy().into_owned();
        let mut metrics: Vec<Metric> = a.metrics.clone();
        metrics.sort_by_key(|m| *m as u8);
        metrics.dedup();
        for m in metrics {
            let matrix = match m {
                Metric::Corr => &report.correlation,
                Metric::Mi => &report.mutual_information,
                Metric::Overlap => &report.overlap,
            };
            if let Some(matrix) = matrix {
                let name = format!("{stem}.{}.csv", metric_name(m));
                let path = a.out.with_file_name(&name);
                crate::report::write_matrix_csv(&path, &report.languages, matrix)?;
                rec.output(&path, name);
            }
        }
    }
    rec.finish(&manifest_path_for(&a.out))
}

pub fn probe(a: &ProbeArgs) -> Result<()> {
    let mut rec = Recorder::new("probe", a);
    let mut by_step: BTreeMap<u64, Vec<HiddenStateSample>> = BTreeMap::new();
    let mut seen = BTreeSet::new();
    for dir in &a.hidden_dir {
        guard_output(&a.out, &[dir])?;
        for f in list_files(dir, "xlga")? {
            rec.input("hidden-dir", &f, Some(dir))?;
            let m = read_activation_matrix(&f)?;
            let h = m.header();
            if !seen.insert((h.checkpoint_step, h.language.clone())) {
                return Err(XlgError::Validation(format!(
                    "{}: second dump for language {:?} at checkpoint {}",
                    f.display(),
                    h.language,
                    h.checkpoint_step
                ))
                .into());
            }
            let samples = hidden_state_samples(&m).with_context(|| format!("{}", f.display()))?;
            by_step.entry(h.checkpoint_step).or_default().extend(samples);
        }
    }
    let options = SweepOptions {
        seeds: a.seeds.clone(),
        test_fraction: a.test_fraction,
        inverse_regularization: a.inverse_regularization,
        max_iters: a.max_iters,
        tol: a.tol,
    };
    let reports = by_step
        .iter()
        .map(|(&step, samples)| probe_sweep(samples, step, &options))
        .collect::<xlg_core::Result<Vec<_>>>()?;
    for r in &reports {
        if !r.all_converged {
            log::warn!(
                "checkpoint {}: some probes hit the iteration cap",
                r.checkpoint_step
            );
        }
    }
    let run = ProbeRun::new(reports);
    parent_dir(&a.out)?;
    write_text(&a.out, &pretty_json(&run)?)?;
    rec.output(&a.out, a.out.file_name().unwrap().to_string_lossy());
    if a.csv {
        let stem = a.out.file_stem().unwrap().to_string_lossy().into_owned();
        let name = format!("{stem}.layers.csv");
        let path = a.out.with_file_name(&name);
        crate::report::write_probe_layers_csv(&path, &run)?;
        rec.output(&path, name);
    }
    rec.finish(&manifest_path_for(&a.out))
}

pub fn steer_spec(a: &SteerSpecArgs) -> Result<()> {
    guard_output(&a.out, &[&a.experts, &a.activations])?;
    let mut rec = Recorder::new("steer-spec", a);
    rec.input("experts", &a.experts, None)?;
    rec.input("activations", &a.activations, None)?;
    let e = read_expert_scores(&a.experts)?;
    let file = XlgaFile::open(&a.activations)?;
    let h = file.header();
    if (h.concept_id.as_str(), h.language.as_str(), h.checkpoint_step)
        != (e.concept_id.as_str(), e.language.as_str(), e.checkpoint_step)
    {
        return Err(XlgError::Validation(format!(
            "expert scores are for ({:?}, {:?}, step {}) but activations for ({:?}, {:?}, step {})",
            e.concept_id, e.language, e.checkpoint_step, h.concept_id, h.language, h.checkpoint_step
        ))
        .into());
    }
    if e.layout() != h.layout() {
        return Err(XlgError::Validation(
            "expert scores and activations have different layer layouts".into(),
        )
        .into());
    }
    let set = top_k(&e, a.k as usize)?;
    let clamps = median_clamp_values(&file, &set)?;
    let generation = GenerationParams {
        p: a.p,
        temperature: a.temperature,
        max_length: a.max_length,
        n_seeds: a.n_seeds,
        ..GenerationParams::default()
    };
    let hook = a.hook_point.as_deref().or(h.hook_point.as_deref());
    let spec = emit_spec(
        &e.concept_id,
        &e.language,
        e.checkpoint_step,
        clamps,
        Some(generation),
        hook,
    )?;
    parent_dir(&a.out)?;
    write_text(&a.out, &spec.to_json())?;
    rec.output(&a.out, a.out.file_name().unwrap().to_string_lossy());
    rec.finish(&manifest_path_for(&a.out))
}

pub fn lang_freq(a: &LangFreqArgs) -> Result<()> {
    guard_output(&a.out, &[&a.records])?;
    let mut rec = Recorder::new("lang-freq", a);
    rec.input("records", &a.records, None)?;
    let text = fs::read_to_string(&a.records).with_context(|| format!("reading {}", a.records.display()))?;
    let origin = a.records.display().to_string();
    let records = parse_records_jsonl(&text, &origin)?;
    let report = aggregate_language_frequencies(&records, a.top_n)?;
    parent_dir(&a.out)?;
    write_text(&a.out, &pretty_json(&report)?)?;
    rec.output(&a.out, a.out.file_name().unwrap().to_string_lossy());
    rec.finish(&manifest_path_for(&a.out))
}
