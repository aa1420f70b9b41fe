// SPDX-License-Identifier: MIT OR Apache-2.0

//! CSV bundle for external plotting. Column order is fixed per file family.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use serde::de::DeserializeOwned;

use xlg_core::align::{AlignmentReport, Matrix, ALIGNMENT_KIND};
use xlg_core::probe::{ProbeReport, ProbeRun, PROBE_KIND};
use xlg_core::steer::{LanguageFrequencyReport, FREQUENCY_KIND};
use xlg_core::XlgError;

use crate::args::ReportArgs;
use crate::commands::create_dir;
use crate::manifest::Recorder;

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))
}

fn finish(mut w: csv::Writer<fs::File>, path: &Path) -> Result<()> {
    w.flush().with_context(|| format!("writing {}", path.display()))
}

/// Square language-by-language matrix with a `language` header column.
pub fn write_matrix_csv(path: &Path, languages: &[String], matrix: &Matrix) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["language".to_string()];
    header.extend(languages.iter().cloned());
    w.write_record(&header)?;
    for (lang, row) in languages.iter().zip(matrix) {
        let mut rec = vec![lang.clone()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    finish(w, path)
}

/// `checkpoint_step, layer, mean, std, seed_<s>...` for every report.
pub fn write_probe_layers_csv(path: &Path, run: &ProbeRun) -> Result<()> {
    let mut w = csv_writer(path)?;
    let seeds = run.reports.first().map(|r| r.seeds.clone()).unwrap_or_default();
    let mut header: Vec<String> = ["checkpoint_step", "layer", "mean", "std"]
        .map(String::from)
        .to_vec();
    header.extend(seeds.iter().map(|s| format!("seed_{s}")));
    w.write_record(&header)?;
    for r in &run.reports {
        if r.seeds != seeds {
            return Err(XlgError::Validation(format!(
                "checkpoint {} used seeds {:?}, expected {seeds:?}",
                r.checkpoint_step, r.seeds
            ))
            .into());
        }
        for l in &r.layers {
            let mut rec = vec![
                r.checkpoint_step.to_string(),
                l.layer.to_string(),
                l.mean.to_string(),
                l.std.to_string(),
            ];
            rec.extend(l.accuracies.iter().map(|a| a.to_string()));
            w.write_record(&rec)?;
        }
    }
    finish(w, path)
}

enum Input {
    Alignment(AlignmentReport),
    Probe(ProbeRun),
    Frequency(LanguageFrequencyReport),
}

fn parse_as<T: DeserializeOwned>(value: serde_json::Value, name: &str, what: &str) -> Result<T> {
    serde_json::from_value(value)
        .map_err(|e| XlgError::Validation(format!("{name}: not a valid {what} report: {e}")).into())
}

fn load(path: &Path) -> Result<Input> {
    let name = path.display().to_string();
    let text = fs::read_to_string(path).with_context(|| format!("reading {name}"))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| XlgError::Validation(format!("{name}: not JSON: {e}")))?;
    let kind = value
        .get("kind")
        .and_then(|k| k.as_str())
        .unwrap_or_default()
        .to_string();
    let version = value.get("version").and_then(|v| v.as_u64());
    if version != Some(1) {
        return Err(XlgError::Validation(format!("{name}: unsupported report version {version:?}")).into());
    }
    Ok(match kind.as_str() {
        ALIGNMENT_KIND => Input::Alignment(parse_as(value, &name, "alignment")?),
        PROBE_KIND => Input::Probe(parse_as(value, &name, "probe")?),
        FREQUENCY_KIND => Input::Frequency(parse_as(value, &name, "language-frequency")?),
        other => {
            return Err(XlgError::Validation(format!("{name}: unrecognised report kind {other:?}")).into())
        }
    })
}

fn check_square(name: &str, languages: &[String], m: &Matrix) -> Result<()> {
    let l = languages.len();
    if m.len() != l || m.iter().any(|row| row.len() != l) {
        return Err(XlgError::Validation(format!("{name}: matrix is not {l}x{l}")).into());
    }
    Ok(())
}

pub fn report(a: &ReportArgs) -> Result<()> {
    let inputs: Vec<&Path> = a.inputs.iter().map(|p| p.as_path()).collect();
    for p in &inputs {
        crate::commands::guard_output(&a.out, &[p])?;
    }
    let mut rec = Recorder::new("report", a);
    let mut alignments: BTreeMap<u64, (String, AlignmentReport)> = BTreeMap::new();
    let mut trajectory: BTreeMap<u64, ProbeReport> = BTreeMap::new();
    let mut frequencies: Vec<LanguageFrequencyReport> = Vec::new();
    for p in &inputs {
        rec.input("inputs", p, None)?;
        let name = p.display().to_string();
        match load(p)? {
            Input::Alignment(r) => {
                for m in [&r.correlation, &r.mutual_information, &r.overlap]
                    .into_iter()
                    .flatten()
                {
                    check_square(&name, &r.languages, m)?;
                }
                let step = r.checkpoint_step;
                if alignments.insert(step, (name.clone(), r)).is_some() {
                    return Err(XlgError::Validation(format!(
                        "{name}: second alignment report for checkpoint {step}"
                    ))
                    .into());
                }
            }
            Input::Probe(run) => {
                for r in run.reports {
                    let step = r.checkpoint_step;
                    if trajectory.insert(step, r).is_some() {
                        return Err(XlgError::Validation(format!(
                            "{name}: second probe report for checkpoint {step}"
                        ))
                        .into());
                    }
                }
            }
            Input::Frequency(r) => frequencies.push(r),
        }
    }

    create_dir(&a.out)?;
    let single = alignments.len() == 1;
    for (step, (_, r)) in &alignments {
        let metrics = [
            ("correlation", &r.correlation),
            ("mutual_information", &r.mutual_information),
            ("overlap", &r.overlap),
        ];
        for (metric, matrix) in metrics {
            if let Some(m) = matrix {
                let file = if single {
                    format!("alignment_{metric}.csv")
                } else {
                    format!("alignment_{metric}_step{step}.csv")
                };
                let path = a.out.join(&file);
                write_matrix_csv(&path, &r.languages, m)?;
                rec.output(&path, file);
            }
        }
    }

    let profiles: Vec<_> = alignments
        .values()
        .filter_map(|(_, r)| r.layer_profile.as_ref())
        .collect();
    if !profiles.is_empty() {
        let file = "layer_profile.csv";
        let path = a.out.join(file);
        let mut w = csv_writer(&path)?;
        w.write_record(["step", "k", "layer", "expert_fraction", "cross_lingual_overlap"])?;
        for p in profiles {
            for (layer, frac) in p.expert_fraction.iter().enumerate() {
                let overlap = p
                    .cross_lingual_overlap
                    .as_ref()
                    .and_then(|o| o.get(layer))
                    .map(|v| v.to_string())
                    .unwrap_or_default();
                w.write_record([
                    p.checkpoint_step.to_string(),
                    p.k.to_string(),
                    layer.to_string(),
                    frac.to_string(),
                    overlap,
                ])?;
            }
        }
        finish(w, &path)?;
        rec.output(&path, file);
    }

    if !trajectory.is_empty() {
        let file = "probe_trajectory.csv";
        let path = a.out.join(file);
        let mut w = csv_writer(&path)?;
        w.write_record(["step", "mean", "std", "first_layer"])?;
        for (step, r) in &trajectory {
            w.write_record([
                step.to_string(),
                r.mean_over_layers.to_string(),
                r.std_over_layers.to_string(),
                r.first_layer.to_string(),
            ])?;
        }
        finish(w, &path)?;
        rec.output(&path, file);
    }

    if !frequencies.is_empty() {
        let file = "language_frequency.csv";
        let path = a.out.join(file);
        let mut w = csv_writer(&path)?;
        w.write_record([
            "step",
            "source_language",
            "rank",
            "language",
            "count",
            "frequency",
            "in_top_n",
        ])?;
        let mut groups: Vec<_> = frequencies
            .iter()
            .flat_map(|r| r.groups.iter().map(move |g| (r.top_n, g)))
            .collect();
        groups.sort_by(|a, b| {
            (a.1.checkpoint_step, &a.1.source_language).cmp(&(b.1.checkpoint_step, &b.1.source_language))
        });
        for pair in groups.windows(2) {
            if (pair[0].1.checkpoint_step, &pair[0].1.source_language)
                == (pair[1].1.checkpoint_step, &pair[1].1.source_language)
            {
                return Err(XlgError::Validation(format!(
                    "two frequency groups for checkpoint {}, source language {:?}",
                    pair[0].1.checkpoint_step, pair[0].1.source_language
                ))
                .into());
            }
        }
        for (top_n, g) in groups {
            for (rank, share) in g.all.iter().enumerate() {
                w.write_record([
                    g.checkpoint_step.to_string(),
                    g.source_language.clone(),
                    (rank + 1).to_string(),
                    share.language.clone(),
                    share.count.to_string(),
                    share.frequency.to_string(),
                    (rank < top_n).to_string(),
                ])?;
            }
        }
        finish(w, &path)?;
        rec.output(&path, file);
    }
    rec.finish(&a.out.join("manifest.json"))
}
