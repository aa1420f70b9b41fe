// SPDX-License-Identifier: MIT OR Apache-2.0

//! Acceptance suite. Every criterion prints one `PASS` or `FAIL` line; the
//! process exits non-zero if any criterion fails.
//!
//! Oracles here are written independently of the engine: an exhaustive
//! threshold sweep for Average Precision, the closed form for Fisher-Z, the
//! analytic Gaussian mutual information, construction truth for planted
//! experts and chance level for shuffled probes.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use xlg_core::actstore::{hidden_state_samples, HiddenStateSample, RowMeta, XlgaFile};
use xlg_core::align::{layer_overlaps, AlignmentReport};
use xlg_core::corpus::Sample;
use xlg_core::expert::ExpertScoreVector;
use xlg_core::probe::{
    synth_hidden_dumps, train_probe, HiddenSynth, LabeledVectors, ProbeReport, SweepOptions, TrainOptions,
};
use xlg_core::rng::stream;
use xlg_core::steer::{GenerationParams, NeuronClamp};
use xlg_core::{
    average_precision, emit_spec, fisher_z_average, mutual_information_knn, overlap_proportion, probe_sweep,
    read_activation_matrix, read_expert_scores, score_matrix, write_activation_matrix, write_expert_scores,
    ActivationMatrix, ColumnSource, ConceptCatalog, ConceptDataset, InterventionSpec, LayerLayout,
    MatrixHeader, Pooling, ScoreOptions, TopKSet,
};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

struct Suite {
    failed: usize,
    total: usize,
}

impl Suite {
    fn check(&mut self, name: &str, f: impl FnOnce() -> Outcome) {
        self.total += 1;
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS  {name:<34} {detail} [{secs:.1}s]"),
            Err(detail) => {
                self.failed += 1;
                println!("FAIL  {name:<34} {detail} [{secs:.1}s]");
            }
        }
    }
}

// ---------------------------------------------------------------- AP

/// Area under the step precision-recall curve by sweeping every distinct
/// score as a threshold (predict positive when score >= t).
fn sweep_ap(scores: &[f64], labels: &[u8]) -> f64 {
    let n_pos = labels.iter().filter(|&&b| b == 1).count() as f64;
    let mut thresholds = scores.to_vec();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for t in thresholds {
        let (mut tp, mut fp) = (0.0, 0.0);
        for (&s, &b) in scores.iter().zip(labels) {
            if s >= t {
                if b == 1 {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        let recall = tp / n_pos;
        ap += (recall - prev_recall) * (tp / (tp + fp));
        prev_recall = recall;
    }
    ap
}

fn ap_instance(rng: &mut impl Rng) -> (Vec<f64>, Vec<u8>) {
    let n = rng.random_range(2..=64usize);
    let mut labels: Vec<u8> = (0..n).map(|_| rng.random_range(0..2u8)).collect();
    labels[0] = 1;
    labels[1] = 0;
    labels.shuffle(rng);
    let levels = rng.random_range(1..=n);
    let mut scores: Vec<f64> = if rng.random_bool(0.5) {
        // coarse grid: ties everywhere
        (0..n)
            .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
            .collect()
    } else {
        (0..n).map(|_| rng.random::<f64>()).collect()
    };
    // copy a few values onto other positions
    for _ in 0..rng.random_range(0..=n / 2) {
        let (a, b) = (rng.random_range(0..n), rng.random_range(0..n));
        scores[a] = scores[b];
    }
    (scores, labels)
}

fn ap_oracle_equivalence() -> Outcome {
    let mut rng = stream(2024, "acceptance/ap");
    let t = Instant::now();
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (s, l) = ap_instance(&mut rng);
        let got = average_precision(&s, &l).map_err(|e| e.to_string())?;
        worst = worst.max((got - sweep_ap(&s, &l)).abs());
    }
    let secs = t.elapsed().as_secs_f64();
    ensure(worst <= 1e-12, format!("max |engine - oracle| = {worst:e}"))?;
    ensure(secs < 5.0, format!("took {secs:.2}s"))?;
    Ok(format!("1000 instances, max diff {worst:e}, {secs:.3}s"))
}

fn ap_closed_cases() -> Outcome {
    let perfect = average_precision(&[0.9, 0.8, 0.3, 0.1], &[1, 1, 0, 0]).unwrap();
    ensure(perfect == 1.0, format!("perfect ranking gave {perfect}"))?;
    for (p, q) in [(1usize, 1usize), (3, 7), (10, 90), (50, 50)] {
        let labels: Vec<u8> = (0..p + q).map(|i| u8::from(i < p)).collect();
        let got = average_precision(&vec![0.5; p + q], &labels).unwrap();
        let want = p as f64 / (p + q) as f64;
        ensure(
            (got - want).abs() <= 1e-12,
            format!("all tied {p}/{q}: {got} vs {want}"),
        )?;
    }
    let worked = average_precision(&[0.9, 0.8, 0.7, 0.6], &[1, 0, 1, 0]).unwrap();
    ensure(
        (worked - 5.0 / 6.0).abs() <= 1e-12,
        format!("worked example {worked}"),
    )?;
    Ok(format!(
        "perfect 1, all-tied prevalence, worked example {worked:.12}"
    ))
}

// ---------------------------------------------------------------- Fisher-Z

fn fisher_z() -> Outcome {
    for r in [-0.9, -0.3, 0.0, 0.42, 0.99] {
        let got = fisher_z_average(&[r, r, r]).unwrap();
        ensure((got - r).abs() <= 1e-12, format!("identity at {r}: {got}"))?;
    }
    let oracle = ((0.8f64.atanh() + 0.2f64.atanh()) / 2.0).tanh();
    let got = fisher_z_average(&[0.8, 0.2]).unwrap();
    ensure(
        (got - oracle).abs() <= 1e-5,
        format!("[0.8, 0.2] gave {got}, closed form {oracle}"),
    )?;
    let mut rng = stream(5, "acceptance/fisher");
    for _ in 0..1000 {
        let n = rng.random_range(2..12);
        let rs: Vec<f64> = (0..n).map(|_| rng.random_range(-0.999..0.999)).collect();
        let lo = rs.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = rs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if lo == hi {
            continue;
        }
        let z = fisher_z_average(&rs).unwrap();
        ensure(
            lo < z && z < hi,
            format!("{z} not inside ({lo}, {hi}) for {rs:?}"),
        )?;
    }
    Ok(format!(
        "[0.8, 0.2] -> {got:.7} (closed form {oracle:.7}); 1000 interior cases"
    ))
}

// ---------------------------------------------------------------- KSG

fn gaussian_pair(seed: u64, m: usize, rho: f64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = stream(seed, "acceptance/ksg");
    let mut x = Vec::with_capacity(m);
    let mut y = Vec::with_capacity(m);
    for _ in 0..m {
        let a: f64 = StandardNormal.sample(&mut rng);
        let b: f64 = StandardNormal.sample(&mut rng);
        x.push(a);
        y.push(rho * a + (1.0 - rho * rho).sqrt() * b);
    }
    (x, y)
}

fn ksg_mi() -> Outcome {
    let analytic = -0.5 * (1.0f64 - 0.64).ln();
    let mut corr = Vec::new();
    let mut indep = Vec::new();
    for seed in 0..10 {
        let (x, y) = gaussian_pair(seed, 4096, 0.8);
        let a = mutual_information_knn(&x, &y, 3).unwrap();
        let b = mutual_information_knn(&y, &x, 3).unwrap();
        ensure(
            a.to_bits() == b.to_bits(),
            format!("seed {seed}: I(x,y)={a} but I(y,x)={b}"),
        )?;
        corr.push(a);
        let (u, v) = gaussian_pair(1000 + seed, 4096, 0.0);
        indep.push(mutual_information_knn(&u, &v, 3).unwrap());
    }
    let mean = corr.iter().sum::<f64>() / 10.0;
    let indep_max = indep.iter().cloned().fold(0.0, f64::max);
    ensure(
        (mean - analytic).abs() <= 0.07,
        format!("mean {mean:.4} vs analytic {analytic:.4}"),
    )?;
    ensure(
        indep_max <= 0.05,
        format!("independent inputs up to {indep_max:.4} nats"),
    )?;
    Ok(format!(
        "rho=0.8 mean {mean:.4} (analytic {analytic:.4}); independent max {indep_max:.4}; symmetric"
    ))
}

// ---------------------------------------------------------------- CLI helpers

fn xlg(workers: u32, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_xlg"))
        .arg("--workers")
        .arg(workers.to_string())
        .args(args)
        .env_remove("XLG_WORKERS")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "xlg {} exited {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr)
        ))
    }
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// Every file under `root`, by relative path.
fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

// ---------------------------------------------------------------- planted

fn planted_end_to_end() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let root = tmp.path();
    let (synth, experts, report) = (root.join("synth"), root.join("experts"), root.join("align.json"));
    let t = Instant::now();
    xlg(
        1,
        &[
            "synth",
            "--seed",
            "11",
            "--concepts",
            "5",
            "--languages",
            "en,es,zh",
            "--n-pos",
            "100",
            "--n-neg",
            "100",
            "--layer-sizes",
            "2048,2048,2048,2048",
            "--planted",
            "100",
            "--signal",
            "1.0",
            "--noise-sd",
            "0.1",
            "--out",
            p(&synth),
        ],
    )?;
    xlg(
        1,
        &[
            "experts",
            "--activations",
            p(&synth.join("activations")),
            "--out",
            p(&experts),
            "--top-k",
            "100",
        ],
    )?;
    xlg(
        1,
        &[
            "align",
            "--experts-dir",
            p(&experts),
            "--k",
            "100",
            "--out",
            p(&report),
        ],
    )?;
    let secs = t.elapsed().as_secs_f64();

    let planted = read_json(&synth.join("planted.json"));
    let layout = LayerLayout::new(vec![2048; 4]).unwrap();
    let mut min_recall: f64 = 1.0;
    let mut sets: BTreeMap<(String, String), TopKSet> = BTreeMap::new();
    for entry in std::fs::read_dir(&experts).unwrap() {
        let path = entry.unwrap().path();
        if !path.to_string_lossy().ends_with(".topk.json") {
            continue;
        }
        let doc = read_json(&path);
        let concept = doc["concept_id"].as_str().unwrap().to_string();
        let language = doc["language"].as_str().unwrap().to_string();
        let members: Vec<usize> = doc["members"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_u64().unwrap() as usize)
            .collect();
        let truth: BTreeSet<usize> = planted["concepts"][&concept]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_u64().unwrap() as usize)
            .collect();
        let hits = members.iter().filter(|g| truth.contains(g)).count();
        min_recall = min_recall.min(hits as f64 / truth.len() as f64);
        sets.insert((concept, language), TopKSet { k: 100, members });
    }
    ensure(
        sets.len() == 15,
        format!("expected 15 top-k sets, found {}", sets.len()),
    )?;
    ensure(min_recall >= 0.95, format!("recall {min_recall}"))?;

    let r: AlignmentReport = serde_json::from_value(read_json(&report)).unwrap();
    let overlap = r.overlap.as_ref().unwrap();
    let mut min_overlap: f64 = 1.0;
    for i in 0..3 {
        for j in 0..3 {
            if i != j {
                min_overlap = min_overlap.min(overlap[i][j]);
            }
        }
    }
    ensure(
        min_overlap >= 0.90,
        format!("cross-lingual overlap {min_overlap}"),
    )?;

    let mut worst_split: f64 = 0.0;
    for c in &r.concepts {
        for a in &r.languages {
            for b in &r.languages {
                let (s1, s2) = (&sets[&(c.clone(), a.clone())], &sets[&(c.clone(), b.clone())]);
                let whole = overlap_proportion(s1, s2).unwrap();
                let parts: f64 = layer_overlaps(s1, s2, &layout).unwrap().iter().sum();
                worst_split = worst_split.max((whole - parts).abs());
            }
        }
    }
    let profile = r.layer_profile.as_ref().unwrap();
    let profile_sum: f64 = profile.cross_lingual_overlap.as_ref().unwrap().iter().sum();
    worst_split = worst_split.max((profile_sum - r.mean_pairwise_overlap().unwrap()).abs());
    ensure(
        worst_split <= 1e-9,
        format!("per-layer overlaps miss the global value by {worst_split:e}"),
    )?;
    ensure(secs < 60.0, format!("pipeline took {secs:.1}s"))?;
    Ok(format!(
        "recall {min_recall:.3}, overlap {min_overlap:.3}, layer split err {worst_split:e}, pipeline {secs:.1}s"
    ))
}

// ---------------------------------------------------------------- probes

fn hidden(seed: u64, languages: &[&str], separable_from: usize, n_layers: usize) -> Vec<HiddenStateSample> {
    let spec = HiddenSynth {
        languages: languages.iter().map(|s| s.to_string()).collect(),
        sentences_per_language: 100,
        n_layers,
        dim: 8,
        separable_from_layer: separable_from,
        separation: 6.0,
        model_id: "acceptance".into(),
        checkpoint_step: 0,
    };
    synth_hidden_dumps(seed, &spec)
        .unwrap()
        .iter()
        .flat_map(|m| hidden_state_samples(m).unwrap())
        .collect()
}

fn population_mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn check_aggregates(r: &ProbeReport) -> Result<f64, String> {
    let mut worst: f64 = 0.0;
    let mut means = Vec::new();
    for l in &r.layers {
        let (m, s) = population_mean_std(&l.accuracies);
        worst = worst.max((m - l.mean).abs()).max((s - l.std).abs());
        means.push(m);
    }
    let (m, s) = population_mean_std(&means);
    worst = worst
        .max((m - r.mean_over_layers).abs())
        .max((s - r.std_over_layers).abs())
        .max((means[0] - r.first_layer).abs());
    ensure(worst <= 1e-12, format!("aggregates off by {worst:e}"))?;
    Ok(worst)
}

fn probe_suites() -> Outcome {
    let languages = ["de", "en", "es", "fr"];
    let seeds: Vec<u64> = (0..10).collect();
    let options = SweepOptions {
        seeds: seeds.clone(),
        ..SweepOptions::default()
    };

    let separable = probe_sweep(&hidden(1, &languages, 0, 2), 0, &options).map_err(|e| e.to_string())?;
    for l in &separable.layers {
        ensure(
            l.accuracies.iter().all(|&a| a == 1.0),
            format!("separable layer {} accuracies {:?}", l.layer, l.accuracies),
        )?;
    }

    // reassign language labels to whole sentences at random
    let mut samples = hidden(2, &languages, 0, 2);
    let mut sentence_keys: Vec<(String, String)> = samples
        .iter()
        .map(|s| (s.language.clone(), s.sample_id.clone()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut shuffled_langs: Vec<String> = sentence_keys.iter().map(|k| k.0.clone()).collect();
    shuffled_langs.shuffle(&mut stream(3, "acceptance/shuffle"));
    let relabel: BTreeMap<(String, String), String> = sentence_keys.drain(..).zip(shuffled_langs).collect();
    for s in &mut samples {
        let key = (s.language.clone(), s.sample_id.clone());
        s.sample_id = format!("{}:{}", s.language, s.sample_id);
        s.language = relabel[&key].clone();
    }
    let shuffled = probe_sweep(&samples, 0, &options).map_err(|e| e.to_string())?;
    for l in &shuffled.layers {
        ensure(
            (l.mean - 0.25).abs() <= 0.1,
            format!("shuffled layer {} mean accuracy {}", l.layer, l.mean),
        )?;
    }

    // loss traces from direct training runs on both kinds of data
    let mut traces = 0;
    for (data, from) in [
        (hidden(4, &languages, 0, 1), 0usize),
        (hidden(5, &languages, 9, 1), 9),
    ] {
        let mut train = LabeledVectors::new(8);
        for s in &data {
            let class = languages.iter().position(|l| *l == s.language).unwrap();
            train.push(&s.vector, class).unwrap();
        }
        let model = train_probe(
            &train,
            4,
            TrainOptions::from_inverse_regularization(1.0, train.len()),
        )
        .unwrap();
        ensure(
            model.loss_trace.windows(2).all(|w| w[1] <= w[0]),
            format!("loss trace increases (separable from layer {from})"),
        )?;
        traces += 1;
    }

    let worst = check_aggregates(&separable)?.max(check_aggregates(&shuffled)?);
    let shuffled_mean = shuffled.mean_over_layers;
    Ok(format!(
        "separable 1.0; shuffled mean {shuffled_mean:.3}; {traces} monotone traces; aggregates err {worst:e}"
    ))
}

// ---------------------------------------------------------------- determinism

fn records_jsonl() -> String {
    let mut rng = stream(9, "acceptance/records");
    let langs = ["en", "es", "unknown", "fr", "de"];
    let mut out = String::new();
    for step in [1000u64, 400000] {
        for seed in 0..100u64 {
            let detected = langs[rng.random_range(0..langs.len())];
            out.push_str(&format!(
                "{{\"concept_id\":\"synth-0000\",\"source_language\":\"es\",\"checkpoint_step\":{step},\"seed\":{seed},\"detected_language\":\"{detected}\"}}\n"
            ));
        }
    }
    out
}

fn pipeline(root: &Path, workers: u32) -> Result<(), String> {
    let synth = root.join("synth");
    let experts = root.join("experts");
    xlg(
        workers,
        &[
            "synth",
            "--seed",
            "21",
            "--concepts",
            "3",
            "--languages",
            "aa,bb,cc",
            "--n-pos",
            "40",
            "--n-neg",
            "60",
            "--layer-sizes",
            "128,128,256",
            "--planted",
            "20",
            "--hidden-sentences",
            "40",
            "--hidden-layers",
            "3",
            "--hidden-dim",
            "6",
            "--hidden-separable-from",
            "1",
            "--out",
            p(&synth),
        ],
    )?;
    xlg(
        workers,
        &[
            "ingest",
            "--catalog",
            p(&synth.join("catalog.json")),
            "--activations",
            p(&synth.join("activations")),
            "--out",
            p(&root.join("ingest")),
        ],
    )?;
    xlg(
        workers,
        &[
            "experts",
            "--activations",
            p(&synth.join("activations")),
            "--out",
            p(&experts),
            "--top-k",
            "25",
        ],
    )?;
    let align = root.join("out/align.json");
    xlg(
        workers,
        &[
            "align",
            "--experts-dir",
            p(&experts),
            "--k",
            "25",
            "--per-concept",
            "--csv",
            "--out",
            p(&align),
        ],
    )?;
    let probe = root.join("out/probe.json");
    xlg(
        workers,
        &[
            "probe",
            "--hidden-dir",
            p(&synth.join("hidden")),
            "--seeds",
            "0,1,2",
            "--csv",
            "--out",
            p(&probe),
        ],
    )?;
    xlg(
        workers,
        &[
            "steer-spec",
            "--experts",
            p(&experts.join("synth-0001__bb.xlge")),
            "--activations",
            p(&synth.join("activations/synth-0001__bb.xlga")),
            "--k",
            "25",
            "--out",
            p(&root.join("out/spec.json")),
        ],
    )?;
    let records = root.join("records.jsonl");
    std::fs::write(&records, records_jsonl()).map_err(|e| e.to_string())?;
    let freq = root.join("out/freq.json");
    xlg(
        workers,
        &["lang-freq", "--records", p(&records), "--out", p(&freq)],
    )?;
    xlg(
        workers,
        &[
            "report",
            p(&align),
            p(&probe),
            p(&freq),
            "--out",
            p(&root.join("bundle")),
        ],
    )?;
    Ok(())
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut trees: Vec<(String, BTreeMap<String, Vec<u8>>)> = Vec::new();
    for workers in [1u32, 4, 8] {
        for run in 0..2 {
            let root: PathBuf = tmp.path().join(format!("w{workers}-r{run}"));
            pipeline(&root, workers)?;
            trees.push((format!("workers={workers} run={run}"), tree(&root)));
        }
    }
    let (base_name, base) = &trees[0];
    for (name, t) in &trees[1..] {
        ensure(
            t.keys().eq(base.keys()),
            format!("{name} wrote a different file set than {base_name}"),
        )?;
        for (file, bytes) in t {
            ensure(
                &base[file] == bytes,
                format!("{file} differs between {base_name} and {name}"),
            )?;
        }
    }
    Ok(format!(
        "8 commands x 6 runs, {} files byte-identical",
        base.len()
    ))
}

// ---------------------------------------------------------------- performance

const PERF_ROWS: usize = 2000;
const PERF_COLS: usize = 1 << 20;
const PERF_CHILD: &str = "XLG_ACCEPTANCE_CHILD";

/// Matrix whose values are generated on demand; only the worker block
/// buffers are ever resident.
struct Procedural {
    header: MatrixHeader,
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl ColumnSource for Procedural {
    fn header(&self) -> &MatrixHeader {
        &self.header
    }

    fn read_columns(&self, start: usize, buf: &mut [f32]) -> xlg_core::Result<()> {
        let n = self.header.n_rows;
        for (c, col) in buf.chunks_exact_mut(n).enumerate() {
            let g = (start + c) as u64;
            for (r, v) in col.iter_mut().enumerate() {
                let bits = mix(g << 11 | r as u64);
                let shift = if self.header.labels[r] == 1 && g.is_multiple_of(97) {
                    0.5
                } else {
                    0.0
                };
                *v = (bits >> 40) as f32 / (1u64 << 24) as f32 + shift;
            }
        }
        Ok(())
    }
}

fn vm_hwm_kib() -> Option<u64> {
    let status = std::fs::read_to_string("/proc/self/status").ok()?;
    let line = status.lines().find(|l| l.starts_with("VmHWM:"))?;
    line.split_whitespace().nth(1)?.parse().ok()
}

/// Runs inside the child process so the peak-memory reading covers only scoring.
fn perf_child() {
    let header = MatrixHeader {
        model_id: "procedural".into(),
        checkpoint_step: 0,
        concept_id: "perf".into(),
        language: "xx".into(),
        pooling: Pooling::Max,
        layer_sizes: LayerLayout::uniform(16, PERF_COLS / 16).unwrap(),
        n_rows: PERF_ROWS,
        sample_ids: (0..PERF_ROWS).map(|i| format!("s{i}")).collect(),
        labels: (0..PERF_ROWS).map(|i| u8::from(i % 4 == 0)).collect(),
        hook_point: None,
        row_meta: None,
    };
    let source = Procedural { header };
    let t = Instant::now();
    let e = score_matrix(&source, ScoreOptions::default()).unwrap();
    let secs = t.elapsed().as_secs_f64();
    let planted_min = (0..PERF_COLS)
        .step_by(97)
        .map(|g| e.scores()[g])
        .fold(1.0, f64::min);
    println!(
        "secs={secs} hwm_kib={} threads={} planted_min={planted_min}",
        vm_hwm_kib().unwrap_or(u64::MAX),
        rayon::current_num_threads()
    );
}

fn performance() -> Outcome {
    let out = Command::new(std::env::current_exe().unwrap())
        .env(PERF_CHILD, "perf")
        .output()
        .map_err(|e| e.to_string())?;
    let text = String::from_utf8_lossy(&out.stdout).into_owned();
    ensure(
        out.status.success(),
        format!("child failed: {}", String::from_utf8_lossy(&out.stderr)),
    )?;
    let field = |key: &str| -> String {
        text.split_whitespace()
            .find_map(|kv| kv.strip_prefix(&format!("{key}=")).map(str::to_string))
            .unwrap_or_default()
    };
    let secs: f64 = field("secs")
        .parse()
        .map_err(|_| format!("unparsable child output {text:?}"))?;
    let hwm: u64 = field("hwm_kib")
        .parse()
        .map_err(|_| format!("unparsable child output {text:?}"))?;
    let threads = field("threads");
    let mib = hwm as f64 / 1024.0;
    ensure(secs <= 60.0, format!("{secs:.1}s on {threads} thread(s)"))?;
    ensure(mib <= 2048.0, format!("peak memory {mib:.0} MiB"))?;
    Ok(format!(
        "M=2^20 x N=2000 in {secs:.1}s on {threads} thread(s), peak {mib:.0} MiB"
    ))
}

// ---------------------------------------------------------------- formats

fn finite_f32(rng: &mut impl Rng) -> f32 {
    loop {
        let v = f32::from_bits(rng.random());
        if v.is_finite() {
            return v;
        }
    }
}

fn ident(rng: &mut impl Rng) -> String {
    const POOL: &[&str] = &[
        "a",
        "β",
        "x-y",
        "z_1",
        "\"q\"",
        "line\nbreak",
        "中文",
        "sp ace",
        "\\",
    ];
    (0..rng.random_range(1..4))
        .map(|_| *POOL.choose(rng).unwrap())
        .collect()
}

fn random_matrix(rng: &mut impl Rng) -> ActivationMatrix {
    let sizes: Vec<usize> = (0..rng.random_range(1..4))
        .map(|_| rng.random_range(1..6))
        .collect();
    let layout = LayerLayout::new(sizes).unwrap();
    let token = rng.random_bool(0.3);
    let n = rng.random_range(1..9);
    let (sample_ids, row_meta) = if token {
        let meta: Vec<RowMeta> = (0..n)
            .map(|r| RowMeta {
                layer: r,
                token_position: rng.random_range(0..50),
            })
            .collect();
        (vec!["sent".to_string(); n], Some(meta))
    } else {
        ((0..n).map(|i| format!("{}{i}", ident(rng))).collect(), None)
    };
    let header = MatrixHeader {
        model_id: ident(rng),
        checkpoint_step: rng.random(),
        concept_id: ident(rng),
        language: ident(rng),
        pooling: if token { Pooling::Token } else { Pooling::Max },
        layer_sizes: layout.clone(),
        n_rows: n,
        sample_ids,
        labels: (0..n).map(|_| rng.random_range(0..2)).collect(),
        hook_point: rng.random_bool(0.5).then(|| ident(rng)),
        row_meta,
    };
    let values = (0..n * layout.total()).map(|_| finite_f32(rng)).collect();
    ActivationMatrix::new(header, values).unwrap()
}

fn same_bits(a: &ActivationMatrix, b: &ActivationMatrix) -> bool {
    a.header() == b.header()
        && a.values().len() == b.values().len()
        && a.values()
            .iter()
            .zip(b.values())
            .all(|(x, y)| x.to_bits() == y.to_bits())
}

fn format_round_trips() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut rng = stream(77, "acceptance/formats");
    for i in 0..200 {
        let m = random_matrix(&mut rng);
        let path = tmp.path().join("m.xlga");
        write_activation_matrix(&m, &path).unwrap();
        let back = read_activation_matrix(&path).unwrap();
        ensure(same_bits(&m, &back), format!("XLGA instance {i} changed"))?;
        let streamed = XlgaFile::open(&path).unwrap().read_all().unwrap();
        ensure(
            same_bits(&m, &streamed),
            format!("XLGA instance {i} changed via XlgaFile"),
        )?;

        let layout = m.layout().clone();
        let scores: Vec<f64> = (0..layout.total())
            .map(|_| match rng.random_range(0..4) {
                0 => 0.0,
                1 => 1.0,
                _ => rng.random::<f64>(),
            })
            .collect();
        let e = ExpertScoreVector::new(
            ident(&mut rng),
            ident(&mut rng),
            rng.random(),
            layout.clone(),
            scores,
        )
        .unwrap();
        let path = tmp.path().join("e.xlge");
        write_expert_scores(&e, &path).unwrap();
        let back = read_expert_scores(&path).unwrap();
        ensure(
            back.concept_id == e.concept_id
                && back.language == e.language
                && back.checkpoint_step == e.checkpoint_step
                && back.layout() == e.layout()
                && back
                    .scores()
                    .iter()
                    .zip(e.scores())
                    .all(|(a, b)| a.to_bits() == b.to_bits()),
            format!("XLGE instance {i} changed"),
        )?;

        let mut pairs: Vec<(usize, usize)> = (0..4).flat_map(|l| (0..8).map(move |j| (l, j))).collect();
        pairs.shuffle(&mut rng);
        let clamps: Vec<NeuronClamp> = pairs[..rng.random_range(1..10)]
            .iter()
            .map(|&(layer, index)| NeuronClamp {
                layer,
                index,
                value: finite_f32(&mut rng),
            })
            .collect();
        let generation = GenerationParams {
            p: rng.random_range(0.01..=1.0),
            temperature: rng.random_range(0.01..3.0),
            max_length: rng.random_range(1..512),
            n_seeds: rng.random_range(1..1000),
            prompt: ident(&mut rng),
        };
        let hook = ident(&mut rng);
        let spec = emit_spec(
            &ident(&mut rng),
            &ident(&mut rng),
            rng.random(),
            clamps,
            Some(generation),
            Some(&hook),
        )
        .unwrap();
        let text = spec.to_json();
        let parsed = InterventionSpec::from_json(&text, "spec").unwrap();
        ensure(
            parsed == spec && parsed.to_json() == text,
            format!("spec instance {i} changed"),
        )?;

        let n_langs = rng.random_range(1..4);
        let langs: Vec<String> = (0..n_langs).map(|l| format!("{}{l}", ident(&mut rng))).collect();
        let mut datasets = Vec::new();
        for c in 0..rng.random_range(1..4) {
            let concept_id = format!("{}{c}", ident(&mut rng));
            let n = rng.random_range(2..8);
            let samples: Vec<Sample> = (0..n)
                .map(|s| Sample {
                    id: format!("{}{s}", ident(&mut rng)),
                    label: u8::from(s == 0 || (s > 1 && rng.random_bool(0.5))),
                })
                .collect();
            for l in &langs {
                datasets.push(ConceptDataset {
                    concept_id: concept_id.clone(),
                    language: l.clone(),
                    samples: samples.clone(),
                });
            }
        }
        let catalog = ConceptCatalog::new(rng.random_bool(0.5), datasets).unwrap();
        let text = catalog.to_manifest_string();
        let parsed = ConceptCatalog::from_manifest_str(&text, "catalog").unwrap();
        ensure(
            parsed == catalog && parsed.to_manifest_string() == text,
            format!("catalog instance {i} changed"),
        )?;
    }
    Ok("200 instances each of XLGA, XLGE, intervention spec, catalog manifest".into())
}

fn main() {
    if std::env::var(PERF_CHILD).as_deref() == Ok("perf") {
        perf_child();
        return;
    }
    // libtest-style flags (e.g. from `cargo test -- --nocapture`) are ignored
    let mut suite = Suite { failed: 0, total: 0 };
    suite.check("ap-oracle-equivalence", ap_oracle_equivalence);
    suite.check("ap-closed-cases", ap_closed_cases);
    suite.check("fisher-z", fisher_z);
    suite.check("ksg-mutual-information", ksg_mi);
    suite.check("planted-expert-end-to-end", planted_end_to_end);
    suite.check("probe-suites", probe_suites);
    suite.check("cli-determinism", determinism);
    suite.check("performance-score-matrix", performance);
    suite.check("format-round-trips", format_round_trips);
    println!(
        "{} of {} criteria passed",
        suite.total - suite.failed,
        suite.total
    );
    if suite.failed > 0 {
        std::process::exit(1);
    }
}
