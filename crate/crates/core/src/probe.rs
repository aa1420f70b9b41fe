// SPDX-License-Identifier: MIT OR Apache-2.0

//! Language-identity probing.
//!
//! Per layer, a multinomial logistic regression is trained on hidden states
//! taken at one random token position per sentence and asked to predict the
//! sentence's language. Accuracy per layer (mean and spread over seeds) and
//! its aggregates over layers describe how language identity is encoded.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::actstore::{ActivationMatrix, HiddenStateSample, LayerLayout, MatrixHeader, Pooling, RowMeta};
use crate::error::{Result, XlgError};
use crate::rng;

/// One uniformly drawn token position per sentence, from the stream `probe/positions`.
pub fn sample_positions(sentence_lengths: &[usize], seed: u64) -> Result<Vec<usize>> {
    if let Some(i) = sentence_lengths.iter().position(|&l| l == 0) {
        return Err(XlgError::Argument(format!("sentence {i} has no tokens")));
    }
    let mut rng = rng::stream(seed, "probe/positions");
    Ok(sentence_lengths
        .iter()
        .map(|&len| rng.random_range(0..len))
        .collect())
}

/// Dense feature rows with class labels `0..n_classes`.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledVectors {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<usize>,
}

impl LabeledVectors {
    pub fn new(dim: usize) -> Self {
        LabeledVectors {
            dim,
            features: Vec::new(),
            labels: Vec::new(),
        }
    }

    pub fn push(&mut self, x: &[f32], label: usize) -> Result<()> {
        if x.len() != self.dim {
            return Err(XlgError::Argument(format!(
                "vector of dimension {} in a set of dimension {}",
                x.len(),
                self.dim
            )));
        }
        self.features.extend(x.iter().map(|&v| f64::from(v)));
        self.labels.push(label);
        Ok(())
    }

    pub fn push_f64(&mut self, x: &[f64], label: usize) -> Result<()> {
        if x.len() != self.dim {
            return Err(XlgError::Argument(format!(
                "vector of dimension {} in a set of dimension {}",
                x.len(),
                self.dim
            )));
        }
        self.features.extend_from_slice(x);
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }
}

/// Trained softmax classifier. Weights are stored class-major (`n_classes x dim`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    pub n_classes: usize,
    pub dim: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// Objective value at the start and after every accepted step.
    pub loss_trace: Vec<f64>,
}

impl ProbeModel {
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_classes)
            .map(|c| {
                let w = &self.weights[c * self.dim..(c + 1) * self.dim];
                self.bias[c] + w.iter().zip(x).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }

    /// Arg-max class; ties go to the lowest class index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let scores = self.scores(x);
        let mut best = 0;
        for (c, &s) in scores.iter().enumerate().skip(1) {
            if s > scores[best] {
                best = c;
            }
        }
        best
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainOptions {
    /// Coefficient of `0.5 * ||W||^2` added to the mean cross-entropy.
    pub l2_strength: f64,
    pub max_iters: usize,
    /// Convergence threshold on the largest absolute gradient entry.
    pub tol: f64,
}

impl TrainOptions {
    /// Same minimiser as an inverse-regularisation `c` on the summed loss
    /// over `n_train` points (`C * sum(loss) + 0.5 * ||W||^2`).
    pub fn from_inverse_regularization(c: f64, n_train: usize) -> Self {
        TrainOptions {
            l2_strength: 1.0 / (c * n_train as f64),
            max_iters: 1000,
            tol: 1e-4,
        }
    }
}

struct Objective<'a> {
    data: &'a LabeledVectors,
    n_classes: usize,
    l2: f64,
}

impl Objective<'_> {
    fn n_params(&self) -> usize {
        self.n_classes * (self.data.dim + 1)
    }

    /// Mean cross-entropy plus L2 on the weights (bias unpenalised); fills `grad`.
    fn eval(&self, theta: &[f64], grad: &mut [f64]) -> f64 {
        let d = self.data.dim;
        let k = self.n_classes;
        let n = self.data.len() as f64;
        let (w, b) = theta.split_at(k * d);
        grad.iter_mut().for_each(|g| *g = 0.0);
        let mut loss = 0.0;
        let mut z = vec![0.0; k];
        for i in 0..self.data.len() {
            let x = self.data.row(i);
            let y = self.data.labels[i];
            for c in 0..k {
                z[c] = b[c]
                    + w[c * d..(c + 1) * d]
                        .iter()
                        .zip(x)
                        .map(|(a, v)| a * v)
                        .sum::<f64>();
            }
            let zmax = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum_exp: f64 = z.iter().map(|v| (v - zmax).exp()).sum();
            let lse = zmax + sum_exp.ln();
            loss += lse - z[y];
            let (gw, gb) = grad.split_at_mut(k * d);
            for c in 0..k {
                let p = (z[c] - lse).exp() - if c == y { 1.0 } else { 0.0 };
                gb[c] += p;
                for (g, v) in gw[c * d..(c + 1) * d].iter_mut().zip(x) {
                    *g += p * v;
                }
            }
        }
        let mut penalty = 0.0;
        for (g, &wv) in grad[..k * d].iter_mut().zip(w) {
            *g = *g / n + self.l2 * wv;
            penalty += wv * wv;
        }
        for g in grad[k * d..].iter_mut() {
            *g /= n;
        }
        loss / n + 0.5 * self.l2 * penalty
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0, |m, x| m.max(x.abs()))
}

const LBFGS_MEMORY: usize = 10;

/// Fits an L2-regularised multinomial logistic regression with L-BFGS and a
/// backtracking Armijo line search, starting from all-zero parameters.
pub fn train_probe(train: &LabeledVectors, n_classes: usize, options: TrainOptions) -> Result<ProbeModel> {
    if train.is_empty() {
        return Err(XlgError::Argument("empty training set".into()));
    }
    if let Some(&bad) = train.labels.iter().find(|&&y| y >= n_classes) {
        return Err(XlgError::Argument(format!(
            "label {bad} >= n_classes = {n_classes}"
        )));
    }
    let present: BTreeSet<usize> = train.labels.iter().copied().collect();
    if present.len() < 2 {
        return Err(XlgError::Argument(format!(
            "training data has {} class(es); at least 2 required",
            present.len()
        )));
    }
    if !(options.l2_strength >= 0.0 && options.l2_strength.is_finite()) {
        return Err(XlgError::Argument(format!("l2_strength {}", options.l2_strength)));
    }
    if train.features.iter().any(|v| !v.is_finite()) {
        return Err(XlgError::Argument("non-finite feature value".into()));
    }

    let obj = Objective {
        data: train,
        n_classes,
        l2: options.l2_strength,
    };
    let p = obj.n_params();
    let mut theta = vec![0.0; p];
    let mut grad = vec![0.0; p];
    let mut f = obj.eval(&theta, &mut grad);
    let mut trace = vec![f];
    let mut s_hist: Vec<Vec<f64>> = Vec::new();
    let mut y_hist: Vec<Vec<f64>> = Vec::new();
    let mut converged = max_abs(&grad) <= options.tol;
    let mut iterations = 0;
    let mut trial = vec![0.0; p];
    let mut trial_grad = vec![0.0; p];

    while !converged && iterations < options.max_iters {
        // two-loop recursion
        let mut dir: Vec<f64> = grad.iter().map(|g| -g).collect();
        let mut alphas = Vec::with_capacity(s_hist.len());
        for (s, y) in s_hist.iter().zip(&y_hist).rev() {
            let rho = 1.0 / dot(y, s);
            let a = rho * dot(s, &dir);
            dir.iter_mut().zip(y).for_each(|(d, yv)| *d -= a * yv);
            alphas.push((a, rho));
        }
        if let (Some(s), Some(y)) = (s_hist.last(), y_hist.last()) {
            let gamma = dot(s, y) / dot(y, y);
            dir.iter_mut().for_each(|d| *d *= gamma);
        }
        for ((s, y), (a, rho)) in s_hist.iter().zip(&y_hist).zip(alphas.into_iter().rev()) {
            let beta = rho * dot(y, &dir);
            dir.iter_mut().zip(s).for_each(|(d, sv)| *d += (a - beta) * sv);
        }
        let mut slope = dot(&grad, &dir);
        if slope >= 0.0 {
            // not a descent direction: fall back to steepest descent
            s_hist.clear();
            y_hist.clear();
            dir = grad.iter().map(|g| -g).collect();
            slope = dot(&grad, &dir);
        }
        let mut step = if s_hist.is_empty() {
            (1.0 / max_abs(&grad)).min(1.0)
        } else {
            1.0
        };

        let mut accepted = false;
        for _ in 0..60 {
            for ((t, th), dv) in trial.iter_mut().zip(&theta).zip(&dir) {
                *t = th + step * dv;
            }
            let ft = obj.eval(&trial, &mut trial_grad);
            if ft.is_finite() && ft <= f + 1e-4 * step * slope {
                accepted = true;
                let s: Vec<f64> = trial.iter().zip(&theta).map(|(a, b)| a - b).collect();
                let y: Vec<f64> = trial_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
                if dot(&s, &y) > 1e-12 * dot(&y, &y).sqrt() * dot(&s, &s).sqrt() {
                    if s_hist.len() == LBFGS_MEMORY {
                        s_hist.remove(0);
                        y_hist.remove(0);
                    }
                    s_hist.push(s);
                    y_hist.push(y);
                }
                std::mem::swap(&mut theta, &mut trial);
                std::mem::swap(&mut grad, &mut trial_grad);
                f = ft;
                trace.push(f);
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        if !accepted {
            break;
        }
        converged = max_abs(&grad) <= options.tol;
    }

    let d = train.dim;
    let (w, b) = theta.split_at(n_classes * d);
    Ok(ProbeModel {
        n_classes,
        dim: d,
        weights: w.to_vec(),
        bias: b.to_vec(),
        converged,
        iterations,
        loss_trace: trace,
    })
}

/// Fraction of test rows whose arg-max class matches the label.
pub fn evaluate_probe(model: &ProbeModel, test: &LabeledVectors) -> Result<f64> {
    if test.is_empty() {
        return Err(XlgError::Argument("empty test set".into()));
    }
    if test.dim != model.dim {
        return Err(XlgError::Argument(format!(
            "model of dimension {} on data of dimension {}",
            model.dim, test.dim
        )));
    }
    let correct = (0..test.len())
        .filter(|&i| model.predict(test.row(i)) == test.labels[i])
        .count();
    Ok(correct as f64 / test.len() as f64)
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub seeds: Vec<u64>,
    pub test_fraction: f64,
    /// Inverse regularisation on the summed loss; the per-run L2 strength is
    /// `1 / (c * n_train)`.
    pub inverse_regularization: f64,
    pub max_iters: usize,
    pub tol: f64,
}

impl Default for SweepOptions {
    fn default() -> Self {
        SweepOptions {
            seeds: vec![0, 1, 2],
            test_fraction: 0.2,
            inverse_regularization: 1.0,
            max_iters: 1000,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerAccuracy {
    pub layer: usize,
    /// One accuracy per seed, in seed order.
    pub accuracies: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Probe accuracies for one checkpoint. Standard deviations are population
/// (ddof = 0) values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub checkpoint_step: u64,
    pub languages: Vec<String>,
    pub seeds: Vec<u64>,
    pub layers: Vec<LayerAccuracy>,
    pub mean_over_layers: f64,
    pub std_over_layers: f64,
    pub first_layer: f64,
    pub all_converged: bool,
}

pub(crate) fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Train/test split of one language's sentences for one seed.
fn split_ids(
    ids: &[String],
    seed: u64,
    language: &str,
    test_fraction: f64,
) -> (BTreeSet<String>, BTreeSet<String>) {
    let mut shuffled = ids.to_vec();
    let mut rng = rng::stream(seed, &format!("probe/split/seed{seed}/{language}"));
    shuffled.shuffle(&mut rng);
    let n = shuffled.len();
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let test = shuffled[..n_test].iter().cloned().collect();
    let train = shuffled[n_test..].iter().cloned().collect();
    (train, test)
}

/// Trains and evaluates one probe per (layer, seed).
pub fn probe_sweep(
    samples: &[HiddenStateSample],
    checkpoint_step: u64,
    options: &SweepOptions,
) -> Result<ProbeReport> {
    if options.seeds.is_empty() {
        return Err(XlgError::Argument("no seeds".into()));
    }
    if !(options.test_fraction > 0.0 && options.test_fraction < 1.0) {
        return Err(XlgError::Argument(format!(
            "test fraction {}",
            options.test_fraction
        )));
    }
    let languages: Vec<String> = samples
        .iter()
        .map(|s| s.language.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    if languages.len() < 2 {
        return Err(XlgError::Argument(format!(
            "probing needs at least two languages, found {}",
            languages.len()
        )));
    }
    let layers: Vec<usize> = samples
        .iter()
        .map(|s| s.layer)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let dim = samples[0].vector.len();

    // (layer, language) -> rows
    let mut cells: BTreeMap<(usize, &str), Vec<&HiddenStateSample>> = BTreeMap::new();
    let mut ids: BTreeMap<&str, BTreeSet<&str>> = BTreeMap::new();
    for s in samples {
        if s.vector.len() != dim {
            return Err(XlgError::Argument(format!(
                "hidden states of dimension {} and {dim}",
                s.vector.len()
            )));
        }
        cells.entry((s.layer, s.language.as_str())).or_default().push(s);
        ids.entry(s.language.as_str())
            .or_default()
            .insert(s.sample_id.as_str());
    }
    for &layer in &layers {
        for lang in &languages {
            if !cells.contains_key(&(layer, lang.as_str())) {
                return Err(XlgError::Missing(format!("layer {layer}, language {lang:?}")));
            }
        }
    }
    for (lang, set) in &ids {
        if set.len() < 2 {
            return Err(XlgError::Argument(format!(
                "language {lang:?} has {} sentence(s); a train/test split needs 2",
                set.len()
            )));
        }
    }

    // splits depend only on (seed, language), so every layer sees the same sentences
    let splits: Vec<BTreeMap<&str, (BTreeSet<String>, BTreeSet<String>)>> = options
        .seeds
        .iter()
        .map(|&seed| {
            ids.iter()
                .map(|(lang, set)| {
                    let list: Vec<String> = set.iter().map(|s| s.to_string()).collect();
                    (*lang, split_ids(&list, seed, lang, options.test_fraction))
                })
                .collect()
        })
        .collect();

    let jobs: Vec<(usize, usize)> = layers
        .iter()
        .flat_map(|&l| (0..options.seeds.len()).map(move |s| (l, s)))
        .collect();
    let results: Vec<(f64, bool)> = jobs
        .par_iter()
        .map(|&(layer, si)| -> Result<(f64, bool)> {
            let mut train = LabeledVectors::new(dim);
            let mut test = LabeledVectors::new(dim);
            for (class, lang) in languages.iter().enumerate() {
                let (train_ids, test_ids) = &splits[si][lang.as_str()];
                for s in &cells[&(layer, lang.as_str())] {
                    if train_ids.contains(&s.sample_id) {
                        train.push(&s.vector, class)?;
                    } else if test_ids.contains(&s.sample_id) {
                        test.push(&s.vector, class)?;
                    }
                }
            }
            let opts = TrainOptions {
                l2_strength: 1.0 / (options.inverse_regularization * train.len() as f64),
                max_iters: options.max_iters,
                tol: options.tol,
            };
            let model = train_probe(&train, languages.len(), opts)?;
            Ok((evaluate_probe(&model, &test)?, model.converged))
        })
        .collect::<Result<_>>()?;

    let n_seeds = options.seeds.len();
    let mut layer_rows = Vec::with_capacity(layers.len());
    for (li, &layer) in layers.iter().enumerate() {
        let accs: Vec<f64> = results[li * n_seeds..(li + 1) * n_seeds]
            .iter()
            .map(|r| r.0)
            .collect();
        let (mean, std) = mean_std(&accs);
        layer_rows.push(LayerAccuracy {
            layer,
            accuracies: accs,
            mean,
            std,
        });
    }
    let means: Vec<f64> = layer_rows.iter().map(|l| l.mean).collect();
    let (mean_over_layers, std_over_layers) = mean_std(&means);
    Ok(ProbeReport {
        checkpoint_step,
        languages,
        seeds: options.seeds.clone(),
        first_layer: layer_rows[0].mean,
        layers: layer_rows,
        mean_over_layers,
        std_over_layers,
        all_converged: results.iter().all(|r| r.1),
    })
}

/// Probe reports for several checkpoints, ordered by step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRun {
    pub kind: String,
    pub version: u32,
    pub reports: Vec<ProbeReport>,
}

pub const PROBE_KIND: &str = "probe";

impl ProbeRun {
    pub fn new(mut reports: Vec<ProbeReport>) -> Self {
        reports.sort_by_key(|r| r.checkpoint_step);
        ProbeRun {
            kind: PROBE_KIND.into(),
            version: 1,
            reports,
        }
    }
}

/// Parameters of synthetic hidden-state dumps.
#[derive(Debug, Clone)]
pub struct HiddenSynth {
    pub languages: Vec<String>,
    pub sentences_per_language: usize,
    pub n_layers: usize,
    pub dim: usize,
    /// Layers at or above this index carry a language-specific mean.
    pub separable_from_layer: usize,
    /// Scale of the language means relative to unit noise.
    pub separation: f32,
    pub model_id: String,
    pub checkpoint_step: u64,
}

/// One token-pooled XLGA matrix per language with rows for every
/// (sentence, layer). Below `separable_from_layer` all languages share the
/// same distribution, so probes there sit at chance.
pub fn synth_hidden_dumps(seed: u64, spec: &HiddenSynth) -> Result<Vec<ActivationMatrix>> {
    if spec.sentences_per_language < 2 || spec.n_layers == 0 || spec.dim == 0 {
        return Err(XlgError::Argument(
            "hidden synth needs >= 2 sentences, >= 1 layer and dim >= 1".into(),
        ));
    }
    let layout = LayerLayout::new(vec![spec.dim])?;
    let mut out = Vec::with_capacity(spec.languages.len());
    for lang in &spec.languages {
        let mut centre_rng = rng::stream(seed, &format!("probe/synth/centres/{lang}"));
        let centres: Vec<Vec<f32>> = (0..spec.n_layers)
            .map(|_| {
                (0..spec.dim)
                    .map(|_| {
                        let z: f32 = StandardNormal.sample(&mut centre_rng);
                        z * spec.separation
                    })
                    .collect()
            })
            .collect();
        let mut rng = rng::stream(seed, &format!("probe/synth/rows/{lang}"));
        let lengths: Vec<usize> = (0..spec.sentences_per_language)
            .map(|_| rng.random_range(4..40))
            .collect();
        let positions = sample_positions(&lengths, seed)?;
        let mut values = Vec::new();
        let mut sample_ids = Vec::new();
        let mut meta = Vec::new();
        for (i, &pos) in positions.iter().enumerate() {
            for (layer, centre) in centres.iter().enumerate() {
                for c in centre {
                    let z: f32 = StandardNormal.sample(&mut rng);
                    values.push(if layer >= spec.separable_from_layer {
                        c + z
                    } else {
                        z
                    });
                }
                sample_ids.push(format!("{lang}-{i:04}"));
                meta.push(RowMeta {
                    layer,
                    token_position: pos,
                });
            }
        }
        let n_rows = sample_ids.len();
        let header = MatrixHeader {
            model_id: spec.model_id.clone(),
            checkpoint_step: spec.checkpoint_step,
            concept_id: String::new(),
            language: lang.clone(),
            pooling: Pooling::Token,
            layer_sizes: layout.clone(),
            n_rows,
            sample_ids,
            labels: vec![0; n_rows],
            hook_point: None,
            row_meta: Some(meta),
        };
        out.push(ActivationMatrix::new(header, values)?);
    }
    Ok(out)
}
