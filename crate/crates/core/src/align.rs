// SPDX-License-Identifier: MIT OR Apache-2.0

//! Cross-lingual alignment of expert score vectors.
//!
//! For every concept and language pair three quantities are computed from
//! the two expert score vectors: the Pearson correlation (averaged across
//! concepts in Fisher-Z space), the KSG mutual information between the
//! paired per-neuron scores, and the overlap of the two top-k expert sets.
//! [`layer_profile`] breaks the top-k sets down by layer.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::digamma;

use crate::actstore::LayerLayout;
use crate::error::{Result, XlgError};
use crate::expert::{top_k, ExpertScoreVector, TopKSet};

/// Pearson correlation with f64 accumulation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return Err(XlgError::Argument(format!(
            "vectors of length {} and {}",
            x.len(),
            y.len()
        )));
    }
    if x.len() < 2 {
        return Err(XlgError::Undefined(
            "correlation needs at least two points".into(),
        ));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&a, &b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(XlgError::Undefined("correlation with a constant vector".into()));
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

pub fn pearson_vectors(e1: &ExpertScoreVector, e2: &ExpertScoreVector) -> Result<f64> {
    pearson(e1.scores(), e2.scores())
}

const FISHER_CLAMP: f64 = 1.0 - 1e-12;

/// `tanh(mean(atanh(r)))`. Coefficients with `|r| >= 1` are clamped to
/// `±(1 - 1e-12)` and logged.
pub fn fisher_z_average(rs: &[f64]) -> Result<f64> {
    if rs.is_empty() {
        return Err(XlgError::Argument("Fisher-Z average of an empty list".into()));
    }
    let mut acc = 0.0;
    for &r in rs {
        if r.is_nan() {
            return Err(XlgError::Argument("NaN correlation coefficient".into()));
        }
        let r = if r.abs() >= 1.0 {
            let c = FISHER_CLAMP.copysign(r);
            log::warn!("correlation {r} clamped to {c} before Fisher-Z");
            c
        } else {
            r
        };
        acc += r.atanh();
    }
    Ok((acc / rs.len() as f64).tanh())
}

/// KSG (algorithm 1) mutual information between paired samples `x[i], y[i]`,
/// in nats, clamped at zero.
///
/// Both variables are scaled to unit variance first. The k-th neighbour
/// distance is taken in the max-norm joint space; marginal counts include
/// points strictly closer than that distance. Deterministic: no jitter.
pub fn mutual_information_knn(x: &[f64], y: &[f64], k: usize) -> Result<f64> {
    let m = x.len();
    if y.len() != m {
        return Err(XlgError::Argument(format!(
            "paired samples of length {m} and {}",
            y.len()
        )));
    }
    if k == 0 || m <= k {
        return Err(XlgError::Argument(format!(
            "kNN mutual information needs 1 <= k < M (k = {k}, M = {m})"
        )));
    }
    if let Some(i) = x.iter().chain(y).position(|v| !v.is_finite()) {
        return Err(XlgError::NonFiniteScore(i % m));
    }
    let xs = unit_variance(x);
    let ys = unit_variance(y);

    let order = sorted_order(&xs);
    let sorted_x: Vec<f64> = order.iter().map(|&i| xs[i]).collect();
    let mut sorted_y = ys.clone();
    sorted_y.sort_by(f64::total_cmp);
    let mut rank = vec![0usize; m];
    for (p, &i) in order.iter().enumerate() {
        rank[i] = p;
    }

    let counts: Vec<(usize, usize)> = (0..m)
        .into_par_iter()
        .map_init(Vec::new, |heap, i| {
            let eps = kth_neighbour_distance(&order, &sorted_x, &ys, rank[i], k, heap);
            // points at distance < eps; at eps == 0 only exact duplicates count
            let radius = if eps > 0.0 { eps.next_down() } else { 0.0 };
            (
                count_within(&sorted_x, xs[i], radius) - 1,
                count_within(&sorted_y, ys[i], radius) - 1,
            )
        })
        .collect();

    let (mut sx, mut sy) = (0.0f64, 0.0f64);
    for &(nx, ny) in &counts {
        sx += digamma((nx + 1) as f64);
        sy += digamma((ny + 1) as f64);
    }
    let mf = m as f64;
    let mi = digamma(mf) + digamma(k as f64) - (sx + sy) / mf;
    Ok(mi.max(0.0))
}

fn unit_variance(v: &[f64]) -> Vec<f64> {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let sd = var.sqrt();
    if sd > 0.0 {
        v.iter().map(|a| a / sd).collect()
    } else {
        v.to_vec()
    }
}

fn sorted_order(v: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    order
}

/// Max-norm distance to the k-th nearest other point, scanning outwards
/// along the x order until |dx| alone exceeds the current k-th distance.
fn kth_neighbour_distance(
    order: &[usize],
    sorted_x: &[f64],
    ys: &[f64],
    pos: usize,
    k: usize,
    best: &mut Vec<f64>,
) -> f64 {
    best.clear();
    let xi = sorted_x[pos];
    let yi = ys[order[pos]];
    let n = sorted_x.len();
    let (mut lo, mut hi) = (pos, pos + 1);
    loop {
        let left = (lo > 0).then(|| xi - sorted_x[lo - 1]);
        let right = (hi < n).then(|| sorted_x[hi] - xi);
        let take_left = match (left, right) {
            (None, None) => break,
            (Some(l), Some(r)) => l <= r,
            (Some(_), None) => true,
            (None, Some(_)) => false,
        };
        let (dx, p) = if take_left {
            (left.unwrap(), lo - 1)
        } else {
            (right.unwrap(), hi)
        };
        if best.len() == k && dx >= best[k - 1] {
            break;
        }
        if take_left {
            lo -= 1;
        } else {
            hi += 1;
        }
        let d = dx.max((ys[order[p]] - yi).abs());
        if best.len() == k {
            if d >= best[k - 1] {
                continue;
            }
            best.pop();
        }
        let at = best.partition_point(|&b| b <= d);
        best.insert(at, d);
    }
    best[k - 1]
}

/// Number of sorted values `v` with `|v - center| <= radius`.
fn count_within(sorted: &[f64], center: f64, radius: f64) -> usize {
    let lo = sorted.partition_point(|&v| v < center && center - v > radius);
    let hi = sorted.partition_point(|&v| v <= center || v - center <= radius);
    hi - lo
}

/// `|s1 ∩ s2| / k`.
pub fn overlap_proportion(s1: &TopKSet, s2: &TopKSet) -> Result<f64> {
    if s1.k != s2.k {
        return Err(XlgError::Argument(format!(
            "top-k sets with k = {} and {}",
            s1.k, s2.k
        )));
    }
    let a: HashSet<usize> = s1.members.iter().copied().collect();
    let shared = s2.members.iter().filter(|g| a.contains(g)).count();
    Ok(shared as f64 / s1.k as f64)
}

/// Per-layer split of the overlap: entry `l` is `|S1_l ∩ S2_l| / k` where
/// `S_l` is the part of the global top-k set lying in layer `l`.
pub fn layer_overlaps(s1: &TopKSet, s2: &TopKSet, layout: &LayerLayout) -> Result<Vec<f64>> {
    if s1.k != s2.k {
        return Err(XlgError::Argument(format!(
            "top-k sets with k = {} and {}",
            s1.k, s2.k
        )));
    }
    let a: HashSet<usize> = s1.members.iter().copied().collect();
    let mut shared = vec![0usize; layout.n_layers()];
    for &g in &s2.members {
        let (layer, _) = locate(layout, g)?;
        if a.contains(&g) {
            shared[layer] += 1;
        }
    }
    Ok(shared.into_iter().map(|c| c as f64 / s1.k as f64).collect())
}

fn locate(layout: &LayerLayout, g: usize) -> Result<(usize, usize)> {
    layout.locate(g).ok_or_else(|| {
        XlgError::Argument(format!(
            "neuron {g} outside the layout of {} neurons",
            layout.total()
        ))
    })
}

/// Which metrics a report computes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Metrics {
    pub correlation: bool,
    pub mutual_information: bool,
    pub overlap: bool,
}

impl Default for Metrics {
    fn default() -> Self {
        Metrics {
            correlation: true,
            mutual_information: true,
            overlap: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AlignOptions {
    pub k: usize,
    pub mi_neighbors: usize,
    pub metrics: Metrics,
    /// Language order of the report; `None` sorts the tags.
    pub languages: Option<Vec<String>>,
    pub keep_per_concept: bool,
    pub with_layer_profile: bool,
}

impl Default for AlignOptions {
    fn default() -> Self {
        AlignOptions {
            k: 500,
            mi_neighbors: 3,
            metrics: Metrics::default(),
            languages: None,
            keep_per_concept: false,
            with_layer_profile: true,
        }
    }
}

pub type Matrix = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptAlignment {
    pub concept_id: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub correlation: Option<Matrix>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mutual_information: Option<Matrix>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub overlap: Option<Matrix>,
}

/// Language-by-language alignment matrices averaged across concepts.
///
/// Off-diagonal correlation entries are Fisher-Z averages, mutual
/// information and overlap entries arithmetic means. The diagonal is 1 for
/// correlation and overlap; for mutual information it holds the estimator
/// applied to a vector paired with itself.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub kind: String,
    pub version: u32,
    pub checkpoint_step: u64,
    pub languages: Vec<String>,
    pub concepts: Vec<String>,
    pub k: usize,
    pub mi_neighbors: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub correlation: Option<Matrix>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub mutual_information: Option<Matrix>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub overlap: Option<Matrix>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub per_concept: Option<Vec<ConceptAlignment>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub layer_profile: Option<LayerProfile>,
}

pub const ALIGNMENT_KIND: &str = "alignment";

impl AlignmentReport {
    /// Mean of the off-diagonal overlap entries (each unordered pair once).
    pub fn mean_pairwise_overlap(&self) -> Option<f64> {
        let o = self.overlap.as_ref()?;
        let l = o.len();
        let mut acc = 0.0;
        let mut n = 0usize;
        for i in 0..l {
            for j in i + 1..l {
                acc += o[i][j];
                n += 1;
            }
        }
        (n > 0).then(|| acc / n as f64)
    }
}

/// Expert vectors keyed by (concept, language).
pub type VectorMap = BTreeMap<(String, String), ExpertScoreVector>;

pub fn vector_map(vectors: impl IntoIterator<Item = ExpertScoreVector>) -> Result<VectorMap> {
    let mut map = BTreeMap::new();
    for v in vectors {
        let key = (v.concept_id.clone(), v.language.clone());
        if map.contains_key(&key) {
            return Err(XlgError::Validation(format!(
                "two expert vectors for concept {:?}, language {:?}",
                key.0, key.1
            )));
        }
        map.insert(key, v);
    }
    Ok(map)
}

struct PairCell {
    correlation: Option<f64>,
    mutual_information: Option<f64>,
    overlap: Option<f64>,
}

pub fn build_alignment_report(vectors: &VectorMap, options: &AlignOptions) -> Result<AlignmentReport> {
    let first = vectors
        .values()
        .next()
        .ok_or_else(|| XlgError::Argument("no expert vectors".into()))?;
    let layout = first.layout().clone();
    let step = first.checkpoint_step;
    for v in vectors.values() {
        if v.layout() != &layout {
            return Err(XlgError::Argument(format!(
                "concept {:?}, language {:?}: layout differs from the other vectors",
                v.concept_id, v.language
            )));
        }
        if v.checkpoint_step != step {
            return Err(XlgError::Argument(format!(
                "mixed checkpoints {step} and {} in one report",
                v.checkpoint_step
            )));
        }
    }
    let concepts: Vec<String> = vectors
        .keys()
        .map(|(c, _)| c.clone())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let languages: Vec<String> = match &options.languages {
        Some(l) => l.clone(),
        None => vectors
            .keys()
            .map(|(_, l)| l.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect(),
    };
    for c in &concepts {
        for l in &languages {
            if !vectors.contains_key(&(c.clone(), l.clone())) {
                return Err(XlgError::Missing(format!("concept {c:?}, language {l:?}")));
            }
        }
    }
    let metrics = options.metrics;
    let need_sets = metrics.overlap || options.with_layer_profile;

    let mut top_sets: BTreeMap<(String, String), TopKSet> = BTreeMap::new();
    if need_sets {
        for c in &concepts {
            for l in &languages {
                let key = (c.clone(), l.clone());
                top_sets.insert(key.clone(), top_k(&vectors[&key], options.k)?);
            }
        }
    }

    let nl = languages.len();
    // (concept, i, j) with i <= j; i == j only for the MI diagonal
    let mut cells = Vec::new();
    for (ci, _) in concepts.iter().enumerate() {
        for i in 0..nl {
            for j in i..nl {
                if i != j || metrics.mutual_information {
                    cells.push((ci, i, j));
                }
            }
        }
    }
    let results: Vec<PairCell> = cells
        .par_iter()
        .map(|&(ci, i, j)| -> Result<PairCell> {
            let key_a = (concepts[ci].clone(), languages[i].clone());
            let key_b = (concepts[ci].clone(), languages[j].clone());
            let (a, b) = (&vectors[&key_a], &vectors[&key_b]);
            let diag = i == j;
            Ok(PairCell {
                correlation: match (metrics.correlation, diag) {
                    (true, false) => Some(pearson_vectors(a, b).map_err(|e| {
                        XlgError::Undefined(format!(
                            "concept {:?}, languages {:?}/{:?}: {e}",
                            concepts[ci], languages[i], languages[j]
                        ))
                    })?),
                    _ => None,
                },
                mutual_information: if metrics.mutual_information {
                    Some(mutual_information_knn(
                        a.scores(),
                        b.scores(),
                        options.mi_neighbors,
                    )?)
                } else {
                    None
                },
                overlap: match (metrics.overlap, diag) {
                    (true, false) => Some(overlap_proportion(&top_sets[&key_a], &top_sets[&key_b])?),
                    _ => None,
                },
            })
        })
        .collect::<Result<_>>()?;

    let blank = || vec![vec![0.0; nl]; nl];
    let mut corr_lists: Vec<Vec<Vec<f64>>> = vec![vec![Vec::new(); nl]; nl];
    let mut mi_sum = blank();
    let mut ov_sum = blank();
    let mut per_concept: Vec<ConceptAlignment> = Vec::new();
    let mut current: Option<(usize, Matrix, Matrix, Matrix)> = None;

    let flush = |cur: Option<(usize, Matrix, Matrix, Matrix)>, out: &mut Vec<ConceptAlignment>| {
        if let Some((ci, corr, mi, ov)) = cur {
            out.push(ConceptAlignment {
                concept_id: concepts[ci].clone(),
                correlation: metrics.correlation.then_some(corr),
                mutual_information: metrics.mutual_information.then_some(mi),
                overlap: metrics.overlap.then_some(ov),
            });
        }
    };

    for (&(ci, i, j), cell) in cells.iter().zip(&results) {
        if current.as_ref().map(|c| c.0) != Some(ci) {
            flush(current.take(), &mut per_concept);
            let mut ident = blank();
            for (d, row) in ident.iter_mut().enumerate() {
                row[d] = 1.0;
            }
            current = Some((ci, ident.clone(), blank(), ident));
        }
        let cur = current.as_mut().unwrap();
        if let Some(r) = cell.correlation {
            corr_lists[i][j].push(r);
            cur.1[i][j] = r;
            cur.1[j][i] = r;
        }
        if let Some(v) = cell.mutual_information {
            mi_sum[i][j] += v;
            cur.2[i][j] = v;
            cur.2[j][i] = v;
        }
        if let Some(v) = cell.overlap {
            ov_sum[i][j] += v;
            cur.3[i][j] = v;
            cur.3[j][i] = v;
        }
    }
    flush(current.take(), &mut per_concept);

    let nc = concepts.len() as f64;
    let symmetric = |f: &dyn Fn(usize, usize) -> Result<f64>| -> Result<Matrix> {
        let mut out = blank();
        for i in 0..nl {
            for j in i..nl {
                let v = f(i, j)?;
                out[i][j] = v;
                out[j][i] = v;
            }
        }
        Ok(out)
    };
    let correlation = if metrics.correlation {
        Some(symmetric(&|i, j| {
            if i == j {
                Ok(1.0)
            } else {
                fisher_z_average(&corr_lists[i][j])
            }
        })?)
    } else {
        None
    };
    let mutual_information = if metrics.mutual_information {
        Some(symmetric(&|i, j| Ok(mi_sum[i][j] / nc))?)
    } else {
        None
    };
    let overlap = if metrics.overlap {
        Some(symmetric(&|i, j| {
            Ok(if i == j { 1.0 } else { ov_sum[i][j] / nc })
        })?)
    } else {
        None
    };
    let layer_profile = if options.with_layer_profile {
        Some(layer_profile(&top_sets, &layout, step)?)
    } else {
        None
    };

    Ok(AlignmentReport {
        kind: ALIGNMENT_KIND.into(),
        version: 1,
        checkpoint_step: step,
        languages,
        concepts,
        k: options.k,
        mi_neighbors: options.mi_neighbors,
        correlation,
        mutual_information,
        overlap,
        per_concept: options.keep_per_concept.then_some(per_concept),
        layer_profile,
    })
}

/// Layer-wise distribution of top-k experts and of their cross-lingual overlap.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerProfile {
    pub checkpoint_step: u64,
    pub k: usize,
    /// Mean share of each (concept, language) top-k set lying in each layer.
    pub expert_fraction: Vec<f64>,
    /// Mean over concepts and unordered language pairs of `|S1_l ∩ S2_l| / k`;
    /// absent with fewer than two languages.
    pub cross_lingual_overlap: Option<Vec<f64>>,
}

/// Per-layer profile of top-k sets keyed by (concept, language).
pub fn layer_profile(
    top_sets: &BTreeMap<(String, String), TopKSet>,
    layout: &LayerLayout,
    checkpoint_step: u64,
) -> Result<LayerProfile> {
    let k = top_sets
        .values()
        .next()
        .ok_or_else(|| XlgError::Argument("no top-k sets".into()))?
        .k;
    let n_layers = layout.n_layers();
    let mut fraction = vec![0.0; n_layers];
    let mut by_concept: BTreeMap<&str, Vec<&TopKSet>> = BTreeMap::new();
    let languages: BTreeSet<&str> = top_sets.keys().map(|(_, l)| l.as_str()).collect();
    for ((c, _), set) in top_sets {
        if set.k != k || set.members.len() != k {
            return Err(XlgError::Argument(format!(
                "top-k sets disagree on k ({} vs {k})",
                set.k
            )));
        }
        let mut counts = vec![0usize; n_layers];
        for &g in &set.members {
            counts[locate(layout, g)?.0] += 1;
        }
        for (f, c) in fraction.iter_mut().zip(counts) {
            *f += c as f64 / k as f64;
        }
        by_concept.entry(c.as_str()).or_default().push(set);
    }
    let n_sets = top_sets.len() as f64;
    fraction.iter_mut().for_each(|f| *f /= n_sets);

    let cross = if languages.len() >= 2 {
        let mut acc = vec![0.0; n_layers];
        let mut pairs = 0usize;
        for (concept, sets) in &by_concept {
            if sets.len() != languages.len() {
                return Err(XlgError::Missing(format!(
                    "concept {concept:?} has {} of {} languages",
                    sets.len(),
                    languages.len()
                )));
            }
            for a in 0..sets.len() {
                for b in a + 1..sets.len() {
                    for (acc, v) in acc.iter_mut().zip(layer_overlaps(sets[a], sets[b], layout)?) {
                        *acc += v;
                    }
                    pairs += 1;
                }
            }
        }
        acc.iter_mut().for_each(|v| *v /= pairs as f64);
        Some(acc)
    } else {
        None
    };

    Ok(LayerProfile {
        checkpoint_step,
        k,
        expert_fraction: fraction,
        cross_lingual_overlap: cross,
    })
}
