//! Pseudo labels for unlabeled domains.
//!
//! The top-squared labeler works in four steps on the representations `f(x)`
//! and softmax outputs `g(f(x))` of the current model:
//!
//! 1. per class `k`, keep the `⌊N/(r_top·K)⌋` samples with the highest `g_k`;
//! 2. build class centroids as `g_k`-weighted means over the union of those
//!    samples;
//! 3. per class, keep the `⌊N/(r_top·K)⌋` samples most cosine-similar to the
//!    centroid, labeled with that class;
//! 4. label every sample by a Euclidean kNN vote over the step-3 set with
//!    `⌊N/(r_top′·K)⌋` neighbors.
//!
//! Ties are broken toward the lower sample index everywhere; kNN votes tie
//! on smaller cumulative distance, then on the lower class index.

use std::cmp::Ordering;
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::nets::{softmax, Model};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelMethod {
    #[default]
    T2pl,
    Softmax,
    ShotStyle,
    /// Ground truth (source domain).
    TrueLabel,
}

impl fmt::Display for LabelMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LabelMethod::T2pl => "t2pl",
            LabelMethod::Softmax => "softmax",
            LabelMethod::ShotStyle => "shot_style",
            LabelMethod::TrueLabel => "true_label",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelerConfig {
    pub r_top: f64,
    pub r_top_prime: f64,
    pub method: LabelMethod,
}

impl Default for LabelerConfig {
    fn default() -> Self {
        Self { r_top: 2.0, r_top_prime: 20.0, method: LabelMethod::T2pl }
    }
}

impl LabelerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.r_top > 0.0 && self.r_top.is_finite()) {
            return Err(Error::Config(format!("r_top must be > 0, got {}", self.r_top)));
        }
        if !(self.r_top_prime >= self.r_top && self.r_top_prime.is_finite()) {
            return Err(Error::Config(format!(
                "r_top_prime ({}) must be >= r_top ({})",
                self.r_top_prime, self.r_top
            )));
        }
        if self.method == LabelMethod::TrueLabel {
            return Err(Error::Config("true_label is not a pseudo-labeling method".into()));
        }
        Ok(())
    }
}

/// Per-class selected sample indices, best first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TopSet {
    pub per_class: Vec<Vec<usize>>,
}

impl TopSet {
    /// Distinct selected samples in ascending order.
    pub fn union(&self) -> Vec<usize> {
        let mut all: Vec<usize> = self.per_class.iter().flatten().copied().collect();
        all.sort_unstable();
        all.dedup();
        all
    }

    /// `(sample, class)` pairs, class-major.
    pub fn labeled(&self) -> Vec<(usize, usize)> {
        self.per_class.iter().enumerate().flat_map(|(k, idx)| idx.iter().map(move |&i| (i, k))).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Centroids(pub Vec<Vec<f64>>);

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PseudoLabelSet {
    pub labels: Vec<usize>,
    pub method: LabelMethod,
    pub stage: usize,
}

impl PseudoLabelSet {
    pub fn accuracy(&self, truth: &[usize]) -> f64 {
        if truth.is_empty() {
            return 0.0;
        }
        let hits = self.labels.iter().zip(truth).filter(|(a, b)| a == b).count();
        hits as f64 / truth.len() as f64
    }

    /// CSV with header `sample_index,label,method,stage`.
    pub fn write_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "sample_index,label,method,stage")?;
        for (i, l) in self.labels.iter().enumerate() {
            writeln!(w, "{i},{l},{},{}", self.method, self.stage)?;
        }
        Ok(())
    }
}

/// `⌊n/(r·K)⌋`, clamped to at least one when `n ≥ K`.
pub fn list_size(n: usize, classes: usize, r: f64) -> Result<usize> {
    if n < classes || classes == 0 {
        return Err(Error::TooFewSamples { required: classes.max(1), got: n });
    }
    let m = (n as f64 / (r * classes as f64)).floor() as usize;
    Ok(m.clamp(1, n))
}

fn top_indices(scores: impl Fn(usize) -> f64, n: usize, m: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores(b).partial_cmp(&scores(a)).unwrap_or(Ordering::Equal).then(a.cmp(&b)));
    idx.truncate(m);
    idx
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Confidence top sets from softmax outputs `[N × K]`.
pub fn top_confident(probs: &Tensor, cfg: &LabelerConfig) -> Result<TopSet> {
    let (n, k) = (probs.rows(), probs.cols());
    let m = list_size(n, k, cfg.r_top)?;
    let per_class = (0..k).map(|c| top_indices(|i| probs.at(i, c), n, m)).collect();
    Ok(TopSet { per_class })
}

/// Softmax-weighted centroids over the union of a top set.
pub fn weighted_centroids(features: &Tensor, probs: &Tensor, top: &TopSet) -> Result<Centroids> {
    let members = top.union();
    if members.is_empty() {
        return Err(Error::TooFewSamples { required: 1, got: 0 });
    }
    let d = features.cols();
    let mut out = Vec::with_capacity(probs.cols());
    for k in 0..probs.cols() {
        let mut acc = vec![0.0; d];
        let mut weight = 0.0;
        for &i in &members {
            let g = probs.at(i, k);
            weight += g;
            for (a, f) in acc.iter_mut().zip(features.row(i)) {
                *a += g * f;
            }
        }
        if !(weight > 0.0) {
            return Err(Error::ZeroWeight(k));
        }
        acc.iter_mut().for_each(|a| *a /= weight);
        out.push(acc);
    }
    Ok(Centroids(out))
}

/// Per-class top sets by cosine similarity to the centroids.
pub fn top_similar(centroids: &Centroids, features: &Tensor, cfg: &LabelerConfig) -> Result<TopSet> {
    let (n, k) = (features.rows(), centroids.0.len());
    let m = list_size(n, k, cfg.r_top)?;
    let per_class = centroids
        .0
        .iter()
        .map(|p| {
            let sims: Vec<f64> = features.row_iter().map(|f| cosine(f, p)).collect();
            top_indices(|i| sims[i], n, m)
        })
        .collect();
    Ok(TopSet { per_class })
}

/// Euclidean kNN vote over the labeled set.
pub fn knn_vote(labeled: &TopSet, features: &Tensor, classes: usize, cfg: &LabelerConfig) -> Result<Vec<usize>> {
    let n = features.rows();
    let kappa = (n as f64 / (cfg.r_top_prime * classes as f64)).floor() as usize;
    if kappa == 0 {
        return Err(Error::ZeroNeighbors { n, k: classes, r_top_prime: cfg.r_top_prime });
    }
    let reference = labeled.labeled();
    if reference.is_empty() {
        return Err(Error::TooFewSamples { required: 1, got: 0 });
    }
    let take = kappa.min(reference.len());
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(reference.len());
    let mut labels = Vec::with_capacity(n);
    for q in features.row_iter() {
        dists.clear();
        dists.extend(reference.iter().enumerate().map(|(pos, &(i, _))| (sq_dist(q, features.row(i)).sqrt(), pos)));
        dists.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
        let mut votes = vec![0usize; classes];
        let mut cum = vec![0.0f64; classes];
        for &(d, pos) in &dists[..take] {
            let c = reference[pos].1;
            votes[c] += 1;
            cum[c] += d;
        }
        let best = (0..classes)
            .min_by(|&a, &b| {
                votes[b].cmp(&votes[a]).then(cum[a].partial_cmp(&cum[b]).unwrap_or(Ordering::Equal)).then(a.cmp(&b))
            })
            .expect("classes > 0");
        labels.push(best);
    }
    Ok(labels)
}

/// Top-squared pseudo labels from precomputed representations and softmax outputs.
pub fn t2pl_from(features: &Tensor, probs: &Tensor, cfg: &LabelerConfig) -> Result<Vec<usize>> {
    let top = top_confident(probs, cfg)?;
    let centroids = weighted_centroids(features, probs, &top)?;
    let similar = top_similar(&centroids, features, cfg)?;
    knn_vote(&similar, features, probs.cols(), cfg)
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn softmax_from(probs: &Tensor) -> Vec<usize> {
    probs.row_iter().map(argmax).collect()
}

fn nearest_by_cosine(features: &Tensor, centroids: &[Vec<f64>]) -> Vec<usize> {
    features
        .row_iter()
        .map(|f| {
            let sims: Vec<f64> = centroids.iter().map(|p| cosine(f, p)).collect();
            argmax(&sims)
        })
        .collect()
}

/// Centroid clustering baseline: weighted centroids over all samples, cosine
/// assignment, then one round of hard-assignment centroids and reassignment.
pub fn shot_style_from(features: &Tensor, probs: &Tensor) -> Result<Vec<usize>> {
    let (n, k, d) = (features.rows(), probs.cols(), features.cols());
    let all = TopSet { per_class: vec![(0..n).collect()] };
    let mut centroids = weighted_centroids(features, probs, &all)?.0;
    let first = nearest_by_cosine(features, &centroids);
    for (c, centroid) in centroids.iter_mut().enumerate() {
        let members: Vec<usize> = (0..n).filter(|&i| first[i] == c).collect();
        if members.is_empty() {
            continue;
        }
        let mut acc = vec![0.0; d];
        for &i in &members {
            for (a, f) in acc.iter_mut().zip(features.row(i)) {
                *a += f;
            }
        }
        *centroid = acc.into_iter().map(|a| a / members.len() as f64).collect();
    }
    debug_assert_eq!(centroids.len(), k);
    Ok(nearest_by_cosine(features, &centroids))
}

pub fn select_top_confident(model: &Model, data: &Tensor, cfg: &LabelerConfig) -> Result<TopSet> {
    top_confident(&model.probabilities(data)?, cfg)
}

pub fn build_centroids(model: &Model, top: &TopSet, data: &Tensor) -> Result<Centroids> {
    let (f, logits) = model.features_and_logits(data)?;
    weighted_centroids(&f, &softmax(&logits), top)
}

pub fn select_top_similar(centroids: &Centroids, model: &Model, data: &Tensor, cfg: &LabelerConfig) -> Result<TopSet> {
    top_similar(centroids, &model.features(data)?, cfg)
}

pub fn knn_assign(labeled: &TopSet, model: &Model, data: &Tensor, cfg: &LabelerConfig, stage: usize) -> Result<PseudoLabelSet> {
    let labels = knn_vote(labeled, &model.features(data)?, model.classes(), cfg)?;
    Ok(PseudoLabelSet { labels, method: LabelMethod::T2pl, stage })
}

pub fn t2pl(model: &Model, data: &Tensor, cfg: &LabelerConfig, stage: usize) -> Result<PseudoLabelSet> {
    let (f, logits) = model.features_and_logits(data)?;
    let labels = t2pl_from(&f, &softmax(&logits), cfg)?;
    Ok(PseudoLabelSet { labels, method: LabelMethod::T2pl, stage })
}

pub fn softmax_labels(model: &Model, data: &Tensor, stage: usize) -> Result<PseudoLabelSet> {
    let labels = softmax_from(&model.logits(data)?);
    Ok(PseudoLabelSet { labels, method: LabelMethod::Softmax, stage })
}

pub fn shot_style_labels(model: &Model, data: &Tensor, stage: usize) -> Result<PseudoLabelSet> {
    let (f, logits) = model.features_and_logits(data)?;
    let labels = shot_style_from(&f, &softmax(&logits))?;
    Ok(PseudoLabelSet { labels, method: LabelMethod::ShotStyle, stage })
}

/// Runs the configured method.
pub fn pseudo_label(model: &Model, data: &Tensor, cfg: &LabelerConfig, stage: usize) -> Result<PseudoLabelSet> {
    match cfg.method {
        LabelMethod::T2pl => t2pl(model, data, cfg, stage),
        LabelMethod::Softmax => softmax_labels(model, data, stage),
        LabelMethod::ShotStyle => shot_style_labels(model, data, stage),
        LabelMethod::TrueLabel => Err(Error::Config("true_label cannot be computed from a model".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn top_sets_have_floor_size() {
        let probs = mat(&[&[0.9, 0.1], &[0.8, 0.2], &[0.3, 0.7], &[0.4, 0.6], &[0.55, 0.45], &[0.2, 0.8], &[0.6, 0.4], &[0.1, 0.9]]);
        let top = top_confident(&probs, &LabelerConfig::default()).unwrap();
        assert_eq!(top.per_class, vec![vec![0, 1], vec![7, 5]]);
    }

    #[test]
    fn uniform_scores_break_ties_by_index() {
        let probs = Tensor::filled(vec![8, 2], 0.5);
        let top = top_confident(&probs, &LabelerConfig::default()).unwrap();
        assert_eq!(top.per_class, vec![vec![0, 1], vec![0, 1]]);
    }

    #[test]
    fn too_few_samples_names_minimum() {
        let err = top_confident(&Tensor::filled(vec![2, 3], 1.0 / 3.0), &LabelerConfig::default()).unwrap_err();
        assert!(matches!(err, Error::TooFewSamples { required: 3, got: 2 }));
        // N ≥ K but below r_top·K clamps to one sample per class
        let top = top_confident(&Tensor::filled(vec![4, 3], 1.0 / 3.0), &LabelerConfig::default()).unwrap();
        assert!(top.per_class.iter().all(|l| l.len() == 1));
    }

    #[test]
    fn uniform_weights_give_arithmetic_mean() {
        let f = mat(&[&[1.0, 0.0], &[3.0, 2.0], &[5.0, 4.0]]);
        let probs = Tensor::filled(vec![3, 2], 0.5);
        let top = TopSet { per_class: vec![vec![0, 1], vec![1, 2]] };
        let c = weighted_centroids(&f, &probs, &top).unwrap();
        assert_eq!(c.0[0], vec![3.0, 2.0]);
        let single = TopSet { per_class: vec![vec![1], vec![1]] };
        assert_eq!(weighted_centroids(&f, &probs, &single).unwrap().0[1], vec![3.0, 2.0]);
    }

    #[test]
    fn zero_weight_is_an_error() {
        let f = mat(&[&[1.0], &[2.0]]);
        let probs = mat(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let top = TopSet { per_class: vec![vec![0], vec![1]] };
        assert!(matches!(weighted_centroids(&f, &probs, &top), Err(Error::ZeroWeight(1))));
    }

    #[test]
    fn own_sample_ranks_first_when_features_equal_centroids() {
        let f = mat(&[&[1.0, 0.1], &[0.1, 1.0], &[0.7, 0.7], &[0.9, 0.5]]);
        let c = Centroids(vec![vec![1.0, 0.1], vec![0.1, 1.0]]);
        let cfg = LabelerConfig { r_top: 1.0, r_top_prime: 2.0, method: LabelMethod::T2pl };
        let top = top_similar(&c, &f, &cfg).unwrap();
        assert_eq!(top.per_class[0][0], 0);
        assert_eq!(top.per_class[1][0], 1);
    }

    #[test]
    fn zero_feature_has_zero_cosine() {
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 2.0]), 0.0);
    }

    #[test]
    fn knn_single_neighbor_returns_own_label() {
        let f = mat(&[&[0.0, 0.0], &[5.0, 5.0], &[0.1, 0.0], &[5.0, 5.1]]);
        let labeled = TopSet { per_class: vec![vec![0, 2], vec![1, 3]] };
        let cfg = LabelerConfig { r_top: 1.0, r_top_prime: 2.0, method: LabelMethod::T2pl };
        assert_eq!(knn_vote(&labeled, &f, 2, &cfg).unwrap(), vec![0, 1, 0, 1]);
    }

    #[test]
    fn knn_majority_of_three() {
        // query at origin; neighbors at distances 1, 2 (class 0) and 1.5 (class 1)
        let f = mat(&[&[0.0], &[1.0], &[2.0], &[-1.5], &[100.0], &[101.0]]);
        let labeled = TopSet { per_class: vec![vec![1, 2], vec![3]] };
        let cfg = LabelerConfig { r_top: 1.0, r_top_prime: 1.0, method: LabelMethod::T2pl };
        let labels = knn_vote(&labeled, &f, 2, &cfg).unwrap();
        assert_eq!(labels[0], 0);
    }

    #[test]
    fn knn_vote_ties_on_distance_then_class() {
        // κ = 2 with one neighbor of each class: the closer class wins
        let f = mat(&[&[0.0], &[1.0], &[-0.5], &[9.0]]);
        let labeled = TopSet { per_class: vec![vec![1], vec![2]] };
        let cfg = LabelerConfig { r_top: 1.0, r_top_prime: 1.0, method: LabelMethod::T2pl };
        assert_eq!(knn_vote(&labeled, &f, 2, &cfg).unwrap()[0], 1);
        // equal distances fall back to the lower class
        let f = mat(&[&[0.0], &[1.0], &[-1.0], &[9.0]]);
        assert_eq!(knn_vote(&labeled, &f, 2, &cfg).unwrap()[0], 0);
    }

    #[test]
    fn zero_neighbors_is_an_error() {
        let f = Tensor::filled(vec![10, 1], 1.0);
        let labeled = TopSet { per_class: vec![vec![0], vec![1]] };
        let cfg = LabelerConfig { r_top: 2.0, r_top_prime: 20.0, method: LabelMethod::T2pl };
        let err = knn_vote(&labeled, &f, 2, &cfg).unwrap_err();
        assert!(err.to_string().contains("lower r_top_prime"));
    }

    #[test]
    fn softmax_labels_break_ties_low() {
        let probs = mat(&[&[0.7, 0.3], &[0.5, 0.5], &[0.2, 0.8]]);
        assert_eq!(softmax_from(&probs), vec![0, 0, 1]);
    }

    #[test]
    fn shot_style_separates_clusters() {
        let f = mat(&[&[1.0, 0.1], &[0.9, 0.0], &[1.1, 0.2], &[0.0, 1.0], &[0.1, 0.9], &[0.2, 1.2]]);
        let probs = mat(&[&[0.6, 0.4], &[0.7, 0.3], &[0.6, 0.4], &[0.45, 0.55], &[0.4, 0.6], &[0.3, 0.7]]);
        assert_eq!(shot_style_from(&f, &probs).unwrap(), vec![0, 0, 0, 1, 1, 1]);
        let one = Tensor::filled(vec![6, 1], 1.0);
        assert_eq!(shot_style_from(&f, &one).unwrap(), vec![0; 6]);
    }

    #[test]
    fn config_validation() {
        assert!(LabelerConfig::default().validate().is_ok());
        assert!(LabelerConfig { r_top: 4.0, r_top_prime: 2.0, ..Default::default() }.validate().is_err());
        assert!(LabelerConfig { method: LabelMethod::TrueLabel, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn csv_export() {
        let set = PseudoLabelSet { labels: vec![1, 0], method: LabelMethod::T2pl, stage: 2 };
        let mut buf = Vec::new();
        set.write_csv(&mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "sample_index,label,method,stage\n0,1,t2pl,2\n1,0,t2pl,2\n");
        assert_eq!(set.accuracy(&[1, 1]), 0.5);
    }
}
