//! Linear speaker probe: a one-vs-rest linear SVM over frozen embeddings,
//! scored by speaker classification accuracy.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::rng::{derive, seeded};
use crate::{Error, Result};

pub const TEST_FRACTION: f64 = 0.3;

/// Embeddings with integer speaker labels `0..speaker_names.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeDataset {
    pub embeddings: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub speaker_names: Vec<String>,
}

impl ProbeDataset {
    /// Labels follow the sorted order of speaker names.
    pub fn new(embeddings: Vec<Vec<f64>>, speaker_ids: &[String]) -> Result<Self> {
        if embeddings.len() != speaker_ids.len() {
            return Err(Error::shape(format!(
                "{} embeddings for {} speaker ids",
                embeddings.len(),
                speaker_ids.len()
            )));
        }
        let index: BTreeMap<&str, usize> = speaker_ids
            .iter()
            .map(String::as_str)
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .enumerate()
            .map(|(i, s)| (s, i))
            .collect();
        let labels = speaker_ids.iter().map(|s| index[s.as_str()]).collect();
        Ok(Self {
            embeddings,
            labels,
            speaker_names: index.keys().map(|s| s.to_string()).collect(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_speakers(&self) -> usize {
        self.speaker_names.len()
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            embeddings: idx.iter().map(|&i| self.embeddings[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            speaker_names: self.speaker_names.clone(),
        }
    }

    /// Per-speaker split: `round(fraction · count)` segments of each speaker
    /// go to the test side, keeping at least one on the training side.
    pub fn stratified_split(&self, test_fraction: f64, seed: u64) -> (Self, Self) {
        let mut train = Vec::new();
        let mut test = Vec::new();
        for spk in 0..self.n_speakers() {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == spk).collect();
            idx.shuffle(&mut seeded(derive(seed, spk as u64)));
            let n_test = ((test_fraction * idx.len() as f64).round() as usize)
                .min(idx.len().saturating_sub(1));
            test.extend_from_slice(&idx[..n_test]);
            train.extend_from_slice(&idx[n_test..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        (self.subset(&train), self.subset(&test))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvmConfig {
    pub lambda: f64,
    pub epochs: usize,
    /// Initial step size; steps decay as `1 / (λ·t + 1/eta0)`.
    pub eta0: f64,
    pub seed: u64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            epochs: 50,
            eta0: 0.1,
            seed: 0,
        }
    }
}

/// One-vs-rest weights, `n_classes × (dim + 1)` with the bias last.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearSvm {
    pub weights: Vec<f64>,
    pub n_classes: usize,
    pub dim: usize,
    /// Regularized hinge objective of the kept weights after each epoch,
    /// summed over classes.
    pub objective_trace: Vec<f64>,
}

impl LinearSvm {
    pub fn row(&self, c: usize) -> &[f64] {
        &self.weights[c * (self.dim + 1)..(c + 1) * (self.dim + 1)]
    }

    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_classes).map(|c| score(self.row(c), x)).collect()
    }

    /// Highest-scoring class; ties go to the lowest index.
    pub fn predict(&self, x: &[f64]) -> usize {
        let s = self.scores(x);
        let mut best = 0;
        for c in 1..s.len() {
            if s[c] > s[best] {
                best = c;
            }
        }
        best
    }
}

fn score(w: &[f64], x: &[f64]) -> f64 {
    let d = x.len();
    w[..d].iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + w[d]
}

/// `λ/2·‖w‖² + mean hinge`, with the bias unregularized.
pub fn hinge_objective(w: &[f64], data: &ProbeDataset, class: usize, lambda: f64) -> f64 {
    let d = w.len() - 1;
    let reg = 0.5 * lambda * w[..d].iter().map(|v| v * v).sum::<f64>();
    let hinge: f64 = data
        .embeddings
        .iter()
        .zip(&data.labels)
        .map(|(x, &l)| {
            let y = if l == class { 1.0 } else { -1.0 };
            (1.0 - y * score(w, x)).max(0.0)
        })
        .sum();
    reg + hinge / data.len() as f64
}

/// Stochastic subgradient descent on the L2-regularized hinge loss, one
/// binary problem per speaker. At the end of every epoch the running average
/// of the iterates is scored, and each class keeps the best averaged weights
/// seen so far (subgradient steps are not descent steps).
pub fn train_linear_svm(train: &ProbeDataset, cfg: &SvmConfig) -> Result<LinearSvm> {
    let k = train.n_speakers();
    if k < 2 {
        return Err(Error::invalid(format!(
            "probe needs at least 2 speakers, got {k}"
        )));
    }
    if let Some(missing) = (0..k).find(|c| !train.labels.contains(c)) {
        return Err(Error::invalid(format!(
            "speaker {} has no training segments",
            train.speaker_names[missing]
        )));
    }
    let dim = train.embeddings[0].len();
    if train.embeddings.iter().any(|x| x.len() != dim) {
        return Err(Error::shape("probe embeddings have differing dimensions"));
    }
    if !(cfg.lambda > 0.0 && cfg.eta0 > 0.0) {
        return Err(Error::invalid("lambda and eta0 must be positive"));
    }
    let stride = dim + 1;
    let mut weights = vec![0.0; k * stride];
    let mut trace = vec![0.0; cfg.epochs];
    for c in 0..k {
        let mut w = vec![0.0; stride];
        let mut avg = vec![0.0; stride];
        let mut kept = (f64::INFINITY, vec![0.0; stride]);
        let mut t = 0usize;
        let mut order: Vec<usize> = (0..train.len()).collect();
        for (epoch, slot) in trace.iter_mut().enumerate() {
            order.shuffle(&mut seeded(derive(
                derive(cfg.seed, c as u64),
                epoch as u64,
            )));
            for &i in &order {
                t += 1;
                let eta = 1.0 / (cfg.lambda * t as f64 + 1.0 / cfg.eta0);
                let x = &train.embeddings[i];
                let y = if train.labels[i] == c { 1.0 } else { -1.0 };
                let margin = y * score(&w, x);
                let shrink = 1.0 - eta * cfg.lambda;
                for v in &mut w[..dim] {
                    *v *= shrink;
                }
                if margin < 1.0 {
                    for (v, xi) in w[..dim].iter_mut().zip(x) {
                        *v += eta * y * xi;
                    }
                    w[dim] += eta * y;
                }
                let a = 1.0 / t as f64;
                for (m, v) in avg.iter_mut().zip(&w) {
                    *m += a * (v - *m);
                }
            }
            let objective = hinge_objective(&avg, train, c, cfg.lambda);
            if objective < kept.0 {
                kept = (objective, avg.clone());
            }
            *slot += kept.0;
        }
        weights[c * stride..(c + 1) * stride].copy_from_slice(&kept.1);
    }
    Ok(LinearSvm {
        weights,
        n_classes: k,
        dim,
        objective_trace: trace,
    })
}

pub fn probe_accuracy(svm: &LinearSvm, test: &ProbeDataset) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::invalid("empty probe test set"));
    }
    if test.embeddings.iter().any(|x| x.len() != svm.dim) {
        return Err(Error::shape(format!(
            "probe expects {}-d embeddings",
            svm.dim
        )));
    }
    let correct = test
        .embeddings
        .iter()
        .zip(&test.labels)
        .filter(|(x, &l)| svm.predict(x) == l)
        .count();
    Ok(correct as f64 / test.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub accuracy: f64,
    pub n_speakers: usize,
    pub n_test: usize,
    pub embedding_source: String,
}

/// Splits, trains and scores in one go.
pub fn run_probe(
    data: &ProbeDataset,
    cfg: &SvmConfig,
    embedding_source: &str,
) -> Result<ProbeReport> {
    let (train, test) = data.stratified_split(TEST_FRACTION, cfg.seed);
    let svm = train_linear_svm(&train, cfg)?;
    Ok(ProbeReport {
        accuracy: probe_accuracy(&svm, &test)?,
        n_speakers: data.n_speakers(),
        n_test: test.len(),
        embedding_source: embedding_source.to_string(),
    })
}
