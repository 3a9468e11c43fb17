//! Batch construction for pre-training: random (RS), distinct-speaker (DS)
//! and pseudo-instance (PIS) sampling, plus the k-means clustering that
//! produces pseudo-labels.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Segment;
use crate::rng::seeded;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Rs,
    Ds,
    Pis,
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Strategy::Rs => "rs",
            Strategy::Ds => "ds",
            Strategy::Pis => "pis",
        })
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "rs" => Ok(Strategy::Rs),
            "ds" => Ok(Strategy::Ds),
            "pis" => Ok(Strategy::Pis),
            other => Err(Error::invalid(format!(
                "unknown sampling strategy {other:?} (expected rs, ds or pis)"
            ))),
        }
    }
}

/// One epoch of batches, each a list of indices into the segment pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BatchPlan {
    pub batches: Vec<Vec<usize>>,
    pub strategy: Strategy,
    pub batch_size: usize,
}

fn check_pool(len: usize, n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::invalid(format!(
            "batch size must be at least 2, got {n}"
        )));
    }
    if len < n {
        return Err(Error::invalid(format!(
            "pool of {len} segments is smaller than batch size {n}"
        )));
    }
    Ok(())
}

/// Seeded shuffle of the pool cut into batches of `n`; the trailing partial
/// batch is dropped.
pub fn sample_rs(pool: &[Segment], n: usize, seed: u64) -> Result<BatchPlan> {
    check_pool(pool.len(), n)?;
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(&mut seeded(seed));
    Ok(BatchPlan {
        batches: order.chunks_exact(n).map(<[usize]>::to_vec).collect(),
        strategy: Strategy::Rs,
        batch_size: n,
    })
}

/// Draws one segment uniformly from each group in `chosen`.
fn one_from_each(
    groups: &[Vec<usize>],
    chosen: impl Iterator<Item = usize>,
    rng: &mut impl Rng,
) -> Vec<usize> {
    chosen
        .map(|g| groups[g][rng.random_range(0..groups[g].len())])
        .collect()
}

/// Each batch takes `n` distinct speakers (without replacement) and one
/// uniformly drawn segment from each. An epoch has `floor(pool / n)` batches.
pub fn sample_ds(pool: &[Segment], n: usize, seed: u64) -> Result<BatchPlan> {
    check_pool(pool.len(), n)?;
    let mut by_speaker: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, s) in pool.iter().enumerate() {
        by_speaker.entry(&s.speaker_id).or_default().push(i);
    }
    if by_speaker.len() < n {
        return Err(Error::InsufficientSpeakers {
            needed: n,
            available: by_speaker.len(),
        });
    }
    let groups: Vec<Vec<usize>> = by_speaker.into_values().collect();
    let mut rng = seeded(seed);
    let batches = (0..pool.len() / n)
        .map(|_| {
            let speakers = index::sample(&mut rng, groups.len(), n);
            one_from_each(&groups, speakers.into_iter(), &mut rng)
        })
        .collect();
    Ok(BatchPlan {
        batches,
        strategy: Strategy::Ds,
        batch_size: n,
    })
}

/// Each batch takes one uniformly drawn segment from each of the `n`
/// pseudo-label clusters. An epoch has `floor(pool / n)` batches.
pub fn sample_pis(pool: &[Segment], n: usize, seed: u64) -> Result<BatchPlan> {
    check_pool(pool.len(), n)?;
    let mut groups: Vec<Vec<usize>> = vec![Vec::new(); n];
    for (i, s) in pool.iter().enumerate() {
        let label = s.pseudo_label.ok_or(Error::MissingPseudoLabel(i))?;
        if label >= n {
            return Err(Error::invalid(format!(
                "segment {i} has pseudo-label {label}, outside the {n} clusters"
            )));
        }
        groups[label].push(i);
    }
    if let Some(empty) = groups.iter().position(Vec::is_empty) {
        return Err(Error::DegenerateClustering(empty));
    }
    let mut rng = seeded(seed);
    let batches = (0..pool.len() / n)
        .map(|_| one_from_each(&groups, 0..n, &mut rng))
        .collect();
    Ok(BatchPlan {
        batches,
        strategy: Strategy::Pis,
        batch_size: n,
    })
}

pub fn plan_epoch(strategy: Strategy, pool: &[Segment], n: usize, seed: u64) -> Result<BatchPlan> {
    match strategy {
        Strategy::Rs => sample_rs(pool, n, seed),
        Strategy::Ds => sample_ds(pool, n, seed),
        Strategy::Pis => sample_pis(pool, n, seed),
    }
}

pub const KMEANS_MAX_ITER: usize = 100;
pub const KMEANS_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KMeansModel {
    /// `k × dim`, row-major.
    pub centroids: Vec<f64>,
    pub k: usize,
    pub dim: usize,
    /// Sum of squared distances to the assigned centroids.
    pub inertia: f64,
    /// Inertia after every assignment step, ending with the final model.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl KMeansModel {
    pub fn centroid(&self, c: usize) -> &[f64] {
        &self.centroids[c * self.dim..(c + 1) * self.dim]
    }

    /// Nearest centroid and its squared distance; ties go to the lowest index.
    pub fn nearest(&self, x: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for c in 0..self.k {
            let d = sq_dist(x, self.centroid(c));
            if d < best.1 {
                best = (c, d);
            }
        }
        best
    }

    pub fn predict(&self, x: &[f64]) -> usize {
        self.nearest(x).0
    }
}

/// k-means++ seeding followed by Lloyd iterations until the largest centroid
/// shift drops below `tol` or `max_iter` is reached. A cluster left empty by
/// an assignment step takes the point farthest from its own centroid.
pub fn kmeans_fit(
    data: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<KMeansModel> {
    let m = data.len();
    if k == 0 {
        return Err(Error::invalid("k-means needs at least one cluster"));
    }
    if m < k {
        return Err(Error::invalid(format!(
            "k-means with {k} clusters needs at least {k} points, got {m}"
        )));
    }
    let dim = data[0].len();
    if data.iter().any(|x| x.len() != dim) {
        return Err(Error::shape("k-means points have differing dimensions"));
    }
    let mut rng = seeded(seed);
    let mut model = KMeansModel {
        centroids: Vec::with_capacity(k * dim),
        k,
        dim,
        inertia: 0.0,
        inertia_trace: Vec::new(),
        iterations: 0,
    };

    let mut chosen = vec![false; m];
    let first = rng.random_range(0..m);
    chosen[first] = true;
    model.centroids.extend_from_slice(&data[first]);
    let mut d2: Vec<f64> = data.iter().map(|x| sq_dist(x, &data[first])).collect();
    for _ in 1..k {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(&mut rng),
            // every remaining point coincides with a centroid
            Err(_) => chosen.iter().position(|&c| !c).unwrap(),
        };
        chosen[next] = true;
        model.centroids.extend_from_slice(&data[next]);
        for (d, x) in d2.iter_mut().zip(data) {
            *d = d.min(sq_dist(x, &data[next]));
        }
    }

    let mut assign = vec![0usize; m];
    let mut dist = vec![0.0f64; m];
    let assign_all = |model: &KMeansModel, assign: &mut [usize], dist: &mut [f64]| -> f64 {
        let mut total = 0.0;
        for (i, x) in data.iter().enumerate() {
            let (c, d) = model.nearest(x);
            assign[i] = c;
            dist[i] = d;
            total += d;
        }
        total
    };
    for _ in 0..max_iter {
        let inertia = assign_all(&model, &mut assign, &mut dist);
        model.inertia_trace.push(inertia);
        model.iterations += 1;

        let mut counts = vec![0usize; k];
        for &c in &assign {
            counts[c] += 1;
        }
        while let Some(empty) = counts.iter().position(|&c| c == 0) {
            let donor = (0..m)
                .filter(|&i| counts[assign[i]] > 1)
                .max_by(|&a, &b| dist[a].total_cmp(&dist[b]).then(b.cmp(&a)))
                .expect("m >= k leaves a cluster with two points");
            counts[assign[donor]] -= 1;
            assign[donor] = empty;
            dist[donor] = 0.0;
            counts[empty] += 1;
        }

        let mut sums = vec![0.0; k * dim];
        for (x, &c) in data.iter().zip(&assign) {
            for (s, v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(x) {
                *s += v;
            }
        }
        let mut shift: f64 = 0.0;
        for c in 0..k {
            let inv = 1.0 / counts[c] as f64;
            let new: Vec<f64> = sums[c * dim..(c + 1) * dim]
                .iter()
                .map(|s| s * inv)
                .collect();
            shift = shift.max(sq_dist(&new, model.centroid(c)).sqrt());
            model.centroids[c * dim..(c + 1) * dim].copy_from_slice(&new);
        }
        if shift < tol {
            break;
        }
    }
    model.inertia = assign_all(&model, &mut assign, &mut dist);
    model.inertia_trace.push(model.inertia);
    Ok(model)
}

/// Sets every segment's pseudo-label to its nearest centroid. `embed` maps a
/// batch of feature slices to embeddings.
pub fn assign_pseudo_labels<F>(
    pool: &mut [Segment],
    model: &KMeansModel,
    mut embed: F,
) -> Result<()>
where
    F: FnMut(&[&[f32]]) -> Result<Vec<Vec<f32>>>,
{
    let feats: Vec<&[f32]> = pool.iter().map(|s| s.features.as_slice()).collect();
    let emb = embed(&feats)?;
    if emb.len() != pool.len() {
        return Err(Error::shape(format!(
            "{} embeddings for {} segments",
            emb.len(),
            pool.len()
        )));
    }
    let labels: Vec<usize> = emb
        .iter()
        .map(|e| {
            if e.len() != model.dim {
                return Err(Error::shape(format!(
                    "{}-d embedding for {}-d centroids",
                    e.len(),
                    model.dim
                )));
            }
            let x: Vec<f64> = e.iter().map(|&v| f64::from(v)).collect();
            Ok(model.predict(&x))
        })
        .collect::<Result<_>>()?;
    for (s, l) in pool.iter_mut().zip(labels) {
        s.pseudo_label = Some(l);
    }
    Ok(())
}

/// One line of the pseudo-label export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoLabelRecord {
    pub utterance_id: String,
    pub segment_index: usize,
    pub pseudo_label: usize,
}

pub fn write_pseudo_labels(path: &Path, pool: &[Segment]) -> Result<()> {
    let mut out = Vec::new();
    for (i, s) in pool.iter().enumerate() {
        let rec = PseudoLabelRecord {
            utterance_id: s.utterance_id.clone(),
            segment_index: s.segment_index,
            pseudo_label: s.pseudo_label.ok_or(Error::MissingPseudoLabel(i))?,
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.push(b'\n');
    }
    fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

pub fn read_pseudo_labels(path: &Path) -> Result<Vec<PseudoLabelRecord>> {
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(
            serde_json::from_str(&line).map_err(|e| Error::MalformedRecord {
                line: n + 1,
                reason: e.to_string(),
            })?,
        );
    }
    Ok(records)
}

/// Copies exported labels onto the pool, matching by (utterance, segment).
pub fn apply_pseudo_labels(pool: &mut [Segment], records: &[PseudoLabelRecord]) -> Result<()> {
    let lookup: HashMap<(&str, usize), usize> = records
        .iter()
        .map(|r| ((r.utterance_id.as_str(), r.segment_index), r.pseudo_label))
        .collect();
    for (i, s) in pool.iter_mut().enumerate() {
        let label = lookup
            .get(&(s.utterance_id.as_str(), s.segment_index))
            .ok_or(Error::MissingPseudoLabel(i))?;
        s.pseudo_label = Some(*label);
    }
    Ok(())
}
