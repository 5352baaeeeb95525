//! Input-gradient saliency: per-point importance from a classifier's
//! gradient with respect to the input coordinates.

use std::fmt::Write as _;

use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::nn::Classifier;
use crate::pointcloud::PointCloud;
use crate::rng;
use crate::tensorgraph::{Graph, Tensor};

const KMEANS_MAX_ITERS: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    pub scores: Vec<f64>,
    /// Point indices by descending effective score, ties by lower index.
    pub ranking: Vec<usize>,
    pub cluster_ids: Option<Vec<usize>>,
    pub cluster_scores: Option<Vec<f64>>,
}

impl SaliencyMap {
    pub fn from_scores(scores: Vec<f64>) -> Result<Self> {
        if let Some(bad) = scores.iter().find(|s| !s.is_finite() || **s < 0.0) {
            return Err(Error::Data(format!("saliency score {bad} is not a finite nonnegative value")));
        }
        let ranking = rank_descending(&scores);
        Ok(Self {
            scores,
            ranking,
            cluster_ids: None,
            cluster_scores: None,
        })
    }

    /// All-zero map; its ranking is the identity.
    pub fn uniform(n: usize) -> Self {
        Self {
            scores: vec![0.0; n],
            ranking: (0..n).collect(),
            cluster_ids: None,
            cluster_scores: None,
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    /// Score used for targeting: the cluster mean in cluster mode, the
    /// point's own score otherwise.
    pub fn effective(&self, i: usize) -> f64 {
        match (&self.cluster_ids, &self.cluster_scores) {
            (Some(ids), Some(cs)) => cs[ids[i]],
            _ => self.scores[i],
        }
    }

    pub fn effective_scores(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.effective(i)).collect()
    }

    /// Map for the sub-cloud made of rows `keep`, re-ranked.
    pub fn restrict(&self, keep: &[usize]) -> SaliencyMap {
        let scores: Vec<f64> = keep.iter().map(|&i| self.scores[i]).collect();
        let cluster_ids = self
            .cluster_ids
            .as_ref()
            .map(|ids| keep.iter().map(|&i| ids[i]).collect::<Vec<_>>());
        let mut map = SaliencyMap {
            ranking: Vec::new(),
            scores,
            cluster_ids,
            cluster_scores: self.cluster_scores.clone(),
        };
        map.ranking = rank_descending(&map.effective_scores());
        map
    }

    /// Debug dump: one `point_index score cluster_id` line per point, with
    /// `-` when there is no clustering.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        for (i, score) in self.scores.iter().enumerate() {
            match &self.cluster_ids {
                Some(ids) => writeln!(s, "{i} {score:e} {}", ids[i]).unwrap(),
                None => writeln!(s, "{i} {score:e} -").unwrap(),
            }
        }
        s
    }
}

/// Indices sorted by descending score; equal scores keep ascending index.
pub fn rank_descending(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

/// Gradient of the pre-softmax logit `target` with respect to every input
/// coordinate, as an `[N, 3]` tensor. The model is only read.
pub fn input_gradient<C: Classifier + ?Sized>(model: &C, cloud: &PointCloud, target: usize) -> Result<Tensor> {
    if target >= model.num_classes() {
        return Err(Error::Index {
            what: "input_gradient target",
            index: target,
            len: model.num_classes(),
        });
    }
    let mut g = Graph::new();
    let x = g.leaf(cloud.to_tensor()?.with_grad());
    let logits = model.logits(&mut g, x)?;
    let logit = g.pick(logits, target)?;
    g.backward(logit)?;
    let grad = g
        .grad(x)
        .map(|s| s.to_vec())
        .unwrap_or_else(|| vec![0.0; cloud.len() * 3]);
    Tensor::new(vec![cloud.len(), 3], grad)
}

/// Per-point score = Euclidean norm of that point's gradient row.
pub fn saliency_scores(gradients: &Tensor) -> Result<SaliencyMap> {
    let (n, c) = gradients.dims2()?;
    if c != 3 {
        return Err(Error::Shape {
            op: "saliency_scores",
            left: gradients.shape().to_vec(),
            right: vec![n, 3],
        });
    }
    let d = gradients.data();
    let scores = (0..n)
        .map(|i| (d[3 * i] * d[3 * i] + d[3 * i + 1] * d[3 * i + 1] + d[3 * i + 2] * d[3 * i + 2]).sqrt())
        .collect();
    SaliencyMap::from_scores(scores)
}

/// Saliency map of `cloud` under `model` for the cloud's own label.
pub fn class_saliency<C: Classifier + ?Sized>(model: &C, cloud: &PointCloud) -> Result<SaliencyMap> {
    saliency_scores(&input_gradient(model, cloud, cloud.label)?)
}

fn dist2(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    (a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2) + (a[2] - b[2]).powi(2)
}

fn nearest(p: &[f64; 3], centroids: &[[f64; 3]]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best_d {
            best = j;
            best_d = d;
        }
    }
    best
}

/// Lloyd's k-means on coordinates with k-means++ seeding.
///
/// Returns per-point cluster ids. Ties in assignment go to the lower cluster
/// index and empty clusters keep their previous centroid.
pub fn kmeans(points: &[[f64; 3]], k: usize, seed: u64) -> Result<Vec<usize>> {
    let n = points.len();
    if k == 0 || k > n {
        return Err(Error::Config(format!("cluster count {k} must be in 1..={n}")));
    }
    let mut rng = rng::stream(seed, "kmeans++", &[n as u64, k as u64]);
    let mut centroids = vec![points[rng.random_range(0..n)]];
    let mut d2: Vec<f64> = points.iter().map(|p| dist2(p, &centroids[0])).collect();
    while centroids.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(w) => w.sample(&mut rng),
            // every point coincides with a centroid already
            Err(_) => rng.random_range(0..n),
        };
        let c = points[next];
        centroids.push(c);
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(dist2(p, &c));
        }
    }
    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    for _ in 0..KMEANS_MAX_ITERS {
        let mut sums = vec![[0.0; 3]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assign) {
            for t in 0..3 {
                sums[a][t] += p[t];
            }
            counts[a] += 1;
        }
        for j in 0..k {
            if counts[j] > 0 {
                centroids[j] = sums[j].map(|s| s / counts[j] as f64);
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        if next == assign {
            break;
        }
        assign = next;
    }
    Ok(assign)
}

/// Attach a k-means clustering of the cloud's coordinates to `map`. Each
/// cluster's score is the mean of its members' scores and the ranking is
/// recomputed on those cluster scores.
pub fn cluster_saliency(cloud: &PointCloud, map: &SaliencyMap, k: usize, seed: u64) -> Result<SaliencyMap> {
    if map.len() != cloud.len() {
        return Err(Error::Shape {
            op: "cluster_saliency",
            left: vec![cloud.len()],
            right: vec![map.len()],
        });
    }
    let ids = kmeans(&cloud.points, k, seed)?;
    let mut sums = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for (&c, &s) in ids.iter().zip(&map.scores) {
        sums[c] += s;
        counts[c] += 1;
    }
    let cluster_scores: Vec<f64> = sums
        .iter()
        .zip(&counts)
        .map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 })
        .collect();
    let mut out = SaliencyMap {
        scores: map.scores.clone(),
        ranking: Vec::new(),
        cluster_ids: Some(ids),
        cluster_scores: Some(cluster_scores),
    };
    out.ranking = rank_descending(&out.effective_scores());
    Ok(out)
}

/// `ceil(fraction * N)` with a small tolerance so products such as
/// `0.7 * 10` do not round up past the exact count.
pub fn fraction_count(fraction: f64, n: usize) -> usize {
    let raw = fraction.clamp(0.0, 1.0) * n as f64;
    ((raw - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// The first `ceil(fraction * N)` indices of the ranking.
pub fn top_fraction(map: &SaliencyMap, fraction: f64) -> Vec<usize> {
    map.ranking[..fraction_count(fraction, map.len())].to_vec()
}
