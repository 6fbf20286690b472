//! Clustering read-out and evaluation: argmax clusters, occupancy counts,
//! V-measure, co-occurrence and distance matrices, and a k-means baseline.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::{NdArray, SeededRng};
use crate::error::{Error, Result};
use crate::model::argmax_lowest;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterSource {
    ArgmaxPhi,
    Kmeans,
    GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub labels: Vec<usize>,
    pub source: ClusterSource,
}

impl ClusterAssignment {
    pub fn ground_truth(labels: Vec<usize>) -> Self {
        Self {
            labels,
            source: ClusterSource::GroundTruth,
        }
    }
}

/// `argmax_k phi_jk` per feature, ties to the lowest index.
pub fn extract_clusters(phi: &NdArray) -> ClusterAssignment {
    ClusterAssignment {
        labels: (0..phi.rows()).map(|j| argmax_lowest(phi.row(j))).collect(),
        source: ClusterSource::ArgmaxPhi,
    }
}

/// Number of components with responsibility mass above `threshold`.
pub fn count_nonempty(phi: &NdArray, threshold: f64) -> usize {
    if phi.rows() == 0 {
        return 0;
    }
    let k = phi.cols();
    (0..k)
        .filter(|&kk| (0..phi.rows()).map(|j| phi.get2(j, kk)).sum::<f64>() > threshold)
        .count()
}

fn entropy_of_counts<'a>(counts: impl Iterator<Item = &'a usize>, n: f64) -> f64 {
    counts
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

/// Harmonic mean of homogeneity and completeness, natural-log entropies.
pub fn v_measure(pred: &ClusterAssignment, truth: &ClusterAssignment) -> Result<f64> {
    let (a, b) = (&pred.labels, &truth.labels);
    if a.len() != b.len() {
        return Err(Error::shape("v_measure labels", &[b.len()], &[a.len()]));
    }
    if a.is_empty() {
        return Ok(1.0);
    }
    let n = a.len() as f64;
    let mut joint: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    let mut by_class: BTreeMap<usize, usize> = BTreeMap::new();
    let mut by_cluster: BTreeMap<usize, usize> = BTreeMap::new();
    for (&k, &c) in a.iter().zip(b) {
        *joint.entry((c, k)).or_default() += 1;
        *by_class.entry(c).or_default() += 1;
        *by_cluster.entry(k).or_default() += 1;
    }
    let h_c = entropy_of_counts(by_class.values(), n);
    let h_k = entropy_of_counts(by_cluster.values(), n);
    // H(C|K) = H(C, K) − H(K)
    let h_ck = entropy_of_counts(joint.values(), n);
    let h_c_given_k = (h_ck - h_k).max(0.0);
    let h_k_given_c = (h_ck - h_c).max(0.0);
    let homogeneity = if h_c == 0.0 { 1.0 } else { (1.0 - h_c_given_k / h_c).max(0.0) };
    let completeness = if h_k == 0.0 { 1.0 } else { (1.0 - h_k_given_c / h_k).max(0.0) };
    if homogeneity + completeness == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * homogeneity * completeness / (homogeneity + completeness))
}

/// `S_jj' = Σ_k phi_jk phi_j'k`.
pub fn cooccurrence_matrix(phi: &NdArray) -> NdArray {
    let p = phi.rows();
    let mut out = NdArray::zeros(&[p, p]);
    for j in 0..p {
        for l in j..p {
            let s: f64 = phi.row(j).iter().zip(phi.row(l)).map(|(a, b)| a * b).sum();
            out.set2(j, l, s);
            out.set2(l, j, s);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrices {
    pub euclidean: NdArray,
    pub pearson: NdArray,
}

/// Pairwise Euclidean distances and Pearson correlations between feature
/// columns. Zero-variance features get correlation 0 (1 with themselves).
pub fn similarity_matrices(values: &NdArray) -> Result<SimilarityMatrices> {
    let (n, p) = (values.rows(), values.cols());
    if n < 2 {
        return Err(Error::Config(format!("similarity needs at least 2 observations, got {n}")));
    }
    let cols = values.transpose2();
    let centred: Vec<Vec<f64>> = (0..p)
        .map(|j| {
            let c = cols.row(j);
            let mean = c.iter().sum::<f64>() / n as f64;
            c.iter().map(|v| v - mean).collect()
        })
        .collect();
    let norms: Vec<f64> = centred.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    for (j, &s) in norms.iter().enumerate() {
        if s == 0.0 {
            log::warn!("feature {j} has zero variance; its correlations are set to 0");
        }
    }
    let mut euclidean = NdArray::zeros(&[p, p]);
    let mut pearson = NdArray::zeros(&[p, p]);
    for j in 0..p {
        for l in j..p {
            let d: f64 = cols
                .row(j)
                .iter()
                .zip(cols.row(l))
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let r = if j == l {
                1.0
            } else if norms[j] == 0.0 || norms[l] == 0.0 {
                0.0
            } else {
                let dot: f64 = centred[j].iter().zip(&centred[l]).map(|(a, b)| a * b).sum();
                (dot / (norms[j] * norms[l])).clamp(-1.0, 1.0)
            };
            euclidean.set2(j, l, d);
            euclidean.set2(l, j, d);
            pearson.set2(j, l, r);
            pearson.set2(l, j, r);
        }
    }
    Ok(SimilarityMatrices { euclidean, pearson })
}

/// k-means result: labels plus within-cluster sum of squares per iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct KmeansFit {
    pub assignment: ClusterAssignment,
    pub wcss: f64,
    pub history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum()
}

const KMEANS_MAX_ITER: usize = 300;

fn kmeans_once(points: &NdArray, k: usize, rng: &mut SeededRng) -> KmeansFit {
    let (n, d) = (points.rows(), points.cols());
    // k-means++ seeding
    let mut centres: Vec<Vec<f64>> = vec![points.row(rng.below(n)).to_vec()];
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), &centres[0])).collect();
    while centres.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.uniform() * total;
            let mut pick = n - 1;
            for (i, &w) in nearest.iter().enumerate() {
                if target < w {
                    pick = i;
                    break;
                }
                target -= w;
            }
            pick
        } else {
            rng.below(n)
        };
        centres.push(points.row(next).to_vec());
        for (i, v) in nearest.iter_mut().enumerate() {
            *v = v.min(sq_dist(points.row(i), &centres[centres.len() - 1]));
        }
    }
    let mut labels = vec![0; n];
    let mut history = Vec::new();
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        let mut wcss = 0.0;
        for i in 0..n {
            let (best, dist) = centres
                .iter()
                .enumerate()
                .map(|(c, ctr)| (c, sq_dist(points.row(i), ctr)))
                .fold((0, f64::INFINITY), |acc, x| if x.1 < acc.1 { x } else { acc });
            changed |= labels[i] != best;
            labels[i] = best;
            wcss += dist;
        }
        history.push(wcss);
        if !changed && history.len() > 1 {
            break;
        }
        let mut sums = vec![vec![0.0; d]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[labels[i]] += 1;
            for (s, v) in sums[labels[i]].iter_mut().zip(points.row(i)) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centres[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            } else {
                // re-seed an empty cluster at the point farthest from its centre
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = sq_dist(points.row(a), &centres[labels[a]]);
                        let db = sq_dist(points.row(b), &centres[labels[b]]);
                        da.total_cmp(&db)
                    })
                    .expect("n > 0");
                centres[c] = points.row(far).to_vec();
            }
        }
    }
    let wcss = *history.last().expect("at least one iteration");
    KmeansFit {
        assignment: ClusterAssignment {
            labels,
            source: ClusterSource::Kmeans,
        },
        wcss,
        history,
    }
}

/// Lloyd's algorithm on the rows of `points` (one row per feature), best of
/// `restarts` k-means++ initialisations by WCSS.
pub fn kmeans(points: &NdArray, k: usize, restarts: usize, seed: u64) -> Result<KmeansFit> {
    let n = points.rows();
    if k == 0 || k > n {
        return Err(Error::Config(format!("k-means needs 1 <= k <= {n}, got k = {k}")));
    }
    let mut rng = SeededRng::new(seed);
    let mut best: Option<KmeansFit> = None;
    for _ in 0..restarts.max(1) {
        let fit = kmeans_once(points, k, &mut rng);
        if best.as_ref().is_none_or(|b| fit.wcss < b.wcss) {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one restart"))
}
