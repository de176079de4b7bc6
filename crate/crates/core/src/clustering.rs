//! Client dissimilarity from flattened B matrices, average-linkage
//! agglomerative clustering, silhouette scoring, and selection of the expert
//! count that maximizes the mean silhouette.
//!
//! The dissimilarity is computed once from the post-initialization adapters
//! and never refreshed: cluster membership stays fixed for the whole run.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::cosine_distance;

/// Symmetric client dissimilarity matrix with zero diagonal, entries in [0, 2].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceMatrix {
    n: usize,
    d: Vec<f64>,
}

impl DistanceMatrix {
    /// Validates symmetry (within 1e-12), a zero diagonal, and the [0, 2]
    /// range before accepting the raw row-major data.
    pub fn new(n: usize, d: Vec<f64>) -> Result<Self> {
        if d.len() != n * n {
            return Err(Error::DimensionMismatch {
                op: "DistanceMatrix::new",
                detail: format!("{n}x{n} needs {} entries, got {}", n * n, d.len()),
            });
        }
        for i in 0..n {
            if d[i * n + i] != 0.0 {
                return Err(Error::InvalidConfig(format!(
                    "nonzero diagonal at client {i}"
                )));
            }
            for j in 0..n {
                let v = d[i * n + j];
                if !v.is_finite() || !(-1e-12..=2.0 + 1e-12).contains(&v) {
                    return Err(Error::InvalidConfig(format!(
                        "distance({i},{j}) = {v} out of range"
                    )));
                }
                if (v - d[j * n + i]).abs() > 1e-12 {
                    return Err(Error::InvalidConfig(format!(
                        "asymmetric at ({i},{j}): {v} vs {}",
                        d[j * n + i]
                    )));
                }
            }
        }
        Ok(Self { n, d })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    pub fn data(&self) -> &[f64] {
        &self.d
    }
}

/// Mean over layers of the cosine dissimilarity between flattened B vectors,
/// with the diagonal forced to exact zero.
pub fn pairwise_distance(b_flat: &[Vec<Vec<f64>>]) -> Result<DistanceMatrix> {
    let n = b_flat.len();
    if n == 0 {
        return Err(Error::EmptyInput("pairwise_distance"));
    }
    let layers = b_flat[0].len();
    for (c, stack) in b_flat.iter().enumerate() {
        if stack.len() != layers {
            return Err(Error::DimensionMismatch {
                op: "pairwise_distance",
                detail: format!("client {c} has {} layers, expected {layers}", stack.len()),
            });
        }
        for (l, v) in stack.iter().enumerate() {
            if v.iter().all(|x| *x == 0.0) {
                return Err(Error::DegenerateClient {
                    client: c,
                    layer: l,
                });
            }
        }
    }
    let mut d = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let mut acc = 0.0;
            for (u, v) in b_flat[i].iter().zip(&b_flat[j]) {
                acc += cosine_distance(u, v)?;
            }
            // Rounding can leave cosine a hair outside [0, 2]; clamp so the
            // matrix invariant holds exactly.
            let v = (acc / layers as f64).clamp(0.0, 2.0);
            d[i * n + j] = v;
            d[j * n + i] = v;
        }
    }
    DistanceMatrix::new(n, d)
}

/// One merge of the bottom-up clustering: clusters are identified by their
/// smallest member index.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeStep {
    pub first: usize,
    pub second: usize,
    pub distance: f64,
    pub merged_size: usize,
}

/// Average-linkage agglomerative clustering down to `k` clusters.
///
/// Cluster-to-cluster dissimilarity is the unweighted mean over all cross
/// pairs, maintained with the Lance-Williams size-weighted update. Ties pick
/// the candidate pair whose (smaller representative, larger representative)
/// tuple is lexicographically smallest, so the merge order is deterministic.
/// Labels are numbered by ascending smallest member index.
pub fn agglomerative_cluster(dist: &DistanceMatrix, k: usize) -> Result<Vec<usize>> {
    Ok(agglomerative_with_trace(dist, k)?.0)
}

/// Same as [`agglomerative_cluster`], also returning the merge trace.
pub fn agglomerative_with_trace(
    dist: &DistanceMatrix,
    k: usize,
) -> Result<(Vec<usize>, Vec<MergeStep>)> {
    let n = dist.len();
    if k == 0 || k > n {
        return Err(Error::OutOfRange {
            op: "agglomerative_cluster",
            detail: format!("k={k} with {n} clients"),
        });
    }

    struct Cluster {
        members: Vec<usize>,
    }
    let mut clusters: Vec<Cluster> = (0..n).map(|i| Cluster { members: vec![i] }).collect();
    let mut active: Vec<usize> = (0..n).collect();
    // Cluster-level distances, indexed by cluster slot.
    let mut cd: Vec<Vec<f64>> = (0..n)
        .map(|i| (0..n).map(|j| dist.get(i, j)).collect())
        .collect();
    let mut trace = Vec::new();

    while active.len() > k {
        let mut best: Option<(usize, usize)> = None;
        let mut best_d = f64::INFINITY;
        for (ai, &ci) in active.iter().enumerate() {
            for &cj in active.iter().skip(ai + 1) {
                let d = cd[ci][cj];
                let better = match best {
                    None => true,
                    Some((bi, bj)) => {
                        if d < best_d {
                            true
                        } else if d > best_d {
                            false
                        } else {
                            let cand = (
                                clusters[ci].members[0].min(clusters[cj].members[0]),
                                clusters[ci].members[0].max(clusters[cj].members[0]),
                            );
                            let cur = (
                                clusters[bi].members[0].min(clusters[bj].members[0]),
                                clusters[bi].members[0].max(clusters[bj].members[0]),
                            );
                            cand < cur
                        }
                    }
                };
                if better {
                    best = Some((ci, cj));
                    best_d = d;
                }
            }
        }
        let (p, q) = best.expect("at least two active clusters");
        let (keep, drop) = if clusters[p].members[0] < clusters[q].members[0] {
            (p, q)
        } else {
            (q, p)
        };
        trace.push(MergeStep {
            first: clusters[keep].members[0],
            second: clusters[drop].members[0],
            distance: best_d,
            merged_size: clusters[keep].members.len() + clusters[drop].members.len(),
        });
        let size_keep = clusters[keep].members.len() as f64;
        let size_drop = clusters[drop].members.len() as f64;
        for &r in &active {
            if r == keep || r == drop {
                continue;
            }
            let d = (size_keep * cd[keep][r] + size_drop * cd[drop][r]) / (size_keep + size_drop);
            cd[keep][r] = d;
            cd[r][keep] = d;
        }
        let mut moved = std::mem::take(&mut clusters[drop].members);
        clusters[keep].members.append(&mut moved);
        clusters[keep].members.sort_unstable();
        active.retain(|&c| c != drop);
    }

    let mut groups: Vec<&Vec<usize>> = active.iter().map(|&c| &clusters[c].members).collect();
    groups.sort_by_key(|m| m[0]);
    let mut labels = vec![0usize; n];
    for (label, members) in groups.iter().enumerate() {
        for &m in members.iter() {
            labels[m] = label;
        }
    }
    Ok((labels, trace))
}

/// Mean silhouette and the per-client silhouette values of a labeling.
///
/// For client i, `a` is the mean dissimilarity to its own cluster's other
/// members and `b` the minimum mean dissimilarity to another cluster; the
/// silhouette is `(b - a) / max(a, b)`. Singleton clusters score 0, as does
/// the degenerate `a == b == 0` case (with a warning).
pub fn silhouette(dist: &DistanceMatrix, labels: &[usize], k: usize) -> Result<(f64, Vec<f64>)> {
    let n = dist.len();
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            op: "silhouette",
            detail: format!("{} labels for {} clients", labels.len(), n),
        });
    }
    let mut sizes = vec![0usize; k];
    for &l in labels {
        if l >= k {
            return Err(Error::OutOfRange {
                op: "silhouette",
                detail: format!("label {l} with k={k}"),
            });
        }
        sizes[l] += 1;
    }
    if sizes.contains(&0) {
        return Err(Error::InvalidConfig(format!(
            "silhouette requires {k} nonempty clusters"
        )));
    }

    let mut s = vec![0.0; n];
    for i in 0..n {
        let own = labels[i];
        if sizes[own] == 1 {
            continue;
        }
        let mut sums = vec![0.0; k];
        for j in 0..n {
            if j != i {
                sums[labels[j]] += dist.get(i, j);
            }
        }
        let a = sums[own] / (sizes[own] - 1) as f64;
        let b = (0..k)
            .filter(|c| *c != own)
            .map(|c| sums[c] / sizes[c] as f64)
            .fold(f64::INFINITY, f64::min);
        let denom = a.max(b);
        if denom == 0.0 {
            log::warn!("silhouette: client {i} is equidistant at zero to all clusters; scoring 0");
            continue;
        }
        s[i] = (b - a) / denom;
    }
    let mean = s.iter().sum::<f64>() / n as f64;
    Ok((mean, s))
}

/// Chosen partition plus the silhouette evidence behind it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterAssignment {
    pub num_clusters: usize,
    pub labels: Vec<usize>,
    pub silhouette_per_k: BTreeMap<usize, f64>,
    pub per_client_s: Vec<f64>,
}

impl ClusterAssignment {
    /// Members of each cluster, ascending within and across groups.
    pub fn groups(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_clusters];
        for (client, &label) in self.labels.iter().enumerate() {
            groups[label].push(client);
        }
        groups
    }
}

/// Sweeps k from 2 to `m_max`, clustering and scoring each, and returns the
/// partition at the k with the highest mean silhouette (ties go to the
/// smallest k). The full score table is kept for reporting.
pub fn select_num_experts(dist: &DistanceMatrix, m_max: usize) -> Result<ClusterAssignment> {
    let n = dist.len();
    if n < 2 {
        return Err(Error::OutOfRange {
            op: "select_num_experts",
            detail: format!("need at least 2 clients, have {n}"),
        });
    }
    if m_max < 2 || m_max > n {
        return Err(Error::OutOfRange {
            op: "select_num_experts",
            detail: format!("m_max={m_max} with {n} clients"),
        });
    }
    let mut table = BTreeMap::new();
    let mut best: Option<(f64, ClusterAssignment)> = None;
    for k in 2..=m_max {
        let labels = agglomerative_cluster(dist, k)?;
        let (score, per_client) = silhouette(dist, &labels, k)?;
        table.insert(k, score);
        // Strict improvement only: ascending k means ties keep the smaller k.
        if best.as_ref().is_none_or(|(s, _)| score > *s) {
            best = Some((
                score,
                ClusterAssignment {
                    num_clusters: k,
                    labels,
                    silhouette_per_k: BTreeMap::new(),
                    per_client_s: per_client,
                },
            ));
        }
    }
    let (_, mut chosen) = best.expect("k sweep is nonempty");
    chosen.silhouette_per_k = table;
    Ok(chosen)
}

/// Adjusted Rand index between two labelings; 1.0 means identical partitions.
pub fn adjusted_rand_index(a: &[usize], b: &[usize]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            op: "adjusted_rand_index",
            detail: format!("{} vs {} labels", a.len(), b.len()),
        });
    }
    let n = a.len();
    if n == 0 {
        return Err(Error::EmptyInput("adjusted_rand_index"));
    }
    let ka = a.iter().max().unwrap() + 1;
    let kb = b.iter().max().unwrap() + 1;
    let mut table = vec![0u64; ka * kb];
    let mut rows = vec![0u64; ka];
    let mut cols = vec![0u64; kb];
    for (&x, &y) in a.iter().zip(b) {
        table[x * kb + y] += 1;
        rows[x] += 1;
        cols[y] += 1;
    }
    let c2 = |x: u64| (x * x.saturating_sub(1)) as f64 / 2.0;
    let sum_ij: f64 = table.iter().map(|&v| c2(v)).sum();
    let sum_a: f64 = rows.iter().map(|&v| c2(v)).sum();
    let sum_b: f64 = cols.iter().map(|&v| c2(v)).sum();
    let total = c2(n as u64);
    let expected = sum_a * sum_b / total;
    let max_index = 0.5 * (sum_a + sum_b);
    if (max_index - expected).abs() < 1e-15 {
        // Both partitions degenerate (all singletons or a single block).
        return Ok(1.0);
    }
    Ok((sum_ij - expected) / (max_index - expected))
}
