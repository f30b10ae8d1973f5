//! Bottom-up clustering with average linkage on cosine distance.

use serde::Serialize;

use crate::error::{Mc3Error, Result};
use crate::math::{cosine, dot, Matrix};

/// One merge of two clusters, named by their smallest member index.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Clustering {
    /// Cluster label per input row. Labels are numbered in order of each
    /// cluster's smallest member index.
    pub assignments: Vec<usize>,
    /// Members per cluster, ascending.
    pub members: Vec<Vec<usize>>,
    /// Up to `m` members per cluster closest to the cluster mean direction.
    pub exemplars: Vec<Vec<usize>>,
    pub merges: Vec<Merge>,
}

impl Clustering {
    pub fn sizes(&self) -> Vec<usize> {
        self.members.iter().map(Vec::len).collect()
    }
}

/// Merges the closest pair of clusters until `n_clusters` remain. The
/// distance between clusters is the mean pairwise cosine distance
/// `1 - cos` between their members; equal distances are resolved by the
/// smallest (lower index, higher index) pair, where a cluster's index is its
/// smallest member.
pub fn agglomerative_cluster(points: &Matrix, n_clusters: usize, exemplars: usize) -> Result<Clustering> {
    let n = points.rows();
    if n_clusters == 0 {
        return Err(Mc3Error::config("n_clusters", "must be at least 1"));
    }
    if n < n_clusters {
        return Err(Mc3Error::TooFewPoints {
            needed: n_clusters,
            got: n,
        });
    }
    points.check_finite("clustering input")?;

    let mut dist = vec![0.0; n * n];
    for i in 0..n {
        for j in i + 1..n {
            let d = 1.0 - cosine(points.row(i), points.row(j));
            dist[i * n + j] = d;
            dist[j * n + i] = d;
        }
    }
    let mut active = vec![true; n];
    let mut size = vec![1usize; n];
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    let mut nn = vec![usize::MAX; n];
    let mut nnd = vec![f64::INFINITY; n];

    let refresh = |i: usize, active: &[bool], dist: &[f64], nn: &mut [usize], nnd: &mut [f64]| {
        nn[i] = usize::MAX;
        nnd[i] = f64::INFINITY;
        for j in 0..n {
            if j != i && active[j] && dist[i * n + j] < nnd[i] {
                nnd[i] = dist[i * n + j];
                nn[i] = j;
            }
        }
    };
    for i in 0..n {
        refresh(i, &active, &dist, &mut nn, &mut nnd);
    }

    let mut merges = Vec::with_capacity(n - n_clusters);
    for _ in 0..n - n_clusters {
        // The smallest index taking part in a closest pair, then its
        // smallest partner, gives the lexicographically smallest pair.
        let mut a = usize::MAX;
        for i in 0..n {
            if active[i] && (a == usize::MAX || nnd[i] < nnd[a]) {
                a = i;
            }
        }
        let b = nn[a];
        merges.push(Merge {
            a,
            b,
            distance: nnd[a],
        });
        let (sa, sb) = (size[a] as f64, size[b] as f64);
        active[b] = false;
        for k in 0..n {
            if active[k] && k != a {
                let d = (sa * dist[a * n + k] + sb * dist[b * n + k]) / (sa + sb);
                dist[a * n + k] = d;
                dist[k * n + a] = d;
            }
        }
        size[a] += size[b];
        let moved = std::mem::take(&mut members[b]);
        members[a].extend(moved);
        members[a].sort_unstable();

        refresh(a, &active, &dist, &mut nn, &mut nnd);
        for k in 0..n {
            if !active[k] || k == a {
                continue;
            }
            if nn[k] == a || nn[k] == b {
                refresh(k, &active, &dist, &mut nn, &mut nnd);
            } else {
                let d = dist[k * n + a];
                if d < nnd[k] || (d == nnd[k] && a < nn[k]) {
                    nnd[k] = d;
                    nn[k] = a;
                }
            }
        }
    }

    let clusters: Vec<Vec<usize>> = (0..n).filter(|&i| active[i]).map(|i| members[i].clone()).collect();
    let mut assignments = vec![0; n];
    for (label, c) in clusters.iter().enumerate() {
        for &i in c {
            assignments[i] = label;
        }
    }
    let exemplars = clusters.iter().map(|c| exemplars_of(points, c, exemplars)).collect();
    Ok(Clustering {
        assignments,
        members: clusters,
        exemplars,
        merges,
    })
}

/// Members ranked by cosine similarity to the normalized cluster mean,
/// ties by index.
fn exemplars_of(points: &Matrix, members: &[usize], m: usize) -> Vec<usize> {
    let mut mean = vec![0.0; points.cols()];
    for &i in members {
        let r = points.row(i);
        let nr = dot(r, r).sqrt();
        if nr > 0.0 {
            for (s, x) in mean.iter_mut().zip(r) {
                *s += x / nr;
            }
        }
    }
    let mut ranked: Vec<(f64, usize)> = members.iter().map(|&i| (cosine(points.row(i), &mean), i)).collect();
    ranked.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
    ranked.into_iter().take(m).map(|(_, i)| i).collect()
}
