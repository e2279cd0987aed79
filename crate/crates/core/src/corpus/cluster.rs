//! Flat-kernel mean shift and the cluster-based source entropy.

use std::collections::HashMap;

use crate::error::{Error, Result};

const MAX_ITERATIONS: usize = 300;

/// Cluster label per member (members are indexed by input position).
#[derive(Clone, Debug, PartialEq)]
pub struct ClusterAssignment {
    labels: Vec<usize>,
    centers: Vec<Vec<f64>>,
}

impl ClusterAssignment {
    pub fn from_labels(labels: Vec<usize>) -> Result<Self> {
        let k = labels.iter().max().map_or(0, |m| m + 1);
        let mut seen = vec![false; k];
        for &l in &labels {
            seen[l] = true;
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::contract("cluster labels must be contiguous from 0"));
        }
        Ok(Self {
            labels,
            centers: Vec::new(),
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn cluster_of(&self, member: usize) -> usize {
        self.labels[member]
    }

    pub fn num_clusters(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn centers(&self) -> &[Vec<f64>] {
        &self.centers
    }

    /// Members grouped by cluster, in a label-independent canonical form.
    pub fn partition(&self) -> Vec<Vec<usize>> {
        let mut groups = vec![Vec::new(); self.num_clusters()];
        for (i, &l) in self.labels.iter().enumerate() {
            groups[l].push(i);
        }
        groups.sort();
        groups
    }
}

fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Flat-kernel mean shift.
///
/// Every point is shifted to the mean of the input points within `bandwidth`
/// until the shift drops below `1e-4 * bandwidth` (at most 300 iterations).
/// Modes closer than `bandwidth / 2` are merged transitively, so the resulting
/// partition does not depend on input order. Labels are numbered by first
/// appearance.
pub fn mean_shift(points: &[Vec<f64>], bandwidth: f64) -> Result<ClusterAssignment> {
    if bandwidth.is_nan() || bandwidth <= 0.0 {
        return Err(Error::contract("mean_shift bandwidth must be positive"));
    }
    if points.is_empty() {
        return Err(Error::EmptyInput("mean_shift points"));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::contract("mean_shift points differ in dimension"));
    }
    let bw2 = bandwidth * bandwidth;
    let tol = 1e-4 * bandwidth;

    let modes: Vec<Vec<f64>> = points
        .iter()
        .map(|start| {
            let mut m = start.clone();
            for _ in 0..MAX_ITERATIONS {
                let mut sum = vec![0.0; dim];
                let mut count = 0usize;
                for p in points {
                    if dist2(p, &m) <= bw2 {
                        count += 1;
                        sum.iter_mut().zip(p).for_each(|(s, v)| *s += v);
                    }
                }
                // The current mode always has at least one neighbour: it only
                // ever moves to means of points within the bandwidth.
                let next: Vec<f64> = if count == 0 {
                    m.clone()
                } else {
                    sum.iter().map(|s| s / count as f64).collect()
                };
                let shift = dist2(&next, &m).sqrt();
                m = next;
                if shift < tol {
                    break;
                }
            }
            m
        })
        .collect();

    // Union-find over modes within half a bandwidth.
    let n = modes.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], i: usize) -> usize {
        let mut r = i;
        while parent[r] != r {
            r = parent[r];
        }
        let mut c = i;
        while parent[c] != r {
            let next = parent[c];
            parent[c] = r;
            c = next;
        }
        r
    }
    let merge2 = (bandwidth / 2.0) * (bandwidth / 2.0);
    for i in 0..n {
        for j in i + 1..n {
            if dist2(&modes[i], &modes[j]) < merge2 {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }

    let mut label_of_root: HashMap<usize, usize> = HashMap::new();
    let mut labels = Vec::with_capacity(n);
    let mut sums: Vec<(Vec<f64>, usize)> = Vec::new();
    for (i, mode) in modes.iter().enumerate() {
        let root = find(&mut parent, i);
        let next = label_of_root.len();
        let l = *label_of_root.entry(root).or_insert(next);
        if l == sums.len() {
            sums.push((vec![0.0; dim], 0));
        }
        sums[l].0.iter_mut().zip(mode).for_each(|(s, v)| *s += v);
        sums[l].1 += 1;
        labels.push(l);
    }
    let centers = sums
        .into_iter()
        .map(|(s, c)| s.into_iter().map(|v| v / c as f64).collect())
        .collect();
    Ok(ClusterAssignment { labels, centers })
}

/// Source entropy (bits) of each example: the entropy of the distribution of
/// context clusters paired with the example's response cluster.
///
/// `ctx` and `resp` assign the context and response of example `i` as member `i`.
pub fn source_entropy(
    num_examples: usize,
    ctx: &ClusterAssignment,
    resp: &ClusterAssignment,
) -> Result<Vec<f64>> {
    if ctx.labels.len() != num_examples || resp.labels.len() != num_examples {
        return Err(Error::contract(
            "every example's context and response must be cluster members",
        ));
    }
    let k_resp = resp.num_clusters();
    let k_ctx = ctx.num_clusters();
    let mut joint = vec![vec![0usize; k_ctx]; k_resp];
    for i in 0..num_examples {
        joint[resp.labels[i]][ctx.labels[i]] += 1;
    }
    let mut per_cluster = Vec::with_capacity(k_resp);
    for (c, row) in joint.iter().enumerate() {
        let total: usize = row.iter().sum();
        if total == 0 {
            return Err(Error::contract(format!("response cluster {c} is empty")));
        }
        let h: f64 = row
            .iter()
            .filter(|&&n| n > 0)
            .map(|&n| {
                let p = n as f64 / total as f64;
                -p * p.log2()
            })
            .sum();
        per_cluster.push(h.max(0.0));
    }
    Ok(resp.labels.iter().map(|&l| per_cluster[l]).collect())
}

/// Maps a token sequence to a fixed-size vector for clustering.
pub trait Embedder {
    fn embed(&self, tokens: &[String]) -> Vec<f64>;
}

/// L2-normalized bag of hashed character trigrams of the space-joined text.
#[derive(Clone, Debug)]
pub struct CharTrigramEmbedder {
    dim: usize,
}

impl CharTrigramEmbedder {
    pub fn new(dim: usize) -> Self {
        Self { dim: dim.max(1) }
    }
}

// 64-bit FNV-1a; stable across platforms and toolchains.
fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

impl Embedder for CharTrigramEmbedder {
    fn embed(&self, tokens: &[String]) -> Vec<f64> {
        let text: Vec<char> = format!("#{}#", tokens.join(" ")).chars().collect();
        let mut v = vec![0.0; self.dim];
        let mut buf = [0u8; 12];
        for w in text.windows(3) {
            let mut len = 0;
            for c in w {
                len += c.encode_utf8(&mut buf[len..]).len();
            }
            v[(fnv1a(&buf[..len]) % self.dim as u64) as usize] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            v.iter_mut().for_each(|x| *x /= norm);
        }
        v
    }
}
