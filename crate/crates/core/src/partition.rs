//! Per-class k-means partitioning in feature space, and the free/residual
//! split of the retain set against a forget set.

use std::collections::{BTreeMap, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::derive_seed;
use crate::error::{Error, Result};
use crate::harness::Dataset;
use crate::nn::{feature_extract, ExtractorParams, Tensor};

pub const MAX_LLOYD_ITERS: usize = 100;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansResult {
    pub assignments: Vec<usize>,
    pub centroids: Tensor,
    pub inertia: f64,
    /// Within-cluster sum of squares after each Lloyd iteration.
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, cen) in centroids.iter().enumerate() {
        let d = sq_dist(point, cen);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

fn kmeans_pp(points: &[&[f64]], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].to_vec()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if w > 0.0 && target < w {
                    chosen = i;
                    break;
                }
                target -= w;
            }
            // guard against landing on a zero-weight tail point by round-off
            if d2[chosen] == 0.0 {
                chosen = d2.iter().rposition(|&w| w > 0.0).unwrap_or(chosen);
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let c = points[pick].to_vec();
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, &c));
        }
        centroids.push(c);
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Nearest-centroid ties go to the lowest centroid index. A cluster that
/// ends up empty is reseeded at the point farthest from its own centroid.
pub fn kmeans(features: &Tensor, k: usize, seed: u64) -> Result<KMeansResult> {
    let n = features.rows();
    if k == 0 {
        return Err(Error::input("k must be at least 1"));
    }
    if k > n {
        return Err(Error::input(format!("k = {k} exceeds the {n} rows to cluster")));
    }
    let points: Vec<&[f64]> = (0..n).map(|i| features.row_slice(i)).collect();
    let d = features.cols();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(&points, k, &mut rng);
    let mut assignments = vec![usize::MAX; n];
    let mut history = Vec::new();

    for _ in 0..MAX_LLOYD_ITERS {
        let mut changed = false;
        let mut dists = vec![0.0; n];
        for (i, p) in points.iter().enumerate() {
            let (c, dist) = nearest(p, &centroids);
            if assignments[i] != c {
                assignments[i] = c;
                changed = true;
            }
            dists[i] = dist;
        }
        let mut counts = vec![0usize; k];
        for &a in &assignments {
            counts[a] += 1;
        }
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let far = (0..n)
                .filter(|&i| counts[assignments[i]] > 1)
                .fold(None, |best: Option<usize>, i| match best {
                    Some(b) if dists[b] >= dists[i] => Some(b),
                    _ => Some(i),
                });
            if let Some(i) = far {
                if dists[i] > 0.0 {
                    counts[assignments[i]] -= 1;
                    assignments[i] = c;
                    counts[c] = 1;
                    dists[i] = 0.0;
                    centroids[c] = points[i].to_vec();
                    changed = true;
                }
            }
        }
        let mut sums = vec![vec![0.0; d]; k];
        for (i, p) in points.iter().enumerate() {
            for (s, v) in sums[assignments[i]].iter_mut().zip(p.iter()) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        let inertia: f64 = points
            .iter()
            .zip(&assignments)
            .map(|(p, &a)| sq_dist(p, &centroids[a]))
            .sum();
        history.push(inertia);
        if !changed {
            break;
        }
    }
    let flat: Vec<f64> = centroids.into_iter().flatten().collect();
    Ok(KMeansResult {
        assignments,
        centroids: Tensor::from_rows(k, d, flat)?,
        inertia: *history.last().unwrap_or(&0.0),
        inertia_history: history,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cluster {
    pub id: usize,
    pub class_label: usize,
    pub member_ids: Vec<usize>,
    pub centroid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Partition {
    pub clusters: Vec<Cluster>,
    pub k: usize,
    pub class_count: usize,
    /// Classes that got fewer than `k` clusters, with the count they got.
    pub reduced_k: BTreeMap<usize, usize>,
    /// Clusters k-means left empty (duplicate points); not present in `clusters`.
    pub dropped_empty: usize,
}

impl Partition {
    pub fn total_members(&self) -> usize {
        self.clusters.iter().map(|c| c.member_ids.len()).sum()
    }

    pub fn cluster(&self, id: usize) -> Option<&Cluster> {
        self.clusters.iter().find(|c| c.id == id)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// (class, members, centroid) before empty clusters are dropped.
type RawCluster = (usize, Vec<usize>, Vec<f64>);

/// Clusters the samples `ids` of `dataset` class by class in the feature
/// space of `ext`. Each class is clustered with its own derived seed, so
/// the result does not depend on scheduling.
pub fn partition_dataset(
    dataset: &Dataset,
    ids: &[usize],
    ext: &ExtractorParams,
    k: usize,
    seed: u64,
) -> Result<Partition> {
    if ids.is_empty() {
        return Err(Error::input("cannot partition an empty dataset"));
    }
    if k == 0 {
        return Err(Error::input("k must be at least 1"));
    }
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in ids {
        if i >= dataset.len() {
            return Err(Error::input(format!("sample id {i} out of range")));
        }
        by_class.entry(dataset.labels[i]).or_default().push(i);
    }
    let groups: Vec<(usize, Vec<usize>)> = by_class.into_iter().collect();
    let per_class: Vec<Result<Vec<RawCluster>>> = groups
        .par_iter()
        .map(|(class, members)| {
            let feats = feature_extract(ext, &dataset.samples.select_rows(members))?;
            if members.len() <= k {
                return Ok(members
                    .iter()
                    .enumerate()
                    .map(|(j, &m)| (*class, vec![m], feats.row_slice(j).to_vec()))
                    .collect());
            }
            let km = kmeans(&feats, k, derive_seed(seed, *class as u64))?;
            let mut out: Vec<RawCluster> =
                (0..k).map(|c| (*class, Vec::new(), km.centroids.row_slice(c).to_vec())).collect();
            for (j, &a) in km.assignments.iter().enumerate() {
                out[a].1.push(members[j]);
            }
            Ok(out)
        })
        .collect();

    let mut clusters = Vec::new();
    let mut reduced_k = BTreeMap::new();
    let mut dropped_empty = 0;
    for (res, (class, members)) in per_class.into_iter().zip(&groups) {
        let res = res?;
        if members.len() < k {
            reduced_k.insert(*class, members.len());
        }
        for (class_label, member_ids, centroid) in res {
            if member_ids.is_empty() {
                dropped_empty += 1;
                continue;
            }
            clusters.push(Cluster { id: clusters.len(), class_label, member_ids, centroid });
        }
    }
    Ok(Partition { clusters, k, class_count: groups.len(), reduced_k, dropped_empty })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitResult {
    pub free_cluster_ids: Vec<usize>,
    /// Clusters containing at least one forget id.
    pub touched_cluster_ids: Vec<usize>,
    pub residual_image_ids: Vec<usize>,
}

impl SplitResult {
    pub fn free_member_ids(&self, partition: &Partition) -> Vec<usize> {
        self.free_cluster_ids
            .iter()
            .filter_map(|&c| partition.cluster(c))
            .flat_map(|c| c.member_ids.iter().copied())
            .collect()
    }
}

/// Splits the clusters of `partition` against `forget_ids`: a cluster is
/// free when it holds no forget sample; the residual is every non-forget
/// member of the clusters that do.
pub fn sample_forget(partition: &Partition, forget_ids: &[usize]) -> Result<SplitResult> {
    let mut owner: HashMap<usize, usize> = HashMap::new();
    for c in &partition.clusters {
        for &m in &c.member_ids {
            owner.insert(m, c.id);
        }
    }
    let forget: HashSet<usize> = forget_ids.iter().copied().collect();
    let mut touched = HashSet::new();
    for f in &forget {
        match owner.get(f) {
            Some(&c) => {
                touched.insert(c);
            }
            None => return Err(Error::input(format!("forget id {f} is not in the partition"))),
        }
    }
    let mut free_cluster_ids = Vec::new();
    let mut touched_cluster_ids = Vec::new();
    let mut residual_image_ids = Vec::new();
    for c in &partition.clusters {
        if touched.contains(&c.id) {
            touched_cluster_ids.push(c.id);
            residual_image_ids.extend(c.member_ids.iter().filter(|m| !forget.contains(m)));
        } else {
            free_cluster_ids.push(c.id);
        }
    }
    Ok(SplitResult { free_cluster_ids, touched_cluster_ids, residual_image_ids })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn col(v: &[f64]) -> Tensor {
        Tensor::from_rows(v.len(), 1, v.to_vec()).unwrap()
    }

    fn sse(points: &[f64], assign: &[usize], k: usize) -> f64 {
        let mut total = 0.0;
        for c in 0..k {
            let members: Vec<f64> =
                points.iter().zip(assign).filter(|(_, &a)| a == c).map(|(&p, _)| p).collect();
            if members.is_empty() {
                continue;
            }
            let m = members.iter().sum::<f64>() / members.len() as f64;
            total += members.iter().map(|p| (p - m) * (p - m)).sum::<f64>();
        }
        total
    }

    #[test]
    fn two_groups_match_exhaustive_optimum() {
        let pts = [-10.02, -9.99, -10.0, -10.01, -9.98, 10.0, 10.03, 9.97, 10.01, 9.99];
        let mut best = f64::INFINITY;
        let mut best_assign = vec![];
        for mask in 0u32..(1 << pts.len()) {
            let a: Vec<usize> = (0..pts.len()).map(|i| ((mask >> i) & 1) as usize).collect();
            let s = sse(&pts, &a, 2);
            if s < best {
                best = s;
                best_assign = a;
            }
        }
        let km = kmeans(&col(&pts), 2, 3).unwrap();
        assert!((km.inertia - best).abs() < 1e-9);
        for i in 0..pts.len() {
            for j in 0..pts.len() {
                assert_eq!(
                    km.assignments[i] == km.assignments[j],
                    best_assign[i] == best_assign[j]
                );
            }
        }
    }

    #[test]
    fn k_one_is_the_mean() {
        let f = Tensor::from_rows(4, 2, vec![0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0]).unwrap();
        let km = kmeans(&f, 1, 0).unwrap();
        assert_eq!(km.centroids.data(), &[3.0, 4.0]);
    }

    #[test]
    fn k_equals_rows() {
        let f = col(&[0.0, 1.5, -2.0, 7.0, 3.3]);
        let km = kmeans(&f, 5, 1).unwrap();
        let mut seen = km.assignments.clone();
        seen.sort();
        seen.dedup();
        assert_eq!(seen.len(), 5);
        assert_eq!(km.inertia, 0.0);
        assert!(kmeans(&f, 6, 1).is_err());
        assert!(kmeans(&f, 0, 1).is_err());
    }

    #[test]
    fn inertia_non_increasing() {
        let vals: Vec<f64> = (0..300).map(|i| ((i * 7919) % 1000) as f64 / 37.0).collect();
        let f = Tensor::from_rows(150, 2, vals).unwrap();
        for seed in 0..10 {
            let km = kmeans(&f, 7, seed).unwrap();
            for w in km.inertia_history.windows(2) {
                assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", km.inertia_history);
            }
            assert_eq!(km, kmeans(&f, 7, seed).unwrap());
        }
    }

    fn manual_partition(sizes: &[usize]) -> Partition {
        let mut next = 0;
        let clusters = sizes
            .iter()
            .enumerate()
            .map(|(id, &s)| {
                let member_ids = (next..next + s).collect();
                next += s;
                Cluster { id, class_label: 0, member_ids, centroid: vec![0.0] }
            })
            .collect();
        Partition { clusters, k: sizes.len(), class_count: 1, reduced_k: BTreeMap::new(), dropped_empty: 0 }
    }

    #[test]
    fn sample_forget_cases() {
        let p = manual_partition(&[5, 3, 4]);
        let none = sample_forget(&p, &[]).unwrap();
        assert_eq!(none.free_cluster_ids, vec![0, 1, 2]);
        assert!(none.residual_image_ids.is_empty());

        let whole = sample_forget(&p, &[5, 6, 7]).unwrap();
        assert_eq!(whole.free_cluster_ids, vec![0, 2]);
        assert!(whole.residual_image_ids.is_empty());

        let one = sample_forget(&p, &[2]).unwrap();
        assert_eq!(one.free_cluster_ids, vec![1, 2]);
        assert_eq!(one.residual_image_ids, vec![0, 1, 3, 4]);
        assert_eq!(one.free_member_ids(&p), vec![5, 6, 7, 8, 9, 10, 11]);

        assert!(sample_forget(&p, &[99]).is_err());
    }
}
