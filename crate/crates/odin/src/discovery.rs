//! Object discovery: k-means over feature maps, proposal pyramids, and the
//! segmentation cache used by the discrete update schedule.
//!
//! Clustering is Lloyd's algorithm with k-means++ initialization. Ties break
//! to the lowest centroid index, empty clusters are re-seeded to the point
//! farthest from its assigned centroid, and everything is deterministic in
//! the seed. Feature vectors are L2-normalized before clustering.

use std::collections::HashMap;

use rand::Rng;

use crate::autodiff::l2_normalize_forward;
use crate::error::{Error, Result};
use crate::model::ModelParamsOf;
use crate::scalar::Scalar;
use crate::tensor::{LabelMap, Mask, TensorOf};
use crate::util::substream;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KMeansConfig {
    pub max_iters: usize,
    pub tol: f64,
    pub restarts: usize,
}

impl Default for KMeansConfig {
    fn default() -> Self {
        KMeansConfig { max_iters: 100, tol: 1e-6, restarts: 1 }
    }
}

#[derive(Clone, Debug)]
pub struct KMeansResult<S> {
    /// Per-grid-cell labels in `[0, k)`.
    pub labels: LabelMap,
    /// `[k, d]` centroid matrix.
    pub centroids: TensorOf<S>,
    /// Final sum of squared distances to assigned centroids.
    pub inertia: S,
    /// Lloyd iterations of the winning restart.
    pub iterations: usize,
    /// Inertia after each assignment step; non-increasing.
    pub inertia_trace: Vec<S>,
}

/// Flat clustering result over `[n, d]` points.
#[derive(Clone, Debug)]
pub struct PointClustering<S> {
    pub assignments: Vec<usize>,
    pub centroids: TensorOf<S>,
    pub inertia: S,
    pub iterations: usize,
    pub inertia_trace: Vec<S>,
}

fn sq_dist<S: Scalar>(a: &[S], b: &[S]) -> S {
    a.iter().zip(b).map(|(&x, &y)| (x - y) * (x - y)).sum()
}

/// k-means++ seeding: first centroid uniform, the rest sampled with
/// probability proportional to the squared distance to the nearest chosen
/// centroid.
fn kmeans_plus_plus<S: Scalar>(
    points: &TensorOf<S>,
    k: usize,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Vec<Vec<S>> {
    let n = points.shape()[0];
    let d = points.shape()[1];
    let point = |i: usize| &points.data()[i * d..(i + 1) * d];

    let mut centroids: Vec<Vec<S>> = Vec::with_capacity(k);
    centroids.push(point(rng.random_range(0..n)).to_vec());
    let mut best: Vec<f64> = (0..n)
        .map(|i| sq_dist(point(i), &centroids[0]).to_f64_lossy())
        .collect();
    while centroids.len() < k {
        let total: f64 = best.iter().sum();
        let chosen = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut idx = n - 1;
            for (i, &w) in best.iter().enumerate() {
                if target < w {
                    idx = i;
                    break;
                }
                target -= w;
            }
            idx
        } else {
            // All points coincide with chosen centroids.
            rng.random_range(0..n)
        };
        centroids.push(point(chosen).to_vec());
        for i in 0..n {
            let dist = sq_dist(point(i), centroids.last().unwrap()).to_f64_lossy();
            if dist < best[i] {
                best[i] = dist;
            }
        }
    }
    centroids
}

/// Lloyd iterations from explicit initial centroids. Public so tests can
/// check that permuting the initialization permutes labels but not the
/// induced partition.
pub fn lloyd<S: Scalar>(
    points: &TensorOf<S>,
    init: Vec<Vec<S>>,
    max_iters: usize,
    tol: f64,
) -> PointClustering<S> {
    let n = points.shape()[0];
    let d = points.shape()[1];
    let k = init.len();
    let point = |i: usize| &points.data()[i * d..(i + 1) * d];

    let mut centroids = init;
    let mut assignments = vec![0usize; n];
    let mut trace = Vec::new();
    let mut iterations = 0;

    let assign = |centroids: &[Vec<S>], assignments: &mut [usize]| -> S {
        let mut inertia = S::zero();
        for i in 0..n {
            let mut best = S::infinity();
            let mut label = 0usize;
            for (c, centroid) in centroids.iter().enumerate() {
                let dist = sq_dist(point(i), centroid);
                if dist < best {
                    best = dist;
                    label = c;
                }
            }
            assignments[i] = label;
            inertia = inertia + best;
        }
        inertia
    };

    loop {
        let inertia = assign(&centroids, &mut assignments);
        trace.push(inertia);
        if iterations >= max_iters {
            break;
        }
        iterations += 1;

        // Means of non-empty clusters.
        let mut sums = vec![vec![S::zero(); d]; k];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            counts[assignments[i]] += 1;
            for (s, &v) in sums[assignments[i]].iter_mut().zip(point(i)) {
                *s = *s + v;
            }
        }
        let mut new_centroids: Vec<Vec<S>> = Vec::with_capacity(k);
        for c in 0..k {
            if counts[c] == 0 {
                new_centroids.push(centroids[c].clone()); // re-seeded below
            } else {
                let inv = S::lit(1.0 / counts[c] as f64);
                new_centroids.push(sums[c].iter().map(|&s| s * inv).collect());
            }
        }
        // Re-seed each empty cluster to the point farthest from its
        // assigned centroid, claiming each point at most once.
        let mut claimed = vec![false; n];
        for c in 0..k {
            if counts[c] > 0 {
                continue;
            }
            let mut far_i = 0usize;
            let mut far_d = S::neg_infinity();
            for i in 0..n {
                if claimed[i] {
                    continue;
                }
                let dist = sq_dist(point(i), &new_centroids[assignments[i]]);
                if dist > far_d {
                    far_d = dist;
                    far_i = i;
                }
            }
            claimed[far_i] = true;
            new_centroids[c] = point(far_i).to_vec();
        }

        let shift = centroids
            .iter()
            .zip(&new_centroids)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(S::zero(), S::max);
        centroids = new_centroids;
        if shift.to_f64_lossy() < tol {
            // Final assignment so labels and centroids agree.
            let inertia = assign(&centroids, &mut assignments);
            trace.push(inertia);
            break;
        }
    }

    let inertia = *trace.last().unwrap();
    let flat: Vec<S> = centroids.into_iter().flatten().collect();
    PointClustering {
        assignments,
        centroids: TensorOf::new(vec![k, d], flat).expect("k x d centroids"),
        inertia,
        iterations,
        inertia_trace: trace,
    }
}

/// k-means over `[n, d]` points: k-means++ plus Lloyd, best of `restarts`.
pub fn kmeans_points<S: Scalar>(
    points: &TensorOf<S>,
    k: usize,
    seed: u64,
    cfg: &KMeansConfig,
) -> Result<PointClustering<S>> {
    let n = match points.shape() {
        [n, _] => *n,
        s => return Err(Error::shape(format!("kmeans wants [n, d] points, got {s:?}"))),
    };
    if k == 0 || k > n {
        return Err(Error::shape(format!("k = {k} must lie in [1, {n}]")));
    }
    let mut best: Option<PointClustering<S>> = None;
    for restart in 0..cfg.restarts.max(1) {
        let mut rng = substream(seed, 0x63e5, restart as u64);
        let init = kmeans_plus_plus(points, k, &mut rng);
        let run = lloyd(points, init, cfg.max_iters, cfg.tol);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// k-means over an `[h, w, d]` feature map; callers normalize beforehand.
pub fn kmeans<S: Scalar>(
    features: &TensorOf<S>,
    k: usize,
    seed: u64,
    cfg: &KMeansConfig,
) -> Result<KMeansResult<S>> {
    let (h, w, d) = match features.shape() {
        [h, w, d] => (*h, *w, *d),
        s => return Err(Error::shape(format!("kmeans wants h x w x d features, got {s:?}"))),
    };
    let points = TensorOf::new(vec![h * w, d], features.data().to_vec())?;
    let run = kmeans_points(&points, k, seed, cfg)?;
    let labels = LabelMap::new(h, w, run.assignments.iter().map(|&a| a as u8).collect());
    Ok(KMeansResult {
        labels,
        centroids: run.centroids,
        inertia: run.inertia,
        iterations: run.iterations,
        inertia_trace: run.inertia_trace,
    })
}

/// Which map the discovery network clusters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DiscoverySource {
    Hidden,
    Projection,
}

/// Forward the discovery parameters over an image (no gradients) and
/// cluster the normalized feature map into `k` segments.
pub fn discover<S: Scalar>(
    image: &TensorOf<S>,
    params: &ModelParamsOf<S>,
    k: usize,
    source: DiscoverySource,
    seed: u64,
    cfg: &KMeansConfig,
) -> Result<LabelMap> {
    let features = discovery_features(image, params, source)?;
    Ok(kmeans(&features, k, seed, cfg)?.labels)
}

/// Normalized feature map the discovery clustering runs on.
pub fn discovery_features<S: Scalar>(
    image: &TensorOf<S>,
    params: &ModelParamsOf<S>,
    source: DiscoverySource,
) -> Result<TensorOf<S>> {
    let hidden = params.features(image)?;
    let map = match source {
        DiscoverySource::Hidden => hidden,
        DiscoverySource::Projection => params.project(&hidden)?,
    };
    l2_normalize_forward(&map, 2)
}

/// Cluster the same features once per K and emit every segment as a binary
/// mask upsampled to `out_size`. `ks = [1, 2, 4, ..., 128]` yields 255
/// proposals.
pub fn proposal_pyramid<S: Scalar>(
    features: &TensorOf<S>,
    ks: &[usize],
    out_size: (usize, usize),
    seed: u64,
    cfg: &KMeansConfig,
) -> Result<Vec<Mask>> {
    if ks.is_empty() {
        return Err(Error::shape("proposal pyramid needs at least one K"));
    }
    let mut proposals = Vec::with_capacity(ks.iter().sum());
    for (i, &k) in ks.iter().enumerate() {
        let run = kmeans(features, k, seed.wrapping_add(i as u64), cfg)?;
        for mask in run.labels.masks(k) {
            proposals.push(mask.resize_nearest(out_size.0, out_size.1));
        }
    }
    Ok(proposals)
}

/// Standard pyramid K list `[1, 2, 4, ..., 128]`.
pub fn default_pyramid_ks() -> Vec<usize> {
    (0..8).map(|i| 1usize << i).collect()
}

/// Cached segmentations, valid while the discovery parameters are frozen.
/// A stamp mismatch purges every entry.
#[derive(Debug, Default)]
pub struct SegmentationCache {
    entries: HashMap<String, LabelMap>,
    epoch_stamp: u64,
    computes: u64,
}

impl SegmentationCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of times the compute closure actually ran.
    pub fn computes(&self) -> u64 {
        self.computes
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get_or_compute(
        &mut self,
        id: &str,
        stamp: u64,
        compute: impl FnOnce() -> Result<LabelMap>,
    ) -> Result<LabelMap> {
        if stamp != self.epoch_stamp {
            self.entries.clear();
            self.epoch_stamp = stamp;
        }
        if let Some(hit) = self.entries.get(id) {
            return Ok(hit.clone());
        }
        self.computes += 1;
        let fresh = compute()?;
        self.entries.insert(id.to_string(), fresh.clone());
        Ok(fresh)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelShape;

    fn points(rows: &[&[f64]]) -> TensorOf<f64> {
        let d = rows[0].len();
        let data: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        TensorOf::new(vec![rows.len(), d], data).unwrap()
    }

    #[test]
    fn k1_gives_single_segment_with_mean_centroid() {
        let features = TensorOf::new(
            vec![2, 2, 2],
            vec![1.0, 0.0, 3.0, 0.0, 5.0, 2.0, 7.0, 2.0],
        )
        .unwrap();
        let run = kmeans(&features, 1, 0, &KMeansConfig::default()).unwrap();
        assert!(run.labels.labels().iter().all(|&l| l == 0));
        assert_eq!(run.centroids.data(), &[4.0, 1.0]);
    }

    #[test]
    fn two_identical_groups_split_exactly() {
        let pts = points(&[&[1.0, 1.0], &[1.0, 1.0], &[5.0, 5.0], &[5.0, 5.0]]);
        let run = kmeans_points(&pts, 2, 3, &KMeansConfig::default()).unwrap();
        assert_eq!(run.inertia, 0.0);
        assert_eq!(run.assignments[0], run.assignments[1]);
        assert_eq!(run.assignments[2], run.assignments[3]);
        assert_ne!(run.assignments[0], run.assignments[2]);
    }

    /// Exhaustive minimum inertia over all 2-partitions.
    fn brute_force_k2(pts: &TensorOf<f64>) -> f64 {
        let n = pts.shape()[0];
        let d = pts.shape()[1];
        let point = |i: usize| &pts.data()[i * d..(i + 1) * d];
        let mut best = f64::INFINITY;
        for split in 0..(1u32 << n) {
            let groups: [Vec<usize>; 2] = {
                let mut g = [Vec::new(), Vec::new()];
                for i in 0..n {
                    g[((split >> i) & 1) as usize].push(i);
                }
                g
            };
            if groups.iter().any(|g| g.is_empty()) {
                continue;
            }
            let mut inertia = 0.0;
            for group in &groups {
                let mut mean = vec![0.0; d];
                for &i in group {
                    for (m, &v) in mean.iter_mut().zip(point(i)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= group.len() as f64);
                for &i in group {
                    inertia += sq_dist(point(i), &mean);
                }
            }
            best = best.min(inertia);
        }
        best
    }

    #[test]
    fn eight_points_match_exhaustive_two_partition_minimum() {
        let mut rng = substream(17, 0, 0);
        let rows: Vec<Vec<f64>> = (0..8)
            .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let pts = points(&rows.iter().map(|r| r.as_slice()).collect::<Vec<_>>());
        let cfg = KMeansConfig { restarts: 5, ..KMeansConfig::default() };
        let run = kmeans_points(&pts, 2, 1, &cfg).unwrap();
        let best = brute_force_k2(&pts);
        assert!(
            (run.inertia - best).abs() < 1e-9,
            "kmeans {} vs brute force {best}",
            run.inertia
        );
    }

    #[test]
    fn rejects_k_larger_than_point_count() {
        let features = TensorOf::<f64>::zeros(vec![2, 2, 3]);
        assert!(kmeans(&features, 5, 0, &KMeansConfig::default()).is_err());
        assert!(kmeans(&features, 0, 0, &KMeansConfig::default()).is_err());
    }

    #[test]
    fn inertia_trace_is_non_increasing_and_deterministic() {
        let mut rng = substream(23, 1, 0);
        let data: Vec<f64> = (0..40 * 3).map(|_| rng.random_range(-1.0..1.0)).collect();
        let features = TensorOf::new(vec![5, 8, 3], data).unwrap();
        let a = kmeans(&features, 4, 9, &KMeansConfig::default()).unwrap();
        let b = kmeans(&features, 4, 9, &KMeansConfig::default()).unwrap();
        assert_eq!(a.labels, b.labels);
        for pair in a.inertia_trace.windows(2) {
            assert!(pair[1] <= pair[0] + 1e-12, "trace increased: {pair:?}");
        }
        // Fixed point: final assignment has no strictly closer centroid.
        let d = 3;
        for (i, &label) in a.labels.labels().iter().enumerate() {
            let p = &features.data()[i * d..(i + 1) * d];
            let own = sq_dist(p, &a.centroids.data()[label as usize * d..(label as usize + 1) * d]);
            for c in 0..4 {
                let other = sq_dist(p, &a.centroids.data()[c * d..(c + 1) * d]);
                assert!(own <= other + 1e-12);
            }
        }
    }

    #[test]
    fn permuted_initialization_permutes_labels_but_not_partition() {
        let mut rng = substream(29, 2, 0);
        let rows: Vec<Vec<f64>> = (0..12)
            .map(|_| vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)])
            .collect();
        let pts = points(&rows.iter().map(|r| r.as_slice()).collect::<Vec<_>>());
        let init: Vec<Vec<f64>> = vec![rows[0].clone(), rows[5].clone(), rows[9].clone()];
        let mut permuted = init.clone();
        permuted.rotate_left(1);

        let a = lloyd(&pts, init, 100, 1e-9);
        let b = lloyd(&pts, permuted, 100, 1e-9);
        assert!((a.inertia - b.inertia).abs() < 1e-12);
        // Same partition: co-membership must agree pairwise.
        for i in 0..12 {
            for j in 0..12 {
                assert_eq!(
                    a.assignments[i] == a.assignments[j],
                    b.assignments[i] == b.assignments[j],
                    "pair ({i}, {j})"
                );
            }
        }
    }

    #[test]
    fn empty_cluster_reseeding_keeps_k_clusters() {
        // Three identical points cannot fill two clusters from a bad init,
        // unless re-seeding moves the spare centroid onto a far point.
        let pts = points(&[&[0.0, 0.0], &[0.0, 0.0], &[10.0, 0.0]]);
        let init = vec![vec![0.0, 0.0], vec![-100.0, 0.0]];
        let run = lloyd(&pts, init, 100, 1e-9);
        let mut seen: Vec<usize> = run.assignments.clone();
        seen.sort_unstable();
        seen.dedup();
        assert_eq!(seen.len(), 2, "both clusters populated: {:?}", run.assignments);
        assert_eq!(run.inertia, 0.0);
    }

    #[test]
    fn discover_separates_flat_color_halves_with_random_backbone() {
        let (h, w) = (64, 64);
        let data: Vec<f64> = (0..h * w * 3)
            .map(|i| {
                let x = (i / 3) % w;
                let c = i % 3;
                match (x < w / 2, c) {
                    (true, 0) => 0.9,
                    (true, _) => 0.1,
                    (false, 2) => 0.9,
                    (false, _) => 0.1,
                }
            })
            .collect();
        let image = TensorOf::new(vec![h, w, 3], data).unwrap();
        let params = ModelParamsOf::<f64>::init(&ModelShape::default(), 5).unwrap();
        let labels = discover(
            &image,
            &params,
            2,
            DiscoverySource::Projection,
            7,
            &KMeansConfig::default(),
        )
        .unwrap();
        let (gh, gw) = (labels.height(), labels.width());
        for segment in 0..2u8 {
            let mut left = 0usize;
            let mut total = 0usize;
            for y in 0..gh {
                for x in 0..gw {
                    if labels.get(y, x) == segment {
                        total += 1;
                        left += (x < gw / 2) as usize;
                    }
                }
            }
            assert!(total > 0);
            let purity = (left.max(total - left)) as f64 / total as f64;
            assert!(purity >= 0.9, "segment {segment} purity {purity}");
        }
    }

    #[test]
    fn k_equal_to_cell_count_isolates_every_cell() {
        let mut rng = substream(31, 3, 0);
        let data: Vec<f64> = (0..16 * 2).map(|_| rng.random_range(-1.0..1.0)).collect();
        let features = TensorOf::new(vec![4, 4, 2], data).unwrap();
        let run = kmeans(&features, 16, 0, &KMeansConfig::default()).unwrap();
        let mut labels: Vec<u8> = run.labels.labels().to_vec();
        labels.sort_unstable();
        labels.dedup();
        assert_eq!(labels.len(), 16);
    }

    #[test]
    fn pyramid_emits_expected_mask_counts_and_partitions() {
        let mut rng = substream(37, 4, 0);
        let data: Vec<f64> = (0..256 * 4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let features = TensorOf::new(vec![16, 16, 4], data).unwrap();

        let single = proposal_pyramid(&features, &[1], (32, 32), 0, &KMeansConfig::default())
            .unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].area(), 32 * 32);

        let ks = default_pyramid_ks();
        let pyramid =
            proposal_pyramid(&features, &ks, (32, 32), 0, &KMeansConfig::default()).unwrap();
        assert_eq!(pyramid.len(), 255);

        // Masks of each K partition the image exactly.
        let mut offset = 0;
        for &k in &ks {
            let mut covered = vec![0usize; 32 * 32];
            for mask in &pyramid[offset..offset + k] {
                for (i, &m) in mask.data().iter().enumerate() {
                    covered[i] += m as usize;
                }
            }
            assert!(covered.iter().all(|&c| c == 1), "K = {k} not a partition");
            offset += k;
        }
    }

    #[test]
    fn cache_reuses_entries_until_stamp_changes() {
        let map = LabelMap::from_fn(2, 2, |y, x| (y + x) as u8);
        let mut cache = SegmentationCache::new();
        let compute = || Ok(map.clone());

        let a = cache.get_or_compute("img0", 0, compute).unwrap();
        assert_eq!(cache.computes(), 1);
        let b = cache.get_or_compute("img0", 0, compute).unwrap();
        assert_eq!(cache.computes(), 1, "second call must hit the cache");
        assert_eq!(a, b);

        cache.get_or_compute("img1", 0, compute).unwrap();
        assert_eq!(cache.computes(), 2);

        // Stamp bump purges and recomputes.
        cache.get_or_compute("img0", 1, compute).unwrap();
        assert_eq!(cache.computes(), 3);
        assert_eq!(cache.len(), 1);
    }
}
