//! Evaluation protocols: unsupervised discovery metrics (IoU, best overlap,
//! ABO, object recovery), ground-truth mask filtering, and video label
//! propagation scored with region and boundary measures.
//!
//! Video scoring runs on the feature grid: predictions live there, ground
//! truth is downsampled by cell-center lookup, and the boundary measure uses
//! a one-cell matching tolerance.

use serde::Serialize;

use crate::data::{LoadedScene, LoadedVideo};
use crate::discovery::{discovery_features, proposal_pyramid, DiscoverySource, KMeansConfig};
use crate::error::{Error, Result};
use crate::model::ModelParamsOf;
use crate::scalar::Scalar;
use crate::tensor::{LabelMap, Mask, TensorOf};
use crate::util::{parallel_map, substream, worker_threads};
use rand::Rng;

/// Intersection over union of two same-shaped binary masks.
/// Two empty masks score 0 (with a warning) rather than 0/0.
pub fn iou(a: &Mask, b: &Mask) -> Result<f64> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::shape(format!(
            "iou over {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.data().iter().zip(b.data()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        log::warn!("iou of two empty masks defined as 0");
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Ground-truth mask filtering: drop small segments, keep the largest few.
/// `min_area_px` is stated at 224x224 scale and rescaled by image area.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MaskFilter {
    pub max_masks: usize,
    pub min_area_px: f64,
}

impl Default for MaskFilter {
    fn default() -> Self {
        MaskFilter { max_masks: 16, min_area_px: 100.0 }
    }
}

impl MaskFilter {
    /// Area threshold in pixels for an `h x w` image.
    pub fn threshold_for(&self, h: usize, w: usize) -> f64 {
        self.min_area_px * (h * w) as f64 / (224.0 * 224.0)
    }

    /// Indices of the ground-truth masks that survive filtering.
    pub fn keep(&self, masks: &[Mask]) -> Vec<usize> {
        if masks.is_empty() {
            return Vec::new();
        }
        let threshold = self.threshold_for(masks[0].height(), masks[0].width());
        let mut kept: Vec<(usize, usize)> = masks
            .iter()
            .enumerate()
            .filter(|(_, m)| (m.area() as f64) >= threshold)
            .map(|(i, m)| (i, m.area()))
            .collect();
        // Largest first, stable on index.
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
        kept.truncate(self.max_masks);
        let mut idx: Vec<usize> = kept.into_iter().map(|(i, _)| i).collect();
        idx.sort_unstable();
        idx
    }
}

/// Best overlap of one ground-truth mask over all proposals.
pub fn best_overlap(gt: &Mask, proposals: &[Mask]) -> Result<f64> {
    let mut best: f64 = 0.0;
    for p in proposals {
        best = best.max(iou(gt, p)?);
    }
    Ok(best)
}

#[derive(Clone, Debug, Serialize)]
pub struct ImageDiscoveryScores {
    pub id: String,
    /// Average best overlap over instance masks.
    pub abo_i: f64,
    /// Average best overlap after merging instances of the same class.
    pub abo_c: f64,
    /// Fraction of instances with best overlap strictly above one half.
    pub or: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct DiscoveryReport {
    pub mean_abo_i: f64,
    pub mean_abo_c: f64,
    pub mean_or: f64,
    pub images: Vec<ImageDiscoveryScores>,
    pub ks: Vec<usize>,
    pub filter: Option<MaskFilter>,
    /// Images skipped because filtering removed every ground-truth mask.
    pub skipped: usize,
}

impl DiscoveryReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,abo_i,abo_c,or\n");
        for img in &self.images {
            out.push_str(&format!("{},{},{},{}\n", img.id, img.abo_i, img.abo_c, img.or));
        }
        out.push_str(&format!("mean,{},{},{}\n", self.mean_abo_i, self.mean_abo_c, self.mean_or));
        out
    }
}

/// Merge instance masks of the same class into one mask per class.
fn merge_by_class(masks: &[Mask], classes: &[u8]) -> Vec<Mask> {
    let mut order: Vec<u8> = Vec::new();
    for &c in classes {
        if !order.contains(&c) {
            order.push(c);
        }
    }
    order
        .into_iter()
        .map(|class| {
            let (h, w) = (masks[0].height(), masks[0].width());
            let mut data = vec![false; h * w];
            for (m, &c) in masks.iter().zip(classes) {
                if c == class {
                    for (d, &v) in data.iter_mut().zip(m.data()) {
                        *d |= v;
                    }
                }
            }
            Mask::new(h, w, data)
        })
        .collect()
}

/// Score one image's proposals against its ground truth. Returns `None` when
/// filtering leaves no ground-truth mask (the image is skipped).
pub fn discovery_metrics(
    ground_truth: &[Mask],
    classes: &[u8],
    proposals: &[Mask],
    filter: Option<MaskFilter>,
) -> Result<Option<(f64, f64, f64)>> {
    if ground_truth.len() != classes.len() {
        return Err(Error::shape("one class id per ground-truth mask required"));
    }
    let kept: Vec<usize> = match filter {
        Some(f) => f.keep(ground_truth),
        None => (0..ground_truth.len()).collect(),
    };
    if kept.is_empty() {
        return Ok(None);
    }
    let instances: Vec<&Mask> = kept.iter().map(|&i| &ground_truth[i]).collect();
    let inst_classes: Vec<u8> = kept.iter().map(|&i| classes[i]).collect();

    let mut bo_sum = 0.0;
    let mut recovered = 0usize;
    for gt in &instances {
        let bo = best_overlap(gt, proposals)?;
        bo_sum += bo;
        // Strictly greater than one half counts as recovered.
        recovered += (bo > 0.5) as usize;
    }
    let abo_i = bo_sum / instances.len() as f64;
    let or = recovered as f64 / instances.len() as f64;

    let merged = merge_by_class(
        &instances.iter().map(|m| (*m).clone()).collect::<Vec<_>>(),
        &inst_classes,
    );
    let mut class_sum = 0.0;
    for gt in &merged {
        class_sum += best_overlap(gt, proposals)?;
    }
    let abo_c = class_sum / merged.len() as f64;
    Ok(Some((abo_i, abo_c, or)))
}

/// Where evaluation features come from: a trained (or random) model, or the
/// raw-pixel-color baseline resized to the model's feature grid.
pub enum FeatureBackend<'a, S> {
    Model { params: &'a ModelParamsOf<S>, source: DiscoverySource },
    OracleColor { grid: usize },
}

impl<S: Scalar> FeatureBackend<'_, S> {
    pub fn features(&self, image: &TensorOf<S>) -> Result<TensorOf<S>> {
        match self {
            FeatureBackend::Model { params, source } => {
                discovery_features(image, params, *source)
            }
            FeatureBackend::OracleColor { grid } => {
                let geom = crate::augment::ViewGeometry {
                    crop: crate::augment::CropRect::full(image.shape()[0], image.shape()[1]),
                    hflip: false,
                    out_size: (*grid, *grid),
                };
                crate::augment::crop_resize(image, &geom)
            }
        }
    }
}

/// Full discovery evaluation: proposal pyramid per image, scored against the
/// dataset ground truth.
pub fn evaluate_discovery_dataset<S: Scalar>(
    scenes: &[LoadedScene<S>],
    backend: &FeatureBackend<'_, S>,
    ks: &[usize],
    kmeans: &KMeansConfig,
    filter: Option<MaskFilter>,
    seed: u64,
) -> Result<DiscoveryReport> {
    let threads = worker_threads();
    let per_image = parallel_map(scenes.len(), threads, |i| -> Result<_> {
        let scene = &scenes[i];
        let (h, w) = (scene.image.shape()[0], scene.image.shape()[1]);
        let features = backend.features(&scene.image)?;
        let pseed: u64 = substream(seed, 0xe7a1, i as u64).random();
        let proposals = proposal_pyramid(&features, ks, (h, w), pseed, kmeans)?;
        let gt = scene.instance_masks();
        discovery_metrics(&gt, &scene.classes, &proposals, filter)
            .map(|scores| (scene.id.clone(), scores))
    });

    let mut images = Vec::new();
    let mut skipped = 0usize;
    for entry in per_image {
        let (id, scores) = entry?;
        match scores {
            Some((abo_i, abo_c, or)) => images.push(ImageDiscoveryScores { id, abo_i, abo_c, or }),
            None => skipped += 1,
        }
    }
    if images.is_empty() {
        return Err(Error::data("no image survived ground-truth filtering"));
    }
    let n = images.len() as f64;
    Ok(DiscoveryReport {
        mean_abo_i: images.iter().map(|s| s.abo_i).sum::<f64>() / n,
        mean_abo_c: images.iter().map(|s| s.abo_c).sum::<f64>() / n,
        mean_or: images.iter().map(|s| s.or).sum::<f64>() / n,
        images,
        ks: ks.to_vec(),
        filter,
        skipped,
    })
}

// ── Video label propagation ─────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PropagationConfig {
    /// Chebyshev window radius, in grid cells, searched in the previous frame.
    pub radius: usize,
    /// Number of most-similar candidates that vote.
    pub top_n: usize,
}

impl Default for PropagationConfig {
    fn default() -> Self {
        PropagationConfig { radius: 4, top_n: 5 }
    }
}

/// Propagate frame-0 labels through per-frame feature maps by
/// similarity-weighted voting over the top candidates in the previous frame.
///
/// An exact feature match (cosine within 1e-9 of 1) outvotes everything:
/// identical content keeps its label. Otherwise the `top_n` most similar
/// in-window candidates vote with weight max(cos, 0); ties break to the
/// lowest label.
pub fn propagate_labels<S: Scalar>(
    frame_features: &[TensorOf<S>],
    first_frame_labels: &LabelMap,
    cfg: &PropagationConfig,
) -> Result<Vec<LabelMap>> {
    if frame_features.is_empty() {
        return Err(Error::data("no frames to propagate over"));
    }
    let (h, w, d) = match frame_features[0].shape() {
        [h, w, d] => (*h, *w, *d),
        s => return Err(Error::shape(format!("features must be h x w x d, got {s:?}"))),
    };
    if (first_frame_labels.height(), first_frame_labels.width()) != (h, w) {
        return Err(Error::shape(format!(
            "labels {}x{} vs feature grid {h}x{w}",
            first_frame_labels.height(),
            first_frame_labels.width()
        )));
    }
    for f in frame_features {
        if f.shape() != frame_features[0].shape() {
            return Err(Error::shape("all frames must share one feature grid"));
        }
    }

    let unit: Vec<TensorOf<S>> = frame_features
        .iter()
        .map(|f| crate::autodiff::l2_normalize_forward(f, 2))
        .collect::<Result<_>>()?;

    let mut out = Vec::with_capacity(frame_features.len());
    out.push(first_frame_labels.clone());
    for t in 1..frame_features.len() {
        let prev_labels = out.last().unwrap().clone();
        let prev = &unit[t - 1];
        let cur = &unit[t];
        let vec_at = |f: &TensorOf<S>, y: usize, x: usize| -> Vec<f64> {
            f.data()[(y * w + x) * d..(y * w + x + 1) * d]
                .iter()
                .map(|v| v.to_f64_lossy())
                .collect()
        };
        let labels = LabelMap::from_fn(h, w, |y, x| {
            let q = vec_at(cur, y, x);
            // Candidates within the window, row-major order.
            let mut cands: Vec<(f64, u8)> = Vec::new();
            let y0 = y.saturating_sub(cfg.radius);
            let y1 = (y + cfg.radius).min(h - 1);
            let x0 = x.saturating_sub(cfg.radius);
            let x1 = (x + cfg.radius).min(w - 1);
            for cy in y0..=y1 {
                for cx in x0..=x1 {
                    let k = vec_at(prev, cy, cx);
                    let sim: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
                    cands.push((sim, prev_labels.get(cy, cx)));
                }
            }
            if cands.is_empty() {
                // Degenerate window: fall back to the global nearest cell.
                let mut best = (f64::NEG_INFINITY, 0u8);
                for cy in 0..h {
                    for cx in 0..w {
                        let k = vec_at(prev, cy, cx);
                        let sim: f64 = q.iter().zip(&k).map(|(a, b)| a * b).sum();
                        if sim > best.0 {
                            best = (sim, prev_labels.get(cy, cx));
                        }
                    }
                }
                return best.1;
            }
            let top = cands.iter().map(|c| c.0).fold(f64::NEG_INFINITY, f64::max);
            let mut votes: Vec<(u8, f64)> = Vec::new();
            let mut cast = |label: u8, weight: f64| {
                match votes.iter_mut().find(|(l, _)| *l == label) {
                    Some((_, acc)) => *acc += weight,
                    None => votes.push((label, weight)),
                }
            };
            if top >= 1.0 - 1e-9 {
                // Exact matches are authoritative.
                for &(sim, label) in cands.iter().filter(|(s, _)| *s >= 1.0 - 1e-9) {
                    let _ = sim;
                    cast(label, 1.0);
                }
            } else {
                cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(std::cmp::Ordering::Equal));
                let mut voted = false;
                for &(sim, label) in cands.iter().take(cfg.top_n) {
                    if sim > 0.0 {
                        cast(label, sim);
                        voted = true;
                    }
                }
                if !voted {
                    // All candidates point away; take the least-bad one.
                    cast(cands[0].1, 1.0);
                }
            }
            votes
                .into_iter()
                .max_by(|a, b| {
                    a.1.partial_cmp(&b.1)
                        .unwrap_or(std::cmp::Ordering::Equal)
                        .then(b.0.cmp(&a.0))
                })
                .map(|(l, _)| l)
                .unwrap_or(0)
        });
        out.push(labels);
    }
    Ok(out)
}

// ── Region and boundary scoring ─────────────────────────────────────

/// Boundary cells of a binary mask: members with a 4-neighbor outside it.
pub fn boundary_cells(mask: &Mask) -> Vec<(usize, usize)> {
    let (h, w) = (mask.height(), mask.width());
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                continue;
            }
            let transition = (y > 0 && !mask.get(y - 1, x))
                || (y + 1 < h && !mask.get(y + 1, x))
                || (x > 0 && !mask.get(y, x - 1))
                || (x + 1 < w && !mask.get(y, x + 1));
            if transition {
                out.push((y, x));
            }
        }
    }
    out
}

/// Boundary F-measure with Chebyshev matching tolerance `tol` cells.
pub fn boundary_f_measure(pred: &Mask, gt: &Mask, tol: usize) -> f64 {
    let bp = boundary_cells(pred);
    let bg = boundary_cells(gt);
    match (bp.is_empty(), bg.is_empty()) {
        (true, true) => return 1.0,
        (true, false) | (false, true) => return 0.0,
        _ => {}
    }
    let matched = |set: &[(usize, usize)], against: &[(usize, usize)]| -> usize {
        set.iter()
            .filter(|(y, x)| {
                against.iter().any(|(gy, gx)| {
                    y.abs_diff(*gy) <= tol && x.abs_diff(*gx) <= tol
                })
            })
            .count()
    };
    let precision = matched(&bp, &bg) as f64 / bp.len() as f64;
    let recall = matched(&bg, &bp) as f64 / bg.len() as f64;
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SequenceScores {
    pub id: String,
    pub j: f64,
    pub f: f64,
    pub jf: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct VideoReport {
    pub mean_j: f64,
    pub mean_f: f64,
    pub mean_jf: f64,
    pub sequences: Vec<SequenceScores>,
}

impl VideoReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,j,f,jf\n");
        for s in &self.sequences {
            out.push_str(&format!("{},{},{},{}\n", s.id, s.j, s.f, s.jf));
        }
        out.push_str(&format!("mean,{},{},{}\n", self.mean_j, self.mean_f, self.mean_jf));
        out
    }
}

/// Region (mean IoU) and boundary scores for one sequence. Frame 0 carries
/// the given labels and is excluded; frames where an object is absent from
/// the ground truth are excluded for that object.
pub fn video_metrics(
    predicted: &[LabelMap],
    ground_truth: &[LabelMap],
    boundary_tol: usize,
) -> Result<(f64, f64)> {
    if predicted.len() != ground_truth.len() || predicted.is_empty() {
        return Err(Error::shape("predicted and ground-truth frame counts differ"));
    }
    for (p, g) in predicted.iter().zip(ground_truth) {
        if (p.height(), p.width()) != (g.height(), g.width()) {
            return Err(Error::shape("frame grids differ"));
        }
    }
    let max_label = ground_truth.iter().map(|g| g.max_label()).max().unwrap_or(0);
    let mut per_object_j = Vec::new();
    let mut per_object_f = Vec::new();
    for object in 1..=max_label {
        let mut j_sum = 0.0;
        let mut f_sum = 0.0;
        let mut frames = 0usize;
        for t in 1..predicted.len() {
            let gt_mask = ground_truth[t].mask_of(object);
            if gt_mask.is_empty_mask() {
                continue;
            }
            let pred_mask = predicted[t].mask_of(object);
            j_sum += iou(&pred_mask, &gt_mask)?;
            f_sum += boundary_f_measure(&pred_mask, &gt_mask, boundary_tol);
            frames += 1;
        }
        if frames > 0 {
            per_object_j.push(j_sum / frames as f64);
            per_object_f.push(f_sum / frames as f64);
        }
    }
    if per_object_j.is_empty() {
        return Err(Error::data("no object present after frame 0"));
    }
    let j = per_object_j.iter().sum::<f64>() / per_object_j.len() as f64;
    let f = per_object_f.iter().sum::<f64>() / per_object_f.len() as f64;
    Ok((j, f))
}

/// Full video evaluation: per-frame features with the given backend,
/// propagation from downsampled frame-0 ground truth, grid-level scoring.
pub fn evaluate_video_dataset<S: Scalar>(
    videos: &[LoadedVideo<S>],
    backend: &FeatureBackend<'_, S>,
    prop: &PropagationConfig,
    boundary_tol: usize,
) -> Result<VideoReport> {
    let threads = worker_threads();
    let per_sequence = parallel_map(videos.len(), threads, |i| -> Result<SequenceScores> {
        let video = &videos[i];
        let features: Vec<TensorOf<S>> = video
            .frames
            .iter()
            .map(|frame| backend.features(frame))
            .collect::<Result<_>>()?;
        let (gh, gw) = (features[0].shape()[0], features[0].shape()[1]);
        let gt_grid: Vec<LabelMap> =
            video.frame_labels.iter().map(|l| l.resize_nearest(gh, gw)).collect();
        let predicted = propagate_labels(&features, &gt_grid[0], prop)?;
        let (j, f) = video_metrics(&predicted, &gt_grid, boundary_tol)?;
        Ok(SequenceScores { id: video.id.clone(), j, f, jf: (j + f) / 2.0 })
    });
    let sequences: Vec<SequenceScores> = per_sequence.into_iter().collect::<Result<_>>()?;
    if sequences.is_empty() {
        return Err(Error::data("no video sequences to evaluate"));
    }
    let n = sequences.len() as f64;
    Ok(VideoReport {
        mean_j: sequences.iter().map(|s| s.j).sum::<f64>() / n,
        mean_f: sequences.iter().map(|s| s.f).sum::<f64>() / n,
        mean_jf: sequences.iter().map(|s| s.jf).sum::<f64>() / n,
        sequences,
    })
}
