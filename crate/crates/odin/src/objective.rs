//! Mask-pooled features and the cross-view contrastive detection loss.
//!
//! Per view and segment, hidden vectors are averaged over the segment mask,
//! projected, and (online path only) passed through the predictor. The online
//! path records on the autodiff graph; the target path is plain tensors, so
//! target parameters can never receive gradient. Per segment the loss pulls
//! the online prediction in one view toward the target projection of the
//! same segment in the other view, against every other segment's target
//! projection as a negative, symmetrized over both directions.

use crate::autodiff::{l2_normalize_forward, mask_pool_forward, GraphOf, NodeId};
use crate::error::{Error, Result};
use crate::model::{ModelNodes, ModelParamsOf};
use crate::scalar::Scalar;
use crate::tensor::{Mask, TensorOf};

/// Which target projections serve as negatives for an anchor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum NegativePolicy {
    /// Other segments of the same image and all segments of other images.
    WithinAndAcrossImages,
    WithinImage,
    AcrossImages,
}

/// One segment's per-view features. `None` entries mean the warped mask was
/// empty in this view and the segment is discarded.
#[derive(Debug)]
pub struct SegmentFeatures<S> {
    pub online_hidden: Option<NodeId>,
    pub online_projection: Option<NodeId>,
    pub online_prediction: Option<NodeId>,
    /// Target projection (gradient-isolated), plus its unit-norm copy.
    pub target_projection: Option<TensorOf<S>>,
    target_unit: Option<TensorOf<S>>,
}

impl<S> SegmentFeatures<S> {
    pub fn valid(&self) -> bool {
        self.online_prediction.is_some()
    }

    fn empty() -> Self {
        SegmentFeatures {
            online_hidden: None,
            online_projection: None,
            online_prediction: None,
            target_projection: None,
            target_unit: None,
        }
    }
}

/// All segment features of one view of one image.
#[derive(Debug)]
pub struct PooledView<S> {
    pub segments: Vec<SegmentFeatures<S>>,
}

/// Both views of one image, segment-aligned.
#[derive(Debug)]
pub struct ImagePair<S> {
    pub view1: PooledView<S>,
    pub view2: PooledView<S>,
}

impl<S> ImagePair<S> {
    /// Segments usable as positives: non-empty in both views.
    pub fn valid_segments(&self) -> Vec<usize> {
        (0..self.view1.segments.len().min(self.view2.segments.len()))
            .filter(|&k| self.view1.segments[k].valid() && self.view2.segments[k].valid())
            .collect()
    }
}

/// Cosine similarity scaled by `1/alpha`, on plain vectors.
pub fn similarity<S: Scalar>(prediction: &TensorOf<S>, target: &TensorOf<S>, alpha: S) -> S {
    let p = l2_normalize_forward(prediction, 0).expect("vector input");
    let t = l2_normalize_forward(target, 0).expect("vector input");
    let dot: S = p.data().iter().zip(t.data()).map(|(&a, &b)| a * b).sum();
    dot / alpha
}

/// Run one augmented view through the online (graph) and target (plain)
/// paths, pooling both over the same masks.
pub fn forward_view<S: Scalar>(
    g: &mut GraphOf<S>,
    image: &TensorOf<S>,
    online_nodes: &ModelNodes,
    target: &ModelParamsOf<S>,
    masks: &[Mask],
) -> Result<PooledView<S>> {
    let online_map = online_nodes.features(g, image)?;
    let target_map = target.features(image)?;
    let grid = (g.value(online_map).shape()[0], g.value(online_map).shape()[1]);
    let mut segments = Vec::with_capacity(masks.len());
    for mask in masks {
        if (mask.height(), mask.width()) != grid {
            return Err(Error::shape(format!(
                "mask grid {}x{} vs feature grid {}x{}",
                mask.height(),
                mask.width(),
                grid.0,
                grid.1
            )));
        }
        if mask.is_empty_mask() {
            segments.push(SegmentFeatures::empty());
            continue;
        }
        let pooled = g.mask_pool(online_map, mask)?;
        let projection = online_nodes.project(g, pooled)?;
        let prediction = online_nodes.predict(g, projection)?;

        let pooled_t = mask_pool_forward(&target_map, mask)?;
        let projection_t = target.project(&pooled_t)?;
        let target_unit = l2_normalize_forward(&projection_t, 0)?;
        segments.push(SegmentFeatures {
            online_hidden: Some(pooled),
            online_projection: Some(projection),
            online_prediction: Some(prediction),
            target_projection: Some(projection_t),
            target_unit: Some(target_unit),
        });
    }
    Ok(PooledView { segments })
}

/// Anchor/candidate handle: image index, segment index.
type SegRef = (usize, usize);

fn negatives_for(
    batch_valid: &[Vec<usize>],
    anchor: SegRef,
    policy: NegativePolicy,
) -> Vec<SegRef> {
    let mut out = Vec::new();
    for (img, valid) in batch_valid.iter().enumerate() {
        let within = img == anchor.0;
        let include = match policy {
            NegativePolicy::WithinAndAcrossImages => true,
            NegativePolicy::WithinImage => within,
            NegativePolicy::AcrossImages => !within,
        };
        if !include {
            continue;
        }
        for &k in valid {
            if (img, k) != anchor {
                out.push((img, k));
            }
        }
    }
    out
}

/// The full batch loss: both directions, per-image division by the number of
/// valid segments, averaged over the images that contributed.
pub fn contrastive_loss<S: Scalar>(
    g: &mut GraphOf<S>,
    batch: &[ImagePair<S>],
    alpha: S,
    policy: NegativePolicy,
) -> Result<NodeId> {
    if alpha <= S::zero() {
        return Err(Error::numeric("similarity temperature must be positive"));
    }
    let batch_valid: Vec<Vec<usize>> = batch.iter().map(|p| p.valid_segments()).collect();

    let mut image_losses = Vec::new();
    for (img, pair) in batch.iter().enumerate() {
        let valid = &batch_valid[img];
        if valid.is_empty() {
            continue;
        }
        let mut terms = Vec::with_capacity(valid.len() * 2);
        for &k in valid {
            for (from, to) in [(&pair.view1, &pair.view2), (&pair.view2, &pair.view1)] {
                let anchor_pred = from.segments[k].online_prediction.expect("valid segment");
                let anchor_unit = g.l2_normalize(anchor_pred, 0)?;
                let view_of = |r: SegRef| if std::ptr::eq(from, &pair.view1) { &batch[r.0].view2 } else { &batch[r.0].view1 };
                let _ = to; // target side is resolved through view_of
                let mut sims = Vec::new();
                let positive = view_of((img, k)).segments[k]
                    .target_unit
                    .as_ref()
                    .expect("valid segment");
                let s_pos = {
                    let dot = g.dot_const(anchor_unit, positive)?;
                    g.scale(dot, S::one() / alpha)
                };
                sims.push(s_pos);
                for neg in negatives_for(&batch_valid, (img, k), policy) {
                    let t = view_of(neg).segments[neg.1].target_unit.as_ref().expect("valid");
                    let dot = g.dot_const(anchor_unit, t)?;
                    sims.push(g.scale(dot, S::one() / alpha));
                }
                let lse = g.logsumexp(&sims)?;
                terms.push(g.sub(lse, s_pos)?);
            }
        }
        let total = g.add_n(&terms)?;
        image_losses.push(g.scale(total, S::lit(1.0 / valid.len() as f64)));
    }
    if image_losses.is_empty() {
        return Err(Error::numeric(
            "degenerate batch: no segment is valid in both views of any image",
        ));
    }
    g.mean(&image_losses)
}
