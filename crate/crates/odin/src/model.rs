//! Convolutional feature extractor and MLP heads.
//!
//! One parameter set bundles the backbone (a stack of same-padded
//! convolutions), the projector MLP applied to hidden vectors, and the
//! predictor MLP applied to projections. The trainer keeps three such sets
//! (online, target, discovery) that stay shape-identical for EMA mixing.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    self, bias_channels_forward, conv2d_forward, linear_forward, relu_forward, GraphOf, NodeId,
    Padding,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::TensorOf;

/// Architecture description, fixed for all three parameter sets of a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelShape {
    /// Input channels (3 for RGB).
    pub in_channels: usize,
    /// Output channels of each conv layer.
    pub conv_channels: Vec<usize>,
    /// Stride of each conv layer; the product is the output stride.
    pub conv_strides: Vec<usize>,
    /// Square odd kernel extent shared by all conv layers.
    pub conv_kernel: usize,
    /// Projector hidden width.
    pub proj_hidden: usize,
    /// Projection dimensionality (also the predictor output).
    pub proj_dim: usize,
    /// Predictor hidden width.
    pub pred_hidden: usize,
}

impl Default for ModelShape {
    fn default() -> Self {
        ModelShape {
            in_channels: 3,
            conv_channels: vec![16, 32, 32],
            conv_strides: vec![2, 2, 1],
            conv_kernel: 3,
            proj_hidden: 64,
            proj_dim: 16,
            pred_hidden: 64,
        }
    }
}

impl ModelShape {
    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() || self.conv_channels.len() != self.conv_strides.len() {
            return Err(Error::config(format!(
                "conv channels ({:?}) and strides ({:?}) must be non-empty and equal length",
                self.conv_channels, self.conv_strides
            )));
        }
        if self.conv_kernel % 2 == 0 {
            return Err(Error::config("conv kernel extent must be odd"));
        }
        if self.conv_strides.iter().any(|&s| s == 0) {
            return Err(Error::config("conv strides must be >= 1"));
        }
        if self.proj_hidden == 0 || self.proj_dim == 0 || self.pred_hidden == 0 {
            return Err(Error::config("head widths must be >= 1"));
        }
        Ok(())
    }

    /// Spatial subsampling factor of the backbone.
    pub fn output_stride(&self) -> usize {
        self.conv_strides.iter().product()
    }

    /// Channel count of the hidden feature map.
    pub fn hidden_dim(&self) -> usize {
        *self.conv_channels.last().unwrap()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvLayerOf<S> {
    pub kernel: TensorOf<S>, // kh x kw x cin x cout
    pub bias: TensorOf<S>,   // cout
    pub stride: usize,
}

/// Two-layer MLP with rectifier hidden activation.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpOf<S> {
    pub w1: TensorOf<S>,
    pub b1: TensorOf<S>,
    pub w2: TensorOf<S>,
    pub b2: TensorOf<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParamsOf<S> {
    pub shape: ModelShape,
    pub backbone: Vec<ConvLayerOf<S>>,
    pub projector: MlpOf<S>,
    pub predictor: MlpOf<S>,
}

fn uniform<S: Scalar>(rng: &mut ChaCha8Rng, shape: Vec<usize>, limit: f64) -> TensorOf<S> {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| S::lit(rng.random_range(-limit..limit))).collect();
    TensorOf::new(shape, data).expect("shape/data agree")
}

fn init_mlp<S: Scalar>(rng: &mut ChaCha8Rng, din: usize, hidden: usize, dout: usize) -> MlpOf<S> {
    let l1 = (6.0 / (din + hidden) as f64).sqrt();
    let l2 = (6.0 / (hidden + dout) as f64).sqrt();
    MlpOf {
        w1: uniform(rng, vec![din, hidden], l1),
        b1: TensorOf::zeros(vec![hidden]),
        w2: uniform(rng, vec![hidden, dout], l2),
        b2: TensorOf::zeros(vec![dout]),
    }
}

impl<S: Scalar> ModelParamsOf<S> {
    /// Deterministic initialization from a seed.
    pub fn init(shape: &ModelShape, seed: u64) -> Result<Self> {
        shape.validate()?;
        let mut rng = crate::util::substream(seed, 0x0d1, 0);
        let k = shape.conv_kernel;
        let mut backbone = Vec::new();
        let mut cin = shape.in_channels;
        for (&cout, &stride) in shape.conv_channels.iter().zip(&shape.conv_strides) {
            let fan = (k * k * (cin + cout)) as f64;
            backbone.push(ConvLayerOf {
                kernel: uniform(&mut rng, vec![k, k, cin, cout], (6.0 / fan).sqrt()),
                bias: TensorOf::zeros(vec![cout]),
                stride,
            });
            cin = cout;
        }
        let projector = init_mlp(&mut rng, shape.hidden_dim(), shape.proj_hidden, shape.proj_dim);
        let predictor = init_mlp(&mut rng, shape.proj_dim, shape.pred_hidden, shape.proj_dim);
        Ok(ModelParamsOf { shape: shape.clone(), backbone, projector, predictor })
    }

    /// All parameter tensors in a fixed order, with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &TensorOf<S>)> {
        let mut out = Vec::new();
        for (i, layer) in self.backbone.iter().enumerate() {
            out.push((format!("backbone.{i}.kernel"), &layer.kernel));
            out.push((format!("backbone.{i}.bias"), &layer.bias));
        }
        for (name, mlp) in [("projector", &self.projector), ("predictor", &self.predictor)] {
            out.push((format!("{name}.w1"), &mlp.w1));
            out.push((format!("{name}.b1"), &mlp.b1));
            out.push((format!("{name}.w2"), &mlp.w2));
            out.push((format!("{name}.b2"), &mlp.b2));
        }
        out
    }

    /// Mutable view of the tensors, in [`Self::named_tensors`] order.
    pub fn tensors_mut(&mut self) -> Vec<&mut TensorOf<S>> {
        let mut out: Vec<&mut TensorOf<S>> = Vec::new();
        for layer in self.backbone.iter_mut() {
            out.push(&mut layer.kernel);
            out.push(&mut layer.bias);
        }
        for mlp in [&mut self.projector, &mut self.predictor] {
            out.push(&mut mlp.w1);
            out.push(&mut mlp.b1);
            out.push(&mut mlp.w2);
            out.push(&mut mlp.b2);
        }
        out
    }

    pub fn tensor_count(&self) -> usize {
        self.backbone.len() * 2 + 8
    }

    /// Exact elementwise equality (EMA copy semantics are bitwise).
    pub fn bit_equal(&self, other: &Self) -> bool {
        self.named_tensors()
            .iter()
            .zip(other.named_tensors().iter())
            .all(|((_, a), (_, b))| a.data() == b.data() && a.shape() == b.shape())
    }

    /// `self <- (1 - lambda) * self + lambda * other` on every tensor.
    /// lambda = 1 copies bitwise; lambda = 0 leaves self untouched bitwise.
    pub fn ema_from(&mut self, other: &Self, lambda: S) {
        if lambda == S::zero() {
            return;
        }
        let sources: Vec<TensorOf<S>> =
            other.named_tensors().iter().map(|(_, t)| (*t).clone()).collect();
        for (dst, src) in self.tensors_mut().into_iter().zip(sources) {
            if lambda == S::one() {
                *dst = src;
            } else {
                let keep = S::one() - lambda;
                for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
                    *d = keep * *d + lambda * s;
                }
            }
        }
    }

    // ── Gradient-free forward paths ─────────────────────────────────

    /// Hidden feature map `[h/stride, w/stride, hidden_dim]` of an image.
    pub fn features(&self, image: &TensorOf<S>) -> Result<TensorOf<S>> {
        let mut x = image.clone();
        for layer in &self.backbone {
            let y = conv2d_forward(&x, &layer.kernel, layer.stride, Padding::Same)?;
            let y = bias_channels_forward(&y, &layer.bias)?;
            x = relu_forward(&y);
        }
        Ok(x)
    }

    fn mlp_apply(mlp: &MlpOf<S>, x: &TensorOf<S>) -> Result<TensorOf<S>> {
        let h = relu_forward(&linear_forward(x, &mlp.w1, &mlp.b1)?);
        linear_forward(&h, &mlp.w2, &mlp.b2)
    }

    /// Projector applied to each vector along the last axis.
    pub fn project(&self, x: &TensorOf<S>) -> Result<TensorOf<S>> {
        Self::mlp_apply(&self.projector, x)
    }

    pub fn predict(&self, x: &TensorOf<S>) -> Result<TensorOf<S>> {
        Self::mlp_apply(&self.predictor, x)
    }
}

// ── Graph forward paths ─────────────────────────────────────────────

/// Parameter leaves of one model registered on a graph, used to read
/// gradients back out after `backward`.
pub struct ModelNodes {
    pub backbone: Vec<(NodeId, NodeId)>, // (kernel, bias)
    pub projector: MlpNodes,
    pub predictor: MlpNodes,
    strides: Vec<usize>,
}

pub struct MlpNodes {
    pub w1: NodeId,
    pub b1: NodeId,
    pub w2: NodeId,
    pub b2: NodeId,
}

impl ModelNodes {
    /// Register every parameter tensor as a leaf.
    pub fn register<S: Scalar>(g: &mut GraphOf<S>, params: &ModelParamsOf<S>) -> ModelNodes {
        let backbone = params
            .backbone
            .iter()
            .map(|l| (g.leaf(l.kernel.clone()), g.leaf(l.bias.clone())))
            .collect();
        let mlp = |m: &MlpOf<S>, g: &mut GraphOf<S>| MlpNodes {
            w1: g.leaf(m.w1.clone()),
            b1: g.leaf(m.b1.clone()),
            w2: g.leaf(m.w2.clone()),
            b2: g.leaf(m.b2.clone()),
        };
        ModelNodes {
            backbone,
            projector: mlp(&params.projector, g),
            predictor: mlp(&params.predictor, g),
            strides: params.backbone.iter().map(|l| l.stride).collect(),
        }
    }

    /// Differentiable feature-map forward.
    pub fn features<S: Scalar>(&self, g: &mut GraphOf<S>, image: &TensorOf<S>) -> Result<NodeId> {
        let mut x = g.leaf(image.clone());
        for ((kernel, bias), stride) in self.backbone.iter().zip(&self.strides) {
            let y = g.conv2d(x, *kernel, *stride, Padding::Same)?;
            let y = g.bias_channels(y, *bias)?;
            x = g.relu(y);
        }
        Ok(x)
    }

    fn mlp<S: Scalar>(g: &mut GraphOf<S>, nodes: &MlpNodes, x: NodeId) -> Result<NodeId> {
        let h = g.linear(x, nodes.w1, nodes.b1)?;
        let h = g.relu(h);
        g.linear(h, nodes.w2, nodes.b2)
    }

    pub fn project<S: Scalar>(&self, g: &mut GraphOf<S>, x: NodeId) -> Result<NodeId> {
        Self::mlp(g, &self.projector, x)
    }

    pub fn predict<S: Scalar>(&self, g: &mut GraphOf<S>, x: NodeId) -> Result<NodeId> {
        Self::mlp(g, &self.predictor, x)
    }

    /// Leaf ids in [`ModelParamsOf::named_tensors`] order.
    pub fn leaf_ids(&self) -> Vec<NodeId> {
        let mut out = Vec::new();
        for (k, b) in &self.backbone {
            out.push(*k);
            out.push(*b);
        }
        for m in [&self.projector, &self.predictor] {
            out.extend([m.w1, m.b1, m.w2, m.b2]);
        }
        out
    }
}

/// Collect gradients for a registered model, zeros where unreachable.
pub fn model_gradients<S: Scalar>(
    grads: &autodiff::Gradients<S>,
    nodes: &ModelNodes,
    params: &ModelParamsOf<S>,
) -> Vec<TensorOf<S>> {
    nodes
        .leaf_ids()
        .iter()
        .zip(params.named_tensors())
        .map(|(id, (_, t))| grads.get_or_zeros(*id, t.shape()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_is_deterministic_and_shape_consistent() {
        let shape = ModelShape::default();
        let a = ModelParamsOf::<f64>::init(&shape, 3).unwrap();
        let b = ModelParamsOf::<f64>::init(&shape, 3).unwrap();
        let c = ModelParamsOf::<f64>::init(&shape, 4).unwrap();
        assert!(a.bit_equal(&b));
        assert!(!a.bit_equal(&c));
        assert_eq!(a.named_tensors().len(), a.tensor_count());
        assert_eq!(shape.output_stride(), 4);
    }

    #[test]
    fn features_match_between_graph_and_plain_paths() {
        let shape = ModelShape {
            conv_channels: vec![4, 6],
            conv_strides: vec![2, 1],
            ..ModelShape::default()
        };
        let params = ModelParamsOf::<f64>::init(&shape, 11).unwrap();
        let image = {
            use rand::Rng;
            let mut rng = crate::util::substream(1, 2, 3);
            let data = (0..12 * 10 * 3).map(|_| rng.random_range(0.0..1.0)).collect();
            TensorOf::new(vec![12, 10, 3], data).unwrap()
        };
        let plain = params.features(&image).unwrap();
        let mut g = GraphOf::new();
        let nodes = ModelNodes::register(&mut g, &params);
        let fid = nodes.features(&mut g, &image).unwrap();
        assert_eq!(g.value(fid), &plain);
        assert_eq!(plain.shape(), &[6, 5, 6]);
    }

    #[test]
    fn ema_copy_and_identity_are_bitwise() {
        let shape = ModelShape::default();
        let a = ModelParamsOf::<f64>::init(&shape, 0).unwrap();
        let b = ModelParamsOf::<f64>::init(&shape, 1).unwrap();

        let mut t = a.clone();
        t.ema_from(&b, 0.0);
        assert!(t.bit_equal(&a));
        t.ema_from(&b, 1.0);
        assert!(t.bit_equal(&b));
    }

    #[test]
    fn ema_half_is_convex_combination() {
        let shape = ModelShape::default();
        let a = ModelParamsOf::<f64>::init(&shape, 0).unwrap();
        let b = ModelParamsOf::<f64>::init(&shape, 1).unwrap();
        let mut t = a.clone();
        t.ema_from(&b, 0.5);
        for (((_, tv), (_, av)), (_, bv)) in t
            .named_tensors()
            .iter()
            .zip(a.named_tensors().iter())
            .zip(b.named_tensors().iter())
        {
            for ((&x, &lo), &hi) in tv.data().iter().zip(av.data()).zip(bv.data()) {
                let (lo, hi) = if lo <= hi { (lo, hi) } else { (hi, lo) };
                assert!(x >= lo - 1e-15 && x <= hi + 1e-15);
            }
        }
    }
}
