//! Layer vocabulary (convolution, pooling, ReLU, LRN, fully-connected,
//! softmax, concatenations) and the scaled convolutional backbone.

use crate::autodiff::{
    conv_out_dim, Graph, LrnParams, NodeId, ParamGroup, ParamId, ParamInfo, ParamStore, Scalar,
    Tensor,
};
use crate::error::{Error, Result};
use crate::rng::Rng;

/// Weight initialization for a layer's kernels. Biases always start at zero.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Gaussian with a fixed standard deviation.
    Gaussian(f64),
    /// Gaussian with standard deviation `sqrt(2 / fan_in)`.
    He,
}

impl Init {
    fn std(self, fan_in: usize) -> f64 {
        match self {
            Init::Gaussian(s) => s,
            Init::He => (2.0 / fan_in as f64).sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
    },
    Pool {
        size: usize,
        stride: usize,
    },
    Relu,
    Lrn(LrnParams),
    /// Flattens its input, then applies `x W^T + b`.
    Fc {
        out: usize,
    },
    Softmax,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub group: ParamGroup,
}

impl LayerSpec {
    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |detail: String| Error::InvalidShape {
            op: "layer",
            detail,
        };
        match &self.kind {
            LayerKind::Conv {
                out_channels,
                kernel,
                stride,
                pad,
            } => {
                if input.len() != 3 {
                    return Err(bad(format!("conv expects [C, H, W], got {input:?}")));
                }
                let h = conv_out_dim(input[1], *kernel, *stride, *pad);
                let w = conv_out_dim(input[2], *kernel, *stride, *pad);
                match (h, w) {
                    (Some(h), Some(w)) if *out_channels > 0 => Ok(vec![*out_channels, h, w]),
                    _ => Err(bad(format!(
                        "conv k={kernel} s={stride} p={pad} on {input:?} gives non-positive output"
                    ))),
                }
            }
            LayerKind::Pool { size, stride } => {
                if input.len() != 3 {
                    return Err(bad(format!("pool expects [C, H, W], got {input:?}")));
                }
                match (
                    conv_out_dim(input[1], *size, *stride, 0),
                    conv_out_dim(input[2], *size, *stride, 0),
                ) {
                    (Some(h), Some(w)) => Ok(vec![input[0], h, w]),
                    _ => Err(bad(format!("pool {size}/{stride} does not fit {input:?}"))),
                }
            }
            LayerKind::Relu | LayerKind::Lrn(_) | LayerKind::Softmax => Ok(input.to_vec()),
            LayerKind::Fc { out } => {
                if *out == 0 {
                    return Err(bad("fc output width 0".into()));
                }
                Ok(vec![*out])
            }
        }
    }
}

/// A layer with the parameters it owns in some [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
struct BoundLayer {
    spec: LayerSpec,
    weights: Option<(ParamId, ParamId)>,
}

/// A chain of layers whose parameters live in a shared store.
#[derive(Clone, Debug, PartialEq)]
pub struct Sequential {
    input_shape: Vec<usize>,
    layers: Vec<BoundLayer>,
}

impl Sequential {
    /// Allocate and initialize the parameters of `specs` in `store`.
    pub fn build<T: Scalar>(
        name: &str,
        input_shape: &[usize],
        specs: Vec<LayerSpec>,
        init: Init,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut shape = input_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.into_iter().enumerate() {
            let out = spec.output_shape(&shape)?;
            let weights = match &spec.kind {
                LayerKind::Conv {
                    out_channels,
                    kernel,
                    ..
                } => {
                    let fan_in = shape[0] * kernel * kernel;
                    let w = Tensor::randn(
                        vec![*out_channels, shape[0], *kernel, *kernel],
                        init.std(fan_in),
                        rng,
                    );
                    Some(push_pair(store, name, i, spec.group, w, *out_channels))
                }
                LayerKind::Fc { out } => {
                    let fan_in: usize = shape.iter().product();
                    let w = Tensor::randn(vec![*out, fan_in], init.std(fan_in), rng);
                    Some(push_pair(store, name, i, spec.group, w, *out))
                }
                _ => None,
            };
            layers.push(BoundLayer { spec, weights });
            shape = out;
        }
        Ok(Sequential {
            input_shape: input_shape.to_vec(),
            layers,
        })
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    pub fn output_shape(&self) -> Vec<usize> {
        let mut shape = self.input_shape.clone();
        for l in &self.layers {
            shape = l.spec.output_shape(&shape).expect("validated at build");
        }
        shape
    }

    pub fn specs(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().map(|l| &l.spec)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.layers
            .iter()
            .filter_map(|l| l.weights)
            .flat_map(|(w, b)| [w, b])
    }

    /// Apply to a batch `x[N, ...input_shape]`. Parameters are bound as
    /// trainable leaves only when `trainable` is set.
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        x: NodeId,
        trainable: bool,
    ) -> Result<NodeId> {
        let sx = g.shape(x);
        if sx.len() != self.input_shape.len() + 1 || sx[1..] != self.input_shape[..] {
            return Err(Error::ShapeMismatch {
                op: "sequential input",
                left: self.input_shape.clone(),
                right: sx.to_vec(),
            });
        }
        let mut h = x;
        for layer in &self.layers {
            let bind = |g: &mut Graph<T>, id| store.bind(g, id, trainable);
            h = match &layer.spec.kind {
                LayerKind::Conv { stride, pad, .. } => {
                    let (w, b) = layer.weights.expect("conv owns weights");
                    let (w, b) = (bind(g, w), bind(g, b));
                    g.conv2d(h, w, b, *stride, *pad)?
                }
                LayerKind::Pool { size, stride } => g.max_pool(h, *size, *stride)?,
                LayerKind::Relu => g.relu(h)?,
                LayerKind::Lrn(p) => g.lrn(h, *p)?,
                LayerKind::Fc { .. } => {
                    let n = g.shape(h)[0];
                    let flat: usize = g.shape(h)[1..].iter().product();
                    if g.shape(h).len() != 2 {
                        h = g.reshape(h, &[n, flat])?;
                    }
                    let (w, b) = layer.weights.expect("fc owns weights");
                    let (w, b) = (bind(g, w), bind(g, b));
                    g.linear(h, w, b)?
                }
                LayerKind::Softmax => softmax2(g, h)?,
            };
        }
        Ok(h)
    }
}

fn push_pair<T: Scalar>(
    store: &mut ParamStore<T>,
    name: &str,
    index: usize,
    group: ParamGroup,
    w: Tensor<T>,
    width: usize,
) -> (ParamId, ParamId) {
    let info = |suffix: &str| ParamInfo {
        name: format!("{name}.{index}.{suffix}"),
        group,
        fresh: true,
    };
    let w = store.push(info("weight"), w);
    let b = store.push(info("bias"), Tensor::zeros(vec![width]));
    (w, b)
}

/// Two-way softmax over the last axis (liked, disliked).
pub fn softmax2<T: Scalar>(g: &mut Graph<T>, logits: NodeId) -> Result<NodeId> {
    let s = g.shape(logits);
    if s.last() != Some(&2) {
        return Err(Error::InvalidShape {
            op: "softmax2",
            detail: format!("expected two logits, got shape {s:?}"),
        });
    }
    g.softmax(logits)
}

/// Stack per-category images along the channel axis, in the given order.
/// Accepts single images `[C, H, W]` or batches `[N, C, H, W]`.
pub fn concat_channels<T: Scalar>(g: &mut Graph<T>, images: &[NodeId]) -> Result<NodeId> {
    let first = images.first().map(|&i| g.shape(i).to_vec()).unwrap_or_default();
    let axis = match first.len() {
        3 => 0,
        4 => 1,
        _ => {
            return Err(Error::InvalidShape {
                op: "concat_channels",
                detail: format!("expected [C, H, W] or [N, C, H, W], got {first:?}"),
            })
        }
    };
    g.concat(images, axis)
}

/// Order-preserving concatenation of equal-width feature vectors, either
/// single `[D]` or batched `[N, D]`.
pub fn concat_features<T: Scalar>(g: &mut Graph<T>, features: &[NodeId]) -> Result<NodeId> {
    let first = features.first().map(|&i| g.shape(i).to_vec()).unwrap_or_default();
    if first.is_empty() || first.len() > 2 {
        return Err(Error::InvalidShape {
            op: "concat_features",
            detail: format!("expected [D] or [N, D], got {first:?}"),
        });
    }
    for &f in &features[1..] {
        if g.shape(f) != first.as_slice() {
            return Err(Error::ShapeMismatch {
                op: "concat_features",
                left: first,
                right: g.shape(f).to_vec(),
            });
        }
    }
    g.concat(features, first.len() - 1)
}

/// Shape of the convolutional backbone: `stage_widths.len()` stages of
/// `[conv3x3 -> ReLU -> LRN -> maxpool2x2]`, then one fc layer to
/// `feature_dim` followed by ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub image_side: usize,
    pub in_channels: usize,
    pub feature_dim: usize,
    pub stage_widths: Vec<usize>,
    pub lrn: LrnParams,
    pub init: Init,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            image_side: 32,
            in_channels: 3,
            feature_dim: 64,
            stage_widths: vec![16, 32, 64],
            lrn: LrnParams::default(),
            init: Init::He,
        }
    }
}

impl BackboneConfig {
    /// Input 224, output 2048: the published layer table's interface.
    pub fn paper_shape() -> Self {
        BackboneConfig {
            image_side: 224,
            feature_dim: 2048,
            ..Self::default()
        }
    }

    pub fn layer_specs(&self) -> Vec<LayerSpec> {
        let group = ParamGroup::Feature;
        let mut specs = Vec::new();
        for &width in &self.stage_widths {
            specs.push(LayerSpec {
                kind: LayerKind::Conv {
                    out_channels: width,
                    kernel: 3,
                    stride: 1,
                    pad: 1,
                },
                group,
            });
            specs.push(LayerSpec {
                kind: LayerKind::Relu,
                group,
            });
            specs.push(LayerSpec {
                kind: LayerKind::Lrn(self.lrn),
                group,
            });
            specs.push(LayerSpec {
                kind: LayerKind::Pool { size: 2, stride: 2 },
                group,
            });
        }
        specs.push(LayerSpec {
            kind: LayerKind::Fc {
                out: self.feature_dim,
            },
            group,
        });
        specs.push(LayerSpec {
            kind: LayerKind::Relu,
            group,
        });
        specs
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.feature_dim == 0 || self.stage_widths.contains(&0) {
            return Err(Error::Config(format!("zero width in backbone config {self:?}")));
        }
        if self.image_side >> self.stage_widths.len() == 0 {
            return Err(Error::Config(format!(
                "image side {} too small for {} pooling stages",
                self.image_side,
                self.stage_widths.len()
            )));
        }
        Ok(())
    }

    pub fn build<T: Scalar>(
        &self,
        name: &str,
        store: &mut ParamStore<T>,
        rng: &mut Rng,
    ) -> Result<Sequential> {
        self.validate()?;
        let net = Sequential::build(
            name,
            &[self.in_channels, self.image_side, self.image_side],
            self.layer_specs(),
            self.init,
            store,
            rng,
        )?;
        debug_assert_eq!(net.output_shape(), vec![self.feature_dim]);
        Ok(net)
    }
}

/// Fully-connected matching network: hidden fc+ReLU layers, a final fc to two
/// logits, and a two-way softmax.
pub fn matching_specs(hidden: &[usize]) -> Vec<LayerSpec> {
    let group = ParamGroup::Matching;
    let mut specs = Vec::new();
    for &width in hidden {
        specs.push(LayerSpec {
            kind: LayerKind::Fc { out: width },
            group,
        });
        specs.push(LayerSpec {
            kind: LayerKind::Relu,
            group,
        });
    }
    specs.push(LayerSpec {
        kind: LayerKind::Fc { out: 2 },
        group,
    });
    specs.push(LayerSpec {
        kind: LayerKind::Softmax,
        group,
    });
    specs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{gradient_check, GradCheck};
    use rand::{Rng as _, SeedableRng};

    fn rng(seed: u64) -> Rng {
        Rng::seed_from_u64(seed)
    }

    fn param_store(tensors: Vec<Tensor<f64>>) -> ParamStore<f64> {
        let mut store = ParamStore::new();
        for (i, t) in tensors.into_iter().enumerate() {
            store.push(
                ParamInfo {
                    name: format!("t{i}"),
                    group: ParamGroup::Feature,
                    fresh: true,
                },
                t,
            );
        }
        store
    }

    /// Scalar probe `sum(y * r)` with a fixed random `r` so every output
    /// coordinate carries a distinct weight.
    fn probe(g: &mut Graph<f64>, y: NodeId, seed: u64) -> Result<NodeId> {
        let r = Tensor::randn(g.shape(y).to_vec(), 1.0, &mut rng(seed));
        let r = g.input(r);
        let prod = g.mul(y, r)?;
        g.sum(prod)
    }

    fn check(store: &mut ParamStore<f64>, f: impl FnMut(&mut Graph<f64>, &ParamStore<f64>) -> Result<NodeId>) -> f64 {
        gradient_check(
            store,
            f,
            GradCheck {
                samples_per_tensor: 20,
                ..GradCheck::default()
            },
        )
        .unwrap()
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64(vec![1, 1, 3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]).unwrap());
        let w = g.input(Tensor::from_f64(vec![1, 1, 1, 1], &[1.0]).unwrap());
        let b = g.input(Tensor::zeros(vec![1]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn sum_kernel_over_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let w = g.input(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let b = g.input(Tensor::zeros(vec![1]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1, 1]);
        assert_eq!(g.value(y).item(), 9.0);
    }

    #[test]
    fn conv_rejects_non_positive_output() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::full(vec![1, 1, 2, 2], 1.0));
        let w = g.input(Tensor::full(vec![1, 1, 3, 3], 1.0));
        let b = g.input(Tensor::zeros(vec![1]));
        let err = g.conv2d(x, w, b, 1, 0).unwrap_err();
        assert!(err.to_string().contains("output dims (0, 0)"), "{err}");
    }

    #[test]
    fn lrn_identity_when_alpha_zero() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::randn(vec![2, 4, 3, 3], 1.0, &mut rng(1)));
        let y = g
            .lrn(
                x,
                LrnParams {
                    size: 5,
                    alpha: 0.0,
                    beta: 0.75,
                    k: 1.0,
                },
            )
            .unwrap();
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn lrn_single_channel_hand_value() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64(vec![1, 1, 1, 1], &[1.0]).unwrap());
        let y = g
            .lrn(
                x,
                LrnParams {
                    size: 1,
                    alpha: 1.0,
                    beta: 1.0,
                    k: 0.0,
                },
            )
            .unwrap();
        assert!((g.value(y).item() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn lrn_matches_direct_window_sum() {
        let p = LrnParams {
            size: 3,
            alpha: 0.5,
            beta: 0.6,
            k: 2.0,
        };
        let mut g = Graph::<f64>::new();
        let t = Tensor::randn(vec![1, 4, 1, 1], 1.0, &mut rng(2));
        let xs = t.to_f64_vec();
        let x = g.input(t);
        let y = g.lrn(x, p).unwrap();
        for c in 0..4 {
            let lo = (c as usize).saturating_sub(1);
            let hi = (c + 1).min(3);
            let s: f64 = xs[lo..=hi].iter().map(|v| v * v).sum();
            let expect = xs[c] / (p.k + p.alpha / 3.0 * s).powf(p.beta);
            assert!((g.value(y).data()[c] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax2_values() {
        let mut g = Graph::<f64>::new();
        let l = g.input(Tensor::from_f64(vec![3, 2], &[0.0, 0.0, 3f64.ln(), 0.0, 1000.0, 0.0]).unwrap());
        let p = softmax2(&mut g, l).unwrap();
        let v = g.value(p).data();
        assert_eq!(&v[..2], &[0.5, 0.5]);
        assert!((v[2] - 0.75).abs() < 1e-12 && (v[3] - 0.25).abs() < 1e-12);
        assert!((v[4] - 1.0).abs() < 1e-12 && v[5] < 1e-300);
    }

    #[test]
    fn softmax2_rejects_three_logits() {
        let mut g = Graph::<f64>::new();
        let l = g.input(Tensor::zeros(vec![3]));
        assert!(softmax2(&mut g, l).is_err());
    }

    #[test]
    fn softmax2_normalized_for_large_logits() {
        let mut r = rng(3);
        for _ in 0..200 {
            let a: f64 = r.gen_range(-1e4..1e4);
            let b: f64 = r.gen_range(-1e4..1e4);
            let mut g = Graph::<f32>::new();
            let l = g.input(Tensor::from_f64(vec![2], &[a, b]).unwrap());
            let p = softmax2(&mut g, l).unwrap();
            let v = g.value(p).data();
            assert!(((v[0] + v[1]) as f64 - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn channel_concat_orders_blocks() {
        let mut g = Graph::<f64>::new();
        let ids: Vec<NodeId> = (0..3)
            .map(|i| g.input(Tensor::full(vec![3, 2, 2], i as f64)))
            .collect();
        let y = concat_channels(&mut g, &ids).unwrap();
        assert_eq!(g.shape(y), &[9, 2, 2]);
        let v = g.value(y).data();
        for blk in 0..3 {
            assert!(v[blk * 12..(blk + 1) * 12].iter().all(|&x| x == blk as f64));
        }
        let swapped = concat_channels(&mut g, &[ids[1], ids[0], ids[2]]).unwrap();
        assert!(g.value(swapped).data()[..12].iter().all(|&x| x == 1.0));
    }

    #[test]
    fn channel_concat_rejects_spatial_mismatch() {
        let mut g = Graph::<f64>::new();
        let a = g.input(Tensor::zeros(vec![3, 2, 2]));
        let b = g.input(Tensor::zeros(vec![3, 3, 2]));
        assert!(concat_channels(&mut g, &[a, b]).is_err());
    }

    #[test]
    fn feature_concat() {
        let mut g = Graph::<f64>::new();
        let parts: Vec<NodeId> = [[1., 2.], [3., 4.], [5., 6.]]
            .iter()
            .map(|p| g.input(Tensor::from_f64(vec![2], p).unwrap()))
            .collect();
        let y = concat_features(&mut g, &parts).unwrap();
        assert_eq!(g.value(y).data(), &[1., 2., 3., 4., 5., 6.]);
        let short = g.input(Tensor::from_f64(vec![1], &[3.]).unwrap());
        assert!(concat_features(&mut g, &[parts[0], short]).is_err());
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_f64(vec![2], &[-1.0, 2.0]).unwrap());
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn backbone_emits_feature_dim() {
        let cfg = BackboneConfig::default();
        let mut store = ParamStore::<f32>::new();
        let net = cfg.build("bb", &mut store, &mut rng(0)).unwrap();
        let mut g = Graph::new();
        let x = g.input(Tensor::randn(vec![2, 3, 32, 32], 1.0, &mut rng(1)));
        let y = net.forward(&mut g, &store, x, false).unwrap();
        assert_eq!(g.shape(y), &[2, 64]);
    }

    #[test]
    fn backbone_rejects_tiny_images() {
        let cfg = BackboneConfig {
            image_side: 4,
            ..BackboneConfig::default()
        };
        assert!(cfg.build::<f32>("bb", &mut ParamStore::new(), &mut rng(0)).is_err());
    }

    // Finite-difference checks: each layer over ten random shapes.

    #[test]
    fn conv_gradients() {
        let mut r = rng(10);
        for trial in 0..10 {
            let n = r.gen_range(1..3);
            let c = r.gen_range(1..4);
            let o = r.gen_range(1..4);
            let k = r.gen_range(1..4);
            let h = r.gen_range(k..k + 4);
            let stride = r.gen_range(1..3);
            let pad = r.gen_range(0..2);
            let mut store = param_store(vec![
                Tensor::randn(vec![n, c, h, h], 1.0, &mut r),
                Tensor::randn(vec![o, c, k, k], 1.0, &mut r),
                Tensor::randn(vec![o], 1.0, &mut r),
            ]);
            let err = check(&mut store, |g, s| {
                let x = s.bind(g, ParamId(0), true);
                let w = s.bind(g, ParamId(1), true);
                let b = s.bind(g, ParamId(2), true);
                let y = g.conv2d(x, w, b, stride, pad)?;
                probe(g, y, trial)
            });
            assert!(err < 1e-4, "trial {trial}: {err}");
        }
    }

    #[test]
    fn pool_gradients_route_to_argmax() {
        let mut r = rng(11);
        for trial in 0..10 {
            let c = r.gen_range(1..4);
            let h = r.gen_range(2..7);
            let mut store = param_store(vec![Tensor::randn(vec![1, c, h, h], 1.0, &mut r)]);
            let err = check(&mut store, |g, s| {
                let x = s.bind(g, ParamId(0), true);
                let y = g.max_pool(x, 2, 2)?;
                probe(g, y, trial)
            });
            assert!(err < 1e-4, "trial {trial}: {err}");
        }
    }

    #[test]
    fn lrn_gradients() {
        let mut r = rng(12);
        for trial in 0..10 {
            let c = r.gen_range(1..8);
            let params = LrnParams {
                size: [1, 3, 5][trial % 3],
                alpha: r.gen_range(0.01..1.0),
                beta: [0.75, 0.5, 1.3][trial % 3],
                k: r.gen_range(0.5..2.0),
            };
            let mut store = param_store(vec![Tensor::randn(vec![2, c, 2, 1], 1.0, &mut r)]);
            let err = check(&mut store, |g, s| {
                let x = s.bind(g, ParamId(0), true);
                let y = g.lrn(x, params)?;
                probe(g, y, trial as u64)
            });
            assert!(err < 1e-4, "trial {trial}: {err}");
        }
    }

    #[test]
    fn linear_relu_softmax_gradients() {
        let mut r = rng(13);
        for trial in 0..10 {
            let n = r.gen_range(1..4);
            let din = r.gen_range(1..6);
            let mut store = param_store(vec![
                Tensor::randn(vec![n, din], 1.0, &mut r),
                Tensor::randn(vec![2, din], 1.0, &mut r),
                Tensor::randn(vec![2], 1.0, &mut r),
            ]);
            let err = check(&mut store, |g, s| {
                let x = s.bind(g, ParamId(0), true);
                let w = s.bind(g, ParamId(1), true);
                let b = s.bind(g, ParamId(2), true);
                let y = g.linear(x, w, b)?;
                let y = g.relu(y)?;
                let y = softmax2(g, y)?;
                probe(g, y, trial)
            });
            assert!(err < 1e-4, "trial {trial}: {err}");
        }
    }

    #[test]
    fn concat_gradients_split_by_block() {
        let mut r = rng(14);
        for trial in 0..10 {
            let n = r.gen_range(1..3);
            let s = r.gen_range(1..4);
            let mut tensors: Vec<Tensor<f64>> = (0..3)
                .map(|_| Tensor::randn(vec![n, 3, s, s], 1.0, &mut r))
                .collect();
            tensors.extend((0..3).map(|_| Tensor::randn(vec![n, 4], 1.0, &mut r)));
            let mut store = param_store(tensors);
            let err = check(&mut store, |g, st| {
                let ids: Vec<NodeId> = (0..6).map(|i| st.bind(g, ParamId(i), true)).collect();
                let img = concat_channels(g, &ids[..3])?;
                let feat = concat_features(g, &ids[3..])?;
                let a = probe(g, img, trial)?;
                let b = probe(g, feat, trial + 100)?;
                g.add(a, b)
            });
            assert!(err < 1e-4, "trial {trial}: {err}");
        }
    }

    #[test]
    fn gather_column_softplus_gradients() {
        let mut r = rng(15);
        for trial in 0..10 {
            let rows = r.gen_range(1..5);
            let idx: Vec<usize> = (0..6).map(|_| r.gen_range(0..rows)).collect();
            let mut store = param_store(vec![Tensor::randn(vec![rows, 3], 1.0, &mut r)]);
            let err = check(&mut store, |g, s| {
                let x = s.bind(g, ParamId(0), true);
                let y = g.gather_rows(x, &idx)?;
                let c = g.column(y, trial as usize % 3)?;
                let sp = g.softplus(c)?;
                let m = g.mean(sp)?;
                let t = probe(g, y, trial)?;
                g.add(m, t)
            });
            assert!(err < 1e-4, "trial {trial}: {err}");
        }
    }

    #[test]
    fn backbone_gradients() {
        let mut r = rng(16);
        for trial in 0..10 {
            let cfg = BackboneConfig {
                image_side: [4, 6, 8][trial % 3],
                in_channels: r.gen_range(1..4),
                feature_dim: r.gen_range(2..6),
                stage_widths: vec![r.gen_range(2..5); 1 + trial % 2],
                lrn: LrnParams {
                    alpha: 0.3,
                    ..LrnParams::default()
                },
                init: Init::He,
            };
            let mut store = ParamStore::<f64>::new();
            let net = cfg.build("bb", &mut store, &mut r).unwrap();
            let x = Tensor::randn(vec![2, cfg.in_channels, cfg.image_side, cfg.image_side], 1.0, &mut r);
            let err = check(&mut store, |g, s| {
                let xi = g.input(x.clone());
                let y = net.forward(g, s, xi, true)?;
                probe(g, y, trial as u64)
            });
            assert!(err < 1e-4, "trial {trial}: {err}");
        }
    }
}
