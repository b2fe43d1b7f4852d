//! Embedding backbones: three miniature convolutional presets that keep the
//! signature trait of their full-size namesakes (large first kernel and
//! aggressive pooling / stacked 3x3 blocks / identity skip connections) while
//! staying trainable from scratch on a CPU in minutes.
//!
//! Every preset ends in adaptive average pooling, a flatten, and one linear
//! layer, so any square input of at least [`MIN_INPUT`] pixels produces
//! exactly `embedding_dim` outputs.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::rng::{substream, uniform};
use crate::tensor::Tensor;

/// Smallest accepted square input, in pixels.
pub const MIN_INPUT: usize = 32;

/// Input channels (RGB).
pub const IN_CHANNELS: usize = 3;

/// Default embedding width.
pub const EMBEDDING_DIM: usize = 128;

/// One layer of a preset. `SkipAdd` adds `weight` times the recorded output
/// of layer `from` to the current activation (shapes must match).
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool {
        window: usize,
        stride: usize,
    },
    AdaptiveAvgPool {
        out: usize,
    },
    Flatten,
    Linear {
        out_features: usize,
    },
    SkipAdd {
        from: usize,
        weight: f64,
    },
}

/// A named architecture: ordered layers plus the output width.
#[derive(Debug, Clone, PartialEq)]
pub struct ArchPreset {
    pub name: String,
    pub layers: Vec<LayerSpec>,
    pub embedding_dim: usize,
}

impl ArchPreset {
    /// Large first kernel with stride, then aggressive pooling.
    pub fn alex_lite() -> Self {
        use LayerSpec::*;
        ArchPreset {
            name: "alex-lite".into(),
            layers: vec![
                Conv { out_channels: 12, kernel: 7, stride: 2, padding: 3 },
                Relu,
                MaxPool { window: 2, stride: 2 },
                Conv { out_channels: 24, kernel: 5, stride: 1, padding: 2 },
                Relu,
                MaxPool { window: 2, stride: 2 },
                Conv { out_channels: 32, kernel: 3, stride: 1, padding: 1 },
                Relu,
                MaxPool { window: 2, stride: 2 },
                AdaptiveAvgPool { out: 2 },
                Flatten,
                Linear { out_features: EMBEDDING_DIM },
            ],
            embedding_dim: EMBEDDING_DIM,
        }
    }

    /// Stacked 3x3 convolutions between pooling stages.
    pub fn vgg_lite() -> Self {
        use LayerSpec::*;
        ArchPreset {
            name: "vgg-lite".into(),
            layers: vec![
                Conv { out_channels: 12, kernel: 3, stride: 1, padding: 1 },
                Relu,
                Conv { out_channels: 12, kernel: 3, stride: 1, padding: 1 },
                Relu,
                MaxPool { window: 2, stride: 2 },
                Conv { out_channels: 24, kernel: 3, stride: 1, padding: 1 },
                Relu,
                Conv { out_channels: 24, kernel: 3, stride: 1, padding: 1 },
                Relu,
                MaxPool { window: 2, stride: 2 },
                Conv { out_channels: 32, kernel: 3, stride: 1, padding: 1 },
                Relu,
                MaxPool { window: 2, stride: 2 },
                AdaptiveAvgPool { out: 2 },
                Flatten,
                Linear { out_features: EMBEDDING_DIM },
            ],
            embedding_dim: EMBEDDING_DIM,
        }
    }

    /// Two residual blocks with identity shortcuts.
    pub fn res_lite() -> Self {
        use LayerSpec::*;
        ArchPreset {
            name: "res-lite".into(),
            layers: vec![
                Conv { out_channels: 16, kernel: 3, stride: 1, padding: 1 }, // 0
                Relu,                                                        // 1
                MaxPool { window: 2, stride: 2 },                            // 2
                Conv { out_channels: 16, kernel: 3, stride: 1, padding: 1 }, // 3
                Relu,                                                        // 4
                Conv { out_channels: 16, kernel: 3, stride: 1, padding: 1 }, // 5
                SkipAdd { from: 2, weight: 1.0 },                            // 6
                Relu,                                                        // 7
                MaxPool { window: 2, stride: 2 },                            // 8
                Conv { out_channels: 32, kernel: 3, stride: 1, padding: 1 }, // 9
                Relu,                                                        // 10
                Conv { out_channels: 32, kernel: 3, stride: 1, padding: 1 }, // 11
                Relu,                                                        // 12
                Conv { out_channels: 32, kernel: 3, stride: 1, padding: 1 }, // 13
                SkipAdd { from: 10, weight: 1.0 },                           // 14
                Relu,                                                        // 15
                MaxPool { window: 2, stride: 2 },                            // 16
                AdaptiveAvgPool { out: 2 },                                  // 17
                Flatten,                                                     // 18
                Linear { out_features: EMBEDDING_DIM },                      // 19
            ],
            embedding_dim: EMBEDDING_DIM,
        }
    }

    /// Look up a preset by its public name.
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "alex-lite" => Ok(Self::alex_lite()),
            "vgg-lite" => Ok(Self::vgg_lite()),
            "res-lite" => Ok(Self::res_lite()),
            other => Err(Error::Config(format!(
                "unknown preset '{other}' (expected alex-lite, vgg-lite, or res-lite)"
            ))),
        }
    }

    /// Same backbone with the final linear layer resized (classifier head).
    pub fn with_output_dim(mut self, dim: usize) -> Self {
        if let Some(LayerSpec::Linear { out_features }) = self.layers.last_mut() {
            *out_features = dim;
        }
        self.embedding_dim = dim;
        self
    }

    /// Shapes of every parameter tensor, in layer order.
    ///
    /// Also validates the layer list: linear layers must follow an adaptive
    /// pool and flatten (otherwise the input size would leak into the
    /// parameter shapes), and skip sources must match in channel count.
    pub fn param_shapes(&self) -> Result<Vec<(String, Vec<usize>)>> {
        let mut shapes = Vec::new();
        let mut channels = IN_CHANNELS;
        // channel count after each layer, for SkipAdd validation
        let mut channel_trace: Vec<usize> = Vec::with_capacity(self.layers.len());
        let mut flat_dim: Option<usize> = None;
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                LayerSpec::Conv {
                    out_channels,
                    kernel,
                    ..
                } => {
                    shapes.push((
                        format!("layers.{i}.weight"),
                        vec![*out_channels, channels, *kernel, *kernel],
                    ));
                    shapes.push((format!("layers.{i}.bias"), vec![*out_channels]));
                    channels = *out_channels;
                }
                LayerSpec::Linear { out_features } => {
                    let din = flat_dim.ok_or_else(|| {
                        Error::Config(format!(
                            "preset '{}': linear layer {i} must follow adaptive pool + flatten",
                            self.name
                        ))
                    })?;
                    shapes.push((format!("layers.{i}.weight"), vec![*out_features, din]));
                    shapes.push((format!("layers.{i}.bias"), vec![*out_features]));
                    flat_dim = Some(*out_features);
                }
                LayerSpec::AdaptiveAvgPool { out } => {
                    flat_dim = Some(channels * out * out);
                }
                LayerSpec::SkipAdd { from, .. } => {
                    let src = *channel_trace.get(*from).ok_or_else(|| {
                        Error::Config(format!(
                            "preset '{}': skip source {from} precedes no layer",
                            self.name
                        ))
                    })?;
                    if src != channels {
                        return Err(Error::Config(format!(
                            "preset '{}': skip from layer {from} has {src} channels, current {channels}",
                            self.name
                        )));
                    }
                }
                LayerSpec::Relu | LayerSpec::MaxPool { .. } | LayerSpec::Flatten => {}
            }
            channel_trace.push(channels);
        }
        Ok(shapes)
    }

    /// Total parameter count, from shape arithmetic.
    pub fn param_count(&self) -> Result<usize> {
        Ok(self
            .param_shapes()?
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum())
    }
}

/// One named parameter tensor.
#[derive(Debug, Clone)]
pub struct Param {
    pub path: String,
    pub tensor: Tensor,
}

/// A built network: preset plus live parameter tensors.
#[derive(Debug, Clone)]
pub struct EmbeddingNet {
    preset: ArchPreset,
    params: Vec<Param>,
    normalize: bool,
}

/// He-uniform initialization over all conv/linear weights; biases zero.
/// Deterministic for a given seed: `build(p, s)` twice gives bit-identical
/// parameters.
pub fn build(preset: &ArchPreset, rng_seed: u64) -> Result<EmbeddingNet> {
    let shapes = preset.param_shapes()?;
    let mut rng = substream(rng_seed, "init", &[]);
    let mut params = Vec::with_capacity(shapes.len());
    for (path, shape) in shapes {
        let numel: usize = shape.iter().product();
        let tensor = if path.ends_with(".bias") {
            Tensor::zeros(shape)
        } else {
            // fan-in is everything but the leading output dimension
            let fan_in: usize = shape[1..].iter().product();
            let bound = (6.0 / fan_in as f64).sqrt();
            let data: Vec<f64> = (0..numel).map(|_| uniform(&mut rng, -bound, bound)).collect();
            Tensor::new(shape, data)?
        };
        params.push(Param {
            path,
            tensor: tensor.with_grad(),
        });
    }
    Ok(EmbeddingNet {
        preset: preset.clone(),
        params,
        normalize: false,
    })
}

impl EmbeddingNet {
    pub fn preset(&self) -> &ArchPreset {
        &self.preset
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    /// Whether embeddings are projected to unit norm.
    pub fn normalize(&self) -> bool {
        self.normalize
    }

    pub fn set_normalize(&mut self, on: bool) {
        self.normalize = on;
    }

    /// Rebuild a net from externally supplied parameters (checkpoint load).
    pub fn from_parts(preset: ArchPreset, params: Vec<Param>, normalize: bool) -> Result<Self> {
        let expected = preset.param_shapes()?;
        if expected.len() != params.len() {
            return Err(Error::Checkpoint(format!(
                "preset '{}' expects {} parameter tensors, got {}",
                preset.name,
                expected.len(),
                params.len()
            )));
        }
        for ((path, shape), param) in expected.iter().zip(&params) {
            if path != &param.path || shape.as_slice() != param.tensor.shape() {
                return Err(Error::Checkpoint(format!(
                    "parameter '{}' of shape {:?} does not match preset entry '{}' {:?}",
                    param.path,
                    param.tensor.shape(),
                    path,
                    shape
                )));
            }
        }
        Ok(EmbeddingNet {
            preset,
            params,
            normalize,
        })
    }

    /// Run the backbone on a graph. `param_ids` must hold one leaf per
    /// parameter tensor, in [`EmbeddingNet::params`] order; the caller keeps
    /// the ids to read gradients back out.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        input: NodeId,
        param_ids: &[NodeId],
    ) -> Result<NodeId> {
        if param_ids.len() != self.params.len() {
            return Err(Error::Contract(format!(
                "forward_graph got {} parameter leaves, net has {}",
                param_ids.len(),
                self.params.len()
            )));
        }
        let mut next_param = 0;
        let mut take2 = |count: &mut usize| {
            let pair = (param_ids[*count], param_ids[*count + 1]);
            *count += 2;
            pair
        };
        let mut current = input;
        let mut outputs: Vec<NodeId> = Vec::with_capacity(self.preset.layers.len());
        for layer in &self.preset.layers {
            current = match layer {
                LayerSpec::Conv { stride, padding, .. } => {
                    let (w, b) = take2(&mut next_param);
                    let y = g.conv2d(current, w, *stride, *padding)?;
                    // fold the bias in as a per-channel add
                    add_channel_bias(g, y, b)?
                }
                LayerSpec::Relu => g.relu(current),
                LayerSpec::MaxPool { window, stride } => g.maxpool2d(current, *window, *stride)?,
                LayerSpec::AdaptiveAvgPool { out } => g.adaptive_avg_pool2d(current, *out)?,
                LayerSpec::Flatten => g.flatten(current)?,
                LayerSpec::Linear { .. } => {
                    let (w, b) = take2(&mut next_param);
                    g.linear(current, w, b)?
                }
                LayerSpec::SkipAdd { from, weight } => {
                    let src = *outputs.get(*from).ok_or_else(|| {
                        Error::Config(format!("skip source {from} precedes no layer"))
                    })?;
                    let scaled = g.scale(src, *weight);
                    g.add(current, scaled)?
                }
            };
            outputs.push(current);
        }
        Ok(current)
    }

    /// Leaves for every parameter, in order.
    pub fn param_leaves(&self, g: &mut Graph) -> Vec<NodeId> {
        self.params.iter().map(|p| g.leaf(&p.tensor)).collect()
    }

    /// Embed a batch of images `[N, 3, H, W]` into `[N, embedding_dim]`.
    /// Pure function of the parameters and input.
    pub fn embed(&self, batch: &Tensor) -> Result<Tensor> {
        let shape = batch.shape();
        if shape.len() != 4 || shape[1] != IN_CHANNELS {
            return Err(Error::Dimension(format!(
                "embed expects [N,{IN_CHANNELS},H,W], got {shape:?}"
            )));
        }
        if shape[2] != shape[3] || shape[2] < MIN_INPUT {
            return Err(Error::Dimension(format!(
                "embed needs square inputs of at least {MIN_INPUT} px, got {}x{}",
                shape[2], shape[3]
            )));
        }
        let mut g = Graph::new();
        let input = g.leaf_from(shape.to_vec(), batch.data().to_vec(), false)?;
        let param_ids: Vec<NodeId> = self
            .params
            .iter()
            .map(|p| {
                g.leaf_from(p.tensor.shape().to_vec(), p.tensor.data().to_vec(), false)
                    .expect("parameter shapes are valid")
            })
            .collect();
        let mut out = self.forward_graph(&mut g, input, &param_ids)?;
        if self.normalize {
            out = g.l2_normalize_rows(out)?;
        }
        Ok(g.to_tensor(out))
    }

    /// Embed a list of single images in fixed-size chunks. Per-sample
    /// independence of every layer makes the result identical to one pass.
    pub fn embed_all(&self, images: &[Tensor], chunk: usize) -> Result<Tensor> {
        if images.is_empty() {
            return Err(Error::Contract("embed_all on empty image list".into()));
        }
        let per = images[0].shape().to_vec();
        let dim = self.preset.embedding_dim;
        let mut out = Vec::with_capacity(images.len() * dim);
        for group in images.chunks(chunk.max(1)) {
            let mut stacked = Vec::with_capacity(group.len() * images[0].numel());
            for img in group {
                if img.shape() != per.as_slice() {
                    return Err(Error::Dimension(format!(
                        "embed_all image shape {:?} differs from first image {:?}",
                        img.shape(),
                        per
                    )));
                }
                stacked.extend_from_slice(img.data());
            }
            let mut shape = vec![group.len()];
            shape.extend_from_slice(&per);
            let batch = Tensor::new(shape, stacked)?;
            out.extend_from_slice(self.embed(&batch)?.data());
        }
        Tensor::new(vec![images.len(), dim], out)
    }
}

/// Add a `[F]` bias to a `[N,F,H,W]` activation by expanding it once.
fn add_channel_bias(g: &mut Graph, x: NodeId, bias: NodeId) -> Result<NodeId> {
    let shape = g.shape(x).to_vec();
    let (n, f, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    if g.shape(bias) != [f] {
        return Err(Error::Dimension(format!(
            "channel bias {:?} does not fit activation {:?}",
            g.shape(bias),
            shape
        )));
    }
    g.broadcast_channel_add(x, bias, n, f, h * w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_have_documented_budget() {
        // all three stay far under the 2M budget
        for preset in [
            ArchPreset::alex_lite(),
            ArchPreset::vgg_lite(),
            ArchPreset::res_lite(),
        ] {
            let count = preset.param_count().unwrap();
            assert!(count < 2_000_000, "{} has {count} params", preset.name);
            assert!(count > 10_000, "{} suspiciously small: {count}", preset.name);
        }
    }

    #[test]
    fn unknown_preset_is_config_error() {
        assert!(matches!(
            ArchPreset::by_name("alex-net"),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn build_is_deterministic() {
        let preset = ArchPreset::alex_lite();
        let a = build(&preset, 7).unwrap();
        let b = build(&preset, 7).unwrap();
        for (pa, pb) in a.params().iter().zip(b.params()) {
            assert_eq!(pa.path, pb.path);
            assert_eq!(pa.tensor.data(), pb.tensor.data());
        }
        let c = build(&preset, 8).unwrap();
        assert_ne!(a.params()[0].tensor.data(), c.params()[0].tensor.data());
    }

    #[test]
    fn biases_start_at_zero() {
        let net = build(&ArchPreset::vgg_lite(), 3).unwrap();
        for p in net.params() {
            if p.path.ends_with(".bias") {
                assert!(p.tensor.data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn all_presets_emit_embedding_dim_for_valid_sizes() {
        for preset in [
            ArchPreset::alex_lite(),
            ArchPreset::vgg_lite(),
            ArchPreset::res_lite(),
        ] {
            let net = build(&preset, 1).unwrap();
            for size in [32, 64] {
                let batch = Tensor::zeros(vec![1, 3, size, size]);
                let out = net.embed(&batch).unwrap();
                assert_eq!(out.shape(), &[1, EMBEDDING_DIM], "{} at {size}", preset.name);
            }
        }
    }

    #[test]
    fn embed_rejects_bad_inputs() {
        let net = build(&ArchPreset::alex_lite(), 1).unwrap();
        assert!(net.embed(&Tensor::zeros(vec![1, 3, 16, 16])).is_err());
        assert!(net.embed(&Tensor::zeros(vec![1, 3, 64, 32])).is_err());
        assert!(net.embed(&Tensor::zeros(vec![1, 1, 64, 64])).is_err());
    }

    #[test]
    fn embed_is_deterministic_and_batch_independent() {
        let net = build(&ArchPreset::res_lite(), 11).unwrap();
        let mut rng = substream(5, "test-images", &[]);
        let a = Tensor::new(
            vec![1, 3, 32, 32],
            (0..3 * 32 * 32).map(|_| uniform(&mut rng, 0.0, 1.0)).collect(),
        )
        .unwrap();
        let b = Tensor::new(
            vec![1, 3, 32, 32],
            (0..3 * 32 * 32).map(|_| uniform(&mut rng, 0.0, 1.0)).collect(),
        )
        .unwrap();
        let ea = net.embed(&a).unwrap();
        let ea2 = net.embed(&a).unwrap();
        assert_eq!(ea.data(), ea2.data());

        let mut stacked = a.data().to_vec();
        stacked.extend_from_slice(b.data());
        let both = Tensor::new(vec![2, 3, 32, 32], stacked).unwrap();
        let eboth = net.embed(&both).unwrap();
        let eb = net.embed(&b).unwrap();
        assert_eq!(&eboth.data()[..128], ea.data());
        assert_eq!(&eboth.data()[128..], eb.data());
    }

    #[test]
    fn zeroed_final_layer_embeds_to_zero() {
        let mut net = build(&ArchPreset::alex_lite(), 2).unwrap();
        let last_weight = net.params_mut().len() - 2;
        for v in net.params_mut()[last_weight].tensor.data_mut() {
            *v = 0.0;
        }
        let out = net.embed(&Tensor::zeros(vec![1, 3, 32, 32])).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn skip_weight_zero_equals_plain_path() {
        // res-lite with its shortcuts zeroed must equal the same layer list
        // with the SkipAdd entries removed.
        let preset = ArchPreset::res_lite();
        let mut zeroed = preset.clone();
        zeroed.name = "res-lite".into();
        for layer in &mut zeroed.layers {
            if let LayerSpec::SkipAdd { weight, .. } = layer {
                *weight = 0.0;
            }
        }
        let mut plain = preset.clone();
        plain.layers.retain(|l| !matches!(l, LayerSpec::SkipAdd { .. }));

        let with_skip = build(&preset, 9).unwrap();
        let net_zeroed =
            EmbeddingNet::from_parts(zeroed, with_skip.params().to_vec(), false).unwrap();
        // plain has identical parameter count; rebuild paths to match
        let plain_params: Vec<Param> = plain
            .param_shapes()
            .unwrap()
            .into_iter()
            .zip(with_skip.params())
            .map(|((path, _), p)| Param {
                path,
                tensor: p.tensor.clone(),
            })
            .collect();
        let net_plain = EmbeddingNet::from_parts(plain, plain_params, false).unwrap();

        let mut rng = substream(1, "skip-test", &[]);
        let x = Tensor::new(
            vec![1, 3, 32, 32],
            (0..3 * 32 * 32).map(|_| uniform(&mut rng, 0.0, 1.0)).collect(),
        )
        .unwrap();
        let a = net_zeroed.embed(&x).unwrap();
        let b = net_plain.embed(&x).unwrap();
        assert_eq!(a.data(), b.data());

        // and with the shortcut active the outputs differ
        let c = with_skip.embed(&x).unwrap();
        assert_ne!(a.data(), c.data());
    }
}
