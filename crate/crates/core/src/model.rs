//! Small splittable architectures: an MLP and CNN for images and a compact
//! transformer in classifier and generator form for token tasks.
//!
//! Every model is a flat list of layers; the split index s partitions it
//! into a feature extractor f (layers [0, s)) and a head g (layers
//! [s, depth)). Both partial passes run the same per-layer code as the full
//! forward, so their composition is exactly the unsplit forward pass.

use std::path::Path;

use crate::bytes::{fnv64, ByteReader, ByteWriter};
use crate::error::{Error, Result};
use crate::ops::{concat_cols, concat_rows};
use crate::optim::Parameters;
use crate::rng::{self, stream};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use rand_chacha::ChaCha8Rng;

/// Architecture family.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArchKind {
    Mlp,
    Cnn,
    TransformerClassifier,
    TransformerGenerator,
}

impl ArchKind {
    /// Parse a manifest-facing name. Unknown names are a configuration
    /// error listing the valid choices.
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "mlp" => Ok(ArchKind::Mlp),
            "cnn" => Ok(ArchKind::Cnn),
            "transformer-classifier" => Ok(ArchKind::TransformerClassifier),
            "transformer-generator" => Ok(ArchKind::TransformerGenerator),
            other => Err(Error::Config(format!(
                "unknown architecture {other:?}; expected one of mlp, cnn, \
                 transformer-classifier, transformer-generator"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            ArchKind::Mlp => "mlp",
            ArchKind::Cnn => "cnn",
            ArchKind::TransformerClassifier => "transformer-classifier",
            ArchKind::TransformerGenerator => "transformer-generator",
        }
    }

    fn tag(&self) -> u8 {
        match self {
            ArchKind::Mlp => 0,
            ArchKind::Cnn => 1,
            ArchKind::TransformerClassifier => 2,
            ArchKind::TransformerGenerator => 3,
        }
    }

    fn from_tag(tag: u8, offset: u64) -> Result<Self> {
        match tag {
            0 => Ok(ArchKind::Mlp),
            1 => Ok(ArchKind::Cnn),
            2 => Ok(ArchKind::TransformerClassifier),
            3 => Ok(ArchKind::TransformerGenerator),
            other => Err(Error::format(offset, format!("bad architecture tag {other}"))),
        }
    }
}

/// Complete hyperparameter record for one model. Fields irrelevant to the
/// architecture kind are zero; the constructors below fill the defaults used
/// throughout the experiments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub arch: ArchKind,
    /// MLP input dimension (flattened).
    pub input_dim: usize,
    /// CNN input geometry.
    pub in_channels: usize,
    pub height: usize,
    pub width_px: usize,
    pub conv_channels: (usize, usize),
    /// MLP hidden width / CNN dense width.
    pub hidden: usize,
    pub hidden_layers: usize,
    /// Token tasks.
    pub vocab: usize,
    pub seq: usize,
    pub model_width: usize,
    pub blocks: usize,
    pub heads: usize,
    /// Classifier output count.
    pub classes: usize,
    pub seed: u64,
}

impl ModelSpec {
    fn base(arch: ArchKind, seed: u64) -> Self {
        ModelSpec {
            arch,
            input_dim: 0,
            in_channels: 0,
            height: 0,
            width_px: 0,
            conv_channels: (0, 0),
            hidden: 0,
            hidden_layers: 0,
            vocab: 0,
            seq: 0,
            model_width: 0,
            blocks: 0,
            heads: 0,
            classes: 0,
            seed,
        }
    }

    /// 3 hidden layers of 64 units for flat vectors.
    pub fn mlp(input_dim: usize, classes: usize, seed: u64) -> Self {
        ModelSpec {
            input_dim,
            hidden: 64,
            hidden_layers: 3,
            classes,
            ..ModelSpec::base(ArchKind::Mlp, seed)
        }
    }

    /// Two conv layers (8, 16 channels) + two dense layers for 16x16
    /// single-channel images.
    pub fn cnn(height: usize, width_px: usize, classes: usize, seed: u64) -> Self {
        ModelSpec {
            in_channels: 1,
            height,
            width_px,
            conv_channels: (8, 16),
            hidden: 64,
            classes,
            ..ModelSpec::base(ArchKind::Cnn, seed)
        }
    }

    /// 2-block transformer, width 32, 2 heads, mean-pool classifier head.
    pub fn text_classifier(vocab: usize, seq: usize, classes: usize, seed: u64) -> Self {
        ModelSpec {
            vocab,
            seq,
            model_width: 32,
            blocks: 2,
            heads: 2,
            classes,
            ..ModelSpec::base(ArchKind::TransformerClassifier, seed)
        }
    }

    /// 2-block causal transformer, width 32, 2 heads, next-token head.
    pub fn text_generator(vocab: usize, seq: usize, seed: u64) -> Self {
        ModelSpec {
            vocab,
            seq,
            model_width: 32,
            blocks: 2,
            heads: 2,
            ..ModelSpec::base(ArchKind::TransformerGenerator, seed)
        }
    }

    fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::Config(format!("model spec: {what} must be positive")));
        match self.arch {
            ArchKind::Mlp => {
                if self.input_dim == 0 {
                    return bad("input_dim");
                }
                // hidden_layers = 0 is a plain linear model; hidden width
                // only matters when there are hidden layers.
                if self.hidden_layers > 0 && self.hidden == 0 {
                    return bad("hidden width");
                }
                if self.classes == 0 {
                    return bad("classes");
                }
            }
            ArchKind::Cnn => {
                if self.in_channels == 0 || self.height == 0 || self.width_px == 0 {
                    return bad("input geometry");
                }
                if self.conv_channels.0 == 0 || self.conv_channels.1 == 0 || self.hidden == 0 {
                    return bad("channel/dense widths");
                }
                if self.classes == 0 {
                    return bad("classes");
                }
            }
            ArchKind::TransformerClassifier | ArchKind::TransformerGenerator => {
                if self.vocab == 0 || self.seq == 0 {
                    return bad("vocab/seq");
                }
                if self.model_width == 0 || self.blocks == 0 || self.heads == 0 {
                    return bad("width/blocks/heads");
                }
                if self.model_width % self.heads != 0 {
                    return Err(Error::Config(format!(
                        "model width {} not divisible by head count {}",
                        self.model_width, self.heads
                    )));
                }
                if self.arch == ArchKind::TransformerClassifier && self.classes == 0 {
                    return bad("classes");
                }
            }
        }
        Ok(())
    }

    fn encode(&self, w: &mut ByteWriter) {
        w.u8(self.arch.tag());
        for v in [
            self.input_dim,
            self.in_channels,
            self.height,
            self.width_px,
            self.conv_channels.0,
            self.conv_channels.1,
            self.hidden,
            self.hidden_layers,
            self.vocab,
            self.seq,
            self.model_width,
            self.blocks,
            self.heads,
            self.classes,
        ] {
            w.u32(v as u32);
        }
        w.u64(self.seed);
    }

    fn decode(r: &mut ByteReader) -> Result<Self> {
        let at = r.pos();
        let arch = ArchKind::from_tag(r.u8("arch tag")?, at)?;
        let mut vals = [0usize; 14];
        for v in vals.iter_mut() {
            *v = r.u32("model spec field")? as usize;
        }
        Ok(ModelSpec {
            arch,
            input_dim: vals[0],
            in_channels: vals[1],
            height: vals[2],
            width_px: vals[3],
            conv_channels: (vals[4], vals[5]),
            hidden: vals[6],
            hidden_layers: vals[7],
            vocab: vals[8],
            seq: vals[9],
            model_width: vals[10],
            blocks: vals[11],
            heads: vals[12],
            classes: vals[13],
            seed: r.u64("model seed")?,
        })
    }

    /// Stable fingerprint of the full hyperparameter record.
    pub fn fingerprint(&self) -> u64 {
        let mut w = ByteWriter::new();
        self.encode(&mut w);
        fnv64(&w.into_bytes())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Act {
    None,
    Relu,
}

struct Block<S: Scalar> {
    ln1_g: Tensor<S>,
    ln1_b: Tensor<S>,
    wq: Tensor<S>,
    wk: Tensor<S>,
    wv: Tensor<S>,
    wo: Tensor<S>,
    ln2_g: Tensor<S>,
    ln2_b: Tensor<S>,
    mlp_w1: Tensor<S>,
    mlp_b1: Tensor<S>,
    mlp_w2: Tensor<S>,
    mlp_b2: Tensor<S>,
    heads: usize,
    seq: usize,
    causal: bool,
}

enum Layer<S: Scalar> {
    Dense {
        w: Tensor<S>,
        b: Tensor<S>,
        act: Act,
    },
    Conv {
        w: Tensor<S>,
        b: Tensor<S>,
        stride: usize,
    },
    Embed {
        tok: Tensor<S>,
        pos: Tensor<S>,
        vocab: usize,
        seq: usize,
    },
    Block(Box<Block<S>>),
    PoolClassify {
        w: Tensor<S>,
        b: Tensor<S>,
        seq: usize,
    },
    LmHead {
        ln_g: Tensor<S>,
        ln_b: Tensor<S>,
        w: Tensor<S>,
        b: Tensor<S>,
    },
}

const LN_EPS: f64 = 1e-5;
/// Additive pre-softmax mask value for blocked attention positions. Finite
/// so the backward pass stays NaN-free; large enough to zero the weight.
const MASK_NEG: f64 = -1e30;

fn normal_vec<S: Scalar>(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<S> {
    (0..n)
        .map(|_| {
            let z: S = S::sample_standard_normal(rng);
            z * S::from_f64(scale)
        })
        .collect()
}

fn dense_init<S: Scalar>(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor<S> {
    let scale = (2.0 / fan_in as f64).sqrt();
    Tensor::from_vec(&[fan_in, fan_out], normal_vec(rng, fan_in * fan_out, scale))
        .expect("init shape")
        .with_grad()
}

fn zeros_param<S: Scalar>(shape: &[usize]) -> Tensor<S> {
    Tensor::zeros(shape).with_grad()
}

fn ones_param<S: Scalar>(n: usize) -> Tensor<S> {
    Tensor::full(&[n], S::one()).with_grad()
}

/// Split architecture: f = layers [0, split), g = layers [split, depth).
pub struct SplitModel<S: Scalar> {
    spec: ModelSpec,
    layers: Vec<Layer<S>>,
    split: usize,
}

impl<S: Scalar> std::fmt::Debug for SplitModel<S> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SplitModel")
            .field("arch", &self.spec.arch.name())
            .field("depth", &self.layers.len())
            .field("split", &self.split)
            .finish()
    }
}

/// A split point together with the per-example latent shape there.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerHandle {
    pub split_index: usize,
    pub latent_shape: Vec<usize>,
}

/// Batch targets for loss computation.
pub enum BatchTargets<S: Scalar> {
    /// One class label per example.
    Labels(Vec<usize>),
    /// Teacher-forced next-token prediction derived from the input tokens;
    /// positions whose target is `pad` (and the final position) carry zero
    /// weight.
    NextToken { pad: Option<usize> },
    /// Explicit per-row labels and weights over the logits rows.
    WeightedLabels { labels: Vec<usize>, weights: Vec<S> },
}

/// Deterministically initialized model for a spec. The same spec (including
/// its seed) always yields bit-identical parameters.
pub fn build_model<S: Scalar>(spec: &ModelSpec, split: usize) -> Result<SplitModel<S>> {
    spec.validate()?;
    let mut layers: Vec<Layer<S>> = Vec::new();
    let layer_rng =
        |layer: usize, slot: u64| rng::stream_rng(spec.seed, stream::MODEL_INIT, (layer as u64) * 16 + slot);
    match spec.arch {
        ArchKind::Mlp => {
            let mut fan_in = spec.input_dim;
            for i in 0..spec.hidden_layers {
                layers.push(Layer::Dense {
                    w: dense_init(&mut layer_rng(i, 0), fan_in, spec.hidden),
                    b: zeros_param(&[spec.hidden]),
                    act: Act::Relu,
                });
                fan_in = spec.hidden;
            }
            layers.push(Layer::Dense {
                w: dense_init(&mut layer_rng(spec.hidden_layers, 0), fan_in, spec.classes),
                b: zeros_param(&[spec.classes]),
                act: Act::None,
            });
        }
        ArchKind::Cnn => {
            let (c1, c2) = spec.conv_channels;
            let k = 3usize;
            let fan1 = spec.in_channels * k * k;
            let w1 = Tensor::from_vec(
                &[c1, spec.in_channels, k, k],
                normal_vec(&mut layer_rng(0, 0), c1 * fan1, (2.0 / fan1 as f64).sqrt()),
            )
            .expect("conv1 shape")
            .with_grad();
            layers.push(Layer::Conv {
                w: w1,
                b: zeros_param(&[c1]),
                stride: 1,
            });
            let fan2 = c1 * k * k;
            let w2 = Tensor::from_vec(
                &[c2, c1, k, k],
                normal_vec(&mut layer_rng(1, 0), c2 * fan2, (2.0 / fan2 as f64).sqrt()),
            )
            .expect("conv2 shape")
            .with_grad();
            layers.push(Layer::Conv {
                w: w2,
                b: zeros_param(&[c2]),
                stride: 2,
            });
            let h1 = spec.height - k + 1;
            let w1px = spec.width_px - k + 1;
            let h2 = (h1 - k) / 2 + 1;
            let w2px = (w1px - k) / 2 + 1;
            let flat = c2 * h2 * w2px;
            layers.push(Layer::Dense {
                w: dense_init(&mut layer_rng(2, 0), flat, spec.hidden),
                b: zeros_param(&[spec.hidden]),
                act: Act::Relu,
            });
            layers.push(Layer::Dense {
                w: dense_init(&mut layer_rng(3, 0), spec.hidden, spec.classes),
                b: zeros_param(&[spec.classes]),
                act: Act::None,
            });
        }
        ArchKind::TransformerClassifier | ArchKind::TransformerGenerator => {
            let d = spec.model_width;
            let causal = spec.arch == ArchKind::TransformerGenerator;
            let emb_scale = 0.02;
            let tok = Tensor::from_vec(
                &[spec.vocab, d],
                normal_vec(&mut layer_rng(0, 0), spec.vocab * d, emb_scale),
            )
            .expect("tok shape")
            .with_grad();
            let pos = Tensor::from_vec(
                &[spec.seq, d],
                normal_vec(&mut layer_rng(0, 1), spec.seq * d, emb_scale),
            )
            .expect("pos shape")
            .with_grad();
            layers.push(Layer::Embed {
                tok,
                pos,
                vocab: spec.vocab,
                seq: spec.seq,
            });
            for bi in 0..spec.blocks {
                let li = 1 + bi;
                layers.push(Layer::Block(Box::new(Block {
                    ln1_g: ones_param(d),
                    ln1_b: zeros_param(&[d]),
                    wq: dense_init(&mut layer_rng(li, 0), d, d),
                    wk: dense_init(&mut layer_rng(li, 1), d, d),
                    wv: dense_init(&mut layer_rng(li, 2), d, d),
                    wo: dense_init(&mut layer_rng(li, 3), d, d),
                    ln2_g: ones_param(d),
                    ln2_b: zeros_param(&[d]),
                    mlp_w1: dense_init(&mut layer_rng(li, 4), d, 2 * d),
                    mlp_b1: zeros_param(&[2 * d]),
                    mlp_w2: dense_init(&mut layer_rng(li, 5), 2 * d, d),
                    mlp_b2: zeros_param(&[d]),
                    heads: spec.heads,
                    seq: spec.seq,
                    causal,
                })));
            }
            let head_li = 1 + spec.blocks;
            if spec.arch == ArchKind::TransformerClassifier {
                layers.push(Layer::PoolClassify {
                    w: dense_init(&mut layer_rng(head_li, 0), d, spec.classes),
                    b: zeros_param(&[spec.classes]),
                    seq: spec.seq,
                });
            } else {
                layers.push(Layer::LmHead {
                    ln_g: ones_param(d),
                    ln_b: zeros_param(&[d]),
                    w: dense_init(&mut layer_rng(head_li, 0), d, spec.vocab),
                    b: zeros_param(&[spec.vocab]),
                });
            }
        }
    }
    let depth = layers.len();
    if split > depth {
        return Err(Error::Index {
            op: "build_model",
            index: split,
            bound: depth + 1,
        });
    }
    Ok(SplitModel {
        spec: spec.clone(),
        layers,
        split,
    })
}

/// Round token values to usize ids, rejecting out-of-vocabulary values.
fn token_ids<S: Scalar>(x: &Tensor<S>, vocab: usize) -> Result<Vec<usize>> {
    x.with_data(|v| {
        v.iter()
            .map(|&t| {
                let id = t.to_f64_lossy().round();
                if id < 0.0 || id >= vocab as f64 {
                    Err(Error::Index {
                        op: "token_ids",
                        index: id.max(0.0) as usize,
                        bound: vocab,
                    })
                } else {
                    Ok(id as usize)
                }
            })
            .collect()
    })
}

impl<S: Scalar> SplitModel<S> {
    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn split_index(&self) -> usize {
        self.split
    }

    /// Move the split point. Valid indices are 0..=depth.
    pub fn set_split(&mut self, split: usize) -> Result<()> {
        if split > self.depth() {
            return Err(Error::Index {
                op: "set_split",
                index: split,
                bound: self.depth() + 1,
            });
        }
        self.split = split;
        Ok(())
    }

    fn forward_layer(&self, layer: &Layer<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        match layer {
            Layer::Dense { w, b, act } => {
                let shape = x.shape();
                let flat = if shape.len() > 2 {
                    let batch = shape[0];
                    let rest: usize = shape[1..].iter().product();
                    x.reshape(&[batch, rest])?
                } else {
                    x.clone()
                };
                let rows = flat.shape()[0];
                let h = flat.matmul(w)?.add(&b.broadcast_rows(rows)?)?;
                Ok(match act {
                    Act::Relu => h.relu(),
                    Act::None => h,
                })
            }
            Layer::Conv { w, b, stride } => {
                let h = x.conv2d(w, *stride)?.add_channel_bias(b)?;
                Ok(h.relu())
            }
            Layer::Embed {
                tok,
                pos,
                vocab,
                seq,
            } => {
                let shape = x.shape();
                if shape.len() != 2 || shape[1] != *seq {
                    return Err(Error::Dimension {
                        op: "embed",
                        lhs: shape,
                        rhs: vec![0, *seq],
                    });
                }
                let batch = shape[0];
                let ids = token_ids(x, *vocab)?;
                let e = tok.embedding(&ids)?;
                e.add(&pos.tile_rows(batch)?)
            }
            Layer::Block(b) => self.forward_block(b, x),
            Layer::PoolClassify { w, b, seq } => {
                let pooled = x.mean_pool_rows(*seq)?;
                let rows = pooled.shape()[0];
                pooled.matmul(w)?.add(&b.broadcast_rows(rows)?)
            }
            Layer::LmHead { ln_g, ln_b, w, b } => {
                let h = x.layer_norm(ln_g, ln_b, S::from_f64(LN_EPS))?;
                let rows = h.shape()[0];
                h.matmul(w)?.add(&b.broadcast_rows(rows)?)
            }
        }
    }

    fn forward_block(&self, blk: &Block<S>, x: &Tensor<S>) -> Result<Tensor<S>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[0] % blk.seq != 0 {
            return Err(Error::Dimension {
                op: "block",
                lhs: shape,
                rhs: vec![blk.seq, 0],
            });
        }
        let d = shape[1];
        let batch = shape[0] / blk.seq;
        let dh = d / blk.heads;
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());

        let h = x.layer_norm(&blk.ln1_g, &blk.ln1_b, S::from_f64(LN_EPS))?;
        let q = h.matmul(&blk.wq)?;
        let k = h.matmul(&blk.wk)?;
        let v = h.matmul(&blk.wv)?;

        let mask = if blk.causal {
            let mut m = vec![S::zero(); blk.seq * blk.seq];
            for i in 0..blk.seq {
                for j in (i + 1)..blk.seq {
                    m[i * blk.seq + j] = S::from_f64(MASK_NEG);
                }
            }
            Some(Tensor::from_vec(&[blk.seq, blk.seq], m)?)
        } else {
            None
        };

        let mut per_example: Vec<Tensor<S>> = Vec::with_capacity(batch);
        for bi in 0..batch {
            let (r0, r1) = (bi * blk.seq, (bi + 1) * blk.seq);
            let mut head_outputs: Vec<Tensor<S>> = Vec::with_capacity(blk.heads);
            for hi in 0..blk.heads {
                let (c0, c1) = (hi * dh, (hi + 1) * dh);
                let qh = q.slice_rows(r0, r1)?.slice_cols(c0, c1)?;
                let kh = k.slice_rows(r0, r1)?.slice_cols(c0, c1)?;
                let vh = v.slice_rows(r0, r1)?.slice_cols(c0, c1)?;
                let mut scores = qh.matmul(&kh.transpose2d()?)?.scale(scale);
                if let Some(m) = &mask {
                    scores = scores.add(m)?;
                }
                let attn = scores.softmax_rows()?;
                head_outputs.push(attn.matmul(&vh)?);
            }
            per_example.push(concat_cols(&head_outputs)?);
        }
        let ctx = concat_rows(&per_example)?;
        let attn_out = ctx.matmul(&blk.wo)?;
        let x = x.add(&attn_out)?;

        let rows = x.shape()[0];
        let h2 = x.layer_norm(&blk.ln2_g, &blk.ln2_b, S::from_f64(LN_EPS))?;
        let m1 = h2
            .matmul(&blk.mlp_w1)?
            .add(&blk.mlp_b1.broadcast_rows(rows)?)?
            .gelu();
        let m2 = m1
            .matmul(&blk.mlp_w2)?
            .add(&blk.mlp_b2.broadcast_rows(rows)?)?;
        x.add(&m2)
    }

    fn forward_range(&self, x: &Tensor<S>, from: usize, to: usize) -> Result<Tensor<S>> {
        let mut h = x.clone();
        for layer in &self.layers[from..to] {
            h = self.forward_layer(layer, &h)?;
        }
        Ok(h)
    }

    /// Full forward pass through every layer.
    pub fn forward(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.forward_range(x, 0, self.depth())
    }

    /// Feature extractor: layers [0, split). Split 0 returns the input.
    pub fn forward_f(&self, x: &Tensor<S>) -> Result<Tensor<S>> {
        self.forward_range(x, 0, self.split)
    }

    /// Head: layers [split, depth). Split = depth returns the latent.
    pub fn forward_g(&self, latent: &Tensor<S>) -> Result<Tensor<S>> {
        self.forward_range(latent, self.split, self.depth())
    }

    fn layer_param_names(index: usize, layer: &Layer<S>) -> Vec<(String, Tensor<S>)> {
        let p = |slot: &str| format!("layer{index}.{slot}");
        match layer {
            Layer::Dense { w, b, .. } => vec![(p("w"), w.clone()), (p("b"), b.clone())],
            Layer::Conv { w, b, .. } => vec![(p("w"), w.clone()), (p("b"), b.clone())],
            Layer::Embed { tok, pos, .. } => {
                vec![(p("tok"), tok.clone()), (p("pos"), pos.clone())]
            }
            Layer::Block(blk) => vec![
                (p("ln1.g"), blk.ln1_g.clone()),
                (p("ln1.b"), blk.ln1_b.clone()),
                (p("attn.wq"), blk.wq.clone()),
                (p("attn.wk"), blk.wk.clone()),
                (p("attn.wv"), blk.wv.clone()),
                (p("attn.wo"), blk.wo.clone()),
                (p("ln2.g"), blk.ln2_g.clone()),
                (p("ln2.b"), blk.ln2_b.clone()),
                (p("mlp.w1"), blk.mlp_w1.clone()),
                (p("mlp.b1"), blk.mlp_b1.clone()),
                (p("mlp.w2"), blk.mlp_w2.clone()),
                (p("mlp.b2"), blk.mlp_b2.clone()),
            ],
            Layer::PoolClassify { w, b, .. } => {
                vec![(p("w"), w.clone()), (p("b"), b.clone())]
            }
            Layer::LmHead { ln_g, ln_b, w, b } => vec![
                (p("ln.g"), ln_g.clone()),
                (p("ln.b"), ln_b.clone()),
                (p("w"), w.clone()),
                (p("b"), b.clone()),
            ],
        }
    }

    /// All parameters in layer order.
    pub fn parameters(&self) -> Parameters<S> {
        let mut params = Parameters::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in Self::layer_param_names(i, layer) {
                params.push(name, t).expect("unique layer param names");
            }
        }
        params
    }

    /// Parameters of f (layers before the split).
    pub fn pre_split_parameters(&self) -> Parameters<S> {
        let mut params = Parameters::new();
        for (i, layer) in self.layers.iter().enumerate().take(self.split) {
            for (name, t) in Self::layer_param_names(i, layer) {
                params.push(name, t).expect("unique layer param names");
            }
        }
        params
    }

    /// Parameters of g (layers at or after the split).
    pub fn post_split_parameters(&self) -> Parameters<S> {
        let mut params = Parameters::new();
        for (i, layer) in self.layers.iter().enumerate().skip(self.split) {
            for (name, t) in Self::layer_param_names(i, layer) {
                params.push(name, t).expect("unique layer param names");
            }
        }
        params
    }

    /// Per-example input shape expected by layer 0.
    pub fn input_example_shape(&self) -> Vec<usize> {
        match self.spec.arch {
            ArchKind::Mlp => vec![self.spec.input_dim],
            ArchKind::Cnn => vec![self.spec.in_channels, self.spec.height, self.spec.width_px],
            _ => vec![self.spec.seq],
        }
    }

    fn example_shape_after(&self, layer: &Layer<S>, shape: &[usize]) -> Vec<usize> {
        match layer {
            Layer::Dense { w, .. } => vec![w.shape()[1]],
            Layer::Conv { w, stride, .. } => {
                let ks = w.shape();
                let (o, kh, kw) = (ks[0], ks[2], ks[3]);
                let (h, wd) = (shape[1], shape[2]);
                vec![o, (h - kh) / stride + 1, (wd - kw) / stride + 1]
            }
            Layer::Embed { seq, .. } => vec![*seq, self.spec.model_width],
            Layer::Block(_) => shape.to_vec(),
            Layer::PoolClassify { w, .. } => vec![w.shape()[1]],
            Layer::LmHead { w, .. } => vec![self.spec.seq, w.shape()[1]],
        }
    }

    /// Per-example latent shape at a split index.
    pub fn latent_example_shape(&self, split: usize) -> Result<Vec<usize>> {
        if split > self.depth() {
            return Err(Error::Index {
                op: "latent_example_shape",
                index: split,
                bound: self.depth() + 1,
            });
        }
        let mut shape = self.input_example_shape();
        for layer in &self.layers[..split] {
            shape = self.example_shape_after(layer, &shape);
        }
        Ok(shape)
    }

    /// Handle describing a split point.
    pub fn layer_handle(&self, split: usize) -> Result<LayerHandle> {
        Ok(LayerHandle {
            split_index: split,
            latent_shape: self.latent_example_shape(split)?,
        })
    }

    /// Element count of one example's latent at a split.
    pub fn latent_elements(&self, split: usize) -> Result<usize> {
        Ok(self.latent_example_shape(split)?.iter().product())
    }

    /// Tensor shape of a whole latent batch at this model's split.
    pub fn latent_batch_shape(&self, batch: usize) -> Result<Vec<usize>> {
        let ex = self.latent_example_shape(self.split)?;
        Ok(match self.spec.arch {
            ArchKind::Mlp | ArchKind::Cnn => {
                let mut s = vec![batch];
                s.extend_from_slice(&ex);
                s
            }
            _ => {
                if self.split == 0 {
                    vec![batch, self.spec.seq]
                } else if ex.len() == 2 {
                    vec![batch * ex[0], ex[1]]
                } else {
                    // Head output (split = depth).
                    let mut s = vec![batch];
                    s.extend_from_slice(&ex);
                    s
                }
            }
        })
    }

    /// Loss over precomputed logits. For [`BatchTargets::NextToken`] the
    /// labels are read off the input token batch.
    pub fn loss_from_logits(
        &self,
        logits: &Tensor<S>,
        x: &Tensor<S>,
        targets: &BatchTargets<S>,
    ) -> Result<Tensor<S>> {
        match targets {
            BatchTargets::Labels(labels) => logits.softmax_cross_entropy(labels, None),
            BatchTargets::WeightedLabels { labels, weights } => {
                logits.softmax_cross_entropy(labels, Some(weights))
            }
            BatchTargets::NextToken { pad } => {
                let shape = x.shape();
                if shape.len() != 2 {
                    return Err(Error::Dimension {
                        op: "next_token_loss",
                        lhs: shape,
                        rhs: vec![0, self.spec.seq],
                    });
                }
                let (batch, seq) = (shape[0], shape[1]);
                let ids = token_ids(x, self.spec.vocab)?;
                let mut labels = vec![0usize; batch * seq];
                let mut weights = vec![S::zero(); batch * seq];
                for b in 0..batch {
                    for p in 0..seq - 1 {
                        let target = ids[b * seq + p + 1];
                        labels[b * seq + p] = target;
                        let masked = matches!(pad, Some(pd) if *pd == target);
                        if !masked {
                            weights[b * seq + p] = S::one();
                        }
                    }
                }
                logits.softmax_cross_entropy(&labels, Some(&weights))
            }
        }
    }

    /// Full-model loss for a batch.
    pub fn loss(&self, x: &Tensor<S>, targets: &BatchTargets<S>) -> Result<Tensor<S>> {
        let logits = self.forward(x)?;
        self.loss_from_logits(&logits, x, targets)
    }

    /// Stable fingerprint over parameter values (bit-level).
    pub fn params_fingerprint(&self) -> u64 {
        let mut w = ByteWriter::new();
        for (name, t) in self.parameters().iter() {
            w.str(name);
            for v in t.data_vec() {
                w.f64(v.to_f64_lossy());
            }
        }
        fnv64(&w.into_bytes())
    }
}

// ------------------------------------------------------------- checkpoints

const CKPT_MAGIC: &[u8; 8] = b"LATCKPT1";

/// Self-contained training snapshot: spec, split, progress counters, RNG
/// lineage, optimizer velocity, and every parameter tensor.
///
/// Byte layout (all integers little-endian):
/// magic "LATCKPT1" | u32 version | model spec | u32 split | u64 step |
/// u64 epoch | u64 batch | u64 train seed | u64 config fingerprint |
/// u32 lineage count | u64... | u32 velocity count | (name, u64 len,
/// f64...)... | u32 param count | (name, u32 rank, u32 dims..., u64 len,
/// f64...)...
#[derive(Debug, Clone)]
pub struct Checkpoint<S: Scalar> {
    pub spec: ModelSpec,
    pub split: usize,
    pub step: u64,
    pub epoch: u64,
    pub batch_in_epoch: u64,
    pub train_seed: u64,
    pub config_fingerprint: u64,
    pub seed_lineage: Vec<u64>,
    pub velocity: Vec<(String, Vec<S>)>,
    pub params: Vec<(String, Vec<usize>, Vec<S>)>,
}

impl<S: Scalar> Checkpoint<S> {
    /// Snapshot a model plus training progress.
    pub fn capture(
        model: &SplitModel<S>,
        step: u64,
        epoch: u64,
        batch_in_epoch: u64,
        train_seed: u64,
        config_fingerprint: u64,
        velocity: Vec<(String, Vec<S>)>,
    ) -> Self {
        let params = model
            .parameters()
            .iter()
            .map(|(name, t)| (name.to_string(), t.shape(), t.data_vec()))
            .collect();
        Checkpoint {
            spec: model.spec.clone(),
            split: model.split,
            step,
            epoch,
            batch_in_epoch,
            train_seed,
            config_fingerprint,
            seed_lineage: vec![model.spec.seed, train_seed],
            velocity,
            params,
        }
    }

    /// Rebuild the model and overwrite its parameters with the snapshot.
    pub fn restore(&self) -> Result<SplitModel<S>> {
        let model = build_model::<S>(&self.spec, self.split)?;
        let live = model.parameters();
        if live.len() != self.params.len() {
            return Err(Error::contract(
                "checkpoint_restore",
                format!(
                    "parameter count mismatch: model has {}, checkpoint has {}",
                    live.len(),
                    self.params.len()
                ),
            ));
        }
        for (name, shape, data) in &self.params {
            let t = live.get(name).ok_or_else(|| {
                Error::contract("checkpoint_restore", format!("unknown parameter {name:?}"))
            })?;
            if &t.shape() != shape {
                return Err(Error::Dimension {
                    op: "checkpoint_restore",
                    lhs: t.shape(),
                    rhs: shape.clone(),
                });
            }
            t.update_data(|d| d.copy_from_slice(data));
        }
        Ok(model)
    }

    /// Bit-level fingerprint of the parameter values.
    pub fn params_fingerprint(&self) -> u64 {
        let mut w = ByteWriter::new();
        for (name, _, data) in &self.params {
            w.str(name);
            for v in data {
                w.f64(v.to_f64_lossy());
            }
        }
        fnv64(&w.into_bytes())
    }

    fn encode(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.raw(CKPT_MAGIC);
        w.u32(1);
        self.spec.encode(&mut w);
        w.u32(self.split as u32);
        w.u64(self.step);
        w.u64(self.epoch);
        w.u64(self.batch_in_epoch);
        w.u64(self.train_seed);
        w.u64(self.config_fingerprint);
        w.u32(self.seed_lineage.len() as u32);
        for &s in &self.seed_lineage {
            w.u64(s);
        }
        w.u32(self.velocity.len() as u32);
        for (name, data) in &self.velocity {
            w.str(name);
            w.u64(data.len() as u64);
            for v in data {
                w.f64(v.to_f64_lossy());
            }
        }
        w.u32(self.params.len() as u32);
        for (name, shape, data) in &self.params {
            w.str(name);
            w.u32(shape.len() as u32);
            for &d in shape {
                w.u32(d as u32);
            }
            w.u64(data.len() as u64);
            for v in data {
                w.f64(v.to_f64_lossy());
            }
        }
        w.into_bytes()
    }

    fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let magic = r.take(8, "checkpoint magic")?;
        if magic != CKPT_MAGIC {
            return Err(Error::format(0, "bad checkpoint magic"));
        }
        let version = r.u32("checkpoint version")?;
        if version != 1 {
            return Err(Error::format(8, format!("unsupported checkpoint version {version}")));
        }
        let spec = ModelSpec::decode(&mut r)?;
        let split = r.u32("split")? as usize;
        let step = r.u64("step")?;
        let epoch = r.u64("epoch")?;
        let batch_in_epoch = r.u64("batch")?;
        let train_seed = r.u64("train seed")?;
        let config_fingerprint = r.u64("config fingerprint")?;
        let lineage_len = r.u32("lineage count")? as usize;
        let mut seed_lineage = Vec::with_capacity(lineage_len);
        for _ in 0..lineage_len {
            seed_lineage.push(r.u64("lineage seed")?);
        }
        let vel_len = r.u32("velocity count")? as usize;
        let mut velocity = Vec::with_capacity(vel_len);
        for _ in 0..vel_len {
            let name = r.str("velocity name")?;
            let n = r.u64("velocity len")? as usize;
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(S::from_f64(r.f64("velocity value")?));
            }
            velocity.push((name, data));
        }
        let param_len = r.u32("param count")? as usize;
        let mut params = Vec::with_capacity(param_len);
        for _ in 0..param_len {
            let name = r.str("param name")?;
            let rank = r.u32("param rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("param dim")? as usize);
            }
            let n = r.u64("param len")? as usize;
            let expect: usize = shape.iter().product();
            if n != expect {
                return Err(Error::format(
                    r.pos(),
                    format!("param {name:?} length {n} does not match shape {shape:?}"),
                ));
            }
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(S::from_f64(r.f64("param value")?));
            }
            params.push((name, shape, data));
        }
        r.expect_done()?;
        Ok(Checkpoint {
            spec,
            split,
            step,
            epoch,
            batch_in_epoch,
            train_seed,
            config_fingerprint,
            seed_lineage,
            velocity,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::decode(&bytes)
    }
}
