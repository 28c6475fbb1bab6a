//! Encoder-decoder segmentation model with a parallel contrastive
//! embedding head.
//!
//! The encoder is a stack of conv blocks, each halving resolution with
//! average pooling; the decoder bilinearly upsamples head outputs back to
//! input resolution. Two 1x1 heads produce class logits and L2-normalized
//! embeddings. All parameters live in one flat buffer so the optimizer,
//! checkpointing and finite-difference checks can treat the model as a
//! plain vector.

pub mod augment;
pub mod layers;

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{CoreError, Result};
use crate::seeding;
use crate::synthdata::SceneImage;
use layers::Chw;

/// Per-pixel class posterior, pixel-major `[y][x][class]`; each pixel's
/// vector sums to one.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbMap {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub data: Vec<f64>,
}

impl ProbMap {
    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let base = (y * self.width + x) * self.num_classes;
        &self.data[base..base + self.num_classes]
    }

    /// Highest-probability class with ties broken toward the lowest index,
    /// plus its probability.
    pub fn argmax_pixel(&self, y: usize, x: usize) -> (u8, f64) {
        let probs = self.pixel(y, x);
        let mut best = 0usize;
        let mut best_p = probs[0];
        for (c, &p) in probs.iter().enumerate().skip(1) {
            if p > best_p {
                best_p = p;
                best = c;
            }
        }
        (best as u8, best_p)
    }
}

/// Per-pixel class logits, pixel-major `[y][x][class]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitMap {
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub data: Vec<f64>,
}

/// Per-pixel unit-norm representation, pixel-major `[y][x][dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingMap {
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl EmbeddingMap {
    #[inline]
    pub fn pixel(&self, p: usize) -> &[f64] {
        &self.data[p * self.dim..(p + 1) * self.dim]
    }
}

/// Shape and flat offset of one named parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

/// All trainable weights in one flat vector plus the layout that names them.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub channels: Vec<usize>,
    pub convs_per_block: usize,
    pub embed_dim: usize,
    pub num_classes: usize,
    pub dropout: f64,
    pub theta: Vec<f64>,
    layout: Vec<TensorSpec>,
}

fn build_layout(cfg: &ModelConfig, num_classes: usize) -> (Vec<TensorSpec>, usize) {
    let mut layout = Vec::new();
    let mut offset = 0usize;
    let mut push = |name: String, shape: Vec<usize>, offset: &mut usize| {
        let len: usize = shape.iter().product();
        layout.push(TensorSpec {
            name,
            shape,
            offset: *offset,
            len,
        });
        *offset += len;
    };
    let mut in_ch = 3usize;
    for (b, &out_ch) in cfg.channels.iter().enumerate() {
        for k in 0..cfg.convs_per_block {
            push(
                format!("block{b}.conv{k}.weight"),
                vec![out_ch, in_ch, 3, 3],
                &mut offset,
            );
            push(format!("block{b}.conv{k}.bias"), vec![out_ch], &mut offset);
            in_ch = out_ch;
        }
    }
    let feat = *cfg.channels.last().expect("non-empty channels");
    push(
        String::from("head_logits.weight"),
        vec![num_classes, feat],
        &mut offset,
    );
    push(String::from("head_logits.bias"), vec![num_classes], &mut offset);
    push(
        String::from("head_embed.weight"),
        vec![cfg.embed_dim, feat],
        &mut offset,
    );
    push(String::from("head_embed.bias"), vec![cfg.embed_dim], &mut offset);
    (layout, offset)
}

impl ModelParams {
    /// Zero-initialized parameters with the layout implied by the config.
    pub fn zeroed(cfg: &ModelConfig, num_classes: usize) -> Result<Self> {
        if cfg.channels.is_empty() || cfg.convs_per_block == 0 {
            return Err(CoreError::config("model needs at least one conv block"));
        }
        if cfg.embed_dim < 2 {
            return Err(CoreError::config("embed_dim must be >= 2"));
        }
        if num_classes < 2 {
            return Err(CoreError::config("num_classes must be >= 2"));
        }
        if !(cfg.dropout >= 0.0 && cfg.dropout < 1.0) {
            return Err(CoreError::config("dropout must be in [0, 1)"));
        }
        let (layout, total) = build_layout(cfg, num_classes);
        Ok(ModelParams {
            channels: cfg.channels.clone(),
            convs_per_block: cfg.convs_per_block,
            embed_dim: cfg.embed_dim,
            num_classes,
            dropout: cfg.dropout,
            theta: vec![0.0; total],
            layout,
        })
    }

    pub fn tensors(&self) -> &[TensorSpec] {
        &self.layout
    }

    pub fn tensor_data(&self, spec: &TensorSpec) -> &[f64] {
        &self.theta[spec.offset..spec.offset + spec.len]
    }

    pub fn tensor_data_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let spec = self.layout.iter().find(|t| t.name == name)?.clone();
        Some(&mut self.theta[spec.offset..spec.offset + spec.len])
    }

    fn spec(&self, name: &str) -> &TensorSpec {
        self.layout
            .iter()
            .find(|t| t.name == name)
            .expect("tensor name in layout")
    }

    fn slice(&self, name: &str) -> &[f64] {
        let spec = self.spec(name);
        &self.theta[spec.offset..spec.offset + spec.len]
    }

    /// Total spatial reduction of the encoder.
    pub fn reduction(&self) -> usize {
        1usize << self.channels.len()
    }
}

/// Deterministic Glorot-uniform initialization. The logits head is scaled
/// down so a fresh model starts near the uniform prediction; the embedding
/// head gets a random bias so raw embeddings start with a healthy norm
/// ahead of the unit normalization.
pub fn init_model(seed: u64, cfg: &ModelConfig, num_classes: usize) -> Result<ModelParams> {
    let mut params = ModelParams::zeroed(cfg, num_classes)?;
    let mut rng = seeding::stream_from(seed);
    let specs: Vec<TensorSpec> = params.layout.clone();
    for spec in &specs {
        if spec.name.ends_with(".bias") {
            if spec.name == "head_embed.bias" {
                let data = &mut params.theta[spec.offset..spec.offset + spec.len];
                for v in data.iter_mut() {
                    *v = rng.random_range(-0.3..0.3);
                }
            }
            continue;
        }
        let (fan_in, fan_out) = match spec.shape.len() {
            4 => (spec.shape[1] * 9, spec.shape[0] * 9),
            2 => (spec.shape[1], spec.shape[0]),
            _ => (spec.len, spec.len),
        };
        let mut bound = libm::sqrt(6.0 / (fan_in + fan_out) as f64);
        if spec.name == "head_logits.weight" {
            bound *= 0.5;
        }
        let data = &mut params.theta[spec.offset..spec.offset + spec.len];
        for v in data.iter_mut() {
            *v = rng.random_range(-bound..bound);
        }
    }
    Ok(params)
}

struct ConvTrace {
    pre_act: Chw,
    /// Post-activation, post-dropout output; the next layer's input.
    out: Chw,
    mask: Option<Vec<f64>>,
}

struct BlockTrace {
    convs: Vec<ConvTrace>,
    pooled: Chw,
}

/// Every intermediate needed by the backward pass.
pub struct ForwardTrace {
    input: Chw,
    blocks: Vec<BlockTrace>,
    emb_up_unit_hwc: Vec<f64>,
    emb_norms: Vec<f64>,
}

/// Output of one forward pass, keeping the trace for backprop.
pub struct ForwardPass {
    pub logits: LogitMap,
    pub embeddings: EmbeddingMap,
    trace: ForwardTrace,
}

fn image_to_chw(image: &SceneImage) -> Chw {
    let (h, w) = (image.height, image.width);
    let mut out = Chw::zeros(3, h, w);
    for ch in 0..3 {
        let plane = out.plane_mut(ch);
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = image.pixels[(y * w + x) * 3 + ch];
            }
        }
    }
    out
}

fn chw_to_hwc(t: &Chw) -> Vec<f64> {
    let (c, h, w) = (t.c, t.h, t.w);
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let plane = t.plane(ch);
        for p in 0..h * w {
            out[p * c + ch] = plane[p];
        }
    }
    out
}

fn hwc_to_chw(data: &[f64], c: usize, h: usize, w: usize) -> Chw {
    let mut out = Chw::zeros(c, h, w);
    for ch in 0..c {
        let plane = out.plane_mut(ch);
        for p in 0..h * w {
            plane[p] = data[p * c + ch];
        }
    }
    out
}

/// Run the network on one image.
///
/// `noise = true` applies inverted dropout after every activation and
/// requires an RNG; `noise = false` is fully deterministic. A dropout rate
/// of zero consumes no randomness, so it is exactly the noise-free path.
pub fn forward(
    params: &ModelParams,
    image: &SceneImage,
    noise: bool,
    mut rng: Option<&mut ChaCha8Rng>,
) -> Result<ForwardPass> {
    let (h, w) = (image.height, image.width);
    let reduction = params.reduction();
    if h == 0 || w == 0 || h % reduction != 0 || w % reduction != 0 {
        return Err(CoreError::config(format!(
            "input {h}x{w} not divisible by encoder reduction {reduction}"
        )));
    }
    if image.pixels.len() != h * w * 3 {
        return Err(CoreError::logic("image buffer does not match dimensions"));
    }
    let p_drop = params.dropout;
    if noise && p_drop > 0.0 && rng.is_none() {
        return Err(CoreError::logic("noise=true requires an RNG"));
    }

    let input = image_to_chw(image);
    let mut blocks = Vec::with_capacity(params.channels.len());
    let mut current = input.clone();
    for (b, &out_ch) in params.channels.iter().enumerate() {
        let mut convs = Vec::with_capacity(params.convs_per_block);
        for k in 0..params.convs_per_block {
            let weight = params.slice(&format!("block{b}.conv{k}.weight"));
            let bias = params.slice(&format!("block{b}.conv{k}.bias"));
            let pre_act = layers::conv3x3_forward(&current, weight, bias, out_ch);
            let mut out = layers::silu_map(&pre_act);
            let mask = if noise && p_drop > 0.0 {
                let rng = rng.as_deref_mut().expect("rng checked above");
                let scale = 1.0 / (1.0 - p_drop);
                let mask: Vec<f64> = (0..out.data.len())
                    .map(|_| if rng.random::<f64>() < p_drop { 0.0 } else { scale })
                    .collect();
                for (v, m) in out.data.iter_mut().zip(mask.iter()) {
                    *v *= m;
                }
                Some(mask)
            } else {
                None
            };
            current = out.clone();
            convs.push(ConvTrace { pre_act, out, mask });
        }
        let pooled = layers::avgpool2_forward(&current);
        current = pooled.clone();
        blocks.push(BlockTrace { convs, pooled });
    }

    let feat = &blocks.last().expect("at least one block").pooled;
    let logits_coarse = layers::conv1x1_forward(
        feat,
        params.slice("head_logits.weight"),
        params.slice("head_logits.bias"),
        params.num_classes,
    );
    let emb_coarse = layers::conv1x1_forward(
        feat,
        params.slice("head_embed.weight"),
        params.slice("head_embed.bias"),
        params.embed_dim,
    );

    let logits_up = layers::bilinear_upsample(&logits_coarse, h, w);
    let emb_up = layers::bilinear_upsample(&emb_coarse, h, w);

    let logits_hwc = chw_to_hwc(&logits_up);
    let mut emb_hwc = chw_to_hwc(&emb_up);
    let emb_norms = layers::l2_normalize_rows(&mut emb_hwc, params.embed_dim);

    if logits_hwc.iter().any(|v| !v.is_finite()) || emb_hwc.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::numerical(
            "non-finite activations in forward pass",
        ));
    }

    let logits = LogitMap {
        height: h,
        width: w,
        num_classes: params.num_classes,
        data: logits_hwc,
    };
    let embeddings = EmbeddingMap {
        height: h,
        width: w,
        dim: params.embed_dim,
        data: emb_hwc.clone(),
    };
    Ok(ForwardPass {
        logits,
        embeddings,
        trace: ForwardTrace {
            input,
            blocks,
            emb_up_unit_hwc: emb_hwc,
            emb_norms,
        },
    })
}

/// Backpropagate loss gradients (pixel-major, matching the forward
/// outputs) into a flat parameter-gradient vector aligned with `theta`.
pub fn backward(
    params: &ModelParams,
    pass: &ForwardPass,
    grad_logits_hwc: &[f64],
    grad_emb_hwc: &[f64],
) -> Vec<f64> {
    let (h, w) = (pass.logits.height, pass.logits.width);
    let c = params.num_classes;
    let d = params.embed_dim;
    let reduction = params.reduction();
    let (ch, cw) = (h / reduction, w / reduction);
    let trace = &pass.trace;
    let mut grads = vec![0.0; params.theta.len()];

    // Embedding head: unit-norm backward, then upsample transpose.
    let grad_emb_raw = layers::l2_normalize_backward(
        &trace.emb_up_unit_hwc,
        &trace.emb_norms,
        grad_emb_hwc,
        d,
    );
    let grad_emb_up = hwc_to_chw(&grad_emb_raw, d, h, w);
    let grad_emb_coarse = layers::bilinear_upsample_backward(&grad_emb_up, ch, cw);

    let grad_logits_up = hwc_to_chw(grad_logits_hwc, c, h, w);
    let grad_logits_coarse = layers::bilinear_upsample_backward(&grad_logits_up, ch, cw);

    let feat = &trace.blocks.last().expect("blocks").pooled;
    let (gf1, gw_l, gb_l) = layers::conv1x1_backward(
        feat,
        params.slice("head_logits.weight"),
        c,
        &grad_logits_coarse,
    );
    let (gf2, gw_e, gb_e) = layers::conv1x1_backward(
        feat,
        params.slice("head_embed.weight"),
        d,
        &grad_emb_coarse,
    );
    write_grad(params, &mut grads, "head_logits.weight", &gw_l);
    write_grad(params, &mut grads, "head_logits.bias", &gb_l);
    write_grad(params, &mut grads, "head_embed.weight", &gw_e);
    write_grad(params, &mut grads, "head_embed.bias", &gb_e);

    let mut grad_feat = gf1;
    for (a, b) in grad_feat.data.iter_mut().zip(gf2.data.iter()) {
        *a += b;
    }

    // Walk the encoder backwards.
    for b in (0..trace.blocks.len()).rev() {
        let block = &trace.blocks[b];
        let last_conv_out = &block.convs.last().expect("convs").out;
        let mut grad = layers::avgpool2_backward(&grad_feat, last_conv_out.h, last_conv_out.w);
        for k in (0..block.convs.len()).rev() {
            let conv = &block.convs[k];
            if let Some(mask) = &conv.mask {
                for (g, m) in grad.data.iter_mut().zip(mask.iter()) {
                    *g *= m;
                }
            }
            for (g, z) in grad.data.iter_mut().zip(conv.pre_act.data.iter()) {
                *g *= layers::silu_prime(*z);
            }
            let conv_input: &Chw = if k > 0 {
                &block.convs[k - 1].out
            } else if b > 0 {
                &trace.blocks[b - 1].pooled
            } else {
                &trace.input
            };
            let weight = params.slice(&format!("block{b}.conv{k}.weight"));
            let oc = conv.pre_act.c;
            let (gin, gw, gb) = layers::conv3x3_backward(conv_input, weight, oc, &grad);
            write_grad(params, &mut grads, &format!("block{b}.conv{k}.weight"), &gw);
            write_grad(params, &mut grads, &format!("block{b}.conv{k}.bias"), &gb);
            grad = gin;
        }
        grad_feat = grad;
    }
    grads
}

fn write_grad(params: &ModelParams, grads: &mut [f64], name: &str, value: &[f64]) {
    let spec = params.spec(name);
    let dst = &mut grads[spec.offset..spec.offset + spec.len];
    for (d, v) in dst.iter_mut().zip(value.iter()) {
        *d += v;
    }
}

/// Numerically stable softmax over the class axis of a logit map.
pub fn softmax_probs(logits: &LogitMap) -> ProbMap {
    let c = logits.num_classes;
    let mut data = vec![0.0; logits.data.len()];
    for p in 0..logits.height * logits.width {
        let row = &logits.data[p * c..(p + 1) * c];
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let out = &mut data[p * c..(p + 1) * c];
        let mut sum = 0.0;
        for (o, &v) in out.iter_mut().zip(row.iter()) {
            let e = libm::exp(v - max);
            *o = e;
            sum += e;
        }
        for o in out.iter_mut() {
            *o /= sum;
        }
    }
    ProbMap {
        height: logits.height,
        width: logits.width,
        num_classes: c,
        data,
    }
}
