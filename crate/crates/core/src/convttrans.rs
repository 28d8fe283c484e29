//! Convolutional temporal transformer.
//!
//! Attention runs across time: every frame's feature map is projected by
//! convolutions into per-head query/key/value maps, which are flattened so
//! one frame yields one score against every other frame. Sequences are
//! carried as `[B, T, C, h, w]` (a batch of clips, `T` frames each).

use std::sync::Arc;

use bivad_tensor::ops::{bmm, causal_mask, conv2d, masked_softmax};
use bivad_tensor::{Param, Real, Tensor, Var};
use rand::Rng;

use crate::config::ModelConfig;
use crate::error::{invalid, Result};
use crate::nn::{ChannelNorm, Conv, Module};

/// Scaled dot product of two flattened maps, `<q, k> / sqrt(numel)`.
pub fn tsa_score<T: Real>(q: &Tensor<T>, k: &Tensor<T>) -> Result<f64> {
    let dot = q.dot(k)?.to_f64().unwrap_or(f64::NAN);
    Ok(dot / (q.numel() as f64).sqrt())
}

/// `Σ_j weights[j] · values[j]`.
pub fn attend<T: Real>(weights: &[f64], values: &[Tensor<T>]) -> Result<Tensor<T>> {
    if weights.len() != values.len() || values.is_empty() {
        return Err(invalid!("{} weights for {} values", weights.len(), values.len()));
    }
    let mut out = Tensor::zeros(values[0].shape());
    for (&w, v) in weights.iter().zip(values) {
        out.add_assign(&v.scale(T::lit(w)))?;
    }
    Ok(out)
}

fn seq_dims(x: &Var<impl Real>) -> Result<[usize; 5]> {
    match *x.shape() {
        [b, t, c, h, w] => Ok([b, t, c, h, w]),
        ref s => Err(invalid!("expected a [B,T,C,h,w] sequence, got {s:?}")),
    }
}

fn flat_frames<T: Real>(x: &Var<T>) -> Result<Var<T>> {
    let [b, t, c, h, w] = seq_dims(x)?;
    Ok(x.reshape(&[b * t, c, h, w])?)
}

/// Runs several same-input convolutions as one by stacking their kernels.
fn stacked_conv<T: Real>(convs: &[&Conv<T>], x: &Var<T>) -> Result<Var<T>> {
    let weights: Vec<Var<T>> = convs.iter().map(|c| Var::param(&c.weight)).collect();
    let biases: Vec<Var<T>> = convs.iter().map(|c| Var::param(&c.bias)).collect();
    let w = Var::concat(&weights, 0)?;
    let b = Var::concat(&biases, 0)?;
    Ok(conv2d(x, &w, Some(&b), 1)?)
}

/// `[B*T, heads*dh, h, w]` to per-head flattened rows `[B*heads, T, dh*h*w]`.
fn split_heads<T: Real>(p: &Var<T>, b: usize, t: usize, heads: usize) -> Result<Var<T>> {
    let per_head = p.value().numel() / (b * t * heads);
    Ok(p.reshape(&[b, t, heads, per_head])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b * heads, t, per_head])?)
}

/// Inverse of [`split_heads`], restoring `[B, T, heads*dh, h, w]`.
fn merge_heads<T: Real>(o: &Var<T>, b: usize, heads: usize, map: [usize; 3]) -> Result<Var<T>> {
    let t = o.shape()[1];
    let [dh, h, w] = map;
    Ok(o.reshape(&[b, heads, t, dh * h * w])?
        .permute(&[0, 2, 1, 3])?
        .reshape(&[b, t, heads * dh, h, w])?)
}

/// Softmax-normalized scores `[B*heads, T, S]`.
fn attention_weights<T: Real>(q: &Var<T>, k: &Var<T>, mask: Option<Arc<Vec<bool>>>) -> Result<Var<T>> {
    let d = q.shape()[2] as f64;
    let scores = bmm(q, k, true)?.scale(1.0 / d.sqrt());
    Ok(masked_softmax(&scores, mask)?)
}

/// Query/key/value projections of one head.
#[derive(Debug, Clone)]
pub struct HeadProjection<T> {
    pub wq: Conv<T>,
    pub wk: Conv<T>,
    pub wv: Conv<T>,
}

impl<T: Real> HeadProjection<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, channels: usize, d_head: usize, k: usize, rng: &mut R) -> Self {
        Self {
            wq: Conv::new(&format!("{name}.wq"), channels, d_head, k, 1, rng),
            wk: Conv::new(&format!("{name}.wk"), channels, d_head, k, 1, rng),
            wv: Conv::new(&format!("{name}.wv"), channels, d_head, k, 1, rng),
        }
    }
}

impl<T: Real> Module<T> for HeadProjection<T> {
    fn params(&self) -> Vec<Param<T>> {
        [&self.wq, &self.wk, &self.wv].iter().flat_map(|c| c.params()).collect()
    }
}

/// Per-head query, key and value rows, each `[B*heads, T, D]`.
#[derive(Debug, Clone)]
pub struct Projected<T> {
    pub q: Var<T>,
    pub k: Var<T>,
    pub v: Var<T>,
    pub batch: usize,
    pub heads: usize,
    /// `(d_head, h, w)` of one head's map.
    pub map: [usize; 3],
}

impl<T: Real> Projected<T> {
    /// Frames per clip.
    pub fn len(&self) -> usize {
        self.q.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// One head's map for one frame of one clip; `which` is 0 for the query,
    /// 1 for the key, 2 for the value.
    pub fn head_map(&self, which: usize, clip: usize, head: usize, frame: usize) -> Result<Tensor<T>> {
        let src = match which {
            0 => &self.q,
            1 => &self.k,
            2 => &self.v,
            _ => return Err(invalid!("projection selector {which} not in 0..3")),
        };
        if clip >= self.batch || head >= self.heads || frame >= self.len() {
            return Err(invalid!("head_map index ({clip}, {head}, {frame}) out of range"));
        }
        let row = src.value().narrow(0, clip * self.heads + head, 1)?.narrow(1, frame, 1)?;
        Ok(row.reshape(&self.map)?)
    }
}

/// Keys and values queried by the decoders; the queries are kept for
/// inspection only.
pub type ContextKnowledge<T> = Projected<T>;

/// Multi-head self-attention over the frames of each clip.
#[derive(Debug, Clone)]
pub struct MultiHeadTsa<T> {
    pub heads: Vec<HeadProjection<T>>,
}

impl<T: Real> MultiHeadTsa<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let heads = (0..cfg.heads)
            .map(|i| HeadProjection::new(&format!("{name}.head{i}"), cfg.ch_feat, cfg.d_head(), cfg.attn_kernel, rng))
            .collect();
        Self { heads }
    }

    pub fn project(&self, x: &Var<T>) -> Result<Projected<T>> {
        let [b, t, _, h, w] = seq_dims(x)?;
        let c = self.heads.len();
        let dh = self.heads[0].wq.weight.shape()[0];
        let mut convs = Vec::with_capacity(3 * c);
        for sel in 0..3 {
            convs.extend(self.heads.iter().map(|hp| [&hp.wq, &hp.wk, &hp.wv][sel]));
        }
        let all = stacked_conv(&convs, &flat_frames(x)?)?;
        let parts = all.chunk(1, 3)?;
        Ok(Projected {
            q: split_heads(&parts[0], b, t, c)?,
            k: split_heads(&parts[1], b, t, c)?,
            v: split_heads(&parts[2], b, t, c)?,
            batch: b,
            heads: c,
            map: [dh, h, w],
        })
    }

    /// Attention weights `[B*heads, T, T]`.
    pub fn weights(&self, x: &Var<T>, mask: Option<Arc<Vec<bool>>>) -> Result<Var<T>> {
        let p = self.project(x)?;
        attention_weights(&p.q, &p.k, mask)
    }

    /// Attention outputs of all heads concatenated along channels.
    pub fn forward(&self, x: &Var<T>, mask: Option<Arc<Vec<bool>>>) -> Result<Var<T>> {
        let p = self.project(x)?;
        let a = attention_weights(&p.q, &p.k, mask)?;
        merge_heads(&bmm(&a, &p.v, false)?, p.batch, p.heads, p.map)
    }
}

impl<T: Real> Module<T> for MultiHeadTsa<T> {
    fn params(&self) -> Vec<Param<T>> {
        self.heads.iter().flat_map(|h| h.params()).collect()
    }
}

/// Attention from decoder-side queries onto the encoder's keys and values.
#[derive(Debug, Clone)]
pub struct QueryTsa<T> {
    pub wq: Vec<Conv<T>>,
}

impl<T: Real> QueryTsa<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let wq = (0..cfg.heads)
            .map(|i| Conv::new(&format!("{name}.head{i}.wq"), cfg.ch_feat, cfg.d_head(), cfg.attn_kernel, 1, rng))
            .collect();
        Self { wq }
    }

    /// Attention weights `[B*heads, T, S]` of the targets over the context.
    pub fn weights(&self, targets: &Var<T>, ctx: &ContextKnowledge<T>) -> Result<Var<T>> {
        let [b, t, ..] = seq_dims(targets)?;
        if ctx.is_empty() {
            return Err(invalid!("empty context knowledge"));
        }
        if b != ctx.batch || self.wq.len() != ctx.heads {
            return Err(invalid!(
                "targets for {b} clips x {} heads, context has {} x {}",
                self.wq.len(),
                ctx.batch,
                ctx.heads
            ));
        }
        let convs: Vec<&Conv<T>> = self.wq.iter().collect();
        let q = split_heads(&stacked_conv(&convs, &flat_frames(targets)?)?, b, t, ctx.heads)?;
        attention_weights(&q, &ctx.k, None)
    }

    pub fn context_query_tsa(&self, targets: &Var<T>, ctx: &ContextKnowledge<T>) -> Result<Var<T>> {
        let a = self.weights(targets, ctx)?;
        merge_heads(&bmm(&a, &ctx.v, false)?, ctx.batch, ctx.heads, ctx.map)
    }
}

impl<T: Real> Module<T> for QueryTsa<T> {
    fn params(&self) -> Vec<Param<T>> {
        self.wq.iter().flat_map(|c| c.params()).collect()
    }
}

/// Two convolutions with a leaky ReLU between them.
#[derive(Debug, Clone)]
pub struct ConvFfn<T> {
    pub expand: Conv<T>,
    pub project: Conv<T>,
    pub slope: f64,
}

impl<T: Real> ConvFfn<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let k = cfg.attn_kernel;
        Self {
            expand: Conv::new(&format!("{name}.expand"), cfg.ch_feat, cfg.ffn_hidden, k, 1, rng),
            project: Conv::new(&format!("{name}.project"), cfg.ffn_hidden, cfg.ch_feat, k, 1, rng),
            slope: cfg.leaky_slope,
        }
    }

    /// Accepts `[C,h,w]`, `[N,C,h,w]`, or a `[B,T,C,h,w]` sequence.
    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        let shape = x.shape().to_vec();
        let flat = if shape.len() == 5 { flat_frames(x)? } else { x.clone() };
        let y = self.project.forward(&self.expand.forward(&flat)?.leaky_relu(self.slope))?;
        Ok(y.reshape(&shape)?)
    }
}

impl<T: Real> Module<T> for ConvFfn<T> {
    fn params(&self) -> Vec<Param<T>> {
        let mut p = self.expand.params();
        p.extend(self.project.params());
        p
    }
}

/// Normalizes every frame of a sequence.
fn norm_seq<T: Real>(norm: &ChannelNorm<T>, x: &Var<T>) -> Result<Var<T>> {
    let shape = x.shape().to_vec();
    Ok(norm.forward(&flat_frames(x)?)?.reshape(&shape)?)
}

/// `norm(x + sublayer)`.
fn residual_norm<T: Real>(norm: &ChannelNorm<T>, x: &Var<T>, sub: &Var<T>) -> Result<Var<T>> {
    norm_seq(norm, &x.add(sub)?)
}

#[derive(Debug, Clone)]
pub struct EncoderBlock<T> {
    pub tsa: MultiHeadTsa<T>,
    pub norm1: ChannelNorm<T>,
    pub ffn: ConvFfn<T>,
    pub norm2: ChannelNorm<T>,
}

impl<T: Real> EncoderBlock<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        Self {
            tsa: MultiHeadTsa::new(&format!("{name}.tsa"), cfg, rng),
            norm1: ChannelNorm::new(&format!("{name}.norm1"), cfg.ch_feat, cfg.norm_eps),
            ffn: ConvFfn::new(&format!("{name}.ffn"), cfg, rng),
            norm2: ChannelNorm::new(&format!("{name}.norm2"), cfg.ch_feat, cfg.norm_eps),
        }
    }

    pub fn forward(&self, x: &Var<T>) -> Result<Var<T>> {
        let x1 = residual_norm(&self.norm1, x, &self.tsa.forward(x, None)?)?;
        residual_norm(&self.norm2, &x1, &self.ffn.forward(&x1)?)
    }
}

impl<T: Real> Module<T> for EncoderBlock<T> {
    fn params(&self) -> Vec<Param<T>> {
        let mut p = self.tsa.params();
        p.extend(self.norm1.params());
        p.extend(self.ffn.params());
        p.extend(self.norm2.params());
        p
    }
}

#[derive(Debug, Clone)]
pub struct DecoderBlock<T> {
    pub self_tsa: MultiHeadTsa<T>,
    pub norm1: ChannelNorm<T>,
    pub cross_tsa: QueryTsa<T>,
    pub norm2: ChannelNorm<T>,
    pub ffn: ConvFfn<T>,
    pub norm3: ChannelNorm<T>,
}

impl<T: Real> DecoderBlock<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        Self {
            self_tsa: MultiHeadTsa::new(&format!("{name}.self_tsa"), cfg, rng),
            norm1: ChannelNorm::new(&format!("{name}.norm1"), cfg.ch_feat, cfg.norm_eps),
            cross_tsa: QueryTsa::new(&format!("{name}.cross_tsa"), cfg, rng),
            norm2: ChannelNorm::new(&format!("{name}.norm2"), cfg.ch_feat, cfg.norm_eps),
            ffn: ConvFfn::new(&format!("{name}.ffn"), cfg, rng),
            norm3: ChannelNorm::new(&format!("{name}.norm3"), cfg.ch_feat, cfg.norm_eps),
        }
    }

    pub fn forward(&self, x: &Var<T>, ctx: &ContextKnowledge<T>, mask: Arc<Vec<bool>>) -> Result<Var<T>> {
        let x1 = residual_norm(&self.norm1, x, &self.self_tsa.forward(x, Some(mask))?)?;
        let x2 = residual_norm(&self.norm2, &x1, &self.cross_tsa.context_query_tsa(&x1, ctx)?)?;
        residual_norm(&self.norm3, &x2, &self.ffn.forward(&x2)?)
    }
}

impl<T: Real> Module<T> for DecoderBlock<T> {
    fn params(&self) -> Vec<Param<T>> {
        let mut p = self.self_tsa.params();
        p.extend(self.norm1.params());
        p.extend(self.cross_tsa.params());
        p.extend(self.norm2.params());
        p.extend(self.ffn.params());
        p.extend(self.norm3.params());
        p
    }
}

/// Sinusoidal code per (position, channel), broadcast over the map.
pub fn positional_encoding<T: Real>(x: &Var<T>) -> Result<Var<T>> {
    let [b, t, c, h, w] = seq_dims(x)?;
    let mut data = Vec::with_capacity(b * t * c * h * w);
    for _ in 0..b {
        for pos in 0..t {
            for ch in 0..c {
                let freq = 10000f64.powf(-((ch / 2 * 2) as f64) / c as f64);
                let angle = pos as f64 * freq;
                let v = T::lit(if ch % 2 == 0 { angle.sin() } else { angle.cos() });
                data.extend(std::iter::repeat(v).take(h * w));
            }
        }
    }
    x.add(&Var::constant(Tensor::new(x.shape(), data)?)).map_err(Into::into)
}

#[derive(Debug, Clone)]
pub struct TransformerEncoder<T> {
    pub blocks: Vec<EncoderBlock<T>>,
    pub positional: bool,
}

impl<T: Real> TransformerEncoder<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let blocks = (0..cfg.blocks).map(|i| EncoderBlock::new(&format!("{name}.block{i}"), cfg, rng)).collect();
        Self { blocks, positional: cfg.positional_encoding }
    }

    /// Runs every block over the context frames and returns the final
    /// block's head projections of the final output.
    pub fn encoder_forward(&self, context: &Var<T>) -> Result<ContextKnowledge<T>> {
        seq_dims(context)?;
        let mut x = if self.positional { positional_encoding(context)? } else { context.clone() };
        for block in &self.blocks {
            x = block.forward(&x)?;
        }
        let last = self.blocks.last().ok_or_else(|| invalid!("encoder has no blocks"))?;
        last.tsa.project(&x)
    }
}

impl<T: Real> Module<T> for TransformerEncoder<T> {
    fn params(&self) -> Vec<Param<T>> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct TransformerDecoder<T> {
    pub blocks: Vec<DecoderBlock<T>>,
    pub positional: bool,
}

impl<T: Real> TransformerDecoder<T> {
    pub fn new<R: Rng + ?Sized>(name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let blocks = (0..cfg.blocks).map(|i| DecoderBlock::new(&format!("{name}.block{i}"), cfg, rng)).collect();
        Self { blocks, positional: cfg.positional_encoding }
    }

    /// Teacher-forced decoding of a whole target sequence in one masked
    /// pass: output `p` sees target positions `0..=p` and the context.
    pub fn decoder_step_sequence(&self, targets: &Var<T>, ctx: &ContextKnowledge<T>) -> Result<Var<T>> {
        let [_, t, ..] = seq_dims(targets)?;
        let mask = causal_mask(t);
        let mut x = if self.positional { positional_encoding(targets)? } else { targets.clone() };
        for block in &self.blocks {
            x = block.forward(&x, ctx, Arc::clone(&mask))?;
        }
        Ok(x)
    }
}

impl<T: Real> Module<T> for TransformerDecoder<T> {
    fn params(&self) -> Vec<Param<T>> {
        self.blocks.iter().flat_map(|b| b.params()).collect()
    }
}
