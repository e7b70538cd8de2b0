//! Compact post-norm encoder/decoder transformer over variable-length token sets.
//!
//! Parameter structs are generic over their leaf type: `T = Tensor` holds the
//! weights, `T = Var` is the same layout bound to a [`Graph`].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::{AbstractSet, LAYER_NORM_EPS};
use crate::tensor::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ffn: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    /// Number of decoder queries, i.e. the fixed number of predictions.
    pub n_queries: usize,
}

impl TransformerConfig {
    /// Small configuration used by the training harness.
    pub fn desk() -> Self {
        Self {
            d_model: 32,
            n_heads: 2,
            d_ffn: 64,
            n_encoder_layers: 2,
            n_decoder_layers: 2,
            n_queries: 5,
        }
    }

    /// DETR-R50 transformer: 6 + 6 layers, 256 channels, 100 queries.
    pub fn detr_r50() -> Self {
        Self {
            d_model: 256,
            n_heads: 8,
            d_ffn: 2048,
            n_encoder_layers: 6,
            n_decoder_layers: 6,
            n_queries: 100,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [
            self.d_model,
            self.n_heads,
            self.d_ffn,
            self.n_encoder_layers,
            self.n_decoder_layers,
            self.n_queries,
        ];
        if counts.contains(&0) {
            return Err(Error::contract(format!("transformer sizes must be positive: {self:?}")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::contract(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

impl Default for TransformerConfig {
    fn default() -> Self {
        Self::desk()
    }
}

#[derive(Debug, Clone, PartialEq)]
/// The key projection carries no bias: a shared key offset moves every logit
/// of a query by the same amount and cancels in the softmax.
pub struct Attention<T> {
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Norm<T> {
    pub gain: T,
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer<T> {
    pub attn: Attention<T>,
    pub norm1: Norm<T>,
    pub ffn: FeedForward<T>,
    pub norm2: Norm<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer<T> {
    pub self_attn: Attention<T>,
    pub norm1: Norm<T>,
    pub cross_attn: Attention<T>,
    pub norm2: Norm<T>,
    pub ffn: FeedForward<T>,
    pub norm3: Norm<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transformer<T> {
    pub config: TransformerConfig,
    pub encoder: Vec<EncoderLayer<T>>,
    pub decoder: Vec<DecoderLayer<T>>,
    /// `D x C` learned query embeddings.
    pub queries: T,
}

pub type TransformerParams = Transformer<Tensor>;
pub type TransformerNet = Transformer<Var>;

impl<T> Attention<T> {
    fn leaves(&self) -> [&T; 7] {
        [&self.wq, &self.bq, &self.wk, &self.wv, &self.bv, &self.wo, &self.bo]
    }
    fn leaves_mut(&mut self) -> [&mut T; 7] {
        [
            &mut self.wq,
            &mut self.bq,
            &mut self.wk,
            &mut self.wv,
            &mut self.bv,
            &mut self.wo,
            &mut self.bo,
        ]
    }
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Attention<U> {
        Attention {
            wq: f(&self.wq),
            bq: f(&self.bq),
            wk: f(&self.wk),
            wv: f(&self.wv),
            bv: f(&self.bv),
            wo: f(&self.wo),
            bo: f(&self.bo),
        }
    }
}

impl<T> Norm<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Norm<U> {
        Norm {
            gain: f(&self.gain),
            bias: f(&self.bias),
        }
    }
}

impl<T> FeedForward<T> {
    fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> FeedForward<U> {
        FeedForward {
            w1: f(&self.w1),
            b1: f(&self.b1),
            w2: f(&self.w2),
            b2: f(&self.b2),
        }
    }
}

impl<T> Transformer<T> {
    /// Every leaf in a fixed order shared by [`Transformer::leaves_mut`] and `bind`.
    pub fn leaves(&self) -> Vec<&T> {
        let mut out = Vec::new();
        for l in &self.encoder {
            out.extend(l.attn.leaves());
            out.extend([&l.norm1.gain, &l.norm1.bias]);
            out.extend([&l.ffn.w1, &l.ffn.b1, &l.ffn.w2, &l.ffn.b2]);
            out.extend([&l.norm2.gain, &l.norm2.bias]);
        }
        for l in &self.decoder {
            out.extend(l.self_attn.leaves());
            out.extend([&l.norm1.gain, &l.norm1.bias]);
            out.extend(l.cross_attn.leaves());
            out.extend([&l.norm2.gain, &l.norm2.bias]);
            out.extend([&l.ffn.w1, &l.ffn.b1, &l.ffn.w2, &l.ffn.b2]);
            out.extend([&l.norm3.gain, &l.norm3.bias]);
        }
        out.push(&self.queries);
        out
    }

    pub fn leaves_mut(&mut self) -> Vec<&mut T> {
        let mut out = Vec::new();
        for l in &mut self.encoder {
            out.extend(l.attn.leaves_mut());
            out.extend([&mut l.norm1.gain, &mut l.norm1.bias]);
            out.extend([&mut l.ffn.w1, &mut l.ffn.b1, &mut l.ffn.w2, &mut l.ffn.b2]);
            out.extend([&mut l.norm2.gain, &mut l.norm2.bias]);
        }
        for l in &mut self.decoder {
            out.extend(l.self_attn.leaves_mut());
            out.extend([&mut l.norm1.gain, &mut l.norm1.bias]);
            out.extend(l.cross_attn.leaves_mut());
            out.extend([&mut l.norm2.gain, &mut l.norm2.bias]);
            out.extend([&mut l.ffn.w1, &mut l.ffn.b1, &mut l.ffn.w2, &mut l.ffn.b2]);
            out.extend([&mut l.norm3.gain, &mut l.norm3.bias]);
        }
        out.push(&mut self.queries);
        out
    }

    pub fn map<U>(&self, mut f: impl FnMut(&T) -> U) -> Transformer<U> {
        let encoder = self
            .encoder
            .iter()
            .map(|l| EncoderLayer {
                attn: l.attn.map(&mut f),
                norm1: l.norm1.map(&mut f),
                ffn: l.ffn.map(&mut f),
                norm2: l.norm2.map(&mut f),
            })
            .collect();
        let decoder = self
            .decoder
            .iter()
            .map(|l| DecoderLayer {
                self_attn: l.self_attn.map(&mut f),
                norm1: l.norm1.map(&mut f),
                cross_attn: l.cross_attn.map(&mut f),
                norm2: l.norm2.map(&mut f),
                ffn: l.ffn.map(&mut f),
                norm3: l.norm3.map(&mut f),
            })
            .collect();
        Transformer {
            config: self.config,
            encoder,
            decoder,
            queries: f(&self.queries),
        }
    }
}

fn attention_init<R: Rng + ?Sized>(c: usize, rng: &mut R) -> Attention<Tensor> {
    Attention {
        wq: Tensor::xavier(c, c, rng),
        bq: Tensor::zeros(&[c]),
        wk: Tensor::xavier(c, c, rng),
        wv: Tensor::xavier(c, c, rng),
        bv: Tensor::zeros(&[c]),
        wo: Tensor::xavier(c, c, rng),
        bo: Tensor::zeros(&[c]),
    }
}

fn norm_init(c: usize) -> Norm<Tensor> {
    Norm {
        gain: Tensor::full(&[c], 1.0),
        bias: Tensor::zeros(&[c]),
    }
}

fn ffn_init<R: Rng + ?Sized>(c: usize, f: usize, rng: &mut R) -> FeedForward<Tensor> {
    FeedForward {
        w1: Tensor::xavier(c, f, rng),
        b1: Tensor::zeros(&[f]),
        w2: Tensor::xavier(f, c, rng),
        b2: Tensor::zeros(&[c]),
    }
}

impl Transformer<Tensor> {
    pub fn init<R: Rng + ?Sized>(config: TransformerConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let c = config.d_model;
        let encoder = (0..config.n_encoder_layers)
            .map(|_| EncoderLayer {
                attn: attention_init(c, rng),
                norm1: norm_init(c),
                ffn: ffn_init(c, config.d_ffn, rng),
                norm2: norm_init(c),
            })
            .collect();
        let decoder = (0..config.n_decoder_layers)
            .map(|_| DecoderLayer {
                self_attn: attention_init(c, rng),
                norm1: norm_init(c),
                cross_attn: attention_init(c, rng),
                norm2: norm_init(c),
                ffn: ffn_init(c, config.d_ffn, rng),
                norm3: norm_init(c),
            })
            .collect();
        Ok(Self {
            config,
            encoder,
            decoder,
            queries: Tensor::randn(&[config.n_queries, c], 1.0, rng),
        })
    }

    /// Zeroes every attention output projection and the second FFN layer, so
    /// each block reduces to its residual path.
    pub fn zero_output_projections(&mut self) {
        let zero = |t: &mut Tensor| t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        for l in &mut self.encoder {
            for t in [&mut l.attn.wo, &mut l.attn.bo, &mut l.ffn.w2, &mut l.ffn.b2] {
                zero(t);
            }
        }
        for l in &mut self.decoder {
            for t in [
                &mut l.self_attn.wo,
                &mut l.self_attn.bo,
                &mut l.cross_attn.wo,
                &mut l.cross_attn.bo,
                &mut l.ffn.w2,
                &mut l.ffn.b2,
            ] {
                zero(t);
            }
        }
    }

    pub fn bind(&self, g: &mut Graph) -> TransformerNet {
        self.map(|t| g.param(t.clone()))
    }
}

/// Tokens handed between the sampler, the encoder and the decoder.
#[derive(Debug, Clone)]
pub struct TokenSequence {
    /// `T x C`
    pub tokens: Var,
    pub positions: Option<Var>,
    /// `true` marks a padding token that must not be attended to.
    pub padding_mask: Vec<bool>,
}

impl TokenSequence {
    pub fn new(g: &Graph, tokens: Var, positions: Option<Var>, padding_mask: Vec<bool>) -> Result<Self> {
        let t = g.shape(tokens)[0];
        if padding_mask.len() != t {
            return Err(Error::dim("token_sequence", format!("{} mask flags for {t} tokens", padding_mask.len())));
        }
        if let Some(p) = positions {
            if g.shape(p) != g.shape(tokens) {
                return Err(Error::dim(
                    "token_sequence",
                    format!("positions {:?} vs tokens {:?}", g.shape(p), g.shape(tokens)),
                ));
            }
        }
        Ok(Self {
            tokens,
            positions,
            padding_mask,
        })
    }

    pub fn from_abstract(g: &Graph, abs: &AbstractSet) -> Result<Self> {
        Self::new(g, abs.tokens, abs.positions, abs.padding_mask.clone())
    }

    pub fn len(&self, g: &Graph) -> usize {
        g.shape(self.tokens)[0]
    }
}

pub struct AttentionOutput {
    /// `T_q x C`
    pub output: Var,
    /// One `T_q x T_k` weight matrix per head.
    pub weights: Vec<Var>,
}

/// Scaled dot-product attention with `n_heads` heads. `key_padding[j] == true`
/// removes key `j` from every query's softmax.
pub fn multi_head_attention(
    g: &mut Graph,
    attn: &Attention<Var>,
    n_heads: usize,
    query: Var,
    key: Var,
    value: Var,
    key_padding: Option<&[bool]>,
) -> Result<AttentionOutput> {
    let c = g.shape(query)[1];
    if g.shape(key) != g.shape(value) || g.shape(key)[1] != c {
        return Err(Error::dim(
            "multi_head_attention",
            format!("query {:?}, key {:?}, value {:?}", g.shape(query), g.shape(key), g.shape(value)),
        ));
    }
    if n_heads == 0 || !c.is_multiple_of(n_heads) {
        return Err(Error::contract(format!("{c} channels cannot be split into {n_heads} heads")));
    }
    let t_k = g.shape(key)[0];
    if let Some(mask) = key_padding {
        if mask.len() != t_k {
            return Err(Error::dim("multi_head_attention", format!("{} mask flags for {t_k} keys", mask.len())));
        }
        if mask.iter().all(|&m| m) {
            return Err(Error::contract("every key is masked"));
        }
    }
    let head_dim = c / n_heads;
    let scale = 1.0 / (head_dim as f64).sqrt();
    let q = g.linear(query, attn.wq, attn.bq)?;
    let k = g.matmul(key, attn.wk)?;
    let v = g.linear(value, attn.wv, attn.bv)?;
    let mut heads = Vec::with_capacity(n_heads);
    let mut weights = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let (qh, kh, vh) = if n_heads == 1 {
            (q, k, v)
        } else {
            let (s, e) = (h * head_dim, (h + 1) * head_dim);
            (g.slice_cols(q, s, e)?, g.slice_cols(k, s, e)?, g.slice_cols(v, s, e)?)
        };
        let kt = g.transpose(kh)?;
        let logits = g.matmul(qh, kt)?;
        let logits = g.scale(logits, scale)?;
        let w = match key_padding {
            Some(mask) if mask.iter().any(|&m| m) => g.masked_softmax(logits, mask)?,
            _ => g.softmax(logits, 1)?,
        };
        heads.push(g.matmul(w, vh)?);
        weights.push(w);
    }
    let merged = if n_heads == 1 { heads[0] } else { g.concat_cols(&heads)? };
    let output = g.linear(merged, attn.wo, attn.bo)?;
    Ok(AttentionOutput { output, weights })
}

fn add_norm(g: &mut Graph, x: Var, residual: Var, norm: &Norm<Var>) -> Result<Var> {
    let sum = g.add(x, residual)?;
    let normed = g.layer_norm(sum, LAYER_NORM_EPS)?;
    let scaled = g.mul_row(normed, norm.gain)?;
    g.add_row(scaled, norm.bias)
}

fn feed_forward(g: &mut Graph, x: Var, ffn: &FeedForward<Var>) -> Result<Var> {
    let h = g.linear(x, ffn.w1, ffn.b1)?;
    let h = g.relu(h)?;
    g.linear(h, ffn.w2, ffn.b2)
}

fn with_positions(g: &mut Graph, x: Var, pos: Option<Var>) -> Result<Var> {
    match pos {
        Some(p) => g.add(x, p),
        None => Ok(x),
    }
}

/// Runs every encoder layer: self-attention with positions added to queries
/// and keys, then a feed-forward block, each followed by add & norm.
pub fn encode(g: &mut Graph, net: &TransformerNet, seq: &TokenSequence) -> Result<TokenSequence> {
    if seq.len(g) == 0 {
        return Err(Error::contract("cannot encode an empty token sequence"));
    }
    let mask = seq.padding_mask.iter().any(|&m| m).then_some(seq.padding_mask.as_slice());
    let mut x = seq.tokens;
    for layer in &net.encoder {
        let qk = with_positions(g, x, seq.positions)?;
        let a = multi_head_attention(g, &layer.attn, net.config.n_heads, qk, qk, x, mask)?;
        x = add_norm(g, x, a.output, &layer.norm1)?;
        let f = feed_forward(g, x, &layer.ffn)?;
        x = add_norm(g, x, f, &layer.norm2)?;
    }
    Ok(TokenSequence {
        tokens: x,
        positions: seq.positions,
        padding_mask: seq.padding_mask.clone(),
    })
}

/// Decodes the learned queries against `memory`; always returns `D x C`.
pub fn decode(g: &mut Graph, net: &TransformerNet, memory: &TokenSequence) -> Result<Var> {
    if memory.len(g) == 0 {
        return Err(Error::contract("decoder memory is empty"));
    }
    let mask = memory.padding_mask.iter().any(|&m| m).then_some(memory.padding_mask.as_slice());
    let keys = with_positions(g, memory.tokens, memory.positions)?;
    let mut x = net.queries;
    for layer in &net.decoder {
        let s = multi_head_attention(g, &layer.self_attn, net.config.n_heads, x, x, x, None)?;
        x = add_norm(g, x, s.output, &layer.norm1)?;
        let c = multi_head_attention(g, &layer.cross_attn, net.config.n_heads, x, keys, memory.tokens, mask)?;
        x = add_norm(g, x, c.output, &layer.norm2)?;
        let f = feed_forward(g, x, &layer.ffn)?;
        x = add_norm(g, x, f, &layer.norm3)?;
    }
    Ok(x)
}
