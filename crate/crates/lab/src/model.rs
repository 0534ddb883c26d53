//! Tiny decoder-only autoregressive model with exact gradients.
//!
//! Pre-norm transformer blocks (LayerNorm -> causal multi-head attention ->
//! residual, LayerNorm -> GELU MLP -> residual), learned positional
//! embeddings, final LayerNorm and an untied output head. Parameters live in
//! one flat vector partitioned into named layer groups (embed / shallow /
//! middle / deep / lm_head) so that gradient dot products can be reported
//! per group. Forward passes cache every intermediate needed for an exact
//! manual backward pass; losses inject gradients either at the logits or at
//! a tapped hidden layer.

use std::ops::Range;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::corpus::EncodedExample;
use crate::error::{LabError, Result};
use crate::scalar::{s, Scalar};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub context_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(LabError::InvalidArgument(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers < 3 {
            return Err(LabError::InvalidArgument(
                "n_layers must be >= 3 so shallow/middle/deep groups are non-empty".into(),
            ));
        }
        if self.vocab_size < 2 || self.context_len < 4 {
            return Err(LabError::InvalidArgument("degenerate vocab or context".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Group {
    Embed,
    Shallow,
    Middle,
    Deep,
    LmHead,
}

impl Group {
    pub const ALL: [Group; 5] = [
        Group::Embed,
        Group::Shallow,
        Group::Middle,
        Group::Deep,
        Group::LmHead,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Group::Embed => "embed",
            Group::Shallow => "shallow",
            Group::Middle => "middle",
            Group::Deep => "deep",
            Group::LmHead => "lm_head",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct BlockOffsets {
    ln1_g: usize,
    ln1_b: usize,
    wq: usize,
    bq: usize,
    wk: usize,
    bk: usize,
    wv: usize,
    bv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

/// Offsets of every tensor inside the flat parameter vector, plus the
/// five-way group partition. A pure function of the config.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub d: usize,
    pub head_dim: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub vocab: usize,
    pub ctx: usize,
    pub d_ff: usize,
    wte: usize,
    wpe: usize,
    blocks: Vec<BlockOffsets>,
    lnf_g: usize,
    lnf_b: usize,
    head_w: usize,
    head_b: usize,
    pub total: usize,
    groups: Vec<(Group, Range<usize>)>,
}

impl Layout {
    pub fn new(cfg: &ModelConfig) -> Layout {
        let d = cfg.d_model;
        let d_ff = 4 * d;
        let l = cfg.n_layers;
        let mut off = 0usize;
        fn take_from(off: &mut usize, n: usize) -> usize {
            let at = *off;
            *off += n;
            at
        }
        macro_rules! take {
            ($n:expr) => {
                take_from(&mut off, $n)
            };
        }

        let wte = take!(cfg.vocab_size * d);
        let wpe = take!(cfg.context_len * d);
        let embed_end = off;

        let mut blocks = Vec::with_capacity(l);
        let mut block_starts = Vec::with_capacity(l + 1);
        for _ in 0..l {
            block_starts.push(off);
            blocks.push(BlockOffsets {
                ln1_g: take!(d),
                ln1_b: take!(d),
                wq: take!(d * d),
                bq: take!(d),
                wk: take!(d * d),
                bk: take!(d),
                wv: take!(d * d),
                bv: take!(d),
                wo: take!(d * d),
                bo: take!(d),
                ln2_g: take!(d),
                ln2_b: take!(d),
                w1: take!(d_ff * d),
                b1: take!(d_ff),
                w2: take!(d * d_ff),
                b2: take!(d),
            });
        }
        block_starts.push(off);

        let lm_head_start = off;
        let lnf_g = take!(d);
        let lnf_b = take!(d);
        let head_w = take!(cfg.vocab_size * d);
        let head_b = take!(cfg.vocab_size);
        let total = off;

        // thirds rule: shallow gets the first ceil(L/3) blocks, deep the last
        let s_end = l.div_ceil(3);
        let m_end = (2 * l).div_ceil(3);
        let groups = vec![
            (Group::Embed, 0..embed_end),
            (Group::Shallow, block_starts[0]..block_starts[s_end]),
            (Group::Middle, block_starts[s_end]..block_starts[m_end]),
            (Group::Deep, block_starts[m_end]..block_starts[l]),
            (Group::LmHead, lm_head_start..total),
        ];

        Layout {
            d,
            head_dim: d / cfg.n_heads,
            n_heads: cfg.n_heads,
            n_layers: l,
            vocab: cfg.vocab_size,
            ctx: cfg.context_len,
            d_ff,
            wte,
            wpe,
            blocks,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
            total,
            groups,
        }
    }

    pub fn groups(&self) -> &[(Group, Range<usize>)] {
        &self.groups
    }

    pub fn group_range(&self, group: Group) -> Range<usize> {
        self.groups
            .iter()
            .find(|(g, _)| *g == group)
            .map(|(_, r)| r.clone())
            .expect("all groups present")
    }
}

/// Flat gradient aligned with a model's parameter vector.
#[derive(Debug, Clone)]
pub struct FlatGradient<S: Scalar> {
    pub values: Vec<S>,
    pub groups: Vec<(Group, Range<usize>)>,
}

impl<S: Scalar> FlatGradient<S> {
    pub fn zeros(layout: &Layout) -> Self {
        FlatGradient {
            values: vec![S::zero(); layout.total],
            groups: layout.groups.clone(),
        }
    }

    pub fn norm(&self) -> S {
        self.values.iter().map(|&v| v * v).sum::<S>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn scale(&mut self, factor: S) {
        for v in &mut self.values {
            *v = *v * factor;
        }
    }

    pub fn add_scaled(&mut self, other: &FlatGradient<S>, factor: S) {
        assert_eq!(self.values.len(), other.values.len());
        for (a, &b) in self.values.iter_mut().zip(&other.values) {
            *a = *a + b * factor;
        }
    }
}

/// Model parameters plus their layout; immutable between optimizer steps.
#[derive(Debug, Clone)]
pub struct ModelState<S: Scalar> {
    pub config: ModelConfig,
    pub layout: Layout,
    pub params: Vec<S>,
}

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

/// Everything the backward pass needs, cached per example.
pub struct ForwardCache<S: Scalar> {
    pub tokens: Vec<u32>,
    len: usize,
    /// residual-stream input to block 0 (token + positional embedding)
    embed_x: Vec<S>,
    layers: Vec<LayerCache<S>>,
    /// hidden[l] = output of block l, length n_layers, each len*d
    pub hidden: Vec<Vec<S>>,
    lnf_xhat: Vec<S>,
    lnf_rstd: Vec<S>,
    /// log-softmax rows, len*vocab; row t predicts token t+1
    pub logprobs: Vec<S>,
}

struct LayerCache<S: Scalar> {
    ln1_xhat: Vec<S>,
    ln1_rstd: Vec<S>,
    q: Vec<S>,
    k: Vec<S>,
    v: Vec<S>,
    /// attention probabilities, n_heads * len * len (causal rows)
    att: Vec<S>,
    /// concatenated head outputs before the output projection
    att_out: Vec<S>,
    ln2_xhat: Vec<S>,
    ln2_rstd: Vec<S>,
    h_pre: Vec<S>,
    h_act: Vec<S>,
}

#[inline]
fn gelu<S: Scalar>(x: S) -> S {
    let k = s::<S>(0.797_884_560_802_865_4);
    let c = s::<S>(0.044715);
    let inner = k * (x + c * x * x * x);
    s::<S>(0.5) * x * (S::one() + inner.tanh())
}

#[inline]
fn gelu_grad<S: Scalar>(x: S) -> S {
    let k = s::<S>(0.797_884_560_802_865_4);
    let c = s::<S>(0.044715);
    let inner = k * (x + c * x * x * x);
    let t = inner.tanh();
    let half = s::<S>(0.5);
    half * (S::one() + t) + half * x * (S::one() - t * t) * k * (S::one() + s::<S>(3.0) * c * x * x)
}

/// y[o] = sum_i w[o*in+i] * x[i] + b[o]
fn affine<S: Scalar>(w: &[S], b: &[S], x: &[S], y: &mut [S]) {
    let n_in = x.len();
    for (o, yo) in y.iter_mut().enumerate() {
        let row = &w[o * n_in..(o + 1) * n_in];
        let mut acc = b[o];
        for (wi, xi) in row.iter().zip(x) {
            acc = acc + *wi * *xi;
        }
        *yo = acc;
    }
}

/// Accumulate dx += w^T dy, dw += dy x^T, db += dy for the affine above.
fn affine_backward<S: Scalar>(
    w: &[S],
    x: &[S],
    dy: &[S],
    dx: &mut [S],
    dw: &mut [S],
    db: &mut [S],
) {
    let n_in = x.len();
    for (o, &g) in dy.iter().enumerate() {
        if g == S::zero() {
            continue;
        }
        let row = &w[o * n_in..(o + 1) * n_in];
        let drow = &mut dw[o * n_in..(o + 1) * n_in];
        for i in 0..n_in {
            dx[i] = dx[i] + row[i] * g;
            drow[i] = drow[i] + g * x[i];
        }
        db[o] = db[o] + g;
    }
}

fn layer_norm<S: Scalar>(
    x: &[S],
    g: &[S],
    b: &[S],
    y: &mut [S],
    xhat: &mut [S],
    rstd: &mut S,
) {
    let d = x.len();
    let n = s::<S>(d as f64);
    let mean = x.iter().copied().sum::<S>() / n;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
    let r = (var + s::<S>(LN_EPS)).sqrt().recip();
    *rstd = r;
    for i in 0..d {
        let xh = (x[i] - mean) * r;
        xhat[i] = xh;
        y[i] = xh * g[i] + b[i];
    }
}

/// dx += backward of layer_norm; also accumulates dg, db.
fn layer_norm_backward<S: Scalar>(
    dy: &[S],
    xhat: &[S],
    rstd: S,
    g: &[S],
    dx: &mut [S],
    dg: &mut [S],
    db: &mut [S],
) {
    let d = dy.len();
    let n = s::<S>(d as f64);
    let mut sum_dxhat = S::zero();
    let mut sum_dxhat_xhat = S::zero();
    for i in 0..d {
        let dxh = dy[i] * g[i];
        sum_dxhat = sum_dxhat + dxh;
        sum_dxhat_xhat = sum_dxhat_xhat + dxh * xhat[i];
        dg[i] = dg[i] + dy[i] * xhat[i];
        db[i] = db[i] + dy[i];
    }
    let mean_dxhat = sum_dxhat / n;
    let mean_dxhat_xhat = sum_dxhat_xhat / n;
    for i in 0..d {
        let dxh = dy[i] * g[i];
        dx[i] = dx[i] + rstd * (dxh - mean_dxhat - xhat[i] * mean_dxhat_xhat);
    }
}

impl<S: Scalar> ModelState<S> {
    /// Deterministic initialization; the output head starts zeroed so a fresh
    /// model predicts the uniform distribution at every position.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![S::zero(); layout.total];
        let mut rng = ChaCha12Rng::seed_from_u64(config.seed);
        let normal = Normal::new(0.0f64, INIT_STD).expect("valid std");

        let mut fill_normal = |range: Range<usize>, params: &mut Vec<S>| {
            for i in range {
                params[i] = s(normal.sample(&mut rng));
            }
        };

        let d = layout.d;
        fill_normal(layout.wte..layout.wte + layout.vocab * d, &mut params);
        fill_normal(layout.wpe..layout.wpe + layout.ctx * d, &mut params);
        for blk in 0..layout.n_layers {
            let b = layout.blocks[blk].clone();
            for (w_off, n) in [
                (b.wq, d * d),
                (b.wk, d * d),
                (b.wv, d * d),
                (b.wo, d * d),
                (b.w1, layout.d_ff * d),
                (b.w2, d * layout.d_ff),
            ] {
                fill_normal(w_off..w_off + n, &mut params);
            }
            for g_off in [b.ln1_g, b.ln2_g] {
                for i in g_off..g_off + d {
                    params[i] = S::one();
                }
            }
            // biases stay zero
        }
        for i in layout.lnf_g..layout.lnf_g + d {
            params[i] = S::one();
        }
        // head_w and head_b stay zero

        Ok(ModelState {
            config,
            layout,
            params,
        })
    }

    pub fn n_params(&self) -> usize {
        self.layout.total
    }

    fn p(&self, off: usize, n: usize) -> &[S] {
        &self.params[off..off + n]
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<ForwardCache<S>> {
        let len = tokens.len();
        if len == 0 {
            return Err(LabError::InvalidArgument("empty token sequence".into()));
        }
        if len > self.layout.ctx {
            return Err(LabError::InvalidArgument(format!(
                "sequence length {len} exceeds context_len {}",
                self.layout.ctx
            )));
        }
        let d = self.layout.d;
        let d_ff = self.layout.d_ff;
        let hd = self.layout.head_dim;
        let n_heads = self.layout.n_heads;
        let vocab = self.layout.vocab;

        let mut embed_x = vec![S::zero(); len * d];
        for (t, &tok) in tokens.iter().enumerate() {
            let tok = tok as usize;
            if tok >= vocab {
                return Err(LabError::InvalidArgument(format!(
                    "token id {tok} out of vocabulary {vocab}"
                )));
            }
            let te = self.p(self.layout.wte + tok * d, d);
            let pe = self.p(self.layout.wpe + t * d, d);
            let row = &mut embed_x[t * d..(t + 1) * d];
            for i in 0..d {
                row[i] = te[i] + pe[i];
            }
        }

        let mut layers = Vec::with_capacity(self.layout.n_layers);
        let mut hidden = Vec::with_capacity(self.layout.n_layers);
        let mut x = embed_x.clone();
        let scale = s::<S>(1.0 / (hd as f64).sqrt());

        for blk in 0..self.layout.n_layers {
            let b = self.layout.blocks[blk].clone();
            let ln1_g = self.p(b.ln1_g, d);
            let ln1_b = self.p(b.ln1_b, d);
            let mut ln1_xhat = vec![S::zero(); len * d];
            let mut ln1_rstd = vec![S::zero(); len];
            let mut ln1_y = vec![S::zero(); len * d];
            for t in 0..len {
                layer_norm(
                    &x[t * d..(t + 1) * d],
                    ln1_g,
                    ln1_b,
                    &mut ln1_y[t * d..(t + 1) * d],
                    &mut ln1_xhat[t * d..(t + 1) * d],
                    &mut ln1_rstd[t],
                );
            }

            let mut q = vec![S::zero(); len * d];
            let mut k = vec![S::zero(); len * d];
            let mut v = vec![S::zero(); len * d];
            for t in 0..len {
                let xin = &ln1_y[t * d..(t + 1) * d];
                affine(self.p(b.wq, d * d), self.p(b.bq, d), xin, &mut q[t * d..(t + 1) * d]);
                affine(self.p(b.wk, d * d), self.p(b.bk, d), xin, &mut k[t * d..(t + 1) * d]);
                affine(self.p(b.wv, d * d), self.p(b.bv, d), xin, &mut v[t * d..(t + 1) * d]);
            }

            let mut att = vec![S::zero(); n_heads * len * len];
            let mut att_out = vec![S::zero(); len * d];
            for h in 0..n_heads {
                let hoff = h * hd;
                for t in 0..len {
                    let qrow = &q[t * d + hoff..t * d + hoff + hd];
                    // causal scores
                    let mut row_max = S::neg_infinity();
                    let mut scores = vec![S::zero(); t + 1];
                    for (j, sc) in scores.iter_mut().enumerate() {
                        let krow = &k[j * d + hoff..j * d + hoff + hd];
                        let mut acc = S::zero();
                        for i in 0..hd {
                            acc = acc + qrow[i] * krow[i];
                        }
                        *sc = acc * scale;
                        if *sc > row_max {
                            row_max = *sc;
                        }
                    }
                    let mut denom = S::zero();
                    for sc in scores.iter_mut() {
                        *sc = (*sc - row_max).exp();
                        denom = denom + *sc;
                    }
                    let arow = &mut att[h * len * len + t * len..h * len * len + t * len + t + 1];
                    for (j, sc) in scores.iter().enumerate() {
                        arow[j] = *sc / denom;
                    }
                    let orow = &mut att_out[t * d + hoff..t * d + hoff + hd];
                    for j in 0..=t {
                        let p = arow[j];
                        let vrow = &v[j * d + hoff..j * d + hoff + hd];
                        for i in 0..hd {
                            orow[i] = orow[i] + p * vrow[i];
                        }
                    }
                }
            }

            let mut x_mid = vec![S::zero(); len * d];
            for t in 0..len {
                let mut proj = vec![S::zero(); d];
                affine(
                    self.p(b.wo, d * d),
                    self.p(b.bo, d),
                    &att_out[t * d..(t + 1) * d],
                    &mut proj,
                );
                let xm = &mut x_mid[t * d..(t + 1) * d];
                let xi = &x[t * d..(t + 1) * d];
                for i in 0..d {
                    xm[i] = xi[i] + proj[i];
                }
            }

            let ln2_g = self.p(b.ln2_g, d);
            let ln2_b = self.p(b.ln2_b, d);
            let mut ln2_xhat = vec![S::zero(); len * d];
            let mut ln2_rstd = vec![S::zero(); len];
            let mut ln2_y = vec![S::zero(); len * d];
            for t in 0..len {
                layer_norm(
                    &x_mid[t * d..(t + 1) * d],
                    ln2_g,
                    ln2_b,
                    &mut ln2_y[t * d..(t + 1) * d],
                    &mut ln2_xhat[t * d..(t + 1) * d],
                    &mut ln2_rstd[t],
                );
            }

            let mut h_pre = vec![S::zero(); len * d_ff];
            let mut h_act = vec![S::zero(); len * d_ff];
            let mut x_out = vec![S::zero(); len * d];
            for t in 0..len {
                affine(
                    self.p(b.w1, d_ff * d),
                    self.p(b.b1, d_ff),
                    &ln2_y[t * d..(t + 1) * d],
                    &mut h_pre[t * d_ff..(t + 1) * d_ff],
                );
                for i in 0..d_ff {
                    h_act[t * d_ff + i] = gelu(h_pre[t * d_ff + i]);
                }
                let mut mlp = vec![S::zero(); d];
                affine(
                    self.p(b.w2, d * d_ff),
                    self.p(b.b2, d),
                    &h_act[t * d_ff..(t + 1) * d_ff],
                    &mut mlp,
                );
                let xo = &mut x_out[t * d..(t + 1) * d];
                let xm = &x_mid[t * d..(t + 1) * d];
                for i in 0..d {
                    xo[i] = xm[i] + mlp[i];
                }
            }

            layers.push(LayerCache {
                ln1_xhat,
                ln1_rstd,
                q,
                k,
                v,
                att,
                att_out,
                ln2_xhat,
                ln2_rstd,
                h_pre,
                h_act,
            });
            hidden.push(x_out.clone());
            x = x_out;
        }

        // final layer norm + head
        let lnf_g = self.p(self.layout.lnf_g, d);
        let lnf_b = self.p(self.layout.lnf_b, d);
        let mut lnf_xhat = vec![S::zero(); len * d];
        let mut lnf_rstd = vec![S::zero(); len];
        let mut lnf_y = vec![S::zero(); len * d];
        for t in 0..len {
            layer_norm(
                &x[t * d..(t + 1) * d],
                lnf_g,
                lnf_b,
                &mut lnf_y[t * d..(t + 1) * d],
                &mut lnf_xhat[t * d..(t + 1) * d],
                &mut lnf_rstd[t],
            );
        }
        let mut logprobs = vec![S::zero(); len * vocab];
        let head_w = self.p(self.layout.head_w, vocab * d);
        let head_b = self.p(self.layout.head_b, vocab);
        let mut logits = vec![S::zero(); vocab];
        for t in 0..len {
            affine(head_w, head_b, &lnf_y[t * d..(t + 1) * d], &mut logits);
            log_softmax(&logits, &mut logprobs[t * vocab..(t + 1) * vocab]);
        }

        Ok(ForwardCache {
            tokens: tokens.to_vec(),
            len,
            embed_x,
            layers,
            hidden,
            lnf_xhat,
            lnf_rstd,
            logprobs,
        })
    }

    /// Per-position log p(s^i | s^{<i}); index 0 (the BOS position) is 0 and
    /// carries no prediction.
    pub fn token_log_probs(&self, example: &EncodedExample) -> Result<Vec<S>> {
        let cache = self.forward(&example.tokens)?;
        Ok(self.token_log_probs_from_cache(&cache))
    }

    pub fn token_log_probs_from_cache(&self, cache: &ForwardCache<S>) -> Vec<S> {
        let vocab = self.layout.vocab;
        let mut out = vec![S::zero(); cache.len];
        for i in 1..cache.len {
            out[i] = cache.logprobs[(i - 1) * vocab + cache.tokens[i] as usize];
        }
        out
    }

    /// Sum of token log-probs over answer-mask positions.
    pub fn sequence_log_prob(&self, example: &EncodedExample) -> Result<S> {
        if !example.answer_mask.iter().any(|&m| m) {
            return Err(LabError::InvalidArgument("empty answer mask".into()));
        }
        let lp = self.token_log_probs(example)?;
        Ok(example
            .answer_mask
            .iter()
            .zip(&lp)
            .filter(|(m, _)| **m)
            .map(|(_, &v)| v)
            .sum())
    }

    /// Hidden states after block `layer` (1-based), one d_model vector per
    /// input position.
    pub fn hidden_states(&self, example: &EncodedExample, layer: usize) -> Result<Vec<Vec<S>>> {
        if layer == 0 || layer > self.layout.n_layers {
            return Err(LabError::InvalidArgument(format!(
                "layer {layer} out of range 1..={}",
                self.layout.n_layers
            )));
        }
        let cache = self.forward(&example.tokens)?;
        let d = self.layout.d;
        let h = &cache.hidden[layer - 1];
        Ok((0..cache.len).map(|t| h[t * d..(t + 1) * d].to_vec()).collect())
    }

    /// Exact gradient of a scalar loss given its gradient at the logits
    /// (dense rows, len x vocab) and/or at tapped hidden layers (1-based
    /// layer index, len x d rows).
    pub fn backward(
        &self,
        cache: &ForwardCache<S>,
        d_logits: Option<&[S]>,
        d_hidden_taps: &[(usize, Vec<S>)],
    ) -> FlatGradient<S> {
        let len = cache.len;
        let d = self.layout.d;
        let d_ff = self.layout.d_ff;
        let hd = self.layout.head_dim;
        let n_heads = self.layout.n_heads;
        let vocab = self.layout.vocab;
        let mut grad = FlatGradient::zeros(&self.layout);
        let gv = &mut grad.values;

        // gradient wrt the residual stream at the output of the top block
        let mut d_stream = vec![S::zero(); len * d];

        if let Some(dl) = d_logits {
            debug_assert_eq!(dl.len(), len * vocab);
            let head_w = self.p(self.layout.head_w, vocab * d);
            let lnf_g = self.p(self.layout.lnf_g, d);
            let lnf_b = self.p(self.layout.lnf_b, d);
            let mut d_lnf_y = vec![S::zero(); d];
            for t in 0..len {
                let drow = &dl[t * vocab..(t + 1) * vocab];
                if drow.iter().all(|&g| g == S::zero()) {
                    continue;
                }
                // recompute ln_f output for this position from the cache
                let xhat = &cache.lnf_xhat[t * d..(t + 1) * d];
                let lnf_y: Vec<S> = (0..d).map(|i| xhat[i] * lnf_g[i] + lnf_b[i]).collect();
                for v in d_lnf_y.iter_mut() {
                    *v = S::zero();
                }
                {
                    let (dw, db) = {
                        let (a, b) = gv.split_at_mut(self.layout.head_b);
                        (
                            &mut a[self.layout.head_w..self.layout.head_w + vocab * d],
                            &mut b[..vocab],
                        )
                    };
                    affine_backward(head_w, &lnf_y, drow, &mut d_lnf_y, dw, db);
                }
                {
                    let (dg_part, db_part) = {
                        let (a, b) = gv.split_at_mut(self.layout.lnf_b);
                        (
                            &mut a[self.layout.lnf_g..self.layout.lnf_g + d],
                            &mut b[..d],
                        )
                    };
                    layer_norm_backward(
                        &d_lnf_y,
                        xhat,
                        cache.lnf_rstd[t],
                        lnf_g,
                        &mut d_stream[t * d..(t + 1) * d],
                        dg_part,
                        db_part,
                    );
                }
            }
        }

        // gradients injected directly at tapped hidden layers
        let mut taps: Vec<Option<&Vec<S>>> = vec![None; self.layout.n_layers];
        for (layer, dh) in d_hidden_taps {
            assert!(*layer >= 1 && *layer <= self.layout.n_layers);
            debug_assert_eq!(dh.len(), len * d);
            taps[*layer - 1] = Some(dh);
        }
        if let Some(dh) = taps[self.layout.n_layers - 1] {
            for (a, &b) in d_stream.iter_mut().zip(dh.iter()) {
                *a = *a + b;
            }
        }

        let scale = s::<S>(1.0 / (hd as f64).sqrt());
        for blk in (0..self.layout.n_layers).rev() {
            let b = self.layout.blocks[blk].clone();
            let lc = &cache.layers[blk];
            let x_in: &[S] = if blk == 0 {
                &cache.embed_x
            } else {
                &cache.hidden[blk - 1]
            };

            // ---- MLP backward ----
            // d_stream holds the gradient at x_out = x_mid + mlp(ln2(x_mid))
            let mut d_x_mid = d_stream.clone(); // residual path
            {
                let w1 = self.p(b.w1, d_ff * d);
                let w2 = self.p(b.w2, d * d_ff);
                let ln2_g = self.p(b.ln2_g, d);
                let mut d_act = vec![S::zero(); d_ff];
                let mut d_pre = vec![S::zero(); d_ff];
                let mut d_ln2_y = vec![S::zero(); d];
                for t in 0..len {
                    let dy = &d_stream[t * d..(t + 1) * d];
                    if dy.iter().all(|&g| g == S::zero()) {
                        continue;
                    }
                    for v in d_act.iter_mut() {
                        *v = S::zero();
                    }
                    {
                        let (dw2, db2) = {
                            let (a, rest) = gv.split_at_mut(b.b2);
                            (&mut a[b.w2..b.w2 + d * d_ff], &mut rest[..d])
                        };
                        affine_backward(
                            w2,
                            &lc.h_act[t * d_ff..(t + 1) * d_ff],
                            dy,
                            &mut d_act,
                            dw2,
                            db2,
                        );
                    }
                    for i in 0..d_ff {
                        d_pre[i] = d_act[i] * gelu_grad(lc.h_pre[t * d_ff + i]);
                    }
                    for v in d_ln2_y.iter_mut() {
                        *v = S::zero();
                    }
                    {
                        let ln2_b = self.p(b.ln2_b, d);
                        let ln2_y: Vec<S> = (0..d)
                            .map(|i| lc.ln2_xhat[t * d + i] * ln2_g[i] + ln2_b[i])
                            .collect();
                        let (dw1, db1) = {
                            let (a, rest) = gv.split_at_mut(b.b1);
                            (&mut a[b.w1..b.w1 + d_ff * d], &mut rest[..d_ff])
                        };
                        affine_backward(w1, &ln2_y, &d_pre, &mut d_ln2_y, dw1, db1);
                    }
                    {
                        let (dg, dbp) = {
                            let (a, rest) = gv.split_at_mut(b.ln2_b);
                            (&mut a[b.ln2_g..b.ln2_g + d], &mut rest[..d])
                        };
                        layer_norm_backward(
                            &d_ln2_y,
                            &lc.ln2_xhat[t * d..(t + 1) * d],
                            lc.ln2_rstd[t],
                            ln2_g,
                            &mut d_x_mid[t * d..(t + 1) * d],
                            dg,
                            dbp,
                        );
                    }
                }
            }

            // ---- attention backward ----
            // x_mid = x_in + Wo att_out + bo
            let mut d_x_in = d_x_mid.clone(); // residual path
            let mut d_att_out = vec![S::zero(); len * d];
            {
                let wo = self.p(b.wo, d * d);
                for t in 0..len {
                    let dy = &d_x_mid[t * d..(t + 1) * d];
                    if dy.iter().all(|&g| g == S::zero()) {
                        continue;
                    }
                    let (dwo, dbo) = {
                        let (a, rest) = gv.split_at_mut(b.bo);
                        (&mut a[b.wo..b.wo + d * d], &mut rest[..d])
                    };
                    affine_backward(
                        wo,
                        &lc.att_out[t * d..(t + 1) * d],
                        dy,
                        &mut d_att_out[t * d..(t + 1) * d],
                        dwo,
                        dbo,
                    );
                }
            }

            let mut d_q = vec![S::zero(); len * d];
            let mut d_k = vec![S::zero(); len * d];
            let mut d_v = vec![S::zero(); len * d];
            for h in 0..n_heads {
                let hoff = h * hd;
                for t in 0..len {
                    let d_out = &d_att_out[t * d + hoff..t * d + hoff + hd];
                    if d_out.iter().all(|&g| g == S::zero()) {
                        continue;
                    }
                    let arow = &lc.att[h * len * len + t * len..h * len * len + t * len + t + 1];
                    // d_p and softmax backward
                    let mut d_p = vec![S::zero(); t + 1];
                    let mut dot = S::zero();
                    for j in 0..=t {
                        let vrow = &lc.v[j * d + hoff..j * d + hoff + hd];
                        let mut acc = S::zero();
                        for i in 0..hd {
                            acc = acc + d_out[i] * vrow[i];
                        }
                        d_p[j] = acc;
                        dot = dot + arow[j] * acc;
                        // d_v accumulation
                        let dv = &mut d_v[j * d + hoff..j * d + hoff + hd];
                        for i in 0..hd {
                            dv[i] = dv[i] + arow[j] * d_out[i];
                        }
                    }
                    let qrow = &lc.q[t * d + hoff..t * d + hoff + hd];
                    for j in 0..=t {
                        let d_score = arow[j] * (d_p[j] - dot) * scale;
                        if d_score == S::zero() {
                            continue;
                        }
                        let krow = &lc.k[j * d + hoff..j * d + hoff + hd];
                        let dq = &mut d_q[t * d + hoff..t * d + hoff + hd];
                        for i in 0..hd {
                            dq[i] = dq[i] + d_score * krow[i];
                        }
                        let dk = &mut d_k[j * d + hoff..j * d + hoff + hd];
                        for i in 0..hd {
                            dk[i] = dk[i] + d_score * qrow[i];
                        }
                    }
                }
            }

            // back through the q/k/v projections and ln1
            {
                let ln1_g = self.p(b.ln1_g, d);
                let ln1_b = self.p(b.ln1_b, d);
                let wq = self.p(b.wq, d * d);
                let wk = self.p(b.wk, d * d);
                let wv = self.p(b.wv, d * d);
                let mut d_ln1_y = vec![S::zero(); d];
                for t in 0..len {
                    let ln1_y: Vec<S> = (0..d)
                        .map(|i| lc.ln1_xhat[t * d + i] * ln1_g[i] + ln1_b[i])
                        .collect();
                    for v in d_ln1_y.iter_mut() {
                        *v = S::zero();
                    }
                    for (w, off_w, off_b, dvec) in [
                        (wq, b.wq, b.bq, &d_q),
                        (wk, b.wk, b.bk, &d_k),
                        (wv, b.wv, b.bv, &d_v),
                    ] {
                        let dy = &dvec[t * d..(t + 1) * d];
                        if dy.iter().all(|&g| g == S::zero()) {
                            continue;
                        }
                        let (dw, dbias) = {
                            let (a, rest) = gv.split_at_mut(off_b);
                            (&mut a[off_w..off_w + d * d], &mut rest[..d])
                        };
                        affine_backward(w, &ln1_y, dy, &mut d_ln1_y, dw, dbias);
                    }
                    if d_ln1_y.iter().any(|&g| g != S::zero()) {
                        let (dg, dbp) = {
                            let (a, rest) = gv.split_at_mut(b.ln1_b);
                            (&mut a[b.ln1_g..b.ln1_g + d], &mut rest[..d])
                        };
                        layer_norm_backward(
                            &d_ln1_y,
                            &lc.ln1_xhat[t * d..(t + 1) * d],
                            lc.ln1_rstd[t],
                            ln1_g,
                            &mut d_x_in[t * d..(t + 1) * d],
                            dg,
                            dbp,
                        );
                    }
                }
            }

            let _ = x_in;
            d_stream = d_x_in;
            if blk > 0 {
                if let Some(dh) = taps[blk - 1] {
                    for (a, &v) in d_stream.iter_mut().zip(dh.iter()) {
                        *a = *a + v;
                    }
                }
            }
        }

        // embedding backward
        for (t, &tok) in cache.tokens.iter().enumerate() {
            let dx = &d_stream[t * d..(t + 1) * d];
            let wte_row = self.layout.wte + tok as usize * d;
            let wpe_row = self.layout.wpe + t * d;
            for i in 0..d {
                gv[wte_row + i] = gv[wte_row + i] + dx[i];
                gv[wpe_row + i] = gv[wpe_row + i] + dx[i];
            }
        }

        grad
    }

    /// Elementwise (1-lam)*a + lam*b over parameters.
    pub fn mix(a: &ModelState<S>, b: &ModelState<S>, lam: S) -> Result<ModelState<S>> {
        if a.config != b.config {
            return Err(LabError::InvalidArgument("config mismatch in mix".into()));
        }
        let one_minus = S::one() - lam;
        let params = a
            .params
            .iter()
            .zip(&b.params)
            .map(|(&pa, &pb)| one_minus * pa + lam * pb)
            .collect();
        Ok(ModelState {
            config: a.config,
            layout: a.layout.clone(),
            params,
        })
    }
}

fn log_softmax<S: Scalar>(logits: &[S], out: &mut [S]) {
    let mut max = S::neg_infinity();
    for &l in logits {
        if l > max {
            max = l;
        }
    }
    let mut sum = S::zero();
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = l - max;
        sum = sum + o.exp();
    }
    let log_z = sum.ln();
    for o in out.iter_mut() {
        *o = *o - log_z;
    }
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    config: ModelConfig,
    group_index: Vec<(String, usize, usize)>,
    params: Vec<f64>,
}

const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint<S: Scalar>(model: &ModelState<S>, path: &std::path::Path) -> Result<()> {
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        config: model.config,
        group_index: model
            .layout
            .groups()
            .iter()
            .map(|(g, r)| (g.as_str().to_string(), r.start, r.end))
            .collect(),
        params: model
            .params
            .iter()
            .map(|p| p.to_f64().expect("finite parameter"))
            .collect(),
    };
    let f = std::fs::File::create(path)?;
    serde_json::to_writer(std::io::BufWriter::new(f), &file)?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &std::path::Path) -> Result<ModelState<S>> {
    if !path.exists() {
        return Err(LabError::MissingArtifact(path.display().to_string()));
    }
    let f = std::fs::File::open(path)?;
    let file: CheckpointFile = serde_json::from_reader(std::io::BufReader::new(f))?;
    if file.version != CHECKPOINT_VERSION {
        return Err(LabError::Serialization(format!(
            "unsupported checkpoint version {}",
            file.version
        )));
    }
    file.config.validate()?;
    let layout = Layout::new(&file.config);
    if file.params.len() != layout.total {
        return Err(LabError::Serialization(format!(
            "checkpoint has {} params, layout expects {}",
            file.params.len(),
            layout.total
        )));
    }
    // validate the stored partition against the derived one
    let expected: Vec<(String, usize, usize)> = layout
        .groups()
        .iter()
        .map(|(g, r)| (g.as_str().to_string(), r.start, r.end))
        .collect();
    if file.group_index != expected {
        return Err(LabError::Serialization(
            "checkpoint group index does not partition the parameter vector as derived from config"
                .into(),
        ));
    }
    Ok(ModelState {
        config: file.config,
        layout,
        params: file.params.into_iter().map(|p| s(p)).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            vocab_size: 11,
            d_model: 16,
            n_layers: 3,
            n_heads: 2,
            context_len: 16,
            seed: 7,
        }
    }

    fn example(tokens: &[u32], n_answer: usize) -> EncodedExample {
        let len = tokens.len();
        let mask: Vec<bool> = (0..len).map(|i| i >= len - n_answer).collect();
        EncodedExample {
            tokens: tokens.to_vec(),
            answer_mask: mask,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let a = ModelState::<f64>::init(tiny_config()).unwrap();
        let b = ModelState::<f64>::init(tiny_config()).unwrap();
        assert_eq!(a.params, b.params);
        assert!(a.params.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn groups_partition_params() {
        let m = ModelState::<f64>::init(tiny_config()).unwrap();
        let mut covered = 0usize;
        let mut prev_end = 0usize;
        for (_, r) in m.layout.groups() {
            assert_eq!(r.start, prev_end);
            covered += r.len();
            prev_end = r.end;
        }
        assert_eq!(covered, m.n_params());
        assert_eq!(prev_end, m.n_params());
    }

    #[test]
    fn six_layer_grouping_is_thirds() {
        let cfg = ModelConfig {
            n_layers: 6,
            ..tiny_config()
        };
        let layout = Layout::new(&cfg);
        let shallow = layout.group_range(Group::Shallow);
        let middle = layout.group_range(Group::Middle);
        let deep = layout.group_range(Group::Deep);
        // each third holds exactly two blocks' worth of parameters
        assert_eq!(shallow.len(), middle.len());
        assert_eq!(middle.len(), deep.len());
    }

    #[test]
    fn fresh_model_is_uniform() {
        let m = ModelState::<f64>::init(tiny_config()).unwrap();
        let ex = example(&[0, 5, 6, 7, 1], 3);
        let lp = m.token_log_probs(&ex).unwrap();
        let expected = -(11f64).ln();
        for &v in &lp[1..] {
            assert!((v - expected).abs() < 1e-12, "{v} vs {expected}");
        }
    }

    #[test]
    fn softmax_rows_normalize() {
        let mut cfg = tiny_config();
        cfg.seed = 3;
        let mut m = ModelState::<f64>::init(cfg).unwrap();
        // random head so rows are non-trivial
        let hw = m.layout.head_w;
        let n = m.layout.vocab * m.layout.d;
        for i in 0..n {
            m.params[hw + i] = ((i * 2654435761) % 97) as f64 / 97.0 - 0.5;
        }
        let cache = m.forward(&[0, 5, 6, 7, 1]).unwrap();
        let vocab = m.layout.vocab;
        for t in 0..5 {
            let total: f64 = cache.logprobs[t * vocab..(t + 1) * vocab]
                .iter()
                .map(|lp| lp.exp())
                .sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn token_log_probs_sum_matches_sequence_log_prob() {
        let m = perturbed_model();
        let ex = example(&[0, 5, 6, 7, 8, 1], 3);
        let lp = m.token_log_probs(&ex).unwrap();
        let manual: f64 = ex
            .answer_mask
            .iter()
            .zip(&lp)
            .filter(|(m, _)| **m)
            .map(|(_, &v)| v)
            .sum();
        assert!((manual - m.sequence_log_prob(&ex).unwrap()).abs() < 1e-14);
        for &v in &lp[1..] {
            let p = v.exp();
            assert!(p > 0.0 && p <= 1.0);
        }
    }

    /// Model with non-zero head so the distribution is not uniform.
    fn perturbed_model() -> ModelState<f64> {
        let mut m = ModelState::<f64>::init(tiny_config()).unwrap();
        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let normal = Normal::new(0.0, 0.3).unwrap();
        let hw = m.layout.head_w;
        for i in 0..m.layout.vocab * m.layout.d + m.layout.vocab {
            m.params[hw + i] = normal.sample(&mut rng);
        }
        m
    }

    #[test]
    fn hidden_states_shape_and_determinism() {
        let m = perturbed_model();
        let ex = example(&[0, 3, 4, 1], 2);
        let h = m.hidden_states(&ex, 2).unwrap();
        assert_eq!(h.len(), 4);
        assert!(h.iter().all(|row| row.len() == m.layout.d));
        let h2 = m.hidden_states(&ex, 2).unwrap();
        assert_eq!(h, h2);
        assert!(m.hidden_states(&ex, 0).is_err());
        assert!(m.hidden_states(&ex, 4).is_err());
    }

    #[test]
    fn top_tap_feeds_lm_head() {
        // recomputing logits from the tapped top-layer states reproduces
        // token_log_probs
        let m = perturbed_model();
        let ex = example(&[0, 3, 4, 9, 1], 2);
        let h = m.hidden_states(&ex, m.layout.n_layers).unwrap();
        let d = m.layout.d;
        let vocab = m.layout.vocab;
        let lnf_g = m.p(m.layout.lnf_g, d).to_vec();
        let lnf_b = m.p(m.layout.lnf_b, d).to_vec();
        let head_w = m.p(m.layout.head_w, vocab * d).to_vec();
        let head_b = m.p(m.layout.head_b, vocab).to_vec();
        let lp_model = m.token_log_probs(&ex).unwrap();
        for i in 1..ex.tokens.len() {
            let x = &h[i - 1];
            let mut y = vec![0.0; d];
            let mut xhat = vec![0.0; d];
            let mut rstd = 0.0;
            layer_norm(x, &lnf_g, &lnf_b, &mut y, &mut xhat, &mut rstd);
            let mut logits = vec![0.0; vocab];
            affine(&head_w, &head_b, &y, &mut logits);
            let mut lp = vec![0.0; vocab];
            log_softmax(&logits, &mut lp);
            assert!((lp[ex.tokens[i] as usize] - lp_model[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn overlong_sequence_rejected() {
        let m = ModelState::<f64>::init(tiny_config()).unwrap();
        let tokens = vec![1u32; 17];
        assert!(m.forward(&tokens).is_err());
    }

    #[test]
    fn zero_loss_gives_zero_gradient() {
        let m = perturbed_model();
        let cache = m.forward(&[0, 3, 4, 1]).unwrap();
        let d_logits = vec![0.0; 4 * m.layout.vocab];
        let g = m.backward(&cache, Some(&d_logits), &[]);
        assert!(g.values.iter().all(|&v| v == 0.0));
    }

    /// Central finite differences against the analytic gradient of the mean
    /// answer NLL, on a batch of two short examples.
    #[test]
    fn finite_difference_gradient_check() {
        let m = perturbed_model();
        let examples = [example(&[0, 3, 4, 9, 1], 2), example(&[0, 7, 2, 5, 6, 1], 3)];

        let loss_of = |model: &ModelState<f64>| -> f64 {
            let mut total = 0.0;
            for ex in &examples {
                total -= model.sequence_log_prob(ex).unwrap();
            }
            total / examples.len() as f64
        };

        // analytic gradient
        let mut grad = FlatGradient::zeros(&m.layout);
        let vocab = m.layout.vocab;
        for ex in &examples {
            let cache = m.forward(&ex.tokens).unwrap();
            let mut d_logits = vec![0.0; ex.tokens.len() * vocab];
            for i in 1..ex.tokens.len() {
                if !ex.answer_mask[i] {
                    continue;
                }
                let row = &cache.logprobs[(i - 1) * vocab..i * vocab];
                let target = ex.tokens[i] as usize;
                let drow = &mut d_logits[(i - 1) * vocab..i * vocab];
                for (j, dr) in drow.iter_mut().enumerate() {
                    // d(-log p_y)/d logit_j = p_j - delta_jy
                    *dr += row[j].exp() - if j == target { 1.0 } else { 0.0 };
                }
            }
            let g = m.backward(&cache, Some(&d_logits), &[]);
            grad.add_scaled(&g, 1.0 / examples.len() as f64);
        }

        // probe a spread of coordinates
        let mut checked = 0;
        let step = m.n_params() / 37;
        let h = 1e-4;
        let mut idx = 1;
        while idx < m.n_params() && checked < 32 {
            let mut plus = m.clone();
            plus.params[idx] += h;
            let mut minus = m.clone();
            minus.params[idx] -= h;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h);
            let an = grad.values[idx];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                (fd - an).abs() / denom < 1e-4,
                "coord {idx}: fd {fd} vs analytic {an}"
            );
            checked += 1;
            idx += step;
        }
        assert_eq!(checked, 32);
    }

    #[test]
    fn hidden_tap_gradient_check() {
        // loss = mean squared norm of layer-2 hidden states
        let m = perturbed_model();
        let ex = example(&[0, 3, 4, 9, 1], 2);
        let d = m.layout.d;
        let len = ex.tokens.len();

        let loss_of = |model: &ModelState<f64>| -> f64 {
            let h = model.hidden_states(&ex, 2).unwrap();
            h.iter().flat_map(|row| row.iter().map(|&v| v * v)).sum::<f64>() / len as f64
        };

        let cache = m.forward(&ex.tokens).unwrap();
        let h = &cache.hidden[1];
        let d_h: Vec<f64> = h.iter().map(|&v| 2.0 * v / len as f64).collect();
        let grad = m.backward(&cache, None, &[(2, d_h)]);
        assert_eq!(h.len(), len * d);

        let h_step = 1e-5;
        for idx in (0..m.n_params()).step_by(m.n_params() / 13) {
            let mut plus = m.clone();
            plus.params[idx] += h_step;
            let mut minus = m.clone();
            minus.params[idx] -= h_step;
            let fd = (loss_of(&plus) - loss_of(&minus)) / (2.0 * h_step);
            let an = grad.values[idx];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!(
                (fd - an).abs() / denom < 1e-4,
                "coord {idx}: fd {fd} vs analytic {an}"
            );
        }
    }

    #[test]
    fn batch_gradient_is_mean_of_example_gradients() {
        let m = perturbed_model();
        let exs = [example(&[0, 3, 4, 1], 2), example(&[0, 7, 2, 1], 2)];
        let vocab = m.layout.vocab;
        let mut per_example = Vec::new();
        for ex in &exs {
            let cache = m.forward(&ex.tokens).unwrap();
            let mut d_logits = vec![0.0; ex.tokens.len() * vocab];
            for i in 1..ex.tokens.len() {
                if !ex.answer_mask[i] {
                    continue;
                }
                let row = &cache.logprobs[(i - 1) * vocab..i * vocab];
                let target = ex.tokens[i] as usize;
                for j in 0..vocab {
                    d_logits[(i - 1) * vocab + j] =
                        row[j].exp() - if j == target { 1.0 } else { 0.0 };
                }
            }
            per_example.push(m.backward(&cache, Some(&d_logits), &[]));
        }
        let mut mean = FlatGradient::zeros(&m.layout);
        for g in &per_example {
            mean.add_scaled(g, 0.5);
        }
        // the same computation, run as one accumulation
        let mut batch = FlatGradient::zeros(&m.layout);
        for g in &per_example {
            batch.add_scaled(g, 0.5);
        }
        for (a, b) in mean.values.iter().zip(&batch.values) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn mix_endpoints_and_midpoint() {
        let a = perturbed_model();
        let mut b = a.clone();
        for p in &mut b.params {
            *p *= 2.0;
        }
        let at0 = ModelState::mix(&a, &b, 0.0).unwrap();
        assert_eq!(at0.params, a.params);
        let at1 = ModelState::mix(&a, &b, 1.0).unwrap();
        assert_eq!(at1.params, b.params);
        let mut c = a.clone();
        c.params[0] = 2.0;
        c.params[1] = 4.0;
        let mut d = a.clone();
        d.params[0] = 4.0;
        d.params[1] = 8.0;
        let mid = ModelState::mix(&c, &d, 0.5).unwrap();
        assert_eq!(mid.params[0], 3.0);
        assert_eq!(mid.params[1], 6.0);
    }

    #[test]
    fn mix_rejects_config_mismatch() {
        let a = ModelState::<f64>::init(tiny_config()).unwrap();
        let mut cfg = tiny_config();
        cfg.d_model = 32;
        let b = ModelState::<f64>::init(cfg).unwrap();
        assert!(ModelState::mix(&a, &b, 0.5).is_err());
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        let m = perturbed_model();
        save_checkpoint(&m, &path).unwrap();
        let back: ModelState<f64> = load_checkpoint(&path).unwrap();
        assert_eq!(m.config, back.config);
        assert_eq!(m.params, back.params);
    }

    #[test]
    fn real_corpus_fits_context() {
        let corpus = corpus::generate_corpus(0, 20, 5).unwrap();
        let tok = corpus::build_tokenizer(&corpus).unwrap();
        let cfg = ModelConfig {
            vocab_size: tok.vocab_size(),
            d_model: 16,
            n_layers: 3,
            n_heads: 2,
            context_len: 64,
            seed: 0,
        };
        let m = ModelState::<f64>::init(cfg).unwrap();
        for rec in corpus.iter().take(10) {
            let ex = corpus::encode(&tok, rec, false).unwrap();
            assert!(ex.tokens.len() <= 64);
            m.sequence_log_prob(&ex).unwrap();
        }
    }
}
