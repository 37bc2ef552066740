//! A small GPT-style causal decoder with hand-written backward pass.
//!
//! Language positions use a token embedding, image slots a linear projection
//! of the visual feature; both get learned position and segment embeddings.
//! Blocks are pre-LayerNorm: `x += attn(ln1(x)); x += mlp(ln2(x))`, with a
//! tanh-approximated GELU. All parameters live in one flat vector so that
//! optimizers and finite-difference checks can treat them uniformly.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::sequence::{DialogueSequence, Element, SEGMENTS};
use crate::error::{Error, Result};
use crate::util::rng;

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Input visual feature dimension, projected to `d_model`.
    pub feature_dim: usize,
}

impl DecoderConfig {
    /// Desk-scale defaults: 2 layers, width 64, 2 heads.
    pub fn toy(vocab_size: usize, feature_dim: usize) -> Self {
        DecoderConfig {
            layers: 2,
            d_model: 64,
            heads: 2,
            vocab_size,
            max_len: 256,
            feature_dim,
        }
    }

    /// GPT-2 small geometry (12 layers, width 768, 12 heads, 1024 positions).
    pub fn gpt2_small(vocab_size: usize, feature_dim: usize) -> Self {
        DecoderConfig {
            layers: 12,
            d_model: 768,
            heads: 12,
            vocab_size,
            max_len: 1024,
            feature_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.d_model == 0 || self.heads == 0 || self.vocab_size == 0 {
            return Err(Error::InvalidConfig("decoder sizes must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        if self.max_len == 0 || self.feature_dim == 0 {
            return Err(Error::InvalidConfig("max_len and feature_dim must be positive".into()));
        }
        Ok(())
    }

    pub(crate) fn layout(&self) -> Layout {
        Layout::new(self)
    }

    pub fn param_count(&self) -> usize {
        self.layout().total
    }
}

#[derive(Clone, Debug)]
pub(crate) struct LayerLayout {
    ln1_g: Range<usize>,
    ln1_b: Range<usize>,
    w_qkv: Range<usize>,
    b_qkv: Range<usize>,
    w_o: Range<usize>,
    b_o: Range<usize>,
    ln2_g: Range<usize>,
    ln2_b: Range<usize>,
    w_fc: Range<usize>,
    b_fc: Range<usize>,
    w_proj: Range<usize>,
    b_proj: Range<usize>,
}

#[derive(Clone, Debug)]
pub(crate) struct Layout {
    tok_emb: Range<usize>,
    img_w: Range<usize>,
    img_b: Range<usize>,
    pos_emb: Range<usize>,
    seg_emb: Range<usize>,
    layers: Vec<LayerLayout>,
    lnf_g: Range<usize>,
    lnf_b: Range<usize>,
    w_out: Range<usize>,
    b_out: Range<usize>,
    total: usize,
}

impl Layout {
    fn new(c: &DecoderConfig) -> Self {
        let d = c.d_model;
        let mut at = 0;
        let mut take = |n: usize| {
            let r = at..at + n;
            at += n;
            r
        };
        let tok_emb = take(c.vocab_size * d);
        let img_w = take(c.feature_dim * d);
        let img_b = take(d);
        let pos_emb = take(c.max_len * d);
        let seg_emb = take(SEGMENTS * d);
        let layers = (0..c.layers)
            .map(|_| LayerLayout {
                ln1_g: take(d),
                ln1_b: take(d),
                w_qkv: take(d * 3 * d),
                b_qkv: take(3 * d),
                w_o: take(d * d),
                b_o: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w_fc: take(d * 4 * d),
                b_fc: take(4 * d),
                w_proj: take(4 * d * d),
                b_proj: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let w_out = take(d * c.vocab_size);
        let b_out = take(c.vocab_size);
        Layout {
            tok_emb,
            img_w,
            img_b,
            pos_emb,
            seg_emb,
            layers,
            lnf_g,
            lnf_b,
            w_out,
            b_out,
            total: at,
        }
    }

    /// Named tensor ranges in layout order, for checkpoints.
    fn named(&self) -> Vec<(String, Range<usize>)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.tok_emb.clone()),
            ("img_w".to_string(), self.img_w.clone()),
            ("img_b".to_string(), self.img_b.clone()),
            ("pos_emb".to_string(), self.pos_emb.clone()),
            ("seg_emb".to_string(), self.seg_emb.clone()),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            for (name, r) in [
                ("ln1_g", &l.ln1_g),
                ("ln1_b", &l.ln1_b),
                ("w_qkv", &l.w_qkv),
                ("b_qkv", &l.b_qkv),
                ("w_o", &l.w_o),
                ("b_o", &l.b_o),
                ("ln2_g", &l.ln2_g),
                ("ln2_b", &l.ln2_b),
                ("w_fc", &l.w_fc),
                ("b_fc", &l.b_fc),
                ("w_proj", &l.w_proj),
                ("b_proj", &l.b_proj),
            ] {
                out.push((format!("layers.{i}.{name}"), r.clone()));
            }
        }
        out.extend([
            ("lnf_g".to_string(), self.lnf_g.clone()),
            ("lnf_b".to_string(), self.lnf_b.clone()),
            ("w_out".to_string(), self.w_out.clone()),
            ("b_out".to_string(), self.b_out.clone()),
        ]);
        out
    }

    fn is_gain(&self, index: usize) -> bool {
        self.lnf_g.contains(&index)
            || self
                .layers
                .iter()
                .any(|l| l.ln1_g.contains(&index) || l.ln2_g.contains(&index))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderParams {
    pub data: Vec<f64>,
}

impl DecoderParams {
    pub fn zeros(config: &DecoderConfig) -> Self {
        DecoderParams {
            data: vec![0.0; config.param_count()],
        }
    }

    /// Gaussian weights (σ = 0.02), unit LayerNorm gains, zero biases.
    pub fn init(config: &DecoderConfig, seed: u64) -> Self {
        let layout = config.layout();
        let mut r = rng(seed);
        let mut data = vec![0.0; layout.total];
        let biases: Vec<Range<usize>> = {
            let mut b = vec![layout.img_b.clone(), layout.lnf_b.clone(), layout.b_out.clone()];
            for l in &layout.layers {
                b.extend([
                    l.ln1_b.clone(),
                    l.b_qkv.clone(),
                    l.b_o.clone(),
                    l.ln2_b.clone(),
                    l.b_fc.clone(),
                    l.b_proj.clone(),
                ]);
            }
            b
        };
        for (i, x) in data.iter_mut().enumerate() {
            *x = if layout.is_gain(i) {
                1.0
            } else if biases.iter().any(|b| b.contains(&i)) {
                0.0
            } else {
                INIT_STD * r.sample::<f64, _>(StandardNormal)
            };
        }
        DecoderParams { data }
    }

    pub fn to_named(&self, config: &DecoderConfig) -> BTreeMap<String, Vec<f64>> {
        config
            .layout()
            .named()
            .into_iter()
            .map(|(n, r)| (n, self.data[r].to_vec()))
            .collect()
    }

    pub fn from_named(config: &DecoderConfig, tensors: &BTreeMap<String, Vec<f64>>) -> Result<Self> {
        let layout = config.layout();
        let mut data = vec![0.0; layout.total];
        for (name, range) in layout.named() {
            let t = tensors
                .get(&name)
                .ok_or_else(|| Error::DimensionMismatch(format!("missing tensor `{name}`")))?;
            if t.len() != range.len() {
                return Err(Error::DimensionMismatch(format!(
                    "tensor `{name}` has {} values, expected {}",
                    t.len(),
                    range.len()
                )));
            }
            data[range].copy_from_slice(t);
        }
        Ok(DecoderParams { data })
    }
}

// ---------------------------------------------------------------------------
// Kernels. Matrices are row-major; weights are stored [in, out].

fn matmul_forward(out: &mut [f64], inp: &[f64], w: &[f64], b: &[f64], rows: usize, ic: usize, oc: usize) {
    for r in 0..rows {
        let o = &mut out[r * oc..(r + 1) * oc];
        o.copy_from_slice(b);
        for (i, &a) in inp[r * ic..(r + 1) * ic].iter().enumerate() {
            if a != 0.0 {
                for (oo, ww) in o.iter_mut().zip(&w[i * oc..(i + 1) * oc]) {
                    *oo += a * ww;
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn matmul_backward(
    dinp: &mut [f64],
    dw: &mut [f64],
    db: &mut [f64],
    dout: &[f64],
    inp: &[f64],
    w: &[f64],
    rows: usize,
    ic: usize,
    oc: usize,
) {
    for r in 0..rows {
        let drow = &dout[r * oc..(r + 1) * oc];
        for (o, g) in db.iter_mut().zip(drow) {
            *o += g;
        }
        for i in 0..ic {
            let wrow = &w[i * oc..(i + 1) * oc];
            dinp[r * ic + i] += wrow.iter().zip(drow).map(|(a, b)| a * b).sum::<f64>();
            let a = inp[r * ic + i];
            if a != 0.0 {
                for (dd, g) in dw[i * oc..(i + 1) * oc].iter_mut().zip(drow) {
                    *dd += a * g;
                }
            }
        }
    }
}

struct LnCache {
    out: Vec<f64>,
    mean: Vec<f64>,
    rstd: Vec<f64>,
}

fn layernorm_forward(inp: &[f64], g: &[f64], b: &[f64], rows: usize, d: usize) -> LnCache {
    let mut out = vec![0.0; rows * d];
    let mut mean = vec![0.0; rows];
    let mut rstd = vec![0.0; rows];
    for r in 0..rows {
        let x = &inp[r * d..(r + 1) * d];
        let m = x.iter().sum::<f64>() / d as f64;
        let v = x.iter().map(|xi| (xi - m) * (xi - m)).sum::<f64>() / d as f64;
        let s = 1.0 / (v + LN_EPS).sqrt();
        for i in 0..d {
            out[r * d + i] = (x[i] - m) * s * g[i] + b[i];
        }
        mean[r] = m;
        rstd[r] = s;
    }
    LnCache { out, mean, rstd }
}

#[allow(clippy::too_many_arguments)]
fn layernorm_backward(
    dinp: &mut [f64],
    dg: &mut [f64],
    db: &mut [f64],
    dout: &[f64],
    inp: &[f64],
    g: &[f64],
    cache: &LnCache,
    rows: usize,
    d: usize,
) {
    for r in 0..rows {
        let x = &inp[r * d..(r + 1) * d];
        let dy = &dout[r * d..(r + 1) * d];
        let (m, s) = (cache.mean[r], cache.rstd[r]);
        let mut dnorm_mean = 0.0;
        let mut dnorm_norm_mean = 0.0;
        for i in 0..d {
            let norm = (x[i] - m) * s;
            let dnorm = g[i] * dy[i];
            dnorm_mean += dnorm;
            dnorm_norm_mean += dnorm * norm;
        }
        dnorm_mean /= d as f64;
        dnorm_norm_mean /= d as f64;
        for i in 0..d {
            let norm = (x[i] - m) * s;
            let dnorm = g[i] * dy[i];
            db[i] += dy[i];
            dg[i] += norm * dy[i];
            dinp[r * d + i] += (dnorm - dnorm_mean - norm * dnorm_norm_mean) * s;
        }
    }
}

const GELU_SCALE: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_SCALE * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let cube = 0.044715 * x * x * x;
    let t = (GELU_SCALE * (x + cube)).tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * GELU_SCALE * (1.0 + 3.0 * 0.044715 * x * x)
}

/// Causal multi-head attention over packed `qkv` rows `[q | k | v]`.
/// Returns the attended output `[rows, d]` and attention weights
/// `[heads, rows, rows]` (upper triangle zero).
fn attention_forward(qkv: &[f64], rows: usize, d: usize, heads: usize) -> (Vec<f64>, Vec<f64>) {
    let hs = d / heads;
    let scale = 1.0 / (hs as f64).sqrt();
    let mut out = vec![0.0; rows * d];
    let mut att = vec![0.0; heads * rows * rows];
    for h in 0..heads {
        for t in 0..rows {
            let q = &qkv[t * 3 * d + h * hs..t * 3 * d + (h + 1) * hs];
            let a = &mut att[h * rows * rows + t * rows..h * rows * rows + (t + 1) * rows];
            let mut max = f64::NEG_INFINITY;
            for t2 in 0..=t {
                let k = &qkv[t2 * 3 * d + d + h * hs..t2 * 3 * d + d + (h + 1) * hs];
                let s = q.iter().zip(k).map(|(x, y)| x * y).sum::<f64>() * scale;
                a[t2] = s;
                max = max.max(s);
            }
            let mut total = 0.0;
            for v in a.iter_mut().take(t + 1) {
                *v = (*v - max).exp();
                total += *v;
            }
            for v in a.iter_mut().take(t + 1) {
                *v /= total;
            }
            let o = &mut out[t * d + h * hs..t * d + (h + 1) * hs];
            for t2 in 0..=t {
                let v = &qkv[t2 * 3 * d + 2 * d + h * hs..t2 * 3 * d + 2 * d + (h + 1) * hs];
                for (oi, vi) in o.iter_mut().zip(v) {
                    *oi += a[t2] * vi;
                }
            }
        }
    }
    (out, att)
}

fn attention_backward(dqkv: &mut [f64], dout: &[f64], qkv: &[f64], att: &[f64], rows: usize, d: usize, heads: usize) {
    let hs = d / heads;
    let scale = 1.0 / (hs as f64).sqrt();
    let mut datt = vec![0.0; rows];
    let mut dpre = vec![0.0; rows];
    for h in 0..heads {
        for t in 0..rows {
            let a = &att[h * rows * rows + t * rows..h * rows * rows + (t + 1) * rows];
            let dout_t = &dout[t * d + h * hs..t * d + (h + 1) * hs];
            for t2 in 0..=t {
                let vo = t2 * 3 * d + 2 * d + h * hs;
                let mut acc = 0.0;
                for i in 0..hs {
                    acc += qkv[vo + i] * dout_t[i];
                    dqkv[vo + i] += a[t2] * dout_t[i];
                }
                datt[t2] = acc;
            }
            let weighted: f64 = (0..=t).map(|t2| a[t2] * datt[t2]).sum();
            for t2 in 0..=t {
                dpre[t2] = a[t2] * (datt[t2] - weighted);
            }
            let qo = t * 3 * d + h * hs;
            for t2 in 0..=t {
                let ko = t2 * 3 * d + d + h * hs;
                let g = dpre[t2] * scale;
                for i in 0..hs {
                    dqkv[qo + i] += qkv[ko + i] * g;
                    dqkv[ko + i] += qkv[qo + i] * g;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------

struct LayerCache {
    x_in: Vec<f64>,
    ln1: LnCache,
    qkv: Vec<f64>,
    att: Vec<f64>,
    atty: Vec<f64>,
    x_mid: Vec<f64>,
    ln2: LnCache,
    fc: Vec<f64>,
    act: Vec<f64>,
}

/// Activations retained for the backward pass.
pub struct ForwardCache {
    rows: usize,
    layers: Vec<LayerCache>,
    x_final: Vec<f64>,
    lnf: LnCache,
    /// `[rows, vocab]`
    pub logits: Vec<f64>,
}

impl ForwardCache {
    /// Attention weights of `layer`, shape `[heads, rows, rows]`.
    pub fn attention(&self, layer: usize) -> &[f64] {
        &self.layers[layer].att
    }
}

fn check_inputs(config: &DecoderConfig, params: &DecoderParams, seq: &DialogueSequence) -> Result<()> {
    if params.data.len() != config.param_count() {
        return Err(Error::DimensionMismatch(format!(
            "parameter vector has {} values, config needs {}",
            params.data.len(),
            config.param_count()
        )));
    }
    if seq.len() > config.max_len {
        return Err(Error::SequenceTooLong {
            len: seq.len(),
            max: config.max_len,
        });
    }
    for e in &seq.elements {
        match e {
            Element::Token(t) if *t >= config.vocab_size => {
                return Err(Error::DimensionMismatch(format!("token id {t} outside vocabulary")))
            }
            Element::Image(i) if seq.images[*i].len() != config.feature_dim => {
                return Err(Error::DimensionMismatch(format!(
                    "image feature has {} dims, expected {}",
                    seq.images[*i].len(),
                    config.feature_dim
                )))
            }
            _ => {}
        }
    }
    Ok(())
}

/// Logits `[len, vocab]` for every position of `seq`.
pub fn forward(config: &DecoderConfig, params: &DecoderParams, seq: &DialogueSequence) -> Result<ForwardCache> {
    check_inputs(config, params, seq)?;
    let p = &params.data;
    let lay = config.layout();
    let (rows, d, v) = (seq.len(), config.d_model, config.vocab_size);

    let mut x = vec![0.0; rows * d];
    for (t, e) in seq.elements.iter().enumerate() {
        let row = &mut x[t * d..(t + 1) * d];
        match e {
            Element::Token(id) => row.copy_from_slice(&p[lay.tok_emb.start + id * d..][..d]),
            Element::Image(i) => {
                matmul_forward(row, &seq.images[*i], &p[lay.img_w.clone()], &p[lay.img_b.clone()], 1, config.feature_dim, d)
            }
        }
        let pos = &p[lay.pos_emb.start + t * d..][..d];
        let seg = &p[lay.seg_emb.start + seq.segments[t] as usize * d..][..d];
        for i in 0..d {
            row[i] += pos[i] + seg[i];
        }
    }

    let mut layers = Vec::with_capacity(config.layers);
    for l in &lay.layers {
        let ln1 = layernorm_forward(&x, &p[l.ln1_g.clone()], &p[l.ln1_b.clone()], rows, d);
        let mut qkv = vec![0.0; rows * 3 * d];
        matmul_forward(&mut qkv, &ln1.out, &p[l.w_qkv.clone()], &p[l.b_qkv.clone()], rows, d, 3 * d);
        let (atty, att) = attention_forward(&qkv, rows, d, config.heads);
        let mut attn_out = vec![0.0; rows * d];
        matmul_forward(&mut attn_out, &atty, &p[l.w_o.clone()], &p[l.b_o.clone()], rows, d, d);
        let x_mid: Vec<f64> = x.iter().zip(&attn_out).map(|(a, b)| a + b).collect();
        let ln2 = layernorm_forward(&x_mid, &p[l.ln2_g.clone()], &p[l.ln2_b.clone()], rows, d);
        let mut fc = vec![0.0; rows * 4 * d];
        matmul_forward(&mut fc, &ln2.out, &p[l.w_fc.clone()], &p[l.b_fc.clone()], rows, d, 4 * d);
        let act: Vec<f64> = fc.iter().map(|z| gelu(*z)).collect();
        let mut proj = vec![0.0; rows * d];
        matmul_forward(&mut proj, &act, &p[l.w_proj.clone()], &p[l.b_proj.clone()], rows, 4 * d, d);
        let x_out: Vec<f64> = x_mid.iter().zip(&proj).map(|(a, b)| a + b).collect();
        layers.push(LayerCache {
            x_in: std::mem::replace(&mut x, x_out),
            ln1,
            qkv,
            att,
            atty,
            x_mid,
            ln2,
            fc,
            act,
        });
    }

    let lnf = layernorm_forward(&x, &p[lay.lnf_g.clone()], &p[lay.lnf_b.clone()], rows, d);
    let mut logits = vec![0.0; rows * v];
    matmul_forward(&mut logits, &lnf.out, &p[lay.w_out.clone()], &p[lay.b_out.clone()], rows, d, v);
    Ok(ForwardCache {
        rows,
        layers,
        x_final: x,
        lnf,
        logits,
    })
}

fn pair_mut<'a>(data: &'a mut [f64], a: &Range<usize>, b: &Range<usize>) -> (&'a mut [f64], &'a mut [f64]) {
    assert!(a.end <= b.start, "ranges must be ordered and disjoint");
    let (lo, hi) = data.split_at_mut(b.start);
    (&mut lo[a.clone()], &mut hi[..b.len()])
}

/// Gradient of the loss with respect to every parameter, given the gradient
/// with respect to the logits.
pub fn backward(
    config: &DecoderConfig,
    params: &DecoderParams,
    seq: &DialogueSequence,
    cache: &ForwardCache,
    dlogits: &[f64],
) -> Vec<f64> {
    let p = &params.data;
    let lay = config.layout();
    let (rows, d, v) = (cache.rows, config.d_model, config.vocab_size);
    let mut grad = vec![0.0; lay.total];

    let mut dlnf = vec![0.0; rows * d];
    {
        let (dw, db) = pair_mut(&mut grad, &lay.w_out, &lay.b_out);
        matmul_backward(&mut dlnf, dw, db, dlogits, &cache.lnf.out, &p[lay.w_out.clone()], rows, d, v);
    }
    let mut dx = vec![0.0; rows * d];
    {
        let (dg, db) = pair_mut(&mut grad, &lay.lnf_g, &lay.lnf_b);
        layernorm_backward(&mut dx, dg, db, &dlnf, &cache.x_final, &p[lay.lnf_g.clone()], &cache.lnf, rows, d);
    }

    for (l, c) in lay.layers.iter().zip(&cache.layers).rev() {
        // x_out = x_mid + proj(gelu(fc(ln2(x_mid))))
        let mut dact = vec![0.0; rows * 4 * d];
        {
            let (dw, db) = pair_mut(&mut grad, &l.w_proj, &l.b_proj);
            matmul_backward(&mut dact, dw, db, &dx, &c.act, &p[l.w_proj.clone()], rows, 4 * d, d);
        }
        let dfc: Vec<f64> = dact.iter().zip(&c.fc).map(|(g, z)| g * gelu_grad(*z)).collect();
        let mut dln2 = vec![0.0; rows * d];
        {
            let (dw, db) = pair_mut(&mut grad, &l.w_fc, &l.b_fc);
            matmul_backward(&mut dln2, dw, db, &dfc, &c.ln2.out, &p[l.w_fc.clone()], rows, d, 4 * d);
        }
        let mut dx_mid = dx;
        {
            let (dg, db) = pair_mut(&mut grad, &l.ln2_g, &l.ln2_b);
            layernorm_backward(&mut dx_mid, dg, db, &dln2, &c.x_mid, &p[l.ln2_g.clone()], &c.ln2, rows, d);
        }
        // x_mid = x_in + o(attn(qkv(ln1(x_in))))
        let mut datty = vec![0.0; rows * d];
        {
            let (dw, db) = pair_mut(&mut grad, &l.w_o, &l.b_o);
            matmul_backward(&mut datty, dw, db, &dx_mid, &c.atty, &p[l.w_o.clone()], rows, d, d);
        }
        let mut dqkv = vec![0.0; rows * 3 * d];
        attention_backward(&mut dqkv, &datty, &c.qkv, &c.att, rows, d, config.heads);
        let mut dln1 = vec![0.0; rows * d];
        {
            let (dw, db) = pair_mut(&mut grad, &l.w_qkv, &l.b_qkv);
            matmul_backward(&mut dln1, dw, db, &dqkv, &c.ln1.out, &p[l.w_qkv.clone()], rows, d, 3 * d);
        }
        let mut dx_in = dx_mid;
        {
            let (dg, db) = pair_mut(&mut grad, &l.ln1_g, &l.ln1_b);
            layernorm_backward(&mut dx_in, dg, db, &dln1, &c.x_in, &p[l.ln1_g.clone()], &c.ln1, rows, d);
        }
        dx = dx_in;
    }

    for (t, e) in seq.elements.iter().enumerate() {
        let g = &dx[t * d..(t + 1) * d];
        let add = |grad: &mut [f64], start: usize| {
            for (a, b) in grad[start..start + d].iter_mut().zip(g) {
                *a += b;
            }
        };
        add(&mut grad, lay.pos_emb.start + t * d);
        add(&mut grad, lay.seg_emb.start + seq.segments[t] as usize * d);
        match e {
            Element::Token(id) => add(&mut grad, lay.tok_emb.start + id * d),
            Element::Image(i) => {
                let mut unused = vec![0.0; config.feature_dim];
                let (dw, db) = pair_mut(&mut grad, &lay.img_w, &lay.img_b);
                matmul_backward(&mut unused, dw, db, g, &seq.images[*i], &p[lay.img_w.clone()], 1, config.feature_dim, d);
            }
        }
    }
    grad
}

/// Mean next-token cross-entropy over trained positions, and its gradient
/// with respect to the logits. Untrained positions get exactly zero
/// gradient. Returns a zero loss when nothing is trained.
pub fn masked_cross_entropy(logits: &[f64], vocab: usize, seq: &DialogueSequence) -> (f64, Vec<f64>) {
    let mut dlogits = vec![0.0; logits.len()];
    let count = seq.mask_count();
    if count == 0 {
        return (0.0, dlogits);
    }
    let scale = 1.0 / count as f64;
    let mut loss = 0.0;
    for i in 0..seq.len() {
        let Some(target) = seq.target(i) else { continue };
        let row = &logits[i * vocab..(i + 1) * vocab];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let total: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let log_z = max + total.ln();
        loss += log_z - row[target];
        let drow = &mut dlogits[i * vocab..(i + 1) * vocab];
        for (j, dz) in drow.iter_mut().enumerate() {
            let p = (row[j] - log_z).exp();
            *dz = scale * (p - if j == target { 1.0 } else { 0.0 });
        }
    }
    (loss * scale, dlogits)
}

/// Loss and full parameter gradient for one sequence.
pub fn loss_and_grad(config: &DecoderConfig, params: &DecoderParams, seq: &DialogueSequence) -> Result<(f64, Vec<f64>)> {
    let cache = forward(config, params, seq)?;
    let (loss, dlogits) = masked_cross_entropy(&cache.logits, config.vocab_size, seq);
    Ok((loss, backward(config, params, seq, &cache, &dlogits)))
}

pub fn loss(config: &DecoderConfig, params: &DecoderParams, seq: &DialogueSequence) -> Result<f64> {
    let cache = forward(config, params, seq)?;
    Ok(masked_cross_entropy(&cache.logits, config.vocab_size, seq).0)
}
