//! Tape-level building blocks: heads, blocks and their initializers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{AttentionConfig, MobiusHeadParams, SoftmaxPolicy, INIT_STD};
use crate::autodiff::{ParamStore, Tape, Var, LAYER_NORM_EPS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A complex activation as two real tape variables.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cx {
    pub re: Var,
    pub im: Var,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Mobius,
    Vanilla,
}

impl HeadKind {
    pub fn name(&self) -> &'static str {
        match self {
            HeadKind::Mobius => "mobius",
            HeadKind::Vanilla => "vanilla",
        }
    }
}

/// Post-softmax weights of one head, `[B, n, n]` or `[n, n]`.
#[derive(Clone, Debug, PartialEq)]
pub struct HeadAttention {
    pub layer: usize,
    pub head: usize,
    pub kind: HeadKind,
    pub weights: Tensor,
}

/// Per-pass state: dropout randomness (training only) and optional capture of
/// attention weights.
#[derive(Debug, Default)]
pub struct ForwardCtx {
    pub dropout_rng: Option<ChaCha8Rng>,
    pub capture: Option<Vec<HeadAttention>>,
    pub layer: usize,
}

impl ForwardCtx {
    pub fn capturing() -> Self {
        Self { capture: Some(Vec::new()), ..Self::default() }
    }

    fn record(&mut self, t: &Tape, head: usize, kind: HeadKind, weights: Var) {
        if let Some(cap) = &mut self.capture {
            cap.push(HeadAttention { layer: self.layer, head, kind, weights: t.value(weights).clone() });
        }
    }
}

fn name(prefix: &str, leaf: &str) -> String {
    if prefix.is_empty() {
        leaf.to_string()
    } else {
        format!("{prefix}.{leaf}")
    }
}

fn bind_cx(t: &mut Tape, store: &ParamStore, prefix: &str, leaf: &str) -> Result<Cx> {
    Ok(Cx { re: t.param(store, &name(prefix, &format!("{leaf}_re")))?, im: t.param(store, &name(prefix, &format!("{leaf}_im")))? })
}

/// Tape handles for one Möbius head's parameters.
#[derive(Clone, Copy, Debug)]
pub struct MobiusHeadVars {
    pub a: Cx,
    pub b: Cx,
    pub c: Cx,
    pub d: Cx,
    pub key: Cx,
    pub value: Cx,
    pub pre: Option<Cx>,
}

impl MobiusHeadVars {
    pub fn bind(t: &mut Tape, store: &ParamStore, prefix: &str) -> Result<Self> {
        let pre = if store.contains(&name(prefix, "pre_re")) { Some(bind_cx(t, store, prefix, "pre")?) } else { None };
        Ok(Self {
            a: bind_cx(t, store, prefix, "a")?,
            b: bind_cx(t, store, prefix, "b")?,
            c: bind_cx(t, store, prefix, "c")?,
            d: bind_cx(t, store, prefix, "d")?,
            key: bind_cx(t, store, prefix, "key")?,
            value: bind_cx(t, store, prefix, "value")?,
            pre,
        })
    }
}

/// `(x + iy)(u + iv)` elementwise (with broadcasting) or, when `w` is a
/// matrix, `x·W` in complex arithmetic.
pub fn complex_linear(t: &mut Tape, w: Cx, x: Cx) -> Result<Cx> {
    let (rr, ii, ri, ir) = if t.shape(w.re).len() == 1 {
        (t.mul(x.re, w.re)?, t.mul(x.im, w.im)?, t.mul(x.re, w.im)?, t.mul(x.im, w.re)?)
    } else {
        (t.matmul(x.re, w.re)?, t.matmul(x.im, w.im)?, t.matmul(x.re, w.im)?, t.matmul(x.im, w.re)?)
    };
    Ok(Cx { re: t.sub(rr, ii)?, im: t.add(ri, ir)? })
}

/// `(aρ + b)/(cρ + d)` per dimension, as `num·conj(den)/max(|den|², eps)`.
pub fn mobius_query(t: &mut Tape, hv: &MobiusHeadVars, rho: Cx, eps: f64) -> Result<Cx> {
    let rho = match hv.pre {
        Some(w) => complex_linear(t, w, rho)?,
        None => rho,
    };
    let affine = |t: &mut Tape, s: Cx, off: Cx| -> Result<Cx> {
        let p = complex_linear(t, s, rho)?;
        Ok(Cx { re: t.add(p.re, off.re)?, im: t.add(p.im, off.im)? })
    };
    let num = affine(t, hv.a, hv.b)?;
    let den = affine(t, hv.c, hv.d)?;
    let dr2 = t.mul(den.re, den.re)?;
    let di2 = t.mul(den.im, den.im)?;
    let den_sq = t.add(dr2, di2)?;
    let den_sq = t.clamp_min(den_sq, eps);
    let nr_dr = t.mul(num.re, den.re)?;
    let ni_di = t.mul(num.im, den.im)?;
    let ni_dr = t.mul(num.im, den.re)?;
    let nr_di = t.mul(num.re, den.im)?;
    let qr = t.add(nr_dr, ni_di)?;
    let qi = t.sub(ni_dr, nr_di)?;
    Ok(Cx { re: t.div(qr, den_sq)?, im: t.div(qi, den_sq)? })
}

/// Scores `Q·Kᵀ` (or `Q·Kᴴ`), reduced to real logits per the softmax policy,
/// softmaxed per row and applied to complex `V`. Returns `(A, S)`.
pub fn complex_scores_attend(t: &mut Tape, q: Cx, k: Cx, v: Cx, cfg: &AttentionConfig) -> Result<(Cx, Var)> {
    let dh = *t.shape(q.re).last().expect("rank >= 2") as f64;
    let krt = t.transpose(k.re)?;
    let kit = t.transpose(k.im)?;
    let rr = t.matmul(q.re, krt)?;
    let ii = t.matmul(q.im, kit)?;
    // Kᴴ flips the sign of every term carrying K_i
    let re = if cfg.conj_transpose { t.add(rr, ii)? } else { t.sub(rr, ii)? };
    let logits = match cfg.softmax {
        SoftmaxPolicy::RealPart => re,
        SoftmaxPolicy::Magnitude => {
            let ri = t.matmul(q.re, kit)?;
            let ir = t.matmul(q.im, krt)?;
            let im = if cfg.conj_transpose { t.sub(ir, ri)? } else { t.add(ri, ir)? };
            let re2 = t.mul(re, re)?;
            let im2 = t.mul(im, im)?;
            let m2 = t.add(re2, im2)?;
            // keeps the adjoint of √ finite at an exactly-zero score
            let m2 = t.clamp_min(m2, 1e-300);
            t.sqrt(m2)
        }
    };
    let scaled = t.scale(logits, 1.0 / dh.sqrt());
    let s = t.softmax_rows(scaled)?;
    Ok((Cx { re: t.matmul(s, v.re)?, im: t.matmul(s, v.im)? }, s))
}

/// One Möbius head on its input slice `ρ`.
pub fn mobius_head(t: &mut Tape, hv: &MobiusHeadVars, rho: Cx, cfg: &AttentionConfig) -> Result<(Cx, Var)> {
    let q = mobius_query(t, hv, rho, cfg.pole_eps)?;
    let k = complex_linear(t, hv.key, rho)?;
    let v = complex_linear(t, hv.value, rho)?;
    complex_scores_attend(t, q, k, v, cfg)
}

/// Rotary tables for a fixed list of positions: `x ↦ x⊙cos + (x·P)⊙sin`,
/// where `P` maps each pair `(x₀, x₁)` to `(−x₁, x₀)`.
#[derive(Clone, Copy, Debug)]
pub struct Rotary {
    cos: Var,
    sin: Var,
    swap: Var,
}

impl Rotary {
    pub fn new(t: &mut Tape, positions: &[usize], d_head: usize) -> Result<Self> {
        if !d_head.is_multiple_of(2) {
            return Err(Error::OddHeadDim(d_head));
        }
        let n = positions.len();
        let mut cos = vec![0.0; n * d_head];
        let mut sin = vec![0.0; n * d_head];
        for (r, &p) in positions.iter().enumerate() {
            for i in 0..d_head / 2 {
                let theta = 10000f64.powf(-2.0 * i as f64 / d_head as f64);
                let (s, c) = (p as f64 * theta).sin_cos();
                cos[r * d_head + 2 * i] = c;
                cos[r * d_head + 2 * i + 1] = c;
                sin[r * d_head + 2 * i] = s;
                sin[r * d_head + 2 * i + 1] = s;
            }
        }
        let mut swap = Tensor::zeros(&[d_head, d_head]);
        for i in 0..d_head / 2 {
            swap.set(&[2 * i + 1, 2 * i], -1.0);
            swap.set(&[2 * i, 2 * i + 1], 1.0);
        }
        Ok(Self {
            cos: t.constant(Tensor::new(&[n, d_head], cos)?),
            sin: t.constant(Tensor::new(&[n, d_head], sin)?),
            swap: t.constant(swap),
        })
    }

    pub fn apply(&self, t: &mut Tape, x: Var) -> Result<Var> {
        let c = t.mul(x, self.cos)?;
        let px = t.matmul(x, self.swap)?;
        let s = t.mul(px, self.sin)?;
        t.add(c, s)
    }
}

pub fn linear(t: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let w = t.param(store, &name(prefix, "weight"))?;
    let b = t.param(store, &name(prefix, "bias"))?;
    let y = t.matmul(x, w)?;
    t.add(y, b)
}

pub fn layer_norm(t: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let g = t.param(store, &name(prefix, "gain"))?;
    let b = t.param(store, &name(prefix, "bias"))?;
    t.layer_norm(x, g, b, LAYER_NORM_EPS)
}

/// `W₂·gelu(W₁x + b₁) + b₂`.
pub fn feed_forward(t: &mut Tape, store: &ParamStore, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(t, store, &name(prefix, "in"), x)?;
    let h = t.gelu(h);
    linear(t, store, &name(prefix, "out"), h)
}

/// Inverted dropout; identity unless the context carries a training RNG.
pub fn dropout(t: &mut Tape, x: Var, p: f64, ctx: &mut ForwardCtx) -> Result<Var> {
    let Some(rng) = ctx.dropout_rng.as_mut() else { return Ok(x) };
    if p <= 0.0 {
        return Ok(x);
    }
    let shape = t.shape(x).to_vec();
    let n: usize = shape.iter().product();
    let keep = 1.0 / (1.0 - p);
    let mask: Vec<f64> = (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
    let m = t.constant(Tensor::new(&shape, mask)?);
    t.mul(x, m)
}

/// `n_heads` scaled dot-product heads over `x`, with Q/K/V projections named
/// `{prefix}.query|key|value` of width `n_heads·d_head`.
#[allow(clippy::too_many_arguments)]
pub fn vanilla_heads(
    t: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    n_heads: usize,
    d_head: usize,
    rope: Option<&Rotary>,
    ctx: &mut ForwardCtx,
) -> Result<Vec<Var>> {
    let q = linear(t, store, &name(prefix, "query"), x)?;
    let k = linear(t, store, &name(prefix, "key"), x)?;
    let v = linear(t, store, &name(prefix, "value"), x)?;
    let scale = 1.0 / (d_head as f64).sqrt();
    let mut out = Vec::with_capacity(n_heads);
    for h in 0..n_heads {
        let mut qh = t.slice(q, h * d_head, d_head)?;
        let mut kh = t.slice(k, h * d_head, d_head)?;
        let vh = t.slice(v, h * d_head, d_head)?;
        if let Some(r) = rope {
            qh = r.apply(t, qh)?;
            kh = r.apply(t, kh)?;
        }
        let kt = t.transpose(kh)?;
        let scores = t.matmul(qh, kt)?;
        let scores = t.scale(scores, scale);
        let s = t.softmax_rows(scores)?;
        ctx.record(t, h, HeadKind::Vanilla, s);
        out.push(t.matmul(s, vh)?);
    }
    Ok(out)
}

fn input_norm(t: &mut Tape, store: &ParamStore, prefix: &str, x: Cx) -> Result<Cx> {
    let ln = name(prefix, "input_ln");
    Ok(Cx { re: layer_norm(t, store, &ln, x.re)?, im: layer_norm(t, store, &ln, x.im)? })
}

fn mobius_heads(
    t: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: Cx,
    first_head: usize,
    cfg: &AttentionConfig,
    ctx: &mut ForwardCtx,
) -> Result<Vec<Cx>> {
    let dh = cfg.d_head();
    let mut out = Vec::new();
    for g in first_head..cfg.n_heads {
        let hv = MobiusHeadVars::bind(t, store, &name(prefix, &format!("attn.mobius.{g}")))?;
        let rho = Cx { re: t.slice(x.re, g * dh, dh)?, im: t.slice(x.im, g * dh, dh)? };
        let (a, s) = mobius_head(t, &hv, rho, cfg)?;
        ctx.record(t, g, HeadKind::Mobius, s);
        out.push(a);
    }
    Ok(out)
}

/// Residual `x + dropout(attn_out(a))`, layer-normed, then the feed-forward
/// sublayer with its own residual and norm.
#[allow(clippy::too_many_arguments)]
fn block_tail(
    t: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    a: Var,
    residual: Var,
    out: &str,
    ffn: &str,
    cfg: &AttentionConfig,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let a = linear(t, store, &name(prefix, out), a)?;
    let a = dropout(t, a, cfg.dropout, ctx)?;
    let a = t.add(a, residual)?;
    let a = layer_norm(t, store, &name(prefix, "attn_ln"), a)?;
    let f = feed_forward(t, store, &name(prefix, ffn), a)?;
    let f = t.add(f, a)?;
    layer_norm(t, store, &name(prefix, "ffn_ln"), f)
}

/// Standard post-norm encoder block with `n_heads` vanilla heads.
pub fn vanilla_layer(
    t: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    x: Var,
    cfg: &AttentionConfig,
    rope: Option<&Rotary>,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    let heads = vanilla_heads(t, store, &name(prefix, "attn"), x, cfg.n_heads, cfg.d_head(), rope, ctx)?;
    let joined = t.concat(&heads)?;
    block_tail(t, store, prefix, joined, x, "attn_out", "ffn", cfg, ctx)
}

/// Mixed-head block: shared input norm on both channels, vanilla heads on
/// `I'_r + I'_i`, Möbius heads on complex `I'` collapsed by channel addition,
/// then projection, residual `I'_r` and the feed-forward sublayer.
pub fn mixed_layer(
    t: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    input: Cx,
    cfg: &AttentionConfig,
    rope: Option<&Rotary>,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    cfg.validate()?;
    let x = input_norm(t, store, prefix, input)?;
    let nv = cfg.n_vanilla_heads();
    let mut heads = Vec::with_capacity(cfg.n_heads);
    if nv > 0 {
        let joined = t.add(x.re, x.im)?;
        heads = vanilla_heads(t, store, &name(prefix, "attn"), joined, nv, cfg.d_head(), rope, ctx)?;
    }
    for a in mobius_heads(t, store, prefix, x, nv, cfg, ctx)? {
        heads.push(t.add(a.re, a.im)?);
    }
    let joined = t.concat(&heads)?;
    block_tail(t, store, prefix, joined, x.re, "attn_out", "ffn", cfg, ctx)
}

/// All-Möbius block that keeps both channels to the end: separate output
/// projections and feed-forwards per channel, shared norms.
pub fn dual_layer(
    t: &mut Tape,
    store: &ParamStore,
    prefix: &str,
    input: Cx,
    cfg: &AttentionConfig,
    ctx: &mut ForwardCtx,
) -> Result<Cx> {
    check_all_mobius(cfg)?;
    let x = input_norm(t, store, prefix, input)?;
    let heads = mobius_heads(t, store, prefix, x, 0, cfg, ctx)?;
    let re: Vec<Var> = heads.iter().map(|c| c.re).collect();
    let im: Vec<Var> = heads.iter().map(|c| c.im).collect();
    let ar = t.concat(&re)?;
    let ai = t.concat(&im)?;
    Ok(Cx {
        re: block_tail(t, store, prefix, ar, x.re, "attn_out_re", "ffn_re", cfg, ctx)?,
        im: block_tail(t, store, prefix, ai, x.im, "attn_out_im", "ffn_im", cfg, ctx)?,
    })
}

fn normal(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let dist = Normal::new(0.0, INIT_STD).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

pub(crate) fn init_linear(store: &mut ParamStore, prefix: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) {
    store.insert(name(prefix, "weight"), normal(&[d_in, d_out], rng));
    store.insert(name(prefix, "bias"), Tensor::zeros(&[d_out]));
}

pub(crate) fn init_layer_norm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.insert(name(prefix, "gain"), Tensor::ones(&[d]));
    store.insert(name(prefix, "bias"), Tensor::zeros(&[d]));
}

fn init_ffn(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut impl Rng) {
    init_linear(store, &name(prefix, "in"), d, 4 * d, rng);
    init_linear(store, &name(prefix, "out"), 4 * d, d, rng);
}

fn init_vanilla_projections(store: &mut ParamStore, prefix: &str, d: usize, width: usize, rng: &mut impl Rng) {
    for p in ["query", "key", "value"] {
        init_linear(store, &name(prefix, p), d, width, rng);
    }
}

fn init_mobius_heads(
    store: &mut ParamStore,
    prefix: &str,
    first: usize,
    cfg: &AttentionConfig,
    rng: &mut impl Rng,
) -> Result<()> {
    for g in first..cfg.n_heads {
        MobiusHeadParams::init(cfg, rng)?.write_to(store, &name(prefix, &format!("attn.mobius.{g}")));
    }
    Ok(())
}

pub fn init_vanilla_layer(store: &mut ParamStore, prefix: &str, cfg: &AttentionConfig, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_model;
    init_vanilla_projections(store, &name(prefix, "attn"), d, d, rng);
    init_linear(store, &name(prefix, "attn_out"), d, d, rng);
    init_layer_norm(store, &name(prefix, "attn_ln"), d);
    init_ffn(store, &name(prefix, "ffn"), d, rng);
    init_layer_norm(store, &name(prefix, "ffn_ln"), d);
    Ok(())
}

pub fn init_mixed_layer(store: &mut ParamStore, prefix: &str, cfg: &AttentionConfig, rng: &mut impl Rng) -> Result<()> {
    cfg.validate()?;
    let d = cfg.d_model;
    let nv = cfg.n_vanilla_heads();
    init_layer_norm(store, &name(prefix, "input_ln"), d);
    if nv > 0 {
        init_vanilla_projections(store, &name(prefix, "attn"), d, nv * cfg.d_head(), rng);
    }
    init_mobius_heads(store, prefix, nv, cfg, rng)?;
    init_linear(store, &name(prefix, "attn_out"), d, d, rng);
    init_layer_norm(store, &name(prefix, "attn_ln"), d);
    init_ffn(store, &name(prefix, "ffn"), d, rng);
    init_layer_norm(store, &name(prefix, "ffn_ln"), d);
    Ok(())
}

fn check_all_mobius(cfg: &AttentionConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.n_mobius_heads != cfg.n_heads {
        return Err(Error::Config(format!(
            "dual-channel layer has no vanilla heads, but {} were requested",
            cfg.n_vanilla_heads()
        )));
    }
    Ok(())
}

pub fn init_dual_layer(store: &mut ParamStore, prefix: &str, cfg: &AttentionConfig, rng: &mut impl Rng) -> Result<()> {
    check_all_mobius(cfg)?;
    let d = cfg.d_model;
    init_layer_norm(store, &name(prefix, "input_ln"), d);
    init_mobius_heads(store, prefix, 0, cfg, rng)?;
    for ch in ["re", "im"] {
        init_linear(store, &name(prefix, &format!("attn_out_{ch}")), d, d, rng);
        init_ffn(store, &name(prefix, &format!("ffn_{ch}")), d, rng);
    }
    init_layer_norm(store, &name(prefix, "attn_ln"), d);
    init_layer_norm(store, &name(prefix, "ffn_ln"), d);
    Ok(())
}
