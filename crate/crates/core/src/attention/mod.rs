//! Vanilla, Möbius and rotary attention, and the two complex-aware encoder
//! blocks built from them.
//!
//! Every forward pass is written once, as tape code in [`graph`]. The free
//! functions here run that same code on a gradient-free tape so single heads
//! can be evaluated and tested directly on [`ComplexTensor`]s.
//!
//! A Möbius head reads the `d_head`-wide column slice of the normalized input
//! that belongs to its head index; vanilla heads take the first head indices,
//! Möbius heads the remaining ones, so the joined output keeps the vanilla
//! block first.

pub mod graph;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ParamStore, Tape};
use crate::ctensor::ComplexTensor;
use crate::error::{Error, Result};
use crate::geometry::MobiusParams;
use crate::tensor::Tensor;

pub use graph::{Cx, ForwardCtx, HeadAttention, HeadKind};

/// Spread of the Gaussian noise used by every initializer.
pub const INIT_STD: f64 = 0.02;
/// Lower clamp on `|cρ + d|²` in the Möbius query.
pub const POLE_EPS: f64 = 1e-8;

macro_rules! policy_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
        pub enum $name {
            #[default]
            $($variant),+
        }

        impl $name {
            pub fn name(&self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.name())
            }
        }

        impl FromStr for $name {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($name::$variant),)+
                    _ => Err(Error::Config(format!(
                        concat!("unknown ", stringify!($name), " '{}' (expected one of: {})"),
                        s,
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

// `#[default]` lands on the first variant of each list.
policy_enum!(
    /// Shape of the Möbius key/value weights.
    KvPolicy { Diagonal => "diagonal", Full => "full" }
);
policy_enum!(
    /// Whether a learned linear map precedes the Möbius query.
    QueryPolicy { Mobius => "mobius", LinearThenMobius => "linear_then_mobius" }
);
policy_enum!(
    /// How the complex score matrix becomes real softmax logits.
    SoftmaxPolicy { RealPart => "real_part", Magnitude => "magnitude" }
);
policy_enum!(
    /// Where positional information enters.
    PositionalPolicy { ComplexChannel => "complex_channel", Rotary => "rotary" }
);

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionConfig {
    pub d_model: usize,
    pub n_heads: usize,
    /// Möbius heads in a mixed layer; the rest are vanilla.
    pub n_mobius_heads: usize,
    pub kv: KvPolicy,
    pub query: QueryPolicy,
    pub softmax: SoftmaxPolicy,
    pub positional: PositionalPolicy,
    /// Score with `Q·Kᴴ` instead of the plain `Q·Kᵀ`.
    pub conj_transpose: bool,
    pub dropout: f64,
    pub pole_eps: f64,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_mobius_heads: 2,
            kv: KvPolicy::Diagonal,
            query: QueryPolicy::Mobius,
            softmax: SoftmaxPolicy::RealPart,
            positional: PositionalPolicy::ComplexChannel,
            conj_transpose: false,
            dropout: 0.0,
            pole_eps: POLE_EPS,
        }
    }
}

impl AttentionConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn n_vanilla_heads(&self) -> usize {
        self.n_heads - self.n_mobius_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_heads == 0 || self.d_model == 0 {
            return Err(Error::Config("d_model and n_heads must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_mobius_heads > self.n_heads {
            return Err(Error::Config(format!(
                "{} Möbius heads requested out of {}",
                self.n_mobius_heads, self.n_heads
            )));
        }
        if self.positional == PositionalPolicy::Rotary && !self.d_head().is_multiple_of(2) {
            return Err(Error::OddHeadDim(self.d_head()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(self.pole_eps >= 0.0) {
            return Err(Error::Config(format!("pole_eps {} must be non-negative", self.pole_eps)));
        }
        Ok(())
    }
}

/// Per-dimension Möbius query coefficients and complex key/value weights of
/// one head.
#[derive(Clone, Debug, PartialEq)]
pub struct MobiusHeadParams {
    pub a: ComplexTensor,
    pub b: ComplexTensor,
    pub c: ComplexTensor,
    pub d: ComplexTensor,
    /// `[d_head]` (diagonal) or `[d_head, d_head]` (full).
    pub key: ComplexTensor,
    pub value: ComplexTensor,
    /// Linear map applied to the query input before the Möbius map.
    pub pre: Option<ComplexTensor>,
}

const COEFFS: [&str; 4] = ["a", "b", "c", "d"];

impl MobiusHeadParams {
    /// Validates shapes and per-dimension invertibility.
    pub fn new(
        coeffs: [ComplexTensor; 4],
        key: ComplexTensor,
        value: ComplexTensor,
        pre: Option<ComplexTensor>,
    ) -> Result<Self> {
        let [a, b, c, d] = coeffs;
        let dh = a.numel();
        if [&a, &b, &c, &d].iter().any(|t| t.shape() != [dh]) {
            return Err(Error::ShapeMismatch("Möbius coefficients must all be [d_head]".into()));
        }
        for w in [&key, &value] {
            if w.shape() != [dh] && w.shape() != [dh, dh] {
                return Err(Error::ShapeMismatch(format!("key/value weight {:?} for d_head {dh}", w.shape())));
            }
        }
        if let Some(p) = &pre {
            if p.shape() != [dh, dh] {
                return Err(Error::ShapeMismatch(format!("pre-query map {:?} for d_head {dh}", p.shape())));
            }
        }
        let p = Self { a, b, c, d, key, value, pre };
        p.maps()?;
        Ok(p)
    }

    /// `a=1, b=0, c=0, d=1` on every dimension, unit diagonal key/value.
    pub fn identity(d_head: usize) -> Self {
        let one = || ComplexTensor::from_real(Tensor::ones(&[d_head]));
        let zero = || ComplexTensor::zeros(&[d_head]);
        Self { a: one(), b: zero(), c: zero(), d: one(), key: one(), value: one(), pre: None }
    }

    pub fn d_head(&self) -> usize {
        self.a.numel()
    }

    /// One [`MobiusParams`] per dimension; fails if any is singular.
    pub fn maps(&self) -> Result<Vec<MobiusParams>> {
        (0..self.d_head())
            .map(|j| {
                MobiusParams::from_parts(self.a.at(&[j]), self.b.at(&[j]), self.c.at(&[j]), self.d.at(&[j]))
            })
            .collect()
    }

    /// Near-identity initialization with `N(0, 0.02)` noise on every real component.
    pub fn init(cfg: &AttentionConfig, rng: &mut impl Rng) -> Result<Self> {
        let dh = cfg.d_head();
        let noise = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut draw = |shape: &[usize], base: &Tensor| {
            let n: usize = shape.iter().product();
            let re = base.data().iter().map(|b| b + noise.sample(rng)).collect();
            let im = (0..n).map(|_| noise.sample(rng)).collect();
            ComplexTensor::new(Tensor::new(shape, re).expect("shape"), Tensor::new(shape, im).expect("shape"))
                .expect("planes agree")
        };
        let ones = Tensor::ones(&[dh]);
        let zeros = Tensor::zeros(&[dh]);
        let a = draw(&[dh], &ones);
        let b = draw(&[dh], &zeros);
        let c = draw(&[dh], &zeros);
        let d = draw(&[dh], &ones);
        let (key, value) = match cfg.kv {
            KvPolicy::Diagonal => (draw(&[dh], &ones), draw(&[dh], &ones)),
            KvPolicy::Full => {
                let z = Tensor::zeros(&[dh, dh]);
                (draw(&[dh, dh], &z), draw(&[dh, dh], &z))
            }
        };
        let pre = match cfg.query {
            QueryPolicy::Mobius => None,
            QueryPolicy::LinearThenMobius => Some(draw(&[dh, dh], &Tensor::zeros(&[dh, dh]))),
        };
        Self::new([a, b, c, d], key, value, pre)
    }

    pub fn write_to(&self, store: &mut ParamStore, prefix: &str) {
        let mut put = |name: &str, t: &ComplexTensor| {
            store.insert(format!("{prefix}.{name}_re"), t.re().clone());
            store.insert(format!("{prefix}.{name}_im"), t.im().clone());
        };
        for (name, t) in COEFFS.iter().zip([&self.a, &self.b, &self.c, &self.d]) {
            put(name, t);
        }
        put("key", &self.key);
        put("value", &self.value);
        if let Some(p) = &self.pre {
            put("pre", p);
        }
    }

    pub fn read_from(store: &ParamStore, prefix: &str) -> Result<Self> {
        let get = |name: &str| -> Result<ComplexTensor> {
            ComplexTensor::new(
                store.get(&format!("{prefix}.{name}_re"))?.clone(),
                store.get(&format!("{prefix}.{name}_im"))?.clone(),
            )
        };
        let pre = if store.contains(&format!("{prefix}.pre_re")) { Some(get("pre")?) } else { None };
        Self::new([get("a")?, get("b")?, get("c")?, get("d")?], get("key")?, get("value")?, pre)
    }
}

/// Linear Q/K/V projections of one vanilla head.
#[derive(Clone, Debug, PartialEq)]
pub struct VanillaHeadWeights {
    pub query: (Tensor, Tensor),
    pub key: (Tensor, Tensor),
    pub value: (Tensor, Tensor),
}

impl VanillaHeadWeights {
    fn write_to(&self, store: &mut ParamStore, prefix: &str) {
        for (name, (w, b)) in [("query", &self.query), ("key", &self.key), ("value", &self.value)] {
            store.insert(format!("{prefix}.{name}.weight"), w.clone());
            store.insert(format!("{prefix}.{name}.bias"), b.clone());
        }
    }
}

/// Runs `f` on a gradient-free tape and copies out the complex result.
fn eval_complex(f: impl FnOnce(&mut Tape) -> Result<Cx>) -> Result<ComplexTensor> {
    let mut t = Tape::no_grad();
    let out = f(&mut t)?;
    ComplexTensor::new(t.value(out.re).clone(), t.value(out.im).clone())
}

fn bind_complex(t: &mut Tape, x: &ComplexTensor) -> Cx {
    Cx { re: t.constant(x.re().clone()), im: t.constant(x.im().clone()) }
}

fn head_store(params: &MobiusHeadParams) -> ParamStore {
    let mut store = ParamStore::new();
    params.write_to(&mut store, "head");
    store
}

/// `Q_ij = (a_j ρ_ij + b_j)/(c_j ρ_ij + d_j)` on `ρ: [n, d_head]`, with `ρ`
/// first mapped through the pre-query map when one is present.
pub fn mobius_query(params: &MobiusHeadParams, rho: &ComplexTensor, cfg: &AttentionConfig) -> Result<ComplexTensor> {
    check_rho(params, rho)?;
    let store = head_store(params);
    eval_complex(|t| {
        let hv = graph::MobiusHeadVars::bind(t, &store, "head")?;
        let r = bind_complex(t, rho);
        graph::mobius_query(t, &hv, r, cfg.pole_eps)
    })
}

/// Keys and values: `w ⊙ ρ` for diagonal weights, `ρ·W` for full ones.
pub fn complex_key_value(params: &MobiusHeadParams, rho: &ComplexTensor) -> Result<(ComplexTensor, ComplexTensor)> {
    check_rho(params, rho)?;
    let store = head_store(params);
    let mut t = Tape::no_grad();
    let hv = graph::MobiusHeadVars::bind(&mut t, &store, "head")?;
    let r = bind_complex(&mut t, rho);
    let k = graph::complex_linear(&mut t, hv.key, r)?;
    let v = graph::complex_linear(&mut t, hv.value, r)?;
    let out = |c: Cx| ComplexTensor::new(t.value(c.re).clone(), t.value(c.im).clone());
    Ok((out(k)?, out(v)?))
}

fn check_rho(params: &MobiusHeadParams, rho: &ComplexTensor) -> Result<()> {
    if rho.shape().last() != Some(&params.d_head()) {
        return Err(Error::ShapeMismatch(format!(
            "input {:?} for a head of width {}",
            rho.shape(),
            params.d_head()
        )));
    }
    Ok(())
}

/// `softmax(reduce(Q·Kᵀ)/√d_head)·V` and the attention weights.
pub fn mobius_attention_weights(
    q: &ComplexTensor,
    k: &ComplexTensor,
    v: &ComplexTensor,
    cfg: &AttentionConfig,
) -> Result<(ComplexTensor, Tensor)> {
    if q.shape() != k.shape() || k.shape() != v.shape() {
        return Err(Error::ShapeMismatch(format!(
            "Q {:?}, K {:?}, V {:?}",
            q.shape(),
            k.shape(),
            v.shape()
        )));
    }
    let mut t = Tape::no_grad();
    let (q, k, v) = (bind_complex(&mut t, q), bind_complex(&mut t, k), bind_complex(&mut t, v));
    let (a, s) = graph::complex_scores_attend(&mut t, q, k, v, cfg)?;
    Ok((ComplexTensor::new(t.value(a.re).clone(), t.value(a.im).clone())?, t.value(s).clone()))
}

pub fn mobius_attention(
    q: &ComplexTensor,
    k: &ComplexTensor,
    v: &ComplexTensor,
    cfg: &AttentionConfig,
) -> Result<ComplexTensor> {
    mobius_attention_weights(q, k, v, cfg).map(|(a, _)| a)
}

/// Scaled dot-product attention of one head with linear Q/K/V over `x: [n, d_in]`.
/// With `positions`, queries and keys are rotated first.
pub fn vanilla_attention(x: &Tensor, w: &VanillaHeadWeights, positions: Option<&[usize]>) -> Result<Tensor> {
    let d_head = w.query.0.shape().get(1).copied().unwrap_or(0);
    let mut store = ParamStore::new();
    w.write_to(&mut store, "head");
    let mut t = Tape::no_grad();
    let xv = t.constant(x.clone());
    let rope = match positions {
        Some(p) => Some(graph::Rotary::new(&mut t, p, d_head)?),
        None => None,
    };
    let heads = graph::vanilla_heads(&mut t, &store, "head", xv, 1, d_head, rope.as_ref(), &mut ForwardCtx::default())?;
    Ok(t.value(heads[0]).clone())
}

/// Rotates consecutive pairs of `q` and `k` (`[n, d_head]`) by `p·θ_i`,
/// `θ_i = 10000^(−2i/d_head)`, where `p` is the row's position.
pub fn apply_rotary(q: &Tensor, k: &Tensor, positions: &[usize]) -> Result<(Tensor, Tensor)> {
    let dh = q.last_dim();
    if q.shape() != k.shape() || q.rank() != 2 || q.shape()[0] != positions.len() {
        return Err(Error::ShapeMismatch(format!(
            "rotary on Q {:?}, K {:?} with {} positions",
            q.shape(),
            k.shape(),
            positions.len()
        )));
    }
    let mut t = Tape::no_grad();
    let rope = graph::Rotary::new(&mut t, positions, dh)?;
    let (qv, kv) = (t.constant(q.clone()), t.constant(k.clone()));
    let qr = rope.apply(&mut t, qv)?;
    let kr = rope.apply(&mut t, kv)?;
    Ok((t.value(qr).clone(), t.value(kr).clone()))
}

/// Mixed-head block on `I: [n, d_model]` (or `[B, n, d_model]`); inference mode.
pub fn mixed_head_layer(store: &ParamStore, prefix: &str, input: &ComplexTensor, cfg: &AttentionConfig) -> Result<Tensor> {
    let mut t = Tape::no_grad();
    let x = bind_complex(&mut t, input);
    let rope = rotary_for(&mut t, input, cfg)?;
    let out = graph::mixed_layer(&mut t, store, prefix, x, cfg, rope.as_ref(), &mut ForwardCtx::default())?;
    Ok(t.value(out).clone())
}

/// All-Möbius block with per-channel projections and feed-forwards; inference mode.
pub fn dual_channel_layer(
    store: &ParamStore,
    prefix: &str,
    input: &ComplexTensor,
    cfg: &AttentionConfig,
) -> Result<ComplexTensor> {
    eval_complex(|t| {
        let x = bind_complex(t, input);
        graph::dual_layer(t, store, prefix, x, cfg, &mut ForwardCtx::default())
    })
}

fn rotary_for(t: &mut Tape, input: &ComplexTensor, cfg: &AttentionConfig) -> Result<Option<graph::Rotary>> {
    if cfg.positional != PositionalPolicy::Rotary {
        return Ok(None);
    }
    let n = input.shape()[input.shape().len() - 2];
    let positions: Vec<usize> = (0..n).collect();
    graph::Rotary::new(t, &positions, cfg.d_head()).map(Some)
}
