//! Encoder assembly: embeddings, layer placement, channel wiring between real
//! and complex layers, and the masked-LM head.
//!
//! A Möbius layer at the bottom of the stack reads `ρ = w + i·p` (token plus
//! position embeddings). Any later Möbius layer reads the running real stream
//! in its real channel and the raw token embeddings (before any norm) in its
//! imaginary channel. Complex layer outputs return to the real stream as
//! `O_r + O_i`.

mod checkpoint;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::graph::{self, Rotary};
use crate::attention::{AttentionConfig, Cx, ForwardCtx, MobiusHeadParams, PositionalPolicy};
use crate::autodiff::{ParamStore, Tape, Var};
use crate::config::{parse_value, KvSection};
use crate::ctensor::ComplexTensor;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, OptimizerState, CHECKPOINT_VERSION};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Vanilla,
    /// Möbius and vanilla heads side by side, collapsed before the projection.
    MobiusMixed,
    /// All-Möbius heads with per-channel projections and feed-forwards.
    MobiusDual,
}

impl LayerKind {
    pub fn is_mobius(&self) -> bool {
        !matches!(self, LayerKind::Vanilla)
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Vanilla => "vanilla",
            LayerKind::MobiusMixed => "mobius_mixed",
            LayerKind::MobiusDual => "mobius_dual",
        }
    }
}

impl FromStr for LayerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vanilla" => Ok(LayerKind::Vanilla),
            "mobius_mixed" => Ok(LayerKind::MobiusMixed),
            "mobius_dual" => Ok(LayerKind::MobiusDual),
            _ => Err(Error::Config(format!("unknown layer kind '{s}' (vanilla, mobius_mixed, mobius_dual)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Placement {
    /// Möbius at the first and last layer.
    Framed,
    /// One Möbius layer at the bottom.
    Top,
    /// Two Möbius layers at the bottom.
    Stacked,
    /// Möbius every third layer, starting at the bottom.
    Alternating,
    /// No Möbius layers.
    Vanilla,
    /// Explicit per-layer list.
    Custom,
}

impl Placement {
    pub fn name(&self) -> &'static str {
        match self {
            Placement::Framed => "framed",
            Placement::Top => "top",
            Placement::Stacked => "stacked",
            Placement::Alternating => "alternating",
            Placement::Vanilla => "vanilla",
            Placement::Custom => "custom",
        }
    }

    /// Per-layer kinds for `n_layers`, with `mobius` used wherever the preset
    /// places a Möbius layer. `Custom` has no expansion.
    pub fn expand(&self, n_layers: usize, mobius: LayerKind) -> Option<Vec<LayerKind>> {
        let v = LayerKind::Vanilla;
        let pick = |is_m: bool| if is_m { mobius } else { v };
        let kinds = match self {
            Placement::Framed => (0..n_layers).map(|l| pick(l == 0 || l + 1 == n_layers)).collect(),
            Placement::Top => (0..n_layers).map(|l| pick(l == 0)).collect(),
            Placement::Stacked => (0..n_layers).map(|l| pick(l < 2)).collect(),
            Placement::Alternating => (0..n_layers).map(|l| pick(l % 3 == 0)).collect(),
            Placement::Vanilla => vec![v; n_layers],
            Placement::Custom => return None,
        };
        Some(kinds)
    }
}

impl fmt::Display for Placement {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Placement {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "framed" => Placement::Framed,
            "top" => Placement::Top,
            "stacked" => Placement::Stacked,
            "alternating" => Placement::Alternating,
            "vanilla" => Placement::Vanilla,
            "custom" => Placement::Custom,
            _ => {
                return Err(Error::Config(format!(
                    "unknown placement '{s}' (framed, top, stacked, alternating, vanilla, custom)"
                )))
            }
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub n_layers: usize,
    pub placement: Placement,
    /// Kind used where a preset places a Möbius layer.
    pub mobius_layer: LayerKind,
    /// Explicit kinds; required for [`Placement::Custom`], derived otherwise.
    pub layers: Vec<LayerKind>,
    pub attention: AttentionConfig,
    pub tie_embeddings: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 32,
            max_seq_len: 16,
            n_layers: 4,
            placement: Placement::Framed,
            mobius_layer: LayerKind::MobiusMixed,
            layers: Vec::new(),
            attention: AttentionConfig::default(),
            tie_embeddings: true,
            seed: 17,
        }
    }
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.attention.d_model
    }

    /// The expanded, validated per-layer kinds.
    pub fn layer_kinds(&self) -> Result<Vec<LayerKind>> {
        let kinds = match self.placement.expand(self.n_layers, self.mobius_layer) {
            Some(k) => k,
            None => self.layers.clone(),
        };
        if kinds.is_empty() {
            return Err(Error::Config("a model needs at least one layer".into()));
        }
        if kinds.len() != self.n_layers {
            return Err(Error::Config(format!(
                "custom placement lists {} layers but n_layers is {}",
                kinds.len(),
                self.n_layers
            )));
        }
        if self.mobius_layer == LayerKind::Vanilla {
            return Err(Error::Config("mobius_layer must be mobius_mixed or mobius_dual".into()));
        }
        Ok(kinds)
    }

    pub fn validate(&self) -> Result<()> {
        self.attention.validate()?;
        if self.vocab_size < 2 || self.max_seq_len == 0 {
            return Err(Error::Config("vocab_size must be ≥ 2 and max_seq_len ≥ 1".into()));
        }
        self.layer_kinds().map(|_| ())
    }

    /// Attention settings for a layer of the given kind.
    pub fn attention_for(&self, kind: LayerKind) -> AttentionConfig {
        let mut a = self.attention.clone();
        match kind {
            LayerKind::Vanilla => a.n_mobius_heads = 0,
            LayerKind::MobiusDual => a.n_mobius_heads = a.n_heads,
            LayerKind::MobiusMixed => {}
        }
        a
    }

    fn rotary(&self) -> bool {
        self.attention.positional == PositionalPolicy::Rotary
    }
}

impl KvSection for ModelConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        let a = &mut self.attention;
        match key {
            "vocab_size" => self.vocab_size = parse_value(value)?,
            "max_seq_len" => self.max_seq_len = parse_value(value)?,
            "n_layers" => self.n_layers = parse_value(value)?,
            "placement" => self.placement = value.parse()?,
            "mobius_layer" => self.mobius_layer = value.parse()?,
            "layers" => {
                self.layers = value.split(',').map(|s| s.trim().parse()).collect::<Result<_>>()?;
            }
            "tie_embeddings" => self.tie_embeddings = parse_value(value)?,
            "seed" => self.seed = parse_value(value)?,
            "d_model" => a.d_model = parse_value(value)?,
            "n_heads" => a.n_heads = parse_value(value)?,
            "n_mobius_heads" => a.n_mobius_heads = parse_value(value)?,
            "kv_policy" => a.kv = value.parse()?,
            "query_policy" => a.query = value.parse()?,
            "softmax_policy" => a.softmax = value.parse()?,
            "positional" => a.positional = value.parse()?,
            "conj_transpose" => a.conj_transpose = parse_value(value)?,
            "dropout" => a.dropout = parse_value(value)?,
            "pole_eps" => a.pole_eps = parse_value(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let a = &self.attention;
        let mut e = vec![
            ("vocab_size", self.vocab_size.to_string()),
            ("max_seq_len", self.max_seq_len.to_string()),
            ("n_layers", self.n_layers.to_string()),
            ("placement", self.placement.to_string()),
            ("mobius_layer", self.mobius_layer.name().to_string()),
        ];
        if !self.layers.is_empty() {
            e.push(("layers", self.layers.iter().map(LayerKind::name).collect::<Vec<_>>().join(",")));
        }
        e.extend([
            ("tie_embeddings", self.tie_embeddings.to_string()),
            ("seed", self.seed.to_string()),
            ("d_model", a.d_model.to_string()),
            ("n_heads", a.n_heads.to_string()),
            ("n_mobius_heads", a.n_mobius_heads.to_string()),
            ("kv_policy", a.kv.to_string()),
            ("query_policy", a.query.to_string()),
            ("softmax_policy", a.softmax.to_string()),
            ("positional", a.positional.to_string()),
            ("conj_transpose", a.conj_transpose.to_string()),
            // {:?} keeps full f64 precision through a round trip
            ("dropout", format!("{:?}", a.dropout)),
            ("pole_eps", format!("{:?}", a.pole_eps)),
        ]);
        e
    }
}

/// Parameter totals per top-level module (`embeddings`, `layers.N`, `mlm`).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParamCount {
    pub per_module: BTreeMap<String, usize>,
    pub total: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl Model {
    /// Initializes every parameter from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let kinds = config.layer_kinds()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut p = ParamStore::new();
        let d = config.d_model();
        p.insert("embeddings.token", normal(&[config.vocab_size, d], &mut rng));
        if !config.rotary() {
            p.insert("embeddings.position", normal(&[config.max_seq_len, d], &mut rng));
        }
        if kinds[0] == LayerKind::Vanilla {
            graph::init_layer_norm(&mut p, "embeddings.ln", d);
        }
        for (l, kind) in kinds.iter().enumerate() {
            let prefix = format!("layers.{l}");
            let a = config.attention_for(*kind);
            match kind {
                LayerKind::Vanilla => graph::init_vanilla_layer(&mut p, &prefix, &a, &mut rng)?,
                LayerKind::MobiusMixed => graph::init_mixed_layer(&mut p, &prefix, &a, &mut rng)?,
                LayerKind::MobiusDual => graph::init_dual_layer(&mut p, &prefix, &a, &mut rng)?,
            }
        }
        graph::init_linear(&mut p, "mlm.dense", d, d, &mut rng);
        graph::init_layer_norm(&mut p, "mlm.ln", d);
        p.insert("mlm.decoder.bias", Tensor::zeros(&[config.vocab_size]));
        if !config.tie_embeddings {
            p.insert("mlm.decoder.weight", normal(&[d, config.vocab_size], &mut rng));
        }
        Ok(Self { config, params: p })
    }

    /// Logits `[n, vocab]` for one sequence.
    pub fn forward(&self, ids: &[usize]) -> Result<Tensor> {
        let logits = self.forward_batch(ids, 1, ids.len())?;
        logits.reshape(&[ids.len(), self.config.vocab_size])
    }

    /// Logits `[batch, n, vocab]` for `batch` row-major sequences of length `n`.
    pub fn forward_batch(&self, ids: &[usize], batch: usize, n: usize) -> Result<Tensor> {
        let mut t = Tape::no_grad();
        let out = forward_graph(&mut t, &self.config, &self.params, ids, batch, n, &mut ForwardCtx::default())?;
        Ok(t.value(out).clone())
    }

    /// Forward pass that also returns every head's attention weights.
    pub fn forward_capture(&self, ids: &[usize], batch: usize, n: usize) -> Result<(Tensor, Vec<graph::HeadAttention>)> {
        let mut t = Tape::no_grad();
        let mut ctx = ForwardCtx::capturing();
        let out = forward_graph(&mut t, &self.config, &self.params, ids, batch, n, &mut ctx)?;
        Ok((t.value(out).clone(), ctx.capture.unwrap_or_default()))
    }

    pub fn count_parameters(&self) -> ParamCount {
        count_parameters(&self.params)
    }

    /// Every Möbius head as `(layer, head, params)`.
    pub fn mobius_heads(&self) -> Result<Vec<(usize, usize, MobiusHeadParams)>> {
        let kinds = self.config.layer_kinds()?;
        let mut out = Vec::new();
        for (l, kind) in kinds.iter().enumerate() {
            if !kind.is_mobius() {
                continue;
            }
            let a = self.config.attention_for(*kind);
            for h in a.n_vanilla_heads()..a.n_heads {
                out.push((l, h, MobiusHeadParams::read_from(&self.params, &format!("layers.{l}.attn.mobius.{h}"))?));
            }
        }
        Ok(out)
    }
}

pub fn count_parameters(params: &ParamStore) -> ParamCount {
    let mut per_module: BTreeMap<String, usize> = BTreeMap::new();
    for (name, t) in params.iter() {
        let module = match name.split('.').collect::<Vec<_>>().as_slice() {
            ["layers", l, ..] => format!("layers.{l}"),
            [first, ..] => first.to_string(),
            [] => String::new(),
        };
        *per_module.entry(module).or_default() += t.numel();
    }
    let total = per_module.values().sum();
    ParamCount { per_module, total }
}

fn normal(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    use rand_distr::{Distribution, Normal};
    let dist = Normal::new(0.0, crate::attention::INIT_STD).expect("valid std");
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| dist.sample(rng)).collect()).expect("shape")
}

/// Complex input of a bottom Möbius layer: token embeddings in the real
/// channel, position embeddings in the imaginary one.
pub fn build_complex_input(ids: &[usize], token: &Tensor, position: &Tensor) -> Result<ComplexTensor> {
    let (vocab, d) = (token.shape()[0], token.last_dim());
    if ids.len() > position.shape()[0] {
        return Err(Error::SequenceTooLong { len: ids.len(), max: position.shape()[0] });
    }
    let mut re = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= vocab {
            return Err(Error::OutOfVocab { id, vocab });
        }
        re.extend_from_slice(&token.data()[id * d..(id + 1) * d]);
    }
    let im = position.data()[..ids.len() * d].to_vec();
    ComplexTensor::new(Tensor::new(&[ids.len(), d], re)?, Tensor::new(&[ids.len(), d], im)?)
}

/// Complex input of a later Möbius layer: the running real stream and the
/// cached bottom-layer token embeddings.
pub fn build_last_layer_input(prev_output: &Tensor, first_layer_tokens: &Tensor) -> Result<ComplexTensor> {
    ComplexTensor::new(prev_output.clone(), first_layer_tokens.clone())
}

/// `O_r + O_i`.
pub fn collapse_to_real(o: &ComplexTensor) -> Tensor {
    o.collapse()
}

/// The full model on a tape: `[batch, n, vocab]` logits for row-major `ids`.
pub fn forward_graph(
    t: &mut Tape,
    cfg: &ModelConfig,
    store: &ParamStore,
    ids: &[usize],
    batch: usize,
    n: usize,
    ctx: &mut ForwardCtx,
) -> Result<Var> {
    if n > cfg.max_seq_len {
        return Err(Error::SequenceTooLong { len: n, max: cfg.max_seq_len });
    }
    if ids.len() != batch * n {
        return Err(Error::ShapeMismatch(format!("{} ids for {batch} sequences of length {n}", ids.len())));
    }
    let kinds = cfg.layer_kinds()?;
    let d = cfg.d_model();
    let table = t.param(store, "embeddings.token")?;
    let tok = t.gather_rows(table, ids, &[batch, n])?;
    let (pos, rope) = if cfg.rotary() {
        let positions: Vec<usize> = (0..n).collect();
        (t.constant(Tensor::zeros(&[batch, n, d])), Some(Rotary::new(t, &positions, cfg.attention.d_head())?))
    } else {
        let table = t.param(store, "embeddings.position")?;
        let pos_ids: Vec<usize> = (0..batch).flat_map(|_| 0..n).collect();
        (t.gather_rows(table, &pos_ids, &[batch, n])?, None)
    };

    let mut h: Option<Var> = None;
    for (l, kind) in kinds.iter().enumerate() {
        ctx.layer = l;
        let prefix = format!("layers.{l}");
        let a = cfg.attention_for(*kind);
        let input = match h {
            Some(h) => Cx { re: h, im: tok },
            None => Cx { re: tok, im: pos },
        };
        h = Some(match kind {
            LayerKind::Vanilla => {
                let x = match h {
                    Some(h) => h,
                    None => {
                        let e = if cfg.rotary() { tok } else { t.add(tok, pos)? };
                        graph::layer_norm(t, store, "embeddings.ln", e)?
                    }
                };
                graph::vanilla_layer(t, store, &prefix, x, &a, rope.as_ref(), ctx)?
            }
            LayerKind::MobiusMixed => graph::mixed_layer(t, store, &prefix, input, &a, rope.as_ref(), ctx)?,
            LayerKind::MobiusDual => {
                let o = graph::dual_layer(t, store, &prefix, input, &a, ctx)?;
                t.add(o.re, o.im)?
            }
        });
    }
    let h = h.expect("at least one layer");

    let x = graph::linear(t, store, "mlm.dense", h)?;
    let x = t.gelu(x);
    let x = graph::layer_norm(t, store, "mlm.ln", x)?;
    let w = if cfg.tie_embeddings {
        let e = t.param(store, "embeddings.token")?;
        t.transpose(e)?
    } else {
        t.param(store, "mlm.decoder.weight")?
    };
    let logits = t.matmul(x, w)?;
    let b = t.param(store, "mlm.decoder.bias")?;
    t.add(logits, b)
}

#[cfg(test)]
mod tests;
