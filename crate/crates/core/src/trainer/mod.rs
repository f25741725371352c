//! Toy-scale training: synthetic tasks, masking, AdamW with warmup and linear
//! decay, and a deterministic training loop.

mod optim;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::ForwardCtx;
use crate::autodiff::{grad_check, GradCheckConfig, GradCheckReport, ParamStore, Tape};
use crate::config::{parse_value, KvSection};
use crate::error::{Error, Result};
use crate::geometry::DET_EPS;
use crate::model::{forward_graph, LayerKind, Model, OptimizerState};
use crate::tensor::Tensor;

pub use optim::{adamw_step, lr_at, AdamConfig};

/// Token id reserved for `[MASK]` in the masked-LM task.
pub const MASK_ID: usize = 0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    /// Palindromic streams with masked positions to recover.
    MlmSynthetic,
    Copy,
    Reverse,
}

impl Task {
    pub fn name(&self) -> &'static str {
        match self {
            Task::MlmSynthetic => "mlm_synthetic",
            Task::Copy => "copy",
            Task::Reverse => "reverse",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Task {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mlm_synthetic" => Ok(Task::MlmSynthetic),
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            _ => Err(Error::Config(format!("unknown task '{s}' (mlm_synthetic, copy, reverse)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub task: Task,
    pub seq_len: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_fraction: f64,
    pub final_lr_factor: f64,
    pub mask_prob: f64,
    pub eval_every: usize,
    pub eval_batch_size: usize,
    /// Global gradient-norm clip; off when `None`.
    pub grad_clip: Option<f64>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            task: Task::MlmSynthetic,
            seq_len: 16,
            batch_size: 32,
            steps: 2000,
            lr: 5e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-6,
            weight_decay: 1e-5,
            warmup_fraction: 0.06,
            final_lr_factor: 0.02,
            mask_prob: 0.15,
            eval_every: 100,
            eval_batch_size: 64,
            grad_clip: None,
            seed: 17,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.warmup_fraction) {
            return bad(format!("warmup_fraction {} outside [0, 1)", self.warmup_fraction));
        }
        if !(self.mask_prob > 0.0 && self.mask_prob < 1.0) {
            return bad(format!("mask_prob {} outside (0, 1)", self.mask_prob));
        }
        if self.seq_len == 0 || self.batch_size == 0 || self.eval_batch_size == 0 || self.eval_every == 0 {
            return bad("seq_len, batch_size, eval_batch_size and eval_every must be positive".into());
        }
        if !(self.lr >= 0.0) || !(0.0..=1.0).contains(&self.final_lr_factor) {
            return bad("lr must be non-negative and final_lr_factor in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return bad("grad_clip must be positive".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { beta1: self.beta1, beta2: self.beta2, eps: self.eps, weight_decay: self.weight_decay }
    }
}

impl KvSection for TrainConfig {
    fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "task" => self.task = value.parse()?,
            "seq_len" => self.seq_len = parse_value(value)?,
            "batch_size" => self.batch_size = parse_value(value)?,
            "steps" => self.steps = parse_value(value)?,
            "lr" => self.lr = parse_value(value)?,
            "beta1" => self.beta1 = parse_value(value)?,
            "beta2" => self.beta2 = parse_value(value)?,
            "eps" => self.eps = parse_value(value)?,
            "weight_decay" => self.weight_decay = parse_value(value)?,
            "warmup_fraction" => self.warmup_fraction = parse_value(value)?,
            "final_lr_factor" => self.final_lr_factor = parse_value(value)?,
            "mask_prob" => self.mask_prob = parse_value(value)?,
            "eval_every" => self.eval_every = parse_value(value)?,
            "eval_batch_size" => self.eval_batch_size = parse_value(value)?,
            "grad_clip" => {
                self.grad_clip = match value {
                    "off" | "none" => None,
                    v => Some(parse_value(v)?),
                }
            }
            "train_seed" => self.seed = parse_value(value)?,
            _ => return Ok(false),
        }
        Ok(true)
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("task", self.task.to_string()),
            ("seq_len", self.seq_len.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("steps", self.steps.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("beta1", format!("{:?}", self.beta1)),
            ("beta2", format!("{:?}", self.beta2)),
            ("eps", format!("{:?}", self.eps)),
            ("weight_decay", format!("{:?}", self.weight_decay)),
            ("warmup_fraction", format!("{:?}", self.warmup_fraction)),
            ("final_lr_factor", format!("{:?}", self.final_lr_factor)),
            ("mask_prob", format!("{:?}", self.mask_prob)),
            ("eval_every", self.eval_every.to_string()),
            ("eval_batch_size", self.eval_batch_size.to_string()),
            ("grad_clip", self.grad_clip.map_or("off".into(), |c| format!("{c:?}"))),
            ("train_seed", self.seed.to_string()),
        ]
    }
}

/// BERT-style corruption: each position is selected with probability `p`;
/// a selected position becomes [`MASK_ID`] 80% of the time, a uniformly
/// random non-mask token 10%, and stays put 10%. Labels carry the original id
/// at selected positions only.
pub fn mask_tokens_with(ids: &[usize], p: f64, vocab: usize, rng: &mut impl Rng) -> (Vec<usize>, Vec<Option<usize>>) {
    let mut masked = ids.to_vec();
    let mut labels = vec![None; ids.len()];
    for (i, &id) in ids.iter().enumerate() {
        if rng.random::<f64>() >= p {
            continue;
        }
        labels[i] = Some(id);
        let r: f64 = rng.random();
        if r < 0.8 {
            masked[i] = MASK_ID;
        } else if r < 0.9 {
            masked[i] = rng.random_range(1..vocab);
        }
    }
    (masked, labels)
}

pub fn mask_tokens(ids: &[usize], p: f64, vocab: usize, seed: u64) -> (Vec<usize>, Vec<Option<usize>>) {
    mask_tokens_with(ids, p, vocab, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// `batch` row-major sequences and one optional target per position.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub inputs: Vec<usize>,
    pub targets: Vec<Option<usize>>,
    pub batch: usize,
    pub seq_len: usize,
}

/// Draws one batch. Copy and reverse use the whole vocabulary; the masked-LM
/// task draws palindromes from the non-mask tokens so every masked position has
/// a visible mirror image most of the time.
pub fn synth_batch_with(task: Task, cfg: &TrainConfig, vocab: usize, batch: usize, rng: &mut impl Rng) -> Batch {
    let n = cfg.seq_len;
    let mut inputs = Vec::with_capacity(batch * n);
    let mut targets = Vec::with_capacity(batch * n);
    for _ in 0..batch {
        match task {
            Task::Copy | Task::Reverse => {
                let seq: Vec<usize> = (0..n).map(|_| rng.random_range(0..vocab)).collect();
                let tgt: Vec<usize> = if task == Task::Copy { seq.clone() } else { seq.iter().rev().copied().collect() };
                inputs.extend(seq);
                targets.extend(tgt.into_iter().map(Some));
            }
            Task::MlmSynthetic => {
                let half: Vec<usize> = (0..n.div_ceil(2)).map(|_| rng.random_range(1..vocab)).collect();
                let seq: Vec<usize> = (0..n).map(|i| half[i.min(n - 1 - i)]).collect();
                let (m, l) = mask_tokens_with(&seq, cfg.mask_prob, vocab, rng);
                inputs.extend(m);
                targets.extend(l);
            }
        }
    }
    Batch { inputs, targets, batch, seq_len: n }
}

pub fn synth_batch(task: Task, cfg: &TrainConfig, vocab: usize, seed: u64) -> Batch {
    synth_batch_with(task, cfg, vocab, cfg.batch_size, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Applies a sequence-level task to explicit ids; for documentation and tests.
pub fn task_target(task: Task, seq: &[usize]) -> Option<Vec<usize>> {
    match task {
        Task::Copy => Some(seq.to_vec()),
        Task::Reverse => Some(seq.iter().rev().copied().collect()),
        Task::MlmSynthetic => None,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub loss: f64,
    pub token_acc: f64,
    pub lr: f64,
}

pub const METRICS_HEADER: &str = "step,loss,token_acc,lr";

impl MetricsRow {
    pub fn csv(&self) -> String {
        format!("{},{},{},{}", self.step, self.loss, self.token_acc, self.lr)
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    pub optimizer: OptimizerState,
    pub metrics: Vec<MetricsRow>,
}

impl TrainOutcome {
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from(METRICS_HEADER);
        s.push('\n');
        for r in &self.metrics {
            s.push_str(&r.csv());
            s.push('\n');
        }
        s
    }

    pub fn final_accuracy(&self) -> f64 {
        self.metrics.last().map_or(0.0, |r| r.token_acc)
    }
}

/// Mean cross-entropy and accuracy over the labelled positions of `batch`.
pub fn evaluate(model: &Model, batch: &Batch) -> Result<(f64, f64)> {
    let mut t = Tape::no_grad();
    let logits = forward_graph(
        &mut t,
        &model.config,
        &model.params,
        &batch.inputs,
        batch.batch,
        batch.seq_len,
        &mut ForwardCtx::default(),
    )?;
    let loss = t.cross_entropy(logits, &batch.targets)?;
    Ok((t.value(loss).item(), token_accuracy(t.value(logits), &batch.targets)))
}

pub fn token_accuracy(logits: &Tensor, targets: &[Option<usize>]) -> f64 {
    let v = logits.last_dim();
    let (mut hit, mut total) = (0usize, 0usize);
    for (row, target) in logits.data().chunks(v).zip(targets) {
        let Some(y) = target else { continue };
        let best = row.iter().enumerate().fold(0, |b, (j, &x)| if x > row[b] { j } else { b });
        hit += usize::from(best == *y);
        total += 1;
    }
    if total == 0 {
        0.0
    } else {
        hit as f64 / total as f64
    }
}

/// Finite-difference check of the full model's cross-entropy on `batch`.
pub fn grad_check_model(model: &Model, batch: &Batch, cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let forward = |t: &mut Tape, p: &ParamStore| {
        let logits =
            forward_graph(t, &model.config, p, &batch.inputs, batch.batch, batch.seq_len, &mut ForwardCtx::default())?;
        t.cross_entropy(logits, &batch.targets)
    };
    grad_check(&model.params, forward, cfg)
}

/// Fails if any Möbius query dimension has drifted to a singular matrix.
pub fn check_invertibility(model: &Model) -> Result<()> {
    let kinds = model.config.layer_kinds()?;
    for (l, kind) in kinds.iter().enumerate() {
        if *kind == LayerKind::Vanilla {
            continue;
        }
        let a = model.config.attention_for(*kind);
        for h in a.n_vanilla_heads()..a.n_heads {
            let prefix = format!("layers.{l}.attn.mobius.{h}");
            let get = |c: &str| -> Result<(&[f64], &[f64])> {
                Ok((model.params.get(&format!("{prefix}.{c}_re"))?.data(), model.params.get(&format!("{prefix}.{c}_im"))?.data()))
            };
            let (a, b, c, d) = (get("a")?, get("b")?, get("c")?, get("d")?);
            for j in 0..a.0.len() {
                let re = a.0[j] * d.0[j] - a.1[j] * d.1[j] - (b.0[j] * c.0[j] - b.1[j] * c.1[j]);
                let im = a.0[j] * d.1[j] + a.1[j] * d.0[j] - (b.0[j] * c.1[j] + b.1[j] * c.0[j]);
                let det = re.hypot(im);
                if !(det > DET_EPS) {
                    return Err(Error::InvertibilityViolation { name: prefix, dim: j, det });
                }
            }
        }
    }
    Ok(())
}

/// Trains `model` in place of a copy and returns it with its metrics.
///
/// Metrics are taken on a fixed evaluation batch before the first update,
/// every `eval_every` updates, and after the last one. `on_row` sees each row
/// as it is produced.
pub fn train(model: Model, cfg: &TrainConfig, mut on_row: impl FnMut(&MetricsRow)) -> Result<TrainOutcome> {
    cfg.validate()?;
    model.config.validate()?;
    if cfg.seq_len > model.config.max_seq_len {
        return Err(Error::SequenceTooLong { len: cfg.seq_len, max: model.config.max_seq_len });
    }
    let vocab = model.config.vocab_size;
    let mut model = model;
    let mut data_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let eval = synth_batch_with(cfg.task, cfg, vocab, cfg.eval_batch_size, &mut ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xE7A1));
    let mut ctx = ForwardCtx { dropout_rng: Some(ChaCha8Rng::seed_from_u64(cfg.seed ^ 0xD80F)), ..ForwardCtx::default() };
    let zeros = |p: &ParamStore| {
        let mut z = p.clone();
        z.iter_mut().for_each(|(_, t)| t.data_mut().fill(0.0));
        z
    };
    let mut opt = OptimizerState { step: 0, m: zeros(&model.params), v: zeros(&model.params) };
    let adam = cfg.adam();
    let mut metrics = Vec::new();
    let mut emit = |step: usize, model: &Model, metrics: &mut Vec<MetricsRow>| -> Result<()> {
        let (loss, token_acc) = evaluate(model, &eval)?;
        if !loss.is_finite() {
            return Err(Error::DivergenceDetected { step, loss });
        }
        let row = MetricsRow { step, loss, token_acc, lr: lr_at(step, cfg) };
        on_row(&row);
        metrics.push(row);
        Ok(())
    };
    emit(0, &model, &mut metrics)?;

    for step in 0..cfg.steps {
        let batch = synth_batch_with(cfg.task, cfg, vocab, cfg.batch_size, &mut data_rng);
        let mut t = Tape::new();
        let logits =
            forward_graph(&mut t, &model.config, &model.params, &batch.inputs, batch.batch, batch.seq_len, &mut ctx)?;
        let loss = t.cross_entropy(logits, &batch.targets)?;
        let lv = t.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::DivergenceDetected { step, loss: lv });
        }
        t.backward(loss)?;
        let mut grads = t.param_grads();
        if let Some(max) = cfg.grad_clip {
            let norm = grads.values().flat_map(|g| g.data()).map(|x| x * x).sum::<f64>().sqrt();
            if norm > max {
                grads.values_mut().for_each(|g| g.data_mut().iter_mut().for_each(|x| *x *= max / norm));
            }
        }
        let lr = lr_at(step + 1, cfg);
        let decay_scale = if cfg.lr > 0.0 { lr / cfg.lr } else { 0.0 };
        adamw_step(&mut model.params, &grads, &mut opt, lr, decay_scale, &adam)?;
        check_invertibility(&model)?;
        let done = step + 1;
        if done % cfg.eval_every == 0 || done == cfg.steps {
            emit(done, &model, &mut metrics)?;
        }
    }
    Ok(TrainOutcome { model, optimizer: opt, metrics })
}
