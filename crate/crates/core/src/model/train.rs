use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::encoder::{forward_classify_bound, forward_match_bound, BoundParams, ForwardCtx, ModelParams};
use crate::data::TokenSequence;
use crate::error::{Error, Result};
use crate::metrics::accuracy;
use crate::rng::{mix, Rng};
use crate::tape::{grad, Var};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Input {
    Single(TokenSequence),
    Pair(TokenSequence, TokenSequence),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Example {
    pub input: Input,
    pub label: usize,
}

impl Example {
    pub fn single(seq: TokenSequence, label: usize) -> Self {
        Example { input: Input::Single(seq), label }
    }

    pub fn pair(a: TokenSequence, b: TokenSequence, label: usize) -> Self {
        Example { input: Input::Pair(a, b), label }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalPoint {
    pub step: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    /// Mean batch loss at each step, in order.
    pub losses: Vec<f32>,
    pub evals: Vec<EvalPoint>,
}

const BETA1: f32 = 0.9;
const BETA2: f32 = 0.999;
const ADAM_EPS: f32 = 1e-8;

/// Adam with linear warmup and decoupled weight decay on matrices.
#[derive(Clone, Debug)]
pub struct Adam {
    m: BTreeMap<String, Vec<f32>>,
    v: BTreeMap<String, Vec<f32>>,
    t: i32,
}

impl Default for Adam {
    fn default() -> Self {
        Self::new()
    }
}

impl Adam {
    pub fn new() -> Self {
        Adam { m: BTreeMap::new(), v: BTreeMap::new(), t: 0 }
    }

    /// Learning rate at 1-based step `t`: ramps linearly from 0 over
    /// `warmup` steps, then stays at `lr`.
    pub fn schedule(lr: f32, warmup: usize, t: usize) -> f32 {
        if warmup == 0 || t >= warmup {
            lr
        } else {
            lr * t as f32 / warmup as f32
        }
    }

    pub fn update(
        &mut self,
        params: &mut ModelParams,
        grads: &BTreeMap<String, Tensor>,
        lr: f32,
        weight_decay: f32,
    ) -> Result<()> {
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t);
        let bc2 = 1.0 - BETA2.powi(self.t);
        for (name, g) in grads {
            let p = params
                .tensors
                .get_mut(name)
                .ok_or_else(|| Error::Config(format!("gradient for unknown parameter {name}")))?;
            let n = p.numel();
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let decay = if p.shape().len() == 2 { weight_decay } else { 0.0 };
            let mut data = p.to_vec();
            for i in 0..n {
                let gi = g.data()[i];
                m[i] = BETA1 * m[i] + (1.0 - BETA1) * gi;
                v[i] = BETA2 * v[i] + (1.0 - BETA2) * gi * gi;
                let step = (m[i] / bc1) / ((v[i] / bc2).sqrt() + ADAM_EPS);
                data[i] -= lr * (step + decay * data[i]);
            }
            *p = Tensor::new(p.shape(), data)?;
        }
        Ok(())
    }
}

/// Logits `[batch, classes]` for a batch, on the tape of `p`.
pub fn batch_logits(p: &BoundParams, batch: &[&Example], ctx: &mut ForwardCtx) -> Result<Var> {
    let mut rows = Vec::with_capacity(batch.len());
    for ex in batch {
        let out = match &ex.input {
            Input::Single(s) => forward_classify_bound(p, s, ctx)?,
            Input::Pair(a, b) => forward_match_bound(p, a, b, ctx)?,
        };
        rows.push(out.logits);
    }
    if rows.len() == 1 {
        Ok(rows.pop().expect("one row"))
    } else {
        Var::concat_rows(&rows)
    }
}

/// Mean cross-entropy of a batch and its gradient for every trainable tensor.
///
/// Non-finite logits yield a NaN loss and no gradients rather than an error,
/// so callers can report the step.
pub fn loss_and_grads(
    params: &ModelParams,
    batch: &[&Example],
    ctx: &mut ForwardCtx,
) -> Result<(f32, BTreeMap<String, Tensor>)> {
    let bound = params.bind(true);
    let logits = batch_logits(&bound, batch, ctx)?;
    if !logits.value().is_finite() {
        return Ok((f32::NAN, BTreeMap::new()));
    }
    let labels: Vec<usize> = batch.iter().map(|e| e.label).collect();
    let loss = logits.cross_entropy(&labels)?;
    let trainable = bound.trainable();
    let wrt: Vec<&Var> = trainable.iter().map(|(_, v)| *v).collect();
    let gs = grad(&loss, &wrt)?;
    let grads = trainable.iter().map(|(k, _)| k.to_string()).zip(gs).collect();
    Ok((loss.value().item(), grads))
}

/// Stateful trainer: optimizer moments, step counter and data order.
pub struct Trainer {
    pub config: TrainConfig,
    pub step: usize,
    opt: Adam,
    data_rng: Rng,
    model_rng: Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let root = Rng::new(config.seed);
        Ok(Trainer {
            data_rng: root.fork(1),
            model_rng: root.fork(2),
            config,
            step: 0,
            opt: Adam::new(),
            order: Vec::new(),
            cursor: 0,
        })
    }

    fn next_batch<'a>(&mut self, data: &'a [Example]) -> Vec<&'a Example> {
        let b = self.config.batch_size;
        let mut out = Vec::with_capacity(b);
        while out.len() < b {
            if self.cursor >= self.order.len() {
                self.order = self.data_rng.permutation(data.len());
                self.cursor = 0;
            }
            out.push(&data[self.order[self.cursor]]);
            self.cursor += 1;
        }
        out
    }

    /// One optimizer step over `batch`, split into micro-batches whose
    /// gradients are summed with weights proportional to their size.
    pub fn step_on(&mut self, params: &mut ModelParams, batch: &[&Example]) -> Result<f32> {
        if batch.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        self.step += 1;
        let mb = self.config.micro_batch.unwrap_or(batch.len()).min(batch.len());
        let mut ctx = ForwardCtx::new(self.model_rng.next_u64());
        let mut total: BTreeMap<String, Tensor> = BTreeMap::new();
        let mut loss = 0.0f64;
        for part in batch.chunks(mb) {
            let (l, g) = loss_and_grads(params, part, &mut ctx)?;
            if !l.is_finite() {
                return Err(Error::Numeric { step: self.step, message: format!("loss is {l}") });
            }
            let w = part.len() as f32 / batch.len() as f32;
            loss += l as f64 * w as f64;
            for (k, g) in g {
                let g = g.scale(w);
                let merged = match total.remove(&k) {
                    Some(prev) => prev.add(&g)?,
                    None => g,
                };
                total.insert(k, merged);
            }
        }
        if let Some((name, _)) = total.iter().find(|(_, g)| !g.is_finite()) {
            return Err(Error::Numeric { step: self.step, message: format!("gradient of {name} is not finite") });
        }
        let lr = Adam::schedule(self.config.learning_rate, self.config.warmup_steps, self.step);
        self.opt.update(params, &total, lr, self.config.weight_decay)?;
        Ok(loss as f32)
    }

    pub fn step(&mut self, params: &mut ModelParams, data: &[Example]) -> Result<f32> {
        if data.is_empty() {
            return Err(Error::Empty("training set"));
        }
        let batch = self.next_batch(data);
        self.step_on(params, &batch)
    }
}

/// Trains for `config.steps` steps, evaluating on `eval` every
/// `config.eval_every` steps and once at the end.
pub fn train(
    params: &mut ModelParams,
    config: &TrainConfig,
    data: &[Example],
    eval: Option<&[Example]>,
) -> Result<TrainHistory> {
    let mut trainer = Trainer::new(config.clone())?;
    let mut history = TrainHistory::default();
    for s in 1..=config.steps {
        history.losses.push(trainer.step(params, data)?);
        let due = config.eval_every > 0 && s % config.eval_every == 0;
        if let Some(ev) = eval {
            if due || s == config.steps {
                history.evals.push(EvalPoint { step: s, accuracy: evaluate(params, ev, config.seed)? });
            }
        }
    }
    Ok(history)
}

/// Logits `[n, classes]` for every example, computed one at a time.
pub fn predict(params: &ModelParams, data: &[Example], seed: u64) -> Result<Tensor> {
    if data.is_empty() {
        return Err(Error::Empty("evaluation set"));
    }
    let bound = params.bind(false);
    let mut ctx = ForwardCtx::new(mix(seed, 0xe7a1));
    let mut rows = Vec::with_capacity(data.len());
    for ex in data {
        rows.push(batch_logits(&bound, &[ex], &mut ctx)?.value().clone());
    }
    Tensor::concat_rows(&rows)
}

pub fn evaluate(params: &ModelParams, data: &[Example], seed: u64) -> Result<f64> {
    let logits = predict(params, data, seed)?;
    let labels: Vec<usize> = data.iter().map(|e| e.label).collect();
    accuracy(&logits, &labels)
}
