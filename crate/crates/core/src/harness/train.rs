use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::optim::{clip_global_norm, lr_at, AdamW, AdamWConfig, Schedule};
use super::task::{Example, Task};
use crate::adapters::AdapterSet;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::tensor::{Element, Tape, Tensor};
use crate::transformer::{last_token_loss, Backbone, LOSS_SCOPE};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Examples per micro-batch.
    pub batch_size: usize,
    /// Micro-batches averaged into one optimizer step.
    pub accum_steps: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub clip_norm: f64,
    pub seed: u64,
    pub schedule: Schedule,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            accum_steps: 1,
            lr: 1e-3,
            weight_decay: 0.01,
            warmup_steps: 100,
            clip_norm: 1.0,
            seed: 0,
            schedule: Schedule::Cosine,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
        }
    }
}

impl TrainConfig {
    /// `steps = 0` is allowed and yields an untrained report.
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.accum_steps == 0 {
            return Err(Error::Config("batch_size and accum_steps must be at least 1".into()));
        }
        if !(self.clip_norm > 0.0) {
            return Err(Error::Config(format!("clip_norm {} must be positive", self.clip_norm)));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("lr and weight_decay must be finite and non-negative".into()));
        }
        Ok(())
    }

    fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Workers for the final evaluation passes.
    pub exec: Exec,
    /// Record wall-clock throughput.
    pub timing: bool,
    pub budget: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub adapter: String,
    pub pooling: String,
    pub rank: Option<usize>,
    pub targets: String,
    pub task: String,
    pub seq_len: usize,
    pub batch_size: usize,
    pub accum_steps: usize,
    pub steps: usize,
    pub params_trainable: usize,
    pub loss_trace: Vec<f64>,
    pub peak_adapter_bytes: u64,
    pub peak_base_bytes: u64,
    pub peak_loss_bytes: u64,
    pub final_loss: Option<f64>,
    pub final_acc: f64,
    pub heldout_acc: Option<f64>,
    pub tokens_per_sec: Option<f64>,
    /// Every batch is `batch_size × seq_len` with no padding.
    pub batching: &'static str,
}

pub fn measure_throughput(tokens: u64, elapsed_seconds: f64) -> Result<f64> {
    if !(elapsed_seconds > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "elapsed time {elapsed_seconds} s must be positive"
        )));
    }
    Ok(tokens as f64 / elapsed_seconds)
}

/// Ledger bytes of one forward + backward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepMeasure {
    pub adapter_bytes: u64,
    pub base_bytes: u64,
    pub loss_bytes: u64,
    pub loss: f64,
}

struct Step<T> {
    measure: StepMeasure,
    grads: Vec<Tensor<T>>,
}

fn run_step<T: Element>(
    model: &Backbone<T>,
    adapters: &AdapterSet<T>,
    task: &Task,
    examples: &[Example],
    budget: Option<u64>,
) -> Result<Step<T>> {
    let (tokens, targets, _) = task.batch(examples)?;
    let mut tape = Tape::new().with_budget(budget);
    let bound = adapters.bind(&mut tape);
    let logits = model.forward(&mut tape, &tokens, Some(&bound))?;
    let loss = last_token_loss(&mut tape, logits, targets)?;
    let ledger = tape.ledger();
    let measure = StepMeasure {
        adapter_bytes: ledger.prefix_bytes("adapter:"),
        base_bytes: ledger.scope_bytes(crate::tensor::BASE_SCOPE),
        loss_bytes: ledger.scope_bytes(LOSS_SCOPE),
        loss: tape.data(loss)[0].f64(),
    };
    let grads = tape.backward(loss)?;
    Ok(Step {
        measure,
        grads: bound.collect_grads(&grads)?,
    })
}

/// One forward + backward on the first `batch` training examples.
pub fn measure_step<T: Element>(
    model: &Backbone<T>,
    adapters: &AdapterSet<T>,
    task: &Task,
    batch: usize,
    budget: Option<u64>,
) -> Result<StepMeasure> {
    let examples: Vec<Example> = (0..batch).map(|i| task.train_example(i)).collect();
    Ok(run_step(model, adapters, task, &examples, budget)?.measure)
}

/// Accuracy (argmax over the answer tokens) and mean loss over `examples`.
pub fn evaluate<T: Element>(
    model: &Backbone<T>,
    adapters: &AdapterSet<T>,
    task: &Task,
    examples: &[Example],
    exec: Exec,
) -> Result<(f64, f64)> {
    const CHUNK: usize = 32;
    if examples.is_empty() {
        return Err(Error::InvalidArgument("nothing to evaluate".into()));
    }
    let answers = task.answer_tokens();
    let chunks: Vec<&[Example]> = examples.chunks(CHUNK).collect();
    let scored = exec.map(&chunks, |chunk| -> Result<(usize, f64)> {
        let (tokens, targets, labels) = task.batch(chunk)?;
        let mut tape = Tape::new();
        let bound = adapters.bind(&mut tape);
        let logits = model.forward(&mut tape, &tokens, Some(&bound))?;
        let loss = last_token_loss(&mut tape, logits, targets)?;
        let (s, v) = (tokens.seq, tape.shape(logits)[2]);
        let data = tape.data(logits);
        let mut correct = 0;
        for (b, &label) in labels.iter().enumerate() {
            let row = &data[(b * s + s - 1) * v..(b * s + s) * v];
            let best = answers
                .iter()
                .enumerate()
                .fold((0, T::neg_infinity()), |acc, (k, &tok)| if row[tok] > acc.1 { (k, row[tok]) } else { acc })
                .0;
            correct += usize::from(best == label);
        }
        Ok((correct, tape.data(loss)[0].f64() * chunk.len() as f64))
    });
    let (mut correct, mut loss) = (0, 0.0);
    for r in scored {
        let (c, l) = r?;
        correct += c;
        loss += l;
    }
    Ok((correct as f64 / examples.len() as f64, loss / examples.len() as f64))
}

/// Trains the adapter tensors only; the backbone is borrowed immutably.
pub fn train<T: Element>(
    model: &Backbone<T>,
    adapters: &mut AdapterSet<T>,
    task: &Task,
    cfg: &TrainConfig,
    opts: TrainOptions,
) -> Result<RunReport> {
    cfg.validate()?;
    let mut opt = AdamW::new(cfg.adamw(), &adapters.tensors());
    let mut loss_trace = Vec::with_capacity(cfg.steps);
    let (mut peak_adapter, mut peak_base, mut peak_loss) = (0, 0, 0);
    let (mut tokens_seen, mut seconds) = (0u64, 0.0f64);
    let mut cursor = 0usize;

    for step in 0..cfg.steps {
        let started = Instant::now();
        let mut total: Option<Vec<Tensor<T>>> = None;
        let mut step_loss = 0.0;
        for _ in 0..cfg.accum_steps {
            let examples: Vec<Example> = (cursor..cursor + cfg.batch_size).map(|i| task.train_example(i)).collect();
            cursor += cfg.batch_size;
            let Step { measure, grads } = run_step(model, adapters, task, &examples, opts.budget)?;
            if !measure.loss.is_finite() {
                return Err(Error::Divergence { step });
            }
            peak_adapter = peak_adapter.max(measure.adapter_bytes);
            peak_base = peak_base.max(measure.base_bytes);
            peak_loss = peak_loss.max(measure.loss_bytes);
            step_loss += measure.loss;
            total = Some(match total {
                None => grads,
                Some(mut acc) => {
                    for (a, g) in acc.iter_mut().zip(&grads) {
                        a.data_mut().iter_mut().zip(g.data()).for_each(|(x, &y)| *x = *x + y);
                    }
                    acc
                }
            });
        }
        let mut grads = total.expect("accum_steps >= 1");
        if cfg.accum_steps > 1 {
            let inv = T::of(1.0 / cfg.accum_steps as f64);
            for g in &mut grads {
                g.data_mut().iter_mut().for_each(|v| *v = *v * inv);
            }
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence { step });
        }
        clip_global_norm(&mut grads, cfg.clip_norm);
        let lr = lr_at(cfg.schedule, cfg.lr, step, cfg.warmup_steps, cfg.steps);
        opt.step(&mut adapters.tensors_mut(), &grads, lr)?;
        loss_trace.push(step_loss / cfg.accum_steps as f64);
        tokens_seen += (cfg.accum_steps * cfg.batch_size * task.seq_len()) as u64;
        seconds += started.elapsed().as_secs_f64();
    }

    let train_set: Vec<Example> = (0..task.train_size()).map(|i| task.train_example(i)).collect();
    let (final_acc, _) = evaluate(model, adapters, task, &train_set, opts.exec)?;
    let heldout_acc = if task.eval_size() > 0 {
        let held: Vec<Example> = (0..task.eval_size()).map(|i| task.heldout_example(i)).collect();
        Some(evaluate(model, adapters, task, &held, opts.exec)?.0)
    } else {
        None
    };
    let tokens_per_sec = if opts.timing && cfg.steps > 0 {
        Some(measure_throughput(tokens_seen, seconds.max(f64::MIN_POSITIVE))?)
    } else {
        None
    };
    let spec = adapters.spec();
    Ok(RunReport {
        adapter: spec.kind().to_string(),
        pooling: spec.pooling().to_string(),
        rank: spec.rank(),
        targets: spec.targets_label(),
        task: task.spec().kind().to_string(),
        seq_len: task.seq_len(),
        batch_size: cfg.batch_size,
        accum_steps: cfg.accum_steps,
        steps: cfg.steps,
        params_trainable: adapters.trainable_count(),
        final_loss: loss_trace.last().copied(),
        loss_trace,
        peak_adapter_bytes: peak_adapter,
        peak_base_bytes: peak_base,
        peak_loss_bytes: peak_loss,
        final_acc,
        heldout_acc,
        tokens_per_sec,
        batching: "fixed_length",
    })
}
