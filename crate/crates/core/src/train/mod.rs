//! Pretraining and compensation fine-tuning.
//!
//! Each step draws a batch, builds examples (corrupting histories for
//! pretraining, cutting an interior gap for compensation), accumulates
//! gradients in fixed chunks of [`CHUNK`] examples and reduces the chunks in
//! index order. Per-example randomness comes from substreams keyed by the
//! global example index, so the result does not depend on the executor.

mod checkpoint;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, Checkpoint, CHECKPOINT_VERSION};

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::ingest::Sample;
use crate::net::{Example, Model, Parameters, Token};
use crate::noise::{apply_mask, corrupt, is_interior, plan_gap, MaskSpan, NoiseConfig};
use crate::real::Real;
use crate::rng::{stream, substream, Rng, Stream};

/// Examples per gradient task.
pub const CHUNK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    /// Zero disables training.
    pub total_steps: u64,
    pub batch_size: usize,
    /// Informational; the step budget is `total_steps`.
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; zero turns clipping off.
    pub clip_norm: f64,
    pub aux_denoise_loss: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 1e-4,
            warmup_steps: 4000,
            total_steps: 8000,
            batch_size: 64,
            epochs: 50,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            clip_norm: 1.0,
            aux_denoise_loss: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::config("train.base_lr", "must be > 0"));
        }
        if self.total_steps > 0 && self.warmup_steps >= self.total_steps {
            return Err(Error::config("train.warmup_steps", "must be < train.total_steps"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("train.batch_size", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("train.beta1", "Adam betas must lie in [0, 1)"));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("train.eps", "must be > 0"));
        }
        if !(self.clip_norm >= 0.0) {
            return Err(Error::config("train.clip_norm", "must be >= 0"));
        }
        Ok(())
    }
}

/// Mean squared error over every entry; shapes must agree.
pub fn mse_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(Error::Shape {
            context: "mse operands",
            expected: target.len(),
            actual: pred.len(),
        });
    }
    if pred.is_empty() {
        return Err(Error::Empty("mse operands"));
    }
    let sum: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(sum / pred.len() as f64)
}

/// Constant `base_lr` through warmup, then linear decay to zero.
pub fn lr_at(step: u64, cfg: &TrainConfig) -> Result<f64> {
    if step > cfg.total_steps {
        return Err(Error::Range {
            field: "step",
            value: step as f64,
            cap: cfg.total_steps as f64,
        });
    }
    if step <= cfg.warmup_steps {
        return Ok(cfg.base_lr);
    }
    let remaining = (cfg.total_steps - step) as f64;
    let span = (cfg.total_steps - cfg.warmup_steps) as f64;
    Ok(cfg.base_lr * remaining / span)
}

/// Adam with bias correction. Moments are kept in the parameter precision.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub t: u64,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Real> Adam<T> {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            t: 0,
            m: vec![T::ZERO; n],
            v: vec![T::ZERO; n],
        }
    }

    pub fn step(&mut self, params: &mut Parameters<T>, grad: &Parameters<T>, lr: f64) {
        self.t += 1;
        let b1 = T::from_f64(self.beta1);
        let b2 = T::from_f64(self.beta2);
        let c1 = 1.0 - libm::pow(self.beta1, self.t as f64);
        let c2 = 1.0 - libm::pow(self.beta2, self.t as f64);
        let step = T::from_f64(lr / c1);
        let inv_c2 = T::from_f64(1.0 / c2);
        let eps = T::from_f64(self.eps);
        for (((p, &g), m), v) in params
            .values
            .iter_mut()
            .zip(&grad.values)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = b1 * *m + (T::ONE - b1) * g;
            *v = b2 * *v + (T::ONE - b2) * g * g;
            *p -= step * *m / ((*v * inv_c2).sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub lr: f64,
    pub loss: f64,
}

/// Why training stopped early.
#[derive(Debug, Clone, PartialEq)]
pub struct Abort {
    pub step: u64,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters after the last finite step.
    pub model: Model<f32>,
    pub trace: Vec<TraceRow>,
    pub abort: Option<Abort>,
}

/// Builds the supervised example for one pretraining sample.
///
/// The encoder sees the corrupted history; the decoder is prompted with the
/// clean last history frame followed by the clean future, shifted by one.
pub fn pretrain_example(clean: &Sample, corrupted: &Sample, aux: bool) -> Result<Example<f32>> {
    let h = clean.meta.cfg.hist_len;
    let p = clean.meta.cfg.pred_len;
    if clean.frames.len() != h + p || corrupted.frames.len() != clean.frames.len() {
        return Err(Error::Shape {
            context: "sample frames",
            expected: h + p,
            actual: corrupted.frames.len(),
        });
    }
    let source: Vec<Token<f32>> = corrupted.frames[..h].iter().map(Token::from_frame).collect();
    let prompt: Vec<Token<f32>> = clean.frames[h - 1..h + p - 1].iter().map(Token::from_frame).collect();
    let target = flatten(&clean.frames[h..]);
    let aux = if aux {
        source
            .iter()
            .enumerate()
            .filter(|(_, t)| t.masked)
            .map(|(pos, t)| {
                let f = &clean.frames[t.mark as usize];
                (pos, f.flatten().into_iter().map(|v| v as f32).collect())
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(Example {
        source,
        prompt,
        target,
        aux,
    })
}

/// Builds a gap-filling example: the whole sample with `gap` masked as
/// encoder input, decoding the gap chronologically from the frame before it.
pub fn compensation_example(sample: &Sample, gap: MaskSpan) -> Result<Example<f32>> {
    let n = sample.frames.len();
    if !is_interior(gap, n) {
        return Err(Error::SpanOutOfRange {
            start: gap.start,
            len: gap.len,
            limit: n,
        });
    }
    let masked = apply_mask(sample, &[gap], n)?;
    let source = masked.frames.iter().map(Token::from_frame).collect();
    let prompt = sample.frames[gap.start - 1..gap.start + gap.len - 1]
        .iter()
        .map(Token::from_frame)
        .collect();
    let target = flatten(&sample.frames[gap.start..gap.start + gap.len]);
    Ok(Example {
        source,
        prompt,
        target,
        aux: Vec::new(),
    })
}

fn flatten(frames: &[crate::ingest::Frame]) -> Vec<f32> {
    frames.iter().flat_map(|f| f.flatten()).map(|v| v as f32).collect()
}

/// Epoch-shuffled index stream over the corpus.
struct Batcher {
    order: Vec<usize>,
    pos: usize,
    rng: Rng,
}

impl Batcher {
    fn new(n: usize, seed: u64) -> Self {
        let mut b = Batcher {
            order: (0..n).collect(),
            pos: n,
            rng: stream(seed, Stream::Batch),
        };
        b.refill();
        b
    }

    fn refill(&mut self) {
        self.order.shuffle(&mut self.rng);
        self.pos = 0;
    }

    fn take(&mut self, k: usize) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        for _ in 0..k {
            if self.pos == self.order.len() {
                self.refill();
            }
            out.push(self.order[self.pos]);
            self.pos += 1;
        }
        out
    }
}

/// One optimizer step's worth of state.
pub struct Trainer {
    pub model: Model<f32>,
    pub cfg: TrainConfig,
    adam: Adam<f32>,
    step: u64,
}

impl Trainer {
    pub fn new(model: Model<f32>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let adam = Adam::new(model.params.len(), cfg.beta1, cfg.beta2, cfg.eps);
        Ok(Trainer {
            model,
            cfg,
            adam,
            step: 0,
        })
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    /// Runs one step; `build(k)` produces the example for batch position `k`
    /// or `None` to skip it. Returns the mean loss over built examples.
    pub fn step<E, B>(&mut self, batch: usize, build: B, exec: &E) -> Result<TraceRow>
    where
        E: Executor,
        B: Fn(usize) -> Result<Option<Example<f32>>> + Sync + Send,
    {
        let lr = lr_at(self.step, &self.cfg)?;
        let dropout = self.model.cfg.dropout > 0.0;
        let seed = self.cfg.seed;
        let first = self.step * self.cfg.batch_size as u64;
        let model = &self.model;
        let n_chunks = batch.div_ceil(CHUNK);
        let chunks = exec.map(n_chunks, |c| -> Result<(f64, usize, Parameters<f32>)> {
            let mut g = Parameters::zeros(model.params.len());
            let mut loss = 0.0;
            let mut count = 0;
            for k in c * CHUNK..((c + 1) * CHUNK).min(batch) {
                let Some(ex) = build(k)? else { continue };
                let mut rng = substream(seed, Stream::Dropout, first + k as u64);
                let rng: Option<&mut dyn rand::RngCore> = if dropout { Some(&mut rng) } else { None };
                loss += model.accumulate_grad(&ex, rng, &mut g)? as f64;
                count += 1;
            }
            Ok((loss, count, g))
        });
        let mut total = Parameters::zeros(self.model.params.len());
        let mut loss = 0.0;
        let mut count = 0;
        for r in chunks {
            let (l, c, g) = r?;
            loss += l;
            count += c;
            total.add_assign(&g);
        }
        let step = self.step;
        self.step += 1;
        if count == 0 {
            return Ok(TraceRow { step, lr, loss: 0.0 });
        }
        let loss = loss / count as f64;
        if !loss.is_finite() || !total.all_finite() {
            return Err(Error::NonFinite {
                context: "training step",
                index: step as usize,
            });
        }
        total.scale(1.0 / count as f32);
        if self.cfg.clip_norm > 0.0 {
            let norm = total.l2_norm();
            if norm > self.cfg.clip_norm {
                total.scale((self.cfg.clip_norm / norm) as f32);
            }
        }
        self.adam.step(&mut self.model.params, &total, lr);
        Ok(TraceRow { step, lr, loss })
    }

    /// Runs the remaining schedule. A non-finite step stops training and
    /// keeps the parameters from before that step.
    pub fn run<E, B>(mut self, exec: &E, mut per_step: B) -> Result<TrainOutcome>
    where
        E: Executor,
        B: FnMut(&mut Self, &E) -> Result<TraceRow>,
    {
        let mut trace = Vec::new();
        let mut abort = None;
        while self.step < self.cfg.total_steps {
            let backup = self.model.params.clone();
            let adam = self.adam.clone();
            match per_step(&mut self, exec) {
                Ok(row) => trace.push(row),
                Err(Error::NonFinite { .. }) => {
                    self.model.params = backup;
                    self.adam = adam;
                    abort = Some(Abort {
                        step: self.step - 1,
                        reason: String::from("non-finite loss or gradient"),
                    });
                    break;
                }
                Err(e) => return Err(e),
            }
            if !self.model.params.all_finite() {
                self.model.params = backup;
                abort = Some(Abort {
                    step: self.step - 1,
                    reason: String::from("non-finite parameters after update"),
                });
                break;
            }
        }
        Ok(TrainOutcome {
            model: self.model,
            trace,
            abort,
        })
    }
}

fn check_corpus(corpus: &[Sample], model: &Model<f32>) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Empty("training corpus"));
    }
    let cfg = &model.cfg;
    for s in corpus {
        let d = &s.meta.cfg;
        if d.max_slots != cfg.max_slots || d.hist_len != cfg.hist_len || d.pred_len != cfg.pred_len {
            return Err(Error::config(
                "model.max_slots",
                "corpus domain does not match model max_slots/hist_len/pred_len",
            ));
        }
    }
    Ok(())
}

/// Denoising pretraining: corrupted history in, next `pred_len` frames out.
pub fn pretrain<E: Executor>(
    model: Model<f32>,
    corpus: &[Sample],
    ncfg: &NoiseConfig,
    tcfg: &TrainConfig,
    exec: &E,
) -> Result<TrainOutcome> {
    check_corpus(corpus, &model)?;
    ncfg.validate()?;
    if tcfg.aux_denoise_loss && model.layout.aux.is_none() {
        return Err(Error::config("train.aux_denoise_loss", "requires model.aux_head = true"));
    }
    let trainer = Trainer::new(model, *tcfg)?;
    let mut batcher = Batcher::new(corpus.len(), tcfg.seed);
    let (batch, seed, aux) = (tcfg.batch_size, tcfg.seed, tcfg.aux_denoise_loss);
    let ncfg = *ncfg;
    trainer.run(exec, |tr, exec| {
        let idx = batcher.take(batch);
        let first = tr.steps_done() * batch as u64;
        let hist = tr.model.cfg.hist_len;
        tr.step(
            batch,
            |k| {
                let clean = &corpus[idx[k]];
                let mut rng = substream(seed, Stream::Noise, first + k as u64);
                let (noisy, _) = corrupt(clean, &ncfg, hist, &mut rng)?;
                if noisy.future() != clean.future() {
                    return Err(Error::config("noise", "corruption touched target frames"));
                }
                pretrain_example(clean, &noisy, aux).map(Some)
            },
            exec,
        )
    })
}

/// Fine-tunes on gap filling. Gap lengths follow the pretraining span
/// distribution (`ncfg.lambda`) capped at `pred_len`.
pub fn finetune_compensation<E: Executor>(
    model: Model<f32>,
    corpus: &[Sample],
    ncfg: &NoiseConfig,
    tcfg: &TrainConfig,
    exec: &E,
) -> Result<TrainOutcome> {
    check_corpus(corpus, &model)?;
    ncfg.validate()?;
    let trainer = Trainer::new(model, *tcfg)?;
    let mut batcher = Batcher::new(corpus.len(), tcfg.seed);
    let (batch, seed, lambda) = (tcfg.batch_size, tcfg.seed, ncfg.lambda);
    trainer.run(exec, |tr, exec| {
        let idx = batcher.take(batch);
        let first = tr.steps_done() * batch as u64;
        let max_gap = tr.model.cfg.pred_len;
        tr.step(
            batch,
            |k| {
                let s = &corpus[idx[k]];
                let mut rng = substream(seed, Stream::Noise, first + k as u64);
                match plan_gap(s.frames.len(), max_gap, lambda, &mut rng)? {
                    Some(gap) => compensation_example(s, gap).map(Some),
                    None => Ok(None),
                }
            },
            exec,
        )
    })
}
