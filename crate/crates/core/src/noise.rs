//! Pretraining corruptions of the history part of a sample.
//!
//! Span masking hides whole frames; the number of hidden frames is fixed by
//! the mask rate and the individual span lengths are Poisson draws. Frame
//! swapping exchanges two history frames together with their marks.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Sample;
use crate::rng::Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskSpan {
    pub start: usize,
    pub len: usize,
}

/// Corruptions applied to one training example.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoisePlan {
    pub mask_spans: Vec<MaskSpan>,
    pub swaps: Vec<(usize, usize)>,
}

impl NoisePlan {
    pub fn masked_frames(&self) -> usize {
        self.mask_spans.iter().map(|s| s.len).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Fraction of history frames hidden when masking fires.
    pub mask_rate: f64,
    /// Poisson mean of mask span lengths.
    pub lambda: f64,
    pub p_mask: f64,
    pub p_swap: f64,
    /// Swap pairs per corrupted sample.
    pub swap_pairs: usize,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        NoiseConfig {
            mask_rate: 0.15,
            lambda: 3.0,
            p_mask: 0.5,
            p_swap: 0.5,
            swap_pairs: 1,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.mask_rate) {
            return Err(Error::config("noise.mask_rate", "must lie in [0, 1)"));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("noise.lambda", "must be > 0"));
        }
        if !(0.0..=1.0).contains(&self.p_mask) {
            return Err(Error::config("noise.p_mask", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.p_swap) {
            return Err(Error::config("noise.p_swap", "must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Frames hidden per plan: `round(mask_rate * hist_len)`.
    pub fn mask_total(&self, hist_len: usize) -> usize {
        libm::round(self.mask_rate * hist_len as f64) as usize
    }
}

/// Poisson span lengths (zero draws rejected) truncated so they sum to
/// `total`.
pub fn draw_span_lengths(total: usize, lambda: f64, rng: &mut Rng) -> Result<Vec<usize>> {
    let poisson = Poisson::new(lambda).map_err(|_| Error::config("noise.lambda", "must be > 0"))?;
    let mut lens = Vec::new();
    let mut sum = 0;
    while sum < total {
        let k = poisson.sample(rng) as usize;
        if k == 0 {
            continue;
        }
        let k = k.min(total - sum);
        lens.push(k);
        sum += k;
    }
    Ok(lens)
}

/// Places spans of the given lengths at uniformly random, non-overlapping
/// positions in `[0, len)`.
pub fn place_spans(lengths: &[usize], len: usize, rng: &mut Rng) -> Result<Vec<MaskSpan>> {
    let total: usize = lengths.iter().sum();
    if total > len {
        return Err(Error::SpanOutOfRange {
            start: 0,
            len: total,
            limit: len,
        });
    }
    let mut order = lengths.to_vec();
    order.shuffle(rng);
    // Stars and bars: pick which of the (free + k) items are spans.
    let free = len - total;
    let k = order.len();
    let mut picks = rand::seq::index::sample(rng, free + k, k).into_vec();
    picks.sort_unstable();
    let mut spans = Vec::with_capacity(k);
    let mut pos = 0;
    let mut item = 0;
    for (span_no, &p) in picks.iter().enumerate() {
        pos += p - item;
        item = p + 1;
        spans.push(MaskSpan {
            start: pos,
            len: order[span_no],
        });
        pos += order[span_no];
    }
    Ok(spans)
}

pub fn plan_mask(hist_len: usize, cfg: &NoiseConfig, rng: &mut Rng) -> Result<Vec<MaskSpan>> {
    if hist_len == 0 {
        return Err(Error::config("domain.hist_len", "must be >= 1"));
    }
    let total = cfg.mask_total(hist_len);
    let lengths = draw_span_lengths(total, cfg.lambda, rng)?;
    place_spans(&lengths, hist_len, rng)
}

/// Marks the frames covered by `spans`. Slot contents are left as they are;
/// the network substitutes its mask embedding.
pub fn apply_mask(s: &Sample, spans: &[MaskSpan], hist_len: usize) -> Result<Sample> {
    let limit = hist_len.min(s.frames.len());
    for sp in spans {
        if sp.len == 0 || sp.start + sp.len > limit {
            return Err(Error::SpanOutOfRange {
                start: sp.start,
                len: sp.len,
                limit,
            });
        }
    }
    let mut out = s.clone();
    for sp in spans {
        for f in &mut out.frames[sp.start..sp.start + sp.len] {
            f.masked = true;
        }
    }
    Ok(out)
}

/// Exchanges frames `i` and `j` with everything they carry, mark included.
pub fn apply_swap(s: &Sample, i: usize, j: usize, hist_len: usize) -> Result<Sample> {
    let limit = hist_len.min(s.frames.len());
    if i == j || i >= limit || j >= limit {
        return Err(Error::InvalidSwap { i, j, limit });
    }
    let mut out = s.clone();
    out.frames.swap(i, j);
    Ok(out)
}

/// Draws and applies random corruptions to the first `hist_len` frames.
pub fn corrupt(s: &Sample, cfg: &NoiseConfig, hist_len: usize, rng: &mut Rng) -> Result<(Sample, NoisePlan)> {
    if s.frames.len() < hist_len {
        return Err(Error::Shape {
            context: "sample frames",
            expected: hist_len,
            actual: s.frames.len(),
        });
    }
    let mut plan = NoisePlan::default();
    let mut out = s.clone();
    if rng.random::<f64>() < cfg.p_mask {
        plan.mask_spans = plan_mask(hist_len, cfg, rng)?;
        out = apply_mask(&out, &plan.mask_spans, hist_len)?;
    }
    if hist_len >= 2 && rng.random::<f64>() < cfg.p_swap {
        for _ in 0..cfg.swap_pairs {
            let i = rng.random_range(0..hist_len);
            let mut j = rng.random_range(0..hist_len - 1);
            if j >= i {
                j += 1;
            }
            out = apply_swap(&out, i, j, hist_len)?;
            plan.swaps.push((i, j));
        }
    }
    Ok((out, plan))
}

/// Re-applies a recorded plan.
pub fn apply_plan(s: &Sample, plan: &NoisePlan, hist_len: usize) -> Result<Sample> {
    let mut out = apply_mask(s, &plan.mask_spans, hist_len)?;
    for &(i, j) in &plan.swaps {
        out = apply_swap(&out, i, j, hist_len)?;
    }
    Ok(out)
}

/// Contiguous interior gap for the compensation task.
///
/// The length is a Poisson draw capped at `max_len`; a zero draw yields
/// `None` and the caller skips the example. Placements touching the first
/// or last frame are rejected and redrawn.
pub fn plan_gap(seq_len: usize, max_len: usize, lambda: f64, rng: &mut Rng) -> Result<Option<MaskSpan>> {
    let poisson = Poisson::new(lambda).map_err(|_| Error::config("noise.lambda", "must be > 0"))?;
    let len = (poisson.sample(rng) as usize).min(max_len);
    if len == 0 {
        return Ok(None);
    }
    if seq_len < len + 2 {
        return Err(Error::SpanOutOfRange {
            start: 1,
            len,
            limit: seq_len,
        });
    }
    loop {
        let span = MaskSpan {
            start: rng.random_range(0..=seq_len - len),
            len,
        };
        if is_interior(span, seq_len) {
            return Ok(Some(span));
        }
    }
}

/// True when `span` leaves at least one frame on each side.
pub fn is_interior(span: MaskSpan, seq_len: usize) -> bool {
    span.len > 0 && span.start >= 1 && span.start + span.len < seq_len
}
