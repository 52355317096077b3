//! Prediction, continuous rollout and trajectory extraction.
//!
//! The network always sees its input window with relative marks
//! `0..hist_len`, the range it was trained on. Output frames carry absolute
//! marks that keep counting across rollout loops.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::ingest::{denormalize, DomainConfig, Frame, MeterBox, NormBox, Sample, TileOrigin};
use crate::mat::Mat;
use crate::net::{Model, Token};
use crate::noise::{apply_mask, is_interior, MaskSpan};

/// Thresholds on normalized length and width above which a slot holds a
/// vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PresenceRule {
    pub eps_w: f64,
    pub eps_h: f64,
}

impl Default for PresenceRule {
    fn default() -> Self {
        PresenceRule {
            eps_w: 0.05,
            eps_h: 0.05,
        }
    }
}

impl PresenceRule {
    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !open(self.eps_w) {
            return Err(Error::config("presence.eps_w", "must lie in (0, 1)"));
        }
        if !open(self.eps_h) {
            return Err(Error::config("presence.eps_h", "must lie in (0, 1)"));
        }
        Ok(())
    }

    pub fn is_present(&self, b: &NormBox) -> bool {
        b.w > self.eps_w && b.h > self.eps_h
    }
}

/// Per-slot presence flags and the vehicle count.
pub fn presence(slots: &[NormBox], rule: &PresenceRule) -> (Vec<bool>, usize) {
    let flags: Vec<bool> = slots.iter().map(|b| rule.is_present(b)).collect();
    let count = flags.iter().filter(|&&p| p).count();
    (flags, count)
}

/// Predicted frames, normalized and unclamped, with presence flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub frames: Vec<Frame>,
    /// Rollout loop that produced each frame.
    pub loops: Vec<usize>,
    /// Identifier of the producing checkpoint, filled in by the caller.
    pub provenance: String,
}

fn to_frames(out: &Mat<f32>, first_mark: u32, max_slots: usize, rule: &PresenceRule) -> Vec<Frame> {
    (0..out.rows)
        .map(|r| {
            let slots: Vec<NormBox> = out
                .row(r)
                .chunks_exact(4)
                .take(max_slots)
                .map(|c| NormBox::from_array([c[0] as f64, c[1] as f64, c[2] as f64, c[3] as f64]))
                .collect();
            let (present, _) = presence(&slots, rule);
            Frame {
                mark: first_mark + r as u32,
                masked: false,
                slots,
                present,
            }
        })
        .collect()
}

/// Encoder tokens for a window, re-marked `0..len`.
fn window_tokens(window: &[Frame]) -> Vec<Token<f32>> {
    window
        .iter()
        .enumerate()
        .map(|(i, f)| {
            let mut t = Token::<f32>::from_frame(f).with_mark(i as u32);
            t.masked = false;
            t
        })
        .collect()
}

/// Sliding-window state of a continuous rollout.
#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub window: Vec<Frame>,
    /// Absolute mark of the next predicted frame.
    pub next_mark: u32,
    /// Index of the next loop.
    pub loop_index: usize,
}

impl Rollout {
    pub fn new(history: &[Frame], hist_len: usize) -> Result<Self> {
        if history.len() != hist_len {
            return Err(Error::Shape {
                context: "history frames",
                expected: hist_len,
                actual: history.len(),
            });
        }
        let last = history.last().map(|f| f.mark).unwrap_or(0);
        Ok(Rollout {
            window: history.to_vec(),
            next_mark: last + 1,
            loop_index: 0,
        })
    }

    /// Runs `loops` more prediction rounds. Each round predicts `pred_len`
    /// frames and slides the window forward by them; fed-back frames have
    /// their absent slots zeroed, as in the training data.
    pub fn advance(&mut self, model: &Model<f32>, loops: usize, rule: &PresenceRule) -> Result<Prediction> {
        let cfg = &model.cfg;
        if self.window.len() != cfg.hist_len {
            return Err(Error::Shape {
                context: "history frames",
                expected: cfg.hist_len,
                actual: self.window.len(),
            });
        }
        let mut pred = Prediction {
            frames: Vec::with_capacity(loops * cfg.pred_len),
            loops: Vec::with_capacity(loops * cfg.pred_len),
            provenance: String::new(),
        };
        for _ in 0..loops {
            let tokens = window_tokens(&self.window);
            let start = tokens[tokens.len() - 1].clone();
            let out = model.generate(&tokens, &start, cfg.pred_len)?;
            if !out.all_finite() {
                return Err(Error::NonFinite {
                    context: "rollout loop",
                    index: self.loop_index,
                });
            }
            let frames = to_frames(&out, self.next_mark, cfg.max_slots, rule);
            for f in &frames {
                let mut fed = f.clone();
                for (b, &p) in fed.slots.iter_mut().zip(&fed.present) {
                    if !p {
                        *b = NormBox::ZERO;
                    }
                }
                self.window.remove(0);
                self.window.push(fed);
            }
            self.next_mark += cfg.pred_len as u32;
            pred.loops.extend(core::iter::repeat_n(self.loop_index, frames.len()));
            pred.frames.extend(frames);
            self.loop_index += 1;
        }
        Ok(pred)
    }
}

/// One-shot prediction of `pred_len` frames from a clean history.
pub fn predict(model: &Model<f32>, history: &[Frame], rule: &PresenceRule) -> Result<Prediction> {
    rollout(model, history, 1, rule)
}

/// Continuous prediction: `loops` rounds of `pred_len` frames each.
pub fn rollout(model: &Model<f32>, history: &[Frame], loops: usize, rule: &PresenceRule) -> Result<Prediction> {
    if loops == 0 {
        return Err(Error::config("loops", "must be >= 1"));
    }
    Rollout::new(history, model.cfg.hist_len)?.advance(model, loops, rule)
}

/// Rolls out several independent groups in parallel.
pub fn rollout_many<E: Executor>(
    model: &Model<f32>,
    histories: &[Vec<Frame>],
    loops: usize,
    rule: &PresenceRule,
    exec: &E,
) -> Vec<Result<Prediction>> {
    exec.map(histories.len(), |i| rollout(model, &histories[i], loops, rule))
}

/// Reconstructs the frames of an interior `gap` from both sides: the whole
/// sample with the gap masked is encoded and the gap is decoded in order,
/// starting from the frame before it.
pub fn fill_gap(model: &Model<f32>, sample: &Sample, gap: MaskSpan, rule: &PresenceRule) -> Result<Vec<Frame>> {
    let n = sample.frames.len();
    if !is_interior(gap, n) {
        return Err(Error::SpanOutOfRange {
            start: gap.start,
            len: gap.len,
            limit: n,
        });
    }
    let masked = apply_mask(sample, &[gap], n)?;
    let source: Vec<Token<f32>> = masked.frames.iter().map(Token::from_frame).collect();
    let start = Token::from_frame(&sample.frames[gap.start - 1]);
    let out = model.generate(&source, &start, gap.len)?;
    Ok(to_frames(&out, sample.frames[gap.start].mark, model.cfg.max_slots, rule))
}

/// One point of a slot's trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrackPointM {
    /// Index into the frame sequence.
    pub frame: usize,
    pub mark: u32,
    pub pos: MeterBox,
    /// Speed from the previous point, m/s; `None` at a segment start.
    pub speed: Option<f64>,
}

/// A maximal run of consecutive frames in which the slot is present.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub slot: usize,
    pub points: Vec<TrackPointM>,
}

/// Splits each slot into present runs and derives speeds from centre
/// displacement between consecutive frames.
pub fn extract_trajectories(frames: &[Frame], cfg: &DomainConfig, origin: TileOrigin) -> Vec<Segment> {
    let slots = frames.iter().map(|f| f.slots.len()).max().unwrap_or(0);
    let mut out = Vec::new();
    for slot in 0..slots {
        let mut cur: Option<Segment> = None;
        for (i, f) in frames.iter().enumerate() {
            let present = f.present.get(slot).copied().unwrap_or(false);
            if !present {
                if let Some(seg) = cur.take() {
                    out.push(seg);
                }
                continue;
            }
            let pos = denormalize(&f.slots[slot], cfg, origin);
            let seg = cur.get_or_insert_with(|| Segment {
                slot,
                points: Vec::new(),
            });
            let speed = seg.points.last().map(|p| {
                let (dx, dy) = (pos.x - p.pos.x, pos.y - p.pos.y);
                libm::sqrt(dx * dx + dy * dy) / cfg.dt
            });
            seg.points.push(TrackPointM {
                frame: i,
                mark: f.mark,
                pos,
                speed,
            });
        }
        if let Some(seg) = cur {
            out.push(seg);
        }
    }
    out
}

/// Per-`(frame, slot)` speeds looked up from extracted segments.
pub fn speed_grid(segments: &[Segment], frames: usize, slots: usize) -> Vec<Vec<Option<f64>>> {
    let mut grid = alloc::vec![alloc::vec![None; slots]; frames];
    for s in segments {
        for p in &s.points {
            grid[p.frame][s.slot] = p.speed;
        }
    }
    grid
}
