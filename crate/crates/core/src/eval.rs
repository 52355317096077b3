//! Test-set metrics: position RMSE, overlap rate, IoU, car-count delta and
//! speed deviation.
//!
//! Geometry is scored in meters on center-format rectangles. Only slots
//! present in the ground truth enter RMSE and IoU; spurious predicted
//! vehicles show up through the count delta.

use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::Executor;
use crate::infer::{extract_trajectories, fill_gap, predict, speed_grid, PresenceRule};
use crate::ingest::{denormalize, Frame, MeterBox, NormBox, Sample, SampleMeta};
use crate::net::{Model, Token};
use crate::noise::plan_gap;
use crate::rng::{substream, Stream};

/// Axis-aligned rectangle given by its center and extents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rect {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl From<MeterBox> for Rect {
    fn from(b: MeterBox) -> Self {
        Rect {
            cx: b.x,
            cy: b.y,
            w: b.len,
            h: b.wid,
        }
    }
}

impl From<NormBox> for Rect {
    fn from(b: NormBox) -> Self {
        Rect {
            cx: b.x,
            cy: b.y,
            w: b.w,
            h: b.h,
        }
    }
}

fn overlap_1d(c1: f64, e1: f64, c2: f64, e2: f64) -> f64 {
    let lo = (c1 - e1 / 2.0).max(c2 - e2 / 2.0);
    let hi = (c1 + e1 / 2.0).min(c2 + e2 / 2.0);
    (hi - lo).max(0.0)
}

pub fn intersection(a: &Rect, b: &Rect) -> f64 {
    overlap_1d(a.cx, a.w.max(0.0), b.cx, b.w.max(0.0)) * overlap_1d(a.cy, a.h.max(0.0), b.cy, b.h.max(0.0))
}

/// Intersection over union; a zero-area union scores 0.
pub fn iou(a: &Rect, b: &Rect) -> f64 {
    let inter = intersection(a, b);
    let union = a.w.max(0.0) * a.h.max(0.0) + b.w.max(0.0) * b.h.max(0.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Both RMSE conventions over `n` scored slots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rmse {
    /// `(1/n) * sqrt(sum of squared box differences)`.
    pub printed: f64,
    /// `sqrt(sum / n)`.
    pub conventional: f64,
    pub n: u64,
}

impl Rmse {
    pub fn from_sum(sum_sq: f64, n: u64) -> Result<Self> {
        if n == 0 {
            return Err(Error::Empty("RMSE pairs"));
        }
        let root = libm::sqrt(sum_sq);
        Ok(Rmse {
            printed: root / n as f64,
            conventional: libm::sqrt(sum_sq / n as f64),
            n,
        })
    }
}

fn sq_diff(a: [f64; 4], b: [f64; 4]) -> f64 {
    a.iter().zip(&b).map(|(p, g)| (p - g) * (p - g)).sum()
}

/// RMSE over `(prediction, ground truth)` box pairs as `(x, y, w, h)`.
pub fn rmse_eq2(pairs: &[([f64; 4], [f64; 4])]) -> Result<Rmse> {
    let sum: f64 = pairs.iter().map(|(p, g)| sq_diff(*p, *g)).sum();
    Rmse::from_sum(sum, pairs.len() as u64)
}

/// `(overlapping, total)` present boxes in one frame. A box overlaps when it
/// shares strictly positive area with any other box.
pub fn overlap_counts(boxes: &[Rect]) -> (u64, u64) {
    let overlapping = (0..boxes.len())
        .filter(|&i| (0..boxes.len()).any(|j| j != i && intersection(&boxes[i], &boxes[j]) > 0.0))
        .count();
    (overlapping as u64, boxes.len() as u64)
}

/// Fraction of present boxes overlapping another box in the same frame.
pub fn overlap_rate(frames: &[Vec<Rect>]) -> Result<f64> {
    let (o, n) = frames
        .iter()
        .map(|f| overlap_counts(f))
        .fold((0, 0), |(a, b), (c, d)| (a + c, b + d));
    if n == 0 {
        return Err(Error::Empty("present vehicles"));
    }
    Ok(o as f64 / n as f64)
}

/// Total absolute difference of per-frame vehicle counts.
pub fn dcn(pred: &[usize], gt: &[usize]) -> Result<u64> {
    if pred.len() != gt.len() {
        return Err(Error::Shape {
            context: "count sequences",
            expected: gt.len(),
            actual: pred.len(),
        });
    }
    Ok(pred.iter().zip(gt).map(|(&p, &g)| p.abs_diff(g) as u64).sum())
}

/// Nearest-rank percentile of already sorted values, `q` in `(0, 1]`.
pub fn nearest_rank(sorted: &[f64], q: f64) -> Result<f64> {
    if sorted.is_empty() {
        return Err(Error::Empty("percentile input"));
    }
    let rank = libm::ceil(q * sorted.len() as f64) as usize;
    Ok(sorted[rank.clamp(1, sorted.len()) - 1])
}

/// Mean and nearest-rank 95th percentile of absolute speed differences.
pub fn speed_dev_stats(pairs: &[(f64, f64)]) -> Result<(f64, f64)> {
    if pairs.is_empty() {
        return Err(Error::Empty("speed pairs"));
    }
    let mut devs: Vec<f64> = pairs.iter().map(|(p, g)| (p - g).abs()).collect();
    let mean = devs.iter().sum::<f64>() / devs.len() as f64;
    devs.sort_by(f64::total_cmp);
    Ok((mean, nearest_rank(&devs, 0.95)?))
}

/// One scored unit: predicted and true frames for the same span of one
/// sample, plus the last known frame before the span for speed continuity.
#[derive(Debug, Clone, PartialEq)]
pub struct Case {
    pub meta: SampleMeta,
    pub context: Frame,
    pub pred: Vec<Frame>,
    pub gt: Vec<Frame>,
}

/// Additive metric terms of a set of cases.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Terms {
    pub sum_sq_norm: f64,
    pub sum_sq_m: f64,
    pub pairs: u64,
    pub iou_sum: f64,
    pub pred_overlap: (u64, u64),
    pub gt_overlap: (u64, u64),
    pub dcn: u64,
    pub speed_pairs: Vec<(f64, f64)>,
    pub frames: u64,
}

impl Terms {
    pub fn merge(&mut self, o: Terms) {
        self.sum_sq_norm += o.sum_sq_norm;
        self.sum_sq_m += o.sum_sq_m;
        self.pairs += o.pairs;
        self.iou_sum += o.iou_sum;
        self.pred_overlap.0 += o.pred_overlap.0;
        self.pred_overlap.1 += o.pred_overlap.1;
        self.gt_overlap.0 += o.gt_overlap.0;
        self.gt_overlap.1 += o.gt_overlap.1;
        self.dcn += o.dcn;
        self.speed_pairs.extend(o.speed_pairs);
        self.frames += o.frames;
    }
}

fn present_rects(f: &Frame, meta: &SampleMeta) -> Vec<Rect> {
    let origin = meta.origin();
    f.slots
        .iter()
        .zip(&f.present)
        .filter(|(_, &p)| p)
        .map(|(b, _)| Rect::from(denormalize(b, &meta.cfg, origin)))
        .collect()
}

pub fn case_terms(c: &Case) -> Result<Terms> {
    if c.pred.len() != c.gt.len() {
        return Err(Error::Shape {
            context: "case frames",
            expected: c.gt.len(),
            actual: c.pred.len(),
        });
    }
    let cfg = &c.meta.cfg;
    let origin = c.meta.origin();
    let mut t = Terms {
        frames: c.gt.len() as u64,
        ..Terms::default()
    };
    let pred_counts: Vec<usize> = c.pred.iter().map(Frame::count).collect();
    let gt_counts: Vec<usize> = c.gt.iter().map(Frame::count).collect();
    t.dcn = dcn(&pred_counts, &gt_counts)?;

    for (p, g) in c.pred.iter().zip(&c.gt) {
        for s in 0..g.slots.len() {
            if !g.present[s] {
                continue;
            }
            let (pb, gb) = (p.slots[s], g.slots[s]);
            t.sum_sq_norm += sq_diff(pb.to_array(), gb.to_array());
            let (pm, gm) = (denormalize(&pb, cfg, origin), denormalize(&gb, cfg, origin));
            t.sum_sq_m += sq_diff([pm.x, pm.y, pm.len, pm.wid], [gm.x, gm.y, gm.len, gm.wid]);
            t.iou_sum += iou(&pm.into(), &gm.into());
            t.pairs += 1;
        }
        let po = overlap_counts(&present_rects(p, &c.meta));
        let go = overlap_counts(&present_rects(g, &c.meta));
        t.pred_overlap = (t.pred_overlap.0 + po.0, t.pred_overlap.1 + po.1);
        t.gt_overlap = (t.gt_overlap.0 + go.0, t.gt_overlap.1 + go.1);
    }

    let series = |frames: &[Frame]| {
        let mut all = Vec::with_capacity(frames.len() + 1);
        all.push(c.context.clone());
        all.extend_from_slice(frames);
        let slots = c.context.slots.len();
        speed_grid(&extract_trajectories(&all, cfg, origin), all.len(), slots)
    };
    let ps = series(&c.pred);
    let gs = series(&c.gt);
    for (prow, grow) in ps.iter().zip(&gs).skip(1) {
        for (p, g) in prow.iter().zip(grow) {
            if let (Some(p), Some(g)) = (p, g) {
                t.speed_pairs.push((*p, *g));
            }
        }
    }
    Ok(t)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub task: String,
    pub n_samples: u64,
    pub n_frames: u64,
    /// Scored (sample, frame, slot) triples; the `n` of both RMSE forms.
    pub n_scored: u64,
    pub rmse_eq2_norm: f64,
    pub rmse_eq2_m: f64,
    pub rmse_conventional_norm: f64,
    pub rmse_conventional_m: f64,
    pub mean_iou: f64,
    /// `None` when no vehicle was predicted present.
    pub overlap_rate: Option<f64>,
    pub gt_overlap_rate: Option<f64>,
    pub dcn: u64,
    pub speed_dev_mean: Option<f64>,
    pub speed_dev_p95: Option<f64>,
    pub n_speed_pairs: u64,
    pub presence: PresenceRule,
    pub dt: f64,
}

impl MetricsReport {
    pub fn from_terms(task: &str, n_samples: u64, t: Terms, rule: &PresenceRule, dt: f64) -> Result<Self> {
        let norm = Rmse::from_sum(t.sum_sq_norm, t.pairs)?;
        let m = Rmse::from_sum(t.sum_sq_m, t.pairs)?;
        let rate = |(o, n): (u64, u64)| (n > 0).then(|| o as f64 / n as f64);
        let speed = speed_dev_stats(&t.speed_pairs).ok();
        Ok(MetricsReport {
            task: task.into(),
            n_samples,
            n_frames: t.frames,
            n_scored: t.pairs,
            rmse_eq2_norm: norm.printed,
            rmse_eq2_m: m.printed,
            rmse_conventional_norm: norm.conventional,
            rmse_conventional_m: m.conventional,
            mean_iou: t.iou_sum / t.pairs as f64,
            overlap_rate: rate(t.pred_overlap),
            gt_overlap_rate: rate(t.gt_overlap),
            dcn: t.dcn,
            speed_dev_mean: speed.map(|s| s.0),
            speed_dev_p95: speed.map(|s| s.1),
            n_speed_pairs: t.speed_pairs.len() as u64,
            presence: *rule,
            dt,
        })
    }
}

/// Scores a list of cases. Per-case terms may be computed in parallel; they
/// are merged in case order.
pub fn evaluate_cases<E: Executor>(task: &str, cases: &[Case], rule: &PresenceRule, exec: &E) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let dt = cases[0].meta.cfg.dt;
    let mut total = Terms::default();
    for t in exec.map(cases.len(), |i| case_terms(&cases[i])) {
        total.merge(t?);
    }
    MetricsReport::from_terms(task, cases.len() as u64, total, rule, dt)
}

/// Next-`pred_len`-frame prediction from each clean history.
pub fn prediction_cases<E: Executor>(
    model: &Model<f32>,
    samples: &[Sample],
    rule: &PresenceRule,
    exec: &E,
) -> Result<Vec<Case>> {
    let h = model.cfg.hist_len;
    exec.map(samples.len(), |i| {
        let s = &samples[i];
        let pred = predict(model, s.history(), rule)?;
        Ok(Case {
            meta: s.meta.clone(),
            context: s.frames[h - 1].clone(),
            pred: pred.frames,
            gt: s.future().to_vec(),
        })
    })
    .into_iter()
    .collect()
}

/// Gap reconstruction with one interior gap per sample, drawn from the
/// evaluation stream of `seed`. Samples whose gap draw is empty are skipped.
pub fn compensation_cases<E: Executor>(
    model: &Model<f32>,
    samples: &[Sample],
    rule: &PresenceRule,
    lambda: f64,
    seed: u64,
    exec: &E,
) -> Result<Vec<Case>> {
    let max_gap = model.cfg.pred_len;
    let cases: Vec<Result<Option<Case>>> = exec.map(samples.len(), |i| {
        let s = &samples[i];
        let mut rng = substream(seed, Stream::Eval, i as u64);
        let Some(gap) = plan_gap(s.frames.len(), max_gap, lambda, &mut rng)? else {
            return Ok(None);
        };
        let pred = fill_gap(model, s, gap, rule)?;
        Ok(Some(Case {
            meta: s.meta.clone(),
            context: s.frames[gap.start - 1].clone(),
            pred,
            gt: s.frames[gap.start..gap.start + gap.len].to_vec(),
        }))
    });
    let mut out = Vec::new();
    for c in cases {
        if let Some(c) = c? {
            out.push(c);
        }
    }
    Ok(out)
}

/// Mean squared error of raw next-frame predictions over every slot entry,
/// absent slots included.
pub fn prediction_mse<E: Executor>(model: &Model<f32>, samples: &[Sample], exec: &E) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let h = model.cfg.hist_len;
    let per: Vec<Result<(f64, usize)>> = exec.map(samples.len(), |i| {
        let s = &samples[i];
        let src: Vec<Token<f32>> = s.history().iter().map(Token::from_frame).collect();
        let start = Token::from_frame(&s.frames[h - 1]);
        let out = model.generate(&src, &start, model.cfg.pred_len)?;
        let target: Vec<f64> = s.future().iter().flat_map(|f| f.flatten()).collect();
        let sum = out
            .data
            .iter()
            .zip(&target)
            .map(|(&p, &t)| (p as f64 - t) * (p as f64 - t))
            .sum::<f64>();
        Ok((sum, target.len()))
    });
    let (mut sum, mut n) = (0.0, 0);
    for r in per {
        let (s, k) = r?;
        sum += s;
        n += k;
    }
    Ok(sum / n as f64)
}
