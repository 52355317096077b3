//! Raw tracks to fixed-shape, slot-consistent samples.
//!
//! Space is tiled into `length x width` rectangles and time into windows of
//! `(hist_len + pred_len) * stride` raw frames. Each (tile, window) pair that
//! survives the capacity check becomes one [`Sample`].

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One observation of one vehicle, in meters and seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub vehicle_id: u64,
    pub t: f64,
    pub x: f64,
    pub y: f64,
    pub len: f64,
    pub wid: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainConfig {
    /// Tile length along the road, meters.
    pub length: f64,
    /// Tile width across the road, meters.
    pub width: f64,
    pub max_slots: usize,
    pub hist_len: usize,
    pub pred_len: usize,
    /// Raw frames per selected frame.
    pub stride: usize,
    /// Seconds between selected frames.
    pub dt: f64,
    pub len_cap: f64,
    pub wid_cap: f64,
}

impl Default for DomainConfig {
    fn default() -> Self {
        DomainConfig {
            length: 300.0,
            width: 20.0,
            max_slots: 10,
            hist_len: 20,
            pred_len: 10,
            stride: 1,
            dt: 0.2,
            len_cap: 20.0,
            wid_cap: 4.0,
        }
    }
}

impl DomainConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if !pos(self.length) {
            return Err(Error::config("domain.length", "must be > 0"));
        }
        if !pos(self.width) {
            return Err(Error::config("domain.width", "must be > 0"));
        }
        if !pos(self.dt) {
            return Err(Error::config("domain.dt", "must be > 0"));
        }
        if !pos(self.len_cap) || !pos(self.wid_cap) {
            return Err(Error::config("domain.len_cap", "caps must be > 0"));
        }
        if self.max_slots == 0 {
            return Err(Error::config("domain.max_slots", "must be >= 1"));
        }
        if self.hist_len < 2 {
            return Err(Error::config("domain.hist_len", "must be >= 2"));
        }
        if self.pred_len == 0 {
            return Err(Error::config("domain.pred_len", "must be >= 1"));
        }
        if self.stride == 0 {
            return Err(Error::config("domain.stride", "must be >= 1"));
        }
        Ok(())
    }

    /// Frames per sample.
    pub fn seq_len(&self) -> usize {
        self.hist_len + self.pred_len
    }

    /// Seconds between raw frames.
    pub fn raw_dt(&self) -> f64 {
        self.dt / self.stride as f64
    }

    /// Raw frames spanned by one time window.
    pub fn window_raw_frames(&self) -> usize {
        self.seq_len() * self.stride
    }

    pub fn origin(&self, tile_x: i64, tile_y: i64) -> TileOrigin {
        TileOrigin {
            x: tile_x as f64 * self.length,
            y: tile_y as f64 * self.width,
        }
    }
}

/// Lower-left corner of a spatial tile in meters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TileOrigin {
    pub x: f64,
    pub y: f64,
}

/// Normalized center-format box. Real data lies in `[0, 1]`; predictions
/// may stray outside.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct NormBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl NormBox {
    pub const ZERO: NormBox = NormBox {
        x: 0.0,
        y: 0.0,
        w: 0.0,
        h: 0.0,
    };

    pub fn to_array(self) -> [f64; 4] {
        [self.x, self.y, self.w, self.h]
    }

    pub fn from_array(a: [f64; 4]) -> Self {
        NormBox {
            x: a[0],
            y: a[1],
            w: a[2],
            h: a[3],
        }
    }
}

impl From<[f64; 4]> for NormBox {
    fn from(a: [f64; 4]) -> Self {
        NormBox::from_array(a)
    }
}

impl From<NormBox> for [f64; 4] {
    fn from(b: NormBox) -> Self {
        b.to_array()
    }
}

/// Geometry recovered from a [`NormBox`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeterBox {
    pub x: f64,
    pub y: f64,
    pub len: f64,
    pub wid: f64,
}

pub fn normalize(p: &TrackPoint, cfg: &DomainConfig, origin: TileOrigin) -> Result<NormBox> {
    if !(p.len > 0.0 && p.len <= cfg.len_cap) {
        return Err(Error::Range {
            field: "len",
            value: p.len,
            cap: cfg.len_cap,
        });
    }
    if !(p.wid > 0.0 && p.wid <= cfg.wid_cap) {
        return Err(Error::Range {
            field: "wid",
            value: p.wid,
            cap: cfg.wid_cap,
        });
    }
    Ok(NormBox {
        x: (p.x - origin.x) / cfg.length,
        y: (p.y - origin.y) / cfg.width,
        w: p.len / cfg.len_cap,
        h: p.wid / cfg.wid_cap,
    })
}

pub fn denormalize(b: &NormBox, cfg: &DomainConfig, origin: TileOrigin) -> MeterBox {
    MeterBox {
        x: b.x * cfg.length + origin.x,
        y: b.y * cfg.width + origin.y,
        len: b.w * cfg.len_cap,
        wid: b.h * cfg.wid_cap,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub mark: u32,
    pub masked: bool,
    pub slots: Vec<NormBox>,
    pub present: Vec<bool>,
}

impl Frame {
    pub fn empty(mark: u32, max_slots: usize) -> Self {
        Frame {
            mark,
            masked: false,
            slots: vec![NormBox::ZERO; max_slots],
            present: vec![false; max_slots],
        }
    }

    /// Vehicle count `S`.
    pub fn count(&self) -> usize {
        self.present.iter().filter(|&&p| p).count()
    }

    /// Slots flattened in slot order as `(x, y, w, h)` quadruples.
    pub fn flatten(&self) -> Vec<f64> {
        self.slots.iter().flat_map(|b| b.to_array()).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub site: String,
    pub tile_x: i64,
    pub tile_y: i64,
    /// Time of the first selected frame, seconds.
    pub t0: f64,
    pub cfg: DomainConfig,
}

impl SampleMeta {
    pub fn origin(&self) -> TileOrigin {
        self.cfg.origin(self.tile_x, self.tile_y)
    }

    /// Stable identifier used by split manifests.
    pub fn key(&self) -> String {
        alloc::format!("{}:{}:{}:{:.6}", self.site, self.tile_x, self.tile_y, self.t0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub meta: SampleMeta,
    pub frames: Vec<Frame>,
}

impl Sample {
    pub fn history(&self) -> &[Frame] {
        &self.frames[..self.meta.cfg.hist_len]
    }

    pub fn future(&self) -> &[Frame] {
        &self.frames[self.meta.cfg.hist_len..]
    }
}

/// Why a vehicle or window was left out.
#[derive(Debug, Clone, PartialEq)]
pub enum Diagnostic {
    NonMonotoneTime { vehicle_id: u64, t: f64 },
    BadDimensions { vehicle_id: u64, field: &'static str, value: f64 },
    Discontinuous { vehicle_id: u64, tile_x: i64, tile_y: i64, window: i64 },
    OverCapacity { tile_x: i64, tile_y: i64, window: i64, peak: usize },
    TooFewFrames { tile_x: i64, tile_y: i64, window: i64, available: usize },
    SlotsExhausted { tile_x: i64, tile_y: i64, window: i64, vehicles: usize },
}

/// Points of one vehicle inside one window, keyed by raw frame index.
#[derive(Debug, Clone, PartialEq)]
pub struct SubTrack {
    pub vehicle_id: u64,
    pub points: Vec<(i64, TrackPoint)>,
}

/// Everything that fell inside one (tile, time window) pair.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainWindow {
    pub tile_x: i64,
    pub tile_y: i64,
    pub window: i64,
    /// First raw frame index of the window.
    pub start_frame: i64,
    /// Selected frames of this window covered by the corpus time span.
    pub available_frames: usize,
    pub tracks: Vec<SubTrack>,
}

#[derive(Debug, Clone, Default)]
pub struct Partition {
    pub windows: Vec<DomainWindow>,
    pub diagnostics: Vec<Diagnostic>,
}

/// Raw frame index of a timestamp.
pub fn raw_frame(t: f64, cfg: &DomainConfig) -> i64 {
    libm::round(t / cfg.raw_dt()) as i64
}

/// Spatial tile of a position.
pub fn tile_of(x: f64, y: f64, cfg: &DomainConfig) -> (i64, i64) {
    (
        libm::floor(x / cfg.length) as i64,
        libm::floor(y / cfg.width) as i64,
    )
}

pub fn partition(tracks: &[TrackPoint], cfg: &DomainConfig) -> Result<Partition> {
    cfg.validate()?;
    let mut out = Partition::default();
    if tracks.is_empty() {
        return Ok(out);
    }

    // Group per vehicle in input order, rejecting bad vehicles outright.
    let mut per_vehicle: BTreeMap<u64, Vec<TrackPoint>> = BTreeMap::new();
    for p in tracks {
        per_vehicle.entry(p.vehicle_id).or_default().push(*p);
    }
    let mut accepted: Vec<(u64, Vec<TrackPoint>)> = Vec::new();
    'vehicles: for (id, pts) in per_vehicle {
        for pair in pts.windows(2) {
            if !(pair[1].t > pair[0].t) {
                out.diagnostics.push(Diagnostic::NonMonotoneTime {
                    vehicle_id: id,
                    t: pair[1].t,
                });
                continue 'vehicles;
            }
        }
        for p in &pts {
            let bad = if !(p.len > 0.0 && p.len <= cfg.len_cap) {
                Some(("len", p.len))
            } else if !(p.wid > 0.0 && p.wid <= cfg.wid_cap) {
                Some(("wid", p.wid))
            } else {
                None
            };
            if let Some((field, value)) = bad {
                out.diagnostics.push(Diagnostic::BadDimensions {
                    vehicle_id: id,
                    field,
                    value,
                });
                continue 'vehicles;
            }
        }
        accepted.push((id, pts));
    }
    if accepted.is_empty() {
        return Ok(out);
    }

    let span = cfg.window_raw_frames() as i64;
    let mut k_min = i64::MAX;
    let mut k_max = i64::MIN;
    // (tile_x, tile_y, window) -> vehicle -> points
    let mut buckets: BTreeMap<(i64, i64, i64), BTreeMap<u64, Vec<(i64, TrackPoint)>>> =
        BTreeMap::new();
    for (id, pts) in &accepted {
        for p in pts {
            let k = raw_frame(p.t, cfg);
            k_min = k_min.min(k);
            k_max = k_max.max(k);
            let (tx, ty) = tile_of(p.x, p.y, cfg);
            let w = k.div_euclid(span);
            buckets
                .entry((tx, ty, w))
                .or_default()
                .entry(*id)
                .or_default()
                .push((k, *p));
        }
    }

    for ((tile_x, tile_y, window), vehicles) in buckets {
        let start_frame = window * span;
        let available_frames = (0..cfg.seq_len())
            .map(|i| start_frame + (i * cfg.stride) as i64)
            .filter(|k| (k_min..=k_max).contains(k))
            .count();

        let mut tracks = Vec::with_capacity(vehicles.len());
        for (vehicle_id, mut pts) in vehicles {
            pts.sort_by_key(|(k, _)| *k);
            pts.dedup_by_key(|(k, _)| *k);
            // Keep the first temporally continuous run.
            let run = pts
                .windows(2)
                .position(|w| w[1].0 != w[0].0 + 1)
                .map_or(pts.len(), |i| i + 1);
            if run < pts.len() {
                out.diagnostics.push(Diagnostic::Discontinuous {
                    vehicle_id,
                    tile_x,
                    tile_y,
                    window,
                });
                pts.truncate(run);
            }
            tracks.push(SubTrack {
                vehicle_id,
                points: pts,
            });
        }

        let peak = peak_simultaneous(&tracks);
        if peak > cfg.max_slots {
            out.diagnostics.push(Diagnostic::OverCapacity {
                tile_x,
                tile_y,
                window,
                peak,
            });
            continue;
        }
        out.windows.push(DomainWindow {
            tile_x,
            tile_y,
            window,
            start_frame,
            available_frames,
            tracks,
        });
    }
    Ok(out)
}

fn peak_simultaneous(tracks: &[SubTrack]) -> usize {
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    for t in tracks {
        for (k, _) in &t.points {
            *counts.entry(*k).or_default() += 1;
        }
    }
    counts.values().copied().max().unwrap_or(0)
}

/// A sample together with the vehicle bound to each slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Assembled {
    pub sample: Sample,
    pub slot_vehicles: Vec<Option<u64>>,
}

pub fn assemble(window: &DomainWindow, cfg: &DomainConfig, site: &str) -> Result<Sample, Diagnostic> {
    assemble_with_ids(window, cfg, site).map(|a| a.sample)
}

pub fn assemble_with_ids(
    window: &DomainWindow,
    cfg: &DomainConfig,
    site: &str,
) -> Result<Assembled, Diagnostic> {
    let n = cfg.seq_len();
    if window.available_frames < n {
        return Err(Diagnostic::TooFewFrames {
            tile_x: window.tile_x,
            tile_y: window.tile_y,
            window: window.window,
            available: window.available_frames,
        });
    }
    let selected: Vec<i64> = (0..n)
        .map(|i| window.start_frame + (i * cfg.stride) as i64)
        .collect();

    // First appearance (frame index) per vehicle among selected frames.
    let mut order: Vec<(usize, u64, &SubTrack)> = Vec::new();
    for track in &window.tracks {
        let first = selected
            .iter()
            .position(|k| track.points.binary_search_by_key(k, |(pk, _)| *pk).is_ok());
        if let Some(i) = first {
            order.push((i, track.vehicle_id, track));
        }
    }
    order.sort_by_key(|(i, id, _)| (*i, *id));
    if order.len() > cfg.max_slots {
        return Err(Diagnostic::SlotsExhausted {
            tile_x: window.tile_x,
            tile_y: window.tile_y,
            window: window.window,
            vehicles: order.len(),
        });
    }

    let origin = cfg.origin(window.tile_x, window.tile_y);
    let mut frames: Vec<Frame> = (0..n).map(|i| Frame::empty(i as u32, cfg.max_slots)).collect();
    let mut slot_vehicles = vec![None; cfg.max_slots];
    for (slot, (_, id, track)) in order.iter().enumerate() {
        slot_vehicles[slot] = Some(*id);
        for (fi, k) in selected.iter().enumerate() {
            if let Ok(pos) = track.points.binary_search_by_key(k, |(pk, _)| *pk) {
                let p = &track.points[pos].1;
                // Dimensions were validated during partition.
                let b = normalize(p, cfg, origin).map_err(|_| Diagnostic::BadDimensions {
                    vehicle_id: *id,
                    field: "len",
                    value: p.len,
                })?;
                frames[fi].slots[slot] = b;
                frames[fi].present[slot] = true;
            }
        }
    }

    Ok(Assembled {
        sample: Sample {
            meta: SampleMeta {
                site: String::from(site),
                tile_x: window.tile_x,
                tile_y: window.tile_y,
                t0: window.start_frame as f64 * cfg.raw_dt(),
                cfg: *cfg,
            },
            frames,
        },
        slot_vehicles,
    })
}

/// Partition and assemble in one go, collecting every diagnostic.
pub fn build_samples(
    tracks: &[TrackPoint],
    cfg: &DomainConfig,
    site: &str,
) -> Result<(Vec<Sample>, Vec<Diagnostic>)> {
    let Partition {
        windows,
        mut diagnostics,
    } = partition(tracks, cfg)?;
    let mut samples = Vec::new();
    for w in &windows {
        match assemble(w, cfg, site) {
            Ok(s) => samples.push(s),
            Err(d) => diagnostics.push(d),
        }
    }
    Ok((samples, diagnostics))
}
