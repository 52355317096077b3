//! Deterministic synthetic multi-lane traffic.
//!
//! Longitudinal motion follows a Newell-style rule: a follower's next
//! position is capped by where its leader was one reaction time earlier,
//! shifted back by the jam spacing. Lane changes are gap-checked and
//! interpolated laterally over [`LANE_CHANGE_SECS`].

use alloc::vec::Vec;

use rand::Rng as _;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::TrackPoint;

pub const LANE_CHANGE_SECS: f64 = 1.5;

/// Lane-change attempts are this many times likelier when a vehicle is
/// held below its desired speed.
const BLOCKED_CHANGE_BOOST: f64 = 20.0;

const MEAN_CAR_LEN: f64 = 4.75;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynConfig {
    pub lanes: usize,
    pub lane_width: f64,
    pub road_len: f64,
    pub dt_raw: f64,
    /// Upper bound on every vehicle's speed, m/s.
    pub v_free: f64,
    /// Minimum bumper-to-bumper gap, m.
    pub min_gap: f64,
    pub reaction: f64,
    /// Arrivals per second per lane.
    pub spawn_rate: f64,
    pub lane_change_prob: f64,
    /// Desired speeds are drawn from `v_free * [1 - speed_spread, 1]`.
    pub speed_spread: f64,
    /// Fraction of spawned vehicles that are trucks.
    pub truck_share: f64,
    pub seed: u64,
}

impl Default for SynConfig {
    fn default() -> Self {
        SynConfig {
            lanes: 3,
            lane_width: 3.5,
            road_len: 1500.0,
            dt_raw: 0.2,
            v_free: 30.0,
            min_gap: 2.0,
            reaction: 1.0,
            spawn_rate: 0.12,
            lane_change_prob: 0.002,
            speed_spread: 0.35,
            truck_share: 0.1,
            seed: 7,
        }
    }
}

impl SynConfig {
    pub fn validate(&self) -> Result<()> {
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if self.lanes == 0 {
            return Err(Error::config("syn.lanes", "must be >= 1"));
        }
        for (name, v) in [
            ("syn.lane_width", self.lane_width),
            ("syn.road_len", self.road_len),
            ("syn.dt_raw", self.dt_raw),
            ("syn.v_free", self.v_free),
            ("syn.min_gap", self.min_gap),
            ("syn.reaction", self.reaction),
        ] {
            if !pos(v) {
                return Err(Error::config(name, "must be > 0"));
            }
        }
        if !(self.spawn_rate >= 0.0 && self.spawn_rate.is_finite()) {
            return Err(Error::config("syn.spawn_rate", "must be >= 0"));
        }
        for (name, v) in [
            ("syn.lane_change_prob", self.lane_change_prob),
            ("syn.speed_spread", self.speed_spread),
            ("syn.truck_share", self.truck_share),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(name, "must lie in [0, 1]"));
            }
        }
        // A lane cannot absorb arrivals faster than free-flow headways allow.
        let capacity = self.v_free / (self.min_gap + MEAN_CAR_LEN);
        if self.spawn_rate > capacity {
            return Err(Error::Infeasible(alloc::format!(
                "spawn_rate {} veh/s exceeds lane capacity {:.3} veh/s at min_gap {} m",
                self.spawn_rate,
                capacity,
                self.min_gap
            )));
        }
        if self.min_gap >= self.road_len {
            return Err(Error::Infeasible(alloc::format!(
                "min_gap {} m does not fit on a {} m road",
                self.min_gap,
                self.road_len
            )));
        }
        Ok(())
    }

    fn lane_center(&self, lane: usize) -> f64 {
        (lane as f64 + 0.5) * self.lane_width
    }

    /// Reaction delay in whole raw steps, at least one.
    pub fn lag_steps(&self) -> usize {
        (libm::round(self.reaction / self.dt_raw) as usize).max(1)
    }
}

#[derive(Debug, Clone)]
struct LaneChange {
    from_y: f64,
    to_y: f64,
    step: usize,
    steps: usize,
}

#[derive(Debug, Clone)]
struct Vehicle {
    id: u64,
    lane: usize,
    x: f64,
    y: f64,
    len: f64,
    wid: f64,
    desired: f64,
    /// Positions at the most recent steps, newest last.
    past: Vec<f64>,
    change: Option<LaneChange>,
    blocked: bool,
}

impl Vehicle {
    fn position_steps_ago(&self, k: usize) -> f64 {
        // `past` ends with the current position.
        let n = self.past.len();
        self.past[n.saturating_sub(k + 1)]
    }
}

/// Stateful car-following simulation over a straight multi-lane road.
#[derive(Debug, Clone)]
pub struct Simulator {
    cfg: SynConfig,
    rng: ChaCha8Rng,
    vehicles: Vec<Vehicle>,
    next_id: u64,
    step: u64,
    lag: usize,
}

impl Simulator {
    pub fn new(cfg: SynConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Simulator {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            lag: cfg.lag_steps(),
            cfg,
            vehicles: Vec::new(),
            next_id: 0,
            step: 0,
        })
    }

    pub fn time(&self) -> f64 {
        self.step as f64 * self.cfg.dt_raw
    }

    /// Places a vehicle by hand; used for scenario tests.
    pub fn add_vehicle(&mut self, lane: usize, x: f64, desired: f64, len: f64, wid: f64) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.vehicles.push(Vehicle {
            id,
            lane,
            x,
            y: self.cfg.lane_center(lane),
            len,
            wid,
            desired: desired.min(self.cfg.v_free).max(0.0),
            past: alloc::vec![x],
            change: None,
            blocked: false,
        });
        id
    }

    pub fn snapshot(&self) -> Vec<TrackPoint> {
        let t = self.time();
        let mut pts: Vec<TrackPoint> = self
            .vehicles
            .iter()
            .map(|v| TrackPoint {
                vehicle_id: v.id,
                t,
                x: v.x,
                y: v.y,
                len: v.len,
                wid: v.wid,
            })
            .collect();
        pts.sort_by_key(|p| p.vehicle_id);
        pts
    }

    /// Indices of vehicles in `lane`, front (largest x) first.
    fn lane_order(&self, lane: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.vehicles.len())
            .filter(|&i| self.vehicles[i].lane == lane)
            .collect();
        idx.sort_by(|&a, &b| {
            self.vehicles[b]
                .x
                .partial_cmp(&self.vehicles[a].x)
                .unwrap_or(core::cmp::Ordering::Equal)
                .then(self.vehicles[a].id.cmp(&self.vehicles[b].id))
        });
        idx
    }

    fn spacing(&self, a: usize, b: usize) -> f64 {
        self.cfg.min_gap + 0.5 * (self.vehicles[a].len + self.vehicles[b].len)
    }

    /// Advances one raw step: move, lane changes, exits, arrivals.
    pub fn step(&mut self) {
        let dt = self.cfg.dt_raw;
        let mut next_x: Vec<f64> = self.vehicles.iter().map(|v| v.x).collect();
        let mut blocked: Vec<bool> = alloc::vec![false; self.vehicles.len()];
        for lane in 0..self.cfg.lanes {
            let order = self.lane_order(lane);
            for (pos, &i) in order.iter().enumerate() {
                let v = &self.vehicles[i];
                let mut speed = v.desired;
                if let Some(c) = &v.change {
                    let vy = (c.to_y - c.from_y).abs() / (c.steps as f64 * dt);
                    speed = libm::sqrt((speed * speed - vy * vy).max(0.0));
                }
                let free = v.x + speed * dt;
                let mut cand = free;
                if pos > 0 {
                    let leader = order[pos - 1];
                    let delayed = self.vehicles[leader].position_steps_ago(self.lag - 1);
                    cand = cand.min(delayed - self.spacing(i, leader));
                }
                blocked[i] = cand < free;
                next_x[i] = v.x.max(cand);
            }
        }
        let keep = self.lag + 1;
        for (v, (x, b)) in self.vehicles.iter_mut().zip(next_x.into_iter().zip(blocked)) {
            v.x = x;
            v.blocked = b;
            v.past.push(x);
            if v.past.len() > keep {
                v.past.remove(0);
            }
            if let Some(c) = &mut v.change {
                c.step += 1;
                let f = c.step as f64 / c.steps as f64;
                v.y = c.from_y + (c.to_y - c.from_y) * f.min(1.0);
                if c.step >= c.steps {
                    v.y = c.to_y;
                    v.change = None;
                }
            }
        }

        self.lane_changes();

        let road_len = self.cfg.road_len;
        self.vehicles.retain(|v| v.x < road_len);

        self.spawn();
        self.step += 1;
    }

    fn lane_changes(&mut self) {
        if self.cfg.lanes < 2 || self.cfg.lane_change_prob == 0.0 {
            return;
        }
        let steps = (libm::round(LANE_CHANGE_SECS / self.cfg.dt_raw) as usize).max(1);
        for i in 0..self.vehicles.len() {
            let p = if self.vehicles[i].blocked {
                (self.cfg.lane_change_prob * BLOCKED_CHANGE_BOOST).min(1.0)
            } else {
                self.cfg.lane_change_prob
            };
            let attempt = self.rng.random::<f64>() < p;
            let go_left = self.rng.random::<bool>();
            if !attempt || self.vehicles[i].change.is_some() {
                continue;
            }
            let lane = self.vehicles[i].lane;
            let target = match (go_left, lane) {
                (true, l) if l + 1 < self.cfg.lanes => l + 1,
                (false, l) if l > 0 => l - 1,
                (true, l) if l > 0 => l - 1,
                (false, l) if l + 1 < self.cfg.lanes => l + 1,
                _ => continue,
            };
            let x = self.vehicles[i].x;
            let ok = self.vehicles.iter().enumerate().all(|(j, o)| {
                if j == i || o.lane != target {
                    return true;
                }
                (o.x - x).abs() >= self.spacing(i, j)
            });
            if ok {
                let to_y = self.cfg.lane_center(target);
                let v = &mut self.vehicles[i];
                v.change = Some(LaneChange {
                    from_y: v.y,
                    to_y,
                    step: 0,
                    steps,
                });
                v.lane = target;
            }
        }
    }

    fn spawn(&mut self) {
        let p = self.cfg.spawn_rate * self.cfg.dt_raw;
        for lane in 0..self.cfg.lanes {
            if !(self.rng.random::<f64>() < p) {
                continue;
            }
            let truck = self.rng.random::<f64>() < self.cfg.truck_share;
            let (len, wid) = if truck {
                (
                    self.rng.random_range(10.0..16.0),
                    self.rng.random_range(2.4..2.6),
                )
            } else {
                (
                    self.rng.random_range(4.0..5.5),
                    self.rng.random_range(1.7..2.1),
                )
            };
            let u: f64 = self.rng.random();
            let desired = self.cfg.v_free * (1.0 - self.cfg.speed_spread * u);
            let x = 0.5 * len;
            let clear = self.vehicles.iter().all(|o| {
                o.lane != lane || o.x - x >= self.cfg.min_gap + 0.5 * (o.len + len)
            });
            if clear {
                self.add_vehicle(lane, x, desired, len, wid);
            }
        }
    }
}

/// Simulates `duration` seconds and returns every vehicle position at every
/// raw step, ordered by time then vehicle id.
pub fn gen_corpus(cfg: &SynConfig, duration: f64) -> Result<Vec<TrackPoint>> {
    if !(duration > 0.0) {
        return Err(Error::config("syn.duration", "must be > 0"));
    }
    let mut sim = Simulator::new(*cfg)?;
    let steps = libm::ceil(duration / cfg.dt_raw) as u64;
    let mut out = Vec::new();
    for _ in 0..steps {
        sim.step();
        out.extend(sim.snapshot());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::collections::BTreeMap;

    fn quiet() -> SynConfig {
        SynConfig {
            spawn_rate: 0.0,
            lane_change_prob: 0.0,
            speed_spread: 0.0,
            ..SynConfig::default()
        }
    }

    #[test]
    fn no_arrivals_no_corpus() {
        assert!(gen_corpus(&quiet(), 60.0).unwrap().is_empty());
    }

    #[test]
    fn lone_vehicle_moves_at_free_speed() {
        let cfg = quiet();
        let mut sim = Simulator::new(cfg).unwrap();
        sim.add_vehicle(1, 10.0, cfg.v_free, 4.5, 1.8);
        for n in 1..=200 {
            sim.step();
            let p = sim.snapshot()[0];
            let want = 10.0 + cfg.v_free * n as f64 * cfg.dt_raw;
            assert!((p.x - want).abs() < 1e-9, "step {n}: {} vs {want}", p.x);
        }
    }

    #[test]
    fn follower_halts_behind_stopped_leader() {
        let cfg = quiet();
        let mut sim = Simulator::new(cfg).unwrap();
        sim.add_vehicle(0, 400.0, 0.0, 5.0, 2.0);
        sim.add_vehicle(0, 100.0, cfg.v_free, 5.0, 2.0);
        let spacing = cfg.min_gap + 5.0;

        // Independent replay of the follower rule.
        let mut oracle = 100.0;
        for _ in 0..300 {
            sim.step();
            oracle = f64::max(oracle, f64::min(oracle + cfg.v_free * cfg.dt_raw, 400.0 - spacing));
            let pts = sim.snapshot();
            let gap = pts[0].x - pts[1].x - 5.0;
            assert!(gap >= cfg.min_gap - 1e-12);
            assert!((pts[1].x - oracle).abs() < 1e-9);
        }
        assert!((sim.snapshot()[1].x - (400.0 - spacing)).abs() < 1e-9);
    }

    #[test]
    fn infeasible_arrival_rate_is_rejected() {
        let cfg = SynConfig {
            spawn_rate: 50.0,
            ..SynConfig::default()
        };
        assert!(matches!(Simulator::new(cfg), Err(Error::Infeasible(_))));
    }

    #[test]
    fn corpus_respects_gaps_speeds_and_is_deterministic() {
        let cfg = SynConfig {
            lane_change_prob: 0.01,
            ..SynConfig::default()
        };
        let a = gen_corpus(&cfg, 300.0).unwrap();
        let b = gen_corpus(&cfg, 300.0).unwrap();
        assert_eq!(a, b);
        assert!(!a.is_empty());

        let mut by_vehicle: BTreeMap<u64, Vec<TrackPoint>> = BTreeMap::new();
        for p in &a {
            by_vehicle.entry(p.vehicle_id).or_default().push(*p);
        }
        let mut lateral_moves = 0;
        for pts in by_vehicle.values() {
            for w in pts.windows(2) {
                let dx = w[1].x - w[0].x;
                let dy = w[1].y - w[0].y;
                let v = libm::sqrt(dx * dx + dy * dy) / cfg.dt_raw;
                assert!(dx >= 0.0);
                assert!(v <= cfg.v_free + 1e-9, "speed {v}");
                if dy != 0.0 {
                    lateral_moves += 1;
                }
            }
        }
        assert!(lateral_moves > 0, "expected some lane changes");
    }

    #[test]
    fn same_lane_gaps_hold_every_step() {
        let cfg = SynConfig {
            lane_change_prob: 0.02,
            spawn_rate: 0.3,
            speed_spread: 0.6,
            ..SynConfig::default()
        };
        let mut sim = Simulator::new(cfg).unwrap();
        for _ in 0..3000 {
            sim.step();
            for lane in 0..cfg.lanes {
                let order = sim.lane_order(lane);
                for w in order.windows(2) {
                    let (a, b) = (&sim.vehicles[w[0]], &sim.vehicles[w[1]]);
                    let gap = a.x - b.x - 0.5 * (a.len + b.len);
                    assert!(gap >= cfg.min_gap - 1e-9, "gap {gap} at t={}", sim.time());
                }
            }
        }
    }
}
