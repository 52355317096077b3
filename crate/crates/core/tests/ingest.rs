use std::collections::{HashMap, HashSet};

use proptest::prelude::*;
use trajformer_core::ingest::*;
use trajformer_core::syngen::{gen_corpus, SynConfig};

fn corpus() -> (Vec<TrackPoint>, DomainConfig) {
    let pts = gen_corpus(&SynConfig::default(), 300.0).unwrap();
    (pts, DomainConfig::default())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn normalize_round_trips_within_a_nanometer(
        tx in -50i64..50,
        ty in -50i64..50,
        fx in 0.0f64..1.0,
        fy in 0.0f64..1.0,
        len in 0.01f64..=20.0,
        wid in 0.01f64..=4.0,
    ) {
        let cfg = DomainConfig::default();
        let origin = cfg.origin(tx, ty);
        let p = TrackPoint {
            vehicle_id: 0,
            t: 0.0,
            x: origin.x + fx * cfg.length,
            y: origin.y + fy * cfg.width,
            len,
            wid,
        };
        let b = normalize(&p, &cfg, origin).unwrap();
        let m = denormalize(&b, &cfg, origin);
        prop_assert!((m.x - p.x).abs() < 1e-9);
        prop_assert!((m.y - p.y).abs() < 1e-9);
        prop_assert!((m.len - p.len).abs() < 1e-9);
        prop_assert!((m.wid - p.wid).abs() < 1e-9);
    }
}

#[test]
fn window_points_lie_in_their_tile_once() {
    let (pts, cfg) = corpus();
    let part = partition(&pts, &cfg).unwrap();
    assert!(!part.windows.is_empty());
    let mut seen = HashSet::new();
    for w in &part.windows {
        for tr in &w.tracks {
            for (k, p) in &tr.points {
                assert_eq!(tile_of(p.x, p.y, &cfg), (w.tile_x, w.tile_y));
                assert!(seen.insert((tr.vehicle_id, *k)), "point in two windows");
            }
        }
    }
}

#[test]
fn slots_map_to_one_vehicle_each() {
    let (pts, cfg) = corpus();
    let part = partition(&pts, &cfg).unwrap();
    let origin_of = |w: &DomainWindow| cfg.origin(w.tile_x, w.tile_y);
    let mut checked = 0;
    for w in &part.windows {
        let Ok(a) = assemble_with_ids(w, &cfg, "syn") else { continue };
        let raw: HashMap<u64, &SubTrack> = w.tracks.iter().map(|t| (t.vehicle_id, t)).collect();
        let ids: Vec<u64> = a.slot_vehicles.iter().flatten().copied().collect();
        assert_eq!(ids.len(), ids.iter().collect::<HashSet<_>>().len());
        for (fi, f) in a.sample.frames.iter().enumerate() {
            assert!(f.count() <= cfg.max_slots);
            let k = w.start_frame + (fi * cfg.stride) as i64;
            for (s, vid) in a.slot_vehicles.iter().enumerate() {
                let point = vid.and_then(|v| {
                    raw[&v]
                        .points
                        .iter()
                        .find(|(pk, _)| *pk == k)
                        .map(|(_, p)| p)
                });
                match point {
                    Some(p) => {
                        assert!(f.present[s]);
                        assert_eq!(f.slots[s], normalize(p, &cfg, origin_of(w)).unwrap());
                    }
                    None => {
                        assert!(!f.present[s]);
                        assert_eq!(f.slots[s], NormBox::ZERO);
                    }
                }
            }
        }
        checked += 1;
    }
    assert!(checked > 10, "{checked}");
}

#[test]
fn assembled_boxes_are_in_unit_range() {
    let (pts, cfg) = corpus();
    let (samples, _) = build_samples(&pts, &cfg, "syn").unwrap();
    assert!(!samples.is_empty());
    for s in &samples {
        assert_eq!(s.frames.len(), cfg.seq_len());
        for f in &s.frames {
            for (b, &p) in f.slots.iter().zip(&f.present) {
                if p {
                    for v in b.to_array() {
                        assert!((0.0..=1.0).contains(&v), "{b:?}");
                    }
                }
            }
        }
    }
}

#[test]
fn sample_keys_are_unique() {
    let (pts, cfg) = corpus();
    let (samples, _) = build_samples(&pts, &cfg, "syn").unwrap();
    let keys: HashSet<String> = samples.iter().map(|s| s.meta.key()).collect();
    assert_eq!(keys.len(), samples.len());
}
