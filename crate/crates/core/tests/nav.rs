use std::sync::Arc;

use proptest::prelude::*;
use t4t_core::io::list_replay;
use t4t_core::nav::{
    class_area_ratios, decide_feedback, mean_depth, nearest_object, partition_walkable, run_session,
    walkway_sequence, write_walkway_replay, Direction, FeedbackKind, LatestSlot, LogRecord, NavConfig, SegFrame,
};
use t4t_core::Error;

fn general_id(cfg: &NavConfig, name: &str) -> u8 {
    cfg.general_classes.iter().position(|n| n == name).unwrap() as u8
}

fn trans_id(cfg: &NavConfig, name: &str) -> u8 {
    cfg.trans_classes.iter().position(|n| n == name).unwrap() as u8
}

#[test]
fn walkable_bands() {
    let floor = [8u8];
    let all = vec![8u8; 36];
    assert_eq!(partition_walkable(&all, 6, &floor).unwrap(), [1.0, 1.0, 1.0]);

    let mut left = vec![0u8; 36];
    for row in left.chunks_mut(6) {
        row[..2].fill(8);
    }
    assert_eq!(partition_walkable(&left, 6, &floor).unwrap(), [1.0, 0.0, 0.0]);

    // Six floor pixels in the centre band of a 6x6 mask, band area 12.
    let mut centre = vec![0u8; 36];
    for y in 0..6 {
        centre[y * 6 + 2 + y % 2] = 8;
    }
    assert_eq!(partition_walkable(&centre, 6, &floor).unwrap(), [0.0, 6.0 / 12.0, 0.0]);

    assert!(matches!(partition_walkable(&[8, 8], 2, &floor), Err(Error::Validation(_))));
}

#[test]
fn area_ratios_and_depth() {
    assert!(class_area_ratios(&[1, 2, 3], &[]).is_empty());
    assert_eq!(class_area_ratios(&[5; 9], &[5, 1]), vec![1.0, 0.0]);
    let mut mask = [0u8; 16];
    mask[3..7].fill(4);
    assert_eq!(class_area_ratios(&mask, &[4]), vec![0.25]);

    assert_eq!(mean_depth(&[2.0; 8]), Some(2.0));
    assert_eq!(mean_depth(&[1.0, 0.0, 1.0, 0.0]), Some(1.0));
    assert_eq!(mean_depth(&[0.0; 4]), None);
}

#[test]
fn nearest_object_examples() {
    let cfg = NavConfig::default();
    let (chair, door, floor) = (general_id(&cfg, "chair"), general_id(&cfg, "door"), general_id(&cfg, "floor"));
    let general = vec![chair, chair, door, door, floor, 0];
    let depth = vec![1.4, 1.6, 3.0, 3.0, 0.5, 0.2];
    let seg = SegFrame::new(3, 2, general, vec![0; 6], depth).unwrap();
    let near = nearest_object(&seg, &cfg).unwrap().unwrap();
    assert_eq!(near.name, "chair");
    assert!((near.median_depth - 1.5).abs() < 1e-6);

    let seg = SegFrame::new(3, 1, vec![floor, 0, floor], vec![0; 3], vec![1.0; 3]).unwrap();
    assert_eq!(nearest_object(&seg, &cfg).unwrap(), None);

    // Equal depth: the larger class wins even though it comes later.
    let (board, table) = (general_id(&cfg, "board"), general_id(&cfg, "table"));
    let seg = SegFrame::new(4, 1, vec![board, table, table, table], vec![0; 4], vec![2.0; 4]).unwrap();
    assert_eq!(nearest_object(&seg, &cfg).unwrap().unwrap().name, "table");

    // A transparent thing closer than any general object.
    let cup = trans_id(&cfg, "cup");
    let seg = SegFrame::new(2, 1, vec![chair, chair], vec![0, cup], vec![2.0, 0.8]).unwrap();
    assert_eq!(nearest_object(&seg, &cfg).unwrap().unwrap().name, "cup");
}

fn uniform(w: usize, h: usize, depth: f32) -> SegFrame {
    SegFrame::new(w, h, vec![0; w * h], vec![0; w * h], vec![depth; w * h]).unwrap()
}

#[test]
fn decision_examples() {
    let cfg = NavConfig::default();
    let seg = uniform(6, 6, 0.5);
    assert_eq!(decide_feedback(&seg, &cfg, 0.0).unwrap().kind, FeedbackKind::Vibration);

    // Glass door over 40% of the frame and a clear corridor ahead.
    let (w, h) = (10, 10);
    let mut seg = uniform(w, h, 3.0);
    seg.general.fill(general_id(&cfg, "floor"));
    seg.trans[..40].fill(trans_id(&cfg, "glass door"));
    let event = decide_feedback(&seg, &cfg, 4.0).unwrap();
    assert_eq!(event.kind, FeedbackKind::SpeechStuff("glass door".into()));
    assert_eq!(event.t, 4.0);
    assert_eq!(event.evidence.stuff_ratios[1], ("glass door".to_string(), 0.4));

    // R = (0.1, 0.8, 0.2) on a 30x10 frame with bands of 100 pixels.
    let mut seg = uniform(30, 10, 3.0);
    let floor = general_id(&cfg, "floor");
    for (band, count) in [(0, 10), (1, 80), (2, 20)] {
        for k in 0..count {
            seg.general[(k / 10) * 30 + band * 10 + k % 10] = floor;
        }
    }
    let event = decide_feedback(&seg, &cfg, 0.0).unwrap();
    assert_eq!(event.evidence.walkable_ratios, [0.1, 0.8, 0.2]);
    assert_eq!(event.kind, FeedbackKind::SpeechDirection(Direction::Forward));

    let dark = uniform(6, 6, 0.0);
    let event = decide_feedback(&dark, &cfg, 0.0).unwrap();
    assert_eq!(event.kind, FeedbackKind::SpeechClear);
    assert_eq!(event.evidence.mean_depth, None);
}

#[test]
fn event_json_shape() {
    let cfg = NavConfig::default();
    let seg = uniform(6, 6, 0.5);
    let json = serde_json::to_value(decide_feedback(&seg, &cfg, 2.0).unwrap()).unwrap();
    assert_eq!(json["t"], 2.0);
    assert_eq!(json["kind"], "vibration");
    assert_eq!(json["evidence"]["mean_depth"], 0.5);

    let mut seg = uniform(6, 6, 3.0);
    seg.general.fill(general_id(&cfg, "floor"));
    let json = serde_json::to_value(decide_feedback(&seg, &cfg, 0.0).unwrap()).unwrap();
    assert_eq!(json["kind"], "speech_direction");
    assert_eq!(json["payload"], "forward");
}

/// Independent restatement of the decision chain over the quantities the
/// frame was built from.
fn oracle(depth: f64, stuff: f64, walk: [f64; 3], object: bool, cfg: &NavConfig) -> FeedbackKind {
    if depth > 0.0 && depth < cfg.obstacle_m {
        return FeedbackKind::Vibration;
    }
    if stuff > cfg.trans_ratio {
        return FeedbackKind::SpeechStuff("window".into());
    }
    let mut best = (Direction::Forward, walk[1]);
    if walk[0] > best.1 {
        best = (Direction::Left, walk[0]);
    }
    if walk[2] > best.1 {
        best = (Direction::Right, walk[2]);
    }
    if best.1 > cfg.walkable_ratio {
        return FeedbackKind::SpeechDirection(best.0);
    }
    if object && depth > 0.0 {
        FeedbackKind::SpeechNearest("chair".into())
    } else {
        FeedbackKind::SpeechClear
    }
}

/// 30x10 frame with bands of 100 pixels. Walkable pixels fill each band
/// from the top; the rest of the frame is chair or clutter.
fn grid_frame(cfg: &NavConfig, depth: f32, stuff: f64, walk: [f64; 3], object: bool) -> SegFrame {
    let (w, h) = (30, 10);
    let filler = if object { general_id(cfg, "chair") } else { 0 };
    let mut general = vec![filler; w * h];
    for (band, r) in walk.iter().enumerate() {
        let count = (r * 100.0).round() as usize;
        for k in 0..count {
            general[(k / 10) * w + band * 10 + k % 10] = general_id(cfg, "floor");
        }
    }
    let mut trans = vec![0; w * h];
    let panes = (stuff * (w * h) as f64).round() as usize;
    trans[w * h - panes..].fill(trans_id(cfg, "window"));
    SegFrame::new(w, h, general, trans, vec![depth; w * h]).unwrap()
}

#[test]
fn decision_chain_matches_oracle_on_grid() {
    let levels = [0.0, 0.2, 0.5];
    let mut checked = 0;
    for cfg in [
        NavConfig::default(),
        NavConfig {
            obstacle_m: 1.2,
            trans_ratio: 0.1,
            walkable_ratio: 0.45,
            ..NavConfig::default()
        },
    ] {
        for depth in [0.0f32, 0.5, 1.0, 1.5] {
            for stuff in levels {
                for l in levels {
                    for f in levels {
                        for r in levels {
                            for object in [false, true] {
                                let seg = grid_frame(&cfg, depth, stuff, [l, f, r], object);
                                let got = decide_feedback(&seg, &cfg, 0.0).unwrap();
                                let want = oracle(depth as f64, stuff, [l, f, r], object, &cfg);
                                assert_eq!(got.kind, want, "depth {depth} stuff {stuff} walk {l},{f},{r} object {object}");
                                assert_eq!(got.evidence.walkable_ratios, [l, f, r]);
                                assert_eq!(
                                    got.evidence.nearest_depth.is_some(),
                                    matches!(got.kind, FeedbackKind::SpeechNearest(_))
                                );
                                checked += 1;
                            }
                        }
                    }
                }
            }
        }
    }
    assert_eq!(checked, 2 * 4 * 3 * 27 * 2);
}

#[test]
fn largest_stuff_class_is_announced() {
    let cfg = NavConfig::default();
    let mut seg = uniform(10, 10, 3.0);
    seg.trans[..30].fill(trans_id(&cfg, "window"));
    seg.trans[30..70].fill(trans_id(&cfg, "glass wall"));
    let event = decide_feedback(&seg, &cfg, 0.0).unwrap();
    assert_eq!(event.kind, FeedbackKind::SpeechStuff("glass wall".into()));
}

#[test]
fn config_round_trip_and_validation() {
    let cfg = NavConfig::from_json(r#"{"obstacle_m": 0.8, "interval_s": 0.5}"#).unwrap();
    assert_eq!(cfg.obstacle_m, 0.8);
    assert_eq!(cfg.trans_ratio, 0.25);
    let text = serde_json::to_string(&cfg).unwrap();
    assert_eq!(NavConfig::from_json(&text).unwrap(), cfg);

    assert!(NavConfig::from_json(r#"{"bogus": 1}"#).is_err());
    assert!(matches!(NavConfig::from_json(r#"{"trans_ratio": 1.5}"#), Err(Error::Config(_))));
    assert!(matches!(NavConfig::from_json(r#"{"interval_s": 0}"#), Err(Error::Config(_))));
    assert!(matches!(
        NavConfig::from_json(r#"{"thing_classes": ["window"]}"#),
        Err(Error::Config(_))
    ));
    assert!(matches!(
        NavConfig::from_json(r#"{"path_classes": ["lawn"]}"#),
        Err(Error::Config(_))
    ));
    let ids = NavConfig::default().ids().unwrap();
    assert_eq!(ids.stuff.len(), 3);
    assert_eq!(ids.thing.len(), 8);
    assert_eq!(ids.objects.len(), 11);
}

#[test]
fn invalid_frames_rejected() {
    let cfg = NavConfig::default();
    assert!(SegFrame::new(2, 2, vec![0; 4], vec![0; 3], vec![0.0; 4]).is_err());
    let seg = SegFrame::new(2, 2, vec![13; 4], vec![0; 4], vec![0.0; 4]).unwrap();
    assert!(seg.validate(&cfg).is_err());
    let seg = SegFrame::new(2, 2, vec![0; 4], vec![0; 4], vec![f32::NAN; 4]).unwrap();
    assert!(seg.validate(&cfg).is_err());
}

fn timed(frames: usize, fps: f64) -> Vec<(f64, SegFrame)> {
    (0..frames).map(|k| (k as f64 / fps, uniform(6, 3, 2.0))).collect()
}

fn events(log: &[LogRecord]) -> usize {
    log.iter().filter(|r| r.event().is_some()).count()
}

#[test]
fn tick_counts() {
    let mut cfg = NavConfig::default();
    let frames = timed(300, 30.0);
    let log = run_session(&frames, &cfg, |s| Ok(s.clone()), None).unwrap();
    assert_eq!(events(&log), 5);
    let times: Vec<f64> = log.iter().map(|r| r.event().unwrap().t).collect();
    assert_eq!(times, [0.0, 2.0, 4.0, 6.0, 8.0]);

    cfg.interval_s = 0.5;
    assert_eq!(events(&run_session(&frames, &cfg, |s| Ok(s.clone()), None).unwrap()), 20);

    // One frame per second: ticks without a new frame are silent.
    let sparse = timed(10, 1.0);
    assert_eq!(events(&run_session(&sparse, &cfg, |s| Ok(s.clone()), None).unwrap()), 10);
    assert!(run_session::<SegFrame, _>(&[], &cfg, |s| Ok(s.clone()), None).unwrap().is_empty());
}

#[test]
fn latest_frame_wins() {
    let cfg = NavConfig::default();
    let frames: Vec<(f64, usize)> = (0..10).map(|k| (k as f64, k)).collect();
    let mut seen = Vec::new();
    run_session(
        &frames,
        &cfg,
        |&k| {
            seen.push(k);
            Ok(uniform(3, 1, 2.0))
        },
        None,
    )
    .unwrap();
    assert_eq!(seen, [0, 2, 4, 6, 8]);
}

#[test]
fn unreadable_frames_are_skipped() {
    let cfg = NavConfig::default();
    let frames = timed(10, 1.0);
    let mut sink = Vec::new();
    let mut calls = 0;
    let log = run_session(
        &frames,
        &cfg,
        |s| {
            calls += 1;
            if calls == 2 {
                Err(Error::Validation("corrupt frame".into()))
            } else {
                Ok(s.clone())
            }
        },
        Some(&mut sink),
    )
    .unwrap();
    assert_eq!(log.len(), 5);
    assert_eq!(events(&log), 4);
    let lines: Vec<serde_json::Value> = String::from_utf8(sink)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 5);
    assert_eq!(lines[1]["kind"], "skip");
    assert_eq!(lines[1]["frame"], 2);
    assert!(lines[1]["reason"].as_str().unwrap().contains("corrupt"));
    assert_eq!(lines[2]["kind"], "speech_clear");

    let unsorted = vec![(1.0, 0), (0.0, 1)];
    assert!(run_session(&unsorted, &cfg, |_| unreachable!(), None).is_err());
}

#[test]
fn slot_keeps_only_latest() {
    let slot = LatestSlot::new();
    assert_eq!(slot.take(), None::<u32>);
    assert_eq!(slot.put(1), None);
    assert_eq!(slot.put(2), Some(1));
    assert_eq!(slot.take(), Some(2));
    assert_eq!(slot.take(), None);
    assert_eq!(slot.writes(), 2);

    // A producer thread racing a consumer never delivers values out of order.
    let slot = Arc::new(LatestSlot::new());
    let producer = {
        let slot = Arc::clone(&slot);
        std::thread::spawn(move || {
            for k in 0..1000u32 {
                slot.put(k);
            }
        })
    };
    let mut last = None;
    while last != Some(999) {
        let v = slot.wait_take();
        assert!(last.map_or(true, |l| v > l));
        last = Some(v);
    }
    producer.join().unwrap();
}

/// Event kinds and payloads for the walkway replay, seed 7, 30 frames at
/// 64x48, default config.
const WALKWAY_LOG: [&str; 15] = [
    "speech_direction:forward",
    "speech_direction:left",
    "speech_stuff:glass door",
    "vibration",
    "speech_nearest:cup",
    "speech_clear",
    "speech_direction:forward",
    "speech_direction:left",
    // The pane is narrow on even seconds and the horizon is low here.
    "speech_direction:left",
    "vibration",
    "speech_nearest:cup",
    "speech_clear",
    "speech_direction:forward",
    "speech_direction:left",
    "speech_stuff:glass door",
];

fn label(kind: &FeedbackKind) -> String {
    let v = serde_json::to_value(kind).unwrap();
    match v.get("payload") {
        Some(p) => format!("{}:{}", v["kind"].as_str().unwrap(), p.as_str().unwrap()),
        None => v["kind"].as_str().unwrap().to_string(),
    }
}

#[test]
fn walkway_replay_matches_frozen_log() {
    let cfg = NavConfig::default();
    let frames = walkway_sequence(7, 30, 64, 48).unwrap();
    assert_eq!(frames, walkway_sequence(7, 30, 64, 48).unwrap());
    let log = run_session(&frames, &cfg, |s| Ok(s.clone()), None).unwrap();
    let got: Vec<String> = log.iter().map(|r| label(&r.event().unwrap().kind)).collect();
    assert_eq!(got, WALKWAY_LOG);

    // Same log when the frames go through a replay directory on disk.
    let dir = tempfile::tempdir().unwrap();
    write_walkway_replay(dir.path(), 7, 30, 64, 48).unwrap();
    let entries = list_replay(dir.path()).unwrap();
    assert_eq!(entries.len(), 30);
    let timed: Vec<(f64, _)> = entries.iter().map(|e| (e.index as f64, e.clone())).collect();
    let from_disk = run_session(
        &timed,
        &cfg,
        |e| {
            let gray = |p: &std::path::Path| t4t_core::io::read_pgm_file(p);
            let general = t4t_core::io::mask_from_gray(&gray(e.general_mask.as_ref().unwrap())?)?;
            let trans = t4t_core::io::mask_from_gray(&gray(e.trans_mask.as_ref().unwrap())?)?;
            let depth = t4t_core::io::depth_from_gray(&gray(&e.depth)?);
            SegFrame::new(64, 48, general, trans, depth)
        },
        None,
    )
    .unwrap();
    let disk: Vec<String> = from_disk.iter().map(|r| label(&r.event().unwrap().kind)).collect();
    assert_eq!(disk, WALKWAY_LOG);
}

fn frame_strategy() -> impl Strategy<Value = SegFrame> {
    (3usize..9, 1usize..6).prop_flat_map(|(w, h)| {
        let n = w * h;
        (
            proptest::collection::vec(0u8..13, n),
            proptest::collection::vec(0u8..12, n),
            proptest::collection::vec(prop_oneof![Just(0.0f32), 0.1f32..5.0], n),
        )
            .prop_map(move |(g, t, d)| SegFrame::new(w, h, g, t, d).unwrap())
    })
}

proptest! {
    #[test]
    fn raising_obstacle_threshold_only_adds_vibration(seg in frame_strategy(), lo in 0.0f64..3.0, extra in 0.0f64..3.0) {
        let low = NavConfig { obstacle_m: lo, ..NavConfig::default() };
        let high = NavConfig { obstacle_m: lo + extra, ..NavConfig::default() };
        let a = decide_feedback(&seg, &low, 0.0).unwrap();
        let b = decide_feedback(&seg, &high, 0.0).unwrap();
        if a.kind == FeedbackKind::Vibration {
            prop_assert_eq!(b.kind, FeedbackKind::Vibration);
        } else if b.kind != FeedbackKind::Vibration {
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn decisions_are_pure(seg in frame_strategy()) {
        let cfg = NavConfig::default();
        let a = serde_json::to_string(&decide_feedback(&seg, &cfg, 1.0).unwrap()).unwrap();
        let b = serde_json::to_string(&decide_feedback(&seg, &cfg, 1.0).unwrap()).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn band_tallies_add_up(seg in frame_strategy()) {
        let floor = [8u8];
        let r = partition_walkable(&seg.general, seg.width, &floor).unwrap();
        prop_assert!(r.iter().all(|v| (0.0..=1.0).contains(v)));
        if seg.width % 3 == 0 {
            let band = (seg.width / 3 * seg.height) as f64;
            let total = seg.general.iter().filter(|&&c| c == 8).count() as f64;
            prop_assert!((r.iter().sum::<f64>() * band - total).abs() < 1e-9);
        }
    }
}
