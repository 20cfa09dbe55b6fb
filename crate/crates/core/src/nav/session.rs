use std::io::Write;
use std::path::Path;
use std::sync::{Condvar, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::config::NavConfig;
use super::decide::{decide_feedback, FeedbackEvent, SegFrame};
use crate::error::{Error, Result};
use crate::io::{render_overlay, write_replay_frame, Palette, ReplayEntry, RgbImage};

/// Single-value mailbox: a write replaces whatever was waiting, a read
/// empties it. Connects a frame producer to a slower decision loop.
#[derive(Debug, Default)]
pub struct LatestSlot<T> {
    value: Mutex<(Option<T>, u64)>,
    ready: Condvar,
}

impl<T> LatestSlot<T> {
    pub fn new() -> Self {
        Self {
            value: Mutex::new((None, 0)),
            ready: Condvar::new(),
        }
    }

    /// Stores `value`, returning the unread value it displaced.
    pub fn put(&self, value: T) -> Option<T> {
        let mut slot = self.value.lock().unwrap_or_else(|e| e.into_inner());
        slot.1 += 1;
        let old = slot.0.replace(value);
        self.ready.notify_all();
        old
    }

    pub fn take(&self) -> Option<T> {
        self.value.lock().unwrap_or_else(|e| e.into_inner()).0.take()
    }

    /// Blocks until a value is present, then takes it.
    pub fn wait_take(&self) -> T {
        let mut slot = self.value.lock().unwrap_or_else(|e| e.into_inner());
        loop {
            if let Some(v) = slot.0.take() {
                return v;
            }
            slot = self.ready.wait(slot).unwrap_or_else(|e| e.into_inner());
        }
    }

    /// Number of values ever written.
    pub fn writes(&self) -> u64 {
        self.value.lock().unwrap_or_else(|e| e.into_inner()).1
    }
}

/// One line of the session log.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum LogRecord {
    Event(FeedbackEvent),
    Skip { t: f64, kind: &'static str, frame: usize, reason: String },
}

impl LogRecord {
    pub fn event(&self) -> Option<&FeedbackEvent> {
        match self {
            LogRecord::Event(e) => Some(e),
            LogRecord::Skip { .. } => None,
        }
    }
}

/// Replays timestamped frames against a decision clock.
///
/// Decisions happen at `t0 + k·interval` for every tick up to the last
/// frame's timestamp, where `t0` is the first frame's. At each tick the
/// newest frame that has arrived is processed and older unprocessed ones
/// are dropped; a tick with no new frame produces nothing. `segment` turns
/// a frame into masks and depth; when the frame cannot be read or is
/// malformed the tick logs a skip record and the session continues.
/// Internal failures still abort. Records are also written to `sink` as JSON
/// lines when one is given.
pub fn run_session<F, S>(
    frames: &[(f64, F)],
    cfg: &NavConfig,
    mut segment: S,
    mut sink: Option<&mut dyn Write>,
) -> Result<Vec<LogRecord>>
where
    S: FnMut(&F) -> Result<SegFrame>,
{
    cfg.validate()?;
    if frames.windows(2).any(|w| !(w[0].0 <= w[1].0)) {
        return Err(Error::Validation("frame timestamps must be non-decreasing".into()));
    }
    let (Some(first), Some(last)) = (frames.first(), frames.last()) else {
        return Ok(Vec::new());
    };
    let slot = LatestSlot::new();
    let mut next = 0;
    let mut log = Vec::new();
    let ticks = ((last.0 - first.0) / cfg.interval_s + 1e-9).floor() as usize;
    for k in 0..=ticks {
        let now = first.0 + k as f64 * cfg.interval_s;
        while next < frames.len() && frames[next].0 <= now + 1e-9 {
            slot.put(next);
            next += 1;
        }
        let Some(index) = slot.take() else { continue };
        let record = match segment(&frames[index].1).and_then(|seg| {
            seg.validate(cfg)?;
            decide_feedback(&seg, cfg, now)
        }) {
            Ok(event) => LogRecord::Event(event),
            Err(e) if e.is_validation() || matches!(e, Error::Io { .. }) => LogRecord::Skip {
                t: now,
                kind: "skip",
                frame: index,
                reason: e.to_string(),
            },
            Err(e) => return Err(e),
        };
        if let Some(w) = sink.as_deref_mut() {
            serde_json::to_writer(&mut *w, &record)?;
            writeln!(w).map_err(|e| Error::io("writing event log", e))?;
        }
        log.push(record);
    }
    Ok(log)
}

/// Seeded indoor walk under the default class tables: a corridor, a turn,
/// an approaching glass door, a close wall, a room of furniture, a dark
/// empty frame, repeating. One frame per second.
pub fn walkway_sequence(seed: u64, frames: usize, width: usize, height: usize) -> Result<Vec<(f64, SegFrame)>> {
    let cfg = NavConfig::default();
    let id = |table: &[String], name: &str| table.iter().position(|n| n == name).expect("default table") as u8;
    let g = |n| id(&cfg.general_classes, n);
    let t = |n| id(&cfg.trans_classes, n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(frames);
    for k in 0..frames {
        let phase = k % 12 / 2;
        let step = k % 2;
        let n = width * height;
        let mut general = vec![g("wall"); n];
        let mut trans = vec![0u8; n];
        let mut depth = vec![0f32; n];
        let horizon = height / 2 + rng.gen_range(0..=height / 8);
        for y in 0..height {
            for x in 0..width {
                let i = y * width + x;
                let below = y >= horizon;
                // Depth falls off towards the horizon from the camera.
                let base = if below {
                    1.0 + 6.0 * (height - y) as f32 / (height - horizon + 1) as f32
                } else {
                    4.0 + rng.gen_range(0.0..0.5)
                };
                depth[i] = base + rng.gen_range(-0.05..0.05);
                match phase {
                    // Corridor ahead: floor in the middle band.
                    0 => {
                        if below && (width / 3..2 * width / 3).contains(&x) {
                            general[i] = g("floor");
                        }
                    }
                    // Opening on the left.
                    1 => {
                        if below && x < width / 3 + step * width / 6 {
                            general[i] = g("floor");
                        }
                    }
                    // Glass door filling more of the view each second.
                    2 => {
                        if below {
                            general[i] = g("floor");
                        }
                        let half = width * (2 + 2 * step) / 10;
                        if y < horizon + height / 8 && x + half >= width / 2 && x < width / 2 + half {
                            trans[i] = t("glass door");
                            general[i] = g("door");
                        }
                    }
                    // Wall right in front.
                    3 => {
                        depth[i] = 0.5 + 0.1 * step as f32 + rng.gen_range(0.0..0.1);
                    }
                    // Furniture and a cup on a table.
                    4 => {
                        general[i] = g("clutter");
                        if below && x < width / 2 {
                            general[i] = g("chair");
                            depth[i] = 2.5 + rng.gen_range(0.0..0.2);
                        } else if below {
                            general[i] = g("table");
                            depth[i] = 1.8 + rng.gen_range(0.0..0.2);
                            if y < horizon + height / 8 && x > 3 * width / 4 {
                                trans[i] = t("cup");
                                depth[i] = 1.5 + 0.3 * step as f32;
                            }
                        }
                    }
                    // Nothing recognised and no depth reading.
                    _ => {
                        general[i] = g("clutter");
                        depth[i] = 0.0;
                    }
                }
            }
        }
        out.push((k as f64, SegFrame::new(width, height, general, trans, depth)?));
    }
    Ok(out)
}

/// Writes [`walkway_sequence`] as a replay directory with mask files. The
/// colour frames are the general mask painted over a gray ramp.
pub fn write_walkway_replay(dir: &Path, seed: u64, frames: usize, width: usize, height: usize) -> Result<Vec<ReplayEntry>> {
    let palette = Palette::for_names(&NavConfig::default().general_classes)?;
    walkway_sequence(seed, frames, width, height)?
        .iter()
        .enumerate()
        .map(|(k, (_, seg))| {
            let gray = (0..width * height)
                .flat_map(|i| [(64 + (i / width) * 128 / height) as u8; 3])
                .collect();
            let base = RgbImage::new(width, height, gray)?;
            let rgb = render_overlay(&base, &seg.general, &palette, 0.6)?;
            write_replay_frame(dir, k, &rgb, &seg.depth, Some((&seg.general, &seg.trans)))
        })
        .collect()
}
