use serde::{Deserialize, Serialize};

use super::config::NavConfig;
use crate::error::{Error, Result};

/// Segmentation and depth for one frame, all row-major `H×W`.
#[derive(Debug, Clone, PartialEq)]
pub struct SegFrame {
    pub width: usize,
    pub height: usize,
    pub general: Vec<u8>,
    pub trans: Vec<u8>,
    /// Metres; 0 marks a missing reading.
    pub depth: Vec<f32>,
}

impl SegFrame {
    pub fn new(width: usize, height: usize, general: Vec<u8>, trans: Vec<u8>, depth: Vec<f32>) -> Result<Self> {
        let n = width * height;
        if n == 0 || general.len() != n || trans.len() != n || depth.len() != n {
            return Err(Error::Validation(format!(
                "{width}x{height} frame with {} general, {} transparency and {} depth pixels",
                general.len(),
                trans.len(),
                depth.len()
            )));
        }
        Ok(Self {
            width,
            height,
            general,
            trans,
            depth,
        })
    }

    /// Checks class ids against the config's tables.
    pub fn validate(&self, cfg: &NavConfig) -> Result<()> {
        for (mask, table, head) in [
            (&self.general, cfg.general_classes.len(), "general"),
            (&self.trans, cfg.trans_classes.len(), "transparency"),
        ] {
            if let Some(i) = mask.iter().position(|&c| c as usize >= table) {
                return Err(Error::Validation(format!(
                    "{head} mask pixel {i} has id {} but the table has {table} classes",
                    mask[i]
                )));
            }
        }
        if let Some(i) = self.depth.iter().position(|d| !d.is_finite() || *d < 0.0) {
            return Err(Error::Validation(format!("depth pixel {i} is {}", self.depth[i])));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Left,
    Forward,
    Right,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case")]
pub enum FeedbackKind {
    /// Something is within the obstacle distance.
    Vibration,
    /// A transparent surface covers enough of the view.
    SpeechStuff(String),
    /// The most walkable direction.
    SpeechDirection(Direction),
    /// The closest recognised object.
    SpeechNearest(String),
    /// Nothing to report: no obstacle, surface, path or object.
    SpeechClear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    /// `None` when no pixel has a depth reading.
    pub mean_depth: Option<f64>,
    /// `(class, ratio)` for each stuff class, in config order.
    pub stuff_ratios: Vec<(String, f64)>,
    /// Left, forward, right.
    pub walkable_ratios: [f64; 3],
    pub nearest_depth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedbackEvent {
    pub t: f64,
    #[serde(flatten)]
    pub kind: FeedbackKind,
    pub evidence: Evidence,
}

/// Walkable fraction of the left, centre and right column bands. Band `k`
/// spans columns `floor(k·W/3) .. floor((k+1)·W/3)`.
pub fn partition_walkable(mask: &[u8], width: usize, path: &[u8]) -> Result<[f64; 3]> {
    if width < 3 {
        return Err(Error::Validation(format!("width {width} cannot be split into three bands")));
    }
    if mask.len() % width != 0 {
        return Err(Error::Validation(format!("{} pixels do not form rows of {width}", mask.len())));
    }
    let height = mask.len() / width;
    let mut walk = [0usize; 3];
    let bounds = [0, width / 3, 2 * width / 3, width];
    for row in mask.chunks_exact(width) {
        for b in 0..3 {
            walk[b] += row[bounds[b]..bounds[b + 1]].iter().filter(|c| path.contains(c)).count();
        }
    }
    Ok(std::array::from_fn(|b| {
        let area = (bounds[b + 1] - bounds[b]) * height;
        walk[b] as f64 / area as f64
    }))
}

/// Fraction of the frame covered by each class, in `classes` order.
pub fn class_area_ratios(mask: &[u8], classes: &[u8]) -> Vec<f64> {
    let mut counts = [0usize; 256];
    for &c in mask {
        counts[c as usize] += 1;
    }
    classes.iter().map(|&c| counts[c as usize] as f64 / mask.len() as f64).collect()
}

/// Mean over pixels with a reading; `None` if there are none.
pub fn mean_depth(depth: &[f32]) -> Option<f64> {
    let (sum, n) = depth
        .iter()
        .filter(|&&d| d > 0.0)
        .fold((0.0f64, 0usize), |(s, n), &d| (s + d as f64, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NearestObject {
    pub name: String,
    pub median_depth: f64,
    pub pixels: usize,
}

fn median(values: &mut [f32]) -> f64 {
    values.sort_by(f32::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2] as f64
    } else {
        (values[n / 2 - 1] as f64 + values[n / 2] as f64) / 2.0
    }
}

/// Class with the smallest median depth among general objects (everything
/// but id 0 and the path classes) and transparent things. Classes without
/// any depth reading cannot be placed and are skipped. Ties go to the
/// larger area, then to the earlier entry (general table before the
/// transparency table).
pub fn nearest_object(seg: &SegFrame, cfg: &NavConfig) -> Result<Option<NearestObject>> {
    let ids = cfg.ids()?;
    let candidates = ids
        .objects
        .iter()
        .map(|&c| (&seg.general, c, &cfg.general_classes[c as usize]))
        .chain(ids.thing.iter().map(|&c| (&seg.trans, c, &cfg.trans_classes[c as usize])));
    let mut best: Option<NearestObject> = None;
    for (mask, class, name) in candidates {
        let mut depths = Vec::new();
        let mut pixels = 0;
        for (&m, &d) in mask.iter().zip(&seg.depth) {
            if m == class {
                pixels += 1;
                if d > 0.0 {
                    depths.push(d);
                }
            }
        }
        if depths.is_empty() {
            continue;
        }
        let candidate = NearestObject {
            name: name.clone(),
            median_depth: median(&mut depths),
            pixels,
        };
        let better = match &best {
            None => true,
            Some(b) => {
                candidate.median_depth < b.median_depth
                    || (candidate.median_depth == b.median_depth && candidate.pixels > b.pixels)
            }
        };
        if better {
            best = Some(candidate);
        }
    }
    Ok(best)
}

/// Index of the largest ratio; ties prefer forward, then left, then right.
fn best_direction(r: &[f64; 3]) -> (Direction, f64) {
    [(Direction::Forward, r[1]), (Direction::Left, r[0]), (Direction::Right, r[2])]
        .into_iter()
        .fold((Direction::Forward, f64::NEG_INFINITY), |best, d| if d.1 > best.1 { d } else { best })
}

/// The decision chain, first match wins: vibration when the mean depth is
/// under the obstacle distance (unknown depth is not an obstacle); the
/// largest transparent surface when it exceeds its ratio; the most walkable
/// direction when it exceeds its ratio; otherwise the nearest object, or a
/// clear announcement when there is none.
pub fn decide_feedback(seg: &SegFrame, cfg: &NavConfig, t: f64) -> Result<FeedbackEvent> {
    let ids = cfg.ids()?;
    let mean = mean_depth(&seg.depth);
    let stuff = class_area_ratios(&seg.trans, &ids.stuff);
    let walk = partition_walkable(&seg.general, seg.width, &ids.path)?;
    let mut evidence = Evidence {
        mean_depth: mean,
        stuff_ratios: cfg.stuff_classes.iter().cloned().zip(stuff.iter().copied()).collect(),
        walkable_ratios: walk,
        nearest_depth: None,
    };
    // Earliest class wins a tie.
    let top_stuff = stuff.iter().enumerate().fold(None, |best: Option<(usize, f64)>, (i, &r)| match best {
        Some((_, b)) if b >= r => best,
        _ => Some((i, r)),
    });
    let (direction, walk_max) = best_direction(&walk);
    let kind = if mean.is_some_and(|m| m < cfg.obstacle_m) {
        FeedbackKind::Vibration
    } else if let Some((i, _)) = top_stuff.filter(|&(_, r)| r > cfg.trans_ratio) {
        FeedbackKind::SpeechStuff(cfg.stuff_classes[i].clone())
    } else if walk_max > cfg.walkable_ratio {
        FeedbackKind::SpeechDirection(direction)
    } else {
        match nearest_object(seg, cfg)? {
            Some(obj) => {
                evidence.nearest_depth = Some(obj.median_depth);
                FeedbackKind::SpeechNearest(obj.name)
            }
            None => FeedbackKind::SpeechClear,
        }
    };
    Ok(FeedbackEvent { t, kind, evidence })
}
