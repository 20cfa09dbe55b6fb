//! Procedural indoor scenes with see-through panes.
//!
//! Geometry lives on a 16×16 cell lattice scaled to the image, so every
//! region boundary falls on a multiple of `H/16` rows and `W/16` columns.
//! A pane's pixels are the scene behind it blended with a faint tint, which
//! keeps them close to their surroundings the way real glass is.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::HeadLayout;
use crate::tensor::Tensor;

/// Classes per head in the synthetic label space.
pub const SYNTH_CLASSES: usize = 4;
pub const GENERAL_SYNTH_NAMES: [&str; SYNTH_CLASSES] = ["background", "floor", "wall", "door"];
pub const TRANS_SYNTH_NAMES: [&str; SYNTH_CLASSES] = ["background", "window", "glass door", "glass wall"];

const CELLS: usize = 16;
const PANE_WEIGHT: f32 = 0.3;
const TINT: [f32; 3] = [0.55, 0.8, 0.85];
const BASE_COLORS: [[f32; 3]; SYNTH_CLASSES] = [
    [0.18, 0.2, 0.32],
    [0.55, 0.38, 0.22],
    [0.82, 0.76, 0.64],
    [0.38, 0.22, 0.12],
];

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    /// `[3,H,W]`, values in `[0,1]`.
    pub image: Tensor<f32>,
    pub general_mask: Vec<u8>,
    pub trans_mask: Vec<u8>,
}

impl SynthSample {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }
}

/// A sample plus the pane-free rendering, for checking the glass blend.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthScene {
    pub sample: SynthSample,
    pub background: Tensor<f32>,
}

/// `count` scenes; sample `i` depends only on `(seed, i, h, w)`.
pub fn generate_synth_dataset(seed: u64, count: usize, h: usize, w: usize) -> Result<Vec<SynthSample>> {
    (0..count)
        .map(|i| generate_synth_scene(seed, i, h, w).map(|s| s.sample))
        .collect()
}

#[derive(Clone, Copy)]
struct Rect {
    top: usize,
    left: usize,
    bottom: usize,
    right: usize,
}

pub fn generate_synth_scene(seed: u64, index: usize, h: usize, w: usize) -> Result<SynthScene> {
    if h == 0 || w == 0 || h % 32 != 0 || w % 32 != 0 {
        return Err(Error::Validation(format!("synthetic size {h}x{w} must be a positive multiple of 32")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index as u64);
    // Lattice rows: background above `ceiling`, wall down to `horizon`, floor below.
    let ceiling = rng.gen_range(1..=3);
    let horizon = rng.gen_range(10..=12);
    let mut general = [[0u8; CELLS]; CELLS];
    for (r, row) in general.iter_mut().enumerate() {
        let class = if r < ceiling {
            0
        } else if r < horizon {
            2
        } else {
            1
        };
        row.fill(class);
    }
    // Some scenes open onto background at one side.
    if rng.gen_bool(0.3) {
        let open = rng.gen_range(2..=4);
        let left_side = rng.gen_bool(0.5);
        for row in general.iter_mut().take(horizon).skip(ceiling) {
            for c in 0..open {
                row[if left_side { c } else { CELLS - 1 - c }] = 0;
            }
        }
    }
    let mut doors = Vec::new();
    if rng.gen_bool(0.75) {
        let width = rng.gen_range(2..=3);
        let height = rng.gen_range(4..=6).min(horizon - ceiling);
        let left = rng.gen_range(0..=CELLS - width);
        doors.push(Rect {
            top: horizon - height,
            left,
            bottom: horizon,
            right: left + width,
        });
    }
    for d in &doors {
        for row in &mut general[d.top..d.bottom] {
            row[d.left..d.right].fill(3);
        }
    }

    // Panes: kinds cycle with the index so small datasets cover every class.
    let mut trans = [[0u8; CELLS]; CELLS];
    let pane_count = 1 + usize::from(rng.gen_bool(0.5));
    let mut panes = Vec::new();
    for k in 0..pane_count {
        let kind = 1 + ((index + k) % 3) as u8;
        let rect = match kind {
            1 => {
                let width = rng.gen_range(2..=4);
                let height = rng.gen_range(2..=3).min(horizon - ceiling - 2);
                let top = rng.gen_range(ceiling + 1..=horizon - 1 - height);
                let left = rng.gen_range(0..=CELLS - width);
                Rect {
                    top,
                    left,
                    bottom: top + height,
                    right: left + width,
                }
            }
            2 => {
                let width = rng.gen_range(2..=3);
                let height = rng.gen_range(4..=6).min(horizon - ceiling);
                let left = rng.gen_range(0..=CELLS - width);
                Rect {
                    top: horizon - height,
                    left,
                    bottom: horizon,
                    right: left + width,
                }
            }
            _ => {
                let width = rng.gen_range(5..=8);
                let left = rng.gen_range(0..=CELLS - width);
                Rect {
                    top: ceiling,
                    left,
                    bottom: horizon,
                    right: left + width,
                }
            }
        };
        for row in &mut trans[rect.top..rect.bottom] {
            row[rect.left..rect.right].fill(kind);
        }
        panes.push(rect);
    }

    let (cell_h, cell_w) = (h / CELLS, w / CELLS);
    let mut colors = BASE_COLORS;
    for c in colors.iter_mut().flatten() {
        *c = (*c + rng.gen_range(-0.05..0.05)).clamp(0.0, 1.0);
    }
    let plane = h * w;
    let mut background = vec![0f32; 3 * plane];
    let mut general_mask = vec![0u8; plane];
    let mut trans_mask = vec![0u8; plane];
    for y in 0..h {
        for x in 0..w {
            let (r, c) = (y / cell_h, x / cell_w);
            let class = general[r][c];
            general_mask[y * w + x] = class;
            trans_mask[y * w + x] = trans[r][c];
            // Per-class texture: floor boards, wall speckle, door panels.
            let texture = match class {
                1 => 0.06 * (((x / cell_w.max(2) + y / 2) % 2) as f32 - 0.5),
                3 => 0.05 * ((x % cell_w < cell_w / 2) as u8 as f32 - 0.5),
                _ => 0.0,
            };
            for ch in 0..3 {
                let noise = rng.gen_range(-0.03..0.03);
                background[ch * plane + y * w + x] = (colors[class as usize][ch] + texture + noise).clamp(0.0, 1.0);
            }
        }
    }
    let mut image = background.clone();
    let border = (cell_h.min(cell_w) / 8).max(1);
    for rect in &panes {
        let (top, left) = (rect.top * cell_h, rect.left * cell_w);
        let (bottom, right) = (rect.bottom * cell_h, rect.right * cell_w);
        for y in top..bottom {
            for x in left..right {
                let edge = y < top + border || y >= bottom - border || x < left + border || x >= right - border;
                // Frames are only slightly stronger than the glass itself.
                let weight = if edge { PANE_WEIGHT + 0.1 } else { PANE_WEIGHT };
                for (ch, tint) in TINT.iter().enumerate() {
                    let i = ch * plane + y * w + x;
                    image[i] = (1.0 - weight) * background[i] + weight * tint;
                }
            }
        }
    }
    Ok(SynthScene {
        sample: SynthSample {
            image: Tensor::from_vec(vec![3, h, w], image)?,
            general_mask,
            trans_mask,
        },
        background: Tensor::from_vec(vec![3, h, w], background)?,
    })
}

/// Head layout matching the synthetic label space.
pub fn synth_heads() -> HeadLayout {
    HeadLayout::Dual {
        general: SYNTH_CLASSES,
        transparency: SYNTH_CLASSES,
    }
}
