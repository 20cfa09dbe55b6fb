use crate::error::{Error, Result};
use crate::io::RgbImage;

/// Class id → colour for one head. Id 0 is background and always black.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Palette {
    pub colors: Vec<[u8; 3]>,
}

/// Fixed colours for names that the visualisations single out.
const NAMED: [(&str, [u8; 3]); 4] = [
    ("floor", [0, 0, 255]),
    ("glass door", [128, 128, 128]),
    ("glass wall", [255, 0, 0]),
    ("window", [0, 200, 200]),
];

const FILL: [[u8; 3]; 14] = [
    [230, 159, 0],
    [86, 180, 233],
    [0, 158, 115],
    [240, 228, 66],
    [204, 121, 167],
    [213, 94, 0],
    [120, 60, 180],
    [160, 220, 120],
    [255, 170, 200],
    [90, 90, 30],
    [255, 255, 255],
    [30, 90, 60],
    [180, 120, 60],
    [60, 60, 140],
];

impl Palette {
    pub fn new(colors: Vec<[u8; 3]>) -> Result<Self> {
        if colors.first() != Some(&[0, 0, 0]) {
            return Err(Error::Validation("palette id 0 must be black".into()));
        }
        for (i, c) in colors.iter().enumerate() {
            if colors[..i].contains(c) {
                return Err(Error::Validation(format!("palette colour {c:?} used twice")));
            }
        }
        Ok(Self { colors })
    }

    /// Colours for a class table: named classes get their usual colour, the
    /// rest take the next unused entry of a fixed list.
    pub fn for_names<S: AsRef<str>>(names: &[S]) -> Result<Self> {
        let mut fill = FILL.iter();
        let mut colors = vec![[0, 0, 0]];
        for name in names.iter().skip(1) {
            let named = NAMED.iter().find(|(n, _)| *n == name.as_ref()).map(|(_, c)| *c);
            let c = match named {
                Some(c) => c,
                None => *fill
                    .by_ref()
                    .find(|c| !NAMED.iter().any(|(_, n)| n == *c))
                    .ok_or_else(|| Error::Validation(format!("no colour left for {}", name.as_ref())))?,
            };
            colors.push(c);
        }
        Self::new(colors)
    }

    pub fn len(&self) -> usize {
        self.colors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.colors.is_empty()
    }
}

/// `(1−α)·image + α·palette[mask]`, rounded to nearest; background pixels
/// are copied unchanged.
pub fn render_overlay(image: &RgbImage, mask: &[u8], palette: &Palette, alpha: f32) -> Result<RgbImage> {
    if mask.len() != image.width * image.height {
        return Err(Error::Validation(format!(
            "mask has {} pixels, image is {}x{}",
            mask.len(),
            image.width,
            image.height
        )));
    }
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Validation(format!("alpha {alpha} outside [0,1]")));
    }
    let mut out = image.data.clone();
    for (i, &id) in mask.iter().enumerate() {
        if id == 0 {
            continue;
        }
        let color = palette
            .colors
            .get(id as usize)
            .ok_or_else(|| Error::Validation(format!("pixel {i}: class id {id} has no palette colour")))?;
        for c in 0..3 {
            let v = (1.0 - alpha) * image.data[3 * i + c] as f32 + alpha * color[c] as f32;
            out[3 * i + c] = v.round() as u8;
        }
    }
    RgbImage::new(image.width, image.height, out)
}
