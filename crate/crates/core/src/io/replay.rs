use std::path::{Path, PathBuf};

use super::netpbm::{depth_to_gray, mask_to_gray, write_pgm_file, write_ppm_file, RgbImage};
use crate::error::{Error, Result};

/// One frame of a replay directory: `NNNN.ppm` colour, `NNNN.pgm` depth in
/// millimetres, and optionally precomputed `NNNN.general.pgm` /
/// `NNNN.trans.pgm` class-id masks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayEntry {
    pub index: usize,
    pub rgb: PathBuf,
    pub depth: PathBuf,
    pub general_mask: Option<PathBuf>,
    pub trans_mask: Option<PathBuf>,
}

/// Frames sorted by index. A colour frame without its depth file is still
/// listed, so the reader can report it and move on.
pub fn list_replay(dir: &Path) -> Result<Vec<ReplayEntry>> {
    let read = std::fs::read_dir(dir).map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
    let mut out = Vec::new();
    for entry in read {
        let entry = entry.map_err(|e| Error::io(format!("listing {}", dir.display()), e))?;
        let name = entry.file_name();
        let Some(stem) = name.to_str().and_then(|n| n.strip_suffix(".ppm")) else { continue };
        let Ok(index) = stem.parse::<usize>() else { continue };
        let optional = |suffix: &str| {
            let p = dir.join(format!("{stem}.{suffix}"));
            p.exists().then_some(p)
        };
        out.push(ReplayEntry {
            index,
            rgb: entry.path(),
            depth: dir.join(format!("{stem}.pgm")),
            general_mask: optional("general.pgm"),
            trans_mask: optional("trans.pgm"),
        });
    }
    out.sort_by_key(|e| e.index);
    if let Some(w) = out.windows(2).find(|w| w[0].index == w[1].index) {
        return Err(Error::Validation(format!("frame index {} appears twice", w[0].index)));
    }
    Ok(out)
}

/// Writes frame `index` in the layout [`list_replay`] reads. Depth is in
/// metres and stored as 16-bit millimetres.
pub fn write_replay_frame(
    dir: &Path,
    index: usize,
    rgb: &RgbImage,
    depth: &[f32],
    masks: Option<(&[u8], &[u8])>,
) -> Result<ReplayEntry> {
    let (w, h) = (rgb.width, rgb.height);
    let stem = format!("{index:04}");
    let entry = ReplayEntry {
        index,
        rgb: dir.join(format!("{stem}.ppm")),
        depth: dir.join(format!("{stem}.pgm")),
        general_mask: masks.map(|_| dir.join(format!("{stem}.general.pgm"))),
        trans_mask: masks.map(|_| dir.join(format!("{stem}.trans.pgm"))),
    };
    write_ppm_file(&entry.rgb, rgb)?;
    write_pgm_file(&entry.depth, &depth_to_gray(w, h, depth)?)?;
    if let (Some((g, t)), Some(gp), Some(tp)) = (masks, &entry.general_mask, &entry.trans_mask) {
        write_pgm_file(gp, &mask_to_gray(w, h, g)?)?;
        write_pgm_file(tp, &mask_to_gray(w, h, t)?)?;
    }
    Ok(entry)
}
