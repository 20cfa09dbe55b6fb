//! Netpbm images, palettes, overlays and replay directories.

mod netpbm;
mod overlay;
mod replay;

pub use netpbm::{
    depth_from_gray, depth_to_gray, image_from_tensor, image_to_tensor, mask_from_gray, mask_to_gray, read_pgm,
    read_pgm_file, read_ppm, read_ppm_file, write_pgm, write_pgm_file, write_ppm, write_ppm_file, GrayImage,
    RgbImage,
};
pub use overlay::{render_overlay, Palette};
pub use replay::{list_replay, write_replay_frame, ReplayEntry};
