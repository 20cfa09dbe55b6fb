//! Image in, class masks and overlays out.

use crate::classes::head_class_names;
use crate::error::{Error, Result};
use crate::io::{image_to_tensor, render_overlay, Palette, RgbImage};
use crate::model::{argmax_masks, Model, ParamSet};
use crate::nav::SegFrame;

#[derive(Debug, Clone, PartialEq)]
pub struct HeadMask {
    pub head: String,
    pub class_names: Vec<String>,
    pub mask: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Segmentation {
    pub width: usize,
    pub height: usize,
    /// In the model's head order.
    pub heads: Vec<HeadMask>,
}

/// Runs every head on one image and takes the per-pixel argmax.
pub fn segment(model: &Model, params: &ParamSet<f32>, image: &RgbImage) -> Result<Segmentation> {
    model.config().check_input((image.height, image.width))?;
    let logits = model.predict(params, &image_to_tensor(image))?;
    let heads = model
        .config()
        .heads
        .heads()
        .into_iter()
        .zip(&logits)
        .map(|((head, classes), l)| {
            Ok(HeadMask {
                head: head.to_string(),
                class_names: head_class_names(head, classes),
                mask: argmax_masks(l)?.swap_remove(0),
            })
        })
        .collect::<Result<_>>()?;
    Ok(Segmentation {
        width: image.width,
        height: image.height,
        heads,
    })
}

impl Segmentation {
    /// One overlay per head.
    pub fn overlays(&self, image: &RgbImage, alpha: f32) -> Result<Vec<RgbImage>> {
        self.heads
            .iter()
            .map(|h| render_overlay(image, &h.mask, &Palette::for_names(&h.class_names)?, alpha))
            .collect()
    }

    /// Pairs a dual-head result with a depth plane in metres.
    pub fn to_seg_frame(&self, depth: Vec<f32>) -> Result<SegFrame> {
        match &self.heads[..] {
            [general, trans] => SegFrame::new(self.width, self.height, general.mask.clone(), trans.mask.clone(), depth),
            _ => Err(Error::Config("navigation needs a dual-head model".into())),
        }
    }
}
