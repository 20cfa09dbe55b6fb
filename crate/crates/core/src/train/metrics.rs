use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::argmax_masks;
use crate::tensor::{Element, Tensor};

/// `K×K` pixel counts, rows indexed by ground truth, columns by prediction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    pub classes: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tallies one mask pair; pixels whose ground truth is `ignore` are skipped.
    pub fn update(&mut self, pred: &[u8], gt: &[u8], ignore: Option<u8>) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Validation(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        let k = self.classes;
        for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
            if Some(g) == ignore {
                continue;
            }
            if g as usize >= k || p as usize >= k {
                return Err(Error::Validation(format!(
                    "pixel {i}: class id {} out of range for {k} classes",
                    g.max(p)
                )));
            }
            self.counts[g as usize * k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    pub confusion: ConfusionMatrix,
    /// `None` for classes absent from both prediction and ground truth.
    pub iou: Vec<Option<f64>>,
    /// Mean over classes with a defined IoU; 0 when nothing was evaluated.
    pub miou: f64,
    pub pixel_accuracy: f64,
}

impl EvalResult {
    pub fn from_confusion(confusion: ConfusionMatrix) -> Self {
        let k = confusion.classes;
        let iou: Vec<Option<f64>> = (0..k)
            .map(|c| {
                let tp = confusion.get(c, c);
                let gt: u64 = (0..k).map(|p| confusion.get(c, p)).sum();
                let pred: u64 = (0..k).map(|g| confusion.get(g, c)).sum();
                let union = gt + pred - tp;
                (union > 0).then(|| tp as f64 / union as f64)
            })
            .collect();
        let present: Vec<f64> = iou.iter().flatten().copied().collect();
        let miou = if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        };
        let total = confusion.total();
        let correct: u64 = (0..k).map(|c| confusion.get(c, c)).sum();
        let pixel_accuracy = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
        Self {
            confusion,
            iou,
            miou,
            pixel_accuracy,
        }
    }
}

/// Metrics for one or more predicted masks against their ground truth.
pub fn evaluate(pred: &[&[u8]], gt: &[&[u8]], classes: usize, ignore: Option<u8>) -> Result<EvalResult> {
    if pred.len() != gt.len() {
        return Err(Error::Validation(format!("{} predictions for {} masks", pred.len(), gt.len())));
    }
    let mut cm = ConfusionMatrix::new(classes);
    for (p, g) in pred.iter().zip(gt) {
        cm.update(p, g, ignore)?;
    }
    Ok(EvalResult::from_confusion(cm))
}

/// Argmax of `[B,K,H,W]` logits evaluated against `B` masks.
pub fn evaluate_logits<T: Element>(logits: &Tensor<T>, gt: &[&[u8]], ignore: Option<u8>) -> Result<EvalResult> {
    let pred = argmax_masks(logits)?;
    let refs: Vec<&[u8]> = pred.iter().map(Vec::as_slice).collect();
    evaluate(&refs, gt, logits.shape()[1], ignore)
}
