//! End-to-end finite-difference check of the full dual-head model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Model, ModelConfig};
use crate::error::{Error, Result};
use crate::tensor::{grad_check_coords, GradCheckReport, Tensor, Var};

pub struct EndToEndCheck {
    pub report: GradCheckReport,
    pub param_count: usize,
    /// Name of the parameter holding the worst coordinate (or `"image"`).
    pub worst_name: String,
}

/// Checks d(loss)/d(every parameter and the image) for the summed
/// cross-entropy of both heads against random masks. `per_tensor` caps the
/// number of coordinates sampled from each array; `None` checks them all.
pub fn end_to_end(config: &ModelConfig, seed: u64, per_tensor: Option<usize>, eps: f64) -> Result<EndToEndCheck> {
    if !config.heads.is_dual() {
        return Err(Error::Config("end-to-end check needs both heads".into()));
    }
    let model = Model::new(config.clone())?;
    let params = model.init_params::<f64>(seed);
    let (h, w) = config.input_size;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let image = Tensor::from_vec(vec![1, 3, h, w], (0..3 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let heads = config.heads.heads();
    let targets: Vec<Vec<u8>> = heads
        .iter()
        .map(|&(_, k)| (0..h * w).map(|_| rng.gen_range(0..k) as u8).collect())
        .collect();

    let mut inputs: Vec<Tensor<f64>> = params.tensors().cloned().collect();
    inputs.push(image);
    let mut coords = Vec::new();
    for (which, t) in inputs.iter().enumerate() {
        match per_tensor {
            Some(cap) if cap < t.len() => {
                let mut picked: Vec<usize> = (0..cap).map(|_| rng.gen_range(0..t.len())).collect();
                picked.sort_unstable();
                picked.dedup();
                coords.extend(picked.into_iter().map(|i| (which, i)));
            }
            _ => coords.extend((0..t.len()).map(|i| (which, i))),
        }
    }

    let n_params = params.len();
    let report = grad_check_coords(
        |_, vars: &[Var<'_, f64>]| {
            let bound = super::Bound::from_vars(vars[..n_params].to_vec());
            let logits = model.forward(&bound, &vars[n_params])?;
            let mut total: Option<Var<'_, f64>> = None;
            for (l, t) in logits.iter().zip(&targets) {
                let (loss, _) = l.cross_entropy(t, None)?;
                total = Some(match total {
                    Some(acc) => acc.add(&loss)?,
                    None => loss,
                });
            }
            Ok(total.expect("at least one head"))
        },
        &inputs,
        eps,
        &coords,
    )?;
    let worst_name = params
        .names()
        .get(report.worst.0)
        .cloned()
        .unwrap_or_else(|| "image".into());
    Ok(EndToEndCheck {
        report,
        param_count: model.param_count(),
        worst_name,
    })
}
