use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamConfig, OptimState};
use super::schedule::poly_lr;
use super::synth::{synth_heads, SynthSample};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ParamSet};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    /// Length of the poly schedule; defaults to `epochs` when `None`.
    pub schedule_epochs: Option<usize>,
    pub power: f64,
    pub adam: AdamConfig,
    /// Seeds both the initial weights and the per-epoch shuffle.
    pub seed: u64,
    /// Abort when an epoch's loss exceeds this multiple of the first one.
    pub divergence_factor: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            epochs: 100,
            batch_size: 2,
            schedule_epochs: None,
            power: 0.9,
            adam: AdamConfig::default(),
            seed: 0,
            divergence_factor: 10.0,
        }
    }
}

impl TrainOptions {
    /// Settings for overfitting eight 64×64 synthetic scenes with the Nano
    /// model. A fine-tuning rate of 1e-4 is far too slow for 300 epochs at this scale.
    pub fn toy() -> Self {
        Self {
            epochs: 300,
            batch_size: 2,
            adam: AdamConfig {
                lr: 3e-3,
                ..AdamConfig::default()
            },
            seed: 1,
            ..Self::default()
        }
    }
}

/// Nano model at 64×64 with heads sized for the synthetic label space.
pub fn toy_config() -> ModelConfig {
    ModelConfig::nano().with_input_size(64, 64).with_heads(synth_heads())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    /// Mean over the epoch's batches.
    pub loss_general: f64,
    pub loss_trans: f64,
}

impl EpochLog {
    pub fn total(&self) -> f64 {
        self.loss_general + self.loss_trans
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ParamSet<f32>,
    pub log: Vec<EpochLog>,
}

/// Joint training of both heads: each batch's loss is the sum of the two
/// heads' cross-entropies, one Adam step per batch, poly decay per epoch.
pub fn train_toy(config: &ModelConfig, dataset: &[SynthSample], opts: &TrainOptions) -> Result<TrainOutcome> {
    let model = Model::new(config.clone())?;
    train_from(&model, model.init_params(opts.seed), dataset, opts)
}

/// Same as [`train_toy`] but starting from existing weights.
pub fn train_from(
    model: &Model,
    mut params: ParamSet<f32>,
    dataset: &[SynthSample],
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if !model.config().heads.is_dual() {
        return Err(Error::Config("toy training needs a dual-head model".into()));
    }
    if opts.batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    if dataset.is_empty() && opts.epochs > 0 {
        return Err(Error::Validation("empty training set".into()));
    }
    model.check_params(&params)?;
    for (i, s) in dataset.iter().enumerate() {
        model.config().check_input((s.height(), s.width()))?;
        if (s.height(), s.width()) != (dataset[0].height(), dataset[0].width()) {
            return Err(Error::Validation(format!("sample {i} differs in size from sample 0")));
        }
    }
    let total = opts.schedule_epochs.unwrap_or(opts.epochs);
    let mut state = OptimState::<f32>::new(params.tensors().map(Tensor::len));
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x5eed_0f_0de5);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = Vec::with_capacity(opts.epochs);
    for epoch in 0..opts.epochs {
        let lr = poly_lr(epoch, total, opts.adam.lr, opts.power)?;
        order.shuffle(&mut rng);
        let (mut sum_g, mut sum_t, mut batches) = (0.0, 0.0, 0usize);
        for batch in order.chunks(opts.batch_size) {
            let (grads, vg, vt) = batch_gradients(model, &params, dataset, batch, epoch)?;
            apply(&mut params, &grads, &mut state, &opts.adam, lr)?;
            sum_g += vg;
            sum_t += vt;
            batches += 1;
        }
        let entry = EpochLog {
            epoch,
            lr,
            loss_general: sum_g / batches as f64,
            loss_trans: sum_t / batches as f64,
        };
        log::debug!(
            "epoch {epoch} lr {lr:.3e} loss {:.5} + {:.5}",
            entry.loss_general,
            entry.loss_trans
        );
        if let Some(first) = log.first().map(EpochLog::total) {
            if entry.total() > opts.divergence_factor * first {
                return Err(Error::Diverged(format!(
                    "epoch {epoch}: loss {:.4} exceeds {}x the initial {first:.4}",
                    entry.total(),
                    opts.divergence_factor
                )));
            }
        }
        log.push(entry);
    }
    Ok(TrainOutcome { params, log })
}

/// Loss values and parameter gradients for one batch. The tape is dropped
/// on return, so the parameters are no longer shared when updated.
fn batch_gradients(
    model: &Model,
    params: &ParamSet<f32>,
    dataset: &[SynthSample],
    batch: &[usize],
    epoch: usize,
) -> Result<(Vec<Tensor<f32>>, f64, f64)> {
    let (image, general, trans) = collate(dataset, batch)?;
    let tape = Tape::new();
    let bound = params.bind(&tape, true);
    let x = tape.constant(image);
    let out = model.forward_dual(&bound, &x)?;
    let (lg, _) = out.general_logits.cross_entropy(&general, None)?;
    let (lt, _) = out.trans_logits.cross_entropy(&trans, None)?;
    let (vg, vt) = (lg.value().data()[0] as f64, lt.value().data()[0] as f64);
    if !(vg + vt).is_finite() {
        return Err(Error::Diverged(format!("epoch {epoch}: loss is {}", vg + vt)));
    }
    let mut grads = tape.backward(&lg.add(&lt)?)?;
    let grads = bound
        .vars()
        .iter()
        .map(|v| grads.take(v).expect("parameters are leaves"))
        .collect();
    Ok((grads, vg, vt))
}

fn apply(
    params: &mut ParamSet<f32>,
    grads: &[Tensor<f32>],
    state: &mut OptimState<f32>,
    cfg: &AdamConfig,
    lr: f64,
) -> Result<()> {
    let grads: Vec<&[f32]> = grads.iter().map(|g| g.data()).collect();
    adam_step(&mut params.slices_mut(), &grads, state, cfg, lr)
}

fn collate(dataset: &[SynthSample], batch: &[usize]) -> Result<(Tensor<f32>, Vec<u8>, Vec<u8>)> {
    let first = &dataset[batch[0]];
    let (h, w) = (first.height(), first.width());
    let mut image = Vec::with_capacity(batch.len() * 3 * h * w);
    let mut general = Vec::with_capacity(batch.len() * h * w);
    let mut trans = Vec::with_capacity(batch.len() * h * w);
    for &i in batch {
        let s = &dataset[i];
        image.extend_from_slice(s.image.data());
        general.extend_from_slice(&s.general_mask);
        trans.extend_from_slice(&s.trans_mask);
    }
    Ok((Tensor::from_vec(vec![batch.len(), 3, h, w], image)?, general, trans))
}

/// `epoch,lr,loss_general,loss_trans` with a header row. Losses are printed
/// with round-trip precision so logs compare exactly.
pub fn write_loss_csv<W: Write>(mut w: W, log: &[EpochLog]) -> Result<()> {
    let io = |e| Error::io("writing loss log", e);
    writeln!(w, "epoch,lr,loss_general,loss_trans").map_err(io)?;
    for e in log {
        writeln!(w, "{},{:e},{:?},{:?}", e.epoch, e.lr, e.loss_general, e.loss_trans).map_err(io)?;
    }
    Ok(())
}
