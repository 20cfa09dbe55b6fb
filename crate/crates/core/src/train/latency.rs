use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyOptions {
    pub runs: usize,
    /// Untimed forward passes before measuring.
    pub warmup: usize,
    pub batch: usize,
    pub size: (usize, usize),
    pub seed: u64,
}

impl Default for LatencyOptions {
    fn default() -> Self {
        Self {
            runs: 300,
            warmup: 5,
            batch: 1,
            size: (512, 512),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub variant: String,
    pub dual_head: bool,
    pub runs: usize,
    pub warmup: usize,
    pub batch: usize,
    pub size: (usize, usize),
    /// Per-frame wall-clock time (run time divided by batch) of each run.
    pub frame_ms: Vec<f64>,
    pub mean_ms: f64,
    /// Sample standard deviation over runs.
    pub std_ms: f64,
}

/// Times `runs` inference passes on random weights and a random image.
/// Wall-clock numbers describe the host and are reported, never asserted.
pub fn measure_latency(config: &ModelConfig, opts: &LatencyOptions) -> Result<LatencyReport> {
    if opts.runs == 0 || opts.batch == 0 {
        return Err(Error::Validation("latency needs at least one run and a batch of one".into()));
    }
    let model = Model::new(config.clone())?;
    config.check_input(opts.size)?;
    let params = model.init_params::<f32>(opts.seed);
    let (h, w) = opts.size;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let n = opts.batch * 3 * h * w;
    let image = Tensor::from_vec(vec![opts.batch, 3, h, w], (0..n).map(|_| rng.gen::<f32>()).collect())?;
    for _ in 0..opts.warmup {
        model.predict(&params, &image)?;
    }
    let mut frame_ms = Vec::with_capacity(opts.runs);
    for _ in 0..opts.runs {
        let start = Instant::now();
        let out = model.predict(&params, &image)?;
        let elapsed = start.elapsed().as_secs_f64() * 1e3;
        drop(out);
        frame_ms.push(elapsed / opts.batch as f64);
    }
    let mean_ms = frame_ms.iter().sum::<f64>() / frame_ms.len() as f64;
    let std_ms = if frame_ms.len() > 1 {
        (frame_ms.iter().map(|t| (t - mean_ms).powi(2)).sum::<f64>() / (frame_ms.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    Ok(LatencyReport {
        variant: config.variant.name().to_string(),
        dual_head: config.heads.is_dual(),
        runs: opts.runs,
        warmup: opts.warmup,
        batch: opts.batch,
        size: opts.size,
        frame_ms,
        mean_ms,
        std_ms,
    })
}
