//! Optimizer, schedule, synthetic data, toy training, metrics and latency.

mod adam;
mod latency;
mod metrics;
mod schedule;
mod synth;
mod toy;

pub use adam::{adam_step, AdamConfig, OptimState};
pub use latency::{measure_latency, LatencyOptions, LatencyReport};
pub use metrics::{evaluate, evaluate_logits, ConfusionMatrix, EvalResult};
pub use schedule::poly_lr;
pub use synth::{
    generate_synth_dataset, generate_synth_scene, synth_heads, SynthSample, SynthScene, GENERAL_SYNTH_NAMES, SYNTH_CLASSES,
    TRANS_SYNTH_NAMES,
};
pub use toy::{toy_config, train_from, train_toy, write_loss_csv, EpochLog, TrainOptions, TrainOutcome};
