//! Loss, optimizer, synthetic data and the training / evaluation loops.

mod adam;
mod data;
mod loss;
mod synth;
mod trainer;

pub use adam::{adam_step, adam_update, AdamState, BETA1, BETA2, EPS};
pub use data::{dataset_pairs, load_dataset, load_image, load_pair, save_gray_png, stack, Sample};
pub use loss::{bce_dice_loss, bce_loss, loss, LossKind, DICE_SMOOTH, PROB_CLAMP};
pub use synth::{synth_dataset, synth_tile, write_synth_dataset, SynthSpec, SynthTile, MAX_ROAD_FRACTION, MIN_ROAD_FRACTION};
pub use trainer::{
    evaluate, load_samples, predict, train, DataSource, EvalReport, ImageReport, SkippedImage, TrainConfig, TrainRun,
    Trainer, DEFAULT_BATCH_SIZE, DEFAULT_LR, FINAL_CHECKPOINT, LOSS_LOG,
};
