use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::{adam_step, AdamState};
use super::data::{load_dataset, stack, Sample};
use super::loss::{loss, LossKind};
use super::synth::{synth_dataset, SynthSpec};
use crate::error::{Error, Result};
use crate::metrics::{confusion, scores, ConfusionCounts, Scores};
use crate::model::{Checkpoint, Model, ModelConfig};
use crate::tensor::BnMode;

pub const DEFAULT_LR: f64 = 1e-4;
pub const DEFAULT_BATCH_SIZE: usize = 4;
pub const LOSS_LOG: &str = "loss.csv";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    /// Directory of `<id>_sat.png` / `<id>_mask.png` pairs.
    Dir(PathBuf),
    /// Generated in memory.
    Synth(SynthSpec),
}

fn default_lr() -> f64 {
    DEFAULT_LR
}

fn default_batch_size() -> usize {
    DEFAULT_BATCH_SIZE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    pub steps: u64,
    /// Seeds the mini-batch order; model initialization uses `model.seed`.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub loss: LossKind,
    pub model: ModelConfig,
    pub data: DataSource,
    /// Write a checkpoint every this many steps; 0 keeps only the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
}

impl TrainConfig {
    pub fn new(model: ModelConfig, data: DataSource, steps: u64) -> Self {
        TrainConfig {
            lr: DEFAULT_LR,
            batch_size: DEFAULT_BATCH_SIZE,
            steps,
            seed: 0,
            loss: LossKind::default(),
            model,
            data,
            checkpoint_every: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if let DataSource::Synth(s) = &self.data {
            s.validate()?;
        }
        self.model.validate()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

pub fn load_samples(data: &DataSource) -> Result<Vec<Sample>> {
    match data {
        DataSource::Dir(dir) => load_dataset(dir),
        DataSource::Synth(spec) => Ok(synth_dataset(spec)?.iter().map(|t| t.to_sample()).collect()),
    }
}

/// Training state: model, optimizer, data and step counter.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model<f32>,
    pub adam: AdamState<f32>,
    pub step: u64,
    samples: Vec<Sample>,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, samples: Vec<Sample>) -> Result<Self> {
        cfg.validate()?;
        let size = cfg.model.input_size;
        if samples.is_empty() {
            return Err(Error::Config("training set is empty".into()));
        }
        if let Some(s) = samples.iter().find(|s| s.height != size || s.width != size) {
            return Err(Error::Config(format!(
                "sample `{}` is {}x{}, model expects {size}x{size}",
                s.id, s.height, s.width
            )));
        }
        let model = Model::new(cfg.model.clone())?;
        let adam = AdamState::new(&model.store);
        Ok(Trainer {
            cfg,
            model,
            adam,
            step: 0,
            samples,
        })
    }

    /// Continues from a checkpoint written by [`Trainer::checkpoint`].
    pub fn resume(cfg: TrainConfig, samples: Vec<Sample>, ckpt: &Checkpoint) -> Result<Self> {
        let mut t = Trainer::new(cfg, samples)?;
        ckpt.restore_into(&mut t.model)?;
        t.adam = ckpt
            .adam_state(&t.model)?
            .ok_or_else(|| Error::checkpoint("optimizer", "checkpoint has no optimizer state to resume from"))?;
        t.step = ckpt.step;
        Ok(t)
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    /// Sample indices of the batch for 0-based `step`. The stream walks a
    /// fresh seeded permutation per epoch, so it depends only on the step.
    pub fn batch_indices(&self, step: u64) -> Vec<usize> {
        let n = self.samples.len();
        let bs = self.cfg.batch_size;
        let mut cached: Option<(usize, Vec<usize>)> = None;
        (0..bs)
            .map(|j| {
                let k = step as usize * bs + j;
                let epoch = k / n;
                if cached.as_ref().map(|c| c.0) != Some(epoch) {
                    let mut perm: Vec<usize> = (0..n).collect();
                    let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
                    rng.set_stream(epoch as u64);
                    perm.shuffle(&mut rng);
                    cached = Some((epoch, perm));
                }
                cached.as_ref().expect("just set").1[k % n]
            })
            .collect()
    }

    /// One optimizer step; returns the batch loss.
    pub fn train_step(&mut self) -> Result<f64> {
        let idx = self.batch_indices(self.step);
        let batch: Vec<&Sample> = idx.iter().map(|&i| &self.samples[i]).collect();
        let (x, gt) = stack::<f32>(&batch)?;
        self.model.store.zero_grad();
        let pred = self.model.forward(&x, BnMode::Train)?;
        let l = loss(self.cfg.loss, &pred, &gt)?;
        let value = l.item() as f64;
        let step = self.step + 1;
        if !value.is_finite() {
            return Err(Error::NonFinite(format!(
                "loss is {value} at step {step} (lr {})",
                self.cfg.lr
            )));
        }
        l.backward()?;
        for (_, name, p) in self.model.store.params() {
            if let Some(g) = p.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite(format!(
                        "gradient of `{name}` at step {step} (lr {})",
                        self.cfg.lr
                    )));
                }
            }
        }
        adam_step(&mut self.model.store, &mut self.adam, self.cfg.lr)?;
        self.step = step;
        Ok(value)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::capture(&self.model, self.step, Some(&self.adam))
    }
}

/// Outcome of [`train`].
#[derive(Clone, Debug)]
pub struct TrainRun {
    /// `(step, loss)` for the steps run by this call.
    pub losses: Vec<(u64, f64)>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
}

/// Runs until `cfg.steps`, writing `loss.csv` and checkpoints into `out`.
/// With `resume`, continues from that checkpoint and appends to the log.
pub fn train(
    cfg: &TrainConfig,
    out: &Path,
    resume: Option<&Path>,
    mut on_step: impl FnMut(u64, f64),
) -> Result<TrainRun> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let samples = load_samples(&cfg.data)?;
    let mut trainer = match resume {
        Some(path) => Trainer::resume(cfg.clone(), samples, &Checkpoint::load(path)?)?,
        None => Trainer::new(cfg.clone(), samples)?,
    };

    let log_path = out.join(LOSS_LOG);
    let file = if resume.is_some() && log_path.exists() {
        OpenOptions::new().append(true).open(&log_path)
    } else {
        File::create(&log_path)
    }
    .map_err(|e| Error::io(&log_path, e))?;
    let mut log = BufWriter::new(file);
    if resume.is_none() || log.get_ref().metadata().map(|m| m.len() == 0).unwrap_or(true) {
        writeln!(log, "step,loss").map_err(|e| Error::io(&log_path, e))?;
    }

    let mut run = TrainRun {
        losses: Vec::new(),
        checkpoints: Vec::new(),
        final_checkpoint: out.join(FINAL_CHECKPOINT),
    };
    while trainer.step < cfg.steps {
        let value = trainer.train_step()?;
        let step = trainer.step;
        writeln!(log, "{step},{value}").map_err(|e| Error::io(&log_path, e))?;
        run.losses.push((step, value));
        on_step(step, value);
        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            let path = out.join(format!("step_{step:06}.ckpt"));
            trainer.checkpoint().save(&path)?;
            run.checkpoints.push(path);
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    trainer.checkpoint().save(&run.final_checkpoint)?;
    Ok(run)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageReport {
    pub id: String,
    pub counts: ConfusionCounts,
    pub scores: Scores,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkippedImage {
    pub id: String,
    pub reason: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub threshold: f64,
    pub per_image: Vec<ImageReport>,
    #[serde(default)]
    pub skipped: Vec<SkippedImage>,
    /// Scores of the summed confusion counts (micro average).
    pub aggregate: Scores,
    pub counts: ConfusionCounts,
}

/// Road probabilities for one sample, eval-mode batch norm.
pub fn predict(model: &mut Model<f32>, sample: &Sample) -> Result<Vec<f32>> {
    let p = model.forward(&sample.image_tensor(), BnMode::Eval)?;
    Ok(p.data().to_vec())
}

/// Eval-mode scores of every sample. Samples whose size differs from the
/// model's input size are skipped and listed.
pub fn evaluate(model: &mut Model<f32>, samples: &[Sample], threshold: f64) -> Result<EvalReport> {
    if samples.is_empty() {
        return Err(Error::Usage("evaluation dataset is empty".into()));
    }
    let size = model.cfg.input_size;
    let mut per_image = Vec::new();
    let mut skipped = Vec::new();
    let mut total = ConfusionCounts::default();
    for s in samples {
        if s.height != size || s.width != size {
            skipped.push(SkippedImage {
                id: s.id.clone(),
                reason: format!("image is {}x{}, model expects {size}x{size}", s.height, s.width),
            });
            continue;
        }
        let p = predict(model, s)?;
        let counts = confusion(&p, &s.mask, threshold)?;
        total += counts;
        per_image.push(ImageReport {
            id: s.id.clone(),
            counts,
            scores: scores(&counts),
        });
    }
    if per_image.is_empty() {
        return Err(Error::Usage(format!(
            "no image matches the model input size {size} ({} skipped)",
            skipped.len()
        )));
    }
    Ok(EvalReport {
        threshold,
        per_image,
        skipped,
        aggregate: scores(&total),
        counts: total,
    })
}
