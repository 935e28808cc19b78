use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::thread;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{save_checkpoint, TrainConfig, TrainState};
use crate::data::{augment_random_resized_crop, CropConfig, DatasetSpec, ImageSample};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::objective::LossBreakdown;

pub const METRICS_HEADER: &str = "epoch,l_pixel,l_latent,l_cls,total,lr,lambda";

/// Mean losses over one epoch, with the schedule values of its last step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: LossBreakdown,
    pub lr: f64,
    pub lambda: f64,
}

#[derive(Debug)]
pub struct PretrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<EpochMetrics>,
    pub metrics_path: PathBuf,
    pub checkpoints: Vec<PathBuf>,
}

fn opt_field(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// CSV with one row per epoch; absent loss terms are empty fields.
pub fn write_metrics_csv(metrics: &[EpochMetrics], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for m in metrics {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            m.epoch,
            opt_field(m.loss.l_pixel),
            opt_field(m.loss.l_latent),
            opt_field(m.loss.l_cls),
            m.loss.total,
            m.lr,
            m.lambda
        )
        .expect("writing to a String");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Seeded per-epoch data stream: shuffled order, optional crops.
fn epoch_batches(
    samples: &[ImageSample],
    train: &TrainConfig,
    crop: &CropConfig,
    epoch: usize,
) -> Vec<Vec<ImageSample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    rng.set_stream(2 + epoch as u64);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(&mut rng);
    order
        .chunks(train.batch_size)
        .map(|idx| {
            idx.iter()
                .map(|&i| {
                    if train.augment {
                        augment_random_resized_crop(&samples[i], &mut rng, crop)
                    } else {
                        samples[i].clone()
                    }
                })
                .collect()
        })
        .collect()
}

/// Full pretraining run. A single producer thread prepares batches through a
/// bounded queue while this thread owns and mutates the training state, so a
/// fixed seed reproduces the metrics file exactly.
///
/// Writes `metrics.csv`, periodic `checkpoint_epoch{N}.bin` files and
/// `checkpoint_final.bin` into `out_dir`.
pub fn pretrain(
    model: &ModelConfig,
    train: &TrainConfig,
    data: &DatasetSpec,
    out_dir: impl AsRef<Path>,
) -> Result<PretrainOutcome> {
    let out_dir = out_dir.as_ref();
    model.validate()?;
    train.validate()?;
    data.validate(model.patch_size)?;
    if data.image_size != model.image_size {
        return Err(Error::config(
            "data",
            format!("{}px images for a {}px model", data.image_size, model.image_size),
        ));
    }
    let samples = data.load()?;
    if samples.is_empty() {
        return Err(Error::config("data", "dataset is empty"));
    }
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let steps_per_epoch = samples.len().div_ceil(train.batch_size);
    let mut state = TrainState::new(model.clone(), train.clone(), steps_per_epoch)?;
    let crop = CropConfig {
        out_size: model.image_size,
        ..train.crop.clone()
    };

    let mut metrics = Vec::with_capacity(train.epochs);
    let mut checkpoints = Vec::new();
    let metrics_path = out_dir.join("metrics.csv");

    thread::scope(|scope| -> Result<()> {
        let (tx, rx) = sync_channel::<(usize, Vec<ImageSample>)>(train.queue_depth);
        let samples = &samples;
        let crop = &crop;
        scope.spawn(move || {
            for epoch in 0..train.epochs {
                for batch in epoch_batches(samples, train, crop, epoch) {
                    if tx.send((epoch, batch)).is_err() {
                        return;
                    }
                }
            }
        });

        let mut epoch_losses = Vec::with_capacity(steps_per_epoch);
        for (epoch, batch) in rx.iter() {
            let report = state.train_step(&batch)?;
            epoch_losses.push(report.loss);
            if epoch_losses.len() == steps_per_epoch {
                metrics.push(EpochMetrics {
                    epoch: epoch + 1,
                    loss: LossBreakdown::mean(&epoch_losses).expect("non-empty epoch"),
                    lr: report.lr,
                    lambda: report.lambda,
                });
                epoch_losses.clear();
                write_metrics_csv(&metrics, &metrics_path)?;
                let done = epoch + 1;
                if train.checkpoint_every > 0 && done % train.checkpoint_every == 0 && done < train.epochs {
                    let p = out_dir.join(format!("checkpoint_epoch{done}.bin"));
                    save_checkpoint(&state, &p)?;
                    checkpoints.push(p);
                }
            }
        }
        Ok(())
    })?;

    let final_path = out_dir.join("checkpoint_final.bin");
    save_checkpoint(&state, &final_path)?;
    checkpoints.push(final_path);
    Ok(PretrainOutcome {
        state,
        metrics,
        metrics_path,
        checkpoints,
    })
}
