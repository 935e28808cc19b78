//! Pretraining: per-sample forward/backward, AdamW, EMA target updates,
//! schedules, checkpoints and the epoch driver.

pub mod checkpoint;
mod config;
pub mod optim;
mod pretrain;
pub mod schedule;

pub use checkpoint::{load_checkpoint, load_checkpoint_for, save_checkpoint, CHECKPOINT_VERSION};
pub use config::TrainConfig;
pub use optim::{ema_update, AdamHyper, AdamW};
pub use pretrain::{pretrain, write_metrics_csv, EpochMetrics, PretrainOutcome, METRICS_HEADER};
pub use schedule::{lambda_schedule, lr_schedule};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::data::ImageSample;
use crate::error::{Error, Result};
use crate::model::{
    drop_first_row, init_params, target_encode, Encoder, ModelConfig, NamedTensors, Params, PositionalTables,
};
use crate::objective::{
    loss_cls, loss_cls_grad, loss_latent, loss_latent_grad, loss_pixel, loss_pixel_grad, total_loss_with,
    LossBreakdown, LossParts, ObjectiveTerms,
};
use crate::patching::{patchify, sample_mask, MaskPlan};
use crate::tensor::Matrix;

const ADAM_EPS: f64 = 1e-8;
/// Samples per gradient partial sum. Fixed so results do not depend on the
/// number of worker threads.
const GRAD_CHUNK: usize = 4;

/// Loss and gradient for one image under one mask plan.
///
/// `target` only produces latent targets; no gradient flows into it, and the
/// returned gradient covers the trainable `params` exclusively.
pub fn loss_and_grad(
    params: &Params,
    target: &Encoder,
    config: &ModelConfig,
    tables: &PositionalTables,
    patches: &Matrix,
    plan: &MaskPlan,
) -> Result<(LossBreakdown, Params)> {
    let terms = ObjectiveTerms::for_mode_with(config.mode, config.latent_only_cls);
    let visible = patches.select_rows(plan.visible());
    let (z, enc_cache) = params.encoder.forward(&visible, plan.visible(), &tables.encoder)?;
    let mut grads = params.zeros_like();
    let mut dz = Matrix::zeros(z.rows(), z.cols());
    let mut parts = LossParts::default();

    if let (Some(dec), true) = (&params.pixel_decoder, terms.pixel) {
        let (out, cache) = dec.forward(&z, plan, &tables.decoder)?;
        let xhat = drop_first_row(&out);
        parts.l_pixel = Some(loss_pixel(&xhat, patches, plan)?);
        let g = loss_pixel_grad(&xhat, patches, plan)?;
        let mut dout = Matrix::zeros(out.rows(), out.cols());
        dout.data_mut()[out.cols()..].copy_from_slice(g.data());
        let gdec = grads.pixel_decoder.as_mut().expect("gradient mirrors params");
        dz.add_assign(&dec.backward(&cache, plan, &dout, gdec));
    }

    if let (Some(dec), true) = (&params.latent_decoder, terms.latent || terms.cls) {
        let targets = target_encode(patches, target, &tables.encoder)?.tokens;
        let (that, cache) = dec.forward(&z, plan, &tables.decoder)?;
        let mut dout = Matrix::zeros(that.rows(), that.cols());
        if terms.latent {
            parts.l_latent = Some(loss_latent(&that, &targets, plan)?);
            dout.add_assign(&loss_latent_grad(&that, &targets, plan)?);
        }
        if terms.cls {
            parts.l_cls = Some(loss_cls(that.row(0), targets.row(0))?);
            for (o, g) in dout.row_mut(0).iter_mut().zip(loss_cls_grad(that.row(0), targets.row(0))) {
                *o += g;
            }
        }
        let gdec = grads.latent_decoder.as_mut().expect("gradient mirrors params");
        dz.add_assign(&dec.backward(&cache, plan, &dout, gdec));
    }

    params.encoder.backward(&enc_cache, &dz, &mut grads.encoder);
    let loss = total_loss_with(parts, terms, config.mode)?;
    Ok((loss, grads))
}

/// Loss only, for finite-difference checks and evaluation.
pub fn loss_only(
    params: &Params,
    target: &Encoder,
    config: &ModelConfig,
    tables: &PositionalTables,
    patches: &Matrix,
    plan: &MaskPlan,
) -> Result<LossBreakdown> {
    loss_and_grad(params, target, config, tables, patches, plan).map(|(l, _)| l)
}

/// Everything needed to continue training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub context: Params,
    pub target: Encoder,
    pub optimizer: AdamW,
    pub step: u64,
    pub total_steps: u64,
    pub warmup_steps: u64,
    pub rng: ChaCha8Rng,
    pub history: Vec<LossBreakdown>,
    pub tables: PositionalTables,
}

/// What one optimizer step did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub loss: LossBreakdown,
    pub lr: f64,
    pub lambda: f64,
}

impl TrainState {
    /// Fresh state; the target encoder starts as an exact copy of the context encoder.
    pub fn new(model: ModelConfig, train: TrainConfig, steps_per_epoch: usize) -> Result<Self> {
        model.validate()?;
        train.validate()?;
        let mut init_rng = ChaCha8Rng::seed_from_u64(train.seed);
        let context = init_params(&model, &mut init_rng)?;
        let target = context.encoder.clone();
        let optimizer = AdamW::new(&context);
        let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
        rng.set_stream(1);
        let spe = steps_per_epoch.max(1) as u64;
        Ok(Self {
            tables: PositionalTables::new(&model)?,
            total_steps: spe * train.epochs as u64,
            warmup_steps: spe * train.warmup_epochs as u64,
            model,
            train,
            context,
            target,
            optimizer,
            step: 0,
            rng,
            history: Vec::new(),
        })
    }

    pub fn lr_at(&self, step: u64) -> f64 {
        lr_schedule(
            step,
            self.total_steps,
            self.warmup_steps,
            self.train.base_lr,
            self.train.batch_size,
        )
    }

    pub fn lambda_at(&self, step: u64) -> f64 {
        lambda_schedule(step, self.total_steps, self.train.lambda_start, self.train.lambda_end)
    }

    /// One optimizer step over `batch`: a fresh mask per image, batch-mean
    /// gradients, AdamW on the trainable parameters, then the EMA update of
    /// the target encoder.
    pub fn train_step(&mut self, batch: &[ImageSample]) -> Result<StepReport> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let n = self.model.n_patches();
        let mut work = Vec::with_capacity(batch.len());
        for sample in batch {
            let seq = patchify(&sample.image, self.model.patch_size)?;
            if seq.n_patches() != n || seq.patch_dim() != self.model.patch_dim() {
                return Err(Error::ShapeMismatch(format!(
                    "{}px sample for a {}px model",
                    sample.size(),
                    self.model.image_size
                )));
            }
            let plan = sample_mask(n, self.model.mask_ratio, &mut self.rng)?;
            work.push((seq.patches, plan));
        }

        let (context, target, model, tables) = (&self.context, &self.target, &self.model, &self.tables);
        let partials: Vec<Result<(Params, Vec<LossBreakdown>)>> = work
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut sum: Option<Params> = None;
                let mut losses = Vec::with_capacity(chunk.len());
                for (patches, plan) in chunk {
                    let (loss, g) = loss_and_grad(context, target, model, tables, patches, plan)?;
                    losses.push(loss);
                    match &mut sum {
                        None => sum = Some(g),
                        Some(s) => add_into(s, &g),
                    }
                }
                Ok((sum.expect("chunks are non-empty"), losses))
            })
            .collect();

        let mut grads: Option<Params> = None;
        let mut losses = Vec::with_capacity(batch.len());
        for part in partials {
            let (g, l) = part?;
            losses.extend(l);
            match &mut grads {
                None => grads = Some(g),
                Some(s) => add_into(s, &g),
            }
        }
        let mut grads = grads.expect("non-empty batch");
        let inv = 1.0 / batch.len() as f64;
        for (_, t) in grads.tensors_mut() {
            t.scale(inv);
        }
        let loss = LossBreakdown::mean(&losses).expect("non-empty batch");
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                detail: format!("{loss:?}"),
            });
        }

        let lr = self.lr_at(self.step);
        let lambda = self.lambda_at(self.step);
        let hyper = AdamHyper {
            lr,
            beta1: self.train.beta1,
            beta2: self.train.beta2,
            eps: ADAM_EPS,
            weight_decay: self.train.weight_decay,
        };
        self.optimizer.step(&mut self.context, &grads, self.step + 1, hyper);
        ema_update(&mut self.target, &self.context.encoder, lambda)?;
        self.step += 1;
        self.history.push(loss);
        Ok(StepReport { loss, lr, lambda })
    }
}

fn add_into(acc: &mut Params, g: &Params) {
    for ((_, a), (_, b)) in acc.tensors_mut().into_iter().zip(g.tensors()) {
        a.add_assign(b);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_synthetic_shapes;
    use crate::model::Mode;

    fn tiny(mode: Mode) -> ModelConfig {
        ModelConfig {
            enc_depth: 1,
            enc_dim: 16,
            enc_heads: 2,
            dec_depth: 1,
            dec_dim: 8,
            dec_heads: 2,
            patch_size: 8,
            image_size: 16,
            mode,
            ..ModelConfig::desk()
        }
    }

    fn train_cfg() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            warmup_epochs: 1,
            batch_size: 3,
            ..TrainConfig::desk()
        }
    }

    #[test]
    fn pixel_only_breakdown_has_no_latent_terms() {
        let mut st = TrainState::new(tiny(Mode::PixelOnly), train_cfg(), 2).unwrap();
        let batch = generate_synthetic_shapes(0, 3, 16).unwrap();
        for _ in 0..3 {
            let r = st.train_step(&batch).unwrap();
            assert!(r.loss.l_pixel.is_some());
            assert_eq!((r.loss.l_latent, r.loss.l_cls), (None, None));
        }
        assert_eq!(st.step, 3);
    }

    #[test]
    fn target_moves_only_by_ema() {
        let mut st = TrainState::new(tiny(Mode::Pilamim), train_cfg(), 2).unwrap();
        let batch = generate_synthetic_shapes(1, 3, 16).unwrap();
        st.train_step(&batch).unwrap();
        let before = st.target.clone();
        let lambda = st.lambda_at(st.step);
        st.train_step(&batch).unwrap();
        let mut expected = before;
        ema_update(&mut expected, &st.context.encoder, lambda).unwrap();
        assert_eq!(st.target, expected);
    }

    #[test]
    fn empty_batch_is_rejected() {
        let mut st = TrainState::new(tiny(Mode::Pilamim), train_cfg(), 2).unwrap();
        assert!(st.train_step(&[]).is_err());
    }

    #[test]
    fn wrong_image_size_is_rejected() {
        let mut st = TrainState::new(tiny(Mode::Pilamim), train_cfg(), 2).unwrap();
        let batch = generate_synthetic_shapes(1, 1, 32).unwrap();
        assert!(matches!(st.train_step(&batch), Err(Error::ShapeMismatch(_))));
    }
}
