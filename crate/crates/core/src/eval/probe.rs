use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::trunc_normal;
use crate::tensor::Matrix;
use crate::trainer::lr_schedule;

const BN_EPS: f64 = 1e-6;
const BN_MOMENTUM: f64 = 0.1;
const HEAD_INIT_STD: f64 = 0.01;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeOptimizer {
    /// SGD with momentum.
    #[default]
    Sgd,
    /// SGD with momentum and layer-wise trust ratios on the head weight.
    Lars,
}

/// Linear-probe recipe.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Scaled by `batch_size / 256`.
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub optimizer: ProbeOptimizer,
    pub trust_coefficient: f64,
    /// Fraction of samples held out for the reported accuracy.
    pub holdout_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl ProbeConfig {
    pub fn desk() -> Self {
        Self {
            epochs: 30,
            batch_size: 256,
            base_lr: 0.1,
            warmup_epochs: 3,
            momentum: 0.9,
            weight_decay: 0.0,
            optimizer: ProbeOptimizer::Sgd,
            trust_coefficient: 0.001,
            holdout_fraction: 0.2,
            seed: 0,
        }
    }

    /// ImageNet-scale recipe (LARS, base rate 3, 100 epochs).
    pub fn paper() -> Self {
        Self {
            epochs: 100,
            batch_size: 16384,
            base_lr: 3.0,
            warmup_epochs: 10,
            optimizer: ProbeOptimizer::Lars,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let err = |f: &str, m: String| Err(Error::config(format!("probe.{f}"), m));
        if self.epochs == 0 {
            return err("epochs", "must be positive".into());
        }
        if self.batch_size == 0 {
            return err("batch_size", "must be positive".into());
        }
        if self.warmup_epochs >= self.epochs {
            return err(
                "warmup_epochs",
                format!("{} must be below epochs {}", self.warmup_epochs, self.epochs),
            );
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return err("base_lr", format!("must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return err("momentum", format!("must lie in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay >= 0.0) {
            return err("weight_decay", format!("must be non-negative, got {}", self.weight_decay));
        }
        if !(self.trust_coefficient > 0.0) {
            return err("trust_coefficient", format!("must be positive, got {}", self.trust_coefficient));
        }
        if !(self.holdout_fraction > 0.0 && self.holdout_fraction < 1.0) {
            return err(
                "holdout_fraction",
                format!("must lie in (0, 1), got {}", self.holdout_fraction),
            );
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeResult {
    pub task: String,
    /// Best held-out accuracy over epochs.
    pub accuracy: f64,
    /// Training-split accuracy at the best epoch.
    pub train_accuracy: f64,
    pub epochs_run: usize,
    /// 1-based.
    pub best_epoch: usize,
}

/// Batch norm with a learned affine, followed by a linear softmax head.
struct Head {
    gamma: Vec<f64>,
    beta: Vec<f64>,
    running_mean: Vec<f64>,
    running_var: Vec<f64>,
    weight: Matrix,
    bias: Matrix,
}

struct Grads {
    gamma: Vec<f64>,
    beta: Vec<f64>,
    weight: Matrix,
    bias: Matrix,
}

impl Head {
    fn new(d: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            gamma: vec![1.0; d],
            beta: vec![0.0; d],
            running_mean: vec![0.0; d],
            running_var: vec![1.0; d],
            weight: trunc_normal(rng, d, k, HEAD_INIT_STD),
            bias: Matrix::zeros(1, k),
        }
    }

    fn normalize(&self, x: &Matrix, mean: &[f64], var: &[f64]) -> Matrix {
        let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        Matrix::from_fn(x.rows(), x.cols(), |r, c| (x.get(r, c) - mean[c]) * inv[c])
    }

    fn affine(&self, xhat: &Matrix) -> Matrix {
        Matrix::from_fn(xhat.rows(), xhat.cols(), |r, c| {
            xhat.get(r, c) * self.gamma[c] + self.beta[c]
        })
    }

    fn logits(&self, z: &Matrix) -> Matrix {
        let mut out = z.matmul(&self.weight);
        out.add_row_broadcast(&self.bias);
        out
    }

    fn predict(&self, x: &Matrix) -> Vec<usize> {
        let xhat = self.normalize(x, &self.running_mean, &self.running_var);
        let logits = self.logits(&self.affine(&xhat));
        (0..logits.rows()).map(|r| argmax(logits.row(r))).collect()
    }

    /// Training-mode forward/backward on one batch; updates running stats.
    fn grads(&mut self, x: &Matrix, y: &[usize]) -> Grads {
        let (b, d) = x.shape();
        let bf = b as f64;
        let mean: Vec<f64> = x.col_sums().data().iter().map(|s| s / bf).collect();
        let mut var = vec![0.0; d];
        for r in 0..b {
            for (c, v) in x.row(r).iter().enumerate() {
                var[c] += (v - mean[c]).powi(2);
            }
        }
        var.iter_mut().for_each(|v| *v /= bf);
        let unbiased = if b > 1 { bf / (bf - 1.0) } else { 1.0 };
        for c in 0..d {
            self.running_mean[c] = (1.0 - BN_MOMENTUM) * self.running_mean[c] + BN_MOMENTUM * mean[c];
            self.running_var[c] = (1.0 - BN_MOMENTUM) * self.running_var[c] + BN_MOMENTUM * var[c] * unbiased;
        }

        let xhat = self.normalize(x, &mean, &var);
        let z = self.affine(&xhat);
        let mut dlogits = self.logits(&z);
        for (r, &label) in y.iter().enumerate() {
            let row = dlogits.row_mut(r);
            softmax(row);
            row[label] -= 1.0;
            row.iter_mut().for_each(|g| *g /= bf);
        }
        let dz = dlogits.matmul_t(&self.weight);
        let mut gamma = vec![0.0; d];
        for r in 0..b {
            for c in 0..d {
                gamma[c] += dz.get(r, c) * xhat.get(r, c);
            }
        }
        Grads {
            gamma,
            beta: dz.col_sums().into_vec(),
            weight: z.t_matmul(&dlogits),
            bias: dlogits.col_sums(),
        }
    }
}

fn softmax(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

fn accuracy(pred: &[usize], y: &[usize]) -> f64 {
    let hits = pred.iter().zip(y).filter(|(p, t)| p == t).count();
    hits as f64 / y.len() as f64
}

/// Momentum buffer update for one parameter slice.
fn sgd_update(
    w: &mut [f64],
    g: &[f64],
    buf: &mut [f64],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
    lars_trust: Option<f64>,
) {
    let mut local_lr = lr;
    if let Some(trust) = lars_trust {
        let wn = w.iter().map(|v| v * v).sum::<f64>().sqrt();
        let gn = g.iter().map(|v| v * v).sum::<f64>().sqrt();
        if wn > 0.0 && gn > 0.0 {
            local_lr *= trust * wn / (gn + weight_decay * wn);
        }
    }
    for ((wi, gi), bi) in w.iter_mut().zip(g).zip(buf.iter_mut()) {
        *bi = momentum * *bi + gi + weight_decay * *wi;
        *wi -= local_lr * *bi;
    }
}

/// Trains a fresh batch-norm + linear head on frozen `features` and reports
/// the best accuracy on a held-out split.
pub fn linear_probe(features: &Matrix, labels: &[usize], task: &str, cfg: &ProbeConfig) -> Result<ProbeResult> {
    cfg.validate()?;
    let (n, d) = features.shape();
    if labels.len() != n {
        return Err(Error::ShapeMismatch(format!("{n} feature rows but {} labels", labels.len())));
    }
    if n < 2 || d == 0 {
        return Err(Error::ShapeMismatch(format!("need at least 2×1 features, got {n}×{d}")));
    }
    if !features.is_finite() {
        return Err(Error::Degenerate("non-finite features".into()));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let n_hold = ((n as f64 * cfg.holdout_fraction).round() as usize).clamp(1, n - 1);
    let (hold_idx, train_idx) = order.split_at(n_hold);
    let mut train_idx = train_idx.to_vec();

    let mut seen = train_idx.iter().map(|&i| labels[i]).collect::<Vec<_>>();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() < 2 {
        return Err(Error::SingleClassDegenerate);
    }
    let k = labels.iter().copied().max().unwrap_or(0) + 1;

    let x_hold = features.select_rows(hold_idx);
    let y_hold: Vec<usize> = hold_idx.iter().map(|&i| labels[i]).collect();
    let x_train_all = features.select_rows(&train_idx);
    let y_train_all: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();

    let mut head = Head::new(d, k, &mut rng);
    let mut mom = Grads {
        gamma: vec![0.0; d],
        beta: vec![0.0; d],
        weight: Matrix::zeros(d, k),
        bias: Matrix::zeros(1, k),
    };
    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size) as u64;
    let total = steps_per_epoch * cfg.epochs as u64;
    let warmup = steps_per_epoch * cfg.warmup_epochs as u64;
    let lars = (cfg.optimizer == ProbeOptimizer::Lars).then_some(cfg.trust_coefficient);

    let mut step = 0u64;
    let mut best = (f64::NEG_INFINITY, 0.0, 0usize);
    for epoch in 1..=cfg.epochs {
        train_idx.shuffle(&mut rng);
        for idx in train_idx.chunks(cfg.batch_size) {
            let x = features.select_rows(idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let g = head.grads(&x, &y);
            let lr = lr_schedule(step, total, warmup, cfg.base_lr, cfg.batch_size);
            // Trust ratios and decay apply to the weight matrix only.
            sgd_update(
                head.weight.data_mut(),
                g.weight.data(),
                mom.weight.data_mut(),
                lr,
                cfg.momentum,
                cfg.weight_decay,
                lars,
            );
            sgd_update(head.bias.data_mut(), g.bias.data(), mom.bias.data_mut(), lr, cfg.momentum, 0.0, None);
            sgd_update(&mut head.gamma, &g.gamma, &mut mom.gamma, lr, cfg.momentum, 0.0, None);
            sgd_update(&mut head.beta, &g.beta, &mut mom.beta, lr, cfg.momentum, 0.0, None);
            step += 1;
        }
        let acc = accuracy(&head.predict(&x_hold), &y_hold);
        if acc > best.0 {
            let train_acc = accuracy(&head.predict(&x_train_all), &y_train_all);
            best = (acc, train_acc, epoch);
        }
    }
    Ok(ProbeResult {
        task: task.to_string(),
        accuracy: best.0,
        train_accuracy: best.1,
        epochs_run: cfg.epochs,
        best_epoch: best.2,
    })
}
