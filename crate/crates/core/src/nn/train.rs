//! Generic minibatch trainer for frame-level tasks: SGD with momentum and a
//! per-epoch geometric learning-rate decay, deterministic under a fixed seed.

use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ForwardOpts, LossTerm, Network, NnError};
use crate::corpus::mix_seed;

#[derive(Debug, Clone)]
pub struct TrainingConfig {
    pub learning_rate: f64,
    /// Multiplicative decay applied to the learning rate after each epoch.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub momentum: f64,
    pub dropout_active: bool,
    pub seed: u64,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            learning_rate: 0.05,
            lr_decay: 0.85,
            batch_size: 64,
            epochs: 8,
            momentum: 0.9,
            dropout_active: true,
            seed: 0,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<(), NnError> {
        if self.learning_rate < 0.0 {
            return Err(NnError::InvalidSpec("learning_rate must be >= 0".into()));
        }
        if self.batch_size == 0 {
            return Err(NnError::InvalidSpec("batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// Frame-level dataset: one row per sample, per-head integer labels and an
/// optional per-row regression target on the trunk output.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub features: Array2<f64>,
    pub head_labels: Vec<Vec<usize>>,
    pub trunk_targets: Option<Array2<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Loss composition for [`train`]: weights per head CE term plus an optional
/// trunk MSE weight.
#[derive(Debug, Clone)]
pub struct LossSpec {
    pub head_weights: Vec<f64>,
    pub trunk_mse_weight: f64,
}

impl LossSpec {
    pub fn heads_only(weights: Vec<f64>) -> Self {
        LossSpec { head_weights: weights, trunk_mse_weight: 0.0 }
    }
}

/// Train `model` on `dataset`; returns the per-epoch mean training loss.
pub fn train(
    model: &mut Network,
    dataset: &Dataset,
    loss: &LossSpec,
    cfg: &TrainingConfig,
) -> Result<Vec<f64>, NnError> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(NnError::EmptyDataset);
    }
    for (h, labels) in dataset.head_labels.iter().enumerate() {
        if !labels.is_empty() && labels.len() != dataset.len() {
            return Err(NnError::DimMismatch {
                expected: dataset.len(),
                got: labels.len(),
                context: format!("labels for head {h}"),
            });
        }
    }

    let n = dataset.len();
    let mut velocity = model.velocity();
    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut lr = cfg.learning_rate;

    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 0x7241_19, epoch as u64));
        for i in (1..n).rev() {
            let j = rng.gen_range(0..=i);
            order.swap(i, j);
        }

        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        let mut start = 0usize;
        let mut batch_no = 0usize;
        while start < n {
            let mut end = (start + cfg.batch_size).min(n);
            // batch-norm needs more than one row; fold a trailing singleton in
            if n - end == 1 {
                end = n;
            }
            let idx = &order[start..end];
            let batch = dataset.features.select(Axis(0), idx);
            let (res, tape) = model.forward_train(
                batch.view(),
                &ForwardOpts { dropout_active: cfg.dropout_active, ..Default::default() },
            )?;

            let labels_buf: Vec<Vec<usize>> = dataset
                .head_labels
                .iter()
                .map(|l| {
                    if l.is_empty() {
                        Vec::new()
                    } else {
                        idx.iter().map(|&i| l[i]).collect()
                    }
                })
                .collect();
            let target_buf = dataset
                .trunk_targets
                .as_ref()
                .map(|t| t.select(Axis(0), idx));

            let mut terms: Vec<LossTerm> = Vec::new();
            for (h, w) in loss.head_weights.iter().enumerate() {
                if *w != 0.0 && !labels_buf[h].is_empty() {
                    terms.push(LossTerm::HeadCe { head: h, labels: &labels_buf[h], weight: *w });
                }
            }
            if loss.trunk_mse_weight != 0.0 {
                if let Some(t) = &target_buf {
                    terms.push(LossTerm::TrunkMse {
                        target: t.view(),
                        weight: loss.trunk_mse_weight,
                    });
                }
            }

            let (breakdown, d_trunk, head_dz) = model.losses(&res, &tape, &terms)?;
            if !breakdown.total.is_finite() {
                return Err(NnError::NanLoss { epoch, batch: batch_no });
            }
            let grads = model.backward(&tape, d_trunk, head_dz);
            model.apply_gradients(&grads, &mut velocity, lr, cfg.momentum);

            epoch_loss += breakdown.total * idx.len() as f64;
            seen += idx.len();
            start = end;
            batch_no += 1;
        }
        curve.push(epoch_loss / seen as f64);
        lr *= cfg.lr_decay;
    }
    Ok(curve)
}
