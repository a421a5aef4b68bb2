use ndarray::{Array2, Array3, Array4, ArrayView3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::{ForwardMode, Model};
use super::optim::{adam_step, clip_grad_norm, cosine_lr, AdamHyper, AdamState};
use super::params::Weights;
use super::EngineError;

/// Samples with inputs `[sample, node, step, feature]` (step 0 is the most
/// recent), targets `[sample, node, output]` and an optional loss mask
/// `[sample, node]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub inputs: Array4<f64>,
    pub targets: Array3<f64>,
    pub mask: Option<Array2<bool>>,
}

/// A borrowed or gathered subset of a dataset.
pub type Batch = Dataset;

impl Dataset {
    pub fn new(
        inputs: Array4<f64>,
        targets: Array3<f64>,
        mask: Option<Array2<bool>>,
    ) -> Result<Self, EngineError> {
        let (s, n, _, _) = inputs.dim();
        let (ts, tn, _) = targets.dim();
        if (ts, tn) != (s, n) {
            return Err(EngineError::Shape(format!(
                "inputs hold {s}x{n} samples/nodes, targets {ts}x{tn}"
            )));
        }
        if let Some(m) = &mask {
            if m.dim() != (s, n) {
                return Err(EngineError::Shape("mask shape differs from samples x nodes".into()));
            }
            if m.outer_iter().any(|row| !row.iter().any(|&b| b)) {
                return Err(EngineError::Shape("every sample's mask must select a node".into()));
            }
        }
        if inputs.iter().chain(targets.iter()).any(|v| !v.is_finite()) {
            return Err(EngineError::Shape("dataset contains non-finite values".into()));
        }
        Ok(Self {
            inputs,
            targets,
            mask,
        })
    }

    pub fn len(&self) -> usize {
        self.inputs.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, indices: &[usize]) -> Batch {
        Dataset {
            inputs: self.inputs.select(Axis(0), indices),
            targets: self.targets.select(Axis(0), indices),
            mask: self.mask.as_ref().map(|m| m.select(Axis(0), indices)),
        }
    }
}

/// Masked mean squared error and its gradient with respect to the predictions.
pub fn masked_mse(
    predictions: ArrayView3<f64>,
    targets: ArrayView3<f64>,
    mask: Option<&Array2<bool>>,
) -> (f64, Array3<f64>) {
    let (s, n, dy) = predictions.dim();
    let selected = |b: usize, v: usize| mask.map_or(true, |m| m[[b, v]]);
    let count = (0..s)
        .flat_map(|b| (0..n).map(move |v| (b, v)))
        .filter(|&(b, v)| selected(b, v))
        .count()
        * dy;
    let mut grad = Array3::zeros((s, n, dy));
    if count == 0 {
        return (0.0, grad);
    }
    let mut sum = 0.0;
    for ((b, v, k), &p) in predictions.indexed_iter() {
        if selected(b, v) {
            let e = p - targets[[b, v, k]];
            sum += e * e;
            grad[[b, v, k]] = 2.0 * e / count as f64;
        }
    }
    (sum / count as f64, grad)
}

/// Masked MSE of the model over a whole dataset, evaluated in chunks.
pub fn evaluate_mse(model: &Model, data: &Dataset, chunk: usize) -> Result<f64, EngineError> {
    let (mut sum, mut count) = (0.0, 0usize);
    let chunk = chunk.max(1);
    let indices: Vec<usize> = (0..data.len()).collect();
    for part in indices.chunks(chunk) {
        let batch = data.select(part);
        let pred = model.predict(batch.inputs.view())?;
        let (loss, _) = masked_mse(pred.view(), batch.targets.view(), batch.mask.as_ref());
        let selected = batch
            .mask
            .as_ref()
            .map_or(batch.targets.dim().0 * batch.targets.dim().1, |m| {
                m.iter().filter(|&&b| b).count()
            })
            * batch.targets.dim().2;
        sum += loss * selected as f64;
        count += selected;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSchedule {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub lr_min: f64,
    pub clip_norm: f64,
    pub patience: usize,
    /// Cap on optimizer steps per epoch, drawing the first shuffled batches.
    pub max_batches: Option<usize>,
    /// Stop as soon as the validation loss drops below this value.
    pub stop_below: Option<f64>,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            epochs: 150,
            batch_size: 32,
            lr: 1e-3,
            lr_min: 1e-6,
            clip_norm: 5.0,
            patience: 30,
            max_batches: None,
            stop_below: None,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_loss: Option<f64>,
}

impl TrainHistory {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,lr\n");
        for r in &self.epochs {
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e}\n",
                r.epoch, r.train_loss, r.val_loss, r.lr
            ));
        }
        out
    }
}

/// Mini-batch Adam on the masked MSE with cosine annealing, gradient
/// clipping and early stopping; the best validation weights are restored.
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    val_set: &Dataset,
    schedule: &TrainSchedule,
) -> Result<TrainHistory, EngineError> {
    if schedule.batch_size == 0 {
        return Err(EngineError::Config("batch size must be positive".into()));
    }
    let mut history = TrainHistory::default();
    if schedule.epochs == 0 || train_set.is_empty() {
        return Ok(history);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(schedule.seed);
    let mut state = AdamState::new(&model.params().weights);
    let mut best: Option<(f64, Weights)> = None;
    let mut since_best = 0;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let eval_chunk = 256;
    for epoch in 0..schedule.epochs {
        let lr = cosine_lr(schedule.lr, schedule.lr_min, epoch, schedule.epochs);
        let hyper = AdamHyper {
            lr,
            ..Default::default()
        };
        order.shuffle(&mut rng);
        let mut batches: Vec<&[usize]> = order.chunks(schedule.batch_size).collect();
        if let Some(limit) = schedule.max_batches {
            batches.truncate(limit);
        }
        let (mut loss_sum, mut steps) = (0.0, 0usize);
        for idx in batches {
            let batch = train_set.select(idx);
            let pass = model.forward(batch.inputs.view(), ForwardMode::Readout)?;
            let (loss, grad) =
                masked_mse(pass.predictions().view(), batch.targets.view(), batch.mask.as_ref());
            if !loss.is_finite() {
                return Err(EngineError::Diverged { epoch });
            }
            let mut grads = model.backward(&pass, grad.view())?;
            clip_grad_norm(&mut grads, schedule.clip_norm);
            adam_step(model.weights_mut(), &grads, &mut state, &hyper)?;
            loss_sum += loss;
            steps += 1;
        }
        let train_loss = loss_sum / steps.max(1) as f64;
        let val_loss = if val_set.is_empty() {
            train_loss
        } else {
            evaluate_mse(model, val_set, eval_chunk)?
        };
        if !val_loss.is_finite() || !model.params().weights.is_finite() {
            return Err(EngineError::Diverged { epoch });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        if best.as_ref().map_or(true, |(b, _)| val_loss < *b) {
            best = Some((val_loss, model.params().weights.clone()));
            history.best_epoch = Some(epoch);
            history.best_val_loss = Some(val_loss);
            since_best = 0;
        } else {
            since_best += 1;
        }
        if schedule.stop_below.is_some_and(|t| val_loss < t) || since_best >= schedule.patience {
            break;
        }
    }
    if let Some((_, weights)) = best {
        model.set_weights(weights)?;
    }
    Ok(history)
}
