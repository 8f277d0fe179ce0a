//! MSE objective, RMSprop with momentum and weight decay, the fit loop with
//! early stopping and learning-rate decay, and the t_past grid search.

use crate::error::{Error, Result};
use crate::models::{build_model, Forecaster, ModelConfig, ModelKind};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::time::Instant;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub momentum: f64,
    pub lr: f64,
    pub weight_decay: f64,
    pub rmsprop_alpha: f64,
    pub epsilon: f64,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    pub lr_decay_factor: f64,
    pub lr_decay_patience: usize,
    /// Fold the L2 term into the gradient before the adaptive denominator
    /// instead of applying it decoupled.
    pub coupled_l2: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 256,
            momentum: 0.9,
            lr: 1e-3,
            weight_decay: 1e-3,
            rmsprop_alpha: 0.99,
            epsilon: 1e-8,
            max_epochs: 200,
            early_stop_patience: 10,
            lr_decay_factor: 0.5,
            lr_decay_patience: 5,
            coupled_l2: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |v: f64| v > 0.0 && v <= 1.0;
        if !in_unit(self.lr) || !in_unit(self.lr_decay_factor) || !in_unit(self.rmsprop_alpha) {
            return Err(Error::Config(
                "lr, lr_decay_factor and rmsprop_alpha must lie in (0, 1]".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 || self.weight_decay > 1.0 {
            return Err(Error::Config("weight_decay must lie in [0, 1]".into()));
        }
        if self.epsilon <= 0.0 {
            return Err(Error::Config("epsilon must be positive".into()));
        }
        if self.batch_size == 0
            || self.max_epochs == 0
            || self.early_stop_patience == 0
            || self.lr_decay_patience == 0
        {
            return Err(Error::Config(
                "batch size, epoch budget and patiences must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Per-epoch record kept by the fit loop.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub wall_ms: f64,
}

/// Fit trajectory: one entry per completed epoch.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl History {
    pub fn best_val(&self) -> Option<f64> {
        self.epochs
            .iter()
            .find(|e| e.epoch == self.best_epoch)
            .map(|e| e.val_loss)
    }
}

/// Writes the per-epoch history as CSV.
pub fn write_history_csv(history: &History, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["epoch", "train_mse", "val_mse", "lr", "wall_ms"])
        .map_err(|e| Error::Data(e.to_string()))?;
    for e in &history.epochs {
        w.write_record([
            e.epoch.to_string(),
            e.train_loss.to_string(),
            e.val_loss.to_string(),
            e.lr.to_string(),
            e.wall_ms.to_string(),
        ])
        .map_err(|e| Error::Data(e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

/// A supervised window set: inputs `[N,T,S]` against targets `[N,T',S]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    x: Tensor,
    y: Tensor,
}

impl Dataset {
    pub fn new(x: Tensor, y: Tensor) -> Result<Dataset> {
        if x.shape().len() != 3 || y.shape().len() != 3 {
            return Err(Error::Data(format!(
                "expected [N,T,S] windows, got {:?} and {:?}",
                x.shape(),
                y.shape()
            )));
        }
        if x.shape()[0] != y.shape()[0] || x.shape()[2] != y.shape()[2] {
            return Err(Error::Data(format!(
                "input and target windows disagree: {:?} vs {:?}",
                x.shape(),
                y.shape()
            )));
        }
        Ok(Dataset { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn x(&self) -> &Tensor {
        &self.x
    }

    pub fn y(&self) -> &Tensor {
        &self.y
    }

    /// Gathers the given sample indices into contiguous batch tensors.
    pub fn gather(&self, idx: &[usize]) -> (Tensor, Tensor) {
        let (t, s) = (self.x.shape()[1], self.x.shape()[2]);
        let tp = self.y.shape()[1];
        let mut bx = Vec::with_capacity(idx.len() * t * s);
        let mut by = Vec::with_capacity(idx.len() * tp * s);
        for &i in idx {
            bx.extend_from_slice(&self.x.data()[i * t * s..(i + 1) * t * s]);
            by.extend_from_slice(&self.y.data()[i * tp * s..(i + 1) * tp * s]);
        }
        (
            Tensor::from_vec(&[idx.len(), t, s], bx).unwrap(),
            Tensor::from_vec(&[idx.len(), tp, s], by).unwrap(),
        )
    }
}

// ---------------------------------------------------------------------------
// Objective
// ---------------------------------------------------------------------------

/// Mean of squared elementwise differences.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::Shape {
            op: "mse",
            detail: format!("{:?} vs {:?}", pred.shape(), target.shape()),
        });
    }
    let n = pred.len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(p, t)| (p - t) * (p - t))
        .sum::<f64>()
        / n)
}

/// Tape version of [`mse`], for use as a training objective.
pub fn mse_on_tape(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    let d = tape.sub(pred, target)?;
    let sq = tape.mul(d, d)?;
    Ok(tape.mean(sq))
}

/// Sums a buffer in ascending value order, so reductions over space do not
/// depend on how the columns are arranged.
fn sorted_sum(vals: &mut [f64]) -> f64 {
    vals.sort_unstable_by(f64::total_cmp);
    vals.iter().sum()
}

/// Whole-set eval-mode MSE, accumulated per location and reduced in value
/// order (invariant to spatial permutation of the data).
pub fn evaluate_mse(model: &mut Forecaster, data: &Dataset, batch_size: usize) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Data("cannot evaluate on an empty set".into()));
    }
    let s = data.x().shape()[2];
    let mut per_loc = vec![0.0f64; s];
    let mut count = 0usize;
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (bx, by) = data.gather(chunk);
        let pred = model.predict(&bx)?;
        let tp = by.shape()[1];
        for n in 0..chunk.len() {
            for t in 0..tp {
                let base = (n * tp + t) * s;
                for si in 0..s {
                    let d = pred.data()[base + si] - by.data()[base + si];
                    per_loc[si] += d * d;
                }
            }
        }
        count += chunk.len() * tp * s;
    }
    Ok(sorted_sum(&mut per_loc) / count as f64)
}

// ---------------------------------------------------------------------------
// RMSprop
// ---------------------------------------------------------------------------

/// Square-gradient average and momentum buffer per parameter.
#[derive(Clone, Debug, Default)]
pub struct RmspropState {
    v: Vec<Vec<f64>>,
    m: Vec<Vec<f64>>,
}

/// One RMSprop-with-momentum update:
/// `v <- alpha v + (1-alpha) g^2; m <- mu m + g/(sqrt(v)+eps); theta <- theta - lr m`,
/// with the weight-decay term `lr lambda theta` subtracted decoupled from the
/// adaptive denominator (or folded into `g` when `coupled_l2`).
pub fn rmsprop_step(
    params: &mut [&mut Tensor],
    grads: &[&[f64]],
    state: &mut RmspropState,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<()> {
    if state.v.is_empty() {
        state.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        state.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
    }
    if params.len() != grads.len() || params.len() != state.v.len() {
        return Err(Error::Config("optimizer state does not match parameter list".into()));
    }
    for (pi, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("gradient of parameter {}", pi),
            });
        }
        let v = &mut state.v[pi];
        let m = &mut state.m[pi];
        let theta = p.data_mut();
        for i in 0..theta.len() {
            let mut gi = g[i];
            if cfg.coupled_l2 {
                gi += cfg.weight_decay * theta[i];
            }
            v[i] = cfg.rmsprop_alpha * v[i] + (1.0 - cfg.rmsprop_alpha) * gi * gi;
            m[i] = cfg.momentum * m[i] + gi / (v[i].sqrt() + cfg.epsilon);
            theta[i] -= lr * m[i];
            if !cfg.coupled_l2 {
                theta[i] -= lr * cfg.weight_decay * theta[i];
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Fit loop
// ---------------------------------------------------------------------------

/// Trains in place: RMSprop on shuffled mini-batches, early stopping on
/// validation MSE, step-wise learning-rate decay, best-weight restore.
pub fn train(
    model: &mut Forecaster,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<History> {
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut state = RmspropState::default();
    let mut history = History::default();
    let mut lr = cfg.lr;
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_model: Option<Forecaster> = None;
    let mut since_improve = 0usize;

    let n = train_set.len();
    let batch = cfg.batch_size.min(n);

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);

        let mut chunks: Vec<&[usize]> = order.chunks(batch).collect();
        // A trailing singleton cannot pass through batch norm; fold it into
        // the previous batch by widening the final chunk.
        let merged_tail;
        if chunks.len() >= 2 && chunks.last().unwrap().len() == 1 {
            let keep = chunks.len() - 2;
            let tail_start = keep * batch;
            merged_tail = &order[tail_start..];
            chunks.truncate(keep);
            chunks.push(merged_tail);
        }

        let mut train_sse_weighted = 0.0;
        for chunk in &chunks {
            let (bx, by) = train_set.gather(chunk);
            let mut tape = Tape::new();
            let xv = tape.leaf(bx);
            let yv = tape.leaf(by);
            let (pred, leased) = model.forward(&mut tape, xv, true)?;
            let loss = mse_on_tape(&mut tape, pred, yv)?;
            let loss_val = tape.value(loss).item()?;
            tape.backward(loss)?;
            let grads: Vec<&[f64]> = leased
                .iter()
                .map(|v| tape.grad(*v).unwrap_or(&[]))
                .collect();
            let mut params = model.params_mut();
            rmsprop_step(&mut params, &grads, &mut state, cfg, lr)?;
            train_sse_weighted += loss_val * chunk.len() as f64;
        }
        let train_loss = train_sse_weighted / n as f64;

        let val_loss = evaluate_mse(model, val_set, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: format!("validation loss {}", val_loss),
                history,
            });
        }

        history.epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
            lr,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });

        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best_model = Some(model.clone());
            since_improve = 0;
        } else {
            since_improve += 1;
            if since_improve % cfg.lr_decay_patience == 0 {
                lr *= cfg.lr_decay_factor;
            }
            if since_improve >= cfg.early_stop_patience {
                history.stopped_early = true;
                break;
            }
        }
    }

    if let Some(best) = best_model {
        *model = best;
    }
    history.best_epoch = best_epoch;
    Ok(history)
}

// ---------------------------------------------------------------------------
// t_past grid search
// ---------------------------------------------------------------------------

/// Trains one A-CNN per candidate lag and returns the lag minimizing
/// validation RMSE (ties favor the smallest lag), with the per-candidate
/// scores.
pub fn grid_search_tpast(
    candidates: &[usize],
    base: &ModelConfig,
    train_set: &Dataset,
    val_set: &Dataset,
    cfg: &TrainConfig,
) -> Result<(usize, Vec<(usize, f64)>)> {
    if candidates.is_empty() {
        return Err(Error::Config("t_past grid must be non-empty".into()));
    }
    if base.kind != ModelKind::ACnn {
        return Err(Error::Config("grid search over t_past applies to A-CNN only".into()));
    }
    let mut lags: Vec<usize> = candidates.to_vec();
    lags.sort_unstable();
    lags.dedup();
    if let Some(&bad) = lags.iter().find(|&&p| p == 0 || p > base.t) {
        return Err(Error::Config(format!(
            "t_past candidate {} outside 1..={}",
            bad, base.t
        )));
    }
    let mut best: Option<(usize, f64)> = None;
    let mut scores = Vec::with_capacity(lags.len());
    for &lag in &lags {
        let mut mc = base.clone();
        mc.t_past = Some(lag);
        let mut model = build_model(&mc)?;
        train(&mut model, train_set, val_set, cfg)?;
        let rmse = evaluate_mse(&mut model, val_set, cfg.batch_size)?.sqrt();
        scores.push((lag, rmse));
        // Strict improvement only: ascending scan makes ties favor the
        // smallest lag.
        if best.map_or(true, |(_, b)| rmse < b) {
            best = Some((lag, rmse));
        }
    }
    Ok((best.unwrap().0, scores))
}

/// Default lag grid: `{2, 3, 5, 7, T}`, clipped to valid lags.
pub fn default_tpast_grid(t: usize) -> Vec<usize> {
    let mut grid: Vec<usize> = [2, 3, 5, 7, t]
        .into_iter()
        .filter(|&p| p >= 1 && p <= t)
        .collect();
    grid.sort_unstable();
    grid.dedup();
    grid
}
