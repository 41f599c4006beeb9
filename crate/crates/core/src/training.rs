//! MSE loss, Adam, and the minibatch training loop with early stopping.
//!
//! Matching matrices are built on the fly per batch, keeping memory bounded
//! at the configured caps. Per-example forward/backward within a batch fans
//! out to rayon workers; gradients are reduced in example order, so results
//! do not depend on the number of threads.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{DocumentSet, ReviewRecord};
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::matching::build_matching_matrix;
use crate::model::{clamp_rating, CnnRegressor, ForwardTrace, Gradients, Mode};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            max_epochs: 50,
            patience: 5,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid_config("batch_size must be >= 1"));
        }
        if self.learning_rate <= 0.0 {
            return Err(Error::invalid_config("learning_rate must be > 0"));
        }
        if self.patience == 0 {
            return Err(Error::invalid_config("patience must be >= 1"));
        }
        Ok(())
    }
}

/// Mean of squared residuals.
pub fn mse(predictions: &[f64], targets: &[f64]) -> Result<f64> {
    if predictions.is_empty() {
        return Err(Error::invalid_input("mse over empty input"));
    }
    if predictions.len() != targets.len() {
        return Err(Error::shape(format!(
            "mse: {} predictions vs {} targets",
            predictions.len(),
            targets.len()
        )));
    }
    let sum: f64 = predictions
        .iter()
        .zip(targets)
        .map(|(p, t)| (p - t) * (p - t))
        .sum();
    Ok(sum / predictions.len() as f64)
}

/// First and second moment estimates for Adam.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n_params: usize) -> Self {
        AdamState { m: vec![0.0; n_params], v: vec![0.0; n_params], t: 0 }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &TrainConfig,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::shape("adam_step: parameter/gradient/state length mismatch"));
    }
    state.t += 1;
    let t = state.t as i32;
    let bc1 = 1.0 - cfg.adam_beta1.powi(t);
    let bc2 = 1.0 - cfg.adam_beta2.powi(t);
    for k in 0..params.len() {
        let g = grads[k];
        state.m[k] = cfg.adam_beta1 * state.m[k] + (1.0 - cfg.adam_beta1) * g;
        state.v[k] = cfg.adam_beta2 * state.v[k] + (1.0 - cfg.adam_beta2) * g * g;
        let m_hat = state.m[k] / bc1;
        let v_hat = state.v[k] / bc2;
        params[k] -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.adam_epsilon);
    }
    Ok(())
}

/// Mean training-set rating, the fallback prediction for pairs whose user or
/// item document is empty.
pub fn global_mean(records: &[ReviewRecord]) -> f64 {
    if records.is_empty() {
        3.0
    } else {
        records.iter().map(|r| r.rating).sum::<f64>() / records.len() as f64
    }
}

/// Raw model prediction for one pair, with the global-mean fallback when
/// either document is empty or missing. Returns (prediction, used_fallback).
pub fn predict_pair(
    model: &CnnRegressor,
    pair: &ReviewRecord,
    docs: &DocumentSet,
    table: &EmbeddingTable,
    fallback: f64,
    mode: Mode,
) -> Result<(f64, bool)> {
    let user = docs.user(&pair.user_id);
    let item = docs.item(&pair.item_id);
    let (Some(user), Some(item)) = (user, item) else {
        return Ok((fallback, true));
    };
    if user.is_empty() || item.is_empty() {
        return Ok((fallback, true));
    }
    let matrix =
        build_matching_matrix(user, item, table, model.config.n_max, model.config.m_max)?;
    let (pred, _) = model.predict_rating(&matrix, mode)?;
    Ok((pred, false))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mse: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    /// Epoch with the lowest validation MSE, if any epoch ran.
    pub best_epoch: Option<usize>,
}

impl TrainReport {
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["epoch", "train_loss", "val_mse", "seconds"])
            .map_err(|e| Error::invalid_input(e.to_string()))?;
        for e in &self.epochs {
            wtr.write_record([
                e.epoch.to_string(),
                format!("{:.17}", e.train_loss),
                format!("{:.17}", e.val_mse),
                format!("{:.3}", e.seconds),
            ])
            .map_err(|e| Error::invalid_input(e.to_string()))?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Minibatch training with Adam and early stopping on validation MSE.
/// Returns the checkpoint with the best validation MSE seen.
pub fn fit(
    model: CnnRegressor,
    train: &[ReviewRecord],
    val: &[ReviewRecord],
    docs: &DocumentSet,
    table: &EmbeddingTable,
    cfg: &TrainConfig,
) -> Result<(CnnRegressor, TrainReport)> {
    cfg.validate()?;
    if cfg.max_epochs == 0 {
        return Ok((model, TrainReport::default()));
    }
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid_input("fit requires non-empty train and validation sets"));
    }

    let mut model = model;
    let fallback = global_mean(train);
    let mut params = model.flat_params();
    let mut adam = AdamState::new(params.len());
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed);

    let mut report = TrainReport::default();
    let mut best: Option<(f64, CnnRegressor, usize)> = None;

    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);

        let mut epoch_sq_err = 0.0;
        for (batch_no, batch) in order.chunks(cfg.batch_size).enumerate() {
            let batch_len = batch.len() as f64;
            // forward/backward per example; reduction below is in example
            // order, so thread count does not change the result
            let results: Vec<Result<(f64, f64, ForwardTrace, Gradients)>> = batch
                .par_iter()
                .map(|&idx| {
                    let rec = &train[idx];
                    let user = docs.user(&rec.user_id).ok_or_else(|| {
                        Error::invalid_input(format!("no document for user {}", rec.user_id))
                    })?;
                    let item = docs.item(&rec.item_id).ok_or_else(|| {
                        Error::invalid_input(format!("no document for item {}", rec.item_id))
                    })?;
                    let matrix = build_matching_matrix(
                        user,
                        item,
                        table,
                        model.config.n_max,
                        model.config.m_max,
                    )?;
                    let (pred, trace) = model.predict_rating(&matrix, Mode::Train)?;
                    let residual = pred - rec.rating;
                    let d_pred = 2.0 * residual / batch_len;
                    let grads = model.backward(&trace, d_pred)?;
                    Ok((pred, residual * residual, trace, grads))
                })
                .collect();

            let mut batch_grads = vec![0.0; params.len()];
            for result in results {
                let (pred, sq_err, trace, grads) = result?;
                if !pred.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "prediction at epoch {epoch}, batch {batch_no}"
                    )));
                }
                epoch_sq_err += sq_err;
                for (acc, g) in batch_grads.iter_mut().zip(&grads.flat) {
                    *acc += g;
                }
                model.commit_batch_stats(&trace);
            }
            if let Some(k) = batch_grads.iter().position(|g| !g.is_finite()) {
                return Err(Error::NonFinite(format!(
                    "gradient of {} at epoch {epoch}, batch {batch_no}",
                    model.param_name(k)
                )));
            }
            adam_step(&mut params, &batch_grads, &mut adam, cfg)?;
            model.set_flat_params(&params)?;
        }

        let train_loss = epoch_sq_err / train.len() as f64;
        if !train_loss.is_finite() {
            return Err(Error::NonFinite(format!("train loss at epoch {epoch}")));
        }

        // validation uses Eval mode and the clamped reporting metric
        let (preds, targets): (Vec<f64>, Vec<f64>) = val
            .iter()
            .map(|rec| {
                predict_pair(&model, rec, docs, table, fallback, Mode::Eval)
                    .map(|(p, _)| (clamp_rating(p), rec.rating))
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .unzip();
        let val_mse = mse(&preds, &targets)?;

        report.epochs.push(EpochStats {
            epoch,
            train_loss,
            val_mse,
            seconds: started.elapsed().as_secs_f64(),
        });
        log::info!("epoch {epoch}: train_loss {train_loss:.6}, val_mse {val_mse:.6}");

        let improved = best.as_ref().map_or(true, |(b, _, _)| val_mse < *b);
        if improved {
            best = Some((val_mse, model.clone(), epoch));
        }
        let best_epoch = best.as_ref().unwrap().2;
        if epoch - best_epoch >= cfg.patience {
            log::info!("early stop at epoch {epoch} (best was {best_epoch})");
            break;
        }
    }

    let (_, best_model, best_epoch) = best.unwrap();
    report.best_epoch = Some(best_epoch);
    Ok((best_model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn mse_zero_on_exact_predictions() {
        assert_eq!(mse(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap(), 0.0);
    }

    #[test]
    fn mse_hand_arithmetic() {
        assert_eq!(mse(&[2.0, 4.0], &[1.0, 2.0]).unwrap(), 2.5);
    }

    #[test]
    fn mse_matches_two_pass_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let preds: Vec<f64> = (0..100).map(|_| rng.random_range(1.0..5.0)).collect();
        let targets: Vec<f64> = (0..100).map(|_| rng.random_range(1.0..5.0)).collect();
        // independent two-pass oracle: residuals first, then mean
        let residuals: Vec<f64> = preds.iter().zip(&targets).map(|(p, t)| p - t).collect();
        let expect = residuals.iter().map(|d| d * d).sum::<f64>() / residuals.len() as f64;
        assert!((mse(&preds, &targets).unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn mse_error_contracts() {
        assert!(mse(&[], &[]).is_err());
        assert!(mse(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn adam_zero_gradients_leave_params() {
        let cfg = TrainConfig::default();
        let mut params = vec![1.0, -2.0];
        let mut state = AdamState::new(2);
        state.v = vec![0.25, 0.25];
        adam_step(&mut params, &[0.0, 0.0], &mut state, &cfg).unwrap();
        assert_eq!(params, vec![1.0, -2.0]);
        // second moment decayed toward zero
        assert!(state.v[0] < 0.25);
    }

    #[test]
    fn adam_first_step_closed_form() {
        // g=1 at t=1: m_hat = v_hat = 1, so the update is lr / (1 + eps)
        let cfg = TrainConfig { learning_rate: 0.1, ..TrainConfig::default() };
        let mut params = vec![0.0];
        let mut state = AdamState::new(1);
        adam_step(&mut params, &[1.0], &mut state, &cfg).unwrap();
        let expect = -0.1 / (1.0 + cfg.adam_epsilon);
        assert!((params[0] - expect).abs() < 1e-15);
    }

    #[test]
    fn adam_descends_scalar_quadratic() {
        // loss = x^2, grad = 2x
        let cfg = TrainConfig { learning_rate: 0.1, ..TrainConfig::default() };
        let mut params = vec![3.0];
        let mut state = AdamState::new(1);
        let mut last = params[0] * params[0];
        for _ in 0..5 {
            let g = 2.0 * params[0];
            adam_step(&mut params, &[g], &mut state, &cfg).unwrap();
            let loss = params[0] * params[0];
            assert!(loss < last, "loss did not decrease: {loss} vs {last}");
            last = loss;
        }
    }

    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn global_mean_of_records() {
        use crate::corpus::ReviewRecord;
        let recs: Vec<ReviewRecord> = [1.0, 5.0]
            .iter()
            .map(|&r| ReviewRecord {
                user_id: "u".into(),
                item_id: "i".into(),
                rating: r,
                review_text: "t".into(),
                timestamp: 0,
            })
            .collect();
        assert_eq!(global_mean(&recs), 3.0);
    }
}
