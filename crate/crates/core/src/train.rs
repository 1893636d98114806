//! Minibatch training with early stopping on validation loss.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::WindowSample;
use crate::error::{ModelError, Result};
use crate::models::Forecaster;
use crate::numcore::optim::clip_global_norm;
use crate::numcore::{apply_buffer_updates, Ctx, Optimizer, OptimizerKind, ParamId};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Non-improving epochs tolerated before stopping.
    pub early_stop_patience: usize,
    pub seed: u64,
    /// Global gradient norm cap.
    pub grad_clip: Option<f64>,
    /// Caps the minibatches drawn per epoch (a fresh random subset each epoch).
    pub max_batches_per_epoch: Option<usize>,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Adam,
            learning_rate: 1e-3,
            batch_size: 32,
            max_epochs: 1000,
            early_stop_patience: 20,
            seed: 0,
            grad_clip: Some(10.0),
            max_batches_per_epoch: None,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::Config(format!(
                "optimizer.learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(ModelError::Config("optimizer.batch_size must be >= 1".into()));
        }
        if let Some(c) = self.grad_clip {
            if !(c > 0.0) {
                return Err(ModelError::Config(format!("optimizer.grad_clip must be > 0, got {c}")));
            }
        }
        if self.max_batches_per_epoch == Some(0) {
            return Err(ModelError::Config("optimizer.max_batches_per_epoch must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were restored, if any epoch ran.
    pub best_epoch: Option<usize>,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,train_loss,val_loss")?;
        for e in &self.epochs {
            writeln!(w, "{},{},{}", e.epoch, e.train_loss, e.val_loss)?;
        }
        Ok(())
    }
}

/// Mean loss over `windows` in evaluation mode, weighted by batch size.
pub fn evaluate_loss<M: Forecaster + ?Sized>(model: &M, windows: &[WindowSample], batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    for chunk in windows.chunks(batch_size.max(1)) {
        let refs: Vec<&WindowSample> = chunk.iter().collect();
        let mut ctx = Ctx::new(model.store(), false);
        let loss = model.loss(&mut ctx, &refs)?;
        total += ctx.tape.value(loss).item() * chunk.len() as f64;
    }
    Ok(total / windows.len() as f64)
}

/// Trains `model` in place and restores the parameters of the epoch with the
/// lowest validation loss.
pub fn fit<M: Forecaster + ?Sized>(
    model: &mut M,
    train: &[WindowSample],
    val: &[WindowSample],
    cfg: &OptimizerConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(ModelError::Config(format!(
            "training needs non-empty splits (train {}, validation {})",
            train.len(),
            val.len()
        )));
    }
    for w in train.iter().chain(val) {
        model.check_window(w)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.kind, cfg.learning_rate, model.store());
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut best = model.store().clone();
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: None,
        best_val_loss: f64::INFINITY,
        stopped_early: false,
    };
    let mut stale = 0;
    for epoch in 0..cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        let mut seen = 0usize;
        let batches = order.chunks(cfg.batch_size).take(cfg.max_batches_per_epoch.unwrap_or(usize::MAX));
        for idx in batches {
            let batch: Vec<&WindowSample> = idx.iter().map(|&i| &train[i]).collect();
            let (value, mut grads, updates) = {
                let mut ctx = Ctx::new(model.store(), true);
                let loss = model.loss(&mut ctx, &batch).map_err(|e| diverged(epoch, e))?;
                let value = ctx.tape.value(loss).item();
                let g = ctx.tape.backward(loss).map_err(|e| diverged(epoch, e.into()))?;
                let pg = ctx.param_grads(&g);
                (value, pg, ctx.into_updates())
            };
            if !value.is_finite() || grads.iter().any(|g| !g.all_finite()) {
                return Err(ModelError::Diverged {
                    epoch,
                    detail: format!("training loss {value} after {} optimizer steps", opt.steps_taken()),
                });
            }
            if let Some(c) = cfg.grad_clip {
                clip_global_norm(&mut grads, c);
            }
            opt.step(model.store_mut(), &grads);
            apply_buffer_updates(model.store_mut(), &updates);
            sum += value * batch.len() as f64;
            seen += batch.len();
        }
        let train_loss = sum / seen as f64;
        recalibrate_buffers(model, train, &order, cfg).map_err(|e| diverged(epoch, e))?;
        let val_loss = evaluate_loss(model, val, cfg.batch_size).map_err(|e| diverged(epoch, e))?;
        if !val_loss.is_finite() {
            return Err(ModelError::Diverged {
                epoch,
                detail: format!("validation loss {val_loss}"),
            });
        }
        report.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < report.best_val_loss {
            report.best_val_loss = val_loss;
            report.best_epoch = Some(epoch);
            best = model.store().clone();
            stale = 0;
        } else {
            stale += 1;
            if stale > cfg.early_stop_patience {
                report.stopped_early = true;
                break;
            }
        }
    }
    model.store_mut().load_from(&best)?;
    Ok(report)
}

/// Replaces running batch-norm statistics with the average batch statistics
/// of one forward pass over the epoch's batches under the final weights. The
/// moving averages otherwise trail the weights and make evaluation-mode
/// outputs drift from training-mode ones.
fn recalibrate_buffers<M: Forecaster + ?Sized>(
    model: &mut M,
    train: &[WindowSample],
    order: &[usize],
    cfg: &OptimizerConfig,
) -> Result<()> {
    if model.store().iter().all(|(_, p)| p.trainable) {
        return Ok(());
    }
    let mut sums: BTreeMap<usize, (ParamId, Vec<f64>)> = BTreeMap::new();
    let mut batches = 0.0;
    for idx in order.chunks(cfg.batch_size).take(cfg.max_batches_per_epoch.unwrap_or(usize::MAX)) {
        let batch: Vec<&WindowSample> = idx.iter().map(|&i| &train[i]).collect();
        let mut ctx = Ctx::new(model.store(), true);
        model.loss(&mut ctx, &batch)?;
        for u in ctx.into_updates() {
            for (id, stat) in [(u.mean, u.batch_mean), (u.var, u.batch_var)] {
                let acc = &mut sums.entry(id.index()).or_insert_with(|| (id, vec![0.0; stat.len()])).1;
                acc.iter_mut().zip(&stat).for_each(|(a, s)| *a += s);
            }
        }
        batches += 1.0;
    }
    for (id, acc) in sums.into_values() {
        let dst = model.store_mut().value_mut(id).data_mut();
        dst.iter_mut().zip(&acc).for_each(|(d, a)| *d = a / batches);
    }
    Ok(())
}

fn diverged(epoch: usize, e: ModelError) -> ModelError {
    match e {
        ModelError::NanLoss { step } => ModelError::Diverged {
            epoch,
            detail: format!("non-finite loss at unroll step {step}"),
        },
        ModelError::Num(crate::NumError::NonFinite { op }) => ModelError::Diverged {
            epoch,
            detail: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{prepare, sine_fade, PrepConfig, Target};
    use crate::models::test_util::window;
    use crate::models::{DataDims, DeepTcnConfig, ForecastOptions, ModelSpec, NBeatsConfig, TcnHead};

    fn constant_windows(c: f64, n: usize) -> Vec<WindowSample> {
        (0..n).map(|s| window(|_| c, s, 8, 2, 1)).collect()
    }

    fn dims() -> DataDims {
        DataDims {
            cov_dim: 1,
            conditioning: 8,
            horizon: 2,
        }
    }

    fn small_nbeats() -> ModelSpec {
        ModelSpec::NBeats(NBeatsConfig {
            stacks: 1,
            blocks_per_stack: 2,
            width: 8,
            ..Default::default()
        })
    }

    #[test]
    fn patience_zero_stops_after_first_non_improving_epoch() {
        let mut m = small_nbeats().build(dims(), 1).unwrap();
        let train = constant_windows(0.5, 6);
        // validation far from anything reachable in a few steps, and a huge
        // learning rate so the loss is not monotone
        let cfg = OptimizerConfig {
            learning_rate: 5.0,
            max_epochs: 50,
            early_stop_patience: 0,
            ..Default::default()
        };
        let r = fit(&mut m, &train, &constant_windows(0.5, 3), &cfg).unwrap();
        let best = r.best_epoch.unwrap();
        if r.stopped_early {
            assert_eq!(r.epochs.len(), best + 2);
            assert!(r.epochs.last().unwrap().val_loss >= r.best_val_loss);
        }
        for (i, e) in r.epochs.iter().enumerate().take(r.epochs.len() - 1).skip(1) {
            assert!(e.val_loss < r.epochs[i - 1].val_loss, "continued past a non-improving epoch");
        }
    }

    #[test]
    fn zero_epochs_leave_parameters_untouched() {
        let mut m = small_nbeats().build(dims(), 1).unwrap();
        let before = m.store().clone();
        let cfg = OptimizerConfig {
            max_epochs: 0,
            ..Default::default()
        };
        let r = fit(&mut m, &constant_windows(1.0, 4), &constant_windows(1.0, 2), &cfg).unwrap();
        assert!(r.epochs.is_empty() && r.best_epoch.is_none());
        assert_eq!(m.store(), &before);
    }

    #[test]
    fn same_seed_same_parameters() {
        let cfg = OptimizerConfig {
            max_epochs: 5,
            batch_size: 3,
            seed: 9,
            ..Default::default()
        };
        let train: Vec<_> = (0..10).map(|s| window(|t| (t as f64 * 0.3).sin(), s, 8, 2, 1)).collect();
        let val = train[..3].to_vec();
        let run = || {
            let mut m = small_nbeats().build(dims(), 4).unwrap();
            fit(&mut m, &train, &val, &cfg).unwrap();
            m.store().clone()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn best_parameters_are_restored() {
        let mut m = small_nbeats().build(dims(), 2).unwrap();
        let cfg = OptimizerConfig {
            learning_rate: 0.5,
            max_epochs: 15,
            early_stop_patience: 100,
            ..Default::default()
        };
        let train = constant_windows(0.2, 8);
        let val = constant_windows(0.2, 3);
        let r = fit(&mut m, &train, &val, &cfg).unwrap();
        let now = evaluate_loss(&m, &val, 32).unwrap();
        assert!((now - r.best_val_loss).abs() < 1e-12);
    }

    #[test]
    fn invalid_config_and_empty_splits_are_rejected() {
        let mut m = small_nbeats().build(dims(), 1).unwrap();
        let w = constant_windows(1.0, 2);
        let bad = OptimizerConfig {
            learning_rate: 0.0,
            ..Default::default()
        };
        assert!(matches!(fit(&mut m, &w, &w, &bad), Err(ModelError::Config(_))));
        assert!(matches!(fit(&mut m, &[], &w, &OptimizerConfig::default()), Err(ModelError::Config(_))));
    }

    #[test]
    fn exploding_learning_rate_reports_divergence() {
        let spec = ModelSpec::DeepTcn(DeepTcnConfig {
            channels: 4,
            depth: Some(2),
            decoder_width: 4,
            ..Default::default()
        });
        let mut m = spec.build(dims(), 3).unwrap();
        let cfg = OptimizerConfig {
            kind: OptimizerKind::Sgd,
            learning_rate: 1e200,
            grad_clip: None,
            max_epochs: 20,
            ..Default::default()
        };
        let train: Vec<_> = (0..6).map(|s| window(|t| t as f64, s, 8, 2, 1)).collect();
        let err = fit(&mut m, &train, &train, &cfg).unwrap_err();
        assert!(matches!(err, ModelError::Diverged { .. }), "{err}");
    }

    #[test]
    fn gaussian_tcn_learns_a_constant() {
        for (anchor_last, learning_rate) in [(false, 0.01), (true, 0.003)] {
            let spec = ModelSpec::DeepTcn(DeepTcnConfig {
                channels: 4,
                depth: Some(2),
                decoder_width: 8,
                head: TcnHead::Gaussian,
                anchor_last,
                ..Default::default()
            });
            let mut m = spec.build(dims(), 7).unwrap();
            let train = constant_windows(0.6, 64);
            let val = constant_windows(0.6, 8);
            let cfg = OptimizerConfig {
                learning_rate,
                max_epochs: 200,
                batch_size: 8,
                ..Default::default()
            };
            fit(&mut m, &train, &val, &cfg).unwrap();
            let mut err = 0.0;
            for w in &val {
                let f = m.forecast(w, &ForecastOptions::default()).unwrap();
                err += f.point.iter().zip(&w.z_prediction).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
            }
            let err = err / val.len() as f64;
            assert!(err < 1e-3, "anchor {anchor_last}: val mae {err}");
        }
    }

    #[test]
    fn quantile_tcn_orders_levels_after_training() {
        let table = sine_fade(600, 3);
        let prep = PrepConfig {
            conditioning: 16,
            horizon: 4,
            stride: 2,
            ..Default::default()
        };
        let data = prepare(&table, Target::Voltage, &prep).unwrap();
        let spec = ModelSpec::DeepTcn(DeepTcnConfig {
            channels: 6,
            decoder_width: 8,
            head: TcnHead::Quantile,
            ..Default::default()
        });
        let dims = DataDims {
            cov_dim: data.cov_dim,
            conditioning: 16,
            horizon: 4,
        };
        let mut m = spec.build(dims, 1).unwrap();
        let cfg = OptimizerConfig {
            learning_rate: 0.005,
            max_epochs: 10,
            ..Default::default()
        };
        fit(&mut m, &data.train, &data.val, &cfg).unwrap();
        for w in &data.test {
            let f = m.forecast(w, &ForecastOptions::default()).unwrap();
            let (lo, mid, hi) = (f.quantile(0.1).unwrap(), f.quantile(0.5).unwrap(), f.quantile(0.9).unwrap());
            for i in 0..4 {
                assert!(lo[i] <= mid[i] && mid[i] <= hi[i]);
            }
        }
    }

    #[test]
    fn report_csv_header() {
        let r = TrainReport {
            epochs: vec![EpochRecord {
                epoch: 0,
                train_loss: 1.5,
                val_loss: 2.0,
            }],
            best_epoch: Some(0),
            best_val_loss: 2.0,
            stopped_early: false,
        };
        let mut out = Vec::new();
        r.write_csv(&mut out).unwrap();
        assert_eq!(String::from_utf8(out).unwrap(), "epoch,train_loss,val_loss\n0,1.5,2\n");
    }
}
