//! Deterministic trainer: Adam, stepwise learning-rate decay, global-norm
//! gradient clipping and early stopping on validation PIT-SNR.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::metrics::{pit_loss, pit_score, si_sdr_db, snr_db, SourcePair, METRIC_EPS};
use crate::params::{Bound, ParamRegistry};
use crate::separator::SeparatorModel;
use crate::tensor::Tensor;
use crate::toy::{toy_dataset, ToyMixture};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr: f64,
    pub lr_decay: f64,
    pub decay_every: usize,
    pub max_epochs: usize,
    pub clip_norm: f64,
    pub patience: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            lr_decay: 0.98,
            decay_every: 2,
            max_epochs: 100,
            clip_norm: 5.0,
            patience: 10,
            batch_size: 2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let reals = [
            ("lr", self.lr),
            ("lr_decay", self.lr_decay),
            ("clip_norm", self.clip_norm),
        ];
        for (key, v) in reals {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::config(key, "must be positive and finite"));
            }
        }
        let ints = [
            ("decay_every", self.decay_every),
            ("max_epochs", self.max_epochs),
            ("patience", self.patience),
            ("batch_size", self.batch_size),
        ];
        for (key, v) in ints {
            if v == 0 {
                return Err(Error::config(key, "must be positive"));
            }
        }
        if self.patience > self.max_epochs {
            return Err(Error::config("patience", "must not exceed max_epochs"));
        }
        Ok(())
    }
}

/// `lr₀ · decay^floor(epoch / decay_every)`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr * cfg.lr_decay.powi((epoch / cfg.decay_every) as i32)
}

/// Rescales all gradients by `max_norm / g` when the global L2 norm `g`
/// exceeds `max_norm`. Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Vec<f64>], max_norm: f64, names: &[&str]) -> Result<f64> {
    let mut sq = 0.0;
    for (i, g) in grads.iter().enumerate() {
        if g.iter().any(|v| !v.is_finite()) {
            let param = names.get(i).map_or_else(|| format!("#{i}"), |n| (*n).to_string());
            return Err(Error::NonFiniteGradient { param });
        }
        sq += g.iter().map(|v| v * v).sum::<f64>();
    }
    let norm = sq.sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|v| *v *= s);
    }
    Ok(norm)
}

/// First and second moment estimates, one buffer per registry entry.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl AdamState {
    pub fn new(reg: &ParamRegistry) -> Self {
        let zeros: Vec<Vec<f64>> = reg.entries().iter().map(|e| vec![0.0; e.data.len()]).collect();
        AdamState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Bias-corrected Adam update applied in place.
pub fn adam_step(reg: &mut ParamRegistry, grads: &[Vec<f64>], state: &mut AdamState, lr: f64) -> Result<()> {
    if grads.len() != reg.len() || state.m.len() != reg.len() {
        return Err(Error::shape("adam_step", &[grads.len(), state.m.len()], &[reg.len()]));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, id) in reg.ids().collect::<Vec<_>>().into_iter().enumerate() {
        let entry = reg.entry_mut(id);
        let (g, m, v) = (&grads[i], &mut state.m[i], &mut state.v[i]);
        if g.len() != entry.data.len() || m.len() != g.len() {
            return Err(Error::shape("adam_step", &[g.len()], &[entry.data.len()]));
        }
        for j in 0..g.len() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            let m_hat = m[j] / c1;
            let v_hat = v[j] / c2;
            entry.data[j] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

/// One row of the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean PIT loss (negative SNR, dB) over the epoch's updates.
    pub train_loss: f64,
    /// Mean validation PIT SI-SDR (dB).
    pub valid_sisdr: f64,
    /// Mean validation PIT SNR (dB); drives early stopping.
    pub valid_snr: f64,
}

pub const HISTORY_HEADER: &str = "epoch,lr,train_loss,valid_sisdr";

/// CSV text with a fixed header; reals use the shortest round-trip format.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from(HISTORY_HEADER);
    out.push('\n');
    for r in history {
        let _ = writeln!(out, "{},{:?},{:?},{:?}", r.epoch, r.lr, r.train_loss, r.valid_sisdr);
    }
    out
}

pub fn write_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    std::fs::write(path, history_csv(history)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters of the epoch with the best validation PIT-SNR.
    pub best: ParamRegistry,
    pub best_epoch: usize,
    pub best_valid_snr: f64,
    pub history: Vec<EpochRecord>,
    pub stopped_early: bool,
}

/// Extra differentiable loss term added to each item's PIT loss.
/// Receives the bound parameters, the `[spk × L]` estimates and the item.
pub type AuxLoss<'a> = dyn Fn(&Bound, &Tensor, &ToyMixture) -> Result<Tensor> + 'a;

#[derive(Default)]
pub struct TrainHooks<'a> {
    pub aux_loss: Option<&'a AuxLoss<'a>>,
    pub on_epoch: Option<&'a mut dyn FnMut(&EpochRecord)>,
}

/// SI-SDR, except that a silent (or constant) estimate scores the metric's
/// floor instead of failing: a model whose masks die is still evaluated.
fn si_sdr_or_floor(est: &[f64], reference: &[f64]) -> Result<f64> {
    let first = est.first().copied().unwrap_or(0.0);
    if !est.is_empty() && est.len() == reference.len() && est.iter().all(|&v| v == first) {
        return Ok(10.0 * METRIC_EPS.log10());
    }
    si_sdr_db(est, reference)
}

/// PIT SNR and PIT SI-SDR of a model's estimates, averaged over `items`.
pub fn evaluate(model: &SeparatorModel, items: &[ToyMixture]) -> Result<(f64, f64)> {
    let (mut snr, mut sisdr) = (0.0, 0.0);
    for item in items {
        let est = model.separate(&item.mixture)?;
        let pair = SourcePair::new(est, item.references())?;
        snr += pit_score(&pair, snr_db)?.mean;
        sisdr += pit_score(&pair, si_sdr_or_floor)?.mean;
    }
    let n = items.len() as f64;
    Ok((snr / n, sisdr / n))
}

/// Mean SI-SDR of the unprocessed mixture against each reference.
pub fn mixture_si_sdr(items: &[ToyMixture]) -> Result<f64> {
    let mut total = 0.0;
    for item in items {
        let pair = SourcePair::new(vec![item.mixture.clone(); 2], item.references())?;
        total += pit_score(&pair, si_sdr_db)?.mean;
    }
    Ok(total / items.len() as f64)
}

pub fn train(
    model: &mut SeparatorModel,
    train_set: &[ToyMixture],
    valid_set: &[ToyMixture],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(model, train_set, valid_set, cfg, TrainHooks::default())
}

/// Runs the recipe. On return `model` holds the best parameters. If a loss
/// or gradient goes non-finite the model is restored to the best checkpoint
/// so far and [`Error::Diverged`] is returned.
pub fn train_with(
    model: &mut SeparatorModel,
    train_set: &[ToyMixture],
    valid_set: &[ToyMixture],
    cfg: &TrainConfig,
    mut hooks: TrainHooks<'_>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::Contract("training and validation sets must be non-empty".into()));
    }
    let names: Vec<String> = model.registry().entries().iter().map(|e| e.name.clone()).collect();
    let names: Vec<&str> = names.iter().map(String::as_str).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.registry());
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    let mut best = model.registry().clone();
    let mut best_epoch = 0;
    let mut best_valid = f64::NEG_INFINITY;
    let mut history = Vec::new();
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        let lr = lr_at(epoch, cfg);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut updates = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Option<Vec<Vec<f64>>> = None;
            let mut batch_loss = 0.0;
            for &i in batch {
                let item = &train_set[i];
                let p = model.registry().bind(true);
                let wave = Tensor::vector(&item.mixture);
                let est = model.forward(&p, &wave)?;
                let mut loss = pit_loss(&est, &item.references())?.loss;
                if let Some(aux) = hooks.aux_loss {
                    loss = loss.add(&aux(&p, &est, item)?)?;
                }
                let value = loss.item()?;
                if !value.is_finite() {
                    model.registry_mut().copy_values_from(&best)?;
                    return Err(Error::Diverged {
                        epoch,
                        reason: format!("loss {value} on item {i}"),
                    });
                }
                batch_loss += value;
                loss.scale(1.0 / batch.len() as f64).backward()?;
                let g = p.grads();
                match grads.as_mut() {
                    None => grads = Some(g),
                    Some(acc) => acc
                        .iter_mut()
                        .flatten()
                        .zip(g.iter().flatten())
                        .for_each(|(a, b)| *a += b),
                }
            }
            let mut grads = grads.expect("batches are non-empty");
            if let Err(e) = clip_global_norm(&mut grads, cfg.clip_norm, &names) {
                model.registry_mut().copy_values_from(&best)?;
                return Err(Error::Diverged {
                    epoch,
                    reason: e.to_string(),
                });
            }
            adam_step(model.registry_mut(), &grads, &mut adam, lr)?;
            loss_sum += batch_loss / batch.len() as f64;
            updates += 1;
        }

        let (valid_snr, valid_sisdr) = evaluate(model, valid_set)?;
        let record = EpochRecord {
            epoch,
            lr,
            train_loss: loss_sum / updates as f64,
            valid_sisdr,
            valid_snr,
        };
        if let Some(cb) = hooks.on_epoch.as_mut() {
            cb(&record);
        }
        history.push(record);

        if valid_snr > best_valid {
            best_valid = valid_snr;
            best_epoch = epoch;
            best = model.registry().clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }
    model.registry_mut().copy_values_from(&best)?;
    Ok(TrainOutcome {
        best,
        best_epoch,
        best_valid_snr: best_valid,
        history,
        stopped_early,
    })
}

/// Seed offset separating the validation items from the training items.
pub const VALID_SEED_OFFSET: u64 = 1 << 32;

/// A finished toy-data run: the model (holding the best parameters), the
/// trainer outcome and the data it saw.
#[derive(Debug)]
pub struct ToyRun {
    pub model: SeparatorModel,
    pub outcome: TrainOutcome,
    pub train_set: Vec<ToyMixture>,
    pub valid_set: Vec<ToyMixture>,
}

/// Builds the toy data sets and the model described by `cfg` and trains.
pub fn train_toy(cfg: &RunConfig, hooks: TrainHooks<'_>) -> Result<ToyRun> {
    cfg.validate()?;
    let (d, sr) = (&cfg.data, cfg.model.sample_rate);
    let train_set = toy_dataset(d.data_seed, d.train_items, d.duration, sr)?;
    let valid_set = toy_dataset(
        d.data_seed.wrapping_add(VALID_SEED_OFFSET),
        d.valid_items,
        d.duration,
        sr,
    )?;
    let mut model = SeparatorModel::new(&cfg.model, d.init_seed)?;
    let outcome = train_with(&mut model, &train_set, &valid_set, &cfg.train, hooks)?;
    Ok(ToyRun {
        model,
        outcome,
        train_set,
        valid_set,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(0, &cfg), 0.001);
        assert_eq!(lr_at(1, &cfg), 0.001);
        assert!((lr_at(2, &cfg) - 0.00098).abs() < 1e-15);
        assert!((lr_at(5, &cfg) - 0.0009604).abs() < 1e-15);
    }

    #[test]
    fn clipping() {
        let mut g = vec![vec![3.0], vec![0.0]];
        assert_eq!(clip_global_norm(&mut g, 5.0, &[]).unwrap(), 3.0);
        assert_eq!(g, vec![vec![3.0], vec![0.0]]);
        let mut g = vec![vec![10.0]];
        clip_global_norm(&mut g, 5.0, &[]).unwrap();
        assert_eq!(g, vec![vec![5.0]]);
        let mut g = vec![vec![1.0, f64::NAN]];
        assert!(matches!(
            clip_global_norm(&mut g, 5.0, &["w"]),
            Err(Error::NonFiniteGradient { ref param }) if param == "w"
        ));
    }

    #[test]
    fn adam_first_step_and_zero_grad() {
        let mut reg = ParamRegistry::new();
        reg.register("w", &[1], vec![1.0]).unwrap();
        let mut st = AdamState::new(&reg);
        adam_step(&mut reg, &[vec![0.0]], &mut st, 0.1).unwrap();
        assert_eq!(reg.entries()[0].data, vec![1.0]);

        let mut reg = ParamRegistry::new();
        reg.register("w", &[1], vec![1.0]).unwrap();
        let mut st = AdamState::new(&reg);
        let g = 0.37;
        adam_step(&mut reg, &[vec![g]], &mut st, 0.1).unwrap();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g|+ε)
        let expect = 1.0 - 0.1 * g / (g + ADAM_EPS);
        assert!((reg.entries()[0].data[0] - expect).abs() < 1e-15);
        assert!(adam_step(&mut reg, &[], &mut st, 0.1).is_err());
    }

    #[test]
    fn config_invariants() {
        assert!(TrainConfig::default().validate().is_ok());
        let cfg = TrainConfig {
            patience: 11,
            max_epochs: 10,
            ..TrainConfig::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { ref key, .. }) if key == "patience"));
        let cfg = TrainConfig {
            lr: 0.0,
            ..TrainConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn silent_estimate_scores_the_floor() {
        let r: Vec<f64> = (0..64).map(|i| (i as f64 * 0.3).sin()).collect();
        assert_eq!(si_sdr_or_floor(&[0.0; 64], &r).unwrap(), -80.0);
        assert_eq!(si_sdr_or_floor(&r, &r).unwrap(), si_sdr_db(&r, &r).unwrap());
        assert!(si_sdr_or_floor(&[0.0; 3], &r).is_err());
    }

    #[test]
    fn history_format() {
        let h = vec![EpochRecord {
            epoch: 0,
            lr: 0.001,
            train_loss: -1.5,
            valid_sisdr: 2.25,
            valid_snr: 2.0,
        }];
        assert_eq!(history_csv(&h), "epoch,lr,train_loss,valid_sisdr\n0,0.001,-1.5,2.25\n");
    }
}
