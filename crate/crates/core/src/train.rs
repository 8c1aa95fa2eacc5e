//! Adam optimization and the per-epoch training loop.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{make_batches, Dataset, SequenceBatch, PAD_ID};
use crate::error::{Error, Result};
use crate::model::{argmax, Model};
use crate::param::Param;
use crate::scalar::Scalar;
use crate::tensor::Tape;

// ── Adam ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 0.0005,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig {
            lr,
            ..AdamConfig::default()
        }
    }
}

/// First/second moment buffers for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamSlot<T> {
    pub m: Vec<T>,
    pub v: Vec<T>,
}

/// Adam with bias correction. Slots line up with the model's named
/// parameter order; `step` lazily allocates them on first use.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub t: u64,
    pub slots: Vec<AdamSlot<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(config: AdamConfig) -> Self {
        AdamState {
            config,
            t: 0,
            slots: Vec::new(),
        }
    }

    /// One update over parallel slices of parameters and their gradients.
    pub fn step(&mut self, params: &mut [(String, &mut Param<T>)], grads: &[Vec<T>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Contract(format!(
                "adam: {} parameters but {} gradients",
                params.len(),
                grads.len()
            )));
        }
        if self.slots.is_empty() {
            self.slots = grads
                .iter()
                .map(|g| AdamSlot {
                    m: vec![T::zero(); g.len()],
                    v: vec![T::zero(); g.len()],
                })
                .collect();
        }
        if self.slots.len() != params.len() {
            return Err(Error::Contract(
                "adam: slot count does not match parameter count".into(),
            ));
        }
        self.t += 1;
        let b1 = T::from_f64(self.config.beta1);
        let b2 = T::from_f64(self.config.beta2);
        let one = T::one();
        let lr = T::from_f64(self.config.lr);
        let eps = T::from_f64(self.config.eps);
        let corr1 = one - b1.powi(self.t as i32);
        let corr2 = one - b2.powi(self.t as i32);
        for ((name, param), (slot, grad)) in params
            .iter_mut()
            .zip(self.slots.iter_mut().zip(grads.iter()))
        {
            if grad.iter().any(|g| !g.is_finite()) {
                return Err(Error::Training(format!(
                    "non-finite gradient for {name}"
                )));
            }
            if grad.len() != param.numel() {
                return Err(Error::Contract(format!(
                    "adam: gradient for {name} has {} values, parameter has {}",
                    grad.len(),
                    param.numel()
                )));
            }
            let values = param.values_mut();
            for i in 0..grad.len() {
                let g = grad[i];
                slot.m[i] = b1 * slot.m[i] + (one - b1) * g;
                slot.v[i] = b2 * slot.v[i] + (one - b2) * g * g;
                let m_hat = slot.m[i] / corr1;
                let v_hat = slot.v[i] / corr2;
                values[i] = values[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

// ── Training loop ───────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    /// Stop after this many epochs without a new best dev accuracy.
    pub patience: Option<usize>,
    pub max_len: Option<usize>,
    pub seed: u64,
    /// Print per-epoch progress lines to stderr.
    pub quiet: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 128,
            optimizer: AdamConfig::default(),
            patience: None,
            max_len: None,
            seed: 0,
            quiet: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub epochs: Vec<EpochReport>,
    pub best_epoch: Option<usize>,
    pub best_dev_accuracy: f64,
}

/// Train in place. After the final epoch the parameters are rolled back to
/// the best dev-accuracy epoch (the dev set doubles as the selection set;
/// pass the training set again if there is no held-out data).
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    train_set: &Dataset,
    dev_set: &Dataset,
    config: &TrainConfig,
) -> Result<TrainReport> {
    if train_set.label_names != model.config.label_names {
        return Err(Error::Data(format!(
            "training labels {:?} do not match the model's {:?}",
            train_set.label_names, model.config.label_names
        )));
    }
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut adam = AdamState::new(config.optimizer);
    let mut report = TrainReport {
        epochs: Vec::new(),
        best_epoch: None,
        best_dev_accuracy: f64::NEG_INFINITY,
    };
    let mut best_params: Option<Vec<Vec<T>>> = None;

    for epoch in 0..config.epochs {
        let epoch_seed = shuffle_rng.gen();
        let batches = make_batches(
            &train_set.pairs,
            &model.vocab,
            config.batch_size,
            config.max_len,
            Some(epoch_seed),
        )?;
        let mut loss_sum = 0.0;
        let mut pair_count = 0usize;
        for batch in &batches {
            loss_sum += train_batch(model, batch, &mut adam, &mut dropout_rng)?;
            pair_count += batch.len();
        }
        let train_loss = loss_sum / pair_count as f64;
        let dev_accuracy = evaluate(model, dev_set, config.batch_size, config.max_len)?;
        let entry = EpochReport {
            epoch,
            train_loss,
            dev_accuracy,
        };
        if !config.quiet {
            eprintln!(
                "epoch {:>3}  loss {:.4}  dev acc {:.4}",
                entry.epoch, entry.train_loss, entry.dev_accuracy
            );
        }
        let improved = dev_accuracy > report.best_dev_accuracy;
        if improved {
            report.best_dev_accuracy = dev_accuracy;
            report.best_epoch = Some(epoch);
            best_params = Some(model.named().iter().map(|(_, p)| p.values().to_vec()).collect());
        }
        report.epochs.push(entry);
        if let Some(patience) = config.patience {
            let since_best = epoch - report.best_epoch.unwrap_or(0);
            if since_best >= patience {
                break;
            }
        }
    }

    if let Some(best) = best_params {
        for ((_, param), values) in model.named_mut().into_iter().zip(best) {
            param.values_mut().copy_from_slice(&values);
        }
    }
    Ok(report)
}

/// One optimizer step over a batch: per-pair tapes, gradients averaged
/// outside the tape, padding row of the embedding pinned to zero.
fn train_batch<T: Scalar>(
    model: &mut Model<T>,
    batch: &SequenceBatch,
    adam: &mut AdamState<T>,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut acc: Vec<Vec<T>> = model
        .named()
        .iter()
        .map(|(_, p)| vec![T::zero(); p.numel()])
        .collect();
    let mut loss_sum = 0.0;
    for b in 0..batch.len() {
        let mut tape = Tape::new();
        let bound = model.bind(&mut tape);
        let logits = model.forward_logits(
            &mut tape,
            &bound,
            (batch.premise.indices(b), batch.premise.len_of(b)),
            (batch.hypothesis.indices(b), batch.hypothesis.len_of(b)),
            Some(dropout_rng),
        )?;
        let loss = tape.cross_entropy(logits, batch.labels[b] as usize)?;
        loss_sum += tape.scalar_value(loss).to_f64();
        tape.backward(loss)?;
        for (k, (_, var)) in bound.registry().entries().iter().enumerate() {
            if let Some(g) = tape.grad(*var) {
                for (a, gi) in acc[k].iter_mut().zip(g.iter()) {
                    *a = *a + *gi;
                }
            }
        }
    }
    let inv = T::from_f64(1.0 / batch.len() as f64);
    for g in acc.iter_mut() {
        for v in g.iter_mut() {
            *v = *v * inv;
        }
    }
    // Keep the padding vector frozen at zero.
    let embed_dim = model.config.embed_dim;
    if let Some(g) = acc.first_mut() {
        let start = PAD_ID as usize * embed_dim;
        g[start..start + embed_dim].fill(T::zero());
    }
    let mut params = model.named_mut();
    adam.step(&mut params, &acc)?;
    Ok(loss_sum)
}

// ── Evaluation ──────────────────────────────────────────────────────────

/// Worker cap for evaluation, from the `AESIM_THREADS` environment
/// variable (default 1).
pub fn eval_threads() -> Result<usize> {
    match std::env::var("AESIM_THREADS") {
        Ok(s) => match s.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(Error::Config(format!(
                "AESIM_THREADS must be a positive integer, got {s:?}"
            ))),
        },
        Err(_) => Ok(1),
    }
}

/// Accuracy over a labeled set, sharded across up to `AESIM_THREADS`
/// workers.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    ds: &Dataset,
    batch_size: usize,
    max_len: Option<usize>,
) -> Result<f64> {
    let batches = make_batches(&ds.pairs, &model.vocab, batch_size, max_len, None)?;
    let threads = eval_threads()?.min(batches.len());
    let correct_of = |batch: &SequenceBatch| -> Result<usize> {
        let logits = model.forward_batch(batch)?;
        Ok(logits
            .iter()
            .zip(batch.labels.iter())
            .filter(|(row, &label)| argmax(row) as u32 == label)
            .count())
    };
    let correct: usize = if threads <= 1 {
        let mut total = 0;
        for b in &batches {
            total += correct_of(b)?;
        }
        total
    } else {
        let results: Vec<Result<usize>> = std::thread::scope(|scope| {
            let handles: Vec<_> = (0..threads)
                .map(|w| {
                    let batches = &batches;
                    let correct_of = &correct_of;
                    scope.spawn(move || {
                        let mut total = 0;
                        for b in batches.iter().skip(w).step_by(threads) {
                            total += correct_of(b)?;
                        }
                        Ok(total)
                    })
                })
                .collect();
            handles.into_iter().map(|h| h.join().expect("eval worker")).collect()
        });
        let mut total = 0;
        for r in results {
            total += r?;
        }
        total
    };
    Ok(correct as f64 / ds.pairs.len() as f64)
}

/// Accuracy of the model on data it was trained on (same signature shape
/// as [`evaluate`], here for call-site clarity).
pub fn train_accuracy<T: Scalar>(
    model: &Model<T>,
    ds: &Dataset,
    batch_size: usize,
) -> Result<f64> {
    evaluate(model, ds, batch_size, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{init_embedding, synthetic_pairs, Vocab};
    use crate::model::{Model, ModelConfig, Variant};

    #[test]
    fn adam_first_step_from_zero_matches_closed_form() {
        // With default betas and unit gradient, the first update is
        // -lr * 1 / (1 + eps): just under the learning rate in magnitude.
        let mut p: Param<f64> = Param::zeros(1, 1);
        let mut adam = AdamState::new(AdamConfig::default());
        let mut params = vec![("theta".to_string(), &mut p)];
        adam.step(&mut params, &[vec![1.0]]).unwrap();
        let got = p.values()[0];
        let want = -0.0005 / (1.0 + 1e-8);
        assert!((got - want).abs() < 1e-12, "got {got}");
        assert!((got + 0.0005).abs() < 1e-9);
    }

    #[test]
    fn adam_bias_correction_keeps_early_steps_near_lr() {
        // Constant gradient: every step should move by about -lr.
        let mut p: Param<f64> = Param::zeros(1, 1);
        let mut adam = AdamState::new(AdamConfig::default());
        for _ in 0..5 {
            let mut params = vec![("theta".to_string(), &mut p)];
            adam.step(&mut params, &[vec![1.0]]).unwrap();
        }
        let got = p.values()[0];
        assert!((got + 5.0 * 0.0005).abs() < 1e-6, "got {got}");
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut p: Param<f64> = Param::zeros(1, 2);
        let mut adam = AdamState::new(AdamConfig::default());
        let mut params = vec![("theta".to_string(), &mut p)];
        let err = adam.step(&mut params, &[vec![1.0, f64::NAN]]).unwrap_err();
        assert!(matches!(err, Error::Training(_)));
    }

    #[test]
    fn adam_rejects_mismatched_slices() {
        let mut p: Param<f64> = Param::zeros(1, 2);
        let mut adam = AdamState::new(AdamConfig::default());
        let mut params = vec![("theta".to_string(), &mut p)];
        assert!(adam.step(&mut params, &[]).is_err());
        let mut params = vec![("theta".to_string(), &mut p)];
        assert!(adam.step(&mut params, &[vec![1.0]]).is_err());
    }

    fn tiny_model(variant: Variant, seed: u64) -> (Model<f64>, Dataset) {
        let ds = synthetic_pairs(24, 17);
        let vocab = Vocab::build(&ds.pairs, 1);
        let config = ModelConfig::new(variant, 5, 4, ds.label_names.clone());
        let (emb, _) = init_embedding::<f64>(&vocab, 5, None, seed).unwrap();
        (Model::new(config, vocab, emb, seed).unwrap(), ds)
    }

    #[test]
    fn loss_drops_over_a_few_epochs() {
        let (mut model, ds) = tiny_model(Variant::Esim, 3);
        let config = TrainConfig {
            epochs: 4,
            batch_size: 8,
            seed: 3,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &ds, &ds, &config).unwrap();
        assert_eq!(report.epochs.len(), 4);
        let first = report.epochs.first().unwrap().train_loss;
        let last = report.epochs.last().unwrap().train_loss;
        assert!(last < first, "loss went {first} -> {last}");
    }

    #[test]
    fn training_is_seed_deterministic() {
        let run = || {
            let (mut model, ds) = tiny_model(Variant::Aesim, 5);
            let config = TrainConfig {
                epochs: 2,
                batch_size: 8,
                seed: 11,
                ..TrainConfig::default()
            };
            let report = train(&mut model, &ds, &ds, &config).unwrap();
            let weights: Vec<f64> = model
                .named()
                .iter()
                .flat_map(|(_, p)| p.values().to_vec())
                .collect();
            (report.epochs.last().unwrap().train_loss, weights)
        };
        let (loss_a, w_a) = run();
        let (loss_b, w_b) = run();
        assert_eq!(loss_a, loss_b);
        assert_eq!(w_a, w_b);
    }

    #[test]
    fn pad_row_stays_zero_through_training() {
        let (mut model, ds) = tiny_model(Variant::Aesim, 7);
        assert!(crate::model::pad_is_zero_row(&model));
        let config = TrainConfig {
            epochs: 2,
            batch_size: 8,
            seed: 7,
            ..TrainConfig::default()
        };
        train(&mut model, &ds, &ds, &config).unwrap();
        assert!(crate::model::pad_is_zero_row(&model));
    }

    #[test]
    fn zero_epochs_is_a_no_op() {
        let (mut model, ds) = tiny_model(Variant::Esim, 9);
        let before: Vec<f64> = model
            .named()
            .iter()
            .flat_map(|(_, p)| p.values().to_vec())
            .collect();
        let config = TrainConfig {
            epochs: 0,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &ds, &ds, &config).unwrap();
        assert!(report.epochs.is_empty());
        assert!(report.best_epoch.is_none());
        let after: Vec<f64> = model
            .named()
            .iter()
            .flat_map(|(_, p)| p.values().to_vec())
            .collect();
        assert_eq!(before, after);
    }

    #[test]
    fn patience_stops_early_and_restores_best() {
        let (mut model, ds) = tiny_model(Variant::Esim, 13);
        let config = TrainConfig {
            epochs: 50,
            batch_size: 8,
            patience: Some(2),
            seed: 13,
            ..TrainConfig::default()
        };
        let report = train(&mut model, &ds, &ds, &config).unwrap();
        // Either it ran to the end improving steadily or it stopped early;
        // in both cases the restored weights must score the best accuracy.
        let acc = evaluate(&model, &ds, 8, None).unwrap();
        assert!((acc - report.best_dev_accuracy).abs() < 1e-12);
        if report.epochs.len() < 50 {
            let last = report.epochs.last().unwrap().epoch;
            assert!(last - report.best_epoch.unwrap() >= 2);
        }
    }

    #[test]
    fn evaluate_matches_manual_count() {
        let (model, ds) = tiny_model(Variant::Esim, 15);
        let batch = crate::data::SequenceBatch::from_pairs(&ds.pairs, &model.vocab, None).unwrap();
        let preds = model.predict_batch(&batch).unwrap();
        let manual = preds
            .iter()
            .zip(ds.pairs.iter())
            .filter(|(&p, pair)| p == pair.label)
            .count() as f64
            / ds.pairs.len() as f64;
        let acc = evaluate(&model, &ds, 8, None).unwrap();
        assert!((acc - manual).abs() < 1e-12);
    }

    #[test]
    fn label_mismatch_is_rejected() {
        let (mut model, _) = tiny_model(Variant::Esim, 1);
        let mut ds = synthetic_pairs(6, 1);
        ds.label_names = vec!["yes".into(), "no".into()];
        let config = TrainConfig::default();
        assert!(matches!(
            train(&mut model, &ds, &ds, &config),
            Err(Error::Data(_))
        ));
    }
}
