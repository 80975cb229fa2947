//! Minibatch training loop: shuffled epochs over the train split, Adam
//! updates, per-epoch train/validation losses, best-checkpoint tracking.
//! Deterministic for a given seed.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, SampleSequence, Split};

use super::adam::{adam_step, AdamConfig, AdamState};
use super::backward::gradients;
use super::forward::{assemble_batch, batch_loss};
use super::{ModelError, ModelParams, ModelSpec};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub teacher_forcing: bool,
    /// Stop early once the epoch train loss drops below this value.
    pub stop_at_train_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.0003,
            epochs: 200,
            batch_size: 32,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            teacher_forcing: true,
            stop_at_train_loss: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainResult {
    /// Parameters at the best validation loss seen.
    pub params: ModelParams,
    pub curve: Vec<CurvePoint>,
    pub best_epoch: usize,
    pub best_val: f64,
}

/// Learning curve as "epoch,train_nll,val_nll" CSV.
pub fn curve_to_csv(curve: &[CurvePoint]) -> String {
    let mut s = String::from("epoch,train_nll,val_nll\n");
    for p in curve {
        s.push_str(&format!("{},{},{}\n", p.epoch, p.train_loss, p.val_loss));
    }
    s
}

fn eval_split(
    params: &ModelParams,
    samples: &[&SampleSequence],
    dataset: &Dataset,
    batch_size: usize,
) -> Result<f64, ModelError> {
    let mut total = 0.0;
    let mut count = 0usize;
    for chunk in samples.chunks(batch_size) {
        let batch = assemble_batch(chunk, &params.spec, &dataset.spec)?;
        total += batch_loss(params, &batch)? * chunk.len() as f64;
        count += chunk.len();
    }
    Ok(total / count as f64)
}

pub fn train(
    dataset: &Dataset,
    spec: ModelSpec,
    cfg: &TrainConfig,
) -> Result<TrainResult, ModelError> {
    spec.validate()?;
    let train_idx = dataset.indices_of(Split::Train);
    if train_idx.is_empty() {
        return Err(ModelError::EmptyDataset("train split is empty".into()));
    }
    let val_idx = dataset.indices_of(Split::Val);
    let val_refs: Vec<&SampleSequence> = val_idx.iter().map(|i| &dataset.samples[*i]).collect();

    let mut params = ModelParams::init(spec, cfg.seed)?;
    let mut state = AdamState::new(spec)?;
    let adam_cfg = AdamConfig {
        learning_rate: cfg.learning_rate,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        epsilon: cfg.epsilon,
    };
    let mut order = train_idx.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);

    let mut curve = Vec::with_capacity(cfg.epochs);
    let mut best_params = params.clone();
    let mut best_metric = f64::INFINITY;
    let mut best_epoch = 0usize;

    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut train_total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let refs: Vec<&SampleSequence> =
                chunk.iter().map(|i| &dataset.samples[*i]).collect();
            let batch = assemble_batch(&refs, &spec, &dataset.spec)?;
            let (loss, grads) = gradients(&params, &batch, cfg.teacher_forcing)?;
            adam_step(&mut params, &grads, &mut state, &adam_cfg);
            train_total += loss * refs.len() as f64;
        }
        let train_loss = train_total / order.len() as f64;
        let val_loss = if val_refs.is_empty() {
            train_loss
        } else {
            eval_split(&params, &val_refs, dataset, cfg.batch_size)?
        };
        curve.push(CurvePoint { epoch, train_loss, val_loss });

        if val_loss < best_metric {
            best_metric = val_loss;
            best_params = params.clone();
            best_epoch = epoch;
        }
        if let Some(threshold) = cfg.stop_at_train_loss {
            if train_loss < threshold {
                break;
            }
        }
    }
    Ok(TrainResult { params: best_params, curve, best_epoch, best_val: best_metric })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::GridSpec;
    use crate::geom::{Pose2, Vec2};
    use crate::model::forward::{predict, DecodeMode};
    use crate::model::Head;
    use rand::Rng;

    fn memorization_dataset(n: usize, seed: u64) -> (Dataset, GridSpec) {
        let grid = GridSpec { width: 6, height: 6, resolution: 0.2 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let tau_i = 2;
        let tau_o = 3;
        let samples: Vec<SampleSequence> = (0..n)
            .map(|k| SampleSequence {
                run_id: k as u32,
                anchor: Pose2::new(0.0, 0.0, 0.0),
                windows: (0..=tau_i)
                    .map(|_| (0..grid.n_classes()).map(|_| rng.gen_range(-1i8..=1)).collect())
                    .collect(),
                ref_window: (0..tau_i + tau_o + 1)
                    .map(|_| Vec2::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
                    .collect(),
                labels: (0..tau_o).map(|_| rng.gen_range(0..grid.n_classes() as u32)).collect(),
            })
            .collect();
        let splits = vec![Split::Train; n];
        (
            Dataset { spec: grid, tau_i, tau_o, samples, splits },
            grid,
        )
    }

    #[test]
    fn memorizes_a_small_set() {
        let (dataset, grid) = memorization_dataset(6, 11);
        let spec = ModelSpec::for_grid(&grid, dataset.tau_i, dataset.tau_o, 32, 12, Head::Classification);
        let cfg = TrainConfig {
            learning_rate: 0.01,
            epochs: 600,
            batch_size: 6,
            seed: 1,
            stop_at_train_loss: Some(0.01),
            ..TrainConfig::default()
        };
        let result = train(&dataset, spec, &cfg).unwrap();
        let final_train = result.curve.last().unwrap().train_loss;
        assert!(final_train < 0.01, "train loss {final_train}");
        // Trained model reproduces every label sequence under greedy decode.
        for s in &dataset.samples {
            let pred = predict(
                &result.params,
                &grid,
                &s.windows,
                &s.ref_window,
                s.anchor,
                DecodeMode::Greedy,
            )
            .unwrap();
            assert_eq!(pred.classes, s.labels);
        }
    }

    #[test]
    fn curve_length_matches_epochs_without_early_stop() {
        let (dataset, grid) = memorization_dataset(4, 2);
        let spec = ModelSpec::for_grid(&grid, dataset.tau_i, dataset.tau_o, 8, 4, Head::Classification);
        let cfg = TrainConfig { epochs: 7, batch_size: 4, ..TrainConfig::default() };
        let result = train(&dataset, spec, &cfg).unwrap();
        assert_eq!(result.curve.len(), 7);
        for (i, p) in result.curve.iter().enumerate() {
            assert_eq!(p.epoch, i);
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (dataset, grid) = memorization_dataset(5, 3);
        let spec = ModelSpec::for_grid(&grid, dataset.tau_i, dataset.tau_o, 16, 8, Head::Classification);
        let cfg = TrainConfig { epochs: 12, batch_size: 2, seed: 9, ..TrainConfig::default() };
        let a = train(&dataset, spec, &cfg).unwrap();
        let b = train(&dataset, spec, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.curve.len(), b.curve.len());
        for (x, y) in a.curve.iter().zip(&b.curve) {
            assert_eq!(x.train_loss, y.train_loss);
            assert_eq!(x.val_loss, y.val_loss);
        }
    }

    #[test]
    fn empty_train_split_is_rejected() {
        let (mut dataset, grid) = memorization_dataset(3, 4);
        for s in &mut dataset.splits {
            *s = Split::Test;
        }
        let spec = ModelSpec::for_grid(&grid, dataset.tau_i, dataset.tau_o, 8, 4, Head::Classification);
        assert!(matches!(
            train(&dataset, spec, &TrainConfig::default()),
            Err(ModelError::EmptyDataset(_))
        ));
    }

    #[test]
    fn best_checkpoint_loss_is_monotone_over_prefixes() {
        let (dataset, grid) = memorization_dataset(6, 5);
        let spec = ModelSpec::for_grid(&grid, dataset.tau_i, dataset.tau_o, 16, 8, Head::Classification);
        let base = TrainConfig { learning_rate: 0.01, batch_size: 3, seed: 2, ..TrainConfig::default() };
        let mut last_best = f64::INFINITY;
        for epochs in [5, 15, 40, 90] {
            let cfg = TrainConfig { epochs, ..base };
            let r = train(&dataset, spec, &cfg).unwrap();
            assert!(r.best_val <= last_best + 1e-12, "best-so-far regressed at {epochs} epochs");
            last_best = r.best_val;
        }
    }
}
