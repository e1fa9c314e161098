use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_xoshiro::SplitMix64;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::metrics::{evaluate, MetricsReport};
use crate::data::{DatasetBundle, Sample};
use crate::error::{arg, QcmmError, Result};
use crate::grad::backward;
use crate::model::{AblationMode, ParamStore};
use crate::qcnn::N_CLASSES;

/// Adam with bias correction; masked coordinates are never touched.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], mask: &[bool]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            if !mask[i] {
                continue;
            }
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// Training order for one epoch: Fisher-Yates over `indices`, driven by
/// SplitMix64 seeded with `seed + epoch`.
pub fn epoch_order(indices: &[usize], seed: u64, epoch: usize) -> Vec<usize> {
    let mut rng = SplitMix64::seed_from_u64(seed.wrapping_add(epoch as u64));
    let mut order = indices.to_vec();
    for i in (1..order.len()).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
    order
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub store: ParamStore,
    pub history: Vec<EpochRecord>,
}

/// Initialise from `config.seed` and run Adam on the mean batch loss.
pub fn train(config: &TrainConfig, bundle: &DatasetBundle) -> Result<TrainOutcome> {
    config.validate()?;
    bundle.validate()?;
    if bundle.spec.n_classes != N_CLASSES {
        return arg(format!(
            "the classifier reads out {N_CLASSES} classes; the bundle has {}",
            bundle.spec.n_classes
        ));
    }
    if bundle.split.train.is_empty() {
        return arg("the training split is empty");
    }
    let spec = config.model_spec(bundle);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::init(&spec, &mut rng)?;
    store.fit_inputs(bundle)?;

    let mask = store.trainable_mask();
    let mut flat = store.flatten();
    let mut adam = Adam::new(flat.len(), config.learning_rate);
    let mut history = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let order = epoch_order(&bundle.split.train, config.seed, epoch);
        let mut total = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &bundle.samples[i]).collect();
            let step = backward(&batch, &store, config.exec).map_err(|e| match e {
                QcmmError::Training(msg) => QcmmError::Training(format!("epoch {epoch}, batch {b}: {msg}")),
                other => other,
            })?;
            if !step.loss.is_finite() {
                return Err(QcmmError::Training(format!(
                    "non-finite loss {} at epoch {epoch}, batch {b} (samples {chunk:?})",
                    step.loss
                )));
            }
            total += step.loss * chunk.len() as f64;
            adam.step(&mut flat, &step.gradient, &mask);
            store.set_flat(&flat)?;
        }
        history.push(EpochRecord {
            epoch,
            mean_loss: total / order.len() as f64,
        });
    }
    Ok(TrainOutcome { store, history })
}

/// Train under an ablation mode and report test metrics.
pub fn ablate(config: &TrainConfig, mode: AblationMode, bundle: &DatasetBundle) -> Result<(TrainOutcome, MetricsReport)> {
    let config = TrainConfig {
        ablation_mode: mode,
        ..config.clone()
    };
    let outcome = train(&config, bundle)?;
    let report = evaluate(&outcome.store, bundle, config.exec)?;
    Ok((outcome, report))
}

/// `epoch,mean_loss` lines with a header.
pub fn history_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,mean_loss\n");
    for r in history {
        out.push_str(&format!("{},{}\n", r.epoch, r.mean_loss));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ansatz::KernelName;
    use crate::data::{synth_generate, Split, SynthSpec};
    use crate::grad::backward;
    use crate::model::ModelSpec;
    use rand::Rng;

    fn small_bundle(seed: u64) -> DatasetBundle {
        let spec = SynthSpec {
            n_per_class: 8,
            d: 4,
            ..SynthSpec::default()
        };
        synth_generate(&spec, seed).unwrap()
    }

    fn small_config() -> TrainConfig {
        TrainConfig {
            d: 4,
            hidden: 6,
            blocks: 1,
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn shuffle_is_a_seeded_permutation() {
        let idx: Vec<usize> = (0..50).collect();
        let a = epoch_order(&idx, 7, 0);
        assert_eq!(a, epoch_order(&idx, 7, 0));
        assert_ne!(a, epoch_order(&idx, 7, 1));
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, idx);
    }

    #[test]
    fn zero_epochs_returns_the_initialisation() {
        let bundle = small_bundle(1);
        let config = TrainConfig {
            epochs: 0,
            ..small_config()
        };
        let out = train(&config, &bundle).unwrap();
        let spec = config.model_spec(&bundle);
        let init = ParamStore::init(&spec, &mut ChaCha8Rng::seed_from_u64(config.seed)).unwrap();
        assert_eq!(out.store.flatten(), init.flatten());
        assert!(out.history.is_empty());
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let bundle = small_bundle(2);
        let a = train(&small_config(), &bundle).unwrap();
        let b = train(&small_config(), &bundle).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.store.flatten(), b.store.flatten());
    }

    #[test]
    fn frozen_fusion_never_moves() {
        let bundle = small_bundle(3);
        let config = TrainConfig {
            ablation_mode: AblationMode::FixedFusion,
            ..small_config()
        };
        let out = train(&config, &bundle).unwrap();
        assert!(out.store.fusion.as_ref().unwrap().thetas.iter().all(|&t| t == std::f64::consts::PI));
    }

    #[test]
    fn loss_decreases_over_five_adam_steps() {
        // two linearly separable features per modality; labels from their signs
        let mut rng = ChaCha8Rng::seed_from_u64(998244353);
        let samples: Vec<Sample> = (0..32)
            .map(|i| {
                let label = i % N_CLASSES;
                let (hi, lo) = ((label >> 1) as f64, (label & 1) as f64);
                let mut jitter = || rng.random_range(-0.2..0.2);
                Sample {
                    x_h: vec![2.0 * hi - 1.0 + jitter(), jitter()],
                    x_l: vec![2.0 * lo - 1.0 + jitter(), jitter()],
                    label,
                }
            })
            .collect();
        let bundle = DatasetBundle::new(
            samples,
            Split {
                train: (0..32).collect(),
                test: vec![],
            },
            N_CLASSES,
        )
        .unwrap();
        let spec = ModelSpec::toy(KernelName::SO4);
        let mut store = ParamStore::init(&spec, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let batch: Vec<&Sample> = bundle.samples.iter().collect();
        let mask = store.trainable_mask();
        let mut flat = store.flatten();
        let mut adam = Adam::new(flat.len(), TrainConfig::default().learning_rate);
        let mut losses = Vec::new();
        for _ in 0..6 {
            let g = backward(&batch, &store, Default::default()).unwrap();
            losses.push(g.loss);
            adam.step(&mut flat, &g.gradient, &mask);
            store.set_flat(&flat).unwrap();
        }
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "{losses:?}");
        }
    }

    #[test]
    fn rejects_wrong_class_count_and_empty_split() {
        let mut bundle = small_bundle(4);
        bundle.split.train.clear();
        bundle.split.test = (0..bundle.len()).collect();
        assert!(train(&small_config(), &bundle).is_err());
    }

    #[test]
    fn history_csv_format() {
        let csv = history_csv(&[EpochRecord { epoch: 0, mean_loss: 1.5 }]);
        assert_eq!(csv, "epoch,mean_loss\n0,1.5\n");
    }
}
