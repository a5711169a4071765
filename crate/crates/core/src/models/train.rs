use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{Arch, ArchParams, Classifier, Grads};
use crate::metrics::threshold_for_fp;
use crate::nn::{Adam, Tensor};
use crate::rng::{derive_seed, seeded, SeededRng};
use crate::traffic::{Dataset, Flow, FlowPair};
use crate::{Error, Result};

/// One model input with its label (class index, or 0/1 for pairs).
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub x: Tensor,
    pub y: usize,
}

impl Sample {
    pub fn from_flows(ds: &Dataset<Flow>) -> Vec<Sample> {
        ds.samples
            .iter()
            .map(|f| Sample {
                x: f.features(ds.fixed_length),
                y: f.label,
            })
            .collect()
    }

    pub fn from_pairs(ds: &Dataset<FlowPair>) -> Vec<Sample> {
        ds.samples
            .iter()
            .map(|p| Sample {
                x: p.features(),
                y: p.label as usize,
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub params: Option<ArchParams>,
    /// False-positive rate the pair threshold is tuned for.
    pub target_fp: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            params: None,
            target_fp: 1e-2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub arch: Arch,
    pub epochs: usize,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Pair scorer only: (target FP, TP on test positives at that FP).
    pub tp_at_fp: Option<(f64, f64)>,
    pub seed: u64,
}

/// Mini-batch optimiser state for a classifier.
pub struct Trainer {
    opts: Vec<Adam>,
    pub batch_size: usize,
    rng: SeededRng,
}

impl Trainer {
    pub fn new(model: &Classifier, learning_rate: f64, batch_size: usize, seed: u64) -> Self {
        Self {
            opts: model.nets.iter().map(|n| Adam::new(n.param_count(), learning_rate)).collect(),
            batch_size: batch_size.max(1),
            rng: seeded(seed),
        }
    }

    pub fn apply(&mut self, model: &mut Classifier, grads: &Grads) {
        for ((opt, net), g) in self.opts.iter_mut().zip(model.nets.iter_mut()).zip(&grads.0) {
            opt.step(&mut net.params, g);
        }
    }

    /// One pass over `data` in shuffled mini-batches. `per_sample` adds the
    /// sample's loss gradient into the batch buffer and returns its loss.
    pub fn epoch_with<F>(&mut self, model: &mut Classifier, data: &[Sample], mut per_sample: F) -> f64
    where
        F: FnMut(&Classifier, &Sample, &mut Grads) -> f64,
    {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut self.rng);
        let mut total = 0.0;
        for batch in order.chunks(self.batch_size) {
            let mut grads = Grads::zeros_like(model);
            for &i in batch {
                total += per_sample(model, &data[i], &mut grads);
            }
            grads.scale(1.0 / batch.len() as f64);
            self.apply(model, &grads);
        }
        total / data.len().max(1) as f64
    }

    pub fn epoch(&mut self, model: &mut Classifier, data: &[Sample]) -> f64 {
        self.epoch_with(model, data, |m, s, g| m.loss_and_backward(&s.x, s.y, Some(g), false).0)
    }

    pub fn rng(&mut self) -> &mut SeededRng {
        &mut self.rng
    }
}

pub fn accuracy(model: &Classifier, data: &[Sample]) -> f64 {
    if data.is_empty() {
        return 0.0;
    }
    let hits = data.iter().filter(|s| model.predict(&s.x) == s.y).count();
    hits as f64 / data.len() as f64
}

/// Sets the pair threshold for `fp` on validation negatives and returns the
/// test TP at that threshold.
pub(crate) fn calibrate_pair(model: &mut Classifier, validation: &[Sample], test: &[Sample], fp: f64) -> Result<f64> {
    let negatives: Vec<f64> = validation.iter().filter(|s| s.y == 0).map(|s| model.score(&s.x)).collect();
    let threshold = threshold_for_fp(&negatives, fp)?;
    model.threshold = Some(threshold);
    let positives: Vec<&Sample> = test.iter().filter(|s| s.y == 1).collect();
    if positives.is_empty() {
        return Err(Error::Empty("no associated pairs in test split".into()));
    }
    let tp = positives.iter().filter(|s| model.score(&s.x) > threshold).count();
    Ok(tp as f64 / positives.len() as f64)
}

fn check_channels(arch: Arch, data: &[Sample]) -> Result<()> {
    let want = arch.input_channels();
    match data.iter().find(|s| s.x.channels != want) {
        Some(s) => Err(Error::Config(format!(
            "{arch} expects {want}-row features, got {} rows",
            s.x.channels
        ))),
        None => Ok(()),
    }
}

/// Trains a fresh classifier with Adam on cross-entropy (binary for pairs).
/// Deterministic in `seed`. The pair scorer's threshold is calibrated on the
/// validation split at `cfg.target_fp`.
pub fn train_classifier(
    arch: Arch,
    train: &[Sample],
    validation: &[Sample],
    test: &[Sample],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(Classifier, TrainReport)> {
    if train.is_empty() {
        return Err(Error::Empty("training split".into()));
    }
    check_channels(arch, train)?;
    check_channels(arch, validation)?;
    check_channels(arch, test)?;
    let length = train[0].x.len;
    let class_count = train.iter().chain(test).map(|s| s.y + 1).max().unwrap_or(2).max(2);
    let params = cfg.params.clone().unwrap_or_else(|| ArchParams::default_for(arch));
    let mut model = Classifier::new(arch, params, length, class_count, &mut seeded(derive_seed(seed, 1)));
    let mut trainer = Trainer::new(&model, cfg.learning_rate, cfg.batch_size, derive_seed(seed, 2));
    for _ in 0..cfg.epochs {
        trainer.epoch(&mut model, train);
    }
    let tp_at_fp = if arch.is_pair() {
        Some((cfg.target_fp, calibrate_pair(&mut model, validation, test, cfg.target_fp)?))
    } else {
        None
    };
    let report = TrainReport {
        arch,
        epochs: cfg.epochs,
        train_accuracy: accuracy(&model, train),
        test_accuracy: accuracy(&model, test),
        tp_at_fp,
        seed,
    };
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traffic::synth_corpus;

    fn small() -> (Vec<Sample>, Vec<Sample>) {
        let mut ds = synth_corpus(4, 30, (80, 140), 5);
        ds.fixed_length = 100;
        let s = ds.split_stratified(0.0, 0.3, 1);
        (Sample::from_flows(&s.train), Sample::from_flows(&s.test))
    }

    #[test]
    fn zero_epochs_is_near_chance() {
        let mut ds = synth_corpus(10, 20, (80, 140), 5);
        ds.fixed_length = 100;
        let data = Sample::from_flows(&ds);
        let cfg = TrainConfig {
            epochs: 0,
            ..TrainConfig::default()
        };
        let (_, r) = train_classifier(Arch::DirectionCnn, &data, &[], &data, &cfg, 1).unwrap();
        assert!((r.test_accuracy - 0.1).abs() <= 0.1, "{}", r.test_accuracy);
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let (train, test) = small();
        let cfg = TrainConfig {
            epochs: 15,
            ..TrainConfig::default()
        };
        let (a, ra) = train_classifier(Arch::DirectionCnn, &train, &[], &test, &cfg, 4).unwrap();
        let (b, _) = train_classifier(Arch::DirectionCnn, &train, &[], &test, &cfg, 4).unwrap();
        assert_eq!(a.nets, b.nets);
        assert!(ra.train_accuracy > 0.5, "{ra:?}");
    }

    #[test]
    fn pair_model_rejects_flow_features() {
        let (train, test) = small();
        let err = train_classifier(Arch::PairCnn, &train, &[], &test, &TrainConfig::default(), 1).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
    }
}
