//! Countermeasures against blind perturbations and robust-accuracy
//! evaluation under an adaptive attacker.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::generator::{train_blind_perturbation, AttackConfig, Layout, PerturbationGenerator, Prepared};
use crate::models::calibrate_pair;
use crate::models::{Arch, ArchParams, Classifier, Grads, Sample, TrainConfig, Trainer};
use crate::nn::Tensor;
use crate::rng::{derive_seed, seeded};
use crate::traffic::DIR_ROW;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DefenseKind {
    TailoredAdvtrain,
    FlipAdvtrain,
    InputGradientReg,
    RegionClassification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DefenseConfig {
    pub kind: DefenseKind,
    /// Weight of the input-gradient penalty.
    pub lambda: f64,
    /// Directions flipped per vote in region classification; defaults to
    /// `ceil(0.025 * L)`.
    pub radius: Option<usize>,
    pub votes: usize,
    /// Directions flipped per augmented copy in flip training; defaults to
    /// the region radius.
    pub flip_count: Option<usize>,
    pub epochs: usize,
    /// Attacks re-trained against the model after every tailored epoch.
    pub attack_grid: Vec<AttackConfig>,
    pub seed: u64,
}

impl Default for DefenseConfig {
    fn default() -> Self {
        Self {
            kind: DefenseKind::TailoredAdvtrain,
            lambda: 10.0,
            radius: None,
            votes: 25,
            flip_count: None,
            epochs: 10,
            attack_grid: Vec::new(),
            seed: 0,
        }
    }
}

pub fn default_radius(length: usize) -> usize {
    (0.025 * length as f64).ceil() as usize
}

impl DefenseConfig {
    pub fn radius_for(&self, length: usize) -> usize {
        self.radius.unwrap_or_else(|| default_radius(length))
    }

    pub fn flip_count_for(&self, length: usize) -> usize {
        self.flip_count.unwrap_or_else(|| self.radius_for(length))
    }

    pub fn validate(&self, length: usize) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(self.lambda > 0.0) {
            return bad("lambda must be positive");
        }
        if self.votes == 0 {
            return bad("votes must be at least 1");
        }
        if self.radius_for(length) > length {
            return bad("radius exceeds the input length");
        }
        if self.flip_count_for(length) > length {
            return bad("flip_count exceeds the input length");
        }
        Ok(())
    }
}

fn fresh(arch: Arch, train: &[Sample], cfg: &TrainConfig, seed: u64) -> Result<(Classifier, Trainer)> {
    let first = train.first().ok_or_else(|| Error::Empty("training split".into()))?;
    if first.x.channels != arch.input_channels() {
        return Err(Error::Config(format!("{arch} expects {}-row features", arch.input_channels())));
    }
    let class_count = train.iter().map(|s| s.y + 1).max().unwrap_or(2).max(2);
    let params = cfg.params.clone().unwrap_or_else(|| ArchParams::default_for(arch));
    let model = Classifier::new(arch, params, first.x.len, class_count, &mut seeded(derive_seed(seed, 1)));
    let trainer = Trainer::new(&model, cfg.learning_rate, cfg.batch_size, derive_seed(seed, 2));
    Ok((model, trainer))
}

fn finish(mut model: Classifier, cfg: &TrainConfig, validation: &[Sample]) -> Result<Classifier> {
    if model.arch.is_pair() {
        calibrate_pair(&mut model, validation, validation, cfg.target_fp)?;
    }
    Ok(model)
}

/// Adversarial training with blind perturbations: after each epoch every
/// attack in `grid` is re-trained against the current model and the
/// training set is extended with one perturbed copy of every original
/// sample per attack.
pub fn tailored_adversarial_training(
    arch: Arch,
    train: &[Sample],
    validation: &[Sample],
    grid: &[AttackConfig],
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Classifier> {
    let (mut model, mut trainer) = fresh(arch, train, cfg, seed)?;
    let mut data = train.to_vec();
    for epoch in 0..cfg.epochs {
        trainer.epoch(&mut model, &data);
        for (k, attack) in grid.iter().enumerate() {
            let attack = AttackConfig {
                seed: derive_seed(attack.seed, (epoch * grid.len() + k) as u64),
                ..attack.clone()
            };
            let gen = train_blind_perturbation(&model, train, &attack)?.generator;
            data.extend(perturb_all(&gen, train, derive_seed(seed, 100 + epoch as u64))?);
        }
    }
    finish(model, cfg, validation)
}

/// Copies of `data` under perturbations of `gen`, one trigger per sample.
pub fn perturb_all(gen: &PerturbationGenerator, data: &[Sample], seed: u64) -> Result<Vec<Sample>> {
    let mut rng = seeded(seed);
    data.iter()
        .map(|s| {
            let p = gen.generate(&PerturbationGenerator::trigger(&mut rng));
            let x = Prepared::new(&gen.config, gen.layout, &p)?.apply(&s.x)?.x;
            Ok(Sample { x, y: s.y })
        })
        .collect()
}

/// Sign-flips `count` randomly chosen non-pad direction entries.
pub fn flip_directions<R: Rng + ?Sized>(x: &Tensor, count: usize, rng: &mut R) -> Result<Tensor> {
    let real: Vec<usize> = (0..x.len).filter(|&j| x.row(DIR_ROW)[j] != 0.0).collect();
    if count > real.len() {
        return Err(Error::Config(format!("cannot flip {count} of {} packets", real.len())));
    }
    let mut out = x.clone();
    for k in sample(rng, real.len(), count) {
        let v = &mut out.row_mut(DIR_ROW)[real[k]];
        *v = -*v;
    }
    Ok(out)
}

/// Training where every sample is paired with a copy carrying
/// `flip_count` random direction flips.
pub fn flip_adversarial_training(
    arch: Arch,
    train: &[Sample],
    validation: &[Sample],
    flip_count: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Classifier> {
    if arch.is_pair() {
        return Err(Error::Config("flip training applies to flow classifiers".into()));
    }
    if let Some(s) = train.first() {
        if flip_count > s.x.len {
            return Err(Error::Config(format!("flip_count {flip_count} exceeds length {}", s.x.len)));
        }
    }
    let (mut model, mut trainer) = fresh(arch, train, cfg, seed)?;
    let mut rng = seeded(derive_seed(seed, 3));
    for _ in 0..cfg.epochs {
        if flip_count == 0 {
            trainer.epoch(&mut model, train);
            continue;
        }
        let mut err = None;
        trainer.epoch_with(&mut model, train, |m, s, g| {
            let clean = m.loss_and_backward(&s.x, s.y, Some(&mut *g), false).0;
            let count = flip_count.min(real_count(&s.x));
            match flip_directions(&s.x, count, &mut rng) {
                Ok(x) => 0.5 * (clean + m.loss_and_backward(&x, s.y, Some(g), false).0),
                Err(e) => {
                    err = Some(e);
                    clean
                }
            }
        });
        if let Some(e) = err {
            return Err(e);
        }
    }
    finish(model, cfg, validation)
}

fn real_count(x: &Tensor) -> usize {
    x.row(DIR_ROW).iter().filter(|v| **v != 0.0).count()
}

/// Input-space step used for the curvature-vector product of the penalty.
const PENALTY_STEP: f64 = 1e-4;

/// Loss plus `lambda` times the squared input-gradient norm for one sample,
/// accumulating its parameter gradient into `grads`. The penalty gradient
/// is a central difference of parameter gradients along the input gradient.
pub fn penalized_loss_and_backward(model: &Classifier, s: &Sample, lambda: f64, grads: &mut Grads) -> f64 {
    let (loss, g) = model.loss_and_backward(&s.x, s.y, Some(grads), true);
    let g = g.unwrap();
    let norm_sq = g.norm_sq();
    let norm = norm_sq.sqrt();
    if norm > 0.0 && lambda > 0.0 {
        let shifted = |sign: f64| {
            let mut x = s.x.clone();
            for (v, d) in x.data.iter_mut().zip(&g.data) {
                *v += sign * PENALTY_STEP * d / norm;
            }
            let mut gp = Grads::zeros_like(model);
            model.loss_and_backward(&x, s.y, Some(&mut gp), false);
            gp
        };
        let mut diff = shifted(1.0);
        diff.add_scaled(&shifted(-1.0), -1.0);
        grads.add_scaled(&diff, lambda * norm / PENALTY_STEP);
    }
    loss + lambda * norm_sq
}

/// Training on cross-entropy plus `lambda` times the squared norm of the
/// loss gradient w.r.t. the input.
pub fn gradient_regularized_training(
    arch: Arch,
    train: &[Sample],
    validation: &[Sample],
    lambda: f64,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<Classifier> {
    if !(lambda > 0.0) {
        return Err(Error::Config("lambda must be positive".into()));
    }
    let (mut model, mut trainer) = fresh(arch, train, cfg, seed)?;
    for _ in 0..cfg.epochs {
        trainer.epoch_with(&mut model, train, |m, s, g| penalized_loss_and_backward(m, s, lambda, g));
    }
    finish(model, cfg, validation)
}

/// Mean L2 norm of the loss gradient w.r.t. the input.
pub fn mean_input_gradient_norm(model: &Classifier, data: &[Sample]) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::Empty("gradient-norm set".into()));
    }
    let mut total = 0.0;
    for s in data {
        total += model.loss_gradient(&s.x, s.y)?.norm_sq().sqrt();
    }
    Ok(total / data.len() as f64)
}

/// Majority class over `votes` copies of `x`, each with `radius` random
/// direction flips; ties go to the lowest class.
pub fn region_classify(model: &Classifier, x: &Tensor, radius: usize, votes: usize, seed: u64) -> Result<usize> {
    model.check_input(x)?;
    if radius == 0 {
        return Ok(model.predict(x));
    }
    let mut rng = seeded(seed);
    let mut counts = vec![0usize; model.class_count];
    for _ in 0..votes.max(1) {
        counts[model.predict(&flip_directions(x, radius, &mut rng)?)] += 1;
    }
    let best = *counts.iter().max().unwrap();
    Ok(counts.iter().position(|&c| c == best).unwrap())
}

/// How a defended model turns an input into a class.
#[derive(Clone, Debug)]
pub enum Predictor {
    Plain,
    Region { radius: usize, votes: usize, seed: u64 },
}

impl Predictor {
    pub fn predict(&self, model: &Classifier, x: &Tensor, index: usize) -> Result<usize> {
        match *self {
            Self::Plain => model.try_predict(x),
            Self::Region { radius, votes, seed } => region_classify(model, x, radius, votes, derive_seed(seed, index as u64)),
        }
    }
}

/// Accuracy of `predictor` on `test`, clean or under `prepared`.
pub fn accuracy_with(model: &Classifier, predictor: &Predictor, test: &[Sample], prepared: Option<&Prepared>) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::Empty("evaluation set".into()));
    }
    let mut hits = 0;
    for (i, s) in test.iter().enumerate() {
        let x = match prepared {
            Some(p) => p.apply(&s.x)?.x,
            None => s.x.clone(),
        };
        hits += usize::from(predictor.predict(model, &x, i)? == s.y);
    }
    Ok(hits as f64 / test.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustReport {
    pub clean_accuracy: f64,
    pub robust_accuracy: f64,
}

/// Trains `attack` afresh against `model` and measures accuracy on `test`
/// under one sampled perturbation.
pub fn robust_accuracy(
    model: &Classifier,
    predictor: &Predictor,
    attack_train: &[Sample],
    test: &[Sample],
    attack: &AttackConfig,
    trigger_seed: u64,
) -> Result<RobustReport> {
    let gen = train_blind_perturbation(model, attack_train, attack)?.generator;
    let prepared = Prepared::new(&gen.config, Layout::of(model), &gen.sample(trigger_seed))?;
    Ok(RobustReport {
        clean_accuracy: accuracy_with(model, predictor, test, None)?,
        robust_accuracy: accuracy_with(model, predictor, test, Some(&prepared))?,
    })
}

/// Builds the defended model described by `cfg` and the predictor to use
/// with it.
pub fn defend(
    arch: Arch,
    train: &[Sample],
    validation: &[Sample],
    cfg: &DefenseConfig,
    train_cfg: &TrainConfig,
) -> Result<(Classifier, Predictor)> {
    let length = train.first().ok_or_else(|| Error::Empty("training split".into()))?.x.len;
    cfg.validate(length)?;
    let tc = TrainConfig {
        epochs: cfg.epochs,
        ..train_cfg.clone()
    };
    let plain = |m| Ok((m, Predictor::Plain));
    match cfg.kind {
        DefenseKind::TailoredAdvtrain => {
            if cfg.attack_grid.is_empty() {
                return Err(Error::Empty("attack grid".into()));
            }
            plain(tailored_adversarial_training(arch, train, validation, &cfg.attack_grid, &tc, cfg.seed)?)
        }
        DefenseKind::FlipAdvtrain => plain(flip_adversarial_training(arch, train, validation, cfg.flip_count_for(length), &tc, cfg.seed)?),
        DefenseKind::InputGradientReg => plain(gradient_regularized_training(arch, train, validation, cfg.lambda, &tc, cfg.seed)?),
        DefenseKind::RegionClassification => {
            let mut model = fresh(arch, train, &tc, cfg.seed)?;
            for _ in 0..tc.epochs {
                model.1.epoch(&mut model.0, train);
            }
            let model = finish(model.0, &tc, validation)?;
            Ok((
                model,
                Predictor::Region {
                    radius: cfg.radius_for(length),
                    votes: cfg.votes,
                    seed: derive_seed(cfg.seed, 5),
                },
            ))
        }
    }
}

