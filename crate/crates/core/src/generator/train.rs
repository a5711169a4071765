use serde::{Deserialize, Serialize};

use super::{AttackConfig, Channel, DestMode, Discriminator, Invisibility, Layout, PerturbationGenerator, Prepared, SourceMode};
use crate::models::{Classifier, Sample};
use crate::nn::{Adam, Tensor};
use crate::rng::{derive_seed, laplace, seeded, SeededRng};
use crate::{Error, Result};
use rand::seq::SliceRandom;

/// Per-epoch training trace.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackLog {
    /// Mean classifier loss on perturbed flows (against f(x) for DU, the
    /// target class for DT).
    pub epoch_loss: Vec<f64>,
    pub epoch_regularizer: Vec<f64>,
    /// Discriminator accuracy on its own training draws.
    pub epoch_disc_accuracy: Vec<f64>,
}

pub struct AttackRun {
    pub generator: PerturbationGenerator,
    pub discriminator: Option<Discriminator>,
    pub log: AttackLog,
}

/// Trains a blind perturbation generator against a frozen classifier.
///
/// With `restarts > 1`, that many generators are initialised from distinct
/// seeds and trained for one epoch; the one with the lowest objective is
/// trained for the remaining epochs.
pub fn train_blind_perturbation(model: &Classifier, data: &[Sample], cfg: &AttackConfig) -> Result<AttackRun> {
    let layout = Layout::of(model);
    cfg.validate(model.class_count, layout.length, layout.pair)?;
    let data = source_filter(data, &cfg.source)?;
    for s in &data {
        model.check_input(&s.x)?;
    }
    let targets = targets(model, &data, cfg.dest);
    let start = |r: u64| -> Session<'_> {
        let tag = 16 * r;
        let generator = PerturbationGenerator::new(cfg.clone(), layout, &mut seeded(derive_seed(cfg.seed, tag + 1)));
        let discriminator = match cfg.invisibility {
            Invisibility::Off => None,
            Invisibility::Laplace { scale, .. } => Some(Discriminator::new(
                generator.blocks()[0].len,
                1.0 / (std::f64::consts::SQRT_2 * scale),
                cfg.discriminator_lr,
                &mut seeded(derive_seed(cfg.seed, tag + 2)),
            )),
        };
        Session::new(model, &data, &targets, generator, discriminator, seeded(derive_seed(cfg.seed, tag + 3)))
    };
    let mut best = start(0);
    if cfg.epochs > 0 && cfg.restarts > 1 {
        best.epoch()?;
        for r in 1..cfg.restarts as u64 {
            let mut s = start(r);
            s.epoch()?;
            if s.last_objective() < best.last_objective() {
                best = s;
            }
        }
    }
    while best.log.epoch_loss.len() < cfg.epochs {
        best.epoch()?;
    }
    Ok(AttackRun {
        generator: best.gen,
        discriminator: best.disc,
        log: best.log,
    })
}

/// Continues training `gen` jointly with `disc` for `epochs` epochs.
pub fn train_laplace_regularizer(
    gen: &mut PerturbationGenerator,
    disc: &mut Discriminator,
    model: &Classifier,
    data: &[Sample],
    epochs: usize,
) -> Result<AttackLog> {
    if !matches!(gen.config.invisibility, Invisibility::Laplace { .. }) {
        return Err(Error::Config("Laplace regularizer needs invisibility = laplace".into()));
    }
    gen.check_compatible(&gen.config.clone(), Layout::of(model))?;
    let data = source_filter(data, &gen.config.source)?;
    for s in &data {
        model.check_input(&s.x)?;
    }
    let targets = targets(model, &data, gen.config.dest);
    let rng = seeded(derive_seed(gen.config.seed, 4));
    let mut session = Session::new(model, &data, &targets, gen.clone(), Some(disc.clone()), rng);
    for _ in 0..epochs {
        session.epoch()?;
    }
    *gen = session.gen;
    *disc = session.disc.unwrap();
    Ok(session.log)
}

pub(crate) fn source_filter(data: &[Sample], source: &SourceMode) -> Result<Vec<Sample>> {
    let kept: Vec<Sample> = match source {
        SourceMode::Su => data.to_vec(),
        SourceMode::St(classes) => data.iter().filter(|s| classes.contains(&s.y)).cloned().collect(),
    };
    if kept.is_empty() {
        return Err(Error::Empty("attack training set after source filtering".into()));
    }
    Ok(kept)
}

/// Labels the loss is taken against: the model's own clean prediction for
/// DU, the target class for DT.
fn targets(model: &Classifier, data: &[Sample], dest: DestMode) -> Vec<usize> {
    match dest {
        DestMode::Du => data.iter().map(|s| model.predict(&s.x)).collect(),
        DestMode::Dt(t) => vec![t; data.len()],
    }
}

fn reference_batch(rng: &mut SeededRng, inv: Invisibility, count: usize, len: usize) -> Vec<Vec<f64>> {
    let Invisibility::Laplace { location, scale } = inv else { unreachable!() };
    (0..count)
        .map(|_| (0..len).map(|_| laplace(rng, location, scale)).collect())
        .collect()
}

struct Session<'a> {
    model: &'a Classifier,
    data: &'a [Sample],
    targets: &'a [usize],
    /// -1 for DU (ascend the loss), +1 for DT.
    sign: f64,
    gen: PerturbationGenerator,
    disc: Option<Discriminator>,
    opt: Adam,
    rng: SeededRng,
    order: Vec<usize>,
    log: AttackLog,
}

impl<'a> Session<'a> {
    fn new(
        model: &'a Classifier,
        data: &'a [Sample],
        targets: &'a [usize],
        gen: PerturbationGenerator,
        disc: Option<Discriminator>,
        rng: SeededRng,
    ) -> Self {
        let sign = match gen.config.dest {
            DestMode::Du => -1.0,
            DestMode::Dt(_) => 1.0,
        };
        Self {
            model,
            data,
            targets,
            sign,
            opt: Adam::new(gen.net.param_count(), gen.config.learning_rate),
            gen,
            disc,
            rng,
            order: (0..data.len()).collect(),
            log: AttackLog::default(),
        }
    }

    /// Minimised objective of the last epoch.
    fn last_objective(&self) -> f64 {
        let reg = self.log.epoch_regularizer.last().copied().unwrap_or(0.0);
        self.sign * self.log.epoch_loss.last().copied().unwrap_or(0.0) + self.gen.config.regularizer_coef * reg
    }

    fn epoch(&mut self) -> Result<()> {
        let cfg = self.gen.config.clone();
        let layout = self.gen.layout;
        let blocks = self.gen.blocks();
        self.order.shuffle(&mut self.rng);
        let order = self.order.clone();
        let (mut loss_sum, mut reg_sum, mut acc_sum, mut batches) = (0.0, 0.0, 0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            let z = PerturbationGenerator::trigger(&mut self.rng);
            let (acts, pert) = self.gen.generate_trace(&z);

            if let Some(d) = self.disc.as_mut() {
                let m = cfg.discriminator_batch;
                let fake: Vec<Vec<f64>> = (0..m)
                    .map(|_| {
                        let z = PerturbationGenerator::trigger(&mut self.rng);
                        self.gen.generate(&z).get(Channel::Timing).unwrap().to_vec()
                    })
                    .collect();
                let real = reference_batch(&mut self.rng, cfg.invisibility, m, blocks[0].len);
                d.train_step(&fake, &real);
                acc_sum += d.accuracy(&fake, &real);
            }

            let prepared = Prepared::new(&cfg, layout, &pert)?;
            let scale = self.sign / batch.len() as f64;
            let mut applied = Vec::with_capacity(batch.len());
            let mut dxs: Vec<Tensor> = Vec::with_capacity(batch.len());
            for &i in batch {
                let a = prepared.apply(&self.data[i].x)?;
                let trace = self.model.forward_trace(&a.x);
                let (l, mut dz) = self.model.loss_from_logits(&trace.logits, self.targets[i]);
                loss_sum += l;
                dz.iter_mut().for_each(|v| *v *= scale);
                dxs.push(self.model.backward(&trace, &dz, None, true).unwrap());
                applied.push(a);
            }
            let mut block_grads = prepared.backward(&applied, &dxs)?;

            if let Some(d) = self.disc.as_ref() {
                let (r, dr) = d.regularizer(pert.get(Channel::Timing).unwrap());
                reg_sum += r;
                if cfg.regularizer_coef > 0.0 {
                    for (g, v) in block_grads[0].iter_mut().zip(&dr) {
                        *g += cfg.regularizer_coef * v;
                    }
                }
            }

            let mut out_grad = vec![0.0; blocks.iter().map(|b| b.len).sum()];
            for (b, g) in blocks.iter().zip(&block_grads) {
                for (k, v) in g.iter().enumerate() {
                    out_grad[b.offset + k] = v * b.scale;
                }
            }
            let mut pg = vec![0.0; self.gen.net.param_count()];
            self.gen.net.backward(&acts, Tensor::vector(out_grad), Some(&mut pg), false);
            self.opt.step(&mut self.gen.net.params, &pg);
            batches += 1;
        }
        self.log.epoch_loss.push(loss_sum / self.data.len() as f64);
        if self.disc.is_some() {
            self.log.epoch_regularizer.push(reg_sum / batches as f64);
            self.log.epoch_disc_accuracy.push(acc_sum / batches as f64);
        }
        Ok(())
    }
}

