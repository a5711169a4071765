//! Attack success, overhead accounting, ROC-style pair evaluation and
//! transferability.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::generator::{
    blocks, train_blind_perturbation, AttackConfig, Channel, DestMode, Layout, Perturbation, PerturbationGenerator, Prepared,
    SourceMode,
};
use crate::models::{Classifier, Sample};
use crate::rng::{laplace, seeded};
use crate::traffic::DIR_ROW;
use crate::{Error, Result};

/// Decision threshold such that at most a fraction `fp` of `negatives`
/// score strictly above it. Needs at least `1 / fp` negatives.
pub fn threshold_for_fp(negatives: &[f64], fp: f64) -> Result<f64> {
    let n = negatives.len();
    if !(fp > 0.0) || fp * (n as f64) < 1.0 - 1e-9 {
        return Err(Error::UnreachableFp { fp, negatives: n });
    }
    let mut sorted = negatives.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let k = ((fp * n as f64) + 1e-9).floor() as usize;
    Ok(sorted[k.min(n - 1)])
}

/// Packets injected per surviving original packet when `alpha` dummies are
/// placed into a window of `length` packets.
pub fn injection_overhead(alpha: usize, length: usize) -> f64 {
    if alpha == 0 {
        return 0.0;
    }
    if alpha >= length {
        return f64::INFINITY;
    }
    alpha as f64 / (length - alpha) as f64
}

/// A fraction as a percentage truncated to two decimals.
pub fn percent_2dp(fraction: f64) -> f64 {
    ((fraction * 1e4) + 1e-9).floor() / 100.0
}

/// Bandwidth and latency cost of a perturbation on a set of flows.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Overhead {
    /// Injected packets over surviving original packets.
    pub packet: f64,
    /// Padding bytes over original bytes.
    pub bytes: f64,
    /// `packet` when packets are injected, `bytes` otherwise.
    pub bandwidth: f64,
    /// Mean and standard deviation of the added delay, in seconds.
    pub latency_mean: f64,
    pub latency_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSuccess {
    pub class: usize,
    pub count: usize,
    pub success: f64,
}

/// True positives on perturbed associated pairs at a threshold tuned on
/// clean negatives for `fp`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fp: f64,
    pub threshold: f64,
    pub clean_tp: f64,
    pub tp: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub mode: AttackConfig,
    pub trigger_seed: u64,
    /// Flows counted in `success`.
    pub evaluated: usize,
    pub success: f64,
    pub clean_accuracy: f64,
    pub perturbed_accuracy: f64,
    pub overhead: Overhead,
    /// Success by true class.
    pub per_class: Vec<ClassSuccess>,
    pub tp_at_fp: Vec<RocPoint>,
}

/// Test samples an attack of this mode is scored on: source classes for ST,
/// and everything but the target class for DT.
pub fn eligible<'a>(cfg: &AttackConfig, test: &'a [Sample]) -> Result<Vec<&'a Sample>> {
    let kept: Vec<&Sample> = test
        .iter()
        .filter(|s| match &cfg.source {
            SourceMode::Su => true,
            SourceMode::St(classes) => classes.contains(&s.y),
        })
        .filter(|s| match cfg.dest {
            DestMode::Du => true,
            DestMode::Dt(t) => s.y != t,
        })
        .collect();
    if kept.is_empty() {
        return Err(Error::Empty("test set after source/target filtering".into()));
    }
    Ok(kept)
}

fn succeeded(dest: DestMode, truth: usize, predicted: usize) -> bool {
    match dest {
        DestMode::Du => predicted != truth,
        DestMode::Dt(t) => predicted == t,
    }
}

fn prepare(model: &Classifier, gen: &PerturbationGenerator, trigger_seed: u64) -> Result<Prepared> {
    let layout = Layout::of(model);
    gen.check_compatible(&gen.config, layout)?;
    Prepared::new(&gen.config, layout, &gen.sample(trigger_seed))
}

/// Scores one sampled perturbation of `gen` against `model` on `test`.
/// `fp_grid` is only used for pair scorers.
pub fn attack_success(
    model: &Classifier,
    gen: &PerturbationGenerator,
    test: &[Sample],
    trigger_seed: u64,
    fp_grid: &[f64],
) -> Result<AttackReport> {
    let prepared = prepare(model, gen, trigger_seed)?;
    let mut report = evaluate_prepared(model, &gen.config, &prepared, test)?;
    report.trigger_seed = trigger_seed;
    if model.arch.is_pair() && !fp_grid.is_empty() {
        report.tp_at_fp = roc_prepared(model, &prepared, test, fp_grid)?;
    }
    Ok(report)
}

/// Like [`attack_success`] for an already resolved perturbation.
pub fn evaluate_prepared(model: &Classifier, cfg: &AttackConfig, prepared: &Prepared, test: &[Sample]) -> Result<AttackReport> {
    let kept = eligible(cfg, test)?;
    for s in &kept {
        model.check_input(&s.x)?;
    }
    let mut hits = 0;
    let mut clean_hits = 0;
    let mut perturbed_hits = 0;
    let mut by_class: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let (mut injected, mut survivors) = (0usize, 0usize);
    let (mut added, mut original) = (0.0, 0.0);
    let mut delays = Vec::new();
    let injecting = cfg.has(Channel::DirectionInjection);
    for s in &kept {
        let a = prepared.apply(&s.x)?;
        let y = model.predict(&a.x);
        let ok = succeeded(cfg.dest, s.y, y);
        hits += usize::from(ok);
        clean_hits += usize::from(model.predict(&s.x) == s.y);
        perturbed_hits += usize::from(y == s.y);
        let e = by_class.entry(s.y).or_default();
        e.0 += 1;
        e.1 += usize::from(ok);
        injected += a.injected;
        if injecting {
            survivors += a.x.row(DIR_ROW).iter().filter(|v| **v != 0.0).count() - a.injected;
        }
        added += a.added_bytes;
        original += a.original_bytes;
        delays.extend(a.delays);
    }
    let n = kept.len() as f64;
    let packet = if survivors == 0 { 0.0 } else { injected as f64 / survivors as f64 };
    let bytes = if original > 0.0 { added / original } else { 0.0 };
    let (latency_mean, latency_std) = mean_std(&delays);
    Ok(AttackReport {
        mode: cfg.clone(),
        trigger_seed: 0,
        evaluated: kept.len(),
        success: hits as f64 / n,
        clean_accuracy: clean_hits as f64 / n,
        perturbed_accuracy: perturbed_hits as f64 / n,
        overhead: Overhead {
            packet,
            bytes,
            bandwidth: if injecting { packet } else { bytes },
            latency_mean,
            latency_std,
        },
        per_class: by_class
            .into_iter()
            .map(|(class, (count, ok))| ClassSuccess {
                class,
                count,
                success: ok as f64 / count as f64,
            })
            .collect(),
        tp_at_fp: Vec::new(),
    })
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (m, (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n).sqrt())
}

/// Overhead of one sampled perturbation of `gen` on `data`.
pub fn overhead(model: &Classifier, gen: &PerturbationGenerator, data: &[Sample], trigger_seed: u64) -> Result<Overhead> {
    let cfg = AttackConfig {
        source: SourceMode::Su,
        dest: DestMode::Du,
        ..gen.config.clone()
    };
    Ok(evaluate_prepared(model, &cfg, &prepare(model, gen, trigger_seed)?, data)?.overhead)
}

/// Pair-scorer TP under one sampled perturbation at each FP in `fp_grid`.
pub fn correlation_roc(
    model: &Classifier,
    gen: &PerturbationGenerator,
    pairs: &[Sample],
    fp_grid: &[f64],
    trigger_seed: u64,
) -> Result<Vec<RocPoint>> {
    roc_prepared(model, &prepare(model, gen, trigger_seed)?, pairs, fp_grid)
}

/// Like [`correlation_roc`] for an already resolved perturbation.
pub fn roc_prepared(model: &Classifier, prepared: &Prepared, pairs: &[Sample], fp_grid: &[f64]) -> Result<Vec<RocPoint>> {
    if !model.arch.is_pair() {
        return Err(Error::Config(format!("{} is not a pair scorer", model.arch)));
    }
    let negatives: Vec<f64> = pairs.iter().filter(|s| s.y == 0).map(|s| model.score(&s.x)).collect();
    let positives: Vec<&Sample> = pairs.iter().filter(|s| s.y == 1).collect();
    if positives.is_empty() {
        return Err(Error::Empty("no associated pairs".into()));
    }
    let clean: Vec<f64> = positives.iter().map(|s| model.score(&s.x)).collect();
    let perturbed = positives
        .iter()
        .map(|s| Ok(model.score(&prepared.apply(&s.x)?.x)))
        .collect::<Result<Vec<f64>>>()?;
    let n = positives.len() as f64;
    fp_grid
        .iter()
        .map(|&fp| {
            let threshold = threshold_for_fp(&negatives, fp)?;
            Ok(RocPoint {
                fp,
                threshold,
                clean_tp: clean.iter().filter(|&&v| v > threshold).count() as f64 / n,
                tp: perturbed.iter().filter(|&&v| v > threshold).count() as f64 / n,
            })
        })
        .collect()
}

/// A timing-only perturbation of independent Laplace draws with the
/// budget's mean and standard deviation, for comparison with a trained one.
pub fn laplace_jitter(cfg: &AttackConfig, layout: Layout, seed: u64) -> Result<Perturbation> {
    let budget = cfg
        .timing
        .ok_or_else(|| Error::Config("random jitter needs a timing budget".into()))?;
    let block = blocks(cfg, layout)
        .into_iter()
        .find(|b| b.channel == Channel::Timing)
        .ok_or_else(|| Error::Config("random jitter needs the timing channel".into()))?;
    let mut rng = seeded(seed);
    let b = budget.sigma / std::f64::consts::SQRT_2;
    let v = (0..block.len).map(|_| laplace(&mut rng, budget.mu, b)).collect();
    Ok(Perturbation {
        blocks: vec![(Channel::Timing, v)],
    })
}

/// Outcome of a transferability measurement.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "result")]
pub enum Transfer {
    Ratio {
        ratio: f64,
        original_fooled: usize,
        surrogate_fooled: usize,
        evaluated: usize,
    },
    /// The perturbation fooled the surrogate on none of the evaluated flows.
    NoSurrogateMisclassifications { evaluated: usize },
}

impl Transfer {
    pub fn ratio(&self) -> Option<f64> {
        match self {
            Self::Ratio { ratio, .. } => Some(*ratio),
            Self::NoSurrogateMisclassifications { .. } => None,
        }
    }
}

/// Among flows both models classify correctly, the number the perturbation
/// (trained on `surrogate`) fools `original` on, over the number it fools
/// `surrogate` on.
pub fn transferability(
    original: &Classifier,
    surrogate: &Classifier,
    gen_on_surrogate: &PerturbationGenerator,
    test: &[Sample],
    trigger_seed: u64,
) -> Result<Transfer> {
    if Layout::of(original) != Layout::of(surrogate) {
        return Err(Error::Config("original and surrogate take different inputs".into()));
    }
    let prepared = prepare(surrogate, gen_on_surrogate, trigger_seed)?;
    let dest = gen_on_surrogate.config.dest;
    let (mut evaluated, mut orig, mut surr) = (0, 0, 0);
    for s in eligible(&gen_on_surrogate.config, test)? {
        original.check_input(&s.x)?;
        if original.predict(&s.x) != s.y || surrogate.predict(&s.x) != s.y {
            continue;
        }
        evaluated += 1;
        let x = prepared.apply(&s.x)?.x;
        orig += usize::from(succeeded(dest, s.y, original.predict(&x)));
        surr += usize::from(succeeded(dest, s.y, surrogate.predict(&x)));
    }
    Ok(if surr == 0 {
        Transfer::NoSurrogateMisclassifications { evaluated }
    } else {
        Transfer::Ratio {
            ratio: orig as f64 / surr as f64,
            original_fooled: orig,
            surrogate_fooled: surr,
            evaluated,
        }
    })
}

/// Per-target success of a DT sweep with its extremes; ties go to the
/// lowest class index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TargetedSweep {
    pub per_target: Vec<ClassSuccess>,
    pub min: ClassSuccess,
    pub max: ClassSuccess,
}

impl TargetedSweep {
    pub fn from_results(per_target: Vec<ClassSuccess>) -> Result<Self> {
        let first = per_target
            .first()
            .cloned()
            .ok_or_else(|| Error::Empty("targeted sweep".into()))?;
        let pick = |better: fn(f64, f64) -> bool| {
            let mut best = first.clone();
            for c in &per_target[1..] {
                if better(c.success, best.success) || (c.success == best.success && c.class < best.class) {
                    best = c.clone();
                }
            }
            best
        };
        let min = pick(|a, b| a < b);
        let max = pick(|a, b| a > b);
        Ok(Self { per_target, min, max })
    }
}

/// Trains one DT generator per class from `base` and scores each on `test`.
pub fn targeted_sweep(
    model: &Classifier,
    train: &[Sample],
    test: &[Sample],
    base: &AttackConfig,
    trigger_seed: u64,
) -> Result<TargetedSweep> {
    let mut results = Vec::with_capacity(model.class_count);
    for t in 0..model.class_count {
        let cfg = AttackConfig {
            dest: DestMode::Dt(t),
            ..base.clone()
        };
        let run = train_blind_perturbation(model, train, &cfg)?;
        let r = attack_success(model, &run.generator, test, trigger_seed, &[])?;
        results.push(ClassSuccess {
            class: t,
            count: r.evaluated,
            success: r.success,
        });
    }
    TargetedSweep::from_results(results)
}

/// Reports keyed by a swept parameter, rendered as a fixed-width table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub axis: String,
    pub rows: Vec<(String, AttackReport)>,
}

impl ReportTable {
    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{:>10} {:>12} {:>14} {:>14} {:>11} {:>11}\n",
            self.axis, "overhead(%)", "latency(ms)", "clean acc(%)", "success(%)", "pert acc(%)"
        );
        for (key, r) in &self.rows {
            out.push_str(&format!(
                "{:>10} {:>12.2} {:>14.3} {:>14.1} {:>11.1} {:>11.1}\n",
                key,
                percent_2dp(r.overhead.bandwidth),
                r.overhead.latency_mean * 1e3,
                r.clean_accuracy * 100.0,
                r.success * 100.0,
                r.perturbed_accuracy * 100.0
            ));
        }
        out
    }
}

/// CDF of the Laplace distribution.
pub fn laplace_cdf(x: f64, location: f64, scale: f64) -> f64 {
    let u = (x - location) / scale;
    if u < 0.0 {
        0.5 * u.exp()
    } else {
        1.0 - 0.5 * (-u).exp()
    }
}

/// One-sample Kolmogorov-Smirnov statistic of `samples` against `cdf`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut v = samples.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len() as f64;
    v.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}
