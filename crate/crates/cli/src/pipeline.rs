use std::fs;
use std::path::{Path, PathBuf};

use blindtrace_core::defenses::{defend, robust_accuracy, DefenseKind, Predictor, RobustReport};
use blindtrace_core::generator::{load_generator, save_generator, train_blind_perturbation, AttackConfig, PerturbationGenerator};
use blindtrace_core::metrics::{attack_success, transferability, AttackReport, ReportTable, Transfer};
use blindtrace_core::models::{load_classifier, save_classifier, train_classifier, Classifier, Sample, TrainConfig};
use blindtrace_core::rng::derive_seed;
use blindtrace_core::traffic::{
    load_traces, make_pairs, read_manifest, save_traces, synth_connections, synth_corpus, write_manifest, Dataset, DatasetManifest,
    FlowPair, Split, TraceFormat,
};
use serde::{Deserialize, Serialize};

use crate::config::{DataKind, ExperimentConfig, Stage};
use crate::CliError;

const SPLITS: [&str; 3] = ["train", "validation", "test"];

struct Layout {
    root: PathBuf,
}

impl Layout {
    fn dir(&self, stage: Stage) -> PathBuf {
        self.root.join(stage.name())
    }

    fn manifest(&self) -> PathBuf {
        self.dir(Stage::Data).join("manifest.toml")
    }

    fn split(&self, name: &str, kind: DataKind) -> PathBuf {
        let ext = match kind {
            DataKind::Flows => "tsv",
            DataKind::Pairs => "json",
        };
        self.dir(Stage::Data).join(format!("{name}.{ext}"))
    }

    fn model(&self) -> PathBuf {
        self.dir(Stage::Model).join("classifier.json")
    }

    fn generator(&self) -> PathBuf {
        self.dir(Stage::Attack).join("generator.json")
    }

    /// Artifact a stage produces that later stages consume.
    fn product(&self, stage: Stage) -> Option<PathBuf> {
        match stage {
            Stage::Data => Some(self.manifest()),
            Stage::Model => Some(self.model()),
            Stage::Attack => Some(self.generator()),
            _ => None,
        }
    }
}

fn upstream(stage: Stage) -> &'static [Stage] {
    match stage {
        Stage::Data => &[],
        Stage::Model => &[Stage::Data],
        Stage::Eval => &[Stage::Data, Stage::Model, Stage::Attack],
        Stage::Attack | Stage::Defense | Stage::Transfer | Stage::Sweep => &[Stage::Data, Stage::Model],
    }
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, bytes)?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Runtime(e.to_string()))?;
    text.push('\n');
    write(path, text)
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let bytes = fs::read(path)?;
    serde_json::from_slice(&bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

struct Data {
    train: Vec<Sample>,
    validation: Vec<Sample>,
    test: Vec<Sample>,
}

pub struct Pipeline {
    cfg: ExperimentConfig,
    out: Layout,
}

#[derive(Serialize, Deserialize)]
pub struct DefenseReport {
    pub kind: DefenseKind,
    pub undefended: RobustReport,
    pub defended: RobustReport,
}

#[derive(Serialize, Deserialize)]
pub struct TransferRow {
    pub fraction: f64,
    pub insertion_count: usize,
    pub result: Transfer,
}

#[derive(Serialize, Deserialize)]
pub struct TransferReport {
    pub original_clean_accuracy: f64,
    pub surrogate_clean_accuracy: f64,
    pub rows: Vec<TransferRow>,
}

impl Pipeline {
    pub fn new(cfg: ExperimentConfig, out: Option<PathBuf>) -> Self {
        let root = out.unwrap_or_else(|| cfg.output_dir());
        Self { cfg, out: Layout { root } }
    }

    pub fn root(&self) -> &Path {
        &self.out.root
    }

    fn seed(&self, stage: Stage) -> u64 {
        derive_seed(self.cfg.seed, stage.seed_tag())
    }

    fn attack_config(&self, stage: Stage) -> AttackConfig {
        AttackConfig {
            seed: self.seed(stage),
            ..self.cfg.attack.clone()
        }
    }

    /// Rejects stage lists whose inputs are neither produced by an earlier
    /// stage nor already on disk.
    pub fn check_graph(&self, stages: &[Stage]) -> Result<(), CliError> {
        for (i, s) in stages.iter().enumerate() {
            for need in upstream(*s) {
                let produced = stages[..i].contains(need);
                let path = self.out.product(*need).expect("upstream stages produce artifacts");
                if !produced && !path.exists() {
                    return Err(CliError::Validation(format!(
                        "stage `{}` needs {} from stage `{}`, which is neither scheduled nor present",
                        s.name(),
                        path.display(),
                        need.name()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn run(&self, stages: &[Stage]) -> Result<(), CliError> {
        self.check_graph(stages)?;
        for s in stages {
            eprintln!("stage {}", s.name());
            match s {
                Stage::Data => self.data()?,
                Stage::Model => self.model()?,
                Stage::Attack => self.attack()?,
                Stage::Eval => self.eval()?,
                Stage::Defense => self.defense()?,
                Stage::Transfer => self.transfer()?,
                Stage::Sweep => {
                    let sw = &self.cfg.sweep;
                    self.sweep(&sw.axis, &sw.values)?;
                }
            }
        }
        Ok(())
    }

    fn data(&self) -> Result<(), CliError> {
        let d = &self.cfg.data;
        let seed = self.seed(Stage::Data);
        let counts = match d.kind {
            DataKind::Flows => {
                let mut ds = match &d.input {
                    Some(p) => load_traces(p, TraceFormat::Tsv)?,
                    None => synth_corpus(d.classes, d.per_class, (d.length_min, d.length_max), seed),
                };
                ds.fixed_length = d.fixed_length;
                let s = ds.split_stratified(d.validation, d.test, derive_seed(seed, 1));
                let parts = [&s.train, &s.validation, &s.test];
                for (name, part) in SPLITS.iter().zip(parts) {
                    let path = self.out.split(name, d.kind);
                    fs::create_dir_all(path.parent().unwrap())?;
                    save_traces(&path, &part.samples)?;
                }
                (ds.class_count, parts.map(|p| p.len()))
            }
            DataKind::Pairs => {
                let conns = synth_connections(d.connections, (d.length_min, d.length_max), d.fixed_length, seed);
                let n = conns.len();
                let n_test = (n as f64 * d.test).round() as usize;
                let n_val = (n as f64 * d.validation).round() as usize;
                let n_train = n - n_test - n_val;
                let bounds = [0..n_train, n_train..n_train + n_val, n_train + n_val..n];
                let mut counts = [0; 3];
                for (k, (name, range)) in SPLITS.iter().zip(bounds).enumerate() {
                    let part = Dataset {
                        samples: conns.samples[range].to_vec(),
                        ..conns.clone()
                    };
                    let pairs = make_pairs(&part, d.negatives, derive_seed(seed, 1 + k as u64))?;
                    counts[k] = pairs.len();
                    write_json(&self.out.split(name, d.kind), &pairs.samples)?;
                }
                (2, counts)
            }
        };
        let manifest = DatasetManifest {
            format_version: DatasetManifest::VERSION,
            class_count: counts.0,
            fixed_length: d.fixed_length,
            train: counts.1[0],
            validation: counts.1[1],
            test: counts.1[2],
        };
        write_manifest(&self.out.manifest(), &manifest)?;
        Ok(())
    }

    fn load_data(&self) -> Result<Data, CliError> {
        let m = read_manifest(&self.out.manifest())?;
        let kind = self.cfg.data.kind;
        let load = |name: &str, split: Split| -> Result<Vec<Sample>, CliError> {
            let path = self.out.split(name, kind);
            Ok(match kind {
                DataKind::Flows => {
                    let mut ds = load_traces(&path, TraceFormat::Tsv)?;
                    ds.fixed_length = m.fixed_length;
                    ds.class_count = m.class_count;
                    Sample::from_flows(&ds)
                }
                DataKind::Pairs => {
                    let samples: Vec<FlowPair> = read_json(&path)?;
                    Sample::from_pairs(&Dataset {
                        samples,
                        split,
                        fixed_length: m.fixed_length,
                        class_count: 2,
                    })
                }
            })
        };
        Ok(Data {
            train: load("train", Split::Train)?,
            validation: load("validation", Split::Validation)?,
            test: load("test", Split::Test)?,
        })
    }

    fn load_model(&self) -> Result<Classifier, CliError> {
        Ok(load_classifier(&self.out.model())?)
    }

    fn model(&self) -> Result<(), CliError> {
        let data = self.load_data()?;
        let m = &self.cfg.model;
        let (model, report) = train_classifier(m.arch, &data.train, &data.validation, &data.test, &m.train, self.seed(Stage::Model))?;
        fs::create_dir_all(self.out.dir(Stage::Model))?;
        save_classifier(&model, &self.out.model())?;
        write_json(&self.out.dir(Stage::Model).join("train_report.json"), &report)
    }

    fn train_attack(&self, model: &Classifier, data: &Data, cfg: &AttackConfig, dir: &Path) -> Result<PerturbationGenerator, CliError> {
        let run = train_blind_perturbation(model, &data.train, cfg)?;
        fs::create_dir_all(dir)?;
        save_generator(&run.generator, &dir.join("generator.json"))?;
        write_json(&dir.join("log.json"), &run.log)?;
        Ok(run.generator)
    }

    fn attack(&self) -> Result<(), CliError> {
        let (data, model) = (self.load_data()?, self.load_model()?);
        self.train_attack(&model, &data, &self.attack_config(Stage::Attack), &self.out.dir(Stage::Attack))?;
        Ok(())
    }

    fn score(&self, model: &Classifier, gen: &PerturbationGenerator, test: &[Sample]) -> Result<AttackReport, CliError> {
        let fp: &[f64] = if model.arch.is_pair() { &self.cfg.eval.fp_grid } else { &[] };
        Ok(attack_success(model, gen, test, self.cfg.eval.trigger_seed, fp)?)
    }

    fn eval(&self) -> Result<(), CliError> {
        let (data, model) = (self.load_data()?, self.load_model()?);
        let gen = load_generator(&self.out.generator())?;
        let report = self.score(&model, &gen, &data.test)?;
        let dir = self.out.dir(Stage::Eval);
        write_json(&dir.join("report.json"), &report)?;
        let table = ReportTable {
            axis: "run".into(),
            rows: vec![("-".into(), report.clone())],
        };
        write(&dir.join("report.txt"), table.to_text())?;
        let mut per_class = String::from("class\tcount\tsuccess\n");
        for c in &report.per_class {
            per_class.push_str(&format!("{}\t{}\t{}\n", c.class, c.count, c.success));
        }
        write(&dir.join("per_class.tsv"), per_class)?;
        if !report.tp_at_fp.is_empty() {
            let mut roc = String::from("fp\tthreshold\tclean_tp\ttp\n");
            for p in &report.tp_at_fp {
                roc.push_str(&format!("{}\t{}\t{}\t{}\n", p.fp, p.threshold, p.clean_tp, p.tp));
            }
            write(&dir.join("roc.tsv"), roc)?;
        }
        Ok(())
    }

    fn defense(&self) -> Result<(), CliError> {
        let (data, model) = (self.load_data()?, self.load_model()?);
        let seed = self.seed(Stage::Defense);
        let dcfg = blindtrace_core::defenses::DefenseConfig {
            seed,
            ..self.cfg.defense.clone()
        };
        let (defended, predictor) = defend(model.arch, &data.train, &data.validation, &dcfg, &self.cfg.model.train)?;
        let dir = self.out.dir(Stage::Defense);
        fs::create_dir_all(&dir)?;
        save_classifier(&defended, &dir.join("classifier.json"))?;
        let attack = self.attack_config(Stage::Defense);
        let trigger = self.cfg.eval.trigger_seed;
        let report = DefenseReport {
            kind: dcfg.kind,
            undefended: robust_accuracy(&model, &Predictor::Plain, &data.train, &data.test, &attack, trigger)?,
            defended: robust_accuracy(&defended, &predictor, &data.train, &data.test, &attack, trigger)?,
        };
        write_json(&dir.join("report.json"), &report)?;
        let text = format!(
            "{:>12} {:>14} {:>15}\n{:>12} {:>14.1} {:>15.1}\n{:>12} {:>14.1} {:>15.1}\n",
            "model",
            "clean acc(%)",
            "robust acc(%)",
            "undefended",
            report.undefended.clean_accuracy * 100.0,
            report.undefended.robust_accuracy * 100.0,
            "defended",
            report.defended.clean_accuracy * 100.0,
            report.defended.robust_accuracy * 100.0
        );
        write(&dir.join("report.txt"), text)
    }

    fn transfer(&self) -> Result<(), CliError> {
        let (data, surrogate) = (self.load_data()?, self.load_model()?);
        let t = &self.cfg.transfer;
        let tc = TrainConfig {
            params: t.params.clone(),
            ..self.cfg.model.train.clone()
        };
        let seed = self.seed(Stage::Transfer);
        let (original, orig_report) = train_classifier(t.arch, &data.train, &data.validation, &data.test, &tc, seed)?;
        let dir = self.out.dir(Stage::Transfer);
        fs::create_dir_all(&dir)?;
        save_classifier(&original, &dir.join("original.json"))?;
        let length = surrogate.input_length;
        let mut rows = Vec::new();
        for (k, f) in t.fractions.iter().enumerate() {
            let alpha = ((f * length as f64).round() as usize).max(1);
            let cfg = AttackConfig {
                insertion_count: alpha,
                seed: derive_seed(seed, 1 + k as u64),
                ..self.cfg.attack.clone()
            };
            let gen = self.train_attack(&surrogate, &data, &cfg, &dir.join(format!("alpha_{alpha}")))?;
            rows.push(TransferRow {
                fraction: *f,
                insertion_count: alpha,
                result: transferability(&original, &surrogate, &gen, &data.test, self.cfg.eval.trigger_seed)?,
            });
        }
        let clean = |m: &Classifier| data.test.iter().filter(|s| m.predict(&s.x) == s.y).count() as f64 / data.test.len() as f64;
        let report = TransferReport {
            original_clean_accuracy: orig_report.test_accuracy,
            surrogate_clean_accuracy: clean(&surrogate),
            rows,
        };
        write_json(&dir.join("report.json"), &report)?;
        let mut text = format!("{:>10} {:>8} {:>10}\n", "fraction", "alpha", "ratio");
        for r in &report.rows {
            let ratio = r.result.ratio().map_or_else(|| "n/a".to_string(), |v| format!("{v:.3}"));
            text.push_str(&format!("{:>10} {:>8} {:>10}\n", r.fraction, r.insertion_count, ratio));
        }
        write(&dir.join("report.txt"), text)
    }

    /// Trains and scores one attack per axis value and writes a combined
    /// table keyed by the axis.
    pub fn sweep(&self, axis: &str, values: &[f64]) -> Result<(), CliError> {
        if values.is_empty() {
            return Err(CliError::Validation("sweep needs at least one value".into()));
        }
        let base = self.attack_config(Stage::Sweep);
        let configs = values
            .iter()
            .map(|v| with_axis(&base, axis, *v))
            .collect::<Result<Vec<_>, _>>()?;
        let (data, model) = (self.load_data()?, self.load_model()?);
        let dir = self.out.dir(Stage::Sweep).join(axis);
        let mut table = ReportTable {
            axis: axis.to_string(),
            rows: Vec::new(),
        };
        for (v, cfg) in values.iter().zip(configs) {
            let key = v.to_string();
            let point = dir.join(&key);
            let gen = self.train_attack(&model, &data, &cfg, &point)?;
            let report = self.score(&model, &gen, &data.test)?;
            write_json(&point.join("report.json"), &report)?;
            table.rows.push((key, report));
        }
        write(&dir.join("table.txt"), table.to_text())?;
        write_json(&dir.join("table.json"), &table)?;
        let mut tsv = format!("{axis}\tbandwidth_overhead\tlatency_mean\tclean_accuracy\tsuccess\tperturbed_accuracy\n");
        for (k, r) in &table.rows {
            tsv.push_str(&format!(
                "{k}\t{}\t{}\t{}\t{}\t{}\n",
                r.overhead.bandwidth, r.overhead.latency_mean, r.clean_accuracy, r.success, r.perturbed_accuracy
            ));
        }
        write(&dir.join("table.tsv"), tsv)
    }
}

fn resolve_axis(axis: &str) -> &str {
    match axis {
        "alpha" => "insertion_count",
        "sigma" => "timing.sigma",
        "mu" => "timing.mu",
        other => other,
    }
}

/// Copy of `base` with the numeric parameter at `axis` set to `value`.
pub fn with_axis(base: &AttackConfig, axis: &str, value: f64) -> Result<AttackConfig, CliError> {
    let path = resolve_axis(axis);
    let not_found = || CliError::Validation(format!("sweep axis `{axis}` is not a numeric attack parameter"));
    let mut v = serde_json::to_value(base).map_err(|e| CliError::Runtime(e.to_string()))?;
    let mut slot = &mut v;
    for part in path.split('.') {
        slot = slot.get_mut(part).ok_or_else(not_found)?;
    }
    let current = slot.as_number().ok_or_else(not_found)?.clone();
    *slot = if current.is_f64() {
        serde_json::json!(value)
    } else if value >= 0.0 && value.fract() == 0.0 {
        serde_json::json!(value as u64)
    } else {
        return Err(CliError::Validation(format!("sweep axis `{axis}` takes non-negative integers, got {value}")));
    };
    serde_json::from_value(v).map_err(|e| CliError::Validation(format!("sweep axis `{axis}`: {e}")))
}
