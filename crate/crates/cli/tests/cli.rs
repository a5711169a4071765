use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use blindtrace_core::metrics::{AttackReport, ReportTable};

const TINY: &str = r#"
version = 1
seed = 5
stages = ["data", "model", "attack", "eval"]

[data]
classes = 4
per_class = 30
length_min = 60
length_max = 100
fixed_length = 80

[model]
arch = "direction_cnn"
[model.train]
epochs = 2

[attack]
insertion_count = 8
epochs = 1
"#;

const TINY_PAIRS: &str = r#"
version = 1
seed = 2
stages = ["data", "model", "attack", "eval"]

[data]
kind = "pairs"
connections = 60
length_min = 40
length_max = 70
fixed_length = 50
negatives = 1

[model]
arch = "pair_cnn"
[model.train]
epochs = 1
target_fp = 0.2

[attack]
channels = ["timing"]
timing = { mu = 0.0, sigma = 0.01 }
epochs = 1

[eval]
fp_grid = [0.1]
"#;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_blindtrace"));
    c.env_remove("BLINDTRACE_OUT");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn config(dir: &Path, text: &str) -> PathBuf {
    let p = dir.join("exp.toml");
    fs::write(&p, text).unwrap();
    p
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn pipeline_writes_table_report_and_reruns_byte_identically() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        let o = run(&["run", "-c", s(&cfg), "-o", s(out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let report: AttackReport = serde_json::from_slice(&fs::read(a.join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report.mode.insertion_count, 8);
    let text = fs::read_to_string(a.join("eval/report.txt")).unwrap();
    for col in ["overhead(%)", "latency(ms)", "clean acc(%)", "success(%)", "pert acc(%)"] {
        assert!(text.contains(col), "{text}");
    }
    assert!(a.join("eval/per_class.tsv").exists());
    let (ta, tb) = (tree(&a), tree(&b));
    assert!(ta.len() >= 8);
    assert_eq!(ta, tb);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert_eq!(code(&run(&["synth", "-c", s(&cfg), "-o", s(&a)])), 0);
    assert_eq!(code(&run(&["synth", "-c", s(&cfg), "-o", s(&b), "--seed", "6"])), 0);
    assert_ne!(fs::read(a.join("data/train.tsv")).unwrap(), fs::read(b.join("data/train.tsv")).unwrap());
}

#[test]
fn unknown_stage_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &TINY.replace("\"eval\"]", "\"plot\"]"));
    let o = run(&["run", "-c", s(&cfg), "-o", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("plot"));
}

#[test]
fn misordered_stages_are_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &TINY.replace("[\"data\", \"model\"", "[\"model\", \"data\""));
    assert_eq!(code(&run(&["run", "-c", s(&cfg), "-o", s(&dir.path().join("o"))])), 1);
}

#[test]
fn missing_upstream_artifact_is_rejected_before_work() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY);
    let out = dir.path().join("o");
    let o = run(&["eval", "-c", s(&cfg), "-o", s(&out)]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("needs"));
    assert!(!out.exists());
}

#[test]
fn unknown_config_key_and_bad_override_are_validation_errors() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &format!("{TINY}\nbogus = 1\n"));
    assert_eq!(code(&run(&["synth", "-c", s(&cfg)])), 1);
    let cfg = config(dir.path(), TINY);
    assert_eq!(code(&run(&["synth", "-c", s(&cfg), "--set", "attack.unknown=3"])), 1);
    assert_eq!(code(&run(&["synth", "-c", s(&cfg), "--set", "noequals"])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
}

#[test]
fn runtime_failure_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY);
    let missing = dir.path().join("missing.tsv");
    let o = run(&["synth", "-c", s(&cfg), "-o", s(&dir.path().join("o")), "--set", &format!("data.input=\"{}\"", s(&missing))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn output_root_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), &format!("output = \"exp1\"\n{TINY}"));
    let o = bin().args(["synth", "-c", s(&cfg)]).env("BLINDTRACE_OUT", dir.path()).output().unwrap();
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("exp1/data/manifest.toml").exists());
}

#[test]
fn sweep_emits_one_row_per_value_and_leaves_inputs_untouched() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY);
    let out = dir.path().join("o");
    assert_eq!(code(&run(&["run", "-c", s(&cfg), "-o", s(&out), "--set", "stages=[\"data\", \"model\"]"])), 0);
    let before = tree(&out);
    let o = run(&["sweep", "-c", s(&cfg), "-o", s(&out), "--axis", "alpha", "--values", "4,8"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let after = tree(&out);
    for (path, bytes) in &before {
        assert_eq!(after.get(path), Some(bytes), "{} changed", path.display());
    }
    let table: ReportTable = serde_json::from_slice(&fs::read(out.join("sweep/alpha/table.json")).unwrap()).unwrap();
    let keys: Vec<&str> = table.rows.iter().map(|(k, _)| k.as_str()).collect();
    assert_eq!(keys, ["4", "8"]);
    assert_eq!(table.rows[1].1.mode.insertion_count, 8);
    for k in keys {
        let _: AttackReport = serde_json::from_slice(&fs::read(out.join(format!("sweep/alpha/{k}/report.json"))).unwrap()).unwrap();
    }
    assert_eq!(fs::read_to_string(out.join("sweep/alpha/table.txt")).unwrap().lines().count(), 3);
    assert_eq!(fs::read_to_string(out.join("sweep/alpha/table.tsv")).unwrap().lines().count(), 3);
}

#[test]
fn sweep_rejects_empty_values_and_unknown_axis() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY);
    let out = dir.path().join("o");
    assert_eq!(code(&run(&["run", "-c", s(&cfg), "-o", s(&out), "--set", "stages=[\"data\", \"model\"]"])), 0);
    assert_eq!(code(&run(&["sweep", "-c", s(&cfg), "-o", s(&out), "--axis", "alpha"])), 1);
    assert_eq!(code(&run(&["sweep", "-c", s(&cfg), "-o", s(&out), "--axis", "warp", "--values", "1"])), 1);
    assert_eq!(code(&run(&["sweep", "-c", s(&cfg), "-o", s(&out), "--axis", "sigma", "--values", "0.01"])), 1);
}

#[test]
fn pair_pipeline_reports_roc_points() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config(dir.path(), TINY_PAIRS);
    let out = dir.path().join("o");
    let o = run(&["run", "-c", s(&cfg), "-o", s(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let report: AttackReport = serde_json::from_slice(&fs::read(out.join("eval/report.json")).unwrap()).unwrap();
    assert_eq!(report.tp_at_fp.len(), 1);
    assert_eq!(fs::read_to_string(out.join("eval/roc.tsv")).unwrap().lines().count(), 2);
}

#[test]
fn defend_and_transfer_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let extra = "\n[defense]\nkind = \"flip_advtrain\"\nepochs = 1\n\n[transfer]\nfractions = [0.05, 0.1]\n";
    let cfg = config(dir.path(), &format!("{TINY}{extra}"));
    let out = dir.path().join("o");
    let stages = "stages=[\"data\", \"model\", \"defense\", \"transfer\"]";
    let o = run(&["run", "-c", s(&cfg), "-o", s(&out), "--set", stages]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let d: serde_json::Value = serde_json::from_slice(&fs::read(out.join("defense/report.json")).unwrap()).unwrap();
    assert_eq!(d["kind"], "flip_advtrain");
    assert!(d["defended"]["robust_accuracy"].is_number());
    let t: serde_json::Value = serde_json::from_slice(&fs::read(out.join("transfer/report.json")).unwrap()).unwrap();
    let rows = t["rows"].as_array().unwrap();
    assert_eq!(rows.iter().map(|r| r["insertion_count"].as_u64().unwrap()).collect::<Vec<_>>(), [4, 8]);
    assert!(out.join("defense/classifier.json").exists());
}

#[test]
fn shipped_configs_validate() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let dir = tempfile::tempdir().unwrap();
    let mut seen = 0;
    for e in fs::read_dir(&root).unwrap() {
        let p = e.unwrap().path();
        let o = run(&["run", "-c", s(&p), "-o", s(dir.path()), "--set", "stages=[]"]);
        assert_eq!(code(&o), 0, "{}: {}", p.display(), String::from_utf8_lossy(&o.stderr));
        seen += 1;
    }
    assert!(seen >= 3);
}
