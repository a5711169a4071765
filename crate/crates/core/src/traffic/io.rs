use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, Flow, Split, DEFAULT_FIXED_LENGTH};
use crate::{Error, Result};

/// On-disk trace encodings understood by [`load_traces`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TraceFormat {
    /// `label<TAB>d1,d2,..<TAB>t1,t2,..<TAB>s1,s2,..`, one flow per line.
    Tsv,
}

impl std::str::FromStr for TraceFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tsv" => Ok(Self::Tsv),
            other => Err(Error::Config(format!("unknown trace format `{other}`"))),
        }
    }
}

/// Small header describing a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub class_count: usize,
    pub fixed_length: usize,
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl DatasetManifest {
    pub const VERSION: u32 = 1;
}

pub fn write_manifest(path: &Path, manifest: &DatasetManifest) -> Result<()> {
    let text = toml::to_string(manifest).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path)?;
    let manifest: DatasetManifest = toml::from_str(&text).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        line: e.span().map_or(0, |s| text[..s.start].lines().count().max(1)),
        msg: e.message().to_string(),
    })?;
    if manifest.format_version != DatasetManifest::VERSION {
        return Err(Error::Version {
            found: manifest.format_version,
            expected: DatasetManifest::VERSION,
        });
    }
    Ok(manifest)
}

/// Shortest round-trip decimal, padded to at least six fractional digits.
fn fmt_seconds(out: &mut String, v: f64) {
    let s = v.to_string();
    let frac = s.split_once('.').map_or(0, |(_, f)| f.len());
    if frac >= 6 {
        out.push_str(&s);
    } else {
        let _ = write!(out, "{v:.6}");
    }
}

pub fn save_traces(path: &Path, flows: &[Flow]) -> Result<()> {
    let mut out = String::new();
    for f in flows {
        let _ = write!(out, "{}\t", f.label);
        for (i, d) in f.directions.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{d}");
        }
        out.push('\t');
        for (i, t) in f.ipds.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            fmt_seconds(&mut out, *t);
        }
        out.push('\t');
        for (i, s) in f.sizes.iter().enumerate() {
            if i > 0 {
                out.push(',');
            }
            let _ = write!(out, "{s}");
        }
        out.push('\n');
    }
    fs::write(path, out)?;
    Ok(())
}

fn parse_list<T: std::str::FromStr>(field: &str) -> std::result::Result<Vec<T>, String> {
    if field.trim().is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(',')
        .map(|v| v.trim().parse::<T>().map_err(|_| format!("bad value `{v}`")))
        .collect()
}

/// Reads a trace file. Every record is validated; the first offending line
/// is reported. Class count is inferred as `max(label) + 1`.
pub fn load_traces(path: &Path, format: TraceFormat) -> Result<Dataset> {
    let TraceFormat::Tsv = format;
    let text = fs::read_to_string(path)?;
    let mut flows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let lineno = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: lineno,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(parse_err(format!("expected 4 tab-separated fields, found {}", fields.len())));
        }
        let label: usize = fields[0]
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad label `{}`", fields[0])))?;
        let directions = parse_list::<i8>(fields[1]).map_err(parse_err)?;
        let ipds = parse_list::<f64>(fields[2]).map_err(parse_err)?;
        let sizes = parse_list::<u32>(fields[3]).map_err(parse_err)?;
        let flow = Flow::new(directions, ipds, sizes, label).map_err(|e| match e {
            Error::Validation(msg) => Error::Validation(format!("line {lineno}: {msg}")),
            other => other,
        })?;
        flows.push(flow);
    }
    let class_count = flows.iter().map(|f| f.label + 1).max().unwrap_or(0);
    Ok(Dataset {
        samples: flows,
        split: Split::Train,
        fixed_length: DEFAULT_FIXED_LENGTH,
        class_count,
    })
}
