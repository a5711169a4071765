use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::PerturbationGenerator;
use crate::{Error, Result};

const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    kind: String,
    generator: PerturbationGenerator,
}

pub fn save_generator(gen: &PerturbationGenerator, path: &Path) -> Result<()> {
    let ck = Checkpoint {
        format_version: FORMAT_VERSION,
        kind: "generator".into(),
        generator: gen.clone(),
    };
    fs::write(path, serde_json::to_string(&ck)?)?;
    Ok(())
}

pub fn load_generator(path: &Path) -> Result<PerturbationGenerator> {
    let text = fs::read_to_string(path)?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    let found = v.get("format_version").and_then(|x| x.as_u64()).unwrap_or(0) as u32;
    if found != FORMAT_VERSION {
        return Err(Error::Version {
            found,
            expected: FORMAT_VERSION,
        });
    }
    if v.get("kind").and_then(|k| k.as_str()) != Some("generator") {
        return Err(Error::Config(format!("{} is not a generator checkpoint", path.display())));
    }
    let ck: Checkpoint = serde_json::from_value(v)?;
    Ok(ck.generator)
}

/// Loads a generator and checks it fits `cfg` on a target of `layout`.
pub fn load_generator_for(path: &Path, cfg: &super::AttackConfig, layout: super::Layout) -> Result<PerturbationGenerator> {
    let gen = load_generator(path)?;
    gen.check_compatible(cfg, layout)?;
    Ok(gen)
}
