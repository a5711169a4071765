use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::Classifier;
use crate::{Error, Result};

const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format_version: u32,
    kind: String,
    model: Classifier,
}

pub fn save_classifier(model: &Classifier, path: &Path) -> Result<()> {
    let ck = Checkpoint {
        format_version: VERSION,
        kind: "classifier".into(),
        model: model.clone(),
    };
    fs::write(path, serde_json::to_vec(&ck)?)?;
    Ok(())
}

pub fn load_classifier(path: &Path) -> Result<Classifier> {
    let ck: Checkpoint = serde_json::from_slice(&fs::read(path)?)?;
    if ck.format_version != VERSION {
        return Err(Error::Version {
            found: ck.format_version,
            expected: VERSION,
        });
    }
    if ck.kind != "classifier" {
        return Err(Error::Config(format!("{} holds a {} checkpoint", path.display(), ck.kind)));
    }
    Ok(ck.model)
}
