//! Flat JSON config files: training fields plus a few command-level keys.

use std::path::Path;

use egoexo_core::datakit::SynthConfig;
use egoexo_core::trainer::TrainConfig;
use egoexo_core::{Error, Result};
use serde::Deserialize;
use serde_json::{Map, Value};

/// Keys understood by commands rather than by the trainer.
#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Extras {
    pub pairs: Option<usize>,
    pub synth: Option<SynthConfig>,
    pub threshold: Option<f64>,
    pub percentile: Option<f64>,
    pub alpha: Option<f64>,
    pub segments: Option<usize>,
    pub samples: Option<usize>,
    pub step: Option<f64>,
}

const EXTRA_KEYS: [&str; 8] = [
    "pairs",
    "synth",
    "threshold",
    "percentile",
    "alpha",
    "segments",
    "samples",
    "step",
];

#[derive(Debug, Default)]
pub struct FileConfig {
    pub train: TrainConfig,
    pub extras: Extras,
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(FileConfig::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let bad = |e: serde_json::Error| Error::Config(format!("{}: {e}", path.display()));
        let mut train: Map<String, Value> = serde_json::from_str(&text).map_err(bad)?;
        let mut extras = Map::new();
        for key in EXTRA_KEYS {
            if let Some(v) = train.remove(key) {
                extras.insert(key.to_owned(), v);
            }
        }
        Ok(FileConfig {
            train: serde_json::from_value(Value::Object(train)).map_err(bad)?,
            extras: serde_json::from_value(Value::Object(extras)).map_err(bad)?,
        })
    }
}
