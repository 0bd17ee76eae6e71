//! JSON-lines manifest of paired first/third-person recordings.

use std::collections::HashSet;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One recorded stream. `path` points at a directory of per-second frames,
/// resolved relative to the manifest's directory when not absolute.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StreamRef {
    pub path: String,
    pub fps: f64,
    pub duration: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ActionSegment {
    pub label: String,
    pub start: f64,
    pub end: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoPair {
    pub pair_id: String,
    pub first_view: StreamRef,
    pub third_view: StreamRef,
    pub action_segments: Vec<ActionSegment>,
    #[serde(default = "default_valid", skip_serializing)]
    pub valid: bool,
}

fn default_valid() -> bool {
    true
}

impl VideoPair {
    pub fn stream(&self, view: View) -> &StreamRef {
        match view {
            View::First => &self.first_view,
            View::Third => &self.third_view,
        }
    }

    fn check(&self) -> std::result::Result<(), String> {
        if self.pair_id.is_empty() {
            return Err("empty pair_id".into());
        }
        for (name, s) in [("first_view", &self.first_view), ("third_view", &self.third_view)] {
            if !(s.duration.is_finite() && s.duration > 0.0) {
                return Err(format!("{name}.duration must be positive, got {}", s.duration));
            }
            if !(s.fps.is_finite() && s.fps > 0.0) {
                return Err(format!("{name}.fps must be positive, got {}", s.fps));
            }
        }
        let limit = self.third_view.duration;
        for seg in &self.action_segments {
            if !(seg.start >= 0.0 && seg.start < seg.end && seg.end <= limit) {
                return Err(format!(
                    "action segment '{}' [{}, {}) outside [0, {limit}]",
                    seg.label, seg.start, seg.end
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum View {
    First,
    Third,
}

impl View {
    pub fn as_str(self) -> &'static str {
        match self {
            View::First => "first",
            View::Third => "third",
        }
    }
}

impl std::fmt::Display for View {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub entries: Vec<VideoPair>,
    pub source_tag: String,
    /// Directory that relative stream paths are resolved against.
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn new(entries: Vec<VideoPair>, source_tag: impl Into<String>) -> Result<Self> {
        let m = Manifest {
            entries,
            source_tag: source_tag.into(),
            base_dir: PathBuf::new(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, pair_id: &str) -> Option<&VideoPair> {
        self.entries.iter().find(|p| p.pair_id == pair_id)
    }

    pub fn valid_pairs(&self) -> impl Iterator<Item = &VideoPair> {
        self.entries.iter().filter(|p| p.valid)
    }

    pub fn resolve(&self, stream: &StreamRef) -> PathBuf {
        let p = Path::new(&stream.path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for pair in &self.entries {
            pair.check()
                .map_err(|e| Error::Validation(format!("pair '{}': {e}", pair.pair_id)))?;
            if !seen.insert(pair.pair_id.as_str()) {
                return Err(Error::Validation(format!("duplicate pair_id '{}'", pair.pair_id)));
            }
        }
        Ok(())
    }

    /// Keeps the entries whose position satisfies `keep`; used for train/test splits.
    pub fn subset(&self, mut keep: impl FnMut(usize, &VideoPair) -> bool) -> Manifest {
        Manifest {
            entries: self
                .entries
                .iter()
                .enumerate()
                .filter(|(i, p)| keep(*i, p))
                .map(|(_, p)| p.clone())
                .collect(),
            source_tag: self.source_tag.clone(),
            base_dir: self.base_dir.clone(),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut out = Vec::new();
        for pair in &self.entries {
            serde_json::to_writer(&mut out, pair)?;
            out.push(b'\n');
        }
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&out).map_err(|e| Error::io(path, e))
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: line_no,
            msg,
        };
        let pair: VideoPair = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        pair.check().map_err(parse_err)?;
        if !seen.insert(pair.pair_id.clone()) {
            return Err(Error::Validation(format!(
                "{}:{line_no}: duplicate pair_id '{}'",
                path.display(),
                pair.pair_id
            )));
        }
        entries.push(pair);
    }
    Ok(Manifest {
        entries,
        source_tag: path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_default(),
        base_dir: path.parent().map(Path::to_path_buf).unwrap_or_default(),
    })
}

/// Plain text, one pair id per line. Blank lines and `#` comments are ignored.
pub fn load_blacklist(path: impl AsRef<Path>) -> Result<Vec<String>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(str::to_owned)
        .collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FilterReport {
    pub before: usize,
    pub removed: usize,
    pub after: usize,
    /// Blacklisted ids that did not occur in the manifest.
    pub unknown: Vec<String>,
}

pub fn filter_invalid_pairs(m: &Manifest, blacklist: &[String]) -> (Manifest, FilterReport) {
    let banned: HashSet<&str> = blacklist.iter().map(String::as_str).collect();
    let present: HashSet<&str> = m.entries.iter().map(|p| p.pair_id.as_str()).collect();
    let mut unknown: Vec<String> = banned
        .iter()
        .filter(|id| !present.contains(**id))
        .map(|id| id.to_string())
        .collect();
    unknown.sort();
    for id in &unknown {
        log::warn!("blacklisted pair '{id}' is not in the manifest");
    }
    let out = m.subset(|_, p| !banned.contains(p.pair_id.as_str()));
    let report = FilterReport {
        before: m.len(),
        removed: m.len() - out.len(),
        after: out.len(),
        unknown,
    };
    log::info!(
        "filtered manifest: {} -> {} pairs ({} removed)",
        report.before,
        report.after,
        report.removed
    );
    (out, report)
}
