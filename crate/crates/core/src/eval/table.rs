use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::{embed_store, moment_localization, pairs_discrimination, roa_hit_rate, test_triplets};
use crate::datakit::{FrameStore, Manifest, PairTruth, SamplerConfig};
use crate::error::{Error, Result};
use crate::model::Checkpoint;
use crate::trainer::{train, TrainConfig, TrainReport, Variant};

/// Test-time sampling of discrimination triplets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub sampler: SamplerConfig,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        EvalSettings {
            sampler: SamplerConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    /// Absent when the checkpoint is missing.
    pub accuracy: Option<f64>,
    pub moment_error: Option<f64>,
    pub moment_median: Option<f64>,
    pub roa_hit_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

const HEADERS: [&str; 5] = ["variant", "accuracy", "moment_error_s", "moment_median_s", "roa_hit_rate"];

impl AblationTable {
    pub fn row(&self, v: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == v)
    }

    fn cells(&self) -> Vec<[String; 5]> {
        self.rows
            .iter()
            .map(|r| {
                [
                    r.variant.name().to_string(),
                    cell(r.accuracy),
                    cell(r.moment_error),
                    cell(r.moment_median),
                    cell(r.roa_hit_rate),
                ]
            })
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self) -> String {
        let mut out = HEADERS.join(",");
        out.push('\n');
        for row in self.cells() {
            out.push_str(&row.join(","));
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let cells = self.cells();
        let widths: Vec<usize> = (0..5)
            .map(|i| cells.iter().map(|r| r[i].len()).chain([HEADERS[i].len()]).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        let line = |out: &mut String, row: &[&str]| {
            for (i, c) in row.iter().enumerate() {
                if i == 0 {
                    let _ = write!(out, "{c:<w$}", w = widths[i]);
                } else {
                    let _ = write!(out, "  {c:>w$}", w = widths[i]);
                }
            }
            out.push('\n');
        };
        line(&mut out, &HEADERS);
        for row in &cells {
            line(&mut out, &row.iter().map(String::as_str).collect::<Vec<_>>());
        }
        out
    }
}

/// Scores each checkpoint on the test split; a missing checkpoint yields an
/// empty row.
pub fn evaluate_checkpoints(
    manifest: &Manifest,
    store: &FrameStore,
    truths: Option<&[PairTruth]>,
    settings: &EvalSettings,
    checkpoints: &[(Variant, Option<&Checkpoint>)],
) -> Result<AblationTable> {
    let triplets = test_triplets(manifest, settings.sampler.clone(), settings.seed)?;
    let mut rows = Vec::with_capacity(checkpoints.len());
    for &(variant, ck) in checkpoints {
        let Some(ck) = ck else {
            log::warn!("no checkpoint for variant {variant}; row left empty");
            rows.push(AblationRow {
                variant,
                accuracy: None,
                moment_error: None,
                moment_median: None,
                roa_hit_rate: None,
            });
            continue;
        };
        if ck.variant != variant {
            return Err(Error::Validation(format!(
                "checkpoint trained as {} listed under {variant}",
                ck.variant
            )));
        }
        let table = embed_store(&ck.params, variant, store, manifest.len())?;
        let acc = pairs_discrimination(&table, &triplets)?;
        let mom = moment_localization(&table, manifest)?;
        let hit = truths.map(|t| roa_hit_rate(&ck.params, store, t)).transpose()?;
        rows.push(AblationRow {
            variant,
            accuracy: Some(acc.value),
            moment_error: Some(mom.value),
            moment_median: mom.median,
            roa_hit_rate: hit.map(|h| h.value),
        });
    }
    Ok(AblationTable { rows })
}

pub struct AblationRun {
    pub table: AblationTable,
    pub trained: Vec<(Checkpoint, TrainReport)>,
}

/// Trains every variant from the shared base config and seed, then scores
/// them on the test split.
pub fn run_ablations(
    base: &TrainConfig,
    variants: &[Variant],
    train_split: (&Manifest, &FrameStore),
    test_split: (&Manifest, &FrameStore),
    truths: Option<&[PairTruth]>,
    settings: &EvalSettings,
) -> Result<AblationRun> {
    let mut trained = Vec::with_capacity(variants.len());
    for &variant in variants {
        let cfg = TrainConfig {
            variant,
            ..base.clone()
        };
        trained.push(train(&cfg, train_split.0, train_split.1)?);
    }
    let listed: Vec<(Variant, Option<&Checkpoint>)> =
        trained.iter().map(|(ck, _)| (ck.variant, Some(ck))).collect();
    let table = evaluate_checkpoints(test_split.0, test_split.1, truths, settings, &listed)?;
    Ok(AblationRun { table, trained })
}
