//! Replay summaries and consensus/attribution tables for a project log.

use std::path::Path;

use anyhow::{Context, Result};
use codesign_core::attribution::{report as shapley_report, ShapleyReport};
use codesign_core::consensus::ConsensusReport;
use codesign_core::preference::build_feature;
use codesign_gateway::{EventLog, ProjectState, TrainCache};
use serde::Serialize;

use crate::sim::to_csv;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplaySummary {
    pub project_id: Option<String>,
    pub events: u64,
    pub library_size: usize,
    pub sessions: usize,
    pub records: usize,
    pub manifests: usize,
    pub state_hash: String,
}

/// Reads and replays an event log. A torn final line is ignored, as on open;
/// anything else malformed is a `CorruptLog` error naming the seq.
pub fn load(path: &Path) -> Result<ProjectState> {
    let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let (events, _torn) = EventLog::parse(&bytes)?;
    let cache = TrainCache::default();
    Ok(ProjectState::replay(&events, Some(&cache))?)
}

pub fn summarize(state: &ProjectState) -> ReplaySummary {
    ReplaySummary {
        project_id: state.meta.as_ref().map(|m| m.project_id.clone()),
        events: state.log_offset,
        library_size: state.catalog.view().len(),
        sessions: state.sessions.len(),
        records: state.records.len(),
        manifests: state.manifests.len(),
        state_hash: state.state_hash(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConsensusRow {
    pub attribute: String,
    pub dimension: usize,
    pub index: usize,
    pub acs_raw: f64,
    pub acs_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UpuRow {
    pub user_id: String,
    pub attribute: String,
    pub upu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributionRow {
    pub item_id: String,
    pub user_id: String,
    pub dimension: String,
    pub phi: f64,
}

/// Consensus and per-item attribution for every live library item.
/// A project without users yields empty tables.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ProjectReport {
    pub consensus: Option<ConsensusReport>,
    pub attribution: Vec<ShapleyReport>,
}

impl ProjectReport {
    pub fn build(state: &ProjectState) -> Result<Self> {
        if state.sessions.is_empty() {
            return Ok(Self { consensus: None, attribution: Vec::new() });
        }
        let cfg = state.attribution_config()?;
        let attribution = state
            .catalog
            .view()
            .into_iter()
            .map(|item| {
                let feature = build_feature(item)?;
                let users = state.sessions.values().map(|s| (s.user_id(), s.model.net()));
                Ok(shapley_report(&item.item_id, &feature, users, &cfg)?)
            })
            .collect::<Result<_>>()?;
        Ok(Self { consensus: Some(state.consensus()), attribution })
    }

    pub fn consensus_rows(&self) -> Vec<ConsensusRow> {
        self.consensus
            .iter()
            .flat_map(|c| &c.acs)
            .map(|a| ConsensusRow {
                attribute: a.attribute.clone(),
                dimension: a.dimension,
                index: a.index,
                acs_raw: a.acs_raw,
                acs_norm: a.acs_norm,
            })
            .collect()
    }

    pub fn upu_rows(&self) -> Vec<UpuRow> {
        let mut rows = Vec::new();
        if let Some(c) = &self.consensus {
            for u in &c.upu {
                for (a, v) in c.acs.iter().zip(&u.upu) {
                    rows.push(UpuRow { user_id: u.user_id.clone(), attribute: a.attribute.clone(), upu: *v });
                }
            }
        }
        rows
    }

    pub fn attribution_rows(&self) -> Vec<AttributionRow> {
        let mut rows = Vec::new();
        for r in &self.attribution {
            for u in &r.per_user {
                for (name, phi) in r.dimensions.iter().zip(u.phi) {
                    rows.push(AttributionRow {
                        item_id: r.item_id.clone(),
                        user_id: u.user_id.clone(),
                        dimension: name.clone(),
                        phi,
                    });
                }
            }
        }
        rows
    }

    /// Writes `consensus.csv`, `upu.csv` and `attribution.csv`.
    pub fn write_csv(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let consensus = to_csv(&["attribute", "dimension", "index", "acs_raw", "acs_norm"], self.consensus_rows().iter())?;
        std::fs::write(dir.join("consensus.csv"), consensus)?;
        std::fs::write(dir.join("upu.csv"), to_csv(&["user_id", "attribute", "upu"], self.upu_rows().iter())?)?;
        let attribution = to_csv(&["item_id", "user_id", "dimension", "phi"], self.attribution_rows().iter())?;
        std::fs::write(dir.join("attribution.csv"), attribution)?;
        Ok(())
    }
}
