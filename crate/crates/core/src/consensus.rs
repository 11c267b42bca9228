//! Per-user attribute utilities and group consensus from brush feedback.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::design_space::{AttributeId, DesignSpace, DesignVector, ONE_HOT_LEN};
use crate::elicitation::{InteractionKind, InteractionRecord, Polarity};

pub const ACS_NORM_MIN: f64 = 0.01;
pub const ACS_NORM_MAX: f64 = 0.99;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub likes: u64,
    pub dislikes: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PreferenceTally {
    counts: BTreeMap<(String, AttributeId), Counts>,
    users: BTreeSet<String>,
    /// Records that referenced items missing from the catalog.
    pub skipped: usize,
}

impl PreferenceTally {
    pub fn get(&self, user_id: &str, attribute: AttributeId) -> Counts {
        self.counts.get(&(user_id.to_string(), attribute)).copied().unwrap_or_default()
    }

    pub fn users(&self) -> impl Iterator<Item = &str> {
        self.users.iter().map(String::as_str)
    }

    /// Nonzero counters in (user, attribute) order.
    pub fn entries(&self) -> impl Iterator<Item = (&str, AttributeId, Counts)> {
        self.counts.iter().map(|((u, a), c)| (u.as_str(), *a, *c))
    }

    pub fn add(&mut self, user_id: &str, attribute: AttributeId, polarity: Polarity) {
        self.users.insert(user_id.to_string());
        let c = self.counts.entry((user_id.to_string(), attribute)).or_default();
        match polarity {
            Polarity::Like => c.likes += 1,
            Polarity::Dislike => c.dislikes += 1,
        }
    }
}

/// Each confirmed dimension of a brush record credits the garment's attribute in that dimension.
pub fn tally<'a, F>(records: impl IntoIterator<Item = &'a InteractionRecord>, lookup: F) -> PreferenceTally
where
    F: Fn(&str) -> Option<DesignVector>,
{
    let mut t = PreferenceTally::default();
    for rec in records {
        if rec.kind != InteractionKind::Brush {
            continue;
        }
        let Some(v) = lookup(&rec.item_id) else {
            t.skipped += 1;
            continue;
        };
        for &d in &rec.confirmed_dimensions {
            t.add(&rec.user_id, v.attribute(d), rec.polarity);
        }
    }
    t
}

/// Laplace-smoothed utility `(L + 1) / (L + D + 2)`.
pub fn upu(likes: u64, dislikes: u64) -> f64 {
    (likes as f64 + 1.0) / (likes as f64 + dislikes as f64 + 2.0)
}

/// Geometric mean computed as `exp(mean(ln x))`.
///
/// Logs are summed in sorted order, so the result does not depend on the
/// order of `values` down to the last bit.
pub fn geometric_mean(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mut logs: Vec<f64> = values.iter().map(|v| v.ln()).collect();
    logs.sort_by(f64::total_cmp);
    (logs.iter().sum::<f64>() / n).exp()
}

/// Per-dimension min-max onto `[0.01, 0.99]`; a constant dimension maps to 0.5.
pub fn normalize_per_dimension(raw: &[f64; ONE_HOT_LEN]) -> [f64; ONE_HOT_LEN] {
    let space = DesignSpace::canonical();
    let mut out = [0.5; ONE_HOT_LEN];
    for d in 0..space.dimensions().len() {
        let start = space.offsets()[d];
        let block = &raw[start..start + space.attribute_count(d)];
        let lo = block.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = block.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi > lo {
            for (i, v) in block.iter().enumerate() {
                out[start + i] = (ACS_NORM_MIN + (ACS_NORM_MAX - ACS_NORM_MIN) * (v - lo) / (hi - lo))
                    .clamp(ACS_NORM_MIN, ACS_NORM_MAX);
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserUtilities {
    pub user_id: String,
    /// One value per attribute in one-hot order.
    pub upu: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeConsensus {
    pub attribute: String,
    pub dimension: usize,
    pub index: usize,
    pub acs_raw: f64,
    pub acs_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsensusReport {
    pub log_offset: u64,
    pub n: usize,
    pub upu: Vec<UserUtilities>,
    pub acs: Vec<AttributeConsensus>,
}

impl ConsensusReport {
    pub fn acs_raw(&self, id: AttributeId) -> f64 {
        self.acs[DesignSpace::canonical().flat_index(id)].acs_raw
    }

    pub fn acs_norm(&self, id: AttributeId) -> f64 {
        self.acs[DesignSpace::canonical().flat_index(id)].acs_norm
    }

    pub fn upu_of(&self, user_id: &str, id: AttributeId) -> Option<f64> {
        let k = DesignSpace::canonical().flat_index(id);
        self.upu.iter().find(|u| u.user_id == user_id).map(|u| u.upu[k])
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Utilities for every listed user (users without feedback sit at the 0.5 prior)
/// and their normalized geometric-mean consensus. An empty user list yields
/// the prior everywhere.
pub fn consensus(tally: &PreferenceTally, users: &[String], log_offset: u64) -> ConsensusReport {
    let space = DesignSpace::canonical();
    let attrs: Vec<AttributeId> = space.all_attributes().collect();
    let upu_rows: Vec<UserUtilities> = users
        .iter()
        .map(|u| UserUtilities {
            user_id: u.clone(),
            upu: attrs
                .iter()
                .map(|&a| {
                    let c = tally.get(u, a);
                    upu(c.likes, c.dislikes)
                })
                .collect(),
        })
        .collect();
    let mut raw = [0.5; ONE_HOT_LEN];
    if !users.is_empty() {
        for (k, r) in raw.iter_mut().enumerate() {
            let column: Vec<f64> = upu_rows.iter().map(|row| row.upu[k]).collect();
            *r = geometric_mean(&column);
        }
    }
    let norm = normalize_per_dimension(&raw);
    let acs = attrs
        .iter()
        .enumerate()
        .map(|(k, &a)| AttributeConsensus {
            attribute: space.qualified_name(a),
            dimension: a.dimension,
            index: a.attribute,
            acs_raw: raw[k],
            acs_norm: norm[k],
        })
        .collect();
    ConsensusReport { log_offset, n: users.len(), upu: upu_rows, acs }
}
