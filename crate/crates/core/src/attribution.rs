//! Exact Shapley attribution of a preference logit over the nine design dimensions.

use serde::{Deserialize, Serialize};

use crate::catalog::DesignItem;
use crate::design_space::{DesignSpace, DIMENSION_COUNT, ONE_HOT_LEN};
use crate::error::{Error, Result};
use crate::preference::{build_feature, sigmoid, HybridFeature, LogitModel, Ppnn, FEATURE_DIM, HIDDEN_DIM};

pub const COALITIONS: usize = 1 << DIMENSION_COUNT;

/// `|S|! (n - |S| - 1)! / n!` indexed by `|S|`.
fn shapley_weights() -> [f64; DIMENSION_COUNT] {
    let fact = |k: usize| (1..=k).map(|i| i as f64).product::<f64>();
    let n = fact(DIMENSION_COUNT);
    std::array::from_fn(|s| fact(s) * fact(DIMENSION_COUNT - s - 1) / n)
}

fn block(d: usize) -> std::ops::Range<usize> {
    let space = DesignSpace::canonical();
    let start = space.offsets()[d];
    start..start + space.attribute_count(d)
}

/// Feature whose dimension blocks in `mask` come from `instance`, the rest from
/// `baseline`; the visual block always comes from `instance`.
pub fn coalition_feature(instance: &[f64], baseline: &[f64], mask: usize) -> Vec<f64> {
    let mut x = instance.to_vec();
    for d in 0..DIMENSION_COUNT {
        if mask & (1 << d) == 0 {
            let r = block(d);
            x[r.clone()].copy_from_slice(&baseline[r]);
        }
    }
    x
}

/// Value of every coalition, evaluating the model on each mixed feature.
pub fn coalition_values<M: LogitModel + ?Sized>(model: &M, instance: &[f64], baseline: &[f64]) -> Vec<f64> {
    (0..COALITIONS).map(|mask| model.logit(&coalition_feature(instance, baseline, mask))).collect()
}

/// Same table as [`coalition_values`] for the preference network, built from
/// per-block hidden-layer contributions instead of 512 full forward passes.
pub fn coalition_values_ppnn(net: &Ppnn, instance: &[f64], baseline: &[f64]) -> Vec<f64> {
    let mut fixed: [f64; HIDDEN_DIM] = net.hidden_bias().try_into().unwrap();
    for (i, &v) in instance.iter().enumerate().skip(ONE_HOT_LEN) {
        if v != 0.0 {
            for (f, w) in fixed.iter_mut().zip(net.input_weights(i)) {
                *f += v * w;
            }
        }
    }
    let contribution = |src: &[f64], d: usize| {
        let mut c = [0.0; HIDDEN_DIM];
        for i in block(d) {
            if src[i] != 0.0 {
                for (cj, w) in c.iter_mut().zip(net.input_weights(i)) {
                    *cj += src[i] * w;
                }
            }
        }
        c
    };
    let inst: Vec<[f64; HIDDEN_DIM]> = (0..DIMENSION_COUNT).map(|d| contribution(instance, d)).collect();
    let base: Vec<[f64; HIDDEN_DIM]> = (0..DIMENSION_COUNT).map(|d| contribution(baseline, d)).collect();
    (0..COALITIONS)
        .map(|mask| {
            let mut pre = fixed;
            for d in 0..DIMENSION_COUNT {
                let c = if mask & (1 << d) != 0 { &inst[d] } else { &base[d] };
                for (p, v) in pre.iter_mut().zip(c) {
                    *p += v;
                }
            }
            net.head(&pre)
        })
        .collect()
}

/// Shapley values from a full coalition value table indexed by bitmask.
pub fn shapley_from_values(values: &[f64]) -> [f64; DIMENSION_COUNT] {
    assert_eq!(values.len(), COALITIONS);
    let w = shapley_weights();
    let mut phi = [0.0; DIMENSION_COUNT];
    for (d, phi_d) in phi.iter_mut().enumerate() {
        let bit = 1 << d;
        for mask in 0..COALITIONS {
            if mask & bit == 0 {
                *phi_d += w[mask.count_ones() as usize] * (values[mask | bit] - values[mask]);
            }
        }
    }
    phi
}

pub fn shapley_exact<M: LogitModel + ?Sized>(model: &M, instance: &[f64], baseline: &[f64]) -> [f64; DIMENSION_COUNT] {
    shapley_from_values(&coalition_values(model, instance, baseline))
}

pub fn shapley_exact_ppnn(net: &Ppnn, instance: &[f64], baseline: &[f64]) -> [f64; DIMENSION_COUNT] {
    shapley_from_values(&coalition_values_ppnn(net, instance, baseline))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionConfig {
    pub baseline: HybridFeature,
}

impl AttributionConfig {
    /// Mean hybrid feature over the given items; all zeros when there are none.
    pub fn catalog_mean<'a>(items: impl IntoIterator<Item = &'a DesignItem>) -> Result<Self> {
        let mut sum = vec![0.0; FEATURE_DIM];
        let mut n = 0usize;
        for item in items {
            for (s, v) in sum.iter_mut().zip(build_feature(item)?.as_slice()) {
                *s += v;
            }
            n += 1;
        }
        if n > 0 {
            sum.iter_mut().for_each(|s| *s /= n as f64);
        }
        Ok(Self { baseline: HybridFeature::from_values(sum)? })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserAttribution {
    pub user_id: String,
    pub phi: [f64; DIMENSION_COUNT],
    pub p: f64,
    pub logit: f64,
    pub baseline_logit: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapleyReport {
    pub item_id: String,
    pub dimensions: Vec<String>,
    pub per_user: Vec<UserAttribution>,
    pub mean_abs: [f64; DIMENSION_COUNT],
    pub summary: Vec<String>,
}

pub fn attribute_user(user_id: &str, net: &Ppnn, instance: &HybridFeature, cfg: &AttributionConfig) -> UserAttribution {
    let values = coalition_values_ppnn(net, instance.as_slice(), cfg.baseline.as_slice());
    let logit = values[COALITIONS - 1];
    UserAttribution {
        user_id: user_id.to_string(),
        phi: shapley_from_values(&values),
        p: sigmoid(logit),
        logit,
        baseline_logit: values[0],
    }
}

/// Mean absolute contribution per dimension plus one line per user naming
/// the dimension that moved their logit most.
pub fn aggregate(per_user: &[UserAttribution]) -> Result<([f64; DIMENSION_COUNT], Vec<String>)> {
    if per_user.is_empty() {
        return Err(Error::InvalidInteraction("attribution needs at least one user".into()));
    }
    let space = DesignSpace::canonical();
    let n = per_user.len() as f64;
    let mean_abs = std::array::from_fn(|d| per_user.iter().map(|u| u.phi[d].abs()).sum::<f64>() / n);
    let summary = per_user
        .iter()
        .map(|u| {
            let d = dominant_dimension(&u.phi);
            let direction = if u.phi[d] >= 0.0 { "raises" } else { "lowers" };
            format!(
                "{}: {} {} preference most ({:+.4} logit)",
                u.user_id,
                space.dimension(d).name,
                direction,
                u.phi[d]
            )
        })
        .collect();
    Ok((mean_abs, summary))
}

/// Index of the largest |phi|, first wins on ties.
pub fn dominant_dimension(phi: &[f64; DIMENSION_COUNT]) -> usize {
    let mut best = 0;
    for d in 1..DIMENSION_COUNT {
        if phi[d].abs() > phi[best].abs() {
            best = d;
        }
    }
    best
}

pub fn report<'a>(
    item_id: &str,
    instance: &HybridFeature,
    users: impl IntoIterator<Item = (&'a str, &'a Ppnn)>,
    cfg: &AttributionConfig,
) -> Result<ShapleyReport> {
    let per_user: Vec<UserAttribution> = users.into_iter().map(|(u, net)| attribute_user(u, net, instance, cfg)).collect();
    let (mean_abs, summary) = aggregate(&per_user)?;
    Ok(ShapleyReport {
        item_id: item_id.to_string(),
        dimensions: DesignSpace::canonical().dimensions().iter().map(|d| d.name.clone()).collect(),
        per_user,
        mean_abs,
        summary,
    })
}
