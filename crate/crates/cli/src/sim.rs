//! Synthetic-user simulation driven through the in-process gateway.
//!
//! Each simulated user carries planted linear weights over the 51 attribute
//! indicators. They vote Like iff an item's utility beats their median over the
//! generated population, and brush the zones of the two dimensions whose
//! attribute weight is largest in magnitude.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, ensure, Context, Result};
use codesign_core::catalog::{CurateOp, DesignItem};
use codesign_core::design_space::{DesignSpace, DesignVector, DIMENSION_COUNT, ONE_HOT_LEN};
use codesign_core::elicitation::{Gender, InteractionKind, Polarity, UserProfile};
use codesign_core::palette::PuzzleSelection;
use codesign_core::preference::{build_feature, entropy, HybridFeature, PpnnState, Strategy};
use codesign_gateway::demo::zone_region;
use codesign_gateway::service::{CreateProject, FramingRequest, InformedRequest, InteractionRequest, VoteRequest};
use codesign_gateway::state::derive_seed;
use codesign_gateway::{Gateway, WriteOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::stats;

const GENERATION_BATCH: usize = 500;

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub users: usize,
    /// Items users can be shown.
    pub catalog: usize,
    /// Extra items generated alongside the catalog, removed from the library and
    /// used only for evaluation.
    pub holdout: usize,
    pub rounds: usize,
    pub seeds: Vec<u64>,
    pub strategies: Vec<Strategy>,
    /// Label flip probability in [0, 0.5).
    pub noise: f64,
    /// Brushes per shown item (the top-|weight| dimensions).
    pub brushes: usize,
    /// Run informed generation from the consensus palette at the end.
    pub informed: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            users: 3,
            catalog: 200,
            holdout: 200,
            rounds: 6,
            seeds: (0..20).collect(),
            strategies: vec![Strategy::Entropy, Strategy::Random],
            noise: 0.0,
            brushes: 2,
            informed: true,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(self.users >= 1, "at least one user is required");
        ensure!(self.catalog >= 1, "catalog must hold at least one item");
        ensure!(self.holdout >= 2, "holdout needs at least two items");
        ensure!(self.rounds >= 1, "rounds must be at least 1");
        ensure!(!self.seeds.is_empty(), "no seeds given");
        ensure!(!self.strategies.is_empty(), "no strategies given");
        ensure!((0.0..0.5).contains(&self.noise), "noise must lie in [0, 0.5), got {}", self.noise);
        ensure!(self.brushes <= DIMENSION_COUNT, "at most {DIMENSION_COUNT} brushes per item");
        for s in &self.strategies {
            if *s == Strategy::ColdStart {
                bail!("cold_start is not a round strategy");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticUser {
    pub user_id: String,
    pub weights: [f64; ONE_HOT_LEN],
    pub noise: f64,
    pub threshold: f64,
    seed: u64,
}

impl SyntheticUser {
    /// Weights are uniform on [-1, 1]; the threshold is set later from the item population.
    pub fn new(user_id: &str, seed: u64, noise: f64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synthetic-user", user_id));
        let weights = std::array::from_fn(|_| rng.gen_range(-1.0..=1.0));
        Self { user_id: user_id.into(), weights, noise, threshold: 0.0, seed }
    }

    pub fn weight(&self, v: &DesignVector, d: usize) -> f64 {
        self.weights[DesignSpace::canonical().flat_index(v.attribute(d))]
    }

    pub fn utility(&self, v: &DesignVector) -> f64 {
        (0..DIMENSION_COUNT).map(|d| self.weight(v, d)).sum()
    }

    pub fn calibrate(&mut self, population: &[DesignVector]) {
        let utils: Vec<f64> = population.iter().map(|v| self.utility(v)).collect();
        self.threshold = stats::median(&utils);
    }

    pub fn truth(&self, v: &DesignVector) -> bool {
        self.utility(v) > self.threshold
    }

    /// The noisy label. The flip is a fixed coin per (user, item), so every
    /// strategy sees the same labels.
    pub fn label(&self, item_id: &str, v: &DesignVector) -> bool {
        let truth = self.truth(v);
        if self.noise == 0.0 {
            return truth;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(self.seed, "label-noise", &format!("{}/{item_id}", self.user_id)));
        truth ^ rng.gen_bool(self.noise)
    }

    /// Dimensions to brush on `v`, largest |weight| first, ties by index.
    pub fn brush_dimensions(&self, v: &DesignVector, count: usize) -> Vec<usize> {
        let mut dims: Vec<usize> = (0..DIMENSION_COUNT).collect();
        dims.sort_by(|&a, &b| self.weight(v, b).abs().total_cmp(&self.weight(v, a).abs()).then(a.cmp(&b)));
        dims.truncate(count);
        dims
    }

    /// Mean planted weight per attribute across users.
    pub fn mean_weights(users: &[SyntheticUser]) -> [f64; ONE_HOT_LEN] {
        std::array::from_fn(|i| users.iter().map(|u| u.weights[i]).sum::<f64>() / users.len() as f64)
    }
}

const ROUND_HEADER: &[&str] = &[
    "seed",
    "strategy",
    "user",
    "round",
    "labels",
    "train_accuracy",
    "heldout_accuracy",
    "heldout_auc",
    "mean_entropy",
];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub seed: u64,
    pub strategy: String,
    pub user: String,
    pub round: usize,
    pub labels: usize,
    pub train_accuracy: f64,
    pub heldout_accuracy: f64,
    pub heldout_auc: Option<f64>,
    pub mean_entropy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DimensionCorrelation {
    pub seed: u64,
    pub strategy: String,
    pub dimension: usize,
    pub name: String,
    pub spearman: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairedAuc {
    pub seed: u64,
    pub entropy_auc: f64,
    pub random_auc: f64,
    pub difference: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub seed: u64,
    pub strategy: Strategy,
    pub rounds: Vec<RoundMetrics>,
    pub correlations: Vec<DimensionCorrelation>,
    pub informed_items: usize,
    pub state_hash: String,
}

impl RunResult {
    /// Mean held-out AUC over users after their last trained round.
    pub fn final_auc(&self) -> f64 {
        let mut last: BTreeMap<&str, &RoundMetrics> = BTreeMap::new();
        for m in &self.rounds {
            last.insert(&m.user, m);
        }
        let aucs: Vec<f64> = last.values().filter_map(|m| m.heldout_auc).collect();
        stats::mean(&aucs)
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct SimReport {
    pub runs: Vec<RunResult>,
}

pub fn strategy_name(s: Strategy) -> &'static str {
    match s {
        Strategy::ColdStart => "cold_start",
        Strategy::Entropy => "entropy",
        Strategy::Random => "random",
    }
}

impl SimReport {
    pub fn rounds(&self) -> impl Iterator<Item = &RoundMetrics> {
        self.runs.iter().flat_map(|r| &r.rounds)
    }

    pub fn correlations(&self) -> impl Iterator<Item = &DimensionCorrelation> {
        self.runs.iter().flat_map(|r| &r.correlations)
    }

    fn final_auc(&self, seed: u64, strategy: Strategy) -> Option<f64> {
        self.runs.iter().find(|r| r.seed == seed && r.strategy == strategy).map(RunResult::final_auc)
    }

    /// Per-seed Entropy-minus-Random final AUC, for seeds that ran both.
    pub fn paired(&self) -> Vec<PairedAuc> {
        let mut seeds: Vec<u64> = self.runs.iter().map(|r| r.seed).collect();
        seeds.dedup();
        seeds
            .into_iter()
            .filter_map(|seed| {
                let e = self.final_auc(seed, Strategy::Entropy)?;
                let r = self.final_auc(seed, Strategy::Random)?;
                Some(PairedAuc { seed, entropy_auc: e, random_auc: r, difference: e - r })
            })
            .collect()
    }

    pub fn mean_final_auc(&self, strategy: Strategy) -> Option<f64> {
        let v: Vec<f64> = self.runs.iter().filter(|r| r.strategy == strategy).map(RunResult::final_auc).collect();
        (!v.is_empty()).then(|| stats::mean(&v))
    }

    pub fn rounds_csv(&self) -> Result<Vec<u8>> {
        to_csv(ROUND_HEADER, self.rounds())
    }

    pub fn correlations_csv(&self) -> Result<Vec<u8>> {
        to_csv(&["seed", "strategy", "dimension", "name", "spearman"], self.correlations())
    }

    pub fn paired_csv(&self) -> Result<Vec<u8>> {
        to_csv(&["seed", "entropy_auc", "random_auc", "difference"], self.paired().iter())
    }

    /// Writes `rounds.csv`, `consensus.csv` and `paired.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        std::fs::write(dir.join("rounds.csv"), self.rounds_csv()?)?;
        std::fs::write(dir.join("consensus.csv"), self.correlations_csv()?)?;
        std::fs::write(dir.join("paired.csv"), self.paired_csv()?)?;
        Ok(())
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for s in [Strategy::Entropy, Strategy::Random] {
            if let Some(auc) = self.mean_final_auc(s) {
                out.push_str(&format!("{}: mean final held-out AUC {auc:.4}\n", strategy_name(s)));
            }
        }
        let paired = self.paired();
        if !paired.is_empty() {
            let diffs: Vec<f64> = paired.iter().map(|p| p.difference).collect();
            let wins = diffs.iter().filter(|d| **d > 0.0).count();
            out.push_str(&format!(
                "entropy - random: mean {:+.4} over {} seeds, positive in {}\n",
                stats::mean(&diffs),
                diffs.len(),
                wins
            ));
        }
        out
    }
}

/// CSV with a header row even when there are no rows.
pub fn to_csv<'a, T: Serialize + 'a>(header: &[&str], rows: impl Iterator<Item = &'a T>) -> Result<Vec<u8>> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| anyhow::anyhow!("{e}"))
}

pub fn simulate(cfg: &SimConfig) -> Result<SimReport> {
    cfg.validate()?;
    let mut report = SimReport::default();
    for &seed in &cfg.seeds {
        for &strategy in &cfg.strategies {
            report.runs.push(run_once(cfg, seed, strategy).with_context(|| format!("seed {seed}, {strategy:?}"))?);
        }
    }
    Ok(report)
}

fn profile(user_id: &str, i: usize, rng: &mut ChaCha8Rng) -> UserProfile {
    let gender = [Gender::F, Gender::M, Gender::Unspecified][i % 3];
    UserProfile { user_id: user_id.into(), gender, height_cm: rng.gen_range(150.0..195.0), weight_kg: rng.gen_range(45.0..100.0) }
}

struct Eval<'a> {
    holdout: &'a [(HybridFeature, bool)],
}

impl Eval<'_> {
    fn metrics(&self, model: &PpnnState, labeled: &[(HybridFeature, bool)]) -> (f64, f64, Option<f64>, f64) {
        let probs: Vec<f64> = self.holdout.iter().map(|(x, _)| model.predict(x).p).collect();
        let truth: Vec<bool> = self.holdout.iter().map(|(_, t)| *t).collect();
        let train_p: Vec<f64> = labeled.iter().map(|(x, _)| model.predict(x).p).collect();
        let train_y: Vec<bool> = labeled.iter().map(|(_, y)| *y).collect();
        let ent: Vec<f64> = probs.iter().map(|p| entropy(*p)).collect();
        (stats::accuracy(&train_p, &train_y), stats::accuracy(&probs, &truth), stats::auc(&probs, &truth), stats::mean(&ent))
    }
}

/// One seeded project: framing, library, elicitation for every user, then
/// consensus and optionally informed generation.
pub fn run_once(cfg: &SimConfig, seed: u64, strategy: Strategy) -> Result<RunResult> {
    let gw = Gateway::in_memory(seed);
    let none = WriteOptions::default();
    let pid = gw
        .create_project(CreateProject {
            name: format!("sim-{seed}"),
            seed: Some(seed),
            max_rounds: Some(cfg.rounds),
            strategy: Some(strategy),
        })?
        .project_id;
    gw.apply_framing(
        &pid,
        &FramingRequest {
            garment_type: "Shirt".into(),
            scene: "plain studio".into(),
            principle: "open brief".into(),
            strictness: 0.0,
        },
        &none,
    )?;

    let total = cfg.catalog + cfg.holdout;
    let mut items: Vec<DesignItem> = Vec::with_capacity(total);
    while items.len() < total {
        let n = (total - items.len()).min(GENERATION_BATCH);
        let before: std::collections::BTreeSet<String> = items.iter().map(|i| i.item_id.clone()).collect();
        let view = gw.generate_library(&pid, n, &none)?;
        items.extend(view.items.into_iter().filter(|i| !before.contains(&i.item_id)));
    }
    items.sort_by(|a, b| a.item_id.cmp(&b.item_id));
    let heldout_items = items.split_off(cfg.catalog);
    gw.curate(&pid, heldout_items.iter().map(|i| CurateOp::Remove { item_id: i.item_id.clone() }).collect(), &none)?;

    let population: Vec<DesignVector> = items.iter().chain(&heldout_items).map(|i| i.design_vector).collect();
    let mut profile_rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synthetic-profile", ""));
    let mut users = Vec::new();
    let mut sessions = Vec::new();
    for i in 0..cfg.users {
        let id = format!("user-{i:02}");
        let mut u = SyntheticUser::new(&id, seed, cfg.noise);
        u.calibrate(&population);
        sessions.push(gw.open_session(&pid, profile(&id, i, &mut profile_rng), &none)?.session_id);
        users.push(u);
    }

    let features: BTreeMap<String, HybridFeature> =
        items.iter().map(|i| Ok((i.item_id.clone(), build_feature(i)?))).collect::<Result<_>>()?;
    let mut metrics = Vec::new();
    let holdouts: Vec<Vec<(HybridFeature, bool)>> = users
        .iter()
        .map(|u| heldout_items.iter().map(|i| Ok((build_feature(i)?, u.truth(&i.design_vector)))).collect::<Result<_>>())
        .collect::<Result<_>>()?;

    loop {
        let mut progressed = false;
        for (ui, (u, sid)) in users.iter().zip(&sessions).enumerate() {
            let view = gw.round(sid)?;
            if view.finished || view.pending_items.is_empty() {
                continue;
            }
            progressed = true;
            let round_index = view.round.round_index;
            for item_id in &view.pending_items {
                let item = view.items.iter().find(|i| &i.item_id == item_id).context("round item missing from view")?;
                let v = item.design_vector;
                for d in u.brush_dimensions(&v, cfg.brushes) {
                    let polarity = if u.weight(&v, d) >= 0.0 { Polarity::Like } else { Polarity::Dislike };
                    gw.interact(
                        sid,
                        InteractionRequest {
                            item_id: item_id.clone(),
                            kind: InteractionKind::Brush,
                            polarity,
                            region: Some(zone_region(d, item.image_width, item.image_height)?),
                            confirmed_dimensions: [d].into(),
                            comment: None,
                        },
                        &none,
                    )?;
                }
                let polarity = if u.label(item_id, &v) { Polarity::Like } else { Polarity::Dislike };
                gw.vote(sid, VoteRequest { item_id: item_id.clone(), polarity, comment: None }, &none)?;
            }
            let snap = gw.snapshot(&pid)?;
            let session = &snap.sessions[sid];
            ensure!(session.model.version as usize == round_index + 1, "round {round_index} was not trained");
            let labeled: Vec<(HybridFeature, bool)> =
                session.votes.iter().map(|(id, p)| (features[id].clone(), *p == Polarity::Like)).collect();
            let (train_accuracy, heldout_accuracy, heldout_auc, mean_entropy) =
                Eval { holdout: &holdouts[ui] }.metrics(&session.model, &labeled);
            metrics.push(RoundMetrics {
                seed,
                strategy: strategy_name(strategy).into(),
                user: u.user_id.clone(),
                round: round_index,
                labels: labeled.len(),
                train_accuracy,
                heldout_accuracy,
                heldout_auc,
                mean_entropy,
            });
        }
        if !progressed {
            break;
        }
    }

    let consensus = gw.consensus(&pid)?;
    let mean_w = SyntheticUser::mean_weights(&users);
    let space = DesignSpace::canonical();
    let correlations = (0..DIMENSION_COUNT)
        .map(|d| {
            let ids: Vec<_> = (0..space.attribute_count(d)).map(|a| codesign_core::AttributeId::new(d, a).unwrap()).collect();
            let acs: Vec<f64> = ids.iter().map(|id| consensus.acs_raw(*id)).collect();
            let planted: Vec<f64> = ids.iter().map(|id| mean_w[space.flat_index(*id)]).collect();
            DimensionCorrelation {
                seed,
                strategy: strategy_name(strategy).into(),
                dimension: d,
                name: space.dimension(d).name.clone(),
                spearman: stats::spearman(&acs, &planted),
            }
        })
        .collect();

    let mut informed_items = 0;
    if cfg.informed {
        let palette = gw.palette(&pid)?;
        let mut selection = PuzzleSelection::default();
        for col in &palette.columns {
            selection.place(col.entries[0].attribute)?;
        }
        let informed = gw.informed(&pid, &InformedRequest { selection, n: 1, adapters: vec![] }, &none)?;
        informed_items = informed.items.len();
    }

    Ok(RunResult { seed, strategy, rounds: metrics, correlations, informed_items, state_hash: gw.state_hash(&pid)? })
}
