//! In-memory project state rebuilt by folding events.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::sync::Mutex;

use codesign_core::attribution::AttributionConfig;
use codesign_core::catalog::{Catalog, DesignItem, SceneContext};
use codesign_core::consensus::{consensus, tally, ConsensusReport};
use codesign_core::design_space::{AttributeId, DesignVector};
use codesign_core::elicitation::{InteractionKind, InteractionRecord, Polarity, UserProfile};
use codesign_core::palette::{build_tree, NodeRef, PreferenceTree, PruneSet};
use codesign_core::preference::{
    build_feature, cold_start, select_next, select_random, HybridFeature, LabeledExample, Ppnn, PpnnState, RecommendationRound,
    Strategy, COLD_START_K, ROUND_K,
};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::GatewayError;
use crate::events::{Event, EventPayload};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectMeta {
    pub project_id: String,
    pub name: String,
    pub seed: u64,
    pub max_rounds: usize,
    /// How rounds after the cold start are chosen: Entropy or Random.
    #[serde(default = "crate::events::entropy_strategy", skip_serializing_if = "crate::events::is_entropy")]
    pub strategy: Strategy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSummary {
    pub seq: u64,
    pub attribute: AttributeId,
    pub log_offset: u64,
    pub prune_set_hash: String,
    pub manifest_sha256: String,
    pub entries: usize,
}

/// One user's elicitation session.
#[derive(Debug, Clone, PartialEq)]
pub struct Session {
    pub session_id: String,
    pub profile: UserProfile,
    pub model: PpnnState,
    pub rounds: Vec<RecommendationRound>,
    /// Overall vote per shown item.
    pub votes: BTreeMap<String, Polarity>,
    pub shown: BTreeSet<String>,
}

impl Session {
    pub fn user_id(&self) -> &str {
        &self.profile.user_id
    }

    pub fn current_round(&self) -> &RecommendationRound {
        self.rounds.last().expect("a session always has its cold-start round")
    }

    pub fn round_complete(&self) -> bool {
        self.current_round().item_ids.iter().all(|id| self.votes.contains_key(id))
    }

    /// True once the model has been trained on every issued round.
    pub fn trained_through_current(&self) -> bool {
        self.model.version as usize >= self.rounds.len()
    }

    pub fn finished(&self, max_rounds: usize) -> bool {
        self.rounds.len() >= max_rounds && self.trained_through_current()
    }

    pub fn labels(&self) -> usize {
        self.votes.len()
    }

    pub fn pending_items(&self) -> Vec<String> {
        self.current_round().item_ids.iter().filter(|id| !self.votes.contains_key(*id)).cloned().collect()
    }
}

/// Work the state machine owes after a mutation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Transition {
    Train { session_id: String, round_index: usize },
    Issue { session_id: String },
}

/// Memoizes deterministic retraining so repeated replays do not refit identical histories.
#[derive(Debug, Default)]
pub struct TrainCache {
    entries: Mutex<HashMap<[u8; 32], PpnnState>>,
}

const TRAIN_CACHE_LIMIT: usize = 512;

impl TrainCache {
    fn key(model: &PpnnState, batch: &[LabeledExample], round_index: usize) -> [u8; 32] {
        let mut h = Sha256::new();
        h.update(model.init_seed.to_le_bytes());
        h.update(serde_json::to_vec(&model.config).expect("config serializes"));
        h.update(model.history_hash());
        h.update(param_digest(model.net()));
        h.update((round_index as u64).to_le_bytes());
        for e in batch {
            h.update(e.item_id.as_bytes());
            h.update([0, e.label]);
            for x in e.feature.as_slice() {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().into()
    }

    fn train(&self, model: &mut PpnnState, round_index: usize, batch: Vec<LabeledExample>) -> codesign_core::Result<()> {
        let key = Self::key(model, &batch, round_index);
        if let Some(hit) = self.entries.lock().unwrap().get(&key) {
            *model = hit.clone();
            return Ok(());
        }
        model.train_increment(round_index, batch)?;
        let mut entries = self.entries.lock().unwrap();
        if entries.len() >= TRAIN_CACHE_LIMIT {
            entries.clear();
        }
        entries.insert(key, model.clone());
        Ok(())
    }
}

fn param_digest(net: &Ppnn) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in net.params() {
        h.update(p.to_le_bytes());
    }
    h.finalize().into()
}

/// Derives a 64-bit seed from the project seed, a purpose tag and a key.
pub fn derive_seed(project_seed: u64, purpose: &str, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(project_seed.to_le_bytes());
    h.update(purpose.as_bytes());
    h.update([0]);
    h.update(key.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().unwrap())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProjectState {
    pub meta: Option<ProjectMeta>,
    pub context: Option<SceneContext>,
    pub framing_fallback: bool,
    pub catalog: Catalog,
    /// Informed-generation results not yet saved to the library.
    pub pending: BTreeMap<String, DesignItem>,
    pub sessions: BTreeMap<String, Session>,
    pub records: Vec<InteractionRecord>,
    pub prunes: BTreeMap<AttributeId, PruneSet>,
    pub manifests: Vec<ManifestSummary>,
    pub saved: Vec<String>,
    pub log_offset: u64,
}

fn corrupt(seq: u64, e: impl std::fmt::Display) -> GatewayError {
    GatewayError::CorruptLog { seq, reason: e.to_string() }
}

impl ProjectState {
    /// Folds a whole log from empty state.
    pub fn replay<'a>(
        events: impl IntoIterator<Item = &'a Event>,
        cache: Option<&TrainCache>,
    ) -> Result<Self, GatewayError> {
        let mut state = Self::default();
        for e in events {
            state.apply(e, cache)?;
        }
        Ok(state)
    }

    pub fn meta(&self) -> Result<&ProjectMeta, GatewayError> {
        self.meta.as_ref().ok_or_else(|| GatewayError::UnknownProject(String::new()))
    }

    pub fn max_rounds(&self) -> usize {
        self.meta.as_ref().map_or(0, |m| m.max_rounds)
    }

    pub fn session(&self, session_id: &str) -> Result<&Session, GatewayError> {
        self.sessions.get(session_id).ok_or_else(|| GatewayError::UnknownSession(session_id.to_string()))
    }

    pub fn session_of_user(&self, user_id: &str) -> Option<&Session> {
        self.sessions.values().find(|s| s.user_id() == user_id)
    }

    /// Users with a session, sorted by id.
    pub fn users(&self) -> Vec<String> {
        let set: BTreeSet<String> = self.sessions.values().map(|s| s.user_id().to_string()).collect();
        set.into_iter().collect()
    }

    pub fn item(&self, item_id: &str) -> Option<&DesignItem> {
        self.catalog.get(item_id).or_else(|| self.pending.get(item_id))
    }

    pub fn next_record_id(&self) -> String {
        format!("rec-{:06}", self.records.len() + 1)
    }

    pub fn next_session_id(&self) -> Result<String, GatewayError> {
        Ok(format!("{}-u{:03}", self.meta()?.project_id, self.sessions.len() + 1))
    }

    pub fn prune_set(&self, attribute: AttributeId) -> PruneSet {
        self.prunes.get(&attribute).cloned().unwrap_or_default()
    }

    pub fn tree(&self, attribute: AttributeId) -> PreferenceTree {
        build_tree(attribute, self.catalog.view(), &self.records, &self.prune_set(attribute))
    }

    pub fn consensus(&self) -> ConsensusReport {
        let t = tally(&self.records, |id| self.item(id).map(|i| i.design_vector));
        consensus(&t, &self.users(), self.log_offset)
    }

    pub fn attribution_config(&self) -> Result<AttributionConfig, GatewayError> {
        Ok(AttributionConfig::catalog_mean(self.catalog.view())?)
    }

    /// The cold-start round a new session would receive.
    pub fn cold_start_round(&self) -> Result<RecommendationRound, GatewayError> {
        let view = self.catalog.view();
        if view.is_empty() {
            return Err(codesign_core::Error::NoCandidates.into());
        }
        let codes: Vec<(&str, codesign_core::OneHot51)> =
            view.iter().map(|i| (i.item_id.as_str(), codesign_core::encode_one_hot(&i.design_vector))).collect();
        let ranking: Vec<String> = view.iter().map(|i| i.item_id.clone()).collect();
        Ok(cold_start(&codes, &ranking, COLD_START_K))
    }

    fn candidates(&self, session: &Session) -> Result<Vec<(String, HybridFeature)>, GatewayError> {
        self.catalog
            .view()
            .into_iter()
            .filter(|i| !session.shown.contains(&i.item_id))
            .map(|i| Ok((i.item_id.clone(), build_feature(i)?)))
            .collect()
    }

    /// The round that would follow the session's current one.
    pub fn next_round(&self, session: &Session) -> Result<RecommendationRound, GatewayError> {
        let cands = self.candidates(session)?;
        let index = session.rounds.len();
        let meta = self.meta()?;
        if meta.strategy == Strategy::Random {
            let ids: Vec<&str> = cands.iter().map(|(id, _)| id.as_str()).collect();
            let seed = derive_seed(meta.seed, "random-round", &format!("{}/{index}", session.session_id));
            return Ok(select_random(&ids, index, ROUND_K, seed)?);
        }
        let refs: Vec<(&str, &HybridFeature)> = cands.iter().map(|(id, f)| (id.as_str(), f)).collect();
        Ok(select_next(&session.model, &refs, index, ROUND_K)?)
    }

    fn training_batch(&self, session: &Session, round_index: usize) -> Result<Vec<LabeledExample>, GatewayError> {
        let round = session
            .rounds
            .get(round_index)
            .ok_or_else(|| GatewayError::Invalid(format!("round {round_index} was never issued")))?;
        round
            .item_ids
            .iter()
            .map(|id| {
                let polarity = session
                    .votes
                    .get(id)
                    .ok_or_else(|| GatewayError::Invalid(format!("item `{id}` has no vote yet")))?;
                let item = self.item(id).ok_or_else(|| codesign_core::Error::UnknownItem(id.clone()))?;
                Ok(LabeledExample {
                    item_id: id.clone(),
                    feature: build_feature(item)?,
                    label: u8::from(*polarity == Polarity::Like),
                })
            })
            .collect()
    }

    /// Trains a copy of the session's model on `round_index` and returns it.
    pub fn trained_model(
        &self,
        session_id: &str,
        round_index: usize,
        cache: Option<&TrainCache>,
    ) -> Result<PpnnState, GatewayError> {
        let session = self.session(session_id)?;
        if round_index != session.model.version as usize {
            return Err(GatewayError::Invalid(format!(
                "round {round_index} trained out of order (model at version {})",
                session.model.version
            )));
        }
        let batch = self.training_batch(session, round_index)?;
        let mut model = session.model.clone();
        match cache {
            Some(c) => c.train(&mut model, round_index, batch)?,
            None => model.train_increment(round_index, batch)?,
        }
        Ok(model)
    }

    /// The next automatic step, if any: train a completed round or issue a new one.
    pub fn next_transition(&self) -> Result<Option<Transition>, GatewayError> {
        let max_rounds = self.max_rounds();
        for s in self.sessions.values() {
            if !s.trained_through_current() {
                if s.round_complete() {
                    return Ok(Some(Transition::Train {
                        session_id: s.session_id.clone(),
                        round_index: s.rounds.len() - 1,
                    }));
                }
                continue;
            }
            if s.rounds.len() < max_rounds && !self.candidates(s)?.is_empty() {
                return Ok(Some(Transition::Issue { session_id: s.session_id.clone() }));
            }
        }
        Ok(None)
    }

    /// Applies one event. Events that do not fit the current state are reported
    /// as corruption at their sequence number.
    pub fn apply(&mut self, event: &Event, cache: Option<&TrainCache>) -> Result<(), GatewayError> {
        let seq = event.seq;
        if seq != self.log_offset + 1 {
            return Err(corrupt(seq, format!("expected seq {}", self.log_offset + 1)));
        }
        match (&self.meta, &event.payload) {
            (None, EventPayload::ProjectCreated { .. }) => {}
            (None, p) => return Err(corrupt(seq, format!("{} before ProjectCreated", p.kind()))),
            (Some(_), EventPayload::ProjectCreated { .. }) => return Err(corrupt(seq, "duplicate ProjectCreated")),
            _ => {}
        }
        self.apply_payload(&event.payload, seq, cache).map_err(|e| match e {
            GatewayError::CorruptLog { .. } => e,
            other => corrupt(seq, other),
        })?;
        self.log_offset = seq;
        Ok(())
    }

    fn apply_payload(&mut self, payload: &EventPayload, seq: u64, cache: Option<&TrainCache>) -> Result<(), GatewayError> {
        match payload {
            EventPayload::ProjectCreated { project_id, name, seed, max_rounds, strategy } => {
                if *max_rounds == 0 {
                    return Err(GatewayError::Invalid("max_rounds must be at least 1".into()));
                }
                if *strategy == Strategy::ColdStart {
                    return Err(GatewayError::Invalid("cold_start is not a round strategy".into()));
                }
                self.meta = Some(ProjectMeta {
                    project_id: project_id.clone(),
                    name: name.clone(),
                    seed: *seed,
                    max_rounds: *max_rounds,
                    strategy: *strategy,
                });
            }
            EventPayload::FilterApplied { context, fallback } => {
                context.filter.validate()?;
                self.context = Some(context.clone());
                self.framing_fallback = *fallback;
            }
            EventPayload::ItemsIngested { items, library: true } => {
                if let Some(i) = items.iter().find(|i| self.pending.contains_key(&i.item_id)) {
                    return Err(GatewayError::Invalid(format!("item `{}` already pending", i.item_id)));
                }
                self.catalog.insert(items.clone())?;
            }
            EventPayload::ItemsIngested { items, library: false } => {
                for item in items {
                    if self.item(&item.item_id).is_some() {
                        return Err(GatewayError::Invalid(format!("duplicate item `{}`", item.item_id)));
                    }
                    self.pending.insert(item.item_id.clone(), item.clone());
                }
                let ids: Vec<String> = items.iter().map(|i| i.item_id.clone()).collect();
                self.catalog.reserve_ids(&ids);
            }
            EventPayload::Curated { ops } => {
                let mut next = self.catalog.clone();
                for op in ops {
                    next.curate(op)?;
                }
                self.catalog = next;
            }
            EventPayload::SessionOpened { session_id, profile, round } => {
                if self.sessions.contains_key(session_id) {
                    return Err(GatewayError::Invalid(format!("session `{session_id}` opened twice")));
                }
                if self.session_of_user(&profile.user_id).is_some() {
                    return Err(GatewayError::Invalid(format!("user `{}` already has a session", profile.user_id)));
                }
                profile.validate()?;
                let seed = self.meta()?.seed;
                let expected = self.cold_start_round()?;
                if &expected != round {
                    return Err(GatewayError::Invalid("cold-start round does not match the library".into()));
                }
                self.sessions.insert(
                    session_id.clone(),
                    Session {
                        session_id: session_id.clone(),
                        profile: profile.clone(),
                        model: PpnnState::new(derive_seed(seed, "ppnn", &profile.user_id)),
                        rounds: vec![round.clone()],
                        votes: BTreeMap::new(),
                        shown: round.item_ids.iter().cloned().collect(),
                    },
                );
            }
            EventPayload::InteractionSubmitted { session_id, record } => {
                record.validate()?;
                let expected_id = self.next_record_id();
                if record.record_id != expected_id {
                    return Err(GatewayError::Invalid(format!("record id `{}`, expected `{expected_id}`", record.record_id)));
                }
                let session = self.session(session_id)?;
                if record.user_id != session.user_id() {
                    return Err(GatewayError::Invalid("record user does not own the session".into()));
                }
                if !session.shown.contains(&record.item_id) {
                    return Err(GatewayError::Invalid(format!("item `{}` was not shown in this session", record.item_id)));
                }
                if let Some(region) = &record.region {
                    let item = self.item(&record.item_id).ok_or_else(|| codesign_core::Error::UnknownItem(record.item_id.clone()))?;
                    if (region.image_w, region.image_h) != (item.image_width, item.image_height) {
                        return Err(GatewayError::Invalid("region drawn on a differently sized image".into()));
                    }
                }
                if record.kind == InteractionKind::OverallVote {
                    if !session.current_round().item_ids.contains(&record.item_id) {
                        return Err(GatewayError::Invalid(format!("item `{}` is not in the current round", record.item_id)));
                    }
                    if session.votes.contains_key(&record.item_id) {
                        return Err(GatewayError::Invalid(format!("item `{}` already has a vote", record.item_id)));
                    }
                    let session = self.sessions.get_mut(session_id).unwrap();
                    session.votes.insert(record.item_id.clone(), record.polarity);
                }
                self.records.push(record.clone());
            }
            EventPayload::ModelTrained { session_id, round_index, version, history_hash } => {
                let model = self.trained_model(session_id, *round_index, cache)?;
                if model.version != *version || &model.history_hash() != history_hash {
                    return Err(corrupt(seq, "retrained model does not match the recorded version or history"));
                }
                self.sessions.get_mut(session_id).unwrap().model = model;
            }
            EventPayload::RoundIssued { session_id, round } => {
                let session = self.session(session_id)?;
                if !session.trained_through_current() {
                    return Err(GatewayError::Invalid("round issued before the previous one was trained".into()));
                }
                if session.rounds.len() >= self.max_rounds() {
                    return Err(GatewayError::Invalid("round issued past max_rounds".into()));
                }
                let expected = self.next_round(session)?;
                if &expected != round {
                    return Err(GatewayError::Invalid("issued round differs from the project's selection strategy".into()));
                }
                let session = self.sessions.get_mut(session_id).unwrap();
                session.shown.extend(round.item_ids.iter().cloned());
                session.rounds.push(round.clone());
            }
            EventPayload::TreePruned { attribute, node, pruned } => {
                let tree = self.tree(*attribute);
                let set = self.prunes.entry(*attribute).or_default();
                if *pruned {
                    set.prune(&tree, node.clone())?;
                } else {
                    set.unprune(node)?;
                }
                if set.is_empty() {
                    self.prunes.remove(attribute);
                }
            }
            EventPayload::ManifestExported { attribute, log_offset, prune_set_hash, manifest_sha256, entries } => {
                self.manifests.push(ManifestSummary {
                    seq,
                    attribute: *attribute,
                    log_offset: *log_offset,
                    prune_set_hash: prune_set_hash.clone(),
                    manifest_sha256: manifest_sha256.clone(),
                    entries: *entries,
                });
            }
            EventPayload::ItemSaved { item_id } => {
                let item = self
                    .pending
                    .remove(item_id)
                    .ok_or_else(|| GatewayError::Invalid(format!("item `{item_id}` is not an unsaved informed design")))?;
                self.catalog.insert(vec![item])?;
                self.saved.push(item_id.clone());
            }
        }
        Ok(())
    }

    /// SHA-256 over a canonical JSON rendering. Timestamps never enter state,
    /// and networks contribute a digest of their exact parameters.
    pub fn state_hash(&self) -> String {
        #[derive(Serialize)]
        struct SessionView<'a> {
            session_id: &'a str,
            profile: &'a UserProfile,
            rounds: &'a [RecommendationRound],
            votes: &'a BTreeMap<String, Polarity>,
            model_version: u64,
            init_seed: u64,
            history_hash: String,
            params_sha256: String,
        }
        #[derive(Serialize)]
        struct View<'a> {
            meta: &'a Option<ProjectMeta>,
            context: &'a Option<SceneContext>,
            framing_fallback: bool,
            catalog: &'a Catalog,
            pending: &'a BTreeMap<String, DesignItem>,
            sessions: Vec<SessionView<'a>>,
            records: &'a [InteractionRecord],
            prunes: Vec<(String, Vec<String>)>,
            manifests: &'a [ManifestSummary],
            saved: &'a [String],
            log_offset: u64,
        }
        let view = View {
            meta: &self.meta,
            context: &self.context,
            framing_fallback: self.framing_fallback,
            catalog: &self.catalog,
            pending: &self.pending,
            sessions: self
                .sessions
                .values()
                .map(|s| SessionView {
                    session_id: &s.session_id,
                    profile: &s.profile,
                    rounds: &s.rounds,
                    votes: &s.votes,
                    model_version: s.model.version,
                    init_seed: s.model.init_seed,
                    history_hash: s.model.history_hash(),
                    params_sha256: hex::encode(param_digest(s.model.net())),
                })
                .collect(),
            records: &self.records,
            prunes: self
                .prunes
                .iter()
                .map(|(a, p)| (a.to_string(), p.nodes().map(NodeRef::to_string).collect()))
                .collect(),
            manifests: &self.manifests,
            saved: &self.saved,
            log_offset: self.log_offset,
        };
        hex::encode(Sha256::digest(serde_json::to_vec(&view).expect("state serializes")))
    }

    pub fn design_vector(&self, item_id: &str) -> Option<DesignVector> {
        self.item(item_id).map(|i| i.design_vector)
    }
}
