//! Project and session operations over the event log.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use codesign_core::attribution::{report, ShapleyReport};
use codesign_core::backend::{
    BlobId, BlobStore, DirBlobStore, EmbeddingBackend, GenerationBackend, MemoryBlobStore, MockEmbedder,
    MockGenerator, MockTryOn, Offline, TryOnBackend,
};
use codesign_core::catalog::{sample_design_vectors, CurateOp, DesignItem, IngestBackends, Origin, SceneContext, MAX_GENERATION_BATCH};
use codesign_core::consensus::ConsensusReport;
use codesign_core::design_space::AttributeId;
use codesign_core::elicitation::{
    hypothesize_dimensions, request_tryon, BrushRegion, DimensionScore, HeuristicRegionBackend, InteractionKind,
    InteractionRecord, Polarity, RegionBackend, TryOnResult, UserProfile,
};
use codesign_core::framing::{filter_attributes, FilterResult, FramingBackend, RuleBasedFramer};
use codesign_core::palette::{
    export_manifest, informed_generate, palette_columns, FineTuneManifest, InformedItem, NodeRef, PaletteColumn,
    PreferenceTree, PuzzleSelection,
};
use codesign_core::preference::{build_feature, RecommendationRound, Strategy};
use codesign_core::prompt::{render_prompt, PromptStage};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::GatewayError;
use crate::events::{EventLog, EventPayload};
use crate::state::{derive_seed, ManifestSummary, ProjectState, Session, TrainCache, Transition};

pub type GwResult<T> = Result<T, GatewayError>;

pub const DEFAULT_MAX_ROUNDS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendMode {
    Mock,
    External,
}

impl std::str::FromStr for BackendMode {
    type Err = GatewayError;

    fn from_str(s: &str) -> GwResult<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mock" => Ok(BackendMode::Mock),
            "external" => Ok(BackendMode::External),
            other => Err(GatewayError::Invalid(format!("unknown backend mode `{other}`"))),
        }
    }
}

/// Every model-facing dependency of the gateway.
#[derive(Clone)]
pub struct BackendSuite {
    pub mode: BackendMode,
    pub generation: Arc<dyn GenerationBackend>,
    pub embedding: Arc<dyn EmbeddingBackend>,
    pub tryon: Arc<dyn TryOnBackend>,
    pub region: Arc<dyn RegionBackend>,
    pub framing: Arc<dyn FramingBackend>,
    pub blobs: Arc<dyn BlobStore>,
}

impl BackendSuite {
    pub fn mock(blobs: Arc<dyn BlobStore>) -> Self {
        Self {
            mode: BackendMode::Mock,
            generation: Arc::new(MockGenerator::default()),
            embedding: Arc::new(MockEmbedder),
            tryon: Arc::new(MockTryOn::default()),
            region: Arc::new(HeuristicRegionBackend),
            framing: Arc::new(RuleBasedFramer::default_rules()),
            blobs,
        }
    }

    /// No external clients ship; generation, embedding and try-on report
    /// themselves unavailable while framing and region scoring use the local rules.
    pub fn external(blobs: Arc<dyn BlobStore>) -> Self {
        Self {
            mode: BackendMode::External,
            generation: Arc::new(Offline),
            embedding: Arc::new(Offline),
            tryon: Arc::new(Offline),
            region: Arc::new(HeuristicRegionBackend),
            framing: Arc::new(RuleBasedFramer::default_rules()),
            blobs,
        }
    }

    fn ingest(&self) -> IngestBackends<'_> {
        IngestBackends { generation: &*self.generation, embedding: &*self.embedding, blobs: &*self.blobs }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GatewayConfig {
    /// Root for event logs, blobs and derived files. `None` keeps everything in memory.
    pub data_dir: Option<PathBuf>,
    pub listen: String,
    pub backend: BackendMode,
    pub seed: u64,
    pub max_rounds: usize,
}

impl Default for GatewayConfig {
    fn default() -> Self {
        Self {
            data_dir: None,
            listen: "127.0.0.1:8080".into(),
            backend: BackendMode::Mock,
            seed: 0,
            max_rounds: DEFAULT_MAX_ROUNDS,
        }
    }
}

impl GatewayConfig {
    /// Reads `CODESIGN_DATA_DIR`, `CODESIGN_LISTEN`, `CODESIGN_BACKEND`,
    /// `CODESIGN_SEED` and `CODESIGN_MAX_ROUNDS` over the defaults.
    pub fn from_env() -> GwResult<Self> {
        let mut cfg = Self::default();
        if let Ok(dir) = std::env::var("CODESIGN_DATA_DIR") {
            cfg.data_dir = Some(dir.into());
        }
        if let Ok(listen) = std::env::var("CODESIGN_LISTEN") {
            cfg.listen = listen;
        }
        if let Ok(mode) = std::env::var("CODESIGN_BACKEND") {
            cfg.backend = mode.parse()?;
        }
        if let Ok(seed) = std::env::var("CODESIGN_SEED") {
            cfg.seed = seed.parse().map_err(|_| GatewayError::Invalid(format!("CODESIGN_SEED `{seed}`")))?;
        }
        if let Ok(n) = std::env::var("CODESIGN_MAX_ROUNDS") {
            cfg.max_rounds = n.parse().map_err(|_| GatewayError::Invalid(format!("CODESIGN_MAX_ROUNDS `{n}`")))?;
        }
        Ok(cfg)
    }
}

/// Optional write preconditions carried by request headers.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct WriteOptions {
    /// Log offset the client last read; a mismatch is a stale write.
    pub if_match: Option<u64>,
    pub dedup_key: Option<String>,
}

impl WriteOptions {
    pub fn if_match(offset: u64) -> Self {
        Self { if_match: Some(offset), dedup_key: None }
    }

    pub fn dedup(key: impl Into<String>) -> Self {
        Self { if_match: None, dedup_key: Some(key.into()) }
    }
}

struct Writer {
    log: EventLog,
    state: ProjectState,
}

struct Project {
    writer: Mutex<Writer>,
    snapshot: RwLock<Arc<ProjectState>>,
    dir: Option<PathBuf>,
}

/// A write in progress: every emitted event is validated against a copy of
/// the state and made durable before the next one is built.
struct Tx<'a> {
    writer: &'a mut Writer,
    cache: &'a TrainCache,
    dedup_key: Option<String>,
}

impl Tx<'_> {
    fn state(&self) -> &ProjectState {
        &self.writer.state
    }

    fn emit(&mut self, payload: EventPayload) -> GwResult<u64> {
        // Only the first event of a request carries the caller's dedup key.
        let event = self.writer.log.next_event(payload, self.dedup_key.take());
        let mut next = self.writer.state.clone();
        next.apply(&event, Some(self.cache)).map_err(|e| match e {
            GatewayError::CorruptLog { reason, .. } => GatewayError::Invalid(reason),
            other => other,
        })?;
        let seq = self.writer.log.commit(event)?;
        self.writer.state = next;
        Ok(seq)
    }

    /// Trains completed rounds and issues follow-up rounds until nothing is owed.
    fn settle(&mut self) -> GwResult<()> {
        while let Some(t) = self.state().next_transition()? {
            match t {
                Transition::Train { session_id, round_index } => {
                    let model = self.state().trained_model(&session_id, round_index, Some(self.cache))?;
                    self.emit(EventPayload::ModelTrained {
                        session_id,
                        round_index,
                        version: model.version,
                        history_hash: model.history_hash(),
                    })?;
                }
                Transition::Issue { session_id } => {
                    let round = self.state().next_round(self.state().session(&session_id)?)?;
                    self.emit(EventPayload::RoundIssued { session_id, round })?;
                }
            }
        }
        Ok(())
    }
}

// ---- response shapes ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionBrief {
    pub session_id: String,
    pub user_id: String,
    pub rounds_issued: usize,
    pub labels: usize,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectSummary {
    pub project_id: String,
    pub name: String,
    pub seed: u64,
    pub max_rounds: usize,
    pub strategy: Strategy,
    pub log_offset: u64,
    pub state_hash: String,
    pub library_size: usize,
    pub pending_items: Vec<String>,
    pub context: Option<SceneContext>,
    pub sessions: Vec<SessionBrief>,
    pub manifests: Vec<ManifestSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramingResponse {
    pub filter: FilterResult,
    pub fallback: bool,
    pub scene_description: String,
    pub scene_image_ref: Option<BlobId>,
    pub log_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LibraryView {
    pub items: Vec<DesignItem>,
    pub pending: Vec<DesignItem>,
    pub log_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundView {
    pub session_id: String,
    pub project_id: String,
    pub profile: UserProfile,
    pub round: RecommendationRound,
    pub items: Vec<DesignItem>,
    /// Items of the current round still waiting for a vote.
    pub pending_items: Vec<String>,
    pub rounds_issued: usize,
    pub labels: usize,
    pub finished: bool,
    pub log_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionResponse {
    pub record: InteractionRecord,
    pub session: RoundView,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HypothesisResponse {
    pub item_id: String,
    pub hypothesis: Vec<DimensionScore>,
    pub log_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeResponse {
    pub tree: PreferenceTree,
    pub pruned: Vec<NodeRef>,
    pub prune_set_hash: String,
    pub log_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestResponse {
    pub manifest: FineTuneManifest,
    pub manifest_sha256: String,
    pub masks: Vec<String>,
    /// Directory the bundle was written to, when the gateway persists files.
    pub written_to: Option<PathBuf>,
    pub log_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaletteResponse {
    pub columns: Vec<PaletteColumn>,
    pub log_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InformedResponse {
    pub items: Vec<InformedItem>,
    pub log_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedResponse {
    pub item: DesignItem,
    pub log_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionResponse {
    pub report: ShapleyReport,
    pub log_offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TryOnResponse {
    #[serde(flatten)]
    pub result: TryOnResult,
    pub log_offset: u64,
}

// ---- requests ----

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CreateProject {
    #[serde(default)]
    pub name: String,
    #[serde(default)]
    pub seed: Option<u64>,
    #[serde(default)]
    pub max_rounds: Option<usize>,
    /// Round selection after the cold start; defaults to Entropy.
    #[serde(default)]
    pub strategy: Option<Strategy>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FramingRequest {
    pub garment_type: String,
    pub scene: String,
    pub principle: String,
    pub strictness: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteRequest {
    pub item_id: String,
    pub polarity: Polarity,
    #[serde(default)]
    pub comment: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRequest {
    pub item_id: String,
    #[serde(default = "brush")]
    pub kind: InteractionKind,
    pub polarity: Polarity,
    #[serde(default)]
    pub region: Option<BrushRegion>,
    #[serde(default)]
    pub confirmed_dimensions: BTreeSet<usize>,
    #[serde(default)]
    pub comment: Option<String>,
}

fn brush() -> InteractionKind {
    InteractionKind::Brush
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InformedRequest {
    pub selection: PuzzleSelection,
    pub n: usize,
    #[serde(default)]
    pub adapters: Vec<String>,
}

/// The co-design service: one event log per project, one writer at a time.
pub struct Gateway {
    config: GatewayConfig,
    backends: BackendSuite,
    projects: RwLock<BTreeMap<String, Arc<Project>>>,
    cache: Arc<TrainCache>,
}

impl Gateway {
    /// Opens the data directory (if any) and replays every project found there.
    pub fn open(config: GatewayConfig) -> GwResult<Self> {
        let blobs: Arc<dyn BlobStore> = match &config.data_dir {
            Some(dir) => Arc::new(DirBlobStore::open(dir.join("blobs"))?),
            None => Arc::new(MemoryBlobStore::new()),
        };
        let backends = match config.backend {
            BackendMode::Mock => BackendSuite::mock(blobs),
            BackendMode::External => BackendSuite::external(blobs),
        };
        Self::with_backends(config, backends)
    }

    pub fn in_memory(seed: u64) -> Self {
        Self::open(GatewayConfig { seed, ..GatewayConfig::default() }).expect("in-memory gateway opens")
    }

    pub fn with_backends(config: GatewayConfig, backends: BackendSuite) -> GwResult<Self> {
        let gw = Self { config, backends, projects: RwLock::new(BTreeMap::new()), cache: Arc::default() };
        if let Some(root) = gw.config.data_dir.clone() {
            let projects = root.join("projects");
            std::fs::create_dir_all(&projects)?;
            let mut dirs: Vec<PathBuf> = std::fs::read_dir(&projects)?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.join("events.jsonl").is_file())
                .collect();
            dirs.sort();
            for dir in dirs {
                let log = EventLog::open(dir.join("events.jsonl"))?;
                let state = ProjectState::replay(log.events(), Some(&gw.cache))?;
                let Some(meta) = state.meta.clone() else { continue };
                tracing::info!(project = %meta.project_id, events = log.len(), "replayed project");
                let project = Arc::new(Project {
                    snapshot: RwLock::new(Arc::new(state.clone())),
                    writer: Mutex::new(Writer { log, state }),
                    dir: Some(dir),
                });
                gw.projects.write().unwrap().insert(meta.project_id, project.clone());
                // Finish any transition a crash interrupted.
                gw.write_project(&project, &WriteOptions::default(), |_| Ok(()))?;
            }
        }
        Ok(gw)
    }

    pub fn config(&self) -> &GatewayConfig {
        &self.config
    }

    pub fn backends(&self) -> &BackendSuite {
        &self.backends
    }

    pub fn project_ids(&self) -> Vec<String> {
        self.projects.read().unwrap().keys().cloned().collect()
    }

    fn project(&self, project_id: &str) -> GwResult<Arc<Project>> {
        self.projects
            .read()
            .unwrap()
            .get(project_id)
            .cloned()
            .ok_or_else(|| GatewayError::UnknownProject(project_id.to_string()))
    }

    /// Immutable state as of the latest acknowledged write.
    pub fn snapshot(&self, project_id: &str) -> GwResult<Arc<ProjectState>> {
        Ok(self.project(project_id)?.snapshot.read().unwrap().clone())
    }

    /// Every event of a project, in order.
    pub fn events(&self, project_id: &str) -> GwResult<Vec<crate::events::Event>> {
        Ok(self.project(project_id)?.writer.lock().unwrap().log.events().to_vec())
    }

    fn session_project(session_id: &str) -> GwResult<&str> {
        session_id
            .rsplit_once("-u")
            .map(|(p, _)| p)
            .filter(|p| !p.is_empty())
            .ok_or_else(|| GatewayError::UnknownSession(session_id.to_string()))
    }

    fn session_snapshot(&self, session_id: &str) -> GwResult<Arc<ProjectState>> {
        let pid = Self::session_project(session_id)?;
        let snap = self.snapshot(pid).map_err(|e| match e {
            GatewayError::UnknownProject(_) => GatewayError::UnknownSession(session_id.to_string()),
            other => other,
        })?;
        snap.session(session_id)?;
        Ok(snap)
    }

    fn write<T>(&self, project_id: &str, opts: &WriteOptions, f: impl FnOnce(&mut Tx) -> GwResult<T>) -> GwResult<T> {
        let project = self.project(project_id)?;
        self.write_project(&project, opts, f)
    }

    fn write_project<T>(
        &self,
        project: &Project,
        opts: &WriteOptions,
        f: impl FnOnce(&mut Tx) -> GwResult<T>,
    ) -> GwResult<T> {
        let mut writer = project.writer.lock().unwrap();
        if let Some(expected) = opts.if_match {
            let actual = writer.log.len();
            if expected != actual {
                return Err(GatewayError::Stale { expected, actual });
            }
        }
        let before = writer.log.len();
        let previous = project.snapshot.read().unwrap().clone();
        let result = {
            let mut tx = Tx { writer: &mut writer, cache: &self.cache, dedup_key: opts.dedup_key.clone() };
            f(&mut tx).and_then(|v| tx.settle().map(|_| v))
        };
        if writer.log.len() != before {
            let state = Arc::new(writer.state.clone());
            if let Some(dir) = &project.dir {
                if let Err(e) = write_derived(dir, &previous, &state) {
                    tracing::warn!(error = %e, "failed to write derived files");
                }
            }
            *project.snapshot.write().unwrap() = state;
        }
        result
    }

    // ---- projects ----

    pub fn create_project(&self, req: CreateProject) -> GwResult<ProjectSummary> {
        let max_rounds = req.max_rounds.unwrap_or(self.config.max_rounds);
        if max_rounds == 0 {
            return Err(GatewayError::Invalid("max_rounds must be at least 1".into()));
        }
        let mut projects = self.projects.write().unwrap();
        let project_id = format!("prj-{:04}", projects.len() + 1);
        let dir = self.config.data_dir.as_ref().map(|d| d.join("projects").join(&project_id));
        let log = match &dir {
            Some(d) => EventLog::open(d.join("events.jsonl"))?,
            None => EventLog::in_memory(),
        };
        let project = Arc::new(Project {
            writer: Mutex::new(Writer { log, state: ProjectState::default() }),
            snapshot: RwLock::new(Arc::default()),
            dir,
        });
        let payload = EventPayload::ProjectCreated {
            project_id: project_id.clone(),
            name: if req.name.is_empty() { project_id.clone() } else { req.name },
            seed: req.seed.unwrap_or(self.config.seed),
            max_rounds,
            strategy: req.strategy.unwrap_or(Strategy::Entropy),
        };
        self.write_project(&project, &WriteOptions::default(), |tx| tx.emit(payload))?;
        projects.insert(project_id.clone(), project);
        drop(projects);
        self.project_summary(&project_id)
    }

    pub fn project_summary(&self, project_id: &str) -> GwResult<ProjectSummary> {
        let s = self.snapshot(project_id)?;
        let meta = s.meta()?;
        Ok(ProjectSummary {
            project_id: meta.project_id.clone(),
            name: meta.name.clone(),
            seed: meta.seed,
            max_rounds: meta.max_rounds,
            strategy: meta.strategy,
            log_offset: s.log_offset,
            state_hash: s.state_hash(),
            library_size: s.catalog.visible_len(),
            pending_items: s.pending.keys().cloned().collect(),
            context: s.context.clone(),
            sessions: s
                .sessions
                .values()
                .map(|x| SessionBrief {
                    session_id: x.session_id.clone(),
                    user_id: x.user_id().to_string(),
                    rounds_issued: x.rounds.len(),
                    labels: x.labels(),
                    finished: x.finished(meta.max_rounds),
                })
                .collect(),
            manifests: s.manifests.clone(),
        })
    }

    pub fn state_hash(&self, project_id: &str) -> GwResult<String> {
        Ok(self.snapshot(project_id)?.state_hash())
    }

    // ---- framing and library ----

    pub fn apply_framing(&self, project_id: &str, req: &FramingRequest, opts: &WriteOptions) -> GwResult<FramingResponse> {
        self.write(project_id, opts, |tx| {
            let outcome = filter_attributes(&req.garment_type, &req.scene, &req.principle, req.strictness, &*self.backends.framing)?;
            let scene_description = match self.backends.framing.describe_scene(&req.scene) {
                Ok(d) if !d.trim().is_empty() => d,
                _ => RuleBasedFramer::default_rules().describe_scene(&req.scene)?,
            };
            let image = self.backends.generation.generate_scene(&scene_description)?;
            let scene_image_ref = Some(self.backends.blobs.put(&image.png)?);
            let context = SceneContext {
                scene_text: req.scene.clone(),
                scene_description: scene_description.clone(),
                scene_image_ref: scene_image_ref.clone(),
                garment_type: req.garment_type.clone(),
                principle: req.principle.clone(),
                filter: outcome.result.clone(),
            };
            let seq = tx.emit(EventPayload::FilterApplied { context, fallback: outcome.fallback })?;
            Ok(FramingResponse {
                filter: outcome.result,
                fallback: outcome.fallback,
                scene_description,
                scene_image_ref,
                log_offset: seq,
            })
        })
    }

    /// Flips one attribute in or out of the current filter.
    pub fn toggle_attribute(&self, project_id: &str, attribute: AttributeId, opts: &WriteOptions) -> GwResult<FramingResponse> {
        self.write(project_id, opts, |tx| {
            let mut context = tx
                .state()
                .context
                .clone()
                .ok_or_else(|| GatewayError::Invalid("no framing has been applied yet".into()))?;
            context.filter.toggle(attribute)?;
            let fallback = tx.state().framing_fallback;
            let seq = tx.emit(EventPayload::FilterApplied { context: context.clone(), fallback })?;
            Ok(FramingResponse {
                filter: context.filter,
                fallback,
                scene_description: context.scene_description,
                scene_image_ref: context.scene_image_ref,
                log_offset: seq,
            })
        })
    }

    pub fn generate_library(&self, project_id: &str, n: usize, opts: &WriteOptions) -> GwResult<LibraryView> {
        if n == 0 || n > MAX_GENERATION_BATCH {
            return Err(GatewayError::Invalid(format!("n must be in 1..={MAX_GENERATION_BATCH}, got {n}")));
        }
        self.write(project_id, opts, |tx| {
            let state = tx.state();
            let filter = state.context.as_ref().map(|c| c.filter.clone()).unwrap_or_else(FilterResult::unfiltered);
            let seed = derive_seed(state.meta()?.seed, "library", &state.log_offset.to_string());
            let vectors = sample_design_vectors(&filter, n, seed);
            let framing = |v: &_| render_prompt(v, PromptStage::Framing, &Default::default());
            let items = state.catalog.generate_items(&vectors, Origin::Framing, &self.backends.ingest(), &framing, &[])?;
            tx.emit(EventPayload::ItemsIngested { items, library: true })?;
            Ok(())
        })?;
        self.library(project_id)
    }

    pub fn curate(&self, project_id: &str, ops: Vec<CurateOp>, opts: &WriteOptions) -> GwResult<LibraryView> {
        if ops.is_empty() {
            return Err(GatewayError::Invalid("no curate operations".into()));
        }
        self.write(project_id, opts, |tx| {
            let mut check = tx.state().catalog.clone();
            for op in &ops {
                check.curate(op)?;
            }
            tx.emit(EventPayload::Curated { ops })
        })?;
        self.library(project_id)
    }

    pub fn library(&self, project_id: &str) -> GwResult<LibraryView> {
        let s = self.snapshot(project_id)?;
        Ok(LibraryView {
            items: s.catalog.view().into_iter().cloned().collect(),
            pending: s.pending.values().cloned().collect(),
            log_offset: s.log_offset,
        })
    }

    // ---- sessions ----

    /// Opens the user's session with its cold-start round, or returns the
    /// existing session for a returning user.
    pub fn open_session(&self, project_id: &str, profile: UserProfile, opts: &WriteOptions) -> GwResult<RoundView> {
        let session_id = self.write(project_id, opts, |tx| {
            if let Some(existing) = tx.state().session_of_user(&profile.user_id) {
                return Ok(existing.session_id.clone());
            }
            let seed = derive_seed(tx.state().meta()?.seed, "profile", &profile.user_id);
            let profile = profile.resolve(seed);
            profile.validate()?;
            let session_id = tx.state().next_session_id()?;
            let round = tx.state().cold_start_round()?;
            tx.emit(EventPayload::SessionOpened { session_id: session_id.clone(), profile, round })?;
            Ok(session_id)
        })?;
        self.round(&session_id)
    }

    fn round_view(state: &ProjectState, session: &Session) -> RoundView {
        let round = session.current_round().clone();
        RoundView {
            session_id: session.session_id.clone(),
            project_id: state.meta.as_ref().map(|m| m.project_id.clone()).unwrap_or_default(),
            profile: session.profile.clone(),
            items: round.item_ids.iter().filter_map(|id| state.item(id).cloned()).collect(),
            round,
            pending_items: session.pending_items(),
            rounds_issued: session.rounds.len(),
            labels: session.labels(),
            finished: session.finished(state.max_rounds()),
            log_offset: state.log_offset,
        }
    }

    pub fn round(&self, session_id: &str) -> GwResult<RoundView> {
        let s = self.session_snapshot(session_id)?;
        Ok(Self::round_view(&s, s.session(session_id)?))
    }

    fn deduplicated(&self, project_id: &str, session_id: &str, key: &str) -> GwResult<Option<InteractionResponse>> {
        let project = self.project(project_id)?;
        let writer = project.writer.lock().unwrap();
        let Some(seq) = writer.log.seq_for_dedup(key) else { return Ok(None) };
        match &writer.log.get(seq).expect("dedup seq exists").payload {
            EventPayload::InteractionSubmitted { session_id: sid, record } if sid == session_id => {
                let record = record.clone();
                drop(writer);
                Ok(Some(InteractionResponse { record, session: self.round(session_id)? }))
            }
            _ => Err(GatewayError::Conflict(format!("dedup key `{key}` was used for a different request"))),
        }
    }

    /// Records an overall vote on an item of the current round. The last vote
    /// of a round trains the model and issues the next round.
    pub fn vote(&self, session_id: &str, req: VoteRequest, opts: &WriteOptions) -> GwResult<InteractionResponse> {
        let pid = Self::session_project(session_id)?.to_string();
        self.session_snapshot(session_id)?;
        if let Some(key) = &opts.dedup_key {
            if let Some(prior) = self.deduplicated(&pid, session_id, key)? {
                return Ok(prior);
            }
        }
        let record = self.write(&pid, opts, |tx| {
            let state = tx.state();
            let session = state.session(session_id)?;
            if session.finished(state.max_rounds()) {
                return Err(GatewayError::SessionClosed(session_id.to_string()));
            }
            let round = session.current_round();
            if !round.item_ids.contains(&req.item_id) {
                if state.item(&req.item_id).is_none() {
                    return Err(codesign_core::Error::UnknownItem(req.item_id.clone()).into());
                }
                return Err(GatewayError::Invalid(format!("item `{}` is not in the current round", req.item_id)));
            }
            if session.votes.contains_key(&req.item_id) {
                return Err(GatewayError::Conflict(format!("item `{}` already has a vote", req.item_id)));
            }
            let record = InteractionRecord {
                record_id: state.next_record_id(),
                user_id: session.user_id().to_string(),
                item_id: req.item_id.clone(),
                kind: InteractionKind::OverallVote,
                polarity: req.polarity,
                region: None,
                confirmed_dimensions: BTreeSet::new(),
                hypothesis: Vec::new(),
                comment: req.comment.clone(),
                round_index: round.round_index,
            };
            tx.emit(EventPayload::InteractionSubmitted { session_id: session_id.to_string(), record: record.clone() })?;
            Ok(record)
        })?;
        Ok(InteractionResponse { record, session: self.round(session_id)? })
    }

    /// Records a brush (or, for `kind: overall_vote`, a vote). The server
    /// ranks candidate dimensions for the region and stores them with the record.
    pub fn interact(&self, session_id: &str, req: InteractionRequest, opts: &WriteOptions) -> GwResult<InteractionResponse> {
        if req.kind == InteractionKind::OverallVote {
            if req.region.is_some() || !req.confirmed_dimensions.is_empty() {
                return Err(GatewayError::Invalid("overall votes carry neither region nor dimensions".into()));
            }
            return self.vote(session_id, VoteRequest { item_id: req.item_id, polarity: req.polarity, comment: req.comment }, opts);
        }
        let pid = Self::session_project(session_id)?.to_string();
        self.session_snapshot(session_id)?;
        if let Some(key) = &opts.dedup_key {
            if let Some(prior) = self.deduplicated(&pid, session_id, key)? {
                return Ok(prior);
            }
        }
        let record = self.write(&pid, opts, |tx| {
            let state = tx.state();
            let session = state.session(session_id)?;
            let item = state.item(&req.item_id).ok_or_else(|| codesign_core::Error::UnknownItem(req.item_id.clone()))?;
            if !session.shown.contains(&req.item_id) {
                return Err(GatewayError::Invalid(format!("item `{}` was not shown in this session", req.item_id)));
            }
            let region = req.region.ok_or_else(|| codesign_core::Error::InvalidRegion("brush without a region".into()))?;
            let hypothesis = hypothesize_dimensions(item, &region, &*self.backends.region)?;
            let record = InteractionRecord {
                record_id: state.next_record_id(),
                user_id: session.user_id().to_string(),
                item_id: req.item_id.clone(),
                kind: InteractionKind::Brush,
                polarity: req.polarity,
                region: Some(region),
                confirmed_dimensions: req.confirmed_dimensions.clone(),
                hypothesis,
                comment: req.comment.clone(),
                round_index: session.current_round().round_index,
            };
            record.validate()?;
            tx.emit(EventPayload::InteractionSubmitted { session_id: session_id.to_string(), record: record.clone() })?;
            Ok(record)
        })?;
        Ok(InteractionResponse { record, session: self.round(session_id)? })
    }

    /// Ranks dimensions for a brush without recording anything.
    pub fn hypothesis(&self, session_id: &str, item_id: &str, region: &BrushRegion) -> GwResult<HypothesisResponse> {
        let s = self.session_snapshot(session_id)?;
        let item = s.item(item_id).ok_or_else(|| codesign_core::Error::UnknownItem(item_id.to_string()))?;
        Ok(HypothesisResponse {
            item_id: item_id.to_string(),
            hypothesis: hypothesize_dimensions(item, region, &*self.backends.region)?,
            log_offset: s.log_offset,
        })
    }

    /// Composites an item onto the session's mannequin. Stores a blob but no event.
    pub fn tryon(&self, session_id: &str, item_id: &str) -> GwResult<TryOnResponse> {
        let s = self.session_snapshot(session_id)?;
        let session = s.session(session_id)?;
        let item = s.item(item_id).ok_or_else(|| codesign_core::Error::UnknownItem(item_id.to_string()))?;
        let result = request_tryon(&session.profile, item, s.context.as_ref(), &*self.backends.tryon, &*self.backends.blobs)?;
        Ok(TryOnResponse { result, log_offset: s.log_offset })
    }

    // ---- designer views ----

    pub fn consensus(&self, project_id: &str) -> GwResult<ConsensusReport> {
        Ok(self.snapshot(project_id)?.consensus())
    }

    pub fn palette(&self, project_id: &str) -> GwResult<PaletteResponse> {
        let s = self.snapshot(project_id)?;
        Ok(PaletteResponse { columns: palette_columns(&s.consensus()), log_offset: s.log_offset })
    }

    fn tree_view(state: &ProjectState, attribute: AttributeId) -> TreeResponse {
        let prune = state.prune_set(attribute);
        TreeResponse {
            tree: state.tree(attribute),
            pruned: prune.nodes().cloned().collect(),
            prune_set_hash: prune.hash(),
            log_offset: state.log_offset,
        }
    }

    pub fn tree(&self, project_id: &str, attribute: AttributeId) -> GwResult<TreeResponse> {
        let s = self.snapshot(project_id)?;
        Ok(Self::tree_view(&s, attribute))
    }

    /// Prunes (`pruned = true`) or restores a tree node.
    pub fn prune(
        &self,
        project_id: &str,
        attribute: AttributeId,
        node: NodeRef,
        pruned: bool,
        opts: &WriteOptions,
    ) -> GwResult<TreeResponse> {
        self.write(project_id, opts, |tx| {
            let mut check = tx.state().prune_set(attribute);
            if pruned {
                check.prune(&tx.state().tree(attribute), node.clone())?;
            } else {
                check.unprune(&node)?;
            }
            tx.emit(EventPayload::TreePruned { attribute, node, pruned })
        })?;
        self.tree(project_id, attribute)
    }

    /// Exports the attribute's fine-tune bundle from the current snapshot and
    /// records the export.
    pub fn export_manifest(&self, project_id: &str, attribute: AttributeId, opts: &WriteOptions) -> GwResult<ManifestResponse> {
        let project = self.project(project_id)?;
        let (bundle, sha, seq) = self.write(project_id, opts, |tx| {
            let state = tx.state();
            let prune = state.prune_set(attribute);
            let tree = state.tree(attribute);
            let bundle = export_manifest(&tree, |id| state.item(id).cloned(), state.log_offset, &prune)?;
            let sha = hex::encode(Sha256::digest(bundle.manifest.to_json().as_bytes()));
            let seq = tx.emit(EventPayload::ManifestExported {
                attribute,
                log_offset: bundle.manifest.provenance.log_offset,
                prune_set_hash: prune.hash(),
                manifest_sha256: sha.clone(),
                entries: bundle.manifest.entries.len(),
            })?;
            Ok((bundle, sha, seq))
        })?;
        let written_to = match &project.dir {
            Some(dir) => {
                let out = dir.join("manifests").join(format!("{}-{}", attribute, seq));
                bundle.write_to(&out)?;
                Some(out)
            }
            None => None,
        };
        Ok(ManifestResponse {
            masks: bundle.masks.keys().cloned().collect(),
            manifest: bundle.manifest,
            manifest_sha256: sha,
            written_to,
            log_offset: seq,
        })
    }

    /// Generates variants of the designer's selection and predicts every
    /// user's reaction. Results stay out of the library until saved.
    pub fn informed(&self, project_id: &str, req: &InformedRequest, opts: &WriteOptions) -> GwResult<InformedResponse> {
        if req.n == 0 || req.n > MAX_GENERATION_BATCH {
            return Err(GatewayError::Invalid(format!("n must be in 1..={MAX_GENERATION_BATCH}, got {}", req.n)));
        }
        self.write(project_id, opts, |tx| {
            let state = tx.state();
            if state.sessions.is_empty() {
                return Err(GatewayError::Invalid("informed generation needs at least one user session".into()));
            }
            let cfg = state.attribution_config()?;
            let users: Vec<(String, &codesign_core::preference::Ppnn)> =
                state.sessions.values().map(|s| (s.user_id().to_string(), s.model.net())).collect();
            let mut catalog = state.catalog.clone();
            catalog.reserve_ids(&state.pending.keys().cloned().collect::<Vec<_>>());
            let items = informed_generate(&req.selection, &req.adapters, req.n, &mut catalog, &self.backends.ingest(), &users, &cfg)?;
            let seq = tx.emit(EventPayload::ItemsIngested {
                items: items.iter().map(|i| i.item.clone()).collect(),
                library: false,
            })?;
            Ok(InformedResponse { items, log_offset: seq })
        })
    }

    /// Moves an informed design into the library, where later rounds can recommend it.
    pub fn save_item(&self, project_id: &str, item_id: &str, opts: &WriteOptions) -> GwResult<SavedResponse> {
        self.write(project_id, opts, |tx| {
            let state = tx.state();
            if !state.pending.contains_key(item_id) {
                if state.catalog.get(item_id).is_some() {
                    return Err(GatewayError::Conflict(format!("item `{item_id}` is already in the library")));
                }
                return Err(codesign_core::Error::UnknownItem(item_id.to_string()).into());
            }
            tx.emit(EventPayload::ItemSaved { item_id: item_id.to_string() })
        })?;
        let s = self.snapshot(project_id)?;
        let item = s.catalog.get(item_id).cloned().expect("saved item is in the library");
        Ok(SavedResponse { item, log_offset: s.log_offset })
    }

    /// Per-user Shapley attribution for any library or pending item.
    pub fn item_attribution(&self, project_id: &str, item_id: &str) -> GwResult<AttributionResponse> {
        let s = self.snapshot(project_id)?;
        let item = s.item(item_id).ok_or_else(|| codesign_core::Error::UnknownItem(item_id.to_string()))?;
        let feature = build_feature(item)?;
        let cfg = s.attribution_config()?;
        let report = report(item_id, &feature, s.sessions.values().map(|x| (x.user_id(), x.model.net())), &cfg)?;
        Ok(AttributionResponse { report, log_offset: s.log_offset })
    }
}

/// Catalog snapshot and model checkpoints: rebuilt from the log on demand,
/// written only for inspection.
fn write_derived(dir: &Path, before: &ProjectState, after: &ProjectState) -> std::io::Result<()> {
    if before.catalog != after.catalog {
        atomic_write(&dir.join("catalog.json"), after.catalog.to_json().as_bytes())?;
    }
    for (id, s) in &after.sessions {
        let changed = before.sessions.get(id).is_none_or(|b| b.model.version != s.model.version);
        if changed {
            let models = dir.join("models");
            std::fs::create_dir_all(&models)?;
            atomic_write(&models.join(format!("{id}.ckpt")), &s.model.to_checkpoint())?;
        }
    }
    Ok(())
}

fn atomic_write(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(tmp, path)
}
