//! Designer-side synthesis: consensus palette, preference trees, pruning,
//! fine-tune manifests and informed generation.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::attribution::{report, AttributionConfig, ShapleyReport};
use crate::backend::BlobId;
use crate::catalog::{Catalog, DesignItem, IngestBackends, Origin};
use crate::consensus::ConsensusReport;
use crate::design_space::{AttributeId, DesignSpace, DesignVector, DIMENSION_COUNT};
use crate::elicitation::{rasterize_mask, BrushRegion, InteractionKind, InteractionRecord, Polarity};
use crate::error::{Error, Result};
use crate::preference::{build_feature, Ppnn};
use crate::prompt::{render_partial, render_prompt, PromptStage, TRIGGER_WORD};

pub const MANIFEST_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Classification {
    Liked,
    Disliked,
}

/// Likes over all overall votes; 0.5 when there are none.
pub fn like_ratio(likes: u64, dislikes: u64) -> f64 {
    if likes + dislikes == 0 {
        0.5
    } else {
        likes as f64 / (likes + dislikes) as f64
    }
}

pub fn classify(ratio: f64) -> Classification {
    if ratio > 0.5 {
        Classification::Liked
    } else {
        Classification::Disliked
    }
}

/// A prunable edge in a preference tree.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeRef {
    Garment(String),
    Record(String),
}

impl fmt::Display for NodeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeRef::Garment(id) => write!(f, "garment:{id}"),
            NodeRef::Record(id) => write!(f, "record:{id}"),
        }
    }
}

impl FromStr for NodeRef {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.split_once(':') {
            Some(("garment", id)) if !id.is_empty() => Ok(NodeRef::Garment(id.to_string())),
            Some(("record", id)) if !id.is_empty() => Ok(NodeRef::Record(id.to_string())),
            _ => Err(Error::UnknownNode(s.to_string())),
        }
    }
}

impl Serialize for NodeRef {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodeRef {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Leaf {
    pub record_id: String,
    pub user_id: String,
    pub kind: InteractionKind,
    pub polarity: Polarity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<BrushRegion>,
    pub confirmed_dimensions: BTreeSet<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
    pub pruned: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GarmentNode {
    pub item_id: String,
    pub like_ratio: f64,
    pub likes: u64,
    pub dislikes: u64,
    pub comment_count: usize,
    pub classification: Classification,
    pub pruned: bool,
    pub leaves: Vec<Leaf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceTree {
    pub root: AttributeId,
    pub root_name: String,
    pub garment_nodes: Vec<GarmentNode>,
}

impl PreferenceTree {
    pub fn node(&self, item_id: &str) -> Option<&GarmentNode> {
        self.garment_nodes.iter().find(|n| n.item_id == item_id)
    }

    pub fn contains(&self, node: &NodeRef) -> bool {
        match node {
            NodeRef::Garment(id) => self.node(id).is_some(),
            NodeRef::Record(id) => self.garment_nodes.iter().any(|g| g.leaves.iter().any(|l| &l.record_id == id)),
        }
    }

    fn is_pruned(&self, node: &NodeRef) -> bool {
        match node {
            NodeRef::Garment(id) => self.node(id).is_some_and(|g| g.pruned),
            NodeRef::Record(id) => self
                .garment_nodes
                .iter()
                .flat_map(|g| &g.leaves)
                .any(|l| &l.record_id == id && l.pruned),
        }
    }
}

/// Explicitly pruned edges for one attribute tree.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PruneSet {
    nodes: BTreeSet<NodeRef>,
}

impl PruneSet {
    pub fn contains(&self, node: &NodeRef) -> bool {
        self.nodes.contains(node)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &NodeRef> {
        self.nodes.iter()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Marks `node` pruned. A leaf under a pruned garment counts as already pruned.
    pub fn prune(&mut self, tree: &PreferenceTree, node: NodeRef) -> Result<()> {
        if !tree.contains(&node) {
            return Err(Error::UnknownNode(node.to_string()));
        }
        if tree.is_pruned(&node) || self.nodes.contains(&node) {
            return Err(Error::AlreadyPruned(node.to_string()));
        }
        self.nodes.insert(node);
        Ok(())
    }

    pub fn unprune(&mut self, node: &NodeRef) -> Result<()> {
        if !self.nodes.remove(node) {
            return Err(Error::NotPruned(node.to_string()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        let mut h = Sha256::new();
        for n in &self.nodes {
            h.update(n.to_string().as_bytes());
            h.update(b"\n");
        }
        hex::encode(h.finalize())
    }
}

/// Builds the tree for `root`: every live garment carrying the attribute, with
/// all interaction records on it as leaves.
pub fn build_tree<'a>(
    root: AttributeId,
    items: impl IntoIterator<Item = &'a DesignItem>,
    records: &[InteractionRecord],
    prune: &PruneSet,
) -> PreferenceTree {
    let mut by_item: BTreeMap<&str, Vec<&InteractionRecord>> = BTreeMap::new();
    for r in records {
        by_item.entry(r.item_id.as_str()).or_default().push(r);
    }
    let mut nodes: Vec<GarmentNode> = items
        .into_iter()
        .filter(|i| !i.deleted && i.design_vector.contains(root))
        .map(|item| {
            let garment_pruned = prune.contains(&NodeRef::Garment(item.item_id.clone()));
            let leaves: Vec<Leaf> = by_item
                .get(item.item_id.as_str())
                .map(|rs| {
                    rs.iter()
                        .map(|r| Leaf {
                            record_id: r.record_id.clone(),
                            user_id: r.user_id.clone(),
                            kind: r.kind,
                            polarity: r.polarity,
                            region: r.region,
                            confirmed_dimensions: r.confirmed_dimensions.clone(),
                            comment: r.comment.clone(),
                            pruned: garment_pruned || prune.contains(&NodeRef::Record(r.record_id.clone())),
                        })
                        .collect()
                })
                .unwrap_or_default();
            let live = || leaves.iter().filter(|l| !l.pruned);
            let votes = |p: Polarity| {
                live().filter(|l| l.kind == InteractionKind::OverallVote && l.polarity == p).count() as u64
            };
            let (likes, dislikes) = (votes(Polarity::Like), votes(Polarity::Dislike));
            let ratio = like_ratio(likes, dislikes);
            let comment_count = live().filter(|l| l.comment.as_deref().is_some_and(|c| !c.trim().is_empty())).count();
            GarmentNode {
                item_id: item.item_id.clone(),
                like_ratio: ratio,
                likes,
                dislikes,
                comment_count,
                classification: classify(ratio),
                pruned: garment_pruned,
                leaves,
            }
        })
        .collect();
    nodes.sort_by(|a, b| {
        let class = |c: Classification| c == Classification::Disliked;
        class(a.classification)
            .cmp(&class(b.classification))
            .then(b.like_ratio.total_cmp(&a.like_ratio))
            .then_with(|| a.item_id.cmp(&b.item_id))
    });
    PreferenceTree {
        root,
        root_name: DesignSpace::canonical().qualified_name(root),
        garment_nodes: nodes,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub clip: f64,
    pub local: f64,
}

pub const LOSS_WEIGHTS: LossWeights = LossWeights { clip: 0.6, local: 0.4 };

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage1Config {
    pub lora_rank: u32,
    pub learning_rate: f64,
    pub steps: u32,
    pub resolution: u32,
    pub trigger: String,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self { lora_rank: 64, learning_rate: 4e-4, steps: 1500, resolution: 768, trigger: TRIGGER_WORD.to_string() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub log_offset: u64,
    pub prune_set_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub item_id: String,
    pub image_ref: BlobId,
    pub mask: String,
    pub region: BrushRegion,
    pub prompt: String,
    pub record_ids: Vec<String>,
    pub like_ratio: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FineTuneManifest {
    pub schema_version: u32,
    pub attribute: AttributeId,
    pub attribute_name: String,
    pub entries: Vec<ManifestEntry>,
    pub loss_weights: LossWeights,
    pub stage1_config: Stage1Config,
    pub provenance: Provenance,
    pub trainer_notes: Vec<String>,
}

impl FineTuneManifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serializes");
        s.push('\n');
        s
    }
}

/// Manifest plus the mask PNGs it references, keyed by relative path.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestBundle {
    pub manifest: FineTuneManifest,
    pub masks: BTreeMap<String, Vec<u8>>,
}

impl ManifestBundle {
    /// Writes `manifest.json` and `masks/` under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("masks"))?;
        for (rel, png) in &self.masks {
            std::fs::write(dir.join(rel), png)?;
        }
        std::fs::write(dir.join("manifest.json"), self.manifest.to_json())?;
        Ok(())
    }
}

fn trainer_notes(attribute_name: &str) -> Vec<String> {
    vec![
        format!("One LoRA adapter per attribute; this manifest covers {attribute_name}."),
        "Objective: L = loss_weights.clip * L_clip + loss_weights.local * L_local.".to_string(),
        "L_local = sum_j || F(I_j * M_j) - F(T_a) ||^2 where I_j is the entry image, M_j its mask, \
         F the denoiser backbone feature extractor and T_a the CLIP text embedding of the attribute."
            .to_string(),
        "L_clip is CLIP guidance between the generated image and the entry prompt.".to_string(),
        "stage1_config records the base adapter (rank, learning rate, steps, resolution, trigger word) \
         the attribute adapters are trained on top of."
            .to_string(),
    ]
}

/// Fine-tune data for the tree's root attribute: one entry per unpruned Like
/// brush confirming the root dimension, on unpruned garments whose like ratio
/// exceeds 0.5.
pub fn export_manifest(
    tree: &PreferenceTree,
    lookup: impl Fn(&str) -> Option<DesignItem>,
    log_offset: u64,
    prune: &PruneSet,
) -> Result<ManifestBundle> {
    let space = DesignSpace::canonical();
    let root_dim = tree.root.dimension;
    let detail = BTreeMap::from([(space.dimension(root_dim).name.clone(), space.attribute_name(tree.root).to_string())]);
    let mut entries = Vec::new();
    let mut masks = BTreeMap::new();
    for node in &tree.garment_nodes {
        if node.pruned || node.classification != Classification::Liked || node.like_ratio <= 0.5 {
            continue;
        }
        let Some(item) = lookup(&node.item_id) else { continue };
        let prompt = render_prompt(&item.design_vector, PromptStage::Informed, &detail)?;
        for leaf in &node.leaves {
            if leaf.pruned
                || leaf.kind != InteractionKind::Brush
                || leaf.polarity != Polarity::Like
                || !leaf.confirmed_dimensions.contains(&root_dim)
            {
                continue;
            }
            let Some(region) = leaf.region else { continue };
            let rel = format!("masks/{}.png", leaf.record_id);
            masks.insert(rel.clone(), rasterize_mask(&region).to_png()?);
            entries.push(ManifestEntry {
                item_id: node.item_id.clone(),
                image_ref: item.image_ref.clone(),
                mask: rel,
                region,
                prompt: prompt.clone(),
                record_ids: vec![leaf.record_id.clone()],
                like_ratio: node.like_ratio,
                comment: leaf.comment.clone(),
            });
        }
    }
    if entries.is_empty() {
        return Err(Error::EmptyManifest);
    }
    Ok(ManifestBundle {
        manifest: FineTuneManifest {
            schema_version: MANIFEST_SCHEMA_VERSION,
            attribute: tree.root,
            attribute_name: tree.root_name.clone(),
            entries,
            loss_weights: LOSS_WEIGHTS,
            stage1_config: Stage1Config::default(),
            provenance: Provenance { log_offset, prune_set_hash: prune.hash() },
            trainer_notes: trainer_notes(&tree.root_name),
        },
        masks,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaletteEntry {
    pub attribute: AttributeId,
    pub name: String,
    pub acs_raw: f64,
    pub acs_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PaletteColumn {
    pub dimension: usize,
    pub name: String,
    pub entries: Vec<PaletteEntry>,
}

/// One column per dimension, attributes by descending normalized consensus,
/// ties by attribute index.
pub fn palette_columns(report: &ConsensusReport) -> Vec<PaletteColumn> {
    let space = DesignSpace::canonical();
    (0..DIMENSION_COUNT)
        .map(|d| {
            let mut entries: Vec<PaletteEntry> = (0..space.attribute_count(d))
                .map(|a| {
                    let id = AttributeId::new(d, a).expect("in range");
                    PaletteEntry {
                        attribute: id,
                        name: space.attribute_name(id).to_string(),
                        acs_raw: report.acs_raw(id),
                        acs_norm: report.acs_norm(id),
                    }
                })
                .collect();
            entries.sort_by(|x, y| {
                y.acs_norm.total_cmp(&x.acs_norm).then(x.attribute.attribute.cmp(&y.attribute.attribute))
            });
            PaletteColumn { dimension: d, name: space.dimension(d).name.clone(), entries }
        })
        .collect()
}

/// Designer's puzzle assembly: at most one attribute per dimension plus
/// optional per-dimension detail text for the informed prompt.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PuzzleSelection {
    pub slots: [Option<usize>; DIMENSION_COUNT],
    #[serde(default)]
    pub detail: BTreeMap<String, String>,
}

impl PuzzleSelection {
    pub fn from_vector(v: &DesignVector) -> Self {
        Self { slots: v.indices().map(Some), detail: BTreeMap::new() }
    }

    /// Places `id` in its dimension, replacing whatever was there.
    pub fn place(&mut self, id: AttributeId) -> Result<()> {
        if !id.is_valid() {
            return Err(Error::UnknownAttribute(id.to_string()));
        }
        self.slots[id.dimension] = Some(id.attribute);
        Ok(())
    }

    pub fn clear(&mut self, dimension: usize) {
        if dimension < DIMENSION_COUNT {
            self.slots[dimension] = None;
        }
    }

    pub fn filled(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn to_vector(&self) -> Result<DesignVector> {
        let filled = self.filled();
        if filled < DIMENSION_COUNT {
            return Err(Error::IncompleteSelection(filled));
        }
        DesignVector::new(self.slots.map(|s| s.unwrap()))
    }

    /// Current template text; unfilled slots render as `[Dimension]`.
    pub fn template(&self) -> String {
        render_partial(&self.slots)
    }

    /// Generation prompt for a complete selection. Without detail text the
    /// plain garment template is used.
    pub fn prompt(&self) -> Result<String> {
        let v = self.to_vector()?;
        if self.detail.is_empty() {
            render_prompt(&v, PromptStage::Framing, &self.detail)
        } else {
            render_prompt(&v, PromptStage::Informed, &self.detail)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InformedItem {
    pub item: DesignItem,
    pub report: ShapleyReport,
}

/// Generates `n` variants of the selection with the given adapters and
/// attributes each user's predicted reaction. Items are not added to the
/// library; their ids are reserved in `catalog`.
pub fn informed_generate(
    selection: &PuzzleSelection,
    adapters: &[String],
    n: usize,
    catalog: &mut Catalog,
    backends: &IngestBackends<'_>,
    users: &[(String, &Ppnn)],
    cfg: &AttributionConfig,
) -> Result<Vec<InformedItem>> {
    let v = selection.to_vector()?;
    if n == 0 {
        return Err(Error::InvalidInteraction("n must be at least 1".into()));
    }
    let prompt = selection.prompt()?;
    let vectors = vec![v; n];
    let items = catalog.generate_items(&vectors, Origin::Informed, backends, &|_| Ok(prompt.clone()), adapters)?;
    catalog.reserve_ids(&items.iter().map(|i| i.item_id.clone()).collect::<Vec<_>>());
    items
        .into_iter()
        .map(|item| {
            let feature = build_feature(&item)?;
            let report = report(&item.item_id, &feature, users.iter().map(|(u, net)| (u.as_str(), *net)), cfg)?;
            Ok(InformedItem { item, report })
        })
        .collect()
}
