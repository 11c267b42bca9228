//! Design library: generated garments, their embeddings and designer curation.

use std::collections::{BTreeSet, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{
    BackendError, BlobId, BlobStore, EmbeddingBackend, GenerationBackend, GenerationRequest, VISUAL_DIM,
};
use crate::design_space::{DesignVector, DIMENSION_COUNT};
use crate::error::{Error, Result};
use crate::framing::FilterResult;
use crate::prompt::{render_prompt, PromptStage};

/// Upper bound on designs generated per request.
pub const MAX_GENERATION_BATCH: usize = 500;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Framing,
    Informed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignItem {
    pub item_id: String,
    pub design_vector: DesignVector,
    pub image_ref: BlobId,
    pub image_width: u32,
    pub image_height: u32,
    pub visual_embedding: Vec<f64>,
    pub origin: Origin,
    pub display_rank: usize,
    pub deleted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneContext {
    pub scene_text: String,
    pub scene_description: String,
    pub scene_image_ref: Option<BlobId>,
    pub garment_type: String,
    pub principle: String,
    pub filter: FilterResult,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum CurateOp {
    Remove { item_id: String },
    Reorder { item_id: String, new_rank: usize },
}

/// Samples `n` designs, each dimension uniform over the filter's included attributes.
///
/// Designs are distinct unless the included space holds fewer than `n`
/// combinations, in which case every combination appears before any repeats.
pub fn sample_design_vectors(filter: &FilterResult, n: usize, seed: u64) -> Vec<DesignVector> {
    let choices: Vec<Vec<usize>> = (0..DIMENSION_COUNT).map(|d| filter.included_in(d)).collect();
    let space_size = choices
        .iter()
        .try_fold(1usize, |acc, c| acc.checked_mul(c.len()))
        .unwrap_or(usize::MAX);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| {
        let idx: [usize; DIMENSION_COUNT] = std::array::from_fn(|d| choices[d][rng.gen_range(0..choices[d].len())]);
        DesignVector::new(idx).expect("filter attributes are valid")
    };

    if space_size <= n.saturating_mul(2) {
        // Small space: enumerate, shuffle, then top up with independent draws.
        let mut all = Vec::with_capacity(space_size);
        let mut idx = [0usize; DIMENSION_COUNT];
        'odometer: loop {
            let v: [usize; DIMENSION_COUNT] = std::array::from_fn(|d| choices[d][idx[d]]);
            all.push(DesignVector::new(v).expect("filter attributes are valid"));
            for d in (0..DIMENSION_COUNT).rev() {
                idx[d] += 1;
                if idx[d] < choices[d].len() {
                    continue 'odometer;
                }
                idx[d] = 0;
            }
            break;
        }
        all.shuffle(&mut rng);
        all.truncate(n);
        while all.len() < n {
            all.push(draw(&mut rng));
        }
        return all;
    }

    let mut seen = HashSet::with_capacity(n);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let v = draw(&mut rng);
        if seen.insert(v) {
            out.push(v);
        }
    }
    out
}

/// Backends used when generating library items.
pub struct IngestBackends<'a> {
    pub generation: &'a dyn GenerationBackend,
    pub embedding: &'a dyn EmbeddingBackend,
    pub blobs: &'a dyn BlobStore,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Catalog {
    items: Vec<DesignItem>,
    next_id: u64,
}

impl Catalog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn format_id(n: u64) -> String {
        format!("itm-{n:06}")
    }

    /// Reserves `count` fresh item ids without inserting anything.
    pub fn peek_ids(&self, count: usize) -> Vec<String> {
        (0..count as u64).map(|k| Self::format_id(self.next_id + k)).collect()
    }

    /// Generates, stores and embeds one image per vector. Nothing is returned
    /// (and the caller should commit nothing) unless every call succeeds.
    pub fn generate_items(
        &self,
        vectors: &[DesignVector],
        origin: Origin,
        backends: &IngestBackends<'_>,
        prompt_for: &dyn Fn(&DesignVector) -> Result<String>,
        adapters: &[String],
    ) -> Result<Vec<DesignItem>> {
        let ids = self.peek_ids(vectors.len());
        let visible = self.visible_len();
        let mut items = Vec::with_capacity(vectors.len());
        for (k, (v, item_id)) in vectors.iter().zip(ids).enumerate() {
            let request = GenerationRequest {
                prompt: prompt_for(v)?,
                vector: *v,
                variant: k as u32,
                adapters: adapters.to_vec(),
            };
            let image = backends.generation.generate_garment(&request)?;
            let image_ref = backends.blobs.put(&image.png)?;
            let visual_embedding = backends.embedding.embed(v, &image_ref)?;
            if visual_embedding.len() != VISUAL_DIM || visual_embedding.iter().any(|x| !x.is_finite()) {
                return Err(BackendError::Malformed(format!(
                    "embedding must be {VISUAL_DIM} finite values, got {}",
                    visual_embedding.len()
                ))
                .into());
            }
            items.push(DesignItem {
                item_id,
                design_vector: *v,
                image_ref,
                image_width: image.width,
                image_height: image.height,
                visual_embedding,
                origin,
                display_rank: visible + k,
                deleted: false,
            });
        }
        Ok(items)
    }

    /// Generates framing-stage items and appends them to the library.
    pub fn ingest_generated(
        &mut self,
        vectors: &[DesignVector],
        backends: &IngestBackends<'_>,
    ) -> Result<Vec<DesignItem>> {
        if vectors.is_empty() {
            return Ok(Vec::new());
        }
        let framing = |v: &DesignVector| render_prompt(v, PromptStage::Framing, &Default::default());
        let items = self.generate_items(vectors, Origin::Framing, backends, &framing, &[])?;
        self.insert(items.clone())?;
        Ok(items)
    }

    /// Adds already generated items at the end of the display order.
    pub fn insert(&mut self, items: Vec<DesignItem>) -> Result<()> {
        let mut ids: BTreeSet<&str> = self.items.iter().map(|i| i.item_id.as_str()).collect();
        for item in &items {
            if !ids.insert(&item.item_id) {
                return Err(Error::InvalidInteraction(format!("duplicate item id `{}`", item.item_id)));
            }
            if item.visual_embedding.len() != VISUAL_DIM {
                return Err(Error::Schema(format!("item `{}` embedding length", item.item_id)));
            }
        }
        for mut item in items {
            if let Some(n) = item.item_id.strip_prefix("itm-").and_then(|s| s.parse::<u64>().ok()) {
                self.next_id = self.next_id.max(n + 1);
            }
            item.deleted = false;
            item.display_rank = usize::MAX;
            self.items.push(item);
        }
        self.renumber();
        Ok(())
    }

    /// Advances the id counter past ids handed out for items that live elsewhere.
    pub fn reserve_ids(&mut self, ids: &[String]) {
        for id in ids {
            if let Some(n) = id.strip_prefix("itm-").and_then(|s| s.parse::<u64>().ok()) {
                self.next_id = self.next_id.max(n + 1);
            }
        }
    }

    pub fn curate(&mut self, op: &CurateOp) -> Result<()> {
        match op {
            CurateOp::Remove { item_id } => {
                let item = self.live_mut(item_id)?;
                item.deleted = true;
                self.renumber();
            }
            CurateOp::Reorder { item_id, new_rank } => {
                self.live_mut(item_id)?;
                let mut order: Vec<usize> = self.visible_indices();
                if *new_rank >= order.len() {
                    return Err(Error::InvalidRank { rank: *new_rank, len: order.len() });
                }
                let pos = order
                    .iter()
                    .position(|&i| self.items[i].item_id == *item_id)
                    .expect("live item is visible");
                let moved = order.remove(pos);
                order.insert(*new_rank, moved);
                for (rank, i) in order.into_iter().enumerate() {
                    self.items[i].display_rank = rank;
                }
            }
        }
        Ok(())
    }

    fn live_mut(&mut self, item_id: &str) -> Result<&mut DesignItem> {
        let item = self
            .items
            .iter_mut()
            .find(|i| i.item_id == item_id)
            .ok_or_else(|| Error::UnknownItem(item_id.to_string()))?;
        if item.deleted {
            return Err(Error::AlreadyDeleted(item_id.to_string()));
        }
        Ok(item)
    }

    fn visible_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.items.len()).filter(|&i| !self.items[i].deleted).collect();
        idx.sort_by_key(|&i| (self.items[i].display_rank, i));
        idx
    }

    /// Compacts ranks of visible items to `0..k`, keeping relative order.
    fn renumber(&mut self) {
        for (rank, i) in self.visible_indices().into_iter().enumerate() {
            self.items[i].display_rank = rank;
        }
    }

    pub fn get(&self, item_id: &str) -> Option<&DesignItem> {
        self.items.iter().find(|i| i.item_id == item_id)
    }

    /// Live (non-deleted) item.
    pub fn live(&self, item_id: &str) -> Result<&DesignItem> {
        match self.get(item_id) {
            None => Err(Error::UnknownItem(item_id.to_string())),
            Some(i) if i.deleted => Err(Error::AlreadyDeleted(item_id.to_string())),
            Some(i) => Ok(i),
        }
    }

    /// Visible items in display order.
    pub fn view(&self) -> Vec<&DesignItem> {
        self.visible_indices().into_iter().map(|i| &self.items[i]).collect()
    }

    pub fn visible_len(&self) -> usize {
        self.items.iter().filter(|i| !i.deleted).count()
    }

    /// Every item ever inserted, including soft-deleted ones.
    pub fn all_items(&self) -> &[DesignItem] {
        &self.items
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("catalog serializes")
    }

    /// Checks rank compactness and embedding shape.
    pub fn check_invariants(&self) -> Result<()> {
        let mut ranks: Vec<usize> = self.items.iter().filter(|i| !i.deleted).map(|i| i.display_rank).collect();
        ranks.sort_unstable();
        if ranks.iter().enumerate().any(|(k, &r)| k != r) {
            return Err(Error::Schema(format!("ranks not compact: {ranks:?}")));
        }
        for item in &self.items {
            if item.visual_embedding.len() != VISUAL_DIM || item.visual_embedding.iter().any(|x| !x.is_finite()) {
                return Err(Error::Schema(format!("bad embedding on `{}`", item.item_id)));
            }
        }
        Ok(())
    }
}
