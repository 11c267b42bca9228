//! User-side preference capture: profiles, brush regions, masks and interaction records.

use std::collections::BTreeSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::{BackendError, BlobId, BlobStore, TryOnBackend};
use crate::catalog::{DesignItem, SceneContext};
use crate::design_space::{DesignSpace, NormRect, ZoneMode, DIMENSION_COUNT};
use crate::error::{Error, Result};
use crate::imaging;
use crate::prompt::render_avatar_prompt;

pub const HEIGHT_RANGE_CM: (f64, f64) = (120.0, 220.0);
pub const WEIGHT_RANGE_KG: (f64, f64) = (30.0, 200.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Gender {
    M,
    F,
    Unspecified,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub user_id: String,
    pub gender: Gender,
    pub height_cm: f64,
    pub weight_kg: f64,
}

impl UserProfile {
    pub fn new(user_id: impl Into<String>, gender: Gender, height_cm: f64, weight_kg: f64) -> Result<Self> {
        let profile = Self { user_id: user_id.into(), gender, height_cm, weight_kg };
        profile.validate()?;
        Ok(profile)
    }

    pub fn validate(&self) -> Result<()> {
        if self.user_id.trim().is_empty() {
            return Err(Error::InvalidProfile("empty user_id".into()));
        }
        let (hlo, hhi) = HEIGHT_RANGE_CM;
        if !(hlo..=hhi).contains(&self.height_cm) {
            return Err(Error::InvalidProfile(format!("height {} cm outside [{hlo}, {hhi}]", self.height_cm)));
        }
        let (wlo, whi) = WEIGHT_RANGE_KG;
        if !(wlo..=whi).contains(&self.weight_kg) {
            return Err(Error::InvalidProfile(format!("weight {} kg outside [{wlo}, {whi}]", self.weight_kg)));
        }
        Ok(())
    }

    /// Replaces an unspecified profile with a seeded random model; other
    /// profiles are returned unchanged.
    pub fn resolve(self, seed: u64) -> Self {
        if self.gender != Gender::Unspecified {
            return self;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let gender = if rng.gen_bool(0.5) { Gender::M } else { Gender::F };
        let (h, w) = match gender {
            Gender::M => (rng.gen_range(165..=190), rng.gen_range(58..=90)),
            _ => (rng.gen_range(152..=178), rng.gen_range(45..=75)),
        };
        Self { user_id: self.user_id, gender, height_cm: h as f64, weight_kg: w as f64 }
    }
}

/// Axis-aligned brush region in pixel units, half-open on the max side.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BrushRegion {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
    pub image_w: u32,
    pub image_h: u32,
}

impl BrushRegion {
    pub fn new(x_min: u32, y_min: u32, x_max: u32, y_max: u32, image_w: u32, image_h: u32) -> Result<Self> {
        let r = Self { x_min, y_min, x_max, y_max, image_w, image_h };
        r.validate()?;
        Ok(r)
    }

    pub fn full(image_w: u32, image_h: u32) -> Self {
        Self { x_min: 0, y_min: 0, x_max: image_w, y_max: image_h, image_w, image_h }
    }

    /// Bounding box of a freeform stroke, grown by the brush radius and clamped to the image.
    pub fn from_path(points: &[(f64, f64)], radius: f64, image_w: u32, image_h: u32) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidRegion("empty stroke".into()));
        }
        let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for &(x, y) in points {
            x0 = x0.min(x);
            y0 = y0.min(y);
            x1 = x1.max(x);
            y1 = y1.max(y);
        }
        let clamp = |v: f64, hi: u32| v.clamp(0.0, hi as f64);
        Self::new(
            clamp((x0 - radius).floor(), image_w) as u32,
            clamp((y0 - radius).floor(), image_h) as u32,
            clamp((x1 + radius).ceil(), image_w) as u32,
            clamp((y1 + radius).ceil(), image_h) as u32,
            image_w,
            image_h,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.x_min >= self.x_max || self.y_min >= self.y_max {
            return Err(Error::InvalidRegion(format!("empty rectangle {self:?}")));
        }
        if self.x_max > self.image_w || self.y_max > self.image_h {
            return Err(Error::InvalidRegion(format!("rectangle exceeds image {self:?}")));
        }
        Ok(())
    }

    pub fn area(&self) -> u64 {
        (self.x_max - self.x_min) as u64 * (self.y_max - self.y_min) as u64
    }

    fn normalized(&self) -> NormRect {
        let (w, h) = (self.image_w as f64, self.image_h as f64);
        [self.x_min as f64 / w, self.y_min as f64 / h, self.x_max as f64 / w, self.y_max as f64 / h]
    }
}

/// Bit-packed binary mask, rows MSB-first and padded to whole bytes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    width: u32,
    height: u32,
    packed: Vec<u8>,
}

impl BinaryMask {
    fn row_bytes(width: u32) -> usize {
        (width as usize).div_ceil(8)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        let byte = self.packed[y as usize * Self::row_bytes(self.width) + x as usize / 8];
        byte & (0x80 >> (x % 8)) != 0
    }

    pub fn popcount(&self) -> u64 {
        self.packed.iter().map(|b| b.count_ones() as u64).sum()
    }

    pub fn packed(&self) -> &[u8] {
        &self.packed
    }

    pub fn to_png(&self) -> Result<Vec<u8>, BackendError> {
        imaging::bilevel_png(self.width, self.height, &self.packed)
    }
}

/// `mask(x, y) = 1` iff `x_min <= x < x_max` and `y_min <= y < y_max`.
pub fn rasterize_mask(region: &BrushRegion) -> BinaryMask {
    let row = BinaryMask::row_bytes(region.image_w);
    let mut packed = vec![0u8; row * region.image_h as usize];
    for y in region.y_min..region.y_max {
        let base = y as usize * row;
        for x in region.x_min..region.x_max {
            packed[base + x as usize / 8] |= 0x80 >> (x % 8);
        }
    }
    BinaryMask { width: region.image_w, height: region.image_h, packed }
}

/// Metadata written next to each mask PNG.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskSidecar {
    pub item_id: String,
    pub record_id: String,
    pub region: BrushRegion,
    pub image_dims: [u32; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InteractionKind {
    Brush,
    OverallVote,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarity {
    Like,
    Dislike,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DimensionScore {
    pub dimension: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub record_id: String,
    pub user_id: String,
    pub item_id: String,
    pub kind: InteractionKind,
    pub polarity: Polarity,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<BrushRegion>,
    #[serde(default)]
    pub confirmed_dimensions: BTreeSet<usize>,
    #[serde(default)]
    pub hypothesis: Vec<DimensionScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub comment: Option<String>,
    pub round_index: usize,
}

impl InteractionRecord {
    pub fn validate(&self) -> Result<()> {
        match self.kind {
            InteractionKind::Brush => {
                let region = self
                    .region
                    .ok_or_else(|| Error::InvalidRegion("brush interaction without a region".into()))?;
                region.validate()?;
                if let Some(&d) = self.confirmed_dimensions.iter().find(|&&d| d >= DIMENSION_COUNT) {
                    return Err(Error::InvalidInteraction(format!("dimension index {d} out of range")));
                }
            }
            InteractionKind::OverallVote => {
                if self.region.is_some() || !self.confirmed_dimensions.is_empty() {
                    return Err(Error::InvalidInteraction(
                        "overall votes carry neither region nor dimensions".into(),
                    ));
                }
            }
        }
        for pair in self.hypothesis.windows(2) {
            if pair[0].confidence < pair[1].confidence {
                return Err(Error::InvalidInteraction("hypothesis not sorted by confidence".into()));
            }
        }
        if self.hypothesis.iter().any(|s| !(0.0..=1.0).contains(&s.confidence) || s.dimension >= DIMENSION_COUNT) {
            return Err(Error::InvalidInteraction("hypothesis entry out of range".into()));
        }
        Ok(())
    }
}

/// Maps a brushed region to likely design dimensions.
pub trait RegionBackend: Send + Sync {
    fn score(&self, item: &DesignItem, region: &BrushRegion) -> Result<Vec<DimensionScore>, BackendError>;
}

fn overlap(a: &NormRect, b: &NormRect) -> f64 {
    let w = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let h = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    w * h
}

fn rect_area(r: &NormRect) -> f64 {
    (r[2] - r[0]) * (r[3] - r[1])
}

/// Zone-overlap heuristic over the layout shipped with the design space.
///
/// Local zones (collar, sleeves, placket) score the share of the brush inside
/// the zone; whole-garment dimensions score the share of the garment covered.
#[derive(Debug, Clone, Default)]
pub struct HeuristicRegionBackend;

impl RegionBackend for HeuristicRegionBackend {
    fn score(&self, _item: &DesignItem, region: &BrushRegion) -> Result<Vec<DimensionScore>, BackendError> {
        let space = DesignSpace::canonical();
        let r = region.normalized();
        let brush_area = rect_area(&r);
        Ok((0..DIMENSION_COUNT)
            .map(|d| {
                let zone = space.zone(d);
                let inside: f64 = zone.rects.iter().map(|z| overlap(&r, z)).sum();
                let share = match zone.mode {
                    ZoneMode::Local => inside / brush_area,
                    ZoneMode::Global => inside / zone.rects.iter().map(rect_area).sum::<f64>(),
                };
                DimensionScore { dimension: d, confidence: (zone.weight * share).clamp(0.0, 1.0) }
            })
            .collect())
    }
}

fn rank_scores(mut scores: Vec<DimensionScore>) -> Vec<DimensionScore> {
    scores.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.dimension.cmp(&b.dimension)));
    scores
}

/// All nine dimensions ranked by confidence, ties by dimension order.
///
/// A backend answer that is not a full, in-range ranking is replaced by the heuristic.
pub fn hypothesize_dimensions(
    item: &DesignItem,
    region: &BrushRegion,
    backend: &dyn RegionBackend,
) -> Result<Vec<DimensionScore>> {
    region.validate()?;
    if region.image_w != item.image_width || region.image_h != item.image_height {
        return Err(Error::InvalidRegion(format!(
            "region drawn on {}x{} but item image is {}x{}",
            region.image_w, region.image_h, item.image_width, item.image_height
        )));
    }
    let well_formed = |s: &[DimensionScore]| {
        let dims: BTreeSet<usize> = s.iter().map(|x| x.dimension).collect();
        s.len() == DIMENSION_COUNT
            && dims.len() == DIMENSION_COUNT
            && dims.iter().all(|&d| d < DIMENSION_COUNT)
            && s.iter().all(|x| (0.0..=1.0).contains(&x.confidence))
    };
    let scores = match backend.score(item, region) {
        Ok(s) if well_formed(&s) => s,
        _ => HeuristicRegionBackend.score(item, region)?,
    };
    Ok(rank_scores(scores))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TryOnResult {
    pub blob: BlobId,
    pub prompt: String,
}

/// Renders the mannequin prompt and composites the garment through the backend.
pub fn request_tryon(
    profile: &UserProfile,
    item: &DesignItem,
    scene: Option<&SceneContext>,
    backend: &dyn TryOnBackend,
    blobs: &dyn BlobStore,
) -> Result<TryOnResult> {
    if profile.gender == Gender::Unspecified {
        return Err(Error::InvalidProfile("profile must be resolved before try-on".into()));
    }
    let prompt = render_avatar_prompt(profile);
    let scene_ref = scene.and_then(|s| s.scene_image_ref.as_ref());
    let image = backend.try_on(&prompt, &item.image_ref, scene_ref)?;
    let blob = blobs.put(&image.png)?;
    Ok(TryOnResult { blob, prompt })
}
