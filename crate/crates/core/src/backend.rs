//! Client seams for the generative pipeline plus deterministic mocks.
//!
//! Image generation, visual embedding and try-on compositing all run behind
//! these traits. The mocks derive every output from a hash of their inputs,
//! so a project replayed from its event log reproduces the same blobs.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::RwLock;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::design_space::{dim, DesignSpace, DesignVector};
use crate::imaging;

pub const VISUAL_DIM: usize = 50;

#[derive(Debug, Clone, Error, PartialEq)]
pub enum BackendError {
    #[error("backend unavailable: {0}")]
    Unavailable(String),
    #[error("backend rejected request: {0}")]
    Rejected(String),
    #[error("backend returned malformed output: {0}")]
    Malformed(String),
}

/// Content address of a stored image: lowercase hex SHA-256 of its bytes.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct BlobId(String);

impl BlobId {
    pub fn of(bytes: &[u8]) -> Self {
        Self(hex::encode(Sha256::digest(bytes)))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn parse(s: &str) -> Option<Self> {
        (s.len() == 64 && s.bytes().all(|b| b.is_ascii_hexdigit() && !b.is_ascii_uppercase()))
            .then(|| Self(s.to_string()))
    }

    pub fn file_name(&self) -> String {
        format!("{}.png", self.0)
    }
}

impl fmt::Display for BlobId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

pub trait BlobStore: Send + Sync {
    fn put(&self, bytes: &[u8]) -> std::io::Result<BlobId>;
    fn get(&self, id: &BlobId) -> std::io::Result<Option<Vec<u8>>>;
}

#[derive(Debug, Default)]
pub struct MemoryBlobStore {
    blobs: RwLock<BTreeMap<BlobId, Vec<u8>>>,
}

impl MemoryBlobStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.blobs.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl BlobStore for MemoryBlobStore {
    fn put(&self, bytes: &[u8]) -> std::io::Result<BlobId> {
        let id = BlobId::of(bytes);
        self.blobs
            .write()
            .unwrap()
            .entry(id.clone())
            .or_insert_with(|| bytes.to_vec());
        Ok(id)
    }

    fn get(&self, id: &BlobId) -> std::io::Result<Option<Vec<u8>>> {
        Ok(self.blobs.read().unwrap().get(id).cloned())
    }
}

/// Blobs as `<root>/<sha256>.png`.
#[derive(Debug, Clone)]
pub struct DirBlobStore {
    root: PathBuf,
}

impl DirBlobStore {
    pub fn open(root: impl Into<PathBuf>) -> std::io::Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root)?;
        Ok(Self { root })
    }

    pub fn path_of(&self, id: &BlobId) -> PathBuf {
        self.root.join(id.file_name())
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl BlobStore for DirBlobStore {
    fn put(&self, bytes: &[u8]) -> std::io::Result<BlobId> {
        let id = BlobId::of(bytes);
        let path = self.path_of(&id);
        if !path.exists() {
            let tmp = self.root.join(format!(".{}.tmp", id.as_str()));
            let mut f = fs::File::create(&tmp)?;
            f.write_all(bytes)?;
            f.sync_all()?;
            fs::rename(&tmp, &path)?;
        }
        Ok(id)
    }

    fn get(&self, id: &BlobId) -> std::io::Result<Option<Vec<u8>>> {
        match fs::read(self.path_of(id)) {
            Ok(bytes) => Ok(Some(bytes)),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedImage {
    pub png: Vec<u8>,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub vector: DesignVector,
    /// Distinguishes repeated generations of the same design.
    pub variant: u32,
    /// Fine-tuned adapter references (manifest ids) to apply.
    #[serde(default)]
    pub adapters: Vec<String>,
}

pub trait GenerationBackend: Send + Sync {
    fn generate_garment(&self, request: &GenerationRequest) -> Result<GeneratedImage, BackendError>;
    fn generate_scene(&self, description: &str) -> Result<GeneratedImage, BackendError>;
}

pub trait EmbeddingBackend: Send + Sync {
    /// A 50-dimensional visual embedding of the image.
    fn embed(&self, vector: &DesignVector, image: &BlobId) -> Result<Vec<f64>, BackendError>;
}

pub trait TryOnBackend: Send + Sync {
    fn try_on(
        &self,
        avatar_prompt: &str,
        garment: &BlobId,
        scene: Option<&BlobId>,
    ) -> Result<GeneratedImage, BackendError>;
}

fn seed_from(parts: &[&[u8]]) -> [u8; 32] {
    let mut h = Sha256::new();
    for p in parts {
        h.update((p.len() as u64).to_le_bytes());
        h.update(p);
    }
    h.finalize().into()
}

/// Single-color placeholder images at the layout resolution.
#[derive(Debug, Clone)]
pub struct MockGenerator {
    pub width: u32,
    pub height: u32,
}

impl Default for MockGenerator {
    fn default() -> Self {
        let layout = DesignSpace::canonical().layout();
        Self { width: layout.image_width, height: layout.image_height }
    }
}

impl GenerationBackend for MockGenerator {
    fn generate_garment(&self, request: &GenerationRequest) -> Result<GeneratedImage, BackendError> {
        let space = DesignSpace::canonical();
        let color = space
            .attribute(request.vector.attribute(dim::SPECIFIC_COLORS))
            .rgb
            .unwrap_or([128, 128, 128]);
        let design: Vec<String> = request.vector.indices().iter().map(usize::to_string).collect();
        let prompt_hash = hex::encode(Sha256::digest(request.prompt.as_bytes()));
        let text = [
            ("design", design.join(",")),
            ("variant", request.variant.to_string()),
            ("adapters", request.adapters.join(",")),
            ("prompt-sha256", prompt_hash),
        ];
        Ok(GeneratedImage {
            png: imaging::solid_png(self.width, self.height, color, &text)?,
            width: self.width,
            height: self.height,
        })
    }

    fn generate_scene(&self, description: &str) -> Result<GeneratedImage, BackendError> {
        let seed = seed_from(&[b"scene", description.as_bytes()]);
        let color = [seed[0] / 2 + 100, seed[1] / 2 + 100, seed[2] / 2 + 100];
        let text = [("scene", description.to_string())];
        Ok(GeneratedImage {
            png: imaging::solid_png(self.width, self.height, color, &text)?,
            width: self.width,
            height: self.height,
        })
    }
}

/// Seeded pseudo-random embeddings in `[-1, 1]`, keyed by design and image.
#[derive(Debug, Clone, Default)]
pub struct MockEmbedder;

impl EmbeddingBackend for MockEmbedder {
    fn embed(&self, vector: &DesignVector, image: &BlobId) -> Result<Vec<f64>, BackendError> {
        let design: Vec<u8> = vector.indices().iter().map(|&a| a as u8).collect();
        let mut rng = ChaCha8Rng::from_seed(seed_from(&[b"embed", &design, image.as_str().as_bytes()]));
        Ok((0..VISUAL_DIM).map(|_| rng.gen_range(-1.0..=1.0)).collect())
    }
}

/// Draws a torso-shaped garment block over a gray silhouette on a scene-tinted background.
#[derive(Debug, Clone)]
pub struct MockTryOn {
    pub width: u32,
    pub height: u32,
}

impl Default for MockTryOn {
    fn default() -> Self {
        Self { width: 96, height: 128 }
    }
}

impl TryOnBackend for MockTryOn {
    fn try_on(
        &self,
        avatar_prompt: &str,
        garment: &BlobId,
        scene: Option<&BlobId>,
    ) -> Result<GeneratedImage, BackendError> {
        let bg = seed_from(&[b"bg", scene.map(BlobId::as_str).unwrap_or("").as_bytes()]);
        let fg = seed_from(&[b"garment", garment.as_str().as_bytes()]);
        let body = seed_from(&[b"avatar", avatar_prompt.as_bytes()]);
        let (w, h) = (self.width as usize, self.height as usize);
        let mut pixels = vec![0u8; w * h * 3];
        for y in 0..h {
            for x in 0..w {
                let fx = x as f64 / w as f64;
                let fy = y as f64 / h as f64;
                let silhouette = (0.3..0.7).contains(&fx) && fy >= 0.1;
                let head = (0.42..0.58).contains(&fx) && (0.02..0.14).contains(&fy);
                let torso = (0.3..0.7).contains(&fx) && (0.2..0.65).contains(&fy);
                let px = if torso {
                    [fg[0], fg[1], fg[2]]
                } else if silhouette || head {
                    let g = 90 + body[0] / 4;
                    [g, g, g]
                } else {
                    [bg[0], bg[1], bg[2]]
                };
                pixels[(y * w + x) * 3..(y * w + x) * 3 + 3].copy_from_slice(&px);
            }
        }
        Ok(GeneratedImage {
            png: imaging::rgb_png(self.width, self.height, &pixels)?,
            width: self.width,
            height: self.height,
        })
    }
}

/// Backend that always reports itself unavailable.
#[derive(Debug, Clone, Default)]
pub struct Offline;

impl GenerationBackend for Offline {
    fn generate_garment(&self, _: &GenerationRequest) -> Result<GeneratedImage, BackendError> {
        Err(BackendError::Unavailable("generation backend offline".into()))
    }
    fn generate_scene(&self, _: &str) -> Result<GeneratedImage, BackendError> {
        Err(BackendError::Unavailable("generation backend offline".into()))
    }
}

impl EmbeddingBackend for Offline {
    fn embed(&self, _: &DesignVector, _: &BlobId) -> Result<Vec<f64>, BackendError> {
        Err(BackendError::Unavailable("embedding backend offline".into()))
    }
}

impl TryOnBackend for Offline {
    fn try_on(&self, _: &str, _: &BlobId, _: Option<&BlobId>) -> Result<GeneratedImage, BackendError> {
        Err(BackendError::Unavailable("try-on backend offline".into()))
    }
}
