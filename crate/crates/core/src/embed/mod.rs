//! Feature extraction and embedding persistence.

mod backend;
mod cache;
mod preprocess;

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use sha2::{Digest, Sha256};

pub use backend::{declared_dims, BackendConfig, BackendId, Encoder, ExportManifest, Tap, TapDims, INPUT_NAME};
pub use cache::{EmbeddingCache, MAGIC, VERSION};
pub use preprocess::{decode_rgb, preprocess, to_rgb, Crop, Interpolation, PixelTensor, PreprocessSpec};

use crate::error::{Error, Result};
use crate::launder::{self, LaunderRecipe};
use crate::manifest::ImageRecord;

/// SHA-256 over decoded pixels, preprocessing and backend identity.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey(pub [u8; 32]);

impl CacheKey {
    pub fn for_image(image: &RgbImage, spec: &PreprocessSpec, backend: BackendId) -> Self {
        let mut h = Sha256::new();
        h.update(b"image-v1\0");
        h.update(image.width().to_le_bytes());
        h.update(image.height().to_le_bytes());
        h.update(image.as_raw());
        h.update(serde_json::to_vec(spec).expect("spec serializes"));
        h.update(backend.0);
        CacheKey(h.finalize().into())
    }

    pub fn hex(&self) -> String {
        hex::encode(self.0)
    }

    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s).ok()?;
        Some(CacheKey(bytes.try_into().ok()?))
    }
}

impl fmt::Debug for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CacheKey({})", &self.hex()[..12])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub key: CacheKey,
    pub values: Vec<f32>,
}

/// Anything that can turn manifest records (and raw images) into feature vectors.
pub trait EmbeddingSource {
    fn feature_dim(&self) -> usize;

    fn embed(&mut self, record: &ImageRecord) -> Result<EmbeddingVector>;

    fn embed_image(&mut self, image: &RgbImage) -> Result<EmbeddingVector>;

    /// Loads a record's pixels; needed for laundering.
    fn load_image(&self, record: &ImageRecord) -> Result<RgbImage>;

    fn embed_laundered(&mut self, record: &ImageRecord, recipe: &LaunderRecipe) -> Result<EmbeddingVector> {
        let image = self.load_image(record)?;
        let laundered = launder::apply(&image, recipe)?;
        self.embed_image(&laundered)
    }
}

pub fn load_image(path: &Path) -> Result<RgbImage> {
    let bytes = fs::read(path).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    decode_rgb(&bytes)
}

/// Cache-first embedding: rows are looked up by content key and extracted
/// with the encoder on a miss. Without an encoder, misses are errors.
#[derive(Debug)]
pub struct CachedEmbeddings {
    cache: EmbeddingCache,
    config: BackendConfig,
    spec: PreprocessSpec,
    encoder: Option<Encoder>,
    base_dir: PathBuf,
}

impl CachedEmbeddings {
    pub fn new(
        cache: EmbeddingCache,
        config: BackendConfig,
        spec: PreprocessSpec,
        encoder: Option<Encoder>,
    ) -> Result<Self> {
        if cache.feature_dim() != config.feature_dim {
            return Err(Error::DimensionMismatch { expected: config.feature_dim, got: cache.feature_dim() });
        }
        if let Some(enc) = &encoder {
            if enc.config() != &config || enc.spec() != &spec {
                return Err(Error::Backend("encoder does not match the cache's backend config".into()));
            }
        }
        Ok(CachedEmbeddings { cache, config, spec, encoder, base_dir: PathBuf::new() })
    }

    /// Directory that relative record paths are resolved against.
    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = dir.into();
        self
    }

    pub fn cache(&self) -> &EmbeddingCache {
        &self.cache
    }

    pub fn into_cache(self) -> EmbeddingCache {
        self.cache
    }

    fn alias(&self, record: &ImageRecord) -> String {
        format!("{}:{}", self.config.id().hex(), record.id)
    }

    fn lookup_or_extract(&mut self, image: &RgbImage) -> Result<EmbeddingVector> {
        let key = CacheKey::for_image(image, &self.spec, self.config.id());
        if let Some(row) = self.cache.get(&key) {
            return Ok(EmbeddingVector { key, values: row.to_vec() });
        }
        let encoder = self.encoder.as_ref().ok_or_else(|| Error::CacheMiss(format!("image {}", &key.hex()[..12])))?;
        let v = encoder.extract(image)?;
        debug_assert_eq!(v.key, key);
        self.cache.insert(key, &v.values)?;
        Ok(v)
    }
}

impl EmbeddingSource for CachedEmbeddings {
    fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    fn embed(&mut self, record: &ImageRecord) -> Result<EmbeddingVector> {
        let alias = self.alias(record);
        match self.load_image(record) {
            Ok(image) => {
                let v = self.lookup_or_extract(&image).map_err(|e| match e {
                    Error::CacheMiss(_) => Error::CacheMiss(format!("record {}", record.id)),
                    e => e,
                })?;
                self.cache.alias(alias, v.key);
                Ok(v)
            }
            Err(load_err) => {
                let key = self.cache.resolve_alias(&alias);
                match key.and_then(|k| self.cache.get(&k).map(|row| (k, row.to_vec()))) {
                    Some((key, values)) => Ok(EmbeddingVector { key, values }),
                    None if self.encoder.is_some() => Err(load_err),
                    None => Err(Error::CacheMiss(format!("record {}", record.id))),
                }
            }
        }
    }

    fn embed_image(&mut self, image: &RgbImage) -> Result<EmbeddingVector> {
        self.lookup_or_extract(image)
    }

    fn load_image(&self, record: &ImageRecord) -> Result<RgbImage> {
        load_image(&self.base_dir.join(&record.path))
    }
}

/// Embeds `records` in order, growing the cache on misses.
pub fn cache_get_or_extract(records: &[ImageRecord], source: &mut CachedEmbeddings) -> Result<Vec<EmbeddingVector>> {
    records.iter().map(|r| source.embed(r)).collect()
}

/// Precomputed vectors keyed by record id, with no pixel access.
#[derive(Debug, Clone, Default)]
pub struct MemoryEmbeddings {
    dim: usize,
    rows: HashMap<String, Vec<f32>>,
}

impl MemoryEmbeddings {
    pub fn new(dim: usize) -> Self {
        MemoryEmbeddings { dim, rows: HashMap::new() }
    }

    pub fn insert(&mut self, id: impl Into<String>, values: Vec<f32>) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::DimensionMismatch { expected: self.dim, got: values.len() });
        }
        self.rows.insert(id.into(), values);
        Ok(())
    }

    fn key_for(id: &str) -> CacheKey {
        CacheKey(Sha256::digest(id.as_bytes()).into())
    }

    /// Writes every row into `cache`, aliased for `backend`.
    pub fn export_to(&self, cache: &mut EmbeddingCache, backend: BackendId) -> Result<()> {
        let mut ids: Vec<&String> = self.rows.keys().collect();
        ids.sort();
        for id in ids {
            let key = Self::key_for(id);
            cache.insert(key, &self.rows[id])?;
            cache.alias(format!("{}:{id}", backend.hex()), key);
        }
        Ok(())
    }
}

impl EmbeddingSource for MemoryEmbeddings {
    fn feature_dim(&self) -> usize {
        self.dim
    }

    fn embed(&mut self, record: &ImageRecord) -> Result<EmbeddingVector> {
        let values = self.rows.get(&record.id).ok_or_else(|| Error::CacheMiss(format!("record {}", record.id)))?;
        Ok(EmbeddingVector { key: Self::key_for(&record.id), values: values.clone() })
    }

    fn embed_image(&mut self, _image: &RgbImage) -> Result<EmbeddingVector> {
        Err(Error::Config("in-memory embeddings cannot embed new pixels".into()))
    }

    fn load_image(&self, record: &ImageRecord) -> Result<RgbImage> {
        Err(Error::Config(format!("in-memory embeddings have no pixels for {}", record.id)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::manifest::Label;

    fn fake_config() -> BackendConfig {
        BackendConfig {
            graph_path: "none.onnx".into(),
            tap: Tap::Penultimate,
            feature_dim: 3,
            pretrain_tag: "t".into(),
        }
    }

    #[test]
    fn key_depends_on_pixels_spec_and_backend() {
        let spec = PreprocessSpec::clip();
        let a = RgbImage::from_pixel(4, 4, image::Rgb([1, 2, 3]));
        let b = RgbImage::from_pixel(4, 4, image::Rgb([1, 2, 4]));
        let id = fake_config().id();
        let other = BackendConfig { tap: Tap::Final, ..fake_config() }.id();
        assert_eq!(CacheKey::for_image(&a, &spec, id), CacheKey::for_image(&a, &spec, id));
        assert_ne!(CacheKey::for_image(&a, &spec, id), CacheKey::for_image(&b, &spec, id));
        assert_ne!(CacheKey::for_image(&a, &spec, id), CacheKey::for_image(&a, &spec, other));
        let spec2 = PreprocessSpec { target_side: 112, ..spec.clone() };
        assert_ne!(CacheKey::for_image(&a, &spec, id), CacheKey::for_image(&a, &spec2, id));
        let k = CacheKey::for_image(&a, &spec, id);
        assert_eq!(CacheKey::from_hex(&k.hex()), Some(k));
    }

    #[test]
    fn all_hits_need_no_backend() {
        let dir = tempfile::tempdir().unwrap();
        let spec = PreprocessSpec::clip();
        let cfg = fake_config();
        let mut cache = EmbeddingCache::new(3);
        let mut records = Vec::new();
        for i in 0..3u8 {
            let img = RgbImage::from_pixel(8, 8, image::Rgb([i, i, i]));
            let name = format!("{i}.png");
            img.save(dir.path().join(&name)).unwrap();
            cache.insert(CacheKey::for_image(&img, &spec, cfg.id()), &[i as f32; 3]).unwrap();
            records.push(ImageRecord::new(format!("r{i}"), name, Label::Real, "real", "x"));
        }
        let mut src = CachedEmbeddings::new(cache, cfg, spec, None).unwrap().with_base_dir(dir.path());
        let out = cache_get_or_extract(&records, &mut src).unwrap();
        assert_eq!(out.iter().map(|v| v.values[0]).collect::<Vec<_>>(), [0.0, 1.0, 2.0]);
        assert!(cache_get_or_extract(&[], &mut src).unwrap().is_empty());

        // a miss without a backend fails loudly
        let img = RgbImage::from_pixel(8, 8, image::Rgb([9, 9, 9]));
        img.save(dir.path().join("9.png")).unwrap();
        let miss = ImageRecord::new("r9", "9.png", Label::Real, "real", "x");
        assert!(matches!(src.embed(&miss), Err(Error::CacheMiss(_))));
    }

    #[test]
    fn alias_resolves_without_pixels() {
        let cfg = fake_config();
        let mut mem = MemoryEmbeddings::new(3);
        mem.insert("a", vec![1.0, 2.0, 3.0]).unwrap();
        let mut cache = EmbeddingCache::new(3);
        mem.export_to(&mut cache, cfg.id()).unwrap();
        let mut src = CachedEmbeddings::new(cache, cfg, PreprocessSpec::clip(), None).unwrap();
        let rec = ImageRecord::new("a", "missing.png", Label::Fake, "g", "x");
        assert_eq!(src.embed(&rec).unwrap().values, [1.0, 2.0, 3.0]);
        let rec_b = ImageRecord::new("b", "missing.png", Label::Fake, "g", "x");
        assert!(matches!(src.embed(&rec_b), Err(Error::CacheMiss(_))));
    }

    #[test]
    fn dim_mismatch_between_cache_and_backend() {
        assert!(CachedEmbeddings::new(EmbeddingCache::new(4), fake_config(), PreprocessSpec::clip(), None).is_err());
    }
}
