//! Binary embedding cache.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic     16 bytes  "CLIPFORENSICS\0\0\0"
//! version   u32       1
//! dim       u32       feature_dim
//! count     u64
//! index     count x (key: 32 bytes, offset: u64)   offset is absolute
//! rows      count x dim x f32
//! ```
//!
//! A JSON sidecar (`<file>.ids.json`) maps record aliases to keys so runs
//! without image files can still resolve their rows.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::CacheKey;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 16] = b"CLIPFORENSICS\0\0\0";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 16 + 4 + 4 + 8;
const INDEX_ENTRY_LEN: usize = 32 + 8;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingCache {
    feature_dim: usize,
    keys: Vec<CacheKey>,
    index: HashMap<CacheKey, usize>,
    rows: Vec<f32>,
    aliases: BTreeMap<String, CacheKey>,
}

impl EmbeddingCache {
    pub fn new(feature_dim: usize) -> Self {
        assert!(feature_dim > 0, "feature_dim must be positive");
        EmbeddingCache {
            feature_dim,
            keys: Vec::new(),
            index: HashMap::new(),
            rows: Vec::new(),
            aliases: BTreeMap::new(),
        }
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    pub fn len(&self) -> usize {
        self.keys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keys.is_empty()
    }

    pub fn get(&self, key: &CacheKey) -> Option<&[f32]> {
        let row = *self.index.get(key)?;
        Some(&self.rows[row * self.feature_dim..(row + 1) * self.feature_dim])
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.index.contains_key(key)
    }

    /// Adds a row. Returns `false` (and keeps the old row) if the key exists.
    pub fn insert(&mut self, key: CacheKey, values: &[f32]) -> Result<bool> {
        if values.len() != self.feature_dim {
            return Err(Error::DimensionMismatch { expected: self.feature_dim, got: values.len() });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("cache row".into()));
        }
        if self.index.contains_key(&key) {
            return Ok(false);
        }
        self.index.insert(key, self.keys.len());
        self.keys.push(key);
        self.rows.extend_from_slice(values);
        Ok(true)
    }

    pub fn alias(&mut self, name: impl Into<String>, key: CacheKey) {
        self.aliases.insert(name.into(), key);
    }

    pub fn resolve_alias(&self, name: &str) -> Option<CacheKey> {
        self.aliases.get(name).copied()
    }

    pub fn keys(&self) -> &[CacheKey] {
        &self.keys
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let count = self.keys.len();
        let rows_start = HEADER_LEN + count * INDEX_ENTRY_LEN;
        let row_bytes = self.feature_dim * 4;
        let mut out = Vec::with_capacity(rows_start + count * row_bytes);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.feature_dim as u32).to_le_bytes());
        out.extend_from_slice(&(count as u64).to_le_bytes());
        for (i, key) in self.keys.iter().enumerate() {
            out.extend_from_slice(&key.0);
            out.extend_from_slice(&((rows_start + i * row_bytes) as u64).to_le_bytes());
        }
        for v in &self.rows {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: String| Error::Cache(msg);
        if bytes.len() < HEADER_LEN || &bytes[..16] != MAGIC {
            return Err(bad("missing magic".into()));
        }
        let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().expect("4 bytes"));
        let u64_at = |o: usize| u64::from_le_bytes(bytes[o..o + 8].try_into().expect("8 bytes"));
        let version = u32_at(16);
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let dim = u32_at(20) as usize;
        if dim == 0 {
            return Err(bad("feature_dim is zero".into()));
        }
        let count = usize::try_from(u64_at(24)).map_err(|_| bad("count overflows".into()))?;
        let index_end = count
            .checked_mul(INDEX_ENTRY_LEN)
            .and_then(|n| n.checked_add(HEADER_LEN))
            .filter(|&n| n <= bytes.len())
            .ok_or_else(|| bad(format!("truncated index for {count} rows")))?;
        let row_bytes = dim * 4;
        let mut cache = EmbeddingCache::new(dim);
        for i in 0..count {
            let at = HEADER_LEN + i * INDEX_ENTRY_LEN;
            let key = CacheKey(bytes[at..at + 32].try_into().expect("32 bytes"));
            let offset = usize::try_from(u64_at(at + 32)).map_err(|_| bad("offset overflows".into()))?;
            if offset < index_end || offset.checked_add(row_bytes).is_none_or(|end| end > bytes.len()) {
                return Err(bad(format!("row {i} offset {offset} out of bounds")));
            }
            let row: Vec<f32> = bytes[offset..offset + row_bytes]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            if !cache.insert(key, &row)? {
                return Err(bad(format!("duplicate key in row {i}")));
            }
        }
        Ok(cache)
    }

    fn sidecar(path: &Path) -> PathBuf {
        let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".ids.json");
        path.with_file_name(name)
    }

    /// Opens a cache file, validating every row against the header.
    pub fn open(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut cache = EmbeddingCache::from_bytes(&fs::read(path)?)?;
        let side = Self::sidecar(path);
        if side.exists() {
            let raw: BTreeMap<String, String> = serde_json::from_slice(&fs::read(&side)?)?;
            for (name, hex_key) in raw {
                let key =
                    CacheKey::from_hex(&hex_key).ok_or_else(|| Error::Cache(format!("bad key for alias {name}")))?;
                cache.aliases.insert(name, key);
            }
        }
        Ok(cache)
    }

    /// Opens `path` if it exists, otherwise starts an empty cache of `feature_dim`.
    pub fn open_or_create(path: impl AsRef<Path>, feature_dim: usize) -> Result<Self> {
        let path = path.as_ref();
        if path.exists() {
            let cache = EmbeddingCache::open(path)?;
            if cache.feature_dim != feature_dim {
                return Err(Error::DimensionMismatch { expected: feature_dim, got: cache.feature_dim });
            }
            Ok(cache)
        } else {
            Ok(EmbeddingCache::new(feature_dim))
        }
    }

    /// Writes the cache and its alias sidecar; each file is replaced atomically.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        write_atomic(path, &self.to_bytes())?;
        if !self.aliases.is_empty() {
            let raw: BTreeMap<&str, String> = self.aliases.iter().map(|(k, v)| (k.as_str(), v.hex())).collect();
            write_atomic(&Self::sidecar(path), serde_json::to_string_pretty(&raw)?.as_bytes())?;
        }
        Ok(())
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
