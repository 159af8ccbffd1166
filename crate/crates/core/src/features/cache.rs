use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::features::{Embedding, FeatureMap};

/// On-disk cache of extracted features, keyed by backbone fingerprint,
/// image content hash and layer.
///
/// Each entry is one file: a JSON header line `{"layer","n_l","m_l"}`
/// followed by `n_l * m_l` little-endian `f32` values.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    root: PathBuf,
}

#[derive(Serialize, Deserialize)]
struct Header {
    layer: String,
    n_l: usize,
    m_l: usize,
}

const EMBEDDING_ENTRY: &str = "@embedding";

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl FeatureCache {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        FeatureCache { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    fn entry_path(&self, backbone: &str, image_hash: &str, layer: &str) -> PathBuf {
        let file: String = layer
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() || c == '-' || c == '_' {
                    c
                } else {
                    '_'
                }
            })
            .collect();
        // distinct layers may sanitize to the same stem; suffix with a short hash
        let tag = &hex::encode(Sha256::digest(layer.as_bytes()))[..8];
        self.root
            .join(&backbone[..16.min(backbone.len())])
            .join(image_hash)
            .join(format!("{file}.{tag}.bin"))
    }

    fn read_entry(&self, path: &Path, layer: &str) -> Option<(usize, usize, Vec<f32>)> {
        let bytes = fs::read(path).ok()?;
        let newline = bytes.iter().position(|&b| b == b'\n')?;
        let header: Header = serde_json::from_slice(&bytes[..newline]).ok()?;
        let body = &bytes[newline + 1..];
        if header.layer != layer || body.len() != header.n_l * header.m_l * 4 {
            log::warn!("ignoring corrupt cache entry {}", path.display());
            return None;
        }
        let data = body
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Some((header.n_l, header.m_l, data))
    }

    fn write_entry(&self, path: &Path, layer: &str, n_l: usize, m_l: usize, data: &[f32]) -> Result<()> {
        let dir = path.parent().expect("entry paths have a parent");
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut buf = serde_json::to_vec(&Header {
            layer: layer.to_string(),
            n_l,
            m_l,
        })
        .expect("header serializes");
        buf.push(b'\n');
        buf.reserve(data.len() * 4);
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        // write-then-rename so concurrent readers never see a partial entry
        let tmp = dir.join(format!(
            ".tmp-{}-{}",
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        file.write_all(&buf).map_err(|e| Error::io(&tmp, e))?;
        drop(file);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn get_map(&self, backbone: &str, image_hash: &str, layer: &str, depth: u32) -> Option<FeatureMap> {
        let path = self.entry_path(backbone, image_hash, layer);
        let (n_l, m_l, data) = self.read_entry(&path, layer)?;
        FeatureMap::new(layer, depth, n_l, m_l, data).ok()
    }

    pub fn put_map(&self, backbone: &str, image_hash: &str, map: &FeatureMap) -> Result<()> {
        let path = self.entry_path(backbone, image_hash, &map.layer);
        self.write_entry(&path, &map.layer, map.channels, map.positions, &map.data)
    }

    pub fn get_embedding(&self, backbone: &str, image_hash: &str) -> Option<Embedding> {
        let path = self.entry_path(backbone, image_hash, EMBEDDING_ENTRY);
        let (_, m_l, data) = self.read_entry(&path, EMBEDDING_ENTRY)?;
        (m_l == 1).then(|| Embedding::new(data))
    }

    pub fn put_embedding(&self, backbone: &str, image_hash: &str, embedding: &Embedding) -> Result<()> {
        let path = self.entry_path(backbone, image_hash, EMBEDDING_ENTRY);
        self.write_entry(&path, EMBEDDING_ENTRY, embedding.dim(), 1, &embedding.values)
    }
}
