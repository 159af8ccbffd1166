use std::fs;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::corpus::image::decode_image;
use crate::error::{Error, Result};
use crate::features::{Backbone, Embedding, FeatureCache, FeatureMap};

/// Which features a caller needs from a photo.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Want {
    pub style: bool,
    pub embedding: bool,
}

impl Want {
    pub const STYLE: Want = Want {
        style: true,
        embedding: false,
    };
    pub const EMBEDDING: Want = Want {
        style: false,
        embedding: true,
    };
    pub const BOTH: Want = Want {
        style: true,
        embedding: true,
    };
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhotoFeatures {
    /// Style maps in manifest tap order; empty unless requested.
    pub style: Vec<FeatureMap>,
    pub embedding: Option<Embedding>,
}

/// Photo-file front end over a [`Backbone`], with an optional feature cache.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    backbone: Arc<Backbone>,
    cache: Option<FeatureCache>,
}

impl FeatureExtractor {
    pub fn new(backbone: Arc<Backbone>, cache: Option<FeatureCache>) -> Self {
        FeatureExtractor { backbone, cache }
    }

    pub fn backbone(&self) -> &Backbone {
        &self.backbone
    }

    fn cached(&self, image_hash: &str, want: Want) -> Option<PhotoFeatures> {
        let cache = self.cache.as_ref()?;
        let fp = self.backbone.fingerprint();
        let style = if want.style {
            self.backbone
                .manifest()
                .style_taps
                .iter()
                .map(|t| cache.get_map(fp, image_hash, &t.layer, t.depth))
                .collect::<Option<Vec<_>>>()?
        } else {
            Vec::new()
        };
        let embedding = if want.embedding {
            Some(cache.get_embedding(fp, image_hash)?)
        } else {
            None
        };
        Some(PhotoFeatures { style, embedding })
    }

    /// Features of one photo file, served from cache when possible.
    pub fn extract_path(&self, path: &Path, want: Want) -> Result<PhotoFeatures> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let image_hash = hex::encode(Sha256::digest(&bytes));
        if let Some(hit) = self.cached(&image_hash, want) {
            return Ok(hit);
        }

        let tensor = decode_image(&bytes, path, &self.backbone.manifest().preprocess)?;
        let (maps, embedding) = self.backbone.extract_all(&tensor)?;
        let features = PhotoFeatures {
            style: if want.style { maps } else { Vec::new() },
            embedding: want.embedding.then_some(embedding),
        };

        if let Some(cache) = &self.cache {
            let fp = self.backbone.fingerprint();
            for map in &features.style {
                cache.put_map(fp, &image_hash, map)?;
            }
            if let Some(e) = &features.embedding {
                cache.put_embedding(fp, &image_hash, e)?;
            }
        }
        Ok(features)
    }

    /// Parallel extraction; results keep the order of `paths`.
    pub fn extract_paths<P: AsRef<Path> + Sync>(&self, paths: &[P], want: Want) -> Result<Vec<PhotoFeatures>> {
        paths.par_iter().map(|p| self.extract_path(p.as_ref(), want)).collect()
    }

    pub fn embeddings<P: AsRef<Path> + Sync>(&self, paths: &[P]) -> Result<Vec<Embedding>> {
        Ok(self
            .extract_paths(paths, Want::EMBEDDING)?
            .into_iter()
            .map(|f| f.embedding.expect("embedding requested"))
            .collect())
    }

    pub fn style_maps<P: AsRef<Path> + Sync>(&self, paths: &[P]) -> Result<Vec<Vec<FeatureMap>>> {
        Ok(self
            .extract_paths(paths, Want::STYLE)?
            .into_iter()
            .map(|f| f.style)
            .collect())
    }
}
