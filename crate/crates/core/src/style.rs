//! Gram-matrix style statistics, the depth-weighted style distance, and
//! per-account style profiles used for ranking and attribution.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, FeatureMap, StyleTap};

pub const DEFAULT_K: usize = 30;
pub const DEFAULT_N_REF: usize = 100;

/// `F Fᵀ` of one feature map, stored densely and exactly symmetric.
#[derive(Debug, Clone, PartialEq)]
pub struct GramMatrix {
    pub layer: String,
    pub depth: u32,
    /// Filters (matrix side).
    pub n: usize,
    /// Spatial positions of the source map.
    pub m: usize,
    values: Vec<f64>,
}

impl GramMatrix {
    /// Builds a matrix from its upper triangle (row-major, `i <= j`).
    pub fn from_upper(layer: impl Into<String>, depth: u32, n: usize, m: usize, upper: &[f64]) -> Result<Self> {
        if upper.len() != n * (n + 1) / 2 {
            return Err(Error::DimMismatch(format!(
                "{} upper-triangular entries for a {n}x{n} Gram matrix",
                upper.len()
            )));
        }
        let mut values = vec![0.0; n * n];
        let mut it = upper.iter();
        for i in 0..n {
            for j in i..n {
                let v = *it.next().expect("length checked");
                values[i * n + j] = v;
                values[j * n + i] = v;
            }
        }
        Ok(GramMatrix {
            layer: layer.into(),
            depth,
            n,
            m,
            values,
        })
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.n + j]
    }

    /// Row-major `n x n` entries.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn upper(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n).flat_map(move |i| (i..self.n).map(move |j| self.get(i, j)))
    }

    fn same_shape(&self, other: &GramMatrix) -> Result<()> {
        if self.layer != other.layer || self.n != other.n || self.m != other.m {
            return Err(Error::DimMismatch(format!(
                "cannot compare Gram matrices {} ({}x{}, M={}) and {} ({}x{}, M={})",
                self.layer, self.n, self.n, self.m, other.layer, other.n, other.n, other.m
            )));
        }
        Ok(())
    }
}

pub fn gram(fm: &FeatureMap) -> GramMatrix {
    let (n, m) = (fm.channels, fm.positions);
    let rows: Vec<f64> = fm.data.iter().map(|&v| v as f64).collect();
    let mut values = vec![0.0; n * n];
    for i in 0..n {
        let a = &rows[i * m..(i + 1) * m];
        for j in i..n {
            let b = &rows[j * m..(j + 1) * m];
            let v: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            values[i * n + j] = v;
            values[j * n + i] = v;
        }
    }
    GramMatrix {
        layer: fm.layer.clone(),
        depth: fm.depth,
        n,
        m,
        values,
    }
}

pub fn grams(maps: &[FeatureMap]) -> Vec<GramMatrix> {
    maps.iter().map(gram).collect()
}

/// `1 / (4 N² M²) · Σ (Ga - Gb)²`.
pub fn layer_distance(a: &GramMatrix, b: &GramMatrix) -> Result<f64> {
    a.same_shape(b)?;
    let sum: f64 = a.values.iter().zip(&b.values).map(|(x, y)| (x - y) * (x - y)).sum();
    let (n, m) = (a.n as f64, a.m as f64);
    Ok(sum / (4.0 * n * n * m * m))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeight {
    pub layer: String,
    pub depth: u32,
    pub weight: f64,
}

/// Per-tap weights, in tap order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights(pub Vec<LayerWeight>);

impl LayerWeights {
    pub fn new(entries: Vec<LayerWeight>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::Invalid("layer weights need at least one tap".into()));
        }
        if entries.iter().any(|e| !(e.weight.is_finite() && e.weight >= 0.0)) {
            return Err(Error::Invalid("layer weights must be finite and non-negative".into()));
        }
        Ok(LayerWeights(entries))
    }

    pub fn entries(&self) -> &[LayerWeight] {
        &self.0
    }

    /// Rescaled to sum to 1.
    pub fn normalized(&self) -> Result<Self> {
        let total: f64 = self.0.iter().map(|e| e.weight).sum();
        if total <= 0.0 {
            return Err(Error::Invalid("layer weights sum to zero".into()));
        }
        Ok(self.scaled(1.0 / total))
    }

    pub fn scaled(&self, factor: f64) -> Self {
        LayerWeights(
            self.0
                .iter()
                .map(|e| LayerWeight {
                    weight: e.weight * factor,
                    ..e.clone()
                })
                .collect(),
        )
    }
}

/// Weight proportional to tap depth, normalized to sum 1.
pub fn default_weights(taps: &[StyleTap]) -> Result<LayerWeights> {
    let entries = taps
        .iter()
        .map(|t| LayerWeight {
            layer: t.layer.clone(),
            depth: t.depth,
            weight: t.depth as f64,
        })
        .collect();
    LayerWeights::new(entries)?.normalized()
}

/// Named weight schedules accepted in configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum WeightSchedule {
    #[default]
    Depth,
    Uniform,
}

impl WeightSchedule {
    pub fn weights(self, taps: &[StyleTap]) -> Result<LayerWeights> {
        match self {
            WeightSchedule::Depth => default_weights(taps),
            WeightSchedule::Uniform => {
                let entries = taps
                    .iter()
                    .map(|t| LayerWeight {
                        layer: t.layer.clone(),
                        depth: t.depth,
                        weight: 1.0,
                    })
                    .collect();
                LayerWeights::new(entries)?.normalized()
            }
        }
    }
}

/// `Σ_l w_l · layer_distance(a_l, b_l)` over matching taps.
pub fn style_distance(a: &[GramMatrix], b: &[GramMatrix], weights: &LayerWeights) -> Result<f64> {
    if a.len() != b.len() || a.len() != weights.0.len() {
        return Err(Error::DimMismatch(format!(
            "tap sets differ: {} vs {} Gram matrices, {} weights",
            a.len(),
            b.len(),
            weights.0.len()
        )));
    }
    let mut total = 0.0;
    for ((ga, gb), w) in a.iter().zip(b).zip(&weights.0) {
        if ga.layer != w.layer {
            return Err(Error::DimMismatch(format!(
                "weight for layer {} applied to {}",
                w.layer, ga.layer
            )));
        }
        total += w.weight * layer_distance(ga, gb)?;
    }
    Ok(total)
}

/// Style distance between two photos given their per-tap feature maps.
pub fn style_distance_maps(a: &[FeatureMap], b: &[FeatureMap], weights: &LayerWeights) -> Result<f64> {
    style_distance(&grams(a), &grams(b), weights)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProfileTap {
    pub layer: String,
    pub depth: u32,
    pub n_l: usize,
    pub m_l: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProfileRef {
    pub id: String,
    /// One per tap, in tap order.
    pub grams: Vec<GramMatrix>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StyleProfile {
    pub account_id: String,
    pub k: usize,
    pub taps: Vec<ProfileTap>,
    pub refs: Vec<ProfileRef>,
    /// Fingerprint of the backbone that produced the maps, when known.
    pub backbone: Option<String>,
}

impl StyleProfile {
    /// Profile from precomputed reference feature maps (one list per photo).
    pub fn from_maps(
        account_id: impl Into<String>,
        refs: Vec<(String, Vec<FeatureMap>)>,
        k: usize,
        weights: Option<&LayerWeights>,
    ) -> Result<Self> {
        let account_id = account_id.into();
        let Some((_, first)) = refs.first() else {
            return Err(Error::Insufficient(format!(
                "account {account_id}: empty reference set"
            )));
        };
        if k == 0 || k > refs.len() {
            return Err(Error::Invalid(format!(
                "k = {k} out of range for {} reference photos",
                refs.len()
            )));
        }
        let weights = match weights {
            Some(w) => w.clone(),
            None => default_weights(
                &first
                    .iter()
                    .map(|m| StyleTap {
                        layer: m.layer.clone(),
                        depth: m.depth,
                    })
                    .collect::<Vec<_>>(),
            )?,
        };
        if weights.0.len() != first.len() || weights.0.iter().zip(first).any(|(w, m)| w.layer != m.layer) {
            return Err(Error::DimMismatch("weights do not match the reference tap set".into()));
        }
        let taps: Vec<ProfileTap> = first
            .iter()
            .zip(&weights.0)
            .map(|(m, w)| ProfileTap {
                layer: m.layer.clone(),
                depth: m.depth,
                n_l: m.channels,
                m_l: m.positions,
                weight: w.weight,
            })
            .collect();
        for (id, maps) in &refs {
            let same = maps.len() == taps.len()
                && maps
                    .iter()
                    .zip(&taps)
                    .all(|(m, t)| m.layer == t.layer && m.channels == t.n_l && m.positions == t.m_l);
            if !same {
                return Err(Error::DimMismatch(format!("reference {id} has a different tap set")));
            }
        }
        let refs = refs
            .into_par_iter()
            .map(|(id, maps)| ProfileRef {
                id,
                grams: grams(&maps),
            })
            .collect();
        Ok(StyleProfile {
            account_id,
            k,
            taps,
            refs,
            backbone: None,
        })
    }

    pub fn n_ref(&self) -> usize {
        self.refs.len()
    }

    pub fn weights(&self) -> LayerWeights {
        LayerWeights(
            self.taps
                .iter()
                .map(|t| LayerWeight {
                    layer: t.layer.clone(),
                    depth: t.depth,
                    weight: t.weight,
                })
                .collect(),
        )
    }

    /// Same references with every tap weight multiplied by `factor`.
    pub fn with_scaled_weights(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for t in &mut out.taps {
            t.weight *= factor;
        }
        out
    }

    pub fn with_k(&self, k: usize) -> Result<Self> {
        if k == 0 || k > self.refs.len() {
            return Err(Error::Invalid(format!(
                "k = {k} out of range for {} reference photos",
                self.refs.len()
            )));
        }
        Ok(StyleProfile { k, ..self.clone() })
    }

    /// Distance from a photo to each reference, in reference order.
    pub fn reference_distances(&self, photo: &[GramMatrix]) -> Result<Vec<f64>> {
        let weights = self.weights();
        self.refs
            .iter()
            .map(|r| style_distance(photo, &r.grams, &weights))
            .collect()
    }

    fn sidecar_path(index: &Path) -> PathBuf {
        index.with_extension("bin")
    }

    /// Writes the JSON index at `path` and the Gram sidecar next to it
    /// (same stem, `.bin`).
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let index = ProfileIndex {
            account_id: self.account_id.clone(),
            k: self.k,
            taps: self.taps.clone(),
            refs: self.refs.iter().map(|r| r.id.clone()).collect(),
            backbone: self.backbone.clone(),
        };
        let mut bytes = Vec::new();
        for r in &self.refs {
            for g in &r.grams {
                for v in g.upper() {
                    bytes.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        let sidecar = Self::sidecar_path(path);
        fs::write(&sidecar, bytes).map_err(|e| Error::io(&sidecar, e))?;
        let json = serde_json::to_string_pretty(&index).expect("profile index serializes");
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bad = |p: &Path, message: String| Error::Artifact {
            path: p.to_path_buf(),
            message,
        };
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let index: ProfileIndex = serde_json::from_str(&text).map_err(|e| bad(path, e.to_string()))?;
        if index.taps.is_empty() || index.refs.is_empty() || index.k == 0 || index.k > index.refs.len() {
            return Err(bad(
                path,
                "profile index has no taps, no references, or k out of range".into(),
            ));
        }
        let sidecar = Self::sidecar_path(path);
        let bytes = fs::read(&sidecar).map_err(|e| Error::io(&sidecar, e))?;
        let per_ref: usize = index.taps.iter().map(|t| t.n_l * (t.n_l + 1) / 2).sum();
        let expected = 4 * per_ref * index.refs.len();
        if bytes.len() != expected {
            return Err(bad(
                &sidecar,
                format!("expected {expected} bytes of Gram data, found {}", bytes.len()),
            ));
        }
        let mut floats = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4-byte chunk")) as f64);
        let mut refs = Vec::with_capacity(index.refs.len());
        for id in &index.refs {
            let mut grams = Vec::with_capacity(index.taps.len());
            for t in &index.taps {
                let upper: Vec<f64> = floats.by_ref().take(t.n_l * (t.n_l + 1) / 2).collect();
                grams.push(GramMatrix::from_upper(&t.layer, t.depth, t.n_l, t.m_l, &upper)?);
            }
            refs.push(ProfileRef { id: id.clone(), grams });
        }
        Ok(StyleProfile {
            account_id: index.account_id,
            k: index.k,
            taps: index.taps,
            refs,
            backbone: index.backbone,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct ProfileIndex {
    account_id: String,
    k: usize,
    taps: Vec<ProfileTap>,
    refs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    backbone: Option<String>,
}

/// Extracts style maps for `(id, path)` reference photos and builds a
/// profile stamped with the backbone fingerprint.
pub fn build_profile<P: AsRef<Path> + Sync>(
    extractor: &FeatureExtractor,
    account_id: &str,
    references: &[(String, P)],
    k: usize,
    weights: Option<&LayerWeights>,
) -> Result<StyleProfile> {
    if references.is_empty() {
        return Err(Error::Insufficient(format!(
            "account {account_id}: empty reference set"
        )));
    }
    if k == 0 || k > references.len() {
        return Err(Error::Invalid(format!(
            "k = {k} out of range for {} reference photos",
            references.len()
        )));
    }
    let paths: Vec<&Path> = references.iter().map(|(_, p)| p.as_ref()).collect();
    let maps = extractor.style_maps(&paths)?;
    let refs = references.iter().map(|(id, _)| id.clone()).zip(maps).collect();
    let default;
    let weights = match weights {
        Some(w) => w,
        None => {
            default = default_weights(&extractor.backbone().manifest().style_taps)?;
            &default
        }
    };
    let mut profile = StyleProfile::from_maps(account_id, refs, k, Some(weights))?;
    profile.backbone = Some(extractor.backbone().fingerprint().to_string());
    Ok(profile)
}

/// Sum of the `profile.k` smallest per-reference distances.
pub fn profile_distance(profile: &StyleProfile, photo: &[GramMatrix]) -> Result<f64> {
    let mut d = profile.reference_distances(photo)?;
    d.sort_by(f64::total_cmp);
    Ok(d[..profile.k].iter().sum())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributionResult {
    pub predicted_account: String,
    pub scores: BTreeMap<String, f64>,
}

/// Account whose profile is closest; ties go to the smaller account id.
pub fn attribute(photo: &[GramMatrix], profiles: &[StyleProfile]) -> Result<AttributionResult> {
    if profiles.len() < 2 {
        return Err(Error::Insufficient(format!(
            "attribution needs at least 2 profiles, got {}",
            profiles.len()
        )));
    }
    let first = &profiles[0];
    for p in &profiles[1..] {
        let same_taps = p.taps.len() == first.taps.len()
            && p.taps
                .iter()
                .zip(&first.taps)
                .all(|(a, b)| a.layer == b.layer && a.n_l == b.n_l);
        if !same_taps || p.k != first.k {
            return Err(Error::DimMismatch(format!(
                "profiles {} and {} differ in taps or k",
                first.account_id, p.account_id
            )));
        }
    }
    let totals: Vec<f64> = profiles
        .par_iter()
        .map(|p| profile_distance(p, photo))
        .collect::<Result<_>>()?;
    let mut scores = BTreeMap::new();
    for (p, &d) in profiles.iter().zip(&totals) {
        if scores.insert(p.account_id.clone(), d).is_some() {
            return Err(Error::Invalid(format!(
                "duplicate profile for account {}",
                p.account_id
            )));
        }
    }
    let best = profiles
        .iter()
        .zip(&totals)
        .min_by(|(pa, da), (pb, db)| match da.total_cmp(db) {
            Ordering::Equal => pa.account_id.cmp(&pb.account_id),
            o => o,
        })
        .expect("at least two profiles");
    Ok(AttributionResult {
        predicted_account: best.0.account_id.clone(),
        scores,
    })
}
