use std::fs;
use std::path::{Path, PathBuf};

use salienteye::engagement::TrainConfig;
use salienteye::labeling::{DEFAULT_MIN_COHORT, DEFAULT_WINDOW_DAYS};
use salienteye::ranking::{RankMode, DEFAULT_ALPHA};
use salienteye::style::{WeightSchedule, DEFAULT_K, DEFAULT_N_REF};
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr0: f64,
    pub momentum: f64,
    pub decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub shuffle: bool,
}

impl Default for TrainSection {
    fn default() -> Self {
        let d = TrainConfig::default();
        TrainSection {
            lr0: d.lr0,
            momentum: d.momentum,
            decay: d.decay,
            epochs: d.epochs,
            batch_size: d.batch_size,
            shuffle: d.shuffle,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StyleSection {
    pub k: usize,
    pub n_ref: usize,
    pub weights: WeightSchedule,
}

impl Default for StyleSection {
    fn default() -> Self {
        StyleSection {
            k: DEFAULT_K,
            n_ref: DEFAULT_N_REF,
            weights: WeightSchedule::Depth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RankingSection {
    pub mode: RankMode,
    pub alpha: f64,
}

impl Default for RankingSection {
    fn default() -> Self {
        RankingSection {
            mode: RankMode::Combined,
            alpha: DEFAULT_ALPHA,
        }
    }
}

/// One evaluated account; several manifests are merged into one account.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalAccount {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub manifests: Vec<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub accounts: Vec<EvalAccount>,
    /// Attribution test photos per account.
    pub n_test: usize,
    /// Date-split engagement evaluation runs when set.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cutoff: Option<String>,
}

impl Default for EvalSection {
    fn default() -> Self {
        EvalSection {
            accounts: Vec::new(),
            n_test: DEFAULT_N_REF,
            cutoff: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub backbone: Option<PathBuf>,
    pub window_days: u32,
    pub min_cohort: usize,
    pub train: TrainSection,
    pub style: StyleSection,
    pub ranking: RankingSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    pub seed: u64,
    pub eval: EvalSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            backbone: None,
            window_days: DEFAULT_WINDOW_DAYS,
            min_cohort: DEFAULT_MIN_COHORT,
            train: TrainSection::default(),
            style: StyleSection::default(),
            ranking: RankingSection::default(),
            cache_dir: None,
            seed: 0,
            eval: EvalSection::default(),
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, Failure> {
        let text = fs::read_to_string(path)
            .map_err(|e| Failure::input(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Failure::input(format!("invalid config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let Some(b) = &mut cfg.backbone {
            resolve(base, b);
        }
        if let Some(c) = &mut cfg.cache_dir {
            resolve(base, c);
        }
        for acct in &mut cfg.eval.accounts {
            for m in &mut acct.manifests {
                resolve(base, m);
            }
        }
        Ok(cfg)
    }

    pub fn train_config(&self) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            lr0: t.lr0,
            momentum: t.momentum,
            decay: t.decay,
            epochs: t.epochs,
            batch_size: t.batch_size,
            seed: self.seed,
            shuffle: t.shuffle,
        }
    }

    /// The effective configuration written into output files. The cache
    /// directory is left out so cached and uncached runs match.
    pub fn echo(&self) -> serde_json::Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("cache_dir");
        }
        v
    }
}
