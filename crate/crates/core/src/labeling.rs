//! Engagement labels from like-count tertiles of a post's temporal cohort.
//!
//! A post's cohort is every post of the same account published within
//! `window_days` days of it (either side, inclusive, the post itself
//! included). With nearest-rank tertiles `t1 <= t2` of the cohort's likes, a
//! post is `Low` if its likes are `<= t1`, `High` if `> t2`, and `Average`
//! otherwise. Cohorts smaller than `min_cohort` are left `Unlabeled`.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{AccountCorpus, Post};
use crate::error::{Error, Result};

pub const DEFAULT_WINDOW_DAYS: u32 = 30;
pub const DEFAULT_MIN_COHORT: usize = 6;

const SECONDS_PER_DAY: i64 = 86_400;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EngagementLabel {
    High,
    Low,
    Average,
    Unlabeled,
}

impl EngagementLabel {
    /// Only `High` and `Low` posts are used for engagement training.
    pub fn is_binary(self) -> bool {
        matches!(self, EngagementLabel::High | EngagementLabel::Low)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CohortStats {
    pub cohort_size: usize,
    pub t1: u64,
    pub t2: u64,
    pub window_days: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledPost {
    pub post: Post,
    pub label: EngagementLabel,
    pub stats: CohortStats,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub high: usize,
    pub low: usize,
    pub average: usize,
    pub unlabeled: usize,
}

impl LabelCounts {
    pub fn add(&mut self, label: EngagementLabel) {
        match label {
            EngagementLabel::High => self.high += 1,
            EngagementLabel::Low => self.low += 1,
            EngagementLabel::Average => self.average += 1,
            EngagementLabel::Unlabeled => self.unlabeled += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.high + self.low + self.average + self.unlabeled
    }
}

impl std::fmt::Display for LabelCounts {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "High: {} Low: {} Average: {} Unlabeled: {}",
            self.high, self.low, self.average, self.unlabeled
        )
    }
}

/// Index range of `corpus.posts()` within `window_days` of position `idx`.
fn window_range(corpus: &AccountCorpus, idx: usize, window_days: u32) -> std::ops::Range<usize> {
    let posts = corpus.posts();
    let center = posts[idx].timestamp.timestamp();
    let span = window_days as i64 * SECONDS_PER_DAY;
    let lo = posts.partition_point(|p| p.timestamp.timestamp() < center - span);
    let hi = posts.partition_point(|p| p.timestamp.timestamp() <= center + span);
    lo..hi
}

fn position(corpus: &AccountCorpus, post: &Post) -> Result<usize> {
    corpus
        .posts()
        .iter()
        .position(|p| p.post_id == post.post_id)
        .ok_or_else(|| {
            Error::Invalid(format!(
                "post {} is not in the corpus of {}",
                post.post_id,
                corpus.account_id()
            ))
        })
}

/// All posts within `window_days` of `post`, including `post`.
pub fn cohort<'a>(corpus: &'a AccountCorpus, post: &Post, window_days: u32) -> Result<&'a [Post]> {
    let idx = position(corpus, post)?;
    Ok(&corpus.posts()[window_range(corpus, idx, window_days)])
}

/// Nearest-rank tertiles: with `s` sorted ascending and `n = s.len()`,
/// `t1 = s[ceil(n/3) - 1]` and `t2 = s[ceil(2n/3) - 1]`.
pub fn tertiles(likes: &[u64]) -> Result<(u64, u64)> {
    if likes.is_empty() {
        return Err(Error::Invalid("tertiles of an empty list".into()));
    }
    let mut sorted = likes.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    let r1 = n.div_ceil(3);
    let r2 = (2 * n).div_ceil(3);
    Ok((sorted[r1 - 1], sorted[r2 - 1]))
}

/// The labeling rule on precomputed thresholds.
pub fn classify(like_count: u64, stats: &CohortStats, min_cohort: usize) -> EngagementLabel {
    if stats.cohort_size < min_cohort {
        EngagementLabel::Unlabeled
    } else if like_count <= stats.t1 {
        EngagementLabel::Low
    } else if like_count > stats.t2 {
        EngagementLabel::High
    } else {
        EngagementLabel::Average
    }
}

fn label_at(corpus: &AccountCorpus, idx: usize, window_days: u32, min_cohort: usize) -> LabeledPost {
    let posts = &corpus.posts()[window_range(corpus, idx, window_days)];
    let likes: Vec<u64> = posts.iter().map(|p| p.like_count).collect();
    // the window always contains the post itself
    let (t1, t2) = tertiles(&likes).expect("cohort is never empty");
    let stats = CohortStats {
        cohort_size: posts.len(),
        t1,
        t2,
        window_days,
    };
    let post = corpus.posts()[idx].clone();
    LabeledPost {
        label: classify(post.like_count, &stats, min_cohort),
        post,
        stats,
    }
}

pub fn label_post(corpus: &AccountCorpus, post: &Post, window_days: u32, min_cohort: usize) -> Result<LabeledPost> {
    let idx = position(corpus, post)?;
    Ok(label_at(corpus, idx, window_days, min_cohort))
}

/// Labels every post of the corpus, in corpus order.
pub fn label_corpus(corpus: &AccountCorpus, window_days: u32, min_cohort: usize) -> (Vec<LabeledPost>, LabelCounts) {
    let labeled: Vec<LabeledPost> = (0..corpus.len())
        .map(|idx| label_at(corpus, idx, window_days, min_cohort))
        .collect();
    let mut counts = LabelCounts::default();
    for lp in &labeled {
        counts.add(lp.label);
    }
    (labeled, counts)
}

#[derive(Serialize, Deserialize)]
struct CohortRecord {
    size: usize,
    t1: u64,
    t2: u64,
}

#[derive(Serialize, Deserialize)]
struct LabeledRecord {
    #[serde(flatten)]
    post: Post,
    label: EngagementLabel,
    cohort: CohortRecord,
}

/// Writes the labeled dataset as JSON lines: the manifest keys plus
/// `"label"` and `"cohort": {"size", "t1", "t2"}`.
pub fn write_labeled(path: impl AsRef<Path>, labeled: &[LabeledPost]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for lp in labeled {
        let record = LabeledRecord {
            post: lp.post.clone(),
            label: lp.label,
            cohort: CohortRecord {
                size: lp.stats.cohort_size,
                t1: lp.stats.t1,
                t2: lp.stats.t2,
            },
        };
        let line = serde_json::to_string(&record).map_err(|e| Error::Invalid(e.to_string()))?;
        writeln!(out, "{line}").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

/// Reads a labeled dataset back as `(post, label)` pairs. Relative image
/// paths resolve against the file's directory.
pub fn read_labeled(path: impl AsRef<Path>) -> Result<Vec<(Post, EngagementLabel)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    let mut out = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        if raw.trim().is_empty() {
            continue;
        }
        let record: LabeledRecord = serde_json::from_str(raw).map_err(|e| Error::Manifest {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        let mut post = record.post;
        if post.image_path.is_relative() {
            post.image_path = base.join(&post.image_path);
        }
        out.push((post, record.label));
    }
    Ok(out)
}
