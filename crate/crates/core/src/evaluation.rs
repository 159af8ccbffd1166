//! Evaluation protocols: date-split engagement evaluation scored by macro
//! F1, and style attribution across accounts summarized as a confusion
//! matrix.

use std::collections::HashMap;
use std::fmt::Write as _;

use chrono::{DateTime, Utc};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{split_by_date, AccountCorpus, Post};
use crate::engagement::{self, Class, HeadParams, Real, TrainConfig};
use crate::error::{Error, Result};
use crate::features::{Embedding, FeatureExtractor};
use crate::labeling::{label_corpus, EngagementLabel, LabelCounts};
use crate::style::{self, LayerWeights, StyleProfile};

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    if tp == 0 {
        return 0.0;
    }
    let precision = tp as f64 / (tp + fp) as f64;
    let recall = tp as f64 / (tp + fn_) as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Unweighted mean of the High and Low F1 scores. A class with no true
/// positives scores 0.
pub fn macro_f1(preds: &[Class], truths: &[Class]) -> Result<f64> {
    if preds.len() != truths.len() {
        return Err(Error::Invalid(format!(
            "{} predictions for {} labels",
            preds.len(),
            truths.len()
        )));
    }
    if preds.is_empty() {
        return Err(Error::Insufficient("macro F1 of an empty label set".into()));
    }
    let per_class = |c: Class| {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (&p, &t) in preds.iter().zip(truths) {
            match (p == c, t == c) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        f1(tp, fp, fn_)
    };
    Ok((per_class(Class::High) + per_class(Class::Low)) / 2.0)
}

/// Rows are true labels, columns predicted labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub labels: Vec<String>,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<String>) -> Self {
        let n = labels.len();
        ConfusionMatrix {
            labels,
            counts: vec![vec![0; n]; n],
        }
    }

    fn index(&self, label: &str) -> Result<usize> {
        self.labels
            .iter()
            .position(|l| l == label)
            .ok_or_else(|| Error::Invalid(format!("unknown confusion label {label}")))
    }

    pub fn record(&mut self, truth: &str, predicted: &str) -> Result<()> {
        let (i, j) = (self.index(truth)?, self.index(predicted)?);
        self.counts[i][j] += 1;
        Ok(())
    }

    pub fn row_total(&self, i: usize) -> u64 {
        self.counts[i].iter().sum()
    }

    /// Counts as percentages of each row; empty rows stay all zero.
    pub fn row_percent(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let total: u64 = row.iter().sum();
                row.iter()
                    .map(|&c| {
                        if total == 0 {
                            0.0
                        } else {
                            100.0 * c as f64 / total as f64
                        }
                    })
                    .collect()
            })
            .collect()
    }

    pub fn diagonal_percent(&self) -> Vec<f64> {
        self.row_percent().iter().enumerate().map(|(i, r)| r[i]).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for l in &self.labels {
            out.push(',');
            out.push_str(&csv_field(l));
        }
        out.push('\n');
        for (l, row) in self.labels.iter().zip(&self.counts) {
            out.push_str(&csv_field(l));
            for c in row {
                write!(out, ",{c}").expect("write to string");
            }
            out.push('\n');
        }
        out
    }

    pub fn percent_json(&self) -> serde_json::Value {
        serde_json::json!({
            "labels": self.labels,
            "counts": self.counts,
            "row_percent": self.row_percent(),
        })
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Label distribution of a binary dataset.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub high: usize,
    pub low: usize,
}

impl ClassCounts {
    pub fn of(labels: &[Class]) -> Self {
        let high = labels.iter().filter(|&&c| c == Class::High).count();
        ClassCounts {
            high,
            low: labels.len() - high,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EngagementEval {
    pub macro_f1: f64,
    pub truth: ClassCounts,
    pub predicted: ClassCounts,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

/// Scores a head on a labeled test set. A single-class test set is
/// reported with a warning rather than rejected.
pub fn engagement_eval<T: Real>(head: &HeadParams<T>, test: &[(Embedding, Class)]) -> Result<EngagementEval> {
    if test.is_empty() {
        return Err(Error::Insufficient("engagement test set is empty".into()));
    }
    let preds = test
        .par_iter()
        .map(|(e, _)| engagement::predict(head, e).map(|(c, _)| c))
        .collect::<Result<Vec<_>>>()?;
    let truths: Vec<Class> = test.iter().map(|(_, c)| *c).collect();
    let truth = ClassCounts::of(&truths);
    let warning = (truth.high == 0 || truth.low == 0).then(|| {
        let msg = format!("test set has a single class ({} High, {} Low)", truth.high, truth.low);
        log::warn!("{msg}");
        msg
    });
    Ok(EngagementEval {
        macro_f1: macro_f1(&preds, &truths)?,
        truth,
        predicted: ClassCounts::of(&preds),
        warning,
    })
}

/// One account's date-split engagement result.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccountEngagement {
    pub account_id: String,
    #[serde(with = "crate::corpus::timestamp_format")]
    pub cutoff: DateTime<Utc>,
    pub label_counts: LabelCounts,
    pub train: ClassCounts,
    pub final_train_macro_f1: f64,
    pub test: EngagementEval,
}

fn binary_posts<'a>(labeled: impl Iterator<Item = (&'a Post, EngagementLabel)>) -> Vec<(&'a Post, Class)> {
    labeled
        .filter_map(|(p, l)| Class::from_label(l).map(|c| (p, c)))
        .collect()
}

/// Labels the whole corpus, trains a head on High/Low posts before `cutoff`
/// and evaluates it on High/Low posts from `cutoff` on.
pub fn date_split_eval(
    corpus: &AccountCorpus,
    extractor: &FeatureExtractor,
    cutoff: DateTime<Utc>,
    window_days: u32,
    min_cohort: usize,
    train_cfg: &TrainConfig,
) -> Result<AccountEngagement> {
    let (labeled, label_counts) = label_corpus(corpus, window_days, min_cohort);
    let (before, _) = split_by_date(corpus, cutoff);
    let split_at = before.len();
    let train_posts = binary_posts(labeled[..split_at].iter().map(|l| (&l.post, l.label)));
    let test_posts = binary_posts(labeled[split_at..].iter().map(|l| (&l.post, l.label)));
    let account = corpus.account_id();
    if test_posts.is_empty() {
        return Err(Error::Insufficient(format!(
            "account {account}: no High/Low posts on or after the cutoff"
        )));
    }

    let embed = |posts: &[(&Post, Class)]| -> Result<Vec<(Embedding, Class)>> {
        let paths: Vec<_> = posts.iter().map(|(p, _)| p.image_path.as_path()).collect();
        let embeddings = extractor.embeddings(&paths)?;
        Ok(embeddings.into_iter().zip(posts.iter().map(|(_, c)| *c)).collect())
    };
    let train_set = embed(&train_posts)?;
    let trained = engagement::train(&train_set, train_cfg).map_err(|e| match e {
        Error::Insufficient(m) => Error::Insufficient(format!("account {account}: {m}")),
        other => other,
    })?;
    let test_set = embed(&test_posts)?;
    Ok(AccountEngagement {
        account_id: account.to_string(),
        cutoff,
        label_counts,
        train: ClassCounts::of(&train_set.iter().map(|(_, c)| *c).collect::<Vec<_>>()),
        final_train_macro_f1: trained.history.last().map_or(0.0, |h| h.macro_f1),
        test: engagement_eval(&trained.head, &test_set)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributedPhoto {
    pub post_id: String,
    pub true_account: String,
    pub predicted_account: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AttributionOutcome {
    pub matrix: ConfusionMatrix,
    pub photos: Vec<AttributedPhoto>,
}

/// Per account, the `n_test` newest posts are test photos and the next
/// `n_ref` newest build the profile. Every test photo is attributed
/// against all profiles.
pub fn attribution_experiment(
    corpora: &[AccountCorpus],
    extractor: &FeatureExtractor,
    n_ref: usize,
    n_test: usize,
    k: usize,
    weights: Option<&LayerWeights>,
) -> Result<AttributionOutcome> {
    if corpora.len() < 2 {
        return Err(Error::Insufficient(format!(
            "attribution needs at least 2 accounts, got {}",
            corpora.len()
        )));
    }
    if n_ref == 0 || n_test == 0 {
        return Err(Error::Invalid("n_ref and n_test must be positive".into()));
    }
    let mut seen = HashMap::new();
    for c in corpora {
        if seen.insert(c.account_id(), ()).is_some() {
            return Err(Error::Invalid(format!("account {} appears twice", c.account_id())));
        }
        let need = n_ref + n_test;
        if c.len() < need {
            return Err(Error::Insufficient(format!(
                "account {} has {} posts, needs {need} (short by {})",
                c.account_id(),
                c.len(),
                need - c.len()
            )));
        }
    }

    let mut profiles = Vec::with_capacity(corpora.len());
    let mut tests = Vec::new();
    for c in corpora {
        let recent: Vec<&Post> = c.most_recent(n_test + n_ref).collect();
        let references: Vec<(String, &std::path::Path)> = recent[n_test..]
            .iter()
            .map(|p| (p.post_id.clone(), p.image_path.as_path()))
            .collect();
        profiles.push(style::build_profile(
            extractor,
            c.account_id(),
            &references,
            k,
            weights,
        )?);
        tests.extend(recent[..n_test].iter().map(|p| (c.account_id(), *p)));
    }

    let paths: Vec<_> = tests.iter().map(|(_, p)| p.image_path.as_path()).collect();
    let maps = extractor.style_maps(&paths)?;
    let predictions = maps
        .par_iter()
        .map(|m| style::attribute(&style::grams(m), &profiles).map(|r| r.predicted_account))
        .collect::<Result<Vec<_>>>()?;

    let mut matrix = ConfusionMatrix::new(corpora.iter().map(|c| c.account_id().to_string()).collect());
    let mut photos = Vec::with_capacity(tests.len());
    for ((account, post), predicted) in tests.iter().zip(predictions) {
        matrix.record(account, &predicted)?;
        photos.push(AttributedPhoto {
            post_id: post.post_id.clone(),
            true_account: account.to_string(),
            predicted_account: predicted,
        });
    }
    Ok(AttributionOutcome { matrix, photos })
}

/// Profiles used by [`attribution_experiment`], exposed for callers that
/// want to persist them.
pub fn reference_profile(
    corpus: &AccountCorpus,
    extractor: &FeatureExtractor,
    n_ref: usize,
    skip: usize,
    k: usize,
    weights: Option<&LayerWeights>,
) -> Result<StyleProfile> {
    let refs: Vec<(String, &std::path::Path)> = corpus
        .most_recent(skip + n_ref)
        .skip(skip)
        .map(|p| (p.post_id.clone(), p.image_path.as_path()))
        .collect();
    if refs.len() < n_ref {
        return Err(Error::Insufficient(format!(
            "account {} has {} posts, needs {} (short by {})",
            corpus.account_id(),
            corpus.len(),
            skip + n_ref,
            skip + n_ref - corpus.len()
        )));
    }
    style::build_profile(extractor, corpus.account_id(), &refs, k, weights)
}

/// Concatenates accounts under `merged_id`; post ids become
/// `<source account>/<post id>`.
pub fn merge_accounts(corpora: &[&AccountCorpus], merged_id: &str) -> Result<AccountCorpus> {
    if corpora.is_empty() {
        return Err(Error::Invalid(format!("merged account {merged_id} has no sources")));
    }
    let posts = corpora
        .iter()
        .flat_map(|c| {
            c.posts().iter().map(|p| Post {
                post_id: format!("{}/{}", c.account_id(), p.post_id),
                account_id: merged_id.to_string(),
                ..p.clone()
            })
        })
        .collect();
    AccountCorpus::new(merged_id, posts)
}
