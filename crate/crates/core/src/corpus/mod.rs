//! Account exports: the JSON-lines post manifest, timestamp ordering and
//! date-based splits. Image decoding and preprocessing live in [`image`].

pub(crate) mod image;

pub use self::image::{load_image, preprocess, ChannelOrder, ImageTensor, PreprocessSpec, ValueRange};

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SubsecRound, Utc};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

/// One photo posted by an account.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Post {
    pub post_id: String,
    pub account_id: String,
    pub image_path: PathBuf,
    #[serde(with = "timestamp_format")]
    pub timestamp: DateTime<Utc>,
    pub like_count: u64,
    /// Keys of the manifest line this crate does not interpret.
    #[serde(flatten)]
    pub extra: Map<String, Value>,
}

impl Post {
    pub fn new(
        post_id: impl Into<String>,
        account_id: impl Into<String>,
        image_path: impl Into<PathBuf>,
        timestamp: DateTime<Utc>,
        like_count: u64,
    ) -> Self {
        Post {
            post_id: post_id.into(),
            account_id: account_id.into(),
            image_path: image_path.into(),
            timestamp: timestamp.trunc_subsecs(0),
            like_count,
            extra: Map::new(),
        }
    }
}

pub(crate) mod timestamp_format {
    use chrono::{DateTime, SecondsFormat, Utc};
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(ts: &DateTime<Utc>, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&ts.to_rfc3339_opts(SecondsFormat::Secs, true))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DateTime<Utc>, D::Error> {
        let raw = String::deserialize(d)?;
        super::parse_timestamp(&raw).map_err(serde::de::Error::custom)
    }
}

/// Parses an ISO-8601 timestamp with an explicit offset, truncated to whole seconds.
pub fn parse_timestamp(raw: &str) -> std::result::Result<DateTime<Utc>, String> {
    DateTime::parse_from_rfc3339(raw)
        .map(|ts| ts.with_timezone(&Utc).trunc_subsecs(0))
        .map_err(|e| format!("unparseable timestamp {raw:?}: {e}"))
}

/// The full posting history of one account, ordered by timestamp.
#[derive(Debug, Clone, PartialEq)]
pub struct AccountCorpus {
    account_id: String,
    posts: Vec<Post>,
}

impl AccountCorpus {
    /// Builds a corpus, validating account ownership and id uniqueness, and
    /// sorting by timestamp (stable, so equal timestamps keep input order).
    pub fn new(account_id: impl Into<String>, mut posts: Vec<Post>) -> Result<Self> {
        let account_id = account_id.into();
        let mut seen = HashSet::with_capacity(posts.len());
        for post in &posts {
            if post.account_id != account_id {
                return Err(Error::Invalid(format!(
                    "post {} belongs to account {:?}, expected {:?}",
                    post.post_id, post.account_id, account_id
                )));
            }
            if !seen.insert(post.post_id.as_str()) {
                return Err(Error::Invalid(format!("duplicate post_id {:?}", post.post_id)));
            }
        }
        posts.sort_by_key(|p| p.timestamp);
        Ok(AccountCorpus { account_id, posts })
    }

    pub fn empty(account_id: impl Into<String>) -> Self {
        AccountCorpus {
            account_id: account_id.into(),
            posts: Vec::new(),
        }
    }

    pub fn account_id(&self) -> &str {
        &self.account_id
    }

    pub fn posts(&self) -> &[Post] {
        &self.posts
    }

    pub fn len(&self) -> usize {
        self.posts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posts.is_empty()
    }

    pub fn get(&self, post_id: &str) -> Option<&Post> {
        self.posts.iter().find(|p| p.post_id == post_id)
    }

    /// Inserts a post, keeping timestamp order. Later insertions sort after
    /// existing posts with the same timestamp.
    pub fn insert(&mut self, post: Post) -> Result<()> {
        if post.account_id != self.account_id {
            return Err(Error::Invalid(format!(
                "post {} belongs to account {:?}, expected {:?}",
                post.post_id, post.account_id, self.account_id
            )));
        }
        if self.get(&post.post_id).is_some() {
            return Err(Error::Invalid(format!("duplicate post_id {:?}", post.post_id)));
        }
        let at = self.posts.partition_point(|p| p.timestamp <= post.timestamp);
        self.posts.insert(at, post);
        Ok(())
    }

    /// The `n` most recent posts, newest first.
    pub fn most_recent(&self, n: usize) -> impl Iterator<Item = &Post> {
        self.posts.iter().rev().take(n)
    }

    pub fn into_posts(self) -> Vec<Post> {
        self.posts
    }
}

/// Loads and validates a JSON-lines manifest. Relative image paths are
/// resolved against the manifest's directory.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<AccountCorpus> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or_else(|| Path::new(""));
    parse_manifest(&text, base, path)
}

fn parse_manifest(text: &str, base: &Path, path: &Path) -> Result<AccountCorpus> {
    let now = Utc::now();
    let mut posts = Vec::new();
    let mut seen = HashSet::new();
    let mut account: Option<String> = None;

    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Manifest {
            path: path.to_path_buf(),
            line,
            message,
        };
        let post = parse_line(raw, base).map_err(err)?;
        match &account {
            None => account = Some(post.account_id.clone()),
            Some(a) if *a != post.account_id => {
                return Err(err(format!(
                    "multiple account_id values ({a:?} and {:?})",
                    post.account_id
                )))
            }
            Some(_) => {}
        }
        if !seen.insert(post.post_id.clone()) {
            return Err(err(format!("duplicate post_id {:?}", post.post_id)));
        }
        if post.timestamp > now {
            log::warn!(
                "{}:{line}: post {} is dated in the future ({})",
                path.display(),
                post.post_id,
                post.timestamp
            );
        }
        posts.push(post);
    }

    AccountCorpus::new(account.unwrap_or_default(), posts)
}

fn parse_line(raw: &str, base: &Path) -> std::result::Result<Post, String> {
    let value: Value = serde_json::from_str(raw).map_err(|e| format!("malformed JSON: {e}"))?;
    let Value::Object(mut obj) = value else {
        return Err("expected a JSON object".into());
    };

    let mut take_str = |key: &str| -> std::result::Result<String, String> {
        match obj.remove(key) {
            Some(Value::String(s)) => Ok(s),
            Some(other) => Err(format!("field `{key}` must be a string, got {other}")),
            None => Err(format!("missing field `{key}`")),
        }
    };
    let post_id = take_str("post_id")?;
    let account_id = take_str("account_id")?;
    let image_path = take_str("image_path")?;
    let timestamp = parse_timestamp(&take_str("timestamp")?)?;

    let like_count = match obj.remove("like_count") {
        Some(Value::Number(n)) => match (n.as_u64(), n.as_i64()) {
            (Some(v), _) => v,
            (None, Some(v)) if v < 0 => return Err(format!("negative like_count {v}")),
            _ => return Err(format!("like_count must be a non-negative integer, got {n}")),
        },
        Some(other) => return Err(format!("like_count must be an integer, got {other}")),
        None => return Err("missing field `like_count`".into()),
    };

    let image_path = PathBuf::from(image_path);
    let image_path = if image_path.is_absolute() {
        image_path
    } else {
        base.join(image_path)
    };

    Ok(Post {
        post_id,
        account_id,
        image_path,
        timestamp,
        like_count,
        extra: obj,
    })
}

/// Splits a corpus into (before `cutoff`, at-or-after `cutoff`).
pub fn split_by_date(corpus: &AccountCorpus, cutoff: DateTime<Utc>) -> (AccountCorpus, AccountCorpus) {
    let at = corpus.posts.partition_point(|p| p.timestamp < cutoff);
    let (train, test) = corpus.posts.split_at(at);
    (
        AccountCorpus {
            account_id: corpus.account_id.clone(),
            posts: train.to_vec(),
        },
        AccountCorpus {
            account_id: corpus.account_id.clone(),
            posts: test.to_vec(),
        },
    )
}
