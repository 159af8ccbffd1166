//! Scoring and ranking of new photos by predicted engagement and style
//! proximity, plus the JSON and HTML reports.

use std::fmt::Write as _;
use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use base64::Engine as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engagement::HeadParams;
use crate::error::{Error, Result};
use crate::features::{FeatureExtractor, Want};
use crate::style::{self, StyleProfile};

pub const DEFAULT_ALPHA: f64 = 0.5;
const THUMBNAIL_SIZE: u32 = 160;

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id: String,
    pub path: Option<PathBuf>,
    pub p_high: f64,
    pub style_dist: f64,
    pub style_norm: f64,
}

impl Candidate {
    pub fn new(id: impl Into<String>, p_high: f64, style_dist: f64) -> Self {
        Candidate {
            id: id.into(),
            path: None,
            p_high,
            style_dist,
            style_norm: 0.0,
        }
    }
}

/// Min-max normalizes `style_dist` into `style_norm` across the batch.
pub fn normalize_style(candidates: &mut [Candidate]) {
    let lo = candidates.iter().map(|c| c.style_dist).fold(f64::INFINITY, f64::min);
    let hi = candidates
        .iter()
        .map(|c| c.style_dist)
        .fold(f64::NEG_INFINITY, f64::max);
    for c in candidates {
        c.style_norm = if hi > lo { (c.style_dist - lo) / (hi - lo) } else { 0.0 };
    }
}

/// Scores `(id, path)` photos against a head and a profile.
pub fn score_batch(
    head: &HeadParams<f32>,
    profile: &StyleProfile,
    extractor: &FeatureExtractor,
    photos: &[(String, PathBuf)],
) -> Result<Vec<Candidate>> {
    if photos.is_empty() {
        return Err(Error::Insufficient("no photos to score".into()));
    }
    let backbone = extractor.backbone();
    if let Some(fp) = &profile.backbone {
        if fp != backbone.fingerprint() {
            return Err(Error::Model(format!(
                "profile {} was built with a different backbone",
                profile.account_id
            )));
        }
    }
    head.check_dim(backbone.manifest().embedding_dim)?;

    let paths: Vec<&Path> = photos.iter().map(|(_, p)| p.as_path()).collect();
    let features = extractor.extract_paths(&paths, Want::BOTH)?;
    let mut candidates = photos
        .par_iter()
        .zip(features)
        .map(|((id, path), f)| {
            let embedding = f.embedding.expect("embedding requested");
            let pred = head.forward(&embedding)?;
            let style_dist = style::profile_distance(profile, &style::grams(&f.style))?;
            Ok(Candidate {
                path: Some(path.clone()),
                ..Candidate::new(id.clone(), pred.p_high, style_dist)
            })
        })
        .collect::<Result<Vec<_>>>()?;
    normalize_style(&mut candidates);
    Ok(candidates)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum RankMode {
    Engagement,
    Style,
    #[default]
    Combined,
    Pareto,
}

impl RankMode {
    pub const ALL: [RankMode; 4] = [
        RankMode::Engagement,
        RankMode::Style,
        RankMode::Combined,
        RankMode::Pareto,
    ];

    pub fn name(self) -> &'static str {
        match self {
            RankMode::Engagement => "engagement",
            RankMode::Style => "style",
            RankMode::Combined => "combined",
            RankMode::Pareto => "pareto",
        }
    }
}

impl FromStr for RankMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        RankMode::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::Invalid(format!(
                "unknown ranking mode `{s}` (engagement, style, combined, pareto)"
            ))
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ranked {
    pub candidate: Candidate,
    /// 1-based position.
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub mode: RankMode,
    pub alpha: f64,
    pub entries: Vec<Ranked>,
}

pub fn combined_score(c: &Candidate, alpha: f64) -> f64 {
    alpha * c.p_high + (1.0 - alpha) * (1.0 - c.style_norm)
}

/// Indices of candidates that no other candidate beats on both axes
/// (strictly higher `p_high` and strictly lower `style_dist`).
pub fn pareto_front(candidates: &[Candidate]) -> Vec<usize> {
    let mut by_p: Vec<usize> = (0..candidates.len()).collect();
    by_p.sort_by(|&a, &b| candidates[b].p_high.total_cmp(&candidates[a].p_high));
    // Sweep in descending p_high, tracking the smallest distance among
    // strictly higher p_high values.
    let mut keep = vec![false; candidates.len()];
    let mut best_above = f64::INFINITY;
    let mut i = 0;
    while i < by_p.len() {
        let p = candidates[by_p[i]].p_high;
        let mut j = i;
        let mut group_best = f64::INFINITY;
        while j < by_p.len() && candidates[by_p[j]].p_high == p {
            let d = candidates[by_p[j]].style_dist;
            keep[by_p[j]] = d <= best_above;
            group_best = group_best.min(d);
            j += 1;
        }
        best_above = best_above.min(group_best);
        i = j;
    }
    (0..candidates.len()).filter(|&k| keep[k]).collect()
}

pub fn rank(candidates: Vec<Candidate>, mode: RankMode, alpha: f64) -> Result<RankedList> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Invalid(format!("alpha {alpha} outside [0, 1]")));
    }
    if candidates.is_empty() {
        return Err(Error::Insufficient("no candidates to rank".into()));
    }
    let mut ordered = match mode {
        RankMode::Pareto => {
            let front = pareto_front(&candidates);
            let mut keep = vec![false; candidates.len()];
            front.iter().for_each(|&i| keep[i] = true);
            candidates
                .into_iter()
                .zip(keep)
                .filter_map(|(c, k)| k.then_some(c))
                .collect()
        }
        _ => candidates,
    };
    match mode {
        RankMode::Engagement | RankMode::Pareto => ordered.sort_by(|a, b| b.p_high.total_cmp(&a.p_high)),
        RankMode::Style => ordered.sort_by(|a, b| a.style_dist.total_cmp(&b.style_dist)),
        RankMode::Combined => ordered.sort_by(|a, b| combined_score(b, alpha).total_cmp(&combined_score(a, alpha))),
    }
    let entries = ordered
        .into_iter()
        .enumerate()
        .map(|(i, candidate)| Ranked { candidate, rank: i + 1 })
        .collect();
    Ok(RankedList { mode, alpha, entries })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportEntry {
    pub id: String,
    pub p_high: f64,
    pub style_dist: f64,
    pub style_norm: f64,
    pub rank: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub version: String,
    pub mode: RankMode,
    pub alpha: f64,
    #[serde(default)]
    pub config: serde_json::Value,
    pub candidates: Vec<ReportEntry>,
}

impl Report {
    pub fn new(ranked: &RankedList, config: serde_json::Value) -> Self {
        Report {
            version: env!("CARGO_PKG_VERSION").to_string(),
            mode: ranked.mode,
            alpha: ranked.alpha,
            config,
            candidates: ranked
                .entries
                .iter()
                .map(|r| ReportEntry {
                    id: r.candidate.id.clone(),
                    p_high: r.candidate.p_high,
                    style_dist: r.candidate.style_dist,
                    style_norm: r.candidate.style_norm,
                    rank: r.rank,
                })
                .collect(),
        }
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Artifact {
            path: path.to_path_buf(),
            message: e.to_string(),
        })
    }
}

/// Writes `report.json` and `report.html` into `out_dir`, returning their
/// paths.
pub fn emit_report(ranked: &RankedList, out_dir: &Path, config: serde_json::Value) -> Result<(PathBuf, PathBuf)> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let report = Report::new(ranked, config);
    let json_path = out_dir.join("report.json");
    let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
    json.push('\n');
    fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))?;
    let html_path = out_dir.join("report.html");
    fs::write(&html_path, render_html(ranked)).map_err(|e| Error::io(&html_path, e))?;
    Ok((json_path, html_path))
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for ch in s.chars() {
        match ch {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            c => out.push(c),
        }
    }
    out
}

fn thumbnail_data_uri(path: &Path) -> Option<String> {
    let img = image::open(path).ok()?;
    let thumb = img.thumbnail(THUMBNAIL_SIZE, THUMBNAIL_SIZE).to_rgb8();
    let mut png = Vec::new();
    thumb
        .write_to(&mut Cursor::new(&mut png), image::ImageFormat::Png)
        .ok()?;
    Some(format!(
        "data:image/png;base64,{}",
        base64::engine::general_purpose::STANDARD.encode(png)
    ))
}

pub fn render_html(ranked: &RankedList) -> String {
    let mut html = String::new();
    let mode = ranked.mode.name();
    html.push_str("<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n");
    writeln!(html, "<title>salienteye ranking ({mode})</title>").unwrap();
    html.push_str(
        "<style>\n\
         body{font-family:sans-serif;margin:1.5em;background:#fafafa}\n\
         .grid{display:flex;flex-wrap:wrap;gap:12px}\n\
         .card{background:#fff;border:1px solid #ddd;border-radius:6px;padding:8px;width:176px}\n\
         .card img{display:block;margin:0 auto;max-width:160px;max-height:160px}\n\
         .noimg{height:120px;display:flex;align-items:center;justify-content:center;color:#999}\n\
         .badge{display:inline-block;font-size:12px;padding:1px 5px;border-radius:3px;margin:2px 2px 0 0;background:#eee}\n\
         .rank{background:#333;color:#fff}\n\
         .id{font-size:12px;word-break:break-all;margin-top:4px}\n\
         </style>\n</head>\n<body>\n",
    );
    writeln!(
        html,
        "<h1>Ranking: {mode}</h1>\n<p>{} photos, alpha {}</p>\n<div class=\"grid\">",
        ranked.entries.len(),
        ranked.alpha
    )
    .unwrap();
    for r in &ranked.entries {
        let c = &r.candidate;
        html.push_str("<div class=\"card\">\n");
        match c.path.as_deref().and_then(thumbnail_data_uri) {
            Some(uri) => writeln!(html, "<img src=\"{uri}\" alt=\"{}\">", escape(&c.id)).unwrap(),
            None => html.push_str("<div class=\"noimg\">no preview</div>\n"),
        }
        writeln!(
            html,
            "<span class=\"badge rank\">#{}</span>\
             <span class=\"badge\">P(high) {:.3}</span>\
             <span class=\"badge\">style {:.4}</span>\
             <span class=\"badge\">norm {:.3}</span>\n\
             <div class=\"id\">{}</div>\n</div>",
            r.rank,
            c.p_high,
            c.style_dist,
            c.style_norm,
            escape(&c.id)
        )
        .unwrap();
    }
    html.push_str("</div>\n</body>\n</html>\n");
    html
}
