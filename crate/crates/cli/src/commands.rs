use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use salienteye::corpus::{load_manifest, parse_timestamp, AccountCorpus};
use salienteye::engagement::{self, Class, TrainedHead};
use salienteye::evaluation::{attribution_experiment, date_split_eval, merge_accounts};
use salienteye::features::{Backbone, FeatureCache, FeatureExtractor};
use salienteye::labeling::{label_corpus, read_labeled, write_labeled};
use salienteye::ranking::{emit_report, rank, score_batch, RankedList};
use salienteye::style::{build_profile, StyleProfile};

use crate::config::RunConfig;
use crate::failure::Failure;
use crate::{Cli, Command};

type Outcome = Result<(), Failure>;

const CACHE_ENV: &str = "SALIENTEYE_CACHE";
const IMAGE_EXTENSIONS: [&str; 3] = ["png", "jpg", "jpeg"];

pub fn run(cli: Cli) -> Outcome {
    let mut cfg = match &cli.common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.common.seed {
        cfg.seed = seed;
    }
    if let Some(b) = cli.common.backbone {
        cfg.backbone = Some(b);
    }
    if let Some(c) = cli.common.cache {
        cfg.cache_dir = Some(c);
    }
    if cfg.cache_dir.is_none() {
        cfg.cache_dir = std::env::var_os(CACHE_ENV).filter(|v| !v.is_empty()).map(PathBuf::from);
    }
    let out = cli.common.out;
    match cli.command {
        Command::Label { manifest } => label(&cfg, &manifest, &out),
        Command::Train { labeled } => train(&cfg, &labeled, &out),
        Command::Profile { manifest } => profile(&cfg, &manifest, &out),
        Command::Rank {
            photos,
            head,
            profile,
            mode,
            alpha,
        } => {
            if let Some(m) = mode {
                cfg.ranking.mode = m.parse()?;
            }
            if let Some(a) = alpha {
                cfg.ranking.alpha = a;
            }
            rank_photos(&cfg, &photos, &head, &profile, &out)
        }
        Command::Eval => eval(&cfg, &out),
    }
}

fn ensure_dir(dir: &Path) -> Outcome {
    fs::create_dir_all(dir).map_err(|e| Failure::input(format!("cannot create {}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Outcome {
    fs::write(path, contents).map_err(|e| Failure::input(format!("cannot write {}: {e}", path.display())))
}

/// Adds the run configuration under `"config"` to a JSON artifact.
fn stamp_config(path: &Path, cfg: &RunConfig) -> Outcome {
    let text = fs::read_to_string(path).map_err(|e| Failure::input(format!("cannot read {}: {e}", path.display())))?;
    let mut value: serde_json::Value = serde_json::from_str(&text).map_err(Failure::model)?;
    value
        .as_object_mut()
        .ok_or_else(|| Failure::model(format!("{} is not a JSON object", path.display())))?
        .insert("config".into(), cfg.echo());
    let mut text = serde_json::to_string_pretty(&value).expect("JSON value serializes");
    text.push('\n');
    write_file(path, text)
}

fn extractor(cfg: &RunConfig) -> Result<FeatureExtractor, Failure> {
    let path = cfg
        .backbone
        .as_ref()
        .ok_or_else(|| Failure::input("no backbone manifest: pass --backbone or set \"backbone\" in the config"))?;
    let backbone = Backbone::from_manifest_file(path)
        .map_err(|e| Failure::model(e).context(format!("cannot load backbone {}", path.display())))?;
    let cache = cfg.cache_dir.as_ref().map(FeatureCache::new);
    Ok(FeatureExtractor::new(Arc::new(backbone), cache))
}

fn label(cfg: &RunConfig, manifest: &Path, out: &Path) -> Outcome {
    let corpus = load_manifest(manifest)?;
    for post in corpus.posts() {
        if !post.image_path.is_file() {
            eprintln!(
                "warning: post {}: image not found: {}",
                post.post_id,
                post.image_path.display()
            );
        }
    }
    let (labeled, counts) = label_corpus(&corpus, cfg.window_days, cfg.min_cohort);
    ensure_dir(out)?;
    write_labeled(out.join("labeled.jsonl"), &labeled)?;
    println!("{counts}");
    Ok(())
}

fn train(cfg: &RunConfig, labeled: &Path, out: &Path) -> Outcome {
    let rows: Vec<_> = read_labeled(labeled)?
        .into_iter()
        .filter_map(|(post, label)| Class::from_label(label).map(|c| (post, c)))
        .collect();
    let high = rows.iter().filter(|(_, c)| *c == Class::High).count();
    let low = rows.len() - high;
    if high == 0 || low == 0 {
        return Err(Failure::insufficient(format!(
            "training needs both High and Low posts; {} has {high} High and {low} Low",
            labeled.display()
        )));
    }
    let train_cfg = cfg.train_config();
    train_cfg.validate()?;
    let ex = extractor(cfg)?;
    let paths: Vec<&Path> = rows.iter().map(|(p, _)| p.image_path.as_path()).collect();
    let embeddings = ex.embeddings(&paths)?;
    let dataset: Vec<_> = embeddings.into_iter().zip(rows.iter().map(|(_, c)| *c)).collect();
    let trained = engagement::train(&dataset, &train_cfg)?;

    ensure_dir(out)?;
    let path = out.join("head.json");
    trained.save(&path)?;
    stamp_config(&path, cfg)?;
    let last = trained.history.last().expect("at least one epoch");
    println!(
        "trained on {} posts ({high} High, {low} Low) for {} epochs; final training loss {:.4}, macro F1 {:.4}",
        dataset.len(),
        trained.history.len(),
        last.loss,
        last.macro_f1
    );
    Ok(())
}

fn profile(cfg: &RunConfig, manifest: &Path, out: &Path) -> Outcome {
    let corpus = load_manifest(manifest)?;
    let (k, n_ref) = (cfg.style.k, cfg.style.n_ref);
    if n_ref == 0 || corpus.len() < n_ref {
        return Err(Failure::input(format!(
            "account {} has {} posts but n_ref is {n_ref} (short by {})",
            corpus.account_id(),
            corpus.len(),
            n_ref.saturating_sub(corpus.len())
        )));
    }
    if k == 0 || k > n_ref {
        return Err(Failure::input(format!(
            "style k = {k} must be between 1 and n_ref = {n_ref}"
        )));
    }
    let ex = extractor(cfg)?;
    let weights = cfg.style.weights.weights(&ex.backbone().manifest().style_taps)?;
    let refs: Vec<(String, &Path)> = corpus
        .most_recent(n_ref)
        .map(|p| (p.post_id.clone(), p.image_path.as_path()))
        .collect();
    let profile = build_profile(&ex, corpus.account_id(), &refs, k, Some(&weights))?;

    ensure_dir(out)?;
    let path = out.join("profile.json");
    profile.save(&path)?;
    stamp_config(&path, cfg)?;
    println!(
        "profile for {}: {} reference photos, {} taps, k = {k}",
        profile.account_id,
        profile.n_ref(),
        profile.taps.len()
    );
    Ok(())
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
}

/// Expands directories (non-recursively, sorted by name) into `(id, path)`
/// pairs; the id is the file name.
fn collect_photos(inputs: &[PathBuf]) -> Result<Vec<(String, PathBuf)>, Failure> {
    let mut photos = Vec::new();
    for input in inputs {
        if input.is_dir() {
            let entries =
                fs::read_dir(input).map_err(|e| Failure::input(format!("cannot list {}: {e}", input.display())))?;
            let mut found: Vec<PathBuf> = entries
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && is_image(p))
                .collect();
            found.sort();
            photos.extend(found);
        } else if input.is_file() {
            photos.push(input.clone());
        } else {
            return Err(Failure::input(format!("photo not found: {}", input.display())));
        }
    }
    if photos.is_empty() {
        return Err(Failure::input("no photos to rank"));
    }
    Ok(photos
        .into_iter()
        .map(|p| {
            let id = p
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            (id, p)
        })
        .collect())
}

fn print_ranking(ranked: &RankedList) {
    let width = ranked
        .entries
        .iter()
        .map(|r| r.candidate.id.len())
        .max()
        .unwrap_or(2)
        .max(2);
    println!(
        "{:>4}  {:<width$}  {:>8}  {:>12}  {:>10}",
        "rank", "id", "p_high", "style_dist", "style_norm"
    );
    for r in &ranked.entries {
        let c = &r.candidate;
        println!(
            "{:>4}  {:<width$}  {:>8.4}  {:>12.6}  {:>10.4}",
            r.rank, c.id, c.p_high, c.style_dist, c.style_norm
        );
    }
}

fn rank_photos(cfg: &RunConfig, inputs: &[PathBuf], head: &Path, profile: &Path, out: &Path) -> Outcome {
    let head = TrainedHead::load(head).map_err(|e| Failure::model(e).context("cannot load head"))?;
    let profile = StyleProfile::load(profile).map_err(|e| Failure::model(e).context("cannot load profile"))?;
    let photos = collect_photos(inputs)?;
    let ex = extractor(cfg)?;
    let candidates = score_batch(&head.head, &profile, &ex, &photos)?;
    let ranked = rank(candidates, cfg.ranking.mode, cfg.ranking.alpha)?;
    emit_report(&ranked, out, cfg.echo())?;
    print_ranking(&ranked);
    Ok(())
}

fn load_account(name: Option<&str>, manifests: &[PathBuf]) -> Result<AccountCorpus, Failure> {
    let label = name.map(str::to_string).unwrap_or_else(|| {
        manifests
            .iter()
            .map(|m| {
                m.file_stem()
                    .map(|s| s.to_string_lossy().into_owned())
                    .unwrap_or_default()
            })
            .collect::<Vec<_>>()
            .join("+")
    });
    if manifests.is_empty() {
        return Err(Failure::input(format!("account {label}: no manifests listed")));
    }
    let corpora = manifests
        .iter()
        .map(|m| load_manifest(m).map_err(|e| Failure::input(e.to_string()).context(format!("account {label}"))))
        .collect::<Result<Vec<_>, _>>()?;
    match (name, corpora.len()) {
        (None, 1) => Ok(corpora.into_iter().next().expect("one corpus")),
        (Some(n), 1) if n == corpora[0].account_id() => Ok(corpora.into_iter().next().expect("one corpus")),
        _ => Ok(merge_accounts(&corpora.iter().collect::<Vec<_>>(), &label)?),
    }
}

fn eval(cfg: &RunConfig, out: &Path) -> Outcome {
    let plan = &cfg.eval;
    if plan.accounts.is_empty() {
        return Err(Failure::input("config has no eval.accounts"));
    }
    let corpora = plan
        .accounts
        .iter()
        .map(|a| load_account(a.name.as_deref(), &a.manifests))
        .collect::<Result<Vec<_>, _>>()?;
    let cutoff = plan
        .cutoff
        .as_deref()
        .map(|c| parse_timestamp(c).map_err(|e| Failure::input(format!("eval.cutoff: {e}"))))
        .transpose()?;
    if corpora.len() < 2 && cutoff.is_none() {
        return Err(Failure::insufficient(
            "attribution needs at least 2 accounts (or set eval.cutoff for the engagement evaluation)",
        ));
    }
    let ex = extractor(cfg)?;
    let weights = cfg.style.weights.weights(&ex.backbone().manifest().style_taps)?;
    ensure_dir(out)?;

    let mut report = serde_json::Map::new();
    report.insert("version".into(), env!("CARGO_PKG_VERSION").into());
    report.insert("config".into(), cfg.echo());
    if corpora.len() >= 2 {
        let outcome = attribution_experiment(&corpora, &ex, cfg.style.n_ref, plan.n_test, cfg.style.k, Some(&weights))?;
        let m = &outcome.matrix;
        write_file(&out.join("confusion.csv"), m.to_csv())?;
        let mut attribution = m.percent_json();
        attribution["photos"] = serde_json::to_value(&outcome.photos).expect("photos serialize");
        report.insert("attribution".into(), attribution);
        println!("attribution (row %, true account -> predicted):");
        for (label, row) in m.labels.iter().zip(m.row_percent()) {
            let cells: Vec<String> = row.iter().map(|p| format!("{p:6.1}")).collect();
            println!("  {label}: {}", cells.join(" "));
        }
    }
    if let Some(cutoff) = cutoff {
        let results = corpora
            .iter()
            .map(|c| date_split_eval(c, &ex, cutoff, cfg.window_days, cfg.min_cohort, &cfg.train_config()))
            .collect::<Result<Vec<_>, _>>()?;
        for r in &results {
            println!("engagement {}: test macro F1 {:.4}", r.account_id, r.test.macro_f1);
        }
        report.insert(
            "engagement".into(),
            serde_json::to_value(&results).expect("results serialize"),
        );
    }
    let mut text = serde_json::to_string_pretty(&report).expect("report serializes");
    text.push('\n');
    write_file(&out.join("eval.json"), text)
}
