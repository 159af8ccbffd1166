use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{TimeZone, Utc};
use salienteye::corpus::{load_manifest, AccountCorpus};
use salienteye::engagement::{self, Class, TrainConfig};
use salienteye::evaluation::{attribution_experiment, date_split_eval, merge_accounts};
use salienteye::features::{Backbone, FeatureCache, FeatureExtractor};
use salienteye::ranking::{rank, score_batch, RankMode};
use salienteye::style::{build_profile, StyleProfile};
use salienteye::synth::{self, TextureFamily};
use salienteye::{Error, ErrorKind};

fn extractor(dir: &Path, seed: u64) -> FeatureExtractor {
    let manifest = synth::write_texture_backbone(&dir.join("backbone"), seed).unwrap();
    FeatureExtractor::new(Arc::new(Backbone::load(manifest).unwrap()), None)
}

fn corpus(dir: &Path, account: &str, families: &[TextureFamily], n: usize, seed: u64) -> AccountCorpus {
    load_manifest(synth::write_texture_corpus(dir, account, families, n, seed).unwrap()).unwrap()
}

#[test]
fn texture_accounts_are_attributed_to_their_family() {
    let dir = tempfile::tempdir().unwrap();
    let ex = extractor(dir.path(), 1);
    let corpora: Vec<AccountCorpus> = TextureFamily::ALL
        .iter()
        .enumerate()
        .map(|(i, &f)| corpus(dir.path(), f.name(), &[f], 40, 100 + i as u64))
        .collect();
    let outcome = attribution_experiment(&corpora, &ex, 20, 20, 6, None).unwrap();
    let m = &outcome.matrix;
    for i in 0..3 {
        assert_eq!(m.row_total(i), 20);
    }
    let diag = m.diagonal_percent();
    assert!(diag.iter().all(|&d| d >= 90.0), "{}", m.to_csv());
    assert_eq!(outcome.photos.len(), 60);

    assert!(matches!(
        attribution_experiment(&corpora[..1], &ex, 20, 20, 6, None),
        Err(Error::Insufficient(_))
    ));
    let err = attribution_experiment(&corpora, &ex, 30, 20, 6, None).unwrap_err();
    assert!(err.to_string().contains("short by 10"), "{err}");
}

#[test]
fn identically_distributed_accounts_split_about_evenly() {
    let dir = tempfile::tempdir().unwrap();
    let ex = extractor(dir.path(), 2);
    let corpora = vec![
        corpus(dir.path(), "left", &TextureFamily::ALL, 60, 7),
        corpus(dir.path(), "right", &TextureFamily::ALL, 60, 8),
    ];
    let m = attribution_experiment(&corpora, &ex, 30, 30, 6, None).unwrap().matrix;
    for d in m.diagonal_percent() {
        assert!((d - 50.0).abs() <= 20.0, "{}", m.to_csv());
    }
}

#[test]
fn literally_identical_accounts_tie_toward_the_smaller_id() {
    let dir = tempfile::tempdir().unwrap();
    let ex = extractor(dir.path(), 2);
    let a = corpus(dir.path(), "twin", &TextureFamily::ALL, 12, 7);
    let posts = a
        .posts()
        .iter()
        .map(|p| salienteye::corpus::Post {
            account_id: "alpha".into(),
            ..p.clone()
        })
        .collect();
    let b = AccountCorpus::new("alpha", posts).unwrap();
    let m = attribution_experiment(&[a, b], &ex, 6, 6, 2, None).unwrap().matrix;
    assert_eq!(m.counts, vec![vec![0, 6], vec![0, 6]]);
}

#[test]
fn merged_accounts_form_one_confusion_row() {
    let dir = tempfile::tempdir().unwrap();
    let ex = extractor(dir.path(), 3);
    let s1 = corpus(dir.path(), "s1", &[TextureFamily::Stripes], 10, 1);
    let s2 = corpus(dir.path(), "s2", &[TextureFamily::Stripes], 10, 2);
    let n = corpus(dir.path(), "n", &[TextureFamily::Noise], 20, 3);
    let merged = merge_accounts(&[&s1, &s2], "stripes").unwrap();
    let m = attribution_experiment(&[merged, n], &ex, 10, 10, 3, None)
        .unwrap()
        .matrix;
    assert_eq!(m.labels, vec!["stripes", "n"]);
    assert_eq!(m.counts.len(), 2);
}

#[test]
fn date_split_engagement_eval_runs() {
    let dir = tempfile::tempdir().unwrap();
    let ex = extractor(dir.path(), 4);
    let c = corpus(dir.path(), "acct", &TextureFamily::ALL, 60, 5);
    let cutoff = Utc.with_ymd_and_hms(2024, 2, 10, 0, 0, 0).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        ..Default::default()
    };
    let r = date_split_eval(&c, &ex, cutoff, 30, 6, &cfg).unwrap();
    assert_eq!(r.account_id, "acct");
    assert!((0.0..=1.0).contains(&r.test.macro_f1));
    assert_eq!(
        r.train.high + r.train.low + r.test.truth.high + r.test.truth.low,
        r.label_counts.high + r.label_counts.low
    );

    let late = Utc.with_ymd_and_hms(2030, 1, 1, 0, 0, 0).unwrap();
    let err = date_split_eval(&c, &ex, late, 30, 6, &cfg).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Insufficient);
}

fn photo_list(c: &AccountCorpus) -> Vec<(String, PathBuf)> {
    c.posts()
        .iter()
        .map(|p| (p.post_id.clone(), p.image_path.clone()))
        .collect()
}

#[test]
fn scoring_prefers_the_profile_style() {
    let dir = tempfile::tempdir().unwrap();
    let cache = FeatureCache::new(dir.path().join("cache"));
    let manifest = synth::write_texture_backbone(&dir.path().join("backbone"), 5).unwrap();
    let backbone = Arc::new(Backbone::load(manifest).unwrap());
    let ex = FeatureExtractor::new(backbone, Some(cache));

    let refs = corpus(dir.path(), "ref", &[TextureFamily::Checkerboard], 16, 1);
    let profile = build_profile(&ex, "ref", &photo_list(&refs), 3, None).unwrap();
    assert_eq!(profile, build_profile(&ex, "ref", &photo_list(&refs), 3, None).unwrap());
    assert!(build_profile(&ex, "ref", &photo_list(&refs), 17, None).is_err());

    let path = dir.path().join("ref.json");
    profile.save(&path).unwrap();
    let profile = StyleProfile::load(&path).unwrap();

    let train: Vec<_> = ex
        .embeddings(&photo_list(&refs).iter().map(|(_, p)| p.clone()).collect::<Vec<_>>())
        .unwrap()
        .into_iter()
        .enumerate()
        .map(|(i, e)| (e, if i % 2 == 0 { Class::High } else { Class::Low }))
        .collect();
    let head = engagement::train(
        &train,
        &TrainConfig {
            epochs: 2,
            ..Default::default()
        },
    )
    .unwrap()
    .head;

    let checks = corpus(dir.path(), "c", &[TextureFamily::Checkerboard], 3, 50);
    let noise = corpus(dir.path(), "n", &[TextureFamily::Noise], 3, 60);
    let mut photos = photo_list(&noise);
    photos.extend(photo_list(&checks));
    photos.push(photos[0].clone());
    let scored = score_batch(&head, &profile, &ex, &photos).unwrap();
    assert_eq!(scored[0].p_high, scored[6].p_high);
    assert_eq!(scored[0].style_dist, scored[6].style_dist);

    let by_style = rank(scored, RankMode::Style, 0.5).unwrap();
    let top3: Vec<&str> = by_style.entries[..3].iter().map(|r| r.candidate.id.as_str()).collect();
    assert!(top3.iter().all(|id| id.starts_with("c-")), "{top3:?}");
    assert_eq!(by_style.entries[0].candidate.style_norm, 0.0);

    let other = extractor(&dir.path().join("other"), 6);
    let err = score_batch(&head, &profile, &other, &photos).unwrap_err();
    assert_eq!(err.kind(), ErrorKind::Model);
    assert!(score_batch(&head, &profile, &ex, &[]).is_err());
}
