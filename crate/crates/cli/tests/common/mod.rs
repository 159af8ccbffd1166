#![allow(dead_code)]

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use salienteye::synth::{self, TextureFamily};

pub const BIN: &str = env!("CARGO_BIN_EXE_salienteye");

/// A texture backbone and one 30-photo account in a temp dir.
pub struct Fixture {
    pub dir: tempfile::TempDir,
    pub backbone: PathBuf,
    pub manifest: PathBuf,
    pub config: PathBuf,
}

impl Fixture {
    pub fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let backbone_dir = dir.path().join("backbone");
        synth::write_texture_backbone(&backbone_dir, 11).unwrap();
        let manifest = synth::write_texture_corpus(dir.path(), "acct", &TextureFamily::ALL, 30, 21).unwrap();
        let config = dir.path().join("run.json");
        fs::write(&config, r#"{"train": {"epochs": 3}, "style": {"k": 3, "n_ref": 10}}"#).unwrap();
        Fixture {
            backbone: backbone_dir.join("texture.json"),
            manifest,
            config,
            dir,
        }
    }

    pub fn path(&self) -> &Path {
        self.dir.path()
    }

    pub fn photos(&self) -> PathBuf {
        self.path().join("acct")
    }

    /// Runs the binary with `--config` and `--backbone` preset.
    pub fn run(&self, args: &[&str]) -> Output {
        let mut cmd = Command::new(BIN);
        cmd.args(args)
            .arg("--config")
            .arg(&self.config)
            .arg("--backbone")
            .arg(&self.backbone)
            .env_remove("SALIENTEYE_CACHE");
        cmd.output().unwrap()
    }
}

pub fn bin(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env_remove("SALIENTEYE_CACHE")
        .output()
        .unwrap()
}

pub fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

pub fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

pub fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[track_caller]
pub fn assert_ok(out: &Output) {
    assert_eq!(code(out), 0, "stdout:\n{}\nstderr:\n{}", stdout(out), stderr(out));
}

/// label -> train -> profile -> rank into `out`, returning report.json bytes.
pub fn pipeline(fx: &Fixture, out: &Path, extra: &[&str]) -> Vec<u8> {
    let with = |args: &[&str]| {
        let mut all: Vec<&str> = args.to_vec();
        all.extend_from_slice(extra);
        let o = fx.run(&all);
        assert_ok(&o);
        o
    };
    let out_s = s(out);
    with(&["label", s(&fx.manifest), "--out", out_s]);
    let labeled = out.join("labeled.jsonl");
    with(&["train", s(&labeled), "--out", out_s, "--seed", "7"]);
    with(&["profile", s(&fx.manifest), "--out", out_s]);
    let head = out.join("head.json");
    let profile = out.join("profile.json");
    with(&[
        "rank",
        s(&fx.photos()),
        "--head",
        s(&head),
        "--profile",
        s(&profile),
        "--out",
        out_s,
        "--seed",
        "7",
    ]);
    fs::read(out.join("report.json")).unwrap()
}
