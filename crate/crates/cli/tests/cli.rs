use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use lvpm3::eval::{translate_text, DecodeOptions};
use lvpm3::model::Checkpoint;

fn lvpm3(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lvpm3")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = lvpm3(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn toy(dir: &Path) -> PathBuf {
    let data = dir.join("data");
    ok(&["toy-corpus", "--out", s(&data), "--sentences", "6", "--mv", "2", "--dv", "8"]);
    data
}

fn write_config(dir: &Path, variant: &str, max_steps: u64) -> PathBuf {
    let cfg = serde_json::json!({
        "manifest": "data/manifest.json",
        "bpe_vocab_size": 120,
        "bpe_min_freq": 1,
        "out_dir": format!("out-{variant}"),
        "model": {"d_model": 8, "n_heads": 2, "n_enc_layers": 1, "n_dec_layers": 1, "d_ffn": 16, "d_ctrl": 8, "d_v": 8, "variant": variant},
        "train": {"max_steps": max_steps, "warmup_steps": 2, "max_tokens": 64},
    });
    let path = dir.join(format!("{variant}.json"));
    std::fs::write(&path, cfg.to_string()).unwrap();
    path
}

#[test]
fn missing_manifest_fails_with_path() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path());
    ok(&["train", "--config", s(&write_config(dir.path(), "text_only", 1))]);
    let ckpt = dir.path().join("out-text_only/checkpoints/last.ckpt");
    let missing = data.join("absent.json");
    let out = lvpm3(&["evaluate", "--ckpt", s(&ckpt), "--manifest", s(&missing), "--direction", "de", "--out", s(&dir.path().join("r.csv"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains(s(&missing)));
}

#[test]
fn beam_one_translation_matches_library_greedy() {
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path());
    ok(&["train", "--config", s(&write_config(dir.path(), "text_only", 3))]);
    let ckpt = dir.path().join("out-text_only/checkpoints/last.ckpt");
    let input = dir.path().join("in.txt");
    std::fs::write(&input, "a red dog runs\na big cat sits\n").unwrap();
    let cli = ok(&["translate", "--ckpt", s(&ckpt), "--tgt-lang", "de", "--input", s(&input), "--beam", "1", "--max-len", "8"]);

    let c = Checkpoint::load(&ckpt).unwrap();
    let (model, tok) = (c.model().unwrap(), c.tokenizer.unwrap());
    let opts = DecodeOptions {
        beam: 1,
        max_len: Some(8),
        ..Default::default()
    };
    let lib: Vec<String> = ["a red dog runs", "a big cat sits"]
        .iter()
        .map(|l| translate_text(&model, &tok, l, "de", None, &opts).unwrap())
        .collect();
    assert_eq!(cli.lines().collect::<Vec<_>>(), lib);
}

#[test]
fn resume_appends_to_the_same_run() {
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path());
    ok(&["train", "--config", s(&write_config(dir.path(), "full", 2))]);
    let out = dir.path().join("out-full");
    let ckpt = out.join("checkpoints/last.ckpt");
    ok(&["train", "--config", s(&write_config(dir.path(), "full", 5)), "--resume", s(&ckpt)]);
    let metrics = std::fs::read_to_string(out.join("metrics.csv")).unwrap();
    let steps: Vec<&str> = metrics.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps, ["1", "2", "3", "4", "5"]);
}

#[test]
fn unknown_variant_lists_known_ones() {
    let dir = tempfile::tempdir().unwrap();
    toy(dir.path());
    let out = lvpm3(&["train", "--config", s(&write_config(dir.path(), "bogus", 1))]);
    assert!(!out.status.success());
    let msg = String::from_utf8_lossy(&out.stderr);
    assert!(msg.contains("bogus") && msg.contains("text_only"), "{msg}");
}

#[test]
fn make_vtok_reproduces_toy_corpus_features() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path());
    let out = dir.path().join("again.vtok");
    ok(&["make-vtok", "--pseudo", "--ids", s(&data.join("train.images")), "--mv", "2", "--dv", "8", "--seed", "0", "--out", s(&out)]);
    assert_eq!(std::fs::read(&out).unwrap(), std::fs::read(data.join("train.vtok")).unwrap());
    assert!(!lvpm3(&["make-vtok", "--ids", s(&data.join("train.images")), "--mv", "2", "--dv", "8", "--out", s(&out)]).status.success());
}

#[test]
fn bpe_train_infers_languages_from_extensions() {
    let dir = tempfile::tempdir().unwrap();
    let data = toy(dir.path());
    let prefix = dir.path().join("bpe");
    let msg = ok(&[
        "bpe-train",
        "--corpus",
        s(&data.join("train.en")),
        s(&data.join("train.fr")),
        "--vocab-size",
        "100",
        "--min-freq",
        "1",
        "--out",
        s(&prefix),
    ]);
    assert!(msg.contains("languages en,fr"), "{msg}");
    let tok = lvpm3::text::Tokenizer::load(&prefix).unwrap();
    assert!(tok.vocab().tag_id("fr").is_ok());
    assert!(tok.vocab().tag_id("de").is_err());
}

#[test]
fn primitive_gradcheck_passes() {
    let out = ok(&["gradcheck"]);
    assert!(out.contains("gradcheck passed"));
    assert!(!out.contains("model/"));
}
