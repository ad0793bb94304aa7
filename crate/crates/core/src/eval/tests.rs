use super::*;
use crate::model::ModelConfig;
use crate::synthetic::{toy_corpus, toy_vtok};
use crate::text::train_bpe;

#[test]
fn fixed_corpora_match_reference_values() {
    let cases: [(&[&str], &[&str], f64); 3] = [
        (
            &["the cat is on the mat", "there is a cat on the mat"],
            &["the cat sat on the mat", "there is a cat on the red mat"],
            58.54828907695343,
        ),
        (&["a b c d", "e f g h i"], &["a b c d e", "e f g h i j k"], 71.65313105737893),
        (
            &[
                "the the the the the the the",
                "it is a guide to action which ensures that the military always obeys the commands of the party",
            ],
            &[
                "the cat is on the mat",
                "it is a guide to action that ensures that the military will forever heed party commands",
            ],
            32.90009341000085,
        ),
    ];
    for (h, r, expect) in cases {
        let got = bleu4(h, r, true).unwrap();
        assert!((got - expect).abs() < 1e-6, "{got} vs {expect}");
    }
    let s = corpus_stats(cases[0].0, cases[0].1, true).unwrap();
    assert_eq!(s.matches, [12, 8, 5, 3]);
    assert_eq!(s.totals, [13, 11, 9, 7]);
    assert_eq!((s.hyp_len, s.ref_len), (13, 14));
}

#[test]
fn directions() {
    assert_eq!(parse_direction("de", "en").unwrap(), "de");
    assert_eq!(parse_direction("en-fr", "en").unwrap(), "fr");
    assert_eq!(parse_direction("en2cs", "en").unwrap(), "cs");
    assert!(parse_direction("de-en", "en").is_err());
}

struct Setup {
    corpus: Corpus,
    tokenizer: Tokenizer,
    vtok: VtokFile,
}

fn setup() -> Setup {
    let corpus = toy_corpus(4).unwrap();
    let all: Vec<&str> = corpus.lines.values().flatten().map(String::as_str).collect();
    let tokenizer = train_bpe(all, &corpus.manifest.languages, 100, 2).unwrap();
    let vtok = toy_vtok(&corpus, 2, 4, 0).unwrap();
    Setup {
        corpus,
        tokenizer,
        vtok,
    }
}

fn model(variant: &str, vocab: usize) -> LvpM3Model<f32> {
    let cfg = ModelConfig {
        n_heads: 2,
        n_enc_layers: 1,
        n_dec_layers: 1,
        d_v: 4,
        vocab_size: vocab,
        variant: variant.into(),
        ..ModelConfig::default()
    }
    .with_d_model(8);
    LvpM3Model::new(cfg).unwrap()
}

fn opts() -> DecodeOptions {
    DecodeOptions {
        beam: 2,
        max_len: Some(6),
        threads: 2,
        ..Default::default()
    }
}

#[test]
fn report_schema_matches_across_variants() {
    let s = setup();
    let v = s.tokenizer.vocab().len();
    let full = evaluate(&model("full", v), &s.tokenizer, &s.corpus, Some(&s.vtok), "de", &opts(), None).unwrap();
    let text = evaluate(&model("text_only", v), &s.tokenizer, &s.corpus, None, "de", &opts(), None).unwrap();
    for r in [&full, &text] {
        assert_eq!(r.direction, "en-de");
        assert_eq!(r.sentences.len(), 4);
        assert!((0.0..=100.0).contains(&r.bleu));
        assert_eq!(r.sentences[1].example_id, "train:1:en-de");
        assert_eq!(r.sentences[1].reference, s.corpus.lines["de"][1]);
    }
    let dir = tempfile::tempdir().unwrap();
    write_report_csv(&dir.path().join("r.csv"), std::slice::from_ref(&full)).unwrap();
    write_dump_tsv(&dir.path().join("r.tsv"), &full).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    assert!(csv.starts_with("direction,ratio,seed,bleu\nen-de,,,"));
    let tsv = std::fs::read_to_string(dir.path().join("r.tsv")).unwrap();
    assert_eq!(tsv.lines().count(), 5);
    assert_eq!(tsv.lines().nth(1).unwrap().split('\t').count(), 4);
}

#[test]
fn thread_count_does_not_change_output() {
    let s = setup();
    let m = model("full", s.tokenizer.vocab().len());
    let one = evaluate(&m, &s.tokenizer, &s.corpus, Some(&s.vtok), "fr", &DecodeOptions { threads: 1, ..opts() }, None).unwrap();
    let many = evaluate(&m, &s.tokenizer, &s.corpus, Some(&s.vtok), "fr", &DecodeOptions { threads: 3, ..opts() }, None).unwrap();
    assert_eq!(one, many);
}

#[test]
fn missing_visual_tokens_are_reported() {
    let s = setup();
    let m = model("full", s.tokenizer.vocab().len());
    assert!(matches!(
        evaluate(&m, &s.tokenizer, &s.corpus, None, "de", &opts(), None),
        Err(Error::Config(_))
    ));
    let partial = toy_vtok(&toy_corpus(2).unwrap(), 2, 4, 0).unwrap();
    assert!(matches!(
        evaluate(&m, &s.tokenizer, &s.corpus, Some(&partial), "de", &opts(), None),
        Err(Error::MissingImage(_))
    ));
}

#[test]
fn sweep_at_zero_equals_plain_evaluation() {
    let s = setup();
    let m = model("full", s.tokenizer.vocab().len());
    let plain = evaluate(&m, &s.tokenizer, &s.corpus, Some(&s.vtok), "de", &opts(), None).unwrap();
    let rows = mask_sweep(&m, &s.tokenizer, &s.corpus, Some(&s.vtok), "de", &[0.0, 0.6], &[1, 2], &opts()).unwrap();
    assert_eq!(rows[0].mean_bleu, plain.bleu);
    assert_eq!(rows[0].std, 0.0);
    for r in &rows[0].reports {
        let hyps: Vec<_> = r.sentences.iter().map(|s| &s.hypothesis).collect();
        let plain_hyps: Vec<_> = plain.sentences.iter().map(|s| &s.hypothesis).collect();
        assert_eq!(hyps, plain_hyps);
    }
    assert!(rows[1].reports[0].sentences.iter().any(|s| s.source.contains("<mask>")));

    let again = mask_sweep(&m, &s.tokenizer, &s.corpus, Some(&s.vtok), "de", &[0.0, 0.6], &[1, 2], &opts()).unwrap();
    assert_eq!(rows, again);
    let dir = tempfile::tempdir().unwrap();
    write_sweep_csv(&dir.path().join("a.csv"), &rows).unwrap();
    write_sweep_csv(&dir.path().join("b.csv"), &again).unwrap();
    let a = std::fs::read(dir.path().join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read(dir.path().join("b.csv")).unwrap());
    assert!(String::from_utf8(a).unwrap().starts_with("direction,ratio,mean_bleu,std\nen-de,0,"));

    assert!(mask_sweep(&m, &s.tokenizer, &s.corpus, Some(&s.vtok), "de", &[1.5], &[1], &opts()).is_err());
}

#[test]
fn translate_text_round_trip() {
    let s = setup();
    let m = model("text_only", s.tokenizer.vocab().len());
    let out = translate_text(&m, &s.tokenizer, "a red dog runs", "cs", None, &opts()).unwrap();
    assert!(!out.contains('\t'));
    assert!(translate_text(&m, &s.tokenizer, "a red dog runs", "xx", None, &opts()).is_err());
}
