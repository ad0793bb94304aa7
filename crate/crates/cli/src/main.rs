//! `lvpm3`: train, decode and evaluate language-aware visual-prompt
//! translation models.

mod config;

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use lvpm3::autodiff::gradcheck::primitive_suite;
use lvpm3::autodiff::GradCheckReport;
use lvpm3::eval::{
    evaluate, mask_sweep, parse_direction, translate_text, write_dump_tsv, write_report_csv, write_sweep_csv,
    DecodeOptions,
};
use lvpm3::model::{full_model_suite, Checkpoint, LvpM3Model};
use lvpm3::synthetic::write_toy_corpus;
use lvpm3::text::{train_bpe, CorpusManifest, Tokenizer};
use lvpm3::train::{resume, train_loop, LoopOutputs, TrainState};
use lvpm3::vision::{pseudo_visual_tokens, read_vtok, write_vtok, VtokFile};

use config::RunConfig;

#[derive(Parser)]
#[command(name = "lvpm3", version, about = "Multilingual multimodal translation with language-aware visual prompts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a JSON run configuration.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Continue from a checkpoint written by an earlier run.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Translate pivot-language lines read from a file or stdin.
    Translate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        tgt_lang: String,
        /// Input file, or `-` for stdin. With visual tokens each line is `image_id<TAB>sentence`.
        #[arg(long)]
        input: String,
        /// Visual tokens for the images named in the input.
        #[arg(long)]
        vtok: Option<PathBuf>,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Decode a corpus split and report BLEU for one direction.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// `en-de` or just the target language.
        #[arg(long)]
        direction: String,
        /// Report CSV.
        #[arg(long)]
        out: PathBuf,
        /// Per-sentence TSV; defaults to the report path with a `.tsv` extension.
        #[arg(long)]
        dump: Option<PathBuf>,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// BLEU as a function of the fraction of masked source tokens.
    MaskSweep {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        direction: String,
        #[arg(long, value_delimiter = ',', default_value = "0,0.2,0.4,0.6,0.8")]
        ratios: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "1,2,3")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        decode: DecodeArgs,
    },
    /// Compare analytic gradients with central finite differences in f64.
    Gradcheck {
        /// Also check the composed loss of every model variant.
        #[arg(long)]
        full_model: bool,
        #[arg(long, default_value_t = 1e-3)]
        tol: f64,
        #[arg(long, default_value_t = 1e-6)]
        step: f64,
    },
    /// Write a VTOK file of visual tokens.
    MakeVtok {
        /// Deterministic pseudo tokens derived from each image id.
        #[arg(long)]
        pseudo: bool,
        /// One image id per line.
        #[arg(long)]
        ids: PathBuf,
        #[arg(long)]
        mv: usize,
        #[arg(long)]
        dv: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Learn a shared byte-level BPE vocabulary.
    BpeTrain {
        /// Text files named `<anything>.<lang>`.
        #[arg(long, num_args = 1.., required = true)]
        corpus: Vec<PathBuf>,
        #[arg(long)]
        vocab_size: usize,
        /// Output prefix for `.vocab` and `.merges`.
        #[arg(long)]
        out: PathBuf,
        /// Language tags to reserve; inferred from file extensions by default.
        #[arg(long, value_delimiter = ',')]
        langs: Option<Vec<String>>,
        #[arg(long, default_value_t = 2)]
        min_freq: u64,
    },
    /// Generate the synthetic four-language corpus with pseudo visual tokens.
    ToyCorpus {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 32)]
        sentences: usize,
        #[arg(long, default_value_t = 4)]
        mv: usize,
        #[arg(long, default_value_t = 32)]
        dv: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args, Clone)]
struct DecodeArgs {
    #[arg(long, default_value_t = 5)]
    beam: usize,
    #[arg(long, default_value_t = 1.0)]
    alpha: f64,
    #[arg(long)]
    max_len: Option<usize>,
    /// Lowercase hypotheses and references before scoring.
    #[arg(long)]
    case_insensitive: bool,
    /// Decoding threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    threads: usize,
    /// Tokenizer prefix, for checkpoints saved without one.
    #[arg(long)]
    tokenizer: Option<PathBuf>,
}

impl DecodeArgs {
    fn options(&self) -> DecodeOptions {
        DecodeOptions {
            beam: self.beam,
            alpha: self.alpha,
            max_len: self.max_len,
            case_sensitive: !self.case_insensitive,
            threads: self.threads,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<ExitCode> {
    match command {
        Command::Train { config, resume } => train(&config, resume.as_deref())?,
        Command::Translate {
            ckpt,
            tgt_lang,
            input,
            vtok,
            decode,
        } => translate(&ckpt, &tgt_lang, &input, vtok.as_deref(), &decode)?,
        Command::Evaluate {
            ckpt,
            manifest,
            direction,
            out,
            dump,
            decode,
        } => {
            let (model, tokenizer) = load_checkpoint(&ckpt, decode.tokenizer.as_deref())?;
            let (corpus, vtok) = load_split(&manifest, &model)?;
            let target = parse_direction(&direction, &corpus.manifest.pivot)?;
            let report = evaluate(&model, &tokenizer, &corpus, vtok.as_ref(), &target, &decode.options(), None)?;
            write_report_csv(&out, std::slice::from_ref(&report))?;
            let dump = dump.unwrap_or_else(|| out.with_extension("tsv"));
            write_dump_tsv(&dump, &report)?;
            println!("{} BLEU {:.2} ({} sentences)", report.direction, report.bleu, report.sentences.len());
        }
        Command::MaskSweep {
            ckpt,
            manifest,
            direction,
            ratios,
            seeds,
            out,
            decode,
        } => {
            let (model, tokenizer) = load_checkpoint(&ckpt, decode.tokenizer.as_deref())?;
            let (corpus, vtok) = load_split(&manifest, &model)?;
            let target = parse_direction(&direction, &corpus.manifest.pivot)?;
            let rows = mask_sweep(&model, &tokenizer, &corpus, vtok.as_ref(), &target, &ratios, &seeds, &decode.options())?;
            write_sweep_csv(&out, &rows)?;
            for r in &rows {
                println!("{} ratio {:.2}: BLEU {:.2} ± {:.2}", r.direction, r.ratio, r.mean_bleu, r.std);
            }
        }
        Command::Gradcheck { full_model, tol, step } => return gradcheck(full_model, tol, step),
        Command::MakeVtok {
            pseudo,
            ids,
            mv,
            dv,
            seed,
            out,
        } => {
            if !pseudo {
                bail!("only --pseudo visual tokens can be generated here; precompute real features offline");
            }
            let text = std::fs::read_to_string(&ids).with_context(|| format!("reading {}", ids.display()))?;
            let records = text
                .lines()
                .filter(|l| !l.trim().is_empty())
                .map(|id| pseudo_visual_tokens(id.trim(), mv, dv, seed))
                .collect();
            let file = VtokFile::from_records(records)?;
            write_vtok(&file, &out)?;
            println!("wrote {} records ({}×{}) to {}", file.records.len(), mv, dv, out.display());
        }
        Command::BpeTrain {
            corpus,
            vocab_size,
            out,
            langs,
            min_freq,
        } => {
            let langs = match langs {
                Some(l) => l,
                None => infer_languages(&corpus)?,
            };
            let mut texts = Vec::with_capacity(corpus.len());
            for p in &corpus {
                texts.push(std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?);
            }
            let tok = train_bpe(texts.iter().flat_map(|t| t.lines()), &langs, vocab_size, min_freq)?;
            tok.save(&out)?;
            println!("vocabulary of {} tokens, {} merges, languages {}", tok.vocab().len(), tok.merges().len(), langs.join(","));
        }
        Command::ToyCorpus {
            out,
            sentences,
            mv,
            dv,
            seed,
        } => {
            let manifest = write_toy_corpus(&out, sentences, mv, dv, seed)?;
            println!("{}", manifest.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn infer_languages(files: &[PathBuf]) -> Result<Vec<String>> {
    let mut langs: Vec<String> = Vec::new();
    for f in files {
        let ext = f
            .extension()
            .and_then(|e| e.to_str())
            .with_context(|| format!("cannot infer a language from {}; pass --langs", f.display()))?;
        if !langs.iter().any(|l| l == ext) {
            langs.push(ext.to_string());
        }
    }
    Ok(langs)
}

fn load_checkpoint(path: &Path, tokenizer: Option<&Path>) -> Result<(LvpM3Model<f32>, Tokenizer)> {
    let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
    let tok = match (tokenizer, ckpt.tokenizer.clone()) {
        (Some(prefix), _) => Tokenizer::load(prefix)?,
        (None, Some(t)) => t,
        (None, None) => bail!("{} carries no tokenizer; pass --tokenizer", path.display()),
    };
    Ok((ckpt.model()?, tok))
}

fn load_split(manifest: &Path, model: &LvpM3Model<f32>) -> Result<(lvpm3::text::Corpus, Option<VtokFile>)> {
    let m = CorpusManifest::load(manifest).with_context(|| format!("loading manifest {}", manifest.display()))?;
    let corpus = m.load_corpus()?;
    let vtok = if model.uses_vision() {
        let path = m
            .vtok_path
            .as_ref()
            .with_context(|| format!("variant `{}` needs visual tokens but {} names none", model.variant(), manifest.display()))?;
        Some(read_vtok(path)?)
    } else {
        None
    };
    Ok((corpus, vtok))
}

fn train(config_path: &Path, resume_from: Option<&Path>) -> Result<()> {
    let run = RunConfig::load(config_path)?;
    std::fs::create_dir_all(&run.out_dir).with_context(|| format!("creating {}", run.out_dir.display()))?;
    let manifest = CorpusManifest::load(&run.manifest).with_context(|| format!("loading manifest {}", run.manifest.display()))?;
    let corpus = manifest.load_corpus()?;

    let (mut model, tokenizer, mut state) = match resume_from {
        Some(path) => {
            let ckpt = Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))?;
            let tokenizer = ckpt
                .tokenizer
                .clone()
                .with_context(|| format!("{} carries no tokenizer", path.display()))?;
            let (model, state) = resume(&ckpt, run.train.clone())?;
            (model, tokenizer, state)
        }
        None => {
            let tokenizer = match &run.tokenizer {
                Some(prefix) => Tokenizer::load(prefix)?,
                None => {
                    let lines = corpus.lines.values().flatten().map(String::as_str);
                    let t = train_bpe(lines, &manifest.languages, run.bpe_vocab_size, run.bpe_min_freq)?;
                    t.save(&run.out_dir.join("tokenizer"))?;
                    t
                }
            };
            let mut cfg = run.model.clone();
            cfg.vocab_size = tokenizer.vocab().len();
            (LvpM3Model::new(cfg)?, tokenizer, TrainState::new(run.train.clone()))
        }
    };

    let vtok = if model.uses_vision() {
        let path = manifest
            .vtok_path
            .as_ref()
            .with_context(|| format!("variant `{}` needs visual tokens", model.variant()))?;
        Some(read_vtok(path)?)
    } else {
        None
    };
    let examples = corpus.examples(&tokenizer, None)?;
    eprintln!(
        "{} examples, vocabulary {}, {} parameters, variant {}",
        examples.len(),
        tokenizer.vocab().len(),
        model.num_parameters(),
        model.variant()
    );
    let outputs = LoopOutputs {
        metrics: Some(run.out_dir.join("metrics.csv")),
        checkpoints: Some(run.out_dir.join("checkpoints")),
        checkpoint_every: Some(run.checkpoint_every),
        tokenizer: Some(tokenizer),
    };
    let start = Instant::now();
    let log_every = run.log_every.max(1);
    let history = train_loop(&mut model, &examples, vtok.as_ref(), &mut state, &outputs, |m| {
        if m.step % log_every == 0 {
            eprintln!("step {:>6} epoch {:>3} lr {:.3e} loss {:.4} {:.0} tok/s", m.step, m.epoch, m.lr, m.loss, m.tokens_per_sec);
        }
    })?;
    if let Some(last) = history.last() {
        println!(
            "trained {} steps in {:.1}s; final loss {:.4}; checkpoint {}",
            history.len(),
            start.elapsed().as_secs_f64(),
            last.loss,
            run.out_dir.join("checkpoints/last.ckpt").display()
        );
    }
    Ok(())
}

fn translate(ckpt: &Path, tgt_lang: &str, input: &str, vtok: Option<&Path>, decode: &DecodeArgs) -> Result<()> {
    let (model, tokenizer) = load_checkpoint(ckpt, decode.tokenizer.as_deref())?;
    let vtok = match vtok {
        Some(p) => Some(read_vtok(p)?),
        None if model.uses_vision() => bail!("variant `{}` needs --vtok", model.variant()),
        None => None,
    };
    let reader: Box<dyn BufRead> = if input == "-" {
        Box::new(std::io::stdin().lock())
    } else {
        let f = std::fs::File::open(input).with_context(|| format!("opening {input}"))?;
        Box::new(std::io::BufReader::new(f))
    };
    let opts = decode.options();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for (n, line) in reader.lines().enumerate() {
        let line = line.with_context(|| format!("reading {input}"))?;
        let (image, text) = match (&vtok, line.split_once('\t')) {
            (Some(_), Some((id, text))) => (Some(id), text),
            (Some(_), None) => bail!("line {}: expected `image_id<TAB>sentence`", n + 1),
            (None, Some((_, text))) => (None, text),
            (None, None) => (None, line.as_str()),
        };
        let visual = match (image, &vtok) {
            (Some(id), Some(v)) => Some(v.get(id)?.tokens.clone()),
            _ => None,
        };
        let hyp = translate_text(&model, &tokenizer, text, tgt_lang, visual.as_ref(), &opts)?;
        writeln!(out, "{hyp}")?;
    }
    Ok(())
}

fn print_report(name: &str, r: &GradCheckReport) {
    println!(
        "{:<8} {:<20} max rel error {:.3e} over {} entries",
        if r.passed() { "PASS" } else { "FAIL" },
        name,
        r.max_rel_error,
        r.checked
    );
}

fn gradcheck(full_model: bool, tol: f64, step: f64) -> Result<ExitCode> {
    let start = Instant::now();
    let mut ok = true;
    for (name, r) in primitive_suite(step, tol)? {
        print_report(name, &r);
        ok &= r.passed();
    }
    if full_model {
        for (name, r) in full_model_suite(step, tol)? {
            print_report(&format!("model/{name}"), &r);
            ok &= r.passed();
        }
    }
    println!(
        "gradcheck {} in {:.1}s (tolerance {tol:e})",
        if ok { "passed" } else { "failed" },
        start.elapsed().as_secs_f64()
    );
    Ok(if ok { ExitCode::SUCCESS } else { ExitCode::FAILURE })
}
