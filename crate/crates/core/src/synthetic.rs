//! A small generated corpus for smoke tests and demos: English sentences
//! of the form "a <adjective> <noun> <verb>" with German, French and Czech
//! counterparts. French places the adjective after the noun, so the
//! correct output depends on the target language.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::text::{Corpus, CorpusManifest};
use crate::vision::{pseudo_visual_tokens, write_vtok, VtokFile};

struct Lexicon {
    adjectives: [&'static str; 5],
    nouns: [&'static str; 5],
    verbs: [&'static str; 3],
}

const EN: Lexicon = Lexicon {
    adjectives: ["red", "blue", "small", "happy", "old"],
    nouns: ["dog", "cat", "man", "girl", "bird"],
    verbs: ["runs", "sleeps", "sings"],
};
const DE: Lexicon = Lexicon {
    adjectives: ["rot", "blau", "klein", "froh", "alt"],
    nouns: ["hund", "katze", "mann", "mädchen", "vogel"],
    verbs: ["läuft", "schläft", "singt"],
};
const FR: Lexicon = Lexicon {
    adjectives: ["rouge", "bleu", "petit", "heureux", "vieux"],
    nouns: ["chien", "chat", "homme", "fille", "oiseau"],
    verbs: ["court", "dort", "chante"],
};
const CS: Lexicon = Lexicon {
    adjectives: ["červený", "modrý", "malý", "šťastný", "starý"],
    nouns: ["pes", "kočka", "muž", "dívka", "pták"],
    verbs: ["běží", "spí", "zpívá"],
};

pub const LANGUAGES: [&str; 4] = ["en", "de", "fr", "cs"];
/// Number of distinct sentences the lexicon can produce.
pub const MAX_SENTENCES: usize = 75;

fn sentence(lang: &str, a: usize, n: usize, v: usize) -> String {
    match lang {
        "en" => format!("a {} {} {}", EN.adjectives[a], EN.nouns[n], EN.verbs[v]),
        "de" => format!("ein {} {} {}", DE.adjectives[a], DE.nouns[n], DE.verbs[v]),
        "fr" => format!("un {} {} {}", FR.nouns[n], FR.adjectives[a], FR.verbs[v]),
        _ => format!("ten {} {} {}", CS.adjectives[a], CS.nouns[n], CS.verbs[v]),
    }
}

/// `n` aligned sentences per language, chosen by a fixed stride through all
/// combinations so small corpora still cover every word. Image `k` is `img{k:03}`.
pub fn toy_corpus(n: usize) -> Result<Corpus> {
    if n == 0 || n > MAX_SENTENCES {
        return Err(Error::Config(format!("toy corpus size must be in 1..={MAX_SENTENCES}, got {n}")));
    }
    let mut lines: IndexMap<String, Vec<String>> = LANGUAGES.iter().map(|l| (l.to_string(), Vec::new())).collect();
    for k in 0..n {
        let c = (k * 37) % MAX_SENTENCES;
        let (a, rest) = (c % 5, c / 5);
        let (noun, verb) = (rest % 5, rest / 5);
        for (lang, out) in lines.iter_mut() {
            out.push(sentence(lang, a, noun, verb));
        }
    }
    let text_paths = LANGUAGES
        .iter()
        .map(|l| (l.to_string(), PathBuf::from(format!("train.{l}"))))
        .collect();
    Ok(Corpus {
        manifest: CorpusManifest {
            split: "train".into(),
            languages: LANGUAGES.iter().map(|s| s.to_string()).collect(),
            text_paths,
            vtok_path: Some("train.vtok".into()),
            pivot: "en".into(),
            image_ids_path: Some("train.images".into()),
        },
        lines,
        image_ids: (0..n).map(|k| format!("img{k:03}")).collect(),
    })
}

/// Pseudo visual tokens for every image of `corpus`.
pub fn toy_vtok(corpus: &Corpus, m_v: usize, d_v: usize, seed: u64) -> Result<VtokFile> {
    VtokFile::from_records(
        corpus
            .image_ids
            .iter()
            .map(|id| pseudo_visual_tokens(id, m_v, d_v, seed))
            .collect(),
    )
}

/// Writes text files, image ids, a VTOK file and `manifest.json` into
/// `dir`; returns the manifest path.
pub fn write_toy_corpus(dir: &Path, n: usize, m_v: usize, d_v: usize, seed: u64) -> Result<PathBuf> {
    let corpus = toy_corpus(n)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let m = &corpus.manifest;
    for (lang, path) in &m.text_paths {
        let p = dir.join(path);
        std::fs::write(&p, corpus.lines[lang].join("\n") + "\n").map_err(|e| Error::io(&p, e))?;
    }
    let ids = dir.join(m.image_ids_path.as_ref().unwrap());
    std::fs::write(&ids, corpus.image_ids.join("\n") + "\n").map_err(|e| Error::io(&ids, e))?;
    write_vtok(&toy_vtok(&corpus, m_v, d_v, seed)?, &dir.join(m.vtok_path.as_ref().unwrap()))?;
    let manifest = dir.join("manifest.json");
    m.save(&manifest)?;
    Ok(manifest)
}
