use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::bpe::Tokenizer;
use super::vocab::{Vocabulary, BOS, EOS, UNK};
use crate::error::{Error, Result};

/// Describes one split of a line-aligned multilingual corpus.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CorpusManifest {
    pub split: String,
    pub languages: Vec<String>,
    pub text_paths: IndexMap<String, PathBuf>,
    /// Absent for text-only corpora.
    #[serde(default)]
    pub vtok_path: Option<PathBuf>,
    /// Source language of every translation direction.
    #[serde(default = "default_pivot")]
    pub pivot: String,
    /// One image id per line. Without it, line `n` refers to image `"n"`.
    #[serde(default)]
    pub image_ids_path: Option<PathBuf>,
}

fn default_pivot() -> String {
    "en".to_string()
}

/// Loaded text of a manifest: line `n` of every language describes image `n`.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub manifest: CorpusManifest,
    pub lines: IndexMap<String, Vec<String>>,
    pub image_ids: Vec<String>,
}

impl CorpusManifest {
    /// Reads a manifest; relative paths are resolved against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: CorpusManifest = serde_json::from_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in m.text_paths.values_mut() {
            *p = base.join(&*p);
        }
        m.vtok_path = m.vtok_path.map(|p| base.join(p));
        m.image_ids_path = m.image_ids_path.map(|p| base.join(p));
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn validate(&self) -> Result<()> {
        if !self.languages.contains(&self.pivot) {
            return Err(Error::Manifest(format!("pivot `{}` not in languages", self.pivot)));
        }
        for lang in &self.languages {
            if !self.text_paths.contains_key(lang) {
                return Err(Error::Manifest(format!("no text path for language `{lang}`")));
            }
        }
        Ok(())
    }

    /// Target languages: every language except the pivot.
    pub fn targets(&self) -> Vec<String> {
        self.languages.iter().filter(|l| **l != self.pivot).cloned().collect()
    }

    /// Reads every text file and checks that they are line-aligned.
    pub fn load_corpus(&self) -> Result<Corpus> {
        let mut lines = IndexMap::new();
        let mut expected: Option<(usize, &Path)> = None;
        for lang in &self.languages {
            let path = &self.text_paths[lang];
            let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let l: Vec<String> = text.lines().map(str::to_string).collect();
            match expected {
                Some((n, first)) if n != l.len() => {
                    return Err(Error::Manifest(format!(
                        "misaligned corpus: {} has {} lines but {} has {}",
                        path.display(),
                        l.len(),
                        first.display(),
                        n
                    )));
                }
                None => expected = Some((l.len(), path)),
                _ => {}
            }
            lines.insert(lang.clone(), l);
        }
        let n = expected.map_or(0, |(n, _)| n);
        let image_ids = match &self.image_ids_path {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
                let ids: Vec<String> = text.lines().map(str::to_string).collect();
                if ids.len() != n {
                    return Err(Error::Manifest(format!(
                        "misaligned corpus: {} has {} ids for {n} lines",
                        path.display(),
                        ids.len()
                    )));
                }
                ids
            }
            None => (0..n).map(|i| i.to_string()).collect(),
        };
        Ok(Corpus {
            manifest: self.clone(),
            lines,
            image_ids,
        })
    }
}

/// One translation direction of one corpus line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelExample {
    pub example_id: String,
    pub source_lang: String,
    pub target_lang: String,
    /// `[tag(target), BOS, ..source.., EOS]`
    pub source_ids: Vec<u32>,
    /// `[..target.., EOS]`
    pub target_ids: Vec<u32>,
    pub image_id: String,
}

impl ParallelExample {
    /// Decoder input under teacher forcing: `[BOS, ..target..]`.
    pub fn decoder_input(&self) -> Vec<u32> {
        let mut v = Vec::with_capacity(self.target_ids.len());
        v.push(BOS);
        v.extend_from_slice(&self.target_ids[..self.target_ids.len() - 1]);
        v
    }
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.image_ids.is_empty()
    }

    /// Every `(pivot → target, line)` pair for the given targets (all
    /// non-pivot languages when `None`).
    pub fn examples(&self, tokenizer: &Tokenizer, targets: Option<&[String]>) -> Result<Vec<ParallelExample>> {
        let pivot = &self.manifest.pivot;
        let all_targets = self.manifest.targets();
        let targets = targets.unwrap_or(&all_targets);
        let vocab = tokenizer.vocab();
        let mut out = Vec::with_capacity(self.len() * targets.len());
        for (k, image_id) in self.image_ids.iter().enumerate() {
            let source = wrap(&tokenizer.encode(&self.lines[pivot][k]));
            for tgt in targets {
                let lines = self
                    .lines
                    .get(tgt)
                    .ok_or_else(|| Error::Language(tgt.clone()))?;
                let mut target_ids = tokenizer.encode(&lines[k]);
                target_ids.push(EOS);
                out.push(ParallelExample {
                    example_id: format!("{}:{k}:{pivot}-{tgt}", self.manifest.split),
                    source_lang: pivot.clone(),
                    target_lang: tgt.clone(),
                    source_ids: prefix_target_token(&source, tgt, vocab)?,
                    target_ids,
                    image_id: image_id.clone(),
                });
            }
        }
        Ok(out)
    }
}

/// `[BOS, ..ids.., EOS]`
pub fn wrap(ids: &[u32]) -> Vec<u32> {
    let mut v = Vec::with_capacity(ids.len() + 2);
    v.push(BOS);
    v.extend_from_slice(ids);
    v.push(EOS);
    v
}

/// Prefixes the target-language tag: `[tag, BOS, ..content.., EOS]`. Input
/// may be raw content or already wrapped in BOS/EOS.
pub fn prefix_target_token(source_ids: &[u32], target_lang: &str, vocab: &Vocabulary) -> Result<Vec<u32>> {
    let tag = vocab.tag_id(target_lang)?;
    if source_ids.iter().any(|&id| vocab.is_tag(id)) {
        return Err(Error::AlreadyTagged);
    }
    let content = source_ids.strip_prefix(&[BOS]).unwrap_or(source_ids);
    let content = content.strip_suffix(&[EOS]).unwrap_or(content);
    let mut out = Vec::with_capacity(content.len() + 3);
    out.push(tag);
    out.extend(wrap(content));
    Ok(out)
}

/// Replaces exactly `round_half_up(ratio · n)` of the `n` content tokens by
/// `MASK`, chosen uniformly without replacement from a generator seeded with
/// `seed`. Reserved tokens and language tags are never touched; `UNK`
/// counts as content.
pub fn mask_source(ids: &[u32], ratio: f64, seed: u64, vocab: &Vocabulary) -> Vec<u32> {
    let ratio = ratio.clamp(0.0, 1.0);
    let maskable: Vec<usize> = ids
        .iter()
        .enumerate()
        .filter(|&(_, &id)| id == UNK || !vocab.is_special(id))
        .map(|(i, _)| i)
        .collect();
    let count = ((ratio * maskable.len() as f64) + 0.5).floor() as usize;
    let count = count.min(maskable.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = ids.to_vec();
    for pick in index::sample(&mut rng, maskable.len(), count) {
        out[maskable[pick]] = super::vocab::MASK;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::text::vocab::{MASK, PAD};

    fn vocab() -> Vocabulary {
        let mut v = Vocabulary::with_languages(&["en", "de", "fr", "cs", "lv", "hi", "tr"]).unwrap();
        for b in b"abcdefghijklmnopqrstuvwxyz" {
            v.push_bytes(vec![*b]);
        }
        v
    }

    #[test]
    fn prefix_cases() {
        let v = vocab();
        let de = v.tag_id("de").unwrap();
        assert_eq!(prefix_target_token(&[BOS, 17, EOS], "de", &v).unwrap(), vec![de, BOS, 17, EOS]);
        assert_eq!(prefix_target_token(&[17], "de", &v).unwrap(), vec![de, BOS, 17, EOS]);
        let once = prefix_target_token(&[BOS, 17, EOS], "de", &v).unwrap();
        assert!(matches!(prefix_target_token(&once, "fr", &v), Err(Error::AlreadyTagged)));
        assert!(matches!(prefix_target_token(&[17], "xx", &v), Err(Error::Language(_))));
    }

    #[test]
    fn directions_differ_only_in_tag() {
        let v = vocab();
        let src = [BOS, 20, 21, 22, EOS];
        let outs: Vec<Vec<u32>> = ["de", "fr", "cs", "lv", "hi", "tr"]
            .iter()
            .map(|l| prefix_target_token(&src, l, &v).unwrap())
            .collect();
        for a in &outs {
            for b in &outs {
                assert_eq!(a[1..], b[1..]);
            }
        }
        let tags: std::collections::HashSet<u32> = outs.iter().map(|o| o[0]).collect();
        assert_eq!(tags.len(), 6);
    }

    #[test]
    fn mask_extremes_and_count() {
        let v = vocab();
        let de = v.tag_id("de").unwrap();
        let content: Vec<u32> = (20..30).collect();
        let mut ids = vec![de, BOS];
        ids.extend(&content);
        ids.extend([EOS, PAD, PAD]);

        assert_eq!(mask_source(&ids, 0.0, 1, &v), ids);
        let all = mask_source(&ids, 1.0, 1, &v);
        assert_eq!(&all[..2], &[de, BOS]);
        assert!(all[2..12].iter().all(|&t| t == MASK));
        assert_eq!(&all[12..], &[EOS, PAD, PAD]);

        let half = mask_source(&ids, 0.5, 42, &v);
        assert_eq!(half.len(), ids.len());
        assert_eq!(half.iter().filter(|&&t| t == MASK).count(), 5);
        assert_eq!(half, mask_source(&ids, 0.5, 42, &v));
        // half-up rounding: 0.25 · 10 = 2.5 -> 3
        let q = mask_source(&ids, 0.25, 7, &v);
        assert_eq!(q.iter().filter(|&&t| t == MASK).count(), 3);
    }

    #[test]
    fn manifest_rejects_misaligned_files() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("t.en"), "a\nb\nc\n").unwrap();
        std::fs::write(dir.path().join("t.de"), "x\ny\n").unwrap();
        let m = CorpusManifest {
            split: "train".into(),
            languages: vec!["en".into(), "de".into()],
            text_paths: [("en".into(), "t.en".into()), ("de".into(), "t.de".into())]
                .into_iter()
                .collect(),
            vtok_path: None,
            pivot: "en".into(),
            image_ids_path: None,
        };
        let path = dir.path().join("manifest.json");
        m.save(&path).unwrap();
        let loaded = CorpusManifest::load(&path).unwrap();
        let err = loaded.load_corpus().unwrap_err();
        assert!(err.to_string().contains("misaligned"), "{err}");

        std::fs::write(dir.path().join("t.de"), "x\ny\nz\n").unwrap();
        let corpus = loaded.load_corpus().unwrap();
        assert_eq!(corpus.len(), 3);
        assert_eq!(corpus.image_ids, ["0", "1", "2"]);
    }

    #[test]
    fn manifest_requires_pivot_and_paths() {
        let m = CorpusManifest {
            split: "train".into(),
            languages: vec!["de".into()],
            text_paths: IndexMap::new(),
            vtok_path: None,
            pivot: "en".into(),
            image_ids_path: None,
        };
        assert!(matches!(m.validate(), Err(Error::Manifest(_))));
    }
}
