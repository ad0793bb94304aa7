//! Byte-level byte-pair encoding. Each whitespace-separated word is encoded
//! as its UTF-8 bytes preceded by a single space byte; merges never cross
//! word boundaries.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};

use super::vocab::{unescape_bytes, Piece, Vocabulary, MASK, UNK};
use crate::error::{Error, Result};

const WORD_START: u8 = b' ';

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    vocab: Vocabulary,
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), (usize, u32)>,
}

/// Learns a shared vocabulary over all lines of every language at once.
/// Pair ties are broken by the lexicographically smallest
/// `(left bytes, right bytes)`.
pub fn train_bpe<'a, S: AsRef<str>>(
    lines: impl IntoIterator<Item = &'a str>,
    languages: &[S],
    vocab_size: usize,
    min_freq: u64,
) -> Result<Tokenizer> {
    let mut word_counts: BTreeMap<Vec<u8>, u64> = BTreeMap::new();
    for line in lines {
        for word in line.split_whitespace() {
            *word_counts.entry(word_bytes(word)).or_default() += 1;
        }
    }
    if word_counts.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let alphabet: BTreeSet<u8> = word_counts.keys().flatten().copied().collect();

    let mut vocab = Vocabulary::with_languages(languages)?;
    let minimum = vocab.len() + alphabet.len();
    if vocab_size < minimum {
        return Err(Error::Config(format!(
            "vocab size {vocab_size} below minimum {minimum} (reserved + tags + byte alphabet)"
        )));
    }
    for &b in &alphabet {
        vocab.push_bytes(vec![b]);
    }

    let mut words: Vec<(Vec<u32>, i64)> = word_counts
        .iter()
        .map(|(w, &c)| {
            let ids = w.iter().map(|b| vocab.id_of_bytes(&[*b]).unwrap()).collect();
            (ids, c as i64)
        })
        .collect();

    let mut pair_counts: HashMap<(u32, u32), i64> = HashMap::new();
    let mut occurs: HashMap<(u32, u32), BTreeSet<usize>> = HashMap::new();
    for (wi, (ids, count)) in words.iter().enumerate() {
        for p in ids.windows(2) {
            *pair_counts.entry((p[0], p[1])).or_default() += count;
            occurs.entry((p[0], p[1])).or_default().insert(wi);
        }
    }

    let mut merges = Vec::new();
    let bytes_of = |vocab: &Vocabulary, id: u32| match vocab.piece(id) {
        Some(Piece::Bytes(b)) => b.clone(),
        _ => unreachable!("merge operands are byte pieces"),
    };
    while vocab.len() < vocab_size {
        let Some(max) = pair_counts.values().copied().filter(|&c| c > 0).max() else {
            break;
        };
        if (max as u64) < min_freq.max(1) {
            break;
        }
        let best = pair_counts
            .iter()
            .filter(|&(_, &c)| c == max)
            .map(|(&p, _)| (bytes_of(&vocab, p.0), bytes_of(&vocab, p.1), p))
            .min()
            .map(|(_, _, p)| p)
            .unwrap();

        let mut merged = bytes_of(&vocab, best.0);
        merged.extend(bytes_of(&vocab, best.1));
        let new_id = vocab.push_bytes(merged);
        merges.push(best);

        for wi in occurs.remove(&best).unwrap_or_default() {
            let (ids, count) = &mut words[wi];
            for p in ids.windows(2) {
                *pair_counts.get_mut(&(p[0], p[1])).unwrap() -= *count;
            }
            *ids = merge_pair(ids, best, new_id);
            for p in ids.windows(2) {
                *pair_counts.entry((p[0], p[1])).or_default() += *count;
                occurs.entry((p[0], p[1])).or_default().insert(wi);
            }
        }
        pair_counts.retain(|_, c| *c > 0);
    }
    Tokenizer::new(vocab, merges)
}

fn word_bytes(word: &str) -> Vec<u8> {
    let mut b = Vec::with_capacity(word.len() + 1);
    b.push(WORD_START);
    b.extend_from_slice(word.as_bytes());
    b
}

fn merge_pair(ids: &[u32], pair: (u32, u32), new_id: u32) -> Vec<u32> {
    let mut out = Vec::with_capacity(ids.len());
    let mut i = 0;
    while i < ids.len() {
        if i + 1 < ids.len() && (ids[i], ids[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(ids[i]);
            i += 1;
        }
    }
    out
}

impl Tokenizer {
    pub fn new(vocab: Vocabulary, merges: Vec<(u32, u32)>) -> Result<Self> {
        let mut ranks = HashMap::new();
        for (rank, &(a, b)) in merges.iter().enumerate() {
            let (Some(Piece::Bytes(left)), Some(Piece::Bytes(right))) = (vocab.piece(a), vocab.piece(b))
            else {
                return Err(Error::Config(format!("merge {rank} references non-byte tokens")));
            };
            let mut joined = left.clone();
            joined.extend(right);
            let id = vocab
                .id_of_bytes(&joined)
                .ok_or_else(|| Error::Config(format!("merge {rank} result missing from vocabulary")))?;
            ranks.entry((a, b)).or_insert((rank, id));
        }
        Ok(Self {
            vocab,
            merges,
            ranks,
        })
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    /// Encodes whitespace-normalized text. Bytes outside the learned
    /// alphabet become `UNK`.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for word in text.split_whitespace() {
            out.extend(self.encode_word(word));
        }
        out
    }

    fn encode_word(&self, word: &str) -> Vec<u32> {
        let mut ids: Vec<u32> = word_bytes(word)
            .iter()
            .map(|&b| self.vocab.id_of_bytes(&[b]).unwrap_or(UNK))
            .collect();
        loop {
            let best = ids
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0], p[1])).map(|&(r, id)| (r, (p[0], p[1]), id)))
                .min();
            let Some((_, pair, id)) = best else {
                break;
            };
            ids = merge_pair(&ids, pair, id);
        }
        ids
    }

    /// Inverse of [`Tokenizer::encode`]. Language tags and control tokens
    /// are dropped; `MASK` renders as a `<mask>` word.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut bytes = Vec::new();
        for &id in ids {
            match self.vocab.piece(id) {
                Some(Piece::Bytes(b)) => bytes.extend_from_slice(b),
                Some(Piece::Reserved(r)) if *r == MASK => bytes.extend_from_slice(b" <mask>"),
                Some(Piece::Reserved(r)) if *r == UNK => {
                    bytes.extend_from_slice("\u{fffd}".as_bytes())
                }
                _ => {}
            }
        }
        let text = String::from_utf8_lossy(&bytes);
        text.strip_prefix(' ').unwrap_or(&text).to_string()
    }

    pub fn merges_to_string(&self) -> String {
        let mut out = String::new();
        for &(a, b) in &self.merges {
            out.push_str(&self.vocab.token_string(a));
            out.push(' ');
            out.push_str(&self.vocab.token_string(b));
            out.push('\n');
        }
        out
    }

    pub fn from_strings(vocab_text: &str, merges_text: &str) -> Result<Self> {
        let vocab = Vocabulary::from_file_string(vocab_text)?;
        let mut merges = Vec::new();
        for (i, line) in merges_text.lines().enumerate() {
            let bad = || Error::Config(format!("merges line {}: `{line}`", i + 1));
            let (a, b) = line.split_once(' ').ok_or_else(bad)?;
            let a = unescape_bytes(a).and_then(|x| vocab.id_of_bytes(&x)).ok_or_else(bad)?;
            let b = unescape_bytes(b).and_then(|x| vocab.id_of_bytes(&x)).ok_or_else(bad)?;
            merges.push((a, b));
        }
        Self::new(vocab, merges)
    }

    pub fn paths(prefix: &Path) -> (PathBuf, PathBuf) {
        let mut v = prefix.as_os_str().to_owned();
        v.push(".vocab");
        let mut m = prefix.as_os_str().to_owned();
        m.push(".merges");
        (v.into(), m.into())
    }

    /// Writes `<prefix>.vocab` and `<prefix>.merges`.
    pub fn save(&self, prefix: &Path) -> Result<()> {
        let (vp, mp) = Self::paths(prefix);
        std::fs::write(&vp, self.vocab.to_file_string()).map_err(|e| Error::io(&vp, e))?;
        std::fs::write(&mp, self.merges_to_string()).map_err(|e| Error::io(&mp, e))?;
        Ok(())
    }

    pub fn load(prefix: &Path) -> Result<Self> {
        let (vp, mp) = Self::paths(prefix);
        let v = std::fs::read_to_string(&vp).map_err(|e| Error::io(&vp, e))?;
        let m = std::fs::read_to_string(&mp).map_err(|e| Error::io(&mp, e))?;
        Self::from_strings(&v, &m)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    const LANGS: [&str; 2] = ["en", "de"];

    /// Sample sentences in seven languages.
    pub(crate) const SAMPLES: [&str; 7] = [
        "A man in a pink shirt throws a ball.",
        "Ein Mann in einem pinken Hemd wirft einen Ball.",
        "Un homme en chemise rose lance une balle.",
        "Muž v růžové košili hází míč.",
        "Vīrietis rozā kreklā met bumbu.",
        "गुलाबी शर्ट में एक आदमी गेंद फेंकता है।",
        "Pembe gömlekli bir adam top atıyor.",
    ];

    #[test]
    fn first_merge_is_most_frequent_pair() {
        // pairs of " aaab": (" ",a)×1 (a,a)×2 (a,b)×1, each word seen twice
        let minimum = 5 + 2 + 3;
        let tok = train_bpe(["aaab aaab"], &LANGS, minimum + 1, 1).unwrap();
        let v = tok.vocab();
        assert_eq!(tok.merges().len(), 1);
        let (a, b) = tok.merges()[0];
        assert_eq!((v.token_string(a), v.token_string(b)), ("a".into(), "a".into()));
    }

    #[test]
    fn minimum_vocab_has_no_merges() {
        let tok = train_bpe(["aaab aaab"], &LANGS, 10, 1).unwrap();
        assert!(tok.merges().is_empty());
        assert_eq!(tok.vocab().len(), 10);
        assert!(matches!(train_bpe(["aaab"], &LANGS, 9, 1), Err(Error::Config(_))));
        assert!(matches!(train_bpe(["  "], &LANGS, 100, 1), Err(Error::Empty(_))));
    }

    #[test]
    fn training_is_deterministic() {
        let a = train_bpe(SAMPLES, &LANGS, 120, 1).unwrap();
        let b = train_bpe(SAMPLES, &LANGS, 120, 1).unwrap();
        assert_eq!(a.merges_to_string(), b.merges_to_string());
        assert_eq!(a.vocab(), b.vocab());
    }

    #[test]
    fn min_freq_stops_merging() {
        let tok = train_bpe(["abc abd"], &LANGS, 100, 2).unwrap();
        // only (" ",a) and (a,b) occur twice; after merging one, the other
        // becomes (" a",b) with count 2; then nothing reaches 2
        assert_eq!(tok.merges().len(), 2);
    }

    #[test]
    fn greedy_merges_match_hand_simulation() {
        // merges learned: (a,a) -> aa, then (" ", aa) -> " aa", then (" aa", a) -> " aaa", ...
        let tok = train_bpe(["aaab aaab"], &LANGS, 13, 1).unwrap();
        let v = tok.vocab();
        let names: Vec<String> = tok
            .merges()
            .iter()
            .map(|&(a, b)| format!("{}+{}", v.token_string(a), v.token_string(b)))
            .collect();
        assert_eq!(names, ["a+a", "\\x20+aa", "\\x20aa+a"]);
        // " aaab": bytes [␠ a a a b]; rank 0 merges the first (a,a) only
        // -> [␠ aa a b]; rank 1 -> [␠aa a b]; rank 2 -> [␠aaa b]
        let ids = tok.encode("aaab");
        let pieces: Vec<String> = ids.iter().map(|&i| v.token_string(i)).collect();
        assert_eq!(pieces, ["\\x20aaa", "b"]);
    }

    #[test]
    fn empty_and_round_trip() {
        let tok = train_bpe(SAMPLES, &LANGS, 200, 1).unwrap();
        assert!(tok.encode("").is_empty());
        assert_eq!(tok.decode(&[]), "");
        for s in SAMPLES {
            assert_eq!(tok.decode(&tok.encode(s)), s);
        }
        assert_eq!(tok.decode(&tok.encode("  A   man \t in ")), "A man in");
    }

    #[test]
    fn unknown_bytes_become_unk() {
        let tok = train_bpe(["abc"], &LANGS, 20, 1).unwrap();
        let ids = tok.encode("abz");
        assert!(ids.contains(&UNK));
    }

    #[test]
    fn save_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let tok = train_bpe(SAMPLES, &LANGS, 150, 1).unwrap();
        let prefix = dir.path().join("bpe");
        tok.save(&prefix).unwrap();
        let back = Tokenizer::load(&prefix).unwrap();
        assert_eq!(back, tok);
    }

    proptest! {
        #[test]
        fn decode_inverts_encode_on_normalized_text(words in prop::collection::vec("[a-zA-Z .,]{1,8}", 0..6)) {
            let tok = train_bpe(["the quick brown fox jumps over the lazy dog ABCDEFGHIJKLMNOPQRSTUVWXYZ ,."], &LANGS, 90, 1).unwrap();
            let text = words.join(" ");
            let normalized = text.split_whitespace().collect::<Vec<_>>().join(" ");
            prop_assert_eq!(tok.decode(&tok.encode(&text)), normalized);
        }
    }
}
