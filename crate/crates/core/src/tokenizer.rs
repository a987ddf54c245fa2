//! Character-level pair-merge subword tokenizer shared by expert and learner.
//!
//! Words are split into characters with a leading word-boundary marker, and
//! the most frequent adjacent symbol pair is merged repeatedly until the
//! vocabulary reaches its target size. Merges never cross word boundaries.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};
use crate::synthlang::{LanguageTag, Sentence};

pub const WORD_MARK: char = '\u{2581}';
pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
pub const UNK: u32 = 3;
const RESERVED: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

#[derive(Clone, Debug, PartialEq, Eq, Hash, Default)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
}

impl TokenSequence {
    pub fn new(ids: Vec<u32>) -> Self {
        TokenSequence { ids }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Side {
    Source,
    Target,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Tokenizer {
    merges: Vec<(String, String)>,
    vocab: Vec<String>,
    ids: HashMap<String, u32>,
    merge_rank: HashMap<(String, String), usize>,
    tags: BTreeMap<LanguageTag, u32>,
}

fn tag_token(tag: &LanguageTag) -> String {
    format!("<2{}>", tag.as_str())
}

fn word_symbols(word: &str) -> Vec<String> {
    std::iter::once(WORD_MARK)
        .chain(word.chars())
        .map(String::from)
        .collect()
}

/// Trains a tokenizer over both sides of every corpus, in the given order.
///
/// The vocabulary holds the four reserved symbols, one tag per language seen,
/// every character seen, then merged symbols until `vocab_size` is reached.
pub fn train_tokenizer(corpora: &[ParallelCorpus], vocab_size: usize) -> Result<Tokenizer> {
    let mut langs: Vec<LanguageTag> = Vec::new();
    let mut word_freq: BTreeMap<&str, u64> = BTreeMap::new();
    for c in corpora {
        for l in [c.src_lang(), c.tgt_lang()] {
            if !langs.contains(l) {
                langs.push(l.clone());
            }
        }
        for (s, t) in c.pairs() {
            for w in s.tokens().iter().chain(t.tokens()) {
                *word_freq.entry(w.as_str()).or_default() += 1;
            }
        }
    }
    langs.sort();

    let mut vocab: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    let mut tags = BTreeMap::new();
    for l in &langs {
        tags.insert(l.clone(), vocab.len() as u32);
        vocab.push(tag_token(l));
    }
    let mut chars: Vec<char> = word_freq.keys().flat_map(|w| w.chars()).collect();
    chars.push(WORD_MARK);
    chars.sort_unstable();
    chars.dedup();
    vocab.extend(chars.iter().map(|c| c.to_string()));
    if vocab_size < vocab.len() {
        return Err(Error::Config(format!(
            "vocab_size {vocab_size} is smaller than the {} reserved, tag and character symbols",
            vocab.len()
        )));
    }
    let mut ids: HashMap<String, u32> = vocab
        .iter()
        .enumerate()
        .map(|(i, s)| (s.clone(), i as u32))
        .collect();

    let mut words: Vec<(Vec<String>, u64)> = word_freq
        .iter()
        .map(|(w, &f)| (word_symbols(w), f))
        .collect();
    let mut merges = Vec::new();
    while vocab.len() < vocab_size {
        let mut counts: HashMap<(&str, &str), u64> = HashMap::new();
        for (syms, f) in &words {
            for p in syms.windows(2) {
                *counts.entry((p[0].as_str(), p[1].as_str())).or_default() += f;
            }
        }
        // Highest count wins; ties go to the lexicographically smallest pair.
        let best = counts
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then_with(|| b.0.cmp(&a.0)))
            .map(|((l, r), _)| (l.to_owned(), r.to_owned()));
        let Some((left, right)) = best else {
            return Err(Error::Config(format!(
                "vocab_size {vocab_size} unreachable: every word is a single symbol at {} entries",
                vocab.len()
            )));
        };
        let merged = format!("{left}{right}");
        for (syms, _) in words.iter_mut() {
            merge_in_place(syms, &left, &right, &merged);
        }
        if !ids.contains_key(&merged) {
            ids.insert(merged.clone(), vocab.len() as u32);
            vocab.push(merged);
        }
        merges.push((left, right));
    }
    Ok(Tokenizer::from_parts(merges, vocab, tags))
}

fn merge_in_place(syms: &mut Vec<String>, left: &str, right: &str, merged: &str) {
    let mut i = 0;
    while i + 1 < syms.len() {
        if syms[i] == left && syms[i + 1] == right {
            syms[i] = merged.to_owned();
            syms.remove(i + 1);
        }
        i += 1;
    }
}

impl Tokenizer {
    fn from_parts(
        merges: Vec<(String, String)>,
        vocab: Vec<String>,
        tags: BTreeMap<LanguageTag, u32>,
    ) -> Self {
        let ids = vocab
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as u32))
            .collect();
        let merge_rank = merges
            .iter()
            .enumerate()
            .map(|(i, m)| (m.clone(), i))
            .collect();
        Tokenizer {
            merges,
            vocab,
            ids,
            merge_rank,
            tags,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn piece(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn id_of(&self, piece: &str) -> Option<u32> {
        self.ids.get(piece).copied()
    }

    pub fn tag_id(&self, tag: &LanguageTag) -> Result<u32> {
        self.tags
            .get(tag)
            .copied()
            .ok_or_else(|| Error::UnknownLanguage(tag.to_string()))
    }

    pub fn languages(&self) -> impl Iterator<Item = &LanguageTag> {
        self.tags.keys()
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < RESERVED.len() + self.tags.len()
    }

    /// Subword ids of one word, applying merges in learned order.
    pub fn encode_word(&self, word: &str) -> Vec<u32> {
        let mut syms = word_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .enumerate()
                .filter_map(|(i, p)| {
                    self.merge_rank
                        .get(&(p[0].clone(), p[1].clone()))
                        .map(|&r| (r, i))
                })
                .min();
            let Some((_, i)) = best else { break };
            let merged = format!("{}{}", syms[i], syms[i + 1]);
            syms[i] = merged;
            syms.remove(i + 1);
        }
        syms.iter()
            .map(|s| self.ids.get(s).copied().unwrap_or(UNK))
            .collect()
    }

    /// Subword ids of a sentence, without any special symbols.
    pub fn encode(&self, s: &Sentence) -> Vec<u32> {
        s.tokens().iter().flat_map(|w| self.encode_word(w)).collect()
    }

    /// Maps ids back to words, skipping reserved and tag symbols.
    pub fn decode(&self, ids: &[u32]) -> Sentence {
        let mut text = String::new();
        for &id in ids {
            if id == UNK {
                text.push_str("<unk>");
            } else if !self.is_special(id) {
                if let Some(p) = self.piece(id) {
                    text.push_str(p);
                }
            }
        }
        Sentence::from_tokens(text.split(WORD_MARK).map(str::to_owned).collect())
    }

    pub fn encode_for_model(
        &self,
        s: &Sentence,
        src: &LanguageTag,
        tgt: &LanguageTag,
        side: Side,
    ) -> Result<TokenSequence> {
        let body = self.encode(s);
        let mut ids = Vec::with_capacity(body.len() + 3);
        match side {
            Side::Source => {
                ids.push(self.tag_id(src)?);
                ids.push(self.tag_id(tgt)?);
            }
            Side::Target => ids.push(BOS),
        }
        ids.extend(body);
        ids.push(EOS);
        Ok(TokenSequence::new(ids))
    }

    /// Merge rules one per line, a blank separator line, then `token<TAB>id`.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (l, r) in &self.merges {
            out.push_str(&format!("{l} {r}\n"));
        }
        out.push('\n');
        for (i, tok) in self.vocab.iter().enumerate() {
            out.push_str(&format!("{tok}\t{i}\n"));
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let (merge_part, vocab_part) = text
            .split_once("\n\n")
            .or_else(|| text.strip_prefix('\n').map(|rest| ("", rest)))
            .ok_or_else(|| Error::parse("tokenizer", "missing blank separator line"))?;
        let mut merges = Vec::new();
        for line in merge_part.lines() {
            let (l, r) = line
                .split_once(' ')
                .ok_or_else(|| Error::parse("tokenizer", format!("bad merge line `{line}`")))?;
            merges.push((l.to_owned(), r.to_owned()));
        }
        let mut vocab = Vec::new();
        for line in vocab_part.lines().filter(|l| !l.is_empty()) {
            let (tok, id) = line
                .rsplit_once('\t')
                .ok_or_else(|| Error::parse("tokenizer", format!("bad vocab line `{line}`")))?;
            let id: usize = id
                .parse()
                .map_err(|e| Error::parse("tokenizer", format!("bad id in `{line}`: {e}")))?;
            if id != vocab.len() {
                return Err(Error::parse("tokenizer", "vocab ids must be dense and in order"));
            }
            vocab.push(tok.to_owned());
        }
        if vocab.len() < RESERVED.len() || vocab[..RESERVED.len()] != RESERVED {
            return Err(Error::parse("tokenizer", "reserved symbols missing"));
        }
        let mut tags = BTreeMap::new();
        for (i, tok) in vocab.iter().enumerate().skip(RESERVED.len()) {
            match tok.strip_prefix("<2").and_then(|t| t.strip_suffix('>')) {
                Some(code) => {
                    tags.insert(LanguageTag::new(code), i as u32);
                }
                None => break,
            }
        }
        Ok(Tokenizer::from_parts(merges, vocab, tags))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }

    /// SHA-256 over the serialized form.
    pub fn hash(&self) -> [u8; 32] {
        let digest = Sha256::digest(self.to_text().as_bytes());
        let mut out = [0u8; 32];
        out.copy_from_slice(&digest);
        out
    }
}

pub fn encode_for_model(
    t: &Tokenizer,
    s: &Sentence,
    src: &LanguageTag,
    tgt: &LanguageTag,
    side: Side,
) -> Result<TokenSequence> {
    t.encode_for_model(s, src, tgt, side)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthlang::{make_language_family, FamilySpec};

    fn toy_corpus(lines: &[&str]) -> ParallelCorpus {
        let pairs = lines
            .iter()
            .map(|l| (Sentence::parse(l), Sentence::parse(l)))
            .collect();
        ParallelCorpus::new("aa".into(), "bb".into(), pairs).unwrap()
    }

    fn base_size(c: &ParallelCorpus) -> usize {
        let mut chars: Vec<char> = c
            .pairs()
            .iter()
            .flat_map(|(s, _)| s.tokens().iter().flat_map(|w| w.chars()).collect::<Vec<_>>())
            .collect();
        chars.push(WORD_MARK);
        chars.sort_unstable();
        chars.dedup();
        4 + 2 + chars.len()
    }

    #[test]
    fn zero_merges_splits_to_characters() {
        let c = toy_corpus(&["abc ab", "ca"]);
        let tok = train_tokenizer(&[c.clone()], base_size(&c)).unwrap();
        assert!(tok.merges().is_empty());
        let ids = tok.encode(&Sentence::parse("abc"));
        assert_eq!(ids.len(), 4);
        assert!(train_tokenizer(&[c.clone()], base_size(&c) - 1).is_err());
    }

    #[test]
    fn most_frequent_pair_merged_first() {
        // Counts per side are doubled because both corpus sides are identical.
        // Pair tallies (single side): (a,b) appears in "ab" x3 and "abc" x1 -> 4,
        // (▁,a) 4, (b,c) 1, (▁,c) 1, (c,a) 1 ... (▁,a) ties with (a,b) at 4;
        // (a,b) < (▁,a) lexicographically since 'a' < '\u{2581}'.
        let c = toy_corpus(&["ab ab", "abc", "ab ca"]);
        let tok = train_tokenizer(&[c.clone()], base_size(&c) + 1).unwrap();
        assert_eq!(tok.merges()[0], ("a".to_string(), "b".to_string()));
        let c2 = toy_corpus(&["xy xy xy", "zz"]);
        let tok2 = train_tokenizer(&[c2.clone()], base_size(&c2) + 1).unwrap();
        // (▁,x) = 3, (x,y) = 3; 'x' < '▁' so (x,y) wins the tie.
        assert_eq!(tok2.merges()[0], ("x".to_string(), "y".to_string()));
    }

    #[test]
    fn round_trip_and_source_format() {
        let spec = FamilySpec {
            pivot: "pv".into(),
            originals: vec!["o1".into(), "o2".into()],
            new: vec!["nx".into()],
            lexicon_size: 50,
            seed: 0,
            suffix_rate: 0.2,
            reorder_rate: 0.5,
        };
        let fam = make_language_family(&spec, 1).unwrap();
        let corpora: Vec<_> = ["o1", "o2", "nx"]
            .iter()
            .map(|l| fam.sample_gold_corpus(&(*l).into(), 200, 3).unwrap())
            .collect();
        let tok = train_tokenizer(&corpora, 200).unwrap();
        assert_eq!(tok.vocab_size(), 200);
        for c in &corpora {
            for (s, t) in c.pairs() {
                assert_eq!(&tok.decode(&tok.encode(s)), s);
                assert_eq!(&tok.decode(&tok.encode(t)), t);
            }
        }
        let (s, _) = &corpora[0].pairs()[0];
        let src = tok
            .encode_for_model(s, &"o1".into(), &"pv".into(), Side::Source)
            .unwrap();
        assert_eq!(src.ids[0], tok.tag_id(&"o1".into()).unwrap());
        assert_eq!(src.ids[1], tok.tag_id(&"pv".into()).unwrap());
        assert_eq!(*src.ids.last().unwrap(), EOS);
        assert_eq!(&tok.decode(&src.ids), s);
        let other = tok
            .encode_for_model(s, &"o1".into(), &"o2".into(), Side::Source)
            .unwrap();
        let diffs = src.ids.iter().zip(&other.ids).filter(|(a, b)| a != b).count();
        assert_eq!(diffs, 1);
        let tgt = tok
            .encode_for_model(s, &"o1".into(), &"pv".into(), Side::Target)
            .unwrap();
        assert_eq!(tgt.ids[0], BOS);
        assert_eq!(tgt.ids.iter().filter(|&&i| i == BOS).count(), 1);
        assert_eq!(tgt.ids.iter().filter(|&&i| i == EOS).count(), 1);

        let back = Tokenizer::from_text(&tok.to_text()).unwrap();
        assert_eq!(back, tok);
        assert_eq!(back.hash(), tok.hash());
    }

    #[test]
    fn unknown_characters_map_to_unk() {
        let c = toy_corpus(&["ab"]);
        let tok = train_tokenizer(&[c.clone()], base_size(&c)).unwrap();
        assert_eq!(tok.encode(&Sentence::parse("aq")), vec![tok.id_of("▁").unwrap(), tok.id_of("a").unwrap(), UNK]);
    }
}
