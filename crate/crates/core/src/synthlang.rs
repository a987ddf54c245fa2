//! Synthetic language families.
//!
//! Every language in a family is a word-level substitution cipher over a
//! shared pivot lexicon. On top of the substitution, each non-pivot language
//! marks a fixed 20% of its words with a language-specific suffix token and
//! may swap adjacent words pairwise. Surface lexicons are pairwise disjoint,
//! so translation and language identification both have exact oracles.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};

pub const MIN_LEXICON_SIZE: usize = 50;
pub const MIN_SENTENCE_LEN: usize = 3;
pub const MAX_SENTENCE_LEN: usize = 20;
pub const ZIPF_EXPONENT: f64 = 1.1;

const CONSONANTS: &[char] = &[
    'p', 't', 'k', 'b', 'd', 'g', 'm', 'n', 'l', 'r', 's', 'v', 'z', 'f', 'h', 'j', 'w',
];
const VOWELS: &[char] = &['a', 'e', 'i', 'o', 'u'];

#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LanguageTag(String);

impl LanguageTag {
    pub fn new(code: impl Into<String>) -> Self {
        LanguageTag(code.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LanguageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for LanguageTag {
    fn from(s: &str) -> Self {
        LanguageTag::new(s)
    }
}

/// A whitespace-tokenized sentence.
///
/// Valid corpus sentences are non-empty; model hypotheses may be empty, so
/// emptiness is only enforced where a valid sentence is required.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Sentence {
    tokens: Vec<String>,
}

impl Sentence {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Empty("sentence"));
        }
        if tokens.iter().any(|t| t.is_empty() || t.contains(char::is_whitespace)) {
            return Err(Error::parse("sentence", "tokens must be non-empty and whitespace-free"));
        }
        Ok(Sentence { tokens })
    }

    /// Builds a possibly empty sentence (used for model outputs).
    pub fn from_tokens(tokens: Vec<String>) -> Self {
        Sentence {
            tokens: tokens.into_iter().filter(|t| !t.is_empty()).collect(),
        }
    }

    /// Splits on runs of whitespace; an all-blank line yields an empty sentence.
    pub fn parse(line: &str) -> Self {
        Sentence {
            tokens: line.split_whitespace().map(str::to_owned).collect(),
        }
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

impl fmt::Display for Sentence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.tokens.join(" "))
    }
}

fn default_suffix_rate() -> f64 {
    0.2
}

fn default_reorder_rate() -> f64 {
    0.5
}

/// Family configuration, as read from a family spec file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FamilySpec {
    pub pivot: String,
    pub originals: Vec<String>,
    pub new: Vec<String>,
    pub lexicon_size: usize,
    #[serde(default)]
    pub seed: u64,
    /// Fraction of each language's lexicon carrying the suffix token.
    #[serde(default = "default_suffix_rate")]
    pub suffix_rate: f64,
    /// Probability that a non-pivot language swaps adjacent words.
    #[serde(default = "default_reorder_rate")]
    pub reorder_rate: f64,
}

impl FamilySpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse("family spec", e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("family spec serializes")
    }

    fn validate(&self) -> Result<()> {
        if self.pivot.is_empty() {
            return Err(Error::Config("family needs a pivot language".into()));
        }
        if self.originals.len() < 2 {
            return Err(Error::Config("family needs at least 2 original languages".into()));
        }
        if self.new.is_empty() {
            return Err(Error::Config("family needs at least 1 new language".into()));
        }
        let mut seen = HashSet::new();
        for code in std::iter::once(&self.pivot).chain(&self.originals).chain(&self.new) {
            if code.is_empty() || code.contains(char::is_whitespace) {
                return Err(Error::Config(format!("invalid language code `{code}`")));
            }
            if !seen.insert(code) {
                return Err(Error::Config(format!("duplicate language code `{code}`")));
            }
        }
        if self.lexicon_size < MIN_LEXICON_SIZE {
            return Err(Error::Config(format!(
                "lexicon_size {} is below the minimum of {MIN_LEXICON_SIZE}",
                self.lexicon_size
            )));
        }
        let n_langs = seen.len();
        if n_langs * self.lexicon_size > word_capacity() {
            return Err(Error::Config(format!(
                "cannot build {n_langs} disjoint lexicons of size {}; at most {} distinct words",
                self.lexicon_size,
                word_capacity()
            )));
        }
        if !(0.0..=1.0).contains(&self.suffix_rate) || !(0.0..=1.0).contains(&self.reorder_rate) {
            return Err(Error::Config("suffix_rate and reorder_rate must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

fn word_capacity() -> usize {
    let syl = CONSONANTS.len() * VOWELS.len();
    syl * syl + syl * syl * syl
}

/// One language's transform relative to the pivot.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LanguageRules {
    pub tag: LanguageTag,
    /// Surface word for each pivot lexicon index.
    pub surfaces: Vec<String>,
    /// Suffix token, absent for the pivot.
    pub suffix: Option<String>,
    /// Which pivot indices carry the suffix.
    pub affixed: Vec<bool>,
    pub swap_adjacent: bool,
}

impl LanguageRules {
    /// Renders a pivot-index sequence in this language.
    fn render(&self, indices: &[usize]) -> Sentence {
        let mut order: Vec<usize> = indices.to_vec();
        if self.swap_adjacent {
            swap_pairs(&mut order);
        }
        let mut tokens = Vec::with_capacity(order.len() + order.len() / 4);
        for idx in order {
            tokens.push(self.surfaces[idx].clone());
            if self.affixed[idx] {
                if let Some(sfx) = &self.suffix {
                    tokens.push(sfx.clone());
                }
            }
        }
        Sentence { tokens }
    }
}

fn swap_pairs(v: &mut [usize]) {
    for pair in v.chunks_exact_mut(2) {
        pair.swap(0, 1);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageFamily {
    pivot: LanguageTag,
    originals: Vec<LanguageTag>,
    new_langs: Vec<LanguageTag>,
    /// Index 0 is the pivot, then originals, then new languages.
    languages: Vec<LanguageRules>,
    lexicon_size: usize,
    zipf_weights: Vec<f64>,
    by_tag: HashMap<LanguageTag, usize>,
    /// surface token -> (language index, pivot index or None for a suffix)
    owner: HashMap<String, (usize, Option<usize>)>,
}

/// Builds a family. Deterministic for a fixed `(spec, seed)`; the spec's own
/// `seed` field is ignored in favour of the argument.
pub fn make_language_family(spec: &FamilySpec, seed: u64) -> Result<LanguageFamily> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let codes: Vec<&String> = std::iter::once(&spec.pivot)
        .chain(&spec.originals)
        .chain(&spec.new)
        .collect();

    let mut used = HashSet::new();
    let mut suffix_used = HashSet::new();
    let mut languages = Vec::with_capacity(codes.len());
    for (li, code) in codes.iter().enumerate() {
        let mut surfaces = Vec::with_capacity(spec.lexicon_size);
        while surfaces.len() < spec.lexicon_size {
            let n_syl = if rng.random_bool(0.7) { 2 } else { 3 };
            let w = random_word(&mut rng, n_syl);
            if used.insert(w.clone()) {
                surfaces.push(w);
            }
        }
        let is_pivot = li == 0;
        let (suffix, affixed, swap_adjacent) = if is_pivot {
            (None, vec![false; spec.lexicon_size], false)
        } else {
            let sfx = loop {
                let s = format!("-{}", random_word(&mut rng, 1));
                if suffix_used.insert(s.clone()) {
                    break s;
                }
            };
            let n_affixed = (spec.lexicon_size as f64 * spec.suffix_rate).round() as usize;
            let mut idx: Vec<usize> = (0..spec.lexicon_size).collect();
            idx.shuffle(&mut rng);
            let mut affixed = vec![false; spec.lexicon_size];
            for &i in &idx[..n_affixed] {
                affixed[i] = true;
            }
            (Some(sfx), affixed, rng.random_bool(spec.reorder_rate))
        };
        languages.push(LanguageRules {
            tag: LanguageTag::new(code.as_str()),
            surfaces,
            suffix,
            affixed,
            swap_adjacent,
        });
    }

    let zipf_weights = (1..=spec.lexicon_size)
        .map(|r| 1.0 / (r as f64).powf(ZIPF_EXPONENT))
        .collect();
    Ok(LanguageFamily::assemble(spec, languages, zipf_weights))
}

fn random_word<R: Rng>(rng: &mut R, syllables: usize) -> String {
    let mut w = String::with_capacity(syllables * 2);
    for _ in 0..syllables {
        w.push(CONSONANTS[rng.random_range(0..CONSONANTS.len())]);
        w.push(VOWELS[rng.random_range(0..VOWELS.len())]);
    }
    w
}

impl LanguageFamily {
    fn assemble(spec: &FamilySpec, languages: Vec<LanguageRules>, zipf_weights: Vec<f64>) -> Self {
        let mut by_tag = HashMap::new();
        let mut owner = HashMap::new();
        for (li, lang) in languages.iter().enumerate() {
            by_tag.insert(lang.tag.clone(), li);
            for (wi, w) in lang.surfaces.iter().enumerate() {
                owner.insert(w.clone(), (li, Some(wi)));
            }
            if let Some(s) = &lang.suffix {
                owner.insert(s.clone(), (li, None));
            }
        }
        LanguageFamily {
            pivot: LanguageTag::new(spec.pivot.as_str()),
            originals: spec.originals.iter().map(|c| LanguageTag::new(c.as_str())).collect(),
            new_langs: spec.new.iter().map(|c| LanguageTag::new(c.as_str())).collect(),
            languages,
            lexicon_size: spec.lexicon_size,
            zipf_weights,
            by_tag,
            owner,
        }
    }

    pub fn pivot(&self) -> &LanguageTag {
        &self.pivot
    }

    pub fn originals(&self) -> &[LanguageTag] {
        &self.originals
    }

    pub fn new_langs(&self) -> &[LanguageTag] {
        &self.new_langs
    }

    /// Pivot, originals and new languages, in declaration order.
    pub fn all_tags(&self) -> Vec<LanguageTag> {
        self.languages.iter().map(|l| l.tag.clone()).collect()
    }

    pub fn lexicon_size(&self) -> usize {
        self.lexicon_size
    }

    pub fn rules(&self, tag: &LanguageTag) -> Result<&LanguageRules> {
        self.by_tag
            .get(tag)
            .map(|&i| &self.languages[i])
            .ok_or_else(|| Error::UnknownLanguage(tag.to_string()))
    }

    /// Every surface token (words and suffix) of one language.
    pub fn lexicon(&self, tag: &LanguageTag) -> Result<Vec<&str>> {
        let r = self.rules(tag)?;
        let mut out: Vec<&str> = r.surfaces.iter().map(String::as_str).collect();
        out.extend(r.suffix.as_deref());
        Ok(out)
    }

    /// Draws a pivot-index sequence: uniform length in [3, 20], Zipf unigrams.
    pub fn sample_indices<R: Rng>(&self, rng: &mut R) -> Vec<usize> {
        let dist = WeightedIndex::new(&self.zipf_weights).expect("zipf weights are positive");
        let len = rng.random_range(MIN_SENTENCE_LEN..=MAX_SENTENCE_LEN);
        (0..len).map(|_| dist.sample(rng)).collect()
    }

    pub fn render(&self, indices: &[usize], lang: &LanguageTag) -> Result<Sentence> {
        Ok(self.rules(lang)?.render(indices))
    }

    pub fn sample_sentence<R: Rng>(&self, lang: &LanguageTag, rng: &mut R) -> Result<Sentence> {
        let idx = self.sample_indices(rng);
        self.render(&idx, lang)
    }

    /// Parses a sentence of `lang` back into pivot indices (in pivot order).
    pub fn parse_indices(&self, s: &Sentence, lang: &LanguageTag) -> Result<Vec<usize>> {
        let li = *self
            .by_tag
            .get(lang)
            .ok_or_else(|| Error::UnknownLanguage(lang.to_string()))?;
        let rules = &self.languages[li];
        let unknown = |tok: &str| Error::UnknownToken {
            token: tok.to_owned(),
            lang: lang.to_string(),
        };
        if s.is_empty() {
            return Err(Error::Empty("sentence"));
        }
        let mut indices = Vec::with_capacity(s.len());
        let mut toks = s.tokens().iter().peekable();
        while let Some(tok) = toks.next() {
            let idx = match self.owner.get(tok.as_str()) {
                Some(&(owner, Some(idx))) if owner == li => idx,
                _ => return Err(unknown(tok)),
            };
            if rules.affixed[idx] {
                match toks.next() {
                    Some(sfx) if Some(sfx) == rules.suffix.as_ref() => {}
                    Some(other) => return Err(unknown(other)),
                    None => {
                        return Err(Error::parse(
                            "sentence",
                            format!("`{tok}` must be followed by the suffix of `{lang}`"),
                        ))
                    }
                }
            }
            indices.push(idx);
        }
        if rules.swap_adjacent {
            swap_pairs(&mut indices);
        }
        Ok(indices)
    }

    /// Exact translation via the pivot.
    pub fn oracle_translate(
        &self,
        s: &Sentence,
        src: &LanguageTag,
        tgt: &LanguageTag,
    ) -> Result<Sentence> {
        let indices = self.parse_indices(s, src)?;
        self.render(&indices, tgt)
    }

    /// The language owning a strict majority of the sentence's tokens.
    pub fn oracle_langid(&self, s: &Sentence) -> Option<LanguageTag> {
        if s.is_empty() {
            return None;
        }
        let mut counts = vec![0usize; self.languages.len()];
        for tok in s.tokens() {
            if let Some(&(li, _)) = self.owner.get(tok.as_str()) {
                counts[li] += 1;
            }
        }
        counts
            .iter()
            .position(|&c| 2 * c > s.len())
            .map(|li| self.languages[li].tag.clone())
    }

    /// `n` oracle-consistent `(lang, pivot)` pairs, deterministic per seed.
    pub fn sample_gold_corpus(&self, lang: &LanguageTag, n: usize, seed: u64) -> Result<ParallelCorpus> {
        self.rules(lang)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pairs = Vec::with_capacity(n);
        for _ in 0..n {
            let idx = self.sample_indices(&mut rng);
            pairs.push((self.render(&idx, lang)?, self.render(&idx, &self.pivot)?));
        }
        ParallelCorpus::new(lang.clone(), self.pivot.clone(), pairs)
    }

    /// Canonical text form of every table; equal families serialize identically.
    pub fn serialize_tables(&self) -> String {
        let mut out = String::new();
        for lang in &self.languages {
            out.push_str(&format!(
                "lang\t{}\tsuffix={}\tswap={}\n",
                lang.tag,
                lang.suffix.as_deref().unwrap_or("-"),
                u8::from(lang.swap_adjacent)
            ));
            for (i, w) in lang.surfaces.iter().enumerate() {
                out.push_str(&format!("{i}\t{w}\t{}\n", u8::from(lang.affixed[i])));
            }
        }
        out
    }

    /// Set of languages whose lexicons a sentence touches (diagnostics).
    pub fn languages_in(&self, s: &Sentence) -> BTreeSet<LanguageTag> {
        s.tokens()
            .iter()
            .filter_map(|t| self.owner.get(t.as_str()))
            .map(|&(li, _)| self.languages[li].tag.clone())
            .collect()
    }
}

pub fn oracle_translate(
    family: &LanguageFamily,
    s: &Sentence,
    src: &LanguageTag,
    tgt: &LanguageTag,
) -> Result<Sentence> {
    family.oracle_translate(s, src, tgt)
}

pub fn oracle_langid(family: &LanguageFamily, s: &Sentence) -> Option<LanguageTag> {
    family.oracle_langid(s)
}

pub fn sample_gold_corpus(
    family: &LanguageFamily,
    lang: &LanguageTag,
    n: usize,
    seed: u64,
) -> Result<ParallelCorpus> {
    family.sample_gold_corpus(lang, n, seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n_orig: usize) -> FamilySpec {
        FamilySpec {
            pivot: "pv".into(),
            originals: (1..=n_orig).map(|i| format!("o{i}")).collect(),
            new: vec!["nx".into()],
            lexicon_size: 60,
            seed: 7,
            suffix_rate: 0.2,
            reorder_rate: 0.5,
        }
    }

    #[test]
    fn six_originals_disjoint_lexicons() {
        let fam = make_language_family(&spec(6), 7).unwrap();
        assert_eq!(fam.originals().len(), 6);
        let tags = fam.all_tags();
        let mut seen = HashSet::new();
        for t in &tags {
            for w in fam.lexicon(t).unwrap() {
                assert!(seen.insert(w.to_owned()), "{w} shared");
            }
        }
    }

    #[test]
    fn deterministic_and_seed_sensitive() {
        let a = make_language_family(&spec(3), 7).unwrap();
        let b = make_language_family(&spec(3), 7).unwrap();
        let c = make_language_family(&spec(3), 8).unwrap();
        assert_eq!(a.serialize_tables(), b.serialize_tables());
        assert_eq!(a, b);
        assert_ne!(a.serialize_tables(), c.serialize_tables());
    }

    #[test]
    fn rejects_small_lexicon_and_bad_specs() {
        let mut s = spec(3);
        s.lexicon_size = 49;
        assert!(matches!(make_language_family(&s, 1), Err(Error::Config(_))));
        let mut s = spec(1);
        s.lexicon_size = 60;
        assert!(make_language_family(&s, 1).is_err());
        let mut s = spec(3);
        s.new.clear();
        assert!(make_language_family(&s, 1).is_err());
        let mut s = spec(3);
        s.new = vec!["o1".into()];
        assert!(make_language_family(&s, 1).is_err());
        let mut s = spec(3);
        s.lexicon_size = 200_000;
        assert!(make_language_family(&s, 1).is_err());
    }

    #[test]
    fn suffix_rate_is_twenty_percent() {
        let fam = make_language_family(&spec(3), 3).unwrap();
        for t in fam.originals() {
            let r = fam.rules(t).unwrap();
            assert_eq!(r.affixed.iter().filter(|&&a| a).count(), 12);
        }
    }

    #[test]
    fn identity_and_round_trip_sweep() {
        let fam = make_language_family(&spec(4), 11).unwrap();
        let tags = fam.all_tags();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut exact = 0;
        for i in 0..1000 {
            let a = &tags[i % tags.len()];
            let b = &tags[(i * 7 + 3) % tags.len()];
            let s = fam.sample_sentence(a, &mut rng).unwrap();
            assert_eq!(fam.oracle_translate(&s, a, a).unwrap(), s);
            let t = fam.oracle_translate(&s, a, b).unwrap();
            if fam.oracle_translate(&t, b, a).unwrap() == s {
                exact += 1;
            }
        }
        assert_eq!(exact, 1000);
    }

    #[test]
    fn unknown_token_is_named() {
        let fam = make_language_family(&spec(3), 2).unwrap();
        let s = Sentence::parse("qqq");
        match fam.oracle_translate(&s, &"o1".into(), &"o2".into()) {
            Err(Error::UnknownToken { token, .. }) => assert_eq!(token, "qqq"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn langid_majority_rules() {
        let fam = make_language_family(&spec(3), 2).unwrap();
        let a = fam.rules(&"o1".into()).unwrap().surfaces.clone();
        let b = fam.rules(&"o2".into()).unwrap().surfaces.clone();
        let pure = Sentence::new(a[..4].to_vec()).unwrap();
        assert_eq!(fam.oracle_langid(&pure), Some("o1".into()));
        let mixed = Sentence::new(vec![a[0].clone(), a[1].clone(), b[0].clone(), b[1].clone()]).unwrap();
        assert_eq!(fam.oracle_langid(&mixed), None);
        assert_eq!(fam.oracle_langid(&Sentence::default()), None);

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let tags = fam.all_tags();
        for i in 0..1000 {
            let src = &tags[i % tags.len()];
            let tgt = &tags[(i + 1) % tags.len()];
            let s = fam.sample_sentence(src, &mut rng).unwrap();
            let t = fam.oracle_translate(&s, src, tgt).unwrap();
            assert_eq!(fam.oracle_langid(&t).as_ref(), Some(tgt));
        }
    }

    #[test]
    fn gold_corpus_is_oracle_consistent() {
        let fam = make_language_family(&spec(3), 2).unwrap();
        let lang: LanguageTag = "o2".into();
        let one = fam.sample_gold_corpus(&lang, 1, 0).unwrap();
        assert_eq!(one.len(), 1);
        let c = fam.sample_gold_corpus(&lang, 300, 4).unwrap();
        for (src, tgt) in c.pairs() {
            assert_eq!(&fam.oracle_translate(src, &lang, fam.pivot()).unwrap(), tgt);
            assert!((MIN_SENTENCE_LEN..=MAX_SENTENCE_LEN).contains(&tgt.len()));
        }
        let again = fam.sample_gold_corpus(&lang, 300, 4).unwrap();
        assert_eq!(c.pairs(), again.pairs());
    }

    #[test]
    fn disjoint_seeds_rarely_overlap() {
        let fam = make_language_family(&spec(3), 2).unwrap();
        let lang: LanguageTag = "o1".into();
        let mut overlaps = 0;
        for run in 0..10u64 {
            let a = fam.sample_gold_corpus(&lang, 50, 1000 + run).unwrap();
            let b = fam.sample_gold_corpus(&lang, 50, 2000 + run).unwrap();
            let sa: HashSet<_> = a.pairs().iter().map(|p| p.0.clone()).collect();
            overlaps += b.pairs().iter().filter(|p| sa.contains(&p.0)).count();
        }
        // Sentences of 3..20 Zipf tokens rarely collide; a handful of very short
        // repeats is possible.
        assert!(overlaps <= 5, "overlaps = {overlaps}");
    }

    #[test]
    fn spec_file_round_trip() {
        let text = "pivot = \"pv\"\noriginals = [\"a\", \"b\"]\nnew = [\"n\"]\nlexicon_size = 50\nseed = 3\n";
        let s = FamilySpec::from_toml(text).unwrap();
        assert_eq!(s.seed, 3);
        assert_eq!(s.suffix_rate, 0.2);
        assert_eq!(FamilySpec::from_toml(&s.to_toml()).unwrap(), s);
    }
}
