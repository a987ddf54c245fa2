//! Parallel corpora, their text format, and the cleaning pipeline.

use std::collections::HashSet;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::synthlang::{LanguageFamily, LanguageTag, Sentence};

/// Default whitespace-token limit per side.
pub const DEFAULT_MAX_TOKENS: usize = 120;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ParallelCorpus {
    src_lang: LanguageTag,
    tgt_lang: LanguageTag,
    pairs: Vec<(Sentence, Sentence)>,
}

impl ParallelCorpus {
    pub fn new(
        src_lang: LanguageTag,
        tgt_lang: LanguageTag,
        pairs: Vec<(Sentence, Sentence)>,
    ) -> Result<Self> {
        if pairs.iter().any(|(s, t)| s.is_empty() || t.is_empty()) {
            return Err(Error::Empty("corpus pair side"));
        }
        Ok(ParallelCorpus {
            src_lang,
            tgt_lang,
            pairs,
        })
    }

    pub fn src_lang(&self) -> &LanguageTag {
        &self.src_lang
    }

    pub fn tgt_lang(&self) -> &LanguageTag {
        &self.tgt_lang
    }

    pub fn pairs(&self) -> &[(Sentence, Sentence)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// The same pairs with source and target swapped.
    pub fn reversed(&self) -> ParallelCorpus {
        ParallelCorpus {
            src_lang: self.tgt_lang.clone(),
            tgt_lang: self.src_lang.clone(),
            pairs: self.pairs.iter().map(|(s, t)| (t.clone(), s.clone())).collect(),
        }
    }

    pub fn truncated(&self, n: usize) -> ParallelCorpus {
        ParallelCorpus {
            src_lang: self.src_lang.clone(),
            tgt_lang: self.tgt_lang.clone(),
            pairs: self.pairs.iter().take(n).cloned().collect(),
        }
    }

    /// One pair per line: source TAB target, tokens separated by single spaces.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (s, t) in &self.pairs {
            out.push_str(&s.to_string());
            out.push('\t');
            out.push_str(&t.to_string());
            out.push('\n');
        }
        out
    }

    pub fn from_text(src_lang: LanguageTag, tgt_lang: LanguageTag, text: &str) -> Result<Self> {
        let mut pairs = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (s, t) = line.split_once('\t').ok_or_else(|| {
                Error::parse("corpus", format!("line {}: expected a TAB separator", lineno + 1))
            })?;
            if t.contains('\t') {
                return Err(Error::parse(
                    "corpus",
                    format!("line {}: more than one TAB", lineno + 1),
                ));
            }
            let s = Sentence::parse(s);
            let t = Sentence::parse(t);
            if s.is_empty() || t.is_empty() {
                return Err(Error::parse("corpus", format!("line {}: empty side", lineno + 1)));
            }
            pairs.push((s, t));
        }
        ParallelCorpus::new(src_lang, tgt_lang, pairs)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_text().as_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path, src_lang: LanguageTag, tgt_lang: LanguageTag) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(src_lang, tgt_lang, &text)
    }
}

/// Drops duplicate pairs, pairs with a side longer than `max_tokens`
/// whitespace tokens, and pairs whose sides are not identified as their
/// declared languages. Survivors keep their original order.
pub fn preprocess(c: &ParallelCorpus, max_tokens: usize, family: &LanguageFamily) -> ParallelCorpus {
    let mut seen = HashSet::new();
    let pairs = c
        .pairs
        .iter()
        .filter(|(s, t)| s.len() <= max_tokens && t.len() <= max_tokens)
        .filter(|(s, t)| {
            family.oracle_langid(s).as_ref() == Some(&c.src_lang)
                && family.oracle_langid(t).as_ref() == Some(&c.tgt_lang)
        })
        .filter(|pair| seen.insert((*pair).clone()))
        .cloned()
        .collect();
    ParallelCorpus {
        src_lang: c.src_lang.clone(),
        tgt_lang: c.tgt_lang.clone(),
        pairs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthlang::{make_language_family, FamilySpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn family() -> LanguageFamily {
        let spec = FamilySpec {
            pivot: "pv".into(),
            originals: vec!["o1".into(), "o2".into()],
            new: vec!["nx".into()],
            lexicon_size: 50,
            seed: 0,
            suffix_rate: 0.2,
            reorder_rate: 0.5,
        };
        make_language_family(&spec, 3).unwrap()
    }

    #[test]
    fn dedup_keeps_one_copy() {
        let fam = family();
        let c = fam.sample_gold_corpus(&"o1".into(), 3, 1).unwrap();
        let mut pairs = c.pairs().to_vec();
        pairs.push(pairs[1].clone());
        pairs.push(pairs[1].clone());
        let dup = ParallelCorpus::new(c.src_lang().clone(), c.tgt_lang().clone(), pairs).unwrap();
        let out = preprocess(&dup, DEFAULT_MAX_TOKENS, &fam);
        assert_eq!(out.pairs(), c.pairs());
    }

    #[test]
    fn length_boundary_keeps_exact_limit() {
        let fam = family();
        let lang: LanguageTag = "o1".into();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        // Build sentences with exactly 120 and 121 tokens from unaffixed words.
        let rules = fam.rules(&lang).unwrap();
        let plain: Vec<usize> = (0..fam.lexicon_size()).filter(|&i| !rules.affixed[i]).collect();
        let mk = |n: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
            use rand::Rng;
            (0..n).map(|_| plain[rng.random_range(0..plain.len())]).collect()
        };
        let a = mk(120, &mut rng);
        let b = mk(121, &mut rng);
        let pairs = vec![
            (fam.render(&a, &lang).unwrap(), fam.render(&a[..5], fam.pivot()).unwrap()),
            (fam.render(&b, &lang).unwrap(), fam.render(&b[..5], fam.pivot()).unwrap()),
        ];
        assert_eq!(pairs[0].0.len(), 120);
        assert_eq!(pairs[1].0.len(), 121);
        let c = ParallelCorpus::new(lang, fam.pivot().clone(), pairs).unwrap();
        let out = preprocess(&c, 120, &fam);
        assert_eq!(out.len(), 1);
        assert_eq!(out.pairs()[0].0.len(), 120);
    }

    #[test]
    fn language_mismatches_are_removed_in_order() {
        let fam = family();
        let lang: LanguageTag = "o1".into();
        let clean = fam.sample_gold_corpus(&lang, 100, 5).unwrap();
        let mut pairs = clean.pairs().to_vec();
        let other: LanguageTag = "o2".into();
        for i in 0..5 {
            let (s, t) = clean.pairs()[i * 10].clone();
            let wrong = fam.oracle_translate(&s, &lang, &other).unwrap();
            pairs.insert(i * 20 + 1, (wrong, t));
        }
        let c = ParallelCorpus::new(lang, fam.pivot().clone(), pairs).unwrap();
        let out = preprocess(&c, DEFAULT_MAX_TOKENS, &fam);
        // Duplicate pairs in the clean sample would also be removed.
        let expected = preprocess(&clean, DEFAULT_MAX_TOKENS, &fam);
        assert_eq!(out.pairs(), expected.pairs());
        assert_eq!(expected.len(), 100 - (clean.len() - expected.len()));
    }

    #[test]
    fn text_format_round_trip_and_errors() {
        let fam = family();
        let c = fam.sample_gold_corpus(&"o2".into(), 20, 9).unwrap();
        let back = ParallelCorpus::from_text("o2".into(), "pv".into(), &c.to_text()).unwrap();
        assert_eq!(back, c);
        assert!(ParallelCorpus::from_text("a".into(), "b".into(), "no tab here\n").is_err());
        assert!(ParallelCorpus::from_text("a".into(), "b".into(), "x\t\n").is_err());
    }
}
