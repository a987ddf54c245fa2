//! Translation metrics and result analysis.

mod bleu;
mod chrf;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use bleu::{corpus_bleu, corpus_stats, BleuStats};
pub use chrf::chrfpp;

use crate::error::{Error, Result};
use crate::synthlang::{LanguageFamily, LanguageTag, Sentence};

pub const DEFAULT_ALPHA: f64 = 0.01;

/// Copied tokens (clipped by source multiplicity) plus immediate repeats,
/// over all hypothesis tokens. Not clamped to 1.
pub fn copy_ratio(srcs: &[Sentence], hyps: &[Sentence]) -> Result<f64> {
    bleu::check_lengths(srcs.len(), hyps.len())?;
    let mut copied = 0usize;
    let mut repeats = 0usize;
    let mut count = 0usize;
    for (s, h) in srcs.iter().zip(hyps) {
        let mut avail: HashMap<&str, usize> = HashMap::new();
        for t in s.tokens() {
            *avail.entry(t).or_insert(0) += 1;
        }
        for t in h.tokens() {
            if let Some(n) = avail.get_mut(t.as_str()) {
                if *n > 0 {
                    *n -= 1;
                    copied += 1;
                }
            }
        }
        repeats += h.tokens().windows(2).filter(|w| w[0] == w[1]).count();
        count += h.len();
    }
    if count == 0 {
        return Err(Error::Empty("hypothesis tokens"));
    }
    Ok((copied + repeats) as f64 / count as f64)
}

/// Fraction of hypotheses not identified as `expected` (unknown counts as off).
pub fn off_target_ratio(hyps: &[Sentence], expected: &LanguageTag, family: &LanguageFamily) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::Empty("hypotheses"));
    }
    let off = hyps
        .iter()
        .filter(|h| family.oracle_langid(h).as_ref() != Some(expected))
        .count();
    Ok(off as f64 / hyps.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tier {
    Low,
    Mid,
    High,
}

impl fmt::Display for Tier {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Tier::Low => "Low",
            Tier::Mid => "Mid",
            Tier::High => "High",
        })
    }
}

impl FromStr for Tier {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "Low" => Ok(Tier::Low),
            "Mid" => Ok(Tier::Mid),
            "High" => Ok(Tier::High),
            _ => Err(Error::parse("tier", format!("unknown tier `{s}`"))),
        }
    }
}

/// Half-open buckets: `[0, low_mid)` Low, `[low_mid, mid_high)` Mid, rest High.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TierSpec {
    pub low_mid: usize,
    pub mid_high: usize,
}

impl Default for TierSpec {
    fn default() -> Self {
        TierSpec {
            low_mid: 1000,
            mid_high: 4000,
        }
    }
}

impl TierSpec {
    pub fn new(low_mid: usize, mid_high: usize) -> Result<Self> {
        if low_mid >= mid_high {
            return Err(Error::Config("tier cutoffs must be strictly increasing".into()));
        }
        Ok(TierSpec { low_mid, mid_high })
    }
}

pub fn tier_of(corpus_size: usize, spec: &TierSpec) -> Tier {
    if corpus_size < spec.low_mid {
        Tier::Low
    } else if corpus_size < spec.mid_high {
        Tier::Mid
    } else {
        Tier::High
    }
}

/// Paired bootstrap over sentence indices. `p` is the fraction of resamples
/// in which system A's corpus BLEU does not exceed system B's.
pub fn bootstrap_significance(
    hyps_a: &[Sentence],
    hyps_b: &[Sentence],
    refs: &[Sentence],
    iterations: usize,
    alpha: f64,
    seed: u64,
) -> Result<(f64, bool)> {
    if iterations < 100 {
        return Err(Error::Config(format!("bootstrap needs at least 100 iterations, got {iterations}")));
    }
    let a = corpus_stats(hyps_a, refs)?;
    let b = corpus_stats(hyps_b, refs)?;
    let n = refs.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut not_better = 0usize;
    for _ in 0..iterations {
        let mut sa = BleuStats::default();
        let mut sb = BleuStats::default();
        for _ in 0..n {
            let i = rng.random_range(0..n);
            sa.add(&a[i]);
            sb.add(&b[i]);
        }
        if sa.score() <= sb.score() {
            not_better += 1;
        }
    }
    let p = not_better as f64 / iterations as f64;
    Ok((p, p < alpha))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub src: LanguageTag,
    pub tgt: LanguageTag,
    pub bleu: f64,
    pub chrfpp: f64,
    pub cr: f64,
    pub otr: f64,
    /// Number of test sentences.
    pub sentences: usize,
    pub tier: Tier,
    pub delta_vs_expert: Option<f64>,
}

impl EvalReport {
    /// Scores one direction. Copy ratio of an all-empty output is reported
    /// as 0 rather than failing the whole evaluation.
    pub fn compute(
        family: &LanguageFamily,
        src: (&LanguageTag, &[Sentence]),
        tgt: (&LanguageTag, &[Sentence]),
        hyps: &[Sentence],
        tier: Tier,
    ) -> Result<Self> {
        let cr = match copy_ratio(src.1, hyps) {
            Err(Error::Empty(_)) => 0.0,
            other => other?,
        };
        Ok(EvalReport {
            src: src.0.clone(),
            tgt: tgt.0.clone(),
            bleu: corpus_bleu(hyps, tgt.1)?,
            chrfpp: chrfpp(hyps, tgt.1)?,
            cr,
            otr: off_target_ratio(hyps, tgt.0, family)?,
            sentences: hyps.len(),
            tier,
            delta_vs_expert: None,
        })
    }

    pub fn direction(&self) -> (LanguageTag, LanguageTag) {
        (self.src.clone(), self.tgt.clone())
    }

    pub const TSV_HEADER: &'static str = "src\ttgt\tbleu\tchrfpp\tcr\totr\tsentences\ttier\tdelta";

    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}\t{}",
            self.src,
            self.tgt,
            self.bleu,
            self.chrfpp,
            self.cr,
            self.otr,
            self.sentences,
            self.tier,
            self.delta_vs_expert.map(|d| d.to_string()).unwrap_or_else(|| "-".into())
        )
    }

    pub fn from_tsv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 9 {
            return Err(Error::parse("report", format!("expected 9 fields, got {}", f.len())));
        }
        let num = |s: &str| -> Result<f64> { s.parse().map_err(|e| Error::parse("report", format!("`{s}`: {e}"))) };
        Ok(EvalReport {
            src: LanguageTag::new(f[0]),
            tgt: LanguageTag::new(f[1]),
            bleu: num(f[2])?,
            chrfpp: num(f[3])?,
            cr: num(f[4])?,
            otr: num(f[5])?,
            sentences: f[6].parse().map_err(|e| Error::parse("report", e))?,
            tier: f[7].parse()?,
            delta_vs_expert: if f[8] == "-" { None } else { Some(num(f[8])?) },
        })
    }
}

/// Per-direction BLEU of `extended` minus that of `expert`.
pub fn forgetting_delta(
    extended: &[EvalReport],
    expert: &[EvalReport],
) -> Result<BTreeMap<(LanguageTag, LanguageTag), f64>> {
    let base: BTreeMap<_, _> = expert.iter().map(|r| (r.direction(), r.bleu)).collect();
    let mut out = BTreeMap::new();
    for r in extended {
        let b = base
            .get(&r.direction())
            .ok_or_else(|| Error::MissingDirection(format!("{}-{} in expert reports", r.src, r.tgt)))?;
        out.insert(r.direction(), r.bleu - b);
    }
    for d in base.keys() {
        if !out.contains_key(d) {
            return Err(Error::MissingDirection(format!("{}-{} in extended reports", d.0, d.1)));
        }
    }
    Ok(out)
}
