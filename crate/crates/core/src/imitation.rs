//! Imitation of a frozen expert: per-batch pseudo multi-parallel data,
//! BLEU-derived language weights, and the composite gold + imitation loss.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use log::{info, warn};
use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};
use crate::eval::corpus_bleu;
use crate::model::{detokenize, Example, Role, TranslationModel};
use crate::synthlang::{LanguageTag, Sentence};
use crate::tokenizer::{Side, TokenSequence};

/// Which side of the new↔original pair is being learned.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    NewToOrig,
    OrigToNew,
}

impl Direction {
    pub const ALL: [Direction; 2] = [Direction::NewToOrig, Direction::OrigToNew];

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::NewToOrig => "new-to-orig",
            Direction::OrigToNew => "orig-to-new",
        }
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "new-to-orig" => Ok(Direction::NewToOrig),
            "orig-to-new" => Ok(Direction::OrigToNew),
            _ => Err(Error::parse("direction", format!("unknown direction `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KLanguageSample {
    /// In the order they appear among the originals.
    pub langs: Vec<LanguageTag>,
    pub batch: usize,
}

/// Uniform sample of `k` distinct originals.
pub fn sample_k_languages<R: Rng>(originals: &[LanguageTag], k: usize, rng: &mut R) -> Result<KLanguageSample> {
    if k == 0 || k > originals.len() {
        return Err(Error::Config(format!(
            "k = {k} outside 1..={} original languages",
            originals.len()
        )));
    }
    let mut idx = index::sample(rng, originals.len(), k).into_vec();
    idx.sort_unstable();
    Ok(KLanguageSample {
        langs: idx.into_iter().map(|i| originals[i].clone()).collect(),
        batch: 0,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoPair {
    pub src: TokenSequence,
    pub tgt: TokenSequence,
    pub langs: (LanguageTag, LanguageTag),
}

#[derive(Clone, Debug, PartialEq)]
pub struct PseudoCorpus {
    pub pairs: Vec<PseudoPair>,
    /// Parameter hash of the model that generated the pairs.
    pub generator_hash: String,
    pub beam: usize,
    /// Generations that decoded to nothing and were dropped.
    pub dropped: usize,
}

impl PseudoCorpus {
    pub fn empty(generator_hash: String, beam: usize) -> Self {
        PseudoCorpus {
            pairs: Vec::new(),
            generator_hash,
            beam,
            dropped: 0,
        }
    }
}

/// A gold pair as (new-language side, pivot side).
pub type GoldPair = (Sentence, Sentence);

/// Pseudo data from a frozen expert; see [`generate_pseudo`].
pub fn build_pseudo_batch(
    expert: &TranslationModel,
    gold: &[GoldPair],
    langs: (&LanguageTag, &LanguageTag),
    sample: &KLanguageSample,
    direction: Direction,
    beam: usize,
    max_len: usize,
) -> Result<PseudoCorpus> {
    if expert.role() != Role::Expert {
        return Err(Error::Config("pseudo data must come from a frozen expert".into()));
    }
    generate_pseudo(expert, gold, langs, sample, direction, beam, max_len)
}

/// Translates each gold pivot sentence into every sampled language and pairs
/// the result with the new-language side: `(x_new, ŷ)` for new→orig,
/// `(ŷ, x_new)` for orig→new. `langs` is `(new, pivot)`. Pairs are ordered
/// by sampled language, then by gold pair.
pub fn generate_pseudo(
    generator: &TranslationModel,
    gold: &[GoldPair],
    langs: (&LanguageTag, &LanguageTag),
    sample: &KLanguageSample,
    direction: Direction,
    beam: usize,
    max_len: usize,
) -> Result<PseudoCorpus> {
    let (new, pivot) = langs;
    let tok = generator.tokenizer().clone();
    let hash = generator.param_hash();
    if sample.langs.is_empty() || gold.is_empty() {
        return Ok(PseudoCorpus::empty(hash, beam));
    }
    let mut srcs = Vec::with_capacity(gold.len() * sample.langs.len());
    for l in &sample.langs {
        for (_, eng) in gold {
            srcs.push(tok.encode_for_model(eng, pivot, l, Side::Source)?);
        }
    }
    let outs = generator.translate(&srcs, beam, max_len);
    let mut pairs = Vec::with_capacity(outs.len());
    let mut dropped = 0;
    for (i, out) in outs.iter().enumerate() {
        let l = &sample.langs[i / gold.len()];
        let x_new = &gold[i % gold.len()].0;
        let y = detokenize(&tok, out);
        if y.is_empty() {
            dropped += 1;
            continue;
        }
        let (a, b, sa, sb) = match direction {
            Direction::NewToOrig => (new, l, x_new, &y),
            Direction::OrigToNew => (l, new, &y, x_new),
        };
        pairs.push(PseudoPair {
            src: tok.encode_for_model(sa, a, b, Side::Source)?,
            tgt: tok.encode_for_model(sb, a, b, Side::Target)?,
            langs: (a.clone(), b.clone()),
        });
    }
    if dropped > 0 {
        warn!("dropped {dropped} empty pseudo generations");
    }
    Ok(PseudoCorpus {
        pairs,
        generator_hash: hash,
        beam,
        dropped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightsMode {
    #[default]
    Bleu,
    Uniform,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LanguageWeights {
    pub bleu: BTreeMap<LanguageTag, f64>,
    /// Normalised over every language in `bleu` to sum to `k`.
    pub weights: BTreeMap<LanguageTag, f64>,
    pub k: usize,
    pub mode: WeightsMode,
}

impl LanguageWeights {
    /// `W(ℓ) = B(ℓ) / Σ B · k`. An all-zero score vector falls back to W = 1.
    pub fn from_bleu(bleu: BTreeMap<LanguageTag, f64>, k: usize) -> Result<Self> {
        if let Some((l, b)) = bleu.iter().find(|(_, b)| !(b.is_finite() && **b >= 0.0)) {
            return Err(Error::Config(format!("invalid BLEU {b} for {l}")));
        }
        let total: f64 = bleu.values().sum();
        let weights = if total > 0.0 {
            bleu.iter().map(|(l, b)| (l.clone(), b / total * k as f64)).collect()
        } else {
            warn!("all expert BLEU scores are zero; using uniform language weights");
            bleu.keys().map(|l| (l.clone(), 1.0)).collect()
        };
        Ok(LanguageWeights {
            bleu,
            weights,
            k,
            mode: WeightsMode::Bleu,
        })
    }

    pub fn uniform(langs: &[LanguageTag], k: usize) -> Self {
        LanguageWeights {
            bleu: langs.iter().map(|l| (l.clone(), 1.0)).collect(),
            weights: langs.iter().map(|l| (l.clone(), 1.0)).collect(),
            k,
            mode: WeightsMode::Uniform,
        }
    }

    /// Weights renormalised over one batch's sampled languages so they sum
    /// to the sample size.
    pub fn for_sample(&self, langs: &[LanguageTag]) -> Result<BTreeMap<LanguageTag, f64>> {
        let mut scores = Vec::with_capacity(langs.len());
        for l in langs {
            scores.push(*self.bleu.get(l).ok_or_else(|| Error::MissingWeight(l.to_string()))?);
        }
        let total: f64 = scores.iter().sum();
        let n = langs.len() as f64;
        Ok(langs
            .iter()
            .zip(scores)
            .map(|(l, b)| {
                let w = match self.mode {
                    WeightsMode::Bleu if total > 0.0 => b / total * n,
                    _ => 1.0,
                };
                (l.clone(), w)
            })
            .collect())
    }
}

/// Scores the expert on pivot→ℓ for each dev set (pairs are `(ℓ, pivot)`).
pub fn compute_language_weights(
    expert: &TranslationModel,
    devsets: &BTreeMap<LanguageTag, ParallelCorpus>,
    k: usize,
    beam: usize,
    max_len: usize,
) -> Result<LanguageWeights> {
    let tok = expert.tokenizer();
    let mut bleu = BTreeMap::new();
    for (l, dev) in devsets {
        let pivot = dev.tgt_lang();
        let srcs = dev
            .pairs()
            .iter()
            .map(|(_, p)| tok.encode_for_model(p, pivot, l, Side::Source))
            .collect::<Result<Vec<_>>>()?;
        let hyps: Vec<Sentence> = expert
            .translate(&srcs, beam, max_len)
            .iter()
            .map(|o| detokenize(tok, o))
            .collect();
        let refs: Vec<Sentence> = dev.pairs().iter().map(|(s, _)| s.clone()).collect();
        bleu.insert(l.clone(), corpus_bleu(&hyps, &refs)?);
    }
    LanguageWeights::from_bleu(bleu, k)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImitLossBreakdown {
    pub gold_loss: f64,
    pub imit: BTreeMap<LanguageTag, f64>,
    pub weights: BTreeMap<LanguageTag, f64>,
    pub total: f64,
}

impl ImitLossBreakdown {
    pub fn weighted_imit(&self) -> f64 {
        self.imit
            .iter()
            .map(|(l, x)| self.weights.get(l).copied().unwrap_or(0.0) * x)
            // Not `sum()`: an empty float sum is -0.0, which would print
            // differently from the plain fine-tuning log.
            .fold(0.0, |a, b| a + b)
    }
}

fn target_tokens(seqs: impl Iterator<Item = usize>) -> usize {
    seqs.map(|n| n.saturating_sub(1)).sum()
}

/// One optimizer step on `L_gold + Σ_ℓ W(ℓ) · L_imit(ℓ)`, each term a mean
/// per-token cross-entropy. `generator_hash` must match the pseudo data's.
/// Pseudo pairs are grouped by their non-new language.
pub fn imit_loss_step(
    learner: &mut TranslationModel,
    gold_batch: &[(TokenSequence, TokenSequence)],
    pseudo: &PseudoCorpus,
    weights: &BTreeMap<LanguageTag, f64>,
    new_lang: &LanguageTag,
    generator_hash: &str,
    lr: f64,
) -> Result<ImitLossBreakdown> {
    if pseudo.generator_hash != generator_hash {
        return Err(Error::ExpertHashMismatch {
            expected: pseudo.generator_hash.clone(),
            actual: generator_hash.to_string(),
        });
    }
    let gold_tokens = target_tokens(gold_batch.iter().map(|(_, t)| t.len()));
    if gold_tokens == 0 {
        return Err(Error::Empty("gold batch"));
    }
    let lang_of = |p: &PseudoPair| -> LanguageTag {
        if &p.langs.0 == new_lang {
            p.langs.1.clone()
        } else {
            p.langs.0.clone()
        }
    };
    let mut groups: BTreeMap<LanguageTag, Vec<&PseudoPair>> = BTreeMap::new();
    for p in &pseudo.pairs {
        groups.entry(lang_of(p)).or_default().push(p);
    }
    for l in groups.keys() {
        if !weights.contains_key(l) {
            return Err(Error::MissingWeight(l.to_string()));
        }
    }

    let gw = 1.0 / gold_tokens as f64;
    let mut examples: Vec<Example> = gold_batch
        .iter()
        .map(|(s, t)| Example {
            src: &s.ids,
            tgt: &t.ids,
            weight: gw,
        })
        .collect();
    let mut spans = Vec::with_capacity(groups.len());
    for (l, pairs) in &groups {
        let tokens = target_tokens(pairs.iter().map(|p| p.tgt.len()));
        let start = examples.len();
        let w = weights[l] / tokens.max(1) as f64;
        examples.extend(pairs.iter().map(|p| Example {
            src: &p.src.ids,
            tgt: &p.tgt.ids,
            weight: w,
        }));
        spans.push((l.clone(), start, examples.len(), tokens.max(1)));
    }

    let out = learner.weighted_step(&examples, lr)?;
    let gold_loss = out.nll[..gold_batch.len()].iter().sum::<f64>() * gw;
    let mut imit = BTreeMap::new();
    let mut used = BTreeMap::new();
    for (l, a, b, tokens) in spans {
        imit.insert(l.clone(), out.nll[a..b].iter().sum::<f64>() / tokens as f64);
        used.insert(l.clone(), weights[&l]);
    }
    let mut bd = ImitLossBreakdown {
        gold_loss,
        imit,
        weights: used,
        total: 0.0,
    };
    bd.total = bd.gold_loss + bd.weighted_imit();
    Ok(bd)
}

fn default_max_len() -> usize {
    64
}

/// Run configuration for imitation and the baselines.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImitConfig {
    pub k: usize,
    pub direction: Direction,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub beam: usize,
    pub seed: u64,
    #[serde(default)]
    pub weights_mode: WeightsMode,
    /// Generation length limit for pseudo targets.
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    /// Save the learner every this many steps (0 disables).
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl ImitConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::parse("run config", e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self, originals: usize) -> Result<()> {
        if self.k > originals {
            return Err(Error::Config(format!("k = {} exceeds {originals} originals", self.k)));
        }
        if self.batch_size == 0 || self.beam == 0 || self.max_len == 0 {
            return Err(Error::Config("batch_size, beam and max_len must be positive".into()));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("invalid learning rate {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepLog {
    pub step: usize,
    pub gold_loss: f64,
    pub weighted_imit: f64,
    pub total: f64,
    pub langs: Vec<LanguageTag>,
    pub generator_hash: String,
    pub dropped: usize,
}

impl StepLog {
    /// `step, gold_loss, weighted_imit_loss, total, languages` TAB-separated.
    pub fn to_tsv(&self) -> String {
        let langs: Vec<&str> = self.langs.iter().map(|l| l.as_str()).collect();
        format!(
            "{}\t{}\t{}\t{}\t{}",
            self.step,
            self.gold_loss,
            self.weighted_imit,
            self.total,
            if langs.is_empty() { "-".to_string() } else { langs.join(",") }
        )
    }
}

pub fn log_to_tsv(log: &[StepLog]) -> String {
    let mut out = String::from("step\tgold_loss\tweighted_imit_loss\ttotal\tlangs\n");
    for l in log {
        out.push_str(&l.to_tsv());
        out.push('\n');
    }
    out
}

/// Where pseudo data comes from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Generator {
    FrozenExpert,
    /// The learner itself, as updated so far.
    Current,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub learner: TranslationModel,
    pub log: Vec<StepLog>,
    pub expert_hash_before: String,
    pub expert_hash_after: String,
}

/// Imitation training against a frozen expert.
pub fn train_imit(
    expert: &TranslationModel,
    gold: &ParallelCorpus,
    originals: &[LanguageTag],
    weights: &LanguageWeights,
    cfg: &ImitConfig,
    ckpt_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    run_extension(expert, gold, originals, weights, cfg, Generator::FrozenExpert, ckpt_dir)
}

/// Shared loop of imitation, Finetune (k = 0) and On-the-Fly. The learner
/// starts as a copy of `expert`; each step draws a gold batch, samples k
/// languages, generates pseudo data and minimises the composite loss.
/// `gold` holds `(new, pivot)` pairs.
pub fn run_extension(
    expert: &TranslationModel,
    gold: &ParallelCorpus,
    originals: &[LanguageTag],
    weights: &LanguageWeights,
    cfg: &ImitConfig,
    generator: Generator,
    ckpt_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if expert.role() != Role::Expert {
        return Err(Error::Config("extension must start from a frozen expert".into()));
    }
    cfg.validate(originals.len())?;
    if gold.is_empty() {
        return Err(Error::Empty("gold corpus"));
    }
    let expert_hash_before = expert.param_hash();
    let tok = expert.tokenizer().clone();
    let (new, pivot) = (gold.src_lang(), gold.tgt_lang());
    let encoded = gold
        .pairs()
        .iter()
        .map(|(n, p)| match cfg.direction {
            Direction::NewToOrig => Ok((
                tok.encode_for_model(n, new, pivot, Side::Source)?,
                tok.encode_for_model(p, new, pivot, Side::Target)?,
            )),
            Direction::OrigToNew => Ok((
                tok.encode_for_model(p, pivot, new, Side::Source)?,
                tok.encode_for_model(n, pivot, new, Side::Target)?,
            )),
        })
        .collect::<Result<Vec<_>>>()?;

    let mut learner = expert.learner_copy(cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let idx: Vec<usize> = (0..cfg.batch_size)
            .map(|_| rng.random_range(0..encoded.len()))
            .collect();
        let gold_batch: Vec<_> = idx.iter().map(|&i| encoded[i].clone()).collect();
        let (pseudo, sample) = if cfg.k == 0 {
            let hash = match generator {
                Generator::FrozenExpert => expert_hash_before.clone(),
                Generator::Current => learner.param_hash(),
            };
            (PseudoCorpus::empty(hash, cfg.beam), Vec::new())
        } else {
            let mut sample = sample_k_languages(originals, cfg.k, &mut rng)?;
            sample.batch = step;
            let raw: Vec<GoldPair> = idx.iter().map(|&i| gold.pairs()[i].clone()).collect();
            let model = match generator {
                Generator::FrozenExpert => expert,
                Generator::Current => &learner,
            };
            let pseudo = generate_pseudo(model, &raw, (new, pivot), &sample, cfg.direction, cfg.beam, cfg.max_len)?;
            (pseudo, sample.langs)
        };
        let w = match cfg.weights_mode {
            WeightsMode::Bleu => weights.for_sample(&sample)?,
            WeightsMode::Uniform => sample.iter().map(|l| (l.clone(), 1.0)).collect(),
        };
        let generator_hash = pseudo.generator_hash.clone();
        let bd = imit_loss_step(&mut learner, &gold_batch, &pseudo, &w, new, &generator_hash, cfg.lr)?;
        log.push(StepLog {
            step,
            gold_loss: bd.gold_loss,
            weighted_imit: bd.weighted_imit(),
            total: bd.total,
            langs: sample,
            generator_hash,
            dropped: pseudo.dropped,
        });
        if (step + 1) % 100 == 0 {
            info!("step {}: total {:.4} gold {:.4}", step + 1, bd.total, bd.gold_loss);
        }
        if let Some(dir) = ckpt_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                learner.save(&dir.join(format!("learner-{:06}.ckpt", step + 1)))?;
            }
        }
    }
    let expert_hash_after = expert.param_hash();
    if expert_hash_after != expert_hash_before {
        return Err(Error::ExpertHashMismatch {
            expected: expert_hash_before,
            actual: expert_hash_after,
        });
    }
    Ok(TrainOutcome {
        learner,
        log,
        expert_hash_before,
        expert_hash_after,
    })
}

#[cfg(test)]
mod tests;
