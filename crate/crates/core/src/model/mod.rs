//! Tiny GRU encoder–decoder with dot-product attention.
//!
//! The same type serves as the frozen expert and the trainable learner; the
//! role flag gates every mutating call.

mod adam;
mod checkpoint;
mod decode;
mod network;
mod params;

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use adam::Adam;
pub use decode::Hypothesis;
pub use network::{forward_backward, Example};
pub use params::{GruParams, Params, Real};

use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};
use crate::synthlang::{LanguageFamily, LanguageTag};
use crate::tokenizer::{Side, TokenSequence, Tokenizer, BOS, EOS};

fn default_dropout() -> f64 {
    0.1
}

fn default_max_decode_len() -> usize {
    128
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "default_max_decode_len")]
    pub max_decode_len: usize,
    #[serde(default)]
    pub seed: u64,
    /// Global gradient-norm clip; none when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grad_clip: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 32,
            hidden_dim: 64,
            num_layers: 1,
            dropout: default_dropout(),
            max_decode_len: default_max_decode_len(),
            seed: 0,
            grad_clip: None,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 || self.num_layers == 0 {
            return Err(Error::Config("model dimensions must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if self.max_decode_len == 0 {
            return Err(Error::Config("max_decode_len must be at least 1".into()));
        }
        if matches!(self.grad_clip, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("grad_clip must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Expert,
    Learner,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainStepReport {
    /// Mean per-token loss before the update.
    pub loss: f64,
    pub grad_norm: f64,
    pub tokens: usize,
}

/// Outcome of one weighted update: the per-sequence summed NLL of every
/// example (before the update) and the gradient norm before clipping.
#[derive(Clone, Debug)]
pub struct WeightedStep {
    pub nll: Vec<f64>,
    pub grad_norm: f64,
}

#[derive(Clone, Debug)]
pub struct Model<A: Real = f32> {
    cfg: ModelConfig,
    role: Role,
    params: Params<A>,
    tokenizer: Arc<Tokenizer>,
    adam: Adam<A>,
    rng: ChaCha8Rng,
}

pub type TranslationModel = Model<f32>;

/// Sources are decoded in chunks of this many to bound memory.
const DECODE_CHUNK: usize = 256;

pub fn init_model(cfg: &ModelConfig, tok: Arc<Tokenizer>) -> Result<TranslationModel> {
    Model::init(cfg, tok)
}

impl<A: Real> Model<A> {
    pub fn init(cfg: &ModelConfig, tok: Arc<Tokenizer>) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let params = Params::init(
            tok.vocab_size(),
            cfg.embed_dim,
            cfg.hidden_dim,
            cfg.num_layers,
            &mut rng,
        );
        Self::from_params(cfg, tok, params, Role::Learner)
    }

    pub fn from_params(cfg: &ModelConfig, tok: Arc<Tokenizer>, params: Params<A>, role: Role) -> Result<Self> {
        cfg.validate()?;
        let expected = Params::<A>::zeros(tok.vocab_size(), cfg.embed_dim, cfg.hidden_dim, cfg.num_layers);
        if params.shapes() != expected.shapes() {
            return Err(Error::Config(format!(
                "parameter shapes do not match config and vocabulary of {}",
                tok.vocab_size()
            )));
        }
        Ok(Model {
            adam: Adam::new(&params),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_d50f),
            cfg: cfg.clone(),
            role,
            params,
            tokenizer: tok,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn params(&self) -> &Params<A> {
        &self.params
    }

    pub fn params_mut(&mut self) -> Result<&mut Params<A>> {
        self.ensure_learner()?;
        Ok(&mut self.params)
    }

    pub fn tokenizer(&self) -> &Arc<Tokenizer> {
        &self.tokenizer
    }

    /// Number of optimizer updates applied so far.
    pub fn steps(&self) -> u64 {
        self.adam.steps()
    }

    /// Marks the model as a frozen expert.
    pub fn freeze(mut self) -> Self {
        self.role = Role::Expert;
        self
    }

    /// Trainable deep copy with fresh optimizer state and dropout stream.
    pub fn learner_copy(&self, seed: u64) -> Self {
        Model {
            cfg: self.cfg.clone(),
            role: Role::Learner,
            params: self.params.clone(),
            tokenizer: self.tokenizer.clone(),
            adam: Adam::new(&self.params),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d50f),
        }
    }

    fn ensure_learner(&self) -> Result<()> {
        match self.role {
            Role::Learner => Ok(()),
            Role::Expert => Err(Error::FrozenExpert),
        }
    }

    fn check_len(&self, seq: &TokenSequence) -> Result<()> {
        if seq.len() > self.cfg.max_decode_len {
            return Err(Error::SequenceTooLong {
                len: seq.len(),
                max: self.cfg.max_decode_len,
            });
        }
        Ok(())
    }

    /// SHA-256 of the parameters as little-endian f32, in checkpoint order.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for s in self.params.slices() {
            for x in s {
                h.update(x.to_f32().unwrap_or(f32::NAN).to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// Teacher-forced summed negative log-likelihood of `tgt` given `src`.
    pub fn nll_loss(&self, src: &TokenSequence, tgt: &TokenSequence) -> Result<f64> {
        self.check_len(src)?;
        self.check_len(tgt)?;
        let ex = [Example {
            src: &src.ids,
            tgt: &tgt.ids,
            weight: 1.0,
        }];
        Ok(forward_backward::<A, ChaCha8Rng>(&self.params, &ex, 0.0, None, None)[0])
    }

    /// Deterministic (dropout-free) loss and gradient of `sum_i w_i nll_i`.
    pub fn loss_and_grad(&self, examples: &[Example<'_>]) -> (Vec<f64>, Params<A>) {
        let mut grad = self.params.zeros_like();
        let nll = forward_backward::<A, ChaCha8Rng>(&self.params, examples, 0.0, None, Some(&mut grad));
        (nll, grad)
    }

    /// One optimizer update on `sum_i w_i nll_i`, with dropout. The loss is
    /// checked before any parameter moves.
    pub fn weighted_step(&mut self, examples: &[Example<'_>], lr: f64) -> Result<WeightedStep> {
        self.ensure_learner()?;
        if examples.is_empty() {
            return Err(Error::Empty("training batch"));
        }
        for e in examples {
            if e.src.len() > self.cfg.max_decode_len || e.tgt.len() > self.cfg.max_decode_len {
                return Err(Error::SequenceTooLong {
                    len: e.src.len().max(e.tgt.len()),
                    max: self.cfg.max_decode_len,
                });
            }
        }
        let mut grad = self.params.zeros_like();
        let nll = forward_backward(
            &self.params,
            examples,
            self.cfg.dropout,
            Some(&mut self.rng),
            Some(&mut grad),
        );
        let loss: f64 = nll.iter().zip(examples).map(|(l, e)| l * e.weight).sum();
        if !loss.is_finite() || !grad.all_finite() {
            return Err(Error::NonFiniteLoss {
                loss,
                step: self.adam.steps(),
            });
        }
        let grad_norm = grad.l2_norm();
        if let Some(clip) = self.cfg.grad_clip {
            if grad_norm > clip {
                grad.scale(A::of(clip / grad_norm));
            }
        }
        self.adam.update(&mut self.params, &grad, lr);
        Ok(WeightedStep { nll, grad_norm })
    }

    /// Adam step on the mean per-token loss of the batch.
    pub fn train_step(&mut self, batch: &[(TokenSequence, TokenSequence)], lr: f64) -> Result<TrainStepReport> {
        let tokens: usize = batch.iter().map(|(_, t)| t.len().saturating_sub(1)).sum();
        if tokens == 0 {
            return Err(Error::Empty("training batch"));
        }
        let w = 1.0 / tokens as f64;
        let examples: Vec<Example> = batch
            .iter()
            .map(|(s, t)| Example {
                src: &s.ids,
                tgt: &t.ids,
                weight: w,
            })
            .collect();
        let out = self.weighted_step(&examples, lr)?;
        Ok(TrainStepReport {
            loss: out.nll.iter().sum::<f64>() * w,
            grad_norm: out.grad_norm,
            tokens,
        })
    }

    fn retarget(&self, src: &TokenSequence, tgt_lang: &LanguageTag) -> Result<TokenSequence> {
        let tag = self.tokenizer.tag_id(tgt_lang)?;
        let mut ids = src.ids.clone();
        match ids.get_mut(1) {
            Some(slot) if self.tokenizer.is_special(*slot) => *slot = tag,
            _ => return Err(Error::Config("source sequence lacks language tags".into())),
        }
        Ok(TokenSequence::new(ids))
    }

    /// Beam search into `tgt_lang` (which replaces the source's target tag).
    /// Output excludes BOS and always ends in EOS.
    pub fn beam_search(
        &self,
        src: &TokenSequence,
        tgt_lang: &LanguageTag,
        beam: usize,
        max_len: usize,
    ) -> Result<TokenSequence> {
        let src = self.retarget(src, tgt_lang)?;
        Ok(self.translate(std::slice::from_ref(&src), beam, max_len).remove(0))
    }

    /// Batched beam search; the target language is read from each source's tags.
    pub fn translate(&self, srcs: &[TokenSequence], beam: usize, max_len: usize) -> Vec<TokenSequence> {
        self.search(srcs, beam, max_len)
            .into_iter()
            .map(|h| TokenSequence::new(h.into_output()))
            .collect()
    }

    /// Finished hypotheses with their scores, in input order.
    pub fn search(&self, srcs: &[TokenSequence], beam: usize, max_len: usize) -> Vec<Hypothesis> {
        let mut out = Vec::with_capacity(srcs.len());
        for chunk in srcs.chunks(DECODE_CHUNK) {
            let refs: Vec<&[u32]> = chunk.iter().map(|s| s.ids.as_slice()).collect();
            out.extend(decode::beam_search_batch(&self.params, &refs, beam, max_len));
        }
        out
    }

    pub fn greedy(&self, srcs: &[TokenSequence], max_len: usize) -> Vec<TokenSequence> {
        self.translate(srcs, 1, max_len)
    }

    /// Next-token distribution after feeding `prefix` (which excludes BOS).
    pub fn next_token_logprobs(&self, src: &TokenSequence, prefix: &[u32]) -> Vec<f64> {
        let mem = decode::encode(&self.params, &[&src.ids]);
        let mut hidden = mem.finals.clone();
        let mut logp = None;
        for &tok in std::iter::once(&BOS).chain(prefix) {
            let (lp, h) = decode::decode_step(&self.params, &mem, &[0], &[tok], &hidden);
            hidden = h;
            logp = Some(lp);
        }
        logp.expect("at least BOS is fed").row(0).iter().map(|x| x.f64()).collect()
    }
}

impl TranslationModel {
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = checkpoint::encode(&self.cfg, self.role, &self.tokenizer.hash(), &self.params);
        checkpoint::write_file(path, &bytes)
    }

    /// Loads a checkpoint; `tok` must be the tokenizer it was saved with.
    pub fn load(path: &Path, tok: Arc<Tokenizer>) -> Result<Self> {
        let d = checkpoint::decode(&checkpoint::read_file(path)?)?;
        if d.tokenizer_hash != tok.hash() {
            return Err(Error::Checkpoint(format!(
                "{} was saved with a different tokenizer",
                path.display()
            )));
        }
        Model::from_params(&d.cfg, tok, d.params, d.role)
    }
}

/// Beam search directly over a parameter set; see [`Model::search`].
pub fn search_params<A: Real>(params: &Params<A>, srcs: &[&[u32]], beam: usize, max_len: usize) -> Vec<Hypothesis> {
    decode::beam_search_batch(params, srcs, beam, max_len)
}

/// Hyperparameters of a plain supervised training run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
}

/// Trains the expert on every original↔pivot corpus in both directions.
/// Batches are drawn uniformly from the pooled pairs, so larger corpora are
/// seen proportionally more often.
pub fn train_expert(
    family: &LanguageFamily,
    tiered_corpora: &BTreeMap<LanguageTag, ParallelCorpus>,
    cfg: &ModelConfig,
    train: &TrainConfig,
    tok: Arc<Tokenizer>,
) -> Result<TranslationModel> {
    let mut pool: Vec<(TokenSequence, TokenSequence)> = Vec::new();
    for lang in family.originals() {
        let c = tiered_corpora
            .get(lang)
            .ok_or_else(|| Error::MissingDirection(format!("{lang}-{}", family.pivot())))?;
        if c.tgt_lang() != family.pivot() {
            return Err(Error::MissingDirection(format!("{lang}-{}", family.pivot())));
        }
        for (s, t) in c.pairs() {
            let (a, b) = (c.src_lang(), c.tgt_lang());
            pool.push((
                tok.encode_for_model(s, a, b, Side::Source)?,
                tok.encode_for_model(t, a, b, Side::Target)?,
            ));
            pool.push((
                tok.encode_for_model(t, b, a, Side::Source)?,
                tok.encode_for_model(s, b, a, Side::Target)?,
            ));
        }
    }
    if pool.is_empty() {
        return Err(Error::Empty("expert training data"));
    }
    let mut model = init_model(cfg, tok)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed);
    let mut running = 0.0;
    for step in 0..train.steps {
        let batch: Vec<_> = (0..train.batch_size.max(1))
            .map(|_| pool[rng.random_range(0..pool.len())].clone())
            .collect();
        let rep = model.train_step(&batch, train.lr)?;
        running = if step == 0 { rep.loss } else { 0.98 * running + 0.02 * rep.loss };
        if (step + 1) % 500 == 0 {
            info!("expert step {}: loss {running:.4}", step + 1);
        }
    }
    Ok(model.freeze())
}

/// Decodes a model output back to words, dropping everything after EOS.
pub fn detokenize(tok: &Tokenizer, out: &TokenSequence) -> crate::synthlang::Sentence {
    let end = out.ids.iter().position(|&t| t == EOS).unwrap_or(out.ids.len());
    tok.decode(&out.ids[..end])
}
