//! Reference regimes: plain fine-tuning on the gold pairs, and On-the-Fly,
//! where the drifting learner generates its own pseudo data.

use std::path::Path;

use log::info;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};
use crate::imitation::{
    run_extension, Direction, Generator, ImitConfig, LanguageWeights, StepLog, TrainOutcome, WeightsMode,
};
use crate::model::{Role, TranslationModel};
use crate::synthlang::LanguageTag;
use crate::tokenizer::Side;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineKind {
    Finetune,
    OnTheFly,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineRunConfig {
    pub kind: BaselineKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub k: Option<usize>,
    pub direction: Direction,
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub beam: usize,
    pub seed: u64,
    #[serde(default)]
    pub weights_mode: WeightsMode,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    #[serde(default)]
    pub checkpoint_every: usize,
}

fn default_max_len() -> usize {
    64
}

impl BaselineRunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::parse("baseline config", e))?;
        cfg.check_kind()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("baseline config serializes")
    }

    fn check_kind(&self) -> Result<()> {
        match (self.kind, self.k) {
            (BaselineKind::Finetune, None) => Ok(()),
            (BaselineKind::Finetune, Some(_)) => Err(Error::Config("finetune takes no k".into())),
            (BaselineKind::OnTheFly, Some(k)) if k >= 1 => Ok(()),
            (BaselineKind::OnTheFly, _) => Err(Error::Config("on-the-fly needs k >= 1".into())),
        }
    }

    /// The equivalent imitation config (k = 0 for fine-tuning).
    pub fn to_imit(&self) -> Result<ImitConfig> {
        self.check_kind()?;
        Ok(ImitConfig {
            k: self.k.unwrap_or(0),
            direction: self.direction,
            steps: self.steps,
            lr: self.lr,
            batch_size: self.batch_size,
            beam: self.beam,
            seed: self.seed,
            weights_mode: self.weights_mode,
            max_len: self.max_len,
            checkpoint_every: self.checkpoint_every,
        })
    }

    pub fn from_imit(kind: BaselineKind, cfg: &ImitConfig) -> Self {
        BaselineRunConfig {
            kind,
            k: match kind {
                BaselineKind::Finetune => None,
                BaselineKind::OnTheFly => Some(cfg.k),
            },
            direction: cfg.direction,
            steps: cfg.steps,
            lr: cfg.lr,
            batch_size: cfg.batch_size,
            beam: cfg.beam,
            seed: cfg.seed,
            weights_mode: cfg.weights_mode,
            max_len: cfg.max_len,
            checkpoint_every: cfg.checkpoint_every,
        }
    }
}

/// Trains a copy of the expert on the gold pairs alone. Kept as its own loop
/// (rather than imitation with k = 0) so the equivalence of the two can be
/// checked; random draws are made in the same order.
pub fn run_finetune(
    expert: &TranslationModel,
    gold: &ParallelCorpus,
    cfg: &BaselineRunConfig,
    ckpt_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if cfg.kind != BaselineKind::Finetune {
        return Err(Error::Config("run_finetune needs kind = finetune".into()));
    }
    let icfg = cfg.to_imit()?;
    icfg.validate(0)?;
    if expert.role() != Role::Expert {
        return Err(Error::Config("extension must start from a frozen expert".into()));
    }
    if gold.is_empty() {
        return Err(Error::Empty("gold corpus"));
    }
    let expert_hash_before = expert.param_hash();
    let tok = expert.tokenizer().clone();
    let (new, pivot) = (gold.src_lang(), gold.tgt_lang());
    let (a, b) = match cfg.direction {
        Direction::NewToOrig => (new, pivot),
        Direction::OrigToNew => (pivot, new),
    };
    let encoded = gold
        .pairs()
        .iter()
        .map(|(n, p)| {
            let (s, t) = match cfg.direction {
                Direction::NewToOrig => (n, p),
                Direction::OrigToNew => (p, n),
            };
            Ok((
                tok.encode_for_model(s, a, b, Side::Source)?,
                tok.encode_for_model(t, a, b, Side::Target)?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;

    let mut learner = expert.learner_copy(cfg.seed);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<_> = (0..cfg.batch_size)
            .map(|_| encoded[rng.random_range(0..encoded.len())].clone())
            .collect();
        let rep = learner.train_step(&batch, cfg.lr)?;
        log.push(StepLog {
            step,
            gold_loss: rep.loss,
            weighted_imit: 0.0,
            total: rep.loss,
            langs: Vec::new(),
            generator_hash: expert_hash_before.clone(),
            dropped: 0,
        });
        if (step + 1) % 100 == 0 {
            info!("finetune step {}: loss {:.4}", step + 1, rep.loss);
        }
        if let Some(dir) = ckpt_dir {
            if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
                learner.save(&dir.join(format!("learner-{:06}.ckpt", step + 1)))?;
            }
        }
    }
    Ok(TrainOutcome {
        learner,
        log,
        expert_hash_after: expert.param_hash(),
        expert_hash_before,
    })
}

/// Imitation in which each batch's pseudo data comes from the learner as
/// updated so far. `weights` should be computed once from the initial expert.
pub fn run_on_the_fly(
    expert: &TranslationModel,
    gold: &ParallelCorpus,
    originals: &[LanguageTag],
    weights: &LanguageWeights,
    cfg: &BaselineRunConfig,
    ckpt_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    if cfg.kind != BaselineKind::OnTheFly {
        return Err(Error::Config("run_on_the_fly needs kind = on_the_fly".into()));
    }
    run_extension(expert, gold, originals, weights, &cfg.to_imit()?, Generator::Current, ckpt_dir)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn base(kind: BaselineKind, k: Option<usize>) -> BaselineRunConfig {
        BaselineRunConfig {
            kind,
            k,
            direction: Direction::NewToOrig,
            steps: 5,
            lr: 1e-3,
            batch_size: 4,
            beam: 1,
            seed: 3,
            weights_mode: WeightsMode::Bleu,
            max_len: 16,
            checkpoint_every: 0,
        }
    }

    #[test]
    fn kind_and_k_must_agree() {
        assert!(base(BaselineKind::Finetune, None).to_imit().is_ok());
        assert!(base(BaselineKind::Finetune, Some(2)).to_imit().is_err());
        assert!(base(BaselineKind::OnTheFly, None).to_imit().is_err());
        assert!(base(BaselineKind::OnTheFly, Some(0)).to_imit().is_err());
        assert_eq!(base(BaselineKind::OnTheFly, Some(2)).to_imit().unwrap().k, 2);
    }

    #[test]
    fn toml_round_trip_and_kind_key() {
        for c in [base(BaselineKind::Finetune, None), base(BaselineKind::OnTheFly, Some(4))] {
            let text = c.to_toml();
            assert_eq!(BaselineRunConfig::from_toml(&text).unwrap(), c);
        }
        let text = base(BaselineKind::OnTheFly, Some(4)).to_toml();
        assert!(text.contains("kind = \"on_the_fly\""));
        assert!(BaselineRunConfig::from_toml(&text.replace("on_the_fly", "finetune")).is_err());
    }

    #[test]
    fn on_the_fly_differs_from_imitation_only_in_kind() {
        let imit = base(BaselineKind::OnTheFly, Some(4)).to_imit().unwrap();
        let otf = BaselineRunConfig::from_imit(BaselineKind::OnTheFly, &imit);
        let a: toml::Table = toml::from_str(&imit.to_toml()).unwrap();
        let b: toml::Table = toml::from_str(&otf.to_toml()).unwrap();
        let differing: Vec<_> = b.keys().filter(|key| a.get(*key) != b.get(*key)).collect();
        assert_eq!(differing, vec!["kind"]);
        assert_eq!(a.len() + 1, b.len());
    }
}
