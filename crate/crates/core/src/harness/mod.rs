//! Experiment runner: data, expert, every extension cell, evaluation, and
//! the result tables. Everything lands under one output directory and a
//! rerun picks up completed work from the manifests it finds there.

mod tables;

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use log::{info, warn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use tables::{emit_significance, emit_tables, render_cells, render_significance, render_table, TableStyle};

use crate::baselines::{run_finetune, run_on_the_fly, BaselineKind, BaselineRunConfig};
use crate::corpus::{preprocess, ParallelCorpus, DEFAULT_MAX_TOKENS};
use crate::error::{Error, Result};
use crate::eval::{bootstrap_significance, EvalReport, Tier, TierSpec, DEFAULT_ALPHA};
use crate::imitation::{
    compute_language_weights, log_to_tsv, train_imit, Direction, ImitConfig, LanguageWeights, TrainOutcome,
    WeightsMode,
};
use crate::model::{detokenize, train_expert, ModelConfig, TrainConfig, TranslationModel};
use crate::synthlang::{make_language_family, FamilySpec, LanguageFamily, LanguageTag, Sentence};
use crate::tokenizer::{train_tokenizer, Side, Tokenizer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    Imit,
    Finetune,
    OnTheFly,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Imit => "imit",
            Method::Finetune => "finetune",
            Method::OnTheFly => "on-the-fly",
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "imit" => Ok(Method::Imit),
            "finetune" => Ok(Method::Finetune),
            "on-the-fly" => Ok(Method::OnTheFly),
            _ => Err(Error::parse("method", format!("unknown method `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct MethodSpec {
    pub method: Method,
    #[serde(default)]
    pub k: usize,
}

impl MethodSpec {
    pub fn imit(k: usize) -> Self {
        MethodSpec { method: Method::Imit, k }
    }

    pub fn finetune() -> Self {
        MethodSpec {
            method: Method::Finetune,
            k: 0,
        }
    }

    pub fn on_the_fly(k: usize) -> Self {
        MethodSpec {
            method: Method::OnTheFly,
            k,
        }
    }
}

impl fmt::Display for MethodSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.method {
            Method::Finetune => f.write_str("finetune"),
            m => write!(f, "{}-k{}", m.as_str(), self.k),
        }
    }
}

impl FromStr for MethodSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "finetune" {
            return Ok(MethodSpec::finetune());
        }
        let (m, k) = s
            .rsplit_once("-k")
            .ok_or_else(|| Error::parse("method", format!("expected <method>-k<k>, got `{s}`")))?;
        let k = k.parse().map_err(|e| Error::parse("method", format!("`{s}`: {e}")))?;
        Ok(MethodSpec { method: m.parse()?, k })
    }
}

/// Trainer settings shared by every extension cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExtensionSettings {
    pub steps: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub beam: usize,
    pub max_len: usize,
    #[serde(default)]
    pub weights_mode: WeightsMode,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub family: FamilySpec,
    pub family_seed: u64,
    pub data_seed: u64,
    /// Gold pairs with the pivot, one entry per original in declaration order.
    pub tier_sizes: Vec<usize>,
    pub new_gold_size: usize,
    pub dev_size: usize,
    pub test_size: usize,
    pub vocab_size: usize,
    pub tiers: TierSpec,
    pub model: ModelConfig,
    pub expert: TrainConfig,
    pub extension: ExtensionSettings,
    pub methods: Vec<MethodSpec>,
    pub directions: Vec<Direction>,
    pub seeds: Vec<u64>,
    pub eval_beam: usize,
    pub eval_max_len: usize,
    /// Original-pair directions scored for forgetting, as `[src, tgt]`.
    pub probe: Vec<[String; 2]>,
    pub bootstrap_iterations: usize,
}

impl ExperimentPlan {
    /// The desk-scale plan: six originals, two per tier, one new language.
    pub fn desk() -> Self {
        let family = FamilySpec {
            pivot: "pv".into(),
            originals: (1..=6).map(|i| format!("o{i}")).collect(),
            new: vec!["nx".into()],
            lexicon_size: 60,
            seed: 0,
            suffix_rate: 0.2,
            reorder_rate: 0.5,
        };
        let probe = family
            .originals
            .iter()
            .flat_map(|o| [[family.pivot.clone(), o.clone()], [o.clone(), family.pivot.clone()]])
            .collect();
        ExperimentPlan {
            family,
            family_seed: 7,
            data_seed: 1,
            tier_sizes: vec![500, 500, 2000, 2000, 8000, 8000],
            new_gold_size: 2000,
            dev_size: 100,
            test_size: 200,
            vocab_size: 800,
            tiers: TierSpec::default(),
            model: ModelConfig {
                embed_dim: 32,
                hidden_dim: 64,
                num_layers: 1,
                dropout: 0.1,
                max_decode_len: 128,
                seed: 1,
                grad_clip: Some(5.0),
            },
            expert: TrainConfig {
                steps: 8000,
                lr: 3e-3,
                batch_size: 16,
                seed: 2,
            },
            extension: ExtensionSettings {
                steps: 300,
                lr: 1e-3,
                batch_size: 16,
                beam: 1,
                max_len: 64,
                weights_mode: WeightsMode::Bleu,
            },
            methods: vec![
                MethodSpec::imit(2),
                MethodSpec::imit(4),
                MethodSpec::on_the_fly(4),
                MethodSpec::finetune(),
            ],
            directions: Direction::ALL.to_vec(),
            seeds: vec![1, 2, 3],
            eval_beam: 2,
            eval_max_len: 64,
            probe,
            bootstrap_iterations: 1000,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let plan: Self = toml::from_str(text).map_err(|e| Error::parse("plan", e))?;
        plan.validate()?;
        Ok(plan)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("plan serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.family.originals.len();
        if self.tier_sizes.len() != n {
            return Err(Error::Config(format!(
                "{} tier sizes for {n} original languages",
                self.tier_sizes.len()
            )));
        }
        if self.methods.is_empty() || self.directions.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("plan needs at least one method, direction and seed".into()));
        }
        for m in &self.methods {
            match m.method {
                Method::Finetune if m.k != 0 => return Err(Error::Config("finetune takes no k".into())),
                Method::Imit | Method::OnTheFly if m.k == 0 || m.k > n => {
                    return Err(Error::Config(format!("{m}: k must be in 1..={n}")))
                }
                _ => {}
            }
        }
        let mut seen = std::collections::BTreeSet::new();
        for m in &self.methods {
            if !seen.insert(m) {
                return Err(Error::Config(format!("method {m} listed twice")));
            }
        }
        let known: Vec<&String> = self.family.originals.iter().chain([&self.family.pivot]).collect();
        for [a, b] in &self.probe {
            if !known.contains(&a) || !known.contains(&b) || a == b {
                return Err(Error::Config(format!("probe direction {a}-{b} is not an original pair")));
            }
        }
        if self.new_gold_size == 0 || self.test_size == 0 || self.dev_size == 0 {
            return Err(Error::Config("corpus sizes must be positive".into()));
        }
        if self.eval_beam == 0 || self.bootstrap_iterations < 100 {
            return Err(Error::Config("eval_beam ≥ 1 and bootstrap_iterations ≥ 100 required".into()));
        }
        self.model.validate()
    }

    pub fn new_lang(&self) -> LanguageTag {
        LanguageTag::new(self.family.new[0].as_str())
    }

    pub fn originals(&self) -> Vec<LanguageTag> {
        self.family.originals.iter().map(|o| LanguageTag::new(o.as_str())).collect()
    }

    pub fn tier_of_lang(&self, lang: &LanguageTag) -> Option<Tier> {
        self.family
            .originals
            .iter()
            .position(|o| o == lang.as_str())
            .map(|i| crate::eval::tier_of(self.tier_sizes[i], &self.tiers))
    }

    /// Tier of a direction: that of the original language it involves.
    pub fn tier_of_direction(&self, src: &LanguageTag, tgt: &LanguageTag) -> Tier {
        self.tier_of_lang(src)
            .or_else(|| self.tier_of_lang(tgt))
            .unwrap_or(Tier::High)
    }

    /// New-pair directions evaluated for a training direction.
    pub fn new_pair_directions(&self, dir: Direction) -> Vec<(LanguageTag, LanguageTag)> {
        let new = self.new_lang();
        self.originals()
            .into_iter()
            .map(|o| match dir {
                Direction::NewToOrig => (new.clone(), o),
                Direction::OrigToNew => (o, new.clone()),
            })
            .collect()
    }

    pub fn probe_directions(&self) -> Vec<(LanguageTag, LanguageTag)> {
        self.probe
            .iter()
            .map(|[a, b]| (LanguageTag::new(a.as_str()), LanguageTag::new(b.as_str())))
            .collect()
    }

    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for &method in &self.methods {
            for &direction in &self.directions {
                for &seed in &self.seeds {
                    out.push(CellKey {
                        method,
                        direction,
                        seed,
                    });
                }
            }
        }
        out
    }

    fn imit_config(&self, key: &CellKey) -> ImitConfig {
        let e = &self.extension;
        ImitConfig {
            k: key.method.k,
            direction: key.direction,
            steps: e.steps,
            lr: e.lr,
            batch_size: e.batch_size,
            beam: e.beam,
            seed: key.seed,
            weights_mode: e.weights_mode,
            max_len: e.max_len,
            checkpoint_every: 0,
        }
    }

    /// Hash of everything that determines the data and the expert.
    fn expert_fingerprint(&self) -> String {
        let mut p = self.clone();
        p.extension = ExtensionSettings {
            steps: 0,
            lr: 0.0,
            batch_size: 0,
            beam: 0,
            max_len: 0,
            weights_mode: WeightsMode::Bleu,
        };
        p.methods.clear();
        p.directions.clear();
        p.seeds.clear();
        p.probe.clear();
        p.bootstrap_iterations = 0;
        digest(&p.to_toml())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellKey {
    pub method: MethodSpec,
    pub direction: Direction,
    pub seed: u64,
}

impl CellKey {
    pub fn id(&self) -> String {
        format!("{}.{}.s{}", self.method, self.direction, self.seed)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum CellStatus {
    Done,
    Failed(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub key: CellKey,
    pub status: CellStatus,
    /// New-pair directions first, then the probe set.
    pub reports: Vec<EvalReport>,
    pub learner_hash: Option<String>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SignificanceRow {
    pub direction: Direction,
    pub tier: Tier,
    pub seed: u64,
    pub a: MethodSpec,
    pub b: MethodSpec,
    pub p: f64,
    pub significant: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultsTable {
    pub plan: ExperimentPlan,
    pub expert: Vec<EvalReport>,
    pub cells: Vec<CellResult>,
    pub significance: Vec<SignificanceRow>,
}

impl ResultsTable {
    pub fn cell(&self, key: &CellKey) -> Option<&CellResult> {
        self.cells.iter().find(|c| &c.key == key)
    }

    fn done(&self, method: MethodSpec, direction: Direction) -> impl Iterator<Item = &CellResult> {
        self.cells
            .iter()
            .filter(move |c| c.key.method == method && c.key.direction == direction && c.status == CellStatus::Done)
    }

    /// Per-seed mean BLEU over new-pair directions, optionally one tier only.
    pub fn new_pair_bleu(&self, method: MethodSpec, direction: Direction, tier: Option<Tier>) -> Vec<(u64, f64)> {
        let dirs = self.plan.new_pair_directions(direction);
        self.done(method, direction)
            .filter_map(|c| {
                let xs: Vec<f64> = c
                    .reports
                    .iter()
                    .filter(|r| dirs.contains(&r.direction()) && tier.is_none_or(|t| r.tier == t))
                    .map(|r| r.bleu)
                    .collect();
                mean(&xs).map(|m| (c.key.seed, m))
            })
            .collect()
    }

    /// Per-seed mean of a new-pair metric (`cr` or `otr`).
    pub fn new_pair_metric(&self, method: MethodSpec, direction: Direction, f: fn(&EvalReport) -> f64) -> Vec<(u64, f64)> {
        let dirs = self.plan.new_pair_directions(direction);
        self.done(method, direction)
            .filter_map(|c| {
                let xs: Vec<f64> = c.reports.iter().filter(|r| dirs.contains(&r.direction())).map(f).collect();
                mean(&xs).map(|m| (c.key.seed, m))
            })
            .collect()
    }

    /// Per-seed mean Δ BLEU against the expert over the probe set.
    pub fn probe_delta(&self, method: MethodSpec, direction: Direction) -> Vec<(u64, f64)> {
        let probe = self.plan.probe_directions();
        let base: Vec<EvalReport> = self.expert.iter().filter(|r| probe.contains(&r.direction())).cloned().collect();
        self.done(method, direction)
            .filter_map(|c| {
                let ext: Vec<EvalReport> = c.reports.iter().filter(|r| probe.contains(&r.direction())).cloned().collect();
                let d = crate::eval::forgetting_delta(&ext, &base).ok()?;
                mean(&d.values().copied().collect::<Vec<_>>()).map(|m| (c.key.seed, m))
            })
            .collect()
    }

    /// Expert mean BLEU over probe directions touching a tier.
    pub fn expert_tier_bleu(&self, tier: Tier) -> Option<f64> {
        let probe = self.plan.probe_directions();
        let xs: Vec<f64> = self
            .expert
            .iter()
            .filter(|r| probe.contains(&r.direction()) && r.tier == tier)
            .map(|r| r.bleu)
            .collect();
        mean(&xs)
    }
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        None
    } else {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    }
}

fn digest(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn sentences_to_text(xs: &[Sentence]) -> String {
    xs.iter().map(|s| format!("{s}\n")).collect()
}

pub fn read_sentences(path: &Path) -> Result<Vec<Sentence>> {
    Ok(read(path)?.lines().map(Sentence::parse).collect())
}

/// One evaluation direction with its test data.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub src: LanguageTag,
    pub tgt: LanguageTag,
    pub srcs: Vec<Sentence>,
    pub refs: Vec<Sentence>,
    pub tier: Tier,
}

impl EvalSet {
    pub fn name(&self) -> String {
        format!("{}-{}", self.src, self.tgt)
    }
}

/// Everything derived deterministically from the plan before training.
pub struct ExperimentData {
    pub family: LanguageFamily,
    pub train: BTreeMap<LanguageTag, ParallelCorpus>,
    pub dev: BTreeMap<LanguageTag, ParallelCorpus>,
    pub gold: ParallelCorpus,
    pub tokenizer: Arc<Tokenizer>,
    /// Keyed by `(src, tgt)`.
    pub tests: BTreeMap<(LanguageTag, LanguageTag), EvalSet>,
}

fn corpus_seed(base: u64, role: u64, index: usize) -> u64 {
    base.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (role << 32) ^ index as u64
}

pub fn build_data(plan: &ExperimentPlan) -> Result<ExperimentData> {
    plan.validate()?;
    let family = make_language_family(&plan.family, plan.family_seed)?;
    let originals = plan.originals();
    let new = plan.new_lang();
    let pivot = family.pivot().clone();
    let clean = |c: ParallelCorpus| preprocess(&c, DEFAULT_MAX_TOKENS, &family);

    let mut train = BTreeMap::new();
    let mut dev = BTreeMap::new();
    let mut held: BTreeMap<LanguageTag, ParallelCorpus> = BTreeMap::new();
    for (i, l) in originals.iter().enumerate() {
        train.insert(l.clone(), clean(family.sample_gold_corpus(l, plan.tier_sizes[i], corpus_seed(plan.data_seed, 1, i))?));
        dev.insert(l.clone(), family.sample_gold_corpus(l, plan.dev_size, corpus_seed(plan.data_seed, 2, i))?);
        held.insert(l.clone(), family.sample_gold_corpus(l, plan.test_size, corpus_seed(plan.data_seed, 3, i))?);
    }
    let gold = clean(family.sample_gold_corpus(&new, plan.new_gold_size, corpus_seed(plan.data_seed, 4, 0))?);
    let new_test = family.sample_gold_corpus(&new, plan.test_size, corpus_seed(plan.data_seed, 5, 0))?;

    let mut all: Vec<ParallelCorpus> = train.values().cloned().collect();
    all.push(gold.clone());
    let tokenizer = Arc::new(train_tokenizer(&all, plan.vocab_size)?);

    let mut tests = BTreeMap::new();
    // New-pair sets share the new-language test sentences; references are
    // exact oracle translations.
    for l in &originals {
        let tier = plan.tier_of_direction(l, &new);
        let news: Vec<Sentence> = new_test.pairs().iter().map(|(n, _)| n.clone()).collect();
        let origs = new_test
            .pairs()
            .iter()
            .map(|(_, p)| family.oracle_translate(p, &pivot, l))
            .collect::<Result<Vec<_>>>()?;
        for (src, tgt, srcs, refs) in [
            (new.clone(), l.clone(), news.clone(), origs.clone()),
            (l.clone(), new.clone(), origs, news),
        ] {
            tests.insert((src.clone(), tgt.clone()), EvalSet { src, tgt, srcs, refs, tier });
        }
    }
    for (a, b) in plan.probe_directions() {
        // Probe sets come from the held-out corpus of the original involved.
        let anchor = if held.contains_key(&a) { &a } else { &b };
        let base = &held[anchor];
        let mut srcs = Vec::with_capacity(base.len());
        let mut refs = Vec::with_capacity(base.len());
        for (_, p) in base.pairs() {
            srcs.push(family.oracle_translate(p, &pivot, &a)?);
            refs.push(family.oracle_translate(p, &pivot, &b)?);
        }
        let tier = plan.tier_of_direction(&a, &b);
        tests.insert((a.clone(), b.clone()), EvalSet { src: a, tgt: b, srcs, refs, tier });
    }
    Ok(ExperimentData {
        family,
        train,
        dev,
        gold,
        tokenizer,
        tests,
    })
}

/// Decodes every set and scores it. Returns reports and hypotheses in order.
pub fn evaluate(
    model: &TranslationModel,
    family: &LanguageFamily,
    sets: &[&EvalSet],
    beam: usize,
    max_len: usize,
) -> Result<Vec<(EvalReport, Vec<Sentence>)>> {
    let tok = model.tokenizer();
    let mut out = Vec::with_capacity(sets.len());
    for set in sets {
        let srcs = set
            .srcs
            .iter()
            .map(|s| tok.encode_for_model(s, &set.src, &set.tgt, Side::Source))
            .collect::<Result<Vec<_>>>()?;
        let hyps: Vec<Sentence> = model
            .translate(&srcs, beam, max_len)
            .iter()
            .map(|o| detokenize(tok, o))
            .collect();
        let report = EvalReport::compute(family, (&set.src, &set.srcs), (&set.tgt, &set.refs), &hyps, set.tier)?;
        out.push((report, hyps));
    }
    Ok(out)
}

fn reports_to_tsv(reports: &[EvalReport]) -> String {
    let mut out = format!("{}\n", EvalReport::TSV_HEADER);
    for r in reports {
        out.push_str(&r.to_tsv());
        out.push('\n');
    }
    out
}

fn reports_from_tsv(text: &str) -> Result<Vec<EvalReport>> {
    text.lines().skip(1).filter(|l| !l.is_empty()).map(EvalReport::from_tsv).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Manifest {
    cell: String,
    status: String,
    #[serde(default)]
    error: String,
    config_hash: String,
    expert_hash: String,
    #[serde(default)]
    learner_hash: String,
    seed: u64,
}

/// Paths inside an experiment directory.
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Layout { root: root.to_path_buf() }
    }

    pub fn expert_dir(&self) -> PathBuf {
        self.root.join("expert")
    }

    pub fn cell_dir(&self, key: &CellKey) -> PathBuf {
        self.root.join("cells").join(key.id())
    }

    pub fn tables_dir(&self) -> PathBuf {
        self.root.join("tables")
    }
}

/// Trains the expert, or loads it when a matching one is already on disk.
pub fn prepare_expert(plan: &ExperimentPlan, data: &ExperimentData, layout: &Layout) -> Result<TranslationModel> {
    let dir = layout.expert_dir();
    let ckpt = dir.join("expert.ckpt");
    let fp_path = dir.join("fingerprint");
    let fingerprint = plan.expert_fingerprint();
    if ckpt.exists() && fp_path.exists() && read(&fp_path)?.trim() == fingerprint {
        info!("reusing expert at {}", ckpt.display());
        return TranslationModel::load(&ckpt, data.tokenizer.clone());
    }
    info!("training expert for {} steps", plan.expert.steps);
    let expert = train_expert(&data.family, &data.train, &plan.model, &plan.expert, data.tokenizer.clone())?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    expert.save(&ckpt)?;
    data.tokenizer.save(&layout.root.join("tokenizer.txt"))?;
    write(&fp_path, &format!("{fingerprint}\n"))?;
    Ok(expert)
}

fn eval_order(plan: &ExperimentPlan, dirs: &[Direction]) -> Vec<(LanguageTag, LanguageTag)> {
    let mut out: Vec<_> = dirs.iter().flat_map(|&d| plan.new_pair_directions(d)).collect();
    out.extend(plan.probe_directions());
    out
}

fn eval_and_persist(
    model: &TranslationModel,
    plan: &ExperimentPlan,
    data: &ExperimentData,
    order: &[(LanguageTag, LanguageTag)],
    dir: &Path,
) -> Result<Vec<EvalReport>> {
    let sets: Vec<&EvalSet> = order.iter().map(|d| &data.tests[d]).collect();
    let scored = evaluate(model, &data.family, &sets, plan.eval_beam, plan.eval_max_len)?;
    let mut reports = Vec::with_capacity(scored.len());
    for (set, (report, hyps)) in sets.iter().zip(scored) {
        write(&dir.join("hyps").join(format!("{}.txt", set.name())), &sentences_to_text(&hyps))?;
        reports.push(report);
    }
    write(&dir.join("reports.tsv"), &reports_to_tsv(&reports))?;
    Ok(reports)
}

fn run_cell(
    plan: &ExperimentPlan,
    data: &ExperimentData,
    expert: &TranslationModel,
    weights: &LanguageWeights,
    key: &CellKey,
    dir: &Path,
) -> Result<(TrainOutcome, Vec<EvalReport>)> {
    let cfg = plan.imit_config(key);
    let originals = plan.originals();
    let outcome = match key.method.method {
        Method::Imit => train_imit(expert, &data.gold, &originals, weights, &cfg, None)?,
        Method::Finetune => run_finetune(expert, &data.gold, &BaselineRunConfig::from_imit(BaselineKind::Finetune, &cfg), None)?,
        Method::OnTheFly => run_on_the_fly(
            expert,
            &data.gold,
            &originals,
            weights,
            &BaselineRunConfig::from_imit(BaselineKind::OnTheFly, &cfg),
            None,
        )?,
    };
    if outcome.expert_hash_after != outcome.expert_hash_before {
        return Err(Error::ExpertHashMismatch {
            expected: outcome.expert_hash_before,
            actual: outcome.expert_hash_after,
        });
    }
    write(&dir.join("train_log.tsv"), &log_to_tsv(&outcome.log))?;
    outcome.learner.save(&dir.join("learner.ckpt"))?;
    let reports = eval_and_persist(&outcome.learner, plan, data, &eval_order(plan, &[key.direction]), dir)?;
    Ok((outcome, reports))
}

fn cell_config_hash(plan: &ExperimentPlan, key: &CellKey, expert_hash: &str) -> String {
    let cfg = plan.imit_config(key);
    digest(&format!(
        "{}\n{}\n{}\n{}\n{}",
        key.id(),
        cfg.to_toml(),
        expert_hash,
        plan.eval_beam,
        plan.eval_max_len
    ))
}

/// Runs (or resumes) the whole plan under `out` and writes the tables.
pub fn run_experiment(plan: &ExperimentPlan, out: &Path) -> Result<ResultsTable> {
    plan.validate()?;
    let layout = Layout::new(out);
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write(&out.join("plan.toml"), &plan.to_toml())?;
    let data = build_data(plan)?;
    let expert = prepare_expert(plan, &data, &layout)?;
    let expert_hash = expert.param_hash();

    let expert_reports_path = layout.expert_dir().join("reports.tsv");
    let expert_reports = match read(&expert_reports_path).ok().map(|t| reports_from_tsv(&t)) {
        Some(Ok(r)) if r.len() == eval_order(plan, &plan.directions).len() => r,
        _ => eval_and_persist(&expert, plan, &data, &eval_order(plan, &plan.directions), &layout.expert_dir())?,
    };

    let max_k = plan.methods.iter().map(|m| m.k).max().unwrap_or(0).max(1);
    let weights = compute_language_weights(&expert, &data.dev, max_k, plan.eval_beam, plan.eval_max_len)?;
    let wtext: String = weights.bleu.iter().map(|(l, b)| format!("{l}\t{b}\n")).collect();
    write(&layout.expert_dir().join("language_bleu.tsv"), &wtext)?;

    let mut cells = Vec::new();
    for key in plan.cells() {
        let dir = layout.cell_dir(&key);
        let config_hash = cell_config_hash(plan, &key, &expert_hash);
        let manifest_path = dir.join("manifest.toml");
        if let Ok(text) = read(&manifest_path) {
            if let Ok(m) = toml::from_str::<Manifest>(&text) {
                if m.status == "done" && m.config_hash == config_hash {
                    if let Ok(reports) = read(&dir.join("reports.tsv")).and_then(|t| reports_from_tsv(&t)) {
                        info!("cell {} already complete", key.id());
                        cells.push(CellResult {
                            key,
                            status: CellStatus::Done,
                            reports,
                            learner_hash: Some(m.learner_hash),
                        });
                        continue;
                    }
                }
            }
        }
        info!("running cell {}", key.id());
        let started = std::time::Instant::now();
        let result = run_cell(plan, &data, &expert, &weights, &key, &dir);
        let mut manifest = Manifest {
            cell: key.id(),
            status: "done".into(),
            error: String::new(),
            config_hash,
            expert_hash: expert_hash.clone(),
            learner_hash: String::new(),
            seed: key.seed,
        };
        let cell = match result {
            Ok((outcome, reports)) => {
                manifest.learner_hash = outcome.learner.param_hash();
                CellResult {
                    key,
                    status: CellStatus::Done,
                    reports,
                    learner_hash: Some(manifest.learner_hash.clone()),
                }
            }
            Err(e) => {
                warn!("cell {} failed: {e}", key.id());
                manifest.status = "failed".into();
                manifest.error = e.to_string();
                CellResult {
                    key,
                    status: CellStatus::Failed(e.to_string()),
                    reports: Vec::new(),
                    learner_hash: None,
                }
            }
        };
        write(&manifest_path, &toml::to_string(&manifest).expect("manifest serializes"))?;
        info!("cell {} finished in {:.1?}", key.id(), started.elapsed());
        cells.push(cell);
    }

    let mut results = ResultsTable {
        plan: plan.clone(),
        expert: expert_reports,
        cells,
        significance: Vec::new(),
    };
    results.significance = significance(&results, &data, &layout)?;
    let tables = layout.tables_dir();
    emit_tables(&results, TableStyle::Q1, &tables)?;
    emit_tables(&results, TableStyle::Q2, &tables)?;
    emit_significance(&results, &tables)?;
    Ok(results)
}

/// Paired bootstrap of Imit against each baseline with the same k (and
/// Finetune), per seed, training direction and tier, on pooled new-pair
/// hypotheses read back from disk.
fn significance(results: &ResultsTable, data: &ExperimentData, layout: &Layout) -> Result<Vec<SignificanceRow>> {
    let plan = &results.plan;
    let mut rows = Vec::new();
    let tiers = [Tier::Low, Tier::Mid, Tier::High];
    for a in plan.methods.iter().filter(|m| m.method == Method::Imit) {
        let rivals = plan
            .methods
            .iter()
            .filter(|b| b.method == Method::Finetune || (b.method == Method::OnTheFly && b.k == a.k));
        for b in rivals {
            for &direction in &plan.directions {
                for &seed in &plan.seeds {
                    let ka = CellKey { method: *a, direction, seed };
                    let kb = CellKey { method: *b, direction, seed };
                    let ok = |k: &CellKey| results.cell(k).is_some_and(|c| c.status == CellStatus::Done);
                    if !ok(&ka) || !ok(&kb) {
                        continue;
                    }
                    for tier in tiers {
                        let mut ha = Vec::new();
                        let mut hb = Vec::new();
                        let mut refs = Vec::new();
                        for d in plan.new_pair_directions(direction) {
                            let set = &data.tests[&d];
                            if set.tier != tier {
                                continue;
                            }
                            let file = format!("{}.txt", set.name());
                            ha.extend(read_sentences(&layout.cell_dir(&ka).join("hyps").join(&file))?);
                            hb.extend(read_sentences(&layout.cell_dir(&kb).join("hyps").join(&file))?);
                            refs.extend(set.refs.iter().cloned());
                        }
                        if refs.is_empty() {
                            continue;
                        }
                        let (p, significant) =
                            bootstrap_significance(&ha, &hb, &refs, plan.bootstrap_iterations, DEFAULT_ALPHA, seed)?;
                        rows.push(SignificanceRow {
                            direction,
                            tier,
                            seed,
                            a: *a,
                            b: *b,
                            p,
                            significant,
                        });
                    }
                }
            }
        }
    }
    Ok(rows)
}

/// Rebuilds the results from a finished experiment directory without
/// training or decoding: reports are recomputed from the stored hypotheses.
pub fn load_results(out: &Path) -> Result<ResultsTable> {
    let plan = ExperimentPlan::load(&out.join("plan.toml"))?;
    let layout = Layout::new(out);
    let data = build_data(&plan)?;
    let rescore = |dir: &Path, order: &[(LanguageTag, LanguageTag)]| -> Result<Vec<EvalReport>> {
        order
            .iter()
            .map(|d| {
                let set = &data.tests[d];
                let hyps = read_sentences(&dir.join("hyps").join(format!("{}.txt", set.name())))?;
                EvalReport::compute(&data.family, (&set.src, &set.srcs), (&set.tgt, &set.refs), &hyps, set.tier)
            })
            .collect()
    };
    let expert = rescore(&layout.expert_dir(), &eval_order(&plan, &plan.directions))?;
    let mut cells = Vec::new();
    for key in plan.cells() {
        let dir = layout.cell_dir(&key);
        let manifest = read(&dir.join("manifest.toml"))
            .ok()
            .and_then(|t| toml::from_str::<Manifest>(&t).ok());
        let cell = match manifest {
            Some(m) if m.status == "done" => CellResult {
                key,
                status: CellStatus::Done,
                reports: rescore(&dir, &eval_order(&plan, &[key.direction]))?,
                learner_hash: Some(m.learner_hash),
            },
            Some(m) => CellResult {
                key,
                status: CellStatus::Failed(m.error),
                reports: Vec::new(),
                learner_hash: None,
            },
            None => CellResult {
                key,
                status: CellStatus::Failed("not run".into()),
                reports: Vec::new(),
                learner_hash: None,
            },
        };
        cells.push(cell);
    }
    let mut results = ResultsTable {
        plan,
        expert,
        cells,
        significance: Vec::new(),
    };
    results.significance = significance(&results, &data, &layout)?;
    Ok(results)
}

#[cfg(test)]
mod tests;
