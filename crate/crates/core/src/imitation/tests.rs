use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::model::{init_model, ModelConfig};
use crate::synthlang::{make_language_family, FamilySpec, LanguageFamily};
use crate::tokenizer::train_tokenizer;

struct Fixture {
    fam: LanguageFamily,
    expert: TranslationModel,
    gold: ParallelCorpus,
}

fn fixture() -> Fixture {
    let spec = FamilySpec {
        pivot: "pv".into(),
        originals: vec!["o1".into(), "o2".into(), "o3".into()],
        new: vec!["nx".into()],
        lexicon_size: 50,
        seed: 0,
        suffix_rate: 0.2,
        reorder_rate: 0.5,
    };
    let fam = make_language_family(&spec, 4).unwrap();
    let corpora: Vec<_> = fam
        .all_tags()
        .iter()
        .filter(|l| *l != fam.pivot())
        .map(|l| fam.sample_gold_corpus(l, 30, 1).unwrap())
        .collect();
    let tok = Arc::new(train_tokenizer(&corpora, 150).unwrap());
    let cfg = ModelConfig {
        embed_dim: 8,
        hidden_dim: 8,
        num_layers: 1,
        dropout: 0.0,
        max_decode_len: 128,
        seed: 5,
        grad_clip: None,
    };
    let mut m = init_model(&cfg, tok).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = m.params_mut().unwrap();
    p.out_w.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    let gold = fam.sample_gold_corpus(&"nx".into(), 12, 2).unwrap();
    Fixture {
        fam,
        expert: m.freeze(),
        gold,
    }
}

fn cfg(k: usize, direction: Direction) -> ImitConfig {
    ImitConfig {
        k,
        direction,
        steps: 3,
        lr: 1e-3,
        batch_size: 4,
        beam: 1,
        seed: 11,
        weights_mode: WeightsMode::Bleu,
        max_len: 12,
        checkpoint_every: 0,
    }
}

fn tags(xs: &[&str]) -> Vec<LanguageTag> {
    xs.iter().map(|&x| x.into()).collect()
}

#[test]
fn k_sample_is_distinct_and_ordered() {
    let langs = tags(&["a", "b", "c", "d", "e"]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for k in 1..=5 {
        let s = sample_k_languages(&langs, k, &mut rng).unwrap();
        assert_eq!(s.langs.len(), k);
        assert!(s.langs.windows(2).all(|w| w[0] < w[1]));
    }
    assert!(sample_k_languages(&langs, 0, &mut rng).is_err());
    assert!(sample_k_languages(&langs, 6, &mut rng).is_err());
}

#[test]
fn weights_sum_to_k() {
    let bleu: BTreeMap<LanguageTag, f64> = tags(&["a", "b", "c"]).into_iter().zip([10.0, 30.0, 60.0]).collect();
    let w = LanguageWeights::from_bleu(bleu, 2).unwrap();
    assert!((w.weights.values().sum::<f64>() - 2.0).abs() < 1e-12);
    assert!((w.weights[&"c".into()] - 1.2).abs() < 1e-12);
    // Over a sample, renormalised to the sample size.
    let s = w.for_sample(&tags(&["a", "b"])).unwrap();
    assert!((s[&"a".into()] - 0.5).abs() < 1e-12);
    assert!((s[&"b".into()] - 1.5).abs() < 1e-12);
    assert!(matches!(w.for_sample(&tags(&["zz"])), Err(Error::MissingWeight(_))));
}

#[test]
fn zero_bleu_falls_back_to_uniform() {
    let bleu: BTreeMap<LanguageTag, f64> = tags(&["a", "b"]).into_iter().map(|l| (l, 0.0)).collect();
    let w = LanguageWeights::from_bleu(bleu, 1).unwrap();
    assert!(w.weights.values().all(|&x| x == 1.0));
    assert!(w.for_sample(&tags(&["a", "b"])).unwrap().values().all(|&x| x == 1.0));
    let bad: BTreeMap<LanguageTag, f64> = [("a".into(), f64::NAN)].into_iter().collect();
    assert!(LanguageWeights::from_bleu(bad, 1).is_err());
}

#[test]
fn pseudo_pairs_follow_direction() {
    let f = fixture();
    let sample = KLanguageSample {
        langs: tags(&["o1", "o3"]),
        batch: 0,
    };
    let gold: Vec<GoldPair> = f.gold.pairs()[..5].to_vec();
    let (new, pv) = (f.gold.src_lang(), f.gold.tgt_lang());
    for dir in Direction::ALL {
        let pc = build_pseudo_batch(&f.expert, &gold, (new, pv), &sample, dir, 2, 12).unwrap();
        assert_eq!(pc.pairs.len() + pc.dropped, 10);
        assert_eq!(pc.generator_hash, f.expert.param_hash());
        let tok = f.expert.tokenizer();
        for p in &pc.pairs {
            let (a, b) = &p.langs;
            match dir {
                Direction::NewToOrig => assert_eq!(a, new),
                Direction::OrigToNew => assert_eq!(b, new),
            }
            assert_eq!(p.src.ids[0], tok.tag_id(a).unwrap());
            assert_eq!(p.src.ids[1], tok.tag_id(b).unwrap());
        }
    }
    let learner = f.expert.learner_copy(0);
    assert!(build_pseudo_batch(&learner, &gold, (new, pv), &sample, Direction::NewToOrig, 1, 12).is_err());
}

#[test]
fn composite_loss_matches_independent_terms() {
    let f = fixture();
    let (new, pv) = (f.gold.src_lang(), f.gold.tgt_lang());
    let tok = f.expert.tokenizer().clone();
    let gold: Vec<GoldPair> = f.gold.pairs()[..4].to_vec();
    let enc: Vec<_> = gold
        .iter()
        .map(|(n, p)| {
            (
                tok.encode_for_model(n, new, pv, Side::Source).unwrap(),
                tok.encode_for_model(p, new, pv, Side::Target).unwrap(),
            )
        })
        .collect();
    let sample = KLanguageSample {
        langs: tags(&["o1", "o2"]),
        batch: 0,
    };
    let pc = build_pseudo_batch(&f.expert, &gold, (new, pv), &sample, Direction::NewToOrig, 1, 12).unwrap();
    let w: BTreeMap<LanguageTag, f64> = [("o1".into(), 0.25), ("o2".into(), 1.75)].into_iter().collect();
    let mut learner = f.expert.learner_copy(1);

    // Per-token means computed straight from per-sequence NLL.
    let mean = |pairs: Vec<(&TokenSequence, &TokenSequence)>| -> f64 {
        let nll: f64 = pairs.iter().map(|(s, t)| learner.nll_loss(s, t).unwrap()).sum();
        let toks: usize = pairs.iter().map(|(_, t)| t.len() - 1).sum();
        nll / toks as f64
    };
    let g = mean(enc.iter().map(|(s, t)| (s, t)).collect());
    let mut expect = g;
    for (l, wl) in &w {
        let pairs: Vec<_> = pc.pairs.iter().filter(|p| &p.langs.1 == l).map(|p| (&p.src, &p.tgt)).collect();
        if !pairs.is_empty() {
            expect += wl * mean(pairs);
        }
    }
    let hash = pc.generator_hash.clone();
    let bd = imit_loss_step(&mut learner, &enc, &pc, &w, new, &hash, 0.0).unwrap();
    assert!((bd.gold_loss - g).abs() < 1e-6);
    assert!((bd.total - expect).abs() < 1e-6, "{} vs {expect}", bd.total);

    let err = imit_loss_step(&mut learner, &enc, &pc, &w, new, "deadbeef", 0.0);
    assert!(matches!(err, Err(Error::ExpertHashMismatch { .. })));
    let partial: BTreeMap<LanguageTag, f64> = [("o1".into(), 1.0)].into_iter().collect();
    if pc.pairs.iter().any(|p| p.langs.1 == "o2".into()) {
        let err = imit_loss_step(&mut learner, &enc, &pc, &partial, new, &hash, 0.0);
        assert!(matches!(err, Err(Error::MissingWeight(_))));
    }
}

#[test]
fn k_zero_step_equals_plain_training() {
    let f = fixture();
    let (new, pv) = (f.gold.src_lang(), f.gold.tgt_lang());
    let tok = f.expert.tokenizer().clone();
    let enc: Vec<_> = f.gold.pairs()[..4]
        .iter()
        .map(|(n, p)| {
            (
                tok.encode_for_model(n, new, pv, Side::Source).unwrap(),
                tok.encode_for_model(p, new, pv, Side::Target).unwrap(),
            )
        })
        .collect();
    let mut a = f.expert.learner_copy(3);
    let mut b = f.expert.learner_copy(3);
    let pc = PseudoCorpus::empty(f.expert.param_hash(), 1);
    let hash = pc.generator_hash.clone();
    imit_loss_step(&mut a, &enc, &pc, &BTreeMap::new(), new, &hash, 1e-2).unwrap();
    b.train_step(&enc, 1e-2).unwrap();
    assert_eq!(a.param_hash(), b.param_hash());
}

#[test]
fn training_leaves_expert_untouched() {
    let f = fixture();
    let originals = f.fam.originals().to_vec();
    let w = LanguageWeights::uniform(&originals, 2);
    for dir in Direction::ALL {
        let out = train_imit(&f.expert, &f.gold, &originals, &w, &cfg(2, dir), None).unwrap();
        assert_eq!(out.expert_hash_before, out.expert_hash_after);
        assert_eq!(out.log.len(), 3);
        assert!(out.log.iter().all(|l| l.langs.len() == 2 && l.generator_hash == out.expert_hash_before));
        assert_ne!(out.learner.param_hash(), out.expert_hash_before);
        assert_eq!(out.learner.role(), Role::Learner);
    }
    assert!(train_imit(&f.expert, &f.gold, &originals, &w, &cfg(4, Direction::NewToOrig), None).is_err());
}

#[test]
fn runs_are_reproducible() {
    let f = fixture();
    let originals = f.fam.originals().to_vec();
    let w = LanguageWeights::uniform(&originals, 1);
    let c = cfg(1, Direction::OrigToNew);
    let a = train_imit(&f.expert, &f.gold, &originals, &w, &c, None).unwrap();
    let b = train_imit(&f.expert, &f.gold, &originals, &w, &c, None).unwrap();
    assert_eq!(a.learner.param_hash(), b.learner.param_hash());
    assert_eq!(log_to_tsv(&a.log), log_to_tsv(&b.log));
}

#[test]
fn config_round_trips_through_toml() {
    let c = cfg(3, Direction::OrigToNew);
    assert_eq!(ImitConfig::from_toml(&c.to_toml()).unwrap(), c);
    let minimal = "k = 2\ndirection = \"new-to-orig\"\nsteps = 10\nlr = 0.001\nbatch_size = 8\nbeam = 4\nseed = 1\n";
    let c = ImitConfig::from_toml(minimal).unwrap();
    assert_eq!((c.weights_mode, c.max_len, c.checkpoint_every), (WeightsMode::Bleu, 64, 0));
    assert!(ImitConfig::from_toml("k = 2").is_err());
    assert_eq!("orig-to-new".parse::<Direction>().unwrap(), Direction::OrigToNew);
    assert!("sideways".parse::<Direction>().is_err());
}
