use super::*;
use crate::eval::forgetting_delta;

fn tiny_plan() -> ExperimentPlan {
    let mut plan = ExperimentPlan::desk();
    plan.family = FamilySpec {
        pivot: "pv".into(),
        originals: vec!["o1".into(), "o2".into(), "o3".into()],
        new: vec!["nx".into()],
        lexicon_size: 50,
        seed: 0,
        suffix_rate: 0.2,
        reorder_rate: 0.5,
    };
    plan.tier_sizes = vec![40, 80, 160];
    plan.tiers = TierSpec::new(60, 120).unwrap();
    plan.new_gold_size = 40;
    plan.dev_size = 8;
    plan.test_size = 8;
    plan.vocab_size = 150;
    plan.model = ModelConfig {
        embed_dim: 8,
        hidden_dim: 8,
        num_layers: 1,
        dropout: 0.1,
        max_decode_len: 160,
        seed: 1,
        grad_clip: Some(5.0),
    };
    plan.expert = TrainConfig {
        steps: 20,
        lr: 1e-2,
        batch_size: 8,
        seed: 2,
    };
    plan.extension.steps = 3;
    plan.extension.batch_size = 4;
    plan.extension.beam = 1;
    plan.extension.max_len = 24;
    plan.methods = vec![MethodSpec::imit(1), MethodSpec::on_the_fly(1), MethodSpec::finetune()];
    plan.seeds = vec![5];
    plan.eval_beam = 1;
    plan.eval_max_len = 24;
    plan.probe = vec![["pv".into(), "o1".into()], ["o3".into(), "pv".into()]];
    plan.bootstrap_iterations = 100;
    plan
}

#[test]
fn desk_plan_is_valid_and_round_trips() {
    let plan = ExperimentPlan::desk();
    plan.validate().unwrap();
    assert_eq!(ExperimentPlan::from_toml(&plan.to_toml()).unwrap(), plan);
    assert_eq!(plan.cells().len(), 4 * 2 * 3);
    let tiers: Vec<Tier> = plan.originals().iter().map(|o| plan.tier_of_lang(o).unwrap()).collect();
    assert_eq!(tiers, [Tier::Low, Tier::Low, Tier::Mid, Tier::Mid, Tier::High, Tier::High]);
}

#[test]
fn invalid_plans_are_rejected() {
    let mut p = tiny_plan();
    p.tier_sizes.pop();
    assert!(p.validate().is_err());
    let mut p = tiny_plan();
    p.methods.push(MethodSpec::imit(4));
    assert!(p.validate().is_err());
    let mut p = tiny_plan();
    p.methods.push(MethodSpec::imit(1));
    assert!(p.validate().is_err());
    let mut p = tiny_plan();
    p.probe.push(["pv".into(), "nx".into()]);
    assert!(p.validate().is_err());
    let mut p = tiny_plan();
    p.methods = vec![MethodSpec {
        method: Method::Finetune,
        k: 2,
    }];
    assert!(p.validate().is_err());
}

#[test]
fn method_labels_parse_back() {
    for m in [MethodSpec::imit(4), MethodSpec::on_the_fly(2), MethodSpec::finetune()] {
        assert_eq!(m.to_string().parse::<MethodSpec>().unwrap(), m);
    }
    assert!("imit".parse::<MethodSpec>().is_err());
    assert!("q3".parse::<TableStyle>().is_err());
}

#[test]
fn data_is_deterministic_and_oracle_consistent() {
    let plan = tiny_plan();
    let a = build_data(&plan).unwrap();
    let b = build_data(&plan).unwrap();
    assert_eq!(a.gold, b.gold);
    assert_eq!(a.tokenizer.hash(), b.tokenizer.hash());
    for set in a.tests.values() {
        assert_eq!(set.srcs.len(), plan.test_size);
        for (s, r) in set.srcs.iter().zip(&set.refs) {
            assert_eq!(&a.family.oracle_translate(s, &set.src, &set.tgt).unwrap(), r);
        }
    }
    assert_eq!(a.tests.len(), 2 * 3 + 2);
}

#[test]
fn experiment_runs_resumes_and_reloads() {
    let dir = tempfile::tempdir().unwrap();
    let plan = tiny_plan();
    let results = run_experiment(&plan, dir.path()).unwrap();
    assert_eq!(results.cells.len(), 3 * 2);
    assert!(results.cells.iter().all(|c| c.status == CellStatus::Done));
    let tables = dir.path().join("tables");
    let read_all = || {
        ["q1.tsv", "q2.tsv", "significance.tsv"].map(|f| fs::read(tables.join(f)).unwrap())
    };
    let first = read_all();
    let ckpt = dir.path().join("cells").join("imit-k1.new-to-orig.s5").join("learner.ckpt");
    let stamp = fs::metadata(&ckpt).unwrap().modified().unwrap();

    let again = run_experiment(&plan, dir.path()).unwrap();
    assert_eq!(read_all(), first);
    assert_eq!(fs::metadata(&ckpt).unwrap().modified().unwrap(), stamp);
    assert_eq!(again.cells, results.cells);

    // Everything is recomputable from the stored hypotheses.
    let loaded = load_results(dir.path()).unwrap();
    for style in [TableStyle::Q1, TableStyle::Q2] {
        assert_eq!(
            render_table(&loaded, style).unwrap().as_bytes(),
            &fs::read(tables.join(format!("{style}.tsv"))).unwrap()[..]
        );
    }
    assert_eq!(render_significance(&loaded), render_significance(&results));

    // The Δ rows agree with the eval module's forgetting delta.
    let q2 = render_table(&results, TableStyle::Q2).unwrap();
    let key = CellKey {
        method: MethodSpec::finetune(),
        direction: Direction::NewToOrig,
        seed: 5,
    };
    let probe = plan.probe_directions();
    let ext: Vec<EvalReport> = results.cell(&key).unwrap().reports.iter().filter(|r| probe.contains(&r.direction())).cloned().collect();
    let base: Vec<EvalReport> = results.expert.iter().filter(|r| probe.contains(&r.direction())).cloned().collect();
    let d = forgetting_delta(&ext, &base).unwrap();
    let row: Vec<&str> = q2.lines().find(|l| l.starts_with("Δ finetune/new-to-orig")).unwrap().split('\t').collect();
    for (i, dir) in probe.iter().enumerate() {
        assert_eq!(row[i + 1], format!("{:.2}", d[dir]));
    }
}

#[test]
fn single_cell_table() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = tiny_plan();
    plan.methods = vec![MethodSpec::finetune()];
    plan.directions = vec![Direction::OrigToNew];
    let results = run_experiment(&plan, dir.path()).unwrap();
    let q1 = render_table(&results, TableStyle::Q1).unwrap();
    let lines: Vec<&str> = q1.lines().collect();
    assert_eq!(lines.len(), 3, "{q1}");
    assert!(lines[0].starts_with("method\tdirection\to1(Low)\to2(Mid)\to3(High)"));
    assert!(lines[2].starts_with("finetune\torig-to-new\t"));
    assert!(render_significance(&results).lines().count() == 1);
}

#[test]
fn failed_cells_are_recorded() {
    let dir = tempfile::tempdir().unwrap();
    let mut plan = tiny_plan();
    plan.methods = vec![MethodSpec::imit(1)];
    plan.directions = vec![Direction::NewToOrig];
    // A too-short decode limit makes every training batch overflow.
    plan.extension.max_len = 24;
    plan.model.max_decode_len = 4;
    let err = run_experiment(&plan, dir.path());
    // The expert itself cannot train under this limit.
    assert!(err.is_err());

    let mut plan = tiny_plan();
    plan.methods = vec![MethodSpec::imit(1)];
    plan.directions = vec![Direction::NewToOrig];
    plan.extension.lr = f64::NAN;
    let results = run_experiment(&plan, dir.path()).unwrap();
    assert!(matches!(results.cells[0].status, CellStatus::Failed(_)));
    let q1 = render_table(&results, TableStyle::Q1).unwrap();
    assert!(q1.lines().last().unwrap().contains("failed"));
}
