use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;

use langext_core::eval::{bootstrap_significance, chrfpp, copy_ratio, corpus_bleu, off_target_ratio, DEFAULT_ALPHA};
use langext_core::harness::{
    build_data, emit_significance, emit_tables, evaluate, load_results, prepare_expert, read_sentences, render_cells,
    render_significance, render_table, run_experiment, EvalSet, ExperimentPlan, Layout, MethodSpec, TableStyle,
};
use langext_core::imitation::Direction;
use langext_core::model::TranslationModel;
use langext_core::synthlang::{make_language_family, FamilySpec, LanguageTag};
use langext_core::{Error, Result};

/// Extending a multilingual translation model to a new synthetic language.
#[derive(Parser)]
#[command(name = "langext", version)]
struct Cli {
    /// Experiment plan (TOML). Defaults to the built-in desk plan.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override: the family seed for `family`, the run seed otherwise.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "runs/desk")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the resolved experiment plan as TOML.
    Plan,
    /// Build a language family and write its tables and gold corpora.
    Family {
        /// Print the rule tables instead of writing files.
        #[arg(long)]
        show: bool,
    },
    /// Train (or reuse) the expert for the plan.
    Pretrain,
    /// Extend the expert to the new language with one method.
    Extend(ExtendArgs),
    /// Evaluate a checkpoint on every test direction of the plan.
    Eval {
        /// Checkpoint to evaluate; defaults to the plan's expert.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Run the whole plan (resumable) and write all tables.
    Run,
    /// Print a table from a finished run.
    Report {
        #[arg(long, value_enum, default_value = "q1")]
        style: ReportStyle,
    },
    /// Score hypothesis files against references.
    Metrics(MetricsArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Imit,
    Finetune,
    OnTheFly,
}

#[derive(Args)]
struct ExtendArgs {
    #[arg(value_enum)]
    method: MethodArg,
    /// Number of sampled original languages (imit and on-the-fly).
    #[arg(long, default_value_t = 4)]
    k: usize,
    /// new-to-orig or orig-to-new.
    #[arg(long, default_value = "new-to-orig")]
    direction: Direction,
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportStyle {
    Q1,
    Q2,
    Significance,
    Cells,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    hyp: PathBuf,
    #[arg(long = "ref")]
    reference: PathBuf,
    /// Source sentences, for the copy ratio.
    #[arg(long)]
    src: Option<PathBuf>,
    /// Expected output language, for the off-target ratio (uses the plan's family).
    #[arg(long)]
    lang: Option<String>,
    /// A second system: runs paired bootstrap of `--hyp` against it.
    #[arg(long)]
    against: Option<PathBuf>,
    #[arg(long, default_value_t = 1000)]
    iterations: usize,
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
}

fn load_plan(cli: &Cli) -> Result<ExperimentPlan> {
    match &cli.config {
        Some(p) => ExperimentPlan::load(p),
        None => Ok(ExperimentPlan::desk()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace(['\n', '\t'], " ");
            println!("error kind={} msg={msg:?}", e.kind());
            ExitCode::FAILURE
        }
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Plan => {
            let mut plan = load_plan(cli)?;
            if let Some(s) = cli.seed {
                plan.seeds = vec![s];
            }
            print!("{}", plan.to_toml());
            Ok(())
        }
        Command::Family { show } => family(cli, *show),
        Command::Pretrain => {
            let plan = load_plan(cli)?;
            let data = build_data(&plan)?;
            let expert = prepare_expert(&plan, &data, &Layout::new(&cli.out))?;
            println!("expert={} hash={}", Layout::new(&cli.out).expert_dir().join("expert.ckpt").display(), expert.param_hash());
            Ok(())
        }
        Command::Extend(args) => {
            let mut plan = load_plan(cli)?;
            plan.methods = vec![match args.method {
                MethodArg::Imit => MethodSpec::imit(args.k),
                MethodArg::Finetune => MethodSpec::finetune(),
                MethodArg::OnTheFly => MethodSpec::on_the_fly(args.k),
            }];
            plan.directions = vec![args.direction];
            if let Some(s) = cli.seed {
                plan.seeds = vec![s];
            }
            let results = run_experiment(&plan, &cli.out)?;
            print!("{}", render_table(&results, TableStyle::Q1)?);
            Ok(())
        }
        Command::Eval { model } => eval(cli, model.as_deref()),
        Command::Run => {
            let mut plan = load_plan(cli)?;
            if let Some(s) = cli.seed {
                plan.seeds = vec![s];
            }
            let results = run_experiment(&plan, &cli.out)?;
            for style in [TableStyle::Q1, TableStyle::Q2] {
                info!("wrote {}", emit_tables(&results, style, &cli.out.join("tables"))?.display());
            }
            info!("wrote {}", emit_significance(&results, &cli.out.join("tables"))?.display());
            print!("{}", render_table(&results, TableStyle::Q1)?);
            Ok(())
        }
        Command::Report { style } => {
            let results = load_results(&cli.out)?;
            let text = match style {
                ReportStyle::Q1 => render_table(&results, TableStyle::Q1)?,
                ReportStyle::Q2 => render_table(&results, TableStyle::Q2)?,
                ReportStyle::Significance => render_significance(&results),
                ReportStyle::Cells => render_cells(&results),
            };
            print!("{text}");
            Ok(())
        }
        Command::Metrics(args) => metrics(cli, args),
    }
}

fn family(cli: &Cli, show: bool) -> Result<()> {
    // Accept either a bare family spec or a full plan.
    let (spec, seed, sizes, gold) = match &cli.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Error::Io {
                path: p.clone(),
                source: e,
            })?;
            match FamilySpec::from_toml(&text) {
                Ok(spec) => {
                    let n = spec.originals.len();
                    (spec, 0, vec![0; n], 0)
                }
                Err(_) => {
                    let plan = ExperimentPlan::from_toml(&text)?;
                    (plan.family.clone(), plan.family_seed, plan.tier_sizes.clone(), plan.new_gold_size)
                }
            }
        }
        None => {
            let plan = ExperimentPlan::desk();
            (plan.family.clone(), plan.family_seed, plan.tier_sizes.clone(), plan.new_gold_size)
        }
    };
    let seed = cli.seed.unwrap_or(seed);
    let fam = make_language_family(&spec, seed)?;
    if show {
        print!("{}", fam.serialize_tables());
        return Ok(());
    }
    write(&cli.out.join("family.tsv"), &fam.serialize_tables())?;
    let mut sizes: Vec<(LanguageTag, usize)> = fam.originals().iter().cloned().zip(sizes).collect();
    sizes.extend(fam.new_langs().iter().map(|l| (l.clone(), gold)));
    for (i, (lang, n)) in sizes.iter().enumerate() {
        if *n == 0 {
            continue;
        }
        let c = fam.sample_gold_corpus(lang, *n, seed.wrapping_add(i as u64 + 1))?;
        let path = cli.out.join("corpora").join(format!("{lang}-{}.tsv", fam.pivot()));
        c.save(&path)?;
        println!("{}\t{}", path.display(), c.len());
    }
    Ok(())
}

fn eval(cli: &Cli, model: Option<&Path>) -> Result<()> {
    let plan = load_plan(cli)?;
    let data = build_data(&plan)?;
    let layout = Layout::new(&cli.out);
    let path = model.map(Path::to_path_buf).unwrap_or_else(|| layout.expert_dir().join("expert.ckpt"));
    let m = TranslationModel::load(&path, data.tokenizer.clone())?;
    let sets: Vec<&EvalSet> = data.tests.values().collect();
    println!("{}", langext_core::eval::EvalReport::TSV_HEADER);
    for (report, _) in evaluate(&m, &data.family, &sets, plan.eval_beam, plan.eval_max_len)? {
        println!("{}", report.to_tsv());
    }
    Ok(())
}

fn metrics(cli: &Cli, args: &MetricsArgs) -> Result<()> {
    let hyps = read_sentences(&args.hyp)?;
    let refs = read_sentences(&args.reference)?;
    let mut kv = vec![
        ("bleu", corpus_bleu(&hyps, &refs)?),
        ("chrfpp", chrfpp(&hyps, &refs)?),
    ];
    if let Some(src) = &args.src {
        kv.push(("cr", copy_ratio(&read_sentences(src)?, &hyps)?));
    }
    if let Some(lang) = &args.lang {
        let plan = load_plan(cli)?;
        let fam = make_language_family(&plan.family, plan.family_seed)?;
        kv.push(("otr", off_target_ratio(&hyps, &LanguageTag::new(lang.as_str()), &fam)?));
    }
    for (k, v) in &kv {
        println!("{k}\t{v:.4}");
    }
    println!();
    for (k, v) in &kv {
        println!("{k}={v}");
    }
    if let Some(other) = &args.against {
        let b = read_sentences(other)?;
        let (p, sig) = bootstrap_significance(&hyps, &b, &refs, args.iterations, args.alpha, cli.seed.unwrap_or(0))?;
        println!("p={p} significant={}", u8::from(sig));
    }
    Ok(())
}
