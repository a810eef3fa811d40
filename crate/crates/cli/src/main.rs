use std::collections::BTreeSet;
use std::io::{self, BufWriter};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use preflab::corpus::{read_jsonl, write_json, Corpus, McqItem, StatementPair, StyleMixture};
use preflab::eval::{mcq_accuracy, multi_style_winners, pca_project, preference_score, write_twins};
use preflab::lm::{checkpoint, extract_representation, segment, LayerSel, LmConfig, LmModel, Tokenizer};
use preflab::par::Exec;
use preflab::recipe::{
    merge_replicates, output_root, run_experiment, Assets, ExperimentRecipe, RecipeKind,
    RunOptions, ScorerSpec, ToolInfo, TrainProfile, OUTPUT_ROOT_ENV,
};
use preflab::scorer::{serve_scorer, ExternalScorer, ModelScorer, SequenceScorer};
use preflab::templates::StatementStyle;
use preflab::train::{write_log_csv, TrainConfig, Trainer};
use preflab::{seeding, Error, Result};

#[derive(Parser)]
#[command(name = "preflab", version, about = "Learning-preference experiments on synthetic biographies")]
struct Cli {
    /// Output root; defaults to $PREFLAB_OUTPUT_ROOT, then ./runs.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    out: Option<PathBuf>,
    /// Run batch work on one thread.
    #[arg(long, global = true)]
    serial: bool,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate corpora and probe sets for a recipe and print their digests.
    Gen(RecipeArgs),
    /// Train a model on a corpus directory.
    Train(TrainArgs),
    /// Evaluate a scorer on probe files.
    #[command(subcommand)]
    Eval(EvalCmd),
    /// Generate, train and evaluate every replicate of a recipe.
    Run(RecipeArgs),
    /// Serve log-probabilities for a checkpoint on stdin/stdout.
    ServeScorer {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Merge replicate metrics under a run directory (mean and min–max).
    Report { dir: PathBuf },
}

#[derive(Args, Clone)]
struct RecipeArgs {
    /// Recipe file (.toml or .json) or a recipe kind such as `consistency`.
    recipe: String,
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    feature_a: Option<String>,
    #[arg(long)]
    feature_b: Option<String>,
    #[arg(long, value_delimiter = ',')]
    features: Option<Vec<String>>,
    #[arg(long)]
    m: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    knowledge_count: Option<usize>,
    #[arg(long)]
    test_fraction: Option<f64>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, value_parser = parse_profile)]
    profile: Option<TrainProfile>,
    /// External scorer command line, split on whitespace.
    #[arg(long)]
    external_scorer: Option<String>,
    /// Compare summed instead of per-token log-probabilities.
    #[arg(long)]
    raw: bool,
    #[arg(long)]
    statement_style: Option<StatementStyle>,
    #[arg(long)]
    eval_every_epoch: bool,
    #[arg(long)]
    layer: Option<String>,
    #[arg(long)]
    exclude_source_tokens: bool,
    #[command(flatten)]
    hyper: HyperArgs,
    #[arg(long)]
    no_checkpoints: bool,
}

#[derive(Args, Clone, Default, Serialize)]
struct HyperArgs {
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    n_layers: Option<usize>,
    #[arg(long)]
    n_heads: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    /// Directory holding corpus.jsonl and manifest.json.
    #[arg(long)]
    corpus: PathBuf,
    /// JSONL probe files whose strings must be in the vocabulary.
    #[arg(long = "vocab-from")]
    vocab_from: Vec<PathBuf>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, value_parser = parse_profile, default_value = "desk")]
    #[serde(skip)]
    profile: TrainProfile,
    #[command(flatten)]
    hyper: HyperArgs,
}

#[derive(Args)]
struct ScorerArgs {
    /// Checkpoint directory of an internal model.
    #[arg(long, conflicts_with = "external_scorer")]
    checkpoint: Option<PathBuf>,
    /// External scorer command line, split on whitespace.
    #[arg(long)]
    external_scorer: Option<String>,
    #[arg(long)]
    raw: bool,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Pairwise preference over a statements JSONL file.
    Pref {
        #[arg(long)]
        statements: PathBuf,
        #[command(flatten)]
        scorer: ScorerArgs,
    },
    /// Multiple-choice accuracy over an items JSONL file.
    Mcq {
        #[arg(long)]
        items: PathBuf,
        #[command(flatten)]
        scorer: ScorerArgs,
    },
    /// Winning style shares over a mixtures JSONL file.
    Styles {
        #[arg(long)]
        mixtures: PathBuf,
        #[command(flatten)]
        scorer: ScorerArgs,
    },
    /// 2-D projection of representations.
    Pca {
        /// JSONL of {"label", "vector"} rows.
        #[arg(long, conflicts_with_all = ["texts", "checkpoint"])]
        vectors: Option<PathBuf>,
        /// JSONL of {"label", "text"} rows, embedded with --checkpoint.
        #[arg(long, requires = "checkpoint")]
        texts: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "last")]
        layer: String,
    },
}

fn parse_profile(s: &str) -> std::result::Result<TrainProfile, String> {
    match s {
        "paper" => Ok(TrainProfile::Paper),
        "desk" => Ok(TrainProfile::Desk),
        _ => Err(format!("unknown profile {s:?} (paper|desk)")),
    }
}

fn split_command(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

impl RecipeArgs {
    fn load(&self) -> Result<ExperimentRecipe> {
        let path = Path::new(&self.recipe);
        let mut r = if path.is_file() {
            ExperimentRecipe::load(path)?
        } else {
            ExperimentRecipe::new(self.recipe.parse::<RecipeKind>()?)
        };
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = &self.$field {
                    r.$field = v.clone();
                }
            };
            ($field:ident, opt) => {
                if let Some(v) = &self.$field {
                    r.$field = Some(v.clone());
                }
            };
        }
        set!(name);
        set!(feature_a, opt);
        set!(feature_b, opt);
        set!(features);
        set!(m);
        set!(n);
        set!(knowledge_count);
        set!(test_fraction, opt);
        set!(seeds);
        set!(profile);
        set!(statement_style);
        set!(layer);
        if let Some(cmd) = &self.external_scorer {
            r.scorer = ScorerSpec::External(split_command(cmd));
        }
        if self.raw {
            r.normalize = false;
        }
        r.eval_every_epoch |= self.eval_every_epoch;
        r.exclude_source_tokens |= self.exclude_source_tokens;
        let h = &self.hyper;
        r.train.epochs = h.epochs.or(r.train.epochs);
        r.train.learning_rate = h.lr.or(r.train.learning_rate);
        r.train.batch_size = h.batch_size.or(r.train.batch_size);
        r.model.d_model = h.d_model.or(r.model.d_model);
        r.model.n_layers = h.n_layers.or(r.model.n_layers);
        r.model.n_heads = h.n_heads.or(r.model.n_heads);
        r.model.d_ff = h.d_ff.or(r.model.d_ff);
        r.fill_defaults();
        Ok(r)
    }
}

struct Ctx {
    root: PathBuf,
    exec: Exec,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("BAD_ARGUMENT: {first}");
            return ExitCode::from(2);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let ctx = Ctx {
        root: output_root(cli.out.as_deref()),
        exec: if cli.serial { Exec::Serial } else { Exec::Parallel },
    };
    match dispatch(cli.cmd, &ctx) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("{}: {msg}", e.category());
            ExitCode::FAILURE
        }
    }
}

fn dispatch(cmd: Cmd, ctx: &Ctx) -> Result<()> {
    match cmd {
        Cmd::Gen(a) => recipe_cmd(&a, ctx, true),
        Cmd::Run(a) => recipe_cmd(&a, ctx, false),
        Cmd::Train(a) => train_cmd(&a, ctx),
        Cmd::Eval(e) => eval_cmd(e, ctx),
        Cmd::ServeScorer { checkpoint } => {
            let (model, tok, _) = checkpoint::load(&checkpoint)?;
            let stdin = io::stdin();
            let stats = serve_scorer(&model, &tok, stdin.lock(), BufWriter::new(io::stdout().lock()))?;
            log::info!("served {} requests ({} errors)", stats.requests, stats.errors);
            Ok(())
        }
        Cmd::Report { dir } => {
            let rep = merge_replicates(&dir)?;
            for (k, s) in &rep.summary {
                println!("{k}\t{:.4} ± [{:.4}, {:.4}]\tn={}", s.mean, s.min, s.max, s.n);
            }
            println!("{}", dir.join("summary.json").display());
            Ok(())
        }
    }
}

fn recipe_cmd(a: &RecipeArgs, ctx: &Ctx, generate_only: bool) -> Result<()> {
    let recipe = a.load()?;
    let opts = RunOptions {
        exec: ctx.exec,
        save_checkpoints: !a.no_checkpoints,
        generate_only,
    };
    let report = run_experiment(&recipe, &ctx.root, &Assets::bundled(), &opts)?;
    for r in &report.replicates {
        for (key, digest) in &r.corpus_digests {
            println!("seed-{}\t{key}\t{digest}", r.seed);
        }
    }
    if !generate_only {
        for (k, s) in &report.summary {
            println!("{k}\t{:.4} ± [{:.4}, {:.4}]", s.mean, s.min, s.max);
        }
    }
    println!("{}", report.dir.display());
    Ok(())
}

/// Every string value in a JSON document, recursively.
fn strings(v: &serde_json::Value, out: &mut Vec<String>) {
    match v {
        serde_json::Value::String(s) => out.push(s.clone()),
        serde_json::Value::Array(a) => a.iter().for_each(|x| strings(x, out)),
        serde_json::Value::Object(o) => o.values().for_each(|x| strings(x, out)),
        _ => {}
    }
}

fn train_cmd(a: &TrainArgs, ctx: &Ctx) -> Result<()> {
    let corpus = Corpus::read(&a.corpus)?;
    let mut extra = Vec::new();
    for p in &a.vocab_from {
        for v in read_jsonl::<serde_json::Value>(p)? {
            strings(&v, &mut extra);
        }
    }
    let texts: Vec<&str> = corpus.texts().collect();
    let probes: Vec<&str> = extra.iter().map(String::as_str).collect();
    let tok = Tokenizer::build([texts.clone(), probes.clone()])?;
    let longest = texts
        .iter()
        .chain(&probes)
        .map(|t| segment(t).len() + 2)
        .max()
        .unwrap_or(2);
    let h = &a.hyper;
    let base = LmConfig::desk(tok.vocab_size());
    let cfg = LmConfig {
        d_model: h.d_model.unwrap_or(base.d_model),
        n_layers: h.n_layers.unwrap_or(base.n_layers),
        n_heads: h.n_heads.unwrap_or(base.n_heads),
        d_ff: h.d_ff.unwrap_or(base.d_ff),
        max_context: base.max_context.max(longest),
        ..base
    };
    let mut tc = match a.profile {
        TrainProfile::Paper => TrainConfig::paper(a.seed),
        TrainProfile::Desk => TrainConfig::desk(a.seed),
    };
    tc.epochs = h.epochs.unwrap_or(tc.epochs);
    tc.learning_rate = h.lr.unwrap_or(tc.learning_rate);
    tc.batch_size = h.batch_size.unwrap_or(tc.batch_size);
    let init_seed = seeding::derive(a.seed, "model-init", 0);
    let model = LmModel::init(cfg, init_seed)?;
    let dir = ctx.root.join(format!("train-{}", corpus.manifest.corpus_id));
    let mut trainer = Trainer::new(ctx.exec).with_checkpoints(dir.join("checkpoints"));
    trainer.init_seed = init_seed;
    let (_, log) = trainer.train(model, &texts, &tok, &tc)?;
    write_log_csv(&log, &dir.join("train_log.csv"))?;
    write_json(&dir.join("manifest.json"), &corpus.manifest)?;
    write_json(
        &dir.join("config.json"),
        &serde_json::json!({"tool": ToolInfo::current(), "model": cfg, "train": tc, "args": a}),
    )?;
    write_json(&dir.join("tool.json"), &ToolInfo::current())?;
    for p in &log.checkpoints {
        println!("{}", p.display());
    }
    println!("{}", dir.display());
    Ok(())
}

enum Loaded {
    Internal(LmModel, Tokenizer),
    External(ExternalScorer),
}

impl Loaded {
    fn new(a: &ScorerArgs) -> Result<Self> {
        match (&a.checkpoint, &a.external_scorer) {
            (Some(dir), None) => {
                let (m, t, _) = checkpoint::load(dir)?;
                Ok(Loaded::Internal(m, t))
            }
            (None, Some(cmd)) => Ok(Loaded::External(ExternalScorer::new(split_command(cmd)))),
            _ => Err(Error::Argument("give exactly one of --checkpoint or --external-scorer".into())),
        }
    }

    fn scorer(&self, exec: Exec) -> Box<dyn SequenceScorer + '_> {
        match self {
            Loaded::Internal(m, t) => {
                let mut s = ModelScorer::new(m, t);
                s.exec = exec;
                Box::new(s)
            }
            Loaded::External(e) => Box::new(ExternalScorer {
                command: e.command.clone(),
                timeout: e.timeout,
            }),
        }
    }
}

fn eval_dir(ctx: &Ctx, what: &str, input: &Path) -> Result<PathBuf> {
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("input");
    let dir = ctx.root.join(format!("eval-{what}-{stem}"));
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io { path: dir.clone(), source: e })?;
    write_json(&dir.join("tool.json"), &ToolInfo::current())?;
    Ok(dir)
}

fn eval_cmd(cmd: EvalCmd, ctx: &Ctx) -> Result<()> {
    let dir = match cmd {
        EvalCmd::Pref { statements, scorer } => {
            let pairs: Vec<StatementPair> = read_jsonl(&statements)?;
            let loaded = Loaded::new(&scorer)?;
            let r = preference_score(loaded.scorer(ctx.exec).as_ref(), &pairs, !scorer.raw)?;
            let dir = eval_dir(ctx, "pref", &statements)?;
            write_twins(&dir, "preference", &r, &r.to_csv()?)?;
            println!("average\t{:.4}\tn={}\tties={}", r.average, r.n, r.tie_count);
            dir
        }
        EvalCmd::Mcq { items, scorer } => {
            let it: Vec<McqItem> = read_jsonl(&items)?;
            let loaded = Loaded::new(&scorer)?;
            let r = mcq_accuracy(loaded.scorer(ctx.exec).as_ref(), &it, !scorer.raw)?;
            let dir = eval_dir(ctx, "mcq", &items)?;
            write_twins(&dir, "mcq", &r, &r.to_csv()?)?;
            println!("accuracy\t{:.4}\tn={}", r.accuracy, r.n_items);
            dir
        }
        EvalCmd::Styles { mixtures, scorer } => {
            let mx: Vec<StyleMixture> = read_jsonl(&mixtures)?;
            let loaded = Loaded::new(&scorer)?;
            let r = multi_style_winners(loaded.scorer(ctx.exec).as_ref(), &mx, !scorer.raw)?;
            let dir = eval_dir(ctx, "styles", &mixtures)?;
            write_twins(&dir, "styles", &r, &r.to_csv()?)?;
            for (s, p) in r.styles.iter().zip(&r.proportions) {
                println!("{s}\t{p:.4}");
            }
            dir
        }
        EvalCmd::Pca {
            vectors,
            texts,
            checkpoint: ckpt,
            layer,
        } => {
            let (labels, vecs, input): (Vec<String>, Vec<Vec<f64>>, PathBuf) = match (vectors, texts, ckpt) {
                (Some(p), None, None) => {
                    let rows: Vec<VectorRow> = read_jsonl(&p)?;
                    let (l, v): (Vec<String>, Vec<Vec<f64>>) = rows.into_iter().map(|r| (r.label, r.vector)).unzip();
                    (l, v, p)
                }
                (None, Some(p), Some(c)) => {
                    let rows: Vec<TextRow> = read_jsonl(&p)?;
                    let (model, tok, _) = checkpoint::load(&c)?;
                    let sel: LayerSel = layer.parse()?;
                    let v = rows
                        .iter()
                        .map(|r| extract_representation(&model, &r.text, &tok, sel, 0))
                        .collect::<Result<Vec<_>>>()?;
                    (rows.into_iter().map(|r| r.label).collect(), v, p)
                }
                _ => return Err(Error::Argument("give --vectors, or --texts with --checkpoint".into())),
            };
            if vecs.is_empty() {
                return Err(Error::EmptyInput("no vectors to project".into()));
            }
            let r = pca_project(&vecs, &labels)?;
            let dir = eval_dir(ctx, "pca", &input)?;
            write_twins(&dir, "projection", &r, &r.to_csv()?)?;
            let distinct: BTreeSet<&String> = labels.iter().collect();
            println!(
                "explained_variance_ratio\t{:.4}\t{:.4}\tgroups={}",
                r.explained_variance_ratio[0],
                r.explained_variance_ratio[1],
                distinct.len()
            );
            dir
        }
    };
    println!("{}", dir.display());
    Ok(())
}

#[derive(Deserialize)]
struct VectorRow {
    label: String,
    vector: Vec<f64>,
}

#[derive(Deserialize)]
struct TextRow {
    label: String,
    text: String,
}
