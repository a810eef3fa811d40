//! Experiment recipes and the generate → train → evaluate pipeline.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::corpus::{
    build_mcq_set, build_rendered_mcq_set, build_rendered_statements, build_test_statements, side_a_set, write_json, write_jsonl, Corpus, CorpusBuilder, McqItem,
    StatementPair, StyleMixture,
};
use crate::error::{Error, Result};
use crate::eval::{
    mcq_accuracy, multi_style_winners, pca_project, plot_csv, preference_score, write_twins, PlotSeries,
    PreferenceReport, Summary,
};
use crate::knowledge::{make_conflicts, sample_knowledge_set, split_evidence_test, AttributePools, ConflictPair};
use crate::lm::{extract_representation_trimmed, segment, LayerSel, LmConfig, LmModel, Tokenizer};
use crate::par::Exec;
use crate::scorer::{ExternalScorer, ModelScorer, SequenceScorer, DEFAULT_TIMEOUT};
use crate::seeding;
use crate::templates::{
    render, source_name_phrase, Placement, SourceAux, SourcePools, StatementStyle, TemplatePack, NEUTRAL_FEATURE,
    STYLE_FEATURES,
};
use crate::train::{write_log_csv, EpochHook, MetricTable, TrainConfig, TrainLog, Trainer};

pub const TOOL_NAME: &str = "preflab";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "PREFLAB_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";
pub const DEFAULT_TEST_FRACTION: f64 = 0.2;
/// Sources per group in the representation probe (A1, A2 and B1, B2).
pub const PROBE_SOURCES_PER_GROUP: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecipeKind {
    ConflictPairwise,
    LearningSpeed,
    ConsistencyRatio,
    Counterfactual,
    MultiStyle,
    RepresentationProbe,
}

impl RecipeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            RecipeKind::ConflictPairwise => "conflict_pairwise",
            RecipeKind::LearningSpeed => "learning_speed",
            RecipeKind::ConsistencyRatio => "consistency_ratio",
            RecipeKind::Counterfactual => "counterfactual",
            RecipeKind::MultiStyle => "multi_style",
            RecipeKind::RepresentationProbe => "representation_probe",
        }
    }
}

impl FromStr for RecipeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = match s {
            "consistency" => "consistency_ratio",
            "conflict" => "conflict_pairwise",
            "representation" => "representation_probe",
            other => other,
        };
        serde_json::from_value(serde_json::Value::String(s.into()))
            .map_err(|_| Error::Argument(format!("unknown recipe kind {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainProfile {
    Paper,
    #[default]
    Desk,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerSpec {
    #[default]
    Internal,
    External(Vec<String>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub d_model: Option<usize>,
    pub n_layers: Option<usize>,
    pub n_heads: Option<usize>,
    pub d_ff: Option<usize>,
    pub max_context: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub warmup_ratio: Option<f64>,
    pub weight_decay: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentRecipe {
    pub name: String,
    pub kind: RecipeKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_a: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub feature_b: Option<String>,
    /// Features trained separately (learning_speed) or mixed (multi_style).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub features: Vec<String>,
    #[serde(default)]
    pub m: usize,
    #[serde(default)]
    pub n: usize,
    /// Consistency ratios for the counterfactual bundle.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub ratios: Vec<(usize, usize)>,
    pub knowledge_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test_fraction: Option<f64>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub profile: TrainProfile,
    #[serde(default)]
    pub scorer: ScorerSpec,
    #[serde(default = "default_true")]
    pub normalize: bool,
    #[serde(default)]
    pub statement_style: StatementStyle,
    #[serde(default)]
    pub eval_every_epoch: bool,
    /// Representation layer: `last` or an index.
    #[serde(default = "default_layer")]
    pub layer: String,
    #[serde(default)]
    pub exclude_source_tokens: bool,
    #[serde(default)]
    pub model: ModelOverrides,
    #[serde(default)]
    pub train: TrainOverrides,
}

fn default_true() -> bool {
    true
}

fn default_layer() -> String {
    "last".into()
}

impl ExperimentRecipe {
    /// A recipe of `kind` with the documented defaults filled in.
    pub fn new(kind: RecipeKind) -> Self {
        let mut r = ExperimentRecipe {
            name: kind.as_str().into(),
            kind,
            feature_a: None,
            feature_b: None,
            features: Vec::new(),
            m: 0,
            n: 0,
            ratios: Vec::new(),
            knowledge_count: 50,
            test_fraction: None,
            seeds: vec![1],
            profile: TrainProfile::Desk,
            scorer: ScorerSpec::Internal,
            normalize: true,
            statement_style: StatementStyle::Plain,
            eval_every_epoch: false,
            layer: default_layer(),
            exclude_source_tokens: false,
            model: ModelOverrides::default(),
            train: TrainOverrides::default(),
        };
        r.fill_defaults();
        r
    }

    /// Reads a `.toml` or `.json` recipe.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let is_json = path.extension().is_some_and(|e| e == "json");
        let mut r: ExperimentRecipe = if is_json {
            serde_json::from_str(&text)?
        } else {
            toml::from_str(&text).map_err(|e| Error::Toml(format!("{}: {e}", path.display())))?
        };
        r.fill_defaults();
        Ok(r)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Toml(e.to_string()))
    }

    /// Fills kind-specific defaults left unset.
    pub fn fill_defaults(&mut self) {
        let set = |f: &mut Option<String>, v: &str| {
            if f.is_none() {
                *f = Some(v.into());
            }
        };
        match self.kind {
            RecipeKind::ConflictPairwise => {
                set(&mut self.feature_a, "newspaper");
                set(&mut self.feature_b, "novel");
            }
            RecipeKind::ConsistencyRatio | RecipeKind::RepresentationProbe => {
                set(&mut self.feature_a, "source_name_a");
                set(&mut self.feature_b, "source_name_b");
            }
            RecipeKind::Counterfactual => {
                set(&mut self.feature_a, "novel");
                set(&mut self.feature_b, "newspaper");
                if self.ratios.is_empty() {
                    self.ratios = vec![(0, 0), (5, 5), (9, 1)];
                }
            }
            RecipeKind::LearningSpeed => {
                if self.features.is_empty() {
                    self.features = vec!["newspaper".into(), "social_media".into()];
                }
            }
            RecipeKind::MultiStyle => {
                if self.features.is_empty() {
                    self.features = STYLE_FEATURES.iter().map(|s| s.to_string()).collect();
                }
            }
        }
        if matches!(self.kind, RecipeKind::ConsistencyRatio | RecipeKind::Counterfactual) && self.test_fraction.is_none() {
            self.test_fraction = Some(DEFAULT_TEST_FRACTION);
        }
    }

    pub fn validate(&self, pack: &TemplatePack) -> Result<()> {
        let bad = |m: String| Err(Error::Argument(format!("recipe {}: {m}", self.name)));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        let mut s = self.seeds.clone();
        s.sort_unstable();
        s.dedup();
        if s.len() != self.seeds.len() {
            return bad("replicate seeds must be distinct".into());
        }
        if self.knowledge_count == 0 {
            return bad("knowledge_count must be positive".into());
        }
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return bad(format!("invalid name {:?}", self.name));
        }
        self.layer_sel()?;
        let mut needed: Vec<&String> = self.features.iter().collect();
        needed.extend(self.feature_a.iter().chain(self.feature_b.iter()));
        for f in needed {
            pack.require_feature(f)?;
        }
        let pair_kinds = [
            RecipeKind::ConflictPairwise,
            RecipeKind::ConsistencyRatio,
            RecipeKind::Counterfactual,
            RecipeKind::RepresentationProbe,
        ];
        if pair_kinds.contains(&self.kind) && (self.feature_a.is_none() || self.feature_b.is_none()) {
            return bad("feature_a and feature_b are required".into());
        }
        match self.kind {
            RecipeKind::LearningSpeed if self.features.is_empty() => return bad("features must not be empty".into()),
            RecipeKind::MultiStyle if self.features.len() < 2 => return bad("multi_style needs at least 2 features".into()),
            RecipeKind::ConsistencyRatio | RecipeKind::Counterfactual => {
                let f = self.test_fraction.unwrap_or(DEFAULT_TEST_FRACTION);
                if !(f > 0.0 && f < 1.0) {
                    return bad(format!("test_fraction {f} outside (0, 1)"));
                }
            }
            RecipeKind::RepresentationProbe => {
                let pack_kind = pack.require_feature(self.feature_a.as_deref().unwrap())?.kind;
                if pack_kind != crate::templates::FeatureKind::SyntheticSource {
                    return bad("representation_probe needs source_name features".into());
                }
            }
            _ => {}
        }
        if self.scorer != ScorerSpec::Internal && self.kind == RecipeKind::RepresentationProbe {
            return bad("representation_probe needs the internal model".into());
        }
        if let ScorerSpec::External(cmd) = &self.scorer {
            if cmd.is_empty() {
                return bad("external scorer command is empty".into());
            }
        }
        Ok(())
    }

    pub fn layer_sel(&self) -> Result<LayerSel> {
        self.layer.parse()
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let mut c = match self.profile {
            TrainProfile::Paper => TrainConfig::paper(seed),
            TrainProfile::Desk => TrainConfig::desk(seed),
        };
        let t = &self.train;
        if let Some(v) = t.batch_size {
            c.batch_size = v;
        }
        if let Some(v) = t.learning_rate {
            c.learning_rate = v;
        }
        if let Some(v) = t.epochs {
            c.epochs = v;
        }
        if let Some(v) = t.warmup_ratio {
            c.warmup_ratio = v;
        }
        if let Some(v) = t.weight_decay {
            c.weight_decay = v;
        }
        c
    }

    pub fn model_config(&self, vocab_size: usize, longest: usize) -> LmConfig {
        let base = LmConfig::desk(vocab_size);
        let o = &self.model;
        LmConfig {
            vocab_size,
            d_model: o.d_model.unwrap_or(base.d_model),
            n_layers: o.n_layers.unwrap_or(base.n_layers),
            n_heads: o.n_heads.unwrap_or(base.n_heads),
            d_ff: o.d_ff.unwrap_or(base.d_ff),
            max_context: o.max_context.unwrap_or(base.max_context.max(longest)),
        }
    }

    /// The recipe with every default and override spelled out.
    pub fn resolved(&self) -> ResolvedRecipe {
        let cfg = self.train_config(self.seeds[0]);
        let base = LmConfig::desk(0);
        let mut recipe = self.clone();
        recipe.fill_defaults();
        recipe.train = TrainOverrides {
            batch_size: Some(cfg.batch_size),
            learning_rate: Some(cfg.learning_rate),
            epochs: Some(cfg.epochs),
            warmup_ratio: Some(cfg.warmup_ratio),
            weight_decay: Some(cfg.weight_decay),
        };
        recipe.model = ModelOverrides {
            d_model: Some(self.model.d_model.unwrap_or(base.d_model)),
            n_layers: Some(self.model.n_layers.unwrap_or(base.n_layers)),
            n_heads: Some(self.model.n_heads.unwrap_or(base.n_heads)),
            d_ff: Some(self.model.d_ff.unwrap_or(base.d_ff)),
            max_context: self.model.max_context,
        };
        ResolvedRecipe {
            tool: ToolInfo::current(),
            recipe,
            train_config: cfg,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolInfo {
    pub name: String,
    pub version: String,
}

impl ToolInfo {
    pub fn current() -> Self {
        ToolInfo {
            name: TOOL_NAME.into(),
            version: TOOL_VERSION.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedRecipe {
    pub tool: ToolInfo,
    pub recipe: ExperimentRecipe,
    /// Training configuration of the first seed; later seeds differ only in `seed`.
    pub train_config: TrainConfig,
}

/// Writes the resolved recipe (TOML and JSON) and the tool version into `dir`.
pub fn write_provenance(dir: &Path, recipe: &ExperimentRecipe) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let resolved = recipe.resolved();
    write_json(&dir.join("config.json"), &resolved)?;
    let p = dir.join("config.toml");
    let toml = toml::to_string_pretty(&resolved).map_err(|e| Error::Toml(e.to_string()))?;
    fs::write(&p, toml).map_err(|e| Error::io(&p, e))?;
    write_json(&dir.join("tool.json"), &ToolInfo::current())
}

/// Output root: explicit path, else `$PREFLAB_OUTPUT_ROOT`, else `./runs`.
pub fn output_root(explicit: Option<&Path>) -> PathBuf {
    explicit
        .map(Path::to_path_buf)
        .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

#[derive(Debug, Clone)]
pub struct RunOptions {
    pub exec: Exec,
    pub save_checkpoints: bool,
    /// Skip training and evaluation.
    pub generate_only: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            exec: Exec::default(),
            save_checkpoints: true,
            generate_only: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplicateResult {
    pub seed: u64,
    pub dir: PathBuf,
    pub metrics: BTreeMap<String, f64>,
    /// Corpus digest per sub-run.
    pub corpus_digests: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub recipe: String,
    pub kind: RecipeKind,
    pub dir: PathBuf,
    pub replicates: Vec<ReplicateResult>,
    pub summary: BTreeMap<String, Summary>,
}

impl RunReport {
    pub fn summary_csv(&self) -> String {
        let mut out = String::from("metric,mean,min,max,n\n");
        for (k, s) in &self.summary {
            out.push_str(&format!("{k},{},{},{},{}\n", s.mean, s.min, s.max, s.n));
        }
        out
    }
}

fn stage<T>(name: &str, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Stage { .. } => e,
        e => Error::stage(name, e),
    })
}

/// Shared, read-only inputs of every run.
pub struct Assets {
    pub pools: AttributePools,
    pub pack: TemplatePack,
    pub sources: SourcePools,
}

impl Assets {
    pub fn bundled() -> Self {
        Assets {
            pools: AttributePools::bundled(),
            pack: TemplatePack::bundled(),
            sources: SourcePools::bundled(),
        }
    }
}

/// Runs every replicate of `recipe` under `root/<name>` and writes the merged summary.
pub fn run_experiment(recipe: &ExperimentRecipe, root: &Path, assets: &Assets, opts: &RunOptions) -> Result<RunReport> {
    let mut recipe = recipe.clone();
    recipe.fill_defaults();
    recipe.validate(&assets.pack)?;
    let dir = root.join(&recipe.name);
    write_provenance(&dir, &recipe)?;
    let mut replicates = Vec::new();
    for &seed in &recipe.seeds {
        let rdir = dir.join(format!("seed-{seed}"));
        log::info!("{}: seed {seed} → {}", recipe.name, rdir.display());
        let mut rep = ReplicateResult {
            seed,
            dir: rdir.clone(),
            metrics: BTreeMap::new(),
            corpus_digests: BTreeMap::new(),
        };
        let ctx = Ctx {
            recipe: &recipe,
            assets,
            opts,
            seed,
        };
        ctx.run(&rdir, &mut rep)?;
        write_json(&rdir.join("metrics.json"), &rep)?;
        replicates.push(rep);
    }
    let report = RunReport {
        recipe: recipe.name.clone(),
        kind: recipe.kind,
        dir: dir.clone(),
        summary: summarize(&replicates),
        replicates,
    };
    write_json(&dir.join("summary.json"), &report)?;
    let p = dir.join("summary.csv");
    fs::write(&p, report.summary_csv()).map_err(|e| Error::io(&p, e))?;
    Ok(report)
}

fn summarize(replicates: &[ReplicateResult]) -> BTreeMap<String, Summary> {
    let mut by: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for r in replicates {
        for (k, v) in &r.metrics {
            by.entry(k.clone()).or_default().push(*v);
        }
    }
    by.into_iter()
        .filter_map(|(k, v)| Summary::of(&v).map(|s| (k, s)))
        .collect()
}

/// Re-reads `seed-*/metrics.json` under a run directory and rewrites the summary.
pub fn merge_replicates(dir: &Path) -> Result<RunReport> {
    let mut replicates: Vec<ReplicateResult> = Vec::new();
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("metrics.json").is_file())
        .collect();
    paths.sort();
    for p in paths {
        replicates.push(crate::corpus::read_json(&p.join("metrics.json"))?);
    }
    if replicates.is_empty() {
        return Err(Error::EmptyInput(format!("no replicate metrics under {}", dir.display())));
    }
    let resolved: ResolvedRecipe = crate::corpus::read_json(&dir.join("config.json"))?;
    let report = RunReport {
        recipe: resolved.recipe.name,
        kind: resolved.recipe.kind,
        dir: dir.to_path_buf(),
        summary: summarize(&replicates),
        replicates,
    };
    write_json(&dir.join("summary.json"), &report)?;
    let p = dir.join("summary.csv");
    fs::write(&p, report.summary_csv()).map_err(|e| Error::io(&p, e))?;
    Ok(report)
}

/// Per-epoch preference probe.
pub struct PreferenceHook<'a> {
    pub name: String,
    pub sets: Vec<(String, &'a [StatementPair])>,
    pub normalize: bool,
    pub exec: Exec,
}

impl EpochHook for PreferenceHook<'_> {
    fn name(&self) -> &str {
        &self.name
    }

    fn evaluate(&mut self, _epoch: usize, model: &LmModel, tok: &Tokenizer) -> Result<Vec<(String, f64)>> {
        let mut scorer = ModelScorer::new(model, tok);
        scorer.exec = self.exec;
        self.sets
            .iter()
            .map(|(label, pairs)| Ok((label.clone(), preference_score(&scorer, pairs, self.normalize)?.average)))
            .collect()
    }
}

/// Per-epoch multiple-choice accuracy over one or more item sets.
pub struct McqHook<'a> {
    pub sets: Vec<(String, &'a [McqItem])>,
    pub normalize: bool,
    pub exec: Exec,
}

impl EpochHook for McqHook<'_> {
    fn name(&self) -> &str {
        "mcq"
    }

    fn evaluate(&mut self, _epoch: usize, model: &LmModel, tok: &Tokenizer) -> Result<Vec<(String, f64)>> {
        let mut scorer = ModelScorer::new(model, tok);
        scorer.exec = self.exec;
        self.sets
            .iter()
            .map(|(label, items)| Ok((label.clone(), mcq_accuracy(&scorer, items, self.normalize)?.accuracy)))
            .collect()
    }
}

struct Ctx<'a> {
    recipe: &'a ExperimentRecipe,
    assets: &'a Assets,
    opts: &'a RunOptions,
    seed: u64,
}

/// Outcome of training one model on one corpus.
struct Trained {
    model: LmModel,
    tokenizer: Tokenizer,
    metrics: MetricTable,
}

impl<'a> Ctx<'a> {
    fn builder(&self) -> CorpusBuilder<'a> {
        let mut b = CorpusBuilder::new(&self.assets.pack, &self.assets.sources);
        b.exec = self.opts.exec;
        b
    }

    fn evaluating(&self) -> bool {
        !self.opts.generate_only
    }

    fn trains(&self) -> bool {
        self.evaluating() && self.recipe.scorer == ScorerSpec::Internal
    }

    fn pairs(&self) -> Result<Vec<ConflictPair>> {
        let p = &self.assets.pools;
        let ks = sample_knowledge_set(p, self.recipe.knowledge_count, self.seed)?;
        make_conflicts(p, &ks, self.seed)
    }

    fn save_corpus(&self, dir: &Path, corpus: &Corpus, rep: &mut ReplicateResult, key: &str) -> Result<()> {
        corpus.write(dir)?;
        write_provenance(dir, self.recipe)?;
        rep.corpus_digests.insert(key.into(), corpus.manifest.corpus_digest.clone());
        Ok(())
    }

    /// Builds the closed vocabulary, trains, and writes log, metrics and checkpoint.
    fn train(
        &self,
        dir: &Path,
        corpus: &Corpus,
        probes: &[&str],
        hooks: &mut [&mut dyn EpochHook],
    ) -> Result<Trained> {
        let tokenizer = Tokenizer::build([corpus.texts().collect::<Vec<_>>(), probes.to_vec()])?;
        let longest = corpus
            .texts()
            .chain(probes.iter().copied())
            .map(|t| segment(t).len() + 2)
            .max()
            .unwrap_or(2);
        let cfg = self.recipe.model_config(tokenizer.vocab_size(), longest);
        let init_seed = seeding::derive(self.seed, "model-init", 0);
        let model = LmModel::init(cfg, init_seed)?;
        let tc = self.recipe.train_config(self.seed);
        let mut trainer = Trainer::new(self.opts.exec);
        trainer.init_seed = init_seed;
        if self.opts.save_checkpoints {
            trainer = trainer.with_checkpoints(dir.join("checkpoints"));
        }
        let texts: Vec<&str> = corpus.texts().collect();
        log::info!(
            "training {} params on {} documents for {} epochs",
            model.parameter_count(),
            texts.len(),
            tc.epochs
        );
        let (model, log, metrics): (LmModel, TrainLog, MetricTable) =
            trainer.train_with_eval_hooks(model, &texts, &tokenizer, &tc, hooks)?;
        write_log_csv(&log, &dir.join("train_log.csv"))?;
        let p = dir.join("epoch_metrics.csv");
        fs::write(&p, metrics.to_csv()).map_err(|e| Error::io(&p, e))?;
        Ok(Trained {
            model,
            tokenizer,
            metrics,
        })
    }

    fn scorer_for<'m>(&self, trained: Option<&'m Trained>) -> Box<dyn SequenceScorer + 'm> {
        match (&self.recipe.scorer, trained) {
            (ScorerSpec::External(cmd), _) => Box::new(ExternalScorer {
                command: cmd.clone(),
                timeout: DEFAULT_TIMEOUT,
            }),
            (ScorerSpec::Internal, Some(t)) => {
                let mut s = ModelScorer::new(&t.model, &t.tokenizer);
                s.exec = self.opts.exec;
                Box::new(s)
            }
            (ScorerSpec::Internal, None) => unreachable!("internal scoring needs a trained model"),
        }
    }

    fn preference(
        &self,
        dir: &Path,
        stem: &str,
        scorer: &dyn SequenceScorer,
        pairs: &[StatementPair],
    ) -> Result<PreferenceReport> {
        let r = preference_score(scorer, pairs, self.recipe.normalize)?;
        write_twins(dir, stem, &r, &r.to_csv()?)?;
        Ok(r)
    }

    fn run(&self, dir: &Path, rep: &mut ReplicateResult) -> Result<()> {
        match self.recipe.kind {
            RecipeKind::ConflictPairwise => self.run_conflict(dir, rep),
            RecipeKind::LearningSpeed => self.run_learning_speed(dir, rep),
            RecipeKind::ConsistencyRatio => {
                let (m, n) = (self.recipe.m, self.recipe.n);
                self.run_consistency(dir, rep, m, n, "")
            }
            RecipeKind::Counterfactual => {
                for &(m, n) in &self.recipe.ratios {
                    let sub = dir.join(format!("ratio-{m}-{n}"));
                    self.run_consistency(&sub, rep, m, n, &format!("ratio_{m}_{n}."))?;
                }
                Ok(())
            }
            RecipeKind::MultiStyle => self.run_multi_style(dir, rep),
            RecipeKind::RepresentationProbe => {
                for (placement, label) in [(Placement::Start, "start"), (Placement::End, "end")] {
                    self.run_probe(&dir.join(format!("placement-{label}")), rep, placement, label)?;
                }
                Ok(())
            }
        }
    }

    fn run_conflict(&self, dir: &Path, rep: &mut ReplicateResult) -> Result<()> {
        let r = self.recipe;
        let (fa, fb) = (r.feature_a.as_deref().unwrap(), r.feature_b.as_deref().unwrap());
        let pairs = stage("generate", self.pairs())?;
        let corpus = stage("generate", self.builder().conflict(&pairs, fa, fb, self.seed))?;
        let statements = build_test_statements(&pairs, r.statement_style);
        stage("generate", self.save_corpus(dir, &corpus, rep, "corpus"))?;
        stage("generate", write_jsonl(&dir.join("statements.jsonl"), &statements))?;
        if !self.evaluating() {
            return Ok(());
        }
        let probes: Vec<&str> = statements.iter().flat_map(|s| [s.s_a.as_str(), s.s_b.as_str()]).collect();
        let trained = if self.trains() {
            let mut hook = PreferenceHook {
                name: "preference".into(),
                sets: vec![("pr".into(), &statements)],
                normalize: r.normalize,
                exec: self.opts.exec,
            };
            let mut hooks: Vec<&mut dyn EpochHook> = Vec::new();
            if r.eval_every_epoch {
                hooks.push(&mut hook);
            }
            Some(stage("train", self.train(dir, &corpus, &probes, &mut hooks))?)
        } else {
            None
        };
        let scorer = self.scorer_for(trained.as_ref());
        let report = stage("evaluate", self.preference(dir, "preference", scorer.as_ref(), &statements))?;
        rep.metrics.insert("pr_avg".into(), report.average);
        for a in &report.attributes {
            rep.metrics.insert(format!("pr.{}", a.attribute.key()), a.score);
        }
        if let Some(t) = &trained {
            self.write_dynamics(dir, &t.metrics, "preference", &["pr"])?;
        }
        Ok(())
    }

    fn write_dynamics(&self, dir: &Path, metrics: &MetricTable, hook: &str, names: &[&str]) -> Result<()> {
        let series: Vec<PlotSeries> = names
            .iter()
            .map(|m| PlotSeries {
                name: m.to_string(),
                x_label: "epoch".into(),
                y_label: m.to_string(),
                points: metrics.series(hook, m).into_iter().map(|(e, v)| (e as f64, v)).collect(),
            })
            .filter(|s| !s.points.is_empty())
            .collect();
        if series.is_empty() {
            return Ok(());
        }
        let p = dir.join("plot_dynamics.csv");
        fs::write(&p, plot_csv(&series)?).map_err(|e| Error::io(&p, e))
    }

    /// Per feature: train on a single-feature corpus and track two probes.
    /// `mcq` options are held-out biographies in the feature's own templates;
    /// `mcq_statement` options are the plain probe statements.
    fn run_learning_speed(&self, dir: &Path, rep: &mut ReplicateResult) -> Result<()> {
        let r = self.recipe;
        let a = self.assets;
        let ks = stage("generate", sample_knowledge_set(&a.pools, r.knowledge_count, self.seed))?;
        let statements = stage("generate", build_mcq_set(&ks, &a.pools, r.statement_style, self.seed))?;
        let mut curves = Vec::new();
        for feature in &r.features {
            let sub = dir.join(format!("feature-{feature}"));
            let corpus = stage("generate", self.builder().single_feature(&ks, feature, self.seed))?;
            let rendered = stage(
                "generate",
                build_rendered_mcq_set(&ks, &a.pools, &a.pack, &a.sources, feature, &corpus, self.seed),
            )?;
            stage("generate", self.save_corpus(&sub, &corpus, rep, feature))?;
            stage("generate", write_jsonl(&sub.join("mcq.jsonl"), &rendered))?;
            stage("generate", write_jsonl(&sub.join("mcq_statement.jsonl"), &statements))?;
            if !self.evaluating() {
                continue;
            }
            let probes: Vec<&str> = rendered
                .iter()
                .chain(&statements)
                .flat_map(|i| std::iter::once(i.correct.as_str()).chain(i.distractors.iter().map(String::as_str)))
                .collect();
            let sets: [(&str, &[McqItem]); 2] = [("mcq", &rendered), ("mcq_statement", &statements)];
            let trained = if self.trains() {
                let mut hook = McqHook {
                    sets: sets.iter().map(|(l, i)| (l.to_string(), *i)).collect(),
                    normalize: r.normalize,
                    exec: self.opts.exec,
                };
                Some(stage("train", self.train(&sub, &corpus, &probes, &mut [&mut hook]))?)
            } else {
                None
            };
            let scorer = self.scorer_for(trained.as_ref());
            for (label, items) in sets {
                let report = stage("evaluate", mcq_accuracy(scorer.as_ref(), items, r.normalize))?;
                stage("evaluate", write_twins(&sub, label, &report, &report.to_csv()?))?;
                rep.metrics.insert(format!("{feature}.{label}"), report.accuracy);
                for at in &report.attributes {
                    rep.metrics.insert(format!("{feature}.{label}.{}", at.attribute.key()), at.accuracy);
                }
                let Some(t) = &trained else { continue };
                let points: Vec<(f64, f64)> = t
                    .metrics
                    .series("mcq", label)
                    .into_iter()
                    .map(|(e, v)| (e as f64, v))
                    .collect();
                for (e, v) in &points {
                    rep.metrics.insert(format!("{feature}.{label}_epoch_{:03}", *e as usize), *v);
                }
                curves.push(PlotSeries {
                    name: format!("{feature}.{label}"),
                    x_label: "epoch".into(),
                    y_label: "mcq accuracy".into(),
                    points,
                });
            }
        }
        if !curves.is_empty() {
            let p = dir.join("plot_dynamics.csv");
            stage("evaluate", fs::write(&p, plot_csv(&curves)?).map_err(|e| Error::io(&p, e)))?;
        }
        Ok(())
    }

    fn run_consistency(&self, dir: &Path, rep: &mut ReplicateResult, m: usize, n: usize, prefix: &str) -> Result<()> {
        let r = self.recipe;
        let pools = &self.assets.pools;
        let (fa, fb) = (r.feature_a.as_deref().unwrap(), r.feature_b.as_deref().unwrap());
        let ks = stage("generate", sample_knowledge_set(pools, r.knowledge_count, self.seed))?;
        let frac = r.test_fraction.unwrap_or(DEFAULT_TEST_FRACTION);
        let split = stage("generate", split_evidence_test(&ks, frac, self.seed))?;
        let corpus = stage(
            "generate",
            self.builder()
                .consistency_from_split(&split, pools, self.seed, fa, fb, m, n, self.seed),
        )?;
        let ev_pairs = stage("generate", make_conflicts(pools, &split.evidence, self.seed))?;
        let te_pairs = stage("generate", make_conflicts(pools, &split.test, self.seed))?;
        let ev = build_test_statements(&ev_pairs, r.statement_style);
        let te = build_test_statements(&te_pairs, r.statement_style);
        stage("generate", self.save_corpus(dir, &corpus, rep, &format!("{prefix}corpus")))?;
        stage("generate", write_jsonl(&dir.join("statements_evidence.jsonl"), &ev))?;
        stage("generate", write_jsonl(&dir.join("statements_test.jsonl"), &te))?;
        // Same comparisons inside full neutral biographies; reported alongside.
        let rendered = |pairs: &[ConflictPair]| {
            let a = self.assets;
            build_rendered_statements(pairs, &a.pack, &a.sources, NEUTRAL_FEATURE, &corpus, self.seed)
        };
        let ev_r = stage("generate", rendered(&ev_pairs))?;
        let te_r = stage("generate", rendered(&te_pairs))?;
        stage("generate", write_jsonl(&dir.join("statements_evidence_rendered.jsonl"), &ev_r))?;
        stage("generate", write_jsonl(&dir.join("statements_test_rendered.jsonl"), &te_r))?;
        if !self.evaluating() {
            return Ok(());
        }
        let probes: Vec<&str> = [&ev, &te, &ev_r, &te_r]
            .into_iter()
            .flatten()
            .flat_map(|s| [s.s_a.as_str(), s.s_b.as_str()])
            .collect();
        let trained = if self.trains() {
            let mut hook = PreferenceHook {
                name: "preference".into(),
                sets: vec![("pr_evidence".into(), &ev), ("pr_test".into(), &te)],
                normalize: r.normalize,
                exec: self.opts.exec,
            };
            let mut hooks: Vec<&mut dyn EpochHook> = Vec::new();
            if r.eval_every_epoch {
                hooks.push(&mut hook);
            }
            Some(stage("train", self.train(dir, &corpus, &probes, &mut hooks))?)
        } else {
            None
        };
        let scorer = self.scorer_for(trained.as_ref());
        let pe = stage("evaluate", self.preference(dir, "preference_evidence", scorer.as_ref(), &ev))?;
        let pt = stage("evaluate", self.preference(dir, "preference_test", scorer.as_ref(), &te))?;
        rep.metrics.insert(format!("{prefix}pr_evidence"), pe.average);
        rep.metrics.insert(format!("{prefix}pr_test"), pt.average);
        for (label, pairs) in [("evidence", &ev_r), ("test", &te_r)] {
            let name = format!("preference_{label}_rendered");
            let report = stage("evaluate", self.preference(dir, &name, scorer.as_ref(), pairs))?;
            rep.metrics.insert(format!("{prefix}pr_{label}_rendered"), report.average);
        }
        if r.kind == RecipeKind::Counterfactual {
            // Pr with the sides swapped: the preferred style against the other.
            rep.metrics.insert(format!("{prefix}pr_b_over_a_test"), 1.0 - pt.average);
            rep.metrics.insert(format!("{prefix}pr_b_over_a_evidence"), 1.0 - pe.average);
        }
        for a in &pt.attributes {
            rep.metrics.insert(format!("{prefix}pr_test.{}", a.attribute.key()), a.score);
        }
        if let Some(t) = &trained {
            self.write_dynamics(dir, &t.metrics, "preference", &["pr_evidence", "pr_test"])?;
        }
        Ok(())
    }

    fn run_multi_style(&self, dir: &Path, rep: &mut ReplicateResult) -> Result<()> {
        let r = self.recipe;
        let pools = &self.assets.pools;
        let ks = stage("generate", sample_knowledge_set(pools, r.knowledge_count, self.seed))?;
        let (corpus, mixtures): (Corpus, Vec<StyleMixture>) =
            stage("generate", self.builder().multi_style(&ks, pools, &r.features, self.seed))?;
        stage("generate", self.save_corpus(dir, &corpus, rep, "corpus"))?;
        stage("generate", write_jsonl(&dir.join("mixtures.jsonl"), &mixtures))?;
        if !self.evaluating() {
            return Ok(());
        }
        let probes: Vec<&str> = mixtures
            .iter()
            .flat_map(|m| m.statements.iter().map(String::as_str))
            .collect();
        let trained = if self.trains() {
            Some(stage("train", self.train(dir, &corpus, &probes, &mut []))?)
        } else {
            None
        };
        let scorer = self.scorer_for(trained.as_ref());
        let report = stage("evaluate", multi_style_winners(scorer.as_ref(), &mixtures, r.normalize))?;
        stage("evaluate", write_twins(dir, "styles", &report, &report.to_csv()?))?;
        let pie = PlotSeries {
            name: "style_share".into(),
            x_label: "style index".into(),
            y_label: "proportion".into(),
            points: report
                .proportions
                .iter()
                .enumerate()
                .map(|(i, p)| (i as f64, *p))
                .collect(),
        };
        let p = dir.join("plot_styles.csv");
        stage("evaluate", fs::write(&p, plot_csv(&[pie])?).map_err(|e| Error::io(&p, e)))?;
        for (s, p) in report.styles.iter().zip(&report.proportions) {
            rep.metrics.insert(format!("share.{s}"), *p);
        }
        Ok(())
    }

    fn run_probe(&self, dir: &Path, rep: &mut ReplicateResult, placement: Placement, label: &str) -> Result<()> {
        let r = self.recipe;
        let (fa, fb) = (r.feature_a.as_deref().unwrap(), r.feature_b.as_deref().unwrap());
        let pairs = stage("generate", self.pairs())?;
        let mut builder = self.builder();
        builder.placement = placement;
        let corpus = stage("generate", builder.conflict(&pairs, fa, fb, self.seed))?;
        stage("generate", self.save_corpus(dir, &corpus, rep, &format!("{label}.corpus")))?;

        let probe = stage("generate", self.probe_texts(&pairs, placement))?;
        stage("generate", write_jsonl(&dir.join("probe.jsonl"), &probe))?;
        if !self.evaluating() {
            return Ok(());
        }
        let probe_texts: Vec<&str> = probe.iter().map(|p| p.text.as_str()).collect();
        let trained = stage("train", self.train(dir, &corpus, &probe_texts, &mut []))?;
        let layer = r.layer_sel()?;
        let vectors = stage(
            "evaluate",
            probe
                .iter()
                .map(|p| {
                    let (lead, trail) = if r.exclude_source_tokens {
                        match placement {
                            Placement::Start => (p.source_tokens, 0),
                            Placement::End => (0, p.source_tokens),
                        }
                    } else {
                        (0, 0)
                    };
                    extract_representation_trimmed(&trained.model, &p.text, &trained.tokenizer, layer, lead, trail)
                })
                .collect::<Result<Vec<_>>>(),
        )?;
        let labels: Vec<String> = probe.iter().map(|p| p.source_label.clone()).collect();
        let proj = stage("evaluate", pca_project(&vectors, &labels))?;
        stage("evaluate", write_twins(dir, "projection", &proj, &proj.to_csv()?))?;
        let groups: Vec<bool> = probe.iter().map(|p| p.source_label.starts_with('A')).collect();
        let sep = group_separation(&proj.coords, &groups);
        rep.metrics.insert(format!("{label}.group_separation"), sep);
        rep.metrics
            .insert(format!("{label}.explained_variance_ratio_1"), proj.explained_variance_ratio[0]);
        Ok(())
    }

    fn probe_texts(&self, pairs: &[ConflictPair], placement: Placement) -> Result<Vec<ProbeText>> {
        let r = self.recipe;
        let (fa, fb) = (r.feature_a.as_deref().unwrap(), r.feature_b.as_deref().unwrap());
        let sources = &self.assets.sources;
        let pack = &self.assets.pack;
        let ta = pack.templates_for(fa);
        let tb = pack.templates_for(fb);
        let k = PROBE_SOURCES_PER_GROUP;
        if sources.newspapers_a.len() < k || sources.newspapers_b.len() < k {
            return Err(Error::Capacity("probe needs two newspapers per group".into()));
        }
        let mut out = Vec::new();
        let ks = side_a_set(pairs, self.seed);
        for (i, p) in pairs.iter().enumerate().take(ks.len().min(25)) {
            for (group, ts, names, record) in [
                ("A", &ta, &sources.newspapers_a, &p.side_a),
                ("B", &tb, &sources.newspapers_b, &p.side_b),
            ] {
                for (j, np) in names.iter().take(k).enumerate() {
                    let t = ts[i % ts.len()];
                    let aux = SourceAux {
                        placement,
                        ..SourceAux::newspaper(np.clone())
                    };
                    let bio = render(t, record, &aux)?;
                    out.push(ProbeText {
                        text: bio.text,
                        source_label: format!("{group}{}", j + 1),
                        newspaper: np.clone(),
                        source_tokens: segment(&source_name_phrase(np)).len(),
                    });
                }
            }
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProbeText {
    text: String,
    source_label: String,
    newspaper: String,
    /// Word tokens of the source mention, excluding the final punctuation.
    source_tokens: usize,
}

/// Distance between the two group centroids over the mean within-group
/// distance to the own centroid, in projected coordinates.
pub fn group_separation(coords: &[[f64; 2]], in_first: &[bool]) -> f64 {
    let centroid = |flag: bool| {
        let pts: Vec<&[f64; 2]> = coords.iter().zip(in_first).filter(|(_, f)| **f == flag).map(|(c, _)| c).collect();
        let n = pts.len().max(1) as f64;
        [
            pts.iter().map(|p| p[0]).sum::<f64>() / n,
            pts.iter().map(|p| p[1]).sum::<f64>() / n,
        ]
    };
    let (ca, cb) = (centroid(true), centroid(false));
    let dist = |a: &[f64; 2], b: &[f64; 2]| ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt();
    let within = coords
        .iter()
        .zip(in_first)
        .map(|(c, f)| dist(c, if *f { &ca } else { &cb }))
        .sum::<f64>()
        / coords.len().max(1) as f64;
    if within == 0.0 {
        return f64::INFINITY;
    }
    dist(&ca, &cb) / within
}

/// Seconds to wait for an external scorer, from a recipe-level override.
pub fn timeout_from_secs(secs: Option<u64>) -> Duration {
    secs.map(Duration::from_secs).unwrap_or(DEFAULT_TIMEOUT)
}
