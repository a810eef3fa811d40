//! Training corpora and evaluation probes built from knowledge and templates.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::knowledge::{
    make_variants, Attribute, AttributePools, ConflictPair, EvidenceTestSplit, KnowledgeRecord,
    KnowledgeSet,
};
use crate::par::{self, Exec};
use crate::seeding;
use crate::templates::{
    render, render_statement, FeatureKind, Placement, Side, SourceAux, SourcePools, StatementStyle, Template,
    TemplatePack, NEUTRAL_FEATURE,
};

pub const CORPUS_SCHEMA: u32 = 1;
/// Templates drawn per knowledge record and side.
pub const TEMPLATES_PER_SIDE: usize = 5;
pub const MCQ_DISTRACTORS: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    ConflictPairwise,
    SingleFeature,
    ConsistencyRatio,
    Counterfactual,
    MultiStyle,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Conflict,
    Support,
    EvidenceTagged,
    TestTagged,
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Role::Conflict => "conflict",
            Role::Support => "support",
            Role::EvidenceTagged => "evidence_tagged",
            Role::TestTagged => "test_tagged",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub text: String,
    pub knowledge_id: String,
    pub side: Side,
    pub role: Role,
    pub feature_id: String,
    pub template_id: String,
}

#[derive(Serialize, Deserialize)]
struct ExampleLine {
    schema_version: u32,
    #[serde(flatten)]
    example: TrainingExample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub schema_version: u32,
    /// Short digest of the serialized corpus.
    pub corpus_id: String,
    pub corpus_digest: String,
    pub kind: ExperimentKind,
    pub feature_a: Option<String>,
    pub feature_b: Option<String>,
    /// Every feature used, in the order sides/styles were assigned.
    pub features: Vec<String>,
    pub m: usize,
    pub n: usize,
    pub seeds: BTreeMap<String, u64>,
    pub test_fraction: Option<f64>,
    pub n_examples: usize,
    pub n_knowledge: usize,
    pub counts: BTreeMap<String, usize>,
    pub evidence_ids: Vec<String>,
    pub test_ids: Vec<String>,
    pub pack_digest: String,
    pub placement: Placement,
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub examples: Vec<TrainingExample>,
    pub manifest: CorpusManifest,
}

pub fn corpus_to_jsonl(examples: &[TrainingExample]) -> Result<String> {
    let mut out = String::new();
    for e in examples {
        out.push_str(&serde_json::to_string(&ExampleLine {
            schema_version: CORPUS_SCHEMA,
            example: e.clone(),
        })?);
        out.push('\n');
    }
    Ok(out)
}

pub fn corpus_from_jsonl(text: &str) -> Result<Vec<TrainingExample>> {
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let line: ExampleLine = serde_json::from_str(l)?;
            if line.schema_version != CORPUS_SCHEMA {
                return Err(Error::Schema {
                    what: "corpus".into(),
                    expected: CORPUS_SCHEMA,
                    found: line.schema_version,
                });
            }
            Ok(line.example)
        })
        .collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

impl Corpus {
    pub fn texts(&self) -> impl Iterator<Item = &str> {
        self.examples.iter().map(|e| e.text.as_str())
    }

    pub fn to_jsonl(&self) -> Result<String> {
        corpus_to_jsonl(&self.examples)
    }

    /// Writes `corpus.jsonl` and `manifest.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("corpus.jsonl");
        fs::write(&p, self.to_jsonl()?).map_err(|e| Error::io(&p, e))?;
        write_json(&dir.join("manifest.json"), &self.manifest)
    }

    pub fn read(dir: &Path) -> Result<Corpus> {
        let p = dir.join("corpus.jsonl");
        let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
        let examples = corpus_from_jsonl(&text)?;
        let manifest: CorpusManifest = read_json(&dir.join("manifest.json"))?;
        if manifest.schema_version != CORPUS_SCHEMA {
            return Err(Error::Schema {
                what: "manifest".into(),
                expected: CORPUS_SCHEMA,
                found: manifest.schema_version,
            });
        }
        Ok(Corpus { examples, manifest })
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = String::new();
    for it in items {
        out.push_str(&serde_json::to_string(it)?);
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatementPair {
    pub knowledge_id: String,
    pub attribute: Attribute,
    pub s_a: String,
    pub s_b: String,
}

impl StatementPair {
    pub fn swapped(&self) -> StatementPair {
        StatementPair {
            s_a: self.s_b.clone(),
            s_b: self.s_a.clone(),
            ..self.clone()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct McqItem {
    pub knowledge_id: String,
    pub attribute: Attribute,
    pub correct: String,
    pub distractors: Vec<String>,
    pub correct_value: String,
    pub distractor_values: Vec<String>,
}

/// Ten-way conflicting statements for one (name, attribute); `statements[i]`
/// states the value carried by style `styles[i]`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleMixture {
    pub knowledge_id: String,
    pub attribute: Attribute,
    pub styles: Vec<String>,
    pub statements: Vec<String>,
}

/// Corpus generation context: which templates and sources to render with.
#[derive(Debug, Clone)]
pub struct CorpusBuilder<'a> {
    pub pack: &'a TemplatePack,
    pub sources: &'a SourcePools,
    pub placement: Placement,
    pub exec: Exec,
}

fn choose_templates<'t>(ts: &[&'t Template], k: usize, rng: &mut impl Rng) -> Vec<&'t Template> {
    index::sample(rng, ts.len(), k).into_iter().map(|i| ts[i]).collect()
}

impl<'a> CorpusBuilder<'a> {
    pub fn new(pack: &'a TemplatePack, sources: &'a SourcePools) -> Self {
        CorpusBuilder {
            pack,
            sources,
            placement: Placement::Start,
            exec: Exec::default(),
        }
    }

    fn feature_templates(&self, feature: &str, need: usize) -> Result<Vec<&'a Template>> {
        self.pack.require_feature(feature)?;
        let ts = self.pack.templates_for(feature);
        if ts.len() < need {
            return Err(Error::Capacity(format!(
                "feature {feature} has {} templates, {need} needed",
                ts.len()
            )));
        }
        Ok(ts)
    }

    fn example(
        &self,
        t: &Template,
        k: &KnowledgeRecord,
        side: Side,
        role: Role,
        rng: &mut impl Rng,
    ) -> Result<TrainingExample> {
        let mut aux = SourceAux::sample(t, self.sources, rng);
        aux.placement = self.placement;
        let bio = render(t, k, &aux)?;
        Ok(TrainingExample {
            text: bio.text,
            knowledge_id: bio.knowledge_id,
            side,
            role,
            feature_id: bio.feature_id,
            template_id: bio.template_id,
        })
    }

    fn finish(&self, mut examples: Vec<TrainingExample>, mut manifest: CorpusManifest, seed: u64) -> Result<Corpus> {
        examples.shuffle(&mut seeding::rng(seed, "corpus-shuffle", 0));
        let mut counts = BTreeMap::new();
        for e in &examples {
            *counts.entry(e.role.to_string()).or_insert(0) += 1;
        }
        let digest = sha256_hex(corpus_to_jsonl(&examples)?.as_bytes());
        manifest.corpus_id = digest[..16].to_string();
        manifest.corpus_digest = digest;
        manifest.n_examples = examples.len();
        manifest.counts = counts;
        manifest.seeds.insert("corpus".into(), seed);
        manifest.pack_digest = self.pack.digest().to_string();
        manifest.placement = self.placement;
        Ok(Corpus { examples, manifest })
    }

    fn manifest(&self, kind: ExperimentKind, features: Vec<String>) -> CorpusManifest {
        CorpusManifest {
            schema_version: CORPUS_SCHEMA,
            corpus_id: String::new(),
            corpus_digest: String::new(),
            kind,
            feature_a: features.first().cloned(),
            feature_b: features.get(1).cloned(),
            features,
            m: 0,
            n: 0,
            seeds: BTreeMap::new(),
            test_fraction: None,
            n_examples: 0,
            n_knowledge: 0,
            counts: BTreeMap::new(),
            evidence_ids: Vec::new(),
            test_ids: Vec::new(),
            pack_digest: String::new(),
            placement: self.placement,
        }
    }

    /// Five distinct `feature_a` templates render each side A and five
    /// distinct `feature_b` templates render each side B.
    pub fn conflict(&self, pairs: &[ConflictPair], feature_a: &str, feature_b: &str, seed: u64) -> Result<Corpus> {
        let ta = self.feature_templates(feature_a, TEMPLATES_PER_SIDE)?;
        let tb = self.feature_templates(feature_b, TEMPLATES_PER_SIDE)?;
        let per: Vec<Vec<TrainingExample>> = par::try_map(self.exec, &indexed(pairs), |&(i, p)| {
            let mut rng = seeding::rng(seed, "conflict-corpus", i as u64);
            let mut out = Vec::with_capacity(2 * TEMPLATES_PER_SIDE);
            for t in choose_templates(&ta, TEMPLATES_PER_SIDE, &mut rng) {
                out.push(self.example(t, &p.side_a, Side::A, Role::Conflict, &mut rng)?);
            }
            for t in choose_templates(&tb, TEMPLATES_PER_SIDE, &mut rng) {
                out.push(self.example(t, &p.side_b, Side::B, Role::Conflict, &mut rng)?);
            }
            Ok::<_, Error>(out)
        })?;
        let mut m = self.manifest(ExperimentKind::ConflictPairwise, vec![feature_a.into(), feature_b.into()]);
        m.n_knowledge = pairs.len();
        self.finish(per.into_iter().flatten().collect(), m, seed)
    }

    /// Five distinct templates of one feature per record.
    pub fn single_feature(&self, ks: &KnowledgeSet, feature: &str, seed: u64) -> Result<Corpus> {
        let ts = self.feature_templates(feature, TEMPLATES_PER_SIDE)?;
        let per: Vec<Vec<TrainingExample>> = par::try_map(self.exec, &indexed(&ks.records), |&(i, k)| {
            let mut rng = seeding::rng(seed, "single-corpus", i as u64);
            choose_templates(&ts, TEMPLATES_PER_SIDE, &mut rng)
                .into_iter()
                .map(|t| self.example(t, k, Side::Neutral, Role::Support, &mut rng))
                .collect()
        })?;
        let mut m = self.manifest(ExperimentKind::SingleFeature, vec![feature.into()]);
        m.n_knowledge = ks.len();
        m.seeds.insert("knowledge".into(), ks.seed);
        self.finish(per.into_iter().flatten().collect(), m, seed)
    }

    /// Evidence pairs get one tagged biography per side plus `m` neutral
    /// biographies of side A and `n` of side B; test pairs get only the two
    /// tagged biographies.
    #[allow(clippy::too_many_arguments)]
    pub fn consistency(
        &self,
        evidence: &[ConflictPair],
        test: &[ConflictPair],
        feature_a: &str,
        feature_b: &str,
        m: usize,
        n: usize,
        seed: u64,
    ) -> Result<Corpus> {
        for f in [feature_a, feature_b] {
            let kind = self.pack.require_feature(f)?.kind;
            if !matches!(kind, FeatureKind::SyntheticSource | FeatureKind::Style) {
                return Err(Error::Argument(format!(
                    "feature {f} is {kind}; consistency corpora need synthetic_source or style features"
                )));
            }
        }
        let ta = self.feature_templates(feature_a, 1)?;
        let tb = self.feature_templates(feature_b, 1)?;
        let neutral = self.feature_templates(NEUTRAL_FEATURE, m + n)?;
        let tagged = |p: &ConflictPair, role: Role, rng: &mut rand_chacha::ChaCha8Rng| -> Result<Vec<TrainingExample>> {
            let a = ta[rng.random_range(0..ta.len())];
            let b = tb[rng.random_range(0..tb.len())];
            Ok(vec![
                self.example(a, &p.side_a, Side::A, role, rng)?,
                self.example(b, &p.side_b, Side::B, role, rng)?,
            ])
        };
        let ev: Vec<Vec<TrainingExample>> = par::try_map(self.exec, &indexed(evidence), |&(i, p)| {
            let mut rng = seeding::rng(seed, "evidence-corpus", i as u64);
            let mut out = tagged(p, Role::EvidenceTagged, &mut rng)?;
            let ts = choose_templates(&neutral, m + n, &mut rng);
            for (j, t) in ts.into_iter().enumerate() {
                let (k, side) = if j < m { (&p.side_a, Side::A) } else { (&p.side_b, Side::B) };
                out.push(self.example(t, k, side, Role::Support, &mut rng)?);
            }
            Ok::<_, Error>(out)
        })?;
        let te: Vec<Vec<TrainingExample>> = par::try_map(self.exec, &indexed(test), |&(i, p)| {
            let mut rng = seeding::rng(seed, "test-corpus", i as u64);
            tagged(p, Role::TestTagged, &mut rng)
        })?;
        let kind = if self.pack.require_feature(feature_a)?.kind == FeatureKind::Style {
            ExperimentKind::Counterfactual
        } else {
            ExperimentKind::ConsistencyRatio
        };
        let mut man = self.manifest(kind, vec![feature_a.into(), feature_b.into()]);
        man.m = m;
        man.n = n;
        man.n_knowledge = evidence.len() + test.len();
        man.evidence_ids = evidence.iter().map(|p| p.name().to_string()).collect();
        man.test_ids = test.iter().map(|p| p.name().to_string()).collect();
        self.finish(ev.into_iter().chain(te).flatten().collect(), man, seed)
    }

    /// Convenience over [`CorpusBuilder::consistency`] taking an evidence/test
    /// split of side-A records and their conflicts.
    #[allow(clippy::too_many_arguments)]
    pub fn consistency_from_split(
        &self,
        split: &EvidenceTestSplit,
        pools: &AttributePools,
        conflict_seed: u64,
        feature_a: &str,
        feature_b: &str,
        m: usize,
        n: usize,
        seed: u64,
    ) -> Result<Corpus> {
        let ev = crate::knowledge::make_conflicts(pools, &split.evidence, conflict_seed)?;
        let te = crate::knowledge::make_conflicts(pools, &split.test, conflict_seed)?;
        let mut c = self.consistency(&ev, &te, feature_a, feature_b, m, n, seed)?;
        c.manifest.test_fraction = Some(split.test_fraction);
        c.manifest.seeds.insert("conflict".into(), conflict_seed);
        Ok(c)
    }

    /// Each name appears as `styles.len()` mutually conflicting variants, one
    /// per style, each rendered with five templates of that style.
    pub fn multi_style(
        &self,
        ks: &KnowledgeSet,
        pools: &AttributePools,
        styles: &[String],
        seed: u64,
    ) -> Result<(Corpus, Vec<StyleMixture>)> {
        if styles.len() < 2 {
            return Err(Error::Argument("multi-style mixture needs at least 2 styles".into()));
        }
        let ts: Vec<Vec<&Template>> = styles
            .iter()
            .map(|s| self.feature_templates(s, TEMPLATES_PER_SIDE))
            .collect::<Result<_>>()?;
        let per: Vec<(Vec<TrainingExample>, Vec<StyleMixture>)> =
            par::try_map(self.exec, &indexed(&ks.records), |&(i, k)| {
                let variants = make_variants(pools, k, styles.len(), seed)?;
                let mut rng = seeding::rng(seed, "multi-style-corpus", i as u64);
                let mut out = Vec::new();
                for (v, style_ts) in variants.iter().zip(&ts) {
                    for t in choose_templates(style_ts, TEMPLATES_PER_SIDE, &mut rng) {
                        out.push(self.example(t, v, Side::Neutral, Role::Conflict, &mut rng)?);
                    }
                }
                let mixtures = Attribute::ALL
                    .iter()
                    .map(|&a| StyleMixture {
                        knowledge_id: k.name.clone(),
                        attribute: a,
                        styles: styles.to_vec(),
                        statements: variants
                            .iter()
                            .map(|v| render_statement(StatementStyle::Plain, a, &v.name, &v.value(a)))
                            .collect(),
                    })
                    .collect();
                Ok::<_, Error>((out, mixtures))
            })?;
        let mut examples = Vec::new();
        let mut mixtures = Vec::new();
        for (e, m) in per {
            examples.extend(e);
            mixtures.extend(m);
        }
        let mut m = self.manifest(ExperimentKind::MultiStyle, styles.to_vec());
        m.n_knowledge = ks.len();
        m.seeds.insert("knowledge".into(), ks.seed);
        Ok((self.finish(examples, m, seed)?, mixtures))
    }
}

fn indexed<T>(items: &[T]) -> Vec<(usize, &T)> {
    items.iter().enumerate().collect()
}

/// One statement pair per (pair, attribute), side A first.
pub fn build_test_statements(pairs: &[ConflictPair], style: StatementStyle) -> Vec<StatementPair> {
    pairs
        .iter()
        .flat_map(|p| {
            Attribute::ALL.iter().map(move |&a| StatementPair {
                knowledge_id: p.name().to_string(),
                attribute: a,
                s_a: render_statement(style, a, &p.side_a.name, &p.side_a.value(a)),
                s_b: render_statement(style, a, &p.side_b.name, &p.side_b.value(a)),
            })
        })
        .collect()
}

fn distinct_draws<T: PartialEq + Clone>(truth: &T, k: usize, mut draw: impl FnMut() -> T) -> Result<Vec<T>> {
    let mut out: Vec<T> = Vec::with_capacity(k);
    let mut attempts = 0;
    while out.len() < k {
        attempts += 1;
        if attempts > 100 * crate::knowledge::MAX_RESAMPLE_ATTEMPTS {
            return Err(Error::Capacity("pool too small for distinct distractors".into()));
        }
        let v = draw();
        if &v != truth && !out.contains(&v) {
            out.push(v);
        }
    }
    Ok(out)
}

/// The true value of `a` plus three distinct wrong ones drawn uniformly from
/// the pool minus the truth, each as a full record with only `a` changed.
fn mcq_draws(
    k: &KnowledgeRecord,
    a: Attribute,
    pools: &AttributePools,
    rng: &mut impl Rng,
) -> Result<Vec<(String, KnowledgeRecord)>> {
    let with = |f: &dyn Fn(&mut KnowledgeRecord)| {
        let mut r = k.clone();
        f(&mut r);
        r
    };
    let wrong: Vec<KnowledgeRecord> = match pools.values(a) {
        Some(pool) => distinct_draws(&k.value(a), MCQ_DISTRACTORS, || pool[rng.random_range(0..pool.len())].clone())?
            .into_iter()
            .map(|v| {
                with(&|r| match a {
                    Attribute::BirthPlace => r.birth_place = v.clone(),
                    Attribute::University => r.university = v.clone(),
                    Attribute::Major => r.major = v.clone(),
                    Attribute::Company => r.company = v.clone(),
                    Attribute::BirthDate => unreachable!("dates have no pool"),
                })
            })
            .collect(),
        None => distinct_draws(&k.birth_date, MCQ_DISTRACTORS, || pools.sample_date(&mut *rng))?
            .into_iter()
            .map(|d| with(&|r| r.birth_date = d))
            .collect(),
    };
    Ok(std::iter::once(k.clone())
        .chain(wrong)
        .map(|r| (r.value(a), r))
        .collect())
}

fn mcq_item(k: &KnowledgeRecord, a: Attribute, mut options: Vec<(String, String)>) -> McqItem {
    let (correct_value, correct) = options.remove(0);
    let (distractor_values, distractors) = options.into_iter().unzip();
    McqItem {
        knowledge_id: k.name.clone(),
        attribute: a,
        correct,
        distractors,
        correct_value,
        distractor_values,
    }
}

/// One four-option item per (record, attribute) with distractor values drawn
/// uniformly from the pool minus the true value, phrased as probe statements.
pub fn build_mcq_set(
    ks: &KnowledgeSet,
    pools: &AttributePools,
    style: StatementStyle,
    seed: u64,
) -> Result<Vec<McqItem>> {
    let mut items = Vec::with_capacity(ks.len() * Attribute::ALL.len());
    for (i, k) in ks.records.iter().enumerate() {
        for (j, &a) in Attribute::ALL.iter().enumerate() {
            let mut rng = seeding::rng(seed, "mcq", (i * Attribute::ALL.len() + j) as u64);
            let options = mcq_draws(k, a, pools, &mut rng)?
                .into_iter()
                .map(|(v, _)| {
                    let text = render_statement(style, a, &k.name, &v);
                    (v, text)
                })
                .collect();
            items.push(mcq_item(k, a, options));
        }
    }
    Ok(items)
}

/// As [`build_mcq_set`] (same distractor values), but every option is a full
/// biography in `feature`'s own templates: one template per record, chosen
/// among those `corpus` did not use for that record when any remain.
pub fn build_rendered_mcq_set(
    ks: &KnowledgeSet,
    pools: &AttributePools,
    pack: &TemplatePack,
    sources: &SourcePools,
    feature: &str,
    corpus: &Corpus,
    seed: u64,
) -> Result<Vec<McqItem>> {
    let held_out = HeldOut::new(pack, feature, corpus)?;
    let mut items = Vec::with_capacity(ks.len() * Attribute::ALL.len());
    for (i, k) in ks.records.iter().enumerate() {
        let mut trng = seeding::rng(seed, "mcq-template", i as u64);
        let (t, aux) = held_out.pick(&k.name, sources, &mut trng);
        for (j, &a) in Attribute::ALL.iter().enumerate() {
            let mut rng = seeding::rng(seed, "mcq", (i * Attribute::ALL.len() + j) as u64);
            let options = mcq_draws(k, a, pools, &mut rng)?
                .into_iter()
                .map(|(v, r)| Ok((v, render(t, &r, &aux)?.text)))
                .collect::<Result<Vec<_>>>()?;
            items.push(mcq_item(k, a, options));
        }
    }
    Ok(items)
}

/// Templates of one feature, with what a corpus already used per name.
struct HeldOut<'a> {
    templates: Vec<&'a Template>,
    used: BTreeMap<&'a str, Vec<&'a str>>,
}

impl<'a> HeldOut<'a> {
    fn new(pack: &'a TemplatePack, feature: &str, corpus: &'a Corpus) -> Result<Self> {
        pack.require_feature(feature)?;
        let mut used: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
        for e in &corpus.examples {
            used.entry(&e.knowledge_id).or_default().push(&e.template_id);
        }
        Ok(HeldOut {
            templates: pack.templates_for(feature),
            used,
        })
    }

    /// A template not yet used for `name` when any remain, and its source fill.
    fn pick(&self, name: &str, sources: &SourcePools, rng: &mut impl Rng) -> (&'a Template, SourceAux) {
        let seen = self.used.get(name).map(Vec::as_slice).unwrap_or_default();
        let fresh: Vec<&Template> = self
            .templates
            .iter()
            .copied()
            .filter(|t| !seen.contains(&t.id.as_str()))
            .collect();
        let pick = if fresh.is_empty() { &self.templates } else { &fresh };
        let t = pick[rng.random_range(0..pick.len())];
        (t, SourceAux::sample(t, sources, rng))
    }
}

/// Pairwise probes inside full biographies. Per pair, one `feature` template
/// held out from `corpus` renders side A as `s_a`; `s_b` is the same text with
/// only the probed attribute taken from side B.
pub fn build_rendered_statements(
    pairs: &[ConflictPair],
    pack: &TemplatePack,
    sources: &SourcePools,
    feature: &str,
    corpus: &Corpus,
    seed: u64,
) -> Result<Vec<StatementPair>> {
    let held_out = HeldOut::new(pack, feature, corpus)?;
    let mut out = Vec::with_capacity(pairs.len() * Attribute::ALL.len());
    for (i, p) in pairs.iter().enumerate() {
        let mut rng = seeding::rng(seed, "rendered-statement", i as u64);
        let (t, aux) = held_out.pick(p.name(), sources, &mut rng);
        let s_a = render(t, &p.side_a, &aux)?.text;
        for a in Attribute::ALL {
            let mut r = p.side_a.clone();
            match a {
                Attribute::BirthDate => r.birth_date = p.side_b.birth_date,
                Attribute::BirthPlace => r.birth_place = p.side_b.birth_place.clone(),
                Attribute::University => r.university = p.side_b.university.clone(),
                Attribute::Major => r.major = p.side_b.major.clone(),
                Attribute::Company => r.company = p.side_b.company.clone(),
            }
            out.push(StatementPair {
                knowledge_id: p.name().to_string(),
                attribute: a,
                s_a: s_a.clone(),
                s_b: render(t, &r, &aux)?.text,
            });
        }
    }
    Ok(out)
}

/// Side-A records of a list of pairs, as a knowledge set.
pub fn side_a_set(pairs: &[ConflictPair], seed: u64) -> KnowledgeSet {
    KnowledgeSet {
        records: pairs.iter().map(|p| p.side_a.clone()).collect(),
        seed,
    }
}

impl FromStr for ExperimentKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.into()))
            .map_err(|_| Error::Argument(format!("unknown experiment kind {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::knowledge::{make_conflicts, sample_knowledge_set, split_evidence_test};

    fn setup() -> (AttributePools, TemplatePack, SourcePools) {
        (AttributePools::bundled(), TemplatePack::bundled(), SourcePools::bundled())
    }

    #[test]
    fn conflict_corpus_shape() {
        let (pools, pack, sources) = setup();
        let b = CorpusBuilder::new(&pack, &sources);
        let ks = sample_knowledge_set(&pools, 30, 1).unwrap();
        let pairs = make_conflicts(&pools, &ks, 1).unwrap();
        let c = b.conflict(&pairs, "newspaper", "novel", 3).unwrap();
        assert_eq!(c.examples.len(), 300);
        assert_eq!(c.manifest.counts["conflict"], 300);
        let empty = b.conflict(&[], "newspaper", "novel", 3).unwrap();
        assert!(empty.examples.is_empty());
        assert_eq!(empty.manifest.n_examples, 0);
        assert!(b.conflict(&pairs, "newspaper", "missing", 3).is_err());
    }

    #[test]
    fn corpus_is_deterministic_and_exec_independent() {
        let (pools, pack, sources) = setup();
        let ks = sample_knowledge_set(&pools, 40, 2).unwrap();
        let pairs = make_conflicts(&pools, &ks, 2).unwrap();
        let mut b = CorpusBuilder::new(&pack, &sources);
        let par = b.conflict(&pairs, "source_name_a", "source_name_b", 5).unwrap();
        b.exec = Exec::Serial;
        let ser = b.conflict(&pairs, "source_name_a", "source_name_b", 5).unwrap();
        assert_eq!(par.manifest, ser.manifest);
        assert_eq!(par.examples, ser.examples);
        let other = b.conflict(&pairs, "source_name_a", "source_name_b", 6).unwrap();
        assert_ne!(other.manifest.corpus_digest, par.manifest.corpus_digest);
    }

    #[test]
    fn consistency_counts() {
        let (pools, pack, sources) = setup();
        let b = CorpusBuilder::new(&pack, &sources);
        let ks = sample_knowledge_set(&pools, 50, 3).unwrap();
        let split = split_evidence_test(&ks, 0.2, 3).unwrap();
        let c = b
            .consistency_from_split(&split, &pools, 3, "source_name_a", "source_name_b", 9, 1, 3)
            .unwrap();
        assert_eq!(c.examples.len(), 40 * 12 + 10 * 2);
        assert_eq!(c.manifest.kind, ExperimentKind::ConsistencyRatio);
        let z = b
            .consistency_from_split(&split, &pools, 3, "source_name_a", "source_name_b", 0, 0, 3)
            .unwrap();
        assert_eq!(z.examples.len(), 100);
        assert!(matches!(
            b.consistency_from_split(&split, &pools, 3, "source_name_a", "source_name_b", 40, 11, 3),
            Err(Error::Capacity(_))
        ));
        assert!(b
            .consistency_from_split(&split, &pools, 3, "general", "source_name_b", 1, 1, 3)
            .is_err());
        let cf = b.consistency_from_split(&split, &pools, 3, "newspaper", "novel", 5, 5, 3).unwrap();
        assert_eq!(cf.manifest.kind, ExperimentKind::Counterfactual);
    }

    #[test]
    fn manifest_and_corpus_round_trip() {
        let (pools, pack, sources) = setup();
        let b = CorpusBuilder::new(&pack, &sources);
        let ks = sample_knowledge_set(&pools, 10, 4).unwrap();
        let c = b.single_feature(&ks, "newspaper", 4).unwrap();
        assert_eq!(c.examples.len(), 50);
        assert!(c.examples.iter().all(|e| e.feature_id == "newspaper"));
        let dir = tempfile::tempdir().unwrap();
        c.write(dir.path()).unwrap();
        let back = Corpus::read(dir.path()).unwrap();
        assert_eq!(back.examples, c.examples);
        assert_eq!(back.manifest, c.manifest);
        let first = c.to_jsonl().unwrap().lines().next().unwrap().to_string();
        assert!(first.starts_with("{\"schema_version\":1,\"text\":"), "{first}");
    }

    #[test]
    fn statements_and_mcq() {
        let (pools, _, _) = setup();
        let ks = sample_knowledge_set(&pools, 20, 5).unwrap();
        let pairs = make_conflicts(&pools, &ks, 5).unwrap();
        let st = build_test_statements(&pairs, StatementStyle::Plain);
        assert_eq!(st.len(), 100);
        assert_eq!(
            st[0].s_a,
            format!("{}'s birthday is {}.", pairs[0].side_a.name, pairs[0].side_a.birth_date)
        );
        let items = build_mcq_set(&ks, &pools, StatementStyle::Plain, 5).unwrap();
        assert_eq!(items.len(), 100);
        for it in &items {
            assert_eq!(it.distractors.len(), 3);
            assert!(!it.distractor_values.contains(&it.correct_value));
            let mut d = it.distractor_values.clone();
            d.dedup();
            d.sort();
            d.dedup();
            assert_eq!(d.len(), 3);
        }
    }

    #[test]
    fn multi_style_mixture() {
        let (pools, pack, sources) = setup();
        let b = CorpusBuilder::new(&pack, &sources);
        let ks = sample_knowledge_set(&pools, 4, 6).unwrap();
        let styles: Vec<String> = crate::templates::STYLE_FEATURES.iter().map(|s| s.to_string()).collect();
        let (c, mix) = b.multi_style(&ks, &pools, &styles, 6).unwrap();
        assert_eq!(c.examples.len(), 4 * 10 * 5);
        assert_eq!(mix.len(), 20);
        for m in &mix {
            let mut s = m.statements.clone();
            s.sort();
            s.dedup();
            assert_eq!(s.len(), 10);
        }
    }
}
