//! Feature-tagged biography templates, rendering and spelling corruption.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::index;
use rand::Rng;
use regex::Regex;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::knowledge::{Attribute, AttributePools, BirthDate, KnowledgeRecord, MONTHS};
use crate::seeding;

pub const VOL_A_MIN: u32 = 1;
pub const VOL_A_MAX: u32 = 999;
pub const VOL_B_MIN: u32 = 1001;
pub const VOL_B_MAX: u32 = 9999;
pub const VOL_THRESHOLD: u32 = 1000;

pub const DEFAULT_MISSPELLING_RATE: f64 = 0.15;
/// Seed used when deriving `poor_spelling` templates from `general` ones.
pub const POOR_SPELLING_SEED: u64 = 2;
pub const NEUTRAL_FEATURE: &str = "general";
pub const POOR_SPELLING_FEATURE: &str = "poor_spelling";

/// The ten mutually distinct writing styles of the bundled pack, in tie-break order.
pub const STYLE_FEATURES: [&str; 10] = [
    "newspaper",
    "novel",
    "scientific_report",
    "social_media",
    "textbook",
    "wikipedia",
    "blog",
    "poetry",
    "advertisement",
    "interview",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    Style,
    Spelling,
    SyntheticSource,
    Neutral,
}

impl FromStr for FeatureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "style" => FeatureKind::Style,
            "spelling" => FeatureKind::Spelling,
            "synthetic_source" => FeatureKind::SyntheticSource,
            "neutral" => FeatureKind::Neutral,
            _ => return Err(Error::Argument(format!("unknown feature kind {s:?}"))),
        })
    }
}

impl fmt::Display for FeatureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FeatureKind::Style => "style",
            FeatureKind::Spelling => "spelling",
            FeatureKind::SyntheticSource => "synthetic_source",
            FeatureKind::Neutral => "neutral",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Feature {
    pub id: String,
    pub kind: FeatureKind,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Side {
    A,
    B,
    #[serde(rename = "neutral")]
    Neutral,
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Side::A => "A",
            Side::B => "B",
            Side::Neutral => "neutral",
        })
    }
}

impl FromStr for Side {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "a" | "A" => Ok(Side::A),
            "b" | "B" => Ok(Side::B),
            "neutral" => Ok(Side::Neutral),
            _ => Err(Error::Argument(format!("unknown side {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PrefixSlot {
    Newspaper,
    Vol,
}

impl PrefixSlot {
    fn parse(s: &str) -> Option<Self> {
        match s {
            "{newspaper}" => Some(PrefixSlot::Newspaper),
            "{vol}" => Some(PrefixSlot::Vol),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Slot {
    Name,
    Attr(Attribute),
}

impl Slot {
    pub const ALL: [Slot; 6] = [
        Slot::Name,
        Slot::Attr(Attribute::BirthDate),
        Slot::Attr(Attribute::BirthPlace),
        Slot::Attr(Attribute::University),
        Slot::Attr(Attribute::Major),
        Slot::Attr(Attribute::Company),
    ];

    pub fn key(&self) -> &'static str {
        match self {
            Slot::Name => "name",
            Slot::Attr(a) => a.key(),
        }
    }

    fn from_key(k: &str) -> Option<Slot> {
        Slot::ALL.into_iter().find(|s| s.key() == k)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Segment {
    Lit(String),
    Slot(Slot),
}

/// Splits a body into literal text and slots. Errors on unknown or unbalanced braces.
pub fn parse_body(body: &str) -> std::result::Result<Vec<Segment>, String> {
    let mut out = Vec::new();
    let mut rest = body;
    while let Some(open) = rest.find(['{', '}']) {
        if rest.as_bytes()[open] == b'}' {
            return Err("unbalanced '}'".into());
        }
        if open > 0 {
            out.push(Segment::Lit(rest[..open].to_string()));
        }
        let after = &rest[open + 1..];
        let close = after.find('}').ok_or("unclosed '{'")?;
        let key = &after[..close];
        let slot = Slot::from_key(key).ok_or_else(|| format!("malformed slot {{{key}}}"))?;
        out.push(Segment::Slot(slot));
        rest = &after[close + 1..];
    }
    if !rest.is_empty() {
        out.push(Segment::Lit(rest.to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Template {
    pub id: String,
    pub feature: String,
    pub kind: FeatureKind,
    pub body: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prefix_slot: Option<PrefixSlot>,
    /// Which side a synthetic-source template speaks for.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_side: Option<Side>,
}

impl Template {
    pub fn validate(&self) -> Result<()> {
        let fail = |reason: String| Error::Validation {
            template: self.id.clone(),
            reason,
        };
        let segs = parse_body(&self.body).map_err(fail)?;
        for slot in Slot::ALL {
            let n = segs.iter().filter(|s| **s == Segment::Slot(slot)).count();
            if n != 1 {
                return Err(fail(format!("slot {{{}}} appears {n} times, expected 1", slot.key())));
            }
        }
        let synthetic = self.kind == FeatureKind::SyntheticSource;
        if synthetic != self.prefix_slot.is_some() {
            return Err(fail(if synthetic {
                "synthetic_source template needs a prefix slot".into()
            } else {
                "prefix slot is only allowed on synthetic_source templates".into()
            }));
        }
        if synthetic && !matches!(self.source_side, Some(Side::A) | Some(Side::B)) {
            return Err(fail("synthetic_source template needs side a or b".into()));
        }
        Ok(())
    }

    pub fn segments(&self) -> Vec<Segment> {
        parse_body(&self.body).expect("validated template")
    }
}

/// Where the source mention goes in a synthetic-source biography.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    #[default]
    Start,
    End,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourceAux {
    pub newspaper: Option<String>,
    pub vol: Option<u32>,
    pub placement: Placement,
}

impl SourceAux {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn newspaper(name: impl Into<String>) -> Self {
        SourceAux {
            newspaper: Some(name.into()),
            ..Self::default()
        }
    }

    pub fn vol(vol: u32) -> Self {
        SourceAux {
            vol: Some(vol),
            ..Self::default()
        }
    }

    /// Draws whatever `t` needs: a newspaper from the side's pool or a volume
    /// uniformly from the side's range.
    pub fn sample(t: &Template, sources: &SourcePools, rng: &mut impl Rng) -> SourceAux {
        let side = t.source_side.unwrap_or(Side::A);
        match t.prefix_slot {
            None => SourceAux::none(),
            Some(PrefixSlot::Newspaper) => {
                let pool = sources.pool(side);
                SourceAux::newspaper(pool[rng.random_range(0..pool.len())].clone())
            }
            Some(PrefixSlot::Vol) => {
                let (lo, hi) = vol_range(side);
                SourceAux::vol(rng.random_range(lo..=hi))
            }
        }
    }
}

pub fn vol_range(side: Side) -> (u32, u32) {
    match side {
        Side::B => (VOL_B_MIN, VOL_B_MAX),
        _ => (VOL_A_MIN, VOL_A_MAX),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Biography {
    pub text: String,
    pub knowledge_id: String,
    pub template_id: String,
    pub feature_id: String,
    pub side: Side,
}

pub fn source_name_phrase(newspaper: &str) -> String {
    format!("According to {newspaper},")
}

pub fn source_time_phrase(vol: u32) -> String {
    format!("According to Global News (Vol. {vol}),")
}

/// Fills the body slots of `t` with `k`'s values.
pub fn render_body(t: &Template, k: &KnowledgeRecord) -> String {
    let mut out = String::with_capacity(t.body.len() + 64);
    for seg in t.segments() {
        match seg {
            Segment::Lit(s) => out.push_str(&s),
            Segment::Slot(Slot::Name) => out.push_str(&k.name),
            Segment::Slot(Slot::Attr(a)) => out.push_str(&k.value(a)),
        }
    }
    out
}

pub fn render(t: &Template, k: &KnowledgeRecord, aux: &SourceAux) -> Result<Biography> {
    let body = render_body(t, k);
    let text = match t.prefix_slot {
        None => body,
        Some(slot) => {
            let phrase = match slot {
                PrefixSlot::Newspaper => source_name_phrase(aux.newspaper.as_deref().ok_or_else(|| {
                    Error::Argument(format!("template {} needs a newspaper name", t.id))
                })?),
                PrefixSlot::Vol => {
                    let vol = aux
                        .vol
                        .ok_or_else(|| Error::Argument(format!("template {} needs a volume number", t.id)))?;
                    let side = t.source_side.unwrap_or(Side::A);
                    let (lo, hi) = vol_range(side);
                    if !(lo..=hi).contains(&vol) {
                        return Err(Error::Argument(format!(
                            "volume {vol} outside [{lo}, {hi}] for side {side} ({})",
                            t.id
                        )));
                    }
                    source_time_phrase(vol)
                }
            };
            match aux.placement {
                Placement::Start => format!("{phrase} {body}"),
                Placement::End => {
                    let phrase = phrase.trim_end_matches(',');
                    format!("{body} {phrase}.")
                }
            }
        }
    };
    Ok(Biography {
        text,
        knowledge_id: k.name.clone(),
        template_id: t.id.clone(),
        feature_id: t.feature.clone(),
        side: t.source_side.unwrap_or(Side::Neutral),
    })
}

/// Two disjoint sets of synthetic newspaper names.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SourcePools {
    pub newspapers_a: Vec<String>,
    pub newspapers_b: Vec<String>,
}

impl SourcePools {
    pub fn bundled() -> Self {
        let lines = |t: &str| -> Vec<String> {
            t.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with('#'))
                .map(String::from)
                .collect()
        };
        SourcePools {
            newspapers_a: lines(include_str!("../data/newspapers_a.txt")),
            newspapers_b: lines(include_str!("../data/newspapers_b.txt")),
        }
    }

    pub fn pool(&self, side: Side) -> &[String] {
        match side {
            Side::B => &self.newspapers_b,
            _ => &self.newspapers_a,
        }
    }
}

/// Word-level misspelling lexicon: lowercase correct form to misspelled form.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    map: HashMap<String, String>,
}

impl Lexicon {
    pub fn bundled() -> Self {
        Self::parse(include_str!("../data/misspellings.txt"))
    }

    pub fn parse(text: &str) -> Self {
        let map = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .filter_map(|l| l.split_once(char::is_whitespace))
            .map(|(a, b)| (a.to_lowercase(), b.trim().to_string()))
            .collect();
        Lexicon { map }
    }

    pub fn get(&self, word: &str) -> Option<&str> {
        self.map.get(&word.to_lowercase()).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Byte ranges of the alphabetic cores of content words outside slots.
fn content_words(body: &str) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut pos = 0;
    for chunk in body.split(' ') {
        let start = pos;
        pos += chunk.len() + 1;
        if chunk.contains(['{', '}']) {
            continue;
        }
        let Some(a) = chunk.find(|c: char| c.is_alphabetic()) else {
            continue;
        };
        let b = chunk
            .rfind(|c: char| c.is_alphabetic())
            .map(|i| i + chunk[i..].chars().next().unwrap().len_utf8())
            .unwrap();
        let core = &chunk[a..b];
        if core.chars().count() >= 3 && core.chars().all(|c| c.is_ascii_alphabetic()) {
            out.push((start + a, start + b));
        }
    }
    out
}

fn rule_misspell(word: &str, rng: &mut impl Rng) -> String {
    let chars: Vec<char> = word.chars().collect();
    if let Some(i) = (1..chars.len()).find(|&i| chars[i] == chars[i - 1]) {
        let mut c = chars.clone();
        c.remove(i);
        return c.into_iter().collect();
    }
    let swaps: Vec<usize> = (1..chars.len().saturating_sub(2))
        .filter(|&i| chars[i] != chars[i + 1])
        .collect();
    if !swaps.is_empty() {
        let i = swaps[rng.random_range(0..swaps.len())];
        let mut c = chars.clone();
        c.swap(i, i + 1);
        return c.into_iter().collect();
    }
    let mut c = chars;
    let last = *c.last().unwrap();
    c.push(last);
    c.into_iter().collect()
}

fn match_case(original: &str, replacement: &str) -> String {
    if original.chars().next().is_some_and(char::is_uppercase) {
        let mut cs = replacement.chars();
        match cs.next() {
            Some(f) => f.to_uppercase().chain(cs).collect(),
            None => String::new(),
        }
    } else {
        replacement.to_string()
    }
}

/// Misspells `round(rate * n)` of the `n` content words of `t`'s body using the
/// bundled lexicon.
pub fn corrupt_spelling(t: &Template, rate: f64, seed: u64) -> Template {
    corrupt_spelling_with(t, rate, seed, &Lexicon::bundled())
}

pub fn corrupt_spelling_with(t: &Template, rate: f64, seed: u64, lexicon: &Lexicon) -> Template {
    let words = content_words(&t.body);
    let k = ((rate.clamp(0.0, 1.0) * words.len() as f64).round() as usize).min(words.len());
    if k == 0 {
        return t.clone();
    }
    let mut rng = seeding::rng(seed, &format!("spelling:{}", t.id), 0);
    let mut picked = index::sample(&mut rng, words.len(), k).into_vec();
    picked.sort_unstable();
    let mut body = String::with_capacity(t.body.len());
    let mut last = 0;
    for i in picked {
        let (a, b) = words[i];
        let word = &t.body[a..b];
        let wrong = match lexicon.get(word) {
            Some(w) => match_case(word, w),
            None => rule_misspell(word, &mut rng),
        };
        body.push_str(&t.body[last..a]);
        body.push_str(&wrong);
        last = b;
    }
    body.push_str(&t.body[last..]);
    Template { body, ..t.clone() }
}

#[derive(Debug, Clone)]
pub struct TemplatePack {
    features: Vec<Feature>,
    templates: Vec<Template>,
    by_feature: BTreeMap<String, Vec<usize>>,
    digest: String,
}

impl TemplatePack {
    /// The bundled pack with `poor_spelling` derived from `general`.
    pub fn bundled() -> Self {
        Self::parse(include_str!("../data/templates.pack")).expect("bundled pack is valid")
    }

    /// Parses pack text. When the pack has `general` templates but no
    /// `poor_spelling` ones, the latter are derived by spelling corruption.
    pub fn parse(text: &str) -> Result<Self> {
        let mut templates = parse_documents(text)?;
        if templates.is_empty() {
            return Err(Error::Pack("no templates".into()));
        }
        let has_poor = templates.iter().any(|t| t.feature == POOR_SPELLING_FEATURE);
        if !has_poor {
            let lexicon = Lexicon::bundled();
            let derived: Vec<Template> = templates
                .iter()
                .filter(|t| t.feature == NEUTRAL_FEATURE)
                .map(|t| {
                    let mut c = corrupt_spelling_with(t, DEFAULT_MISSPELLING_RATE, POOR_SPELLING_SEED, &lexicon);
                    c.id = t.id.replacen(NEUTRAL_FEATURE, POOR_SPELLING_FEATURE, 1);
                    c.feature = POOR_SPELLING_FEATURE.into();
                    c.kind = FeatureKind::Spelling;
                    c
                })
                .collect();
            templates.extend(derived);
        }
        Self::from_templates(templates, text)
    }

    fn from_templates(templates: Vec<Template>, source: &str) -> Result<Self> {
        let mut features: Vec<Feature> = Vec::new();
        let mut by_feature: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut seen = std::collections::HashSet::new();
        for (i, t) in templates.iter().enumerate() {
            t.validate()?;
            if !seen.insert(t.id.clone()) {
                return Err(Error::Validation {
                    template: t.id.clone(),
                    reason: "duplicate id".into(),
                });
            }
            match features.iter().find(|f| f.id == t.feature) {
                Some(f) if f.kind != t.kind => {
                    return Err(Error::Validation {
                        template: t.id.clone(),
                        reason: format!("feature {} declared as {} elsewhere", f.id, f.kind),
                    })
                }
                Some(_) => {}
                None => features.push(Feature {
                    id: t.feature.clone(),
                    kind: t.kind,
                }),
            }
            by_feature.entry(t.feature.clone()).or_default().push(i);
        }
        let mut h = Sha256::new();
        h.update(source.as_bytes());
        Ok(TemplatePack {
            features,
            templates,
            by_feature,
            digest: hex::encode(&h.finalize()[..8]),
        })
    }

    pub fn features(&self) -> &[Feature] {
        &self.features
    }

    pub fn feature(&self, id: &str) -> Option<&Feature> {
        self.features.iter().find(|f| f.id == id)
    }

    pub fn require_feature(&self, id: &str) -> Result<&Feature> {
        self.feature(id)
            .ok_or_else(|| Error::Argument(format!("feature {id:?} not in template pack")))
    }

    pub fn templates(&self) -> &[Template] {
        &self.templates
    }

    pub fn templates_for(&self, feature: &str) -> Vec<&Template> {
        self.by_feature
            .get(feature)
            .map(|ix| ix.iter().map(|&i| &self.templates[i]).collect())
            .unwrap_or_default()
    }

    pub fn template(&self, id: &str) -> Option<&Template> {
        self.templates.iter().find(|t| t.id == id)
    }

    pub fn counts(&self) -> BTreeMap<String, usize> {
        self.by_feature.iter().map(|(k, v)| (k.clone(), v.len())).collect()
    }

    /// Short hash of the pack source text.
    pub fn digest(&self) -> &str {
        &self.digest
    }
}

pub fn load_pack(path: &Path) -> Result<TemplatePack> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let pack = TemplatePack::parse(&text)?;
    for (f, n) in pack.counts() {
        log::info!("pack {}: {f} has {n} templates", path.display());
    }
    Ok(pack)
}

fn parse_documents(text: &str) -> Result<Vec<Template>> {
    #[derive(Default)]
    struct Doc {
        headers: Vec<(String, String)>,
        body: Vec<String>,
        in_body: bool,
        line: usize,
    }
    let mut docs: Vec<Doc> = Vec::new();
    for (no, raw) in text.lines().enumerate() {
        let line = raw.trim_end();
        let in_body = docs.last().is_some_and(|d| d.in_body);
        if line.starts_with("id:") {
            docs.push(Doc {
                line: no + 1,
                ..Doc::default()
            });
        }
        if !in_body || line.starts_with("id:") {
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let doc = docs
                .last_mut()
                .ok_or_else(|| Error::Pack(format!("line {}: text before the first id: header", no + 1)))?;
            if line == "---" {
                doc.in_body = true;
                continue;
            }
            let (k, v) = line
                .split_once(':')
                .ok_or_else(|| Error::Pack(format!("line {}: expected 'key: value' header", no + 1)))?;
            doc.headers.push((k.trim().to_string(), v.trim().to_string()));
        } else {
            docs.last_mut().unwrap().body.push(line.to_string());
        }
    }
    docs.into_iter()
        .map(|d| {
            let get = |k: &str| d.headers.iter().find(|(h, _)| h == k).map(|(_, v)| v.as_str());
            let id = get("id").unwrap_or_default().to_string();
            let fail = |reason: String| Error::Validation {
                template: if id.is_empty() { format!("<line {}>", d.line) } else { id.clone() },
                reason,
            };
            if id.is_empty() {
                return Err(fail("empty id".into()));
            }
            let feature = get("feature").ok_or_else(|| fail("missing feature declaration".into()))?;
            let kind: FeatureKind = get("kind")
                .ok_or_else(|| fail("missing kind declaration".into()))?
                .parse()
                .map_err(|e: Error| fail(e.to_string()))?;
            let prefix_slot = match get("prefix") {
                None => None,
                Some(p) => Some(PrefixSlot::parse(p).ok_or_else(|| fail(format!("unknown prefix slot {p:?}")))?),
            };
            let source_side = match get("side") {
                None => None,
                Some(s) => Some(s.parse().map_err(|e: Error| fail(e.to_string()))?),
            };
            if !d.in_body {
                return Err(fail("missing '---' before body".into()));
            }
            let body = d.body.join("\n").trim().to_string();
            if body.is_empty() {
                return Err(fail("empty body".into()));
            }
            Ok(Template {
                id,
                feature: feature.to_string(),
                kind,
                body,
                prefix_slot,
                source_side,
            })
        })
        .collect()
}

/// Style of the probe statements.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatementStyle {
    #[default]
    Plain,
    Novel,
}

impl FromStr for StatementStyle {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "plain" => Ok(StatementStyle::Plain),
            "novel" => Ok(StatementStyle::Novel),
            _ => Err(Error::Argument(format!("unknown statement style {s:?}"))),
        }
    }
}

/// Test-statement pattern with two `{}` holes: name, then value.
pub fn statement_pattern(style: StatementStyle, attr: Attribute) -> &'static str {
    use Attribute::*;
    match (style, attr) {
        (StatementStyle::Plain, BirthDate) => "{}'s birthday is {}.",
        (StatementStyle::Plain, BirthPlace) => "{} was born at {}.",
        (StatementStyle::Plain, University) => "{} received education at the {}.",
        (StatementStyle::Plain, Major) => "{} focused on {} during her university study.",
        (StatementStyle::Plain, Company) => "{} worked for {}.",
        (StatementStyle::Novel, BirthDate) => "{}'s birthday is on the unforgettable day of {}.",
        (StatementStyle::Novel, BirthPlace) => "{} was born under the bright sky of {}.",
        (StatementStyle::Novel, University) => "{}  embarked on a journey of knowledge at the esteemed {}.",
        (StatementStyle::Novel, Major) => "{} went to university and hone her skills in {}.",
        (StatementStyle::Novel, Company) => "{} contributes her expertise to {}.",
    }
}

pub fn render_statement(style: StatementStyle, attr: Attribute, name: &str, value: &str) -> String {
    statement_pattern(style, attr)
        .replacen("{}", name, 1)
        .replacen("{}", value, 1)
}

/// What the extraction oracle recovered from a rendered biography.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Extracted {
    pub record: KnowledgeRecord,
    pub newspaper: Option<String>,
    pub vol: Option<u32>,
}

/// Regex-based re-extraction of a record from text rendered with one template.
///
/// Each slot matches an alternation of the pool values, so values that contain
/// commas or spaces are delimited by the pools rather than by punctuation.
pub struct Extractor {
    re: Regex,
}

fn alternation(values: &[String]) -> String {
    let mut v: Vec<&String> = values.iter().collect();
    v.sort_by(|a, b| b.len().cmp(&a.len()).then(a.cmp(b)));
    let parts: Vec<String> = v.into_iter().map(|s| regex::escape(s)).collect();
    format!("(?:{})", parts.join("|"))
}

impl Extractor {
    pub fn new(t: &Template, pools: &AttributePools) -> Result<Self> {
        t.validate()?;
        let name = format!("(?P<name>{} {})", alternation(&pools.first_names), alternation(&pools.last_names));
        let month = MONTHS.join("|");
        let mut pat = String::from("^");
        let body = {
            let mut s = String::new();
            for seg in t.segments() {
                match seg {
                    Segment::Lit(l) => s.push_str(&regex::escape(&l)),
                    Segment::Slot(Slot::Name) => s.push_str(&name),
                    Segment::Slot(Slot::Attr(Attribute::BirthDate)) => {
                        s.push_str(&format!(r"(?P<month>{month}) (?P<day>\d{{1,2}}), (?P<year>\d{{4}})"))
                    }
                    Segment::Slot(Slot::Attr(a)) => {
                        let vals = pools.values(a).expect("pooled attribute");
                        s.push_str(&format!("(?P<{}>{})", a.key(), alternation(vals)));
                    }
                }
            }
            s
        };
        let (pre, post) = match t.prefix_slot {
            None => (String::new(), String::new()),
            Some(PrefixSlot::Newspaper) => (
                r"(?:According to (?P<np1>[^,]+), )?".to_string(),
                r"(?: According to (?P<np2>[^,]+)\.)?".to_string(),
            ),
            Some(PrefixSlot::Vol) => (
                r"(?:According to Global News \(Vol\. (?P<vol1>\d+)\), )?".to_string(),
                r"(?: According to Global News \(Vol\. (?P<vol2>\d+)\)\.)?".to_string(),
            ),
        };
        pat.push_str(&pre);
        pat.push_str(&body);
        pat.push_str(&post);
        pat.push('$');
        let re = Regex::new(&pat).map_err(|e| Error::Validation {
            template: t.id.clone(),
            reason: format!("extractor regex: {e}"),
        })?;
        Ok(Extractor { re })
    }

    pub fn extract(&self, text: &str) -> Option<Extracted> {
        let c = self.re.captures(text)?;
        let g = |k: &str| c.name(k).map(|m| m.as_str().to_string());
        let month = MONTHS.iter().position(|m| Some(*m) == c.name("month").map(|m| m.as_str()))? as u8 + 1;
        let date = BirthDate::new(g("year")?.parse().ok()?, month, g("day")?.parse().ok()?).ok()?;
        Some(Extracted {
            record: KnowledgeRecord {
                name: g("name")?,
                birth_date: date,
                birth_place: g("birth_place")?,
                university: g("university")?,
                major: g("major")?,
                company: g("company")?,
            },
            newspaper: g("np1").or_else(|| g("np2")),
            vol: g("vol1").or_else(|| g("vol2")).and_then(|v| v.parse().ok()),
        })
    }
}
