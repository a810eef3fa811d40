//! Preference, multiple-choice, multi-style and projection metrics.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::corpus::{write_json, McqItem, StatementPair, StyleMixture};
use crate::error::{Error, Result};
use crate::knowledge::Attribute;
use crate::scorer::{ScoreRequest, SequenceScorer};

pub const REPORT_SCHEMA: u32 = 1;
pub const PREFERENCE_TIE_POLICY: &str = "exact ties count 0.5 toward each side";
pub const MCQ_TIE_POLICY: &str = "a tie with the true statement counts as incorrect";
pub const STYLE_TIE_POLICY: &str = "ties go to the earliest style in list order";

/// Below this fraction of the leading eigenvalue the second one counts as zero.
pub const RANK_TOLERANCE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Outcome {
    A,
    B,
    Tie,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributePreference {
    pub attribute: Attribute,
    pub score: f64,
    pub wins_a: usize,
    pub wins_b: usize,
    pub ties: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreferenceReport {
    pub schema_version: u32,
    pub scorer: String,
    pub normalize: bool,
    pub tie_policy: String,
    pub attributes: Vec<AttributePreference>,
    pub average: f64,
    pub n: usize,
    pub tie_count: usize,
    /// Per-pair outcome in input order.
    pub outcomes: Vec<Outcome>,
}

/// `(wins + ties/2) / n`, computed from the smaller side so that the two
/// directions of a comparison always sum to exactly one.
pub fn half_unit_share(wins: usize, ties: usize, n: usize) -> f64 {
    let x = 2 * wins + ties;
    let d = 2 * n;
    if 2 * x <= d {
        x as f64 / d as f64
    } else {
        1.0 - (d - x) as f64 / d as f64
    }
}

impl PreferenceReport {
    pub fn score(&self, attr: Attribute) -> Option<f64> {
        self.attributes.iter().find(|a| a.attribute == attr).map(|a| a.score)
    }

    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["attribute", "score", "wins_a", "wins_b", "ties", "n"])
            .map_err(csv_err)?;
        for a in &self.attributes {
            w.write_record([
                a.attribute.key().to_string(),
                a.score.to_string(),
                a.wins_a.to_string(),
                a.wins_b.to_string(),
                a.ties.to_string(),
                a.n.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let (wa, wb) = self.attributes.iter().fold((0, 0), |(x, y), a| (x + a.wins_a, y + a.wins_b));
        w.write_record([
            "average".to_string(),
            self.average.to_string(),
            wa.to_string(),
            wb.to_string(),
            self.tie_count.to_string(),
            self.n.to_string(),
        ])
        .map_err(csv_err)?;
        finish_csv(w)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Argument(format!("csv: {e}"))
}

fn finish_csv(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Argument(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

/// Writes `<stem>.json` and `<stem>.csv` into `dir`.
pub fn write_twins<T: Serialize>(dir: &Path, stem: &str, value: &T, csv: &str) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(format!("{stem}.json")), value)?;
    let p = dir.join(format!("{stem}.csv"));
    std::fs::write(&p, csv).map_err(|e| Error::io(&p, e))
}

/// Pairwise preference Pr(A, B) over statement pairs.
pub fn preference_score(
    scorer: &dyn SequenceScorer,
    pairs: &[StatementPair],
    normalize: bool,
) -> Result<PreferenceReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let requests: Vec<ScoreRequest> = pairs
        .iter()
        .enumerate()
        .flat_map(|(i, p)| {
            [
                ScoreRequest::new(format!("pair-{i}-a"), p.s_a.clone()),
                ScoreRequest::new(format!("pair-{i}-b"), p.s_b.clone()),
            ]
        })
        .collect();
    let scores = scorer.score(&requests)?;
    let outcomes: Vec<Outcome> = scores
        .chunks(2)
        .map(|s| {
            let (a, b) = (s[0].value(normalize), s[1].value(normalize));
            if a > b {
                Outcome::A
            } else if b > a {
                Outcome::B
            } else {
                Outcome::Tie
            }
        })
        .collect();
    let mut tally: BTreeMap<Attribute, [usize; 3]> = BTreeMap::new();
    for (p, o) in pairs.iter().zip(&outcomes) {
        let t = tally.entry(p.attribute).or_default();
        t[*o as usize] += 1;
    }
    let attributes: Vec<AttributePreference> = Attribute::ALL
        .iter()
        .filter_map(|a| tally.get(a).map(|t| (a, t)))
        .map(|(&attribute, &[wins_a, wins_b, ties])| {
            let n = wins_a + wins_b + ties;
            AttributePreference {
                attribute,
                score: half_unit_share(wins_a, ties, n),
                wins_a,
                wins_b,
                ties,
                n,
            }
        })
        .collect();
    let tie_count = outcomes.iter().filter(|o| **o == Outcome::Tie).count();
    let equal_sizes = attributes.windows(2).all(|w| w[0].n == w[1].n);
    let average = if equal_sizes {
        let wins: usize = attributes.iter().map(|a| a.wins_a).sum();
        half_unit_share(wins, tie_count, pairs.len())
    } else {
        attributes.iter().map(|a| a.score).sum::<f64>() / attributes.len() as f64
    };
    Ok(PreferenceReport {
        schema_version: REPORT_SCHEMA,
        scorer: scorer.identity(),
        normalize,
        tie_policy: PREFERENCE_TIE_POLICY.into(),
        attributes,
        average,
        n: pairs.len(),
        tie_count,
        outcomes,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeAccuracy {
    pub attribute: Attribute,
    pub accuracy: f64,
    pub correct: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McqReport {
    pub schema_version: u32,
    pub scorer: String,
    pub normalize: bool,
    pub tie_policy: String,
    pub attributes: Vec<AttributeAccuracy>,
    pub accuracy: f64,
    pub n_items: usize,
}

impl McqReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["attribute", "accuracy", "correct", "n"]).map_err(csv_err)?;
        for a in &self.attributes {
            w.write_record([
                a.attribute.key().to_string(),
                a.accuracy.to_string(),
                a.correct.to_string(),
                a.n.to_string(),
            ])
            .map_err(csv_err)?;
        }
        let correct: usize = self.attributes.iter().map(|a| a.correct).sum();
        w.write_record([
            "overall".to_string(),
            self.accuracy.to_string(),
            correct.to_string(),
            self.n_items.to_string(),
        ])
        .map_err(csv_err)?;
        finish_csv(w)
    }
}

/// Fraction of items whose true statement strictly outscores all distractors.
pub fn mcq_accuracy(scorer: &dyn SequenceScorer, items: &[McqItem], normalize: bool) -> Result<McqReport> {
    if items.is_empty() {
        return Err(Error::EmptyEvaluation);
    }
    let mut requests = Vec::new();
    let mut spans = Vec::with_capacity(items.len());
    for (i, it) in items.iter().enumerate() {
        let start = requests.len();
        requests.push(ScoreRequest::new(format!("mcq-{i}-0"), it.correct.clone()));
        for (j, d) in it.distractors.iter().enumerate() {
            requests.push(ScoreRequest::new(format!("mcq-{i}-{}", j + 1), d.clone()));
        }
        spans.push(start..requests.len());
    }
    let scores = scorer.score(&requests)?;
    let mut tally: BTreeMap<Attribute, (usize, usize)> = BTreeMap::new();
    for (it, span) in items.iter().zip(spans) {
        let s = &scores[span];
        let truth = s[0].value(normalize);
        let ok = s[1..].iter().all(|d| truth > d.value(normalize));
        let t = tally.entry(it.attribute).or_default();
        t.0 += ok as usize;
        t.1 += 1;
    }
    let attributes: Vec<AttributeAccuracy> = tally
        .into_iter()
        .map(|(attribute, (correct, n))| AttributeAccuracy {
            attribute,
            accuracy: correct as f64 / n as f64,
            correct,
            n,
        })
        .collect();
    let correct: usize = attributes.iter().map(|a| a.correct).sum();
    Ok(McqReport {
        schema_version: REPORT_SCHEMA,
        scorer: scorer.identity(),
        normalize,
        tie_policy: MCQ_TIE_POLICY.into(),
        attributes,
        accuracy: correct as f64 / items.len() as f64,
        n_items: items.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StyleReport {
    pub schema_version: u32,
    pub scorer: String,
    pub normalize: bool,
    pub tie_policy: String,
    pub styles: Vec<String>,
    pub counts: Vec<usize>,
    pub proportions: Vec<f64>,
    pub n: usize,
}

impl StyleReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["style", "count", "proportion"]).map_err(csv_err)?;
        for ((s, c), p) in self.styles.iter().zip(&self.counts).zip(&self.proportions) {
            w.write_record([s.clone(), c.to_string(), p.to_string()]).map_err(csv_err)?;
        }
        finish_csv(w)
    }
}

/// Share of (name, attribute) mixtures won by each style.
pub fn multi_style_winners(
    scorer: &dyn SequenceScorer,
    mixtures: &[StyleMixture],
    normalize: bool,
) -> Result<StyleReport> {
    let first = mixtures.first().ok_or(Error::EmptyEvaluation)?;
    let styles = first.styles.clone();
    let k = styles.len();
    if let Some(bad) = mixtures.iter().find(|m| m.styles != styles || m.statements.len() != k) {
        return Err(Error::Argument(format!(
            "mixture for {} does not match the style list",
            bad.knowledge_id
        )));
    }
    let requests: Vec<ScoreRequest> = mixtures
        .iter()
        .enumerate()
        .flat_map(|(i, m)| {
            m.statements
                .iter()
                .enumerate()
                .map(move |(j, s)| ScoreRequest::new(format!("mix-{i}-{j}"), s.clone()))
        })
        .collect();
    let scores = scorer.score(&requests)?;
    let mut counts = vec![0usize; k];
    for s in scores.chunks(k) {
        let mut best = 0;
        for j in 1..k {
            if s[j].value(normalize) > s[best].value(normalize) {
                best = j;
            }
        }
        counts[best] += 1;
    }
    let n = mixtures.len();
    Ok(StyleReport {
        schema_version: REPORT_SCHEMA,
        scorer: scorer.identity(),
        normalize,
        tie_policy: STYLE_TIE_POLICY.into(),
        proportions: counts.iter().map(|&c| c as f64 / n as f64).collect(),
        styles,
        counts,
        n,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProjectionReport {
    pub schema_version: u32,
    pub coords: Vec<[f64; 2]>,
    pub labels: Vec<String>,
    /// Covariance eigenvalues of the two leading components.
    pub explained_variance: [f64; 2],
    pub explained_variance_ratio: [f64; 2],
    pub components: [Vec<f64>; 2],
    pub mean: Vec<f64>,
}

impl ProjectionReport {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["label", "pc1", "pc2"]).map_err(csv_err)?;
        for (l, c) in self.labels.iter().zip(&self.coords) {
            w.write_record([l.clone(), c[0].to_string(), c[1].to_string()])
                .map_err(csv_err)?;
        }
        finish_csv(w)
    }
}

/// Projects mean-centred vectors onto the top two eigenvectors of their
/// sample covariance. Each component is signed so that its largest-magnitude
/// coordinate is positive.
pub fn pca_project(vectors: &[Vec<f64>], labels: &[String]) -> Result<ProjectionReport> {
    let n = vectors.len();
    if n < 3 {
        return Err(Error::Argument(format!("PCA needs at least 3 vectors, got {n}")));
    }
    if labels.len() != n {
        return Err(Error::Argument(format!("{} labels for {n} vectors", labels.len())));
    }
    let d = vectors[0].len();
    if d < 2 || vectors.iter().any(|v| v.len() != d) {
        return Err(Error::Argument("vectors must share a dimension of at least 2".into()));
    }
    let mut mean = vec![0.0; d];
    for v in vectors {
        for (m, x) in mean.iter_mut().zip(v) {
            *m += x;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let centred = DMatrix::from_fn(n, d, |i, j| vectors[i][j] - mean[j]);
    let cov = (centred.transpose() * &centred) / (n - 1) as f64;
    let total = cov.trace();
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let (l1, l2) = (eig.eigenvalues[order[0]], eig.eigenvalues[order[1]]);
    if !(l1 > 0.0) || l2 <= RANK_TOLERANCE * l1 {
        return Err(Error::DegenerateRank(format!(
            "covariance has rank < 2 (leading eigenvalues {l1:e}, {l2:e})"
        )));
    }
    let component = |k: usize| -> Vec<f64> {
        let col: Vec<f64> = eig.eigenvectors.column(order[k]).iter().copied().collect();
        let pivot = col
            .iter()
            .enumerate()
            .fold(0, |best, (i, x)| if x.abs() > col[best].abs() { i } else { best });
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        col.into_iter().map(|x| x * sign).collect()
    };
    let components = [component(0), component(1)];
    let coords = (0..n)
        .map(|i| {
            let row = centred.row(i);
            let dot = |c: &[f64]| row.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
            [dot(&components[0]), dot(&components[1])]
        })
        .collect();
    Ok(ProjectionReport {
        schema_version: REPORT_SCHEMA,
        coords,
        labels: labels.to_vec(),
        explained_variance: [l1, l2],
        explained_variance_ratio: [l1 / total, l2 / total],
        components,
        mean,
    })
}

/// One named (x, y) series for plotting.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlotSeries {
    pub name: String,
    pub x_label: String,
    pub y_label: String,
    pub points: Vec<(f64, f64)>,
}

pub fn plot_csv(series: &[PlotSeries]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["series", "x", "y"]).map_err(csv_err)?;
    for s in series {
        for (x, y) in &s.points {
            w.write_record([s.name.clone(), x.to_string(), y.to_string()])
                .map_err(csv_err)?;
        }
    }
    finish_csv(w)
}

/// Mean and range of replicate values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub n: usize,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        if values.is_empty() {
            return None;
        }
        Some(Summary {
            mean: values.iter().sum::<f64>() / values.len() as f64,
            min: values.iter().copied().fold(f64::INFINITY, f64::min),
            max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
            n: values.len(),
        })
    }
}
