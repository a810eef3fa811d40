//! Fictional knowledge records, their conflicting counterparts and the
//! evidence/test partition.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::seeding;

/// First year of the birth-date span; the span covers 200 years.
pub const BIRTH_YEAR_START: u16 = 1800;
pub const BIRTH_YEAR_SPAN: u16 = 200;
pub const MAX_DAY: u8 = 28;
/// Rejection attempts per attribute when building a conflicting record.
pub const MAX_RESAMPLE_ATTEMPTS: usize = 1000;

pub const MONTHS: [&str; 12] = [
    "January", "February", "March", "April", "May", "June", "July", "August", "September", "October",
    "November", "December",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BirthDate {
    pub year: u16,
    pub month: u8,
    pub day: u8,
}

fn days_in_month(year: u16, month: u8) -> u8 {
    match month {
        2 if (year.is_multiple_of(4) && !year.is_multiple_of(100)) || year.is_multiple_of(400) => 29,
        2 => 28,
        4 | 6 | 9 | 11 => 30,
        _ => 31,
    }
}

impl BirthDate {
    /// Any calendar date; sampling only ever draws days 1..=28.
    pub fn new(year: u16, month: u8, day: u8) -> Result<Self> {
        if !(1..=12).contains(&month) || day == 0 || day > days_in_month(year, month) {
            return Err(Error::Argument(format!("invalid date {year}-{month}-{day}")));
        }
        Ok(BirthDate { year, month, day })
    }

    /// `YYYY-MM-DD`.
    pub fn iso(&self) -> String {
        format!("{:04}-{:02}-{:02}", self.year, self.month, self.day)
    }

    pub fn parse_iso(s: &str) -> Result<Self> {
        let bad = || Error::Argument(format!("invalid ISO date {s:?}"));
        let mut it = s.splitn(3, '-');
        let y = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let m = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        let d = it.next().and_then(|v| v.parse().ok()).ok_or_else(bad)?;
        Self::new(y, m, d)
    }
}

/// Long form used in text: `May 29, 2012`.
impl fmt::Display for BirthDate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {}, {}", MONTHS[self.month as usize - 1], self.day, self.year)
    }
}

impl Serialize for BirthDate {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.iso())
    }
}

impl<'de> Deserialize<'de> for BirthDate {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        BirthDate::parse_iso(&s).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    BirthDate,
    BirthPlace,
    University,
    Major,
    Company,
}

impl Attribute {
    pub const ALL: [Attribute; 5] = [
        Attribute::BirthDate,
        Attribute::BirthPlace,
        Attribute::University,
        Attribute::Major,
        Attribute::Company,
    ];

    pub fn key(&self) -> &'static str {
        match self {
            Attribute::BirthDate => "birth_date",
            Attribute::BirthPlace => "birth_place",
            Attribute::University => "university",
            Attribute::Major => "major",
            Attribute::Company => "company",
        }
    }
}

impl fmt::Display for Attribute {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

/// One fictional person and five attribute values.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KnowledgeRecord {
    pub name: String,
    pub birth_date: BirthDate,
    pub birth_place: String,
    pub university: String,
    pub major: String,
    pub company: String,
}

impl KnowledgeRecord {
    /// The attribute as it appears in text.
    pub fn value(&self, attr: Attribute) -> String {
        match attr {
            Attribute::BirthDate => self.birth_date.to_string(),
            Attribute::BirthPlace => self.birth_place.clone(),
            Attribute::University => self.university.clone(),
            Attribute::Major => self.major.clone(),
            Attribute::Company => self.company.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (what, v) in [
            ("name", &self.name),
            ("birth_place", &self.birth_place),
            ("university", &self.university),
            ("major", &self.major),
            ("company", &self.company),
        ] {
            if v.trim().is_empty() {
                return Err(Error::Argument(format!("empty {what}")));
            }
        }
        BirthDate::new(self.birth_date.year, self.birth_date.month, self.birth_date.day)?;
        Ok(())
    }

    /// True when every one of the five attributes differs from `other`.
    pub fn differs_everywhere(&self, other: &KnowledgeRecord) -> bool {
        Attribute::ALL.iter().all(|&a| self.value(a) != other.value(a))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KnowledgeSet {
    pub records: Vec<KnowledgeRecord>,
    pub seed: u64,
}

impl KnowledgeSet {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }

    pub fn from_jsonl(text: &str, seed: u64) -> Result<Self> {
        let records = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str(l).map_err(Error::from))
            .collect::<Result<Vec<KnowledgeRecord>>>()?;
        let mut names = HashSet::new();
        for r in &records {
            r.validate()?;
            if !names.insert(r.name.as_str()) {
                return Err(Error::Argument(format!("duplicate name {:?}", r.name)));
            }
        }
        Ok(KnowledgeSet { records, seed })
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(self.to_jsonl()?.as_bytes())
            .map_err(|e| Error::io(path, e))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConflictPair {
    pub side_a: KnowledgeRecord,
    pub side_b: KnowledgeRecord,
}

impl ConflictPair {
    pub fn name(&self) -> &str {
        &self.side_a.name
    }

    pub fn is_valid(&self) -> bool {
        self.side_a.name == self.side_b.name && self.side_a.differs_everywhere(&self.side_b)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvidenceTestSplit {
    pub evidence: KnowledgeSet,
    pub test: KnowledgeSet,
    pub test_fraction: f64,
}

/// Candidate values for every attribute plus the correlation tables that
/// keep university/major and company/city pairings plausible.
#[derive(Debug, Clone, PartialEq)]
pub struct AttributePools {
    pub first_names: Vec<String>,
    pub last_names: Vec<String>,
    pub birth_places: Vec<String>,
    pub universities: Vec<String>,
    pub majors: Vec<String>,
    pub companies: Vec<String>,
    /// university → majors it offers
    pub university_majors: BTreeMap<String, Vec<String>>,
    /// company → cities it operates in
    pub company_cities: BTreeMap<String, Vec<String>>,
    pub version: String,
}

pub const BUNDLED_POOLS_VERSION: &str = "bundled-v1";

const POOL_FILES: [&str; 8] = [
    "first_names.txt",
    "last_names.txt",
    "birth_places.txt",
    "universities.txt",
    "majors.txt",
    "companies.txt",
    "university_majors.txt",
    "company_cities.txt",
];

fn parse_lines(text: &str) -> Vec<String> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(String::from)
        .collect()
}

/// `key: v1 | v2 | ...` per line; `#` starts a comment line.
pub fn parse_table(text: &str) -> Result<BTreeMap<String, Vec<String>>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, values) = line
            .split_once(':')
            .ok_or_else(|| Error::Argument(format!("table line {}: missing ':'", i + 1)))?;
        let values: Vec<String> = values
            .split('|')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        if out.insert(key.trim().to_string(), values).is_some() {
            return Err(Error::Argument(format!("table line {}: duplicate key {key:?}", i + 1)));
        }
    }
    Ok(out)
}

impl AttributePools {
    pub fn bundled() -> Self {
        let pools = Self::from_texts(
            [
                include_str!("../data/first_names.txt"),
                include_str!("../data/last_names.txt"),
                include_str!("../data/birth_places.txt"),
                include_str!("../data/universities.txt"),
                include_str!("../data/majors.txt"),
                include_str!("../data/companies.txt"),
                include_str!("../data/university_majors.txt"),
                include_str!("../data/company_cities.txt"),
            ],
            BUNDLED_POOLS_VERSION,
        )
        .expect("bundled pools are valid");
        pools
    }

    /// Loads the eight pool files from `dir`.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut texts = Vec::with_capacity(POOL_FILES.len());
        for name in POOL_FILES {
            let p = dir.join(name);
            texts.push(fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?);
        }
        let refs: [&str; 8] = std::array::from_fn(|i| texts[i].as_str());
        let version = format!("dir:{}", Self::digest_texts(&refs));
        Self::from_texts(refs, &version)
    }

    fn digest_texts(texts: &[&str]) -> String {
        let mut h = Sha256::new();
        for t in texts {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        hex::encode(&h.finalize()[..8])
    }

    pub fn from_texts(texts: [&str; 8], version: &str) -> Result<Self> {
        let pools = AttributePools {
            first_names: parse_lines(texts[0]),
            last_names: parse_lines(texts[1]),
            birth_places: parse_lines(texts[2]),
            universities: parse_lines(texts[3]),
            majors: parse_lines(texts[4]),
            companies: parse_lines(texts[5]),
            university_majors: parse_table(texts[6])?,
            company_cities: parse_table(texts[7])?,
            version: version.to_string(),
        };
        pools.validate()?;
        Ok(pools)
    }

    pub fn validate(&self) -> Result<()> {
        let lists = [
            ("first_names", &self.first_names),
            ("last_names", &self.last_names),
            ("birth_places", &self.birth_places),
            ("universities", &self.universities),
            ("majors", &self.majors),
            ("companies", &self.companies),
        ];
        for (what, list) in lists {
            if list.is_empty() {
                return Err(Error::Argument(format!("pool {what} is empty")));
            }
            let uniq: HashSet<_> = list.iter().collect();
            if uniq.len() != list.len() {
                return Err(Error::Argument(format!("pool {what} has duplicates")));
            }
        }
        check_table("university_majors", &self.university_majors, &self.universities, &self.majors)?;
        check_table("company_cities", &self.company_cities, &self.companies, &self.birth_places)?;
        Ok(())
    }

    /// Number of distinct full names the pools can produce.
    pub fn name_capacity(&self) -> usize {
        self.first_names.len() * self.last_names.len()
    }

    /// Every `first last` combination in pool order.
    pub fn all_names(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.name_capacity());
        for f in &self.first_names {
            for l in &self.last_names {
                out.push(format!("{f} {l}"));
            }
        }
        out
    }

    pub fn values(&self, attr: Attribute) -> Option<&[String]> {
        match attr {
            Attribute::BirthDate => None,
            Attribute::BirthPlace => Some(&self.birth_places),
            Attribute::University => Some(&self.universities),
            Attribute::Major => Some(&self.majors),
            Attribute::Company => Some(&self.companies),
        }
    }

    pub fn sample_date(&self, rng: &mut impl Rng) -> BirthDate {
        BirthDate {
            year: BIRTH_YEAR_START + rng.random_range(0..BIRTH_YEAR_SPAN),
            month: rng.random_range(1..=12),
            day: rng.random_range(1..=MAX_DAY),
        }
    }

    /// Uniform university, then a major it offers.
    pub fn sample_education(&self, rng: &mut impl Rng) -> (String, String) {
        let uni = self.universities.choose(rng).expect("non-empty pool").clone();
        let major = self.university_majors[&uni].choose(rng).expect("non-empty list").clone();
        (uni, major)
    }

    /// Uniform company, then a city it operates in.
    pub fn sample_employment(&self, rng: &mut impl Rng) -> (String, String) {
        let company = self.companies.choose(rng).expect("non-empty pool").clone();
        let city = self.company_cities[&company].choose(rng).expect("non-empty list").clone();
        (company, city)
    }

    pub fn sample_record(&self, name: String, rng: &mut impl Rng) -> KnowledgeRecord {
        let birth_date = self.sample_date(rng);
        let (university, major) = self.sample_education(rng);
        let (company, birth_place) = self.sample_employment(rng);
        KnowledgeRecord {
            name,
            birth_date,
            birth_place,
            university,
            major,
            company,
        }
    }

    /// Content digest plus version label, recorded in manifests.
    pub fn fingerprint(&self) -> String {
        let join = |v: &[String]| v.join("\n");
        let table = |t: &BTreeMap<String, Vec<String>>| {
            t.iter()
                .map(|(k, v)| format!("{k}:{}", v.join("|")))
                .collect::<Vec<_>>()
                .join("\n")
        };
        let parts = [
            join(&self.first_names),
            join(&self.last_names),
            join(&self.birth_places),
            join(&self.universities),
            join(&self.majors),
            join(&self.companies),
            table(&self.university_majors),
            table(&self.company_cities),
        ];
        let refs: Vec<&str> = parts.iter().map(String::as_str).collect();
        format!("{}#{}", self.version, Self::digest_texts(&refs))
    }
}

fn check_table(
    what: &str,
    table: &BTreeMap<String, Vec<String>>,
    keys: &[String],
    values: &[String],
) -> Result<()> {
    let value_set: HashSet<&String> = values.iter().collect();
    for k in keys {
        let allowed = table
            .get(k)
            .ok_or_else(|| Error::Argument(format!("{what}: no entry for {k:?}")))?;
        if allowed.is_empty() {
            return Err(Error::Argument(format!("{what}: empty list for {k:?}")));
        }
        if let Some(v) = allowed.iter().find(|v| !value_set.contains(v)) {
            return Err(Error::Argument(format!("{what}: {v:?} under {k:?} is not in the pool")));
        }
    }
    if let Some(extra) = table.keys().find(|k| !keys.contains(k)) {
        return Err(Error::Argument(format!("{what}: unknown key {extra:?}")));
    }
    Ok(())
}

/// `count` records with unique names. Names are a seeded shuffle of every
/// first/last combination; each record's attributes come from its own seed
/// stream (`seed`, "record", index), so generation is order-independent.
pub fn sample_knowledge_set(pools: &AttributePools, count: usize, seed: u64) -> Result<KnowledgeSet> {
    sample_knowledge_set_with(pools, count, seed, Exec::default())
}

pub fn sample_knowledge_set_with(
    pools: &AttributePools,
    count: usize,
    seed: u64,
    exec: Exec,
) -> Result<KnowledgeSet> {
    if count > pools.name_capacity() {
        return Err(Error::Capacity(format!(
            "requested {count} names but the pools provide {}",
            pools.name_capacity()
        )));
    }
    let mut names = pools.all_names();
    names.shuffle(&mut seeding::rng(seed, "names", 0));
    names.truncate(count);
    let records = par::map_range(exec, count, |i| {
        let mut rng = seeding::rng(seed, "record", i as u64);
        pools.sample_record(names[i].clone(), &mut rng)
    });
    Ok(KnowledgeSet { records, seed })
}

fn resample<T: PartialEq>(
    what: &str,
    avoid: &T,
    mut draw: impl FnMut() -> T,
) -> Result<T> {
    for _ in 0..MAX_RESAMPLE_ATTEMPTS {
        let v = draw();
        if &v != avoid {
            return Ok(v);
        }
    }
    Err(Error::Capacity(format!(
        "no alternative {what} found in {MAX_RESAMPLE_ATTEMPTS} attempts"
    )))
}

/// Pairs `k` with a record of the same name that differs in all five
/// attributes. Each attribute is redrawn by rejection, respecting the
/// correlation tables; the full date string must differ.
pub fn make_conflict(pools: &AttributePools, k: &KnowledgeRecord, seed: u64) -> Result<ConflictPair> {
    let mut rng = seeding::rng(seed, &format!("conflict:{}", k.name), 0);
    let birth_date = resample("birth date", &k.birth_date, || pools.sample_date(&mut rng))?;
    let university = resample("university", &k.university, || {
        pools.universities.choose(&mut rng).expect("non-empty").clone()
    })?;
    let majors = &pools.university_majors[&university];
    let major = resample("major", &k.major, || majors.choose(&mut rng).expect("non-empty").clone())?;
    let company = resample("company", &k.company, || {
        pools.companies.choose(&mut rng).expect("non-empty").clone()
    })?;
    let cities = &pools.company_cities[&company];
    let birth_place = resample("birth place", &k.birth_place, || {
        cities.choose(&mut rng).expect("non-empty").clone()
    })?;
    Ok(ConflictPair {
        side_a: k.clone(),
        side_b: KnowledgeRecord {
            name: k.name.clone(),
            birth_date,
            birth_place,
            university,
            major,
            company,
        },
    })
}

fn resample_unused<T: PartialEq>(what: &str, used: &[T], mut draw: impl FnMut() -> T) -> Result<T> {
    for _ in 0..MAX_RESAMPLE_ATTEMPTS {
        let v = draw();
        if !used.contains(&v) {
            return Ok(v);
        }
    }
    Err(Error::Capacity(format!(
        "no unused {what} found in {MAX_RESAMPLE_ATTEMPTS} attempts"
    )))
}

/// `count` mutually conflicting records sharing `k`'s name: the first is `k`
/// itself and every attribute value is distinct across all of them.
pub fn make_variants(pools: &AttributePools, k: &KnowledgeRecord, count: usize, seed: u64) -> Result<Vec<KnowledgeRecord>> {
    let mut rng = seeding::rng(seed, &format!("variants:{}", k.name), 0);
    let mut out = vec![k.clone()];
    while out.len() < count {
        let col = |f: fn(&KnowledgeRecord) -> &String| out.iter().map(f).cloned().collect::<Vec<_>>();
        let dates: Vec<BirthDate> = out.iter().map(|r| r.birth_date).collect();
        let birth_date = resample_unused("birth date", &dates, || pools.sample_date(&mut rng))?;
        let university = resample_unused("university", &col(|r| &r.university), || {
            pools.universities.choose(&mut rng).expect("non-empty").clone()
        })?;
        let majors = &pools.university_majors[&university];
        let major = resample_unused("major", &col(|r| &r.major), || {
            majors.choose(&mut rng).expect("non-empty").clone()
        })?;
        let company = resample_unused("company", &col(|r| &r.company), || {
            pools.companies.choose(&mut rng).expect("non-empty").clone()
        })?;
        let cities = &pools.company_cities[&company];
        let birth_place = resample_unused("birth place", &col(|r| &r.birth_place), || {
            cities.choose(&mut rng).expect("non-empty").clone()
        })?;
        out.push(KnowledgeRecord {
            name: k.name.clone(),
            birth_date,
            birth_place,
            university,
            major,
            company,
        });
    }
    out.truncate(count);
    Ok(out)
}

pub fn make_conflicts(pools: &AttributePools, ks: &KnowledgeSet, seed: u64) -> Result<Vec<ConflictPair>> {
    par::try_map(Exec::default(), &ks.records, |k| make_conflict(pools, k, seed))
}

/// Seeded partition into evidence and test sets; the test side holds
/// `round(test_fraction · count)` records. Both sides keep input order.
pub fn split_evidence_test(ks: &KnowledgeSet, test_fraction: f64, seed: u64) -> Result<EvidenceTestSplit> {
    let n = ks.len();
    if n < 2 {
        return Err(Error::Argument(format!("need at least 2 records to split, got {n}")));
    }
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Argument(format!("test fraction {test_fraction} outside (0, 1)")));
    }
    let n_test = (test_fraction * n as f64).round() as usize;
    if n_test == 0 || n_test == n {
        return Err(Error::Argument(format!(
            "test fraction {test_fraction} of {n} records leaves one side empty"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut seeding::rng(seed, "split", 0));
    let mut is_test = vec![false; n];
    for &i in &idx[..n_test] {
        is_test[i] = true;
    }
    let (mut evidence, mut test) = (Vec::new(), Vec::new());
    for (r, t) in ks.records.iter().zip(is_test) {
        if t {
            test.push(r.clone());
        } else {
            evidence.push(r.clone());
        }
    }
    Ok(EvidenceTestSplit {
        evidence: KnowledgeSet {
            records: evidence,
            seed: ks.seed,
        },
        test: KnowledgeSet {
            records: test,
            seed: ks.seed,
        },
        test_fraction,
    })
}
