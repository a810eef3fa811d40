use std::collections::{BTreeMap, HashMap};

use preflab::corpus::{
    build_mcq_set, build_rendered_mcq_set, build_rendered_statements, build_test_statements, Corpus, CorpusBuilder, Role,
    MCQ_DISTRACTORS,
};
use preflab::knowledge::{
    make_conflicts, sample_knowledge_set, split_evidence_test, Attribute, AttributePools, ConflictPair, KnowledgeRecord,
};
use preflab::par::Exec;
use preflab::templates::{Extractor, Side, SourcePools, StatementStyle, TemplatePack};

struct Fixture {
    pools: AttributePools,
    pack: TemplatePack,
    sources: SourcePools,
}

fn fixture() -> Fixture {
    Fixture {
        pools: AttributePools::bundled(),
        pack: TemplatePack::bundled(),
        sources: SourcePools::bundled(),
    }
}

fn pairs(f: &Fixture, n: usize, seed: u64) -> Vec<ConflictPair> {
    let ks = sample_knowledge_set(&f.pools, n, seed).unwrap();
    make_conflicts(&f.pools, &ks, seed).unwrap()
}

/// Re-extracts the record each example was rendered from.
fn extract_all(f: &Fixture, corpus: &Corpus) -> Vec<KnowledgeRecord> {
    let mut cache: HashMap<&str, Extractor> = HashMap::new();
    corpus
        .examples
        .iter()
        .map(|e| {
            let x = cache.entry(&e.template_id).or_insert_with(|| {
                Extractor::new(f.pack.template(&e.template_id).unwrap(), &f.pools).unwrap()
            });
            x.extract(&e.text)
                .unwrap_or_else(|| panic!("no match for {}: {}", e.template_id, e.text))
                .record
        })
        .collect()
}

#[test]
fn conflict_corpus_reextracts_fully_conflicting_sides() {
    let f = fixture();
    let ps = pairs(&f, 1000, 42);
    let corpus = CorpusBuilder::new(&f.pack, &f.sources)
        .conflict(&ps, "newspaper", "novel", 42)
        .unwrap();
    assert_eq!(corpus.examples.len(), 10_000);
    let records = extract_all(&f, &corpus);
    let mut by_name: BTreeMap<&str, (Vec<&KnowledgeRecord>, Vec<&KnowledgeRecord>)> = BTreeMap::new();
    for (e, r) in corpus.examples.iter().zip(&records) {
        assert_eq!(r.name, e.knowledge_id);
        let slot = by_name.entry(&e.knowledge_id).or_default();
        match e.side {
            Side::A => slot.0.push(r),
            Side::B => slot.1.push(r),
            Side::Neutral => panic!("conflict corpora have no neutral examples"),
        }
    }
    assert_eq!(by_name.len(), 1000);
    for (name, (a, b)) in &by_name {
        assert_eq!((a.len(), b.len()), (5, 5), "{name}");
        assert!(a.windows(2).all(|w| w[0] == w[1]) && b.windows(2).all(|w| w[0] == w[1]));
        let differing = Attribute::ALL.iter().filter(|&&at| a[0].value(at) != b[0].value(at)).count();
        assert_eq!(differing, 5, "{name}");
    }
    let mut per_side: HashMap<(&str, Side), Vec<&str>> = HashMap::new();
    for e in &corpus.examples {
        per_side.entry((&e.knowledge_id, e.side)).or_default().push(&e.template_id);
    }
    for ids in per_side.values_mut() {
        ids.sort_unstable();
        let n = ids.len();
        ids.dedup();
        assert_eq!(ids.len(), n, "template reused within a side");
    }
}

#[test]
fn consistency_counts_match_ratio() {
    let f = fixture();
    let ks = sample_knowledge_set(&f.pools, 100, 7).unwrap();
    let split = split_evidence_test(&ks, 0.2, 7).unwrap();
    let corpus = CorpusBuilder::new(&f.pack, &f.sources)
        .consistency_from_split(&split, &f.pools, 7, "source_name_a", "source_name_b", 9, 1, 7)
        .unwrap();
    let man = &corpus.manifest;
    assert_eq!(man.evidence_ids.len(), 80);
    assert_eq!(man.test_ids.len(), 20);
    assert_eq!(corpus.examples.len(), 80 * 12 + 20 * 2);
    let mut per: HashMap<&str, [usize; 4]> = HashMap::new();
    for e in &corpus.examples {
        let c = per.entry(&e.knowledge_id).or_default();
        match (e.role, e.side) {
            (Role::Support, Side::A) => c[0] += 1,
            (Role::Support, Side::B) => c[1] += 1,
            (Role::EvidenceTagged | Role::TestTagged, _) => c[2] += 1,
            _ => c[3] += 1,
        }
    }
    for id in &man.evidence_ids {
        assert_eq!(per[id.as_str()], [9, 1, 2, 0], "{id}");
    }
    for id in &man.test_ids {
        assert_eq!(per[id.as_str()], [0, 0, 2, 0], "{id}");
    }
    let roundtrip = Corpus::read(&{
        let d = tempfile::tempdir().unwrap().keep();
        corpus.write(&d).unwrap();
        d
    })
    .unwrap();
    assert_eq!(roundtrip.examples, corpus.examples);
    assert_eq!(roundtrip.manifest.corpus_digest, man.corpus_digest);
}

#[test]
fn consistency_rejects_oversized_ratio() {
    let f = fixture();
    let ks = sample_knowledge_set(&f.pools, 10, 1).unwrap();
    let split = split_evidence_test(&ks, 0.2, 1).unwrap();
    let err = CorpusBuilder::new(&f.pack, &f.sources)
        .consistency_from_split(&split, &f.pools, 1, "source_name_a", "source_name_b", 40, 11, 1)
        .unwrap_err();
    assert_eq!(err.category(), "CAPACITY");
}

#[test]
fn generation_is_deterministic_and_exec_independent() {
    let f = fixture();
    let ps = pairs(&f, 200, 9);
    let mut b = CorpusBuilder::new(&f.pack, &f.sources);
    let d1 = b.conflict(&ps, "newspaper", "novel", 9).unwrap().manifest.corpus_digest;
    b.exec = Exec::Serial;
    let d2 = b.conflict(&ps, "newspaper", "novel", 9).unwrap().manifest.corpus_digest;
    assert_eq!(d1, d2);
    let d3 = b.conflict(&ps, "newspaper", "novel", 10).unwrap().manifest.corpus_digest;
    assert_ne!(d1, d3);
}

#[test]
fn single_feature_corpus_recovers_records() {
    let f = fixture();
    let ks = sample_knowledge_set(&f.pools, 50, 3).unwrap();
    let corpus = CorpusBuilder::new(&f.pack, &f.sources)
        .single_feature(&ks, "social_media", 3)
        .unwrap();
    assert_eq!(corpus.examples.len(), 250);
    assert!(corpus.examples.iter().all(|e| e.feature_id == "social_media"));
    let by_name: HashMap<&str, &KnowledgeRecord> = ks.records.iter().map(|r| (r.name.as_str(), r)).collect();
    for (e, r) in corpus.examples.iter().zip(extract_all(&f, &corpus)) {
        assert_eq!(&r, by_name[e.knowledge_id.as_str()]);
    }
}

#[test]
fn statements_cover_every_attribute() {
    let f = fixture();
    let ps = pairs(&f, 1000, 5);
    let st = build_test_statements(&ps, StatementStyle::Plain);
    assert_eq!(st.len(), 5000);
    let first = &ps[0];
    assert_eq!(
        st[0].s_a,
        format!("{}'s birthday is {}.", first.name(), first.side_a.birth_date)
    );
    assert!(st.iter().all(|s| s.s_a != s.s_b));
}

#[test]
fn mcq_distractors_are_distinct_and_near_uniform() {
    let f = fixture();
    let ks = sample_knowledge_set(&f.pools, 2000, 13).unwrap();
    let items = build_mcq_set(&ks, &f.pools, StatementStyle::Plain, 13).unwrap();
    assert_eq!(items.len(), 10_000);
    let mut freq: HashMap<&str, usize> = HashMap::new();
    let mut draws = 0;
    for it in &items {
        assert_eq!(it.distractors.len(), MCQ_DISTRACTORS);
        let mut vals = it.distractor_values.clone();
        vals.push(it.correct_value.clone());
        vals.sort();
        vals.dedup();
        assert_eq!(vals.len(), 4);
        if it.attribute == Attribute::Company {
            for v in &it.distractor_values {
                *freq.entry(v).or_default() += 1;
                draws += 1;
            }
        }
    }
    // Chi-square against uniform over the company pool.
    let k = f.pools.values(Attribute::Company).unwrap().len();
    let expected = draws as f64 / k as f64;
    let chi2: f64 = (0..k)
        .map(|i| {
            let v = &f.pools.values(Attribute::Company).unwrap()[i];
            let o = *freq.get(v.as_str()).unwrap_or(&0) as f64;
            (o - expected).powi(2) / expected
        })
        .sum();
    // 99.9th percentile of chi-square with 99 degrees of freedom is about 149.
    assert!(chi2 < 149.0, "chi2 {chi2} over {k} bins");
}

#[test]
fn rendered_mcq_options_differ_only_in_the_probed_value() {
    let f = fixture();
    let ks = sample_knowledge_set(&f.pools, 30, 4).unwrap();
    let corpus = CorpusBuilder::new(&f.pack, &f.sources)
        .single_feature(&ks, "newspaper", 4)
        .unwrap();
    let items = build_rendered_mcq_set(&ks, &f.pools, &f.pack, &f.sources, "newspaper", &corpus, 4).unwrap();
    let plain = build_mcq_set(&ks, &f.pools, StatementStyle::Plain, 4).unwrap();
    assert_eq!(items.len(), plain.len());
    let extractors: Vec<Extractor> = f
        .pack
        .templates_for("newspaper")
        .into_iter()
        .map(|t| Extractor::new(t, &f.pools).unwrap())
        .collect();
    let recover = |text: &str| extractors.iter().find_map(|x| x.extract(text)).unwrap().record;
    for (it, p) in items.iter().zip(&plain) {
        assert_eq!(it.distractor_values, p.distractor_values);
        let truth = recover(&it.correct);
        assert_eq!(truth.value(it.attribute), it.correct_value);
        for (d, v) in it.distractors.iter().zip(&it.distractor_values) {
            let r = recover(d);
            for a in Attribute::ALL {
                if a == it.attribute {
                    assert_eq!(&r.value(a), v);
                } else {
                    assert_eq!(r.value(a), truth.value(a));
                }
            }
        }
    }
    let used: Vec<(&str, &str)> = corpus
        .examples
        .iter()
        .map(|e| (e.knowledge_id.as_str(), e.template_id.as_str()))
        .collect();
    for it in &items {
        let t = extractors
            .iter()
            .position(|x| x.extract(&it.correct).is_some())
            .unwrap();
        let id = &f.pack.templates_for("newspaper")[t].id;
        assert!(!used.contains(&(it.knowledge_id.as_str(), id.as_str())), "probe template was trained on");
    }
}

#[test]
fn rendered_statements_swap_one_attribute_in_a_held_out_template() {
    let f = fixture();
    let ks = sample_knowledge_set(&f.pools, 40, 6).unwrap();
    let split = split_evidence_test(&ks, 0.25, 6).unwrap();
    let corpus = CorpusBuilder::new(&f.pack, &f.sources)
        .consistency_from_split(&split, &f.pools, 6, "source_name_a", "source_name_b", 5, 5, 6)
        .unwrap();
    let ps = make_conflicts(&f.pools, &split.evidence, 6).unwrap();
    let st = build_rendered_statements(&ps, &f.pack, &f.sources, "general", &corpus, 6).unwrap();
    assert_eq!(st.len(), ps.len() * 5);
    let extractors: Vec<(String, Extractor)> = f
        .pack
        .templates_for("general")
        .into_iter()
        .map(|t| (t.id.clone(), Extractor::new(t, &f.pools).unwrap()))
        .collect();
    let recover = |text: &str| {
        extractors
            .iter()
            .find_map(|(id, x)| x.extract(text).map(|e| (id.clone(), e.record)))
            .unwrap()
    };
    for (s, p) in st.iter().zip(ps.iter().flat_map(|p| std::iter::repeat_n(p, 5))) {
        let ((ta, a), (tb, b)) = (recover(&s.s_a), recover(&s.s_b));
        assert_eq!(ta, tb);
        assert_eq!(a, p.side_a);
        for at in Attribute::ALL {
            let want = if at == s.attribute { p.side_b.value(at) } else { p.side_a.value(at) };
            assert_eq!(b.value(at), want);
        }
        assert!(
            !corpus.examples.iter().any(|e| e.knowledge_id == s.knowledge_id && e.template_id == ta),
            "probe template was trained on"
        );
    }
}
