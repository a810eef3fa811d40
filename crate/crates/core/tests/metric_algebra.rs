use std::collections::HashMap;

use preflab::corpus::{build_mcq_set, build_test_statements, StatementPair};
use preflab::eval::{half_unit_share, mcq_accuracy, preference_score};
use preflab::knowledge::{make_conflicts, sample_knowledge_set, Attribute, AttributePools};
use preflab::lm::SeqScore;
use preflab::scorer::{ConstantScorer, RandomScorer, ScoreRequest, SequenceScorer};
use preflab::templates::StatementStyle;
use preflab::Result;
use proptest::prelude::*;

/// Scores looked up by text, with few distinct values so ties are common.
struct TableScorer(HashMap<String, f64>);

impl SequenceScorer for TableScorer {
    fn identity(&self) -> String {
        "table".into()
    }

    fn score(&self, requests: &[ScoreRequest]) -> Result<Vec<SeqScore>> {
        Ok(requests
            .iter()
            .map(|r| SeqScore {
                logprob: self.0[&r.text],
                num_tokens: 1,
            })
            .collect())
    }
}

fn statements(n: usize, seed: u64) -> Vec<StatementPair> {
    let pools = AttributePools::bundled();
    let ks = sample_knowledge_set(&pools, n, seed).unwrap();
    build_test_statements(&make_conflicts(&pools, &ks, seed).unwrap(), StatementStyle::Plain)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn swapping_sides_complements_exactly(seed in 0u64..1000, levels in 1u32..4) {
        let st = statements(7, seed);
        let mut rng_state = seed.wrapping_mul(6364136223846793005).wrapping_add(1);
        let mut table = HashMap::new();
        for s in &st {
            for t in [&s.s_a, &s.s_b] {
                rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                table.insert(t.clone(), ((rng_state >> 33) % levels as u64) as f64);
            }
        }
        let scorer = TableScorer(table);
        let swapped: Vec<StatementPair> = st.iter().map(StatementPair::swapped).collect();
        for normalize in [true, false] {
            let ab = preference_score(&scorer, &st, normalize).unwrap();
            let ba = preference_score(&scorer, &swapped, normalize).unwrap();
            prop_assert_eq!(ab.average + ba.average, 1.0);
            for a in Attribute::ALL {
                prop_assert_eq!(ab.score(a).unwrap() + ba.score(a).unwrap(), 1.0);
            }
        }
    }

    #[test]
    fn half_unit_share_is_exactly_complementary(n in 1usize..5000, w in 0usize..5000, t in 0usize..5000) {
        let w = w % (n + 1);
        let t = t % (n - w + 1);
        let l = n - w - t;
        prop_assert_eq!(half_unit_share(w, t, n) + half_unit_share(l, t, n), 1.0);
    }
}

#[test]
fn constant_scorer_is_exactly_indifferent() {
    let st = statements(40, 2);
    let r = preference_score(&ConstantScorer(-3.25), &st, true).unwrap();
    assert_eq!(r.average, 0.5);
    assert_eq!(r.tie_count, st.len());
    assert!(r.attributes.iter().all(|a| a.score == 0.5));
}

#[test]
fn random_scorer_mcq_baseline_is_one_in_four() {
    let pools = AttributePools::bundled();
    let ks = sample_knowledge_set(&pools, 1200, 21).unwrap();
    let items = build_mcq_set(&ks, &pools, StatementStyle::Plain, 21).unwrap();
    assert!(items.len() >= 5000);
    let r = mcq_accuracy(&RandomScorer { seed: 21 }, &items, true).unwrap();
    assert!((r.accuracy - 0.25).abs() <= 0.02, "accuracy {}", r.accuracy);
}

#[test]
fn empty_sets_are_rejected() {
    assert_eq!(
        preference_score(&ConstantScorer(0.0), &[], true).unwrap_err().category(),
        "EMPTY_INPUT"
    );
    assert_eq!(mcq_accuracy(&ConstantScorer(0.0), &[], true).unwrap_err().category(), "EMPTY_INPUT");
}
