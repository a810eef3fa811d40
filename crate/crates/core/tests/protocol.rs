mod common;

use std::time::Duration;

use preflab::corpus::StatementPair;
use preflab::eval::preference_score;
use preflab::knowledge::Attribute;
use preflab::lm::{LmConfig, LmModel, Tokenizer};
use preflab::scorer::{serve_scorer, ExternalScorer, ScoreRequest, SequenceScorer};
use preflab::Error;

fn sh(script: &str) -> ExternalScorer {
    ExternalScorer::new(vec!["sh".into(), "-c".into(), script.into()])
}

#[test]
fn uniform_stub_gives_minus_ln_ten_per_token() {
    let s = sh(common::UNIFORM_STUB);
    let reqs = vec![
        ScoreRequest::new("a", "one two three"),
        ScoreRequest::new("b", "one"),
    ];
    let out = s.score(&reqs).unwrap();
    assert_eq!(out[0].num_tokens, 4);
    assert_eq!(out[1].num_tokens, 2);
    for o in &out {
        assert!((o.normalized() + 10f64.ln()).abs() < 1e-12);
    }
}

#[test]
fn out_of_order_responses_are_matched_by_id() {
    // Buffers everything, then answers in reverse order.
    let s = sh(
        r#"tac | while IFS= read -r line; do
             id=$(printf '%s' "$line" | sed -E 's/.*"id":"([^"]*)".*/\1/')
             printf '{"id":"%s","logprob":-%s,"num_tokens":1}\n' "$id" "${#id}"
           done"#,
    );
    let reqs: Vec<ScoreRequest> = (1..=5).map(|i| ScoreRequest::new("x".repeat(i), "t")).collect();
    let out = s.score(&reqs).unwrap();
    for (i, o) in out.iter().enumerate() {
        assert_eq!(o.logprob, -((i + 1) as f64));
    }
}

#[test]
fn golden_transcript_through_preference() {
    let pairs = vec![StatementPair {
        knowledge_id: "k".into(),
        attribute: Attribute::Major,
        s_a: "short text".into(),
        s_b: "a much longer text".into(),
    }];
    let s = sh(common::UNIFORM_STUB);
    // Per-token scores tie at −ln 10; summed scores favour the shorter side.
    assert_eq!(preference_score(&s, &pairs, true).unwrap().tie_count, 1);
    let raw = preference_score(&s, &pairs, false).unwrap();
    assert_eq!(raw.average, 1.0);
}

#[test]
fn scorer_failures_surface_with_ids() {
    let err = sh(r#"read -r line; echo '{"id":"pair-0-a","error":"cuda oom"}'; cat >/dev/null"#)
        .score(&[ScoreRequest::new("pair-0-a", "x")])
        .unwrap_err();
    assert!(matches!(&err, Error::Scorer { id, reason } if id == "pair-0-a" && reason.contains("oom")));

    let err = sh("cat >/dev/null; echo 'not json'").score(&[ScoreRequest::new("q", "x")]).unwrap_err();
    assert_eq!(err.category(), "PROTOCOL");

    let err = sh(r#"cat >/dev/null; echo '{"id":"other","logprob":-1,"num_tokens":1}'"#)
        .score(&[ScoreRequest::new("q", "x")])
        .unwrap_err();
    assert_eq!(err.category(), "PROTOCOL");

    let err = sh("cat >/dev/null").score(&[ScoreRequest::new("q", "x")]).unwrap_err();
    assert!(matches!(err, Error::Protocol { .. } | Error::Timeout { .. }));
}

#[test]
fn silent_scorer_times_out() {
    let mut s = sh("sleep 5");
    s.timeout = Duration::from_millis(300);
    let err = s.score(&[ScoreRequest::new("slow", "x")]).unwrap_err();
    assert!(matches!(err, Error::Timeout { ref id } if id == "slow"), "{err}");
}

#[test]
fn serve_golden_transcript() {
    let tok = Tokenizer::build([["alpha beta ."]]).unwrap();
    let cfg = LmConfig {
        vocab_size: tok.vocab_size(),
        d_model: 4,
        n_layers: 1,
        n_heads: 1,
        d_ff: 4,
        max_context: 8,
    };
    let model = LmModel::zeros(cfg).unwrap();
    let input = concat!(
        r#"{"id":"r1","text":"alpha beta"}"#,
        "\n",
        "garbage\n",
        r#"{"id":"r1","text":"beta"}"#,
        "\n",
        r#"{"id":"r2","text":""}"#,
        "\n",
    );
    let mut out = Vec::new();
    let stats = serve_scorer(&model, &tok, input.as_bytes(), &mut out).unwrap();
    assert_eq!((stats.requests, stats.errors), (4, 3));
    let text = String::from_utf8(out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    // Uniform model over the vocabulary: 3 scored tokens at −ln V each.
    let lp = -3.0 * (tok.vocab_size() as f64).ln();
    assert_eq!(lines[0], format!(r#"{{"id":"r1","logprob":{},"num_tokens":3}}"#, serde_json::to_string(&lp).unwrap()));
    assert!(lines[1].starts_with(r#"{"id":"","error":"malformed request"#));
    assert_eq!(lines[2], r#"{"id":"r1","error":"duplicate id"}"#);
    assert!(lines[3].starts_with(r#"{"id":"r2","error":"#));
}
