//! Sequence scorers: the in-repo model, trivial reference scorers, and any
//! external process speaking the line-delimited JSON protocol.
//!
//! Wire format, one object per line in each direction:
//!
//! ```text
//! {"id":"...","text":"..."}
//! {"id":"...","logprob":-12.34,"num_tokens":7}
//! {"id":"...","error":"..."}
//! ```

use std::collections::{HashMap, HashSet};
use std::io::{BufRead, BufReader, Write};
use std::process::{Command, Stdio};
use std::sync::mpsc;
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use wait_timeout::ChildExt;

use crate::error::{Error, Result};
use crate::lm::{score_text, LmModel, SeqScore, Tokenizer};
use crate::par::{self, Exec};
use crate::seeding;

pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(60);

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScoreRequest {
    pub id: String,
    pub text: String,
}

impl ScoreRequest {
    pub fn new(id: impl Into<String>, text: impl Into<String>) -> Self {
        ScoreRequest {
            id: id.into(),
            text: text.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ScoreResponse {
    Ok { id: String, logprob: f64, num_tokens: usize },
    Err { id: String, error: String },
}

impl ScoreResponse {
    pub fn id(&self) -> &str {
        match self {
            ScoreResponse::Ok { id, .. } | ScoreResponse::Err { id, .. } => id,
        }
    }

    pub fn into_result(self) -> Result<SeqScore> {
        match self {
            ScoreResponse::Ok { logprob, num_tokens, .. } => Ok(SeqScore { logprob, num_tokens }),
            ScoreResponse::Err { id, error } => Err(Error::Scorer { id, reason: error }),
        }
    }
}

/// Anything that maps texts to sequence log-probabilities.
pub trait SequenceScorer: Sync {
    fn identity(&self) -> String;

    /// Scores every request, returning results in request order. A failure on
    /// any request is reported with that request's id.
    fn score(&self, requests: &[ScoreRequest]) -> Result<Vec<SeqScore>>;
}

fn check_unique(requests: &[ScoreRequest]) -> Result<()> {
    let mut seen = HashSet::with_capacity(requests.len());
    for r in requests {
        if !seen.insert(r.id.as_str()) {
            return Err(Error::Protocol {
                reason: "duplicate request id".into(),
                line: r.id.clone(),
            });
        }
    }
    Ok(())
}

/// Scores one text with the in-repo model. Empty text is rejected.
pub fn score_checked(model: &LmModel, tok: &Tokenizer, text: &str) -> Result<SeqScore> {
    if text.trim().is_empty() {
        return Err(Error::EmptyInput("empty text".into()));
    }
    score_text(model, tok, text)
}

pub struct ModelScorer<'a> {
    pub model: &'a LmModel,
    pub tokenizer: &'a Tokenizer,
    pub exec: Exec,
}

impl<'a> ModelScorer<'a> {
    pub fn new(model: &'a LmModel, tokenizer: &'a Tokenizer) -> Self {
        ModelScorer {
            model,
            tokenizer,
            exec: Exec::default(),
        }
    }
}

impl SequenceScorer for ModelScorer<'_> {
    fn identity(&self) -> String {
        let c = self.model.config();
        format!(
            "internal:d{}-L{}-H{}-ff{}-V{}",
            c.d_model, c.n_layers, c.n_heads, c.d_ff, c.vocab_size
        )
    }

    fn score(&self, requests: &[ScoreRequest]) -> Result<Vec<SeqScore>> {
        check_unique(requests)?;
        par::try_map(self.exec, requests, |r| {
            score_checked(self.model, self.tokenizer, &r.text).map_err(|e| Error::Scorer {
                id: r.id.clone(),
                reason: e.to_string(),
            })
        })
    }
}

/// Gives every text the same score.
pub struct ConstantScorer(pub f64);

impl SequenceScorer for ConstantScorer {
    fn identity(&self) -> String {
        format!("constant:{}", self.0)
    }

    fn score(&self, requests: &[ScoreRequest]) -> Result<Vec<SeqScore>> {
        check_unique(requests)?;
        Ok(requests
            .iter()
            .map(|_| SeqScore {
                logprob: self.0,
                num_tokens: 1,
            })
            .collect())
    }
}

/// Pseudo-random scores, a fixed function of (seed, text).
pub struct RandomScorer {
    pub seed: u64,
}

impl SequenceScorer for RandomScorer {
    fn identity(&self) -> String {
        format!("random:{}", self.seed)
    }

    fn score(&self, requests: &[ScoreRequest]) -> Result<Vec<SeqScore>> {
        check_unique(requests)?;
        Ok(requests
            .iter()
            .map(|r| {
                let h = seeding::derive(self.seed, &r.text, 0);
                SeqScore {
                    logprob: -((h >> 11) as f64 / (1u64 << 53) as f64),
                    num_tokens: 1,
                }
            })
            .collect())
    }
}

/// Client for a child process that speaks the wire protocol. Each call to
/// [`SequenceScorer::score`] is one session with a fresh process.
pub struct ExternalScorer {
    pub command: Vec<String>,
    pub timeout: Duration,
}

impl ExternalScorer {
    pub fn new(command: Vec<String>) -> Self {
        ExternalScorer {
            command,
            timeout: DEFAULT_TIMEOUT,
        }
    }

    /// Runs one session and returns responses keyed by id.
    pub fn exchange(&self, requests: &[ScoreRequest]) -> Result<HashMap<String, ScoreResponse>> {
        check_unique(requests)?;
        let (prog, args) = self
            .command
            .split_first()
            .ok_or_else(|| Error::Argument("empty scorer command".into()))?;
        let mut child = Command::new(prog)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| Error::io(prog, e))?;

        let mut stdin = child.stdin.take().expect("piped stdin");
        let payload: Vec<String> = requests
            .iter()
            .map(|r| serde_json::to_string(r).map(|s| s + "\n"))
            .collect::<std::result::Result<_, _>>()?;
        let writer = thread::spawn(move || {
            for line in payload {
                if stdin.write_all(line.as_bytes()).is_err() {
                    break;
                }
            }
        });

        let stdout = child.stdout.take().expect("piped stdout");
        let (tx, rx) = mpsc::channel::<std::io::Result<String>>();
        thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });

        let mut pending: HashSet<&str> = requests.iter().map(|r| r.id.as_str()).collect();
        let mut out = HashMap::with_capacity(requests.len());
        let result = loop {
            if pending.is_empty() {
                break Ok(());
            }
            match rx.recv_timeout(self.timeout) {
                Ok(Ok(line)) => {
                    if line.trim().is_empty() {
                        continue;
                    }
                    let resp: ScoreResponse = match serde_json::from_str(&line) {
                        Ok(r) => r,
                        Err(e) => {
                            break Err(Error::Protocol {
                                reason: format!("malformed response ({e})"),
                                line,
                            })
                        }
                    };
                    if !pending.remove(resp.id()) {
                        break Err(Error::Protocol {
                            reason: "response for unknown or already answered id".into(),
                            line,
                        });
                    }
                    out.insert(resp.id().to_string(), resp);
                }
                Ok(Err(e)) => break Err(Error::io("<scorer stdout>", e)),
                Err(mpsc::RecvTimeoutError::Timeout) => {
                    let mut ids: Vec<&str> = pending.iter().copied().collect();
                    ids.sort_unstable();
                    break Err(Error::Timeout { id: ids[0].to_string() });
                }
                Err(mpsc::RecvTimeoutError::Disconnected) => {
                    let mut ids: Vec<&str> = pending.iter().copied().collect();
                    ids.sort_unstable();
                    break Err(Error::Protocol {
                        reason: format!("scorer exited with {} requests unanswered", ids.len()),
                        line: ids[0].to_string(),
                    });
                }
            }
        };
        if result.is_err() {
            let _ = child.kill();
        }
        let _ = writer.join();
        match child.wait_timeout(self.timeout).map_err(|e| Error::io(prog, e))? {
            Some(_) => {}
            None => {
                let _ = child.kill();
                let _ = child.wait();
            }
        }
        result.map(|_| out)
    }
}

impl SequenceScorer for ExternalScorer {
    fn identity(&self) -> String {
        format!("external:{}", self.command.join(" "))
    }

    fn score(&self, requests: &[ScoreRequest]) -> Result<Vec<SeqScore>> {
        let mut map = self.exchange(requests)?;
        requests
            .iter()
            .map(|r| map.remove(&r.id).expect("every id answered").into_result())
            .collect()
    }
}

#[derive(Debug, Default, Clone, Copy, PartialEq, Eq)]
pub struct ServeStats {
    pub requests: usize,
    pub errors: usize,
}

fn error_line(id: &str, error: &str) -> Result<String> {
    Ok(serde_json::to_string(&ScoreResponse::Err {
        id: id.to_string(),
        error: error.to_string(),
    })?)
}

/// Answers requests from `input` on `output` until end of input. Bad requests
/// get an error response; the loop keeps going.
pub fn serve_scorer(
    model: &LmModel,
    tokenizer: &Tokenizer,
    input: impl BufRead,
    mut output: impl Write,
) -> Result<ServeStats> {
    let mut stats = ServeStats::default();
    let mut seen = HashSet::new();
    for line in input.lines() {
        let line = line.map_err(|e| Error::io("<stdin>", e))?;
        if line.trim().is_empty() {
            continue;
        }
        stats.requests += 1;
        let reply = match serde_json::from_str::<ScoreRequest>(&line) {
            Err(e) => {
                let id = serde_json::from_str::<serde_json::Value>(&line)
                    .ok()
                    .and_then(|v| v.get("id").and_then(|i| i.as_str()).map(String::from))
                    .unwrap_or_default();
                stats.errors += 1;
                error_line(&id, &format!("malformed request: {e}"))?
            }
            Ok(req) if !seen.insert(req.id.clone()) => {
                stats.errors += 1;
                error_line(&req.id, "duplicate id")?
            }
            Ok(req) => match score_checked(model, tokenizer, &req.text) {
                Ok(s) => serde_json::to_string(&ScoreResponse::Ok {
                    id: req.id,
                    logprob: s.logprob,
                    num_tokens: s.num_tokens,
                })?,
                Err(e) => {
                    stats.errors += 1;
                    error_line(&req.id, &e.to_string())?
                }
            },
        };
        output
            .write_all(reply.as_bytes())
            .and_then(|_| output.write_all(b"\n"))
            .and_then(|_| output.flush())
            .map_err(|e| Error::io("<stdout>", e))?;
    }
    Ok(stats)
}
