// SPDX-License-Identifier: MIT OR Apache-2.0

//! Claim-level verdict aggregation, self-consistency voting and the judge
//! client interface.

mod align;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use align::{align_span, levenshtein, MAX_EDIT_RATIO};

pub const DEFAULT_C_THRESH: f64 = 0.8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Supported,
    Contradicted,
    Unknown,
}

impl Verdict {
    pub const ALL: [Verdict; 3] = [Verdict::Supported, Verdict::Contradicted, Verdict::Unknown];

    fn index(self) -> usize {
        self as usize
    }
}

/// One judged atomic claim; a line of the verdicts JSONL.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VerdictRecord {
    pub claim: String,
    pub label: Verdict,
    pub confidence: f64,
}

impl VerdictRecord {
    pub fn new(claim: impl Into<String>, label: Verdict, confidence: f64) -> Self {
        Self {
            claim: claim.into(),
            label,
            confidence,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::InvalidInput(format!(
                "confidence {} of claim {:?} outside [0, 1]",
                self.confidence, self.claim
            )));
        }
        Ok(())
    }
}

/// Claim-level rates. Rates are count / `m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeReport {
    #[serde(rename = "ASR")]
    pub asr: f64,
    #[serde(rename = "ARR")]
    pub arr: f64,
    pub unknown_rate: f64,
    #[serde(rename = "OER")]
    pub oer: f64,
    #[serde(rename = "M")]
    pub m: usize,
    pub c_thresh: f64,
    pub supported: usize,
    pub contradicted: usize,
    pub unknown: usize,
    /// Contradicted claims with confidence at or above `c_thresh`.
    pub obvious_errors: usize,
}

pub fn aggregate_verdicts(records: &[VerdictRecord], c_thresh: f64) -> Result<JudgeReport> {
    if records.is_empty() {
        return Err(Error::InvalidInput("no verdict records".into()));
    }
    let mut counts = [0usize; 3];
    let mut obvious = 0;
    for r in records {
        r.validate()?;
        counts[r.label.index()] += 1;
        if r.label == Verdict::Contradicted && r.confidence >= c_thresh {
            obvious += 1;
        }
    }
    let m = records.len();
    let rate = |c: usize| c as f64 / m as f64;
    Ok(JudgeReport {
        asr: rate(counts[0]),
        arr: rate(counts[1]),
        unknown_rate: rate(counts[2]),
        oer: rate(obvious),
        m,
        c_thresh,
        supported: counts[0],
        contradicted: counts[1],
        unknown: counts[2],
        obvious_errors: obvious,
    })
}

/// Per-claim majority over repeated judge runs. A tie for the top count
/// yields `Unknown` with confidence 0; otherwise the confidence is the mean
/// over the winning votes.
pub fn majority_vote(runs: &[Vec<VerdictRecord>]) -> Result<Vec<VerdictRecord>> {
    let first = runs
        .first()
        .ok_or_else(|| Error::InvalidInput("no judge runs".into()))?;
    if let Some((i, r)) = runs.iter().enumerate().find(|(_, r)| r.len() != first.len()) {
        return Err(Error::DimMismatch(format!(
            "run {i} has {} verdicts, run 0 has {}",
            r.len(),
            first.len()
        )));
    }
    let mut out = Vec::with_capacity(first.len());
    for (k, base) in first.iter().enumerate() {
        let mut votes: [Vec<f64>; 3] = Default::default();
        for run in runs {
            let r = &run[k];
            r.validate()?;
            if r.claim != base.claim {
                return Err(Error::InvalidInput(format!(
                    "claim {k} differs across runs: {:?} vs {:?}",
                    base.claim, r.claim
                )));
            }
            votes[r.label.index()].push(r.confidence);
        }
        let top = votes.iter().map(Vec::len).max().unwrap_or(0);
        let winners: Vec<Verdict> = Verdict::ALL
            .into_iter()
            .filter(|v| votes[v.index()].len() == top)
            .collect();
        let record = if let [winner] = winners[..] {
            let confs = &mut votes[winner.index()];
            // summation order fixed so the result is independent of run order
            confs.sort_by(f64::total_cmp);
            let mean = confs.iter().sum::<f64>() / confs.len() as f64;
            VerdictRecord::new(base.claim.clone(), winner, mean)
        } else {
            VerdictRecord::new(base.claim.clone(), Verdict::Unknown, 0.0)
        };
        out.push(record);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AnchorKind {
    Vision,
    Text,
    Prior,
}

/// What a judge client receives for one claim.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgeRequest {
    pub claim: String,
    pub anchor_kind: AnchorKind,
    pub anchor_payload: String,
}

/// Any verifier that turns a claim plus its anchor into a verdict.
pub trait JudgeClient {
    fn judge(&self, request: &JudgeRequest) -> Result<VerdictRecord>;
}

/// Entry of a mock fact table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Fact {
    pub holds: bool,
    pub confidence: f64,
}

/// Offline judge backed by a fact table keyed by normalized claim text.
/// Claims missing from the table are judged `Unknown`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MockJudge {
    pub facts: BTreeMap<String, Fact>,
    pub unknown_confidence: f64,
}

fn normalize_claim(claim: &str) -> String {
    claim
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .trim_end_matches('.')
        .to_lowercase()
}

impl MockJudge {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fact(mut self, claim: &str, holds: bool, confidence: f64) -> Self {
        self.facts.insert(normalize_claim(claim), Fact { holds, confidence });
        self
    }
}

impl JudgeClient for MockJudge {
    fn judge(&self, request: &JudgeRequest) -> Result<VerdictRecord> {
        let record = match self.facts.get(&normalize_claim(&request.claim)) {
            Some(f) => VerdictRecord::new(
                request.claim.clone(),
                if f.holds { Verdict::Supported } else { Verdict::Contradicted },
                f.confidence,
            ),
            None => VerdictRecord::new(request.claim.clone(), Verdict::Unknown, self.unknown_confidence),
        };
        record.validate()?;
        Ok(record)
    }
}

/// Judge every request in order.
pub fn judge_all<C: JudgeClient + ?Sized>(client: &C, requests: &[JudgeRequest]) -> Result<Vec<VerdictRecord>> {
    requests.iter().map(|r| client.judge(r)).collect()
}

pub fn read_jsonl<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut buf = Vec::new();
    for it in items {
        serde_json::to_writer(&mut buf, it)?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}
