// SPDX-License-Identifier: MIT OR Apache-2.0

//! Greedy decoding with optional VCD, steering, and probe-guided control.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    control_score, pick_best, probe_guided_reweight, vcd_adjust, ControlConfig, ControlRule,
    GenerativeModel, HiddenHook, SteeringHook, SteeringSpec, StepOutput,
};
use crate::error::{Error, Result};
use crate::probe::{Probe, NUM_CLASSES};
use crate::util::{argmax, log_softmax};

/// Candidates logged per step when no control is active.
const LOGGED_CANDIDATES: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Layer whose hidden state the probe reads.
    pub layer: usize,
    pub max_len: usize,
    pub steering: Option<SteeringSpec>,
    pub vcd_beta: Option<f64>,
    pub control: Option<ControlConfig>,
}

impl DecodeConfig {
    pub fn plain(layer: usize, max_len: usize) -> Self {
        Self {
            layer,
            max_len,
            steering: None,
            vcd_beta: None,
            control: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vcd_beta.is_some() && self.control.is_some() {
            return Err(Error::Config("VCD and probe-guided control are mutually exclusive".into()));
        }
        if let Some(s) = &self.steering {
            s.validate()?;
            if s.layer != self.layer {
                return Err(Error::Config(format!(
                    "steering layer {} differs from probe layer {}",
                    s.layer, self.layer
                )));
            }
        }
        if let Some(c) = &self.control {
            c.validate()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CandidateRecord {
    pub token: usize,
    pub base_logit: f64,
    pub adjusted_logit: f64,
    pub log_prob: f64,
    /// Probe `P(NoConflict)` after this candidate (control mode only).
    pub p_no_conflict: Option<f64>,
    /// Selection score under the control rule (control mode only).
    pub score: Option<f64>,
}

/// One line of `decode_log.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub token: usize,
    pub candidates: Vec<CandidateRecord>,
    /// Probe distribution on the state after `token`.
    pub probe_dist: [f64; NUM_CLASSES],
    pub steering_applied: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub prompt: Vec<usize>,
    pub tokens: Vec<usize>,
    pub steps: Vec<StepRecord>,
}

impl DecodeResult {
    pub fn probe_dists(&self) -> Vec<[f64; NUM_CLASSES]> {
        self.steps.iter().map(|s| s.probe_dist).collect()
    }
}

/// Plain greedy decoding; the reference the harness must reproduce when no
/// intervention is configured.
pub fn greedy_decode<M: GenerativeModel + ?Sized>(
    model: &M,
    prompt: &[usize],
    layer: usize,
    max_len: usize,
) -> Result<Vec<usize>> {
    let mut seq = prompt.to_vec();
    for step in 0..max_len {
        let out = model
            .next(&seq, true, layer, None)
            .map_err(|e| model_fault(step, e))?;
        seq.push(argmax(&out.logits));
    }
    Ok(seq.split_off(prompt.len()))
}

fn model_fault(step: usize, e: Error) -> Error {
    match e {
        Error::Model { .. } => e,
        other => Error::Model {
            step,
            message: other.to_string(),
        },
    }
}

/// Indices of the `k` largest values, descending; ties to the lower index.
fn top_k(values: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn run_controlled_decode<M: GenerativeModel + ?Sized>(
    model: &M,
    probe: &Probe,
    cfg: &DecodeConfig,
    prompt: &[usize],
) -> Result<DecodeResult> {
    cfg.validate()?;
    let hook_impl = cfg.steering.as_ref().map(|spec| SteeringHook {
        spec,
        probe: Some(probe),
    });
    let hook: Option<&dyn HiddenHook> = hook_impl.as_ref().map(|h| h as &dyn HiddenHook);
    let layer = cfg.layer;

    let mut seq = prompt.to_vec();
    let mut steps = Vec::with_capacity(cfg.max_len);
    let mut current: StepOutput = model
        .next(&seq, true, layer, hook)
        .map_err(|e| model_fault(0, e))?;

    for step in 0..cfg.max_len {
        let fault = |e| model_fault(step, e);
        let base = current.logits.clone();
        let adjusted = match cfg.vcd_beta {
            Some(beta) => {
                let ungrounded = model.next(&seq, false, layer, hook).map_err(fault)?;
                vcd_adjust(&base, &ungrounded.logits, beta)?
            }
            None => base.clone(),
        };
        let log_p = log_softmax(&adjusted);

        let (token, candidates, after) = match &cfg.control {
            Some(ctrl) => {
                let ids = top_k(&adjusted, ctrl.top_k);
                let mut outs = Vec::with_capacity(ids.len());
                let mut p0 = Vec::with_capacity(ids.len());
                for &w in &ids {
                    let out = model.lookahead(&seq, w, true, layer, hook).map_err(fault)?;
                    p0.push(probe.predict(&out.hidden).map_err(fault)?[0]);
                    outs.push(out);
                }
                let lp: Vec<f64> = ids.iter().map(|&w| log_p[w]).collect();
                let scores: Vec<f64> = match ctrl.rule {
                    ControlRule::ArgmaxScore => lp
                        .iter()
                        .zip(&p0)
                        .map(|(&l, &q)| control_score(l, q, ctrl.alpha))
                        .collect(),
                    ControlRule::Reweight => {
                        let probs: Vec<f64> = lp.iter().map(|l| l.exp()).collect();
                        probe_guided_reweight(&probs, &p0, ctrl.alpha)?
                    }
                };
                let pick = pick_best(&ids, &scores, &lp);
                let records = ids
                    .iter()
                    .enumerate()
                    .map(|(i, &w)| CandidateRecord {
                        token: w,
                        base_logit: base[w],
                        adjusted_logit: adjusted[w],
                        log_prob: log_p[w],
                        p_no_conflict: Some(p0[i]),
                        score: Some(scores[i]),
                    })
                    .collect();
                (ids[pick], records, Some(outs.swap_remove(pick)))
            }
            None => {
                let ids = top_k(&adjusted, LOGGED_CANDIDATES.min(adjusted.len()));
                let records = ids
                    .iter()
                    .map(|&w| CandidateRecord {
                        token: w,
                        base_logit: base[w],
                        adjusted_logit: adjusted[w],
                        log_prob: log_p[w],
                        p_no_conflict: None,
                        score: None,
                    })
                    .collect();
                (argmax(&adjusted), records, None)
            }
        };

        seq.push(token);
        current = match after {
            Some(out) => out,
            None => model.next(&seq, true, layer, hook).map_err(fault)?,
        };
        let probe_dist = probe.predict(&current.hidden).map_err(fault)?;
        steps.push(StepRecord {
            step,
            token,
            candidates,
            probe_dist,
            steering_applied: current.steered,
        });
    }
    Ok(DecodeResult {
        prompt: prompt.to_vec(),
        tokens: seq.split_off(prompt.len()),
        steps,
    })
}

/// One JSON object per step.
pub fn write_decode_log(path: &Path, results: &[DecodeResult]) -> Result<()> {
    let mut buf = Vec::new();
    for (episode, r) in results.iter().enumerate() {
        for s in &r.steps {
            #[derive(Serialize)]
            struct Line<'a> {
                episode: usize,
                #[serde(flatten)]
                step: &'a StepRecord,
            }
            serde_json::to_writer(&mut buf, &Line { episode, step: s })?;
            buf.push(b'\n');
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}
