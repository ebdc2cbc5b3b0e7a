// SPDX-License-Identifier: MIT OR Apache-2.0

//! Inference-time interventions: visual contrastive decoding (VCD),
//! representation steering, and probe-guided top-k control, plus a greedy
//! decoding harness that composes them over any [`GenerativeModel`].
//!
//! All three operators can be read as additive perturbations of the
//! next-token logits; the harness records base and adjusted scores for
//! every step so the perturbation can be inspected afterwards.

mod decode;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::Probe;
use crate::trace::{ConflictLabel, Trace};
use crate::util::{dot, norm};

pub use decode::{
    greedy_decode, run_controlled_decode, write_decode_log, CandidateRecord, DecodeConfig,
    DecodeResult, StepRecord,
};

/// Output of one forward pass at the last position of a prefix.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub logits: Vec<f64>,
    /// Hidden state at the monitored layer, after any hook.
    pub hidden: Vec<f64>,
    /// Whether the hook modified the hidden state at the last position.
    pub steered: bool,
}

/// Edits hidden states during a forward pass. Called at every position for
/// every layer the model exposes; returns whether `h` was changed.
pub trait HiddenHook {
    fn apply(&self, layer: usize, h: &mut [f64]) -> bool;
}

/// Decoding surface the harness needs from a model.
pub trait GenerativeModel {
    fn vocab_size(&self) -> usize;

    /// Logits for the token after `prefix` and the hidden state at `layer`
    /// for the last position. `grounded = false` drops the visual context.
    fn next(
        &self,
        prefix: &[usize],
        grounded: bool,
        layer: usize,
        hook: Option<&dyn HiddenHook>,
    ) -> Result<StepOutput>;

    /// State after appending `candidate`; must equal `next(prefix ++ [candidate])`.
    fn lookahead(
        &self,
        prefix: &[usize],
        candidate: usize,
        grounded: bool,
        layer: usize,
        hook: Option<&dyn HiddenHook>,
    ) -> Result<StepOutput> {
        let mut extended = Vec::with_capacity(prefix.len() + 1);
        extended.extend_from_slice(prefix);
        extended.push(candidate);
        self.next(&extended, grounded, layer, hook)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SteeringMode {
    Unconditional,
    /// Inject only where the probe's conflict mass exceeds `delta`.
    Conditional,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SteeringSpec {
    pub layer: usize,
    /// Unit-norm direction.
    pub direction: Vec<f64>,
    pub lambda: f64,
    pub mode: SteeringMode,
    pub delta: f64,
}

impl SteeringSpec {
    pub const DEFAULT_LAMBDA: f64 = 1.0;
    pub const DEFAULT_DELTA: f64 = 0.5;

    pub fn validate(&self) -> Result<()> {
        let n = norm(&self.direction);
        if (n - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("steering direction has norm {n}, expected 1")));
        }
        if !self.lambda.is_finite() || !self.delta.is_finite() {
            return Err(Error::Config("lambda and delta must be finite".into()));
        }
        Ok(())
    }

    pub fn with_lambda(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    pub fn with_mode(mut self, mode: SteeringMode) -> Self {
        self.mode = mode;
        self
    }
}

/// Token population for building a steering vector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LabelSelector {
    Label(ConflictLabel),
    AnyConflict,
}

impl LabelSelector {
    pub fn matches(self, label: ConflictLabel) -> bool {
        match self {
            LabelSelector::Label(l) => l == label,
            LabelSelector::AnyConflict => label.is_conflict(),
        }
    }
}

impl std::str::FromStr for LabelSelector {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "any" | "any-conflict" | "conflict" => Ok(LabelSelector::AnyConflict),
            other => Ok(LabelSelector::Label(other.parse()?)),
        }
    }
}

/// Unit vector from the reference mean toward the target mean of the
/// hidden states at `layer`.
pub fn build_steering_vector(
    traces: &[Trace],
    layer: usize,
    target: LabelSelector,
    reference: LabelSelector,
) -> Result<SteeringSpec> {
    let d = traces
        .first()
        .ok_or_else(|| Error::InvalidInput("no traces".into()))?
        .hidden_dim();
    let mut sums = [vec![0.0; d], vec![0.0; d]];
    let mut counts = [0usize; 2];
    for tr in traces {
        let pos = tr
            .layer_index(layer)
            .ok_or_else(|| Error::InvalidInput(format!("layer {layer} absent from trace {}", tr.sample_id)))?;
        if tr.hidden_dim() != d {
            return Err(Error::DimMismatch(format!("trace {} has hidden_dim {}", tr.sample_id, tr.hidden_dim())));
        }
        for (t, &label) in tr.labels.iter().enumerate() {
            for (k, sel) in [target, reference].into_iter().enumerate() {
                if sel.matches(label) {
                    counts[k] += 1;
                    for (s, &v) in sums[k].iter_mut().zip(tr.hidden_row(pos, t)) {
                        *s += f64::from(v);
                    }
                }
            }
        }
    }
    for (k, name) in ["target", "reference"].into_iter().enumerate() {
        if counts[k] == 0 {
            return Err(Error::EmptySet(format!("{name} selector matched no tokens")));
        }
    }
    let diff: Vec<f64> = sums[0]
        .iter()
        .zip(&sums[1])
        .map(|(a, b)| a / counts[0] as f64 - b / counts[1] as f64)
        .collect();
    let n = norm(&diff);
    if n < 1e-12 {
        return Err(Error::ZeroVector);
    }
    Ok(SteeringSpec {
        layer,
        direction: diff.into_iter().map(|v| v / n).collect(),
        lambda: SteeringSpec::DEFAULT_LAMBDA,
        mode: SteeringMode::Unconditional,
        delta: SteeringSpec::DEFAULT_DELTA,
    })
}

/// `h + lambda v`, gated on `q > delta` in conditional mode.
pub fn apply_steering(h: &[f64], spec: &SteeringSpec, conflict_mass: Option<f64>) -> Result<Vec<f64>> {
    if h.len() != spec.direction.len() {
        return Err(Error::DimMismatch(format!(
            "hidden state has {} dims, steering direction {}",
            h.len(),
            spec.direction.len()
        )));
    }
    let open = match spec.mode {
        SteeringMode::Unconditional => true,
        SteeringMode::Conditional => {
            let q = conflict_mass.ok_or_else(|| {
                Error::InvalidInput("conditional steering needs the conflict mass".into())
            })?;
            q > spec.delta
        }
    };
    Ok(if open {
        h.iter().zip(&spec.direction).map(|(a, v)| a + spec.lambda * v).collect()
    } else {
        h.to_vec()
    })
}

/// Hook that steers one layer. Conditional mode asks `probe` for the
/// conflict mass of the unsteered state.
pub struct SteeringHook<'a> {
    pub spec: &'a SteeringSpec,
    pub probe: Option<&'a Probe>,
}

impl HiddenHook for SteeringHook<'_> {
    fn apply(&self, layer: usize, h: &mut [f64]) -> bool {
        if layer != self.spec.layer || h.len() != self.spec.direction.len() {
            return false;
        }
        if self.spec.mode == SteeringMode::Conditional {
            let Some(probe) = self.probe else { return false };
            let Ok(p) = probe.predict(h) else { return false };
            if 1.0 - p[0] <= self.spec.delta {
                return false;
            }
        }
        for (a, v) in h.iter_mut().zip(&self.spec.direction) {
            *a += self.spec.lambda * v;
        }
        true
    }
}

/// `l_g + beta (l_g - l_u)`.
pub fn vcd_adjust(grounded: &[f64], ungrounded: &[f64], beta: f64) -> Result<Vec<f64>> {
    if grounded.len() != ungrounded.len() {
        return Err(Error::Shape(format!(
            "grounded logits have {} entries, ungrounded {}",
            grounded.len(),
            ungrounded.len()
        )));
    }
    if !(beta >= 0.0) {
        return Err(Error::InvalidInput(format!("beta {beta} must be non-negative")));
    }
    Ok(grounded
        .iter()
        .zip(ungrounded)
        .map(|(g, u)| g + beta * (g - u))
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControlRule {
    /// `p(w) exp(alpha P0(w))`, renormalized over the candidates.
    Reweight,
    /// `(1 - alpha) log p(w) + alpha P0(w)`.
    ArgmaxScore,
}

impl std::str::FromStr for ControlRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "reweight" => Ok(ControlRule::Reweight),
            "argmax_score" | "score" => Ok(ControlRule::ArgmaxScore),
            other => Err(Error::InvalidInput(format!("unknown control rule {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlConfig {
    pub alpha: f64,
    pub top_k: usize,
    pub rule: ControlRule,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            top_k: 5,
            rule: ControlRule::ArgmaxScore,
        }
    }
}

impl ControlConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Config("top_k must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        Ok(())
    }
}

fn check_candidates(a: usize, b: usize) -> Result<()> {
    if a == 0 {
        return Err(Error::InvalidInput("empty candidate set".into()));
    }
    if a != b {
        return Err(Error::Shape(format!("{a} candidates but {b} probe readings")));
    }
    Ok(())
}

/// Multiply candidate probabilities by `exp(alpha P0)` and renormalize.
pub fn probe_guided_reweight(base_probs: &[f64], p_no_conflict: &[f64], alpha: f64) -> Result<Vec<f64>> {
    check_candidates(base_probs.len(), p_no_conflict.len())?;
    if base_probs.iter().any(|&p| !(p > 0.0)) {
        return Err(Error::InvalidInput("candidate probabilities must be positive".into()));
    }
    let w: Vec<f64> = base_probs
        .iter()
        .zip(p_no_conflict)
        .map(|(p, q)| p * (alpha * q).exp())
        .collect();
    let z: f64 = w.iter().sum();
    Ok(w.into_iter().map(|v| v / z).collect())
}

/// `(1 - alpha) log p + alpha P0`.
pub fn control_score(log_prob: f64, p_no_conflict: f64, alpha: f64) -> f64 {
    (1.0 - alpha) * log_prob + alpha * p_no_conflict
}

/// Index of the candidate with the best score; ties go to the higher
/// log-probability, then to the lower token id.
pub fn probe_guided_select(
    token_ids: &[usize],
    log_probs: &[f64],
    p_no_conflict: &[f64],
    alpha: f64,
) -> Result<usize> {
    check_candidates(log_probs.len(), p_no_conflict.len())?;
    check_candidates(log_probs.len(), token_ids.len())?;
    let scores: Vec<f64> = log_probs
        .iter()
        .zip(p_no_conflict)
        .map(|(&lp, &q)| control_score(lp, q, alpha))
        .collect();
    Ok(pick_best(token_ids, &scores, log_probs))
}

/// Highest `primary`; ties by higher `secondary`, then lower token id.
fn pick_best(token_ids: &[usize], primary: &[f64], secondary: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..primary.len() {
        let better = primary[i]
            .total_cmp(&primary[best])
            .then(secondary[i].total_cmp(&secondary[best]))
            .then(token_ids[best].cmp(&token_ids[i]));
        if better.is_gt() {
            best = i;
        }
    }
    best
}

/// Cosine similarity.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    dot(a, b) / (norm(a) * norm(b))
}
