// SPDX-License-Identifier: MIT OR Apache-2.0

//! Trace data model.
//!
//! A [`Trace`] is one reasoning trajectory: its tokens, the hidden states
//! captured at a set of layers, dense per-token conflict labels, and the
//! annotated spans those labels were projected from. Objective conflict
//! (an input-level property) is stored as metadata; effective conflict
//! (a per-step state) lives in `labels`.

mod io;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use io::{load_trace, load_traces, save_trace, trace_dirs, HEADS_MAGIC, HIDDEN_MAGIC};

/// Effective conflict state of a token. Integer codes are stable on disk.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConflictLabel {
    /// No knowledge conflict is active.
    #[serde(rename = "NONE")]
    NoConflict = 0,
    /// Vision vs parametric prior.
    #[serde(rename = "VP")]
    VisionPrior = 1,
    /// Parametric prior vs text.
    #[serde(rename = "PT")]
    PriorText = 2,
    /// Vision vs text.
    #[serde(rename = "VT")]
    VisionText = 3,
}

impl ConflictLabel {
    /// All four labels in code order.
    pub const ALL: [ConflictLabel; 4] = [
        ConflictLabel::NoConflict,
        ConflictLabel::VisionPrior,
        ConflictLabel::PriorText,
        ConflictLabel::VisionText,
    ];

    /// The three conflict classes in code order.
    pub const CONFLICTS: [ConflictLabel; 3] = [
        ConflictLabel::VisionPrior,
        ConflictLabel::PriorText,
        ConflictLabel::VisionText,
    ];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::InvalidInput(format!("label code {code} out of range 0..=3")))
    }

    pub fn is_conflict(self) -> bool {
        self != ConflictLabel::NoConflict
    }

    /// Short tag used in JSON and reports.
    pub fn tag(self) -> &'static str {
        match self {
            ConflictLabel::NoConflict => "NONE",
            ConflictLabel::VisionPrior => "VP",
            ConflictLabel::PriorText => "PT",
            ConflictLabel::VisionText => "VT",
        }
    }
}

impl fmt::Display for ConflictLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for ConflictLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "NONE" | "NOCONFLICT" | "NO-CONFLICT" | "0" => Ok(ConflictLabel::NoConflict),
            "VP" | "1" => Ok(ConflictLabel::VisionPrior),
            "PT" | "2" => Ok(ConflictLabel::PriorText),
            "VT" | "3" => Ok(ConflictLabel::VisionText),
            other => Err(Error::InvalidInput(format!("unknown conflict label {other:?}"))),
        }
    }
}

/// Input-level conflict tag of a trace (or the result of sample aggregation).
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ObjectiveConflict {
    #[default]
    #[serde(rename = "NONE")]
    None,
    #[serde(rename = "VP")]
    VisionPrior,
    #[serde(rename = "PT")]
    PriorText,
    #[serde(rename = "VT")]
    VisionText,
}

impl ObjectiveConflict {
    pub const ALL: [ObjectiveConflict; 4] = [
        ObjectiveConflict::None,
        ObjectiveConflict::VisionPrior,
        ObjectiveConflict::PriorText,
        ObjectiveConflict::VisionText,
    ];

    pub fn from_label(label: ConflictLabel) -> Self {
        match label {
            ConflictLabel::NoConflict => ObjectiveConflict::None,
            ConflictLabel::VisionPrior => ObjectiveConflict::VisionPrior,
            ConflictLabel::PriorText => ObjectiveConflict::PriorText,
            ConflictLabel::VisionText => ObjectiveConflict::VisionText,
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            ObjectiveConflict::None => "NONE",
            ObjectiveConflict::VisionPrior => "VP",
            ObjectiveConflict::PriorText => "PT",
            ObjectiveConflict::VisionText => "VT",
        }
    }
}

impl fmt::Display for ObjectiveConflict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

/// A contiguous annotated conflict segment. Token range is half-open.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub start_tok: usize,
    pub end_tok: usize,
    pub start_char: Option<usize>,
    pub end_char: Option<usize>,
    pub label: ConflictLabel,
}

impl Span {
    /// Span without character offsets.
    pub fn tokens(start_tok: usize, end_tok: usize, label: ConflictLabel) -> Self {
        Self {
            start_tok,
            end_tok,
            start_char: None,
            end_char: None,
            label,
        }
    }

    pub fn len(&self) -> usize {
        self.end_tok.saturating_sub(self.start_tok)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Dense row-major 3-D tensor of `f32`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor3 {
    dims: [usize; 3],
    data: Vec<f32>,
}

impl Tensor3 {
    pub fn zeros(dims: [usize; 3]) -> Self {
        Self {
            dims,
            data: vec![0.0; dims[0] * dims[1] * dims[2]],
        }
    }

    pub fn from_vec(dims: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let expected = dims[0] * dims[1] * dims[2];
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "tensor {dims:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    fn offset(&self, i: usize, j: usize) -> usize {
        (i * self.dims[1] + j) * self.dims[2]
    }

    /// Innermost vector at `(i, j)`.
    pub fn row(&self, i: usize, j: usize) -> &[f32] {
        let start = self.offset(i, j);
        &self.data[start..start + self.dims[2]]
    }

    pub fn row_mut(&mut self, i: usize, j: usize) -> &mut [f32] {
        let start = self.offset(i, j);
        let width = self.dims[2];
        &mut self.data[start..start + width]
    }

    pub fn get(&self, i: usize, j: usize, k: usize) -> f32 {
        self.data[self.offset(i, j) + k]
    }
}

/// One reasoning trajectory with cached internals.
#[derive(Clone, Debug, PartialEq)]
pub struct Trace {
    pub sample_id: String,
    pub model_id: String,
    pub objective_conflict: ObjectiveConflict,
    pub tokens: Vec<String>,
    /// `[num_layers, num_tokens, hidden_dim]`.
    pub hidden: Tensor3,
    pub layer_ids: Vec<usize>,
    pub labels: Vec<ConflictLabel>,
    pub spans: Vec<Span>,
    /// `[num_layers, num_tokens, num_heads]` attention-head output norms.
    pub head_norms: Option<Tensor3>,
}

impl Trace {
    pub fn num_layers(&self) -> usize {
        self.hidden.dims()[0]
    }

    pub fn num_tokens(&self) -> usize {
        self.hidden.dims()[1]
    }

    pub fn hidden_dim(&self) -> usize {
        self.hidden.dims()[2]
    }

    pub fn num_heads(&self) -> Option<usize> {
        self.head_norms.as_ref().map(|h| h.dims()[2])
    }

    /// Position of `layer_id` within `layer_ids`.
    pub fn layer_index(&self, layer_id: usize) -> Option<usize> {
        self.layer_ids.binary_search(&layer_id).ok()
    }

    /// Hidden state of token `t` at stored layer position `layer_pos`.
    pub fn hidden_row(&self, layer_pos: usize, t: usize) -> &[f32] {
        self.hidden.row(layer_pos, t)
    }

    /// Hidden state of token `t` at layer `layer_id`, widened to `f64`.
    pub fn hidden_at(&self, layer_id: usize, t: usize) -> Result<Vec<f64>> {
        let pos = self
            .layer_index(layer_id)
            .ok_or_else(|| Error::InvalidInput(format!("layer {layer_id} not stored in trace {}", self.sample_id)))?;
        Ok(self.hidden.row(pos, t).iter().map(|&v| f64::from(v)).collect())
    }
}

/// Check every trace invariant. Returns an empty list iff the trace is valid.
pub fn validate_trace(trace: &Trace) -> Vec<String> {
    let mut violations = Vec::new();
    let [num_layers, num_tokens, hidden_dim] = trace.hidden.dims();

    if num_layers == 0 || num_tokens == 0 || hidden_dim == 0 {
        violations.push(format!(
            "hidden: zero dimension in [{num_layers}, {num_tokens}, {hidden_dim}]"
        ));
    }
    if trace.hidden.data().len() != num_layers * num_tokens * hidden_dim {
        violations.push("hidden: payload length disagrees with dims".to_string());
    }
    if trace.hidden.data().iter().any(|v| !v.is_finite()) {
        violations.push("hidden: non-finite value".to_string());
    }
    if trace.layer_ids.len() != num_layers {
        violations.push(format!(
            "layer_ids: length {} but hidden has {num_layers} layers",
            trace.layer_ids.len()
        ));
    }
    if trace.layer_ids.windows(2).any(|w| w[0] >= w[1]) {
        violations.push("layer_ids: not strictly increasing".to_string());
    }
    if trace.tokens.len() != num_tokens {
        violations.push(format!(
            "tokens: length {} but hidden has {num_tokens} tokens",
            trace.tokens.len()
        ));
    }
    if trace.labels.len() != num_tokens {
        violations.push(format!(
            "labels: length {} but hidden has {num_tokens} tokens",
            trace.labels.len()
        ));
    }

    if let Some(heads) = &trace.head_norms {
        let [hl, ht, ha] = heads.dims();
        if hl != num_layers || ht != num_tokens {
            violations.push(format!(
                "head_norms: dims [{hl}, {ht}, {ha}] disagree with hidden [{num_layers}, {num_tokens}, _]"
            ));
        }
        if ha == 0 {
            violations.push("head_norms: zero heads".to_string());
        }
        if heads.data().iter().any(|v| !v.is_finite() || *v < 0.0) {
            violations.push("head_norms: negative or non-finite value".to_string());
        }
    }

    let mut spans_ok = true;
    for (i, span) in trace.spans.iter().enumerate() {
        if span.end_tok > num_tokens {
            violations.push(format!("span {i}: end_tok out of range"));
            spans_ok = false;
        }
        if span.start_tok >= span.end_tok {
            violations.push(format!("span {i}: empty token range"));
            spans_ok = false;
        }
        match (span.start_char, span.end_char) {
            (Some(s), Some(e)) if s >= e => {
                violations.push(format!("span {i}: start_char not before end_char"));
            }
            (Some(_), None) | (None, Some(_)) => {
                violations.push(format!("span {i}: only one character offset present"));
            }
            _ => {}
        }
        if !span.label.is_conflict() {
            violations.push(format!("span {i}: label must not be NoConflict"));
        }
    }

    if spans_ok && trace.labels.len() == num_tokens {
        match project_span_labels(num_tokens, &trace.spans) {
            Ok(projected) => {
                if let Some(t) = projected.iter().zip(&trace.labels).position(|(a, b)| a != b) {
                    violations.push(format!("labels: disagree with span projection at token {t}"));
                }
            }
            Err(e) => violations.push(format!("spans: {e}")),
        }
    }

    violations
}

/// Project span labels onto tokens; tokens outside every span get `NoConflict`.
pub fn project_span_labels(num_tokens: usize, spans: &[Span]) -> Result<Vec<ConflictLabel>> {
    let mut order: Vec<usize> = (0..spans.len()).collect();
    order.sort_by_key(|&i| (spans[i].start_tok, spans[i].end_tok));
    for pair in order.windows(2) {
        let (a, b) = (&spans[pair[0]], &spans[pair[1]]);
        if b.start_tok < a.end_tok {
            let (first, second) = (pair[0].min(pair[1]), pair[0].max(pair[1]));
            return Err(Error::SpanOverlap { first, second });
        }
    }

    let mut labels = vec![ConflictLabel::NoConflict; num_tokens];
    for (i, span) in spans.iter().enumerate() {
        if span.end_tok > num_tokens || span.start_tok > span.end_tok {
            return Err(Error::InvalidInput(format!(
                "span {i}: token range {}..{} outside 0..{num_tokens}",
                span.start_tok, span.end_tok
            )));
        }
        labels[span.start_tok..span.end_tok].fill(span.label);
    }
    Ok(labels)
}

/// Maximal runs of identical non-zero labels, as spans without character offsets.
pub fn spans_from_labels(labels: &[ConflictLabel]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut t = 0;
    while t < labels.len() {
        let label = labels[t];
        let start = t;
        while t < labels.len() && labels[t] == label {
            t += 1;
        }
        if label.is_conflict() {
            spans.push(Span::tokens(start, t, label));
        }
    }
    spans
}
