// SPDX-License-Identifier: MIT OR Apache-2.0

//! Span- and sample-level aggregation of token predictions, plus corpus
//! statistics.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{one_vs_rest, ClassScores};
use crate::probe::{argmax4, Probe, NUM_CLASSES};
use crate::trace::{spans_from_labels, ConflictLabel, ObjectiveConflict, Trace};

/// Decision threshold on the span score.
pub const SPAN_THRESHOLD: f64 = 0.5;

/// Max over the span of the probability assigned to `span_label`.
/// The span counts as conflicted when that score is strictly above `threshold`.
pub fn span_max_aggregate(
    token_dists: &[[f64; NUM_CLASSES]],
    span_label: ConflictLabel,
    threshold: f64,
) -> Result<(f64, bool)> {
    if token_dists.is_empty() {
        return Err(Error::InvalidInput("empty span".into()));
    }
    if !span_label.is_conflict() {
        return Err(Error::InvalidInput("span label must be a conflict class".into()));
    }
    let k = span_label.index();
    let score = token_dists.iter().map(|p| p[k]).fold(f64::NEG_INFINITY, f64::max);
    Ok((score, score > threshold))
}

/// Most frequent conflict class among `pred`; `None` when there is none.
/// Ties go to the lowest class code.
pub fn sample_aggregate(pred: &[ConflictLabel]) -> ObjectiveConflict {
    let mut counts = [0usize; NUM_CLASSES];
    for &l in pred {
        counts[l.index()] += 1;
    }
    let mut best = ConflictLabel::NoConflict;
    let mut best_count = 0;
    for class in ConflictLabel::CONFLICTS {
        if counts[class.index()] > best_count {
            best = class;
            best_count = counts[class.index()];
        }
    }
    ObjectiveConflict::from_label(best)
}

/// Probe distribution for every token of `trace` at `layer`.
pub fn predict_dists(trace: &Trace, probe: &Probe, layer: usize) -> Result<Vec<[f64; NUM_CLASSES]>> {
    let pos = trace
        .layer_index(layer)
        .ok_or_else(|| Error::InvalidInput(format!("layer {layer} absent from trace {}", trace.sample_id)))?;
    (0..trace.num_tokens())
        .map(|t| probe.predict_f32(trace.hidden_row(pos, t)))
        .collect()
}

pub fn predict_labels(dists: &[[f64; NUM_CLASSES]]) -> Vec<ConflictLabel> {
    dists
        .iter()
        .map(|p| ConflictLabel::ALL[argmax4(p)])
        .collect()
}

/// Mean hidden state over tokens the probe assigns to a conflict class.
pub fn mean_pool_conflict_repr(trace: &Trace, probe: &Probe, layer: usize) -> Result<Option<Vec<f64>>> {
    let pos = trace
        .layer_index(layer)
        .ok_or_else(|| Error::InvalidInput(format!("layer {layer} absent from trace {}", trace.sample_id)))?;
    let mut sum = vec![0.0; trace.hidden_dim()];
    let mut n = 0usize;
    for t in 0..trace.num_tokens() {
        let row = trace.hidden_row(pos, t);
        if argmax4(&probe.predict_f32(row)?) != 0 {
            for (s, &v) in sum.iter_mut().zip(row) {
                *s += f64::from(v);
            }
            n += 1;
        }
    }
    if n == 0 {
        return Ok(None);
    }
    Ok(Some(sum.into_iter().map(|s| s / n as f64).collect()))
}

/// Where conflict labels and span counts come from.
#[derive(Clone, Copy, Debug)]
pub enum LabelsSource<'a> {
    /// Token labels and spans stored in the traces.
    Annotation,
    /// Predicted labels, one vector per trace. Spans are maximal runs of
    /// one non-zero label.
    Probe(&'a [Vec<ConflictLabel>]),
}

impl LabelsSource<'_> {
    pub fn name(&self) -> &'static str {
        match self {
            LabelsSource::Annotation => "annotation",
            LabelsSource::Probe(_) => "probe",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SubsetProfile {
    pub samples: usize,
    pub avg_cot_length_tokens: f64,
    pub avg_conflict_spans_per_sample: f64,
    pub conflict_token_density_pct: f64,
    pub conflict_sample_ratio_pct: f64,
}

#[derive(Clone, Copy, Default)]
struct Tally {
    samples: usize,
    tokens: usize,
    spans: usize,
    conflict_tokens: usize,
    conflict_samples: usize,
}

impl Tally {
    fn add(&mut self, tokens: usize, spans: usize, conflict_tokens: usize) {
        self.samples += 1;
        self.tokens += tokens;
        self.spans += spans;
        self.conflict_tokens += conflict_tokens;
        self.conflict_samples += usize::from(conflict_tokens > 0);
    }

    fn profile(&self) -> SubsetProfile {
        let per_sample = |x: usize| x as f64 / self.samples as f64;
        SubsetProfile {
            samples: self.samples,
            avg_cot_length_tokens: per_sample(self.tokens),
            avg_conflict_spans_per_sample: per_sample(self.spans),
            conflict_token_density_pct: if self.tokens == 0 {
                0.0
            } else {
                100.0 * self.conflict_tokens as f64 / self.tokens as f64
            },
            conflict_sample_ratio_pct: 100.0 * per_sample(self.conflict_samples),
        }
    }
}

/// Contents of `profile.json`. `breakdown` is keyed by objective-conflict
/// tag plus `"All"`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusProfile {
    pub labels_source: String,
    #[serde(flatten)]
    pub all: SubsetProfile,
    pub breakdown: BTreeMap<String, SubsetProfile>,
}

impl CorpusProfile {
    /// Row titles and per-column values, rounded to two decimals, in the
    /// layout of a printed profile table. Columns are the breakdown keys.
    pub fn table(&self) -> (Vec<String>, Vec<(String, Vec<String>)>) {
        let mut columns: Vec<String> = self.breakdown.keys().filter(|k| *k != "All").cloned().collect();
        columns.push("All".into());
        let col = |f: &dyn Fn(&SubsetProfile) -> String| -> Vec<String> {
            columns.iter().map(|c| f(&self.breakdown[c])).collect()
        };
        let rows = vec![
            ("Samples".to_string(), col(&|p| p.samples.to_string())),
            ("Avg. CoT length (tokens)".to_string(), col(&|p| format!("{:.2}", p.avg_cot_length_tokens))),
            (
                "Avg. conflict spans per sample".to_string(),
                col(&|p| format!("{:.2}", p.avg_conflict_spans_per_sample)),
            ),
            (
                "Conflict token density (%)".to_string(),
                col(&|p| format!("{:.2}", p.conflict_token_density_pct)),
            ),
            (
                "Conflict sample ratio (%)".to_string(),
                col(&|p| format!("{:.2}", p.conflict_sample_ratio_pct)),
            ),
        ];
        (columns, rows)
    }
}

/// Corpus statistics, micro-averaged over tokens.
pub fn dataset_stats(traces: &[Trace], source: LabelsSource<'_>) -> Result<CorpusProfile> {
    if traces.is_empty() {
        return Err(Error::InvalidInput("no traces".into()));
    }
    if let LabelsSource::Probe(pred) = source {
        if pred.len() != traces.len() {
            return Err(Error::DimMismatch(format!(
                "{} predicted label vectors for {} traces",
                pred.len(),
                traces.len()
            )));
        }
    }
    let mut all = Tally::default();
    let mut by_subset: BTreeMap<ObjectiveConflict, Tally> = BTreeMap::new();
    for (i, tr) in traces.iter().enumerate() {
        let (labels, spans) = match source {
            LabelsSource::Annotation => (tr.labels.as_slice(), tr.spans.len()),
            LabelsSource::Probe(pred) => {
                let labels = pred[i].as_slice();
                if labels.len() != tr.num_tokens() {
                    return Err(Error::DimMismatch(format!(
                        "trace {}: {} predicted labels for {} tokens",
                        tr.sample_id,
                        labels.len(),
                        tr.num_tokens()
                    )));
                }
                (labels, spans_from_labels(labels).len())
            }
        };
        let conflict = labels.iter().filter(|l| l.is_conflict()).count();
        all.add(labels.len(), spans, conflict);
        by_subset
            .entry(tr.objective_conflict)
            .or_default()
            .add(labels.len(), spans, conflict);
    }
    let mut breakdown: BTreeMap<String, SubsetProfile> = by_subset
        .into_iter()
        .map(|(k, t)| (k.tag().to_string(), t.profile()))
        .collect();
    breakdown.insert("All".into(), all.profile());
    Ok(CorpusProfile {
        labels_source: source.name().into(),
        all: all.profile(),
        breakdown,
    })
}

/// Default length of background chunks: the mean annotated span length,
/// rounded, at least 1.
pub fn default_background_len(traces: &[Trace]) -> usize {
    let (n, total) = traces
        .iter()
        .flat_map(|t| &t.spans)
        .fold((0usize, 0usize), |(n, s), sp| (n + 1, s + sp.len()));
    if n == 0 {
        return 1;
    }
    ((total as f64 / n as f64).round() as usize).max(1)
}

/// Span-level evaluation units. Every annotated span is one unit carrying
/// its label. With `background_len` set, uncovered stretches are also cut
/// into consecutive chunks of that many tokens labelled `NoConflict` (a
/// shorter remainder is kept). Each unit's score vector holds, per class,
/// the max probability over its tokens.
pub fn span_units(
    traces: &[Trace],
    dists: &[Vec<[f64; NUM_CLASSES]>],
    background_len: Option<usize>,
) -> Result<(Vec<[f64; NUM_CLASSES]>, Vec<ConflictLabel>)> {
    if traces.len() != dists.len() {
        return Err(Error::DimMismatch(format!(
            "{} prediction vectors for {} traces",
            dists.len(),
            traces.len()
        )));
    }
    if background_len == Some(0) {
        return Err(Error::Config("background_len must be >= 1".into()));
    }
    let pool = |ps: &[[f64; NUM_CLASSES]]| {
        let mut m = [f64::NEG_INFINITY; NUM_CLASSES];
        for p in ps {
            for (a, &b) in m.iter_mut().zip(p) {
                *a = a.max(b);
            }
        }
        m
    };
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (tr, d) in traces.iter().zip(dists) {
        if d.len() != tr.num_tokens() {
            return Err(Error::DimMismatch(format!(
                "trace {}: {} distributions for {} tokens",
                tr.sample_id,
                d.len(),
                tr.num_tokens()
            )));
        }
        let mut covered = vec![false; tr.num_tokens()];
        for sp in &tr.spans {
            if sp.is_empty() || sp.end_tok > tr.num_tokens() {
                return Err(Error::InvalidInput(format!(
                    "trace {}: bad span [{}, {})",
                    tr.sample_id, sp.start_tok, sp.end_tok
                )));
            }
            scores.push(pool(&d[sp.start_tok..sp.end_tok]));
            labels.push(sp.label);
            covered[sp.start_tok..sp.end_tok].iter_mut().for_each(|c| *c = true);
        }
        let Some(chunk) = background_len else {
            continue;
        };
        let mut t = 0;
        while t < covered.len() {
            if covered[t] {
                t += 1;
                continue;
            }
            let mut end = t;
            while end < covered.len() && !covered[end] && end - t < chunk {
                end += 1;
            }
            scores.push(pool(&d[t..end]));
            labels.push(ConflictLabel::NoConflict);
            t = end;
        }
    }
    Ok((scores, labels))
}

/// Separability at token, span and sample granularity.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GranularityReport {
    /// Every token, scored by its own distribution.
    pub token: ClassScores,
    /// Only tokens inside annotated spans.
    pub span_only: ClassScores,
    /// One unit per annotated span, scored by the span max.
    pub span_max: ClassScores,
    pub background_len: Option<usize>,
    pub n_spans: usize,
    /// Share of traces with at least one annotated span whose
    /// `sample_aggregate` over predicted labels equals the objective tag.
    pub sample_accuracy: Option<f64>,
}

pub fn evaluate_granularities(
    traces: &[Trace],
    dists: &[Vec<[f64; NUM_CLASSES]>],
    background_len: Option<usize>,
    fpr_target: f64,
) -> Result<GranularityReport> {
    let (units, unit_labels) = span_units(traces, dists, background_len)?;
    let flat: Vec<[f64; NUM_CLASSES]> = dists.iter().flatten().copied().collect();
    let truth: Vec<ConflictLabel> = traces.iter().flat_map(|t| t.labels.iter().copied()).collect();
    let token = one_vs_rest(&flat, &truth, fpr_target)?;
    let span_max = one_vs_rest(&units, &unit_labels, fpr_target)?;

    let mut inside = Vec::new();
    let mut inside_truth = Vec::new();
    for (tr, d) in traces.iter().zip(dists) {
        for sp in &tr.spans {
            inside.extend_from_slice(&d[sp.start_tok..sp.end_tok]);
            inside_truth.extend(std::iter::repeat_n(sp.label, sp.len()));
        }
    }
    let span_only = one_vs_rest(&inside, &inside_truth, fpr_target)?;

    let mut hit = 0usize;
    let mut eligible = 0usize;
    for (tr, d) in traces.iter().zip(dists) {
        if tr.spans.is_empty() {
            continue;
        }
        eligible += 1;
        hit += usize::from(sample_aggregate(&predict_labels(d)) == tr.objective_conflict);
    }
    Ok(GranularityReport {
        token,
        span_only,
        span_max,
        background_len,
        n_spans: unit_labels.iter().filter(|l| l.is_conflict()).count(),
        sample_accuracy: (eligible > 0).then(|| hit as f64 / eligible as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::probe::{Dense, ProbeArch};
    use crate::trace::{Span, Tensor3};
    use ConflictLabel::*;

    fn dist_for(k: usize, p: f64) -> [f64; NUM_CLASSES] {
        let mut d = [(1.0 - p) / 3.0; NUM_CLASSES];
        d[k] = p;
        d
    }

    fn bare_trace(n: usize, spans: Vec<Span>, objective: ObjectiveConflict) -> Trace {
        let labels = crate::trace::project_span_labels(n, &spans).unwrap();
        Trace {
            sample_id: "t".into(),
            model_id: "m".into(),
            objective_conflict: objective,
            tokens: vec!["x".into(); n],
            hidden: Tensor3::zeros([1, n, 2]),
            layer_ids: vec![0],
            labels,
            spans,
            head_norms: None,
        }
    }

    #[test]
    fn span_max_examples() {
        let ps: Vec<_> = [0.2, 0.7, 0.4].iter().map(|&p| dist_for(1, p)).collect();
        let (s, c) = span_max_aggregate(&ps, VisionPrior, SPAN_THRESHOLD).unwrap();
        assert_eq!(s, 0.7);
        assert!(c);

        let ps = [dist_for(1, 0.5), dist_for(1, 0.5)];
        assert_eq!(span_max_aggregate(&ps, VisionPrior, 0.5).unwrap(), (0.5, false));
        assert_eq!(span_max_aggregate(&[dist_for(3, 0.9)], VisionText, 0.5).unwrap(), (0.9, true));
        assert!(span_max_aggregate(&[], VisionText, 0.5).is_err());
        assert!(span_max_aggregate(&ps, NoConflict, 0.5).is_err());
    }

    #[test]
    fn sample_aggregate_examples() {
        let mut pred = vec![VisionPrior; 3];
        pred.push(PriorText);
        pred.push(NoConflict);
        assert_eq!(sample_aggregate(&pred), ObjectiveConflict::VisionPrior);
        assert_eq!(sample_aggregate(&[NoConflict; 5]), ObjectiveConflict::None);
        assert_eq!(sample_aggregate(&[]), ObjectiveConflict::None);
        assert_eq!(
            sample_aggregate(&[PriorText, VisionPrior, PriorText, VisionPrior]),
            ObjectiveConflict::VisionPrior
        );
        assert_eq!(sample_aggregate(&[VisionText, PriorText]), ObjectiveConflict::PriorText);
    }

    /// A linear probe that flags a token as VP iff its first coordinate is positive.
    fn sign_probe() -> Probe {
        let mut probe = Probe::zeros(ProbeArch::linear(2)).unwrap();
        let mut w = Dense::zeros(NUM_CLASSES, 2);
        w.weight[[1, 0]] = 50.0;
        w.bias[0] = 1.0;
        probe.layers = vec![w];
        probe
    }

    #[test]
    fn mean_pool_examples() {
        let probe = sign_probe();
        let mut tr = bare_trace(3, vec![], ObjectiveConflict::None);
        tr.hidden.row_mut(0, 0).copy_from_slice(&[-1.0, 5.0]);
        tr.hidden.row_mut(0, 1).copy_from_slice(&[1.0, 2.0]);
        tr.hidden.row_mut(0, 2).copy_from_slice(&[-2.0, 0.0]);
        assert_eq!(mean_pool_conflict_repr(&tr, &probe, 0).unwrap(), Some(vec![1.0, 2.0]));

        tr.hidden.row_mut(0, 2).copy_from_slice(&[3.0, 4.0]);
        assert_eq!(mean_pool_conflict_repr(&tr, &probe, 0).unwrap(), Some(vec![2.0, 3.0]));

        tr.hidden.data_mut().iter_mut().for_each(|v| *v = -1.0);
        assert_eq!(mean_pool_conflict_repr(&tr, &probe, 0).unwrap(), None);
    }

    #[test]
    fn stats_example() {
        let a = bare_trace(10, vec![Span::tokens(3, 5, VisionPrior)], ObjectiveConflict::VisionPrior);
        let b = bare_trace(10, vec![], ObjectiveConflict::None);
        let p = dataset_stats(&[a, b.clone()], LabelsSource::Annotation).unwrap();
        assert_eq!(p.all.samples, 2);
        assert!((p.all.conflict_token_density_pct - 10.0).abs() < 1e-12);
        assert!((p.all.conflict_sample_ratio_pct - 50.0).abs() < 1e-12);
        assert!((p.all.avg_conflict_spans_per_sample - 0.5).abs() < 1e-12);
        assert!((p.all.avg_cot_length_tokens - 10.0).abs() < 1e-12);
        assert_eq!(p.breakdown["VP"].conflict_token_density_pct, 20.0);
        assert_eq!(p.breakdown["NONE"].conflict_sample_ratio_pct, 0.0);
        assert_eq!(p.breakdown["All"], p.all);

        let clean = dataset_stats(&[b.clone(), b], LabelsSource::Annotation).unwrap();
        assert_eq!(clean.all.conflict_token_density_pct, 0.0);
        assert_eq!(clean.all.conflict_sample_ratio_pct, 0.0);
    }

    #[test]
    fn probe_mode_counts_constant_runs() {
        let tr = bare_trace(6, vec![], ObjectiveConflict::None);
        let pred = vec![vec![VisionPrior, VisionPrior, PriorText, NoConflict, PriorText, PriorText]];
        let p = dataset_stats(&[tr], LabelsSource::Probe(&pred)).unwrap();
        assert_eq!(p.all.avg_conflict_spans_per_sample, 3.0);
        assert!((p.all.conflict_token_density_pct - 500.0 / 6.0).abs() < 1e-9);
        assert_eq!(p.labels_source, "probe");
        assert!(dataset_stats(&[], LabelsSource::Annotation).is_err());
    }

    #[test]
    fn table_rows_follow_profile_layout() {
        let a = bare_trace(10, vec![Span::tokens(3, 5, VisionPrior)], ObjectiveConflict::VisionPrior);
        let (cols, rows) = dataset_stats(&[a], LabelsSource::Annotation).unwrap().table();
        assert_eq!(cols, vec!["VP", "All"]);
        assert_eq!(rows[2].0, "Avg. conflict spans per sample");
        assert_eq!(rows[3].1, vec!["20.00", "20.00"]);
    }

    #[test]
    fn span_units_cover_spans_and_background() {
        let tr = bare_trace(
            7,
            vec![Span::tokens(1, 3, VisionPrior), Span::tokens(5, 6, VisionText)],
            ObjectiveConflict::VisionPrior,
        );
        let d: Vec<_> = (0..7).map(|t| dist_for(1, 0.1 * t as f64)).collect();
        let (units, labels) = span_units(&[tr.clone()], &[d.clone()], Some(2)).unwrap();
        // spans [1,3) [5,6), background [0,1) [3,5) [6,7)
        assert_eq!(labels, vec![VisionPrior, VisionText, NoConflict, NoConflict, NoConflict]);
        assert!((units[0][1] - 0.2).abs() < 1e-12);
        assert!((units[3][1] - 0.4).abs() < 1e-12);
        assert!((units[4][1] - 0.6).abs() < 1e-12);

        let (units, labels) = span_units(&[tr], &[d], None).unwrap();
        assert_eq!(labels, vec![VisionPrior, VisionText]);
        assert_eq!(units.len(), 2);
    }
}
