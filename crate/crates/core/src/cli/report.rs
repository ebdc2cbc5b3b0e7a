// SPDX-License-Identifier: MIT OR Apache-2.0

//! Diagnosis records and the standalone HTML report.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::aggregate::{
    evaluate_granularities, predict_dists, predict_labels, sample_aggregate, span_max_aggregate, GranularityReport,
};
use crate::error::{Error, Result};
use crate::metrics::{token_metrics, TokenMetricsReport};
use crate::probe::{Probe, ProbeKind, NUM_CLASSES};
use crate::trace::{ConflictLabel, ObjectiveConflict, Trace};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpanDiagnosis {
    pub start_tok: usize,
    pub end_tok: usize,
    pub label: ConflictLabel,
    /// Span-Max score for the annotated class.
    pub max_score: f64,
    pub detected: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceDiagnosis {
    pub sample_id: String,
    pub objective_conflict: ObjectiveConflict,
    pub predicted_objective: ObjectiveConflict,
    /// Annotated per-token labels.
    pub labels: Vec<ConflictLabel>,
    /// Argmax of each distribution.
    pub predicted: Vec<ConflictLabel>,
    pub dists: Vec<[f64; NUM_CLASSES]>,
    pub spans: Vec<SpanDiagnosis>,
    pub metrics: TokenMetricsReport,
}

/// Contents of `diagnosis.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Diagnosis {
    pub layer: usize,
    pub arch: ProbeKind,
    pub span_threshold: f64,
    pub overall: TokenMetricsReport,
    pub granularity: GranularityReport,
    pub traces: Vec<TraceDiagnosis>,
}

/// Run `probe` over every trace at `layer`.
pub fn diagnose(
    traces: &[Trace],
    probe: &Probe,
    layer: usize,
    threshold: f64,
    fpr_target: f64,
    background_len: Option<usize>,
) -> Result<Diagnosis> {
    if !(0.0..=1.0).contains(&fpr_target) {
        return Err(Error::Config(format!("fpr {fpr_target} outside [0, 1]")));
    }
    let all_dists = traces
        .iter()
        .map(|t| predict_dists(t, probe, layer))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Vec::with_capacity(traces.len());
    for (tr, dists) in traces.iter().zip(&all_dists) {
        let predicted = predict_labels(dists);
        let spans = tr
            .spans
            .iter()
            .map(|sp| {
                let (max_score, detected) = span_max_aggregate(&dists[sp.start_tok..sp.end_tok], sp.label, threshold)?;
                Ok(SpanDiagnosis {
                    start_tok: sp.start_tok,
                    end_tok: sp.end_tok,
                    label: sp.label,
                    max_score,
                    detected,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(TraceDiagnosis {
            sample_id: tr.sample_id.clone(),
            objective_conflict: tr.objective_conflict,
            predicted_objective: sample_aggregate(&predicted),
            labels: tr.labels.clone(),
            predicted,
            dists: dists.clone(),
            spans,
            metrics: token_metrics(dists)?,
        });
    }
    let flat: Vec<[f64; NUM_CLASSES]> = all_dists.iter().flatten().copied().collect();
    Ok(Diagnosis {
        layer,
        arch: probe.arch.kind,
        span_threshold: threshold,
        overall: token_metrics(&flat)?,
        granularity: evaluate_granularities(traces, &all_dists, background_len, fpr_target)?,
        traces: out,
    })
}

/// Display order and colors of the token legend.
const LEGEND: [(ConflictLabel, &str, &str); 4] = [
    (ConflictLabel::NoConflict, "Fact", "#b9e4b4"),
    (ConflictLabel::VisionPrior, "VP", "#f4a9a8"),
    (ConflictLabel::VisionText, "VT", "#f7e08a"),
    (ConflictLabel::PriorText, "PT", "#c9c9c9"),
];

fn class_name(l: ConflictLabel) -> &'static str {
    match l {
        ConflictLabel::NoConflict => "fact",
        ConflictLabel::VisionPrior => "vp",
        ConflictLabel::PriorText => "pt",
        ConflictLabel::VisionText => "vt",
    }
}

fn escape(s: &str) -> String {
    let mut out = String::with_capacity(s.len());
    for c in s.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            '\'' => out.push_str("&#39;"),
            _ => out.push(c),
        }
    }
    out
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

fn check_alignment(diag: &Diagnosis, traces: &[Trace]) -> Result<()> {
    if diag.traces.len() != traces.len() {
        return Err(Error::DimMismatch(format!(
            "diagnosis covers {} traces, corpus has {}",
            diag.traces.len(),
            traces.len()
        )));
    }
    for (d, t) in diag.traces.iter().zip(traces) {
        if d.sample_id != t.sample_id {
            return Err(Error::DimMismatch(format!(
                "diagnosis entry {:?} does not match trace {:?}",
                d.sample_id, t.sample_id
            )));
        }
        let n = t.tokens.len();
        if d.dists.len() != n || d.predicted.len() != n || d.labels.len() != n {
            return Err(Error::DimMismatch(format!(
                "trace {}: {} tokens, diagnosis has {} distributions",
                t.sample_id,
                n,
                d.dists.len()
            )));
        }
    }
    Ok(())
}

/// Standalone HTML page. Only tokens inside annotated spans are highlighted,
/// with the color of their predicted class; everything else is plain text.
pub fn render_report(diag: &Diagnosis, traces: &[Trace]) -> Result<String> {
    check_alignment(diag, traces)?;
    let mut h = String::new();
    h.push_str("<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n");
    h.push_str("<title>Conflict probe report</title>\n<style>\n");
    h.push_str("body{font-family:sans-serif;margin:2em;max-width:60em;line-height:1.6}\n");
    h.push_str("table{border-collapse:collapse;margin:0.5em 0}\n");
    h.push_str("td,th{border:1px solid #999;padding:2px 8px;text-align:center}\n");
    h.push_str(".tok{padding:1px 2px;border-radius:2px}\n");
    for (label, _, color) in LEGEND {
        let _ = writeln!(h, ".{}{{background:{color}}}", class_name(label));
    }
    h.push_str("</style>\n</head>\n<body>\n<h1>Conflict probe report</h1>\n");
    let _ = writeln!(
        h,
        "<p>Layer {} &middot; {} probe &middot; {} traces</p>",
        diag.layer,
        match diag.arch {
            ProbeKind::Linear => "linear",
            ProbeKind::Mlp => "MLP",
        },
        diag.traces.len()
    );
    h.push_str("<table class=\"legend\"><tr><td>Token prediction label</td>");
    for (label, name, _) in LEGEND {
        let _ = write!(h, "<td class=\"tok {}\">{name}</td>", class_name(label));
    }
    h.push_str("</tr></table>\n");

    for (d, tr) in diag.traces.iter().zip(traces) {
        render_trace(&mut h, d, tr);
    }
    h.push_str("</body>\n</html>\n");
    Ok(h)
}

fn render_trace(h: &mut String, d: &TraceDiagnosis, tr: &Trace) {
    let _ = writeln!(
        h,
        "<section>\n<h2>{}</h2>\n<p>Objective conflict: {} &middot; sample aggregate: {}</p>",
        escape(&d.sample_id),
        d.objective_conflict,
        d.predicted_objective
    );
    let mut in_span = vec![false; tr.tokens.len()];
    for sp in &tr.spans {
        in_span[sp.start_tok..sp.end_tok.min(tr.tokens.len())].fill(true);
    }
    h.push_str("<p class=\"cot\">");
    for (t, tok) in tr.tokens.iter().enumerate() {
        if t > 0 {
            h.push(' ');
        }
        if in_span[t] {
            let p = &d.dists[t];
            let _ = write!(
                h,
                "<span class=\"tok {}\" title=\"Fact {:.3} VP {:.3} PT {:.3} VT {:.3}\">{}</span>",
                class_name(d.predicted[t]),
                p[0],
                p[1],
                p[2],
                p[3],
                escape(tok)
            );
        } else {
            h.push_str(&escape(tok));
        }
    }
    h.push_str("</p>\n");

    let m = &d.metrics;
    h.push_str("<table class=\"metrics\"><tr><th>SS</th><th>CR</th><th>CAC</th><th>CCI</th><th>Tokens</th></tr>");
    let _ = writeln!(
        h,
        "<tr><td>{:.4}</td><td>{:.4}</td><td>{:.4}</td><td>{}</td><td>{}</td></tr></table>",
        m.ss,
        m.cr,
        m.cac,
        fmt_opt(m.cci),
        m.n_tokens
    );

    // effective tokens: those inside annotated spans
    let mut counts = [0usize; NUM_CLASSES];
    let (mut f2c, mut c2f, mut mismatch, mut n_eff) = (0usize, 0usize, 0usize, 0usize);
    for t in (0..tr.tokens.len()).filter(|&t| in_span[t]) {
        n_eff += 1;
        let (truth, pred) = (d.labels[t], d.predicted[t]);
        counts[pred.index()] += 1;
        match (truth.is_conflict(), pred.is_conflict()) {
            (false, true) => f2c += 1,
            (true, false) => c2f += 1,
            (true, true) if truth != pred => mismatch += 1,
            _ => {}
        }
    }
    h.push_str("<table class=\"counts\"><tr><th>Token Type</th>");
    for (_, name, _) in LEGEND {
        let _ = write!(h, "<th>{name}</th>");
    }
    h.push_str("</tr><tr><th>Quantity</th>");
    for (label, _, _) in LEGEND {
        let _ = write!(h, "<td>{}</td>", counts[label.index()]);
    }
    h.push_str("</tr></table>\n");
    let ratio = |k: usize| {
        if n_eff == 0 {
            "n/a".to_string()
        } else {
            format!("{:.2}%", 100.0 * k as f64 / n_eff as f64)
        }
    };
    let _ = writeln!(
        h,
        "<table class=\"errors\"><tr><th>Error Type</th><th>Fact&rarr;Conflict</th><th>Conflict&rarr;Fact</th><th>Type Mismatch</th></tr><tr><th>Ratio</th><td>{}</td><td>{}</td><td>{}</td></tr></table>\n</section>",
        ratio(f2c),
        ratio(c2f),
        ratio(mismatch)
    );
}
