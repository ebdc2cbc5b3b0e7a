// SPDX-License-Identifier: MIT OR Apache-2.0

//! Binary ranking metrics, confusion matrices, and the token-level
//! conflict dynamics metrics (SS, CR, CAC, CCI).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::NUM_CLASSES;
use crate::trace::ConflictLabel;
use crate::util::argmax;

/// Tolerance on the sum of a probability row.
pub const DIST_TOLERANCE: f64 = 1e-9;

fn check_binary(scores: &[f64], positives: &[bool]) -> Result<(usize, usize)> {
    if scores.len() != positives.len() {
        return Err(Error::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            positives.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::SingleClass(format!("{n_pos} positives, {n_neg} negatives")));
    }
    Ok((n_pos, n_neg))
}

/// Area under the ROC curve as the Mann-Whitney statistic; tied scores get
/// their average rank.
pub fn roc_auc(scores: &[f64], positives: &[bool]) -> Result<f64> {
    let (n_pos, n_neg) = check_binary(scores, positives)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1
        let mid = (i + j + 2) as f64 / 2.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| positives[k]).count();
        pos_rank_sum += mid * pos_in_group as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// ROC vertices `(fpr, tpr)` sweeping the threshold from high to low,
/// starting at `(0, 0)`. A block of tied scores produces one vertex.
pub fn roc_points(scores: &[f64], positives: &[bool]) -> Result<Vec<(f64, f64)>> {
    let (n_pos, n_neg) = check_binary(scores, positives)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positives[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    Ok(points)
}

/// True-positive rate where the piecewise-linear ROC curve reaches
/// `fpr_target`. On a vertical stretch at exactly `fpr_target` the highest
/// TPR is taken.
pub fn recall_at_fpr(scores: &[f64], positives: &[bool], fpr_target: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&fpr_target) {
        return Err(Error::InvalidInput(format!("fpr_target {fpr_target} outside [0, 1]")));
    }
    let points = roc_points(scores, positives)?;
    let mut best = 0.0f64;
    for w in points.windows(2) {
        let ((f0, t0), (f1, t1)) = (w[0], w[1]);
        if f0 > fpr_target {
            break;
        }
        if f1 <= fpr_target {
            best = best.max(t1);
        } else {
            best = best.max(t0 + (t1 - t0) * (fpr_target - f0) / (f1 - f0));
        }
    }
    Ok(best)
}

/// Row-normalized confusion matrix. `rows[i][j]` is the fraction of tokens
/// of true class `classes[i]` predicted as `classes[j]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub classes: Vec<ConflictLabel>,
    pub counts: Vec<Vec<usize>>,
    pub rows: Vec<Vec<f64>>,
    /// Rows with no tokens; their entries are all zero.
    pub empty_rows: Vec<bool>,
}

impl ConfusionMatrix {
    fn from_pairs(classes: Vec<ConflictLabel>, pairs: impl Iterator<Item = (ConflictLabel, ConflictLabel)>) -> Self {
        let k = classes.len();
        let pos = |l: ConflictLabel| classes.iter().position(|&c| c == l);
        let mut counts = vec![vec![0usize; k]; k];
        for (truth, pred) in pairs {
            if let (Some(i), Some(j)) = (pos(truth), pos(pred)) {
                counts[i][j] += 1;
            }
        }
        let mut rows = Vec::with_capacity(k);
        let mut empty_rows = Vec::with_capacity(k);
        for row in &counts {
            let total: usize = row.iter().sum();
            empty_rows.push(total == 0);
            rows.push(if total == 0 {
                vec![0.0; k]
            } else {
                row.iter().map(|&c| c as f64 / total as f64).collect()
            });
        }
        Self {
            classes,
            counts,
            rows,
            empty_rows,
        }
    }
}

fn check_lengths(a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{a} predictions for {b} truth labels")));
    }
    Ok(())
}

/// Confusion matrix over hard labels. Unconditioned: 4x4 over all tokens.
/// Conditioned: 3x3 over tokens whose truth is a conflict class; tokens
/// predicted `NoConflict` carry no conflict-type decision and are left out.
pub fn confusion_matrix(
    pred: &[ConflictLabel],
    truth: &[ConflictLabel],
    conditioned: bool,
) -> Result<ConfusionMatrix> {
    check_lengths(pred.len(), truth.len())?;
    let pairs = truth.iter().copied().zip(pred.iter().copied());
    Ok(if conditioned {
        ConfusionMatrix::from_pairs(ConflictLabel::CONFLICTS.to_vec(), pairs)
    } else {
        ConfusionMatrix::from_pairs(ConflictLabel::ALL.to_vec(), pairs)
    })
}

/// Confusion matrix from probe distributions. Conditioned mode takes the
/// argmax over the three conflict classes only, so every conflict-truth
/// token gets a conflict-type prediction.
pub fn confusion_matrix_from_dists(
    dists: &[[f64; NUM_CLASSES]],
    truth: &[ConflictLabel],
    conditioned: bool,
) -> Result<ConfusionMatrix> {
    check_lengths(dists.len(), truth.len())?;
    let pred: Vec<ConflictLabel> = dists
        .iter()
        .map(|p| {
            let idx = if conditioned { 1 + argmax(&p[1..]) } else { argmax(p) };
            ConflictLabel::ALL[idx]
        })
        .collect();
    confusion_matrix(&pred, truth, conditioned)
}

/// SS / CR / CAC / CCI over a token stream.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TokenMetricsReport {
    #[serde(rename = "SS")]
    pub ss: f64,
    #[serde(rename = "CR")]
    pub cr: f64,
    #[serde(rename = "CAC")]
    pub cac: f64,
    #[serde(rename = "CCI")]
    pub cci: Option<f64>,
    pub n_tokens: usize,
    pub n_conflict_predictions: usize,
}

/// Streaming sums behind [`TokenMetricsReport`]; feed rows with
/// [`push`](Self::push), combine partial results with [`merge`](Self::merge).
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TokenMetricsAccumulator {
    n: usize,
    sum_p0: f64,
    sum_cac: f64,
    n_conflict: usize,
    sum_conf_peak: f64,
}

/// Check that `p` is a probability vector.
pub fn check_distribution(p: &[f64; NUM_CLASSES]) -> Result<()> {
    if p.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0 + DIST_TOLERANCE) {
        return Err(Error::InvalidInput(format!("invalid distribution row {p:?}")));
    }
    let sum: f64 = p.iter().sum();
    if (sum - 1.0).abs() > DIST_TOLERANCE {
        return Err(Error::InvalidInput(format!("distribution sums to {sum}")));
    }
    Ok(())
}

/// `1 - H(p) / ln 4` with `0 ln 0 = 0`.
pub fn certainty(p: &[f64; NUM_CLASSES]) -> f64 {
    let h: f64 = p.iter().filter(|&&v| v > 0.0).map(|&v| -v * v.ln()).sum();
    1.0 - h / (NUM_CLASSES as f64).ln()
}

impl TokenMetricsAccumulator {
    pub fn push(&mut self, p: &[f64; NUM_CLASSES]) -> Result<()> {
        check_distribution(p)?;
        self.n += 1;
        self.sum_p0 += p[0];
        self.sum_cac += (1.0 - p[0]) * certainty(p);
        let top = argmax(p);
        if top != 0 {
            self.n_conflict += 1;
            self.sum_conf_peak += p[top];
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) {
        self.n += other.n;
        self.sum_p0 += other.sum_p0;
        self.sum_cac += other.sum_cac;
        self.n_conflict += other.n_conflict;
        self.sum_conf_peak += other.sum_conf_peak;
    }

    pub fn finish(&self) -> Result<TokenMetricsReport> {
        if self.n == 0 {
            return Err(Error::InvalidInput("token metrics over zero tokens".into()));
        }
        let n = self.n as f64;
        Ok(TokenMetricsReport {
            ss: self.sum_p0 / n,
            cr: self.n_conflict as f64 / n,
            cac: self.sum_cac / n,
            cci: (self.n_conflict > 0).then(|| self.sum_conf_peak / self.n_conflict as f64),
            n_tokens: self.n,
            n_conflict_predictions: self.n_conflict,
        })
    }
}

pub fn token_metrics(dists: &[[f64; NUM_CLASSES]]) -> Result<TokenMetricsReport> {
    let mut acc = TokenMetricsAccumulator::default();
    for p in dists {
        acc.push(p)?;
    }
    acc.finish()
}

/// One-vs-rest AUC and Recall@FPR per conflict class (VP, PT, VT), scoring
/// each token by the probability of that class. A class with no positive
/// or no negative tokens yields `None`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassScores {
    pub auc: [Option<f64>; 3],
    pub recall_at_fpr: [Option<f64>; 3],
    pub fpr_target: f64,
}

pub fn one_vs_rest(
    dists: &[[f64; NUM_CLASSES]],
    truth: &[ConflictLabel],
    fpr_target: f64,
) -> Result<ClassScores> {
    check_lengths(dists.len(), truth.len())?;
    let mut out = ClassScores {
        auc: [None; 3],
        recall_at_fpr: [None; 3],
        fpr_target,
    };
    for (k, class) in ConflictLabel::CONFLICTS.into_iter().enumerate() {
        let scores: Vec<f64> = dists.iter().map(|p| p[class.index()]).collect();
        let pos: Vec<bool> = truth.iter().map(|&t| t == class).collect();
        match roc_auc(&scores, &pos) {
            Ok(a) => {
                out.auc[k] = Some(a);
                out.recall_at_fpr[k] = Some(recall_at_fpr(&scores, &pos, fpr_target)?);
            }
            Err(Error::SingleClass(_)) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}
