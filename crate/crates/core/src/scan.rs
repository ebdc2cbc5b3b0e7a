// SPDX-License-Identifier: MIT OR Apache-2.0

//! Per-layer probe curves and attention-head activation statistics.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::one_vs_rest;
use crate::probe::{ProbeArch, ProbeKind};
use crate::train::{train_on_dataset, TokenDataset, TrainConfig};
use crate::trace::{ConflictLabel, Trace};
use crate::util::{median_in_place, mix_seed, stream_rng};

/// Held-out share of samples in a scan.
pub const SCAN_TEST_FRAC: f64 = 0.2;
pub const SCAN_FPR: f64 = 0.1;
/// Relative γ perturbation of the robustness re-run.
pub const GAMMA_PERTURBATION: f64 = 0.2;

/// Median of every stored head norm across samples, tokens, layers and heads.
pub fn compute_gamma(traces: &[Trace]) -> Result<f64> {
    let mut all = Vec::new();
    for tr in traces {
        let heads = tr
            .head_norms
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("head_norms absent in trace {}", tr.sample_id)))?;
        all.extend(heads.data().iter().map(|&v| f64::from(v)));
    }
    median_in_place(&mut all).ok_or_else(|| Error::InvalidInput("no head norms".into()))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenSet {
    /// Tokens with any conflict label.
    Conflict,
    NoConflict,
}

impl TokenSet {
    fn contains(self, label: ConflictLabel) -> bool {
        match self {
            TokenSet::Conflict => label.is_conflict(),
            TokenSet::NoConflict => !label.is_conflict(),
        }
    }
}

/// Mean over the selected tokens of the share of heads whose norm exceeds `gamma`.
pub fn head_activation_ratio(traces: &[Trace], layer: usize, set: TokenSet, gamma: f64) -> Result<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for tr in traces {
        let heads = tr
            .head_norms
            .as_ref()
            .ok_or_else(|| Error::InvalidInput(format!("head_norms absent in trace {}", tr.sample_id)))?;
        let pos = tr
            .layer_index(layer)
            .ok_or_else(|| Error::InvalidInput(format!("layer {layer} absent from trace {}", tr.sample_id)))?;
        for (t, &label) in tr.labels.iter().enumerate() {
            if !set.contains(label) {
                continue;
            }
            let row = heads.row(pos, t);
            let active = row.iter().filter(|&&v| f64::from(v) > gamma).count();
            sum += active as f64 / row.len() as f64;
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptySet(format!("{set:?} at layer {layer}")));
    }
    Ok(sum / n as f64)
}

/// Conflict and no-conflict activation ratios of one layer and their difference.
pub fn activation_drift(traces: &[Trace], layer: usize, gamma: f64) -> Result<(f64, f64, f64)> {
    let conf = head_activation_ratio(traces, layer, TokenSet::Conflict, gamma)?;
    let nconf = head_activation_ratio(traces, layer, TokenSet::NoConflict, gamma)?;
    Ok((conf, nconf, conf - nconf))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub layer: usize,
    /// VP, PT, VT.
    pub auc_per_class: [Option<f64>; 3],
    pub recall01_per_class: [Option<f64>; 3],
    #[serde(rename = "R_conf")]
    pub r_conf: Option<f64>,
    #[serde(rename = "R_nconf")]
    pub r_nconf: Option<f64>,
    #[serde(rename = "delta_R")]
    pub delta_r: Option<f64>,
    pub best_epoch: Option<usize>,
    /// Set when training or evaluation failed at this layer.
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GammaVariant {
    pub gamma: f64,
    pub delta_r: Vec<Option<f64>>,
    /// Layer with the largest |ΔR|.
    pub peak_drift_layer: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Robustness {
    pub base: GammaVariant,
    pub low: GammaVariant,
    pub high: GammaVariant,
    /// Whether the layer of largest |ΔR| moves under either perturbation.
    pub peak_changed: bool,
    /// Whether ΔR at the base peak-drift layer keeps its sign under both
    /// perturbations.
    pub peak_sign_stable: bool,
}

/// Contents of `scan.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScanResult {
    pub arch: ProbeKind,
    pub layers: Vec<LayerEntry>,
    /// `None` when the traces carry no head norms.
    pub gamma: Option<f64>,
    /// Argmax of each class's AUC curve (VP, PT, VT).
    pub peak_layer_per_class: [Option<usize>; 3],
    pub n_train_samples: usize,
    pub n_test_samples: usize,
    pub robustness: Option<Robustness>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScanOptions {
    pub kind: ProbeKind,
    /// Width multiplier for MLP probes.
    pub mlp_scale: f64,
    pub robustness: bool,
    /// Worker threads for per-layer training.
    pub jobs: usize,
}

impl ScanOptions {
    pub fn new(kind: ProbeKind) -> Self {
        Self {
            kind,
            mlp_scale: 1.0,
            robustness: false,
            jobs: 1,
        }
    }
}

/// Seeded sample-level split; returns `(train, test)` trace indices.
pub fn split_samples(n: usize, test_frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut stream_rng(seed, 4));
    let n_test = ((n as f64 * test_frac).round() as usize).clamp(1, n.saturating_sub(1));
    let mut test = idx.split_off(n - n_test);
    idx.sort_unstable();
    test.sort_unstable();
    (idx, test)
}

fn scan_one(
    traces: &[Trace],
    train: &[usize],
    test: &[usize],
    layer: usize,
    opts: &ScanOptions,
    cfg: &TrainConfig,
) -> Result<LayerEntry> {
    let train_data = TokenDataset::from_traces_subset(traces, layer, train)?;
    let test_data = TokenDataset::from_traces_subset(traces, layer, test)?;
    let arch = ProbeArch::for_kind(opts.kind, train_data.x.ncols(), opts.mlp_scale);
    let layer_cfg = cfg.clone().with_seed(mix_seed(cfg.seed, layer as u64));
    let (probe, history) = train_on_dataset(&train_data, layer, arch, &layer_cfg)?;
    let dists = probe.predict_batch(&test_data.x.view())?;
    let scores = one_vs_rest(&dists, &test_data.labels, SCAN_FPR)?;
    Ok(LayerEntry {
        layer,
        auc_per_class: scores.auc,
        recall01_per_class: scores.recall_at_fpr,
        r_conf: None,
        r_nconf: None,
        delta_r: None,
        best_epoch: Some(history.best_epoch),
        error: None,
    })
}

fn failed(layer: usize, e: &Error) -> LayerEntry {
    LayerEntry {
        layer,
        auc_per_class: [None; 3],
        recall01_per_class: [None; 3],
        r_conf: None,
        r_nconf: None,
        delta_r: None,
        best_epoch: None,
        error: Some(e.to_string()),
    }
}

fn drift_variant(traces: &[Trace], layers: &[usize], gamma: f64) -> GammaVariant {
    let delta_r: Vec<Option<f64>> = layers
        .iter()
        .map(|&l| activation_drift(traces, l, gamma).ok().map(|d| d.2))
        .collect();
    let peak_drift_layer = delta_r
        .iter()
        .zip(layers)
        .filter_map(|(d, &l)| d.map(|v| (v.abs(), l)))
        .fold(None, |best: Option<(f64, usize)>, (v, l)| match best {
            Some((bv, _)) if bv >= v => best,
            _ => Some((v, l)),
        })
        .map(|(_, l)| l);
    GammaVariant {
        gamma,
        delta_r,
        peak_drift_layer,
    }
}

/// Train and evaluate one probe per stored layer. Traces are split by
/// sample; per-layer failures are recorded and the scan continues.
pub fn scan_layers(traces: &[Trace], cfg: &TrainConfig, opts: &ScanOptions) -> Result<LayerScanResult> {
    cfg.validate()?;
    let first = traces
        .first()
        .ok_or_else(|| Error::InvalidInput("no traces".into()))?;
    let layers = first.layer_ids.clone();
    if layers.len() < 2 {
        return Err(Error::InvalidInput(format!("scan needs at least 2 layers, traces store {}", layers.len())));
    }
    if let Some(tr) = traces.iter().find(|t| t.layer_ids != layers) {
        return Err(Error::DimMismatch(format!("trace {} stores different layers", tr.sample_id)));
    }
    let distinct = ConflictLabel::ALL
        .iter()
        .filter(|&&c| traces.iter().any(|t| t.labels.contains(&c)))
        .count();
    if distinct < 2 {
        return Err(Error::SingleClass(format!("labels contain {distinct} class(es)")));
    }
    if traces.len() < 2 {
        return Err(Error::InvalidInput("scan needs at least 2 traces".into()));
    }

    let (train, test) = split_samples(traces.len(), SCAN_TEST_FRAC, cfg.seed);
    let jobs = opts.jobs.clamp(1, layers.len());
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<LayerEntry>>> = Mutex::new(vec![None; layers.len()]);
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(&layer) = layers.get(i) else { break };
                let entry = scan_one(traces, &train, &test, layer, opts, cfg).unwrap_or_else(|e| failed(layer, &e));
                slots.lock().expect("scan worker panicked")[i] = Some(entry);
            });
        }
    });
    let mut entries: Vec<LayerEntry> = slots
        .into_inner()
        .expect("scan worker panicked")
        .into_iter()
        .map(|e| e.expect("every layer scanned"))
        .collect();

    let gamma = compute_gamma(traces).ok();
    if let Some(g) = gamma {
        for e in &mut entries {
            match activation_drift(traces, e.layer, g) {
                Ok((c, n, d)) => {
                    e.r_conf = Some(c);
                    e.r_nconf = Some(n);
                    e.delta_r = Some(d);
                }
                Err(err) => {
                    e.error.get_or_insert_with(|| err.to_string());
                }
            }
        }
    }

    let mut peaks = [None; 3];
    for (k, peak) in peaks.iter_mut().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for e in &entries {
            if let Some(a) = e.auc_per_class[k] {
                if best.is_none_or(|(b, _)| a > b) {
                    best = Some((a, e.layer));
                }
            }
        }
        *peak = best.map(|(_, l)| l);
    }

    let robustness = match (opts.robustness, gamma) {
        (true, Some(g)) => {
            let base = drift_variant(traces, &layers, g);
            let low = drift_variant(traces, &layers, g * (1.0 - GAMMA_PERTURBATION));
            let high = drift_variant(traces, &layers, g * (1.0 + GAMMA_PERTURBATION));
            let peak_changed = low.peak_drift_layer != base.peak_drift_layer
                || high.peak_drift_layer != base.peak_drift_layer;
            let at_peak = |v: &GammaVariant| {
                base.peak_drift_layer
                    .and_then(|l| layers.iter().position(|&x| x == l))
                    .and_then(|i| v.delta_r[i])
            };
            let peak_sign_stable = match (at_peak(&base), at_peak(&low), at_peak(&high)) {
                (Some(b), Some(l), Some(h)) => b.signum() == l.signum() && b.signum() == h.signum(),
                _ => false,
            };
            Some(Robustness {
                base,
                low,
                high,
                peak_changed,
                peak_sign_stable,
            })
        }
        _ => None,
    };

    Ok(LayerScanResult {
        arch: opts.kind,
        layers: entries,
        gamma,
        peak_layer_per_class: peaks,
        n_train_samples: train.len(),
        n_test_samples: test.len(),
        robustness,
    })
}

/// One row per layer, for plotting.
pub fn scan_csv(result: &LayerScanResult) -> String {
    let mut out = String::from(
        "layer,auc_vp,auc_pt,auc_vt,recall01_vp,recall01_pt,recall01_vt,R_conf,R_nconf,delta_R\n",
    );
    let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for e in &result.layers {
        let _ = write!(out, "{}", e.layer);
        for v in e.auc_per_class.iter().chain(&e.recall01_per_class) {
            let _ = write!(out, ",{}", cell(*v));
        }
        let _ = writeln!(out, ",{},{},{}", cell(e.r_conf), cell(e.r_nconf), cell(e.delta_r));
    }
    out
}

pub fn write_scan_csv(path: &Path, result: &LayerScanResult) -> Result<()> {
    std::fs::write(path, scan_csv(result)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_traces, SynthConfig};
    use crate::trace::Tensor3;

    fn head_trace(norms: &[f32], labels: Vec<ConflictLabel>) -> Trace {
        let t = labels.len();
        let a = norms.len() / t;
        Trace {
            sample_id: "h".into(),
            model_id: "m".into(),
            objective_conflict: Default::default(),
            tokens: vec!["x".into(); t],
            hidden: Tensor3::zeros([1, t, 2]),
            layer_ids: vec![0],
            labels,
            spans: vec![],
            head_norms: Some(Tensor3::from_vec([1, t, a], norms.to_vec()).unwrap()),
        }
    }

    #[test]
    fn gamma_is_the_median() {
        let tr = head_trace(&[0.1, 0.2, 0.3], vec![ConflictLabel::NoConflict]);
        assert!((compute_gamma(&[tr]).unwrap() - 0.2).abs() < 1e-7);
        let tr = head_trace(&[0.1, 0.3], vec![ConflictLabel::NoConflict]);
        assert!((compute_gamma(&[tr]).unwrap() - 0.2).abs() < 1e-7);
        let mut bare = head_trace(&[0.1], vec![ConflictLabel::NoConflict]);
        bare.head_norms = None;
        assert!(compute_gamma(&[bare]).is_err());
    }

    #[test]
    fn activation_ratio_examples() {
        let tr = head_trace(&[0.2, 0.1, 0.3, 0.05], vec![ConflictLabel::VisionPrior]);
        let r = head_activation_ratio(std::slice::from_ref(&tr), 0, TokenSet::Conflict, 0.15).unwrap();
        assert_eq!(r, 0.5);
        assert_eq!(head_activation_ratio(std::slice::from_ref(&tr), 0, TokenSet::Conflict, f64::from(0.3f32)).unwrap(), 0.0);
        let err = head_activation_ratio(&[tr], 0, TokenSet::NoConflict, 0.15).unwrap_err();
        assert!(err.to_string().contains("no tokens in set"));
    }

    #[test]
    fn sample_split_is_disjoint_and_seeded() {
        let (a, b) = split_samples(10, 0.2, 3);
        assert_eq!(b.len(), 2);
        assert_eq!(a.len(), 8);
        assert!(a.iter().all(|i| !b.contains(i)));
        assert_eq!(split_samples(10, 0.2, 3), (a, b));
    }

    #[test]
    fn single_layer_traces_are_rejected() {
        let tr = head_trace(&[0.2, 0.1], vec![ConflictLabel::VisionPrior, ConflictLabel::NoConflict]);
        let opts = ScanOptions::new(ProbeKind::Linear);
        assert!(scan_layers(&[tr.clone(), tr], &TrainConfig::linear(), &opts).is_err());
    }

    #[test]
    fn parallel_scan_matches_serial() {
        let cfg = SynthConfig {
            num_samples: 20,
            num_tokens: 24,
            num_layers: 3,
            peak_layer: 1,
            hidden_dim: 8,
            span_rate: 0.15,
            head_boost: 0.5,
            ..SynthConfig::default()
        };
        let traces = generate_traces(&cfg).unwrap();
        let mut opts = ScanOptions::new(ProbeKind::Linear);
        opts.robustness = true;
        let serial = scan_layers(&traces, &TrainConfig::linear(), &opts).unwrap();
        opts.jobs = 3;
        let parallel = scan_layers(&traces, &TrainConfig::linear(), &opts).unwrap();
        assert_eq!(serial, parallel);
        for e in &serial.layers {
            assert_eq!(e.delta_r.unwrap(), e.r_conf.unwrap() - e.r_nconf.unwrap());
        }
        assert_eq!(scan_csv(&serial).lines().count(), 4);
    }
}
