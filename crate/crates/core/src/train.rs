// SPDX-License-Identifier: MIT OR Apache-2.0

//! Probe training: class-weighted cross-entropy, AdamW with decoupled weight
//! decay, linear warm-up followed by cosine decay, early stopping on a
//! stratified validation carve-out.
//!
//! The reported loss is the batch mean of the weighted per-token terms.

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::probe::{Dense, Probe, ProbeArch, ProbeKind, NUM_CLASSES};
use crate::trace::{ConflictLabel, Trace};
use crate::util::{mix_seed, stream_rng};

/// Floor applied to the true-class probability inside the log.
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub warmup_frac: f64,
    /// Smoothing constant in the class-weight denominator.
    pub eps_smoothing: f64,
    pub val_frac: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    /// An epoch counts as an improvement only if it lowers the best
    /// validation loss by more than this.
    pub min_delta: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn linear() -> Self {
        Self {
            lr: 1e-3,
            weight_decay: 1e-4,
            batch_size: 256,
            max_epochs: 10,
            patience: 3,
            warmup_frac: 0.05,
            eps_smoothing: 100.0,
            val_frac: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            min_delta: 1e-4,
            seed: 0,
        }
    }

    pub fn mlp() -> Self {
        Self {
            lr: 5e-4,
            ..Self::linear()
        }
    }

    pub fn for_kind(kind: ProbeKind) -> Self {
        match kind {
            ProbeKind::Linear => Self::linear(),
            ProbeKind::Mlp => Self::mlp(),
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr", self.lr),
            ("warmup_frac", self.warmup_frac),
            ("eps_smoothing", self.eps_smoothing),
            ("adam_eps", self.adam_eps),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.weight_decay >= 0.0 && self.min_delta >= 0.0) {
            return Err(Error::Config("weight_decay and min_delta must be non-negative".into()));
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.patience == 0 {
            return Err(Error::Config("batch_size, max_epochs and patience must be positive".into()));
        }
        if self.patience > self.max_epochs {
            return Err(Error::Config("patience exceeds max_epochs".into()));
        }
        if !(self.val_frac > 0.0 && self.val_frac < 1.0) {
            return Err(Error::Config(format!("val_frac {} outside (0, 1)", self.val_frac)));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return Err(Error::Config("Adam betas must lie in [0, 1)".into()));
        }
        if self.warmup_frac >= 1.0 {
            return Err(Error::Config("warmup_frac must be below 1".into()));
        }
        Ok(())
    }
}

/// `w_z = N / (count_z + eps)` with `N` the total token count.
pub fn compute_class_weights(labels: &[ConflictLabel], eps: f64) -> Result<[f64; NUM_CLASSES]> {
    if labels.is_empty() {
        return Err(Error::InvalidInput("class weights need at least one label".into()));
    }
    let mut counts = [0usize; NUM_CLASSES];
    for l in labels {
        counts[l.index()] += 1;
    }
    let n = labels.len() as f64;
    Ok(counts.map(|c| n / (c as f64 + eps)))
}

/// Summed weighted cross-entropy and its gradient with respect to the logits.
#[derive(Clone, Debug)]
pub struct WeightedLoss {
    /// `-sum_t w_{z_t} log P_t(z_t)`.
    pub loss: f64,
    /// Row `t` is `w_{z_t} (P_t - onehot(z_t))`.
    pub grad: Vec<[f64; NUM_CLASSES]>,
    /// Number of rows whose true-class probability hit [`PROB_FLOOR`].
    pub clamped: usize,
}

pub fn weighted_ce_loss(
    probs: &[[f64; NUM_CLASSES]],
    labels: &[ConflictLabel],
    class_weights: &[f64; NUM_CLASSES],
) -> Result<WeightedLoss> {
    if probs.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} probability rows for {} labels",
            probs.len(),
            labels.len()
        )));
    }
    let mut loss = 0.0;
    let mut clamped = 0;
    let mut grad = Vec::with_capacity(probs.len());
    for (p, &z) in probs.iter().zip(labels) {
        let zi = z.index();
        let w = class_weights[zi];
        let mut pz = p[zi];
        if pz < PROB_FLOOR {
            pz = PROB_FLOOR;
            clamped += 1;
        }
        loss -= w * pz.ln();
        let mut g = p.map(|v| w * v);
        g[zi] -= w;
        grad.push(g);
    }
    Ok(WeightedLoss { loss, grad, clamped })
}

/// Mean weighted loss of `probe` on a batch and the parameter gradients of
/// that mean. Dropout is active iff `rng` is given.
pub(crate) fn batch_loss_and_grads<R: Rng + ?Sized>(
    probe: &Probe,
    x: &ArrayView2<f64>,
    labels: &[ConflictLabel],
    class_weights: &[f64; NUM_CLASSES],
    rng: Option<&mut R>,
) -> Result<(f64, Vec<Dense>)> {
    let (logits, cache) = probe.forward_cached(x, rng);
    let n = labels.len() as f64;
    let (loss, grad_logits) = loss_from_logits(&logits, labels, class_weights)?;
    let grads = probe.backward(&cache, grad_logits / n);
    Ok((loss / n, grads))
}

fn loss_from_logits(
    logits: &Array2<f64>,
    labels: &[ConflictLabel],
    class_weights: &[f64; NUM_CLASSES],
) -> Result<(f64, Array2<f64>)> {
    let probs: Vec<[f64; NUM_CLASSES]> = logits
        .rows()
        .into_iter()
        .map(|r| crate::probe::softmax4(&[r[0], r[1], r[2], r[3]]))
        .collect();
    let out = weighted_ce_loss(&probs, labels, class_weights)?;
    let flat: Vec<f64> = out.grad.iter().flatten().copied().collect();
    let grad = Array2::from_shape_vec((labels.len(), NUM_CLASSES), flat).expect("n x 4");
    Ok((out.loss, grad))
}

/// Mean weighted loss (inference mode) and its exact parameter gradients.
/// Exposed for gradient checking.
pub fn loss_and_gradients(
    probe: &Probe,
    x: &ArrayView2<f64>,
    labels: &[ConflictLabel],
    class_weights: &[f64; NUM_CLASSES],
) -> Result<(f64, Vec<Dense>)> {
    if x.ncols() != probe.input_dim() {
        return Err(Error::Shape(format!(
            "probe expects hidden_dim {}, got {}",
            probe.input_dim(),
            x.ncols()
        )));
    }
    batch_loss_and_grads::<rand_chacha::ChaCha8Rng>(probe, x, labels, class_weights, None)
}

/// Mean weighted loss in inference mode.
pub fn mean_loss(
    probe: &Probe,
    x: &ArrayView2<f64>,
    labels: &[ConflictLabel],
    class_weights: &[f64; NUM_CLASSES],
) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::InvalidInput("loss over an empty set".into()));
    }
    let logits = probe.forward_batch(x);
    let (loss, _) = loss_from_logits(&logits, labels, class_weights)?;
    Ok(loss / labels.len() as f64)
}

/// Learning rate for optimizer step `step` (0-based) out of `total_steps`:
/// linear warm-up over the first `ceil(warmup_frac * total)` steps, then
/// half-cosine decay toward zero.
pub fn lr_at(step: usize, total_steps: usize, warmup_frac: f64, base_lr: f64) -> f64 {
    let warmup = warmup_steps(total_steps, warmup_frac);
    if step < warmup {
        return base_lr * (step + 1) as f64 / warmup as f64;
    }
    let decay = total_steps.saturating_sub(warmup).max(1);
    let progress = ((step - warmup) as f64 / decay as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

fn warmup_steps(total_steps: usize, warmup_frac: f64) -> usize {
    ((total_steps as f64 * warmup_frac).ceil() as usize).clamp(1, total_steps.max(1))
}

/// AdamW with decoupled weight decay (`p -= lr * wd * p` alongside the Adam step).
#[derive(Clone, Debug)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    eps: f64,
    weight_decay: f64,
    t: i32,
    m: Vec<Dense>,
    v: Vec<Dense>,
}

impl AdamW {
    pub fn new(params: &[Dense], cfg: &TrainConfig) -> Self {
        let zeros: Vec<Dense> = params
            .iter()
            .map(|p| Dense::zeros(p.weight.nrows(), p.weight.ncols()))
            .collect();
        Self {
            beta1: cfg.adam_beta1,
            beta2: cfg.adam_beta2,
            eps: cfg.adam_eps,
            weight_decay: cfg.weight_decay,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, params: &mut [Dense], grads: &[Dense], lr: f64) {
        self.t += 1;
        let (b1, b2, eps, wd) = (self.beta1, self.beta2, self.eps, self.weight_decay);
        let c1 = 1.0 - b1.powi(self.t);
        let c2 = 1.0 - b2.powi(self.t);
        let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *p -= lr * (m_hat / (v_hat.sqrt() + eps) + wd * *p);
        };
        for (((p, g), m), v) in params.iter_mut().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            ndarray::Zip::from(&mut p.weight)
                .and(&g.weight)
                .and(&mut m.weight)
                .and(&mut v.weight)
                .for_each(|p, &g, m, v| update(p, g, m, v));
            ndarray::Zip::from(&mut p.bias)
                .and(&g.bias)
                .and(&mut m.bias)
                .and(&mut v.bias)
                .for_each(|p, &g, m, v| update(p, g, m, v));
        }
    }
}

/// Hidden states of one layer pooled over traces, one row per token.
#[derive(Clone, Debug)]
pub struct TokenDataset {
    pub x: Array2<f64>,
    pub labels: Vec<ConflictLabel>,
    /// `(trace index, token index)` of every row.
    pub origin: Vec<(usize, usize)>,
}

impl TokenDataset {
    pub fn from_traces(traces: &[Trace], layer: usize) -> Result<Self> {
        Self::from_traces_subset(traces, layer, &(0..traces.len()).collect::<Vec<_>>())
    }

    /// Rows for the traces listed in `which`; `origin` refers to positions in `traces`.
    pub fn from_traces_subset(traces: &[Trace], layer: usize, which: &[usize]) -> Result<Self> {
        let Some(&first) = which.first() else {
            return Err(Error::InvalidInput("no traces".into()));
        };
        let d = traces[first].hidden_dim();
        let n: usize = which.iter().map(|&i| traces[i].num_tokens()).sum();
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        let mut origin = Vec::with_capacity(n);
        for &i in which {
            let tr = &traces[i];
            let pos = tr.layer_index(layer).ok_or_else(|| {
                Error::InvalidInput(format!("layer {layer} absent from trace {}", tr.sample_id))
            })?;
            if tr.hidden_dim() != d {
                return Err(Error::DimMismatch(format!(
                    "trace {} has hidden_dim {}, expected {d}",
                    tr.sample_id,
                    tr.hidden_dim()
                )));
            }
            for t in 0..tr.num_tokens() {
                data.extend(tr.hidden_row(pos, t).iter().map(|&v| f64::from(v)));
                labels.push(tr.labels[t]);
                origin.push((i, t));
            }
        }
        let x = Array2::from_shape_vec((labels.len(), d), data).expect("rows of width d");
        Ok(Self { x, labels, origin })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, rows: &[usize]) -> Self {
        Self {
            x: self.x.select(Axis(0), rows),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            origin: rows.iter().map(|&r| self.origin[r]).collect(),
        }
    }
}

/// Per-class seeded split. Each class contributes `round(val_frac * n_c)`
/// rows to validation, capped so that at least one row stays in training.
pub fn stratified_split(labels: &[ConflictLabel], val_frac: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = stream_rng(seed, 1);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in ConflictLabel::ALL {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let n_val = ((val_frac * idx.len() as f64).round() as usize).min(idx.len() - 1);
        val.extend_from_slice(&idx[..n_val]);
        train.extend_from_slice(&idx[n_val..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    /// Learning rate at the last step of the epoch.
    pub lr: f64,
}

/// Contents of `history.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub arch: ProbeKind,
    pub layer: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub class_weights: [f64; NUM_CLASSES],
    /// Validation loss of the initial weights.
    pub initial_val_loss: f64,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were returned; 0 means the initial weights.
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
    pub clamped_probabilities: usize,
}

/// Train a probe on all tokens of `layer` pooled across `traces`.
pub fn train_probe(
    traces: &[Trace],
    layer: usize,
    arch: ProbeArch,
    cfg: &TrainConfig,
) -> Result<(Probe, TrainHistory)> {
    let data = TokenDataset::from_traces(traces, layer)?;
    train_on_dataset(&data, layer, arch, cfg)
}

pub fn train_on_dataset(
    data: &TokenDataset,
    layer: usize,
    arch: ProbeArch,
    cfg: &TrainConfig,
) -> Result<(Probe, TrainHistory)> {
    cfg.validate()?;
    arch.validate()?;
    if data.x.ncols() != arch.input_dim {
        return Err(Error::Shape(format!(
            "probe input_dim {} but hidden states have width {}",
            arch.input_dim,
            data.x.ncols()
        )));
    }
    let distinct = ConflictLabel::ALL
        .iter()
        .filter(|c| data.labels.contains(c))
        .count();
    if distinct < 2 {
        return Err(Error::SingleClass(format!(
            "layer {layer}: training labels contain {distinct} class(es)"
        )));
    }

    let (train_idx, val_idx) = stratified_split(&data.labels, cfg.val_frac, cfg.seed);
    if val_idx.is_empty() {
        return Err(Error::InvalidInput(format!(
            "{} tokens leave an empty validation split",
            data.len()
        )));
    }
    let train = data.select(&train_idx);
    let val = data.select(&val_idx);
    let weights = compute_class_weights(&train.labels, cfg.eps_smoothing)?;

    let mut probe = init_probe(arch.clone(), cfg.seed)?;
    probe.trained_on_layer = layer;
    probe.class_weights = weights;

    let n = train.len();
    let steps_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = steps_per_epoch * cfg.max_epochs;
    let mut adam = AdamW::new(&probe.layers, cfg);
    let mut dropout_rng = stream_rng(cfg.seed, 3);

    let initial_val_loss = mean_loss(&probe, &val.x.view(), &val.labels, &weights)?;
    let mut best = (0usize, initial_val_loss, probe.layers.clone());
    let mut history = TrainHistory {
        arch: arch.kind,
        layer,
        n_train: n,
        n_val: val.len(),
        class_weights: weights,
        initial_val_loss,
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_loss: initial_val_loss,
        stopped_early: false,
        clamped_probabilities: 0,
    };

    let mut order: Vec<usize> = (0..n).collect();
    let mut step = 0;
    let mut since_best = 0;
    for epoch in 1..=cfg.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut stream_rng(mix_seed(cfg.seed, epoch as u64), 2));
        let mut loss_sum = 0.0;
        let mut lr = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let xb = train.x.select(Axis(0), batch);
            let yb: Vec<ConflictLabel> = batch.iter().map(|&i| train.labels[i]).collect();
            let (loss, grads) =
                batch_loss_and_grads(&probe, &xb.view(), &yb, &weights, Some(&mut dropout_rng))?;
            if !loss.is_finite() {
                return Err(Error::InvalidInput(format!("non-finite training loss at epoch {epoch}")));
            }
            loss_sum += loss * batch.len() as f64;
            lr = lr_at(step, total_steps, cfg.warmup_frac, cfg.lr);
            adam.step(&mut probe.layers, &grads, lr);
            step += 1;
        }
        let val_loss = mean_loss(&probe, &val.x.view(), &val.labels, &weights)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n as f64,
            val_loss,
            lr,
        });
        if val_loss < best.1 - cfg.min_delta {
            best = (epoch, val_loss, probe.layers.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                history.stopped_early = epoch < cfg.max_epochs;
                break;
            }
        }
    }
    history.best_epoch = best.0;
    history.best_val_loss = best.1;
    probe.layers = best.2;
    history.clamped_probabilities = count_clamped(&probe, &val)?;
    Ok((probe, history))
}

fn count_clamped(probe: &Probe, data: &TokenDataset) -> Result<usize> {
    let probs = probe.predict_batch(&data.x.view())?;
    Ok(weighted_ce_loss(&probs, &data.labels, &probe.class_weights)?.clamped)
}

/// Seeded initialization: Kaiming-uniform weights with fan-in-scaled bias for
/// the MLP; zero weights and a small uniform bias for the linear probe.
pub fn init_probe(arch: ProbeArch, seed: u64) -> Result<Probe> {
    let mut probe = Probe::zeros(arch)?;
    let mut rng = stream_rng(seed, 0);
    match probe.arch.kind {
        ProbeKind::Linear => {
            for b in probe.layers[0].bias.iter_mut() {
                *b = rng.random_range(-0.01..0.01);
            }
        }
        ProbeKind::Mlp => {
            for layer in &mut probe.layers {
                let fan_in = layer.weight.ncols() as f64;
                let wb = (6.0 / fan_in).sqrt();
                let bb = 1.0 / fan_in.sqrt();
                layer.weight.mapv_inplace(|_| rng.random_range(-wb..wb));
                layer.bias.mapv_inplace(|_| rng.random_range(-bb..bb));
            }
        }
    }
    Ok(probe)
}
