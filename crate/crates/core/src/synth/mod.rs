// SPDX-License-Identifier: MIT OR Apache-2.0

//! Synthetic traces with planted conflict geometry.
//!
//! Hidden state of token `t` at layer `l`:
//!
//! ```text
//! h(l, t) = s * g(l) * D[z_t] + sigma * eta,   g(l) = exp(-(l - peak)^2 / 2)
//! ```
//!
//! with `D[1..=3]` orthonormal (Gram-Schmidt on seeded Gaussian vectors),
//! `D[0] = 0` and `eta` standard normal. Head norms are lognormal around
//! 0.15; on conflict tokens the first half of the heads is scaled by
//! `1 + head_boost * g(l)`.
//!
//! Sample `i` draws from its own ChaCha stream, so any subset of samples can
//! be regenerated independently.

pub mod toy;

use rand::Rng;
use rand_distr::{Distribution, Geometric, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::trace::{project_span_labels, ConflictLabel, ObjectiveConflict, Span, Tensor3, Trace};
use crate::util::stream_rng;

pub use toy::{ToyConfig, ToyModel};

/// Stream reserved for the class directions.
const DIRECTION_STREAM: u64 = u64::MAX;

/// Median scale of the generated head norms.
pub const HEAD_NORM_SCALE: f64 = 0.15;

const WORDS: [&str; 24] = [
    "the", "image", "shows", "a", "red", "car", "near", "two", "people", "so", "answer", "is",
    "blue", "sign", "text", "says", "left", "of", "three", "but", "prior", "suggests", "count", "then",
];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_samples: usize,
    pub num_tokens: usize,
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub peak_layer: usize,
    /// Signal strength `s`.
    pub signal_strength: f64,
    /// Noise scale `sigma`.
    pub noise_sigma: f64,
    /// Probability that a free token opens a conflict span.
    pub span_rate: f64,
    pub mean_span_len: f64,
    /// Weights over (VP, PT, VT).
    pub conflict_mix: [f64; 3],
    pub head_boost: f64,
    /// 0 disables head norms.
    pub num_heads: usize,
    /// Probability that a span takes the sample's dominant type; otherwise
    /// its type is an independent draw from `conflict_mix`.
    pub span_purity: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_samples: 200,
            num_tokens: 48,
            num_layers: 8,
            hidden_dim: 32,
            peak_layer: 5,
            signal_strength: 2.0,
            noise_sigma: 1.0,
            span_rate: 0.05,
            mean_span_len: 4.0,
            conflict_mix: [1.0 / 3.0; 3],
            head_boost: 0.0,
            num_heads: 8,
            span_purity: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_samples == 0 || self.num_tokens == 0 || self.num_layers == 0 {
            return fail("num_samples, num_tokens and num_layers must be positive".into());
        }
        if self.hidden_dim < 8 {
            return fail(format!("hidden_dim {} below 8", self.hidden_dim));
        }
        if self.peak_layer >= self.num_layers {
            return fail(format!("peak_layer {} >= num_layers {}", self.peak_layer, self.num_layers));
        }
        if !(self.signal_strength >= 0.0 && self.signal_strength.is_finite()) {
            return fail("signal_strength must be finite and non-negative".into());
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return fail("noise_sigma must be finite and non-negative".into());
        }
        if !(0.0..=1.0).contains(&self.span_rate) || !(0.0..=1.0).contains(&self.span_purity) {
            return fail("span_rate and span_purity must lie in [0, 1]".into());
        }
        if !(self.mean_span_len > 1.0 && self.mean_span_len.is_finite()) {
            return fail("mean_span_len must exceed 1".into());
        }
        if self.conflict_mix.iter().any(|&w| !(w >= 0.0)) || (self.conflict_mix.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return fail(format!("conflict_mix {:?} must be non-negative and sum to 1", self.conflict_mix));
        }
        if !(self.head_boost > -1.0 && self.head_boost.is_finite()) {
            return fail("head_boost must be finite and above -1".into());
        }
        Ok(())
    }

    /// Depth profile `g(l)`.
    pub fn depth_profile(&self, layer: usize) -> f64 {
        let x = layer as f64 - self.peak_layer as f64;
        (-0.5 * x * x).exp()
    }
}

/// The three planted class directions (VP, PT, VT) for a seed.
pub fn class_directions(seed: u64, dim: usize) -> Result<[Vec<f64>; 3]> {
    if dim < 3 {
        return Err(Error::Config(format!("need at least 3 dimensions, got {dim}")));
    }
    let mut rng = stream_rng(seed, DIRECTION_STREAM);
    Ok(orthonormal_set::<3>(&mut rng, dim))
}

/// `K` orthonormal vectors by Gram-Schmidt on standard normal draws.
pub(crate) fn orthonormal_set<const K: usize>(rng: &mut impl Rng, dim: usize) -> [Vec<f64>; K] {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(K);
    while out.len() < K {
        let mut v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        for u in &out {
            let proj = crate::util::dot(&v, u);
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= proj * b);
        }
        let n = crate::util::norm(&v);
        if n > 1e-6 {
            v.iter_mut().for_each(|a| *a /= n);
            out.push(v);
        }
    }
    out.try_into().expect("exactly K vectors")
}

fn draw_class(rng: &mut impl Rng, mix: &[f64; 3]) -> ConflictLabel {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, &w) in mix.iter().enumerate() {
        acc += w;
        if u < acc {
            return ConflictLabel::CONFLICTS[k];
        }
    }
    // rounding slack in the cumulative sum: last class with positive weight
    let last = mix.iter().rposition(|&w| w > 0.0).unwrap_or(2);
    ConflictLabel::CONFLICTS[last]
}

pub fn generate_traces(cfg: &SynthConfig) -> Result<Vec<Trace>> {
    cfg.validate()?;
    let dirs = class_directions(cfg.seed, cfg.hidden_dim)?;
    (0..cfg.num_samples).map(|i| generate_one(cfg, &dirs, i)).collect()
}

/// Sample `index` of the benchmark described by `cfg`.
pub fn generate_sample(cfg: &SynthConfig, index: usize) -> Result<Trace> {
    cfg.validate()?;
    let dirs = class_directions(cfg.seed, cfg.hidden_dim)?;
    generate_one(cfg, &dirs, index)
}

fn generate_one(cfg: &SynthConfig, dirs: &[Vec<f64>; 3], index: usize) -> Result<Trace> {
    let mut rng = stream_rng(cfg.seed, index as u64);
    let (t_len, n_layers, d) = (cfg.num_tokens, cfg.num_layers, cfg.hidden_dim);

    let dominant = draw_class(&mut rng, &cfg.conflict_mix);
    let geom = Geometric::new(1.0 / cfg.mean_span_len).map_err(|e| Error::Config(e.to_string()))?;
    let mut spans = Vec::new();
    let mut t = 0;
    while t < t_len {
        if rng.random::<f64>() < cfg.span_rate {
            let len = (1 + geom.sample(&mut rng) as usize).min(t_len - t);
            let label = if rng.random::<f64>() < cfg.span_purity {
                dominant
            } else {
                draw_class(&mut rng, &cfg.conflict_mix)
            };
            spans.push(Span::tokens(t, t + len, label));
            // one NoConflict token separates consecutive spans
            t += len + 1;
        } else {
            t += 1;
        }
    }
    let labels = project_span_labels(t_len, &spans)?;

    let mut mass = [0usize; 3];
    for s in &spans {
        mass[s.label.index() - 1] += s.len();
    }
    let objective_conflict = if spans.is_empty() {
        ObjectiveConflict::None
    } else {
        let k = crate::util::argmax(&mass.map(|m| m as f64));
        ObjectiveConflict::from_label(ConflictLabel::CONFLICTS[k])
    };

    let tokens: Vec<String> = (0..t_len)
        .map(|_| WORDS[rng.random_range(0..WORDS.len())].to_string())
        .collect();
    let mut offsets = Vec::with_capacity(t_len + 1);
    let mut pos = 0;
    for tok in &tokens {
        offsets.push(pos);
        pos += tok.chars().count() + 1;
    }
    for s in &mut spans {
        s.start_char = Some(offsets[s.start_tok]);
        s.end_char = Some(offsets[s.end_tok - 1] + tokens[s.end_tok - 1].chars().count());
    }

    let mut hidden = Tensor3::zeros([n_layers, t_len, d]);
    for l in 0..n_layers {
        let amp = cfg.signal_strength * cfg.depth_profile(l);
        for (t, &label) in labels.iter().enumerate() {
            let row = hidden.row_mut(l, t);
            for v in row.iter_mut() {
                let eta: f64 = rng.sample(StandardNormal);
                *v = (cfg.noise_sigma * eta) as f32;
            }
            if label.is_conflict() {
                let dir = &dirs[label.index() - 1];
                for (v, &u) in row.iter_mut().zip(dir) {
                    *v = (f64::from(*v) + amp * u) as f32;
                }
            }
        }
    }

    let head_norms = (cfg.num_heads > 0).then(|| {
        let a = cfg.num_heads;
        let mut heads = Tensor3::zeros([n_layers, t_len, a]);
        for l in 0..n_layers {
            let boost = 1.0 + cfg.head_boost * cfg.depth_profile(l);
            for (t, &label) in labels.iter().enumerate() {
                for (k, v) in heads.row_mut(l, t).iter_mut().enumerate() {
                    let z: f64 = rng.sample(StandardNormal);
                    let mut norm = HEAD_NORM_SCALE * (0.5 * z).exp();
                    if label.is_conflict() && k < a / 2 {
                        norm *= boost;
                    }
                    *v = norm as f32;
                }
            }
        }
        heads
    });

    Ok(Trace {
        sample_id: format!("synth-{index:05}"),
        model_id: "synthetic".into(),
        objective_conflict,
        tokens,
        hidden,
        layer_ids: (0..n_layers).collect(),
        labels,
        spans,
        head_norms,
    })
}
