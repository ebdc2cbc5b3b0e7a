// SPDX-License-Identifier: MIT OR Apache-2.0

//! A deterministic toy decoder with planted conflict states.
//!
//! ```text
//! h_t    = tanh(A h_{t-1} + E[y_t] + c * grounded)
//! logits = U h_t
//! ```
//!
//! The vocabulary is split into support tokens (class `NoConflict`, token 0
//! doubling as BOS) and a small set of conflict tokens per class. A conflict
//! token's embedding points along its class direction and its unembedding
//! row rewards the same direction, so once the decoder emits a conflict
//! token it tends to keep doing so. Support tokens read a separate support
//! direction that the visual context excites, plus a shared prior component
//! present in every state. That prior makes the support basin the deeper of
//! the two.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::orthonormal_set;
use crate::error::{Error, Result};
use crate::intervention::{GenerativeModel, HiddenHook, StepOutput};
use crate::trace::{project_span_labels, spans_from_labels, ConflictLabel, ObjectiveConflict, Tensor3, Trace};
use crate::util::{argmax, softmax, stream_rng};

/// The single hidden layer the toy exposes.
pub const TOY_LAYER: usize = 0;
pub const BOS: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub conflict_tokens_per_class: usize,
    /// Recurrent gain: `A = memory * I`.
    pub memory: f64,
    /// Conflict-token embedding strength along its class direction.
    pub kappa: f64,
    /// Support-token embedding strength along the support direction.
    pub kappa_support: f64,
    /// Shared prior component of every embedding.
    pub prior: f64,
    /// Visual context strength along the support direction.
    pub context: f64,
    /// Conflict self-reinforcement in the unembedding.
    pub rho: f64,
    /// Support-token unembedding weight on the support direction.
    pub rho_support: f64,
    /// Support-token unembedding weight on the prior direction.
    pub rho_prior: f64,
    /// Scale of per-token identity noise in E and U.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            vocab_size: 36,
            hidden_dim: 16,
            conflict_tokens_per_class: 3,
            memory: 0.1,
            kappa: 1.5,
            kappa_support: 2.0,
            prior: 1.0,
            context: 0.3,
            rho: 2.2,
            rho_support: 3.0,
            rho_prior: 1.2,
            noise: 0.3,
            seed: 0,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let n_conf = 3 * self.conflict_tokens_per_class;
        if self.conflict_tokens_per_class == 0 || self.vocab_size < n_conf + 2 {
            return Err(Error::Config(format!(
                "vocab_size {} leaves no room for {n_conf} conflict tokens plus support tokens",
                self.vocab_size
            )));
        }
        if self.hidden_dim < 6 {
            return Err(Error::Config("toy hidden_dim must be at least 6".into()));
        }
        let params = [
            self.memory, self.kappa, self.kappa_support, self.prior, self.context,
            self.rho, self.rho_support, self.rho_prior, self.noise,
        ];
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("toy parameters must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub config: ToyConfig,
    /// `A`, `d x d`.
    pub transition: Vec<Vec<f64>>,
    /// `E`, `V x d`.
    pub embeddings: Vec<Vec<f64>>,
    /// `U`, `V x d`.
    pub unembedding: Vec<Vec<f64>>,
    /// Visual context vector `c`.
    pub context: Vec<f64>,
    /// Conflict directions for VP, PT, VT.
    pub directions: [Vec<f64>; 3],
    pub support_direction: Vec<f64>,
    pub token_classes: Vec<ConflictLabel>,
}

impl ToyModel {
    pub fn new(config: ToyConfig) -> Result<Self> {
        config.validate()?;
        let (v, d) = (config.vocab_size, config.hidden_dim);
        let mut rng = stream_rng(config.seed, 0);
        let [d1, d2, d3, support, prior] = orthonormal_set::<5>(&mut rng, d);
        let planted = [d1.clone(), d2.clone(), d3.clone(), support.clone(), prior.clone()];

        let per = config.conflict_tokens_per_class;
        let first_conflict = v - 3 * per;
        let token_classes: Vec<ConflictLabel> = (0..v)
            .map(|w| {
                if w < first_conflict {
                    ConflictLabel::NoConflict
                } else {
                    ConflictLabel::CONFLICTS[(w - first_conflict) / per]
                }
            })
            .collect();

        // identity noise lives in the complement of the planted directions
        let mut noise = |scale: f64| -> Vec<f64> {
            let mut x: Vec<f64> = (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
            for u in &planted {
                let p = crate::util::dot(&x, u);
                x.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
            }
            let n = crate::util::norm(&x).max(1e-12);
            x.into_iter().map(|a| a * scale / n).collect()
        };

        let dirs = [d1, d2, d3];
        let axpy = |acc: &mut [f64], a: f64, x: &[f64]| acc.iter_mut().zip(x).for_each(|(s, v)| *s += a * v);
        let mut embeddings = Vec::with_capacity(v);
        let mut unembedding = Vec::with_capacity(v);
        for &class in &token_classes {
            let mut e = noise(config.noise);
            let mut u = noise(config.noise);
            axpy(&mut e, config.prior, &prior);
            match class {
                ConflictLabel::NoConflict => {
                    axpy(&mut e, config.kappa_support, &support);
                    axpy(&mut u, config.rho_support, &support);
                    axpy(&mut u, config.rho_prior, &prior);
                }
                c => {
                    let dir = &dirs[c.index() - 1];
                    axpy(&mut e, config.kappa, dir);
                    axpy(&mut u, config.rho, dir);
                }
            }
            embeddings.push(e);
            unembedding.push(u);
        }
        let transition = (0..d)
            .map(|i| (0..d).map(|j| if i == j { config.memory } else { 0.0 }).collect())
            .collect();
        let context = support.iter().map(|s| s * config.context).collect();
        Ok(Self {
            config,
            transition,
            embeddings,
            unembedding,
            context,
            directions: dirs,
            support_direction: support,
            token_classes,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.embeddings.len()
    }

    pub fn hidden_dim(&self) -> usize {
        self.context.len()
    }

    pub fn token_class(&self, token: usize) -> ConflictLabel {
        self.token_classes[token]
    }

    pub fn tokens_of(&self, class: ConflictLabel) -> Vec<usize> {
        (0..self.vocab_size()).filter(|&w| self.token_classes[w] == class).collect()
    }

    /// Hidden state after BOS and `prefix`, with `hook` applied at every position.
    fn run(&self, prefix: &[usize], grounded: bool, hook: Option<&dyn HiddenHook>) -> Result<(Vec<f64>, bool)> {
        let d = self.hidden_dim();
        let mut h = vec![0.0; d];
        let mut steered = false;
        for &y in std::iter::once(&BOS).chain(prefix) {
            let emb = self.embeddings.get(y).ok_or_else(|| {
                Error::InvalidInput(format!("token {y} outside vocabulary of {}", self.vocab_size()))
            })?;
            let mut next = vec![0.0; d];
            for (i, out) in next.iter_mut().enumerate() {
                let mut z = crate::util::dot(&self.transition[i], &h) + emb[i];
                if grounded {
                    z += self.context[i];
                }
                *out = z.tanh();
            }
            steered = hook.is_some_and(|hk| hk.apply(TOY_LAYER, &mut next));
            h = next;
        }
        Ok((h, steered))
    }

    fn logits(&self, h: &[f64]) -> Vec<f64> {
        self.unembedding.iter().map(|u| crate::util::dot(u, h)).collect()
    }

    /// Prompt for decoding episode `episode`: a few support tokens, then
    /// (when `trigger` is set) one conflict token of a seeded class.
    pub fn episode_prompt(&self, seed: u64, episode: u64, trigger: bool) -> Vec<usize> {
        let mut rng = stream_rng(seed, episode);
        let support: Vec<usize> = self.tokens_of(ConflictLabel::NoConflict).into_iter().filter(|&w| w != BOS).collect();
        let len = rng.random_range(2..=5);
        let mut prompt: Vec<usize> = (0..len).map(|_| *support.choose(&mut rng).expect("support tokens")).collect();
        if trigger {
            let class = ConflictLabel::CONFLICTS[rng.random_range(0..3)];
            prompt.push(*self.tokens_of(class).choose(&mut rng).expect("conflict tokens"));
        }
        prompt
    }

    /// Sampled trajectories as traces at layer 0, labeled by the class of
    /// the token just consumed. Half the steps take a uniformly random
    /// token so every class is visited.
    pub fn rollout_traces(&self, num: usize, len: usize, seed: u64) -> Result<Vec<Trace>> {
        if len == 0 {
            return Err(Error::InvalidInput("rollout length must be positive".into()));
        }
        let d = self.hidden_dim();
        let mut out = Vec::with_capacity(num);
        for i in 0..num {
            let mut rng = stream_rng(seed, i as u64);
            let mut seq: Vec<usize> = Vec::with_capacity(len);
            let mut data = Vec::with_capacity(len * d);
            let (mut h, _) = self.run(&seq, true, None)?;
            for _ in 0..len {
                let w = if rng.random::<f64>() < 0.5 {
                    rng.random_range(0..self.vocab_size())
                } else {
                    let p = softmax(&self.logits(&h));
                    sample_index(&p, rng.random())
                };
                seq.push(w);
                h = self.run(&seq, true, None)?.0;
                data.extend(h.iter().map(|&v| v as f32));
            }
            let labels: Vec<ConflictLabel> = seq.iter().map(|&w| self.token_class(w)).collect();
            let spans = spans_from_labels(&labels);
            debug_assert_eq!(project_span_labels(len, &spans)?, labels);
            let mut counts = [0.0; 3];
            for s in &spans {
                counts[s.label.index() - 1] += s.len() as f64;
            }
            let objective_conflict = if spans.is_empty() {
                ObjectiveConflict::None
            } else {
                ObjectiveConflict::from_label(ConflictLabel::CONFLICTS[argmax(&counts)])
            };
            out.push(Trace {
                sample_id: format!("toy-{i:05}"),
                model_id: "toy".into(),
                objective_conflict,
                tokens: seq.iter().map(|w| format!("w{w}")).collect(),
                hidden: Tensor3::from_vec([1, len, d], data)?,
                layer_ids: vec![TOY_LAYER],
                labels,
                spans,
                head_norms: None,
            });
        }
        Ok(out)
    }
}

fn sample_index(p: &[f64], u: f64) -> usize {
    let mut acc = 0.0;
    for (i, &v) in p.iter().enumerate() {
        acc += v;
        if u < acc {
            return i;
        }
    }
    p.len() - 1
}

/// Logits and hidden state for the token after `prefix`.
pub fn toy_next(model: &ToyModel, prefix: &[usize], grounded: bool) -> Result<(Vec<f64>, Vec<f64>)> {
    let (h, _) = model.run(prefix, grounded, None)?;
    Ok((model.logits(&h), h))
}

impl GenerativeModel for ToyModel {
    fn vocab_size(&self) -> usize {
        ToyModel::vocab_size(self)
    }

    fn next(
        &self,
        prefix: &[usize],
        grounded: bool,
        layer: usize,
        hook: Option<&dyn HiddenHook>,
    ) -> Result<StepOutput> {
        if layer != TOY_LAYER {
            return Err(Error::InvalidInput(format!("toy model has only layer {TOY_LAYER}, asked for {layer}")));
        }
        let (hidden, steered) = self.run(prefix, grounded, hook)?;
        Ok(StepOutput {
            logits: self.logits(&hidden),
            hidden,
            steered,
        })
    }
}
