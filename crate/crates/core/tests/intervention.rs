// SPDX-License-Identifier: MIT OR Apache-2.0

mod common;

use common::*;
use kcprobe::intervention::{
    apply_steering, build_steering_vector, greedy_decode, run_controlled_decode, ControlConfig, DecodeConfig,
    LabelSelector, SteeringMode, SteeringSpec,
};
use kcprobe::metrics::token_metrics;
use kcprobe::probe::{Probe, ProbeArch};
use kcprobe::scan::{scan_layers, ScanOptions};
use kcprobe::synth::toy::{ToyConfig, ToyModel, TOY_LAYER};
use kcprobe::synth::{generate_traces, SynthConfig};
use kcprobe::train::{train_probe, TrainConfig};
use kcprobe::ConflictLabel;
use kcprobe::probe::ProbeKind;
use rand::Rng;

fn toy_setup() -> (ToyModel, Probe, Vec<kcprobe::Trace>) {
    let model = ToyModel::new(ToyConfig::default()).unwrap();
    let traces = model.rollout_traces(1500, 32, 11).unwrap();
    let (probe, _) = train_probe(&traces, TOY_LAYER, ProbeArch::linear(model.hidden_dim()), &TrainConfig::linear().with_seed(3)).unwrap();
    (model, probe, traces)
}

fn cr(model: &ToyModel, probe: &Probe, cfg: &DecodeConfig, prompt: &[usize]) -> f64 {
    let r = run_controlled_decode(model, probe, cfg, prompt).unwrap();
    token_metrics(&r.probe_dists()).unwrap().cr
}

#[test]
fn steering_along_the_probe_direction_moves_no_conflict_mass() {
    let traces = generate_traces(&SynthConfig { seed: 4, ..SynthConfig::default() }).unwrap();
    let (probe, _) = train_probe(&traces, 5, ProbeArch::linear(32), &TrainConfig::linear().with_seed(1)).unwrap();
    let w = &probe.layers[0].weight;
    // class-0-vs-rest discriminant: w_0 minus the mean conflict row
    let v: Vec<f64> = (0..32).map(|j| w[[0, j]] - (w[[1, j]] + w[[2, j]] + w[[3, j]]) / 3.0).collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let v: Vec<f64> = v.iter().map(|x| x / n).collect();
    // with w_0 . v above every w_k . v, P(0) is increasing along v everywhere
    let proj: Vec<f64> = (0..4).map(|k| (0..32).map(|j| w[[k, j]] * v[j]).sum()).collect();
    assert!(proj[1..].iter().all(|&p| p < proj[0]), "{proj:?}");

    let spec = |lambda| SteeringSpec { layer: 5, direction: v.clone(), lambda, mode: SteeringMode::Unconditional, delta: 0.5 };
    let mut r = rng(8);
    for _ in 0..1000 {
        let h: Vec<f64> = (0..32).map(|_| r.random_range(-3.0..3.0)).collect();
        let p = probe.predict(&h).unwrap()[0];
        let up = probe.predict(&apply_steering(&h, &spec(1.0), None).unwrap()).unwrap()[0];
        let down = probe.predict(&apply_steering(&h, &spec(-1.0), None).unwrap()).unwrap()[0];
        assert!(up > p && down < p || (p == 1.0 && up == 1.0) || (p == 0.0 && down == 0.0), "{down} {p} {up}");
    }
}

#[test]
fn forward_steering_beats_reverse_steering() {
    let (model, probe, traces) = toy_setup();
    let none = LabelSelector::Label(ConflictLabel::NoConflict);
    let any = LabelSelector::AnyConflict;
    let fwd = build_steering_vector(&traces, TOY_LAYER, none, any).unwrap();
    let rev = build_steering_vector(&traces, TOY_LAYER, any, none).unwrap();
    let plain = DecodeConfig::plain(TOY_LAYER, 16);
    let (mut fwd_drop, mut rev_rise) = (0.0, 0.0);
    for ep in 0..100 {
        let trigger = model.episode_prompt(5, ep, true);
        let neutral = model.episode_prompt(5, ep, false);
        let with = |spec: &SteeringSpec| DecodeConfig { steering: Some(spec.clone()), ..plain.clone() };
        fwd_drop += cr(&model, &probe, &plain, &trigger) - cr(&model, &probe, &with(&fwd), &trigger);
        rev_rise += cr(&model, &probe, &with(&rev), &neutral) - cr(&model, &probe, &plain, &neutral);
    }
    let (fwd_drop, rev_rise) = (fwd_drop / 100.0, rev_rise / 100.0);
    assert!(fwd_drop > 0.0);
    assert!(fwd_drop > rev_rise, "forward drop {fwd_drop:.3} vs reverse rise {rev_rise:.3}");
}

#[test]
fn zero_alpha_control_is_greedy() {
    let (model, probe, _) = toy_setup();
    let cfg = DecodeConfig {
        control: Some(ControlConfig { alpha: 0.0, ..ControlConfig::default() }),
        ..DecodeConfig::plain(TOY_LAYER, 12)
    };
    for ep in 0..20 {
        let prompt = model.episode_prompt(9, ep, ep % 2 == 0);
        let r = run_controlled_decode(&model, &probe, &cfg, &prompt).unwrap();
        assert_eq!(r.tokens, greedy_decode(&model, &prompt, TOY_LAYER, 12).unwrap());
    }
}

#[test]
fn layer_scan_is_deterministic_and_drift_follows_the_boost() {
    for boost in [0.5, -0.5] {
        let traces = generate_traces(&SynthConfig { head_boost: boost, num_samples: 120, seed: 21, ..SynthConfig::default() }).unwrap();
        let cfg = TrainConfig::linear().with_seed(5);
        let mut opts = ScanOptions::new(ProbeKind::Linear);
        opts.jobs = 3;
        opts.robustness = true;
        let a = scan_layers(&traces, &cfg, &opts).unwrap();
        opts.jobs = 1;
        let b = scan_layers(&traces, &cfg, &opts).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        let drift = a.layers[5].delta_r.unwrap();
        assert_eq!(drift.signum(), boost.signum(), "boost {boost}: drift {drift}");
        let rob = a.robustness.unwrap();
        assert!(rob.peak_sign_stable);
    }
}
