// SPDX-License-Identifier: MIT OR Apache-2.0

// Shared oracles and fixtures for the integration tests. Each test binary
// uses a different subset.
#![allow(dead_code)]

use kcprobe::probe::{Dense, Probe, ProbeArch, NUM_CLASSES};
use kcprobe::train::{init_probe, loss_and_gradients, mean_loss};
use kcprobe::{ConflictLabel, ObjectiveConflict, Span, Tensor3, Trace};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Random probability vector; some rows are one-hot or have exact zeros.
pub fn random_dist<R: Rng>(rng: &mut R) -> [f64; NUM_CLASSES] {
    match rng.random_range(0..10) {
        0 => {
            let mut p = [0.0; NUM_CLASSES];
            p[rng.random_range(0..NUM_CLASSES)] = 1.0;
            p
        }
        1 => [0.25; NUM_CLASSES],
        _ => {
            let mut w = [0.0; NUM_CLASSES];
            for v in &mut w {
                *v = if rng.random_bool(0.15) { 0.0 } else { rng.random::<f64>() };
            }
            let s: f64 = w.iter().sum();
            if s == 0.0 {
                return [0.25; NUM_CLASSES];
            }
            w.map(|v| v / s)
        }
    }
}

/// O(n^2) pair count: P(score_pos > score_neg) + 0.5 P(tie).
pub fn brute_auc(scores: &[f64], pos: &[bool]) -> f64 {
    let mut wins = 0.0;
    let mut pairs = 0.0;
    for i in 0..scores.len() {
        for j in 0..scores.len() {
            if pos[i] && !pos[j] {
                pairs += 1.0;
                if scores[i] > scores[j] {
                    wins += 1.0;
                } else if scores[i] == scores[j] {
                    wins += 0.5;
                }
            }
        }
    }
    wins / pairs
}

/// Textbook full-matrix edit distance.
pub fn edit_distance(a: &[char], b: &[char]) -> usize {
    let mut m = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for (i, row) in m.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=b.len() {
        m[0][j] = j;
    }
    for i in 1..=a.len() {
        for j in 1..=b.len() {
            let cost = usize::from(a[i - 1] != b[j - 1]);
            m[i][j] = (m[i - 1][j - 1] + cost).min(m[i - 1][j] + 1).min(m[i][j - 1] + 1);
        }
    }
    m[a.len()][b.len()]
}

/// Random trace that passes validation. Values include signed zeros and
/// subnormals so bit-level round trips are exercised.
pub fn random_trace<R: Rng>(rng: &mut R, id: usize) -> Trace {
    let n_layers = rng.random_range(1..=4);
    let n_tok = rng.random_range(1..=30);
    let d = rng.random_range(1..=12);
    let mut layer_ids: Vec<usize> = (0..24).collect();
    for i in (1..layer_ids.len()).rev() {
        layer_ids.swap(i, rng.random_range(0..=i));
    }
    layer_ids.truncate(n_layers);
    layer_ids.sort_unstable();

    let special = [0.0f32, -0.0, f32::MIN_POSITIVE / 4.0, f32::MAX, -1.5e-38, 1.0];
    let data: Vec<f32> = (0..n_layers * n_tok * d)
        .map(|_| {
            if rng.random_bool(0.05) {
                special[rng.random_range(0..special.len())]
            } else {
                rng.random_range(-10.0f32..10.0)
            }
        })
        .collect();

    let mut spans = Vec::new();
    let mut t = 0;
    while t < n_tok {
        if rng.random_bool(0.2) {
            let end = (t + rng.random_range(1..=4)).min(n_tok);
            let label = ConflictLabel::CONFLICTS[rng.random_range(0..3)];
            spans.push(Span::tokens(t, end, label));
            t = end + 1;
        } else {
            t += 1;
        }
    }
    let labels = kcprobe::trace::project_span_labels(n_tok, &spans).unwrap();
    let objective = spans
        .first()
        .map_or(ObjectiveConflict::None, |s| ObjectiveConflict::from_label(s.label));
    let head_norms = rng.random_bool(0.5).then(|| {
        let h = rng.random_range(1..=4);
        let v: Vec<f32> = (0..n_layers * n_tok * h).map(|_| rng.random_range(0.0f32..2.0)).collect();
        Tensor3::from_vec([n_layers, n_tok, h], v).unwrap()
    });
    Trace {
        sample_id: format!("rand-{id:04}"),
        model_id: "random".into(),
        objective_conflict: objective,
        tokens: (0..n_tok).map(|i| format!("t{i}<&\"é")).collect(),
        hidden: Tensor3::from_vec([n_layers, n_tok, d], data).unwrap(),
        layer_ids,
        labels,
        spans,
        head_norms,
    }
}

/// Random probe of the given architecture with non-trivial weights.
pub fn random_probe<R: Rng>(rng: &mut R, arch: ProbeArch) -> Probe {
    let mut p = init_probe(arch, rng.random()).unwrap();
    for layer in &mut p.layers {
        layer.weight.mapv_inplace(|w| w + rng.random_range(-0.3..0.3));
        layer.bias.mapv_inplace(|b| b + rng.random_range(-0.3..0.3));
    }
    p
}

/// Largest relative error between analytic and central-difference
/// gradients over every parameter. The denominator never drops below
/// `floor`, so entries smaller than the finite-difference noise (about
/// `eps * loss / step`) are not divided by that noise.
pub fn gradient_check_error(
    probe: &Probe,
    x: &Array2<f64>,
    labels: &[ConflictLabel],
    weights: &[f64; NUM_CLASSES],
    step: f64,
    floor: f64,
) -> f64 {
    let (_, grads) = loss_and_gradients(probe, &x.view(), labels, weights).unwrap();
    let mut worst: f64 = 0.0;
    let mut work = probe.clone();
    let eval = |p: &Probe| mean_loss(p, &x.view(), labels, weights).unwrap();
    for (li, g) in grads.iter().enumerate() {
        let Dense { weight, bias } = g;
        for ((r, c), &a) in weight.indexed_iter() {
            let orig = work.layers[li].weight[[r, c]];
            work.layers[li].weight[[r, c]] = orig + step;
            let up = eval(&work);
            work.layers[li].weight[[r, c]] = orig - step;
            let down = eval(&work);
            work.layers[li].weight[[r, c]] = orig;
            let num = (up - down) / (2.0 * step);
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(floor));
        }
        for (r, &a) in bias.indexed_iter() {
            let orig = work.layers[li].bias[r];
            work.layers[li].bias[r] = orig + step;
            let up = eval(&work);
            work.layers[li].bias[r] = orig - step;
            let down = eval(&work);
            work.layers[li].bias[r] = orig;
            let num = (up - down) / (2.0 * step);
            worst = worst.max((a - num).abs() / a.abs().max(num.abs()).max(floor));
        }
    }
    worst
}

/// Smallest |pre-activation| over all hidden units; finite differences are
/// unreliable when a ReLU input sits within the step of its kink.
pub fn min_relu_margin(probe: &Probe, x: &Array2<f64>) -> f64 {
    let mut a = x.clone();
    let mut margin = f64::INFINITY;
    let last = probe.layers.len() - 1;
    for (i, layer) in probe.layers.iter().enumerate() {
        let z = a.dot(&layer.weight.t()) + &layer.bias;
        if i == last {
            break;
        }
        margin = z.iter().fold(margin, |m, v| m.min(v.abs()));
        a = z.mapv(|v| v.max(0.0));
    }
    margin
}

/// Run `kcprobe` in-process; panics unless it exits 0.
pub fn cli_ok(args: &[&str]) -> Vec<std::path::PathBuf> {
    let mut argv = vec!["kcprobe"];
    argv.extend_from_slice(args);
    let out = kcprobe::cli::dispatch(argv);
    assert_eq!(out.exit_code, 0, "kcprobe {}", args.join(" "));
    out.artifacts
}

fn collect_files(root: &std::path::Path, dir: &std::path::Path, out: &mut Vec<(String, Vec<u8>)>) {
    for entry in std::fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            collect_files(root, &path, out);
        } else {
            let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
            out.push((rel, std::fs::read(&path).unwrap()));
        }
    }
}

/// Every subcommand once, seeded, under `root`. Returns every file written
/// as (relative path, bytes), sorted by path.
pub fn run_cli_suite(root: &std::path::Path) -> Vec<(String, Vec<u8>)> {
    let p = |rel: &str| root.join(rel).to_string_lossy().into_owned();
    std::fs::create_dir_all(root).unwrap();
    let verdicts = [
        "{\"claim\":\"the apple is red\",\"label\":\"supported\",\"confidence\":0.9}\n{\"claim\":\"the sky is green\",\"label\":\"contradicted\",\"confidence\":0.95}\n",
        "{\"claim\":\"the apple is red\",\"label\":\"supported\",\"confidence\":0.7}\n{\"claim\":\"the sky is green\",\"label\":\"contradicted\",\"confidence\":0.6}\n",
        "{\"claim\":\"the apple is red\",\"label\":\"contradicted\",\"confidence\":0.8}\n{\"claim\":\"the sky is green\",\"label\":\"unknown\",\"confidence\":0.2}\n",
    ];
    for (i, v) in verdicts.iter().enumerate() {
        std::fs::write(root.join(format!("run{i}.jsonl")), v).unwrap();
    }
    std::fs::write(
        root.join("claims.jsonl"),
        "{\"claim\":\"The apple is red.\",\"anchor_kind\":\"vision\",\"anchor_payload\":\"img-1\"}\n{\"claim\":\"The sky is green\",\"anchor_kind\":\"prior\",\"anchor_payload\":\"\"}\n{\"claim\":\"A cat sits\",\"anchor_kind\":\"text\",\"anchor_payload\":\"q\"}\n",
    )
    .unwrap();
    std::fs::write(
        root.join("facts.json"),
        "{\"facts\":{\"the apple is red\":{\"holds\":true,\"confidence\":0.9},\"the sky is green\":{\"holds\":false,\"confidence\":0.85}},\"unknown_confidence\":0.0}\n",
    )
    .unwrap();

    cli_ok(&["synth", "--out", &p("T"), "--samples", "30", "--tokens", "32", "--head-boost", "0.5", "--seed", "7"]);
    cli_ok(&["synth", "--toy", "--out", &p("toyT"), "--samples", "6", "--tokens", "8", "--seed", "1"]);
    cli_ok(&["train-probe", "--traces", &p("T"), "--layer", "5", "--arch", "linear", "--out", &p("probe/p.cpb"), "--seed", "3"]);
    cli_ok(&["diagnose", "--traces", &p("T"), "--probe", &p("probe/p.cpb"), "--out", &p("diag.json")]);
    cli_ok(&["metrics", "--diagnosis", &p("diag.json"), "--out", &p("metrics.json")]);
    cli_ok(&["layer-scan", "--traces", &p("T"), "--out", &p("scan.json"), "--csv", &p("scan.csv"), "--jobs", "3", "--robustness", "--seed", "1"]);
    cli_ok(&["steer", "--traces", &p("T"), "--layer", "5", "--conditional", "--out", &p("steer.json")]);
    cli_ok(&["control-sim", "--out", &p("ctl"), "--episodes", "4", "--max-len", "8", "--steer", "--control", "--seed", "2"]);
    cli_ok(&["train-probe", "--traces", &p("toyT"), "--layer", "0", "--out", &p("toy_probe/p.cpb"), "--epochs", "2"]);
    cli_ok(&[
        "control-sim", "--out", &p("ctl_vcd"), "--toy", &p("toyT/toy.json"), "--probe", &p("toy_probe/p.cpb"),
        "--episodes", "3", "--max-len", "6", "--vcd", "--seed", "4",
    ]);
    cli_ok(&[
        "judge", "--verdicts", &p("run0.jsonl"), "--verdicts", &p("run1.jsonl"), "--verdicts", &p("run2.jsonl"),
        "--out", &p("judge.json"), "--verdicts-out", &p("voted.jsonl"),
    ]);
    cli_ok(&["judge", "--claims", &p("claims.jsonl"), "--facts", &p("facts.json"), "--out", &p("judge_mock.json")]);
    cli_ok(&["stats", "--traces", &p("T"), "--out", &p("stats.json")]);
    cli_ok(&["stats", "--traces", &p("T"), "--probe", &p("probe/p.cpb"), "--out", &p("stats_probe.json")]);
    cli_ok(&["report", "--traces", &p("T"), "--diagnosis", &p("diag.json"), "--out", &p("report.html")]);

    let mut files = Vec::new();
    collect_files(root, root, &mut files);
    files.sort();
    files
}
