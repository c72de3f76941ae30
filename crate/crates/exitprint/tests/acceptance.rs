//! Acceptance suite: exact oracles plus a full desk-scale experiment run
//! twice. Prints one PASS/FAIL line per criterion.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::time::Instant;

use exitprint::config::ExperimentConfig;
use exitprint::core::arch::small_convnet;
use exitprint::core::fingerprint::fingerprint_loss_grad;
use exitprint::core::verify::{eec_auc, eec_curve, Verdict};
use exitprint::core::{rng, BackboneModel, ExitPolicy, MultiExitModel, Shape, Tensor};
use exitprint::experiment::{run_experiment, ExperimentReport, RunOptions};
use rand::Rng;

struct Outcome {
    id: usize,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn say(line: &str) {
    // Written past the test harness capture so every line shows.
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").unwrap();
    out.flush().unwrap();
}

fn report(o: &Outcome) {
    let status = if o.pass { "PASS" } else { "FAIL" };
    say(&format!("[{status}] criterion {}: {} ({})", o.id, o.name, o.detail));
}

fn desk_model(seed: u64, head_gain: f32) -> MultiExitModel {
    let arch = small_convnet(Shape::new(3, 32, 32), 10, [8, 12, 16, 16, 32, 32]);
    let mut b = BackboneModel::new(&arch.layers, arch.input_shape, 10).unwrap();
    b.init(&mut rng::stream(seed, "acceptance-backbone", 0));
    let mut m = MultiExitModel::build(b, &arch.attach_indices, &mut rng::stream(seed, "acceptance-heads", 0)).unwrap();
    for ic in &mut m.ics {
        ic.fc.weight.iter_mut().for_each(|w| *w *= head_gain);
    }
    m
}

fn uniform_input(r: &mut impl Rng, shape: Shape) -> Tensor<f32> {
    Tensor::from_vec(shape, (0..shape.numel()).map(|_| r.gen::<f32>()).collect())
}

/// Analytic input gradient of the fingerprint loss against central
/// differences with h = 1e-5 in float64.
fn gradient_check() -> Outcome {
    let start = Instant::now();
    let mut worst: f64 = 0.0;
    let pairs = 20;
    for p in 0..pairs {
        let m = desk_model(p, 1.0 + p as f32 * 0.5).cast::<f64>();
        let mut r = rng::stream(p, "acceptance-fd", 0);
        let x = uniform_input(&mut r, m.input_shape()).cast::<f64>();
        let (_, g) = fingerprint_loss_grad(&m, &x).unwrap();
        let h = 1e-5;
        let (mut diff, mut norm) = (0.0f64, 0.0f64);
        for _ in 0..12 {
            let k = r.gen_range(0..x.data.len());
            let mut plus = x.clone();
            plus.data[k] += h;
            let mut minus = x.clone();
            minus.data[k] -= h;
            let fd = (fingerprint_loss_grad(&m, &plus).unwrap().0 - fingerprint_loss_grad(&m, &minus).unwrap().0)
                / (2.0 * h);
            diff += (g[k] - fd).powi(2);
            norm += fd.powi(2).max(g[k].powi(2));
        }
        worst = worst.max(diff.sqrt() / norm.sqrt().max(1e-12));
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        id: 1,
        name: "fingerprint-loss gradient vs finite differences",
        pass: worst < 1e-4 && secs < 120.0,
        detail: format!("{pairs} pairs, worst relative error {worst:.2e}, {secs:.1}s"),
    }
}

fn eec_oracle() -> Outcome {
    let start = Instant::now();
    let mut r = rng::stream(11, "acceptance-eec", 0);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let n = r.gen_range(1..=200);
        let t_max = r.gen_range(1.0..1000.0);
        let levels = r.gen_range(1..=12);
        let raw: Vec<f64> = (0..n)
            .map(|_| t_max * 1.2 * r.gen_range(0..=levels) as f64 / levels as f64)
            .collect();
        let mean = raw.iter().map(|v| (v / t_max).min(1.0)).sum::<f64>() / n as f64;
        let auc = eec_auc(&eec_curve(&raw, t_max).unwrap());
        worst = worst.max((auc - (1.0 - mean)).abs());
    }
    let all_max = eec_auc(&eec_curve(&[7.0; 50], 7.0).unwrap());
    let all_zero = eec_auc(&eec_curve(&[0.0; 50], 7.0).unwrap());
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        id: 2,
        name: "EEC AUC equals one minus mean normalized time",
        pass: worst < 1e-6 && all_max == 0.0 && all_zero == 1.0 && secs < 60.0,
        detail: format!("1000 cases, worst error {worst:.1e}, boundaries {all_max} / {all_zero}, {secs:.1}s"),
    }
}

/// Exit index, label and cost re-derived from every exit's confidences.
fn brute_force_exit(m: &MultiExitModel, x: &Tensor<f32>, t_c: f64) -> (usize, usize, u64) {
    let confs = m.forward_all_exits(x).unwrap();
    let n = confs.len();
    let peak = |i: usize| confs[i].probs.iter().copied().fold(f64::MIN, f64::max);
    let i = (0..n - 1).find(|&i| peak(i) >= t_c).unwrap_or(n - 1);
    let p = &confs[i].probs;
    let label = (0..p.len()).fold(0, |b, k| if p[k] > p[b] { k } else { b });
    let nl = m.backbone.layers.len();
    let cost = if i + 1 == n {
        m.layer_costs.iter().sum()
    } else {
        m.layer_costs[..=m.ics[i].attach_index].iter().sum::<u64>() + m.layer_costs[nl..=nl + i].iter().sum::<u64>()
    };
    (i + 1, label, cost)
}

fn exit_rule_oracle() -> Outcome {
    let start = Instant::now();
    let models: Vec<MultiExitModel> = (0..5).map(|s| desk_model(100 + s, 4.0 * (s + 1) as f32)).collect();
    let mut r = rng::stream(12, "acceptance-exit", 0);
    let mut mismatches = 0;
    let mut exits = [0usize; 7];
    for case in 0..500 {
        let m = &models[case % models.len()];
        let x = uniform_input(&mut r, m.input_shape());
        let t_c = if case % 5 == 0 {
            // Exactly on a confidence peak, to pin the >= boundary.
            let confs = m.forward_all_exits(&x).unwrap();
            confs[r.gen_range(0..confs.len() - 1)].max()
        } else {
            r.gen_range(0.1..=1.0)
        };
        let policy = ExitPolicy::confidence(t_c).unwrap();
        let t = m.early_exit_infer(&x, &policy).unwrap();
        exits[t.exit_index] += 1;
        if (t.exit_index, t.predicted_label, t.cost) != brute_force_exit(m, &x, t_c) {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome {
        id: 3,
        name: "early-exit inference vs brute-force re-derivation",
        pass: mismatches == 0 && secs < 120.0,
        detail: format!("500 cases, {mismatches} mismatches, exits taken {:?}, {secs:.1}s", &exits[1..]),
    }
}

fn fingerprint_effectiveness(r: &ExperimentReport) -> Outcome {
    let mut pass = r.fingerprint.n == 100;
    let mut parts = Vec::new();
    for l in &r.levels {
        let s = &l.summary;
        let ok = s.fingerprint_last_exit >= 0.95
            && s.fingerprint_t_n <= 0.05
            && s.target_benign_auc - s.fingerprint_t_n >= 0.25;
        pass &= ok;
        parts.push(format!(
            "RAD {:.2}: last-exit {:.2}, T_N {:.4}, benign AUC {:.4}",
            l.rad, s.fingerprint_last_exit, s.fingerprint_t_n, s.target_benign_auc
        ));
    }
    Outcome {
        id: 4,
        name: "fingerprints exit last with low T_N",
        pass,
        detail: parts.join("; "),
    }
}

fn uniqueness(r: &ExperimentReport) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for l in &r.levels {
        let s = &l.summary;
        let stolen = l.stolen().count();
        let ok = l.independents.len() == 10
            && stolen == 10
            && s.independent_rate <= 0.1
            && s.stolen_rate.is_some_and(|v| v >= 0.9)
            && s.roc_auc.is_some_and(|v| v >= 0.9);
        pass &= ok;
        parts.push(format!(
            "RAD {:.2}: T_f {:.4}, independent {:.2}, stolen {:.2} of {stolen}, ROC {:.3}",
            l.rad,
            s.t_f,
            s.independent_rate,
            s.stolen_rate.unwrap_or(f64::NAN),
            s.roc_auc.unwrap_or(f64::NAN)
        ));
    }
    Outcome {
        id: 5,
        name: "uniqueness: independents rejected, modified copies verified",
        pass,
        detail: parts.join("; "),
    }
}

fn robustness(r: &ExperimentReport) -> Outcome {
    let required = ["ic-retrain", "ic-edit", "prune", "quantize", "finetune", "exit-criteria"];
    let (mut det, mut tot, mut flagged) = (0, 0, 0);
    let mut missing = Vec::new();
    for l in &r.levels {
        for g in required {
            match l.robustness.iter().find(|row| row.group == g) {
                Some(row) => {
                    det += row.detected;
                    tot += row.models - row.flagged;
                    flagged += row.flagged;
                }
                None => missing.push(g),
            }
        }
    }
    let rate = det as f64 / tot.max(1) as f64;
    Outcome {
        id: 6,
        name: "robustness matrix: T_N < T_f on attacked copies",
        pass: missing.is_empty() && tot > 0 && rate >= 0.9,
        detail: format!("{det}/{tot} detected across both levels ({rate:.3}), {flagged} flagged, missing {missing:?}"),
    }
}

fn adversarial_contrast(r: &ExperimentReport, threshold: f64) -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for l in &r.levels {
        let rows = &l.adv_training;
        let ok = rows.len() == 3
            && l.target.baseline_match > threshold
            && rows.last().is_some_and(|row| row.baseline_match < threshold)
            && rows.iter().all(|row| row.verdict == Verdict::Stolen);
        pass &= ok;
        let cells: Vec<String> = rows
            .iter()
            .map(|row| format!("e{} T_N {:.3} match {:.2}", row.epoch, row.t_n, row.baseline_match))
            .collect();
        parts.push(format!(
            "RAD {:.2}: T_f {:.3}, target match {:.2}, {}",
            l.rad,
            l.summary.t_f,
            l.target.baseline_match,
            cells.join(", ")
        ));
    }
    Outcome {
        id: 7,
        name: "PGD-AT: baseline match drops, T_N stays below T_f",
        pass,
        detail: parts.join("; "),
    }
}

fn ablation(r: &ExperimentReport) -> Outcome {
    let mut pass = true;
    for l in &r.levels {
        let rows = &l.ablation;
        let monotone = rows
            .windows(2)
            .all(|w| w[0].independent_rate <= w[1].independent_rate && w[0].stolen_rate <= w[1].stolen_rate);
        let first = rows.first().is_some_and(|f| f.t_f == 0.0 && f.independent_rate == 0.0 && f.stolen_rate == 0.0);
        let last = rows.last().is_some_and(|f| f.t_f == 1.0 && f.independent_rate == 1.0 && f.stolen_rate == 1.0);
        pass &= monotone && first && last;
    }
    Outcome {
        id: 8,
        name: "threshold ablation monotone with fixed endpoints",
        pass,
        detail: format!("{} candidates per level", r.levels.first().map_or(0, |l| l.ablation.len())),
    }
}

/// Every file except training logs, which record wall time.
fn artifact_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            let rel = p.strip_prefix(root).unwrap().display().to_string();
            if rel.starts_with("logs") {
                continue;
            }
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn acceptance() {
    let mut outcomes = Vec::new();
    for f in [gradient_check, eec_oracle, exit_rule_oracle] {
        let o = f();
        report(&o);
        outcomes.push(o);
    }

    let cfg = ExperimentConfig::default();
    let first = tempfile::tempdir().unwrap();
    let second = tempfile::tempdir().unwrap();
    let dir_a = cfg.out_dir(first.path());
    let start = Instant::now();
    let r = run_experiment(&cfg, &dir_a, RunOptions::default()).expect("desk experiment");
    say(&format!("desk experiment finished in {:.0}s", start.elapsed().as_secs_f64()));
    for o in [
        fingerprint_effectiveness(&r),
        uniqueness(&r),
        robustness(&r),
        adversarial_contrast(&r, cfg.baseline_threshold),
        ablation(&r),
    ] {
        report(&o);
        outcomes.push(o);
    }

    let dir_b = cfg.out_dir(second.path());
    let rerun = run_experiment(&cfg, &dir_b, RunOptions::default()).expect("desk experiment rerun");
    let (a, b) = (artifact_tree(&dir_a), artifact_tree(&dir_b));
    let differing: Vec<&str> = a
        .iter()
        .zip(&b)
        .filter(|(x, y)| x != y)
        .map(|(x, _)| x.0.as_str())
        .collect();
    let o = Outcome {
        id: 9,
        name: "byte-identical rerun in a fresh directory",
        pass: rerun == r && a.len() == b.len() && differing.is_empty(),
        detail: format!("{} files compared, {} differ {:?}", a.len(), differing.len(), differing),
    };
    report(&o);
    outcomes.push(o);

    let failed: Vec<usize> = outcomes.iter().filter(|o| !o.pass).map(|o| o.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
