mod common;

use std::fs;
use std::path::Path;

use common::tiny_config;
use exitprint::experiment::{
    emit_plots_data, recompute, run_experiment, threshold_ablation, write_report, Cohort, Layout, RunOptions,
};

fn read_tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn minimal_experiment_reports_both_cohorts_and_is_consistent() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tiny_config("mini");
    let dir = cfg.out_dir(tmp.path());
    let report = run_experiment(&cfg, &dir, RunOptions::default()).unwrap();

    assert_eq!(report.levels.len(), 2);
    for level in &report.levels {
        assert_eq!(level.target.cohort, Cohort::Target);
        assert_eq!(level.independents.len(), 2);
        assert_eq!(level.attacked.len(), 2);
        assert_eq!(level.stolen().count(), 1);
        assert_eq!(&recompute(level, &cfg).unwrap(), level);
        let ids: Vec<&str> = level.independents.iter().map(|m| m.model_id.as_str()).collect();
        assert!(level.attacked.iter().all(|m| !ids.contains(&m.model_id.as_str())));
        let first = level.ablation.first().unwrap();
        let last = level.ablation.last().unwrap();
        assert_eq!((first.independent_rate, first.stolen_rate), (0.0, 0.0));
        for w in level.ablation.windows(2) {
            assert!(w[0].independent_rate <= w[1].independent_rate);
            assert!(w[0].stolen_rate <= w[1].stolen_rate);
        }
        if level.independents.iter().chain(level.stolen()).all(|m| m.t_n() < 1.0) {
            assert_eq!((last.independent_rate, last.stolen_rate), (1.0, 1.0));
        }
        let rerun = threshold_ablation(&report, &cfg.ablation_t_f).unwrap();
        assert!(rerun.iter().any(|(rad, rows)| *rad == level.rad && *rows == level.ablation));
    }
    for name in ["report.json", "summary.txt", "config.toml", "fingerprints/target.fps", "logs/target.log"] {
        assert!(dir.join(name).exists(), "{name} missing");
    }
    assert!(dir.join("reports/rad-05/target.txt").exists());
    assert!(dir.join("reports/rad-15/prune-r0.20-s1.curve").exists());

    // Re-emission and cached reruns are byte-identical.
    let before = read_tree(&dir);
    write_report(&Layout::new(&dir), &report).unwrap();
    assert_eq!(read_tree(&dir), before);
    let again = run_experiment(&cfg, &dir, RunOptions::default()).unwrap();
    assert_eq!(again, report);
    let logs_free = |t: Vec<(String, Vec<u8>)>| -> Vec<(String, Vec<u8>)> {
        t.into_iter().filter(|(p, _)| !p.starts_with("logs")).collect()
    };
    assert_eq!(logs_free(read_tree(&dir)), logs_free(before));
}

#[test]
fn changed_config_gets_its_own_directory() {
    let a = tiny_config("mini");
    let mut b = a.clone();
    b.fingerprint.c = 5.0;
    let root = Path::new("runs");
    assert_ne!(a.out_dir(root), b.out_dir(root));
    assert_eq!(a.out_dir(root), tiny_config("mini").out_dir(root));
}

#[test]
fn empty_cohort_gives_header_only_files() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config("no-attacks");
    cfg.attacks.clear();
    let dir = cfg.out_dir(tmp.path());
    let report = run_experiment(&cfg, &dir, RunOptions::default()).unwrap();
    let plots = tmp.path().join("plots");
    emit_plots_data(&report, &plots).unwrap();
    let stolen = fs::read_to_string(plots.join("uniqueness-rad-05-stolen.dat")).unwrap();
    assert_eq!(stolen, "# index T_N\n");
    assert!(report.levels[0].summary.stolen_rate.is_none());
}

#[test]
fn stage_failures_name_the_stage_and_keep_artifacts() {
    let tmp = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config("too-many-fingerprints");
    cfg.fingerprint.n = 10_000;
    let dir = cfg.out_dir(tmp.path());
    let err = run_experiment(&cfg, &dir, RunOptions::default()).unwrap_err();
    assert_eq!(err.stage(), Some("fingerprint"));
    assert!(err.to_string().starts_with("[fingerprint]"));
    assert!(dir.join("models/target.emx").exists());
}
