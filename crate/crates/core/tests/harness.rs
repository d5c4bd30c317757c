//! End-to-end harness behaviour on a small synthetic MNIST-layout dataset.

mod common;

use std::path::Path;

use structprune::harness::{
    load_data, read_records, rewind, run_experiment, run_from_baseline, sweep_rewind, train_to_completion,
    with_sweep_epochs, Checkpoint, ExperimentConfig, Manifest, RewindMode, RunStatus, MANIFEST_FILE,
    RECORDS_FILE,
};
use structprune::pruning::{MaskRegistry, Policy, PruneDecision};
use structprune::Error;

use common::write_synthetic_mnist;

fn config(root: &Path, extra: &str) -> ExperimentConfig {
    let text = format!(
        "[experiment]\nname = \"toy\"\nmodel = \"lenet300\"\nseed = 3\ndata_dir = {:?}\n\
         [train]\nepochs = 3\n[rewind]\nepoch = 2\n{extra}",
        root.display().to_string()
    );
    ExperimentConfig::from_toml(&text, &[]).unwrap()
}

fn with_stop(root: &Path, stop: &str, overrides: &[&str]) -> ExperimentConfig {
    let base = config(root, &format!("[stop]\n{stop}\n"));
    let o: Vec<String> = overrides.iter().map(|s| s.to_string()).collect();
    ExperimentConfig::from_toml(&base.to_toml(), &o).unwrap()
}

fn dataset_dir() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    write_synthetic_mnist(dir.path(), 600, 200);
    dir
}

#[test]
fn baseline_only_run_writes_round_zero() {
    let dir = dataset_dir();
    let cfg = with_stop(dir.path(), "max_rounds = 0", &[]);
    let data = load_data(&cfg).unwrap();
    let out = dir.path().join("run");
    let res = run_experiment(&cfg, &data, Some(&out)).unwrap();
    assert_eq!(res.records.len(), 1);
    assert_eq!(res.status, RunStatus::Completed);
    let rec = read_records(&out.join(RECORDS_FILE)).unwrap();
    assert_eq!(rec[0].round, 0);
    assert_eq!(rec[0].remaining_params, 266_610);
    assert_eq!(rec[0].remaining_pct, 100.0);
    assert!(
        rec[0].top1_acc > 50.0,
        "synthetic bands are easy: {}",
        rec[0].top1_acc
    );
    let m = Manifest::read(&out.join(MANIFEST_FILE)).unwrap();
    assert_eq!((m.rounds, m.original_params), (0, 266_610));
    assert_eq!(m.config, cfg);
    for f in ["ckpt_epoch2.iprc", "final.iprc", "accuracy.svg"] {
        assert!(out.join(f).is_file(), "{f}");
    }
}

#[test]
fn saved_rewind_checkpoint_matches_the_baseline() {
    let dir = dataset_dir();
    let cfg = with_stop(dir.path(), "max_rounds = 1", &[]);
    let data = load_data(&cfg).unwrap();
    let base = train_to_completion(&cfg, &data).unwrap();
    let out = dir.path().join("run");
    run_from_baseline(&cfg, &data, &base, Some(&out)).unwrap();
    let on_disk = Checkpoint::load(&out.join("ckpt_epoch2.iprc")).unwrap();
    assert_eq!(&on_disk, base.checkpoint(2).unwrap());
    assert_eq!(on_disk.epoch, 2);
    assert!(base.checkpoint(1).is_err());
}

#[test]
fn rewind_modes_differ_only_where_documented() {
    let dir = dataset_dir();
    let cfg = with_stop(dir.path(), "max_rounds = 1", &[]);
    let data = load_data(&cfg).unwrap();
    let base = train_to_completion(&cfg, &data).unwrap();
    let ckpt = base.checkpoint(2).unwrap();
    let mut masks = MaskRegistry::new(&base.state.model.spec, true);
    masks
        .apply_decision(&PruneDecision {
            policy: Policy::Ilp,
            round: 1,
            units: (0..150).map(|u| (0, u)).collect(),
        })
        .unwrap();
    let em = masks.element_masks(&base.state.model.spec).unwrap();

    let mut w = base.state.clone();
    rewind(&mut w, ckpt, RewindMode::WeightsLr, &masks).unwrap();
    let mut l = base.state.clone();
    rewind(&mut l, ckpt, RewindMode::LrOnly, &masks).unwrap();
    for st in [&w, &l] {
        assert_eq!(st.schedule.position, 2);
        assert_eq!(st.rng, ckpt.rng.restore());
    }
    let (fc1_w, mask) = (0, &em[0].weight);
    for i in 0..mask.len() {
        let (wv, lv) = (w.model.params[fc1_w].data()[i], l.model.params[fc1_w].data()[i]);
        if mask.data()[i] == 0.0 {
            assert_eq!((wv, lv), (0.0, 0.0));
        } else {
            assert_eq!(wv, ckpt.params[fc1_w].data()[i]);
            assert_eq!(lv, base.state.model.params[fc1_w].data()[i]);
        }
    }
    assert_eq!(w.optimizer.step, ckpt.optimizer.step);
    assert_eq!(l.optimizer.step, 0);
    assert!(l
        .optimizer
        .first
        .iter()
        .all(|t| t.data().iter().all(|&v| v == 0.0)));
}

#[test]
fn target_compression_stops_once_reached() {
    let dir = dataset_dir();
    let cfg = with_stop(dir.path(), "target_compression = 2.0", &["policy=ilp"]);
    let data = load_data(&cfg).unwrap();
    let res = run_experiment(&cfg, &data, None).unwrap();
    assert_eq!(res.status, RunStatus::Completed);
    let last = res.records.last().unwrap();
    assert!(last.remaining_pct <= 50.0);
    let before = &res.records[res.records.len() - 2];
    assert!(before.remaining_pct > 50.0);
    for pair in res.records.windows(2) {
        assert!(pair[1].remaining_params < pair[0].remaining_params);
        assert_eq!(pair[1].round, pair[0].round + 1);
    }
}

#[test]
fn aiap_records_thresholds_from_round_one() {
    let dir = dataset_dir();
    let cfg = with_stop(dir.path(), "max_rounds = 5", &["policy=aiap", "lambda=0.05"]);
    let data = load_data(&cfg).unwrap();
    let res = run_experiment(&cfg, &data, None).unwrap();
    assert_eq!(res.records[0].threshold, None);
    let t: Vec<f64> = res.records[1..].iter().map(|r| r.threshold.unwrap()).collect();
    assert_eq!(&t[..3], &[0.0, 0.0, 0.0]);
    assert!(t.windows(2).all(|w| w[1] >= w[0]));
}

#[test]
fn sweep_rows_cover_every_requested_epoch() {
    let dir = dataset_dir();
    let cfg = with_stop(dir.path(), "max_rounds = 1", &["rate_dense=0.5"]);
    let data = load_data(&cfg).unwrap();
    let epochs = [0, 2, 3];
    let cfg = with_sweep_epochs(&cfg, &epochs);
    let base = train_to_completion(&cfg, &data).unwrap();
    let rows = sweep_rewind(&cfg, &data, &base, &epochs).unwrap();
    assert_eq!(rows.iter().map(|r| r.rewind_epoch).collect::<Vec<_>>(), epochs);
    // e = T only applies the mask, so the surviving weights are W_T^0 itself
    assert_eq!(rows[2].stability, 0.0);
    assert!(rows[0].stability > rows[1].stability);
    assert!(rows
        .iter()
        .all(|r| (r.remaining_pct - rows[0].remaining_pct).abs() < 1e-12));
    assert!(matches!(
        sweep_rewind(&cfg, &data, &base, &[4]),
        Err(Error::Usage(_))
    ));
}

#[test]
fn invalid_configs_are_rejected() {
    let dir = dataset_dir();
    let bad = [
        "[rewind]\nepoch = 3\n[stop]\nmax_rounds = 1\n",
        "[stop]\nmax_rounds = 1\ntarget_drop = 1.0\n",
        "[stop]\nmax_rounds = 1\n[pruning]\nrate_dense = 1.0\n",
        "[stop]\nmax_rounds = 1\n[pruning]\nbogus = 1\n",
    ];
    for extra in bad {
        let text = format!(
            "[experiment]\nmodel = \"lenet300\"\nseed = 1\ndata_dir = {:?}\n[train]\nepochs = 3\n{extra}",
            dir.path().display().to_string()
        );
        assert!(
            matches!(ExperimentConfig::from_toml(&text, &[]), Err(Error::Config(_))),
            "accepted: {extra}"
        );
    }
}
