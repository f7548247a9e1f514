//! End-to-end runs of the `radarlink` binary.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_radarlink");

fn run(args: &[&str], dir: &Path) -> Output {
    Command::new(BIN).args(args).current_dir(dir).env_remove("RSEED").output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn write_cfg(dir: &Path, body: &str) -> String {
    let p = dir.join("run.toml");
    std::fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

fn data_rows(text: &str) -> Vec<&str> {
    text.lines().filter(|l| !l.starts_with('#')).collect()
}

#[test]
fn dataset_train_sweep_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = write_cfg(d, "seed = 11\nn_scenes = 2\nmax_epochs = 2\nn_trials = 1\nt_coh_points = 2\n");

    ok(&run(&["-c", &cfg, "generate-dataset", "--out", "ds"], d));
    for f in ["aps.rcpd", "eigvec.rcpd", "covvec.rcpd", "split.txt", "config.toml"] {
        assert!(d.join("ds").join(f).is_file(), "{f} missing");
    }
    ok(&run(&["-c", &cfg, "generate-dataset", "--out", "ds2"], d));
    for f in ["aps.rcpd", "eigvec.rcpd", "covvec.rcpd", "split.txt"] {
        assert_eq!(std::fs::read(d.join("ds").join(f)).unwrap(), std::fs::read(d.join("ds2").join(f)).unwrap(), "{f} differs");
    }

    ok(&run(&["-c", &cfg, "train", "--dataset", "ds", "--variant", "aps", "--out", "m/aps.ckpt"], d));
    let hist = std::fs::read_to_string(d.join("m/aps.history.csv")).unwrap();
    let rows = data_rows(&hist);
    assert_eq!(rows[0], "epoch,train_loss,val_loss,lr");
    assert_eq!(rows.len(), 3);
    ok(&run(&["-c", &cfg, "train", "--dataset", "ds", "--variant", "aps", "--out", "m/aps2.ckpt"], d));
    assert_eq!(std::fs::read(d.join("m/aps.ckpt")).unwrap(), std::fs::read(d.join("m/aps2.ckpt")).unwrap());

    // A checkpoint offered under the wrong variant name is refused.
    let bad = run(&["-c", &cfg, "sweep", "--checkpoint", "covvec=m/aps.ckpt", "--out", "r.csv"], d);
    assert_eq!(bad.status.code(), Some(3));
    // Learned predictors need their checkpoints.
    let missing = run(&["-c", &cfg, "sweep", "--out", "r.csv"], d);
    assert_eq!(missing.status.code(), Some(3));

    let cfg = write_cfg(d, "seed = 11\nn_trials = 1\nt_coh_points = 2\npredictors = [\"radar\", \"aps\"]\n");
    ok(&run(&["-c", &cfg, "sweep", "--checkpoint", "aps=m/aps.ckpt", "--out", "out/r.csv"], d));
    let res = std::fs::read_to_string(d.join("out/r.csv")).unwrap();
    let rows = data_rows(&res);
    assert_eq!(
        rows[0],
        "trial_id,user_id,protocol_variant,predictor_variant,t_coh_s,rate_bps,los_flag,detected_flag,selected_rsu_beam,selected_ue_beam"
    );
    // exhaustive + 2 protocols x 2 predictors, 4 users, 2 coherence times
    assert_eq!(rows.len() - 1, 5 * 4 * 2);
    let mut combos = BTreeMap::new();
    for r in &rows[1..] {
        let f: Vec<&str> = r.split(',').collect();
        assert_eq!(f.len(), 10);
        assert!(f[5].parse::<f64>().unwrap() >= 0.0);
        *combos.entry((f[2].to_string(), f[3].to_string())).or_insert(0) += 1;
    }
    assert_eq!(combos.len(), 5);
    assert!(d.join("out/r_summary.csv").is_file());
}

#[test]
fn exhaustive_only_sweep_needs_no_checkpoint() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = write_cfg(d, "n_trials = 1\nt_coh_points = 2\nt_coh_min_s = 0.001\nt_coh_max_s = 0.05\nprotocols = []\npredictors = []\n");
    ok(&run(&["-c", &cfg, "sweep", "--out", "r.csv"], d));
    let text = std::fs::read_to_string(d.join("r.csv")).unwrap();
    let rows = data_rows(&text);
    assert_eq!(rows.len() - 1, 8);
    for r in &rows[1..] {
        let f: Vec<&str> = r.split(',').collect();
        assert_eq!(f[2], "exhaustive");
        let rate: f64 = f[5].parse().unwrap();
        if f[4].parse::<f64>().unwrap() < 2e-3 {
            assert_eq!(rate, 0.0);
        }
    }
}

#[test]
fn errors_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = write_cfg(d, "bogus_key = 3\n");
    let out = run(&["-c", &cfg, "detect-demo", "--out", "x.csv"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bogus_key"));

    let cfg = write_cfg(d, "n_scenes = 1\n");
    let blocker = d.join("file");
    std::fs::write(&blocker, "").unwrap();
    let out = run(&["-c", &cfg, "generate-dataset", "--out", "file/sub"], d);
    assert_eq!(out.status.code(), Some(3));

    let out = run(&["train", "--dataset", "nowhere", "--variant", "nope", "--out", "m"], d);
    assert_eq!(out.status.code(), Some(2));
    let out = run(&["frobnicate"], d);
    assert_eq!(out.status.code(), Some(2));
}

fn demo_peaks(text: &str) -> (Vec<usize>, BTreeMap<usize, (f64, f64)>) {
    let blocks_line = text.lines().find(|l| l.starts_with("# radar_blocks")).unwrap();
    let inner = blocks_line.split('[').nth(1).unwrap().trim_end_matches(']');
    let radar: Vec<usize> = inner.split(',').filter(|s| !s.trim().is_empty()).map(|s| s.trim().parse().unwrap()).collect();
    let mut per_block: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for r in data_rows(text).iter().skip(1) {
        let f: Vec<&str> = r.split(',').collect();
        per_block.entry(f[0].parse().unwrap()).or_default().push(f[2].parse().unwrap());
    }
    let stats = per_block
        .into_iter()
        .map(|(b, mut p)| {
            let max = p.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            p.sort_by(f64::total_cmp);
            (b, (max, p[p.len() / 2]))
        })
        .collect();
    (radar, stats)
}

#[test]
fn detect_demo_shows_peaks_only_with_radars() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    ok(&run(&["detect-demo", "--out", "two.csv"], d));
    let (radar, stats) = demo_peaks(&std::fs::read_to_string(d.join("two.csv")).unwrap());
    assert_eq!(radar.len(), 2);
    for b in &radar {
        let (max, med) = stats[b];
        assert!(max - med >= 20.0, "block {b}: peak {max:.1} dB, median {med:.1} dB");
    }

    let cfg = write_cfg(d, "demo_radars = 0\n");
    ok(&run(&["-c", &cfg, "detect-demo", "--out", "none.csv"], d));
    let (radar, stats) = demo_peaks(&std::fs::read_to_string(d.join("none.csv")).unwrap());
    assert!(radar.is_empty());
    assert_eq!(stats.len(), 3);
    for (b, (max, med)) in stats {
        assert!(max - med < 20.0, "noise block {b}: peak {max:.1} dB over median {med:.1} dB");
    }
}

#[test]
fn seed_env_var_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let cfg = write_cfg(d, "seed = 5\n");
    let via_env = Command::new(BIN)
        .args(["-c", &cfg, "detect-demo", "--out", "a.csv"])
        .current_dir(d)
        .env("RSEED", "9")
        .output()
        .unwrap();
    ok(&via_env);
    ok(&run(&["-c", &cfg, "--seed", "9", "detect-demo", "--out", "b.csv"], d));
    ok(&run(&["-c", &cfg, "detect-demo", "--out", "c.csv"], d));
    let a = std::fs::read(d.join("a.csv")).unwrap();
    assert_eq!(a, std::fs::read(d.join("b.csv")).unwrap());
    assert_ne!(a, std::fs::read(d.join("c.csv")).unwrap());
    assert!(String::from_utf8_lossy(&a).contains("# seed = 9"));
}
