use std::path::Path;
use std::process::Command;

use camtraj_cli::raster::Raster;
use camtraj_cli::trajectory::TrajectoryFile;
use camtraj_core::PoseSE3;
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn camtraj(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_camtraj"))
        .args(args)
        .env("ANYCAM_THREADS", "1")
        .output()
        .unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn metrics(path: &Path) -> std::collections::HashMap<String, String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter_map(|l| l.split_once('=').map(|(k, v)| (k.to_string(), v.to_string())))
        .collect()
}

#[test]
fn random_rasters_round_trip_bitwise() {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for (i, channels) in [1usize, 2, 3].into_iter().enumerate() {
        let (h, w) = (rng.gen_range(1..20), rng.gen_range(1..20));
        let data: Vec<f32> = (0..channels * h * w).map(|_| f32::from_bits(rng.gen::<u32>() & 0x7f7f_ffff)).collect();
        let r = Raster::new(channels, h, w, data).unwrap();
        let path = dir.path().join(format!("r{i}.acrs"));
        r.write(&path).unwrap();
        let back = Raster::read(&path).unwrap();
        assert_eq!(back.to_bytes(), r.to_bytes());
    }
}

#[test]
fn trajectories_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let poses: Vec<PoseSE3> = (0..50)
        .map(|_| {
            let w = Vector3::from_fn(|_, _| rng.gen_range(-2.0..2.0));
            let t = Vector3::from_fn(|_, _| rng.gen_range(-5.0..5.0));
            PoseSE3::new(w, t)
        })
        .collect();
    let file = TrajectoryFile::new(poses.clone(), Some(123.456)).with_schedule(vec![200.0, 100.0, 50.0]);
    let back = TrajectoryFile::parse(&file.to_text()).unwrap();
    assert_eq!(back.focal, Some(123.456));
    assert_eq!(back.schedule, file.schedule);
    for (a, b) in back.poses.iter().zip(&poses) {
        let (qa, qb) = (a.quaternion(), b.quaternion());
        assert!(qa.angle_to(&qb) < 1e-9);
        assert!((a.camera_center() - b.camera_center()).norm() < 1e-9);
    }
    // writing what was read reproduces the text exactly
    assert_eq!(TrajectoryFile::parse(&back.to_text()).unwrap().to_text(), back.to_text());
}

#[test]
fn synth_fit_refine_eval_recovers_the_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (data, fit, refined, eval) = (d.join("data"), d.join("fit"), d.join("refine"), d.join("eval"));
    assert_eq!(camtraj(&["synth", "--out-dir", p(&data), "--seed", "5", "--plots"]).0, 0);
    assert_eq!(camtraj(&["fit", "--input", p(&data), "--out-dir", p(&fit), "--seed", "5"]).0, 0);
    let traj = fit.join("trajectory.txt");
    assert_eq!(
        camtraj(&["refine", "--input", p(&data), "--trajectory", p(&traj), "--out-dir", p(&refined)]).0,
        0
    );
    let est = refined.join("trajectory_refined.txt");
    let gt = data.join("gt_trajectory.txt");
    let code = camtraj(&["eval", "--estimate", p(&est), "--ground-truth", p(&gt), "--out-dir", p(&eval), "--plots"]).0;
    assert_eq!(code, 0);
    let m = metrics(&eval.join("metrics.txt"));
    let ate: f64 = m["ate"].parse().unwrap();
    // the orbit spans about 0.6 scene units
    assert!(ate < 0.01, "ate {ate}");
    assert!(eval.join("metrics.json").is_file());
    assert!(eval.join("trajectory_aligned.png").is_file());
    assert!(data.join("gt_trajectory.png").is_file());
    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(fit.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["focals"].as_array().unwrap().len(), 32);
    assert_eq!(manifest["likelihoods"].as_array().unwrap().len(), 32);
    assert!(manifest["selected_focal"].as_f64().unwrap() > 0.0);
    assert!(fit.join("sigma_000006.acrs").is_file());
}

#[test]
fn input_failures_exit_with_one_and_a_single_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let empty = d.join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let out = d.join("out");
    let cases: Vec<Vec<String>> = vec![
        vec!["fit".into(), "--input".into(), p(&empty).into(), "--out-dir".into(), p(&out).into()],
        vec!["fit".into(), "--out-dir".into(), p(&out).into()],
        vec!["bogus".into()],
    ];
    for args in &cases {
        let args: Vec<&str> = args.iter().map(String::as_str).collect();
        let (code, err) = camtraj(&args);
        assert_eq!(code, 1, "{args:?}");
        assert_eq!(err.trim_end().lines().count(), 1, "{err}");
        assert!(err.starts_with("error[input]: "), "{err}");
    }
    let (_, err) = camtraj(&cases[0].iter().map(String::as_str).collect::<Vec<_>>());
    assert!(err.contains("depth_000000.acrs"));

    // corrupt raster: the message names the file
    let data = d.join("data");
    assert_eq!(camtraj(&["synth", "--out-dir", p(&data)]).0, 0);
    let bad = data.join("flow_000002.acrs");
    std::fs::write(&bad, b"NOPE").unwrap();
    let (code, err) = camtraj(&["fit", "--input", p(&data), "--out-dir", p(&out)]);
    assert_eq!(code, 1);
    assert!(err.contains("flow_000002.acrs"), "{err}");

    let cfg = d.join("bad.cfg");
    std::fs::write(&cfg, "fit.nonsense=3\n").unwrap();
    let (code, err) = camtraj(&["synth", "--config", p(&cfg), "--out-dir", p(&out)]);
    assert_eq!(code, 1);
    assert!(err.contains("unknown configuration key"));

    let quat = d.join("quat.txt");
    std::fs::write(&quat, "# focal: 30\n0 0 0 0 0 0 0 3\n").unwrap();
    let (code, err) = camtraj(&["eval", "--estimate", p(&quat), "--ground-truth", p(&quat), "--out-dir", p(&out)]);
    assert_eq!(code, 1);
    assert!(err.contains("quaternion"));
}

#[test]
fn degenerate_alignment_is_a_numerical_failure() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("line.txt");
    let poses: Vec<PoseSE3> = (0..5)
        .map(|i| PoseSE3::from_translation(Vector3::new(i as f64, 0.0, 0.0)))
        .collect();
    TrajectoryFile::new(poses, Some(30.0)).write(&t).unwrap();
    let (code, err) = camtraj(&["eval", "--estimate", p(&t), "--ground-truth", p(&t), "--out-dir", p(&dir.path().join("o"))]);
    assert_eq!(code, 2);
    assert!(err.starts_with("error[numerical]: "));
}

#[test]
fn train_then_predict() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("tiny.cfg");
    std::fs::write(
        &cfg,
        "model.width=16\nmodel.height=16\nmodel.feature_dim=8\nmodel.head_hidden=8\nmodel.m=4\n\
         train.stage1_steps=3\ntrain.stage2_steps=2\ntrain.corpus_size=3\ntrain.batch_size=2\n\
         synth.width=16\nsynth.height=16\nsynth.focal=20\n",
    )
    .unwrap();
    let model = d.join("model");
    assert_eq!(camtraj(&["train", "--config", p(&cfg), "--out-dir", p(&model)]).0, 0);
    let ckpt = model.join("model.ckpt");
    assert!(ckpt.is_file());
    let log = std::fs::read_to_string(model.join("loss_log.txt")).unwrap();
    assert_eq!(log.lines().count(), 6);
    let data = d.join("data");
    assert_eq!(camtraj(&["synth", "--config", p(&cfg), "--out-dir", p(&data)]).0, 0);
    let pred = d.join("pred");
    let code = camtraj(&["predict", "--config", p(&cfg), "--input", p(&data), "--checkpoint", p(&ckpt), "--out-dir", p(&pred)]).0;
    assert_eq!(code, 0);
    let t = TrajectoryFile::read(&pred.join("trajectory.txt")).unwrap();
    assert_eq!(t.poses.len(), 8);
    assert_eq!(t.schedule.unwrap().len(), 4);

    // a model trained for another raster size rejects the input
    let big = d.join("big");
    assert_eq!(camtraj(&["synth", "--out-dir", p(&big)]).0, 0);
    let (code, err) = camtraj(&["predict", "--input", p(&big), "--checkpoint", p(&ckpt), "--out-dir", p(&pred)]);
    assert_eq!(code, 1, "{err}");
}
