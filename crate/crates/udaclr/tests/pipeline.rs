//! End-to-end pipeline through the CLI: synth -> train -> eval -> ablate on
//! a tiny configuration.

use std::path::Path;

fn run(args: &[&str]) -> i32 {
    udaclr::cli::dispatch(args.iter().map(|s| s.to_string()))
}

fn tiny_overrides(extra: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = vec![
        "--set",
        "input_size=32",
        "--set",
        "widths=[4,6,8,10,12]",
        "--set",
        "disc_widths=[6,8,10]",
        "--set",
        "epochs=2",
        "--set",
        "warmup_epochs=1",
        "--set",
        "batch_size=4",
        "--set",
        "m_passes=3",
    ]
    .into_iter()
    .map(String::from)
    .collect();
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

#[test]
fn binary_prints_help() {
    let status = std::process::Command::new(env!("CARGO_BIN_EXE_udaclr"))
        .arg("--help")
        .status()
        .expect("binary runs");
    assert_eq!(status.code(), Some(0));
}

#[test]
fn full_pipeline_on_tiny_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    let bench = dir.path().join("bench");
    let run_dir = dir.path().join("run");
    let eval_dir = dir.path().join("eval");
    let ablate_dir = dir.path().join("ablate");

    // synth
    assert_eq!(
        run(&[
            "udaclr",
            "synth",
            "--out",
            bench.to_str().unwrap(),
            "--n-source",
            "8",
            "--n-target",
            "6",
            "--n-test",
            "2",
            "--size",
            "32",
            "--shift-preset",
            "strong",
            "--seed",
            "3",
        ]),
        0
    );

    // train
    let mut args: Vec<String> = [
        "udaclr",
        "train",
        "--source-dir",
        bench.join("source").to_str().unwrap(),
        "--target-dir",
        bench.join("target").to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
        "--deterministic",
        "--seed",
        "5",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    args.extend(tiny_overrides(&[]));
    assert_eq!(udaclr::cli::dispatch(args.clone()), 0);

    assert!(run_dir.join("metrics.jsonl").exists());
    assert!(run_dir.join("config.resolved.json").exists());
    assert!(run_dir.join("checkpoints/final.ckpt").exists());
    assert!(run_dir.join("plots/loss_curves.svg").exists());
    assert!(run_dir.join("report.md").exists());

    // resolved config carries the overrides and the CLI seed wins
    let resolved: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(run_dir.join("config.resolved.json")).unwrap())
            .unwrap();
    assert_eq!(resolved["input_size"], 32);
    assert_eq!(resolved["seed"], 5);
    assert_eq!(resolved["deterministic"], true);
    // untouched hyperparameters keep their defaults
    assert_eq!(resolved["beta"], 0.75);
    assert_eq!(resolved["m_passes"], 3);
    assert_eq!(resolved["lambda2"], 0.01);

    // eval on the labelled test split
    let ckpt = run_dir.join("checkpoints/final.ckpt");
    assert_eq!(
        run(&[
            "udaclr",
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--data",
            bench.join("target_test").to_str().unwrap(),
            "--out",
            eval_dir.to_str().unwrap(),
            "--dump-masks",
        ]),
        0
    );
    let results: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(eval_dir.join("results.json")).unwrap())
            .unwrap();
    assert_eq!(results["per_image"].as_array().unwrap().len(), 2);
    assert!(eval_dir.join("masks").read_dir().unwrap().count() == 2);
    // dumped masks decode under the 0/128/255 coding
    let mask_file = eval_dir.join("masks/tst_0000.png");
    let loaded = udaclr::datasets::load_sample(&mask_file, Some(&mask_file));
    assert!(loaded.is_ok());

    // ablate: the UGNA pair with one seed
    let mut args: Vec<String> = [
        "udaclr",
        "ablate",
        "--source-dir",
        bench.join("source").to_str().unwrap(),
        "--target-dir",
        bench.join("target").to_str().unwrap(),
        "--test-dir",
        bench.join("target_test").to_str().unwrap(),
        "--out",
        ablate_dir.to_str().unwrap(),
        "--seeds",
        "1",
        "--grid",
        "table3",
        "--jobs",
        "2",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    args.extend(tiny_overrides(&[]));
    assert_eq!(udaclr::cli::dispatch(args), 0);
    let csv = std::fs::read_to_string(ablate_dir.join("ablation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3, "header + 2 rows");
    assert!(csv.contains("inter_reg_no_ugna"));
    assert!(ablate_dir.join("summary.md").exists());
    assert!(ablate_dir.join("plots/ablation_cup_dice.svg").exists());

    // missing checkpoint is a runtime failure (exit 1)
    assert_eq!(
        run(&[
            "udaclr",
            "eval",
            "--checkpoint",
            dir.path().join("nope.ckpt").to_str().unwrap(),
            "--data",
            bench.join("target_test").to_str().unwrap(),
            "--out",
            eval_dir.to_str().unwrap(),
        ]),
        1
    );
}

#[test]
fn train_rerun_is_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let bench = dir.path().join("bench");
    assert_eq!(
        run(&[
            "udaclr",
            "synth",
            "--out",
            bench.to_str().unwrap(),
            "--n-source",
            "4",
            "--n-target",
            "4",
            "--n-test",
            "1",
            "--size",
            "32",
            "--seed",
            "11",
        ]),
        0
    );
    let mut outputs = Vec::new();
    for name in ["a", "b"] {
        let out = dir.path().join(name);
        let mut args: Vec<String> = [
            "udaclr",
            "train",
            "--source-dir",
            bench.join("source").to_str().unwrap(),
            "--target-dir",
            bench.join("target").to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--deterministic",
            "--seed",
            "1",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        args.extend(tiny_overrides(&[]));
        assert_eq!(udaclr::cli::dispatch(args), 0);
        outputs.push(std::fs::read(out.join("metrics.jsonl")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
}

#[test]
fn checkpoint_path_is_keyed_archive(){
    // sanity: the checkpoint file starts with the expected magic
    let dir = tempfile::tempdir().unwrap();
    let bench = dir.path().join("bench");
    assert_eq!(
        run(&[
            "udaclr", "synth", "--out", bench.to_str().unwrap(), "--n-source", "2",
            "--n-target", "2", "--n-test", "1", "--size", "32", "--seed", "2",
        ]),
        0
    );
    let out = dir.path().join("run");
    let mut args: Vec<String> = [
        "udaclr", "train",
        "--source-dir", bench.join("source").to_str().unwrap(),
        "--target-dir", bench.join("target").to_str().unwrap(),
        "--out", out.to_str().unwrap(),
    ]
    .iter().map(|s| s.to_string()).collect();
    args.extend(tiny_overrides(&["--set", "epochs=1", "--set", "batch_size=2"]));
    assert_eq!(udaclr::cli::dispatch(args), 0);
    let bytes = std::fs::read(out.join("checkpoints/final.ckpt")).unwrap();
    assert_eq!(&bytes[..4], b"UDCK");
    let ckpt = udaclr::model::load_checkpoint(Path::new(
        out.join("checkpoints/final.ckpt").to_str().unwrap(),
    ))
    .unwrap();
    assert_eq!(ckpt.meta.epoch, 0);
    assert!(ckpt
        .seg
        .params
        .entries
        .iter()
        .any(|(name, _)| name == "head_mask.w"));
}
