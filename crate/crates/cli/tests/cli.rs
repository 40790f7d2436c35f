use std::fs;
use std::path::Path;
use std::process::Command;

use conformer_forge_cli::run;

fn cli(args: &[&str]) -> i32 {
    let mut argv = vec!["conformer-forge"];
    argv.extend_from_slice(args);
    run(argv)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, atoms: usize, seed: u64) {
    let code = cli(&[
        "synth",
        "--atoms",
        &atoms.to_string(),
        "--classes",
        "2",
        "--frames-per-class",
        "30",
        "--seed",
        &seed.to_string(),
        "--out",
        s(dir),
    ]);
    assert_eq!(code, 0);
}

fn train(data: &Path, out: &Path) -> i32 {
    cli(&[
        "train", "--data", s(data), "--out", s(out), "--epochs", "2", "--batch-size", "16", "--seed", "1",
    ])
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn synth_writes_a_loadable_dataset_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 20, 3);
    let ds = conformer_forge::trajdata::load_dataset(&data).unwrap();
    assert_eq!((ds.meta.atom_count, ds.frames.len()), (20, 60));
    let m = json(&data.join("run-manifest.json"));
    assert_eq!(m["command"], "synth");
    assert_eq!(m["seed"], 3);
    assert_eq!(m["config"]["atom_count"], 20);
}

#[test]
fn pipeline_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 20, 5);

    let run1 = tmp.path().join("run1");
    let run2 = tmp.path().join("run2");
    assert_eq!(train(&data, &run1), 0);
    assert_eq!(train(&data, &run2), 0);
    let m1 = fs::read(run1.join("metrics.csv")).unwrap();
    assert_eq!(m1, fs::read(run2.join("metrics.csv")).unwrap());
    assert!(String::from_utf8(m1).unwrap().starts_with("epoch,lr,train_loss,val_loss\n"));
    assert_eq!(
        fs::read(run1.join("ckpt/params.f64")).unwrap(),
        fs::read(run2.join("ckpt/params.f64")).unwrap()
    );
    let manifest = json(&run1.join("run-manifest.json"));
    assert_eq!(manifest["config"]["train"]["lr"], 1e-3);
    assert_eq!(manifest["inputs"].as_object().unwrap().len(), 2);

    let ckpt = run1.join("ckpt");
    let ev = tmp.path().join("eval");
    assert_eq!(
        cli(&["eval", "--data", s(&data), "--ckpt", s(&ckpt), "--split", "test", "--out", s(&ev)]),
        0
    );
    let report = json(&ev.join("report.json"));
    for key in ["loss", "avg_l2", "contact_recovery", "rmsd"] {
        assert!(report[key].as_f64().unwrap().is_finite(), "{key}");
    }
    assert_eq!(json(&ev.join("run-manifest.json"))["inputs"].as_object().unwrap().len(), 4);

    let cca = tmp.path().join("cca");
    assert_eq!(
        cli(&["cca", "--data", s(&data), "--ckpt", s(&ckpt), "--split", "train", "--out", s(&cca)]),
        0
    );
    let summary = json(&cca.join("cca.json"));
    assert_eq!(summary["correlations"].as_array().unwrap().len(), 16);
    let acc = summary["extrinsic_accuracy"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&acc));
    let emb = fs::read_to_string(cca.join("embeddings.csv")).unwrap();
    let header: Vec<&str> = emb.lines().next().unwrap().split(',').collect();
    assert_eq!(header.len(), 2 + 16 + 32);
    assert_eq!((header[2], header[18]), ("zi0", "ze0"));
    assert_eq!(emb.lines().count(), 1 + summary["frames"].as_u64().unwrap() as usize);

    let probe = tmp.path().join("probe");
    assert_eq!(
        cli(&["probe", "--data", s(&data), "--ckpt", s(&ckpt), "--property", "tpsa", "--out", s(&probe)]),
        0
    );
    let p = json(&probe.join("probe.json"));
    assert_eq!(p[0]["task"], "tpsa");
    assert!(p[0]["value"].as_f64().unwrap() >= 0.0 && p[0]["baseline"].as_f64().unwrap() >= 0.0);

    let interp = tmp.path().join("interp");
    assert_eq!(
        cli(&[
            "interp", "--data", s(&data), "--ckpt", s(&ckpt), "--frame-a", "0", "--frame-b", "45", "--out",
            s(&interp)
        ]),
        0
    );
    let csv = fs::read_to_string(interp.join("interp_rmsd.csv")).unwrap();
    assert_eq!(csv.lines().count(), 12);
    assert!(csv.starts_with("alpha,rmsd_to_a,rmsd_to_b\n0,"));

    let target = tmp.path().join("target");
    synth(&target, 24, 6);
    let tr = tmp.path().join("transfer");
    let base = tmp.path().join("baseline");
    assert_eq!(
        cli(&["transfer", "--data", s(&target), "--ckpt", s(&ckpt), "--epochs", "2", "--out", s(&tr)]),
        0
    );
    assert_eq!(
        cli(&["transfer", "--data", s(&target), "--baseline", "--epochs", "2", "--out", s(&base)]),
        0
    );
    assert_eq!(fs::read_to_string(tr.join("metrics.csv")).unwrap().lines().count(), 3);
    assert!(json(&base.join("report.json"))["avg_l2"].as_f64().unwrap() > 0.0);
    assert_eq!(json(&tr.join("run-manifest.json"))["config"]["subset"], "all");
}

#[test]
fn validation_failures_exit_with_one() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope");
    assert_eq!(cli(&["train", "--data", s(&missing), "--out", s(tmp.path())]), 1);
    assert_eq!(cli(&["synth", "--bogus-flag", "--out", s(tmp.path())]), 1);
    assert_eq!(cli(&["frobnicate"]), 1);
    assert_eq!(cli(&["synth", "--classes", "1", "--out", s(tmp.path())]), 1);

    let data = tmp.path().join("data");
    synth(&data, 20, 8);
    assert_eq!(cli(&["train", "--data", s(&data), "--out", s(tmp.path()), "--lr=-1"]), 1);
    assert_eq!(cli(&["eval", "--data", s(&data), "--ckpt", s(&missing), "--out", s(tmp.path())]), 1);

    let run1 = tmp.path().join("run1");
    assert_eq!(train(&data, &run1), 0);
    let other = tmp.path().join("other");
    synth(&other, 24, 9);
    let ckpt = run1.join("ckpt");
    assert_eq!(cli(&["eval", "--data", s(&other), "--ckpt", s(&ckpt), "--out", s(tmp.path())]), 1);
    assert_eq!(
        cli(&["eval", "--data", s(&data), "--ckpt", s(&ckpt), "--split", "dev", "--out", s(tmp.path())]),
        1
    );
    assert_eq!(
        cli(&["transfer", "--data", s(&other), "--ckpt", s(&ckpt), "--baseline", "--out", s(tmp.path())]),
        1
    );
    assert_eq!(
        cli(&["transfer", "--data", s(&other), "--ckpt", s(&ckpt), "--subset", "half", "--out", s(tmp.path())]),
        1
    );
}

#[test]
fn runtime_failure_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 20, 10);
    let out = tmp.path().join("run");
    fs::create_dir_all(&out).unwrap();
    // A file where the checkpoint directory should go.
    fs::write(out.join("ckpt"), b"occupied").unwrap();
    assert_eq!(train(&data, &out), 2);
}

#[test]
fn help_lists_defaults_for_every_subcommand() {
    let bin = env!("CARGO_BIN_EXE_conformer-forge");
    let expect: &[(&str, &[&str])] = &[
        ("synth", &["--atoms", "[default: 64]", "--amplitude", "[default: 6]", "--noise", "[default: 0.1]"]),
        (
            "train",
            &[
                "[default: 100]",
                "--lr <LR>",
                "[default: 0.001]",
                "[default: 0.995]",
                "[default: 0.00005]",
                "[default: 64]",
                "[default: 0.5]",
                "--extrinsic-only",
            ],
        ),
        ("eval", &["--split", "[default: test]", "--lambda-r"]),
        ("cca", &["--split", "[default: test]"]),
        ("probe", &["--components", "[default: 32]", "--property"]),
        ("interp", &["--steps", "[default: 11]", "--frame-a", "--frame-b"]),
        ("transfer", &["--subset", "[default: all]", "[default: 10]", "--baseline", "[default: 0.001]"]),
    ];
    for (sub, needles) in expect {
        let out = Command::new(bin).args([sub, "--help"]).output().unwrap();
        assert!(out.status.success(), "{sub}");
        let text = String::from_utf8(out.stdout).unwrap();
        for n in *needles {
            assert!(text.contains(n), "{sub} --help lacks {n}:\n{text}");
        }
    }
    let out = Command::new(bin).arg("--version").output().unwrap();
    assert!(out.status.success());
    let out = Command::new(bin).arg("nonsense").output().unwrap();
    assert_eq!(out.status.code(), Some(1));
}
