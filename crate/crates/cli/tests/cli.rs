use std::path::Path;
use std::process::{Command, Output};

fn kanc(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kanc"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p).unwrap()
}

#[test]
fn gen_data_row_counts_and_bad_step() {
    let dir = tempfile::tempdir().unwrap();
    let o = kanc(
        &["gen-data", "--step", "50", "--out", "d50.csv"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = read(dir.path().join("d50.csv"));
    let train = text.lines().filter(|l| l.ends_with(",train")).count();
    let test = text.lines().filter(|l| l.ends_with(",test")).count();
    assert_eq!((train, test), (289, 26_936));
    let manifest = read(dir.path().join("d50.manifest.json"));
    assert!(manifest.contains("\"command\": \"gen-data\""));

    let o = kanc(&["gen-data", "--step", "7", "--out", "bad.csv"], dir.path());
    assert_eq!(code(&o), 2);
    assert!(!dir.path().join("bad.csv").exists());
}

#[test]
fn gen_data_step_5_has_full_grid() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        code(&kanc(
            &["gen-data", "--step", "5", "--out", "d5.csv"],
            dir.path()
        )),
        0
    );
    let text = read(dir.path().join("d5.csv"));
    assert_eq!(
        text.lines().filter(|l| l.ends_with(",train")).count(),
        27_225
    );
}

#[test]
fn train_writes_artifacts_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.toml"),
        "[data]\nstep_mv = 50\n\n[train]\narchitecture = \"mlp1\"\ntarget = \"Q_S\"\nseed = 0\nepochs = 100\n",
    )
    .unwrap();
    for out in ["a", "b"] {
        let o = kanc(&["train", "--config", "run.toml", "--out", out], dir.path());
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let log = read(dir.path().join("a/train_log.csv"));
    assert_eq!(log.lines().count(), 101, "header plus one row per epoch");
    for f in ["checkpoint.json", "train_log.csv", "manifest.json"] {
        assert_eq!(
            read(dir.path().join("a").join(f)),
            read(dir.path().join("b").join(f)),
            "{f} differs"
        );
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&read(dir.path().join("a/manifest.json"))).unwrap();
    assert_eq!(manifest["inputs"][0]["path"], "run.toml");
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["outputs"][0]["sha256"].as_str().unwrap().len(), 64);
}

#[test]
fn train_sweep_writes_one_checkpoint_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let o = kanc(
        &[
            "train", "--arch", "mlp1", "--target", "Q_S", "--step", "50", "--epochs", "20",
            "--sweep", "4", "--out", "sw",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for seed in 0..4 {
        assert!(dir
            .path()
            .join(format!("sw/seed_{seed}/checkpoint.json"))
            .exists());
    }
    let summary = read(dir.path().join("sw/sweep_summary.csv"));
    assert_eq!(summary.lines().count(), 5);
}

#[test]
fn bad_config_and_missing_inputs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("bad.toml"),
        "[train]\narchitecture = \"mlp1\"\ntarget = \"Q_S\"\nbogus = 1\n",
    )
    .unwrap();
    assert_eq!(
        code(&kanc(
            &["train", "--config", "bad.toml", "--out", "x"],
            dir.path()
        )),
        2
    );
    assert_eq!(
        code(&kanc(
            &["train", "--config", "missing.toml", "--out", "x"],
            dir.path()
        )),
        2
    );
    assert_eq!(
        code(&kanc(
            &["train", "--arch", "mlp1", "--out", "x"],
            dir.path()
        )),
        2
    );
    assert_eq!(
        code(&kanc(
            &["eval", "--checkpoint", "missing.json", "--out", "x"],
            dir.path()
        )),
        2
    );
    assert_eq!(
        code(&kanc(
            &[
                "symbolic",
                "--checkpoint",
                "missing.json",
                "--mode",
                "posthoc",
                "--out",
                "x"
            ],
            dir.path()
        )),
        2
    );
    assert_eq!(code(&kanc(&["frobnicate"], dir.path())), 2);
}

#[test]
fn divergence_exits_3_with_partial_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    // an absurd rate blows the exponential current conversion up
    let o = kanc(
        &[
            "train", "--arch", "mlp1", "--target", "I_D", "--step", "50", "--epochs", "200",
            "--lr", "1e6", "--out", "div",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(dir.path().join("div/checkpoint.json").exists());
    assert!(dir.path().join("div/manifest.json").exists());
}

#[test]
fn symbolic_iterative_on_18_edge_kan_runs_six_rounds() {
    let dir = tempfile::tempdir().unwrap();
    let o = kanc(
        &[
            "train", "--arch", "kan-sr", "--target", "Q_S", "--step", "50", "--epochs", "10",
            "--out", "kan",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = kanc(
        &[
            "symbolic",
            "--checkpoint",
            "kan/checkpoint.json",
            "--mode",
            "iterative",
            "--k",
            "3",
            "--epochs",
            "10",
            "--out",
            "sr",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rounds = read(dir.path().join("sr/rounds.csv"));
    let mut ids: Vec<&str> = rounds
        .lines()
        .skip(1)
        .map(|l| l.split(',').next().unwrap())
        .collect();
    assert_eq!(ids.len(), 18);
    ids.dedup();
    assert_eq!(ids, ["1", "2", "3", "4", "5", "6"]);
    assert!(read(dir.path().join("sr/formula.txt")).starts_with("Q_S = "));
    let tree: serde_json::Value =
        serde_json::from_str(&read(dir.path().join("sr/formula.json"))).unwrap();
    assert!(tree["expr"]["op"].is_string());

    let o = kanc(
        &[
            "symbolic",
            "--checkpoint",
            "kan/checkpoint.json",
            "--mode",
            "posthoc",
            "--out",
            "ph",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    let rounds = read(dir.path().join("ph/rounds.csv"));
    assert!(rounds.lines().skip(1).all(|l| l.starts_with("1,")));
}

#[test]
fn eval_derivs_and_report() {
    let dir = tempfile::tempdir().unwrap();
    for (out, seed) in [("m0", "0"), ("m1", "1")] {
        let o = kanc(
            &[
                "train", "--arch", "mlp1", "--target", "I_D", "--step", "50", "--epochs", "30",
                "--seed", seed, "--out", out,
            ],
            dir.path(),
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    }
    let o = kanc(
        &["eval", "--checkpoint", "m0/checkpoint.json", "--out", "ev"],
        dir.path(),
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let summary = read(dir.path().join("ev/summary.csv"));
    assert!(summary.starts_with(
        "label,target,step_mv,seed,train_mape,test_mape,waviness_0.4V,waviness_0.8V\n"
    ));
    assert!(summary.contains("\nm0,I_D,50,0,"));

    let o = kanc(
        &[
            "derivs",
            "--checkpoint",
            "m0/checkpoint.json",
            "--out",
            "dv",
        ],
        dir.path(),
    );
    assert_eq!(code(&o), 0);
    assert!(dir.path().join("dv/curve_vd0.4.csv").exists());
    assert!(dir.path().join("dv/curve_vd0.8.csv").exists());

    let args = [
        "report",
        "--checkpoint",
        "m0/checkpoint.json",
        "--checkpoint",
        "m1/checkpoint.json",
        "--out",
    ];
    for out in ["r1", "r2"] {
        let mut a = args.to_vec();
        a.push(out);
        assert_eq!(code(&kanc(&a, dir.path())), 0);
    }
    for f in ["summary.csv", "stats.csv", "manifest.json"] {
        assert_eq!(
            read(dir.path().join("r1").join(f)),
            read(dir.path().join("r2").join(f)),
            "{f} differs"
        );
    }
}
