use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 14] = [
    "--set",
    "data.source_train=3",
    "--set",
    "data.target_train=3",
    "--set",
    "data.target_eval=3",
    "--set",
    "train.iters_pretrain=2",
    "--set",
    "train.iters_align=2",
    "--set",
    "train.iters_full=2",
    "--set",
    "seeds=[0]",
];

fn cotrain(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cotrain"))
        .args(args)
        .args(TINY)
        .arg("--out")
        .arg(out)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "status {:?}\nstdout {}\nstderr {}",
        o.status,
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn generate_refuses_to_overwrite_without_force() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(&cotrain(out, &["generate"]));
    for split in ["source_train", "target_train", "target_eval"] {
        assert!(
            out.join("data").join(split).join("manifest.json").exists(),
            "{split}"
        );
    }
    let manifest = read(&out.join("data/target_eval/manifest.json"));
    let again = cotrain(out, &["generate"]);
    assert_eq!(again.status.code(), Some(2));
    ok(&cotrain(out, &["generate", "--force"]));
    assert_eq!(read(&out.join("data/target_eval/manifest.json")), manifest);
}

#[test]
fn train_without_dataset_names_the_generate_command() {
    let dir = tempfile::tempdir().unwrap();
    let o = cotrain(dir.path(), &["train"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cotrain generate"));
}

#[test]
fn config_errors_have_their_own_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["config", "--set", "train.alfa=1"][..],
        &["config", "--set", "train.alpha=-1"][..],
        &["config", "--variant", "everything"][..],
        &["config", "--config", "/nonexistent/spec.toml"][..],
    ] {
        assert_eq!(cotrain(dir.path(), args).status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn config_file_and_overrides_combine() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("spec.toml");
    std::fs::write(
        &file,
        "oracle = false\n[train]\nalpha = 0.25\ngamma = 0.3\n",
    )
    .unwrap();
    let o = cotrain(
        dir.path(),
        &[
            "config",
            "--config",
            file.to_str().unwrap(),
            "--set",
            "train.gamma=0.5",
        ],
    );
    ok(&o);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("alpha = 0.25"));
    assert!(text.contains("gamma = 0.5"));
    assert!(text.contains("oracle = false"));
    assert!(text.contains("iters_pretrain = 2"));
}

#[test]
fn train_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(&cotrain(out, &["generate"]));
    ok(&cotrain(out, &["train", "--variant", "full"]));
    let run = out.join("runs/full_seed0");
    let log = read(&run.join("log.jsonl"));
    assert_eq!(log.lines().count(), 6);
    for key in ["l_adv_t", "l_rpn_t", "l_cls_t", "l_mcd"] {
        assert!(log.lines().last().unwrap().contains(key), "{key}");
    }
    // a second call finds every stage finished and changes nothing
    ok(&cotrain(out, &["train", "--variant", "full"]));
    assert_eq!(read(&run.join("log.jsonl")), log);

    ok(&cotrain(out, &["train", "--variant", "source_only"]));
    let plain = read(&out.join("runs/source_only_seed0/log.jsonl"));
    assert!(!plain.contains("l_adv") && !plain.contains("l_mcd"));

    let e1 = cotrain(out, &["eval", "--variant", "full"]);
    ok(&e1);
    assert!(String::from_utf8_lossy(&e1.stdout).contains("mAP"));
    let report_path = run.join("final_target_eval.report.json");
    let report = read(&report_path);
    ok(&cotrain(out, &["eval", "--variant", "full"]));
    assert_eq!(read(&report_path), report);

    let mismatch = cotrain(
        out,
        &["eval", "--variant", "full", "--set", "detector.fc_dim=64"],
    );
    assert_eq!(mismatch.status.code(), Some(5));
    let changed_data = cotrain(
        out,
        &[
            "eval",
            "--variant",
            "full",
            "--set",
            "shift.noise_sigma=0.3",
        ],
    );
    assert_eq!(changed_data.status.code(), Some(5));
    let missing = cotrain(out, &["eval", "--variant", "cst_only"]);
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn ablate_writes_table_and_plot_data() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path();
    ok(&cotrain(out, &["generate"]));
    let o = cotrain(
        out,
        &[
            "ablate",
            "--variant",
            "source_only",
            "--variant",
            "cst_only",
        ],
    );
    ok(&o);
    let table = read(&out.join("ablation/table.txt"));
    assert!(table.contains("source_only") && table.contains("cst_only"));
    assert!(table.contains("oracle [oracle]"));
    let plot: serde_json::Value =
        serde_json::from_str(&read(&out.join("ablation/plot_data.json"))).unwrap();
    let series = plot["series"].as_array().unwrap();
    let names: Vec<&str> = series.iter().map(|s| s["name"].as_str().unwrap()).collect();
    assert_eq!(
        names,
        ["source_only", "naive_alignment", "rpn_adaptation", "oracle"]
    );
    assert!(series
        .iter()
        .all(|s| s["counts"].as_array().unwrap().len() == 10));
    assert!(out.join("ablation/logs/oracle_seed0.jsonl").exists());

    ok(&cotrain(out, &["plot"]));
    let svg = read(&out.join("ablation/coverage.svg"));
    assert!(svg.starts_with("<svg"));
}

#[test]
fn plot_without_data_is_a_missing_artifact() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cotrain(dir.path(), &["plot"]).status.code(), Some(3));
}
