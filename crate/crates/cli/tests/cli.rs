use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn styleqg(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_styleqg"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .env_remove("RAST_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn stdout_json(out: &Output) -> Value {
    assert!(
        out.status.success(),
        "stderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    serde_json::from_slice(&out.stdout).unwrap()
}

fn error_json(out: &Output) -> Value {
    let line = String::from_utf8_lossy(&out.stderr);
    serde_json::from_str(line.lines().last().unwrap()).unwrap()
}

#[test]
fn show_config_applies_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let out = styleqg(dir.path(), &["show-config"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("lambda = 0.5"));
    assert!(text.contains("kl_beta = 0.1"));

    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "preset = \"newsqa\"\nseed = 3\n").unwrap();
    let out = styleqg(
        dir.path(),
        &[
            "--config",
            cfg.to_str().unwrap(),
            "--set",
            "seed=9",
            "show-config",
        ],
    );
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("lambda = 0.4"), "{text}");
    assert!(text.contains("seed = 9"));
}

#[test]
fn bad_config_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = styleqg(dir.path(), &["--set", "lambda=2.0", "show-config"]);
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "Config");
}

#[test]
fn out_of_order_stage_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    for args in [
        &["build-index"][..],
        &["train"],
        &["generate"],
        &["evaluate"],
        &["build-corpus"],
    ] {
        let out = styleqg(dir.path(), args);
        assert_eq!(out.status.code(), Some(3), "{args:?}");
        let err = error_json(&out);
        assert_eq!(err["error"], "StageDependency");
        assert_eq!(err["exit_code"], 3);
    }
    assert!(!dir.path().join(".styleqg.lock").exists());
}

#[test]
fn malformed_dataset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("bad.jsonl");
    fs::write(
        &data,
        "{\"context\":\"a b c\",\"answer\":\"z\",\"answer_start\":0,\"question\":\"q ?\"}\n",
    )
    .unwrap();
    let out = styleqg(
        dir.path(),
        &["build-corpus", "--dataset", data.to_str().unwrap()],
    );
    assert_eq!(out.status.code(), Some(2));
    assert_eq!(error_json(&out)["error"], "Validation");
}

#[test]
fn locked_workdir_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join(".styleqg.lock"), "1").unwrap();
    let out = styleqg(dir.path(), &["synth"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn evaluate_crafted_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = "Lumen acquired Fathom in 1995 .";
    let data = dir.path().join("d.jsonl");
    fs::write(
        &data,
        format!(
            "{{\"id\":\"a\",\"context\":\"{ctx}\",\"answer\":\"Fathom\",\"answer_start\":15,\"question\":\"which company was acquired by Lumen ?\"}}\n\
             {{\"id\":\"b\",\"context\":\"{ctx}\",\"answer\":\"1995\",\"answer_start\":25,\"question\":\"when did Lumen acquire Fathom ?\"}}\n"
        ),
    )
    .unwrap();
    let gens = dir.path().join("g.jsonl");
    let rec = |id: &str, rank: usize, q: &str| {
        format!("{{\"id\":\"{id}\",\"rank\":{rank},\"template\":\"\",\"question\":\"{q}\",\"log_prob\":0.0}}\n")
    };
    fs::write(
        &gens,
        [
            rec("a", 2, "x y z"),
            rec("a", 1, "which company was acquired by Lumen ?"),
            rec("b", 1, "x y z"),
            rec("b", 2, "x y z"),
        ]
        .concat(),
    )
    .unwrap();
    let out = styleqg(
        dir.path(),
        &[
            "evaluate",
            "--outputs",
            gens.to_str().unwrap(),
            "--dataset",
            data.to_str().unwrap(),
        ],
    );
    let r = stdout_json(&out);
    // a: top-1 and oracle 100, pairwise 0, one of two questions answered;
    // b: everything 0 except pairwise 100
    assert_eq!(r["samples"], 2);
    assert_eq!(r["top1"], 50.0);
    assert_eq!(r["oracle"], 50.0);
    assert_eq!(r["pairwise"], 50.0);
    assert_eq!(r["overall"], 50.0);
    assert_eq!(r["em"], 25.0);
    assert_eq!(r["f1"], 25.0);
    let saved: Value =
        serde_json::from_slice(&fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(saved, r);
}

#[test]
fn small_pipeline_end_to_end_and_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    let common = [
        "--preset",
        "desk",
        "--set",
        "sl_epochs=2",
        "--set",
        "rl_epochs=1",
        "--set",
        "dev_limit=5",
    ];
    let run = |args: &[&str]| {
        let mut all: Vec<&str> = common.to_vec();
        all.extend_from_slice(args);
        stdout_json(&styleqg(w, &all))
    };
    run(&["synth", "--train", "40", "--dev", "8", "--test", "6"]);
    let corpus = run(&["build-corpus"]);
    assert!(corpus["templates"].as_u64().unwrap() > 0);
    assert!(corpus["max_pairwise_jaccard"].as_f64().unwrap() <= 0.8);
    run(&["build-index"]);
    let trained = run(&["train"]);
    assert!(trained["best_epoch"].as_u64().unwrap() >= 1);
    let g = run(&["generate", "-n", "3"]);
    assert_eq!(g["samples"], 6);
    assert_eq!(g["questions"], 18);
    let first = fs::read(w.join("generations.jsonl")).unwrap();
    run(&["evaluate"]);
    let report = fs::read(w.join("report.json")).unwrap();

    // rerunning a stage with the same inputs rewrites identical artifacts
    run(&["generate", "-n", "3"]);
    assert_eq!(fs::read(w.join("generations.jsonl")).unwrap(), first);
    run(&["evaluate"]);
    assert_eq!(fs::read(w.join("report.json")).unwrap(), report);

    let manifest: Value =
        serde_json::from_slice(&fs::read(w.join("manifest.json")).unwrap()).unwrap();
    for stage in [
        "data",
        "corpus",
        "index",
        "supervised",
        "rl",
        "generate",
        "evaluate",
    ] {
        assert_eq!(manifest["completed"][stage], true, "{stage}");
    }
    assert_eq!(manifest["corpus"], "corpus.jsonl");
    assert!(w.join("checkpoints/epoch-1/style.json").exists());
    assert!(w.join("checkpoints/history.csv").exists());

    // N = 1 keeps only the vanilla slot
    let one = dir.path().join("one.jsonl");
    run(&["generate", "-n", "1", "--out", one.to_str().unwrap()]);
    let text = fs::read_to_string(&one).unwrap();
    assert_eq!(text.lines().count(), 6);
    assert!(text
        .lines()
        .all(|l| l.contains("\"rank\":1,\"template\":\"\"")));
}
