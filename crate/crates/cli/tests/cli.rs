use std::path::Path;
use std::process::{Command, Output};

fn reicl(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reicl"))
        .current_dir(dir)
        .args(args)
        .env_remove("REICL_LLM_URL")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn line(id: &str, label: &str, tag: &str) -> String {
    serde_json::json!({
        "id": id,
        "tokens": ["the", "alpha", "met", "the", "beta", tag],
        "subj": {"start": 1, "end": 2, "type": null, "text": "alpha"},
        "obj": {"start": 4, "end": 5, "type": null, "text": "beta"},
        "label": label,
    })
    .to_string()
}

fn fixture(dir: &Path) {
    std::fs::write(dir.join("schema.json"), r#"{"labels": ["A", "B"]}"#).unwrap();
    let labels = ["A", "B", "NULL"];
    let train: Vec<String> = (0..18)
        .map(|i| {
            line(
                &format!("tr{i:02}"),
                labels[i % 3],
                ["red", "green", "blue"][i % 3],
            )
        })
        .collect();
    let test: Vec<String> = (0..6)
        .map(|i| {
            line(
                &format!("te{i:02}"),
                labels[i % 3],
                ["red", "green", "blue"][i % 3],
            )
        })
        .collect();
    std::fs::write(dir.join("train.jsonl"), train.join("\n") + "\n").unwrap();
    std::fs::write(dir.join("test.jsonl"), test.join("\n") + "\n").unwrap();
    std::fs::write(
        dir.join("run.toml"),
        "dataset = \"toy\"\nschema = \"schema.json\"\ntrain = \"train.jsonl\"\ntest = \"test.jsonl\"\nstrategy = \"knn_sent\"\nk = 3\n\n[llm]\nprovider = \"mock_oracle\"\n\n[embedding]\ndim = 32\n",
    )
    .unwrap();
}

#[test]
fn run_eval_report_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    let o = reicl(
        d,
        &[
            "run",
            "--config",
            "run.toml",
            "--out",
            "out",
            "--cache-dir",
            "cache",
            "--seed",
            "3",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("micro"));
    for f in [
        "predictions.jsonl",
        "selections.jsonl",
        "manifest.json",
        "report.json",
        "confusion.csv",
    ] {
        assert!(d.join("out").join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("out/manifest.json")).unwrap())
            .unwrap();
    assert_eq!(manifest["seed"], 3);
    assert_eq!(manifest["strategy"], "knn_sent");
    assert_eq!(manifest["provider"], "mock_oracle");

    let o = reicl(
        d,
        &[
            "eval",
            "--predictions",
            "out/predictions.jsonl",
            "--schema",
            "schema.json",
            "--json",
        ],
    );
    assert!(o.status.success());
    let from_eval: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    let from_run: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(d.join("out/report.json")).unwrap()).unwrap();
    assert_eq!(from_eval, from_run);

    let o = reicl(d, &["report", "out"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("NULL overprediction"));
}

#[test]
fn flags_alone_are_enough() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    let o = reicl(
        d,
        &[
            "run",
            "--dataset",
            "toy",
            "--schema",
            "schema.json",
            "--train",
            "train.jsonl",
            "--test",
            "test.jsonl",
            "--strategy",
            "random_balanced",
            "-k",
            "2",
            "--provider",
            "mock_oracle",
            "--input-budget-tokens",
            "2000",
            "--out",
            "o2",
            "--cache-dir",
            "c2",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let manifest = std::fs::read_to_string(d.join("o2/manifest.json")).unwrap();
    assert!(manifest.contains("\"input_budget_tokens\": 2000"));
}

#[test]
fn sweep_writes_curve() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    let o = reicl(
        d,
        &[
            "sweep",
            "--config",
            "run.toml",
            "--strategies",
            "random_balanced,knn_sent",
            "--ks",
            "1,2",
            "--out",
            "sw",
            "--cache-dir",
            "c",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let curve = std::fs::read_to_string(d.join("sw/curve.csv")).unwrap();
    assert_eq!(curve.lines().next(), Some("strategy,k,micro_f1"));
    assert_eq!(curve.lines().count(), 5);
    assert!(d.join("sw/knn_sent-k2/report.json").exists());
    let o = reicl(d, &["report", "sw"]);
    assert!(stdout(&o).contains("knn_sent"));
}

#[test]
fn ingest_embed_index_subset_reason() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    let o = reicl(
        d,
        &[
            "ingest",
            "--data",
            "train.jsonl",
            "--schema",
            "schema.json",
            "--out",
            "norm",
        ],
    );
    assert!(o.status.success());
    assert!(stdout(&o).contains("18 instances"));
    assert!(d.join("norm/train.jsonl").exists());

    let o = reicl(
        d,
        &[
            "embed",
            "--data",
            "train.jsonl",
            "--schema",
            "schema.json",
            "--regime",
            "entprompt",
            "--vectors",
            "v/train.jsonl",
            "--dim",
            "16",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let first = std::fs::read(d.join("v/train.jsonl")).unwrap();
    let o = reicl(
        d,
        &[
            "embed",
            "--data",
            "train.jsonl",
            "--schema",
            "schema.json",
            "--regime",
            "entprompt",
            "--vectors",
            "v/train.jsonl",
            "--dim",
            "16",
        ],
    );
    assert!(o.status.success());
    assert_eq!(std::fs::read(d.join("v/train.jsonl")).unwrap(), first);

    let o = reicl(
        d,
        &[
            "index",
            "--vectors",
            "v/train.jsonl",
            "-k",
            "2",
            "--exclude-self",
        ],
    );
    assert!(o.status.success());
    let lines: Vec<serde_json::Value> = stdout(&o)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 18);
    assert!(lines.iter().all(
        |l| l["neighbors"].as_array().unwrap().len() == 2 && l["neighbors"][0]["id"] != l["id"]
    ));

    let o = reicl(
        d,
        &[
            "sample-subset",
            "--data",
            "train.jsonl",
            "--schema",
            "schema.json",
            "--split",
            "train",
            "-n",
            "9",
            "--output",
            "sub.jsonl",
        ],
    );
    assert!(o.status.success());
    assert_eq!(
        std::fs::read_to_string(d.join("sub.jsonl"))
            .unwrap()
            .lines()
            .count(),
        9
    );

    let o = reicl(
        d,
        &[
            "reason",
            "--config",
            "run.toml",
            "--provider",
            "mock_echo",
            "--limit",
            "4",
            "--cache-dir",
            "rc",
        ],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("4 generated"));
    let o = reicl(
        d,
        &[
            "reason",
            "--config",
            "run.toml",
            "--provider",
            "mock_echo",
            "--limit",
            "4",
            "--cache-dir",
            "rc",
        ],
    );
    assert!(stdout(&o).contains("0 generated, 4 cached"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fixture(d);
    // Usage: missing required run fields.
    assert_eq!(reicl(d, &["run"]).status.code(), Some(1));
    assert_eq!(
        reicl(d, &["run", "--config", "run.toml", "-k", "0"])
            .status
            .code(),
        Some(1)
    );
    assert_eq!(reicl(d, &["--help"]).status.code(), Some(0));

    // Data: a label outside the schema.
    std::fs::write(d.join("bad.jsonl"), line("x", "C", "red") + "\n").unwrap();
    let o = reicl(
        d,
        &["ingest", "--data", "bad.jsonl", "--schema", "schema.json"],
    );
    assert_eq!(o.status.code(), Some(2));

    // Provider: nothing listens on the endpoint.
    let port = std::net::TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .port();
    let o = Command::new(env!("CARGO_BIN_EXE_reicl"))
        .current_dir(d)
        .args([
            "run",
            "--config",
            "run.toml",
            "--provider",
            "http",
            "--max-retries",
            "0",
            "--out",
            "o",
            "--cache-dir",
            "c",
        ])
        .env("REICL_LLM_URL", format!("http://127.0.0.1:{port}/"))
        .output()
        .unwrap();
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let manifest = std::fs::read_to_string(d.join("o/manifest.json")).unwrap();
    assert!(manifest.contains("\"status\": \"failed\""));
}
