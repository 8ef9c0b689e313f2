use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

fn rt(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rt"))
        .current_dir(dir)
        .args(args)
        .env_remove("RT_ENDPOINT")
        .env_remove("RT_TOKEN")
        .output()
        .expect("spawn rt")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = rt(dir, args);
    assert!(
        out.status.success(),
        "rt {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn metric_value(json: &str, idx: usize) -> f64 {
    let v: serde_json::Value = serde_json::from_str(json).unwrap();
    v[idx]["value"].as_f64().unwrap()
}

#[test]
fn fixture_index_search_eval_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["fixture", "--out", "fx", "--n", "12", "--dim", "16", "--seed", "5"]);
    for f in ["corpus.jsonl", "queries.jsonl", "qrels.tsv", "additive.json"] {
        assert!(d.join("fx").join(f).exists(), "{f}");
    }
    let params = ["--params", "fx/additive.json"];
    ok(d, &[&["index", "--corpus", "fx/corpus.jsonl", "--out", "idx.rtix"][..], &params].concat());
    assert_eq!(&std::fs::read(d.join("idx.rtix")).unwrap()[..4], b"RTIX");

    let mut values = Vec::new();
    for steps in ["0", "2"] {
        let run = format!("run{steps}.trec");
        ok(
            d,
            &[
                &["search", "--index", "idx.rtix", "--queries", "fx/queries.jsonl", "--k", "5"][..],
                &["--steps", steps, "--out", &run],
                &params,
            ]
            .concat(),
        );
        let text = std::fs::read_to_string(d.join(&run)).unwrap();
        assert_eq!(text.lines().count(), 12 * 5);
        assert!(text.lines().all(|l| l.split(' ').count() == 6 && l.ends_with(" rt")));
        let json = ok(d, &["eval", "--run", &run, "--qrels", "fx/qrels.tsv", "--metric", "ndcg@1,mrr"]);
        values.push((metric_value(&json, 0), metric_value(&json, 1)));
    }
    assert_eq!(values[0].0, 0.0);
    assert_eq!(values[1], (1.0, 1.0));
}

#[test]
fn search_rejects_index_from_other_width() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["fixture", "--out", "fx", "--n", "3", "--dim", "8"]);
    ok(d, &["index", "--params", "fx/additive.json", "--corpus", "fx/corpus.jsonl", "--out", "i.rtix"]);
    let out = rt(d, &["search", "--index", "i.rtix", "--query", "x", "--backend", "toy", "--dim", "16"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("dim"));
}

#[test]
fn refine_reports_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let json = ok(dir.path(), &["refine", "river bank", "--steps", "3", "--dim", "16", "--all-states"]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["steps_executed"], 3);
    assert_eq!(v["states"].as_array().unwrap().len(), 4);
    assert_eq!(v["final"].as_array().unwrap().len(), 16);
    assert_eq!(v["backend"], "toy-s42-d16");

    let json = ok(
        dir.path(),
        &["refine", "river bank", "--backend", "additive", "--steps", "64", "--epsilon", "1e-6"],
    );
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["stop_reason"], "Converged");
    assert!(v["steps_executed"].as_u64().unwrap() < 64);

    assert!(!rt(dir.path(), &["refine", "x", "--steps", "65"]).status.success());
}

#[test]
fn sweep_from_toml_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("exp.toml"),
        r#"
        steps = [0, 1, 2]
        metrics = ["ndcg@1", "mrr"]
        out_dir = "out"

        [[datasets]]
        kind = "two_hop"
        n_queries = 10
        dim = 16
        "#,
    )
    .unwrap();
    let summary = ok(d, &["--config", "exp.toml", "sweep"]);
    assert!(summary.contains("two-hop"));
    let csv = std::fs::read_to_string(d.join("out/results.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "dataset,backend,T,metric,k,value,ms");
    assert_eq!(csv.lines().count(), 1 + 3 * 2);
    assert!(csv.contains("two-hop,additive-a0.5-d16,2,ndcg,1,1,0"));
    assert_eq!(std::fs::read_dir(d.join("out/runs")).unwrap().count(), 3);

    // --steps overrides the file
    ok(d, &["--config", "exp.toml", "sweep", "--steps", "0", "--out", "out2"]);
    let csv = std::fs::read_to_string(d.join("out2/results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 2);
}

#[test]
fn bad_config_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "stepz = [1]\n").unwrap();
    let out = rt(dir.path(), &["--config", "bad.toml", "sweep"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.toml"));
}

#[test]
fn serve_and_query_remotely() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut server = Command::new(env!("CARGO_BIN_EXE_rt"))
        .args(["serve", "--addr", "127.0.0.1:0", "--backend", "additive", "--dim", "8", "--token", "tok"])
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(server.stdout.take().unwrap()).read_line(&mut line).unwrap();
    let url = line.trim().rsplit(' ').next().unwrap().to_string();
    assert!(url.starts_with("http://127.0.0.1:"), "{line}");

    let remote = |token: Option<&str>| {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_rt"));
        cmd.current_dir(d)
            .args(["refine", "river bank", "--backend", "remote", "--steps", "2"])
            .env("RT_ENDPOINT", &url)
            .env_remove("RT_TOKEN");
        if let Some(t) = token {
            cmd.env("RT_TOKEN", t);
        }
        cmd.output().unwrap()
    };
    let denied = remote(None);
    let allowed = remote(Some("tok"));
    let local = ok(d, &["refine", "river bank", "--backend", "additive", "--dim", "8", "--steps", "2"]);
    let _ = server.kill();
    let _ = server.wait();

    assert!(!denied.status.success());
    assert!(String::from_utf8_lossy(&denied.stderr).contains("401"));
    assert!(allowed.status.success(), "{}", String::from_utf8_lossy(&allowed.stderr));
    let a: serde_json::Value = serde_json::from_slice(&allowed.stdout).unwrap();
    let b: serde_json::Value = serde_json::from_str(&local).unwrap();
    let (fa, fb) = (a["final"].as_array().unwrap(), b["final"].as_array().unwrap());
    assert_eq!(fa.len(), 8);
    for (x, y) in fa.iter().zip(fb) {
        assert!((x.as_f64().unwrap() - y.as_f64().unwrap()).abs() < 1e-12);
    }
}
