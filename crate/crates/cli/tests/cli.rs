use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};

use serde_json::{json, Value};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_evalsample"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn evalsample")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// A small synthetic test set written to `dir/name`.
fn synth(dir: &Path, name: &str, segments: usize, seed: u64) -> PathBuf {
    let path = dir.join(name);
    let o = run(&[
        "gen-synth",
        "--out",
        p(&path),
        "--segments",
        &segments.to_string(),
        "--documents",
        "8",
        "--seed",
        &seed.to_string(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    path
}

/// Ratings file taking the true scores for the given ids.
fn ratings_for(test_set: &Path, ids: &[String], out: &Path) {
    let text = std::fs::read_to_string(test_set).unwrap();
    let scores: std::collections::HashMap<&str, &str> = text
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            (f[0], f[2])
        })
        .collect();
    let body: String = ids
        .iter()
        .map(|id| format!("{id}\t{}\n", scores[id.as_str()]))
        .collect();
    std::fs::write(out, body).unwrap();
}

fn all_ids(test_set: &Path) -> Vec<String> {
    std::fs::read_to_string(test_set)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split('\t').next().unwrap().to_string())
        .collect()
}

fn field(out: &str, key: &str) -> String {
    out.lines()
        .find_map(|l| {
            l.strip_prefix(key)
                .filter(|r| r.starts_with(' '))
                .map(|r| r.trim().to_string())
        })
        .unwrap_or_else(|| panic!("no {key} in {out}"))
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(run(&[]).status.code(), Some(1));
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["plan", "--budget", "3"]).status.code(), Some(1));
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.tsv");
    std::fs::write(&bad, "segment_id\tdoc_id\tscore\ns1\td\t1\ns1\td\t2\n").unwrap();
    let o = run(&[
        "plan",
        "--test-set",
        p(&bad),
        "--budget",
        "1",
        "--out",
        p(&dir.path().join("x")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 3") && err.contains("s1"), "{err}");
}

#[test]
fn plan_is_deterministic_and_balanced() {
    let dir = tempfile::tempdir().unwrap();
    let ts = dir.path().join("two.tsv");
    std::fs::write(
        &ts,
        "segment_id\tdoc_id\tscore\na1\tA\t\na2\tA\t\na3\tA\t\nb1\tB\t\nb2\tB\t\nb3\tB\t\n",
    )
    .unwrap();
    let out1 = dir.path().join("p1.txt");
    let out2 = dir.path().join("p2.txt");
    for out in [&out1, &out2] {
        let o = run(&[
            "plan",
            "--test-set",
            p(&ts),
            "--budget",
            "4",
            "--seed",
            "7",
            "--out",
            p(out),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ids = std::fs::read_to_string(&out1).unwrap();
    assert_eq!(ids, std::fs::read_to_string(&out2).unwrap());
    let ids: Vec<&str> = ids.lines().collect();
    assert_eq!(ids.len(), 4);
    assert_eq!(ids.iter().filter(|i| i.starts_with('a')).count(), 2);
    let sidecar: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("p1.txt.json")).unwrap()).unwrap();
    assert_eq!(sidecar["seed"], 7);
    assert_eq!(
        sidecar["bins"],
        json!([{"size": 3, "count": 2}, {"size": 3, "count": 2}])
    );

    let census = dir.path().join("all.txt");
    assert!(
        run(&["plan", "--test-set", p(&ts), "--budget", "6", "--out", p(&census)])
            .status
            .success()
    );
    let mut got: Vec<String> = std::fs::read_to_string(&census)
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    got.sort();
    assert_eq!(got, ["a1", "a2", "a3", "b1", "b2", "b3"]);
    assert_eq!(
        run(&["plan", "--test-set", p(&ts), "--budget", "7", "--out", p(&census)])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn estimate_census_and_small_n() {
    let dir = tempfile::tempdir().unwrap();
    let ts = synth(dir.path(), "s.tsv", 120, 3);
    let ids = all_ids(&ts);
    let full = dir.path().join("full.tsv");
    ratings_for(&ts, &ids, &full);
    let o = run(&["estimate", "--test-set", p(&ts), "--ratings", p(&full)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let text_scores = std::fs::read_to_string(&ts).unwrap();
    let scores: Vec<f64> = text_scores
        .lines()
        .skip(1)
        .map(|l| l.split('\t').nth(2).unwrap().parse().unwrap())
        .collect();
    let mu = scores.iter().sum::<f64>() / scores.len() as f64;
    let est: f64 = field(&text, "estimate").parse().unwrap();
    assert!((est - mu).abs() < 1e-9, "{est} vs {mu}");
    assert!(field(&text, "hoeffding").parse::<f64>().is_ok());
    assert!(field(&text, "bernstein").parse::<f64>().is_ok());
    assert!(!text.contains("unreliable"));

    let few = dir.path().join("few.tsv");
    ratings_for(&ts, &ids[..20], &few);
    let text = stdout(&run(&[
        "estimate",
        "--test-set",
        p(&ts),
        "--ratings",
        p(&few),
        "--strata",
        "none",
    ]));
    assert_eq!(field(&text, "n"), "20");
    assert!(text.contains("n = 20 <= 30"), "{text}");
}

#[test]
fn estimate_rejects_cv_without_metrics_and_unknown_ids() {
    let dir = tempfile::tempdir().unwrap();
    let ts = dir.path().join("plain.tsv");
    std::fs::write(&ts, "segment_id\tdoc_id\tscore\ns1\td\t1\ns2\td\t2\n").unwrap();
    let r = dir.path().join("r.tsv");
    std::fs::write(&r, "s1\t1\n").unwrap();
    let o = run(&["estimate", "--test-set", p(&ts), "--ratings", p(&r), "--cv", "knn"]);
    assert_ne!(o.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&o.stderr).contains("metric"));
    assert!(run(&["estimate", "--test-set", p(&ts), "--ratings", p(&r)])
        .status
        .success());
    std::fs::write(&r, "s9\t1\n").unwrap();
    assert_eq!(
        run(&["estimate", "--test-set", p(&ts), "--ratings", p(&r)])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn simulate_outputs_and_reruns_identically() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a.tsv", 80, 1);
    let b = synth(dir.path(), "b.tsv", 90, 2);
    let args = |tag: &str| -> Vec<String> {
        [
            "simulate",
            "--test-set",
            p(&a),
            "--test-set",
            p(&b),
            "--draws",
            "3",
            "--methods",
            "docs-prop,docs-prop+cv-knn",
            "--results",
            p(&dir.path().join(format!("res{tag}.csv"))),
            "--curves",
            p(&dir.path().join(format!("cur{tag}.csv"))),
        ]
        .map(String::from)
        .to_vec()
    };
    let o1 = bin().args(args("1")).output().unwrap();
    let o2 = bin().args(args("2")).output().unwrap();
    assert!(o1.status.success(), "{}", String::from_utf8_lossy(&o1.stderr));
    assert_eq!(o1.stdout, o2.stdout);
    let r1 = std::fs::read(dir.path().join("res1.csv")).unwrap();
    assert_eq!(r1, std::fs::read(dir.path().join("res2.csv")).unwrap());
    // header + methods (3 with baseline) × sizes (10) × simulations (2)
    assert_eq!(String::from_utf8(r1).unwrap().lines().count(), 1 + 3 * 10 * 2);
    let curves = std::fs::read_to_string(dir.path().join("cur1.csv")).unwrap();
    assert_eq!(curves.lines().filter(|l| l.starts_with("docs-prop,")).count(), 10);
    let text = stdout(&o1);
    let header = text.lines().nth(1).unwrap();
    let cols: Vec<&str> = header.split("  ").map(str::trim).filter(|c| !c.is_empty()).collect();
    assert_eq!(cols, ["method", "abs error", "sdev", "win %"]);
}

#[test]
fn calibrate_with_override() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a.tsv", 100, 4);
    let o = run(&[
        "calibrate",
        "--test-set",
        p(&a),
        "--bound",
        "hoeffding",
        "--R",
        "4",
        "--draws",
        "5",
        "--sizes",
        "0.1,0.5",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(
        text.starts_with("bound hoeffding  gamma 0.95  R 4 (override)"),
        "{text}"
    );
    assert!(text.lines().nth(1).unwrap().contains("cal"));
    assert_eq!(text.lines().count(), 3 + 4);
}

#[test]
fn config_file_and_unknown_key() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "a.tsv", 60, 5);
    let cfg = dir.path().join("c.cfg");
    std::fs::write(&cfg, "drawz = 3\n").unwrap();
    let o = run(&["simulate", "--test-set", p(&a), "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("draws_per_size"));
    std::fs::write(&cfg, "draws_per_size = 2\nmethods = baseline\nsize_fractions = 0.5\n").unwrap();
    let o = run(&["simulate", "--test-set", p(&a), "--config", p(&cfg)]);
    assert!(o.status.success());
    assert!(stdout(&o).starts_with("1 simulation(s), 1 size(s) x 2 draws"));
}

struct Server(Child, String);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn start_server(test_set: &Path) -> Server {
    let mut child = bin()
        .args(["serve", "--test-set", p(test_set), "--port", "0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut line = String::new();
    BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let url = line
        .trim()
        .strip_prefix("listening on ")
        .expect("address line")
        .to_string();
    Server(child, url)
}

#[test]
fn serve_session_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ts = synth(dir.path(), "live.tsv", 40, 6);
    let server = start_server(&ts);
    let http = reqwest::blocking::Client::new();
    let url = |path: &str| format!("{}{path}", server.1);

    let health: Value = http.get(url("/healthz")).send().unwrap().json().unwrap();
    assert_eq!(health["status"], "ok");

    let bad = http
        .post(url("/sessions"))
        .json(&json!({"test_set": "live", "budget": 0}))
        .send()
        .unwrap();
    assert_eq!(bad.status().as_u16(), 400);
    let missing = http
        .post(url("/sessions"))
        .json(&json!({"test_set": "nope", "budget": 2}))
        .send()
        .unwrap();
    assert_eq!(missing.status().as_u16(), 404);

    let created = http
        .post(url("/sessions"))
        .json(&json!({"test_set": "live", "budget": 5, "seed": 3}))
        .send()
        .unwrap();
    assert_eq!(created.status().as_u16(), 201);
    let created: Value = created.json().unwrap();
    let id = created["session_id"].as_str().unwrap().to_string();

    let mut last = Value::Null;
    for k in 0..5 {
        let next: Value = http
            .get(url(&format!("/sessions/{id}/next")))
            .send()
            .unwrap()
            .json()
            .unwrap();
        let again: Value = http
            .get(url(&format!("/sessions/{id}/next")))
            .send()
            .unwrap()
            .json()
            .unwrap();
        assert_eq!(next, again);
        assert_eq!(next["status"], "pending");
        assert_eq!(next["progress"]["rated"], k);
        let seg = next["segment_id"].as_str().unwrap();
        let resp = http
            .post(url(&format!("/sessions/{id}/ratings")))
            .json(&json!({"segment_id": seg, "score": k as f64}))
            .send()
            .unwrap();
        assert_eq!(resp.status().as_u16(), 200);
        last = resp.json().unwrap();
        assert_eq!(last["result"]["n"], k + 1);
        if k == 0 {
            assert_eq!(last["result"]["estimate"], 0.0);
            assert_eq!(last["result"]["cv"], false);
            let stale = http
                .post(url(&format!("/sessions/{id}/ratings")))
                .json(&json!({"segment_id": seg, "score": 1.0}))
                .send()
                .unwrap();
            assert_eq!(stale.status().as_u16(), 409);
        }
    }
    assert_eq!(last["status"], "complete");
    let done: Value = http
        .get(url(&format!("/sessions/{id}/next")))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(done["status"], "complete");
    assert_eq!(done["result"], last["result"]);
    let report: Value = http
        .get(url(&format!("/sessions/{id}/report")))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(report["rows"].as_array().unwrap().len(), 5);
    assert_eq!(report["rows"][4]["estimate"], last["result"]["estimate"]);
    assert_eq!(
        http.get(url("/sessions/zzz/report")).send().unwrap().status().as_u16(),
        404
    );
}
