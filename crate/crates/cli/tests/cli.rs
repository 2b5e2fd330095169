use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Command, Output};

const CORPUS: &str = r#"{"turn_id":"a1","participant_id":"p1","timestamp":"2024-03-01T10:00:00Z","role":"student","text":"why does my loop not stop"}
{"turn_id":"a2","participant_id":"p1","timestamp":"2024-03-01T10:01:00Z","role":"tutor","text":"check the condition"}
{"turn_id":"a3","participant_id":"p1","timestamp":"2024-03-01T10:02:00Z","role":"student","text":"ok it works now"}
{"turn_id":"a4","participant_id":"p1","timestamp":"2024-03-01T12:00:00Z","role":"student","text":"new question about lists"}
{"turn_id":"b1","participant_id":"p2","timestamp":"2024-03-02T09:00:00Z","role":"student","text":"I am lost"}
{"turn_id":"b2","participant_id":"p2","timestamp":"2024-03-02T09:05:00Z","role":"student","text":"still lost"}
"#;

fn affect(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_affect"))
        .args(args)
        .env_remove("RUST_LOG")
        .output()
        .expect("run affect")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_corpus(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("corpus.jsonl");
    fs::write(&p, CORPUS).unwrap();
    p
}

#[test]
fn staged_commands_match_run() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = write_corpus(d);
    let cache = d.join("cache");
    let fused = d.join("fused.jsonl");

    let o = affect(&["annotate", "--mock", "--seed", "5", "--input", s(&corpus), "--cache-dir", s(&cache)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let stats: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(stats["provider_calls"], 18);

    let o = affect(&["annotate", "--mock", "--seed", "5", "--input", s(&corpus), "--cache-dir", s(&cache)]);
    let stats: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(stats["provider_calls"], 0);
    assert_eq!(stats["cache_hits"], 18);

    let o = affect(&["fuse", "--annotations", s(&cache), "--output", s(&fused)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(fs::read_to_string(&fused).unwrap().lines().count(), 6);

    let o = affect(&["analyze", "--input", s(&corpus), "--fused", s(&fused), "--role-filter", "all"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let a: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(a["turns_analyzed"], 6);
    assert_eq!(a["states"].as_array().unwrap().len(), 3);

    let reports = d.join("reports");
    let o = affect(&["report", "--input", s(&corpus), "--fused", s(&fused), "--output-dir", s(&reports)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let matrix = fs::read_to_string(reports.join("transition_matrix.csv")).unwrap();
    assert_eq!(matrix.lines().count(), 4);
    assert!(matrix.starts_with("from,count_negative,"));

    // The one-shot run over the same cache produces the same reports.
    let cfg = d.join("run.toml");
    fs::write(
        &cfg,
        format!(
            "input = {:?}\ncache_dir = {:?}\noutput_dir = {:?}\nmock = true\nseed = 5\n",
            s(&corpus),
            s(&cache),
            s(&d.join("run-out"))
        ),
    )
    .unwrap();
    let o = affect(&["run", "--config", s(&cfg)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let counts: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(counts["provider_calls"], 0);
    for f in ["val_histograms.csv", "label_frequencies.csv", "transition_matrix.csv", "corpus_summary.csv"] {
        assert_eq!(
            fs::read(reports.join(f)).unwrap(),
            fs::read(d.join("run-out").join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&affect(&[])), 1);
    assert_eq!(code(&affect(&["frobnicate"])), 1);
    assert_eq!(code(&affect(&["annotate", "--input", "x"])), 1);
    assert_eq!(code(&affect(&["--help"])), 0);

    let dir = tempfile::tempdir().unwrap();
    let corpus = write_corpus(dir.path());
    let o = affect(&[
        "analyze",
        "--input",
        s(&corpus),
        "--fused",
        s(&corpus),
        "--beta",
        "0",
    ]);
    assert_eq!(code(&o), 1);
    let o = affect(&["run", "--config", s(&dir.path().join("missing.toml"))]);
    assert_eq!(code(&o), 1);
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let empty = d.join("empty.jsonl");
    fs::write(&empty, "").unwrap();
    let o = affect(&["annotate", "--mock", "--input", s(&empty), "--cache-dir", s(&d.join("c"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("ingest"));

    let bad = d.join("bad.jsonl");
    fs::write(&bad, "{\"turn_id\": 3}\n").unwrap();
    let o = affect(&["annotate", "--mock", "--input", s(&bad), "--cache-dir", s(&d.join("c"))]);
    assert_eq!(code(&o), 2);

    let o = affect(&["fuse", "--annotations", s(&d.join("nope")), "--output", s(&d.join("f.jsonl"))]);
    assert_eq!(code(&o), 2);
}

#[test]
fn missing_credential_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = write_corpus(d);
    let providers = d.join("providers.toml");
    fs::write(
        &providers,
        r#"[[providers]]
model_id = "remote"
endpoint = "http://127.0.0.1:9/v1/chat/completions"
model_name = "some-model"
credential = "${AFFECT_TEST_UNSET_KEY}"
"#,
    )
    .unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_affect"))
        .args(["annotate", "--providers", s(&providers), "--input", s(&corpus), "--cache-dir", s(&d.join("c"))])
        .env_remove("AFFECT_TEST_UNSET_KEY")
        .output()
        .unwrap();
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
}

/// Answers every chat-completions request with the same canned completion
/// and records the request bodies.
fn serve(listener: TcpListener, requests: usize) -> Vec<(String, String)> {
    let mut seen = Vec::new();
    for stream in listener.incoming().take(requests) {
        let mut stream = stream.unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut auth = String::new();
        let mut len = 0usize;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let line = line.trim_end();
            if line.is_empty() {
                break;
            }
            let lower = line.to_ascii_lowercase();
            if let Some(v) = lower.strip_prefix("content-length:") {
                len = v.trim().parse().unwrap();
            }
            if lower.starts_with("authorization:") {
                auth = line["authorization:".len()..].trim().to_string();
            }
        }
        let mut body = vec![0; len];
        reader.read_exact(&mut body).unwrap();
        seen.push((auth, String::from_utf8(body).unwrap()));
        let content = r#"Sure! {"emotions":[{"rank":1,"label":"Confusion","valence":3,"arousal":6,"learning":4}]}"#;
        let reply = serde_json::json!({"choices":[{"message":{"role":"assistant","content":content}}]}).to_string();
        write!(
            stream,
            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
            reply.len(),
            reply
        )
        .unwrap();
    }
    seen
}

#[test]
fn http_backend_round_trip() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let port = listener.local_addr().unwrap().port();
    let server = std::thread::spawn(move || serve(listener, 6));

    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let corpus = write_corpus(d);
    let providers = d.join("providers.toml");
    fs::write(
        &providers,
        format!(
            r#"[[providers]]
model_id = "local"
endpoint = "http://127.0.0.1:{port}/v1/chat/completions"
model_name = "tiny-model"
credential = "${{AFFECT_TEST_KEY}}"
max_retries = 0
"#
        ),
    )
    .unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_affect"))
        .args([
            "annotate",
            "--providers",
            s(&providers),
            "--input",
            s(&corpus),
            "--cache-dir",
            s(&d.join("c")),
            "--max-in-flight",
            "1",
        ])
        .env("AFFECT_TEST_KEY", "sk-test")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let seen = server.join().unwrap();
    assert_eq!(seen.len(), 6);
    for (auth, body) in &seen {
        assert_eq!(auth, "Bearer sk-test");
        let v: serde_json::Value = serde_json::from_str(body).unwrap();
        assert_eq!(v["model"], "tiny-model");
        assert_eq!(v["temperature"], 0.0);
        assert_eq!(v["messages"][0]["role"], "system");
        assert_eq!(v["messages"][1]["role"], "user");
    }
    assert!(seen.iter().any(|(_, b)| b.contains("why does my loop not stop")));

    let fused = d.join("fused.jsonl");
    let o = affect(&["fuse", "--annotations", s(&d.join("c")), "--output", s(&fused), "--providers", s(&providers)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let first: serde_json::Value =
        serde_json::from_str(fs::read_to_string(&fused).unwrap().lines().next().unwrap()).unwrap();
    assert_eq!(first["consensus_label"], "confusion");
    assert_eq!(first["v_bar"], 3.0);
}
