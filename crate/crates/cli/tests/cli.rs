use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::thread;

use image::{Rgba, RgbaImage};
use serde_json::{json, Value};

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures").canonicalize().unwrap()
}

fn drivecot(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_drivecot")).args(args).env("STUB_KEY", "secret").output().unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path, name: &str, config: Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_string_pretty(&config).unwrap()).unwrap();
    path
}

/// Answers every chat request with the same decision and counts connections.
fn stub() -> (String, Arc<AtomicUsize>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat/completions", listener.local_addr().unwrap());
    let hits = Arc::new(AtomicUsize::new(0));
    let counter = hits.clone();
    thread::spawn(move || {
        for stream in listener.incoming() {
            let Ok(mut stream) = stream else { break };
            counter.fetch_add(1, Ordering::SeqCst);
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut len = 0;
            loop {
                let mut line = String::new();
                if reader.read_line(&mut line).unwrap_or(0) == 0 || line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut body = vec![0; len];
            let _ = reader.read_exact(&mut body);
            let reply = r#"{"model":"stub","choices":[{"message":{"content":"The lane is clear.\nFinal Decision: keep remain"}}]}"#;
            let _ = write!(
                stream,
                "HTTP/1.1 200 OK\r\ncontent-type: application/json\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{reply}",
                reply.len()
            );
        }
    });
    (url, hits)
}

#[test]
fn replay_ablation_reports_three_strategies() {
    let out = tempfile::tempdir().unwrap();
    let config = fixtures().join("configs/ablation.json");
    let res = drivecot(&["run", "--config", config.to_str().unwrap(), "--out", out.path().to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0), "{}", stderr(&res));
    let csv = fs::read_to_string(out.path().join("ablation.report.csv")).unwrap();
    let groups: Vec<_> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(groups, ["zero-shot", "role-playing", "pkrd-cot", "overall"]);
    assert!(out.path().join("ablation.report.md").exists());
}

#[test]
fn missing_transcript_key_exits_1_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let transcripts: Vec<_> = fs::read_to_string(fixtures().join("ablation/transcripts.jsonl"))
        .unwrap()
        .lines()
        .filter(|l| !l.contains("\"hw-007/pkrd-cot/decision/0\""))
        .map(String::from)
        .collect();
    fs::write(dir.path().join("t.jsonl"), transcripts.join("\n") + "\n").unwrap();
    let config = write_config(
        dir.path(),
        "c.json",
        json!({
            "backend": {"mode": "replay", "model_id": "vlm-highway"},
            "task": {"kind": "decision", "strategy": "pkrd-cot"},
            "paths": {"manifest": fixtures().join("ablation/manifest.jsonl"), "transcripts": "t.jsonl", "out_dir": "out"}
        }),
    );
    let res = drivecot(&["run", "--config", config.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    assert!(stderr(&res).contains("hw-007/pkrd-cot/decision/0"), "{}", stderr(&res));
    let log = fs::read_to_string(dir.path().join("out/run.log")).unwrap();
    assert!(log.lines().any(|l| l.starts_with("error:") && l.contains("no recorded transcript for key hw-007/pkrd-cot/decision/0")), "{log}");
}

#[test]
fn skipped_perception_parses_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let mut lines: Vec<Value> = fs::read_to_string(fixtures().join("perception/set-a/transcripts.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    for line in &mut lines[..3] {
        line["response"]["text"] = json!("The image is too dark to describe anything.");
    }
    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    fs::write(dir.path().join("t.jsonl"), text).unwrap();
    let config = write_config(
        dir.path(),
        "c.json",
        json!({
            "backend": {"mode": "replay", "model_id": "vlm-set-a"},
            "task": {"kind": "perception", "strategy": "pkrd-cot"},
            "paths": {"manifest": fixtures().join("perception/set-a/manifest.jsonl"), "transcripts": "t.jsonl", "out_dir": "out"}
        }),
    );
    let res = drivecot(&["run", "--config", config.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(2), "{}", stderr(&res));
    let md = fs::read_to_string(dir.path().join("out/perception.report.md")).unwrap();
    assert!(md.contains("Diagnostics: 3 parse failures"), "{md}");
    let csv = fs::read_to_string(dir.path().join("out/perception.report.csv")).unwrap();
    assert!(csv.lines().last().unwrap().contains("partial"), "{csv}");
}

fn camera_dir(dir: &Path, skip: Option<&str>) {
    let names = ["front", "front_left", "front_right", "back", "back_left", "back_right"];
    for (i, name) in names.iter().enumerate() {
        if Some(*name) == skip {
            continue;
        }
        let img = RgbaImage::from_fn(4 + i as u32, 3, |x, y| Rgba([i as u8 * 40, x as u8, y as u8, 255]));
        img.save(dir.join(format!("{name}.png"))).unwrap();
    }
}

#[test]
fn merge_writes_panoramas_idempotently() {
    let dir = tempfile::tempdir().unwrap();
    let cams = dir.path().join("cams");
    fs::create_dir(&cams).unwrap();
    camera_dir(&cams, None);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b, &a] {
        let res = drivecot(&["merge", cams.to_str().unwrap(), out.to_str().unwrap()]);
        assert_eq!(res.status.code(), Some(0), "{}", stderr(&res));
    }
    for file in ["front.png", "back.png", "seams.json"] {
        assert_eq!(fs::read(a.join(file)).unwrap(), fs::read(b.join(file)).unwrap(), "{file}");
    }
    let seams: Value = serde_json::from_slice(&fs::read(a.join("seams.json")).unwrap()).unwrap();
    assert_eq!(seams, json!({"front": [0, 5, 9], "back": [0, 8, 15]}));
    let front = image::open(a.join("front.png")).unwrap();
    assert_eq!((front.width(), front.height()), (5 + 4 + 6, 3));
}

#[test]
fn merge_names_the_missing_camera() {
    let dir = tempfile::tempdir().unwrap();
    camera_dir(dir.path(), Some("back_left"));
    let res = drivecot(&["merge", dir.path().to_str().unwrap(), dir.path().join("out").to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    assert!(stderr(&res).contains("back_left"), "{}", stderr(&res));
}

fn two_sample_manifest(dir: &Path) -> PathBuf {
    let lines: Vec<_> = fs::read_to_string(fixtures().join("ablation/manifest.jsonl"))
        .unwrap()
        .lines()
        .take(2)
        .map(String::from)
        .collect();
    let path = dir.join("manifest.jsonl");
    fs::write(&path, lines.join("\n") + "\n").unwrap();
    path
}

#[test]
fn record_then_replay_reproduces_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let (url, hits) = stub();
    let manifest = two_sample_manifest(dir.path());
    let config = write_config(
        dir.path(),
        "live.json",
        json!({
            "backend": {"mode": "live", "endpoint": url, "model_id": "stub", "api_key_env": "STUB_KEY", "backoff_base_ms": 1},
            "task": {"kind": "decision", "strategy": "pkrd-cot"},
            "paths": {"manifest": manifest, "transcripts": "t.jsonl", "out_dir": "live"}
        }),
    );
    let config = config.to_str().unwrap();
    let res = drivecot(&["record", "--config", config]);
    assert_eq!(res.status.code(), Some(0), "{}", stderr(&res));
    assert_eq!(hits.load(Ordering::SeqCst), 2);
    let transcript = fs::read_to_string(dir.path().join("t.jsonl")).unwrap();
    assert_eq!(transcript.lines().count(), 2);

    let replay_out = dir.path().join("replayed");
    let res = drivecot(&["run", "--config", config, "--backend-mode", "replay", "--out", replay_out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0), "{}", stderr(&res));
    assert_eq!(hits.load(Ordering::SeqCst), 2, "replay reached the network");
    for file in ["decision.report.csv", "decision.verdicts.csv"] {
        assert_eq!(
            fs::read(dir.path().join("live").join(file)).unwrap(),
            fs::read(replay_out.join(file)).unwrap(),
            "{file}"
        );
    }

    let res = drivecot(&["record", "--config", config]);
    assert_eq!(res.status.code(), Some(1));
    assert!(stderr(&res).contains("already recorded"), "{}", stderr(&res));
    assert_eq!(fs::read_to_string(dir.path().join("t.jsonl")).unwrap(), transcript);

    let res = drivecot(&["record", "--config", config, "--overwrite"]);
    assert_eq!(res.status.code(), Some(0), "{}", stderr(&res));
    assert_eq!(fs::read_to_string(dir.path().join("t.jsonl")).unwrap().lines().count(), 2);
}

#[test]
fn record_refuses_replay_mode() {
    let dir = tempfile::tempdir().unwrap();
    let config = fixtures().join("configs/ablation.json");
    let res = drivecot(&["record", "--config", config.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    assert!(stderr(&res).contains("live"), "{}", stderr(&res));
}

#[test]
fn replay_never_touches_the_endpoint() {
    let dir = tempfile::tempdir().unwrap();
    let (url, hits) = stub();
    let config = write_config(
        dir.path(),
        "c.json",
        json!({
            "backend": {"mode": "replay", "endpoint": url, "model_id": "vlm-highway", "api_key_env": "STUB_KEY"},
            "task": {"kind": "ablation", "strategy": ["zero-shot", "role-playing", "pkrd-cot"]},
            "paths": {
                "manifest": fixtures().join("ablation/manifest.jsonl"),
                "transcripts": fixtures().join("ablation/transcripts.jsonl"),
                "out_dir": "out"
            }
        }),
    );
    let res = drivecot(&["run", "--config", config.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(0), "{}", stderr(&res));
    assert_eq!(hits.load(Ordering::SeqCst), 0);
}

#[test]
fn overrides_apply_after_loading() {
    let out = tempfile::tempdir().unwrap();
    let config = fixtures().join("configs/ablation.json");
    let res = drivecot(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--task",
        "decision",
        "--strategy",
        "role-playing",
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(0), "{}", stderr(&res));
    let csv = fs::read_to_string(out.path().join("decision.report.csv")).unwrap();
    assert!(csv.contains("vlm-highway,88,100,88.00%"), "{csv}");

    let res = drivecot(&[
        "run",
        "--config",
        config.to_str().unwrap(),
        "--task",
        "decision",
        "--out",
        out.path().to_str().unwrap(),
    ]);
    assert_eq!(res.status.code(), Some(1), "single-strategy task accepted a strategy list");
}
