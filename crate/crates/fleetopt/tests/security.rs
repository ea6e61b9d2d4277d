mod common;

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use common::{read_fixture, scenario_dir, SCENARIO_NOW};
use fleetopt::blackboard::{Blackboard, FixedClock};
use fleetopt::security::{
    build_prompt, parse_scan_report, post_security_observations, recommend_security, DocStore, HttpGenerator,
    SecurityConfig, StubGenerator, TextGenerator, PROMPT_SENTENCE,
};
use fleetopt::timefmt::parse_rfc3339;
use fleetopt_core::{FeedbackAction, FeedbackRecord, Severity, Status};

fn now() -> i64 {
    parse_rfc3339(SCENARIO_NOW).unwrap()
}

fn guides() -> Arc<dyn TextGenerator> {
    Arc::new(StubGenerator::new(BTreeMap::from([
        ("Allow privilege escalation".to_string(), "1. set allowPrivilegeEscalation: false".to_string()),
        ("Resource limits".to_string(), "1. add limits".to_string()),
    ])))
}

fn loaded_board() -> Blackboard {
    let bb = Blackboard::in_memory(Arc::new(FixedClock::new(now())));
    let scan = parse_scan_report(&read_fixture("scan.json")).unwrap();
    post_security_observations(&bb, &scan.observations).unwrap();
    bb
}

#[test]
fn fixture_has_two_failures_and_three_passes() {
    let scan = parse_scan_report(&read_fixture("scan.json")).unwrap();
    assert_eq!(scan.observations.len(), 2);
    assert_eq!(scan.passed, 3);
    let o = &scan.observations[0];
    assert_eq!((o.check_name.as_str(), o.resource_name.as_str(), o.severity), ("Allow privilege escalation", "checkout", Severity::High));
    assert_eq!(o.scan_id, "scan-2024-08-02");
}

#[test]
fn malformed_scan_is_an_error() {
    assert!(parse_scan_report("{not json").is_err());
    let bad_severity = r#"{"scanID": "s", "generationTime": "2024-08-02T00:00:00Z",
        "controls": [{"name": "x", "severity": "Spicy", "resources": []}]}"#;
    assert!(parse_scan_report(bad_severity).is_err());
}

#[test]
fn one_recommendation_per_failed_check_with_docs() {
    let bb = loaded_board();
    let docs = DocStore::new(scenario_dir().join("docs"));
    let out = recommend_security(&bb, &docs, guides(), &SecurityConfig::default(), now()).unwrap();
    assert_eq!(out.written.len(), 2);
    for rec in &out.written {
        let rem = rec.remediation.as_ref().unwrap();
        assert!(!rem.steps.trim().is_empty());
        assert!(!rem.used_fallback);
        assert!(!rem.doc_excerpt.is_empty());
        assert_eq!(rec.evidence.len(), 1);
        assert!(bb.get(&rec.evidence[0].key).is_some());
        assert_eq!(rec.status, Status::Pending);
        assert!(rec.impact.security > 0.0);
    }
    // The cursor moved past these observations.
    let again = recommend_security(&bb, &docs, guides(), &SecurityConfig::default(), now()).unwrap();
    assert!(again.written.is_empty());
}

#[test]
fn missing_doc_still_yields_a_recommendation() {
    let bb = loaded_board();
    let out = recommend_security(&bb, &DocStore::empty(), guides(), &SecurityConfig::default(), now()).unwrap();
    assert_eq!(out.written.len(), 2);
    assert!(out.written.iter().all(|r| r.remediation.as_ref().unwrap().doc_excerpt.is_empty()));
    assert!(out.written[0].rationale.contains("No local documentation"));
}

#[test]
fn silent_generator_falls_back_to_the_hint() {
    let bb = loaded_board();
    let slow = Arc::new(StubGenerator {
        guides: BTreeMap::new(),
        default_guide: Some("late".into()),
        delay: Some(Duration::from_millis(500)),
    });
    let cfg = SecurityConfig { timeout_ms: 20, ..SecurityConfig::default() };
    let out = recommend_security(&bb, &DocStore::empty(), slow, &cfg, now()).unwrap();
    assert_eq!(out.written.len(), 2);
    for rec in &out.written {
        let rem = rec.remediation.as_ref().unwrap();
        assert!(rem.used_fallback);
        assert!(rem.steps.starts_with("Set allowPrivilegeEscalation") || rem.steps.starts_with("Define CPU"));
    }
}

#[test]
fn rejected_check_is_suppressed_in_window() {
    let bb = loaded_board();
    let docs = DocStore::empty();
    let first = recommend_security(&bb, &docs, guides(), &SecurityConfig::default(), now()).unwrap();
    let rejected = &first.written[0];
    let fb = FeedbackRecord {
        rec_id: rejected.id.clone(),
        action: FeedbackAction::Rejected,
        actor: "ops".into(),
        at: now(),
        modified_patch: None,
    };
    bb.put_json(&format!("/feedback/{}", fb.rec_id), &fb, None).unwrap();
    // A fresh scan re-reports both failures.
    let mut scan = parse_scan_report(&read_fixture("scan.json")).unwrap();
    for o in &mut scan.observations {
        o.scan_id = "scan-2".into();
    }
    post_security_observations(&bb, &scan.observations).unwrap();
    let second = recommend_security(&bb, &docs, guides(), &SecurityConfig::default(), now() + 3_600_000).unwrap();
    assert_eq!(second.suppressed, 1);
    assert!(second.written.iter().all(|r| r.id != rejected.id));
}

#[test]
fn prompt_carries_sentence_observation_and_doc() {
    let scan = parse_scan_report(&read_fixture("scan.json")).unwrap();
    let p = build_prompt(&scan.observations[0], Some("Doc body."));
    let parts: Vec<&str> = p.split("\n\n").collect();
    assert_eq!(parts[0], PROMPT_SENTENCE);
    let body: serde_json::Value = serde_json::from_str(parts[1]).unwrap();
    assert_eq!(body["check_name"], "Allow privilege escalation");
    assert_eq!(*parts.last().unwrap(), "Doc body.");
}

/// One-shot HTTP server that records the request body and answers with `reply`.
fn serve_once(reply: &'static str) -> (String, thread::JoinHandle<String>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/generate", listener.local_addr().unwrap());
    let handle = thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut length = 0usize;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            if line == "\r\n" || line.is_empty() {
                break;
            }
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                length = v.trim().parse().unwrap();
            }
        }
        let mut body = vec![0u8; length];
        reader.read_exact(&mut body).unwrap();
        let mut stream = stream;
        write!(
            stream,
            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
            reply.len()
        )
        .unwrap();
        String::from_utf8(body).unwrap()
    });
    (url, handle)
}

#[test]
fn http_generator_posts_prompt_and_reads_text() {
    let (url, server) = serve_once(r#"{"text": "1. do the thing"}"#);
    let client = HttpGenerator { endpoint: url, timeout: Duration::from_secs(5) };
    assert_eq!(client.generate("hello prompt").unwrap(), "1. do the thing");
    let sent: serde_json::Value = serde_json::from_str(&server.join().unwrap()).unwrap();
    assert_eq!(sent["prompt"], "hello prompt");
}

#[test]
fn http_generator_reports_bad_replies() {
    let (url, server) = serve_once(r#"{"unexpected": true}"#);
    let client = HttpGenerator { endpoint: url, timeout: Duration::from_secs(5) };
    assert!(client.generate("p").is_err());
    server.join().unwrap();
}
