mod common;

use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::time::Duration;

use common::{check_response, expected_responses, fixtures_dir};
use proptest::prelude::*;
use vividforge::curate::{
    assess_all, assess_text, filter_manifest, parse_report, request_assessment, Adjustment, AssessmentBackend,
    AssessmentRequest, ClipAssessment, CurationManifest, HttpBackend, MockBackend, QualityReport, Tier,
};
use vividforge::Error;

/// Renders a report in the mandated output format.
fn render(r: &QualityReport) -> String {
    let mut s = String::from("Assessment follows.\n\nSTEP 1 - Individual Scores:\n");
    s += &format!("Clarity: {}/35 (detail)\n", r.clarity);
    s += &format!("Stability: {}/20 (motion)\n", r.stability);
    s += &format!("Lighting: {}/20 (light)\n", r.lighting);
    s += &format!("Artifacts: {}/15 (codec)\n", r.artifacts);
    s += &format!("Occlusion: {}/10 (view)\n\n", r.occlusion);
    s += "STEP 2 - Base Score Calculation:\n";
    s += &format!(
        "Base Score = {} + {} + {} + {} + {} = {}/100\n\n",
        r.clarity, r.stability, r.lighting, r.artifacts, r.occlusion, r.base
    );
    s += "STEP 3 - Bonus/Penalty Adjustments:\n";
    for a in &r.adjustments {
        let kind = if a.points >= 0 { "Bonus" } else { "Penalty" };
        s += &format!("- {kind} ({:+} points): {}\n", a.points, a.reason);
    }
    s += &format!("Total Adjustment: {:+} points\n\n", r.adjustment_total());
    s += "STEP 4 - Final Results:\n";
    s += &format!(
        "Final Score = {} (Base) + {} (Adjustment) = {}/100\n",
        r.base,
        r.adjustment_total(),
        r.final_score
    );
    s += &format!("Quality Tier: {}\n", r.tier);
    s += "Critical Issues: none\n";
    s += &format!("Motion Blur Check: {}\n", r.motion_blur_note);
    s
}

fn report() -> impl Strategy<Value = QualityReport> {
    let adj = (prop::sample::select(vec![2i32, 1, -3, -2]), "[a-z]{3,12}( [a-z]{2,8}){0,3}")
        .prop_map(|(points, reason)| Adjustment { points, reason });
    (0..=35i32, 0..=20i32, 0..=20i32, 0..=15i32, 0..=10i32, prop::collection::vec(adj, 0..4), -5..5i32, "[a-z]{1,10}")
        .prop_map(|(c, s, l, a, o, adjustments, noise, note)| {
            let base = c + s + l + a + o;
            let total: i32 = adjustments.iter().map(|x| x.points).sum();
            let final_score = base + total + noise;
            QualityReport {
                clarity: c,
                stability: s,
                lighting: l,
                artifacts: a,
                occlusion: o,
                adjustments,
                base,
                final_score,
                tier: Tier::from_score(final_score),
                motion_blur_note: note,
            }
        })
}

proptest! {
    #[test]
    fn render_then_parse_is_identity(r in report()) {
        prop_assert_eq!(parse_report(&render(&r)).unwrap(), r);
    }

    #[test]
    fn retained_set_shrinks_with_threshold(finals in prop::collection::vec(0..=100i32, 0..30), lo in 0..100i32, step in 0..20i32) {
        let base = assess_text(&std::fs::read_to_string(fixtures_dir().join("responses/valid_01.txt")).unwrap()).unwrap();
        let items: Vec<ClipAssessment> = finals
            .iter()
            .enumerate()
            .map(|(i, &f)| {
                let mut v = base.clone();
                v.final_score = f;
                ClipAssessment { clip_id: format!("c{i}"), outcome: Ok(v) }
            })
            .collect();
        let a = filter_manifest(&items, lo);
        let b = filter_manifest(&items, lo + step);
        for id in b.retained_ids() {
            prop_assert!(a.retained_ids().contains(&id));
        }
    }
}

#[test]
fn fixture_responses() {
    let expected = expected_responses();
    assert_eq!(expected.len(), 20);
    let failures: Vec<String> = expected.iter().filter_map(|(id, e)| check_response(id, e).err()).collect();
    assert!(failures.is_empty(), "{failures:#?}");
}

#[test]
fn manifest_over_fixtures() {
    let dir = fixtures_dir().join("responses");
    let expected = expected_responses();
    let items: Vec<ClipAssessment> = expected
        .keys()
        .map(|id| {
            let text = std::fs::read_to_string(dir.join(format!("{id}.txt"))).unwrap();
            ClipAssessment { clip_id: id.clone(), outcome: assess_text(&text).map_err(|e| e.to_string()) }
        })
        .collect();
    let manifest = filter_manifest(&items, 90);
    let want: Vec<&str> = expected
        .iter()
        .filter(|(_, e)| e.final_score.is_some_and(|f| f > 90))
        .map(|(id, _)| id.as_str())
        .collect();
    assert_eq!(manifest.retained_ids(), want);
    for e in &manifest.entries {
        assert!(!(e.retained && e.error.is_some()), "{} retained despite error", e.clip_id);
    }
    let tmp = tempfile::tempdir().unwrap();
    let path = tmp.path().join("manifest.json");
    manifest.save(&path).unwrap();
    assert_eq!(CurationManifest::load(&path).unwrap(), manifest);
}

#[test]
fn mock_backend_returns_fixture_verbatim() {
    let dir = fixtures_dir().join("responses");
    let mock = MockBackend::new(&dir);
    let text = request_assessment(&mock, "mock", "valid_03", vec![]).unwrap();
    assert_eq!(text, std::fs::read_to_string(dir.join("valid_03.txt")).unwrap());
}

#[test]
fn mock_backend_rejects_empty_completion() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("blank.txt"), "  \n").unwrap();
    let mock = MockBackend::new(tmp.path());
    assert!(matches!(request_assessment(&mock, "m", "blank", vec![]), Err(Error::EmptyResponse)));
}

#[test]
fn concurrency_is_bounded() {
    let mock = MockBackend::new(fixtures_dir().join("responses")).with_latency(Duration::from_millis(20));
    let ids: Vec<String> = expected_responses().into_keys().collect();
    let requests: Vec<AssessmentRequest> = ids.iter().map(|id| AssessmentRequest::new("m", id, vec![])).collect();
    for bound in [1, 3, 4] {
        let out = assess_all(&mock, &requests, bound);
        assert_eq!(out.responses.len(), ids.len());
        assert!(out.max_in_flight <= bound, "{} > {bound}", out.max_in_flight);
        assert!(out.max_in_flight >= 1);
        assert!(out.responses.iter().all(|r| r.is_ok()));
    }
}

#[test]
fn unreachable_endpoint_gives_up_after_retries() {
    // Bind and drop a listener to get a port nobody is listening on.
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let backend = HttpBackend::new(&format!("http://127.0.0.1:{port}/v1"))
        .unwrap()
        .with_retry(3, Duration::from_millis(1));
    match request_assessment(&backend, "m", "clip", vec![]) {
        Err(Error::Endpoint { attempts, .. }) => assert_eq!(attempts, 4),
        other => panic!("expected endpoint error, got {other:?}"),
    }
}

/// Serves `responses` in order, one connection each, and returns the request
/// bodies it saw.
fn serve(responses: Vec<(u16, String)>) -> (String, std::thread::JoinHandle<Vec<String>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/v1/chat", listener.local_addr().unwrap());
    let handle = std::thread::spawn(move || {
        let mut bodies = Vec::new();
        for (status, body) in responses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream);
            let mut len = 0;
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                if line == "\r\n" {
                    break;
                }
                if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                    len = v.trim().parse().unwrap();
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            bodies.push(String::from_utf8(buf).unwrap());
            let reply = format!(
                "HTTP/1.1 {status} X\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
                body.len()
            );
            reader.get_mut().write_all(reply.as_bytes()).unwrap();
        }
        bodies
    });
    (url, handle)
}

#[test]
fn http_backend_posts_request_and_retries_server_errors() {
    let completion = r#"{"choices":[{"message":{"content":"STEP 1 ..."}}]}"#.to_string();
    let (url, server) = serve(vec![(500, "busy".into()), (200, completion)]);
    let backend = HttpBackend::new(&url).unwrap().with_retry(3, Duration::from_millis(1));
    let text = backend
        .complete(&AssessmentRequest::new("qwen", "clip7", vec!["a.ppm".into()]))
        .unwrap();
    assert_eq!(text, "STEP 1 ...");
    let bodies = server.join().unwrap();
    assert_eq!(bodies.len(), 2);
    let sent: AssessmentRequest = serde_json::from_str(&bodies[1]).unwrap();
    assert_eq!(sent.model, "qwen");
    assert_eq!(sent.clip_id, "clip7");
    assert_eq!(sent.frame_refs, vec!["a.ppm".to_string()]);
    assert_eq!(sent.prompt, vividforge::curate::build_prompt());
}

#[test]
fn http_backend_reports_empty_completion() {
    let (url, server) = serve(vec![(200, r#"{"completion":""}"#.into())]);
    let backend = HttpBackend::new(&url).unwrap();
    assert!(matches!(backend.complete(&AssessmentRequest::new("m", "c", vec![])), Err(Error::EmptyResponse)));
    server.join().unwrap();
}
