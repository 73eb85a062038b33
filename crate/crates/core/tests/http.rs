mod common;

use std::net::SocketAddr;

use reqwest::StatusCode;
use serde_json::{json, Value};

use lloco::serving::{router, GroupPolicy, ServeResponse};

async fn spawn(policy: GroupPolicy) -> (SocketAddr, tempfile::TempDir) {
    let tmp = tempfile::tempdir().unwrap();
    let art = common::two_group_artifacts(tmp.path());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, router(art, policy)).await });
    (addr, tmp)
}

async fn post(client: &reqwest::Client, addr: SocketAddr, body: Value) -> (StatusCode, Value) {
    let resp = client.post(format!("http://{addr}/v1/query")).json(&body).send().await.unwrap();
    (resp.status(), resp.json().await.unwrap())
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn status_codes_follow_error_kinds() {
    let (addr, _tmp) = spawn(GroupPolicy::Strict).await;
    let client = reqwest::Client::new();

    let raw = client
        .post(format!("http://{addr}/v1/query"))
        .header("content-type", "application/json")
        .body("{\"question\": ")
        .send()
        .await
        .unwrap();
    assert_eq!(raw.status(), StatusCode::BAD_REQUEST);

    let cases = [
        (json!({"question": "q", "mode": "telepathy"}), StatusCode::BAD_REQUEST),
        (json!({"question": "q", "mode": "lloco", "extra": 1}), StatusCode::BAD_REQUEST),
        (json!({"question": "q", "mode": "lloco", "group_id": "nobody"}), StatusCode::NOT_FOUND),
        (json!({"question": "q", "mode": "retrieval", "doc_id": "missing"}), StatusCode::NOT_FOUND),
        (json!({"question": "q", "mode": "lloco"}), StatusCode::CONFLICT),
        (json!({"question": "q".repeat(400), "mode": "no_context"}), StatusCode::UNPROCESSABLE_ENTITY),
        (json!({"question": "q", "mode": "no_context"}), StatusCode::OK),
    ];
    for (body, want) in cases {
        let (status, value) = post(&client, addr, body.clone()).await;
        assert_eq!(status, want, "{body} -> {value}");
        if status != StatusCode::OK {
            assert!(value["error"].is_string(), "{value}");
        }
    }
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_identical_requests_agree() {
    let (addr, _tmp) = spawn(GroupPolicy::Majority).await;
    let client = reqwest::Client::new();
    let body = json!({"question": "what is the code for ab?", "mode": "lloco", "max_new_tokens": 6});
    let handles: Vec<_> = (0..8)
        .map(|_| {
            let (client, body) = (client.clone(), body.clone());
            tokio::spawn(async move { post(&client, addr, body).await })
        })
        .collect();
    let mut answers = Vec::new();
    for h in handles {
        let (status, value) = h.await.unwrap();
        assert_eq!(status, StatusCode::OK);
        let resp: ServeResponse = serde_json::from_value(value).unwrap();
        answers.push((resp.answer, resp.retrieved_passage_ids, resp.adaptor_id));
    }
    assert!(answers.windows(2).all(|w| w[0] == w[1]));
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn health_and_groups() {
    let (addr, _tmp) = spawn(GroupPolicy::Strict).await;
    let health: Value = reqwest::get(format!("http://{addr}/v1/health")).await.unwrap().json().await.unwrap();
    assert_eq!(health["status"], "ok");
    assert_eq!(health["documents"], 5);
    assert_eq!(health["groups"], 2);
    let groups: Value = reqwest::get(format!("http://{addr}/v1/groups")).await.unwrap().json().await.unwrap();
    let names: Vec<_> = groups["groups"].as_array().unwrap().iter().map(|g| g["group_id"].as_str().unwrap()).collect();
    assert_eq!(names, ["alpha", "beta"]);
}
