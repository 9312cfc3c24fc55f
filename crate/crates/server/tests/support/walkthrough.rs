//! The edible-plants walkthrough, driven entirely over HTTP against the
//! scripted mock in `scripts/edible-plants.json`.

use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use serde_json::{json, Value};
use workbench_core::mllm::Backend;
use workbench_core::MockScript;
use workbench_server::{AppConfig, AppState};

use super::core::noisy_png;
use super::http::{seg, Api, EventReader};

pub const GOAL: &str =
    "I want a model that tells whether a plant in a photo is safe to eat, but I'm not sure how to set it up.";
pub const LION_QUESTION: &str = "It is strange that a lion ends up as Edible or Non-Edible.";

pub fn mock_script() -> MockScript {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("scripts/edible-plants.json");
    MockScript::load(&path).unwrap()
}

pub fn app(data_dir: &Path) -> Arc<AppState> {
    let mut config = AppConfig::new(Backend::Mock(Arc::new(mock_script())));
    config.data_dir = Some(data_dir.to_path_buf());
    config.session.active_interval = Duration::from_millis(50);
    config.session.active_enabled_by_default = false;
    AppState::new(config)
}

pub struct WalkthroughRun {
    pub session_id: String,
    pub transcript: String,
    pub frame_kinds: Vec<String>,
    pub first_labels: Vec<String>,
    pub second_labels: Vec<String>,
}

/// One history entry per line: `ROLE[/event]: text [attachments]`.
pub fn transcript_line(m: &Value) -> String {
    let mut line = m["role"].as_str().unwrap().to_string();
    if let Some(event) = m["event"].as_str() {
        line.push('/');
        line.push_str(event);
    }
    line.push_str(": ");
    line.push_str(m["text"].as_str().unwrap());
    if let Some(names) = m["attachments"].as_array() {
        let names: Vec<&str> = names.iter().filter_map(|n| n.as_str()).collect();
        line.push_str(&format!(" [{}]", names.join(", ")));
    }
    line
}

fn images(base: [u8; 3], first_seed: u64, n: u64) -> Vec<Vec<u8>> {
    (first_seed..first_seed + n).map(|s| noisy_png(base, s)).collect()
}

async fn expect_frame(events: &mut EventReader, kind: &str, kinds: &mut Vec<String>) -> Value {
    let frame = events
        .next(Duration::from_secs(5))
        .await
        .unwrap_or_else(|| panic!("no {kind} frame"));
    assert_eq!(frame.kind, kind, "{:?}", frame.data);
    kinds.push(frame.kind);
    frame.data
}

pub async fn run_walkthrough(api: &Api) -> WalkthroughRun {
    let created = api.post("/sessions", None).await;
    assert_eq!(created.status, 201);
    let id = created.json()["session_id"].as_str().unwrap().to_string();
    let base = format!("/sessions/{id}");
    let mut kinds = Vec::new();
    let mut events = api.events(&format!("{base}/events?after=0"), None).await;
    expect_frame(&mut events, "passive_reply", &mut kinds).await;

    // the user states a vague goal, the passive agent proposes categories
    let r = api.post(&format!("{base}/chat"), Some(json!({ "text": GOAL }))).await;
    assert_eq!(r.status, 200, "{:?}", r.json());
    expect_frame(&mut events, "passive_reply", &mut kinds).await;

    for name in ["Edible", "Non-Edible"] {
        let r = api.post(&format!("{base}/categories"), Some(json!({ "name": name }))).await;
        assert_eq!(r.status, 201);
    }
    let r = api
        .upload(&format!("{base}/categories/Edible/images"), &images([225, 120, 40], 10, 8))
        .await;
    assert_eq!(r.status, 200, "{:?}", r.json());
    let r = api
        .upload(&format!("{base}/categories/Non-Edible/images"), &images([40, 90, 50], 30, 8))
        .await;
    assert_eq!(r.status, 200);

    let r = api.post(&format!("{base}/ask/category/Edible"), None).await;
    assert_eq!(r.status, 200);
    expect_frame(&mut events, "passive_reply", &mut kinds).await;

    let first = api.post(&format!("{base}/train"), None).await;
    assert_eq!(first.status, 200, "{:?}", first.json());
    expect_frame(&mut events, "training_done", &mut kinds).await;

    // evaluation with a flower; the active agent gets a chance to speak
    let r = api.upload(&format!("{base}/infer"), &[noisy_png([150, 60, 170], 50)]).await;
    assert_eq!(r.status, 200);
    let r = api.put(&format!("{base}/active-agent"), json!({ "enabled": true })).await;
    assert_eq!(r.json()["enabled"], true);
    expect_frame(&mut events, "active_advice", &mut kinds).await;
    let r = api.put(&format!("{base}/active-agent"), json!({ "enabled": false })).await;
    assert_eq!(r.json()["enabled"], false);

    // a lion gets forced into a plant category
    let lion = api.upload(&format!("{base}/infer"), &[noisy_png([200, 160, 90], 60)]).await;
    assert_eq!(lion.status, 200);
    let lion_id = lion.json()["id"].as_str().unwrap().to_string();
    let r = api.post(&format!("{base}/chat"), Some(json!({ "text": LION_QUESTION }))).await;
    assert_eq!(r.status, 200);
    expect_frame(&mut events, "passive_reply", &mut kinds).await;
    let r = api.post(&format!("{base}/ask/inference/{lion_id}"), None).await;
    assert_eq!(r.status, 200);
    expect_frame(&mut events, "passive_reply", &mut kinds).await;

    let r = api.post(&format!("{base}/categories"), Some(json!({ "name": "Not a Plant" }))).await;
    assert_eq!(r.status, 201);
    let r = api
        .upload(
            &format!("{base}/categories/{}/images", seg("Not a Plant")),
            &images([160, 110, 60], 70, 8),
        )
        .await;
    assert_eq!(r.status, 200);
    let second = api.post(&format!("{base}/train"), None).await;
    assert_eq!(second.status, 200);
    expect_frame(&mut events, "training_done", &mut kinds).await;

    let history = api.get(&format!("{base}/history")).await.json();
    let transcript = history["messages"]
        .as_array()
        .unwrap()
        .iter()
        .map(transcript_line)
        .collect::<Vec<_>>()
        .join("\n");
    let labels = |r: &super::http::Reply| -> Vec<String> {
        r.json()["labels"]
            .as_array()
            .unwrap()
            .iter()
            .map(|l| l.as_str().unwrap().to_string())
            .collect()
    };
    WalkthroughRun {
        session_id: id,
        transcript: transcript + "\n",
        frame_kinds: kinds,
        first_labels: labels(&first),
        second_labels: labels(&second),
    }
}
