use std::sync::Arc;

use agent_router::config::RunConfig;
use agent_router::dataset::write_dataset;
use agent_router::pipeline::{self, Context};
use agent_router::service::{spawn, ServiceState};
use agent_router::synthetic::generate;
use serde_json::{json, Value};

#[test]
fn http_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    std::fs::create_dir_all(root.join("data")).unwrap();
    for (name, n, seed) in [("train", 60, 1), ("val", 20, 2), ("test", 20, 3)] {
        write_dataset(&root.join(format!("data/{name}.jsonl")), &generate(n, seed, &format!("{name}-"))).unwrap();
    }
    let cfg = RunConfig::from_toml(
        "[paths]\ntrain = \"data/train.jsonl\"\nval = \"data/val.jsonl\"\ntest = \"data/test.jsonl\"\nrun_dir = \"run\"\n[train]\nhidden = 16\nepochs = 1\n",
        root,
    )
    .unwrap();
    let ctx = Context::open(cfg).unwrap();
    pipeline::prepare(&ctx).unwrap();
    pipeline::score_agents(&ctx).unwrap();
    pipeline::train(&ctx).unwrap();
    let state = Arc::new(ServiceState::load(ctx).unwrap());
    let n = state.agents.len();
    let addr = spawn(state, "127.0.0.1:0".parse().unwrap()).unwrap();
    let base = format!("http://{addr}");
    let client = reqwest::blocking::Client::new();

    let health: Value = client.get(format!("{base}/healthz")).send().unwrap().json().unwrap();
    assert_eq!(health["status"], "ok");

    let q = &generate(1, 4, "q-")[0];
    let body = json!({ "question": q.question, "context": q.context });
    let route = client.post(format!("{base}/route")).json(&body).send().unwrap();
    assert!(route.status().is_success());
    let route: Value = route.json().unwrap();
    let agents = route["agents"].as_array().unwrap();
    assert_eq!(agents.len(), n);
    let total: f64 = agents.iter().map(|a| a["prob"].as_f64().unwrap()).sum();
    assert!((total - 1.0).abs() < 1e-9);
    let probs: Vec<f64> = agents.iter().map(|a| a["prob"].as_f64().unwrap()).collect();
    assert!(probs.windows(2).all(|w| w[0] >= w[1]), "{probs:?}");

    let plain: Value = client
        .post(format!("{base}/route"))
        .json(&json!({ "question": "what is it?", "context": "nothing here." }))
        .send()
        .unwrap()
        .json()
        .unwrap();
    assert_eq!(plain["entities"], 0);
    assert_eq!(plain["agents"].as_array().unwrap().len(), n);

    let answer: Value = client.post(format!("{base}/answer")).json(&body).send().unwrap().json().unwrap();
    let k = answer["k_star"].as_u64().unwrap() as usize;
    assert!(k >= 1 && k <= n);
    assert_eq!(answer["consulted"].as_array().unwrap().len(), k);
    assert_eq!(answer["agreement_trace"].as_array().unwrap().len(), k);

    for bad in ["not json", "{\"context\": \"no question\"}", "{\"question\": 3}"] {
        let resp = client
            .post(format!("{base}/route"))
            .header("content-type", "application/json")
            .body(bad)
            .send()
            .unwrap();
        assert_eq!(resp.status().as_u16(), 400, "{bad}");
        let err: Value = resp.json().unwrap();
        assert!(err["error"].is_string());
    }
}
