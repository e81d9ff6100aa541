use std::path::Path;

use agent_router::config::RunConfig;
use agent_router::dataset::write_dataset;
use agent_router::pipeline::{self, AdaptiveOverrides, Context, EvalOptions, Prediction, Split};
use agent_router::synthetic::generate;
use agent_router::Error;

fn small_run(root: &Path) -> Context {
    std::fs::create_dir_all(root.join("data")).unwrap();
    for (name, n, seed) in [("train", 80, 1), ("val", 40, 2), ("test", 40, 3)] {
        write_dataset(&root.join(format!("data/{name}.jsonl")), &generate(n, seed, &format!("{name}-"))).unwrap();
    }
    let cfg = RunConfig::from_toml(
        r#"
seed = 5
[paths]
train = "data/train.jsonl"
val = "data/val.jsonl"
test = "data/test.jsonl"
run_dir = "run"
[train]
hidden = 16
epochs = 2
[refinement]
rounds = 1
finetune_epochs = 1
"#,
        root,
    )
    .unwrap();
    Context::open(cfg).unwrap()
}

#[test]
fn stages_report_missing_predecessors() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = small_run(dir.path());
    for err in [
        pipeline::score_agents(&ctx).unwrap_err(),
        pipeline::infer(&ctx, Split::Test, AdaptiveOverrides::default()).unwrap_err(),
    ] {
        assert!(matches!(err, Error::MissingArtifact { .. }), "{err}");
        assert_eq!(err.exit_code(), 2);
    }
    pipeline::prepare(&ctx).unwrap();
    let err = pipeline::train(&ctx).unwrap_err();
    assert!(matches!(err, Error::MissingArtifact { producer: "score-agents", .. }), "{err}");
}

#[test]
fn stages_are_idempotent_and_full_pool_matches_vote() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = small_run(dir.path());
    let first = pipeline::prepare(&ctx).unwrap();
    assert_eq!(first.built, 160);
    let again = pipeline::prepare(&ctx).unwrap();
    assert_eq!((again.built, again.skipped), (0, 160));

    let scored = pipeline::score_agents(&ctx).unwrap();
    assert!(scored.iter().all(|r| r.backend_calls == r.cells));
    let rescored = pipeline::score_agents(&ctx).unwrap();
    assert!(rescored.iter().all(|r| r.backend_calls == 0));

    let trained = pipeline::train(&ctx).unwrap();
    assert!(trained.epoch >= 1 && trained.epoch <= 2);
    assert!(ctx.layout.checkpoint().exists() && ctx.layout.report().exists());

    let n = ctx.agents().unwrap().len();
    let full = AdaptiveOverrides {
        tau_agree: Some(1.0),
        k_min: Some(n),
        k_max: Some(n),
    };
    let report = pipeline::infer(&ctx, Split::Test, full).unwrap();
    assert_eq!(report.queries, 40);
    assert!((report.mean_calls - n as f64).abs() < 1e-12);

    let summary = pipeline::eval(
        &ctx,
        &EvalOptions {
            split: Some(Split::Test),
            predictions: None,
            baseline: true,
            seeds: Vec::new(),
        },
    )
    .unwrap();
    let (adaptive, vote) = (&summary.rows[0], &summary.rows[1]);
    assert!((adaptive.f1 - vote.f1).abs() < 1e-9, "{}", summary.table());
    assert!((adaptive.em - vote.em).abs() < 1e-9);
    assert!(summary.table().contains("full-pool vote"));
}

#[test]
fn eval_of_gold_predictions_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let ctx = small_run(dir.path());
    let test = ctx.load_split(Split::Test).unwrap();
    let path = dir.path().join("gold.jsonl");
    let lines: Vec<String> = test
        .iter()
        .map(|inst| {
            let p = Prediction {
                id: inst.id.clone(),
                gold: inst.gold_answers.clone(),
                result: agent_router::adaptive::AdaptiveResult {
                    answer: inst.gold_answers[0].clone(),
                    consulted: Vec::new(),
                    k_star: 1,
                    stopped_early: true,
                    agreement_trace: vec![1.0],
                    failed: Vec::new(),
                },
            };
            serde_json::to_string(&p).unwrap()
        })
        .collect();
    std::fs::write(&path, lines.join("\n")).unwrap();
    let preds = pipeline::read_predictions(&path).unwrap();
    let (f1, em, calls) = pipeline::score_predictions(&preds, &test).unwrap();
    assert_eq!((f1, em, calls), (100.0, 100.0, 1.0));
    let summary = pipeline::eval(
        &ctx,
        &EvalOptions {
            split: Some(Split::Test),
            predictions: Some(path),
            baseline: false,
            seeds: Vec::new(),
        },
    )
    .unwrap();
    assert_eq!(summary.rows.len(), 1);
    assert!((summary.rows[0].f1 - 100.0).abs() < 1e-9);
}

#[test]
fn predictions_for_unknown_ids_are_rejected() {
    let test = generate(3, 3, "test-");
    let other = generate(1, 9, "other-");
    let p = Prediction {
        id: other[0].id.clone(),
        gold: other[0].gold_answers.clone(),
        result: agent_router::adaptive::AdaptiveResult {
            answer: "x".into(),
            consulted: Vec::new(),
            k_star: 1,
            stopped_early: false,
            agreement_trace: vec![1.0],
            failed: Vec::new(),
        },
    };
    assert!(pipeline::score_predictions(&[p], &test).is_err());
    assert!(pipeline::score_predictions(&[], &test).is_err());
}
