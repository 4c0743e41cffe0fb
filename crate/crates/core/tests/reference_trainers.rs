mod common;

use std::time::Instant;

use common::oracles::{brute_force_stump, perceptron_separates, same_stump};
use common::{config, dataset, project, rec, run};
use proptest::prelude::*;
use serde_json::json;
use trainforge_core::dataset::Record;
use trainforge_core::models::stumps::{boosting_round, objective_loss};
use trainforge_core::models::{best_stump, fit_boosted_stumps, tokenize, BoostedStumpModel, Objective};
use trainforge_core::trainer::{RunControl, TrainerError};

/// Two classes told apart by one marker token, padded with shared filler.
fn marker_corpus(n: usize) -> Vec<Record> {
    let filler = ["the", "a", "quick", "brown", "fox", "jumps", "over", "lazy", "dog"];
    (0..n)
        .map(|i| {
            let (marker, label) = if i % 2 == 0 { ("aardvark", "A") } else { ("zebra", "B") };
            let mut words: Vec<&str> = (0..(i % 5) + 2).map(|k| filler[(i * 7 + k * 3) % filler.len()]).collect();
            words.insert(i % words.len(), marker);
            rec(&[("text", json!(words.join(" "))), ("label", json!(label))])
        })
        .collect()
}

#[test]
fn text_classifier_separates_marker_tokens() {
    let records = marker_corpus(200);
    assert!(perceptron_separates(&records));
    let p = project(&config(
        "text-classification",
        "text_column: text, target_column: label",
        "epochs: 3",
    ));
    let d = dataset(&p, records);
    let dir = tempfile::tempdir().unwrap();
    let r = run(&p, &d, dir.path(), RunControl::default());
    let acc = r.artifact().train_metrics.as_ref().unwrap().get("accuracy").unwrap();
    assert!(acc >= 0.99, "train accuracy {acc}");
    let meta: serde_json::Value =
        serde_json::from_slice(&std::fs::read(dir.path().join("artifact/metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["model"]["labels"], json!(["A", "B"]));
}

#[test]
fn text_classifier_needs_two_classes() {
    let p = project(&config("text-classification", "text_column: text, target_column: label", ""));
    let d = dataset(&p, vec![rec(&[("text", json!("x y")), ("label", json!("only"))]); 4]);
    let dir = tempfile::tempdir().unwrap();
    let r = run(&p, &d, dir.path(), RunControl::default());
    assert!(matches!(r.result, Err(TrainerError::SingleClass)));
}

#[test]
fn text_regression_fits_token_count() {
    let words = ["alpha", "beta", "gamma", "delta", "omega"];
    let records: Vec<Record> = (0..100)
        .map(|i| {
            let k = 1 + (i * 7) % 9;
            let text: Vec<&str> = (0..k).map(|j| words[(i + j * 3) % words.len()]).collect();
            let y = 2.0 * tokenize(&text.join(" ")).len() as f64;
            rec(&[("text", json!(text.join(" "))), ("score", json!(y))])
        })
        .collect();
    let p = project(&config(
        "text-regression",
        "text_column: text, target_column: score",
        "epochs: 30, batch_size: 10, lr: 0.05, feature_dim: 1024",
    ));
    let d = dataset(&p, records);
    let dir = tempfile::tempdir().unwrap();
    let r = run(&p, &d, dir.path(), RunControl::default());
    let r2 = r.artifact().train_metrics.as_ref().unwrap().get("r2").unwrap();
    assert!(r2 >= 0.95, "train r2 {r2}");
}

#[test]
fn causal_lm_learns_alternation() {
    let p = project(&config(
        "llm:sft",
        "text_column: text",
        "epochs: 5, block_size: 16, model_max_length: 2048, lr: 0.05, batch_size: 2",
    ));
    let d = dataset(&p, vec![rec(&[("text", json!("ab".repeat(512)))])]);
    let dir = tempfile::tempdir().unwrap();
    let started = Instant::now();
    let r = run(&p, &d, dir.path(), RunControl::default());
    let loss = r.artifact().train_metrics.as_ref().unwrap().get("loss").unwrap();
    assert!(loss < 0.1, "final train loss {loss} nats/byte");
    assert!(started.elapsed().as_secs() < 60);
}

#[test]
fn causal_lm_error_cases() {
    let p = project(&config(
        "llm:sft",
        "text_column: text",
        "block_size: 8192, model_max_length: 1024",
    ));
    let d = dataset(&p, vec![rec(&[("text", json!("abc"))])]);
    let dir = tempfile::tempdir().unwrap();
    let r = run(&p, &d, dir.path(), RunControl::default());
    assert!(matches!(r.result, Err(TrainerError::BlockSizeExceedsMaxLength { .. })));

    let p = project(&config("llm:sft", "text_column: text", ""));
    let d = dataset(&p, vec![rec(&[("text", json!(""))])]);
    let r = run(&p, &d, dir.path(), RunControl::default());
    assert!(matches!(r.result, Err(TrainerError::EmptyText { record: 0 })));
}

#[test]
fn single_stump_separates_sign() {
    let records: Vec<Record> = (0..100)
        .map(|i| {
            let x1 = (i as f64 * 0.37).sin();
            let x2 = (i as f64 * 1.3).cos();
            rec(&[
                ("x1", json!(x1)),
                ("x2", json!(x2)),
                ("y", json!(if x1 > 0.0 { "pos" } else { "neg" })),
            ])
        })
        .collect();
    let p = project(&config(
        "tabular:classification",
        "feature_columns: [x1, x2], target_column: y",
        "rounds: 20",
    ));
    let d = dataset(&p, records);
    let dir = tempfile::tempdir().unwrap();
    let r = run(&p, &d, dir.path(), RunControl::default());
    let acc = r.artifact().train_metrics.as_ref().unwrap().get("accuracy").unwrap();
    assert_eq!(acc, 1.0);
}

#[test]
fn stump_edge_cases() {
    let x: Vec<Vec<f64>> = (0..6).map(|i| vec![i as f64]).collect();
    let model = fit_boosted_stumps(&x, &[3.5; 6], Objective::SquaredError, 5, 0.1);
    assert_eq!(model.f0, 3.5);
    assert!(model.stumps.iter().all(|s| s.left == 0.0 && s.right == 0.0));

    let y: Vec<f64> = (0..6).map(|i| i as f64).collect();
    let model = fit_boosted_stumps(&x, &y, Objective::SquaredError, 0, 0.1);
    assert!(x.iter().all(|xi| model.predict(xi) == 2.5));
}

fn table() -> impl Strategy<Value = (Vec<Vec<f64>>, Vec<f64>)> {
    (2usize..=50, 1usize..=4).prop_flat_map(|(n, d)| {
        (
            // a coarse grid makes duplicate values and tied splits common
            prop::collection::vec(prop::collection::vec((-3i32..=3).prop_map(f64::from), d), n),
            prop::collection::vec(-5.0f64..5.0, n),
        )
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn every_round_picks_the_brute_force_stump((x, y) in table()) {
        for objective in [Objective::SquaredError, Objective::Logistic] {
            let y: Vec<f64> = match objective {
                Objective::SquaredError => y.clone(),
                Objective::Logistic => y.iter().map(|v| f64::from(*v > 0.0)).collect(),
            };
            let mut model = BoostedStumpModel::new(objective, &y, 0.1);
            let mut f = vec![model.f0; y.len()];
            for round in 0..10 {
                let r = trainforge_core::models::stumps::negative_gradient(objective, &y, &f);
                let oracle = brute_force_stump(&x, &r);
                prop_assert!(same_stump(&best_stump(&x, &r), &oracle), "round {}", round);
                let picked = boosting_round(&mut model, &x, &y, &mut f);
                prop_assert!(same_stump(&picked, &oracle));
            }
        }
    }

    #[test]
    fn squared_error_never_increases((x, y) in table()) {
        let mut model = BoostedStumpModel::new(Objective::SquaredError, &y, 0.1);
        let mut f = vec![model.f0; y.len()];
        let mut prev = objective_loss(Objective::SquaredError, &y, &f);
        for _ in 0..100 {
            boosting_round(&mut model, &x, &y, &mut f);
            let loss = objective_loss(Objective::SquaredError, &y, &f);
            prop_assert!(loss <= prev + 1e-12 * prev.max(1.0), "{} > {}", loss, prev);
            prev = loss;
        }
    }
}
