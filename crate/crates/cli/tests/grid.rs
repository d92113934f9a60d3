use std::collections::{BTreeMap, HashSet};

use aralign::alignment::{Mechanism, Objective};
use aralign::trainer::TrainConfig;
use aralign_cli::ablate::{set_path, AblationGrid, Sweep};
use aralign_cli::config::PipelineConfig;
use aralign_cli::error::CliError;
use aralign_cli::workspace::Keys;
use proptest::prelude::*;
use serde_json::{json, Value};

fn grid(v: Value) -> AblationGrid {
    serde_json::from_value(v).unwrap()
}

#[test]
fn mechanism_axis_over_three_seeds_gives_nine_rows() {
    let g = grid(json!({ "axes": { "alignment.mechanism": ["hybnext", "rep", "none"] }, "seeds": [0, 1, 2] }));
    assert_eq!(g.size().unwrap(), 9);
    let cells = g.expand(&TrainConfig::default()).unwrap();
    assert_eq!(cells.len(), 9);
    let mechs: HashSet<_> = cells.iter().map(|c| format!("{:?}", c.config.alignment.mechanism)).collect();
    assert_eq!(mechs.len(), 3);
    let seeds: HashSet<u64> = cells.iter().map(|c| c.config.seed).collect();
    assert_eq!(seeds, HashSet::from([0, 1, 2]));
}

#[test]
fn lambda_axis_gives_five_configs_per_seed() {
    let g = grid(json!({ "axes": { "alignment.lambda": [0.5, 0.8, 1.0, 1.5, 2.0] }, "seeds": [3] }));
    let cells = g.expand(&TrainConfig::default()).unwrap();
    let lambdas: Vec<f64> = cells.iter().map(|c| c.config.alignment.lambda).collect();
    assert_eq!(lambdas, vec![0.5, 0.8, 1.0, 1.5, 2.0]);
    assert!(cells.iter().all(|c| c.config.seed == 3));
}

#[test]
fn empty_axes_give_a_single_base_row() {
    let g = grid(json!({}));
    let cells = g.expand(&TrainConfig::default()).unwrap();
    assert_eq!(cells.len(), 1);
    assert_eq!(cells[0].label(), "base");
    assert_eq!(cells[0].config, TrainConfig::default());
}

#[test]
fn invalid_paths_fail_before_training() {
    for bad in ["alignment.mechansim", "steps.count", "nope"] {
        let g = grid(json!({ "axes": { bad: [1] } }));
        assert!(matches!(g.expand(&TrainConfig::default()), Err(CliError::Config(_))), "{bad}");
    }
    let g = grid(json!({ "base": { "alignment": { "lamda": 2.0 } } }));
    assert!(matches!(g.expand(&TrainConfig::default()), Err(CliError::Config(_))));
    // right path, wrong value type
    let g = grid(json!({ "axes": { "alignment.mechanism": ["sideways"] } }));
    assert!(matches!(g.expand(&TrainConfig::default()), Err(CliError::Config(_))));
    // invalid combination caught by config validation
    let g = grid(json!({ "axes": { "alignment.encoder": ["vision_only"] } }));
    assert!(matches!(g.expand(&TrainConfig::default()), Err(CliError::Config(_))));
    let g = grid(json!({ "axes": { "steps": [10] }, "sweeps": [{ "name": "x" }] }));
    assert!(g.expand(&TrainConfig::default()).is_err());
}

#[test]
fn sweep_set_and_base_apply_to_every_cell() {
    let g = grid(json!({
        "base": { "steps": 7, "alignment": { "objective": "mse" } },
        "sweeps": [{ "name": "encoder", "axes": { "alignment.encoder": ["cross_modal", "vision_only"] },
                     "set": { "alignment.aggregation": "avgpool" } }],
        "seeds": [0, 1]
    }));
    let cells = g.expand(&TrainConfig::default()).unwrap();
    assert_eq!(cells.len(), 4);
    for c in &cells {
        assert_eq!(c.config.steps, 7);
        assert_eq!(c.config.alignment.objective, Objective::Mse);
        assert_eq!(c.config.alignment.aggregation, aralign::foundation::AggMode::AvgPool);
    }
}

#[test]
fn reference_grid_fits_the_budget_and_shares_runs() {
    let path = std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/ablation.json");
    let g = AblationGrid::load(&path).unwrap();
    let cells = g.expand(&TrainConfig::default()).unwrap();
    assert_eq!(cells.len(), 3 + 3 + 2 + 5 + 2 + 4 + 2);
    assert!(cells.len() <= 40);
    assert!(cells.iter().all(|c| c.config.steps == 500));
    let pipeline = PipelineConfig::default();
    let runs: HashSet<String> = cells
        .iter()
        .map(|c| Keys::new(&PipelineConfig { train: c.config.clone(), ..pipeline.clone() }).run)
        .collect();
    assert_eq!(runs.len(), 15);
    assert!(cells.iter().any(|c| c.config.alignment.mechanism == Mechanism::None));
}

#[test]
fn set_path_replaces_existing_leaves_only() {
    let mut v = json!({ "a": { "b": 1, "c": null } });
    set_path(&mut v, "a.b", json!(2)).unwrap();
    set_path(&mut v, "a.c", json!(3)).unwrap();
    assert_eq!(v, json!({ "a": { "b": 2, "c": 3 } }));
    assert!(set_path(&mut v, "a.d", json!(0)).is_err());
    assert!(set_path(&mut v, "a.b.x", json!(0)).is_err());
}

#[test]
fn cells_outside_the_axis_keep_every_other_field() {
    let g = grid(json!({ "axes": { "alignment.depth": [1, 2] } }));
    let cells = g.expand(&TrainConfig::default()).unwrap();
    let mut a = serde_json::to_value(&cells[0].config).unwrap();
    let b = serde_json::to_value(&cells[1].config).unwrap();
    set_path(&mut a, "alignment.depth", json!(2)).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #[test]
    fn grid_size_is_sum_of_products_times_seeds(
        lens in proptest::collection::vec(proptest::collection::vec(1usize..4, 0..3), 1..4),
        seeds in 1usize..4,
    ) {
        // axes drawn from a pool of numeric fields with harmless values
        let pool = ["alignment.lambda", "cond_dropout_p", "probe_size"];
        let value = |p: &str, i: usize| match p {
            "alignment.lambda" => json!(0.5 + i as f64),
            "cond_dropout_p" => json!(0.1 * i as f64),
            _ => json!(8 + i),
        };
        let sweeps: Vec<Sweep> = lens
            .iter()
            .enumerate()
            .map(|(k, axis_lens)| Sweep {
                name: format!("s{k}"),
                axes: axis_lens.iter().enumerate().map(|(j, &n)| (pool[j].to_string(), (0..n).map(|i| value(pool[j], i)).collect())).collect::<BTreeMap<_, _>>(),
                set: BTreeMap::new(),
            })
            .collect();
        let expect: usize = lens.iter().map(|l| l.iter().product::<usize>()).sum::<usize>() * seeds;
        let g = AblationGrid { base: Value::Null, axes: BTreeMap::new(), sweeps, seeds: (0..seeds as u64).collect() };
        prop_assert_eq!(g.size().unwrap(), expect);
        prop_assert_eq!(g.expand(&TrainConfig::default()).unwrap().len(), expect);
    }
}
