//! Regression fixture: a fixed seed and fixed input must keep producing the
//! same logits. The fixture is recorded on first run and asserted thereafter.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use prunelab::{ModelConfig, TransformerModel};

#[derive(Serialize, Deserialize)]
struct Fixture {
    config: ModelConfig,
    ids: Vec<usize>,
    logits: Vec<Vec<f32>>,
}

fn fixture_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/golden_logits.json")
}

#[test]
fn fixed_seed_and_input_reproduce_recorded_logits() {
    let config = ModelConfig {
        rng_seed: 99,
        ..ModelConfig::default()
    };
    let ids: Vec<usize> = vec![257, 72, 101, 108, 108, 111, 32, 119];
    let model = TransformerModel::<f32>::build(config.clone()).unwrap();
    let logits = model.logits(&ids).unwrap();
    let rows: Vec<Vec<f32>> = (0..logits.rows()).map(|i| logits.row(i).to_vec()).collect();

    let path = fixture_path();
    if !path.exists() {
        std::fs::create_dir_all(path.parent().unwrap()).unwrap();
        let fixture = Fixture {
            config,
            ids,
            logits: rows,
        };
        std::fs::write(&path, serde_json::to_vec_pretty(&fixture).unwrap()).unwrap();
        eprintln!("recorded fresh fixture at {}", path.display());
        return;
    }

    let recorded: Fixture = serde_json::from_slice(&std::fs::read(&path).unwrap()).unwrap();
    assert_eq!(recorded.config, config, "fixture was recorded for another config");
    assert_eq!(recorded.ids, ids);
    assert_eq!(recorded.logits.len(), rows.len());
    for (t, (want_row, got_row)) in recorded.logits.iter().zip(&rows).enumerate() {
        for (j, (want, got)) in want_row.iter().zip(got_row).enumerate() {
            assert!(
                (want - got).abs() <= 1e-6,
                "logit drifted at position {t}, column {j}: recorded {want}, got {got}"
            );
        }
    }
}
