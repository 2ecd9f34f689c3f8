//! Shared fixtures for the criterion benches: a synthetic skewed table, a
//! workload over it, and a lightly trained model, so individual benches
//! measure kernels and estimators rather than setup.

use rand::Rng;
use uae_core::data::{ColumnDictionary, ColumnKind, EncodedTable, Value};
use uae_core::model::{ModelConfig, ResMadeModel};
use uae_core::sampler::QueryRegion;
use uae_core::trainer::{hybrid_train, rng_stream, TrainMode, TrainingConfig};

pub const SIZES: [usize; 6] = [80, 40, 24, 16, 8, 4];

/// 8K-row correlated table over [`SIZES`].
pub fn fixture_table() -> EncodedTable {
    let names = ["c0", "c1", "c2", "c3", "c4", "c5"];
    let columns: Vec<ColumnDictionary> = names
        .iter()
        .zip(SIZES)
        .map(|(name, k)| {
            let values = (0..k).map(|v| Value::Num(v as f64)).collect();
            ColumnDictionary::new(*name, ColumnKind::Numeric, values)
        })
        .collect();
    let mut rng = rng_stream(12, 0);
    let mut codes = Vec::with_capacity(8000 * SIZES.len());
    for _ in 0..8000 {
        let c0: u32 = (rng.random_range(0..80u32) + rng.random_range(0..80)) / 2;
        let c1 = (c0 / 2 + rng.random_range(0..8)) % 40;
        let c2 = (c0 + c1) % 24;
        let c3 = rng.random_range(0..16);
        let c4 = (c3 / 2) % 8;
        let c5 = rng.random_range(0..4);
        codes.extend([c0, c1, c2, c3, c4, c5]);
    }
    EncodedTable::new(columns, codes).expect("fixture codes are in-domain")
}

/// A model given one brief data-only epoch, enough to leave uniform
/// initialization behind.
pub fn fixture_model(table: &EncodedTable) -> ResMadeModel {
    let config = ModelConfig { hidden_units: 64, seed: 3, ..ModelConfig::default() };
    let mut model = ResMadeModel::build(config, table).expect("model for fixture table");
    let train = TrainingConfig {
        mode: TrainMode::DataOnly,
        epochs: 1,
        seed: 3,
        ..TrainingConfig::default()
    };
    hybrid_train(&mut model, table, &[], &train, None).expect("one warmup epoch");
    model
}

/// A mid-selectivity region: range on c0, equality on c3, rest wildcard.
pub fn fixture_region() -> QueryRegion {
    let mut region = QueryRegion::full(&SIZES);
    let allowed: Vec<bool> = (0..80).map(|v| (20..=45).contains(&v)).collect();
    region.restrict(0, &allowed).expect("c0 width");
    let eq: Vec<bool> = (0..16).map(|v| v == 5).collect();
    region.restrict(3, &eq).expect("c3 width");
    region
}
