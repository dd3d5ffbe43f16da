#![allow(dead_code)]

use profnet::dataio::FtsDataset;
use profnet::model::{ModelConfig, Profnet};
use profnet::seed;
use profnet::synthgen::{simulate_seeded, SimConfig};
use profnet::tensor::Tensor;
use profnet::training::{train, TrainConfig, TrainTrace};

/// Two regions, ten times, 21 grid points.
pub fn toy_data(seed: u64) -> FtsDataset {
    let cfg = SimConfig {
        regions: 2,
        times: 10,
        grid_size: 21,
        seed,
        ..SimConfig::default()
    };
    simulate_seeded(&cfg).unwrap().0
}

pub fn toy_model_config() -> ModelConfig {
    ModelConfig {
        latent_gps: 8,
        basis_size: 8,
        regions: 2,
        grid_size: 21,
        time_points: 10,
        ..ModelConfig::default()
    }
}

pub fn toy_model(seed: u64) -> Profnet {
    let data = toy_data(seed);
    let mut rng = seed::stream(seed, seed::INIT);
    Profnet::init(toy_model_config(), data.grid().clone(), &mut rng).unwrap()
}

pub fn train_toy(seed: u64, updates: usize, lr: f64) -> (FtsDataset, Profnet, TrainTrace) {
    let data = toy_data(seed);
    let train_part = data.slice_times(0, 8).unwrap();
    let cfg = TrainConfig {
        lr,
        updates,
        seed,
        ..TrainConfig::default()
    };
    let (model, trace) = train(&train_part, &toy_model_config(), &cfg).unwrap();
    (data, model, trace)
}

pub fn bits(t: &Tensor) -> Vec<u64> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

pub fn same_params(a: &Profnet, b: &Profnet) -> bool {
    a.store().len() == b.store().len()
        && a.store()
            .iter()
            .zip(b.store().iter())
            .all(|((_, na, ta), (_, nb, tb))| {
                na == nb && ta.shape() == tb.shape() && bits(ta) == bits(tb)
            })
}
