#![allow(dead_code)]

use std::path::PathBuf;
use std::sync::Arc;

use h2tune::alignment::{RelationMatrix, SharedStack};
use h2tune::federation::FederationConfig;
use h2tune::objectives::Hyperparameters;
use h2tune::taskgen::{gen_task, Activation, ClientModel, SyntheticTaskSpec};
use h2tune::trainer::{Batch, ClientState};
use h2tune::trilora::{Mask, ResourceDescriptor, TriLoraLayer};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    let dist = Normal::new(0.0, std).unwrap();
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

pub fn random_stack(rng: &mut ChaCha8Rng, depth: usize, rank: usize) -> SharedStack {
    SharedStack::new(
        (0..depth)
            .map(|_| normal_matrix(rng, rank, rank, 1.0))
            .collect(),
    )
    .unwrap()
}

pub fn random_mask(rng: &mut ChaCha8Rng, rank: usize) -> Mask {
    let beta = [0.0, 0.25, 0.5, 0.75, 1.0][rng.random_range(0..5)];
    Mask::sample(rank, beta, rng.random()).unwrap()
}

/// A client with every adapter group non-zero, a random relation matrix and
/// a random global stack, plus a small batch from its own task.
pub struct Instance {
    pub client: ClientState,
    pub global: SharedStack,
    pub batch: Batch,
}

pub fn random_instance(seed: u64) -> Instance {
    let mut rng = rng(seed);
    let depth = rng.random_range(1..=3);
    let rank = rng.random_range(1..=3);
    let classes = rng.random_range(rank.max(2)..=4);
    let mut dims = vec![rng.random_range(rank.max(classes)..=6)];
    for _ in 1..depth {
        dims.push(rng.random_range(rank..=6));
    }
    dims.push(classes);
    let activation = if rng.random_bool(0.5) {
        Activation::Tanh
    } else {
        Activation::Identity
    };

    let mut layers = Vec::with_capacity(depth);
    for l in 0..depth {
        let (a, b) = (dims[l], dims[l + 1]);
        layers.push(
            TriLoraLayer::from_parts(
                normal_matrix(&mut rng, a, b, 1.0 / (a as f64).sqrt()),
                normal_matrix(&mut rng, a, rank, 0.5),
                normal_matrix(&mut rng, rank, rank, 0.5),
                random_mask(&mut rng, rank),
                normal_matrix(&mut rng, rank, b, 0.5),
            )
            .unwrap(),
        );
    }
    let model = ClientModel::new(layers, activation).unwrap();
    let global_depth = depth + rng.random_range(0..=2);
    let relation = RelationMatrix::new(normal_matrix(&mut rng, depth, global_depth, 0.5)).unwrap();
    let global = random_stack(&mut rng, global_depth, rank);
    let hyper = Hyperparameters {
        lr_specific: 0.1,
        lr_share: 0.1,
        weight_decay: rng.random_range(0.0..0.1),
        kl_weight: rng.random_range(0.1..2.0),
        pred_kl_weight: rng.random_range(0.1..2.0),
    };
    let data = gen_task(&SyntheticTaskSpec {
        input_dim: dims[0],
        num_classes: classes,
        n_train: 6,
        n_test: 4,
        shared_seed: rng.random(),
        private_seed: rng.random(),
        shared_weight: 0.5,
    })
    .unwrap();
    let batch = Batch::from(data.train.clone());
    let client = ClientState::new(
        0,
        model,
        relation,
        ResourceDescriptor::new(0.5, rank).unwrap(),
        hyper,
        Arc::new(data),
    )
    .unwrap();
    Instance {
        client,
        global,
        batch,
    }
}

pub fn bundled_path() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios/bundled.json")
}

pub fn bundled() -> FederationConfig {
    FederationConfig::from_json(&std::fs::read_to_string(bundled_path()).unwrap()).unwrap()
}

pub fn bits(m: &Array2<f64>) -> Vec<u64> {
    m.iter().map(|v| v.to_bits()).collect()
}
