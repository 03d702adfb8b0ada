//! Run one client through a few local rounds against a fixed global stack,
//! watching each phase.
//!
//! cargo run --example client_round

use std::sync::Arc;

use h2tune::alignment::{init_relation, SharedStack};
use h2tune::objectives::Hyperparameters;
use h2tune::taskgen::{build_toy_model, gen_task, Activation, ArchSpec, SyntheticTaskSpec};
use h2tune::trainer::ClientState;
use h2tune::trilora::ResourceDescriptor;

fn main() -> h2tune::Result<()> {
    let arch = ArchSpec::uniform(3, 12, 4, Activation::Tanh);
    let model = build_toy_model(&arch, 4, 0.5, 3)?;
    let data = gen_task(&SyntheticTaskSpec {
        input_dim: 12,
        num_classes: 4,
        n_train: 128,
        n_test: 500,
        shared_seed: 1,
        private_seed: 2,
        shared_weight: 0.7,
    })?;
    let hyper = Hyperparameters {
        lr_specific: 0.5,
        lr_share: 0.1,
        ..Hyperparameters::default()
    };
    let mut client = ClientState::new(
        0,
        model,
        init_relation(3, 4)?,
        ResourceDescriptor::new(0.5, 4)?,
        hyper,
        Arc::new(data),
    )?;
    let global = SharedStack::zeros(4, 4);
    println!(
        "initial test accuracy {:.3}",
        client.model.accuracy(&client.data.test)
    );
    for round in 0..5 {
        let mut phases = 0;
        let (upload, stats) =
            client.local_round_observed(&global, 2, round, &mut |_, _| phases += 1)?;
        println!(
            "round {round}: share {:.4} specific {:.4} gg {:.4} phases {phases} upload norm {:.4} acc {:.3}",
            stats.share_loss,
            stats.specific_loss,
            stats.gg_norm,
            upload.frobenius_norm(),
            client.model.accuracy(&client.data.test)
        );
    }
    Ok(())
}
