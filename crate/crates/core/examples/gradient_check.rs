//! Compare hand-derived gradients with central finite differences for every
//! client of the bundled scenario, before and after some training.
//!
//! cargo run --release --example gradient_check

use h2tune::federation::{Arm, Federation, FederationConfig};
use h2tune::trainer::{Batch, FD_STEP};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/bundled.json");
    let config = FederationConfig::from_json(&std::fs::read_to_string(path)?)?;
    let mut federation = Federation::new(&config, Arm::H2Tune)?;
    for stage in ["untrained", "after 5 rounds"] {
        for client in federation.clients() {
            let batch = Batch::from(client.data.train.select(&(0..8).collect::<Vec<_>>()));
            let err = client.check_gradients(federation.global(), &batch)?;
            println!(
                "{stage:15} client {}: worst relative error {err:.2e} (step {FD_STEP:e})",
                client.id
            );
        }
        for _ in 0..5 {
            federation.step_round()?;
        }
    }
    Ok(())
}
