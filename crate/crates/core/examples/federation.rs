//! Run the bundled three-client scenario, optionally exchanging every
//! broadcast and upload through files.
//!
//! cargo run --release --example federation -- [--files DIR]

use h2tune::federation::{Arm, Federation, FederationConfig, Transport};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/bundled.json");
    let mut config = FederationConfig::from_json(&std::fs::read_to_string(path)?)?;
    let args: Vec<String> = std::env::args().collect();
    if let Some(i) = args.iter().position(|a| a == "--files") {
        let dir = args.get(i + 1).ok_or("--files needs a directory")?;
        config.transport = Transport::FileExchange(dir.into());
    }

    let mut federation = Federation::new(&config, Arm::H2Tune)?;
    println!("initial accuracy {:?}", federation.initial_accuracy());
    for _ in 0..config.rounds {
        let record = federation.step_round()?;
        let acc: Vec<String> = record
            .clients
            .iter()
            .map(|c| format!("{:.3}", c.eval_accuracy))
            .collect();
        println!(
            "round {:2}  gg² {:.4e}  acc [{}]",
            record.round,
            record.gg_sq_mean,
            acc.join(", ")
        );
    }
    let outcome = federation.into_outcome();
    println!("mean final accuracy {:.4}", outcome.mean_final_accuracy());
    println!("global stack norm {:.4}", outcome.global.frobenius_norm());
    Ok(())
}
