//! Compare the four arms on the bundled scenario over a range of seeds.
//!
//! cargo run --release --example ablation_arms -- [first_seed] [last_seed_exclusive]

use h2tune::federation::{run_federation, Arm, FederationConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let path = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/bundled.json");
    let base = FederationConfig::from_json(&std::fs::read_to_string(path)?)?;
    let mut args = std::env::args().skip(1).map(|a| a.parse::<u64>());
    let lo = args.next().transpose()?.unwrap_or(0);
    let hi = args.next().transpose()?.unwrap_or(lo + 5);

    print!("seed");
    for arm in Arm::ALL {
        print!(" {:>15}", arm.name());
    }
    println!();
    let mut wins = [0usize; 4];
    for seed in lo..hi {
        let mut config = base.clone();
        config.seed = seed;
        let acc = Arm::ALL.map(|arm| run_federation(&config, arm).map(|o| o.mean_final_accuracy()));
        print!("{seed:4}");
        for a in &acc {
            match a {
                Ok(v) => print!(" {v:15.4}"),
                Err(e) => print!(" {:>15}", format!("error: {e}")),
            }
        }
        println!();
        if let Ok(h) = acc[0] {
            for (w, other) in wins.iter_mut().zip(&acc).skip(1) {
                *w += usize::from(matches!(other, Ok(o) if h > *o));
            }
        }
    }
    for (arm, w) in Arm::ALL.iter().zip(wins).skip(1) {
        println!("H2TUNE beats {arm} on {w}/{} seeds", hi - lo);
    }
    Ok(())
}
