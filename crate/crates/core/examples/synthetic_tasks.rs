//! Generate related classification tasks and dump one as CSV.
//!
//! cargo run --example synthetic_tasks -- [out.csv]

use std::fs::File;
use std::io::{self, BufWriter, Write};

use h2tune::taskgen::{gen_task, SyntheticTaskSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let spec = |private_seed, shared_weight| SyntheticTaskSpec {
        input_dim: 8,
        num_classes: 3,
        n_train: 500,
        n_test: 200,
        shared_seed: 1,
        private_seed,
        shared_weight,
    };
    for s in [0.0, 0.5, 1.0] {
        let (t1, t2) = (gen_task(&spec(10, s))?, gen_task(&spec(20, s))?);
        // How often task 2's clean labeler agrees with task 1's on task 1's inputs.
        let agree = t1
            .test
            .inputs
            .rows()
            .into_iter()
            .filter(|x| t1.clean_label(*x) == t2.clean_label(*x))
            .count();
        println!(
            "shared_weight {s}: labelers agree on {:.1}% of inputs",
            100.0 * agree as f64 / t1.test.len() as f64
        );
    }

    let data = gen_task(&spec(10, 0.7))?;
    let out: Box<dyn Write> = match std::env::args().nth(1) {
        Some(path) => Box::new(File::create(path)?),
        None => Box::new(io::sink()),
    };
    data.write_csv(BufWriter::new(out))?;
    let mut counts = [0usize; 3];
    data.train.labels.iter().for_each(|&y| counts[y] += 1);
    println!("train label histogram: {counts:?}");
    Ok(())
}
