//! Solve the proximal share subproblem and compare with the closed form
//! available when the KL weight is zero.
//!
//! cargo run --example proximal_step

use h2tune::alignment::SharedStack;
use h2tune::trainer::{solve_proximal, ProximalProblem};
use h2tune::trilora::Mask;
use ndarray::array;

fn main() -> h2tune::Result<()> {
    let grad = SharedStack::new(vec![array![[1.0, -2.0], [0.5, 0.0]]])?;
    let start = SharedStack::new(vec![array![[0.2, 0.1], [-0.3, 0.4]]])?;
    let reference = SharedStack::new(vec![array![[1.0, 0.0], [0.0, 1.0]]])?;
    let masks = [Mask::full(2)];
    for kl_weight in [0.0, 1.0, 10.0] {
        let problem = ProximalProblem {
            grad: &grad,
            reference: &reference,
            start: &start,
            masks: &masks,
            kl_weight,
            lr_share: 0.2,
        };
        let sol = solve_proximal(&problem, 50)?;
        println!(
            "lambda {kl_weight:4}: objective {:.6} -> {:.6}, point {:?}",
            sol.start_objective,
            sol.end_objective,
            sol.point.layers()[0].as_slice().unwrap()
        );
    }
    // R_prev − (η′/2)·G
    println!(
        "closed form for lambda 0: {:?}",
        (&start.layers()[0] - &(&grad.layers()[0] * 0.1))
            .as_slice()
            .unwrap()
    );
    Ok(())
}
