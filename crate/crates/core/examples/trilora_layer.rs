//! Build a sparsified triple low-rank layer, inspect its mask and merge it.
//!
//! cargo run --example trilora_layer

use h2tune::trilora::{init_trilora, mask_budget, Mask, TriLoraLayer};
use ndarray::{array, Array1};

fn main() -> h2tune::Result<()> {
    let rank = 4;
    for beta in [0.0, 0.25, 0.5, 1.0] {
        let mask = Mask::sample(rank, beta, 7)?;
        println!(
            "beta {beta:<4} budget {:2} ones {:2}",
            mask_budget(rank, beta),
            mask.count_ones()
        );
    }

    // Fresh layers are exact no-ops: B = 0 and R = 0.
    let fresh = init_trilora(6, 5, rank, 0.5, 42)?;
    let x = Array1::linspace(-1.0, 1.0, 6);
    println!("fresh layer delta on x: {}", fresh.apply_delta(x.view())?);

    let layer = TriLoraLayer::from_parts(
        ndarray::Array2::zeros((2, 2)),
        array![[1.0, 0.0], [0.0, 1.0]],
        array![[1.0, 2.0], [3.0, 4.0]],
        Mask::from_bits(array![[true, false], [false, true]])?,
        array![[1.0, 0.0], [0.0, 1.0]],
    )?;
    // I + diag(1, 4)
    println!("delta with diagonal mask:\n{}", layer.delta_matrix());
    println!(
        "x·delta for x = [1, 1]: {}",
        layer.apply_delta(array![1.0, 1.0].view())?
    );
    Ok(())
}
