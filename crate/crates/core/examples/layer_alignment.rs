//! Map a 2-layer client's shared stack onto a 4-layer global stack and back.
//!
//! cargo run --example layer_alignment

use h2tune::alignment::{init_relation, to_global, to_local, SharedStack};
use ndarray::array;

fn main() -> h2tune::Result<()> {
    let omega = init_relation(2, 4)?;
    println!("initial relation matrix:\n{}", omega.matrix());

    let local = SharedStack::new(vec![
        array![[1.0, 0.0], [0.0, 1.0]],
        array![[0.0, 2.0], [2.0, 0.0]],
    ])?;
    let global = to_global(&local, &omega)?;
    for (m, layer) in global.layers().iter().enumerate() {
        println!("global slot {m}:\n{layer}");
    }
    let back = to_local(&global, &omega)?;
    println!("to_local(to_global(S)) == S: {}", back == local);

    // ⟨to_global(S), G⟩ = ⟨S, to_local(G)⟩
    let g = SharedStack::new(
        (0..4)
            .map(|m| array![[m as f64, 1.0], [0.5, -1.0]])
            .collect(),
    )?;
    println!(
        "adjointness: {} vs {}",
        global.dot(&g),
        local.dot(&to_local(&g, &omega)?)
    );
    Ok(())
}
