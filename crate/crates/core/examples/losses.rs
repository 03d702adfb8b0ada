//! Evaluate the two per-phase losses and their ingredients on hand inputs.
//!
//! cargo run --example losses

use h2tune::alignment::SharedStack;
use h2tune::objectives::{
    cross_entropy, loss_share, loss_specific, matrix_kl, prediction_kl, Hyperparameters,
};
use ndarray::{array, Array2};

fn main() -> h2tune::Result<()> {
    let logits = array![1.0, 2.0, 3.0];
    println!("CE(label 2) = {:.6}", cross_entropy(logits.view(), 2)?);
    println!(
        "KL(y'' || y') = {:.6}",
        prediction_kl(array![1.0, 0.0].view(), array![0.0, 1.0].view())?
    );

    let local = SharedStack::new(vec![array![[1.0, 0.0], [0.0, 1.0]]])?;
    let reference = SharedStack::zeros(1, 2);
    println!(
        "matrix KL to zero reference = {:.6}",
        matrix_kl(&local, &reference)?
    );

    let hyper = Hyperparameters::default();
    let share = loss_share(logits.view(), 2, &local, &reference, &hyper)?;
    println!("share loss: {share:?}");

    let a = vec![Array2::from_elem((3, 2), 0.1)];
    let b = vec![Array2::from_elem((2, 3), 0.2)];
    let specific = loss_specific(
        logits.view(),
        2,
        array![3.0, 2.0, 1.0].view(),
        &a,
        &b,
        &hyper,
    )?;
    println!("specific loss: {specific:?}");
    Ok(())
}
