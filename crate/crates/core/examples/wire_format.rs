//! Write a shared stack in the binary exchange format, read it back and show
//! how corruption is reported.
//!
//! cargo run --example wire_format

use h2tune::alignment::SharedStack;
use h2tune::federation::wire::{deserialize_stack, encoded_len, serialize_stack};
use ndarray::array;

fn main() -> h2tune::Result<()> {
    let stack = SharedStack::new(vec![array![[1.0, -0.0], [f64::MIN_POSITIVE, 2.5]]])?;
    let bytes = serialize_stack(&stack);
    println!(
        "{} bytes (expected {}): {:02x?}",
        bytes.len(),
        encoded_len(1, 2),
        &bytes[..13]
    );
    println!("round trip equal: {}", deserialize_stack(&bytes)? == stack);

    let mut corrupt = bytes.clone();
    corrupt[4] = 2;
    println!(
        "bad version -> {}",
        deserialize_stack(&corrupt).unwrap_err()
    );
    println!(
        "truncated   -> {}",
        deserialize_stack(&bytes[..20]).unwrap_err()
    );
    Ok(())
}
