//! Binary format for shared stacks, used both on the wire and for checkpoints.
//!
//! ```text
//! offset  size        field
//! 0       4           magic "H2TN"
//! 4       1           version (1)
//! 5       4           depth L, u32 little-endian
//! 9       4           rank r, u32 little-endian
//! 13      8·L·r²      f64 little-endian, layer-major then row-major
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;

use crate::alignment::SharedStack;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"H2TN";
pub const VERSION: u8 = 1;
pub const HEADER_LEN: usize = 13;

/// Total encoded size of a stack of the given shape.
pub fn encoded_len(depth: usize, rank: usize) -> usize {
    HEADER_LEN + 8 * depth * rank * rank
}

pub fn serialize_stack(stack: &SharedStack) -> Vec<u8> {
    let (depth, rank) = (stack.depth(), stack.rank());
    let mut out = Vec::with_capacity(encoded_len(depth, rank));
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(depth as u32).to_le_bytes());
    out.extend_from_slice(&(rank as u32).to_le_bytes());
    for layer in stack.layers() {
        // Logical iteration order is row-major regardless of memory layout.
        for v in layer.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        offset,
        reason: reason.into(),
    }
}

fn read_u32(bytes: &[u8], offset: usize, name: &str) -> Result<u32> {
    let field = bytes
        .get(offset..offset + 4)
        .ok_or_else(|| format_err(offset, format!("truncated {name}")))?;
    Ok(u32::from_le_bytes(field.try_into().expect("4 bytes")))
}

pub fn deserialize_stack(bytes: &[u8]) -> Result<SharedStack> {
    for (i, &expected) in MAGIC.iter().enumerate() {
        match bytes.get(i) {
            None => return Err(format_err(i, "truncated magic")),
            Some(&b) if b != expected => return Err(format_err(i, "bad magic")),
            Some(_) => {}
        }
    }
    match bytes.get(4) {
        None => return Err(format_err(4, "truncated version")),
        Some(&VERSION) => {}
        Some(&v) => return Err(format_err(4, format!("unsupported version {v}"))),
    }
    let depth = read_u32(bytes, 5, "depth")? as usize;
    if depth == 0 {
        return Err(format_err(5, "depth must be positive"));
    }
    let rank = read_u32(bytes, 9, "rank")? as usize;
    if rank == 0 {
        return Err(format_err(9, "rank must be positive"));
    }
    let expected = depth
        .checked_mul(rank)
        .and_then(|v| v.checked_mul(rank))
        .and_then(|v| v.checked_mul(8))
        .and_then(|v| v.checked_add(HEADER_LEN))
        .ok_or_else(|| format_err(5, "shape overflows"))?;
    if bytes.len() < expected {
        // Offset of the first value that is not fully present.
        let missing = HEADER_LEN + (bytes.len() - HEADER_LEN) / 8 * 8;
        return Err(format_err(missing, "truncated payload"));
    }
    if bytes.len() > expected {
        return Err(format_err(expected, "trailing bytes"));
    }
    let values: Vec<f64> = bytes[HEADER_LEN..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let layers = values
        .chunks_exact(rank * rank)
        .map(|c| Array2::from_shape_vec((rank, rank), c.to_vec()).expect("r*r values"))
        .collect();
    SharedStack::new(layers)
}

pub fn write_stack_file(path: &Path, stack: &SharedStack) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    fs::write(path, serialize_stack(stack))?;
    Ok(())
}

pub fn read_stack_file(path: &Path) -> Result<SharedStack> {
    deserialize_stack(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn offset_of(r: Result<SharedStack>) -> usize {
        match r {
            Err(Error::Format { offset, .. }) => offset,
            other => panic!("expected a format error, got {other:?}"),
        }
    }

    #[test]
    fn single_layer_rank_two_is_45_bytes() {
        let s = SharedStack::new(vec![array![[1.0, 2.0], [3.0, 4.0]]]).unwrap();
        let bytes = serialize_stack(&s);
        assert_eq!(bytes.len(), 4 + 1 + 8 + 4 * 8);
        assert_eq!(encoded_len(1, 2), 45);
        assert_eq!(&bytes[..5], b"H2TN\x01");
        assert_eq!(&bytes[5..13], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[13..21], &1.0f64.to_le_bytes());
        assert_eq!(&bytes[21..29], &2.0f64.to_le_bytes());
        assert_eq!(deserialize_stack(&bytes).unwrap(), s);
    }

    #[test]
    fn transposed_layout_serializes_row_major() {
        let m = array![[1.0, 2.0], [3.0, 4.0]];
        let s = SharedStack::new(vec![
            m.t().to_owned(),
            m.t().as_standard_layout().to_owned(),
        ])
        .unwrap();
        let back = deserialize_stack(&serialize_stack(&s)).unwrap();
        assert_eq!(back.layers()[0], m.t());
    }

    #[test]
    fn header_errors_carry_offsets() {
        let good = serialize_stack(&SharedStack::zeros(2, 3));
        assert_eq!(offset_of(deserialize_stack(&[])), 0);
        assert_eq!(offset_of(deserialize_stack(b"H2")), 2);
        assert_eq!(offset_of(deserialize_stack(b"H3TN\x01")), 1);
        assert_eq!(offset_of(deserialize_stack(b"H2TN")), 4);
        assert_eq!(offset_of(deserialize_stack(b"H2TN\x02")), 4);
        assert_eq!(offset_of(deserialize_stack(&good[..7])), 5);
        assert_eq!(offset_of(deserialize_stack(&good[..11])), 9);
        assert_eq!(
            offset_of(deserialize_stack(&good[..HEADER_LEN + 8 * 5 + 3])),
            HEADER_LEN + 8 * 5
        );

        let mut zero_depth = good.clone();
        zero_depth[5..9].copy_from_slice(&0u32.to_le_bytes());
        assert_eq!(offset_of(deserialize_stack(&zero_depth)), 5);

        let mut extra = good.clone();
        extra.push(0);
        assert_eq!(offset_of(deserialize_stack(&extra)), good.len());
    }
}
