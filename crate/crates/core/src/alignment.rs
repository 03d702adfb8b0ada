//! Relation-guided layer alignment.
//!
//! A client with `L_k` adapted layers owns a stack of `L_k` shared r×r
//! matrices. The relation matrix `Ω` (L_k×L_g) mixes that stack into the
//! federation's `L_g`-deep global layout and back:
//!
//! ```text
//! to_global: G[m] = Σ_l Ω[l, m] · S[l]
//! to_local:  S[l] = Σ_m Ω[l, m] · G[m]
//! ```
//!
//! Viewing a stack as an r²×L matrix, these are right-multiplication by `Ω`
//! and `Ωᵀ`, which makes the two maps adjoint under the entrywise inner
//! product.

use ndarray::Array2;

use crate::error::{Error, Result};

/// An ordered stack of square matrices sharing one rank.
#[derive(Debug, Clone, PartialEq)]
pub struct SharedStack {
    layers: Vec<Array2<f64>>,
}

impl SharedStack {
    pub fn new(layers: Vec<Array2<f64>>) -> Result<Self> {
        let Some(first) = layers.first() else {
            return Err(Error::Shape(
                "a shared stack needs at least one layer".into(),
            ));
        };
        let rank = first.nrows();
        if rank == 0 {
            return Err(Error::Shape("shared matrices must be non-empty".into()));
        }
        for (l, m) in layers.iter().enumerate() {
            if m.dim() != (rank, rank) {
                return Err(Error::Shape(format!(
                    "layer {l} is {:?}, expected {rank}x{rank}",
                    m.dim()
                )));
            }
        }
        Ok(SharedStack { layers })
    }

    pub fn zeros(depth: usize, rank: usize) -> Self {
        assert!(depth >= 1 && rank >= 1, "stack dimensions must be positive");
        SharedStack {
            layers: vec![Array2::zeros((rank, rank)); depth],
        }
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    pub fn rank(&self) -> usize {
        self.layers[0].nrows()
    }

    pub fn layers(&self) -> &[Array2<f64>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.layers
    }

    pub fn into_layers(self) -> Vec<Array2<f64>> {
        self.layers
    }

    pub fn same_shape(&self, other: &SharedStack) -> bool {
        self.depth() == other.depth() && self.rank() == other.rank()
    }

    pub(crate) fn check_same_shape(&self, other: &SharedStack, what: &str) -> Result<()> {
        if !self.same_shape(other) {
            return Err(Error::Shape(format!(
                "{what}: stacks are {}x{r1}x{r1} and {}x{r2}x{r2}",
                self.depth(),
                other.depth(),
                r1 = self.rank(),
                r2 = other.rank()
            )));
        }
        Ok(())
    }

    /// Entrywise inner product summed over all layers.
    pub fn dot(&self, other: &SharedStack) -> f64 {
        self.layers
            .iter()
            .zip(&other.layers)
            .map(|(a, b)| (a * b).sum())
            .sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.dot(self).sqrt()
    }

    /// `self += alpha * other`.
    pub fn scaled_add(&mut self, alpha: f64, other: &SharedStack) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.scaled_add(alpha, b);
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for a in &mut self.layers {
            a.mapv_inplace(|v| v * alpha);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|m| m.iter().all(|v| v.is_finite()))
    }
}

/// The trainable L_k×L_g layer-alignment map.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationMatrix(Array2<f64>);

impl RelationMatrix {
    pub fn new(omega: Array2<f64>) -> Result<Self> {
        if omega.nrows() == 0 || omega.ncols() == 0 {
            return Err(Error::Shape("relation matrix must be non-empty".into()));
        }
        if omega.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input(
                "relation matrix has non-finite entries".into(),
            ));
        }
        Ok(RelationMatrix(omega))
    }

    pub fn local_depth(&self) -> usize {
        self.0.nrows()
    }

    pub fn global_depth(&self) -> usize {
        self.0.ncols()
    }

    pub fn matrix(&self) -> &Array2<f64> {
        &self.0
    }

    pub(crate) fn matrix_mut(&mut self) -> &mut Array2<f64> {
        &mut self.0
    }
}

/// One-hot interpolation: local layer `l` maps to the evenly spaced global slot
/// `round(l·(L_g−1)/max(L_k−1, 1))` (zero-based).
pub fn init_relation(local_depth: usize, global_depth: usize) -> Result<RelationMatrix> {
    if local_depth == 0 || local_depth > global_depth {
        return Err(Error::Config(format!(
            "local depth {local_depth} must lie in 1..={global_depth}"
        )));
    }
    let span = (local_depth - 1).max(1) as f64;
    let mut omega = Array2::zeros((local_depth, global_depth));
    for l in 0..local_depth {
        let slot = (l as f64 * (global_depth - 1) as f64 / span).round() as usize;
        omega[(l, slot)] = 1.0;
    }
    Ok(RelationMatrix(omega))
}

/// Mixes a local stack up to the global depth.
pub fn to_global(stack: &SharedStack, omega: &RelationMatrix) -> Result<SharedStack> {
    if stack.depth() != omega.local_depth() {
        return Err(Error::Shape(format!(
            "stack depth {} does not match relation rows {}",
            stack.depth(),
            omega.local_depth()
        )));
    }
    let rank = stack.rank();
    let layers = (0..omega.global_depth())
        .map(|m| {
            let mut acc = Array2::zeros((rank, rank));
            for (l, s) in stack.layers().iter().enumerate() {
                acc.scaled_add(omega.0[(l, m)], s);
            }
            acc
        })
        .collect();
    Ok(SharedStack { layers })
}

/// Contracts a global stack back to the local depth with `Ωᵀ`.
pub fn to_local(global: &SharedStack, omega: &RelationMatrix) -> Result<SharedStack> {
    if global.depth() != omega.global_depth() {
        return Err(Error::Shape(format!(
            "global stack depth {} does not match relation columns {}",
            global.depth(),
            omega.global_depth()
        )));
    }
    let rank = global.rank();
    let layers = (0..omega.local_depth())
        .map(|l| {
            let mut acc = Array2::zeros((rank, rank));
            for (m, g) in global.layers().iter().enumerate() {
                acc.scaled_add(omega.0[(l, m)], g);
            }
            acc
        })
        .collect();
    Ok(SharedStack { layers })
}

/// Gradient of `⟨to_local(G, Ω), D⟩` with respect to `Ω`, i.e. the entry
/// `[l, m]` is `⟨D[l], G[m]⟩`.
pub(crate) fn relation_gradient(global: &SharedStack, d_local: &SharedStack) -> Array2<f64> {
    let mut grad = Array2::zeros((d_local.depth(), global.depth()));
    for (l, d) in d_local.layers().iter().enumerate() {
        for (m, g) in global.layers().iter().enumerate() {
            grad[(l, m)] = (d * g).sum();
        }
    }
    grad
}
