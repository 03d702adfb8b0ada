//! Sparsified triple low-rank adapters.
//!
//! Each fine-tuned layer keeps a frozen base weight `W` (a×b) and an update
//!
//! ```text
//! ΔW = (A + A·(Φ∘R))·B = A·(I + Φ∘R)·B
//! ```
//!
//! where `A` (a×r) and `B` (r×b) are private to the client, `R` (r×r) is the
//! matrix exchanged with the server and `Φ` is a fixed binary mask whose
//! density is the client's sparsity ratio. Inputs are row vectors, so the
//! layer maps `x ↦ x·(W + ΔW)`.

use ndarray::{Array1, Array2, ArrayView1, Zip};
use rand::seq::index;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::rng_from;

/// How much of the shared matrix a client can afford to train.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResourceDescriptor {
    /// Fraction of `R` entries left trainable; 1.0 is a dense `R`.
    pub sparsity_ratio: f64,
    /// The client's nominal adapter rank budget. Informational only; every
    /// layer uses the federation-wide rank.
    pub declared_rank: usize,
}

impl ResourceDescriptor {
    pub fn new(sparsity_ratio: f64, declared_rank: usize) -> Result<Self> {
        let r = Self {
            sparsity_ratio,
            declared_rank,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        check_ratio(self.sparsity_ratio)?;
        if self.declared_rank == 0 {
            return Err(Error::Config("declared rank must be positive".into()));
        }
        Ok(())
    }
}

fn check_ratio(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(Error::Config(format!(
            "sparsity ratio {beta} is outside [0, 1]"
        )));
    }
    Ok(())
}

/// Number of trainable entries in an r×r mask at sparsity ratio `beta`.
pub fn mask_budget(rank: usize, beta: f64) -> usize {
    (beta * (rank * rank) as f64).round() as usize
}

/// Binary r×r sparsification mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask(Array2<bool>);

impl Mask {
    pub fn full(rank: usize) -> Self {
        Mask(Array2::from_elem((rank, rank), true))
    }

    pub fn empty(rank: usize) -> Self {
        Mask(Array2::from_elem((rank, rank), false))
    }

    /// Seeded uniform choice of `mask_budget(rank, beta)` positions.
    pub fn sample(rank: usize, beta: f64, seed: u64) -> Result<Self> {
        check_ratio(beta)?;
        let mut rng = rng_from(&[seed, 0x4D41_534B]);
        let mut bits = Array2::from_elem((rank, rank), false);
        let chosen = index::sample(&mut rng, rank * rank, mask_budget(rank, beta));
        for flat in chosen.iter() {
            bits[(flat / rank, flat % rank)] = true;
        }
        Ok(Mask(bits))
    }

    pub fn from_bits(bits: Array2<bool>) -> Result<Self> {
        if !bits.is_square() {
            return Err(Error::Shape("mask must be square".into()));
        }
        Ok(Mask(bits))
    }

    pub fn rank(&self) -> usize {
        self.0.nrows()
    }

    pub fn count_ones(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }

    pub fn bits(&self) -> &Array2<bool> {
        &self.0
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.0[(row, col)]
    }

    /// `Φ∘m`: zero every entry outside the mask.
    pub fn apply(&self, m: &Array2<f64>) -> Array2<f64> {
        let mut out = m.clone();
        self.apply_in_place(&mut out);
        out
    }

    pub fn apply_in_place(&self, m: &mut Array2<f64>) {
        Zip::from(m).and(&self.0).for_each(|v, &keep| {
            if !keep {
                *v = 0.0;
            }
        });
    }
}

/// One adapted layer: frozen base plus the `A`, `R`, `Φ`, `B` adapter state.
#[derive(Debug, Clone, PartialEq)]
pub struct TriLoraLayer {
    pub(crate) base_weight: Array2<f64>,
    pub(crate) a: Array2<f64>,
    pub(crate) b: Array2<f64>,
    pub(crate) r: Array2<f64>,
    pub(crate) mask: Mask,
}

/// Builds a layer with a zero base weight. `A ~ N(0, 1/r)`, `B = 0`, `R = 0`,
/// so the adapter starts as an exact no-op.
pub fn init_trilora(
    in_dim: usize,
    out_dim: usize,
    rank: usize,
    beta: f64,
    seed: u64,
) -> Result<TriLoraLayer> {
    if rank == 0 || rank > in_dim.min(out_dim) {
        return Err(Error::Config(format!(
            "rank {rank} must lie in 1..={} for a {in_dim}x{out_dim} layer",
            in_dim.min(out_dim)
        )));
    }
    check_ratio(beta)?;
    let mut rng = rng_from(&[seed, 0x41]);
    let normal = Normal::new(0.0, 1.0 / (rank as f64).sqrt()).expect("positive scale");
    let a = Array2::from_shape_simple_fn((in_dim, rank), || normal.sample(&mut rng));
    Ok(TriLoraLayer {
        base_weight: Array2::zeros((in_dim, out_dim)),
        a,
        b: Array2::zeros((rank, out_dim)),
        r: Array2::zeros((rank, rank)),
        mask: Mask::sample(rank, beta, seed)?,
    })
}

impl TriLoraLayer {
    /// Assembles a layer from explicit parts, checking every shape.
    pub fn from_parts(
        base_weight: Array2<f64>,
        a: Array2<f64>,
        r: Array2<f64>,
        mask: Mask,
        b: Array2<f64>,
    ) -> Result<Self> {
        let (in_dim, out_dim) = base_weight.dim();
        let rank = r.nrows();
        if rank == 0 || rank > in_dim.min(out_dim) {
            return Err(Error::Config(format!(
                "rank {rank} must lie in 1..={}",
                in_dim.min(out_dim)
            )));
        }
        if a.dim() != (in_dim, rank)
            || b.dim() != (rank, out_dim)
            || r.dim() != (rank, rank)
            || mask.rank() != rank
        {
            return Err(Error::Shape(format!(
                "inconsistent adapter shapes: W {:?}, A {:?}, R {:?}, mask {}, B {:?}",
                base_weight.dim(),
                a.dim(),
                r.dim(),
                mask.rank(),
                b.dim()
            )));
        }
        Ok(TriLoraLayer {
            base_weight,
            a,
            b,
            r,
            mask,
        })
    }

    pub fn with_base_weight(mut self, base_weight: Array2<f64>) -> Result<Self> {
        if base_weight.dim() != self.base_weight.dim() {
            return Err(Error::Shape(format!(
                "base weight {:?} does not match {:?}",
                base_weight.dim(),
                self.base_weight.dim()
            )));
        }
        self.base_weight = base_weight;
        Ok(self)
    }

    pub fn in_dim(&self) -> usize {
        self.base_weight.nrows()
    }

    pub fn out_dim(&self) -> usize {
        self.base_weight.ncols()
    }

    pub fn rank(&self) -> usize {
        self.r.nrows()
    }

    pub fn base_weight(&self) -> &Array2<f64> {
        &self.base_weight
    }

    pub fn a(&self) -> &Array2<f64> {
        &self.a
    }

    pub fn b(&self) -> &Array2<f64> {
        &self.b
    }

    pub fn r(&self) -> &Array2<f64> {
        &self.r
    }

    pub fn mask(&self) -> &Mask {
        &self.mask
    }

    /// `Φ∘R`, the part of `R` that participates in the forward pass.
    pub fn masked_r(&self) -> Array2<f64> {
        self.mask.apply(&self.r)
    }

    /// `I + Φ∘R`.
    pub fn middle(&self) -> Array2<f64> {
        let mut m = self.masked_r();
        m.diag_mut().mapv_inplace(|v| v + 1.0);
        m
    }

    /// Materializes `ΔW = A·(I + Φ∘R)·B`.
    pub fn delta_matrix(&self) -> Array2<f64> {
        self.a.dot(&self.middle()).dot(&self.b)
    }

    /// `x·W + ((x·A)·(I + Φ∘R))·B`, without materializing `ΔW`.
    pub fn apply_delta(&self, x: ArrayView1<f64>) -> Result<Array1<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::Shape(format!(
                "input length {} does not match layer input {}",
                x.len(),
                self.in_dim()
            )));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Input("non-finite layer input".into()));
        }
        let low = x.dot(&self.a).dot(&self.middle());
        Ok(x.dot(&self.base_weight) + low.dot(&self.b))
    }
}

/// Free-function form of [`TriLoraLayer::delta_matrix`].
pub fn delta_matrix(layer: &TriLoraLayer) -> Array2<f64> {
    layer.delta_matrix()
}

/// Free-function form of [`TriLoraLayer::apply_delta`].
pub fn apply_delta(layer: &TriLoraLayer, x: ArrayView1<f64>) -> Result<Array1<f64>> {
    layer.apply_delta(x)
}
