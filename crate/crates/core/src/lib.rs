//! Heterogeneous federated fine-tuning at desk scale.
//!
//! Clients with different depths, widths, tasks and compute budgets fine-tune
//! small networks through sparsified triple low-rank adapters
//! (`ΔW = A·(I + Φ∘R)·B`). Only the middle matrices `R` leave a client, mixed
//! to a common depth by a trainable relation matrix `Ω`. Training alternates
//! between the shared part (`R`, `Ω`) and the private part (`A`, `B`).
//!
//! Module map:
//!
//! - [`trilora`]: adapter layers, masks, forward and merge.
//! - [`alignment`]: shared stacks and the relation-matrix maps.
//! - [`objectives`]: losses, KL terms and their gradients.
//! - [`taskgen`]: toy client models and synthetic tasks.
//! - [`trainer`]: a client's local round, proximal step and gradient checks.
//! - [`federation`]: round orchestration, aggregation, wire format.
//! - [`experiment`]: the experiment runner behind the `h2tune` binary.

pub mod alignment;
pub mod error;
pub mod experiment;
pub mod federation;
pub mod objectives;
mod seed;
pub mod taskgen;
pub mod trainer;
pub mod trilora;

pub use error::{Error, Result};
pub use seed::derive_seed;
