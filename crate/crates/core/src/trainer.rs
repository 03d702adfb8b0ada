//! One client's local training: alternating task-knowledge disentanglement.
//!
//! Every mini-batch runs two phases in a fixed order:
//!
//! 1. **share**: `A`, `B` frozen; `R` (through its mask) and `Ω` take a step
//!    on `CE + λ·KL(Φ∘R ‖ to_local(R_g, Ω))`. The logits after the step are
//!    cached as `y′`.
//! 2. **specific**: `R`, `Φ`, `Ω` frozen; `A`, `B` take a step on
//!    `CE − μ·min(KL(y″ ‖ y′), 10) + (𝒱/2)(‖A‖² + ‖B‖²)`.
//!
//! Gradients are derived by hand. For a layer `z = h·W + ((h·A)·M)·B` with
//! `M = I + Φ∘R` and upstream gradient `g = ∂L/∂z`:
//!
//! ```text
//! ∂B = (hAM)ᵀ g      ∂M = (hA)ᵀ (g Bᵀ)     ∂R = Φ ∘ ∂M
//! ∂A = hᵀ (g Bᵀ Mᵀ)  ∂h = g Wᵀ + g Bᵀ Mᵀ Aᵀ
//! ```

use std::sync::Arc;

use ndarray::{Array2, ArrayView2, Zip};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::alignment::{relation_gradient, to_global, to_local, RelationMatrix, SharedStack};
use crate::error::{Error, Result};
use crate::federation::{generalized_gradient, PhaseHook};
use crate::objectives::{
    cross_entropy, cross_entropy_grad, matrix_kl, matrix_kl_grads, prediction_kl,
    prediction_kl_grad, squared_norm, Hyperparameters, LossBreakdown, PREDICTION_KL_CLAMP,
};
use crate::seed::rng_from;
use crate::taskgen::{ClientModel, Dataset, ForwardCache, Split};
use crate::trilora::{Mask, ResourceDescriptor};

/// Default mini-batch size.
pub const DEFAULT_BATCH_SIZE: usize = 16;

/// Finite-difference step used by [`ClientState::check_gradients`].
pub const FD_STEP: f64 = 1e-6;

/// Denominator floor for the entrywise relative error in gradient checks.
pub const GRAD_CHECK_FLOOR: f64 = 1e-4;

/// How a client spends each mini-batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum TrainingMode {
    /// Share phase then specific phase.
    #[default]
    Alternating,
    /// One step on all parameters at once (no disentanglement).
    Joint,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Share,
    Specific,
    Joint,
}

/// A training mini-batch.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
}

impl Batch {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>) -> Result<Self> {
        if inputs.nrows() != labels.len() || labels.is_empty() {
            return Err(Error::Shape(format!(
                "batch has {} rows and {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        Ok(Batch { inputs, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

impl From<Split> for Batch {
    fn from(split: Split) -> Self {
        Batch {
            inputs: split.inputs,
            labels: split.labels,
        }
    }
}

/// Gradients for every parameter group of a client.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub a: Vec<Array2<f64>>,
    pub b: Vec<Array2<f64>>,
    /// Already masked: entries outside `Φ` are exactly zero.
    pub r: Vec<Array2<f64>>,
    pub omega: Array2<f64>,
}

impl Gradients {
    fn check_finite(&self) -> Result<()> {
        let groups = [
            ("grad_A", &self.a),
            ("grad_B", &self.b),
            ("grad_R", &self.r),
        ];
        for (name, ms) in groups {
            if ms.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
                return Err(Error::divergence(name));
            }
        }
        if self.omega.iter().any(|v| !v.is_finite()) {
            return Err(Error::divergence("grad_Omega"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseReport {
    pub phase: Phase,
    pub loss: LossBreakdown,
    /// Frobenius norm of the change in `(R, Ω)`.
    pub shared_change: f64,
    /// Frobenius norm of the change in `(A, B)`.
    pub specific_change: f64,
    pub samples: usize,
}

/// Result of a share phase: its report and the post-update logits `y′`.
#[derive(Debug, Clone)]
pub struct ShareOutcome {
    pub report: PhaseReport,
    pub phase1_logits: Array2<f64>,
}

/// Per-client summary of one local round.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientRoundStats {
    /// Mean share-phase total loss over the round's steps.
    pub share_loss: f64,
    /// Mean specific-phase total loss over the round's steps.
    pub specific_loss: f64,
    /// Root-mean-square over local epochs of the generalized gradient norm.
    pub gg_norm: f64,
    pub steps: usize,
}

/// A client's full local state.
#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub model: ClientModel,
    pub relation: RelationMatrix,
    pub resource: ResourceDescriptor,
    pub hyper: Hyperparameters,
    pub data: Arc<Dataset>,
    pub batch_size: usize,
    pub mode: TrainingMode,
    /// When set, the last share step of each round is a proximal step solved
    /// with this many inner iterations.
    pub proximal_inner_steps: Option<usize>,
}

impl ClientState {
    pub fn new(
        id: usize,
        model: ClientModel,
        relation: RelationMatrix,
        resource: ResourceDescriptor,
        hyper: Hyperparameters,
        data: Arc<Dataset>,
    ) -> Result<Self> {
        if model.depth() != relation.local_depth() {
            return Err(Error::Config(format!(
                "model depth {} does not match relation rows {}",
                model.depth(),
                relation.local_depth()
            )));
        }
        resource.validate()?;
        hyper.validate()?;
        Ok(ClientState {
            id,
            model,
            relation,
            resource,
            hyper,
            data,
            batch_size: DEFAULT_BATCH_SIZE,
            mode: TrainingMode::Alternating,
            proximal_inner_steps: None,
        })
    }

    /// The local shared stack `{Φ∘R}` over all layers.
    pub fn shared_stack(&self) -> SharedStack {
        SharedStack::new(self.model.layers.iter().map(|l| l.masked_r()).collect())
            .expect("layers share one rank")
    }

    pub fn masks(&self) -> Vec<Mask> {
        self.model.layers.iter().map(|l| l.mask.clone()).collect()
    }

    /// The stack this client uploads: `to_global(Φ∘R, Ω)`.
    pub fn upload(&self) -> Result<SharedStack> {
        to_global(&self.shared_stack(), &self.relation)
    }

    fn check_global(&self, r_global: &SharedStack) -> Result<()> {
        if r_global.depth() != self.relation.global_depth() || r_global.rank() != self.model.rank()
        {
            return Err(Error::Shape(format!(
                "global stack is {}x{r}x{r}, client expects {}x{}x{}",
                r_global.depth(),
                self.relation.global_depth(),
                self.model.rank(),
                self.model.rank(),
                r = r_global.rank()
            )));
        }
        Ok(())
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        if batch.inputs.ncols() != self.model.input_dim() {
            return Err(Error::Shape(format!(
                "batch inputs have {} columns, model expects {}",
                batch.inputs.ncols(),
                self.model.input_dim()
            )));
        }
        let c = self.model.num_classes();
        if let Some(&y) = batch.labels.iter().find(|&&y| y >= c) {
            return Err(Error::Input(format!(
                "label {y} out of range for {c} classes"
            )));
        }
        Ok(())
    }

    /// Backpropagates `∂L/∂logits` through every layer.
    fn backprop(&self, cache: &ForwardCache, dlogits: Array2<f64>) -> Gradients {
        let depth = self.model.depth();
        let mut ga = Vec::with_capacity(depth);
        let mut gb = Vec::with_capacity(depth);
        let mut gr = Vec::with_capacity(depth);
        let mut g = dlogits;
        for l in (0..depth).rev() {
            let layer = &self.model.layers[l];
            let middle = layer.middle();
            gb.push(cache.mixed[l].t().dot(&g));
            let d_mixed = g.dot(&layer.b.t());
            gr.push(layer.mask.apply(&cache.down[l].t().dot(&d_mixed)));
            let d_down = d_mixed.dot(&middle.t());
            ga.push(cache.inputs[l].t().dot(&d_down));
            if l > 0 {
                let dh = g.dot(&layer.base_weight.t()) + d_down.dot(&layer.a.t());
                g = dh
                    * self
                        .model
                        .activation
                        .derivative_from_output(&cache.inputs[l]);
            }
        }
        ga.reverse();
        gb.reverse();
        gr.reverse();
        Gradients {
            a: ga,
            b: gb,
            r: gr,
            omega: Array2::zeros(self.relation.matrix().raw_dim()),
        }
    }

    /// Mean cross-entropy over the batch and its full gradient.
    fn ce_part(
        &self,
        inputs: ArrayView2<f64>,
        labels: &[usize],
    ) -> Result<(f64, Gradients, ForwardCache)> {
        let cache = self.model.forward_cached(inputs);
        let n = labels.len() as f64;
        let mut dlogits = Array2::zeros(cache.logits.raw_dim());
        let mut ce = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = cache.logits.row(i);
            ce += cross_entropy(row, y).map_err(|_| Error::divergence("logits"))?;
            dlogits.row_mut(i).assign(&(cross_entropy_grad(row, y) / n));
        }
        let grads = self.backprop(&cache, dlogits);
        Ok((ce / n, grads, cache))
    }

    /// `matrix_kl(Φ∘R, to_local(R_g, Ω))` with gradients for `R` (masked) and `Ω`.
    fn kl_part(&self, r_global: &SharedStack) -> Result<(f64, Vec<Array2<f64>>, Array2<f64>)> {
        let local = self.shared_stack();
        let reference = to_local(r_global, &self.relation)?;
        let kl = matrix_kl(&local, &reference)?;
        let (d_local, d_ref) = matrix_kl_grads(&local, &reference)?;
        let d_r = d_local
            .layers()
            .iter()
            .zip(&self.model.layers)
            .map(|(d, layer)| layer.mask.apply(d))
            .collect();
        Ok((kl, d_r, relation_gradient(r_global, &d_ref)))
    }

    /// Shared-phase loss and its gradient for every parameter group.
    pub fn share_loss_and_grads(
        &self,
        r_global: &SharedStack,
        batch: &Batch,
    ) -> Result<(LossBreakdown, Gradients)> {
        self.check_global(r_global)?;
        self.check_batch(batch)?;
        let lambda = self.hyper.kl_weight;
        let (ce, mut grads, _) = self.ce_part(batch.inputs.view(), &batch.labels)?;
        let (kl, d_r, d_omega) = self.kl_part(r_global)?;
        for (g, d) in grads.r.iter_mut().zip(&d_r) {
            g.scaled_add(lambda, d);
        }
        grads.omega = d_omega * lambda;
        let loss = LossBreakdown {
            total: ce + lambda * kl,
            ce,
            kl_term: kl,
            reg: 0.0,
        };
        finite_loss(&loss)?;
        grads.check_finite()?;
        Ok((loss, grads))
    }

    /// Specific-phase loss and its gradient. `phase1_logits` is held constant.
    pub fn specific_loss_and_grads(
        &self,
        phase1_logits: &Array2<f64>,
        batch: &Batch,
    ) -> Result<(LossBreakdown, Gradients)> {
        self.check_batch(batch)?;
        if phase1_logits.nrows() != batch.len() || phase1_logits.ncols() != self.model.num_classes()
        {
            return Err(Error::Shape(format!(
                "cached phase-1 logits are {:?}, batch needs ({}, {})",
                phase1_logits.dim(),
                batch.len(),
                self.model.num_classes()
            )));
        }
        let h = &self.hyper;
        let cache = self.model.forward_cached(batch.inputs.view());
        let n = batch.len() as f64;
        let mut dlogits = Array2::zeros(cache.logits.raw_dim());
        let (mut ce, mut kl_term) = (0.0, 0.0);
        for (i, &y) in batch.labels.iter().enumerate() {
            let row = cache.logits.row(i);
            let prev = phase1_logits.row(i);
            ce += cross_entropy(row, y).map_err(|_| Error::divergence("logits"))?;
            let kl = prediction_kl(row, prev).map_err(|_| Error::divergence("phase-1 logits"))?;
            let mut g = cross_entropy_grad(row, y);
            if kl < PREDICTION_KL_CLAMP {
                kl_term += kl;
                g.scaled_add(-h.pred_kl_weight, &prediction_kl_grad(row, prev));
            } else {
                kl_term += PREDICTION_KL_CLAMP;
            }
            dlogits.row_mut(i).assign(&(g / n));
        }
        let mut grads = self.backprop(&cache, dlogits);
        add_weight_decay(&mut grads, &self.model, h.weight_decay);
        let (ce, kl_term) = (ce / n, kl_term / n);
        let reg = self.regularizer();
        let loss = LossBreakdown {
            total: ce - h.pred_kl_weight * kl_term + reg,
            ce,
            kl_term,
            reg,
        };
        finite_loss(&loss)?;
        grads.check_finite()?;
        Ok((loss, grads))
    }

    /// Loss for training every group at once: `CE + λ·KL + (𝒱/2)(‖A‖² + ‖B‖²)`.
    pub fn joint_loss_and_grads(
        &self,
        r_global: &SharedStack,
        batch: &Batch,
    ) -> Result<(LossBreakdown, Gradients)> {
        let (mut loss, mut grads) = self.share_loss_and_grads(r_global, batch)?;
        add_weight_decay(&mut grads, &self.model, self.hyper.weight_decay);
        loss.reg = self.regularizer();
        loss.total += loss.reg;
        Ok((loss, grads))
    }

    fn regularizer(&self) -> f64 {
        let a: Vec<_> = self.model.layers.iter().map(|l| l.a.clone()).collect();
        let b: Vec<_> = self.model.layers.iter().map(|l| l.b.clone()).collect();
        0.5 * self.hyper.weight_decay * (squared_norm(&a) + squared_norm(&b))
    }

    fn apply_shared_update(&mut self, grads: &Gradients, lr: f64) -> f64 {
        if lr == 0.0 {
            return 0.0;
        }
        let mut sq = 0.0;
        for (layer, g) in self.model.layers.iter_mut().zip(&grads.r) {
            Zip::from(&mut layer.r)
                .and(g)
                .and(layer.mask.bits())
                .for_each(|r, &g, &keep| {
                    if keep {
                        let step = lr * g;
                        *r -= step;
                        sq += step * step;
                    }
                });
        }
        self.relation.matrix_mut().scaled_add(-lr, &grads.omega);
        sq + lr * lr * grads.omega.iter().map(|v| v * v).sum::<f64>()
    }

    fn apply_specific_update(&mut self, grads: &Gradients, lr: f64) -> f64 {
        if lr == 0.0 {
            return 0.0;
        }
        let mut sq = 0.0;
        for ((layer, ga), gb) in self.model.layers.iter_mut().zip(&grads.a).zip(&grads.b) {
            layer.a.scaled_add(-lr, ga);
            layer.b.scaled_add(-lr, gb);
            sq += lr
                * lr
                * (squared_norm(std::slice::from_ref(ga)) + squared_norm(std::slice::from_ref(gb)));
        }
        sq
    }

    /// Share phase: `R ← R − η′·(Φ∘∇_R)`, `Ω ← Ω − η′·∇_Ω`; `A`, `B` untouched.
    pub fn phase_share_step(
        &mut self,
        r_global: &SharedStack,
        batch: &Batch,
    ) -> Result<ShareOutcome> {
        let (loss, grads) = self.share_loss_and_grads(r_global, batch)?;
        let sq = self.apply_shared_update(&grads, self.hyper.lr_share);
        self.finish_share(loss, sq, batch)
    }

    fn finish_share(
        &self,
        loss: LossBreakdown,
        shared_sq: f64,
        batch: &Batch,
    ) -> Result<ShareOutcome> {
        let phase1_logits = self.model.forward_batch(batch.inputs.view());
        if phase1_logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::divergence("phase-1 logits"));
        }
        Ok(ShareOutcome {
            report: PhaseReport {
                phase: Phase::Share,
                loss,
                shared_change: shared_sq.sqrt(),
                specific_change: 0.0,
                samples: batch.len(),
            },
            phase1_logits,
        })
    }

    /// Specific phase: `A ← A − η·∇_A`, `B ← B − η·∇_B`; `R`, `Φ`, `Ω` untouched.
    pub fn phase_specific_step(
        &mut self,
        phase1_logits: &Array2<f64>,
        batch: &Batch,
    ) -> Result<PhaseReport> {
        let (loss, grads) = self.specific_loss_and_grads(phase1_logits, batch)?;
        let sq = self.apply_specific_update(&grads, self.hyper.lr_specific);
        Ok(PhaseReport {
            phase: Phase::Specific,
            loss,
            shared_change: 0.0,
            specific_change: sq.sqrt(),
            samples: batch.len(),
        })
    }

    /// One step on every group at once (the no-disentanglement ablation).
    pub fn joint_step(&mut self, r_global: &SharedStack, batch: &Batch) -> Result<PhaseReport> {
        let (loss, grads) = self.joint_loss_and_grads(r_global, batch)?;
        let shared = self.apply_shared_update(&grads, self.hyper.lr_share);
        let specific = self.apply_specific_update(&grads, self.hyper.lr_specific);
        Ok(PhaseReport {
            phase: Phase::Joint,
            loss,
            shared_change: shared.sqrt(),
            specific_change: specific.sqrt(),
            samples: batch.len(),
        })
    }

    /// Share phase with the `R` update replaced by an approximate proximal step:
    ///
    /// `argmin_R ⟨∇CE, R⟩ + λ·matrix_kl(R, R_ref) + (1/η′)‖R − R_prev‖²`
    ///
    /// `Ω` still takes its ordinary gradient step.
    pub fn proximal_share_step(
        &mut self,
        r_global: &SharedStack,
        batch: &Batch,
        inner_steps: usize,
    ) -> Result<ShareOutcome> {
        let (loss, grads) = self.share_loss_and_grads(r_global, batch)?;
        let (_, ce_grads, _) = self.ce_part(batch.inputs.view(), &batch.labels)?;
        let start = self.shared_stack();
        let reference = to_local(r_global, &self.relation)?;
        let masks = self.masks();
        let ce_grad = SharedStack::new(ce_grads.r)?;
        let problem = ProximalProblem {
            grad: &ce_grad,
            reference: &reference,
            start: &start,
            masks: &masks,
            kl_weight: self.hyper.kl_weight,
            lr_share: self.hyper.lr_share,
        };
        let solution = solve_proximal(&problem, inner_steps)?;
        let mut sq = 0.0;
        for (layer, new) in self.model.layers.iter_mut().zip(solution.point.layers()) {
            sq += (&layer.r - new).iter().map(|v| v * v).sum::<f64>();
            Zip::from(&mut layer.r)
                .and(new)
                .and(layer.mask.bits())
                .for_each(|r, &n, &keep| {
                    if keep {
                        *r = n;
                    }
                });
        }
        let lr = self.hyper.lr_share;
        self.relation.matrix_mut().scaled_add(-lr, &grads.omega);
        sq += lr * lr * grads.omega.iter().map(|v| v * v).sum::<f64>();
        self.finish_share(loss, sq, batch)
    }

    /// One local round: `epochs` passes over the training split in a seeded
    /// order, each mini-batch running the share phase then the specific phase.
    /// Returns the upload `to_global(Φ∘R, Ω)` and the round's statistics.
    pub fn local_round(
        &mut self,
        r_global: &SharedStack,
        epochs: usize,
        round_seed: u64,
    ) -> Result<(SharedStack, ClientRoundStats)> {
        self.local_round_observed(r_global, epochs, round_seed, &mut |_, _| {})
    }

    /// [`ClientState::local_round`] with `observe` called around each phase of
    /// the alternating schedule.
    pub fn local_round_observed(
        &mut self,
        r_global: &SharedStack,
        epochs: usize,
        round_seed: u64,
        observe: &mut dyn FnMut(PhaseHook, &ClientState),
    ) -> Result<(SharedStack, ClientRoundStats)> {
        if epochs == 0 {
            return Err(Error::Config("local epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        self.check_global(r_global)?;
        let data = Arc::clone(&self.data);
        let n = data.train.len();
        let batches_per_epoch = n.div_ceil(self.batch_size);
        let (mut share_sum, mut specific_sum, mut gg_sq, mut steps) = (0.0, 0.0, 0.0, 0usize);
        for epoch in 0..epochs {
            let epoch_start = self.shared_stack();
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(&mut rng_from(&[round_seed, epoch as u64]));
            for (b, chunk) in order.chunks(self.batch_size).enumerate() {
                let batch = Batch::from(data.train.select(chunk));
                let last = epoch + 1 == epochs && b + 1 == batches_per_epoch;
                match self.mode {
                    TrainingMode::Alternating => {
                        observe(PhaseHook::BeforeShare, self);
                        let share = match self.proximal_inner_steps {
                            Some(inner) if last => {
                                self.proximal_share_step(r_global, &batch, inner)?
                            }
                            _ => self.phase_share_step(r_global, &batch)?,
                        };
                        observe(PhaseHook::AfterShare, self);
                        observe(PhaseHook::BeforeSpecific, self);
                        let specific = self.phase_specific_step(&share.phase1_logits, &batch)?;
                        observe(PhaseHook::AfterSpecific, self);
                        share_sum += share.report.loss.total;
                        specific_sum += specific.loss.total;
                    }
                    TrainingMode::Joint => {
                        let report = self.joint_step(r_global, &batch)?;
                        share_sum += report.loss.total;
                        specific_sum += report.loss.ce;
                    }
                }
                steps += 1;
            }
            if self.hyper.lr_share > 0.0 {
                let gg =
                    generalized_gradient(&epoch_start, &self.shared_stack(), self.hyper.lr_share)?;
                gg_sq += gg * gg;
            }
        }
        let upload = self.upload()?;
        let stats = ClientRoundStats {
            share_loss: share_sum / steps as f64,
            specific_loss: specific_sum / steps as f64,
            gg_norm: (gg_sq / epochs as f64).sqrt(),
            steps,
        };
        Ok((upload, stats))
    }

    fn param_mut(&mut self, group: ParamGroup) -> &mut Array2<f64> {
        match group {
            ParamGroup::A(l) => &mut self.model.layers[l].a,
            ParamGroup::B(l) => &mut self.model.layers[l].b,
            ParamGroup::R(l) => &mut self.model.layers[l].r,
            ParamGroup::Omega => self.relation.matrix_mut(),
        }
    }

    /// Compares the analytic gradients of both losses, for all four parameter
    /// groups, against central finite differences with step [`FD_STEP`].
    /// Returns the worst entrywise relative error
    /// `|g − ĝ| / max(|g|, |ĝ|, GRAD_CHECK_FLOOR)`.
    ///
    /// The specific loss is checked against a cached `y′` equal to the current
    /// logits plus a fixed offset, so its KL term has a non-zero gradient.
    pub fn check_gradients(&self, r_global: &SharedStack, batch: &Batch) -> Result<f64> {
        let logits = self.model.forward_batch(batch.inputs.view());
        let y_prime = Array2::from_shape_fn(logits.raw_dim(), |(i, j)| {
            logits[(i, j)] + 0.3 * ((i * 7 + j * 3) as f64).sin()
        });
        let (_, share) = self.share_loss_and_grads(r_global, batch)?;
        let (_, specific) = self.specific_loss_and_grads(&y_prime, batch)?;

        let share_loss = |s: &ClientState| {
            s.share_loss_and_grads(r_global, batch)
                .map(|(l, _)| l.total)
        };
        let specific_loss = |s: &ClientState| {
            s.specific_loss_and_grads(&y_prime, batch)
                .map(|(l, _)| l.total)
        };

        let mut probe = self.clone();
        let mut worst = 0.0f64;
        for group in ParamGroup::all(self.model.depth()) {
            let pairs: [(&Gradients, &LossFn); 2] =
                [(&share, &share_loss), (&specific, &specific_loss)];
            for (grads, loss) in pairs {
                let analytic = group.select(grads).clone();
                for (idx, &g) in analytic.indexed_iter() {
                    let original = probe.param_mut(group)[idx];
                    probe.param_mut(group)[idx] = original + FD_STEP;
                    let plus = loss(&probe)?;
                    probe.param_mut(group)[idx] = original - FD_STEP;
                    let minus = loss(&probe)?;
                    probe.param_mut(group)[idx] = original;
                    let numeric = (plus - minus) / (2.0 * FD_STEP);
                    let denom = g.abs().max(numeric.abs()).max(GRAD_CHECK_FLOOR);
                    worst = worst.max((g - numeric).abs() / denom);
                }
            }
        }
        Ok(worst)
    }
}

type LossFn<'a> = dyn Fn(&ClientState) -> Result<f64> + 'a;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ParamGroup {
    A(usize),
    B(usize),
    R(usize),
    Omega,
}

impl ParamGroup {
    fn all(depth: usize) -> Vec<ParamGroup> {
        let mut groups = Vec::with_capacity(3 * depth + 1);
        for l in 0..depth {
            groups.extend([ParamGroup::A(l), ParamGroup::B(l), ParamGroup::R(l)]);
        }
        groups.push(ParamGroup::Omega);
        groups
    }

    fn select(self, grads: &Gradients) -> &Array2<f64> {
        match self {
            ParamGroup::A(l) => &grads.a[l],
            ParamGroup::B(l) => &grads.b[l],
            ParamGroup::R(l) => &grads.r[l],
            ParamGroup::Omega => &grads.omega,
        }
    }
}

fn add_weight_decay(grads: &mut Gradients, model: &ClientModel, decay: f64) {
    if decay == 0.0 {
        return;
    }
    for ((ga, gb), layer) in grads.a.iter_mut().zip(&mut grads.b).zip(&model.layers) {
        ga.scaled_add(decay, &layer.a);
        gb.scaled_add(decay, &layer.b);
    }
}

fn finite_loss(loss: &LossBreakdown) -> Result<()> {
    let terms = [
        ("ce", loss.ce),
        ("kl_term", loss.kl_term),
        ("reg", loss.reg),
        ("total", loss.total),
    ];
    match terms.iter().find(|(_, v)| !v.is_finite()) {
        Some((name, _)) => Err(Error::divergence(*name)),
        None => Ok(()),
    }
}

const MAX_HALVINGS: usize = 40;

/// The inner problem of a proximal share step.
#[derive(Debug, Clone, Copy)]
pub struct ProximalProblem<'a> {
    /// Gradient of the smooth loss at `start` (masked).
    pub grad: &'a SharedStack,
    /// Local reference `to_local(R_g, Ω)`.
    pub reference: &'a SharedStack,
    pub start: &'a SharedStack,
    pub masks: &'a [Mask],
    pub kl_weight: f64,
    pub lr_share: f64,
}

#[derive(Debug, Clone)]
pub struct ProximalSolution {
    pub point: SharedStack,
    pub start_objective: f64,
    pub end_objective: f64,
}

impl ProximalProblem<'_> {
    fn validate(&self) -> Result<()> {
        self.grad
            .check_same_shape(self.start, "proximal gradient")?;
        self.reference
            .check_same_shape(self.start, "proximal reference")?;
        if self.masks.len() != self.start.depth() {
            return Err(Error::Shape("one mask per layer is required".into()));
        }
        if !self.lr_share.is_finite() || self.lr_share <= 0.0 {
            return Err(Error::Config("proximal step needs lr_share > 0".into()));
        }
        Ok(())
    }

    /// `⟨G, R⟩ + λ·matrix_kl(R, ref) + (1/η′)‖R − R_prev‖²`.
    pub fn objective(&self, r: &SharedStack) -> Result<f64> {
        let mut diff = r.clone();
        diff.scaled_add(-1.0, self.start);
        Ok(self.grad.dot(r)
            + self.kl_weight * matrix_kl(r, self.reference)?
            + diff.dot(&diff) / self.lr_share)
    }

    fn gradient(&self, r: &SharedStack) -> Result<SharedStack> {
        let (mut g, _) = matrix_kl_grads(r, self.reference)?;
        g.scale(self.kl_weight);
        g.scaled_add(1.0, self.grad);
        let mut diff = r.clone();
        diff.scaled_add(-1.0, self.start);
        g.scaled_add(2.0 / self.lr_share, &diff);
        for (layer, mask) in g.layers_mut().iter_mut().zip(self.masks) {
            mask.apply_in_place(layer);
        }
        Ok(g)
    }
}

/// Gradient iterations from `start`. Each iteration tries the step
/// `1/(2/η′ + λ)` and halves it until the objective does not rise. For
/// `λ = 0` the first iteration lands on the closed form `R_prev − (η′/2)·G`.
pub fn solve_proximal(
    problem: &ProximalProblem<'_>,
    inner_steps: usize,
) -> Result<ProximalSolution> {
    problem.validate()?;
    if inner_steps == 0 {
        return Err(Error::Config(
            "proximal solve needs at least one inner step".into(),
        ));
    }
    let base_step = 1.0 / (2.0 / problem.lr_share + problem.kl_weight);
    let start_objective = problem.objective(problem.start)?;
    let mut point = problem.start.clone();
    let mut current = start_objective;
    'outer: for _ in 0..inner_steps {
        let g = problem.gradient(&point)?;
        if !g.is_finite() {
            return Err(Error::divergence("proximal gradient"));
        }
        let mut step = base_step;
        for _ in 0..MAX_HALVINGS {
            let mut candidate = point.clone();
            candidate.scaled_add(-step, &g);
            let value = problem.objective(&candidate)?;
            if value <= current {
                point = candidate;
                current = value;
                continue 'outer;
            }
            step *= 0.5;
        }
        break;
    }
    let end_objective = problem.objective(&point)?;
    if !end_objective.is_finite() {
        return Err(Error::divergence("proximal objective"));
    }
    if end_objective > start_objective {
        return Err(Error::Solver(format!(
            "proximal objective rose from {start_objective} to {end_objective}"
        )));
    }
    Ok(ProximalSolution {
        point,
        start_objective,
        end_objective,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::alignment::init_relation;
    use crate::taskgen::{build_toy_model, gen_task, Activation, ArchSpec, SyntheticTaskSpec};
    use rand_distr::{Distribution, StandardNormal};

    fn random(rows: usize, cols: usize, scale: f64, seed: u64) -> Array2<f64> {
        let mut rng = rng_from(&[seed, 0xF1]);
        Array2::from_shape_simple_fn((rows, cols), || {
            let v: f64 = StandardNormal.sample(&mut rng);
            scale * v
        })
    }

    fn fixture(seed: u64, beta: f64, activation: Activation) -> (ClientState, SharedStack, Batch) {
        let spec = ArchSpec {
            layer_dims: vec![(5, 4), (4, 3)],
            activation,
            num_classes: 3,
        };
        let mut model = build_toy_model(&spec, 2, beta, seed).unwrap();
        for (l, layer) in model.layers.iter_mut().enumerate() {
            let s = seed * 16 + l as u64;
            layer.a = random(layer.a.nrows(), 2, 0.5, s);
            layer.b = random(2, layer.b.ncols(), 0.5, s + 100);
            layer.r = random(2, 2, 0.5, s + 200);
        }
        let relation = RelationMatrix::new(random(2, 3, 0.5, seed + 300)).unwrap();
        let data = gen_task(&SyntheticTaskSpec {
            input_dim: 5,
            num_classes: 3,
            n_train: 8,
            n_test: 4,
            shared_seed: seed,
            private_seed: seed + 1,
            shared_weight: 0.5,
        })
        .unwrap();
        let batch = Batch::from(data.train.clone());
        let hyper = Hyperparameters {
            lr_specific: 0.1,
            lr_share: 0.1,
            weight_decay: 0.01,
            kl_weight: 0.7,
            pred_kl_weight: 0.5,
        };
        let client = ClientState::new(
            0,
            model,
            relation,
            ResourceDescriptor::new(beta, 2).unwrap(),
            hyper,
            Arc::new(data),
        )
        .unwrap();
        let global = SharedStack::new(vec![
            random(2, 2, 1.0, seed + 400),
            random(2, 2, 1.0, seed + 401),
            random(2, 2, 1.0, seed + 402),
        ])
        .unwrap();
        (client, global, batch)
    }

    fn fd(
        state: &ClientState,
        group: ParamGroup,
        idx: (usize, usize),
        loss: &dyn Fn(&ClientState) -> f64,
    ) -> f64 {
        let h = 1e-6;
        let mut probe = state.clone();
        probe.param_mut(group)[idx] += h;
        let plus = loss(&probe);
        let mut probe = state.clone();
        probe.param_mut(group)[idx] -= h;
        let minus = loss(&probe);
        (plus - minus) / (2.0 * h)
    }

    fn assert_close(analytic: f64, numeric: f64, what: &str) {
        let denom = analytic.abs().max(numeric.abs()).max(1e-4);
        assert!(
            (analytic - numeric).abs() / denom < 1e-5,
            "{what}: {analytic} vs {numeric}"
        );
    }

    fn bits(m: &Array2<f64>) -> Vec<u64> {
        m.iter().map(|v| v.to_bits()).collect()
    }

    fn specific_bits(s: &ClientState) -> Vec<u64> {
        s.model
            .layers
            .iter()
            .flat_map(|l| bits(&l.a).into_iter().chain(bits(&l.b)))
            .collect()
    }

    fn shared_bits(s: &ClientState) -> Vec<u64> {
        s.model
            .layers
            .iter()
            .flat_map(|l| bits(&l.r))
            .chain(bits(s.relation.matrix()))
            .collect()
    }

    #[test]
    fn share_step_follows_numeric_gradient() {
        let (client, global, batch) = fixture(3, 0.5, Activation::Tanh);
        let loss = |s: &ClientState| s.share_loss_and_grads(&global, &batch).unwrap().0.total;
        let mut stepped = client.clone();
        stepped.phase_share_step(&global, &batch).unwrap();
        let lr = client.hyper.lr_share;
        for l in 0..2 {
            let (before, after) = (&client.model.layers[l].r, &stepped.model.layers[l].r);
            for ((i, j), &r0) in before.indexed_iter() {
                if !client.model.layers[l].mask.get(i, j) {
                    assert_eq!(after[(i, j)].to_bits(), r0.to_bits());
                    continue;
                }
                let numeric = fd(&client, ParamGroup::R(l), (i, j), &loss);
                assert_close((r0 - after[(i, j)]) / lr, numeric, "R");
            }
        }
        for ((i, j), &w0) in client.relation.matrix().indexed_iter() {
            let numeric = fd(&client, ParamGroup::Omega, (i, j), &loss);
            assert_close(
                (w0 - stepped.relation.matrix()[(i, j)]) / lr,
                numeric,
                "Omega",
            );
        }
        assert_eq!(specific_bits(&client), specific_bits(&stepped));
    }

    #[test]
    fn specific_step_follows_numeric_gradient() {
        let (client, _, batch) = fixture(5, 0.5, Activation::Tanh);
        let logits = client.model.forward_batch(batch.inputs.view());
        let y_prime = logits.mapv(|v| v * 0.8 + 0.1);
        let loss = |s: &ClientState| s.specific_loss_and_grads(&y_prime, &batch).unwrap().0.total;
        let mut stepped = client.clone();
        stepped.phase_specific_step(&y_prime, &batch).unwrap();
        let lr = client.hyper.lr_specific;
        for l in 0..2 {
            for (group, before, after) in [
                (
                    ParamGroup::A(l),
                    &client.model.layers[l].a,
                    &stepped.model.layers[l].a,
                ),
                (
                    ParamGroup::B(l),
                    &client.model.layers[l].b,
                    &stepped.model.layers[l].b,
                ),
            ] {
                for (idx, &p0) in before.indexed_iter() {
                    let numeric = fd(&client, group, idx, &loss);
                    assert_close((p0 - after[idx]) / lr, numeric, "A/B");
                }
            }
        }
        assert_eq!(shared_bits(&client), shared_bits(&stepped));
        assert_eq!(client.masks(), stepped.masks());
    }

    #[test]
    fn zero_learning_rates_are_no_ops() {
        let (mut client, global, batch) = fixture(7, 0.5, Activation::Tanh);
        client.hyper.lr_share = 0.0;
        client.hyper.lr_specific = 0.0;
        let before = (shared_bits(&client), specific_bits(&client));
        let share = client.phase_share_step(&global, &batch).unwrap();
        client
            .phase_specific_step(&share.phase1_logits, &batch)
            .unwrap();
        assert_eq!(before, (shared_bits(&client), specific_bits(&client)));
    }

    #[test]
    fn empty_mask_without_kl_freezes_r() {
        let (mut client, global, batch) = fixture(8, 0.0, Activation::Tanh);
        client.hyper.kl_weight = 0.0;
        let r_before: Vec<_> = client.model.layers.iter().map(|l| bits(&l.r)).collect();
        client.phase_share_step(&global, &batch).unwrap();
        let r_after: Vec<_> = client.model.layers.iter().map(|l| bits(&l.r)).collect();
        assert_eq!(r_before, r_after);
    }

    #[test]
    fn heavy_weight_decay_shrinks_adapters() {
        let (mut client, _, batch) = fixture(9, 0.5, Activation::Tanh);
        client.hyper.weight_decay = 1e6;
        client.hyper.lr_specific = 1e-6;
        let norm = |s: &ClientState| {
            let a: Vec<_> = s.model.layers.iter().map(|l| l.a.clone()).collect();
            let b: Vec<_> = s.model.layers.iter().map(|l| l.b.clone()).collect();
            squared_norm(&a) + squared_norm(&b)
        };
        let before = norm(&client);
        let y_prime = client.model.forward_batch(batch.inputs.view());
        client.phase_specific_step(&y_prime, &batch).unwrap();
        assert!(norm(&client) < 1e-3 * before);
    }

    #[test]
    fn local_round_is_deterministic() {
        let (client, global, _) = fixture(10, 0.5, Activation::Tanh);
        let (mut c1, mut c2) = (client.clone(), client);
        c1.batch_size = 3;
        c2.batch_size = 3;
        let (u1, s1) = c1.local_round(&global, 2, 77).unwrap();
        let (u2, s2) = c2.local_round(&global, 2, 77).unwrap();
        assert_eq!(u1, u2);
        assert_eq!(s1, s2);
        assert_eq!(shared_bits(&c1), shared_bits(&c2));
        assert_eq!(specific_bits(&c1), specific_bits(&c2));
        assert_eq!(s1.steps, 6);
    }

    #[test]
    fn frozen_round_uploads_initial_stack() {
        let (mut client, global, _) = fixture(11, 0.5, Activation::Tanh);
        client.hyper.lr_share = 0.0;
        client.hyper.lr_specific = 0.0;
        let expected = to_global(&client.shared_stack(), &client.relation).unwrap();
        let (upload, stats) = client.local_round(&global, 1, 1).unwrap();
        assert_eq!(upload, expected);
        assert_eq!(stats.gg_norm, 0.0);
    }

    #[test]
    fn identity_relation_uploads_local_stack() {
        let (mut client, _, _) = fixture(12, 0.5, Activation::Tanh);
        client.relation = init_relation(2, 2).unwrap();
        assert_eq!(client.upload().unwrap(), client.shared_stack());
    }

    #[test]
    fn joint_step_moves_every_group() {
        let (mut client, global, batch) = fixture(13, 1.0, Activation::Tanh);
        client.mode = TrainingMode::Joint;
        let before = (shared_bits(&client), specific_bits(&client));
        let report = client.joint_step(&global, &batch).unwrap();
        assert_eq!(report.phase, Phase::Joint);
        assert_ne!(before.0, shared_bits(&client));
        assert_ne!(before.1, specific_bits(&client));
    }

    #[test]
    fn gradient_check_on_linear_model() {
        let (mut client, global, batch) = fixture(14, 0.5, Activation::Identity);
        client.model.layers.truncate(1);
        let w = random(5, 3, 0.5, 1);
        client.model.layers[0].base_weight = w;
        client.model.layers[0].b = random(2, 3, 0.5, 2);
        client.relation = RelationMatrix::new(random(1, 3, 0.5, 3)).unwrap();
        assert!(client.check_gradients(&global, &batch).unwrap() <= 1e-6);
    }

    #[test]
    fn gradient_check_on_tanh_model() {
        for seed in 20..24 {
            let (client, global, batch) = fixture(seed, 0.5, Activation::Tanh);
            let err = client.check_gradients(&global, &batch).unwrap();
            assert!(err <= 1e-5, "seed {seed}: {err}");
        }
    }

    fn proximal_inputs(seed: u64) -> (SharedStack, SharedStack, SharedStack, Vec<Mask>) {
        let stack =
            |s| SharedStack::new(vec![random(3, 3, 1.0, s), random(3, 3, 1.0, s + 1)]).unwrap();
        (
            stack(seed),
            stack(seed + 10),
            stack(seed + 20),
            vec![Mask::full(3), Mask::full(3)],
        )
    }

    #[test]
    fn proximal_without_kl_is_closed_form() {
        let (grad, reference, start, masks) = proximal_inputs(30);
        let problem = ProximalProblem {
            grad: &grad,
            reference: &reference,
            start: &start,
            masks: &masks,
            kl_weight: 0.0,
            lr_share: 0.3,
        };
        let solution = solve_proximal(&problem, 5).unwrap();
        for (got, (s, g)) in solution
            .point
            .layers()
            .iter()
            .zip(start.layers().iter().zip(grad.layers()))
        {
            let expected = s - &(g * 0.15);
            assert!((got - &expected).iter().all(|d| d.abs() <= 1e-12));
        }
        assert!(solution.end_objective < solution.start_objective);
    }

    #[test]
    fn proximal_with_zero_gradient_stays_put() {
        let (_, reference, start, masks) = proximal_inputs(40);
        let zero = SharedStack::zeros(2, 3);
        let problem = ProximalProblem {
            grad: &zero,
            reference: &reference,
            start: &start,
            masks: &masks,
            kl_weight: 0.0,
            lr_share: 0.3,
        };
        assert_eq!(solve_proximal(&problem, 3).unwrap().point, start);
    }

    #[test]
    fn proximal_with_kl_does_not_increase_objective() {
        for seed in 0..10 {
            let (grad, reference, start, _) = proximal_inputs(50 + seed * 3);
            let masks = vec![
                Mask::sample(3, 0.5, seed).unwrap(),
                Mask::sample(3, 0.5, seed + 99).unwrap(),
            ];
            let problem = ProximalProblem {
                grad: &grad,
                reference: &reference,
                start: &start,
                masks: &masks,
                kl_weight: 2.0,
                lr_share: 0.5,
            };
            let solution = solve_proximal(&problem, 10).unwrap();
            assert!(solution.end_objective <= solution.start_objective);
            for ((p, s), m) in solution
                .point
                .layers()
                .iter()
                .zip(start.layers())
                .zip(&masks)
            {
                for ((i, j), v) in p.indexed_iter() {
                    if !m.get(i, j) {
                        assert_eq!(v.to_bits(), s[(i, j)].to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn proximal_share_step_keeps_specific_groups() {
        let (client, global, batch) = fixture(15, 0.5, Activation::Tanh);
        let mut stepped = client.clone();
        stepped.proximal_share_step(&global, &batch, 5).unwrap();
        assert_eq!(specific_bits(&client), specific_bits(&stepped));
        assert_ne!(shared_bits(&client), shared_bits(&stepped));
    }

    #[test]
    fn bad_shapes_are_rejected() {
        let (mut client, global, batch) = fixture(16, 0.5, Activation::Tanh);
        let wrong = SharedStack::zeros(2, 2);
        assert!(matches!(
            client.phase_share_step(&wrong, &batch),
            Err(Error::Shape(_))
        ));
        let bad = Batch::new(Array2::zeros((2, 4)), vec![0, 1]).unwrap();
        assert!(matches!(
            client.phase_share_step(&global, &bad),
            Err(Error::Shape(_))
        ));
        assert!(matches!(
            client.local_round(&global, 0, 0),
            Err(Error::Config(_))
        ));
    }
}
