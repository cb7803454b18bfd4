//! Local client procedures.
//!
//! The ASO-Fed client trains on a proximal surrogate of its local loss and
//! corrects each stochastic gradient with accumulators that carry gradient
//! information across rounds:
//!
//! ```text
//! grad_s   = grad f_k(w_k) + lambda * (w_k - w)
//! grad_z   = grad_s - grad_s_prev + h_prev
//! w_k     <- w_k - r * lr * grad_z
//! ```
//!
//! After the round, `h <- beta * h + (1 - beta) * v` and `v <- grad_s`.
//! The baselines (FedAvg, FedProx, FedAsync) run plain or proximal SGD.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::ClientShard;
use crate::error::{Error, Result};
use crate::models::{loss_and_grad, ModelSpec, ParamSet, Samples};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Algorithm {
    AsoFed,
    FedAvg,
    FedProx,
    FedAsync,
}

impl Algorithm {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "asofed" => Some(Self::AsoFed),
            "fedavg" => Some(Self::FedAvg),
            "fedprox" => Some(Self::FedProx),
            "fedasync" => Some(Self::FedAsync),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::AsoFed => "asofed",
            Self::FedAvg => "fedavg",
            Self::FedProx => "fedprox",
            Self::FedAsync => "fedasync",
        }
    }

    pub fn is_synchronous(self) -> bool {
        matches!(self, Self::FedAvg | Self::FedProx)
    }
}

/// When the gradient balancer `h` absorbs the previous round's gradient.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceOrder {
    /// After the model update: `h <- beta h + (1 - beta) v`, then `v <- grad_s`.
    AfterUpdate,
    /// Before the round: `h <- beta h + (1 - beta) grad_s_prev`, then use `h`.
    BeforeUse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClientConfig {
    pub algorithm: Algorithm,
    pub lambda: f64,
    pub beta: f64,
    pub base_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub dynamic_lr: bool,
    pub balance_order: BalanceOrder,
    /// Proximal weight of the FedAsync local objective.
    pub fedasync_rho: f64,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            algorithm: Algorithm::AsoFed,
            lambda: 1.0,
            beta: 0.001,
            base_lr: 0.001,
            epochs: 2,
            batch_size: 32,
            dynamic_lr: true,
            balance_order: BalanceOrder::AfterUpdate,
            fedasync_rho: 0.005,
        }
    }
}

impl ClientConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.beta) {
            return Err(Error::InvalidArgument(format!("beta {} must be in [0, 1)", self.beta)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidArgument(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !(self.base_lr > 0.0) {
            return Err(Error::InvalidArgument(format!("base_lr {} must be > 0", self.base_lr)));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument("epochs and batch_size must be >= 1".into()));
        }
        if !(self.fedasync_rho >= 0.0) {
            return Err(Error::InvalidArgument(format!("fedasync_rho {} must be >= 0", self.fedasync_rho)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub id: usize,
    pub w_k: ParamSet,
    /// Gradient balancer.
    pub h: ParamSet,
    /// Surrogate gradient of the previous round, folded into `h`.
    pub v: ParamSet,
    pub grad_s_prev: ParamSet,
    pub n_visible: usize,
    pub delay_history: Vec<f64>,
    pub r_multiplier: f64,
    pub config: ClientConfig,
    rng: ChaCha8Rng,
}

/// Result of one local round.
#[derive(Debug, Clone, PartialEq)]
pub enum LocalOutcome {
    /// No visible data; nothing to upload.
    Skipped,
    Update {
        params: ParamSet,
        /// Mean data loss over the round's mini-batches.
        loss: f64,
        /// Visible sample count the round trained on.
        n_visible: usize,
        steps: usize,
    },
}

impl ClientState {
    /// Fresh state: accumulators zero, multiplier 1. The shuffling stream is
    /// keyed by `(seed, id)`.
    pub fn new(id: usize, init: &ParamSet, config: ClientConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(id as u64 + 1);
        Ok(Self {
            id,
            w_k: init.clone(),
            h: ParamSet::zeros_like(init),
            v: ParamSet::zeros_like(init),
            grad_s_prev: ParamSet::zeros_like(init),
            n_visible: 0,
            delay_history: Vec::new(),
            r_multiplier: 1.0,
            config,
            rng,
        })
    }

    /// Step-size multiplier applied in the next round.
    pub fn effective_multiplier(&self) -> f64 {
        if self.config.dynamic_lr {
            self.r_multiplier
        } else {
            1.0
        }
    }

    pub fn mean_delay(&self) -> Option<f64> {
        if self.delay_history.is_empty() {
            None
        } else {
            Some(self.delay_history.iter().sum::<f64>() / self.delay_history.len() as f64)
        }
    }
}

/// `grad f_k(w_k) + lambda (w_k - w_server)` on one batch, with the batch's
/// mean data loss.
pub fn surrogate_grad(
    state: &ClientState,
    w_server: &ParamSet,
    spec: &ModelSpec,
    batch: &Samples,
) -> Result<(ParamSet, f64)> {
    proximal_grad(&state.w_k, w_server, state.config.lambda, spec, batch)
}

fn proximal_grad(
    w_k: &ParamSet,
    w_server: &ParamSet,
    lambda: f64,
    spec: &ModelSpec,
    batch: &Samples,
) -> Result<(ParamSet, f64)> {
    w_k.check_same_shape(w_server)?;
    let g = loss_and_grad(spec, w_k, batch)?;
    let mut grad = g.grad;
    if lambda != 0.0 {
        grad.axpy_assign(lambda, &w_k.sub(w_server)?)?;
    }
    Ok((grad, g.loss))
}

/// `grad_s - grad_s_prev + h_prev`, where `h_prev` is the balancer as it stood
/// when the round began.
pub fn balanced_grad(state: &ClientState, grad_s: &ParamSet) -> Result<ParamSet> {
    let mut z = grad_s.clone();
    z.axpy_assign(-1.0, &state.grad_s_prev)?;
    z.axpy_assign(1.0, &state.h)?;
    Ok(z)
}

/// End-of-round accumulator update: `h <- beta h + (1 - beta) v`, then
/// `v <- grad_s` and `grad_s_prev <- grad_s`.
pub fn update_accumulators(state: &mut ClientState, grad_s: &ParamSet) -> Result<()> {
    let beta = state.config.beta;
    if state.config.balance_order == BalanceOrder::AfterUpdate {
        state.h.lincomb_assign(beta, 1.0 - beta, &state.v)?;
    }
    state.v = grad_s.clone();
    state.grad_s_prev = grad_s.clone();
    Ok(())
}

/// Records a finished round's duration and recomputes
/// `r = max(1, ln(mean duration))`.
pub fn update_multiplier(state: &mut ClientState, round_duration: f64) -> Result<f64> {
    if !(round_duration > 0.0) || !round_duration.is_finite() {
        return Err(Error::InvalidArgument(format!("round duration {round_duration} must be > 0")));
    }
    state.delay_history.push(round_duration);
    let mean = state.mean_delay().expect("history non-empty");
    state.r_multiplier = mean.ln().max(1.0);
    Ok(state.r_multiplier)
}

fn shuffled_batches(state: &mut ClientState, n_visible: usize) -> Vec<Vec<usize>> {
    let mut positions: Vec<usize> = (0..n_visible).collect();
    positions.shuffle(&mut state.rng);
    positions.chunks(state.config.batch_size).map(<[usize]>::to_vec).collect()
}

fn diverged(client: usize, what: &str) -> Error {
    Error::Divergence { iteration: 0, detail: format!("client {client}: non-finite {what}") }
}

/// One ASO-Fed round: the client adopts `w_server`, runs `epochs` passes of
/// shuffled mini-batch steps along the balanced gradient with step
/// `r * base_lr`, then updates its accumulators with the round's mean
/// surrogate gradient.
pub fn local_step(
    state: &mut ClientState,
    w_server: &ParamSet,
    spec: &ModelSpec,
    shard: &ClientShard,
) -> Result<LocalOutcome> {
    if shard.visible_count == 0 {
        return Ok(LocalOutcome::Skipped);
    }
    w_server.check_same_shape(&state.w_k)?;
    state.w_k = w_server.clone();
    state.n_visible = shard.visible_count;
    if state.config.balance_order == BalanceOrder::BeforeUse {
        let beta = state.config.beta;
        let prev = state.grad_s_prev.clone();
        state.h.lincomb_assign(beta, 1.0 - beta, &prev)?;
    }
    let step = state.effective_multiplier() * state.config.base_lr;
    let mut grad_sum = ParamSet::zeros_like(w_server);
    let mut loss_sum = 0.0;
    let mut steps = 0usize;
    for _ in 0..state.config.epochs {
        for batch_pos in shuffled_batches(state, shard.visible_count) {
            let batch = shard.train_batch(&batch_pos);
            let (g_s, loss) = surrogate_grad(state, w_server, spec, &batch)?;
            let z = balanced_grad(state, &g_s)?;
            state.w_k.axpy_assign(-step, &z)?;
            if !state.w_k.is_finite() {
                return Err(diverged(state.id, "local model"));
            }
            grad_sum.axpy_assign(1.0, &g_s)?;
            loss_sum += loss;
            steps += 1;
        }
    }
    grad_sum.scale_assign(1.0 / steps as f64);
    update_accumulators(state, &grad_sum)?;
    Ok(LocalOutcome::Update {
        params: state.w_k.clone(),
        loss: loss_sum / steps as f64,
        n_visible: shard.visible_count,
        steps,
    })
}

/// Plain or proximal local SGD with a fixed step `base_lr`.
fn local_sgd(
    state: &mut ClientState,
    w_server: &ParamSet,
    spec: &ModelSpec,
    shard: &ClientShard,
    prox: f64,
) -> Result<LocalOutcome> {
    if shard.visible_count == 0 {
        return Ok(LocalOutcome::Skipped);
    }
    w_server.check_same_shape(&state.w_k)?;
    state.w_k = w_server.clone();
    state.n_visible = shard.visible_count;
    let lr = state.config.base_lr;
    let mut loss_sum = 0.0;
    let mut steps = 0usize;
    for _ in 0..state.config.epochs {
        for batch_pos in shuffled_batches(state, shard.visible_count) {
            let batch = shard.train_batch(&batch_pos);
            let (g, loss) = proximal_grad(&state.w_k, w_server, prox, spec, &batch)?;
            state.w_k.axpy_assign(-lr, &g)?;
            if !state.w_k.is_finite() {
                return Err(diverged(state.id, "local model"));
            }
            loss_sum += loss;
            steps += 1;
        }
    }
    Ok(LocalOutcome::Update {
        params: state.w_k.clone(),
        loss: loss_sum / steps as f64,
        n_visible: shard.visible_count,
        steps,
    })
}

/// FedAvg client: `epochs` passes of SGD on the local loss.
pub fn local_step_fedavg(
    state: &mut ClientState,
    w_server: &ParamSet,
    spec: &ModelSpec,
    shard: &ClientShard,
) -> Result<LocalOutcome> {
    local_sgd(state, w_server, spec, shard, 0.0)
}

/// FedProx client: SGD on `f_k + (lambda / 2) ||w_k - w||^2`.
pub fn local_step_fedprox(
    state: &mut ClientState,
    w_server: &ParamSet,
    spec: &ModelSpec,
    shard: &ClientShard,
) -> Result<LocalOutcome> {
    let lambda = state.config.lambda;
    local_sgd(state, w_server, spec, shard, lambda)
}

/// FedAsync client: SGD on `f_k + (rho / 2) ||w_k - w||^2`.
pub fn local_step_fedasync(
    state: &mut ClientState,
    w_server: &ParamSet,
    spec: &ModelSpec,
    shard: &ClientShard,
) -> Result<LocalOutcome> {
    let rho = state.config.fedasync_rho;
    local_sgd(state, w_server, spec, shard, rho)
}

/// Dispatches to the local procedure of the configured algorithm.
pub fn run_round(
    state: &mut ClientState,
    w_server: &ParamSet,
    spec: &ModelSpec,
    shard: &ClientShard,
) -> Result<LocalOutcome> {
    match state.config.algorithm {
        Algorithm::AsoFed => local_step(state, w_server, spec, shard),
        Algorithm::FedAvg => local_step_fedavg(state, w_server, spec, shard),
        Algorithm::FedProx => local_step_fedprox(state, w_server, spec, shard),
        Algorithm::FedAsync => local_step_fedasync(state, w_server, spec, shard),
    }
}
