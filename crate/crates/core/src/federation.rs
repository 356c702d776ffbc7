//! Round-based orchestration of differentially private federated training.
//!
//! Every round all clients start from the broadcast global model, run the
//! scheduled number of DPSGD iterations, and the server replaces the global
//! model with the `p_i`-weighted average. Clients also report a curvature
//! probe used to choose the next round's local iteration count. Training
//! stops once either `R_s` rounds or `R_c` total local iterations are spent.

use rayon::prelude::*;
use serde::Serialize;

use crate::accountant::RdpAccountant;
use crate::data::{client_weights, ClientDataset};
use crate::dpsgd::{local_train, DpsgdHyper};
use crate::error::{Error, Result};
use crate::model::{
    accuracy, full_batch_gradient, mean_loss, LabeledSample, ModelSpec, ParamVector,
};
use crate::rng::RngStream;
use crate::scheduler::{
    effective_b_hat, effective_horizon, estimate_mu, next_tau, MuReport, SchedulerContext,
    TauDecision,
};

/// Tolerance on `Σ p_i = 1`.
pub const WEIGHT_SUM_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SchedulerKind {
    /// Convergence-bound-driven τ*, recomputed after every aggregation.
    Adaptive,
    /// The same τ in every round.
    Fixed(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationConfig {
    pub model: ModelSpec,
    pub hyper: DpsgdHyper,
    pub max_rounds: u64,
    pub max_iterations: u64,
    pub scheduler: SchedulerKind,
    pub gamma: f64,
    pub tau_cap: u64,
    pub delta: f64,
    pub alpha_grid: Vec<u32>,
    pub train_seed: u64,
    /// Train clients on the rayon pool; results do not depend on it.
    pub parallel: bool,
}

impl FederationConfig {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.hyper.validate()?;
        if self.tau_cap == 0 {
            return Err(Error::invalid("tau cap must be at least 1"));
        }
        if let SchedulerKind::Fixed(0) = self.scheduler {
            return Err(Error::invalid("fixed tau must be at least 1"));
        }
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::invalid(format!(
                "gamma must be non-negative, got {}",
                self.gamma
            )));
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return Err(Error::invalid(format!(
                "delta must be in (0, 1), got {}",
                self.delta
            )));
        }
        Ok(())
    }
}

/// Per-round record written to the metrics CSV. Column order is fixed.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundMetrics {
    pub k: u64,
    pub t: u64,
    pub tau_executed: u64,
    /// Real-valued τ* computed after this round's aggregation, if evaluated.
    pub tau_star_real: Option<f64>,
    pub mu_est: Option<f64>,
    pub epsilon_spent: f64,
    pub train_loss: f64,
    pub test_accuracy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FederationState {
    pub global_model: ParamVector,
    pub round: u64,
    pub iterations: u64,
    pub current_tau: u64,
    pub mu: Option<f64>,
    pub epsilon_spent: f64,
    /// Context of the last τ* evaluation.
    pub scheduler_ctx: Option<SchedulerContext>,
}

/// Gradient of a client's local objective.
pub trait Objective {
    fn gradient(&self, params: &ParamVector) -> Result<ParamVector>;
}

/// Mean cross-entropy of a model over a client's samples.
pub struct ClientObjective<'a> {
    pub spec: &'a ModelSpec,
    pub samples: &'a [LabeledSample],
}

impl Objective for ClientObjective<'_> {
    fn gradient(&self, params: &ParamVector) -> Result<ParamVector> {
        full_batch_gradient(self.spec, params, self.samples)
    }
}

/// Coordinate-wise weighted average in client order.
///
/// Computed as `w_0 + Σ p_i (w_i - w_0)`, which equals `Σ p_i w_i` when the
/// weights sum to one and returns identical inputs unchanged bit-for-bit.
pub fn aggregate(models: &[ParamVector], weights: &[f64]) -> Result<ParamVector> {
    Error::check_len("aggregation weights", models.len(), weights.len())?;
    let anchor = models
        .first()
        .ok_or_else(|| Error::invalid("nothing to aggregate"))?;
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > WEIGHT_SUM_TOLERANCE || weights.iter().any(|w| w.is_nan() || *w < 0.0) {
        return Err(Error::invalid(format!(
            "aggregation weights must be non-negative and sum to 1, got {sum}"
        )));
    }
    let mut out = anchor.as_slice().to_vec();
    for (m, &p) in models.iter().zip(weights) {
        Error::check_len("client model", anchor.len(), m.len())?;
        for ((o, wi), w0) in out.iter_mut().zip(m.as_slice()).zip(anchor.as_slice()) {
            *o += p * (wi - w0);
        }
    }
    Ok(ParamVector::from_raw(out))
}

/// Curvature probes `‖∇F_i(w_i) - ∇F_i(w)‖ / ‖w_i - w‖` with `w` the model
/// broadcast at round start and `w_i` client `i`'s trained model.
pub fn collect_mu_reports<O: Objective + Sync>(
    objectives: &[O],
    broadcast: &ParamVector,
    locals: &[ParamVector],
) -> Result<Vec<MuReport>> {
    Error::check_len("local models", objectives.len(), locals.len())?;
    objectives
        .par_iter()
        .zip(locals.par_iter())
        .enumerate()
        .map(|(i, (obj, local))| {
            let displacement = local.distance(broadcast)?;
            if displacement < crate::scheduler::MIN_DISPLACEMENT {
                return Ok(MuReport::from_norms(i, 0.0, displacement));
            }
            let change = obj.gradient(local)?.distance(&obj.gradient(broadcast)?)?;
            Ok(MuReport::from_norms(i, change, displacement))
        })
        .collect()
}

/// Whole-run output.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub metrics: Vec<RoundMetrics>,
    /// Global model after each round.
    pub models: Vec<ParamVector>,
    pub final_state: FederationState,
}

/// Server view of one experiment.
pub struct Federation<'a> {
    config: FederationConfig,
    clients: &'a [ClientDataset],
    weights: Vec<f64>,
    b_hat: f64,
    accountant: Option<RdpAccountant>,
    test_set: &'a [LabeledSample],
}

impl<'a> Federation<'a> {
    pub fn new(
        config: FederationConfig,
        clients: &'a [ClientDataset],
        test_set: &'a [LabeledSample],
    ) -> Result<Self> {
        config.validate()?;
        if clients.iter().any(ClientDataset::is_empty) {
            return Err(Error::EmptyDataset);
        }
        let weights = client_weights(clients)?;
        let sizes: Vec<usize> = clients.iter().map(ClientDataset::len).collect();
        let b_hat = effective_b_hat(config.hyper.sampling_rate, &sizes)?;
        let accountant = if config.hyper.is_private() {
            Some(RdpAccountant::new(
                config.hyper.sampling_rate,
                config.hyper.noise_multiplier,
                &config.alpha_grid,
            )?)
        } else {
            None
        };
        Ok(Self {
            config,
            clients,
            weights,
            b_hat,
            accountant,
            test_set,
        })
    }

    pub fn config(&self) -> &FederationConfig {
        &self.config
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn b_hat(&self) -> f64 {
        self.b_hat
    }

    /// ε after `iterations` local iterations; infinite without noise.
    pub fn epsilon_after(&self, iterations: u64) -> Result<f64> {
        match &self.accountant {
            Some(acc) => acc.epsilon(iterations, self.config.delta),
            None => Ok(f64::INFINITY),
        }
    }

    pub fn initial_state(&self, init: ParamVector) -> Result<FederationState> {
        Error::check_len("initial model", self.config.model.dimension(), init.len())?;
        let current_tau = match self.config.scheduler {
            SchedulerKind::Adaptive => 1,
            SchedulerKind::Fixed(tau) => tau,
        };
        Ok(FederationState {
            global_model: init,
            round: 0,
            iterations: 0,
            current_tau,
            mu: None,
            epsilon_spent: self.epsilon_after(0)?,
            scheduler_ctx: None,
        })
    }

    pub fn can_continue(&self, state: &FederationState) -> bool {
        state.round < self.config.max_rounds && state.iterations < self.config.max_iterations
    }

    fn train_clients(&self, state: &FederationState, tau: u64) -> Result<Vec<ParamVector>> {
        let cfg = &self.config;
        let train = |client: &ClientDataset| {
            let start = RngStream::new(cfg.train_seed, client.id as u64, state.iterations);
            local_train(
                &cfg.model,
                &state.global_model,
                &client.samples,
                tau,
                &cfg.hyper,
                start,
            )
            .map(|o| o.params)
        };
        if cfg.parallel {
            self.clients.par_iter().map(train).collect()
        } else {
            self.clients.iter().map(train).collect()
        }
    }

    fn train_loss(&self, params: &ParamVector) -> Result<f64> {
        let mut total = 0.0;
        for (c, p) in self.clients.iter().zip(&self.weights) {
            total += p * mean_loss(&self.config.model, params, &c.samples)?;
        }
        Ok(total)
    }

    fn decide_tau(
        &self,
        state: &FederationState,
        mu: Option<f64>,
        iterations: u64,
    ) -> (TauDecision, Option<SchedulerContext>) {
        let cfg = &self.config;
        match cfg.scheduler {
            SchedulerKind::Fixed(tau) => (
                TauDecision {
                    tau,
                    tau_star_real: None,
                },
                None,
            ),
            SchedulerKind::Adaptive => {
                let Some(mu) = mu else {
                    return (
                        TauDecision {
                            tau: 1,
                            tau_star_real: None,
                        },
                        None,
                    );
                };
                let ctx = SchedulerContext {
                    mu,
                    gamma: cfg.gamma,
                    clip_bound: cfg.hyper.clip_bound,
                    sigma: cfg.hyper.noise_multiplier,
                    model_dim: cfg.model.dimension(),
                    b_hat: self.b_hat,
                    r_s: cfg.max_rounds,
                    r_c: cfg.max_iterations,
                    tau_prev: state.current_tau,
                    t_horizon: effective_horizon(
                        cfg.max_rounds,
                        cfg.max_iterations,
                        state.current_tau,
                    ),
                };
                (next_tau(&ctx, iterations, cfg.tau_cap), Some(ctx))
            }
        }
    }

    /// One round: local training, aggregation, curvature reports, τ update.
    ///
    /// The executed τ is truncated so the iteration total never passes
    /// `R_c`. Any client error aborts the round before aggregation.
    pub fn run_round(&self, state: &FederationState) -> Result<(FederationState, RoundMetrics)> {
        if !self.can_continue(state) {
            return Err(Error::invalid("resource budget already exhausted"));
        }
        let cfg = &self.config;
        let tau = state.current_tau.min(cfg.max_iterations - state.iterations);
        let locals = self.train_clients(state, tau)?;
        let global = aggregate(&locals, &self.weights)?;

        let objectives: Vec<ClientObjective> = self
            .clients
            .iter()
            .map(|c| ClientObjective {
                spec: &cfg.model,
                samples: &c.samples,
            })
            .collect();
        let reports = collect_mu_reports(&objectives, &state.global_model, &locals)?;
        let estimate = estimate_mu(&reports, &self.weights, state.mu)?;
        let mu = estimate.map(|e| e.mu);

        let iterations = state.iterations + tau;
        let (decision, ctx) = self.decide_tau(state, mu, iterations);
        let epsilon_spent = self.epsilon_after(iterations)?;
        let metrics = RoundMetrics {
            k: state.round + 1,
            t: iterations,
            tau_executed: tau,
            tau_star_real: decision.tau_star_real,
            mu_est: mu,
            epsilon_spent,
            train_loss: self.train_loss(&global)?,
            test_accuracy: if self.test_set.is_empty() {
                None
            } else {
                Some(accuracy(&cfg.model, &global, self.test_set)?)
            },
        };
        let next = FederationState {
            global_model: global,
            round: state.round + 1,
            iterations,
            current_tau: decision.tau,
            mu,
            epsilon_spent,
            scheduler_ctx: ctx.or(state.scheduler_ctx),
        };
        Ok((next, metrics))
    }

    /// Rounds until either resource is exhausted.
    pub fn run(&self, init: ParamVector) -> Result<Trajectory> {
        let mut state = self.initial_state(init)?;
        let mut metrics = Vec::new();
        let mut models = Vec::new();
        while self.can_continue(&state) {
            let (next, row) = self.run_round(&state)?;
            tracing::debug!(
                round = row.k,
                t = row.t,
                tau = row.tau_executed,
                loss = row.train_loss,
                "round complete"
            );
            models.push(next.global_model.clone());
            metrics.push(row);
            state = next;
        }
        Ok(Trajectory {
            metrics,
            models,
            final_state: state,
        })
    }
}
