//! Decentralized clearing by negotiation rounds.
//!
//! Peers (or community members) only exchange quantities and prices. Each
//! round every agent solves a small local problem against the last agreed
//! values, then the agreed values and prices are updated (consensus ADMM).
//! Once the agents agree, an optional tie-break stage picks, among the
//! equally good trade sets, the one with the smallest squared volume, which
//! is the same choice the central solver makes.

mod community;
mod full_p2p;
mod local;

pub use community::negotiate_community;
pub use full_p2p::negotiate_full_p2p;

use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use thiserror::Error;

use crate::clearing::{ClearingError, ClearingResult};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SyncMode {
    #[default]
    Synchronous,
    /// Reserved; rejected by the negotiators.
    Asynchronous,
}

/// Agents agree once both residuals are within tolerance and the published
/// point has KKT residuals below the smaller tolerance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NegotiationConfig {
    pub rho: f64,
    /// On disagreement between the two sides of a trade (MW).
    pub tol_primal: f64,
    /// On the change of agreed values, scaled by `rho` ($/MWh).
    pub tol_dual: f64,
    pub max_rounds: usize,
    pub sync_mode: SyncMode,
    /// Residual balancing of `rho`.
    pub adaptive_rho: bool,
    /// Run the tie-break stage after agreement.
    pub tie_break: bool,
}

impl Default for NegotiationConfig {
    fn default() -> Self {
        Self {
            rho: 1.0,
            tol_primal: 1e-6,
            tol_dual: 1e-6,
            max_rounds: 50_000,
            sync_mode: SyncMode::Synchronous,
            adaptive_rho: true,
            tie_break: true,
        }
    }
}

impl NegotiationConfig {
    fn validate(&self) -> Result<(), NegotiationError> {
        let bad = |msg: &str| Err(NegotiationError::InvalidConfig(msg.into()));
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return bad("rho must be positive");
        }
        if !(self.tol_primal > 0.0 && self.tol_dual > 0.0) {
            return bad("tolerances must be positive");
        }
        if self.max_rounds == 0 {
            return bad("max_rounds must be at least 1");
        }
        if self.sync_mode != SyncMode::Synchronous {
            return bad("only synchronous rounds are supported");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TraceRound {
    pub round: usize,
    pub primal_residual: f64,
    pub dual_residual: f64,
    /// Objective at the symmetrized trades of the round.
    pub objective: f64,
    /// Total messages sent in the round.
    pub messages: usize,
    pub rho: f64,
    /// Messages sent and received by each agent, aligned with `agents`.
    pub sent: Vec<usize>,
    pub received: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct NegotiationTrace {
    /// Peer ids, followed by the manager for community negotiation.
    pub agents: Vec<String>,
    pub rounds: Vec<TraceRound>,
    /// Rounds of the tie-break stage, numbered after `rounds`.
    pub tie_break_rounds: Vec<TraceRound>,
    pub converged: bool,
    /// Whether the published point comes from the tie-break stage.
    pub tie_break_applied: bool,
}

impl NegotiationTrace {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("round,primal_residual,dual_residual,objective,messages\n");
        for r in self.rounds.iter().chain(&self.tie_break_rounds) {
            writeln!(
                out,
                "{},{},{},{},{}",
                r.round, r.primal_residual, r.dual_residual, r.objective, r.messages
            )
            .expect("writing to a string");
        }
        out
    }

    pub fn total_rounds(&self) -> usize {
        self.rounds.len() + self.tie_break_rounds.len()
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum NegotiationError {
    #[error("invalid negotiation config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Clearing(#[from] ClearingError),
    #[error("peer `{0}` cannot meet its bounds with its trading partners")]
    Infeasible(String),
    #[error("no agreement after {} rounds", .trace.rounds.len())]
    MaxRoundsExceeded {
        result: Box<ClearingResult>,
        trace: Box<NegotiationTrace>,
    },
}

/// Residual balancing: returns the factor applied to `rho`.
fn balance_rho(primal: f64, dual: f64, rho: f64, rho0: f64) -> f64 {
    if primal > 10.0 * dual && rho < 1e4 * rho0 {
        2.0
    } else if dual > 10.0 * primal && rho > 1e-4 * rho0 {
        0.5
    } else {
        1.0
    }
}

const ADAPT_EVERY: usize = 10;
/// Later rounds keep `rho` fixed so that the iteration settles.
const MAX_RHO_CHANGES: usize = 20;

/// Slack used when agents decide from their own prices which of their
/// quantities may move in the tie-break stage.
/// It has to stay well below the smallest fee, or paying a fee for a
/// round trip would look free.
fn tie_tolerance(scale: f64) -> f64 {
    1e-6 * scale.abs().max(1.0)
}

/// Largest KKT residual of a published point.
fn publish_tolerance(cfg: &NegotiationConfig) -> f64 {
    cfg.tol_primal.min(cfg.tol_dual)
}

/// Both stages settle to this fraction of the tolerances, which leaves
/// room for the tie-break stage to move along the optimal face.
const SETTLE_MARGIN: f64 = 1e-2;

fn settled(cfg: &NegotiationConfig) -> NegotiationConfig {
    NegotiationConfig {
        tol_primal: SETTLE_MARGIN * cfg.tol_primal,
        tol_dual: SETTLE_MARGIN * cfg.tol_dual,
        ..*cfg
    }
}
