//! Central clearing of the three market designs.
//!
//! Each design is written as one separable QP (see [`crate::qp`]) whose
//! solution is mapped back to bilateral trades, community pool decisions,
//! prices and a welfare decomposition.
//!
//! Sign conventions: a positive net injection is a sale, a positive `P_nm`
//! is energy sold by `n` to `m`, and the price of a bilateral trade is the
//! multiplier of its reciprocity row.

pub(crate) mod community;
pub(crate) mod full_p2p;
mod hybrid;
mod result;

pub use community::{clear_community, clear_community_design};
pub use full_p2p::clear_full_p2p;
pub use hybrid::clear_hybrid;
pub use result::{
    ClearingResult, CommunityDecision, MemberDecision, Node, StepMetrics, TradeMatrix, TradePair, WelfareBreakdown,
};

use thiserror::Error;

use crate::model::{Design, MarketInstance};
use crate::qp::{QpError, SolveOptions, Status};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClearingError {
    #[error("invalid input: {0}")]
    InvalidInput(String),
    #[error("market is infeasible: {0}")]
    Infeasible(String),
    #[error("solver stopped after {iterations} iterations with KKT residual {residual:.3e}")]
    NotConverged { iterations: usize, residual: f64 },
    #[error("result is not optimal")]
    NotOptimal,
}

impl From<QpError> for ClearingError {
    fn from(e: QpError) -> Self {
        match e {
            QpError::Infeasible(msg) => ClearingError::Infeasible(msg),
            QpError::MaxIterExceeded(sol) => ClearingError::NotConverged {
                iterations: sol.iterations,
                residual: sol.kkt.max(),
            },
            QpError::InvalidProblem(msg) => ClearingError::InvalidInput(msg),
            QpError::DimensionMismatch { expected, got } => {
                ClearingError::InvalidInput(format!("dimension mismatch: expected {expected}, got {got}"))
            }
        }
    }
}

/// Clears `instance` with the design it is tagged with.
pub fn clear(instance: &MarketInstance, opts: &SolveOptions) -> Result<ClearingResult, ClearingError> {
    clear_as(instance, instance.design(), opts)
}

/// Clears `instance` under `design`, regardless of its tag.
pub fn clear_as(
    instance: &MarketInstance,
    design: Design,
    opts: &SolveOptions,
) -> Result<ClearingResult, ClearingError> {
    match design {
        Design::FullP2p => clear_full_p2p(instance, opts),
        Design::Community => clear_community_design(instance, opts),
        Design::Hybrid => clear_hybrid(instance, opts),
    }
}

/// Welfare decomposition of an optimal result. Its total is
/// `-objective_value`.
pub fn social_welfare(result: &ClearingResult) -> Result<WelfareBreakdown, ClearingError> {
    if result.status != Status::Optimal {
        return Err(ClearingError::NotOptimal);
    }
    Ok(result.welfare)
}
