//! Local utilities over local occupancy measures and their gradients
//! (shadow rewards).
//!
//! Occupancies are kept unnormalized (total mass `1/(1-gamma)`); the entropy
//! utility applies the `(1-gamma)` normalization internally so it operates on
//! the discounted state distribution `d(s) = (1-gamma) * sum_a lambda(s, a)`.

use ndarray::Array2;
use thiserror::Error;

use crate::mdp::FactoredMDP;
use crate::oracle::{self, OracleError};
use crate::policy::LocalizedPolicy;

const NEG_TOL: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum UtilityError {
    #[error("occupancy entry {index} is negative: {value}")]
    NegativeOccupancy { index: usize, value: f64 },
    #[error("table shape {got_rows}x{got_cols} does not match occupancy {rows}x{cols}")]
    ShapeMismatch { got_rows: usize, got_cols: usize, rows: usize, cols: usize },
    #[error("entropy smoothing must be positive, got {0}")]
    BadSmoothing(f64),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// Gradient of a local utility at a local occupancy: a reward table over the
/// agent's own state-action pairs.
#[derive(Clone, Debug, PartialEq)]
pub struct ShadowReward {
    pub values: Array2<f64>,
}

impl ShadowReward {
    pub fn sup_norm(&self) -> f64 {
        self.values.iter().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// One agent's utility of its local occupancy measure.
#[derive(Clone, Debug)]
pub enum LocalUtility {
    /// `<r, lambda>`: standard cumulative reward.
    Linear { rewards: Array2<f64> },
    /// Smoothed entropy of the discounted state distribution:
    /// `-sum_s d(s) ln(d(s) + epsilon)`.
    Entropy { epsilon: f64 },
    /// Negative squared Euclidean distance to a target occupancy.
    Distance { target: Array2<f64> },
}

impl LocalUtility {
    pub fn entropy(epsilon: f64) -> Result<Self, UtilityError> {
        if !(epsilon > 0.0) {
            return Err(UtilityError::BadSmoothing(epsilon));
        }
        Ok(Self::Entropy { epsilon })
    }

    fn check_occupancy(&self, lambda: &Array2<f64>) -> Result<(), UtilityError> {
        if let Some((index, &value)) =
            lambda.iter().enumerate().find(|(_, &v)| v < -NEG_TOL)
        {
            return Err(UtilityError::NegativeOccupancy { index, value });
        }
        let (rows, cols) = lambda.dim();
        let table = match self {
            Self::Linear { rewards } => rewards,
            Self::Distance { target } => target,
            Self::Entropy { .. } => return Ok(()),
        };
        if table.dim() != (rows, cols) {
            return Err(UtilityError::ShapeMismatch {
                got_rows: table.nrows(),
                got_cols: table.ncols(),
                rows,
                cols,
            });
        }
        Ok(())
    }

    pub fn value(&self, lambda: &Array2<f64>, gamma: f64) -> Result<f64, UtilityError> {
        self.check_occupancy(lambda)?;
        Ok(match self {
            Self::Linear { rewards } => (rewards * lambda).sum(),
            Self::Entropy { epsilon } => {
                let mut total = 0.0;
                for row in lambda.rows() {
                    let d = (1.0 - gamma) * row.sum().max(0.0);
                    total -= d * (d + epsilon).ln();
                }
                total
            }
            Self::Distance { target } => -(lambda - target).mapv(|v| v * v).sum(),
        })
    }

    /// Exact analytic gradient of [`LocalUtility::value`] at `lambda`.
    pub fn shadow_reward(
        &self,
        lambda: &Array2<f64>,
        gamma: f64,
    ) -> Result<ShadowReward, UtilityError> {
        self.check_occupancy(lambda)?;
        let values = match self {
            Self::Linear { rewards } => rewards.clone(),
            Self::Entropy { epsilon } => {
                let mut out = Array2::zeros(lambda.dim());
                for (s, row) in lambda.rows().into_iter().enumerate() {
                    let d = (1.0 - gamma) * row.sum().max(0.0);
                    let g = -(1.0 - gamma) * ((d + epsilon).ln() + d / (d + epsilon));
                    for a in 0..lambda.ncols() {
                        out[(s, a)] = g;
                    }
                }
                out
            }
            Self::Distance { target } => (lambda - target).mapv(|v| -2.0 * v),
        };
        Ok(ShadowReward { values })
    }

    /// Analytic sup-norm bound on the gradient over the occupancy polytope.
    pub fn grad_bound(&self, gamma: f64) -> f64 {
        match self {
            Self::Linear { rewards } => rewards.iter().fold(0.0f64, |m, v| m.max(v.abs())),
            Self::Entropy { epsilon } => 1.0 + epsilon.ln().abs(),
            Self::Distance { target } => {
                let target_mass: f64 = target.iter().map(|v| v.abs()).sum();
                2.0 * (1.0 / (1.0 - gamma) + target_mass)
            }
        }
    }

    /// Analytic Lipschitz constant of the gradient (in sup norm over the
    /// 2-norm of the occupancy difference).
    pub fn gradient_lipschitz(&self, gamma: f64) -> f64 {
        match self {
            Self::Linear { .. } => 0.0,
            Self::Entropy { epsilon } => (1.0 - gamma) / epsilon,
            Self::Distance { .. } => 2.0,
        }
    }
}

/// Largest per-agent gradient bound; the certificate constant for a team.
pub fn team_grad_bound(utilities: &[LocalUtility], gamma: f64) -> f64 {
    utilities.iter().map(|u| u.grad_bound(gamma)).fold(0.0, f64::max)
}

/// Global objective: the average of the local utilities at the exact local
/// occupancies of the current policy.
pub fn global_objective(
    mdp: &FactoredMDP,
    policy: &LocalizedPolicy,
    utilities: &[LocalUtility],
    max_pairs: usize,
) -> Result<f64, UtilityError> {
    let occ = oracle::exact_occupancy(mdp, policy, max_pairs)?;
    let n = mdp.n_agents();
    let mut total = 0.0;
    for (i, u) in utilities.iter().enumerate() {
        total += u.value(&occ.locals[i], mdp.gamma())?;
    }
    Ok(total / n as f64)
}
