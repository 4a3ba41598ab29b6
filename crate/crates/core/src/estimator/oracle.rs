//! Exhaustive-enumeration validation oracle for the recursive estimators.
//!
//! Enumerates every hidden realization chain outright and weights it by
//! prior, per-step transition factors, and consistency with the observed
//! history. Deliberately shares no code with the recursive estimators
//! beyond the model definitions (prior, kernel entries, delivered bit).

use std::sync::Arc;

use crate::link::TransitionKernel;
use crate::mesh::{NetworkModel, TopologyRealization};

use super::{BeliefKind, BeliefState, EstimatorError, PredictionTable};

const MAX_ORACLE_EDGES: usize = 4;
const MAX_ORACLE_CHAIN: usize = 8;

/// Exact posterior over the realization at the current sample and exact
/// joint prediction of the next `horizon` deliveries, by summing over all
/// (2^E)^(k + H) hidden chains.
///
/// `prior` is the distribution of the realization at sample 0 and
/// `kernel` advances it between consecutive samples; the realization at
/// sample t governs delivery t.
pub fn brute_force_posterior_and_prediction(
    model: &Arc<NetworkModel>,
    prior: &[f64],
    kernel: &TransitionKernel,
    history: &[bool],
    horizon: usize,
) -> Result<(BeliefState, PredictionTable), EstimatorError> {
    let width = model.edge_count();
    let chain_len = history.len() + horizon;
    if width > MAX_ORACLE_EDGES || chain_len > MAX_ORACLE_CHAIN {
        return Err(EstimatorError::BoundExceeded {
            detail: format!(
                "E = {width} (max {MAX_ORACLE_EDGES}), history + horizon = {chain_len} \
                 (max {MAX_ORACLE_CHAIN})"
            ),
        });
    }
    if horizon == 0 {
        return Err(EstimatorError::EmptyHorizon);
    }
    assert_eq!(prior.len(), 1 << width);

    let k = history.len();
    let states = 1usize << width;
    let posterior = vec![0.0; states];
    let joint = vec![0.0; 1 << horizon];

    // Depth-first walk over chains with on-the-fly pruning: a chain whose
    // prefix already contradicts the history carries zero weight.
    struct Walk<'a> {
        model: &'a NetworkModel,
        kernel: &'a TransitionKernel,
        history: &'a [bool],
        horizon: usize,
        width: usize,
        posterior: Vec<f64>,
        joint: Vec<f64>,
    }

    impl Walk<'_> {
        fn descend(&mut self, level: usize, state: usize, weight: f64, future_bits: usize) {
            if weight == 0.0 {
                return;
            }
            let k = self.history.len();
            let real = TopologyRealization::from_mask(state as u32, self.width);
            let mut future_bits = future_bits;
            if level < k {
                if self.model.delivered(real, level) != self.history[level] {
                    return;
                }
            } else {
                if level == k {
                    self.posterior[state] += weight;
                }
                let bit = self.model.delivered(real, level) as usize;
                future_bits = (future_bits << 1) | bit;
            }
            if level + 1 == k + self.horizon {
                self.joint[future_bits] += weight;
                return;
            }
            for next in 0..1usize << self.width {
                let p = self.kernel.probability(
                    real,
                    TopologyRealization::from_mask(next as u32, self.width),
                );
                self.descend(level + 1, next, weight * p, future_bits);
            }
        }
    }

    let mut walk = Walk {
        model,
        kernel,
        history,
        horizon,
        width,
        posterior,
        joint,
    };
    for (state, &p) in prior.iter().enumerate() {
        walk.descend(0, state, p, 0);
    }
    let (mut posterior, mut joint) = (walk.posterior, walk.joint);

    // Posterior accumulation above only fires when the chain reaches level
    // k with nonzero weight, i.e. it sums P(history, G at k) over chains.
    // For k = 0 no observation constrains it and it equals the prior.
    let evidence: f64 = joint.iter().sum();
    if evidence <= 0.0 {
        return Err(EstimatorError::InconsistentObservation { sample: k });
    }
    let posterior_mass: f64 = posterior.iter().sum();
    for p in posterior.iter_mut() {
        *p /= posterior_mass;
    }
    for p in joint.iter_mut() {
        *p /= evidence;
    }

    Ok((
        BeliefState {
            probs: posterior,
            sample_index: k,
            kind: BeliefKind::GeihsPredicted,
        },
        PredictionTable {
            horizon,
            base_sample: k,
            joint,
        },
    ))
}
