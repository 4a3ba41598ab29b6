//! Recursive Bayesian estimators over topology realizations and the joint
//! packet-delivery prediction they emit.
//!
//! Two estimators share the same observation model (one end-to-end
//! delivery bit per sample, fed back over a perfect ACK channel):
//!
//! * [`SihsEstimator`] assumes the realization never changes. Each
//!   observation zeroes out the inconsistent realizations and renormalizes.
//! * [`GeihsEstimator`] assumes each link is an independent two-state
//!   Markov chain advancing once per sample. Each step is an innovation
//!   (delivery-consistency masking) followed by a time update through the
//!   realization transition kernel.
//!
//! Both emit a [`PredictionTable`]: the exact joint distribution over the
//! next H delivery bits given the whole delivery history. A brute-force
//! chain-enumeration oracle for validating both is exported alongside
//! them as [`brute_force_posterior_and_prediction`].

mod oracle;

pub use oracle::brute_force_posterior_and_prediction;

use std::sync::Arc;

use thiserror::Error;

use crate::link::{prior_belief, GeParams, LinkModelError, StaticLinkParams, TransitionKernel};
use crate::mesh::{NetworkModel, ValidationError, MAX_HORIZON};

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error("observation at sample {sample} has zero probability under the model")]
    InconsistentObservation { sample: usize },
    #[error("horizon {horizon} exceeds the supported maximum of {max}")]
    HorizonTooLarge { horizon: usize, max: usize },
    #[error("horizon must be at least 1")]
    EmptyHorizon,
    #[error("enumeration bound exceeded: {detail}")]
    BoundExceeded { detail: String },
    #[error(transparent)]
    LinkModel(#[from] LinkModelError),
    #[error(transparent)]
    Validation(#[from] ValidationError),
}

/// Which stage of the recursion a belief snapshot represents.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BeliefKind {
    /// Static-model posterior over the frozen realization.
    SihsPosterior,
    /// P(G at sample k-1 | deliveries through sample k-1).
    GeihsFiltered,
    /// P(G at sample k | deliveries through sample k-1).
    GeihsPredicted,
}

/// A probability distribution over all 2^E realizations, indexed by the
/// canonical realization encoding.
#[derive(Debug, Clone)]
pub struct BeliefState {
    pub probs: Vec<f64>,
    pub sample_index: usize,
    pub kind: BeliefKind,
}

impl BeliefState {
    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }
}

/// Joint probability distribution over the next `horizon` delivery bits.
///
/// Entry at index b is the probability of the bit sequence spelled by b
/// with the most significant bit being the earliest sample (`base_sample`).
#[derive(Debug, Clone)]
pub struct PredictionTable {
    pub horizon: usize,
    pub base_sample: usize,
    pub joint: Vec<f64>,
}

impl PredictionTable {
    /// Bit of sequence index `seq` at step `h` (h = 0 is the earliest).
    pub fn sequence_bit(&self, seq: usize, h: usize) -> bool {
        debug_assert!(h < self.horizon);
        (seq >> (self.horizon - 1 - h)) & 1 == 1
    }

    pub fn probability_of(&self, bits: &[bool]) -> f64 {
        debug_assert_eq!(bits.len(), self.horizon);
        let mut idx = 0usize;
        for &b in bits {
            idx = (idx << 1) | b as usize;
        }
        self.joint[idx]
    }

    pub fn total(&self) -> f64 {
        self.joint.iter().sum()
    }

    /// Per-step marginal delivery probabilities.
    pub fn marginals(&self) -> Vec<f64> {
        marginal_predictions(self)
    }

    /// Sums out the last step, producing the (horizon - 1)-step table.
    pub fn marginalize_last(&self) -> PredictionTable {
        assert!(self.horizon >= 1);
        let joint = self
            .joint
            .chunks_exact(2)
            .map(|pair| pair[0] + pair[1])
            .collect();
        PredictionTable {
            horizon: self.horizon - 1,
            base_sample: self.base_sample,
            joint,
        }
    }
}

/// Entry h is the probability that the delivery at step h succeeds.
pub fn marginal_predictions(table: &PredictionTable) -> Vec<f64> {
    let mut marginals = vec![0.0; table.horizon];
    for (seq, &p) in table.joint.iter().enumerate() {
        for (h, slot) in marginals.iter_mut().enumerate() {
            if (seq >> (table.horizon - 1 - h)) & 1 == 1 {
                *slot += p;
            }
        }
    }
    marginals
}

/// Append-only record of observed delivery bits.
#[derive(Debug, Clone, Default)]
pub struct DeliveryHistory {
    bits: Vec<bool>,
}

impl DeliveryHistory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, delivered: bool) {
        self.bits.push(delivered);
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

/// Common interface the closed-loop harness drives estimators through.
pub trait DeliveryEstimator {
    /// Consumes the delivery bit of the current sample and advances to the
    /// next sample.
    fn update(&mut self, delivered: bool) -> Result<(), EstimatorError>;

    /// Joint prediction for the next `horizon` deliveries, conditioned on
    /// everything observed so far.
    fn predict(&self, horizon: usize) -> Result<PredictionTable, EstimatorError>;

    /// Number of observations consumed so far.
    fn sample_index(&self) -> usize;

    fn belief(&self) -> BeliefState;

    /// Predictive likelihood of the most recent observation, if any.
    fn last_z(&self) -> Option<f64>;
}

fn check_horizon(horizon: usize) -> Result<(), EstimatorError> {
    if horizon == 0 {
        return Err(EstimatorError::EmptyHorizon);
    }
    if horizon > MAX_HORIZON {
        return Err(EstimatorError::HorizonTooLarge {
            horizon,
            max: MAX_HORIZON,
        });
    }
    Ok(())
}

fn normalize(probs: &mut [f64]) -> f64 {
    let total: f64 = probs.iter().sum();
    if total > 0.0 {
        for p in probs.iter_mut() {
            *p /= total;
        }
    }
    total
}

// ── SIHS ────────────────────────────────────────────────────────────────

/// Static-link-model estimator: the hidden realization is frozen, so the
/// posterior is the prior restricted to realizations consistent with every
/// observation so far.
pub struct SihsEstimator {
    model: Arc<NetworkModel>,
    prior: Vec<f64>,
    belief: Vec<f64>,
    sample: usize,
    z_log: Vec<f64>,
}

impl SihsEstimator {
    pub fn new(model: Arc<NetworkModel>, params: &StaticLinkParams) -> Result<Self, EstimatorError> {
        if params.edge_count() != model.edge_count() {
            return Err(LinkModelError::LengthMismatch {
                got: params.edge_count(),
                expected: model.edge_count(),
            }
            .into());
        }
        let prior = prior_belief(&params.p)?;
        Ok(SihsEstimator {
            model,
            belief: prior.clone(),
            prior,
            sample: 0,
            z_log: Vec::new(),
        })
    }

    /// Discards all observations, returning to the product prior.
    pub fn reset_to_prior(&mut self) {
        self.belief.copy_from_slice(&self.prior);
        self.sample = 0;
        self.z_log.clear();
    }

    /// One-step predictive likelihoods Z_k of the observations consumed so
    /// far; useful for monitoring model mismatch.
    pub fn z_history(&self) -> &[f64] {
        &self.z_log
    }

    pub fn model(&self) -> &Arc<NetworkModel> {
        &self.model
    }
}

impl DeliveryEstimator for SihsEstimator {
    fn update(&mut self, delivered: bool) -> Result<(), EstimatorError> {
        let masked: Vec<f64> = self
            .belief
            .iter()
            .enumerate()
            .map(|(mask, &p)| {
                let real = crate::mesh::TopologyRealization::from_mask(
                    mask as u32,
                    self.model.edge_count(),
                );
                if self.model.delivery_indicator(real, self.sample, delivered) {
                    p
                } else {
                    0.0
                }
            })
            .collect();
        let z: f64 = masked.iter().sum();
        if z <= 0.0 {
            return Err(EstimatorError::InconsistentObservation {
                sample: self.sample,
            });
        }
        self.belief = masked;
        normalize(&mut self.belief);
        self.z_log.push(z);
        self.sample += 1;
        Ok(())
    }

    fn predict(&self, horizon: usize) -> Result<PredictionTable, EstimatorError> {
        check_horizon(horizon)?;
        // Under the static model each realization produces exactly one
        // delivery sequence, so the table is the push-forward of the belief
        // through the deterministic H-step delivery map.
        let mut joint = vec![0.0; 1 << horizon];
        for (mask, &p) in self.belief.iter().enumerate() {
            if p == 0.0 {
                continue;
            }
            let real =
                crate::mesh::TopologyRealization::from_mask(mask as u32, self.model.edge_count());
            let mut seq = 0usize;
            for h in 0..horizon {
                let bit = self.model.delivered(real, self.sample + h);
                seq = (seq << 1) | bit as usize;
            }
            joint[seq] += p;
        }
        Ok(PredictionTable {
            horizon,
            base_sample: self.sample,
            joint,
        })
    }

    fn sample_index(&self) -> usize {
        self.sample
    }

    fn belief(&self) -> BeliefState {
        BeliefState {
            probs: self.belief.clone(),
            sample_index: self.sample,
            kind: BeliefKind::SihsPosterior,
        }
    }

    fn last_z(&self) -> Option<f64> {
        self.z_log.last().copied()
    }
}

// ── GEIHS ───────────────────────────────────────────────────────────────

/// Gilbert-Elliott estimator. The stored belief is always the one-step
/// predicted distribution P(G at sample k | deliveries through k-1), which
/// is exactly what the prediction recursion conditions on.
pub struct GeihsEstimator {
    model: Arc<NetworkModel>,
    kernel: TransitionKernel,
    belief: Vec<f64>,
    /// Filtered distribution from the most recent innovation, kept for
    /// diagnostics.
    filtered: Option<Vec<f64>>,
    sample: usize,
    z_log: Vec<f64>,
}

impl GeihsEstimator {
    /// Standard construction: the prior is the per-link stationary product.
    pub fn new(model: Arc<NetworkModel>, params: &GeParams) -> Result<Self, EstimatorError> {
        if params.edge_count() != model.edge_count() {
            return Err(LinkModelError::LengthMismatch {
                got: params.edge_count(),
                expected: model.edge_count(),
            }
            .into());
        }
        let prior = prior_belief(&params.stationary().p)?;
        Ok(GeihsEstimator {
            model,
            kernel: TransitionKernel::from_ge(params),
            belief: prior,
            filtered: None,
            sample: 0,
            z_log: Vec::new(),
        })
    }

    /// Frozen-network variant: the kernel is the identity and the prior is
    /// supplied explicitly. Step-for-step equivalent to [`SihsEstimator`].
    pub fn with_identity_kernel(
        model: Arc<NetworkModel>,
        prior: &StaticLinkParams,
    ) -> Result<Self, EstimatorError> {
        if prior.edge_count() != model.edge_count() {
            return Err(LinkModelError::LengthMismatch {
                got: prior.edge_count(),
                expected: model.edge_count(),
            }
            .into());
        }
        let belief = prior_belief(&prior.p)?;
        Ok(GeihsEstimator {
            model,
            kernel: TransitionKernel::identity(),
            belief,
            filtered: None,
            sample: 0,
            z_log: Vec::new(),
        })
    }

    pub fn z_history(&self) -> &[f64] {
        &self.z_log
    }

    /// The filtered distribution P(G at k-1 | deliveries through k-1)
    /// produced by the most recent innovation, if any step has run.
    pub fn filtered_belief(&self) -> Option<BeliefState> {
        self.filtered.as_ref().map(|probs| BeliefState {
            probs: probs.clone(),
            sample_index: self.sample - 1,
            kind: BeliefKind::GeihsFiltered,
        })
    }

    pub fn kernel(&self) -> &TransitionKernel {
        &self.kernel
    }

    pub fn model(&self) -> &Arc<NetworkModel> {
        &self.model
    }

    /// Masks the belief with the delivery-consistency indicator for
    /// `sample` and returns the unnormalized mass.
    fn innovate(&self, belief: &mut [f64], sample: usize, delivered: bool) -> f64 {
        let width = self.model.edge_count();
        for (mask, p) in belief.iter_mut().enumerate() {
            let real = crate::mesh::TopologyRealization::from_mask(mask as u32, width);
            if !self.model.delivery_indicator(real, sample, delivered) {
                *p = 0.0;
            }
        }
        belief.iter().sum()
    }
}

impl DeliveryEstimator for GeihsEstimator {
    fn update(&mut self, delivered: bool) -> Result<(), EstimatorError> {
        let mut filtered = self.belief.clone();
        let z = self.innovate(&mut filtered, self.sample, delivered);
        if z <= 0.0 {
            // With strictly interior transition probabilities the belief
            // stays positive everywhere, so this fires only when the
            // claimed delivery is impossible at this sample under every
            // realization (or with the identity kernel after collapse).
            return Err(EstimatorError::InconsistentObservation {
                sample: self.sample,
            });
        }
        normalize(&mut filtered);
        let mut predicted = vec![0.0; filtered.len()];
        self.kernel.apply(&filtered, &mut predicted);
        normalize(&mut predicted);
        self.belief = predicted;
        self.filtered = Some(filtered);
        self.z_log.push(z);
        self.sample += 1;
        Ok(())
    }

    fn predict(&self, horizon: usize) -> Result<PredictionTable, EstimatorError> {
        check_horizon(horizon)?;
        let states = self.belief.len();
        let width = self.model.edge_count();
        // alpha holds, for every delivery prefix, the joint weight of that
        // prefix and each realization at the prefix's end. Each round
        // splits every prefix by the consistency indicator, then advances
        // the realization one sample through the kernel; the final round
        // skips the kernel because no later delivery depends on it.
        let mut alpha = self.belief.clone();
        for h in 0..horizon {
            let prefixes = 1usize << h;
            let mut expanded = vec![0.0; (prefixes << 1) * states];
            for prefix in 0..prefixes {
                let block = &alpha[prefix * states..(prefix + 1) * states];
                for (mask, &w) in block.iter().enumerate() {
                    if w == 0.0 {
                        continue;
                    }
                    let real = crate::mesh::TopologyRealization::from_mask(mask as u32, width);
                    let bit = self.model.delivered(real, self.sample + h) as usize;
                    expanded[((prefix << 1) | bit) * states + mask] = w;
                }
            }
            if h + 1 < horizon {
                let mut advanced = vec![0.0; expanded.len()];
                for prefix in 0..prefixes << 1 {
                    let src = &expanded[prefix * states..(prefix + 1) * states];
                    let dst = &mut advanced[prefix * states..(prefix + 1) * states];
                    self.kernel.apply(src, dst);
                }
                alpha = advanced;
            } else {
                alpha = expanded;
            }
        }
        let mut joint = vec![0.0; 1 << horizon];
        for (seq, slot) in joint.iter_mut().enumerate() {
            *slot = alpha[seq * states..(seq + 1) * states].iter().sum();
        }
        let total: f64 = joint.iter().sum();
        if total > 0.0 {
            for p in joint.iter_mut() {
                *p /= total;
            }
        }
        Ok(PredictionTable {
            horizon,
            base_sample: self.sample,
            joint,
        })
    }

    fn sample_index(&self) -> usize {
        self.sample
    }

    fn belief(&self) -> BeliefState {
        BeliefState {
            probs: self.belief.clone(),
            sample_index: self.sample,
            kind: BeliefKind::GeihsPredicted,
        }
    }

    fn last_z(&self) -> Option<f64> {
        self.z_log.last().copied()
    }
}
