//! Per-link stochastic models: static links, Gilbert-Elliott links, the
//! prior belief over topology realizations, and the one-sample realization
//! transition kernel.

use rand::{Rng, RngExt};
use thiserror::Error;

use crate::mesh::{TopologyRealization, MAX_EDGES};

#[derive(Debug, Error, PartialEq)]
pub enum LinkModelError {
    #[error("link {index} probability {value} outside [0, 1]")]
    ProbabilityOutOfRange { index: usize, value: f64 },
    #[error("link {index} transition probability {value} outside the open interval (0, 1)")]
    TransitionNotInterior { index: usize, value: f64 },
    #[error("parameter vector length {got} does not match edge count {expected}")]
    LengthMismatch { got: usize, expected: usize },
    #[error("{edges} edges exceeds the supported maximum of {max}")]
    TooManyEdges { edges: usize, max: usize },
}

/// A-priori per-link up probabilities for the static (frozen) link model.
#[derive(Debug, Clone, PartialEq)]
pub struct StaticLinkParams {
    pub p: Vec<f64>,
}

impl StaticLinkParams {
    pub fn new(p: Vec<f64>) -> Result<Self, LinkModelError> {
        for (index, &value) in p.iter().enumerate() {
            if !(0.0..=1.0).contains(&value) || !value.is_finite() {
                return Err(LinkModelError::ProbabilityOutOfRange { index, value });
            }
        }
        Ok(StaticLinkParams { p })
    }

    pub fn edge_count(&self) -> usize {
        self.p.len()
    }
}

/// Gilbert-Elliott per-link transition probabilities. Entries are required
/// to lie strictly inside (0, 1), which keeps every kernel entry positive
/// and the innovation normalizer provably nonzero. The frozen-network case
/// is covered by [`TransitionKernel::Identity`] instead of boundary values.
#[derive(Debug, Clone, PartialEq)]
pub struct GeParams {
    /// down -> up transition probability per link.
    pub p_up: Vec<f64>,
    /// up -> down transition probability per link.
    pub p_down: Vec<f64>,
}

impl GeParams {
    pub fn new(p_up: Vec<f64>, p_down: Vec<f64>) -> Result<Self, LinkModelError> {
        if p_up.len() != p_down.len() {
            return Err(LinkModelError::LengthMismatch {
                got: p_down.len(),
                expected: p_up.len(),
            });
        }
        for (index, &value) in p_up.iter().chain(p_down.iter()).enumerate() {
            if !(value > 0.0 && value < 1.0) {
                return Err(LinkModelError::TransitionNotInterior {
                    index: index % p_up.len().max(1),
                    value,
                });
            }
        }
        Ok(GeParams { p_up, p_down })
    }

    pub fn edge_count(&self) -> usize {
        self.p_up.len()
    }

    /// Stationary per-link up probabilities.
    pub fn stationary(&self) -> StaticLinkParams {
        let p = (0..self.edge_count())
            .map(|e| stationary_up_probability(self, e))
            .collect();
        StaticLinkParams { p }
    }
}

/// Steady-state probability that link `edge` is up: p_u / (p_u + p_d).
pub fn stationary_up_probability(params: &GeParams, edge: usize) -> f64 {
    params.p_up[edge] / (params.p_up[edge] + params.p_down[edge])
}

/// Independent-links product prior over all 2^E realizations; entry at the
/// canonical index of realization G is the product of p over up links and
/// (1 - p) over down links.
pub fn prior_belief(p: &[f64]) -> Result<Vec<f64>, LinkModelError> {
    let e = p.len();
    if e > MAX_EDGES {
        return Err(LinkModelError::TooManyEdges {
            edges: e,
            max: MAX_EDGES,
        });
    }
    let mut belief = vec![0.0; 1 << e];
    for (mask, slot) in belief.iter_mut().enumerate() {
        let real = TopologyRealization::from_mask(mask as u32, e);
        let mut prob = 1.0;
        for (edge, &pe) in p.iter().enumerate() {
            prob *= if real.is_up(edge) { pe } else { 1.0 - pe };
        }
        *slot = prob;
    }
    Ok(belief)
}

/// Probability that realization `from` transitions to `to` in one sample
/// time: the product of independent per-link transition factors.
pub fn transition_probability(
    params: &GeParams,
    from: TopologyRealization,
    to: TopologyRealization,
) -> f64 {
    debug_assert_eq!(from.width(), params.edge_count());
    debug_assert_eq!(to.width(), params.edge_count());
    let mut prob = 1.0;
    for e in 0..params.edge_count() {
        prob *= match (from.is_up(e), to.is_up(e)) {
            (true, true) => 1.0 - params.p_down[e],
            (true, false) => params.p_down[e],
            (false, true) => params.p_up[e],
            (false, false) => 1.0 - params.p_up[e],
        };
    }
    prob
}

/// Edge count above which the kernel is applied pairwise on the fly
/// instead of from a dense 2^E x 2^E table.
const DENSE_KERNEL_MAX_EDGES: usize = 10;

/// One-sample realization transition kernel. Materialized as a dense
/// table for small edge counts so repeated belief updates are a plain
/// matrix-vector product; computed per pair above that.
#[derive(Debug, Clone)]
pub enum TransitionKernel {
    Identity,
    Dense { width: usize, table: Vec<f64> },
    OnTheFly { params: GeParams },
}

impl TransitionKernel {
    pub fn identity() -> Self {
        TransitionKernel::Identity
    }

    pub fn from_ge(params: &GeParams) -> Self {
        let e = params.edge_count();
        if e > DENSE_KERNEL_MAX_EDGES {
            return TransitionKernel::OnTheFly {
                params: params.clone(),
            };
        }
        let states = 1usize << e;
        let mut table = vec![0.0; states * states];
        for from in 0..states {
            let fr = TopologyRealization::from_mask(from as u32, e);
            for to in 0..states {
                let tr = TopologyRealization::from_mask(to as u32, e);
                table[to * states + from] = transition_probability(params, fr, tr);
            }
        }
        TransitionKernel::Dense { width: e, table }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, TransitionKernel::Identity)
    }

    /// Kernel entry P(to | from).
    pub fn probability(&self, from: TopologyRealization, to: TopologyRealization) -> f64 {
        match self {
            TransitionKernel::Identity => {
                if from == to {
                    1.0
                } else {
                    0.0
                }
            }
            TransitionKernel::Dense { width, table } => {
                let states = 1usize << width;
                table[to.mask() as usize * states + from.mask() as usize]
            }
            TransitionKernel::OnTheFly { params } => transition_probability(params, from, to),
        }
    }

    /// `out[to] = sum_from P(to | from) * belief[from]`.
    pub fn apply(&self, belief: &[f64], out: &mut [f64]) {
        debug_assert_eq!(belief.len(), out.len());
        match self {
            TransitionKernel::Identity => out.copy_from_slice(belief),
            TransitionKernel::Dense { width, table } => {
                let states = 1usize << width;
                debug_assert_eq!(belief.len(), states);
                for (to, slot) in out.iter_mut().enumerate() {
                    let row = &table[to * states..(to + 1) * states];
                    *slot = row
                        .iter()
                        .zip(belief.iter())
                        .map(|(g, b)| g * b)
                        .sum::<f64>();
                }
            }
            TransitionKernel::OnTheFly { params } => {
                let e = params.edge_count();
                for (to, slot) in out.iter_mut().enumerate() {
                    let tr = TopologyRealization::from_mask(to as u32, e);
                    *slot = belief
                        .iter()
                        .enumerate()
                        .map(|(from, b)| {
                            b * transition_probability(
                                params,
                                TopologyRealization::from_mask(from as u32, e),
                                tr,
                            )
                        })
                        .sum::<f64>();
                }
            }
        }
    }
}

/// Samples a realization with each link independently up with probability `p[e]`.
pub fn sample_initial_realization<R: Rng + ?Sized>(p: &[f64], rng: &mut R) -> TopologyRealization {
    let bits: Vec<bool> = p.iter().map(|&pe| rng.random_bool(pe)).collect();
    TopologyRealization::from_bits(&bits)
}

/// Advances each link independently by one Gilbert-Elliott step.
pub fn sample_next_realization<R: Rng + ?Sized>(
    params: &GeParams,
    current: TopologyRealization,
    rng: &mut R,
) -> TopologyRealization {
    debug_assert_eq!(current.width(), params.edge_count());
    let bits: Vec<bool> = (0..params.edge_count())
        .map(|e| {
            if current.is_up(e) {
                !rng.random_bool(params.p_down[e])
            } else {
                rng.random_bool(params.p_up[e])
            }
        })
        .collect();
    TopologyRealization::from_bits(&bits)
}
