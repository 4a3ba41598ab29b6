//! Finite-horizon LQG controllers over a lossy actuation channel.
//!
//! The delivery-optimized (FPD) controller runs a backward dynamic program
//! over every future delivery suffix: the cost-to-go at step n is a
//! quadratic x' S_n(prefix) x + s_n(prefix) indexed by the delivery bits
//! observed between the current sample and n. Conditional delivery
//! probabilities come from the joint prediction table supplied by the
//! network estimator, so arbitrary correlation structure is honored. The
//! comparative IID and ON controllers replace that table with an i.i.d.
//! Bernoulli or an always-delivered assumption, collapsing the suffix
//! tree to a single Riccati recursion.

use nalgebra::DMatrix;
use thiserror::Error;

use crate::estimator::PredictionTable;

/// Ledger sizes grow as 2^(N - k); this cap keeps them addressable.
pub const MAX_CONTROL_HORIZON: usize = 16;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("input-weight system Q2 + B'SB is numerically singular")]
    SingularSystem,
    #[error("prediction horizon {prediction} does not match remaining control horizon {control}")]
    HorizonMismatch { prediction: usize, control: usize },
    #[error("control horizon {horizon} exceeds the supported maximum of {max}")]
    HorizonTooLarge { horizon: usize, max: usize },
    #[error("history prefix has zero probability under the prediction")]
    ZeroProbabilityPrefix,
    #[error("prefix length {len} must be shorter than the horizon {horizon}")]
    PrefixTooLong { len: usize, horizon: usize },
    #[error("invalid plant: {0}")]
    InvalidPlant(String),
}

/// Plant dynamics, noise statistics, cost weights, and terminal horizon.
#[derive(Debug, Clone)]
pub struct PlantParams {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub r_w: DMatrix<f64>,
    pub r_0: DMatrix<f64>,
    pub q_terminal: DMatrix<f64>,
    pub q_state: DMatrix<f64>,
    pub q_input: DMatrix<f64>,
    pub horizon: usize,
}

impl PlantParams {
    pub fn state_dim(&self) -> usize {
        self.a.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.b.ncols()
    }

    pub fn validate(&self) -> Result<(), ControllerError> {
        let l = self.state_dim();
        let m = self.input_dim();
        if self.a.ncols() != l {
            return Err(ControllerError::InvalidPlant("A must be square".into()));
        }
        if self.b.nrows() != l {
            return Err(ControllerError::InvalidPlant(
                "B row count must match the state dimension".into(),
            ));
        }
        for (name, mat, dim) in [
            ("Rw", &self.r_w, l),
            ("R0", &self.r_0, l),
            ("Q0", &self.q_terminal, l),
            ("Q1", &self.q_state, l),
            ("Q2", &self.q_input, m),
        ] {
            if mat.nrows() != dim || mat.ncols() != dim {
                return Err(ControllerError::InvalidPlant(format!(
                    "{name} must be {dim}x{dim}"
                )));
            }
        }
        for (name, mat) in [("Rw", &self.r_w), ("R0", &self.r_0)] {
            if min_symmetric_eigenvalue(mat) < -1e-9 {
                return Err(ControllerError::InvalidPlant(format!(
                    "{name} must be positive semidefinite"
                )));
            }
        }
        for (name, mat) in [
            ("Q0", &self.q_terminal),
            ("Q1", &self.q_state),
            ("Q2", &self.q_input),
        ] {
            if min_symmetric_eigenvalue(mat) <= 0.0 {
                return Err(ControllerError::InvalidPlant(format!(
                    "{name} must be positive definite"
                )));
            }
        }
        if self.horizon == 0 {
            return Err(ControllerError::InvalidPlant(
                "horizon must be positive".into(),
            ));
        }
        Ok(())
    }
}

fn min_symmetric_eigenvalue(m: &DMatrix<f64>) -> f64 {
    let sym = symmetrize(m);
    sym.symmetric_eigen()
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |a, &b| a.min(b))
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Solves (Q2 + B'SB) X = rhs as a symmetric positive-definite system.
fn solve_gain_system(
    gram: &DMatrix<f64>,
    rhs: &DMatrix<f64>,
) -> Result<DMatrix<f64>, ControllerError> {
    let chol = symmetrize(gram)
        .cholesky()
        .ok_or(ControllerError::SingularSystem)?;
    Ok(chol.solve(rhs))
}

/// Value-function tables of the suffix-indexed backward recursion.
///
/// Level i holds one (S, s) pair per delivery prefix of length i observed
/// from `base_sample` on; prefix bits are packed with the earliest sample
/// at the most significant position, mirroring the prediction table.
#[derive(Debug, Clone)]
pub struct CostToGoLedger {
    pub base_sample: usize,
    pub matrices: Vec<Vec<DMatrix<f64>>>,
    pub scalars: Vec<Vec<f64>>,
}

impl CostToGoLedger {
    pub fn horizon(&self) -> usize {
        self.matrices.len() - 1
    }

    pub fn cost_matrix(&self, level: usize, prefix: usize) -> &DMatrix<f64> {
        &self.matrices[level][prefix]
    }

    pub fn cost_scalar(&self, level: usize, prefix: usize) -> f64 {
        self.scalars[level][prefix]
    }
}

/// Per-sample fixed gain sequence (the comparative controllers).
#[derive(Debug, Clone)]
pub struct GainSchedule {
    pub gains: Vec<DMatrix<f64>>,
}

impl GainSchedule {
    pub fn horizon(&self) -> usize {
        self.gains.len()
    }
}

/// A control policy queried by step and observed delivery prefix.
pub trait GainPolicy {
    /// Gain applied at step `n` given the deliveries at steps 0..n packed
    /// most-significant-first into `prefix`.
    fn gain(&self, n: usize, prefix: usize) -> DMatrix<f64>;
}

impl GainPolicy for GainSchedule {
    fn gain(&self, n: usize, _prefix: usize) -> DMatrix<f64> {
        self.gains[n].clone()
    }
}

/// History-dependent gains, one per (step, prefix). The FPD policy
/// materializes to this form.
#[derive(Debug, Clone)]
pub struct HistoryGains {
    pub levels: Vec<Vec<DMatrix<f64>>>,
}

impl GainPolicy for HistoryGains {
    fn gain(&self, n: usize, prefix: usize) -> DMatrix<f64> {
        self.levels[n][prefix].clone()
    }
}

/// Probability that the next delivery succeeds given an observed prefix:
/// the ratio of prediction-table block sums.
pub fn conditional_from_joint(
    table: &PredictionTable,
    prefix: &[bool],
) -> Result<f64, ControllerError> {
    if prefix.len() >= table.horizon {
        return Err(ControllerError::PrefixTooLong {
            len: prefix.len(),
            horizon: table.horizon,
        });
    }
    let mut idx = 0usize;
    for &b in prefix {
        idx = (idx << 1) | b as usize;
    }
    let block = table.horizon - prefix.len();
    let base = idx << block;
    let denom: f64 = table.joint[base..base + (1 << block)].iter().sum();
    if denom <= 0.0 {
        return Err(ControllerError::ZeroProbabilityPrefix);
    }
    let one_base = base + (1 << (block - 1));
    let numer: f64 = table.joint[one_base..base + (1 << block)].iter().sum();
    Ok(numer / denom)
}

/// Prefix-mass pyramid over the joint table: level i sums each block of
/// sequences sharing an i-bit prefix.
fn prefix_masses(table: &PredictionTable) -> Vec<Vec<f64>> {
    let h = table.horizon;
    let mut levels = vec![Vec::new(); h + 1];
    levels[h] = table.joint.clone();
    for i in (0..h).rev() {
        levels[i] = levels[i + 1]
            .chunks_exact(2)
            .map(|pair| pair[0] + pair[1])
            .collect();
    }
    levels
}

/// Conditional success probability at level i, prefix p, from the pyramid.
/// Zero-probability prefixes get 0: their branches carry no weight in any
/// expectation, but the recursion still fills them so indexing stays total.
fn conditional_up(masses: &[Vec<f64>], level: usize, prefix: usize) -> f64 {
    let denom = masses[level][prefix];
    if denom <= 0.0 {
        return 0.0;
    }
    masses[level + 1][(prefix << 1) | 1] / denom
}

fn check_fpd_inputs(plant: &PlantParams, table: &PredictionTable, remaining: usize)
    -> Result<(), ControllerError>
{
    plant.validate()?;
    if remaining > MAX_CONTROL_HORIZON {
        return Err(ControllerError::HorizonTooLarge {
            horizon: remaining,
            max: MAX_CONTROL_HORIZON,
        });
    }
    if table.horizon != remaining || remaining == 0 {
        return Err(ControllerError::HorizonMismatch {
            prediction: table.horizon,
            control: remaining,
        });
    }
    Ok(())
}

/// Backward recursion over all delivery suffixes of the remaining horizon.
fn fpd_ledger(
    plant: &PlantParams,
    table: &PredictionTable,
    base_sample: usize,
) -> Result<CostToGoLedger, ControllerError> {
    let h = table.horizon;
    let masses = prefix_masses(table);
    let mut matrices = vec![Vec::new(); h + 1];
    let mut scalars = vec![Vec::new(); h + 1];
    matrices[h] = vec![plant.q_terminal.clone(); 1 << h];
    scalars[h] = vec![0.0; 1 << h];

    let a_t = plant.a.transpose();
    for level in (0..h).rev() {
        let count = 1usize << level;
        let mut mats = Vec::with_capacity(count);
        let mut scls = Vec::with_capacity(count);
        for prefix in 0..count {
            let q1 = conditional_up(&masses, level, prefix);
            let s_up = &matrices[level + 1][(prefix << 1) | 1];
            let s_down = &matrices[level + 1][prefix << 1];
            let expected_s = s_up * q1 + s_down * (1.0 - q1);

            // Gain correction through the delivered branch only; the
            // lost branch contributes no input term.
            let gram = &plant.q_input + plant.b.transpose() * s_up * &plant.b;
            let cross = plant.b.transpose() * s_up * &plant.a;
            let solved = solve_gain_system(&gram, &cross)?;
            let correction = cross.transpose() * &solved;

            let s_now = symmetrize(
                &(&plant.q_state + &a_t * &expected_s * &plant.a - correction * q1),
            );
            let s_scalar = (&expected_s * &plant.r_w).trace()
                + q1 * scalars[level + 1][(prefix << 1) | 1]
                + (1.0 - q1) * scalars[level + 1][prefix << 1];
            mats.push(s_now);
            scls.push(s_scalar);
        }
        matrices[level] = mats;
        scalars[level] = scls;
    }
    Ok(CostToGoLedger {
        base_sample,
        matrices,
        scalars,
    })
}

fn gain_from(
    plant: &PlantParams,
    s_delivered: &DMatrix<f64>,
) -> Result<DMatrix<f64>, ControllerError> {
    let gram = &plant.q_input + plant.b.transpose() * s_delivered * &plant.b;
    let cross = plant.b.transpose() * s_delivered * &plant.a;
    solve_gain_system(&gram, &cross)
}

/// Optimal gain for the current sample `k`, plus the full cost-to-go
/// ledger. The prediction must cover exactly the remaining horizon and be
/// conditioned on the delivery history observed so far.
pub fn fpd_gain(
    plant: &PlantParams,
    k: usize,
    table: &PredictionTable,
) -> Result<(DMatrix<f64>, CostToGoLedger), ControllerError> {
    let remaining = plant.horizon.saturating_sub(k);
    check_fpd_inputs(plant, table, remaining)?;
    let ledger = fpd_ledger(plant, table, k)?;
    let gain = gain_from(plant, ledger.cost_matrix(1, 1))?;
    Ok((gain, ledger))
}

/// Expected cost of running the optimal suffix-indexed policy from sample
/// 0: tr(S_0 R_0) plus the accumulated noise terms.
pub fn fpd_expected_cost(
    plant: &PlantParams,
    table: &PredictionTable,
) -> Result<f64, ControllerError> {
    check_fpd_inputs(plant, table, plant.horizon)?;
    let ledger = fpd_ledger(plant, table, 0)?;
    Ok((ledger.cost_matrix(0, 0) * &plant.r_0).trace() + ledger.cost_scalar(0, 0))
}

/// Materializes the optimal history-dependent gains from a ledger built at
/// sample 0.
pub fn fpd_policy(
    plant: &PlantParams,
    ledger: &CostToGoLedger,
) -> Result<HistoryGains, ControllerError> {
    let h = ledger.horizon();
    let mut levels = Vec::with_capacity(h);
    for level in 0..h {
        let mut gains = Vec::with_capacity(1 << level);
        for prefix in 0..1usize << level {
            gains.push(gain_from(
                plant,
                ledger.cost_matrix(level + 1, (prefix << 1) | 1),
            )?);
        }
        levels.push(gains);
    }
    Ok(HistoryGains { levels })
}

/// Classical always-delivered finite-horizon LQR gains.
pub fn on_gains(plant: &PlantParams) -> Result<GainSchedule, ControllerError> {
    plant.validate()?;
    let mut s = plant.q_terminal.clone();
    let mut gains = vec![DMatrix::zeros(plant.input_dim(), plant.state_dim()); plant.horizon];
    for n in (0..plant.horizon).rev() {
        let gram = &plant.q_input + plant.b.transpose() * &s * &plant.b;
        let cross = plant.b.transpose() * &s * &plant.a;
        let gain = solve_gain_system(&gram, &cross)?;
        let correction = cross.transpose() * &gain;
        s = symmetrize(
            &(&plant.q_state + plant.a.transpose() * &s * &plant.a - correction),
        );
        gains[n] = gain;
    }
    Ok(GainSchedule { gains })
}

/// Gains assuming i.i.d. Bernoulli deliveries with success probability p.
pub fn iid_gains(plant: &PlantParams, p: f64) -> Result<GainSchedule, ControllerError> {
    plant.validate()?;
    if !(0.0..=1.0).contains(&p) {
        return Err(ControllerError::InvalidPlant(format!(
            "iid delivery probability {p} outside [0, 1]"
        )));
    }
    let mut s = plant.q_terminal.clone();
    let mut gains = vec![DMatrix::zeros(plant.input_dim(), plant.state_dim()); plant.horizon];
    for n in (0..plant.horizon).rev() {
        let gram = &plant.q_input + plant.b.transpose() * &s * &plant.b;
        let cross = plant.b.transpose() * &s * &plant.a;
        let gain = solve_gain_system(&gram, &cross)?;
        let correction = cross.transpose() * &gain;
        s = symmetrize(
            &(&plant.q_state + plant.a.transpose() * &s * &plant.a - correction * p),
        );
        gains[n] = gain;
    }
    Ok(GainSchedule { gains })
}

/// Expected cost of applying an arbitrary gain policy under the given
/// delivery distribution. No minimization happens: the supplied gains are
/// plugged into the quadratic cost-to-go recursion.
pub fn comparative_cost(
    plant: &PlantParams,
    policy: &dyn GainPolicy,
    table: &PredictionTable,
) -> Result<f64, ControllerError> {
    check_fpd_inputs(plant, table, plant.horizon)?;
    let h = table.horizon;
    let masses = prefix_masses(table);
    let a_t = plant.a.transpose();

    let mut mats = vec![plant.q_terminal.clone(); 1 << h];
    let mut scls = vec![0.0; 1 << h];
    for level in (0..h).rev() {
        let count = 1usize << level;
        let mut next_mats = Vec::with_capacity(count);
        let mut next_scls = Vec::with_capacity(count);
        for prefix in 0..count {
            let q1 = conditional_up(&masses, level, prefix);
            let s_up = &mats[(prefix << 1) | 1];
            let s_down = &mats[prefix << 1];
            let expected_s = s_up * q1 + s_down * (1.0 - q1);

            let gain = policy.gain(level, prefix);
            let gram = &plant.q_input + plant.b.transpose() * s_up * &plant.b;
            let cross_term = &a_t * s_up * &plant.b * &gain;
            let penalty = gain.transpose() * &gram * &gain - &cross_term - cross_term.transpose();

            let s_now = symmetrize(
                &(&plant.q_state + &a_t * &expected_s * &plant.a + penalty * q1),
            );
            let s_scalar = (&expected_s * &plant.r_w).trace()
                + q1 * scls[(prefix << 1) | 1]
                + (1.0 - q1) * scls[prefix << 1];
            next_mats.push(s_now);
            next_scls.push(s_scalar);
        }
        mats = next_mats;
        scls = next_scls;
    }
    Ok((&mats[0] * &plant.r_0).trace() + scls[0])
}
