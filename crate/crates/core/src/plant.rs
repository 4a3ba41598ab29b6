//! Linear plant under lossy actuation: state stepping, Gaussian sampling,
//! and realized-cost evaluation for Monte-Carlo runs.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, RngExt};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum PlantError {
    #[error("covariance matrix is not positive semidefinite (min eigenvalue {min_eig})")]
    NonPsdCovariance { min_eig: f64 },
    #[error("covariance matrix must be square")]
    NonSquareCovariance,
}

/// One sample step: x' = A x + nu * B u + w. A dropped packet leaves the
/// input out entirely.
pub fn step(
    a: &DMatrix<f64>,
    b: &DMatrix<f64>,
    x: &DVector<f64>,
    u: &DVector<f64>,
    delivered: bool,
    w: &DVector<f64>,
) -> DVector<f64> {
    let mut next = a * x + w;
    if delivered {
        next += b * u;
    }
    next
}

/// Draws zero-mean Gaussian vectors with a fixed covariance via an
/// eigenvalue factorization (valid for any PSD matrix, including singular
/// ones). Standard normals come from a Box-Muller transform over the
/// caller's stream, keeping draws portable and documented.
#[derive(Debug, Clone)]
pub struct GaussianSampler {
    transform: DMatrix<f64>,
    dim: usize,
}

impl GaussianSampler {
    pub fn new(covariance: &DMatrix<f64>) -> Result<Self, PlantError> {
        if covariance.nrows() != covariance.ncols() {
            return Err(PlantError::NonSquareCovariance);
        }
        let dim = covariance.nrows();
        let sym = (covariance + covariance.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let scale = eig
            .eigenvalues
            .iter()
            .fold(1.0_f64, |a, &b| a.max(b.abs()));
        let min_eig = eig.eigenvalues.iter().fold(f64::INFINITY, |a, &b| a.min(b));
        if min_eig < -1e-9 * scale {
            return Err(PlantError::NonPsdCovariance { min_eig });
        }
        let sqrt = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
        Ok(GaussianSampler {
            transform: &eig.eigenvectors * sqrt,
            dim,
        })
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let z = DVector::from_fn(self.dim, |_, _| standard_normal(rng));
        &self.transform * z
    }
}

/// One standard-normal draw via Box-Muller.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u1: f64 = 1.0 - rng.random::<f64>();
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

pub fn sample_initial_state<R: Rng + ?Sized>(
    r_0: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>, PlantError> {
    Ok(GaussianSampler::new(r_0)?.sample(rng))
}

pub fn sample_noise<R: Rng + ?Sized>(
    r_w: &DMatrix<f64>,
    rng: &mut R,
) -> Result<DVector<f64>, PlantError> {
    Ok(GaussianSampler::new(r_w)?.sample(rng))
}

/// Full closed-loop record of one run.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub inputs: Vec<DVector<f64>>,
    pub deliveries: Vec<bool>,
}

impl Trajectory {
    pub fn horizon(&self) -> usize {
        self.inputs.len()
    }
}

/// The quadratic cost of a completed trajectory. The input penalty is
/// gated by the delivery bit: dropped packets incur no input cost.
pub fn realized_cost(
    trajectory: &Trajectory,
    q_terminal: &DMatrix<f64>,
    q_state: &DMatrix<f64>,
    q_input: &DMatrix<f64>,
) -> f64 {
    let n = trajectory.horizon();
    debug_assert_eq!(trajectory.states.len(), n + 1);
    debug_assert_eq!(trajectory.deliveries.len(), n);
    let mut cost = 0.0;
    for k in 0..n {
        let x = &trajectory.states[k];
        cost += (x.transpose() * q_state * x)[(0, 0)];
        if trajectory.deliveries[k] {
            let u = &trajectory.inputs[k];
            cost += (u.transpose() * q_input * u)[(0, 0)];
        }
    }
    let x_n = &trajectory.states[n];
    cost + (x_n.transpose() * q_terminal * x_n)[(0, 0)]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{run_stream, StreamDomain};
    use nalgebra::{dmatrix, dvector};

    #[test]
    fn dropped_packet_leaves_state() {
        let a = DMatrix::identity(2, 2);
        let b = DMatrix::identity(2, 2);
        let x = dvector![1.0, -2.0];
        let u = dvector![5.0, 5.0];
        let w = dvector![0.0, 0.0];
        assert_eq!(step(&a, &b, &x, &u, false, &w), x);
    }

    #[test]
    fn pure_input_step() {
        let a = DMatrix::zeros(2, 2);
        let b = DMatrix::identity(2, 2);
        let x = dvector![1.0, -2.0];
        let u = dvector![5.0, 6.0];
        let w = dvector![0.0, 0.0];
        assert_eq!(step(&a, &b, &x, &u, true, &w), u);
    }

    #[test]
    fn flip_and_scale_plant_step() {
        let a = dmatrix![0.0, 1.5; 1.5, 0.0];
        let b = dmatrix![5.0, 0.0; 0.0, 0.2];
        let x = dvector![1.0, 2.0];
        let u = dvector![0.0, 0.0];
        let w = dvector![0.0, 0.0];
        let next = step(&a, &b, &x, &u, true, &w);
        assert_eq!(next, dvector![3.0, 1.5]);
    }

    #[test]
    fn zero_covariance_always_zero() {
        let mut rng = run_stream(1, 0, StreamDomain::PlantNoise);
        let sampler = GaussianSampler::new(&DMatrix::zeros(3, 3)).unwrap();
        for _ in 0..10 {
            assert_eq!(sampler.sample(&mut rng), dvector![0.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn non_psd_covariance_rejected() {
        let cov = dmatrix![1.0, 0.0; 0.0, -0.5];
        assert!(matches!(
            GaussianSampler::new(&cov),
            Err(PlantError::NonPsdCovariance { .. })
        ));
    }

    #[test]
    fn empirical_covariance_matches_identity() {
        let mut rng = run_stream(9, 0, StreamDomain::PlantNoise);
        let sampler = GaussianSampler::new(&DMatrix::identity(2, 2)).unwrap();
        let n = 100_000;
        let mut sums = [0.0; 2];
        let mut sq = [[0.0; 2]; 2];
        for _ in 0..n {
            let v = sampler.sample(&mut rng);
            for i in 0..2 {
                sums[i] += v[i];
                for (j, slot) in sq[i].iter_mut().enumerate() {
                    *slot += v[i] * v[j];
                }
            }
        }
        // Var(x_i x_j) for unit normals: 2 on the diagonal, 1 off it.
        for i in 0..2 {
            assert!((sums[i] / n as f64).abs() < 3.0 / (n as f64).sqrt());
            for (j, &entry) in sq[i].iter().enumerate() {
                let want = if i == j { 1.0 } else { 0.0 };
                let var = if i == j { 2.0 } else { 1.0 };
                let se = (var / n as f64).sqrt();
                let got = entry / n as f64;
                assert!((got - want).abs() <= 3.0 * se, "cov[{i}][{j}] = {got}");
            }
        }
    }

    #[test]
    fn scaled_covariance_variance() {
        let mut rng = run_stream(2, 1, StreamDomain::PlantNoise);
        let sampler = GaussianSampler::new(&(DMatrix::identity(2, 2) * 10.0)).unwrap();
        let n = 100_000;
        let mut sq = [0.0; 2];
        for _ in 0..n {
            let v = sampler.sample(&mut rng);
            sq[0] += v[0] * v[0];
            sq[1] += v[1] * v[1];
        }
        for s in sq {
            let got = s / n as f64;
            let se = 10.0 * (2.0 / n as f64).sqrt();
            assert!((got - 10.0).abs() <= 3.0 * se, "variance {got}");
        }
    }

    #[test]
    fn cost_examples() {
        let q = DMatrix::identity(1, 1);
        let zero_traj = Trajectory {
            states: vec![dvector![0.0]; 4],
            inputs: vec![dvector![0.0]; 3],
            deliveries: vec![true; 3],
        };
        assert_eq!(realized_cost(&zero_traj, &q, &q, &q), 0.0);

        // x0 = 1, u0 = 1, delivered, no noise: x1 = 2, cost = 1 + 1 + 4.
        let traj = Trajectory {
            states: vec![dvector![1.0], dvector![2.0]],
            inputs: vec![dvector![1.0]],
            deliveries: vec![true],
        };
        assert_eq!(realized_cost(&traj, &q, &q, &q), 6.0);
    }

    #[test]
    fn all_losses_ignore_inputs() {
        let q = DMatrix::identity(1, 1);
        let mk = |u: f64| Trajectory {
            states: vec![dvector![1.0], dvector![1.0], dvector![1.0]],
            inputs: vec![dvector![u], dvector![u * 3.0]],
            deliveries: vec![false, false],
        };
        assert_eq!(
            realized_cost(&mk(0.0), &q, &q, &q),
            realized_cost(&mk(99.0), &q, &q, &q)
        );
    }

    #[test]
    fn cost_nonnegative_for_psd_weights() {
        let mut rng = run_stream(3, 7, StreamDomain::PlantNoise);
        let sampler = GaussianSampler::new(&DMatrix::identity(2, 2)).unwrap();
        let q = dmatrix![2.0, 0.5; 0.5, 1.0];
        for _ in 0..50 {
            let traj = Trajectory {
                states: (0..4).map(|_| sampler.sample(&mut rng)).collect(),
                inputs: (0..3).map(|_| sampler.sample(&mut rng)).collect(),
                deliveries: vec![true, false, true],
            };
            assert!(realized_cost(&traj, &q, &q, &q) >= 0.0);
        }
    }

    #[test]
    fn sampling_is_deterministic_per_stream() {
        let sampler = GaussianSampler::new(&DMatrix::identity(2, 2)).unwrap();
        let mut a = run_stream(11, 4, StreamDomain::PlantNoise);
        let mut b = run_stream(11, 4, StreamDomain::PlantNoise);
        for _ in 0..20 {
            assert_eq!(sampler.sample(&mut a), sampler.sample(&mut b));
        }
    }
}
