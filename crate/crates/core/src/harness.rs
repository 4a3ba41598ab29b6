//! Closed-loop orchestration: ground-truth network evolution (stochastic
//! or scripted faults), the estimator in the loop over the ACK channel,
//! controller selection, Monte-Carlo aggregation, and report emission.
//!
//! Control attaches at `control_start`: the plant state is drawn from R0
//! at that sample and cost accrues from there to the terminal time, while
//! the network runs (and the estimator observes ACKs) from sample 0. With
//! `control_start = 0` this is the ordinary full-horizon setup.

use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{
    ControllerKind, FaultEvent, LinkModel, LoadedConfig, NetworkMode, ScenarioSection,
};
use crate::controller::{
    fpd_gain, iid_gains, on_gains, ControllerError, PlantParams,
};
use crate::estimator::{
    DeliveryEstimator, EstimatorError, GeihsEstimator, PredictionTable, SihsEstimator,
};
use crate::link::{sample_initial_realization, sample_next_realization};
use crate::mesh::{NetworkModel, TopologyRealization};
use crate::plant::{realized_cost, step, GaussianSampler, PlantError, Trajectory};
use crate::rng::{run_stream, StreamDomain};

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("scenario requires a plant section")]
    MissingPlant,
    #[error("scenario requires a scenario section")]
    MissingScenario,
    #[error("run {run}, sample {sample}: estimator failed: {source}")]
    EstimatorFailed {
        run: usize,
        sample: usize,
        source: EstimatorError,
    },
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error(transparent)]
    Links(#[from] crate::link::LinkModelError),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Plant(#[from] PlantError),
    #[error("operation requires scripted network mode")]
    RequiresScriptedMode,
    #[error("at least 2 runs required, got {0}")]
    TooFewRuns(usize),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A fully resolved simulation scenario.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub model: Arc<NetworkModel>,
    pub links: LinkModel,
    pub plant: Option<PlantParams>,
    pub controller: ControllerKind,
    pub network_mode: NetworkMode,
    /// Fault events with edges resolved to indices, sorted by sample.
    pub fault_script: Vec<(usize, usize, bool)>,
    pub control_start: usize,
    pub runs: usize,
    pub master_seed: u64,
    pub fpd_reuse: bool,
    pub fingerprint: String,
}

impl Scenario {
    pub fn from_config(config: &LoadedConfig) -> Result<Self, HarnessError> {
        let section = config.scenario.as_ref().ok_or(HarnessError::MissingScenario)?;
        Ok(Self::assemble(config, section))
    }

    /// Builds a scenario even when the config has no scenario section,
    /// using defaults (stochastic mode, no faults, control from sample 0).
    pub fn from_config_with_defaults(config: &LoadedConfig) -> Self {
        match &config.scenario {
            Some(section) => Self::assemble(config, section),
            None => Self::assemble(
                config,
                &ScenarioSection {
                    controller: ControllerKind::Fpd,
                    network_mode: NetworkMode::Stochastic,
                    fault_script: Vec::new(),
                    control_start: 0,
                    runs: 100,
                    master_seed: 0,
                    fpd_reuse: false,
                },
            ),
        }
    }

    fn assemble(config: &LoadedConfig, section: &ScenarioSection) -> Self {
        let mut script: Vec<(usize, usize, bool)> = section
            .fault_script
            .iter()
            .map(|FaultEvent { sample, edge, up }| {
                let idx = config
                    .model
                    .topology()
                    .edge_index(edge[0], edge[1])
                    .expect("config validation resolved fault edges");
                (*sample, idx, *up)
            })
            .collect();
        script.sort_by_key(|&(sample, _, _)| sample);
        Scenario {
            model: config.model.clone(),
            links: config.links.clone(),
            plant: config.plant.clone(),
            controller: section.controller,
            network_mode: section.network_mode,
            fault_script: script,
            control_start: section.control_start,
            runs: section.runs,
            master_seed: section.master_seed,
            fpd_reuse: section.fpd_reuse,
            fingerprint: config.fingerprint.clone(),
        }
    }

    pub fn plant(&self) -> Result<&PlantParams, HarnessError> {
        self.plant.as_ref().ok_or(HarnessError::MissingPlant)
    }

    /// The control window as a standalone plant: the backward recursions
    /// run over samples control_start..N re-indexed from zero.
    pub fn window_plant(&self) -> Result<PlantParams, HarnessError> {
        let plant = self.plant()?;
        let mut window = plant.clone();
        window.horizon = plant.horizon - self.control_start;
        Ok(window)
    }

    /// Scripted ground-truth realization at each sample: all links start
    /// up, then fault events override edge states from their sample on.
    pub fn scripted_masks(&self, samples: usize) -> Vec<TopologyRealization> {
        let mut current = TopologyRealization::all_up(self.model.edge_count());
        let mut masks = Vec::with_capacity(samples);
        let mut next_event = 0usize;
        for k in 0..samples {
            while next_event < self.fault_script.len() && self.fault_script[next_event].0 <= k {
                let (_, edge, up) = self.fault_script[next_event];
                current = current.with_edge(edge, up);
                next_event += 1;
            }
            masks.push(current);
        }
        masks
    }

    fn build_estimator(&self) -> Result<Box<dyn DeliveryEstimator>, HarnessError> {
        Ok(match &self.links {
            LinkModel::Static(p) => Box::new(SihsEstimator::new(self.model.clone(), p)?),
            LinkModel::GilbertElliott(ge) => {
                Box::new(GeihsEstimator::new(self.model.clone(), ge)?)
            }
            LinkModel::Frozen(prior) => Box::new(GeihsEstimator::with_identity_kernel(
                self.model.clone(),
                prior,
            )?),
        })
    }

    /// A-priori end-to-end delivery probability averaged over the control
    /// window, used as the IID controller's Bernoulli parameter.
    pub fn iid_delivery_probability(&self) -> Result<f64, HarnessError> {
        let plant = self.plant()?;
        let prior = crate::link::prior_belief(&self.links.prior_params().p)?;
        let total: f64 = (self.control_start..plant.horizon)
            .map(|k| end_to_end_delivery_probability(&self.model, &prior, k))
            .sum();
        Ok(total / (plant.horizon - self.control_start) as f64)
    }
}

/// Probability that a packet sent at `sample` is delivered when the
/// realization is distributed according to `belief`.
pub fn end_to_end_delivery_probability(
    model: &NetworkModel,
    belief: &[f64],
    sample: usize,
) -> f64 {
    belief
        .iter()
        .enumerate()
        .filter(|&(_, &p)| p > 0.0)
        .map(|(mask, &p)| {
            let real = TopologyRealization::from_mask(mask as u32, model.edge_count());
            if model.delivered(real, sample) {
                p
            } else {
                0.0
            }
        })
        .sum()
}

/// Ground-truth realization sequence for one run.
enum GroundTruth {
    Scripted(Vec<TopologyRealization>),
    Stochastic {
        current: TopologyRealization,
        links: LinkModel,
        rng: Box<rand_chacha::ChaCha8Rng>,
    },
}

impl GroundTruth {
    fn for_run(scenario: &Scenario, samples: usize, run_index: usize) -> GroundTruth {
        match scenario.network_mode {
            NetworkMode::Scripted => GroundTruth::Scripted(scenario.scripted_masks(samples)),
            NetworkMode::Stochastic => {
                let mut rng = run_stream(
                    scenario.master_seed,
                    run_index as u64,
                    StreamDomain::NetworkEvolution,
                );
                let prior = scenario.links.prior_params();
                let current = sample_initial_realization(&prior.p, &mut rng);
                GroundTruth::Stochastic {
                    current,
                    links: scenario.links.clone(),
                    rng: Box::new(rng),
                }
            }
        }
    }

    /// Realization governing delivery at `sample`; must be called with
    /// consecutive samples starting from zero.
    fn mask_at(&mut self, sample: usize) -> TopologyRealization {
        match self {
            GroundTruth::Scripted(masks) => masks[sample],
            GroundTruth::Stochastic {
                current,
                links,
                rng,
            } => {
                if sample > 0 {
                    if let LinkModel::GilbertElliott(ge) = links {
                        *current = sample_next_realization(ge, *current, rng.as_mut());
                    }
                    // Static and frozen links never change.
                }
                *current
            }
        }
    }
}

/// Per-sample gain provider inside one closed-loop run.
struct FpdDriver {
    estimator: Box<dyn DeliveryEstimator>,
    window_plant: PlantParams,
    attach: usize,
    reuse: bool,
    cached: Option<CachedLedger>,
}

struct CachedLedger {
    policy: crate::controller::HistoryGains,
    built_at_step: usize,
    prefix: usize,
}

impl FpdDriver {
    fn gain_at(&mut self, sample: usize, run: usize) -> Result<DMatrix<f64>, HarnessError> {
        let window_step = sample - self.attach;
        let remaining = self.window_plant.horizon - window_step;
        if self.reuse {
            if let Some(cached) = &self.cached {
                let level = window_step - cached.built_at_step;
                if level < cached.policy.levels.len() {
                    return Ok(cached.policy.levels[level][cached.prefix].clone());
                }
            }
        }
        let table = self
            .estimator
            .predict(remaining)
            .map_err(|source| HarnessError::EstimatorFailed {
                run,
                sample,
                source,
            })?;
        let (gain, ledger) = fpd_gain(&self.window_plant, window_step, &table)?;
        if self.reuse {
            let policy = crate::controller::fpd_policy(&self.window_plant, &ledger)?;
            self.cached = Some(CachedLedger {
                policy,
                built_at_step: window_step,
                prefix: 0,
            });
        }
        Ok(gain)
    }

    fn observe(&mut self, sample: usize, delivered: bool, run: usize) -> Result<(), HarnessError> {
        self.estimator
            .update(delivered)
            .map_err(|source| HarnessError::EstimatorFailed {
                run,
                sample,
                source,
            })?;
        if let Some(cached) = &mut self.cached {
            // Z == 1 means the observation carried no information, so the
            // ledger built earlier still matches the fresh prediction.
            let informative = match self.estimator.last_z() {
                Some(z) => (z - 1.0).abs() > 1e-12,
                None => true,
            };
            if informative || sample < self.attach {
                self.cached = None;
            } else {
                cached.prefix = (cached.prefix << 1) | delivered as usize;
            }
        }
        Ok(())
    }
}

/// Result of one closed-loop run.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub trajectory: Trajectory,
    pub cost: f64,
}

/// Runs one full closed loop: the estimator observes every ACK from
/// sample 0; the plant attaches at `control_start` with state drawn from
/// R0; the chosen controller supplies inputs from there on.
pub fn run_closed_loop(
    scenario: &Scenario,
    kind: ControllerKind,
    run_index: usize,
) -> Result<RunOutcome, HarnessError> {
    let plant = scenario.plant()?.clone();
    let n = plant.horizon;
    let attach = scenario.control_start;
    let window = scenario.window_plant()?;

    let fixed_gains = match kind {
        ControllerKind::On => Some(on_gains(&window)?.gains),
        ControllerKind::Iid => {
            Some(iid_gains(&window, scenario.iid_delivery_probability()?)?.gains)
        }
        ControllerKind::Fpd => None,
    };
    let mut fpd = match kind {
        ControllerKind::Fpd => Some(FpdDriver {
            estimator: scenario.build_estimator()?,
            window_plant: window,
            attach,
            reuse: scenario.fpd_reuse,
            cached: None,
        }),
        _ => None,
    };

    let mut truth = GroundTruth::for_run(scenario, n, run_index);
    let mut plant_rng = run_stream(
        scenario.master_seed,
        run_index as u64,
        StreamDomain::PlantNoise,
    );
    let x0_sampler = GaussianSampler::new(&plant.r_0)?;
    let noise_sampler = GaussianSampler::new(&plant.r_w)?;

    let ell = plant.state_dim();
    let m = plant.input_dim();
    let mut x = DVector::zeros(ell);
    let mut states = Vec::with_capacity(n + 1);
    let mut inputs = Vec::with_capacity(n);
    let mut deliveries = Vec::with_capacity(n);

    for k in 0..n {
        if k == attach {
            x = x0_sampler.sample(&mut plant_rng);
        }
        states.push(x.clone());
        let u = if k < attach {
            DVector::zeros(m)
        } else {
            let gain = match (&mut fpd, &fixed_gains) {
                (Some(driver), _) => driver.gain_at(k, run_index)?,
                (None, Some(gains)) => gains[k - attach].clone(),
                _ => unreachable!(),
            };
            -(&gain * &x)
        };
        let mask = truth.mask_at(k);
        let nu = scenario.model.delivered(mask, k);
        if k >= attach {
            let w = noise_sampler.sample(&mut plant_rng);
            x = step(&plant.a, &plant.b, &x, &u, nu, &w);
        }
        if let Some(driver) = &mut fpd {
            driver.observe(k, nu, run_index)?;
        }
        inputs.push(u);
        deliveries.push(nu);
    }
    states.push(x);

    let trajectory = Trajectory {
        states,
        inputs,
        deliveries,
    };
    let cost = realized_cost(
        &trajectory,
        &plant.q_terminal,
        &plant.q_state,
        &plant.q_input,
    );
    Ok(RunOutcome { trajectory, cost })
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ControllerStats {
    pub controller: String,
    pub mean_cost: f64,
    pub std_error: f64,
    pub runs: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AggregateReport {
    pub fingerprint: String,
    pub master_seed: u64,
    pub runs: usize,
    pub controllers: Vec<ControllerStats>,
}

fn stats_from_costs(kind: ControllerKind, costs: &[f64]) -> ControllerStats {
    let runs = costs.len();
    let mean = costs.iter().sum::<f64>() / runs as f64;
    let var = costs.iter().map(|c| (c - mean).powi(2)).sum::<f64>() / (runs as f64 - 1.0);
    ControllerStats {
        controller: kind.name().to_string(),
        mean_cost: mean,
        std_error: (var / runs as f64).sqrt(),
        runs,
    }
}

/// Scripted mode: deliveries are deterministic, so the gain sequence a
/// controller actually applies can be derived once and reused across runs.
pub fn scripted_gain_schedule(
    scenario: &Scenario,
    kind: ControllerKind,
) -> Result<Vec<DMatrix<f64>>, HarnessError> {
    let plant = scenario.plant()?;
    let n = plant.horizon;
    let attach = scenario.control_start;
    let window = scenario.window_plant()?;
    match kind {
        ControllerKind::On => Ok(on_gains(&window)?.gains),
        ControllerKind::Iid => Ok(iid_gains(&window, scenario.iid_delivery_probability()?)?.gains),
        ControllerKind::Fpd => {
            let masks = scenario.scripted_masks(n);
            let mut driver = FpdDriver {
                estimator: scenario.build_estimator()?,
                window_plant: window,
                attach,
                reuse: scenario.fpd_reuse,
                cached: None,
            };
            let mut gains = Vec::with_capacity(n - attach);
            for (k, &mask) in masks.iter().enumerate() {
                if k >= attach {
                    gains.push(driver.gain_at(k, 0)?);
                }
                let nu = scenario.model.delivered(mask, k);
                driver.observe(k, nu, 0)?;
            }
            Ok(gains)
        }
    }
}

/// Monte-Carlo evaluation over the scenario's run count with common random
/// numbers: every controller sees identical per-run noise streams.
pub fn monte_carlo(
    scenario: &Scenario,
    kinds: &[ControllerKind],
) -> Result<AggregateReport, HarnessError> {
    let runs = scenario.runs;
    if runs < 2 {
        return Err(HarnessError::TooFewRuns(runs));
    }
    let plant = scenario.plant()?;

    let mut controllers = Vec::with_capacity(kinds.len());
    match scenario.network_mode {
        NetworkMode::Scripted => {
            // Deliveries don't depend on the run; precompute them and the
            // gain sequences, then each run only draws plant noise.
            let n = plant.horizon;
            let attach = scenario.control_start;
            let masks = scenario.scripted_masks(n);
            let nus: Vec<bool> = masks
                .iter()
                .enumerate()
                .map(|(k, &mask)| scenario.model.delivered(mask, k))
                .collect();
            for &kind in kinds {
                let gains = scripted_gain_schedule(scenario, kind)?;
                let costs: Vec<f64> = (0..runs)
                    .into_par_iter()
                    .map(|run| {
                        let mut rng = run_stream(
                            scenario.master_seed,
                            run as u64,
                            StreamDomain::PlantNoise,
                        );
                        let x0_sampler = GaussianSampler::new(&plant.r_0).expect("validated R0");
                        let w_sampler = GaussianSampler::new(&plant.r_w).expect("validated Rw");
                        let mut x = x0_sampler.sample(&mut rng);
                        let mut cost = 0.0;
                        for k in attach..n {
                            let u = -(&gains[k - attach] * &x);
                            cost += (x.transpose() * &plant.q_state * &x)[(0, 0)];
                            if nus[k] {
                                cost += (u.transpose() * &plant.q_input * &u)[(0, 0)];
                            }
                            let w = w_sampler.sample(&mut rng);
                            x = step(&plant.a, &plant.b, &x, &u, nus[k], &w);
                        }
                        cost + (x.transpose() * &plant.q_terminal * &x)[(0, 0)]
                    })
                    .collect();
                controllers.push(stats_from_costs(kind, &costs));
            }
        }
        NetworkMode::Stochastic => {
            for &kind in kinds {
                let costs: Vec<f64> = (0..runs)
                    .into_par_iter()
                    .map(|run| run_closed_loop(scenario, kind, run).map(|o| o.cost))
                    .collect::<Result<_, _>>()?;
                controllers.push(stats_from_costs(kind, &costs));
            }
        }
    }

    Ok(AggregateReport {
        fingerprint: scenario.fingerprint.clone(),
        master_seed: scenario.master_seed,
        runs,
        controllers,
    })
}

/// One row of the deterministic estimator trace.
#[derive(Debug, Clone)]
pub struct TraceRow {
    pub sample: usize,
    pub marginals: Vec<f64>,
}

/// Marginal delivery predictions over a scripted scenario: row k holds the
/// H-step-ahead marginals conditioned on deliveries through sample k-1.
pub fn run_estimator_trace(
    scenario: &Scenario,
    horizon: usize,
    samples: usize,
) -> Result<Vec<TraceRow>, HarnessError> {
    if scenario.network_mode != NetworkMode::Scripted {
        return Err(HarnessError::RequiresScriptedMode);
    }
    let masks = scenario.scripted_masks(samples);
    let mut estimator = scenario.build_estimator()?;
    let mut rows = Vec::with_capacity(samples);
    for (k, &mask) in masks.iter().enumerate() {
        let table = estimator.predict(horizon)?;
        rows.push(TraceRow {
            sample: k,
            marginals: table.marginals(),
        });
        let nu = scenario.model.delivered(mask, k);
        estimator
            .update(nu)
            .map_err(|source| HarnessError::EstimatorFailed {
                run: 0,
                sample: k,
                source,
            })?;
    }
    Ok(rows)
}

/// Full joint tables per sample, keyed by delivery bit-string.
pub fn run_joint_trace(
    scenario: &Scenario,
    horizon: usize,
    samples: usize,
) -> Result<Vec<(usize, PredictionTable)>, HarnessError> {
    if scenario.network_mode != NetworkMode::Scripted {
        return Err(HarnessError::RequiresScriptedMode);
    }
    let masks = scenario.scripted_masks(samples);
    let mut estimator = scenario.build_estimator()?;
    let mut rows = Vec::with_capacity(samples);
    for (k, &mask) in masks.iter().enumerate() {
        rows.push((k, estimator.predict(horizon)?));
        let nu = scenario.model.delivered(mask, k);
        estimator
            .update(nu)
            .map_err(|source| HarnessError::EstimatorFailed {
                run: 0,
                sample: k,
                source,
            })?;
    }
    Ok(rows)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

/// Serializes a report; CSV has one row per controller, JSON carries the
/// scenario fingerprint for reproducibility checks.
pub fn render_report(report: &AggregateReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            let mut text = serde_json::to_string_pretty(report).expect("report serializes");
            text.push('\n');
            text
        }
        ReportFormat::Csv => {
            let mut text = String::from("controller,mean_cost,std_error,runs\n");
            for stats in &report.controllers {
                text.push_str(&format!(
                    "{},{},{},{}\n",
                    stats.controller, stats.mean_cost, stats.std_error, stats.runs
                ));
            }
            text
        }
    }
}

pub fn emit_report(
    report: &AggregateReport,
    format: ReportFormat,
    path: &Path,
) -> Result<(), HarnessError> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(render_report(report, format).as_bytes())?;
    Ok(())
}
