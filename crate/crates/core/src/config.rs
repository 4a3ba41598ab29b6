//! The canonical JSON configuration format shared by every module and the
//! CLI: topology, schedule, timing, link parameters, plant parameters, and
//! scenario settings, all in one file.

use std::path::Path;
use std::sync::Arc;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::controller::PlantParams;
use crate::link::{GeParams, LinkModelError, StaticLinkParams};
use crate::mesh::{Edge, NetworkModel, RoutingTopology, Schedule, TimingConfig, ValidationError};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config: {0}")]
    Io(#[from] std::io::Error),
    #[error("cannot parse config: {0}")]
    Parse(#[from] serde_json::Error),
    #[error(transparent)]
    Network(#[from] ValidationError),
    #[error(transparent)]
    Links(#[from] LinkModelError),
    #[error("invalid plant: {0}")]
    Plant(String),
    #[error("invalid scenario: {0}")]
    Scenario(String),
    #[error("links section must contain exactly one of \"static_p\" or \"ge\"")]
    AmbiguousLinkModel,
    #[error("identity_kernel requires a \"prior_p\" vector or \"ge\" parameters")]
    MissingIdentityPrior,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigFile {
    pub nodes: usize,
    pub edges: Vec<[usize; 2]>,
    pub source: usize,
    pub sink: usize,
    pub schedule: Vec<Vec<[usize; 2]>>,
    pub slots_per_sample: u64,
    pub phase: u64,
    pub deadline: u64,
    pub links: LinksSection,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub plant: Option<PlantSection>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub scenario: Option<ScenarioSection>,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct LinksSection {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub static_p: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub ge: Option<GeSection>,
    #[serde(default)]
    pub identity_kernel: bool,
    /// Explicit prior when the identity kernel is used without meaningful
    /// Gilbert-Elliott parameters.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub prior_p: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GeSection {
    pub p_up: Vec<f64>,
    pub p_down: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlantSection {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "B")]
    pub b: Vec<Vec<f64>>,
    #[serde(rename = "Rw")]
    pub r_w: Vec<Vec<f64>>,
    #[serde(rename = "R0")]
    pub r_0: Vec<Vec<f64>>,
    #[serde(rename = "Q0")]
    pub q0: Vec<Vec<f64>>,
    #[serde(rename = "Q1")]
    pub q1: Vec<Vec<f64>>,
    #[serde(rename = "Q2")]
    pub q2: Vec<Vec<f64>>,
    #[serde(rename = "N")]
    pub horizon: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    Fpd,
    Iid,
    On,
}

impl ControllerKind {
    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Fpd => "fpd",
            ControllerKind::Iid => "iid",
            ControllerKind::On => "on",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NetworkMode {
    Stochastic,
    Scripted,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FaultEvent {
    pub sample: usize,
    pub edge: [usize; 2],
    pub up: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSection {
    #[serde(default = "default_controller")]
    pub controller: ControllerKind,
    pub network_mode: NetworkMode,
    #[serde(default)]
    pub fault_script: Vec<FaultEvent>,
    #[serde(default)]
    pub control_start: usize,
    #[serde(default = "default_runs")]
    pub runs: usize,
    #[serde(default)]
    pub master_seed: u64,
    /// Reuse the FPD ledger across samples when the static-model estimator
    /// reports no new information (Z = 1).
    #[serde(default)]
    pub fpd_reuse: bool,
}

fn default_controller() -> ControllerKind {
    ControllerKind::Fpd
}

fn default_runs() -> usize {
    100
}

/// The link model a config selects.
#[derive(Debug, Clone)]
pub enum LinkModel {
    Static(StaticLinkParams),
    GilbertElliott(GeParams),
    /// Frozen network: identity transition kernel with an explicit prior.
    Frozen(StaticLinkParams),
}

impl LinkModel {
    /// Per-link prior up probabilities (stationary for Gilbert-Elliott).
    pub fn prior_params(&self) -> StaticLinkParams {
        match self {
            LinkModel::Static(p) | LinkModel::Frozen(p) => p.clone(),
            LinkModel::GilbertElliott(ge) => ge.stationary(),
        }
    }
}

/// A fully validated configuration.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub model: Arc<NetworkModel>,
    pub links: LinkModel,
    pub plant: Option<PlantParams>,
    pub scenario: Option<ScenarioSection>,
    /// Stable hash of the raw config value, for report provenance.
    pub fingerprint: String,
}

fn matrix_from_rows(name: &str, rows: &[Vec<f64>]) -> Result<DMatrix<f64>, ConfigError> {
    let nrows = rows.len();
    if nrows == 0 {
        return Err(ConfigError::Plant(format!("{name} is empty")));
    }
    let ncols = rows[0].len();
    if ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(ConfigError::Plant(format!("{name} rows must be equal length")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j]))
}

/// FNV-1a over the canonical serialization; stable across runs and
/// sensitive to every field.
pub fn fingerprint(file: &ConfigFile) -> String {
    let canonical = serde_json::to_string(file).expect("config serializes");
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for byte in canonical.as_bytes() {
        hash ^= *byte as u64;
        hash = hash.wrapping_mul(0x100_0000_01b3);
    }
    format!("{hash:016x}")
}

impl ConfigFile {
    pub fn from_path(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn load(&self) -> Result<LoadedConfig, ConfigError> {
        let topology = RoutingTopology {
            node_count: self.nodes,
            edges: self.edges.iter().map(|&[f, t]| Edge::new(f, t)).collect(),
            source: self.source,
            sink: self.sink,
        };
        let mut slots = Vec::with_capacity(self.schedule.len());
        for (slot_idx, slot) in self.schedule.iter().enumerate() {
            let mut resolved = Vec::with_capacity(slot.len());
            for &[f, t] in slot {
                let idx = topology.edge_index(f, t).ok_or(
                    ValidationError::UnknownScheduledLink {
                        slot: slot_idx,
                        from: f,
                        to: t,
                    },
                )?;
                resolved.push(idx);
            }
            slots.push(resolved);
        }
        let schedule = Schedule { slots };
        let timing = TimingConfig {
            slots_per_sample: self.slots_per_sample,
            phase: self.phase,
            deadline: self.deadline,
        };
        let model = Arc::new(NetworkModel::new(topology, schedule, timing)?);
        let e = model.edge_count();

        let links = match (&self.links.static_p, &self.links.ge) {
            (Some(p), None) => {
                let params = StaticLinkParams::new(p.clone())?;
                require_len(params.edge_count(), e)?;
                LinkModel::Static(params)
            }
            (None, Some(ge)) => {
                let params = GeParams::new(ge.p_up.clone(), ge.p_down.clone())?;
                require_len(params.edge_count(), e)?;
                if self.links.identity_kernel {
                    let prior = match &self.links.prior_p {
                        Some(p) => StaticLinkParams::new(p.clone())?,
                        None => params.stationary(),
                    };
                    require_len(prior.edge_count(), e)?;
                    LinkModel::Frozen(prior)
                } else {
                    LinkModel::GilbertElliott(params)
                }
            }
            (None, None) if self.links.identity_kernel => {
                let prior = self
                    .links
                    .prior_p
                    .clone()
                    .ok_or(ConfigError::MissingIdentityPrior)?;
                let prior = StaticLinkParams::new(prior)?;
                require_len(prior.edge_count(), e)?;
                LinkModel::Frozen(prior)
            }
            _ => return Err(ConfigError::AmbiguousLinkModel),
        };

        let plant = match &self.plant {
            None => None,
            Some(section) => {
                let params = PlantParams {
                    a: matrix_from_rows("A", &section.a)?,
                    b: matrix_from_rows("B", &section.b)?,
                    r_w: matrix_from_rows("Rw", &section.r_w)?,
                    r_0: matrix_from_rows("R0", &section.r_0)?,
                    q_terminal: matrix_from_rows("Q0", &section.q0)?,
                    q_state: matrix_from_rows("Q1", &section.q1)?,
                    q_input: matrix_from_rows("Q2", &section.q2)?,
                    horizon: section.horizon,
                };
                params
                    .validate()
                    .map_err(|e| ConfigError::Plant(e.to_string()))?;
                Some(params)
            }
        };

        if let Some(scenario) = &self.scenario {
            if !scenario.fault_script.is_empty()
                && scenario.network_mode != NetworkMode::Scripted
            {
                return Err(ConfigError::Scenario(
                    "fault_script requires scripted network mode".into(),
                ));
            }
            for event in &scenario.fault_script {
                if model
                    .topology()
                    .edge_index(event.edge[0], event.edge[1])
                    .is_none()
                {
                    return Err(ConfigError::Scenario(format!(
                        "fault script references unknown edge ({}, {})",
                        event.edge[0], event.edge[1]
                    )));
                }
            }
            if let Some(plant) = &plant {
                if scenario.control_start >= plant.horizon {
                    return Err(ConfigError::Scenario(format!(
                        "control_start {} must be below the horizon {}",
                        scenario.control_start, plant.horizon
                    )));
                }
                let window = plant.horizon - scenario.control_start;
                if window > crate::controller::MAX_CONTROL_HORIZON {
                    return Err(ConfigError::Scenario(format!(
                        "control window {window} exceeds the supported maximum of {} \
                         (the gain computation enumerates 2^window delivery suffixes)",
                        crate::controller::MAX_CONTROL_HORIZON
                    )));
                }
            }
        }

        Ok(LoadedConfig {
            fingerprint: fingerprint(self),
            model,
            links,
            plant,
            scenario: self.scenario.clone(),
        })
    }
}

fn require_len(got: usize, expected: usize) -> Result<(), ConfigError> {
    if got != expected {
        return Err(ConfigError::Links(LinkModelError::LengthMismatch {
            got,
            expected,
        }));
    }
    Ok(())
}
