//! Closed-loop harness behavior: scripted ground truth, common random
//! numbers, report plumbing, and estimator traces.

use std::path::Path;

use nalgebra::DVector;

use meshpredict_core::config::{
    ConfigFile, ControllerKind, FaultEvent, NetworkMode,
};
use meshpredict_core::controller::{comparative_cost, on_gains, GainSchedule};
use meshpredict_core::estimator::PredictionTable;
use meshpredict_core::harness::{
    monte_carlo, render_report, run_closed_loop, run_estimator_trace, scripted_gain_schedule,
    ReportFormat, Scenario,
};
use meshpredict_core::plant::{step, GaussianSampler};
use meshpredict_core::rng::{run_stream, StreamDomain};

fn fig5_config() -> ConfigFile {
    let path =
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/mesh5_reconstruction.json");
    ConfigFile::from_path(&path).unwrap()
}

fn fig5_scenario() -> Scenario {
    Scenario::from_config(&fig5_config().load().unwrap()).unwrap()
}

fn single_link_config(p_up: f64, p_down: f64) -> serde_json::Value {
    serde_json::json!({
        "nodes": 2,
        "edges": [[0, 1]],
        "source": 0,
        "sink": 1,
        "schedule": [[[0, 1]]],
        "slots_per_sample": 1,
        "phase": 0,
        "deadline": 1,
        "links": {"ge": {"p_up": [p_up], "p_down": [p_down]}},
        "plant": {
            "A": [[1.1]], "B": [[1.0]],
            "Rw": [[0.2]], "R0": [[1.0]],
            "Q0": [[5.0]], "Q1": [[1.0]], "Q2": [[1.0]],
            "N": 6
        },
        "scenario": {
            "controller": "fpd",
            "network_mode": "scripted",
            "fault_script": [],
            "control_start": 0,
            "runs": 64,
            "master_seed": 11
        }
    })
}

fn scenario_from_value(value: serde_json::Value) -> Scenario {
    let file: ConfigFile = serde_json::from_value(value).unwrap();
    Scenario::from_config(&file.load().unwrap()).unwrap()
}

#[test]
fn scripted_all_up_on_controller_matches_classical_rollout() {
    let scenario = scenario_from_value(single_link_config(0.2, 0.1));
    let outcome = run_closed_loop(&scenario, ControllerKind::On, 3).unwrap();
    assert!(outcome.trajectory.deliveries.iter().all(|&d| d));

    // Manual classical LQR rollout with the identical noise stream.
    let plant = scenario.plant.as_ref().unwrap();
    let gains = on_gains(plant).unwrap().gains;
    let mut rng = run_stream(scenario.master_seed, 3, StreamDomain::PlantNoise);
    let x0 = GaussianSampler::new(&plant.r_0).unwrap().sample(&mut rng);
    let noise = GaussianSampler::new(&plant.r_w).unwrap();
    let mut x = x0;
    for (k, gain) in gains.iter().enumerate() {
        assert_eq!(x, outcome.trajectory.states[k], "state at {k}");
        let u = -(gain * &x);
        assert_eq!(u, outcome.trajectory.inputs[k]);
        let w = noise.sample(&mut rng);
        x = step(&plant.a, &plant.b, &x, &u, true, &w);
    }
    assert_eq!(x, outcome.trajectory.states[plant.horizon]);
}

#[test]
fn scripted_all_down_ignores_inputs() {
    let mut value = single_link_config(0.2, 0.1);
    value["scenario"]["fault_script"] =
        serde_json::json!([{"sample": 0, "edge": [0, 1], "up": false}]);
    let scenario = scenario_from_value(value);
    let outcome = run_closed_loop(&scenario, ControllerKind::On, 0).unwrap();
    assert!(outcome.trajectory.deliveries.iter().all(|&d| !d));

    // Identical uncontrolled rollout: the cost carries no input terms.
    let plant = scenario.plant.as_ref().unwrap();
    let mut rng = run_stream(scenario.master_seed, 0, StreamDomain::PlantNoise);
    let mut x = GaussianSampler::new(&plant.r_0).unwrap().sample(&mut rng);
    let noise = GaussianSampler::new(&plant.r_w).unwrap();
    let mut cost = 0.0;
    for _ in 0..plant.horizon {
        cost += (x.transpose() * &plant.q_state * &x)[(0, 0)];
        let w = noise.sample(&mut rng);
        x = &plant.a * &x + w;
    }
    cost += (x.transpose() * &plant.q_terminal * &x)[(0, 0)];
    assert!((outcome.cost - cost).abs() < 1e-9 * (1.0 + cost));
}

#[test]
fn two_run_smoke_report() {
    let mut value = single_link_config(0.2, 0.1);
    value["scenario"]["runs"] = serde_json::json!(2);
    let scenario = scenario_from_value(value);
    let report = monte_carlo(&scenario, &[ControllerKind::On]).unwrap();
    assert_eq!(report.runs, 2);
    assert_eq!(report.controllers.len(), 1);
    assert!(report.controllers[0].mean_cost.is_finite());
    assert!(report.controllers[0].std_error.is_finite());

    let csv = render_report(&report, ReportFormat::Csv);
    assert_eq!(csv.lines().count(), 2);
    let json = render_report(&report, ReportFormat::Json);
    let parsed: meshpredict_core::harness::AggregateReport =
        serde_json::from_str(&json).unwrap();
    assert_eq!(parsed, report);
}

#[test]
fn always_delivered_fpd_matches_on_and_iid_is_worse() {
    // Strong links, all-up script: ON is exactly optimal; the FPD mean
    // should sit within noise of it, and an IID controller with p < 1
    // cannot beat ON in expectation.
    let mut value = single_link_config(0.2, 0.002);
    value["scenario"]["runs"] = serde_json::json!(4000);
    let scenario = scenario_from_value(value);
    let report = monte_carlo(
        &scenario,
        &[ControllerKind::Fpd, ControllerKind::Iid, ControllerKind::On],
    )
    .unwrap();
    let fpd = &report.controllers[0];
    let iid = &report.controllers[1];
    let on = &report.controllers[2];
    assert!(
        (fpd.mean_cost - on.mean_cost).abs() <= 3.0 * (fpd.std_error + on.std_error),
        "fpd {} vs on {}",
        fpd.mean_cost,
        on.mean_cost
    );

    // Analytic comparison under the true (all-delivered) distribution.
    let plant = scenario.plant.as_ref().unwrap();
    let truth = PredictionTable {
        horizon: plant.horizon,
        base_sample: 0,
        joint: {
            let mut j = vec![0.0; 1 << plant.horizon];
            *j.last_mut().unwrap() = 1.0;
            j
        },
    };
    let j_on = comparative_cost(
        plant,
        &GainSchedule {
            gains: scripted_gain_schedule(&scenario, ControllerKind::On).unwrap(),
        },
        &truth,
    )
    .unwrap();
    let j_iid = comparative_cost(
        plant,
        &GainSchedule {
            gains: scripted_gain_schedule(&scenario, ControllerKind::Iid).unwrap(),
        },
        &truth,
    )
    .unwrap();
    assert!(j_iid >= j_on - 1e-9);
    assert!(iid.mean_cost >= on.mean_cost - 3.0 * (iid.std_error + on.std_error));

    // The empirical mean under guaranteed delivery matches the classical
    // analytic cost.
    assert!(
        (on.mean_cost - j_on).abs() <= 3.0 * on.std_error,
        "on mean {} vs analytic {j_on} (se {})",
        on.mean_cost,
        on.std_error
    );
}

#[test]
fn frozen_links_never_change_in_stochastic_mode() {
    // Identity kernel with a certain prior: the sampled ground truth is
    // all-up and stays there, so every delivery succeeds in every run.
    let value = serde_json::json!({
        "nodes": 2,
        "edges": [[0, 1]],
        "source": 0,
        "sink": 1,
        "schedule": [[[0, 1]]],
        "slots_per_sample": 1,
        "phase": 0,
        "deadline": 1,
        "links": {"identity_kernel": true, "prior_p": [1.0]},
        "plant": {
            "A": [[1.0]], "B": [[1.0]],
            "Rw": [[0.1]], "R0": [[1.0]],
            "Q0": [[1.0]], "Q1": [[1.0]], "Q2": [[1.0]],
            "N": 8
        },
        "scenario": {
            "controller": "fpd",
            "network_mode": "stochastic",
            "control_start": 0,
            "runs": 6,
            "master_seed": 17
        }
    });
    let scenario = scenario_from_value(value);
    for run in 0..6 {
        let outcome = run_closed_loop(&scenario, ControllerKind::Fpd, run).unwrap();
        assert!(outcome.trajectory.deliveries.iter().all(|&d| d));
    }
}

#[test]
fn reports_are_byte_identical_across_invocations() {
    let mut scenario = fig5_scenario();
    scenario.runs = 200;
    let a = monte_carlo(&scenario, &[ControllerKind::Fpd, ControllerKind::On]).unwrap();
    let b = monte_carlo(&scenario, &[ControllerKind::Fpd, ControllerKind::On]).unwrap();
    assert_eq!(
        render_report(&a, ReportFormat::Json),
        render_report(&b, ReportFormat::Json)
    );
    assert_eq!(
        render_report(&a, ReportFormat::Csv),
        render_report(&b, ReportFormat::Csv)
    );
}

#[test]
fn scripted_fast_path_agrees_with_closed_loop_runs() {
    let mut scenario = fig5_scenario();
    scenario.runs = 8;
    let report = monte_carlo(
        &scenario,
        &[ControllerKind::Fpd, ControllerKind::Iid, ControllerKind::On],
    )
    .unwrap();
    for (idx, kind) in [ControllerKind::Fpd, ControllerKind::Iid, ControllerKind::On]
        .iter()
        .enumerate()
    {
        let costs: Vec<f64> = (0..8)
            .map(|run| run_closed_loop(&scenario, *kind, run).unwrap().cost)
            .collect();
        let mean = costs.iter().sum::<f64>() / costs.len() as f64;
        assert_eq!(
            mean, report.controllers[idx].mean_cost,
            "fast path diverged for {}",
            kind.name()
        );
    }
}

#[test]
fn common_random_numbers_pair_runs_across_controllers() {
    // Same run index, different controllers: identical noise, identical
    // delivery pattern, different inputs only.
    let scenario = fig5_scenario();
    let a = run_closed_loop(&scenario, ControllerKind::Fpd, 5).unwrap();
    let b = run_closed_loop(&scenario, ControllerKind::On, 5).unwrap();
    assert_eq!(a.trajectory.deliveries, b.trajectory.deliveries);
    let attach = scenario.control_start;
    assert_eq!(a.trajectory.states[attach], b.trajectory.states[attach]);
    for k in 0..attach {
        assert_eq!(a.trajectory.states[k], DVector::zeros(2));
        assert_eq!(a.trajectory.inputs[k], DVector::zeros(2));
    }
}

#[test]
fn single_link_trace_matches_hand_computed_chain() {
    let p_up = 0.3;
    let p_down = 0.2;
    let mut value = single_link_config(p_up, p_down);
    value["scenario"]["fault_script"] =
        serde_json::json!([{"sample": 2, "edge": [0, 1], "up": false}]);
    let scenario = scenario_from_value(value);
    let rows = run_estimator_trace(&scenario, 1, 5).unwrap();
    let m: Vec<f64> = rows.iter().map(|r| r.marginals[0]).collect();
    let stationary = p_up / (p_up + p_down);
    let expected = [
        stationary,     // prior
        1.0 - p_down,   // after seeing a delivery: up, one kernel step
        1.0 - p_down,   // still confirmed up
        p_up,           // after the loss at sample 2: down, one step
        p_up,           // still confirmed down
    ];
    for (got, want) in m.iter().zip(expected.iter()) {
        assert!((got - want).abs() < 1e-12, "{got} vs {want}");
    }
}

#[test]
fn strong_links_keep_marginals_high_and_successes_never_hurt() {
    let mut config = fig5_config();
    // Strengthen every link so priors sit above 0.9.
    config.links.ge = Some(meshpredict_core::config::GeSection {
        p_up: vec![0.02; 6],
        p_down: vec![0.0002; 6],
    });
    config.scenario.as_mut().unwrap().fault_script = Vec::new();
    let scenario = Scenario::from_config(&config.load().unwrap()).unwrap();
    let rows = run_estimator_trace(&scenario, 6, 12).unwrap();
    for row in &rows {
        for &m in &row.marginals {
            assert!(m > 0.9, "sample {} marginal {m}", row.sample);
        }
    }
    // Conditioning on one more success never lowers a target's marginal.
    for j in 1..12usize {
        let before = rows[j - 1].marginals[1];
        let after = rows[j].marginals[0];
        assert!(
            after >= before - 1e-12,
            "target {j}: {before} -> {after} after a success"
        );
    }
}

#[test]
fn fpd_ledger_reuse_reproduces_recomputed_gains() {
    // Static links that converge immediately: after the first update the
    // posterior is sharp near-certainty, so Z stays 1 and the cached
    // ledger applies. Costs must match the recompute-every-sample path.
    let value = serde_json::json!({
        "nodes": 2,
        "edges": [[0, 1]],
        "source": 0,
        "sink": 1,
        "schedule": [[[0, 1]]],
        "slots_per_sample": 1,
        "phase": 0,
        "deadline": 1,
        "links": {"static_p": [0.85]},
        "plant": {
            "A": [[1.05]], "B": [[1.0]],
            "Rw": [[0.1]], "R0": [[1.0]],
            "Q0": [[3.0]], "Q1": [[1.0]], "Q2": [[1.0]],
            "N": 5
        },
        "scenario": {
            "controller": "fpd",
            "network_mode": "scripted",
            "fault_script": [],
            "control_start": 0,
            "runs": 16,
            "master_seed": 3,
            "fpd_reuse": false
        }
    });
    let plain = scenario_from_value(value.clone());
    let mut reusing = value;
    reusing["scenario"]["fpd_reuse"] = serde_json::json!(true);
    let reusing = scenario_from_value(reusing);

    let gains_plain = scripted_gain_schedule(&plain, ControllerKind::Fpd).unwrap();
    let gains_reuse = scripted_gain_schedule(&reusing, ControllerKind::Fpd).unwrap();
    for (a, b) in gains_plain.iter().zip(gains_reuse.iter()) {
        assert!((a - b).abs().max() < 1e-9);
    }
}

#[test]
fn sihs_in_loop_surfaces_inconsistent_observation_with_context() {
    // A static-model FPD estimator watching a scripted failure: once the
    // posterior is certain the link is up, the loss has zero probability.
    let value = serde_json::json!({
        "nodes": 2,
        "edges": [[0, 1]],
        "source": 0,
        "sink": 1,
        "schedule": [[[0, 1]]],
        "slots_per_sample": 1,
        "phase": 0,
        "deadline": 1,
        "links": {"static_p": [0.9]},
        "plant": {
            "A": [[1.0]], "B": [[1.0]],
            "Rw": [[0.1]], "R0": [[1.0]],
            "Q0": [[1.0]], "Q1": [[1.0]], "Q2": [[1.0]],
            "N": 4
        },
        "scenario": {
            "controller": "fpd",
            "network_mode": "scripted",
            "fault_script": [{"sample": 2, "edge": [0, 1], "up": false}],
            "control_start": 0,
            "runs": 4,
            "master_seed": 1
        }
    });
    let scenario = scenario_from_value(value);
    let err = run_closed_loop(&scenario, ControllerKind::Fpd, 0).unwrap_err();
    let text = err.to_string();
    assert!(text.contains("sample 2"), "unexpected error: {text}");
}

#[test]
fn stochastic_mode_runs_and_reports() {
    let value = serde_json::json!({
        "nodes": 2,
        "edges": [[0, 1]],
        "source": 0,
        "sink": 1,
        "schedule": [[[0, 1]]],
        "slots_per_sample": 1,
        "phase": 0,
        "deadline": 1,
        "links": {"ge": {"p_up": [0.3], "p_down": [0.05]}},
        "plant": {
            "A": [[1.1]], "B": [[1.0]],
            "Rw": [[0.1]], "R0": [[1.0]],
            "Q0": [[2.0]], "Q1": [[1.0]], "Q2": [[1.0]],
            "N": 5
        },
        "scenario": {
            "controller": "fpd",
            "network_mode": "stochastic",
            "control_start": 0,
            "runs": 50,
            "master_seed": 21
        }
    });
    let scenario = scenario_from_value(value);
    let report = monte_carlo(&scenario, &[ControllerKind::Fpd, ControllerKind::On]).unwrap();
    assert!(report.controllers.iter().all(|c| c.mean_cost.is_finite()));

    // Determinism holds in stochastic mode too.
    let again = monte_carlo(&scenario, &[ControllerKind::Fpd, ControllerKind::On]).unwrap();
    assert_eq!(
        render_report(&report, ReportFormat::Json),
        render_report(&again, ReportFormat::Json)
    );
}

#[test]
fn window_plant_reindexes_horizon() {
    let scenario = fig5_scenario();
    let window = scenario.window_plant().unwrap();
    assert_eq!(window.horizon, 3);
    assert_eq!(scenario.plant.as_ref().unwrap().horizon, 12);
    assert_eq!(window.a, scenario.plant.as_ref().unwrap().a);
}

#[test]
fn monte_carlo_rejects_single_run() {
    let mut scenario = fig5_scenario();
    scenario.runs = 1;
    assert!(monte_carlo(&scenario, &[ControllerKind::On]).is_err());
}

#[test]
fn missing_plant_or_scenario_is_reported() {
    let value = serde_json::json!({
        "nodes": 2,
        "edges": [[0, 1]],
        "source": 0,
        "sink": 1,
        "schedule": [[[0, 1]]],
        "slots_per_sample": 1,
        "phase": 0,
        "deadline": 1,
        "links": {"static_p": [0.9]}
    });
    let file: ConfigFile = serde_json::from_value(value).unwrap();
    let loaded = file.load().unwrap();
    assert!(Scenario::from_config(&loaded).is_err());

    let defaults = Scenario::from_config_with_defaults(&loaded);
    assert_eq!(defaults.network_mode, NetworkMode::Stochastic);
    assert!(monte_carlo(&defaults, &[ControllerKind::On]).is_err());
}

#[test]
fn scripted_masks_apply_fault_events_in_order() {
    let file = fig5_config();
    let mut section = file.scenario.clone().unwrap();
    section.fault_script = vec![
        FaultEvent {
            sample: 2,
            edge: [2, 4],
            up: false,
        },
        FaultEvent {
            sample: 4,
            edge: [2, 4],
            up: true,
        },
    ];
    let mut file = file;
    file.scenario = Some(section);
    let scenario = Scenario::from_config(&file.load().unwrap()).unwrap();
    let masks = scenario.scripted_masks(6);
    let edge_3b = 3; // (3,b) is edge index 3 in the config order
    assert!(masks[0].is_up(edge_3b));
    assert!(masks[1].is_up(edge_3b));
    assert!(!masks[2].is_up(edge_3b));
    assert!(!masks[3].is_up(edge_3b));
    assert!(masks[4].is_up(edge_3b));
    assert!(masks[5].is_up(edge_3b));
}

#[test]
fn end_to_end_probability_respects_phase() {
    let scenario = fig5_scenario();
    let prior =
        meshpredict_core::link::prior_belief(&scenario.links.prior_params().p).unwrap();
    let p0 = meshpredict_core::harness::end_to_end_delivery_probability(
        &scenario.model,
        &prior,
        0,
    );
    let p2 = meshpredict_core::harness::end_to_end_delivery_probability(
        &scenario.model,
        &prior,
        2,
    );
    assert!((p0 - 0.89019).abs() < 1e-5);
    assert!((p2 - 0.8829).abs() < 1e-5);
    // Phase-2 packets lean on the longer relay path, hence the lower prior.
    assert!(p0 > p2);

    let iid_p = scenario.iid_delivery_probability().unwrap();
    assert!((iid_p - (2.0 * p0 + p2) / 3.0).abs() < 1e-12);
}

#[test]
fn window_attach_keeps_costs_in_reference_range() {
    // With the plant attached at sample 9, mean costs sit near the
    // hundreds; a full-horizon uncontrolled rollout of this unstable
    // plant would exceed 10^4.
    let mut scenario = fig5_scenario();
    scenario.runs = 400;
    let report = monte_carlo(&scenario, &[ControllerKind::On]).unwrap();
    let mean = report.controllers[0].mean_cost;
    assert!(mean > 100.0 && mean < 5000.0, "mean {mean}");
}
