//! Browser bindings for the queueing security game.
//!
//! Every export returns a JSON string; the page in `www/` renders it.

use serde::Serialize;
use wasm_bindgen::prelude::*;

use amq_core::features::{BasisKind, FeatureBasis};
use amq_core::learner::{convergence_curve, train, LearningSchedule, TrainConfig};
use amq_core::lyapunov::scan_nu;
use amq_core::model::{GameParams, TrafficState};
use amq_core::oracle::{
    build_truncated_chain, projected_fixed_point, solve_equilibrium, stationary_distribution, FixedPointOptions,
    DEFAULT_ITERATION_CAP,
};
use amq_core::policy::{validate_c0, PolicyPair};
use amq_core::space::TruncatedSpace;

#[derive(Serialize)]
pub struct DriftPoint {
    pub nu: f64,
    pub c_v: f64,
    pub d_v: f64,
    pub c_w: f64,
    pub certified: bool,
}

#[derive(Serialize)]
pub struct DriftCurve {
    pub best_nu: Option<f64>,
    pub points: Vec<DriftPoint>,
}

fn parse_mu(mu: &str) -> Result<Vec<f64>, String> {
    mu.split(',').map(|s| s.trim().parse::<f64>().map_err(|e| format!("mu: {e}"))).collect()
}

fn game(lambda: f64, mu: Vec<f64>, c1: f64, c2: f64, gamma: f64) -> Result<GameParams, String> {
    let params = GameParams { lambda, mu, c1, c2, gamma };
    params.validate().map_err(|e| e.to_string())?;
    Ok(params)
}

/// Drift rates of `V` and `W` for `steps` values of `nu` spaced evenly on
/// `[nu_min, nu_max]`.
#[allow(clippy::too_many_arguments)]
pub fn drift_curve(
    lambda: f64,
    mu: &str,
    c0: f64,
    nu_min: f64,
    nu_max: f64,
    steps: usize,
    box_cap: u32,
    shell: u32,
) -> Result<DriftCurve, String> {
    let params = game(lambda, parse_mu(mu)?, 8.0, 6.0, 0.9)?;
    validate_c0(&params, c0).map_err(|e| e.to_string())?;
    if !(0.0 < nu_min && nu_min <= nu_max) || steps == 0 {
        return Err("need 0 < nu_min <= nu_max and at least one step".into());
    }
    if TruncatedSpace::checked_len(box_cap, params.servers()).is_none_or(|n| n > 200_000) {
        return Err("box too large for the browser".into());
    }
    let grid: Vec<f64> = (0..steps)
        .map(|k| if steps == 1 { nu_min } else { nu_min + (nu_max - nu_min) * k as f64 / (steps - 1) as f64 })
        .collect();
    if u64::from(shell) > u64::from(box_cap) * params.servers() as u64 {
        return Err("shell lies outside the box".into());
    }
    let scan = scan_nu(&grid, &PolicyPair::behavior(c0), &params, box_cap, u64::from(shell));
    let points = scan
        .table
        .iter()
        .map(|r| DriftPoint { nu: r.nu, c_v: r.v.c, d_v: r.v.d, c_w: r.w.c, certified: r.certified() })
        .collect();
    Ok(DriftCurve { best_nu: scan.best_nu, points })
}

#[derive(Serialize)]
pub struct PolicyMap {
    pub cap: u32,
    /// Row `x1`, column `x2`.
    pub attack: Vec<Vec<f64>>,
    pub defend: Vec<Vec<f64>>,
    pub value: Vec<Vec<f64>>,
    pub sweeps: usize,
}

/// Equilibrium attack and defense probabilities on the two-server grid.
pub fn policy_map(
    lambda: f64,
    mu1: f64,
    mu2: f64,
    c1: f64,
    c2: f64,
    gamma: f64,
    cap: u32,
) -> Result<PolicyMap, String> {
    let params = game(lambda, vec![mu1, mu2], c1, c2, gamma)?;
    if !(1..=40).contains(&cap) {
        return Err("cap must lie in 1..=40".into());
    }
    let space = TruncatedSpace::new(cap, 2);
    let chain = build_truncated_chain(&params, space);
    let eq = solve_equilibrium(&chain, gamma, 1e-8, DEFAULT_ITERATION_CAP).map_err(|e| e.to_string())?;
    let n = cap as usize + 1;
    let grid = |v: &[f64]| -> Vec<Vec<f64>> {
        (0..n).map(|i| (0..n).map(|j| v[space.index(&TrafficState::new(vec![i as u32, j as u32]))]).collect()).collect()
    };
    Ok(PolicyMap { cap, attack: grid(&eq.pi), defend: grid(&eq.sigma), value: grid(&eq.v), sweeps: eq.iterations })
}

#[derive(Serialize)]
pub struct TrainingCurve {
    pub basis: String,
    pub points: Vec<(u64, f64)>,
    pub final_weights: Vec<f64>,
    pub reference: Vec<f64>,
    pub diverged_at: Option<u64>,
}

/// Trains on the three-server system and measures the distance to the
/// projected fixed point of a cap-12 truncation.
pub fn training_curve(
    basis: &str,
    epochs: u64,
    eta0: f64,
    tau: f64,
    seed: u64,
    c0: f64,
) -> Result<TrainingCurve, String> {
    let params = GameParams::three_server();
    validate_c0(&params, c0).map_err(|e| e.to_string())?;
    let kind = BasisKind::parse(basis).filter(|k| *k != BasisKind::Custom).ok_or("basis must be amq1 or amq2")?;
    if !(1..=200_000).contains(&epochs) || !(eta0.is_finite() && eta0 > 0.0 && tau.is_finite() && tau > 0.0) {
        return Err("need 1 <= epochs <= 200000 and positive eta0, tau".into());
    }
    let fb = FeatureBasis::of_kind(kind, 3).ok_or("unsupported basis")?;
    let pair = PolicyPair::behavior(c0);
    let chain = build_truncated_chain(&params, TruncatedSpace::new(12, 3));
    let st = stationary_distribution(&chain, &pair.attacker, &pair.defender, 1e-12, DEFAULT_ITERATION_CAP)
        .map_err(|e| e.to_string())?;
    let fp = projected_fixed_point(
        &fb,
        &chain,
        &st.mu,
        &pair.attacker,
        &pair.defender,
        params.gamma,
        FixedPointOptions::default(),
    )
    .map_err(|e| e.to_string())?;
    let mut config = TrainConfig::new(epochs, seed);
    config.log_every = (epochs / 200).max(1);
    match train(&params, &fb, &pair, &LearningSchedule::new(eta0, tau), &config) {
        Ok(traj) => Ok(TrainingCurve {
            basis: basis.into(),
            points: convergence_curve(&traj, &fp.weights).points,
            final_weights: traj.final_weights,
            reference: fp.weights,
            diverged_at: None,
        }),
        Err(amq_core::learner::LearnError::Diverged { step }) => Ok(TrainingCurve {
            basis: basis.into(),
            points: Vec::new(),
            final_weights: Vec::new(),
            reference: fp.weights,
            diverged_at: Some(step),
        }),
        Err(e) => Err(e.to_string()),
    }
}

fn to_js<T: Serialize>(r: Result<T, String>) -> Result<String, JsValue> {
    r.and_then(|v| serde_json::to_string(&v).map_err(|e| e.to_string())).map_err(|e| JsValue::from_str(&e))
}

#[wasm_bindgen(js_name = driftCurve)]
#[allow(clippy::too_many_arguments)]
pub fn drift_curve_js(
    lambda: f64,
    mu: &str,
    c0: f64,
    nu_min: f64,
    nu_max: f64,
    steps: usize,
    box_cap: u32,
    shell: u32,
) -> Result<String, JsValue> {
    to_js(drift_curve(lambda, mu, c0, nu_min, nu_max, steps, box_cap, shell))
}

#[wasm_bindgen(js_name = policyMap)]
pub fn policy_map_js(
    lambda: f64,
    mu1: f64,
    mu2: f64,
    c1: f64,
    c2: f64,
    gamma: f64,
    cap: u32,
) -> Result<String, JsValue> {
    to_js(policy_map(lambda, mu1, mu2, c1, c2, gamma, cap))
}

#[wasm_bindgen(js_name = trainingCurve)]
pub fn training_curve_js(basis: &str, epochs: u32, eta0: f64, tau: f64, seed: u32, c0: f64) -> Result<String, JsValue> {
    to_js(training_curve(basis, u64::from(epochs), eta0, tau, u64::from(seed), c0))
}
