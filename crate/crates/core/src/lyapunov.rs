//! Numeric Foster-Lyapunov drift certification on a finite box.
//!
//! For `V(x) = sum_n exp(nu x_n)` (or `W = V^2`) the generator of the
//! policy-driven chain is evaluated at every state of `{0..=box}^m`. The drift
//! rate `c` is fitted on the outer shell `|x|_1 >= shell` and the offset `d`
//! over the whole box, so that `L V(x) <= -c V(x) + d` holds at every scanned
//! state whenever `c > 0`.

use serde::Serialize;

use crate::model::{marginal_rates, GameParams, TrafficState};
use crate::policy::{PolicyPair, StatePolicy};
use crate::space::TruncatedSpace;

use crate::par::map_range;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct LyapunovConfig {
    pub nu: f64,
    /// Largest queue length per server in the scanned box.
    #[serde(rename = "box")]
    pub box_cap: u32,
    /// `|x|_1` threshold of the outer shell.
    pub shell: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub enum FunctionKind {
    V,
    W,
}

/// `L f(x) = sum_y q(y | x) (f(y) - f(x))` with rates from the mixed policy
/// pair.
pub fn generator_apply(
    f: impl Fn(&TrafficState) -> f64,
    x: &TrafficState,
    attacker: &dyn StatePolicy,
    defender: &dyn StatePolicy,
    params: &GameParams,
) -> f64 {
    let fx = f(x);
    marginal_rates(x, attacker, defender, params).iter().map(|(y, q)| q * (f(y) - fx)).sum()
}

pub fn exp_lyapunov(nu: f64) -> impl Fn(&TrafficState) -> f64 + Copy {
    move |x: &TrafficState| x.queues().iter().map(|&q| (nu * f64::from(q)).exp()).sum()
}

pub fn lyapunov_function(kind: FunctionKind, nu: f64) -> impl Fn(&TrafficState) -> f64 + Copy {
    let v = exp_lyapunov(nu);
    move |x: &TrafficState| match kind {
        FunctionKind::V => v(x),
        FunctionKind::W => v(x).powi(2),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct DriftReport {
    pub function_kind: FunctionKind,
    pub nu: f64,
    #[serde(rename = "box")]
    pub box_cap: u32,
    pub shell: u64,
    pub c: f64,
    pub d: f64,
    /// Shell states with non-negative drift; empty iff `c > 0`.
    pub violations: Vec<TrafficState>,
}

impl DriftReport {
    pub fn certified(&self) -> bool {
        self.c > 0.0 && self.violations.is_empty()
    }
}

struct Sample {
    state: TrafficState,
    value: f64,
    drift: f64,
    outer: bool,
}

fn evaluate(config: &LyapunovConfig, kind: FunctionKind, pair: &PolicyPair, params: &GameParams) -> Vec<Sample> {
    let space = TruncatedSpace::new(config.box_cap, params.servers());
    let f = lyapunov_function(kind, config.nu);
    let at = |k: usize| {
        let x = space.state(k);
        let drift = generator_apply(f, &x, pair.attacker.as_ref(), pair.defender.as_ref(), params);
        Sample { outer: x.l1() >= config.shell, value: f(&x), drift, state: x }
    };
    map_range(space.len(), at)
}

/// Fits `(c, d)` for `V` or `W` over the configured box.
pub fn audit_drift(config: &LyapunovConfig, kind: FunctionKind, pair: &PolicyPair, params: &GameParams) -> DriftReport {
    let samples = evaluate(config, kind, pair, params);
    let c = samples.iter().filter(|s| s.outer).map(|s| -s.drift / s.value).fold(f64::INFINITY, f64::min);
    // An empty shell puts no constraint on c; report it as uncertified.
    let c = if c.is_finite() { c } else { 0.0 };
    finish(config, kind, c, &samples)
}

/// Offset `d` such that `L f <= -c f + d` on the box for a given rate `c`.
pub fn drift_offset(
    config: &LyapunovConfig,
    kind: FunctionKind,
    c: f64,
    pair: &PolicyPair,
    params: &GameParams,
) -> f64 {
    let samples = evaluate(config, kind, pair, params);
    offset(c, &samples)
}

fn offset(c: f64, samples: &[Sample]) -> f64 {
    samples.iter().map(|s| s.drift + c * s.value).fold(0.0, f64::max)
}

fn finish(config: &LyapunovConfig, kind: FunctionKind, c: f64, samples: &[Sample]) -> DriftReport {
    let violations = if c > 0.0 {
        Vec::new()
    } else {
        samples.iter().filter(|s| s.outer && s.drift >= 0.0).map(|s| s.state.clone()).collect()
    };
    DriftReport {
        function_kind: kind,
        nu: config.nu,
        box_cap: config.box_cap,
        shell: config.shell,
        c,
        d: offset(c.max(0.0), samples),
        violations,
    }
}

/// Re-evaluates the generator and lists states breaking `L f <= -c f + d`.
pub fn replay_report(report: &DriftReport, pair: &PolicyPair, params: &GameParams) -> Vec<TrafficState> {
    let config = LyapunovConfig { nu: report.nu, box_cap: report.box_cap, shell: report.shell };
    let slack = 1e-9;
    evaluate(&config, report.function_kind, pair, params)
        .into_iter()
        .filter(|s| s.drift > -report.c * s.value + report.d + slack * (1.0 + report.d.abs()))
        .map(|s| s.state)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NuRow {
    pub nu: f64,
    pub v: DriftReport,
    pub w: DriftReport,
    /// Offset for `W` at the rate certified for `V`; comparable with `d_V^2 / c_V`.
    pub w_offset_at_v_rate: Option<f64>,
}

impl NuRow {
    pub fn certified(&self) -> bool {
        self.v.certified() && self.w.certified()
    }

    /// `d'` against the `d^2 / c` bound, with relative slack.
    pub fn w_offset_within_bound(&self, slack: f64) -> bool {
        match self.w_offset_at_v_rate {
            Some(dw) => dw <= self.v.d * self.v.d / self.v.c * (1.0 + slack),
            None => false,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NuScan {
    /// The certified `nu` with the largest `V` drift rate.
    pub best_nu: Option<f64>,
    pub table: Vec<NuRow>,
}

pub fn scan_nu(grid: &[f64], pair: &PolicyPair, params: &GameParams, box_cap: u32, shell: u64) -> NuScan {
    let table: Vec<NuRow> = grid
        .iter()
        .map(|&nu| {
            let config = LyapunovConfig { nu, box_cap, shell };
            let v = audit_drift(&config, FunctionKind::V, pair, params);
            let w = audit_drift(&config, FunctionKind::W, pair, params);
            let w_offset_at_v_rate = v.certified().then(|| drift_offset(&config, FunctionKind::W, v.c, pair, params));
            NuRow { nu, v, w, w_offset_at_v_rate }
        })
        .collect();
    let best_nu = table.iter().filter(|r| r.certified()).max_by(|a, b| a.v.c.total_cmp(&b.v.c)).map(|r| r.nu);
    NuScan { best_nu, table }
}
