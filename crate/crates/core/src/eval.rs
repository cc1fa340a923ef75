//! Monte Carlo evaluation of learned weights against the truncated oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;

use crate::features::{BasisKind, FeatureBasis};
use crate::learner::random_initial_state;
use crate::model::{embedded_reward, sample_transition, ActionPair, GameParams, TrafficState};
use crate::oracle::Equilibrium;
use crate::par::map_range;
use crate::policy::{GreedyPolicy, MixedAction, PolicyPair, Side, StatePolicy};

/// Odd on purpose: every jump moves `|x|_1` by one, so an even stride would
/// only ever visit one parity class.
pub const THINNING: usize = 11;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub n_states: usize,
    pub burn_in: usize,
    pub horizon: usize,
    pub reps: usize,
    pub seeds: Vec<u64>,
    pub consistency_tol: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            n_states: 200,
            burn_in: 1000,
            horizon: 200,
            reps: 100,
            seeds: (0..10).collect(),
            consistency_tol: 0.1,
        }
    }
}

fn step_actions(
    attacker: &dyn StatePolicy,
    defender: &dyn StatePolicy,
    x: &TrafficState,
    rng: &mut ChaCha8Rng,
) -> ActionPair {
    // Both uniforms are drawn every step so paired rollouts stay aligned.
    let (ua, ub): (f64, f64) = (rng.random(), rng.random());
    ActionPair { attack: ua < attacker.prob_one(x), defend: ub < defender.prob_one(x) }
}

/// Long-run states of the chain driven by `pair`, one every [`THINNING`] steps.
pub fn sample_equilibrium_states(
    pair: &PolicyPair,
    params: &GameParams,
    burn_in: usize,
    n: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<TrafficState> {
    let mut x = random_initial_state(params.servers(), rng);
    let advance = |x: &mut TrafficState, rng: &mut ChaCha8Rng| {
        let actions = step_actions(pair.attacker.as_ref(), pair.defender.as_ref(), x, rng);
        *x = sample_transition(x, actions, params, rng).1;
    };
    for _ in 0..burn_in {
        advance(&mut x, rng);
    }
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        if !out.is_empty() {
            for _ in 0..THINNING {
                advance(&mut x, rng);
            }
        }
        out.push(x.clone());
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct CostEstimate {
    pub mean: f64,
    pub std_error: f64,
}

fn rollout(
    attacker: &dyn StatePolicy,
    defender: &dyn StatePolicy,
    x0: &TrafficState,
    params: &GameParams,
    horizon: usize,
    seed: u64,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut x = x0.clone();
    let (mut total, mut discount) = (0.0, 1.0);
    for _ in 0..horizon {
        let actions = step_actions(attacker, defender, &x, &mut rng);
        total += discount * embedded_reward(&x, actions, params);
        discount *= params.gamma;
        x = sample_transition(&x, actions, params, &mut rng).1;
    }
    total
}

fn mean_and_error(samples: &[f64]) -> CostEstimate {
    let n = samples.len() as f64;
    let mean = samples.iter().sum::<f64>() / n;
    let var = if samples.len() > 1 { samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
    CostEstimate { mean, std_error: (var / n).sqrt() }
}

/// Discounted embedded-chain cost from `x0`; rollout `r` is seeded with `seed ^ r`.
pub fn mc_discounted_cost(
    attacker: &dyn StatePolicy,
    defender: &dyn StatePolicy,
    x0: &TrafficState,
    params: &GameParams,
    horizon: usize,
    reps: usize,
    seed: u64,
) -> CostEstimate {
    assert!(horizon >= 1 && reps >= 1);
    let samples = map_range(reps, |r| rollout(attacker, defender, x0, params, horizon, seed ^ r as u64));
    mean_and_error(&samples)
}

/// Attacker replying to a given defender through the oracle `Q*`; ties
/// (including every interior equilibrium state) follow the oracle `pi*`.
pub struct OracleBestResponse<'a> {
    pub oracle: &'a Equilibrium,
    pub defender: &'a dyn StatePolicy,
}

impl StatePolicy for OracleBestResponse<'_> {
    fn prob_one(&self, x: &TrafficState) -> f64 {
        let sigma = self.defender.prob_one(x);
        let row = |a: bool| {
            (1.0 - sigma) * self.oracle.q_at(x, ActionPair { attack: a, defend: false })
                + sigma * self.oracle.q_at(x, ActionPair { attack: a, defend: true })
        };
        let (v0, v1) = (row(false), row(true));
        let tol = 1e-9 * (1.0 + v0.abs().max(v1.abs()));
        if (v1 - v0).abs() <= tol {
            self.oracle.pi[self.oracle.space.index_clamped(x)]
        } else if v1 > v0 {
            1.0
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct NormalizedCost {
    pub ratio: f64,
    pub learned: f64,
    pub reference: f64,
}

/// Mean cost of `learned` against the oracle attacker's reply, divided by the
/// same quantity for the oracle defender, over shared random numbers.
pub fn normalized_mean_cost(
    learned: &dyn StatePolicy,
    oracle: &Equilibrium,
    states: &[TrafficState],
    params: &GameParams,
    horizon: usize,
    reps: usize,
    seed: u64,
) -> NormalizedCost {
    assert!(!states.is_empty());
    let reference = oracle.defender_policy();
    let mean_cost = |defender: &dyn StatePolicy| {
        let attacker = OracleBestResponse { oracle, defender };
        let per_state = map_range(states.len() * reps, |k| {
            rollout(&attacker, defender, &states[k / reps], params, horizon, seed ^ k as u64)
        });
        per_state.iter().sum::<f64>() / per_state.len() as f64
    };
    let l = mean_cost(learned);
    let r = mean_cost(&reference);
    NormalizedCost { ratio: l / r, learned: l, reference: r }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConsistencyRow {
    pub state: TrafficState,
    pub learned_p1: f64,
    pub reference_p1: f64,
    pub tv: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Consistency {
    pub fraction: f64,
    pub mean_tv: f64,
    #[serde(skip)]
    pub rows: Vec<ConsistencyRow>,
}

pub fn policy_consistency(
    learned: &dyn StatePolicy,
    reference: &dyn StatePolicy,
    states: &[TrafficState],
    tol: f64,
) -> Consistency {
    assert!(!states.is_empty());
    let rows: Vec<ConsistencyRow> = states
        .iter()
        .map(|x| {
            let (l, r) = (learned.prob_one(x), reference.prob_one(x));
            ConsistencyRow { state: x.clone(), learned_p1: l, reference_p1: r, tv: (l - r).abs() }
        })
        .collect();
    let n = rows.len() as f64;
    let fraction = rows.iter().filter(|r| r.tv <= tol).count() as f64 / n;
    let mean_tv = rows.iter().map(|r| r.tv).sum::<f64>() / n;
    Consistency { fraction, mean_tv, rows }
}

pub fn write_consistency_csv(rows: &[ConsistencyRow], out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["state", "learned_p1", "reference_p1", "tv"])?;
    for r in rows {
        w.write_record([
            r.state.to_string(),
            format!("{:.16e}", r.learned_p1),
            format!("{:.16e}", r.reference_p1),
            format!("{:.16e}", r.tv),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedMetrics {
    pub seed: u64,
    pub normalized_mean_cost: f64,
    pub learned_cost: f64,
    pub reference_cost: f64,
    pub policy_consistency: f64,
    pub mean_tv_distance: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub basis: String,
    pub normalized_mean_cost: f64,
    pub policy_consistency: f64,
    pub mean_tv_distance: f64,
    pub per_seed: Vec<SeedMetrics>,
}

/// Scores one weight vector per seed; states and rollouts for seed `s` depend
/// on `s` alone, so different bases see identical samples.
pub fn evaluate_weights(
    basis: &FeatureBasis,
    runs: &[(u64, Vec<f64>)],
    oracle: &Equilibrium,
    params: &GameParams,
    config: &EvalConfig,
) -> (MetricsReport, Vec<Vec<ConsistencyRow>>) {
    let reference = PolicyPair::new(oracle.attacker_policy(), oracle.defender_policy());
    let mut per_seed = Vec::new();
    let mut details = Vec::new();
    for (seed, w) in runs {
        let mut rng = ChaCha8Rng::seed_from_u64(*seed);
        let states = sample_equilibrium_states(&reference, params, config.burn_in, config.n_states, &mut rng);
        let learned = GreedyPolicy { basis: basis.clone(), weights: w.clone(), side: Side::Defender };
        let cost =
            normalized_mean_cost(&learned, oracle, &states, params, config.horizon, config.reps, seed.rotate_left(32));
        let cons = policy_consistency(&learned, reference.defender.as_ref(), &states, config.consistency_tol);
        per_seed.push(SeedMetrics {
            seed: *seed,
            normalized_mean_cost: cost.ratio,
            learned_cost: cost.learned,
            reference_cost: cost.reference,
            policy_consistency: cons.fraction,
            mean_tv_distance: cons.mean_tv,
        });
        details.push(cons.rows);
    }
    let n = per_seed.len().max(1) as f64;
    let avg = |f: fn(&SeedMetrics) -> f64| per_seed.iter().map(f).sum::<f64>() / n;
    let report = MetricsReport {
        basis: basis.kind().name().to_string(),
        normalized_mean_cost: avg(|s| s.normalized_mean_cost),
        policy_consistency: avg(|s| s.policy_consistency),
        mean_tv_distance: avg(|s| s.mean_tv_distance),
        per_seed,
    };
    (report, details)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ServerWeights {
    pub server: usize,
    pub intercept: f64,
    pub linear: f64,
    pub quadratic: Option<f64>,
    pub attack: f64,
    pub defend: f64,
}

/// Sign and ordering checks on the per-server weights. `None` marks a flag that
/// cannot be decided because the weights involved are all zero.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct WeightReport {
    pub servers: Vec<ServerWeights>,
    pub attack_positive: Option<bool>,
    pub defend_negative: Option<bool>,
    pub defend_outweighs_attack: Option<bool>,
    /// Server indices sorted by decreasing linear weight.
    pub order_by_linear: Vec<usize>,
    /// Server indices sorted by decreasing intercept.
    pub order_by_intercept: Vec<usize>,
}

impl WeightReport {
    pub fn has_expected_signs(&self) -> bool {
        self.attack_positive == Some(true)
            && self.defend_negative == Some(true)
            && self.defend_outweighs_attack == Some(true)
    }
}

fn descending(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&i, &j| values[j].total_cmp(&values[i]));
    idx
}

pub fn weight_interpretation_report(w: &[f64], basis: &FeatureBasis) -> WeightReport {
    assert!(matches!(basis.kind(), BasisKind::Amq1 | BasisKind::Amq2), "needs an AMQ basis");
    assert_eq!(w.len(), basis.dim());
    let d = basis.per_server();
    let at = |server: usize, name: &str| basis.slot(name).map(|j| w[server * d + j]);
    let servers: Vec<ServerWeights> = (0..basis.servers())
        .map(|i| ServerWeights {
            server: i,
            intercept: at(i, "intercept").unwrap_or(0.0),
            linear: at(i, "load").unwrap_or(0.0),
            quadratic: at(i, "load_sq"),
            attack: at(i, "attack").unwrap_or(0.0),
            defend: at(i, "defend").unwrap_or(0.0),
        })
        .collect();
    let all_zero = |f: fn(&ServerWeights) -> f64| servers.iter().all(|s| f(s) == 0.0);
    let attack_zero = all_zero(|s| s.attack);
    let defend_zero = all_zero(|s| s.defend);
    let mean_abs =
        |f: fn(&ServerWeights) -> f64| servers.iter().map(|s| f(s).abs()).sum::<f64>() / servers.len() as f64;
    WeightReport {
        attack_positive: (!attack_zero).then(|| servers.iter().all(|s| s.attack > 0.0)),
        defend_negative: (!defend_zero).then(|| servers.iter().all(|s| s.defend < 0.0)),
        defend_outweighs_attack: (!(attack_zero && defend_zero))
            .then(|| mean_abs(|s| s.defend) > mean_abs(|s| s.attack)),
        order_by_linear: descending(&servers.iter().map(|s| s.linear).collect::<Vec<_>>()),
        order_by_intercept: descending(&servers.iter().map(|s| s.intercept).collect::<Vec<_>>()),
        servers,
    }
}

/// Equilibrium mixtures the learned weights induce at `x`.
pub fn learned_mixtures(basis: &FeatureBasis, w: &[f64], x: &TrafficState) -> (MixedAction, MixedAction) {
    crate::policy::greedy_policy_pair(|y, pair| basis.q_value(w, y, pair), x)
}
