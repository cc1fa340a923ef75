//! Approximate minimax-Q learning with linear function approximation.
//!
//! Off-policy: the behavior pair generates every action; the learned target
//! strategies only appear through the per-state matrix game solved inside the
//! TD target.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureBasis;
use crate::model::{embedded_reward, sample_transition, ActionPair, GameParams, TrafficState};
use crate::policy::{MatrixGame2x2, MixedAction, PolicyPair};

/// Step sizes `eta_k = eta0 / (1 + k / tau)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LearningSchedule {
    pub eta0: f64,
    pub tau: f64,
}

impl Default for LearningSchedule {
    fn default() -> Self {
        LearningSchedule { eta0: 0.05, tau: 1e4 }
    }
}

impl LearningSchedule {
    pub fn new(eta0: f64, tau: f64) -> Self {
        LearningSchedule { eta0, tau }
    }

    pub fn rate(&self, k: u64) -> f64 {
        self.eta0 / (1.0 + k as f64 / self.tau)
    }
}

/// Partial sums of a step-size sequence, used to sanity-check the
/// Robbins-Monro conditions (sum diverges, sum of squares converges).
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RobbinsMonroDiagnostic {
    pub steps: u64,
    pub partial_sum: f64,
    pub partial_sum_sq: f64,
    /// Analytic verdict for the schedule's functional form.
    pub satisfies: bool,
}

/// Harmonic-type schedules with positive `eta0` and `tau` satisfy the
/// conditions: the sum grows like `eta0 tau ln K` while the squares stay
/// below `eta0^2 (1 + tau)`.
pub fn check_robbins_monro(schedule: &LearningSchedule, steps: u64) -> RobbinsMonroDiagnostic {
    check_sequence(|k| schedule.rate(k), steps, schedule.eta0 > 0.0 && schedule.tau > 0.0 && schedule.tau.is_finite())
}

/// Diagnostic for a constant step size, which never satisfies the
/// square-summability condition.
pub fn check_constant_rate(eta: f64, steps: u64) -> RobbinsMonroDiagnostic {
    check_sequence(|_| eta, steps, false)
}

fn check_sequence(rate: impl Fn(u64) -> f64, steps: u64, analytic: bool) -> RobbinsMonroDiagnostic {
    let (mut s, mut s2) = (0.0, 0.0);
    for k in 0..steps {
        let e = rate(k);
        s += e;
        s2 += e * e;
    }
    RobbinsMonroDiagnostic { steps, partial_sum: s, partial_sum_sq: s2, satisfies: analytic && s > 0.0 }
}

/// Written as `"random"` or a state such as `"2:1:3"`.
#[derive(Clone, Debug, PartialEq)]
pub enum InitialState {
    /// Each coordinate uniform on {0, ..., 10}.
    Random,
    Fixed(TrafficState),
}

impl Serialize for InitialState {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            InitialState::Random => s.serialize_str("random"),
            InitialState::Fixed(x) => s.collect_str(x),
        }
    }
}

impl<'de> Deserialize<'de> for InitialState {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let text = String::deserialize(d)?;
        if text == "random" {
            return Ok(InitialState::Random);
        }
        text.parse().map(InitialState::Fixed).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: u64,
    pub seed: u64,
    pub log_every: u64,
    /// Defaults to all zeros.
    pub initial_weights: Option<Vec<f64>>,
    pub initial_state: InitialState,
}

impl TrainConfig {
    pub fn new(epochs: u64, seed: u64) -> Self {
        TrainConfig { epochs, seed, log_every: 100, initial_weights: None, initial_state: InitialState::Random }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrajectoryRecord {
    pub step: u64,
    pub td_error: f64,
    pub state_l1: u64,
    pub weights: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TrainTrajectory {
    pub records: Vec<TrajectoryRecord>,
    pub final_weights: Vec<f64>,
    pub steps: u64,
}

impl TrainTrajectory {
    pub fn initial_weights(&self) -> &[f64] {
        &self.records[0].weights
    }

    /// Average of the logged weights whose step is in the last `fraction` of
    /// the run.
    pub fn trailing_average(&self, fraction: f64) -> Vec<f64> {
        let cutoff = self.steps as f64 * (1.0 - fraction);
        let tail: Vec<&TrajectoryRecord> =
            self.records.iter().filter(|r| r.step as f64 >= cutoff && r.step > 0).collect();
        let tail = if tail.is_empty() { vec![self.records.last().unwrap()] } else { tail };
        let mut avg = vec![0.0; self.final_weights.len()];
        for r in &tail {
            for (a, w) in avg.iter_mut().zip(&r.weights) {
                *a += w;
            }
        }
        avg.iter_mut().for_each(|a| *a /= tail.len() as f64);
        avg
    }
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum LearnError {
    #[error("weights diverged (non-finite component) at step {step}")]
    Diverged { step: u64 },
    #[error("initial weights have dimension {got}, basis expects {expected}")]
    Dimension { got: usize, expected: usize },
    #[error("initial state has {got} servers, game has {expected}")]
    StateDimension { got: usize, expected: usize },
}

pub fn q_value(basis: &FeatureBasis, w: &[f64], x: &TrafficState, pair: ActionPair) -> f64 {
    basis.q_value(w, x, pair)
}

/// Value and defender strategy of the matrix game `Q_w(x_next, ., .)`.
pub fn minimax_next_value(basis: &FeatureBasis, w: &[f64], x_next: &TrafficState) -> (f64, MixedAction) {
    let (sigma, value) = MatrixGame2x2::from_fn(|p| basis.q_value(w, x_next, p)).solve_defender();
    (value, sigma)
}

#[allow(clippy::too_many_arguments)]
pub fn td_error(
    basis: &FeatureBasis,
    w: &[f64],
    x: &TrafficState,
    pair: ActionPair,
    reward: f64,
    x_next: &TrafficState,
    gamma: f64,
) -> f64 {
    reward + gamma * minimax_next_value(basis, w, x_next).0 - basis.q_value(w, x, pair)
}

/// `w + eta * delta * phi`, or an error naming `step` on non-finite output.
pub fn update_step(w: &[f64], eta: f64, phi: &[f64], delta: f64, step: u64) -> Result<Vec<f64>, LearnError> {
    let mut out = w.to_vec();
    update_in_place(&mut out, eta, phi, delta, step)?;
    Ok(out)
}

fn update_in_place(w: &mut [f64], eta: f64, phi: &[f64], delta: f64, step: u64) -> Result<(), LearnError> {
    let scale = eta * delta;
    for (wi, &f) in w.iter_mut().zip(phi) {
        *wi += scale * f;
    }
    if w.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(LearnError::Diverged { step })
    }
}

fn draw(rng: &mut ChaCha8Rng, p1: f64) -> bool {
    rng.random::<f64>() < p1
}

pub fn random_initial_state(m: usize, rng: &mut ChaCha8Rng) -> TrafficState {
    TrafficState::new((0..m).map(|_| rng.random_range(0..=10u32)).collect())
}

/// Runs `config.epochs` embedded-chain steps of approximate minimax-Q.
pub fn train(
    params: &GameParams,
    basis: &FeatureBasis,
    behavior: &PolicyPair,
    schedule: &LearningSchedule,
    config: &TrainConfig,
) -> Result<TrainTrajectory, LearnError> {
    train_with(params, basis, behavior, |k| schedule.rate(k), config)
}

/// As [`train`] with an arbitrary step-size sequence.
pub fn train_with(
    params: &GameParams,
    basis: &FeatureBasis,
    behavior: &PolicyPair,
    rate: impl Fn(u64) -> f64,
    config: &TrainConfig,
) -> Result<TrainTrajectory, LearnError> {
    let dim = basis.dim();
    let mut w = match &config.initial_weights {
        Some(w0) if w0.len() != dim => return Err(LearnError::Dimension { got: w0.len(), expected: dim }),
        Some(w0) => w0.clone(),
        None => vec![0.0; dim],
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut x = match &config.initial_state {
        InitialState::Random => random_initial_state(params.servers(), &mut rng),
        InitialState::Fixed(x0) if x0.servers() != params.servers() => {
            return Err(LearnError::StateDimension { got: x0.servers(), expected: params.servers() })
        }
        InitialState::Fixed(x0) => x0.clone(),
    };
    let log_every = config.log_every.max(1);
    let mut records = vec![TrajectoryRecord { step: 0, td_error: 0.0, state_l1: x.l1(), weights: w.clone() }];
    let mut phi = vec![0.0; dim];

    for k in 0..config.epochs {
        let pair = ActionPair {
            attack: draw(&mut rng, behavior.attacker.prob_one(&x)),
            defend: draw(&mut rng, behavior.defender.prob_one(&x)),
        };
        let reward = embedded_reward(&x, pair, params);
        let (_, x_next) = sample_transition(&x, pair, params, &mut rng);
        let delta = td_error(basis, &w, &x, pair, reward, &x_next, params.gamma);
        basis.phi_into(&x, pair, &mut phi);
        update_in_place(&mut w, rate(k), &phi, delta, k)?;

        let step = k + 1;
        if step % log_every == 0 || step == config.epochs {
            records.push(TrajectoryRecord { step, td_error: delta, state_l1: x.l1(), weights: w.clone() });
        }
        x = x_next;
    }
    Ok(TrainTrajectory { records, final_weights: w, steps: config.epochs })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceCurve {
    pub points: Vec<(u64, f64)>,
    /// True when `w_0 == w_ref` and distances were left unnormalized.
    pub unnormalized: bool,
}

fn l2_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// `|w_k - w_ref|_2 / |w_0 - w_ref|_2` along the logged trajectory.
pub fn convergence_curve(trajectory: &TrainTrajectory, w_ref: &[f64]) -> ConvergenceCurve {
    let d0 = l2_dist(trajectory.initial_weights(), w_ref);
    let (norm, unnormalized) = if d0 > 0.0 { (d0, false) } else { (1.0, true) };
    let points = trajectory.records.iter().map(|r| (r.step, l2_dist(&r.weights, w_ref) / norm)).collect();
    ConvergenceCurve { points, unnormalized }
}
