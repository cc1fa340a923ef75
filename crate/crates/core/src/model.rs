//! Parallel-server queueing model under routing attacks.
//!
//! Jobs arrive at rate `lambda` and are routed by join-the-shortest-queue. An
//! attacker may misroute an arrival to the longest queue; a defender may
//! protect the routing decision. Server `i` serves at rate `mu[i]`. The
//! continuous-time process is observed at its transition epochs, which gives
//! the embedded discrete-time game used by the learner and the oracle.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::policy::StatePolicy;

/// Rates and costs of the security game.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GameParams {
    /// Arrival rate (jobs per unit time).
    pub lambda: f64,
    /// Per-server service rates (jobs per unit time).
    pub mu: Vec<f64>,
    /// Attack cost per unit time.
    pub c1: f64,
    /// Defense cost per unit time.
    pub c2: f64,
    /// Discount factor per embedded transition.
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum ParamError {
    #[error("lambda must be positive and finite (got {0})")]
    Lambda(f64),
    #[error("mu must contain at least one server")]
    NoServers,
    #[error("mu[{index}] must be positive and finite (got {value})")]
    ServiceRate { index: usize, value: f64 },
    #[error("c1 must be positive and finite (got {0})")]
    AttackCost(f64),
    #[error("c2 must be positive and finite (got {0})")]
    DefenseCost(f64),
    #[error("gamma must lie in (0, 1) (got {0})")]
    Gamma(f64),
    #[error("lambda >= sum(mu): {lambda} >= {capacity}, system is not stabilizable")]
    Unstabilizable { lambda: f64, capacity: f64 },
}

impl ParamError {
    /// Name of the configuration field the violated constraint concerns.
    pub fn field(&self) -> &'static str {
        match self {
            ParamError::Lambda(_) | ParamError::Unstabilizable { .. } => "lambda",
            ParamError::NoServers | ParamError::ServiceRate { .. } => "mu",
            ParamError::AttackCost(_) => "c1",
            ParamError::DefenseCost(_) => "c2",
            ParamError::Gamma(_) => "gamma",
        }
    }
}

fn positive(v: f64) -> bool {
    v.is_finite() && v > 0.0
}

impl GameParams {
    /// The three-server experiment: lambda 5, mu (2, 3, 4), c1 8, c2 6, gamma 0.9.
    pub fn three_server() -> Self {
        GameParams { lambda: 5.0, mu: vec![2.0, 3.0, 4.0], c1: 8.0, c2: 6.0, gamma: 0.9 }
    }

    /// The six-server experiment: mu (2, 3, 4, 2, 0.5, 1), other constants as above.
    pub fn six_server() -> Self {
        GameParams { mu: vec![2.0, 3.0, 4.0, 2.0, 0.5, 1.0], ..Self::three_server() }
    }

    pub fn servers(&self) -> usize {
        self.mu.len()
    }

    pub fn capacity(&self) -> f64 {
        self.mu.iter().sum()
    }

    pub fn validate(&self) -> Result<(), ParamError> {
        if !positive(self.lambda) {
            return Err(ParamError::Lambda(self.lambda));
        }
        if self.mu.is_empty() {
            return Err(ParamError::NoServers);
        }
        for (index, &value) in self.mu.iter().enumerate() {
            if !positive(value) {
                return Err(ParamError::ServiceRate { index, value });
            }
        }
        if !positive(self.c1) {
            return Err(ParamError::AttackCost(self.c1));
        }
        if !positive(self.c2) {
            return Err(ParamError::DefenseCost(self.c2));
        }
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(ParamError::Gamma(self.gamma));
        }
        let capacity = self.capacity();
        if self.lambda >= capacity {
            return Err(ParamError::Unstabilizable { lambda: self.lambda, capacity });
        }
        Ok(())
    }
}

/// Queue lengths (jobs waiting or in service) at each server.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TrafficState(Vec<u32>);

impl TrafficState {
    pub fn new(q: Vec<u32>) -> Self {
        TrafficState(q)
    }

    pub fn zeros(m: usize) -> Self {
        TrafficState(vec![0; m])
    }

    pub fn servers(&self) -> usize {
        self.0.len()
    }

    pub fn queues(&self) -> &[u32] {
        &self.0
    }

    pub fn get(&self, i: usize) -> u32 {
        self.0[i]
    }

    pub fn l1(&self) -> u64 {
        self.0.iter().map(|&q| u64::from(q)).sum()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|&q| q == 0)
    }

    /// Indices of the shortest queues, ascending.
    pub fn argmin(&self) -> Vec<usize> {
        let lo = self.0.iter().copied().min().unwrap_or(0);
        (0..self.0.len()).filter(|&i| self.0[i] == lo).collect()
    }

    /// Indices of the longest queues, ascending.
    pub fn argmax(&self) -> Vec<usize> {
        let hi = self.0.iter().copied().max().unwrap_or(0);
        (0..self.0.len()).filter(|&i| self.0[i] == hi).collect()
    }

    /// Copy with server `i` incremented.
    pub fn arrival(&self, i: usize) -> Self {
        let mut q = self.0.clone();
        q[i] += 1;
        TrafficState(q)
    }

    /// Copy with server `i` decremented. Panics on an empty queue.
    pub fn departure(&self, i: usize) -> Self {
        let mut q = self.0.clone();
        assert!(q[i] > 0, "departure from empty server {i}");
        q[i] -= 1;
        TrafficState(q)
    }
}

impl From<Vec<u32>> for TrafficState {
    fn from(q: Vec<u32>) -> Self {
        TrafficState(q)
    }
}

impl fmt::Display for TrafficState {
    /// Colon-separated queue lengths, e.g. `2:1:3`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, q) in self.0.iter().enumerate() {
            if k > 0 {
                f.write_str(":")?;
            }
            write!(f, "{q}")?;
        }
        Ok(())
    }
}

impl std::str::FromStr for TrafficState {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.split(':').map(str::parse).collect::<Result<Vec<u32>, _>>().map(TrafficState)
    }
}

/// Attacker action `a` and defender action `b`, each in {0, 1}.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ActionPair {
    pub attack: bool,
    pub defend: bool,
}

impl ActionPair {
    /// All four pairs in (a, b) lexicographic order; `index()` is the position.
    pub const ALL: [ActionPair; 4] = [
        ActionPair { attack: false, defend: false },
        ActionPair { attack: false, defend: true },
        ActionPair { attack: true, defend: false },
        ActionPair { attack: true, defend: true },
    ];

    pub fn new(a: u8, b: u8) -> Self {
        assert!(a <= 1 && b <= 1, "actions are binary");
        ActionPair { attack: a == 1, defend: b == 1 }
    }

    pub fn a(self) -> f64 {
        f64::from(u8::from(self.attack))
    }

    pub fn b(self) -> f64 {
        f64::from(u8::from(self.defend))
    }

    pub fn index(self) -> usize {
        2 * usize::from(self.attack) + usize::from(self.defend)
    }

    /// An undefended attack sends the arrival to the longest queue.
    pub fn misroutes(self) -> bool {
        self.attack && !self.defend
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EventKind {
    /// Arrival routed to the given server.
    Arrival(usize),
    /// Service completion at the given server.
    Departure(usize),
}

/// One jump of the continuous-time chain together with its sojourn time.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransitionEvent {
    pub kind: EventKind,
    pub dt: f64,
}

/// Attacker reward (defender cost) rate: `|x|_1 - c1 a + c2 b`.
pub fn instantaneous_reward(x: &TrafficState, pair: ActionPair, params: &GameParams) -> f64 {
    x.l1() as f64 - params.c1 * pair.a() + params.c2 * pair.b()
}

pub fn active_server_count(x: &TrafficState) -> usize {
    x.queues().iter().filter(|&&q| q >= 1).count()
}

/// Total jump rate out of `x`: arrivals plus every busy server.
pub fn total_event_rate(x: &TrafficState, params: &GameParams) -> f64 {
    params.lambda + x.queues().iter().zip(&params.mu).filter(|(&q, _)| q >= 1).map(|(_, &m)| m).sum::<f64>()
}

pub fn expected_sojourn(x: &TrafficState, params: &GameParams) -> f64 {
    1.0 / total_event_rate(x, params)
}

/// One-step cost of the embedded game: reward rate times the expected
/// sojourn in `x`.
pub fn embedded_reward(x: &TrafficState, pair: ActionPair, params: &GameParams) -> f64 {
    instantaneous_reward(x, pair, params) * expected_sojourn(x, params)
}

/// Candidate servers for an arrival under `pair`; the job goes to one of
/// them uniformly at random.
pub fn route_candidates(x: &TrafficState, pair: ActionPair) -> Vec<usize> {
    if pair.misroutes() {
        x.argmax()
    } else {
        x.argmin()
    }
}

pub fn route_target<R: Rng + ?Sized>(x: &TrafficState, pair: ActionPair, rng: &mut R) -> usize {
    let candidates = route_candidates(x, pair);
    if candidates.len() == 1 {
        candidates[0]
    } else {
        candidates[rng.random_range(0..candidates.len())]
    }
}

/// Samples the exponential race between the arrival stream and the busy
/// servers.
pub fn sample_transition<R: Rng + ?Sized>(
    x: &TrafficState,
    pair: ActionPair,
    params: &GameParams,
    rng: &mut R,
) -> (TransitionEvent, TrafficState) {
    let rate = total_event_rate(x, params);
    let dt = Exp::new(rate).expect("event rate is positive").sample(rng);
    let mut u = rng.random::<f64>() * rate;
    if u < params.lambda {
        let i = route_target(x, pair, rng);
        return (TransitionEvent { kind: EventKind::Arrival(i), dt }, x.arrival(i));
    }
    u -= params.lambda;
    let mut last_busy = None;
    for (i, (&q, &m)) in x.queues().iter().zip(&params.mu).enumerate() {
        if q == 0 {
            continue;
        }
        last_busy = Some(i);
        if u < m {
            return (TransitionEvent { kind: EventKind::Departure(i), dt }, x.departure(i));
        }
        u -= m;
    }
    // Rounding can leave u a hair above the last busy server's band.
    let i = last_busy.expect("departure drawn with no busy server");
    (TransitionEvent { kind: EventKind::Departure(i), dt }, x.departure(i))
}

/// Exact jump-chain distribution of the successor of `x` under `pair`.
pub fn next_state_distribution(x: &TrafficState, pair: ActionPair, params: &GameParams) -> Vec<(TrafficState, f64)> {
    let rate = total_event_rate(x, params);
    let candidates = route_candidates(x, pair);
    let share = params.lambda / rate / candidates.len() as f64;
    let mut out: Vec<(TrafficState, f64)> = candidates.into_iter().map(|i| (x.arrival(i), share)).collect();
    for (i, (&q, &m)) in x.queues().iter().zip(&params.mu).enumerate() {
        if q >= 1 {
            out.push((x.departure(i), m / rate));
        }
    }
    out
}

/// Transition rates of the continuous-time chain under a mixed policy pair.
///
/// Arrivals reach the shortest queues at rate `(alpha0 + alpha1 beta1) lambda`
/// and the longest at `alpha1 beta0 lambda`, each split evenly over ties.
/// When shortest and longest coincide both contributions land on the same
/// successor and are summed.
pub fn marginal_rates(
    x: &TrafficState,
    attacker: &dyn StatePolicy,
    defender: &dyn StatePolicy,
    params: &GameParams,
) -> BTreeMap<TrafficState, f64> {
    let alpha1 = attacker.prob_one(x);
    let beta1 = defender.prob_one(x);
    let correct = (1.0 - alpha1) + alpha1 * beta1;
    let misrouted = alpha1 * (1.0 - beta1);

    let mut rates = BTreeMap::new();
    let lo = x.argmin();
    let hi = x.argmax();
    for &i in &lo {
        *rates.entry(x.arrival(i)).or_insert(0.0) += correct * params.lambda / lo.len() as f64;
    }
    for &i in &hi {
        *rates.entry(x.arrival(i)).or_insert(0.0) += misrouted * params.lambda / hi.len() as f64;
    }
    for (i, (&q, &m)) in x.queues().iter().zip(&params.mu).enumerate() {
        if q >= 1 {
            *rates.entry(x.departure(i)).or_insert(0.0) += m;
        }
    }
    rates
}
