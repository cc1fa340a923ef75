//! Behavior and target policies, and the per-state 2x2 zero-sum game.

use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureBasis;
use crate::model::{ActionPair, GameParams, TrafficState};
use crate::space::TruncatedSpace;

/// A distribution over {0, 1}, stored as the probability of action 1.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MixedAction(f64);

impl MixedAction {
    pub const ZERO: MixedAction = MixedAction(0.0);
    pub const ONE: MixedAction = MixedAction(1.0);

    /// Clamps tiny rounding excursions outside [0, 1]; panics on NaN.
    pub fn new(p1: f64) -> Self {
        assert!(!p1.is_nan(), "mixed action probability is NaN");
        MixedAction(p1.clamp(0.0, 1.0))
    }

    pub fn p1(self) -> f64 {
        self.0
    }

    pub fn p0(self) -> f64 {
        1.0 - self.0
    }

    /// Probability of `action` (0 or 1).
    pub fn prob(self, action: bool) -> f64 {
        if action {
            self.0
        } else {
            1.0 - self.0
        }
    }
}

/// A state-feedback mixed strategy over {0, 1}.
pub trait StatePolicy: Send + Sync {
    fn prob_one(&self, x: &TrafficState) -> f64;

    fn mixed(&self, x: &TrafficState) -> MixedAction {
        MixedAction::new(self.prob_one(x))
    }
}

impl<P: StatePolicy + ?Sized> StatePolicy for &P {
    fn prob_one(&self, x: &TrafficState) -> f64 {
        (**self).prob_one(x)
    }
}

impl<P: StatePolicy + ?Sized> StatePolicy for Arc<P> {
    fn prob_one(&self, x: &TrafficState) -> f64 {
        (**self).prob_one(x)
    }
}

impl<P: StatePolicy + ?Sized> StatePolicy for Box<P> {
    fn prob_one(&self, x: &TrafficState) -> f64 {
        (**self).prob_one(x)
    }
}

/// Exploratory attacker: attacks with probability `C0 exp(-|x|_1 / 2)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackerBehavior {
    pub c0: f64,
}

impl AttackerBehavior {
    pub fn new(c0: f64) -> Self {
        AttackerBehavior { c0 }
    }
}

impl StatePolicy for AttackerBehavior {
    fn prob_one(&self, x: &TrafficState) -> f64 {
        self.c0 * (-(x.l1() as f64) / 2.0).exp()
    }
}

/// Exploratory defender: defends with probability `1 - exp(-|x|_1 / 2)`,
/// or one half in the empty system.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DefenderBehavior;

impl StatePolicy for DefenderBehavior {
    fn prob_one(&self, x: &TrafficState) -> f64 {
        if x.is_zero() {
            0.5
        } else {
            -(-(x.l1() as f64) / 2.0).exp_m1()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UniformPolicy;

impl StatePolicy for UniformPolicy {
    fn prob_one(&self, _x: &TrafficState) -> f64 {
        0.5
    }
}

/// Always plays the given action.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PurePolicy(pub bool);

impl StatePolicy for PurePolicy {
    fn prob_one(&self, _x: &TrafficState) -> f64 {
        f64::from(u8::from(self.0))
    }
}

/// Dense per-state table over a truncated box. States outside the box are
/// looked up at their coordinate-wise clamp.
#[derive(Clone, Debug, PartialEq)]
pub struct TablePolicy {
    space: TruncatedSpace,
    p1: Vec<f64>,
}

impl TablePolicy {
    pub fn new(space: TruncatedSpace, p1: Vec<f64>) -> Self {
        assert_eq!(p1.len(), space.len(), "table length must match the state space");
        TablePolicy { space, p1 }
    }

    pub fn space(&self) -> &TruncatedSpace {
        &self.space
    }

    pub fn values(&self) -> &[f64] {
        &self.p1
    }
}

impl StatePolicy for TablePolicy {
    fn prob_one(&self, x: &TrafficState) -> f64 {
        self.p1[self.space.index_clamped(x)]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Attacker,
    Defender,
}

/// Equilibrium strategy of the matrix game built from `Q_w(x, ., .)`.
#[derive(Clone, Debug)]
pub struct GreedyPolicy {
    pub basis: FeatureBasis,
    pub weights: Vec<f64>,
    pub side: Side,
}

impl StatePolicy for GreedyPolicy {
    fn prob_one(&self, x: &TrafficState) -> f64 {
        let game = MatrixGame2x2::from_fn(|pair| self.basis.q_value(&self.weights, x, pair));
        let (pi, sigma) = game.equilibrium();
        match self.side {
            Side::Attacker => pi.p1(),
            Side::Defender => sigma.p1(),
        }
    }
}

/// Attacker and defender strategies used together.
pub struct PolicyPair {
    pub attacker: Box<dyn StatePolicy>,
    pub defender: Box<dyn StatePolicy>,
}

impl PolicyPair {
    pub fn new(attacker: impl StatePolicy + 'static, defender: impl StatePolicy + 'static) -> Self {
        PolicyPair { attacker: Box::new(attacker), defender: Box::new(defender) }
    }

    /// The exploratory pair used for off-policy training.
    pub fn behavior(c0: f64) -> Self {
        Self::new(AttackerBehavior::new(c0), DefenderBehavior)
    }

    pub fn uniform() -> Self {
        Self::new(UniformPolicy, UniformPolicy)
    }

    /// Joint probability of `pair` at `x`.
    pub fn joint(&self, x: &TrafficState, pair: ActionPair) -> f64 {
        self.attacker.mixed(x).prob(pair.attack) * self.defender.mixed(x).prob(pair.defend)
    }
}

#[derive(Clone, Debug, PartialEq, Error)]
pub enum BehaviorError {
    #[error("C0 must satisfy 0 < C0 < min(1, (sum(mu) - lambda) / lambda) = {bound} (got {c0})")]
    OutOfRange { c0: f64, bound: f64 },
}

/// Upper bound on the behavior constant: `min(1, (sum(mu) - lambda) / lambda)`.
pub fn c0_bound(params: &GameParams) -> f64 {
    ((params.capacity() - params.lambda) / params.lambda).min(1.0)
}

pub fn validate_c0(params: &GameParams, c0: f64) -> Result<(), BehaviorError> {
    let bound = c0_bound(params);
    if c0 > 0.0 && c0 < bound {
        Ok(())
    } else {
        Err(BehaviorError::OutOfRange { c0, bound })
    }
}

/// Zero-sum 2x2 game; `payoff[a][b]` is paid by the defender (column,
/// minimizer) to the attacker (row, maximizer).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatrixGame2x2 {
    pub payoff: [[f64; 2]; 2],
}

impl MatrixGame2x2 {
    pub fn new(payoff: [[f64; 2]; 2]) -> Self {
        MatrixGame2x2 { payoff }
    }

    pub fn from_fn(mut q: impl FnMut(ActionPair) -> f64) -> Self {
        let mut payoff = [[0.0; 2]; 2];
        for pair in ActionPair::ALL {
            payoff[usize::from(pair.attack)][usize::from(pair.defend)] = q(pair);
        }
        MatrixGame2x2 { payoff }
    }

    fn tie_tol(&self) -> f64 {
        let scale = self.payoff.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()));
        1e-12 * (1.0 + scale)
    }

    /// Attacker's expected payoff from row `a` against defender mixture `sigma`.
    pub fn row_payoff(&self, a: usize, sigma: MixedAction) -> f64 {
        sigma.p0() * self.payoff[a][0] + sigma.p1() * self.payoff[a][1]
    }

    /// Defender's expected loss from column `b` against attacker mixture `pi`.
    pub fn column_payoff(&self, b: usize, pi: MixedAction) -> f64 {
        pi.p0() * self.payoff[0][b] + pi.p1() * self.payoff[1][b]
    }

    /// Defender's minimax strategy and the game value.
    ///
    /// The upper envelope `max_a` of two lines in `sigma(1)` is minimized at a
    /// pure strategy or where the lines cross. Among optimal strategies the
    /// order of preference is pure 0, pure 1, then the crossing.
    pub fn solve_defender(&self) -> (MixedAction, f64) {
        let q = &self.payoff;
        let envelope = |s: MixedAction| self.row_payoff(0, s).max(self.row_payoff(1, s));
        let mut candidates = vec![MixedAction::ZERO, MixedAction::ONE];
        let denom = q[0][0] - q[1][0] - q[0][1] + q[1][1];
        if denom != 0.0 {
            let s = (q[0][0] - q[1][0]) / denom;
            if (0.0..=1.0).contains(&s) {
                candidates.push(MixedAction::new(s));
            }
        }
        pick(&candidates, envelope, self.tie_tol(), |v, best| v < best)
    }

    /// Attacker's maximin strategy and the game value.
    pub fn solve_attacker(&self) -> (MixedAction, f64) {
        let q = &self.payoff;
        let envelope = |p: MixedAction| self.column_payoff(0, p).min(self.column_payoff(1, p));
        let mut candidates = vec![MixedAction::ZERO, MixedAction::ONE];
        let denom = q[0][0] - q[0][1] - q[1][0] + q[1][1];
        if denom != 0.0 {
            let p = (q[0][0] - q[0][1]) / denom;
            if (0.0..=1.0).contains(&p) {
                candidates.push(MixedAction::new(p));
            }
        }
        pick(&candidates, envelope, self.tie_tol(), |v, best| v > best)
    }

    /// Equilibrium mixtures `(pi, sigma)`.
    pub fn equilibrium(&self) -> (MixedAction, MixedAction) {
        (self.solve_attacker().0, self.solve_defender().0)
    }

    pub fn value(&self) -> f64 {
        self.solve_defender().1
    }

    /// Attacker's best pure reply to `sigma`; ties go to `a = 0`.
    pub fn best_response_attacker(&self, sigma: MixedAction) -> (bool, f64) {
        let (v0, v1) = (self.row_payoff(0, sigma), self.row_payoff(1, sigma));
        if v1 > v0 + self.tie_tol() {
            (true, v1)
        } else {
            (false, v0)
        }
    }

    /// Defender's best pure reply to `pi`; ties go to `b = 0`.
    pub fn best_response_defender(&self, pi: MixedAction) -> (bool, f64) {
        let (v0, v1) = (self.column_payoff(0, pi), self.column_payoff(1, pi));
        if v1 < v0 - self.tie_tol() {
            (true, v1)
        } else {
            (false, v0)
        }
    }
}

// First candidate whose objective is within `tol` of the optimum.
fn pick(
    candidates: &[MixedAction],
    objective: impl Fn(MixedAction) -> f64,
    tol: f64,
    better: impl Fn(f64, f64) -> bool,
) -> (MixedAction, f64) {
    let values: Vec<f64> = candidates.iter().map(|&c| objective(c)).collect();
    let best = values.iter().copied().fold(values[0], |b, v| if better(v, b) { v } else { b });
    let k = values.iter().position(|&v| (v - best).abs() <= tol).unwrap_or(0);
    (candidates[k], values[k])
}

/// Equilibrium pair `(pi_hat, sigma_hat)` of the matrix game `q(x, ., .)`.
pub fn greedy_policy_pair(
    q: impl Fn(&TrafficState, ActionPair) -> f64,
    x: &TrafficState,
) -> (MixedAction, MixedAction) {
    MatrixGame2x2::from_fn(|pair| q(x, pair)).equilibrium()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn st(q: &[u32]) -> TrafficState {
        TrafficState::new(q.to_vec())
    }

    // Brute-force defender value on a sigma grid.
    fn grid_value(g: &MatrixGame2x2, steps: usize) -> (f64, f64) {
        let mut best = (f64::INFINITY, 0.0);
        for k in 0..=steps {
            let s = MixedAction::new(k as f64 / steps as f64);
            let v = g.row_payoff(0, s).max(g.row_payoff(1, s));
            if v < best.0 {
                best = (v, s.p1());
            }
        }
        best
    }

    #[test]
    fn behavior_policies() {
        assert!((AttackerBehavior::new(0.6).prob_one(&st(&[0, 0, 0])) - 0.6).abs() < 1e-15);
        assert!((AttackerBehavior::new(0.6).prob_one(&st(&[2, 1, 3])) - 0.0298722).abs() < 1e-7);
        assert_eq!(DefenderBehavior.prob_one(&st(&[0, 0, 0])), 0.5);
        assert!((DefenderBehavior.prob_one(&st(&[2, 1, 3])) - 0.9502129).abs() < 1e-7);

        let mut prev_a = 1.0;
        let mut prev_d = 0.0;
        for n in 1..=60 {
            let x = st(&[n, 0, 0]);
            let a = AttackerBehavior::new(0.6).prob_one(&x);
            let d = DefenderBehavior.prob_one(&x);
            assert!(a < prev_a && d > prev_d);
            prev_a = a;
            prev_d = d;
        }
        assert!(prev_a < 1e-12 && 1.0 - prev_d < 1e-12);
    }

    #[test]
    fn behavior_pair_is_strictly_mixed() {
        for n in 0..=60u32 {
            for x in [st(&[n, 0, 0]), st(&[n / 3, n / 3, n - 2 * (n / 3)])] {
                let a = AttackerBehavior::new(0.6).prob_one(&x);
                let d = DefenderBehavior.prob_one(&x);
                assert!(a > 0.0 && a < 1.0, "alpha at {x}");
                assert!(d > 0.0 && d < 1.0, "beta at {x}");
            }
        }
    }

    #[test]
    fn c0_validation() {
        let three = GameParams::three_server();
        assert!((c0_bound(&three) - 0.8).abs() < 1e-15);
        assert!(validate_c0(&three, 0.6).is_ok());
        assert!(validate_c0(&three, 0.9).is_err());
        assert!(validate_c0(&three, 0.0).is_err());
        let six = GameParams::six_server();
        assert_eq!(c0_bound(&six), 1.0);
        assert!(validate_c0(&six, 0.6).is_ok());
    }

    #[test]
    fn mixed_game_solution() {
        let g = MatrixGame2x2::new([[0.0, 6.0], [8.0, -2.0]]);
        let (sigma, value) = g.solve_defender();
        assert!((sigma.p1() - 0.5).abs() < 1e-15);
        assert!((value - 3.0).abs() < 1e-12);
        let (gv, gs) = grid_value(&g, 10_000);
        assert!((gv - value).abs() < 1e-3 && (gs - 0.5).abs() < 1e-3);

        // Attacker mixture from the crossing of the two column lines:
        // 8q = 6 - 8q gives q = 3/8.
        let (pi, v) = g.solve_attacker();
        assert!((pi.p1() - 0.375).abs() < 1e-15);
        assert!((v - 3.0).abs() < 1e-12);

        assert_eq!(g.best_response_attacker(MixedAction::ZERO), (true, 8.0));
        assert_eq!(g.best_response_attacker(MixedAction::ONE), (false, 6.0));
        let (a, v) = g.best_response_attacker(MixedAction::new(0.5));
        assert!(!a && (v - 3.0).abs() < 1e-12);
    }

    #[test]
    fn constant_and_dominated_games() {
        let g = MatrixGame2x2::new([[2.5, 2.5], [2.5, 2.5]]);
        assert_eq!(g.solve_defender(), (MixedAction::ZERO, 2.5));
        assert_eq!(g.solve_attacker(), (MixedAction::ZERO, 2.5));

        // column 0 no worse for the defender in every row
        let g = MatrixGame2x2::new([[1.0, 4.0], [3.0, 3.5]]);
        assert_eq!(g.solve_defender(), (MixedAction::ZERO, 3.0));

        // pure saddle at (a=0, b=0)
        let g = MatrixGame2x2::new([[1.0, 2.0], [0.0, 3.0]]);
        let (pi, sigma) = g.equilibrium();
        assert_eq!((pi, sigma), (MixedAction::ZERO, MixedAction::ZERO));
        // enumerate pure profiles: (0,0) is the only saddle
        let q = g.payoff;
        for a in 0..2 {
            for b in 0..2 {
                let saddle = q[a][b] >= q[1 - a][b] && q[a][b] <= q[a][1 - b];
                assert_eq!(saddle, a == 0 && b == 0);
            }
        }
    }

    #[test]
    fn greedy_pair_from_q() {
        let table = [[0.0, 6.0], [8.0, -2.0]];
        let q = |_x: &TrafficState, p: ActionPair| table[usize::from(p.attack)][usize::from(p.defend)];
        let (pi, sigma) = greedy_policy_pair(q, &st(&[1, 1]));
        assert!((sigma.p1() - 0.5).abs() < 1e-15);
        assert!((pi.p1() - 0.375).abs() < 1e-15);
        let g = MatrixGame2x2::new(table);
        // no profitable deviation on a grid of mixtures
        for k in 0..=1000 {
            let m = MixedAction::new(k as f64 / 1000.0);
            let att = m.p0() * g.row_payoff(0, sigma) + m.p1() * g.row_payoff(1, sigma);
            let def = m.p0() * g.column_payoff(0, pi) + m.p1() * g.column_payoff(1, pi);
            assert!(att <= 3.0 + 1e-12 && def >= 3.0 - 1e-12);
        }
    }

    fn game() -> impl Strategy<Value = MatrixGame2x2> {
        proptest::array::uniform2(proptest::array::uniform2(-10.0f64..10.0)).prop_map(MatrixGame2x2::new)
    }

    proptest! {
        #[test]
        fn minimax_equals_maximin(g in game()) {
            let (_, up) = g.solve_defender();
            let (_, low) = g.solve_attacker();
            prop_assert!((up - low).abs() < 1e-9);
        }

        #[test]
        fn no_profitable_pure_deviation(g in game()) {
            let (pi, sigma) = g.equilibrium();
            let v = g.value();
            for a in 0..2 {
                prop_assert!(g.row_payoff(a, sigma) <= v + 1e-9);
            }
            for b in 0..2 {
                prop_assert!(g.column_payoff(b, pi) >= v - 1e-9);
            }
        }

        #[test]
        fn affine_invariance(g in game(), u in 0.1f64..5.0, v in -5.0f64..5.0) {
            let (s, val) = g.solve_defender();
            let h = MatrixGame2x2::new(g.payoff.map(|row| row.map(|q| u * q + v)));
            let (s2, val2) = h.solve_defender();
            prop_assert!((val2 - (u * val + v)).abs() < 1e-9 * (1.0 + val2.abs()));
            let support = |m: MixedAction| (m.p0() > 1e-9, m.p1() > 1e-9);
            // supports agree unless the game is degenerate at the tie threshold
            let envelope = |m: MixedAction| g.row_payoff(0, m).max(g.row_payoff(1, m));
            prop_assert!(support(s) == support(s2) || (envelope(s2) - val).abs() < 1e-9);
        }
    }
}
