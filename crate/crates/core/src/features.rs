//! Linear feature bases for the approximate Q function.
//!
//! Every basis is built from per-server features of the routing-adjusted
//! load `s_i = x_i + delta_i(x, a, b)` and the two actions, so block `i` of
//! the feature vector belongs to server `i`. `delta_i` marks the server that
//! would receive the next arrival: the longest queue under an undefended
//! attack, the shortest otherwise, lowest index on ties.

use serde::{Deserialize, Serialize};

use crate::model::{ActionPair, TrafficState};
use crate::space::TruncatedSpace;

/// One per-server feature and its derivative in `s`.
#[derive(Clone, Copy, Debug)]
pub struct ServerFeature {
    pub name: &'static str,
    pub value: fn(s: f64, a: f64, b: f64) -> f64,
    pub ds: fn(s: f64, a: f64, b: f64) -> f64,
}

pub const INTERCEPT: ServerFeature = ServerFeature { name: "intercept", value: |_, _, _| 1.0, ds: |_, _, _| 0.0 };
pub const LOAD: ServerFeature = ServerFeature { name: "load", value: |s, _, _| s, ds: |_, _, _| 1.0 };
pub const LOAD_SQ: ServerFeature = ServerFeature { name: "load_sq", value: |s, _, _| s * s, ds: |s, _, _| 2.0 * s };
pub const ATTACK: ServerFeature = ServerFeature { name: "attack", value: |_, a, _| a, ds: |_, _, _| 0.0 };
pub const DEFEND: ServerFeature = ServerFeature { name: "defend", value: |_, _, b| b, ds: |_, _, _| 0.0 };

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BasisKind {
    /// `(1, s, a, b)` per server.
    Amq1,
    /// `(1, s, s^2, a, b)` per server.
    Amq2,
    Custom,
}

impl BasisKind {
    pub fn parse(name: &str) -> Option<Self> {
        match name {
            "amq1" => Some(BasisKind::Amq1),
            "amq2" => Some(BasisKind::Amq2),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BasisKind::Amq1 => "amq1",
            BasisKind::Amq2 => "amq2",
            BasisKind::Custom => "custom",
        }
    }
}

#[derive(Clone, Debug)]
pub struct FeatureBasis {
    m: usize,
    kind: BasisKind,
    block: Vec<ServerFeature>,
    epsilon: f64,
}

impl FeatureBasis {
    pub fn amq1(m: usize) -> Self {
        Self::build(m, BasisKind::Amq1, vec![INTERCEPT, LOAD, ATTACK, DEFEND])
    }

    pub fn amq2(m: usize) -> Self {
        Self::build(m, BasisKind::Amq2, vec![INTERCEPT, LOAD, LOAD_SQ, ATTACK, DEFEND])
    }

    pub fn custom(m: usize, block: Vec<ServerFeature>) -> Self {
        assert!(!block.is_empty(), "a basis needs at least one feature per server");
        Self::build(m, BasisKind::Custom, block)
    }

    pub fn of_kind(kind: BasisKind, m: usize) -> Option<Self> {
        match kind {
            BasisKind::Amq1 => Some(Self::amq1(m)),
            BasisKind::Amq2 => Some(Self::amq2(m)),
            BasisKind::Custom => None,
        }
    }

    fn build(m: usize, kind: BasisKind, block: Vec<ServerFeature>) -> Self {
        assert!(m >= 1);
        FeatureBasis { m, kind, block, epsilon: 1.0 }
    }

    /// Multiplies every feature by `epsilon`.
    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        assert!(epsilon.is_finite() && epsilon > 0.0, "epsilon_scale must be positive");
        self.epsilon = epsilon;
        self
    }

    pub fn servers(&self) -> usize {
        self.m
    }

    /// Features per server.
    pub fn per_server(&self) -> usize {
        self.block.len()
    }

    pub fn dim(&self) -> usize {
        self.m * self.block.len()
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn feature_names(&self) -> Vec<&'static str> {
        self.block.iter().map(|f| f.name).collect()
    }

    /// Position of the named per-server feature within a block.
    pub fn slot(&self, name: &str) -> Option<usize> {
        self.block.iter().position(|f| f.name == name)
    }

    pub fn phi(&self, x: &TrafficState, pair: ActionPair) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.phi_into(x, pair, &mut out);
        out
    }

    pub fn phi_into(&self, x: &TrafficState, pair: ActionPair, out: &mut [f64]) {
        debug_assert_eq!(x.servers(), self.m);
        debug_assert_eq!(out.len(), self.dim());
        let hot = delta_index(x, pair);
        let (a, b) = (pair.a(), pair.b());
        let d = self.block.len();
        for (i, chunk) in out.chunks_exact_mut(d).enumerate() {
            let s = f64::from(x.get(i)) + if i == hot { 1.0 } else { 0.0 };
            for (slot, f) in chunk.iter_mut().zip(&self.block) {
                *slot = self.epsilon * (f.value)(s, a, b);
            }
        }
    }

    /// Entrywise 1-norm of the Jacobian of `phi` in the continuous relaxation
    /// of `x`, with `delta` held fixed.
    pub fn jacobian_l1(&self, x: &TrafficState, pair: ActionPair) -> f64 {
        let hot = delta_index(x, pair);
        let (a, b) = (pair.a(), pair.b());
        (0..self.m)
            .map(|i| {
                let s = f64::from(x.get(i)) + if i == hot { 1.0 } else { 0.0 };
                self.block.iter().map(|f| (self.epsilon * (f.ds)(s, a, b)).abs()).sum::<f64>()
            })
            .sum()
    }

    /// `Q_w(x, a, b) = phi(x, a, b) . w`.
    pub fn q_value(&self, w: &[f64], x: &TrafficState, pair: ActionPair) -> f64 {
        assert_eq!(w.len(), self.dim(), "weight dimension mismatch");
        let hot = delta_index(x, pair);
        let (a, b) = (pair.a(), pair.b());
        let d = self.block.len();
        let mut acc = 0.0;
        for (i, wi) in w.chunks_exact(d).enumerate() {
            let s = f64::from(x.get(i)) + if i == hot { 1.0 } else { 0.0 };
            for (f, &wij) in self.block.iter().zip(wi) {
                acc += (f.value)(s, a, b) * wij;
            }
        }
        self.epsilon * acc
    }
}

/// Server receiving the routing indicator `delta_i = 1`.
pub fn delta_index(x: &TrafficState, pair: ActionPair) -> usize {
    let q = x.queues();
    let mut best = 0;
    for i in 1..q.len() {
        let better = if pair.misroutes() { q[i] > q[best] } else { q[i] < q[best] };
        if better {
            best = i;
        }
    }
    best
}

/// The indicator vector `(delta_1, ..., delta_m)`.
pub fn delta(x: &TrafficState, pair: ActionPair) -> Vec<u8> {
    let hot = delta_index(x, pair);
    (0..x.servers()).map(|i| u8::from(i == hot)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubexpViolation {
    pub server: usize,
    pub state: TrafficState,
    pub attack: bool,
    pub defend: bool,
    /// Sum of the server's features.
    pub block_sum: f64,
    /// `exp(x_i)`.
    pub bound: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SubexpAudit {
    pub cap: u32,
    pub epsilon: f64,
    pub violations: Vec<SubexpViolation>,
    /// Largest scale for which `0 <= eps * sum_j phi_ij <= exp(x_i)` holds on
    /// the whole box, or `None` when some block sum is negative.
    pub max_admissible_epsilon: Option<f64>,
}

impl SubexpAudit {
    pub fn violations_for(&self, server: usize) -> impl Iterator<Item = &SubexpViolation> {
        self.violations.iter().filter(move |v| v.server == server)
    }
}

/// Checks `0 <= sum_j phi_ij(x, a, b) <= exp(x_i)` over the box `{0..=cap}^m`.
pub fn audit_subexponential(basis: &FeatureBasis, cap: u32) -> SubexpAudit {
    let space = TruncatedSpace::new(cap, basis.servers());
    let d = basis.per_server();
    let mut violations = Vec::new();
    let mut admissible = Some(f64::INFINITY);
    for x in space.states() {
        for pair in ActionPair::ALL {
            let phi = basis.phi(&x, pair);
            for (i, block) in phi.chunks_exact(d).enumerate() {
                let sum: f64 = block.iter().sum();
                let bound = f64::from(x.get(i)).exp();
                if !(0.0..=bound).contains(&sum) {
                    violations.push(SubexpViolation {
                        server: i,
                        state: x.clone(),
                        attack: pair.attack,
                        defend: pair.defend,
                        block_sum: sum,
                        bound,
                    });
                }
                let unit = sum / basis.epsilon();
                admissible = match admissible {
                    _ if unit < 0.0 => None,
                    Some(e) if unit > 0.0 => Some(e.min(bound / unit)),
                    other => other,
                };
            }
        }
    }
    SubexpAudit { cap, epsilon: basis.epsilon(), violations, max_admissible_epsilon: admissible }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradientAudit {
    pub cap: u32,
    /// Smallest shell `B` such that `|dphi/dx|_1 < |phi|_1` at every scanned
    /// state with `|x|_2^2 >= B`; `None` when no shell inside the box qualifies.
    pub certified_b: Option<u64>,
    /// Largest `|x|_2^2` among scanned violators.
    pub worst_violator_shell: Option<u64>,
}

/// Scans the box for the gradient-dominance shell.
pub fn audit_gradient_dominance(basis: &FeatureBasis, cap: u32) -> GradientAudit {
    let space = TruncatedSpace::new(cap, basis.servers());
    let mut worst: Option<u64> = None;
    let mut largest_shell = 0u64;
    for x in space.states() {
        let shell: u64 = x.queues().iter().map(|&q| u64::from(q) * u64::from(q)).sum();
        largest_shell = largest_shell.max(shell);
        for pair in ActionPair::ALL {
            let grad = basis.jacobian_l1(&x, pair);
            let norm: f64 = basis.phi(&x, pair).iter().map(|v| v.abs()).sum();
            if grad >= norm {
                worst = Some(worst.map_or(shell, |w| w.max(shell)));
            }
        }
    }
    let certified_b = match worst {
        None => Some(0),
        Some(w) if w < largest_shell => Some(w + 1),
        Some(_) => None,
    };
    GradientAudit { cap, certified_b, worst_violator_shell: worst }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn st(q: &[u32]) -> TrafficState {
        TrafficState::new(q.to_vec())
    }

    #[test]
    fn routing_indicator() {
        assert_eq!(delta(&st(&[2, 1, 3]), ActionPair::new(1, 0)), vec![0, 0, 1]);
        assert_eq!(delta(&st(&[2, 1, 3]), ActionPair::new(0, 0)), vec![0, 1, 0]);
        assert_eq!(delta(&st(&[2, 2, 2]), ActionPair::new(1, 0)), vec![1, 0, 0]);
        assert_eq!(delta(&st(&[3, 1, 1]), ActionPair::new(1, 1)), vec![0, 1, 0]);
    }

    #[test]
    fn feature_vectors() {
        let x = st(&[2, 1, 3]);
        let p = ActionPair::new(1, 0);
        assert_eq!(FeatureBasis::amq1(3).phi(&x, p), vec![1., 2., 1., 0., 1., 1., 1., 0., 1., 4., 1., 0.]);
        assert_eq!(FeatureBasis::amq2(3).phi(&x, p), vec![1., 2., 4., 1., 0., 1., 1., 1., 1., 0., 1., 4., 16., 1., 0.]);
        assert_eq!(
            FeatureBasis::amq1(3).phi(&st(&[0, 0, 0]), ActionPair::new(0, 0)),
            vec![1., 1., 0., 0., 1., 0., 0., 0., 1., 0., 0., 0.]
        );
    }

    #[test]
    fn q_value_picks_out_weight() {
        let basis = FeatureBasis::amq1(3);
        let mut w = vec![0.0; 12];
        assert_eq!(basis.q_value(&w, &st(&[2, 1, 3]), ActionPair::new(0, 0)), 0.0);
        w[1] = 1.0;
        assert_eq!(basis.q_value(&w, &st(&[2, 1, 3]), ActionPair::new(0, 0)), 2.0);
    }

    // Independent scan of the subexponential bound for a block (1, s, a, b).
    #[test]
    fn subexponential_audit_amq1() {
        let audit = audit_subexponential(&FeatureBasis::amq1(3), 20);
        let hit = audit
            .violations
            .iter()
            .any(|v| v.state.get(v.server) == 0 && v.attack && v.defend && v.block_sum == 3.0 && v.bound == 1.0);
        assert!(hit);
        let mut expected = 0usize;
        let space = TruncatedSpace::new(20, 3);
        for x in space.states() {
            for pair in ActionPair::ALL {
                let hot = delta_index(&x, pair);
                for i in 0..3 {
                    let s = f64::from(x.get(i)) + f64::from(u8::from(i == hot));
                    if 1.0 + s + pair.a() + pair.b() > f64::from(x.get(i)).exp() {
                        expected += 1;
                    }
                }
            }
        }
        assert_eq!(audit.violations.len(), expected);
        assert!(audit.max_admissible_epsilon.unwrap() < 1.0);
    }

    #[test]
    fn subexponential_audit_amq2_and_scaled() {
        let audit = audit_subexponential(&FeatureBasis::amq2(3), 6);
        // x_1 = 2 with the arrival indicator and both actions: 1 + 3 + 9 + 1 + 1
        let flagged =
            audit.violations_for(0).any(|v| v.state.get(0) == 2 && v.attack && v.defend && v.block_sum == 15.0);
        assert!(flagged);

        let eps = audit.max_admissible_epsilon.unwrap();
        let cleared = audit_subexponential(&FeatureBasis::amq2(3).with_epsilon(eps * (1.0 - 1e-12)), 6);
        assert!(cleared.violations.is_empty());
    }

    #[test]
    fn gradient_dominance() {
        assert_eq!(audit_gradient_dominance(&FeatureBasis::amq1(3), 20).certified_b, Some(0));
        // Ties |dphi|_1 = |phi|_1 occur only when every s_i is 0 or 1 with no
        // action taken; the largest such state has |x|_2^2 = 2 (x = (1,1,0)).
        let amq2 = audit_gradient_dominance(&FeatureBasis::amq2(3), 50);
        assert_eq!(amq2.worst_violator_shell, Some(2));
        assert_eq!(amq2.certified_b, Some(3));
        let constant = FeatureBasis::custom(2, vec![INTERCEPT]);
        assert_eq!(audit_gradient_dominance(&constant, 10).certified_b, Some(0));
    }

    #[test]
    fn uncertifiable_basis() {
        // slope 10 dominates the value s = x + 1 everywhere on a small box
        let steep =
            FeatureBasis::custom(1, vec![ServerFeature { name: "steep", value: |s, _, _| s, ds: |_, _, _| 10.0 }]);
        let audit = audit_gradient_dominance(&steep, 3);
        assert_eq!(audit.worst_violator_shell, Some(9));
        assert_eq!(audit.certified_b, None);
    }

    fn any_state() -> impl Strategy<Value = (TrafficState, ActionPair)> {
        (proptest::collection::vec(0u32..40, 3), 0u8..2, 0u8..2)
            .prop_map(|(q, a, b)| (TrafficState::new(q), ActionPair::new(a, b)))
    }

    proptest! {
        #[test]
        fn exactly_one_indicator((x, p) in any_state()) {
            prop_assert_eq!(delta(&x, p).iter().map(|&d| u32::from(d)).sum::<u32>(), 1);
        }

        #[test]
        fn epsilon_homogeneity((x, p) in any_state(), eps in 0.001f64..10.0) {
            let unit = FeatureBasis::amq2(3).phi(&x, p);
            let scaled = FeatureBasis::amq2(3).with_epsilon(eps).phi(&x, p);
            for (u, s) in unit.iter().zip(&scaled) {
                prop_assert!((eps * u - s).abs() <= 1e-12 * (1.0 + s.abs()));
                prop_assert!(s.is_finite() && *s >= 0.0);
            }
        }

        #[test]
        fn amq1_is_projection_of_amq2((x, p) in any_state()) {
            let one = FeatureBasis::amq1(3).phi(&x, p);
            let two = FeatureBasis::amq2(3).phi(&x, p);
            for i in 0..3 {
                let b2 = &two[5 * i..5 * i + 5];
                prop_assert_eq!(&one[4 * i..4 * i + 4], &[b2[0], b2[1], b2[3], b2[4]][..]);
            }
        }
    }
}
