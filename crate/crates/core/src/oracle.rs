//! Exact computations on the truncated box `{0..=cap}^m`.
//!
//! Arrivals into a full queue are turned into self-loops so every row of the
//! embedded chain stays stochastic.

use std::io::Write;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::FeatureBasis;
use crate::model::{embedded_reward, next_state_distribution, ActionPair, GameParams, TrafficState};
use crate::par::map_range;
use crate::policy::{MatrixGame2x2, MixedAction, StatePolicy};
use crate::space::TruncatedSpace;

pub const DEFAULT_ITERATION_CAP: usize = 100_000;

#[derive(Clone, Debug, PartialEq, Error)]
pub enum OracleError {
    #[error("{what} did not converge in {iterations} iterations (residual {residual:e})")]
    NotConverged { what: &'static str, iterations: usize, residual: f64 },
    #[error("feature second-moment matrix is zero")]
    ZeroSigma,
    #[error("basis has {got} servers, space has {expected}")]
    Dimension { got: usize, expected: usize },
}

/// Successor distributions for every `(state, action pair)` of the box.
#[derive(Clone, Debug)]
pub struct TruncatedChain {
    pub space: TruncatedSpace,
    rows: Vec<Vec<(u32, f64)>>,
    rewards: Vec<f64>,
}

fn row_index(state: usize, pair: ActionPair) -> usize {
    4 * state + pair.index()
}

impl TruncatedChain {
    pub fn successors(&self, state: usize, pair: ActionPair) -> &[(u32, f64)] {
        &self.rows[row_index(state, pair)]
    }

    pub fn reward(&self, state: usize, pair: ActionPair) -> f64 {
        self.rewards[row_index(state, pair)]
    }

    pub fn len(&self) -> usize {
        self.space.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

pub fn build_truncated_chain(params: &GameParams, space: TruncatedSpace) -> TruncatedChain {
    let row = |k: usize| {
        let x = space.state(k / 4);
        let pair = ActionPair::ALL[k % 4];
        let mut out: Vec<(u32, f64)> = Vec::with_capacity(2 * space.m);
        for (y, p) in next_state_distribution(&x, pair, params) {
            let target = if space.contains(&y) { space.index(&y) } else { k / 4 } as u32;
            match out.iter_mut().find(|(j, _)| *j == target) {
                Some(entry) => entry.1 += p,
                None => out.push((target, p)),
            }
        }
        (out, embedded_reward(&x, pair, params))
    };
    let (rows, rewards) = map_range(4 * space.len(), row).into_iter().unzip();
    TruncatedChain { space, rows, rewards }
}

/// Dense `Q(x, a, b)` indexed by `4 * state + pair.index()`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TabularQ {
    pub values: Vec<f64>,
}

impl TabularQ {
    pub fn zeros(states: usize) -> Self {
        TabularQ { values: vec![0.0; 4 * states] }
    }

    pub fn get(&self, state: usize, pair: ActionPair) -> f64 {
        self.values[row_index(state, pair)]
    }

    pub fn game(&self, state: usize) -> MatrixGame2x2 {
        MatrixGame2x2::from_fn(|pair| self.get(state, pair))
    }

    pub fn sup_distance(&self, other: &TabularQ) -> f64 {
        self.values.iter().zip(&other.values).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    pub fn sup_norm(&self) -> f64 {
        self.values.iter().map(|v| v.abs()).fold(0.0, f64::max)
    }
}

fn state_values(q: &TabularQ, n: usize) -> Vec<f64> {
    map_range(n, |k| q.game(k).solve_defender().1)
}

/// One application of the minimax Bellman operator.
pub fn shapley_iterate(q: &TabularQ, chain: &TruncatedChain, gamma: f64) -> TabularQ {
    let v = state_values(q, chain.len());
    let values = map_range(4 * chain.len(), |k| {
        let next: f64 = chain.rows[k].iter().map(|&(j, p)| p * v[j as usize]).sum();
        chain.rewards[k] + gamma * next
    });
    TabularQ { values }
}

/// `ceil(log(tol (1 - gamma) / |Q_1 - Q_0|) / log gamma)`.
pub fn geometric_iteration_bound(first_step: f64, gamma: f64, tol: f64) -> usize {
    if first_step <= tol * (1.0 - gamma) {
        return 1;
    }
    ((tol * (1.0 - gamma) / first_step).ln() / gamma.ln()).ceil() as usize
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Equilibrium {
    pub space: TruncatedSpace,
    pub q: TabularQ,
    pub v: Vec<f64>,
    pub pi: Vec<f64>,
    pub sigma: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
    /// `|Q_1 - Q_0|_inf` of the first sweep, for the geometric bound.
    pub first_step: f64,
}

impl Equilibrium {
    pub fn attacker_policy(&self) -> crate::policy::TablePolicy {
        crate::policy::TablePolicy::new(self.space, self.pi.clone())
    }

    pub fn defender_policy(&self) -> crate::policy::TablePolicy {
        crate::policy::TablePolicy::new(self.space, self.sigma.clone())
    }

    /// `Q*` looked up with coordinates clamped to the box.
    pub fn q_at(&self, x: &TrafficState, pair: ActionPair) -> f64 {
        self.q.get(self.space.index_clamped(x), pair)
    }
}

pub fn solve_equilibrium(
    chain: &TruncatedChain,
    gamma: f64,
    tol: f64,
    max_iter: usize,
) -> Result<Equilibrium, OracleError> {
    assert!(tol > 0.0, "tolerance must be positive");
    let n = chain.len();
    let mut q = TabularQ::zeros(n);
    let mut first_step = 0.0;
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iter {
        let next = shapley_iterate(&q, chain, gamma);
        residual = next.sup_distance(&q);
        if iterations == 0 {
            first_step = residual;
        }
        q = next;
        iterations += 1;
        if residual <= tol {
            break;
        }
    }
    if residual > tol {
        return Err(OracleError::NotConverged { what: "Shapley iteration", iterations, residual });
    }
    let solved = map_range(n, |k| {
        let game = q.game(k);
        let (pi, sigma) = game.equilibrium();
        (game.solve_defender().1, pi.p1(), sigma.p1())
    });
    let mut v = Vec::with_capacity(n);
    let mut pi = Vec::with_capacity(n);
    let mut sigma = Vec::with_capacity(n);
    for (vk, pk, sk) in solved {
        v.push(vk);
        pi.push(pk);
        sigma.push(sk);
    }
    Ok(Equilibrium { space: chain.space, q, v, pi, sigma, iterations, residual, first_step })
}

/// Successor distribution of the policy-driven chain at every state.
pub fn policy_chain(
    chain: &TruncatedChain,
    attacker: &dyn StatePolicy,
    defender: &dyn StatePolicy,
) -> Vec<Vec<(u32, f64)>> {
    map_range(chain.len(), |k| {
        let x = chain.space.state(k);
        let (alpha, beta) = (attacker.mixed(&x), defender.mixed(&x));
        let mut out: Vec<(u32, f64)> = Vec::new();
        for pair in ActionPair::ALL {
            let w = alpha.prob(pair.attack) * beta.prob(pair.defend);
            if w == 0.0 {
                continue;
            }
            for &(j, p) in chain.successors(k, pair) {
                match out.iter_mut().find(|(i, _)| *i == j) {
                    Some(entry) => entry.1 += w * p,
                    None => out.push((j, w * p)),
                }
            }
        }
        out
    })
}

fn push_forward(mu: &[f64], rows: &[Vec<(u32, f64)>]) -> Vec<f64> {
    let mut out = vec![0.0; mu.len()];
    for (m, row) in mu.iter().zip(rows) {
        for &(j, p) in row {
            out[j as usize] += m * p;
        }
    }
    out
}

fn l1_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StationaryDistribution {
    pub space: TruncatedSpace,
    pub mu: Vec<f64>,
    pub iterations: usize,
    /// `|mu P - mu|_1` at exit.
    pub residual: f64,
    /// Mass on states with some queue above `0.9 cap`.
    pub cap_mass: f64,
}

/// Invariant law of the policy-driven jump chain on the box.
///
/// Queue totals move by one per jump, so the untruncated chain has period two;
/// iterating the lazy kernel `(P + I) / 2` removes the oscillation without
/// changing the fixed point.
pub fn stationary_distribution(
    chain: &TruncatedChain,
    attacker: &dyn StatePolicy,
    defender: &dyn StatePolicy,
    tol: f64,
    max_iter: usize,
) -> Result<StationaryDistribution, OracleError> {
    let rows = policy_chain(chain, attacker, defender);
    let n = chain.len();
    let mut mu = vec![1.0 / n as f64; n];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < max_iter {
        let moved = push_forward(&mu, &rows);
        residual = l1_distance(&moved, &mu);
        if residual <= tol {
            break;
        }
        let total: f64 = moved.iter().zip(&mu).map(|(a, b)| 0.5 * (a + b)).sum();
        for (m, p) in mu.iter_mut().zip(&moved) {
            *m = 0.5 * (*m + p) / total;
        }
        iterations += 1;
    }
    if residual > tol {
        return Err(OracleError::NotConverged { what: "power iteration", iterations, residual });
    }
    let space = chain.space;
    let threshold = 0.9 * f64::from(space.cap);
    let cap_mass =
        (0..n).filter(|&k| space.state(k).queues().iter().any(|&q| f64::from(q) > threshold)).map(|k| mu[k]).sum();
    Ok(StationaryDistribution { space, mu, iterations, residual, cap_mass })
}

/// Feature rows and sampling weights `mu(x) alpha(a|x) beta(b|x)`.
struct Design {
    phi: DMatrix<f64>,
    weight: Vec<f64>,
}

fn design(
    basis: &FeatureBasis,
    space: &TruncatedSpace,
    mu: &[f64],
    attacker: &dyn StatePolicy,
    defender: &dyn StatePolicy,
) -> Design {
    let n = space.len();
    let d = basis.dim();
    let mut phi = DMatrix::zeros(4 * n, d);
    let mut weight = vec![0.0; 4 * n];
    let mut buf = vec![0.0; d];
    for (k, &mass) in mu.iter().enumerate().take(n) {
        let x = space.state(k);
        let (alpha, beta) = (attacker.mixed(&x), defender.mixed(&x));
        for pair in ActionPair::ALL {
            let r = row_index(k, pair);
            basis.phi_into(&x, pair, &mut buf);
            for (j, &f) in buf.iter().enumerate() {
                phi[(r, j)] = f;
            }
            weight[r] = mass * alpha.prob(pair.attack) * beta.prob(pair.defend);
        }
    }
    Design { phi, weight }
}

#[derive(Clone, Debug, Serialize)]
pub struct SigmaMatrix {
    #[serde(serialize_with = "serialize_matrix")]
    pub matrix: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
    pub rank: usize,
    pub min_eigenvalue: f64,
}

fn serialize_matrix<S: serde::Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
    let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
    rows.serialize(s)
}

/// Relative eigenvalue cutoff below which a direction counts as null.
pub const RANK_TOLERANCE: f64 = 1e-10;

impl SigmaMatrix {
    fn new(matrix: DMatrix<f64>) -> Self {
        let eig = SymmetricEigen::new(matrix.clone());
        let mut eigenvalues: Vec<f64> = eig.eigenvalues.iter().copied().collect();
        eigenvalues.sort_by(f64::total_cmp);
        let top = eigenvalues.last().copied().unwrap_or(0.0).max(0.0);
        let rank = eigenvalues.iter().filter(|&&e| e > RANK_TOLERANCE * top).count();
        let min_eigenvalue = eigenvalues.first().copied().unwrap_or(0.0);
        SigmaMatrix { matrix, eigenvalues, rank, min_eigenvalue }
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn is_invertible(&self) -> bool {
        self.rank == self.dim()
    }

    /// Moore-Penrose inverse through the eigendecomposition.
    pub fn pseudo_inverse(&self) -> Result<DMatrix<f64>, OracleError> {
        let eig = SymmetricEigen::new(self.matrix.clone());
        let top = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
        if top <= 0.0 {
            return Err(OracleError::ZeroSigma);
        }
        let inv = eig.eigenvalues.map(|e| if e > RANK_TOLERANCE * top { 1.0 / e } else { 0.0 });
        Ok(&eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose())
    }
}

fn weighted_gram(design: &Design) -> DMatrix<f64> {
    let scaled = DMatrix::from_fn(design.phi.nrows(), design.phi.ncols(), |r, c| design.phi[(r, c)] * design.weight[r]);
    let g = design.phi.transpose() * scaled;
    (&g + g.transpose()) * 0.5
}

/// `E[phi phi^T]` under `mu` and the mixed action pair.
pub fn feature_second_moment(
    basis: &FeatureBasis,
    space: &TruncatedSpace,
    mu: &[f64],
    attacker: &dyn StatePolicy,
    defender: &dyn StatePolicy,
) -> SigmaMatrix {
    SigmaMatrix::new(weighted_gram(&design(basis, space, mu, attacker, defender)))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FixedPointOptions {
    pub tol: f64,
    pub max_iter: usize,
    /// Step toward the projected target; 1 is the plain iteration.
    pub relaxation: f64,
}

impl Default for FixedPointOptions {
    fn default() -> Self {
        FixedPointOptions { tol: 1e-10, max_iter: DEFAULT_ITERATION_CAP, relaxation: 1.0 }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct FixedPoint {
    pub weights: Vec<f64>,
    /// `|w - Sigma^+ E[phi T Q_w]|_inf` at the returned weights.
    pub residual: f64,
    pub iterations: usize,
    pub sigma_rank: usize,
    pub sigma_dim: usize,
    pub sigma_min_eigenvalue: f64,
}

struct Projection<'a> {
    chain: &'a TruncatedChain,
    design: Design,
    pinv: DMatrix<f64>,
    gamma: f64,
}

impl Projection<'_> {
    /// `Sigma^+ E[phi (r + gamma minimax Q_w(x'))]`.
    fn target(&self, w: &DVector<f64>) -> DVector<f64> {
        let q = TabularQ { values: (&self.design.phi * w).iter().copied().collect() };
        let v = if self.gamma == 0.0 { vec![0.0; self.chain.len()] } else { state_values(&q, self.chain.len()) };
        let y = DVector::from_fn(self.design.phi.nrows(), |r, _| {
            let next: f64 = self.chain.rows[r].iter().map(|&(j, p)| p * v[j as usize]).sum();
            self.design.weight[r] * (self.chain.rewards[r] + self.gamma * next)
        });
        &self.pinv * (self.design.phi.transpose() * y)
    }
}

fn sup(v: &DVector<f64>) -> f64 {
    v.iter().map(|x| x.abs()).fold(0.0, f64::max)
}

/// Minimum-norm solution of `w = Sigma^+ E_mu[phi (r + gamma minimax Q_w(x'))]`.
///
/// When the basis repeats a column across servers `Sigma` is singular; the
/// iteration then stays in its range, which is also where temporal-difference
/// updates started from zero stay.
#[allow(clippy::too_many_arguments)]
pub fn projected_fixed_point(
    basis: &FeatureBasis,
    chain: &TruncatedChain,
    mu: &[f64],
    attacker: &dyn StatePolicy,
    defender: &dyn StatePolicy,
    gamma: f64,
    options: FixedPointOptions,
) -> Result<FixedPoint, OracleError> {
    if basis.servers() != chain.space.m {
        return Err(OracleError::Dimension { got: basis.servers(), expected: chain.space.m });
    }
    let design = design(basis, &chain.space, mu, attacker, defender);
    let sigma = SigmaMatrix::new(weighted_gram(&design));
    let pinv = sigma.pseudo_inverse()?;
    let op = Projection { chain, design, pinv, gamma };

    let mut w = DVector::zeros(basis.dim());
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while iterations < options.max_iter {
        let step = op.target(&w) - &w;
        residual = sup(&step);
        if residual <= options.tol {
            break;
        }
        w += step * options.relaxation;
        iterations += 1;
        if !residual.is_finite() {
            break;
        }
    }
    if residual.is_nan() || residual > options.tol {
        return Err(OracleError::NotConverged { what: "projected fixed point", iterations, residual });
    }
    Ok(FixedPoint {
        weights: w.iter().copied().collect(),
        residual,
        iterations,
        sigma_rank: sigma.rank,
        sigma_dim: sigma.dim(),
        sigma_min_eigenvalue: sigma.min_eigenvalue,
    })
}

/// Minimum-norm weighted least-squares fit of the one-step reward.
pub fn reward_regression(
    basis: &FeatureBasis,
    chain: &TruncatedChain,
    mu: &[f64],
    attacker: &dyn StatePolicy,
    defender: &dyn StatePolicy,
) -> Vec<f64> {
    let design = design(basis, &chain.space, mu, attacker, defender);
    let root: Vec<f64> = design.weight.iter().map(|w| w.sqrt()).collect();
    let a = DMatrix::from_fn(design.phi.nrows(), design.phi.ncols(), |r, c| root[r] * design.phi[(r, c)]);
    let b = DVector::from_fn(design.phi.nrows(), |r, _| root[r] * chain.rewards[r]);
    let svd = a.svd(true, true);
    let eps = RANK_TOLERANCE.sqrt() * svd.singular_values.max();
    svd.solve(&b, eps).expect("both factors computed").iter().copied().collect()
}

pub fn write_equilibrium_csv(eq: &Equilibrium, out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["state", "q00", "q01", "q10", "q11", "v", "pi1", "sigma1"])?;
    for k in 0..eq.space.len() {
        let mut rec = vec![eq.space.state(k).to_string()];
        for pair in ActionPair::ALL {
            rec.push(format!("{:.16e}", eq.q.get(k, pair)));
        }
        for v in [eq.v[k], eq.pi[k], eq.sigma[k]] {
            rec.push(format!("{v:.16e}"));
        }
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_stationary_csv(st: &StationaryDistribution, out: impl Write) -> csv::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["state", "mu"])?;
    for (k, m) in st.mu.iter().enumerate() {
        w.write_record([st.space.state(k).to_string(), format!("{m:.16e}")])?;
    }
    w.flush()?;
    Ok(())
}

/// Equilibrium mixtures at `x`, clamped into the box.
pub fn equilibrium_mixtures(eq: &Equilibrium, x: &TrafficState) -> (MixedAction, MixedAction) {
    let k = eq.space.index_clamped(x);
    (MixedAction::new(eq.pi[k]), MixedAction::new(eq.sigma[k]))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::{ServerFeature, ATTACK, DEFEND, INTERCEPT};
    use crate::policy::{PolicyPair, UniformPolicy};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn st(q: &[u32]) -> TrafficState {
        TrafficState::new(q.to_vec())
    }

    fn two_server() -> GameParams {
        GameParams { lambda: 4.0, mu: vec![2.0, 3.0], c1: 1.0, c2: 1.0, gamma: 0.9 }
    }

    #[test]
    fn truncation_rule() {
        let p = GameParams::three_server();
        let space = TruncatedSpace::new(4, 3);
        let chain = build_truncated_chain(&p, space);
        for k in 0..space.len() {
            for pair in ActionPair::ALL {
                let total: f64 = chain.successors(k, pair).iter().map(|e| e.1).sum();
                assert!((total - 1.0).abs() < 1e-14);
            }
        }
        let x = st(&[2, 1, 3]);
        let k = space.index(&x);
        let pair = ActionPair::new(1, 0);
        let mut exact: Vec<(u32, f64)> =
            next_state_distribution(&x, pair, &p).into_iter().map(|(y, pr)| (space.index(&y) as u32, pr)).collect();
        let mut got = chain.successors(k, pair).to_vec();
        exact.sort_by_key(|e| e.0);
        got.sort_by_key(|e| e.0);
        assert_eq!(got, exact);

        let full = space.index(&st(&[4, 4, 4]));
        let self_loop = chain.successors(full, ActionPair::new(0, 0)).iter().find(|e| e.0 as usize == full).unwrap();
        assert!((self_loop.1 - 5.0 / 14.0).abs() < 1e-15);
    }

    #[test]
    fn operator_collapses() {
        let p = two_server();
        let chain = build_truncated_chain(&p, TruncatedSpace::new(3, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let q = TabularQ { values: (0..4 * chain.len()).map(|_| rng.random_range(-5.0..5.0)).collect() };
        assert_eq!(shapley_iterate(&q, &chain, 0.0).values, chain.rewards);
        let k = TabularQ { values: vec![2.5; 4 * chain.len()] };
        let tk = shapley_iterate(&k, &chain, 0.9);
        for (t, r) in tk.values.iter().zip(&chain.rewards) {
            assert!((t - (r + 0.9 * 2.5)).abs() < 1e-12);
        }
    }

    #[test]
    fn myopic_single_server() {
        let p = GameParams { lambda: 1.0, mu: vec![2.0], c1: 1.0, c2: 1.0, gamma: 0.0 };
        let chain = build_truncated_chain(&p, TruncatedSpace::new(1, 1));
        let eq = solve_equilibrium(&chain, 0.0, 1e-12, 10).unwrap();
        for k in 0..2 {
            let x = chain.space.state(k);
            for pair in ActionPair::ALL {
                assert_eq!(eq.q.get(k, pair), embedded_reward(&x, pair, &p));
            }
        }
    }

    #[test]
    fn two_server_equilibrium() {
        let p = two_server();
        let chain = build_truncated_chain(&p, TruncatedSpace::new(10, 2));
        let eq = solve_equilibrium(&chain, 0.9, 1e-8, DEFAULT_ITERATION_CAP).unwrap();
        assert!(eq.residual <= 1e-8);
        assert!(eq.iterations <= geometric_iteration_bound(eq.first_step, 0.9, 1e-8));
        let rmax = chain.rewards.iter().map(|r| r.abs()).fold(0.0, f64::max);
        assert!(eq.q.sup_norm() <= rmax / 0.1 + 1e-9);
        for k in 0..chain.len() {
            let game = eq.q.game(k);
            let (pi, sigma) = (MixedAction::new(eq.pi[k]), MixedAction::new(eq.sigma[k]));
            let tol = 1e-9 * (1.0 + eq.v[k].abs());
            assert!(game.best_response_attacker(sigma).1 <= eq.v[k] + tol);
            assert!(game.best_response_defender(pi).1 >= eq.v[k] - tol);
            // Negated, transposed payoff: the other player's value flips sign.
            let dual = MatrixGame2x2::new([
                [-game.payoff[0][0], -game.payoff[1][0]],
                [-game.payoff[0][1], -game.payoff[1][1]],
            ]);
            assert!((dual.value() + eq.v[k]).abs() < tol);
        }
        // A different starting point ends within 2 tol / (1 - gamma).
        let mut q = TabularQ { values: vec![50.0; 4 * chain.len()] };
        loop {
            let next = shapley_iterate(&q, &chain, 0.9);
            let r = next.sup_distance(&q);
            q = next;
            if r <= 1e-8 {
                break;
            }
        }
        assert!(q.sup_distance(&eq.q) <= 2.0 * 1e-8 / 0.1);
    }

    #[test]
    fn stationary_laws() {
        let p = GameParams { lambda: 1.0, mu: vec![2.0], c1: 1.0, c2: 1.0, gamma: 0.9 };
        let chain = build_truncated_chain(&p, TruncatedSpace::new(0, 1));
        let s = stationary_distribution(&chain, &UniformPolicy, &UniformPolicy, 1e-12, 10).unwrap();
        assert_eq!(s.mu, vec![1.0]);

        let p = GameParams { lambda: 3.0, mu: vec![2.5, 2.5], c1: 1.0, c2: 1.0, gamma: 0.9 };
        let space = TruncatedSpace::new(8, 2);
        let chain = build_truncated_chain(&p, space);
        let pair = PolicyPair::behavior(0.5);
        let s = stationary_distribution(&chain, &pair.attacker, &pair.defender, 1e-12, DEFAULT_ITERATION_CAP).unwrap();
        assert!((s.mu.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(s.mu.iter().all(|&m| m >= 0.0));
        for x in space.states() {
            let swapped = st(&[x.get(1), x.get(0)]);
            assert!((s.mu[space.index(&x)] - s.mu[space.index(&swapped)]).abs() < 1e-10);
        }
        let rows = policy_chain(&chain, &pair.attacker, &pair.defender);
        assert!(l1_distance(&push_forward(&s.mu, &rows), &s.mu) <= 1e-10);
    }

    #[test]
    #[allow(clippy::needless_range_loop)]
    fn second_moment_matches_direct_sum() {
        let p = GameParams::three_server();
        let space = TruncatedSpace::new(5, 3);
        let chain = build_truncated_chain(&p, space);
        let pair = PolicyPair::behavior(0.6);
        let s = stationary_distribution(&chain, &pair.attacker, &pair.defender, 1e-12, DEFAULT_ITERATION_CAP).unwrap();
        let basis = FeatureBasis::amq2(3);
        let sigma = feature_second_moment(&basis, &space, &s.mu, &pair.attacker, &pair.defender);
        let d = basis.dim();
        let mut direct = vec![vec![0.0; d]; d];
        for (k, x) in space.states().enumerate() {
            for ab in ActionPair::ALL {
                let w = s.mu[k] * pair.joint(&x, ab);
                let f = basis.phi(&x, ab);
                for i in 0..d {
                    for j in 0..d {
                        direct[i][j] += w * f[i] * f[j];
                    }
                }
            }
        }
        for i in 0..d {
            for j in 0..d {
                assert!((sigma.matrix[(i, j)] - direct[i][j]).abs() < 1e-10 * (1.0 + direct[i][j].abs()));
                assert_eq!(sigma.matrix[(i, j)], sigma.matrix[(j, i)]);
            }
        }
        assert!(sigma.min_eigenvalue >= -1e-10);
        // Intercept, attack and defend columns repeat across servers.
        assert_eq!(sigma.rank, d - 3 * 2);

        let scaled =
            feature_second_moment(&basis.clone().with_epsilon(0.1), &space, &s.mu, &pair.attacker, &pair.defender);
        assert!((scaled.matrix.clone() - sigma.matrix.clone() * 0.01).amax() < 1e-12 * sigma.matrix.amax());

        let constant = FeatureBasis::custom(1, vec![INTERCEPT]);
        let p1 = GameParams { lambda: 1.0, mu: vec![2.0], c1: 1.0, c2: 1.0, gamma: 0.9 };
        let chain1 = build_truncated_chain(&p1, TruncatedSpace::new(3, 1));
        let s1 =
            stationary_distribution(&chain1, &UniformPolicy, &UniformPolicy, 1e-12, DEFAULT_ITERATION_CAP).unwrap();
        let sig1 = feature_second_moment(&constant, &chain1.space, &s1.mu, &UniformPolicy, &UniformPolicy);
        assert!((sig1.matrix[(0, 0)] - 1.0).abs() < 1e-12);
        assert!(sig1.is_invertible());
    }

    #[test]
    fn myopic_fixed_point_is_least_squares() {
        let p = GameParams::three_server();
        let chain = build_truncated_chain(&p, TruncatedSpace::new(6, 3));
        let pair = PolicyPair::behavior(0.6);
        let s = stationary_distribution(&chain, &pair.attacker, &pair.defender, 1e-12, DEFAULT_ITERATION_CAP).unwrap();
        for basis in [FeatureBasis::amq1(3), FeatureBasis::amq2(3)] {
            let fp = projected_fixed_point(
                &basis,
                &chain,
                &s.mu,
                &pair.attacker,
                &pair.defender,
                0.0,
                FixedPointOptions::default(),
            )
            .unwrap();
            let ls = reward_regression(&basis, &chain, &s.mu, &pair.attacker, &pair.defender);
            for (a, b) in fp.weights.iter().zip(&ls) {
                assert!((a - b).abs() < 1e-8, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn exact_representation_at_zero_discount() {
        // One server: s = x + 1, so the reward is affine in (a, b) with
        // coefficients depending on whether the server is busy.
        fn busy(s: f64, _: f64, _: f64) -> f64 {
            if s >= 2.0 {
                1.0
            } else {
                0.0
            }
        }
        fn busy_a(s: f64, a: f64, b: f64) -> f64 {
            busy(s, a, b) * a
        }
        fn busy_b(s: f64, a: f64, b: f64) -> f64 {
            busy(s, a, b) * b
        }
        fn zero(_: f64, _: f64, _: f64) -> f64 {
            0.0
        }
        let p = GameParams { lambda: 1.0, mu: vec![2.0], c1: 0.5, c2: 0.25, gamma: 0.0 };
        let chain = build_truncated_chain(&p, TruncatedSpace::new(1, 1));
        let basis = FeatureBasis::custom(
            1,
            vec![
                INTERCEPT,
                ServerFeature { name: "busy", value: busy, ds: zero },
                ATTACK,
                DEFEND,
                ServerFeature { name: "busy_a", value: busy_a, ds: zero },
                ServerFeature { name: "busy_b", value: busy_b, ds: zero },
            ],
        );
        let pair = PolicyPair::uniform();
        let s = stationary_distribution(&chain, &pair.attacker, &pair.defender, 1e-12, DEFAULT_ITERATION_CAP).unwrap();
        let fp = projected_fixed_point(
            &basis,
            &chain,
            &s.mu,
            &pair.attacker,
            &pair.defender,
            0.0,
            FixedPointOptions::default(),
        )
        .unwrap();
        for k in 0..2 {
            let x = chain.space.state(k);
            for ab in ActionPair::ALL {
                assert!((basis.q_value(&fp.weights, &x, ab) - chain.reward(k, ab)).abs() < 1e-10);
            }
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn shapley_contracts(seed in any::<u64>()) {
            let p = two_server();
            let chain = build_truncated_chain(&p, TruncatedSpace::new(4, 2));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut draw = || TabularQ { values: (0..4 * chain.len()).map(|_| rng.random_range(-20.0..20.0)).collect() };
            let (a, b) = (draw(), draw());
            let lhs = shapley_iterate(&a, &chain, 0.9).sup_distance(&shapley_iterate(&b, &chain, 0.9));
            prop_assert!(lhs <= 0.9 * a.sup_distance(&b) + 1e-12);
        }
    }
}
