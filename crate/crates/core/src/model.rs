//! The join-the-shortest-queue CTMC: parameters, state space, scaling, and
//! the exact generator.
//!
//! A system has `n` identical unit-rate servers, each with a buffer of length
//! `b`, Poisson arrivals at rate `n * lambda`, and JSQ routing: an arrival
//! enters service at an idle server if one exists, otherwise it joins a
//! shortest buffer, and is blocked if every buffer is full. The aggregated
//! state is the occupancy vector `q` where `q_i` counts servers holding at
//! least `i` customers, so `n >= q_1 >= q_2 >= ... >= q_{b+1} >= 0`.
//!
//! Heavy traffic is parameterized in the Halfin-Whitt fashion:
//! `lambda = 1 - beta / sqrt(n)` with `delta = 1 / sqrt(n)` the diffusion
//! scaling unit. The scaled image of `q` is
//! `x = (delta * (n - q_1), delta * q_2, ..., delta * q_{b+1})`.

use crate::error::{Error, Result};

/// Default cap on enumerated state-space size. Keeps per-state dense
/// workspaces (solution vectors, residuals) within desk-scale memory.
pub const DEFAULT_MAX_STATES: usize = 5_000_000;

/// Dimension above which generator actions fan out across threads.
const PARALLEL_DIM: usize = 16_384;

/// Model parameters `(n, b, beta)` and the derived scaling quantities.
///
/// `n_lambda` is computed once here so every consumer sees the identical
/// floating-point arrival rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    /// Number of servers.
    pub n: u32,
    /// Buffer length per server.
    pub b: u32,
    /// Slack parameter in `lambda = 1 - beta/sqrt(n)`.
    pub beta: f64,
    /// Per-server load, `1 - beta/sqrt(n)`.
    pub lambda: f64,
    /// Scaling unit `1/sqrt(n)`.
    pub delta: f64,
    /// Total arrival rate `n * lambda`.
    pub n_lambda: f64,
}

impl ModelParams {
    pub fn new(n: u32, b: u32, beta: f64) -> Result<Self> {
        if n < 1 {
            return Err(Error::InvalidParams("n must be at least 1".into()));
        }
        if b < 1 {
            return Err(Error::InvalidParams("b must be at least 1".into()));
        }
        if !(beta > 0.0) || !beta.is_finite() {
            return Err(Error::InvalidParams(format!(
                "beta must be positive, got {beta}"
            )));
        }
        let sqrt_n = (n as f64).sqrt();
        if beta >= sqrt_n {
            return Err(Error::InvalidParams(format!(
                "beta = {beta} must be below sqrt(n) = {sqrt_n} so the load stays in (0,1)"
            )));
        }
        let delta = 1.0 / sqrt_n;
        let lambda = 1.0 - beta * delta;
        Ok(ModelParams {
            n,
            b,
            beta,
            lambda,
            delta,
            n_lambda: n as f64 * lambda,
        })
    }

    /// Dimension of the occupancy vector, `b + 1`.
    pub fn dim(&self) -> usize {
        self.b as usize + 1
    }
}

/// Occupancy vector `q` with `q_i` = number of servers with at least `i`
/// customers.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct JsqState(pub Vec<u32>);

impl JsqState {
    pub fn new(q: Vec<u32>) -> Self {
        JsqState(q)
    }

    pub fn is_valid(&self, params: &ModelParams) -> bool {
        if self.0.len() != params.dim() {
            return false;
        }
        if self.0[0] > params.n {
            return false;
        }
        self.0.windows(2).all(|w| w[0] >= w[1])
    }

    /// Total number of customers in the system, `sum_i q_i`.
    pub fn total_customers(&self) -> u64 {
        self.0.iter().map(|&v| v as u64).sum()
    }

    /// Diffusion-scaled image: `x_1 = delta (n - q_1)`, `x_i = delta q_i`.
    pub fn scale(&self, params: &ModelParams) -> ScaledState {
        let mut x = Vec::with_capacity(self.0.len());
        x.push(params.delta * (params.n - self.0[0]) as f64);
        for &qi in &self.0[1..] {
            x.push(params.delta * qi as f64);
        }
        ScaledState(x)
    }
}

impl std::fmt::Display for JsqState {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "(")?;
        for (i, v) in self.0.iter().enumerate() {
            if i > 0 {
                write!(f, ",")?;
            }
            write!(f, "{v}")?;
        }
        write!(f, ")")
    }
}

/// Diffusion-scaled state `x` on the grid `delta * N^{b+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledState(pub Vec<f64>);

impl ScaledState {
    /// Exact inverse of [`JsqState::scale`]. Coordinates are rounded to the
    /// nearest grid index, which is exact for states produced by `scale`.
    pub fn unscale(&self, params: &ModelParams) -> JsqState {
        let n = params.n as f64;
        let mut q = Vec::with_capacity(self.0.len());
        q.push((n - self.0[0] / params.delta).round() as u32);
        for &xi in &self.0[1..] {
            q.push((xi / params.delta).round() as u32);
        }
        JsqState(q)
    }

    /// Nonnegative integer grid index `k` with `x = delta * k`.
    pub fn grid_index(&self, params: &ModelParams) -> Vec<i64> {
        self.0
            .iter()
            .map(|&xi| (xi / params.delta).round() as i64)
            .collect()
    }
}

/// The enumerated state space with dense contiguous indices.
///
/// States are listed in lexicographic order of `q`, so ranks are recovered by
/// binary search and the order is deterministic across runs.
#[derive(Debug, Clone)]
pub struct StateSpace {
    params: ModelParams,
    states: Vec<JsqState>,
}

/// Number of valid states: nonincreasing `(b+1)`-tuples over `{0..n}`,
/// counted by stars and bars as `binomial(n + b + 1, b + 1)`.
pub fn state_count(n: u32, b: u32) -> u128 {
    let top = n as u128 + b as u128 + 1;
    let k = b as u128 + 1;
    let mut acc: u128 = 1;
    for i in 0..k {
        acc = acc * (top - i) / (i + 1);
    }
    acc
}

impl StateSpace {
    pub fn enumerate(params: &ModelParams) -> Result<Self> {
        Self::enumerate_with_limit(params, DEFAULT_MAX_STATES)
    }

    pub fn enumerate_with_limit(params: &ModelParams, max_states: usize) -> Result<Self> {
        let count = state_count(params.n, params.b);
        if count > max_states as u128 {
            return Err(Error::Capacity {
                states: count,
                max: max_states,
            });
        }
        let mut states = Vec::with_capacity(count as usize);
        let mut q = vec![0u32; params.dim()];
        loop {
            states.push(JsqState(q.clone()));
            // Advance to the lexicographic successor among nonincreasing
            // vectors bounded by n.
            let d = q.len();
            let mut pos = d;
            for i in (0..d).rev() {
                let cap = if i == 0 { params.n } else { q[i - 1] };
                if q[i] < cap {
                    pos = i;
                    break;
                }
            }
            if pos == d {
                break;
            }
            q[pos] += 1;
            for v in q[pos + 1..].iter_mut() {
                *v = 0;
            }
        }
        debug_assert_eq!(states.len() as u128, count);
        Ok(StateSpace {
            params: *params,
            states,
        })
    }

    pub fn params(&self) -> &ModelParams {
        &self.params
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, index: usize) -> &JsqState {
        &self.states[index]
    }

    pub fn states(&self) -> &[JsqState] {
        &self.states
    }

    /// Dense index of `q`, or `None` if `q` is not a valid state.
    pub fn rank(&self, q: &JsqState) -> Option<usize> {
        self.states.binary_search(q).ok()
    }

    /// Scaled image of the state at `index`.
    pub fn scaled(&self, index: usize) -> ScaledState {
        self.states[index].scale(&self.params)
    }

    /// Index of the empty-system state `(0,...,0)`.
    pub fn empty_index(&self) -> usize {
        0
    }

    /// Index of the anchor state `q = (n, 0, ..., 0)`, whose scaled image is
    /// the origin.
    pub fn anchor_index(&self) -> usize {
        let mut q = vec![0u32; self.params.dim()];
        q[0] = self.params.n;
        self.rank(&JsqState(q))
            .expect("anchor state is always enumerated")
    }
}

/// All outgoing transitions from `q` with strictly positive rate.
///
/// Arrivals (rate `n * lambda`) enter service if `q_1 < n`, otherwise they
/// join a buffer at the first level `j+1` with `q_1 = ... = q_j = n` and
/// `q_{j+1} < n`; a completely full system blocks the arrival. A service
/// completion at one of the `q_j - q_{j+1}` servers holding exactly `j`
/// customers removes one customer from level `j` (with `q_{b+2} = 0`
/// implicitly, so level `b+1` drains at rate `q_{b+1}`).
pub fn transition_rates(params: &ModelParams, q: &JsqState) -> Vec<(JsqState, f64)> {
    debug_assert!(q.is_valid(params));
    let d = params.dim();
    let mut out = Vec::with_capacity(d + 1);
    if let Some(level) = arrival_level(params, q) {
        let mut target = q.0.clone();
        target[level] += 1;
        out.push((JsqState(target), params.n_lambda));
    }
    for j in 0..d {
        let next = if j + 1 < d { q.0[j + 1] } else { 0 };
        let servers = q.0[j] - next;
        if servers > 0 {
            let mut target = q.0.clone();
            target[j] -= 1;
            out.push((JsqState(target), servers as f64));
        }
    }
    out
}

/// Level (0-based coordinate) an arrival joins, or `None` when blocked.
pub fn arrival_level(params: &ModelParams, q: &JsqState) -> Option<usize> {
    q.0.iter().position(|&qi| qi < params.n)
}

/// Row-compressed rate matrix of the CTMC on an enumerated state space.
///
/// Off-diagonal entries are the transition rates; the diagonal is the negated
/// row sum, so every row sums to zero by construction.
#[derive(Debug, Clone)]
pub struct SparseGenerator {
    dim: usize,
    row_start: Vec<usize>,
    cols: Vec<u32>,
    rates: Vec<f64>,
    diag: Vec<f64>,
    /// Column-oriented view (incoming transitions), built once for
    /// transpose-direction solves.
    col_start: Vec<usize>,
    rows: Vec<u32>,
    col_rates: Vec<f64>,
    max_exit: f64,
}

impl SparseGenerator {
    pub fn build(params: &ModelParams, space: &StateSpace) -> Self {
        let dim = space.len();
        let mut row_start = Vec::with_capacity(dim + 1);
        let mut cols: Vec<u32> = Vec::new();
        let mut rates: Vec<f64> = Vec::new();
        let mut diag = vec![0.0f64; dim];
        let mut max_exit = 0.0f64;
        row_start.push(0);
        for (i, q) in space.states().iter().enumerate() {
            let mut exit = 0.0;
            for (target, rate) in transition_rates(params, q) {
                let j = space
                    .rank(&target)
                    .expect("transition target stays in the state space");
                cols.push(j as u32);
                rates.push(rate);
                exit += rate;
            }
            diag[i] = -exit;
            max_exit = max_exit.max(exit);
            row_start.push(cols.len());
        }
        // Column-compressed copy for left-action solves.
        let mut col_count = vec![0usize; dim];
        for &c in &cols {
            col_count[c as usize] += 1;
        }
        let mut col_start = Vec::with_capacity(dim + 1);
        col_start.push(0);
        for c in 0..dim {
            col_start.push(col_start[c] + col_count[c]);
        }
        let mut cursor = col_start.clone();
        let mut rows = vec![0u32; cols.len()];
        let mut col_rates = vec![0.0f64; cols.len()];
        for i in 0..dim {
            for idx in row_start[i]..row_start[i + 1] {
                let c = cols[idx] as usize;
                rows[cursor[c]] = i as u32;
                col_rates[cursor[c]] = rates[idx];
                cursor[c] += 1;
            }
        }
        SparseGenerator {
            dim,
            row_start,
            cols,
            rates,
            diag,
            col_start,
            rows,
            col_rates,
            max_exit,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Largest total exit rate over all states; any uniformization constant
    /// must be at least this.
    pub fn max_exit_rate(&self) -> f64 {
        self.max_exit
    }

    pub fn diagonal(&self) -> &[f64] {
        &self.diag
    }

    /// Off-diagonal entries of row `i` as `(column, rate)` pairs.
    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.row_start[i];
        let hi = self.row_start[i + 1];
        self.cols[lo..hi]
            .iter()
            .map(|&c| c as usize)
            .zip(self.rates[lo..hi].iter().copied())
    }

    /// Incoming off-diagonal entries of column `j` as `(row, rate)` pairs.
    pub fn column(&self, j: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let lo = self.col_start[j];
        let hi = self.col_start[j + 1];
        self.rows[lo..hi]
            .iter()
            .map(|&r| r as usize)
            .zip(self.col_rates[lo..hi].iter().copied())
    }

    /// Applies the generator to a grid function: `(G f)_i = sum_j G_ij f_j`.
    pub fn apply(&self, f: &[f64]) -> Vec<f64> {
        assert_eq!(f.len(), self.dim);
        let mut out = vec![0.0; self.dim];
        self.apply_into(f, &mut out);
        out
    }

    pub fn apply_into(&self, f: &[f64], out: &mut [f64]) {
        let row = |i: usize| {
            let mut acc = self.diag[i] * f[i];
            for idx in self.row_start[i]..self.row_start[i + 1] {
                acc += self.rates[idx] * f[self.cols[idx] as usize];
            }
            acc
        };
        if self.dim >= PARALLEL_DIM {
            use rayon::prelude::*;
            out.par_iter_mut()
                .enumerate()
                .for_each(|(i, o)| *o = row(i));
        } else {
            for (i, o) in out.iter_mut().enumerate() {
                *o = row(i);
            }
        }
    }

    /// Left action of a row vector: `(pi G)_j = sum_i pi_i G_ij`.
    pub fn left_apply(&self, pi: &[f64]) -> Vec<f64> {
        assert_eq!(pi.len(), self.dim);
        let mut out = vec![0.0; self.dim];
        let col = |j: usize| {
            let mut acc = self.diag[j] * pi[j];
            for idx in self.col_start[j]..self.col_start[j + 1] {
                acc += self.col_rates[idx] * pi[self.rows[idx] as usize];
            }
            acc
        };
        if self.dim >= PARALLEL_DIM {
            use rayon::prelude::*;
            out.par_iter_mut()
                .enumerate()
                .for_each(|(j, o)| *o = col(j));
        } else {
            for (j, o) in out.iter_mut().enumerate() {
                *o = col(j);
            }
        }
        out
    }

    /// Largest row-sum magnitude; zero up to rounding by construction.
    pub fn max_row_sum(&self) -> f64 {
        (0..self.dim)
            .map(|i| {
                let s: f64 = self.row(i).map(|(_, r)| r).sum::<f64>() + self.diag[i];
                s.abs()
            })
            .fold(0.0, f64::max)
    }

    /// Breadth-first reachability of the whole space from state `from`.
    pub fn reaches_all(&self, from: usize) -> bool {
        let mut seen = vec![false; self.dim];
        let mut queue = std::collections::VecDeque::new();
        seen[from] = true;
        queue.push_back(from);
        let mut count = 1;
        while let Some(i) = queue.pop_front() {
            for (j, _) in self.row(i) {
                if !seen[j] {
                    seen[j] = true;
                    count += 1;
                    queue.push_back(j);
                }
            }
        }
        count == self.dim
    }
}

/// A fully assembled instance: parameters, enumerated states, and generator.
#[derive(Debug, Clone)]
pub struct Instance {
    pub params: ModelParams,
    pub space: StateSpace,
    pub gen: SparseGenerator,
}

impl Instance {
    pub fn build(params: ModelParams) -> Result<Self> {
        let space = StateSpace::enumerate(&params)?;
        let gen = SparseGenerator::build(&params, &space);
        Ok(Instance { params, space, gen })
    }

    pub fn build_with_limit(params: ModelParams, max_states: usize) -> Result<Self> {
        let space = StateSpace::enumerate_with_limit(&params, max_states)?;
        let gen = SparseGenerator::build(&params, &space);
        Ok(Instance { params, space, gen })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params(n: u32, b: u32, beta: f64) -> ModelParams {
        ModelParams::new(n, b, beta).unwrap()
    }

    #[test]
    fn params_validation() {
        assert!(ModelParams::new(0, 1, 0.5).is_err());
        assert!(ModelParams::new(4, 0, 0.5).is_err());
        assert!(ModelParams::new(4, 1, 2.0).is_err()); // beta = sqrt(n)
        assert!(ModelParams::new(4, 1, -1.0).is_err());
        let p = params(4, 1, 1.0);
        assert!((p.lambda - 0.5).abs() < 1e-15);
        assert!((p.delta - 0.5).abs() < 1e-15);
        assert!((p.n_lambda - 2.0).abs() < 1e-15);
    }

    #[test]
    fn enumerate_small_spaces() {
        let p = params(1, 1, 0.5);
        let space = StateSpace::enumerate(&p).unwrap();
        assert_eq!(space.len(), 3);
        let got: Vec<Vec<u32>> = space.states().iter().map(|s| s.0.clone()).collect();
        assert_eq!(got, vec![vec![0, 0], vec![1, 0], vec![1, 1]]);

        let p = params(2, 1, 0.5);
        let space = StateSpace::enumerate(&p).unwrap();
        assert_eq!(space.len(), 6);
        assert_eq!(state_count(2, 1), 6);
    }

    #[test]
    fn cardinality_matches_binomial() {
        for (n, b) in [(1u32, 1u32), (2, 1), (5, 2), (10, 1), (7, 3)] {
            let p = params(n, b, 0.5);
            let space = StateSpace::enumerate(&p).unwrap();
            assert_eq!(space.len() as u128, state_count(n, b));
        }
    }

    #[test]
    fn rank_unrank_round_trip() {
        let p = params(1, 1, 0.5);
        let space = StateSpace::enumerate(&p).unwrap();
        let q = JsqState(vec![1, 0]);
        let r = space.rank(&q).unwrap();
        assert_eq!(space.state(r), &q);

        let p = params(6, 2, 0.5);
        let space = StateSpace::enumerate(&p).unwrap();
        for i in 0..space.len() {
            assert_eq!(space.rank(space.state(i)), Some(i));
        }
    }

    #[test]
    fn capacity_guard_trips() {
        let p = params(100, 3, 1.0);
        match StateSpace::enumerate_with_limit(&p, 1000) {
            Err(Error::Capacity { states, max }) => {
                assert_eq!(states, state_count(100, 3));
                assert_eq!(max, 1000);
            }
            other => panic!("expected capacity error, got {other:?}"),
        }
    }

    #[test]
    fn scaling_examples() {
        let p = params(1, 1, 0.5);
        let x = JsqState(vec![1, 0]).scale(&p);
        assert_eq!(x.0, vec![0.0, 0.0]);

        let p = params(4, 1, 1.0);
        let x = JsqState(vec![3, 1]).scale(&p);
        assert_eq!(x.0, vec![0.5, 0.5]);

        let p = params(25, 2, 1.0);
        let q = JsqState(vec![20, 5, 1]);
        assert_eq!(q.scale(&p).unscale(&p), q);
    }

    #[test]
    fn scaled_state_bounds() {
        let p = params(6, 2, 0.5);
        let space = StateSpace::enumerate(&p).unwrap();
        for i in 0..space.len() {
            let x = space.scaled(i);
            assert!(x.0.iter().all(|&v| v >= 0.0));
            assert!(x.0[0] + x.0[1] <= p.delta * p.n as f64 + 1e-12);
        }
    }

    #[test]
    fn transitions_three_state_instance() {
        let p = params(1, 1, 0.5);
        assert!((p.n_lambda - 0.5).abs() < 1e-15);

        let t = transition_rates(&p, &JsqState(vec![0, 0]));
        assert_eq!(t, vec![(JsqState(vec![1, 0]), 0.5)]);

        let t = transition_rates(&p, &JsqState(vec![1, 0]));
        assert_eq!(
            t,
            vec![(JsqState(vec![1, 1]), 0.5), (JsqState(vec![0, 0]), 1.0)]
        );

        // Full system: arrivals blocked, departure at rate q_2 = 1.
        let t = transition_rates(&p, &JsqState(vec![1, 1]));
        assert_eq!(t, vec![(JsqState(vec![1, 0]), 1.0)]);
    }

    #[test]
    fn service_rates_telescope_to_q1() {
        let p = params(8, 3, 1.5);
        let space = StateSpace::enumerate(&p).unwrap();
        for q in space.states() {
            let service_total: f64 = transition_rates(&p, q)
                .iter()
                .filter(|(t, _)| t.total_customers() < q.total_customers())
                .map(|(_, r)| r)
                .sum();
            assert!((service_total - q.0[0] as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn generator_rows_sum_to_zero() {
        for (n, b, beta) in [(1u32, 1u32, 0.5), (6, 2, 1.0), (10, 1, 1.0)] {
            let p = params(n, b, beta);
            let inst = Instance::build(p).unwrap();
            assert!(inst.gen.max_row_sum() <= 1e-12);
        }
    }

    #[test]
    fn generator_three_state_rows() {
        let p = params(1, 1, 0.5);
        let inst = Instance::build(p).unwrap();
        // States in lexicographic order: (0,0), (1,0), (1,1).
        let g = &inst.gen;
        assert_eq!(g.dim(), 3);
        let row0: Vec<_> = g.row(0).collect();
        assert_eq!(row0, vec![(1, 0.5)]);
        assert!((g.diagonal()[0] + 0.5).abs() < 1e-15);
        let mut row1: Vec<_> = g.row(1).collect();
        row1.sort_by_key(|&(j, _)| j);
        assert_eq!(row1, vec![(0, 1.0), (2, 0.5)]);
        assert!((g.diagonal()[1] + 1.5).abs() < 1e-15);
        let row2: Vec<_> = g.row(2).collect();
        assert_eq!(row2, vec![(1, 1.0)]);
    }

    #[test]
    fn off_diagonal_mass_is_arrivals_plus_q1() {
        let p = params(7, 2, 1.0);
        let inst = Instance::build(p).unwrap();
        for (i, q) in inst.space.states().iter().enumerate() {
            let full = q.0.iter().all(|&v| v == p.n);
            let expected = if full { 0.0 } else { p.n_lambda } + q.0[0] as f64;
            let mass: f64 = inst.gen.row(i).map(|(_, r)| r).sum();
            assert!((mass - expected).abs() < 1e-10, "state {q}");
        }
    }

    #[test]
    fn jump_chain_is_irreducible() {
        for (n, b, beta) in [(1u32, 1u32, 0.5), (5, 2, 1.0), (10, 1, 2.0)] {
            let p = params(n, b, beta);
            let inst = Instance::build(p).unwrap();
            assert!(inst.gen.reaches_all(0));
        }
    }

    #[test]
    fn customer_count_drift_identity() {
        // Applying the generator to the total customer count gives
        // n*lambda * 1(not full) - q_1 at every state.
        for (n, b, beta) in [(4u32, 1u32, 1.0), (10, 1, 1.0), (6, 2, 0.8), (3, 3, 0.5)] {
            let p = params(n, b, beta);
            let inst = Instance::build(p).unwrap();
            let counts: Vec<f64> = inst
                .space
                .states()
                .iter()
                .map(|q| q.total_customers() as f64)
                .collect();
            let drift = inst.gen.apply(&counts);
            for (i, q) in inst.space.states().iter().enumerate() {
                let not_full = q.0[p.b as usize] < p.n;
                let expected = if not_full { p.n_lambda } else { 0.0 } - q.0[0] as f64;
                assert!((drift[i] - expected).abs() < 1e-10, "state {q}");
            }
        }
    }

    #[test]
    fn left_apply_matches_transpose_of_apply() {
        let p = params(5, 2, 1.0);
        let inst = Instance::build(p).unwrap();
        let dim = inst.gen.dim();
        // pi G and G^T pi must agree entry by entry: check via random vectors.
        let v: Vec<f64> = (0..dim)
            .map(|i| ((i * 2654435761) % 1000) as f64 / 1000.0)
            .collect();
        let w: Vec<f64> = (0..dim)
            .map(|i| ((i * 40503) % 997) as f64 / 997.0)
            .collect();
        let gv = inst.gen.apply(&v);
        let wg = inst.gen.left_apply(&w);
        let lhs: f64 = w.iter().zip(gv.iter()).map(|(a, b)| a * b).sum();
        let rhs: f64 = wg.iter().zip(v.iter()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}
