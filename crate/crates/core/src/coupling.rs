//! Event-driven simulation of the couplings behind the finite-difference
//! (Stein factor) estimates: the two-system extra-customer coupling and its
//! coupling time, cycle-phase probabilities, and the four-system couplings
//! that represent second differences of Poisson solutions.
//!
//! # The two-system coupling
//!
//! System 2 is a copy of system 1 carrying one additional low-priority
//! customer under preemptive resume. The joint state is `(q, theta)` where
//! `q` is system 1's occupancy vector and `theta` in `1..=b+1` records the
//! depth of the extra customer's server in system 2 (`theta = 1` means it is
//! in service). Tie-breaking follows the construction that makes the
//! coupling work: arrivals prefer genuinely idle servers, and when system 2
//! has no idle server the arrival preempts the extra customer.
//!
//! Transitions from `(q, theta)`:
//! - `theta = 1`, arrival with `q_1 <= n-2`: same idle server in both
//!   systems, `q += e1`.
//! - `theta = 1`, arrival with `q_1 = n-1`: system 1 takes the last idle
//!   server while system 2 preempts, so `q += e1` and `theta -> 2`.
//! - `theta = 1`, extra-customer completion (rate 1): the systems couple.
//! - `theta = i >= 2`, arrival at level `j < i`: common server, `q += ej`.
//! - `theta = i >= 2`, arrival at level `i` with `q_i < n-1`: a non-tagged
//!   server with `i-1` customers exists in both systems, `q += ei`.
//! - `theta = i >= 2`, arrival at level `i` with `q_i = n-1`: system 1 fills
//!   the level while system 2 pushes the extra customer deeper: `q += ei`,
//!   `theta -> i+1`; if `i = b+1` system 2 instead blocks the arrival and
//!   the systems couple.
//! - `theta = i >= 2`, tagged-server front completion (rate 1):
//!   `q -= e(i-1)`, `theta -> i-1`.
//! - common service at level `j` (rate `q_j - q_{j+1}` minus one if the
//!   tagged server sits at that level): `q -= ej`.
//!
//! Before coupling the second marginal is always `q + e(theta)`, so system 2
//! carries exactly one more customer; after coupling the marginals are
//! identical forever.

use crate::error::{Error, Result};
use crate::exact::{finite_difference, transient_expectation, ExtensionPolicy};
use crate::grid::{GridFunction, TestFunction};
use crate::model::{Instance, JsqState, ModelParams};
use crate::rngutil::{replication_rng, MeanSe};
use crate::ruin;
use rand::Rng;
use rayon::prelude::*;

fn exp_time<R: Rng>(rng: &mut R, rate: f64) -> f64 {
    debug_assert!(rate > 0.0);
    let u: f64 = rng.random();
    -(1.0 - u).ln() / rate
}

/// Live state of the coupled pair.
pub struct PairSim {
    params: ModelParams,
    /// System 1 occupancy vector.
    pub q: Vec<u32>,
    /// Depth index of the extra customer, `None` once coupled.
    pub theta: Option<usize>,
    pub time: f64,
    pub events: u64,
}

impl PairSim {
    pub fn new(params: &ModelParams, q0: &JsqState, theta0: usize) -> Result<Self> {
        if !q0.is_valid(params) {
            return Err(Error::InvalidPair(format!(
                "q0 = {q0} is not a valid state"
            )));
        }
        let d = params.dim();
        if theta0 < 1 || theta0 > d {
            return Err(Error::InvalidPair(format!(
                "theta0 = {theta0} outside 1..={d}"
            )));
        }
        let mut q2 = q0.0.clone();
        q2[theta0 - 1] += 1;
        if !JsqState(q2).is_valid(params) {
            return Err(Error::InvalidPair(format!(
                "q0 + e({theta0}) leaves the state space from {q0}"
            )));
        }
        Ok(PairSim {
            params: *params,
            q: q0.0.clone(),
            theta: Some(theta0),
            time: 0.0,
            events: 0,
        })
    }

    /// Second marginal: `q + e(theta)` before coupling, `q` afterwards.
    pub fn system2(&self) -> Vec<u32> {
        let mut q2 = self.q.clone();
        if let Some(theta) = self.theta {
            q2[theta - 1] += 1;
        }
        q2
    }

    pub fn coupled(&self) -> bool {
        self.theta.is_none()
    }

    /// Advances one event; returns the holding time spent in the previous
    /// state.
    pub fn step<R: Rng>(&mut self, rng: &mut R) -> f64 {
        let d = self.params.dim();
        let n = self.params.n;
        let n_lambda = self.params.n_lambda;
        self.events += 1;
        match self.theta {
            None => {
                // Plain JSQ chain after coupling.
                let arrival = crate::model::arrival_level(&self.params, &JsqState(self.q.clone()));
                let mut rates = [0.0f64; 16];
                let mut total = 0.0;
                if arrival.is_some() {
                    rates[0] = n_lambda;
                    total += n_lambda;
                }
                for j in 0..d {
                    let next = if j + 1 < d { self.q[j + 1] } else { 0 };
                    let r = (self.q[j] - next) as f64;
                    rates[j + 1] = r;
                    total += r;
                }
                if total == 0.0 {
                    // Empty system with blocked arrivals cannot occur; the
                    // empty state always accepts arrivals.
                    unreachable!("no transitions from {:?}", self.q);
                }
                let dt = exp_time(rng, total);
                self.time += dt;
                let mut pick = rng.random::<f64>() * total;
                if let Some(level) = arrival {
                    if pick < rates[0] {
                        self.q[level] += 1;
                        return dt;
                    }
                    pick -= rates[0];
                }
                for j in 0..d {
                    if pick < rates[j + 1] {
                        self.q[j] -= 1;
                        return dt;
                    }
                    pick -= rates[j + 1];
                }
                // Rounding fallthrough: take the last positive-rate event.
                for j in (0..d).rev() {
                    if rates[j + 1] > 0.0 {
                        self.q[j] -= 1;
                        return dt;
                    }
                }
                unreachable!()
            }
            Some(theta) => {
                debug_assert!(self.q[theta - 1] < n);
                // Common services by level, excluding the tagged server when
                // it holds common customers (theta >= 2 at level theta-1).
                let mut rates = [0.0f64; 16];
                let mut total = n_lambda; // arrivals never blocked pre-coupling
                for j in 0..d {
                    let next = if j + 1 < d { self.q[j + 1] } else { 0 };
                    let mut c = (self.q[j] - next) as f64;
                    if theta >= 2 && j == theta - 2 {
                        c -= 1.0;
                    }
                    debug_assert!(c >= 0.0);
                    rates[j + 1] = c;
                    total += c;
                }
                // Tagged event: completion of the extra customer (theta = 1)
                // or of the front customer at the tagged server.
                total += 1.0;
                let dt = exp_time(rng, total);
                self.time += dt;
                let mut pick = rng.random::<f64>() * total;
                if pick < n_lambda {
                    self.arrival_event();
                    return dt;
                }
                pick -= n_lambda;
                for j in 0..d {
                    if pick < rates[j + 1] {
                        self.q[j] -= 1;
                        return dt;
                    }
                    pick -= rates[j + 1];
                }
                // Tagged event.
                if theta == 1 {
                    self.theta = None; // extra customer leaves: coupled
                } else {
                    self.q[theta - 2] -= 1;
                    self.theta = Some(theta - 1);
                }
                dt
            }
        }
    }

    fn arrival_event(&mut self) {
        let n = self.params.n;
        let d = self.params.dim();
        let theta = self.theta.expect("arrival_event runs pre-coupling");
        let level = self
            .q
            .iter()
            .position(|&qi| qi < n)
            .expect("system 1 is never full");
        debug_assert!(
            level + 1 <= theta,
            "arrival level never exceeds the tagged depth"
        );
        if level + 1 == theta {
            if self.q[level] == n - 1 {
                // The tagged server was the only minimal one: system 1 fills
                // the level, system 2 pushes the extra customer deeper or
                // blocks the arrival entirely at the last level.
                self.q[level] += 1;
                if theta == d {
                    self.theta = None; // blocking couples the systems
                } else {
                    self.theta = Some(theta + 1);
                }
                return;
            }
            // A non-tagged server with the same occupancy exists in both
            // systems.
        }
        self.q[level] += 1;
    }
}

/// Result of one coupled-pair replication.
#[derive(Debug, Clone)]
pub struct PairOutcome {
    pub tau_c: f64,
    pub events: u64,
    /// System-1 state at the coupling time.
    pub state_at_coupling: JsqState,
}

/// Runs the coupled pair until it couples.
pub fn simulate_coupled_pair(
    params: &ModelParams,
    q0: &JsqState,
    theta0: usize,
    seed: u64,
    replication: u64,
) -> Result<PairOutcome> {
    let mut sim = PairSim::new(params, q0, theta0)?;
    let mut rng = replication_rng(seed, replication);
    while !sim.coupled() {
        let before = sim.theta.unwrap();
        let total_before: u64 = sim.q.iter().map(|&v| v as u64).sum();
        sim.step(&mut rng);
        if let Some(after) = sim.theta {
            debug_assert!(
                after.abs_diff(before) <= 1,
                "tagged depth moved by more than one: {before} -> {after}"
            );
            let total_after: u64 = sim.q.iter().map(|&v| v as u64).sum();
            debug_assert!(total_after.abs_diff(total_before) <= 1);
        }
    }
    Ok(PairOutcome {
        tau_c: sim.time,
        events: sim.events,
        state_at_coupling: JsqState(sim.q.clone()),
    })
}

/// Per-initial-cell coupling time statistics.
#[derive(Debug, Clone)]
pub struct CouplingCell {
    pub q0: JsqState,
    pub theta0: usize,
    pub reps: usize,
    pub tau: MeanSe,
    /// `mean tau / (1 + delta q_2)`, the envelope the bound predicts.
    pub envelope_ratio: f64,
}

#[derive(Debug, Clone)]
pub struct CouplingStats {
    pub cells: Vec<CouplingCell>,
    pub seed: u64,
    pub max_envelope_ratio: f64,
}

impl CouplingStats {
    pub fn to_csv(&self, params: &ModelParams) -> String {
        let mut out = String::from("n,b,beta,");
        for i in 1..=params.dim() {
            out.push_str(&format!("q{i},"));
        }
        out.push_str("theta0,reps,mean_tau,se,envelope_ratio\n");
        for cell in &self.cells {
            out.push_str(&format!("{},{},{},", params.n, params.b, params.beta));
            for v in &cell.q0.0 {
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!(
                "{},{},{:e},{:e},{:e}\n",
                cell.theta0, cell.reps, cell.tau.mean, cell.tau.se, cell.envelope_ratio
            ));
        }
        out
    }
}

/// Estimates expected coupling times over a grid of initial cells.
pub fn estimate_coupling_time(
    params: &ModelParams,
    grid: &[(JsqState, usize)],
    reps: usize,
    seed: u64,
) -> Result<CouplingStats> {
    let mut cells = Vec::with_capacity(grid.len());
    for (cell_idx, (q0, theta0)) in grid.iter().enumerate() {
        PairSim::new(params, q0, *theta0)?;
        let samples: Vec<f64> = (0..reps as u64)
            .into_par_iter()
            .map(|rep| {
                simulate_coupled_pair(params, q0, *theta0, seed ^ (cell_idx as u64) << 32, rep)
                    .expect("validated initial pair")
                    .tau_c
            })
            .collect();
        let tau = MeanSe::from_samples(&samples);
        let envelope = 1.0 + params.delta * q0.0[1.min(params.dim() - 1)] as f64;
        cells.push(CouplingCell {
            q0: q0.clone(),
            theta0: *theta0,
            reps,
            tau,
            envelope_ratio: tau.mean / envelope,
        });
    }
    let max_envelope_ratio = cells.iter().map(|c| c.envelope_ratio).fold(0.0, f64::max);
    Ok(CouplingStats {
        cells,
        seed,
        max_envelope_ratio,
    })
}

/// Default initial grid for the coupling-time envelope study: extremes of
/// `q_1`, a ladder in `q_2`, and both shallow and deep tagged depths.
pub fn default_coupling_grid(params: &ModelParams) -> Vec<(JsqState, usize)> {
    let n = params.n;
    let d = params.dim();
    let sqrt_n = (n as f64).sqrt().floor() as u32;
    let mut grid = Vec::new();
    let q2_ladder = [0u32, sqrt_n, 2 * sqrt_n.min(n / 2)];
    for &q2 in &q2_ladder {
        for &q1 in &[q2.max(1), n / 2, n - 1] {
            if q1 > n || q2 > q1 {
                continue;
            }
            let mut q = vec![0u32; d];
            q[0] = q1;
            if d > 1 {
                q[1] = q2;
            }
            let state = JsqState(q);
            // Deep extra customer where legal, else in service.
            if q1 < n {
                grid.push((state.clone(), 1));
            }
            if d > 1 && q1 > q2 {
                grid.push((state, 2));
            }
        }
    }
    grid.dedup();
    grid
}

/// Comparison of the coupled second marginal against the exact transient
/// law of the plain chain started one customer higher.
#[derive(Debug, Clone)]
pub struct MarginalReport {
    pub t: f64,
    pub reps: usize,
    /// Per-coordinate `(simulated mean, exact mean, gap in SE units)`.
    pub coordinates: Vec<(f64, f64, f64)>,
    /// Same comparison for the scaled observable `h`.
    pub h_moment: (f64, f64, f64),
    pub max_gap_se: f64,
}

/// Simulates the coupled pair to time `t` and compares the second marginal
/// with uniformization of the plain chain from `q0 + e(theta0)`.
pub fn marginal_law_check(
    inst: &Instance,
    q0: &JsqState,
    theta0: usize,
    t: f64,
    h: TestFunction,
    reps: usize,
    seed: u64,
) -> Result<MarginalReport> {
    let params = &inst.params;
    let d = params.dim();
    PairSim::new(params, q0, theta0)?;
    let sampled: Vec<(Vec<u32>, f64)> = (0..reps as u64)
        .into_par_iter()
        .map(|rep| {
            let mut sim = PairSim::new(params, q0, theta0).expect("validated");
            let mut rng = replication_rng(seed, rep);
            // Advance to time t; the state at t is the one holding when the
            // clock passes t.
            loop {
                let q_before = sim.system2();
                let t_before = sim.time;
                sim.step(&mut rng);
                if sim.time >= t {
                    let _ = t_before;
                    let hval = h.eval(&JsqState(q_before.clone()).scale(params).0);
                    return (q_before, hval);
                }
            }
        })
        .collect();
    // Exact side: plain chain from q0 + e(theta0).
    let mut q2 = q0.0.clone();
    q2[theta0 - 1] += 1;
    let start = JsqState(q2);
    let mut coordinates = Vec::with_capacity(d);
    let mut max_gap_se: f64 = 0.0;
    for j in 0..d {
        let coord =
            GridFunction::from_values(inst.space.states().iter().map(|q| q.0[j] as f64).collect());
        let exact = transient_expectation(inst, &coord, &start, t)?;
        let samples: Vec<f64> = sampled.iter().map(|(q, _)| q[j] as f64).collect();
        let stat = MeanSe::from_samples(&samples);
        let gap = stat.gap_in_se(exact);
        coordinates.push((stat.mean, exact, gap));
        max_gap_se = max_gap_se.max(gap);
    }
    let h_grid = h.on_space(&inst.space);
    let h_exact = transient_expectation(inst, &h_grid, &start, t)?;
    let h_samples: Vec<f64> = sampled.iter().map(|(_, v)| *v).collect();
    let h_stat = MeanSe::from_samples(&h_samples);
    let h_gap = h_stat.gap_in_se(h_exact);
    max_gap_se = max_gap_se.max(h_gap);
    Ok(MarginalReport {
        t,
        reps,
        coordinates,
        h_moment: (h_stat.mean, h_exact, h_gap),
        max_gap_se,
    })
}

/// Plain-chain event simulator for hitting times.
pub struct ChainSim {
    params: ModelParams,
    pub q: Vec<u32>,
    pub time: f64,
}

impl ChainSim {
    pub fn new(params: &ModelParams, q0: &JsqState) -> Result<Self> {
        if !q0.is_valid(params) {
            return Err(Error::Domain(format!("invalid start {q0}")));
        }
        Ok(ChainSim {
            params: *params,
            q: q0.0.clone(),
            time: 0.0,
        })
    }

    pub fn step<R: Rng>(&mut self, rng: &mut R) {
        let d = self.params.dim();
        let arrival = self.q.iter().position(|&qi| qi < self.params.n);
        let mut rates = [0.0f64; 16];
        let mut total = 0.0;
        if arrival.is_some() {
            rates[0] = self.params.n_lambda;
            total += rates[0];
        }
        for j in 0..d {
            let next = if j + 1 < d { self.q[j + 1] } else { 0 };
            let r = (self.q[j] - next) as f64;
            rates[j + 1] = r;
            total += r;
        }
        let dt = exp_time(rng, total);
        self.time += dt;
        let mut pick = rng.random::<f64>() * total;
        if let Some(level) = arrival {
            if pick < rates[0] {
                self.q[level] += 1;
                return;
            }
            pick -= rates[0];
        }
        for j in 0..d {
            if pick < rates[j + 1] {
                self.q[j] -= 1;
                return;
            }
            pick -= rates[j + 1];
        }
        for j in (0..d).rev() {
            if rates[j + 1] > 0.0 {
                self.q[j] -= 1;
                return;
            }
        }
    }
}

/// Cycle geometry `theta1 = n - floor(sqrt(n) beta/2)`,
/// `theta2 = floor(gamma sqrt(n))`.
#[derive(Debug, Clone, Copy)]
pub struct CycleGeometry {
    pub gamma: f64,
    pub theta1: u32,
    pub theta2: u32,
}

pub fn cycle_geometry(params: &ModelParams, gamma_override: Option<f64>) -> CycleGeometry {
    let gamma = gamma_override.unwrap_or_else(|| ruin::cycle_gamma(params.beta));
    let sqrt_n = (params.n as f64).sqrt();
    CycleGeometry {
        gamma,
        theta1: params.n - (sqrt_n * params.beta / 2.0).floor() as u32,
        theta2: (gamma * sqrt_n).floor() as u32,
    }
}

/// Monte Carlo estimates of the cycle-phase quantities, with applicability
/// flags for regimes where the defining states do not exist.
#[derive(Debug, Clone)]
pub struct CycleReport {
    pub geometry: CycleGeometry,
    /// `P(tau_1(theta1) < tau_2(2 theta2))` from the worst-case start
    /// `(n, theta2, 0, ...)`, with its closed-form random-walk lower bound.
    pub rebuild_probability: Option<(MeanSe, f64)>,
    /// `E[tau_2(2 theta2) /\ tau_1(theta1)]` from starts with
    /// `q_1 in {theta1+1, n}`, `q_2 = theta2`.
    pub cycle_start_times: Vec<(JsqState, MeanSe)>,
    /// `P(tau_C < tau_1(n))` from the deep-coupling region.
    pub coupling_before_full: Option<MeanSe>,
}

/// Estimates the cycle-phase probabilities. Components whose defining
/// states cannot exist at this `n` (the geometry outgrows the state space)
/// are reported as `None`.
pub fn cycle_phase_estimates(
    params: &ModelParams,
    reps: usize,
    seed: u64,
    gamma_override: Option<f64>,
) -> Result<CycleReport> {
    let geom = cycle_geometry(params, gamma_override);
    let d = params.dim();
    let n = params.n;
    // Component (a): rebuild probability and its closed-form bound.
    let rebuild_probability = if geom.theta2 >= 1
        && 2 * geom.theta2 <= n
        && geom.theta1 as i64 - 3 * geom.theta2 as i64 > 0
    {
        let mut q = vec![0u32; d];
        q[0] = n;
        q[1] = geom.theta2;
        let start = JsqState(q);
        let successes: Vec<f64> = (0..reps as u64)
            .into_par_iter()
            .map(|rep| {
                let mut sim = ChainSim::new(params, &start).expect("valid start");
                let mut rng = replication_rng(seed ^ 0xa1, rep);
                loop {
                    if sim.q[0] <= geom.theta1 {
                        return 1.0;
                    }
                    if sim.q[1] >= 2 * geom.theta2 {
                        return 0.0;
                    }
                    sim.step(&mut rng);
                }
            })
            .collect();
        let stat = MeanSe::from_samples(&successes);
        let bound = ruin::rebuild_probability_bound(params, geom.gamma)?;
        Some((stat, bound))
    } else {
        None
    };
    // Component (b): expected cycle start from the worst-case corners.
    let mut cycle_start_times = Vec::new();
    if geom.theta2 >= 1 && 2 * geom.theta2 <= n && geom.theta1 < n {
        for &q1 in &[geom.theta1 + 1, n] {
            if q1 > n || geom.theta2 > q1 {
                continue;
            }
            let mut q = vec![0u32; d];
            q[0] = q1;
            q[1] = geom.theta2;
            let start = JsqState(q);
            let samples: Vec<f64> = (0..reps as u64)
                .into_par_iter()
                .map(|rep| {
                    let mut sim = ChainSim::new(params, &start).expect("valid start");
                    let mut rng = replication_rng(seed ^ 0xb2, rep);
                    loop {
                        if sim.q[0] <= geom.theta1 || sim.q[1] >= 2 * geom.theta2 {
                            return sim.time;
                        }
                        sim.step(&mut rng);
                    }
                })
                .collect();
            cycle_start_times.push((start, MeanSe::from_samples(&samples)));
        }
    }
    // Component (c): probability of coupling before all servers fill, from
    // the far corner of the coupling region.
    let coupling_before_full = {
        let q1 = geom.theta1.min(n - 1).max(1);
        let q2 = (2 * geom.theta2).min(q1).min(n - 1);
        let mut q = vec![0u32; d];
        q[0] = q1;
        q[1] = q2;
        // Deepest legal tagged index at this corner.
        let mut theta0 = 1;
        for i in (1..=d).rev() {
            let qi = q[i - 1];
            let prev = if i >= 2 { q[i - 2] } else { n };
            if qi < n && (i == 1 || prev > qi) {
                theta0 = i;
                break;
            }
        }
        let start = JsqState(q);
        if PairSim::new(params, &start, theta0).is_ok() {
            let successes: Vec<f64> = (0..reps as u64)
                .into_par_iter()
                .map(|rep| {
                    let mut sim = PairSim::new(params, &start, theta0).expect("validated");
                    let mut rng = replication_rng(seed ^ 0xc3, rep);
                    loop {
                        if sim.coupled() {
                            return 1.0;
                        }
                        if sim.q[0] >= n {
                            return 0.0;
                        }
                        sim.step(&mut rng);
                    }
                })
                .collect();
            Some(MeanSe::from_samples(&successes))
        } else {
            None
        }
    };
    Ok(CycleReport {
        geometry: geom,
        rebuild_probability,
        cycle_start_times,
        coupling_before_full,
    })
}

/// Which second difference the four-system coupling estimates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SecondDiffVariant {
    /// `D1^2 f_h(x)`.
    D11,
    /// `D2 D1 f_h(x)`.
    D21,
    /// `D2^2 f_h(x)`.
    D22,
    /// `f_h(0, x2) - f_h(delta, x2 + delta)` at the boundary.
    Diagonal,
}

/// Estimate of a second difference by the coupled four-system (or two-system
/// diagonal) representation, with the exact grid value for comparison.
#[derive(Debug, Clone)]
pub struct FourSystemReport {
    pub variant: SecondDiffVariant,
    pub estimate: MeanSe,
    pub exact: f64,
    pub gap_in_se: f64,
}

struct FourState {
    /// Occupancy of the poorest system (no extra customers).
    p: Vec<u32>,
    /// Tagged depths; `extras[k] = Some(depth)` while extra `k` is alive.
    extras: [Option<usize>; 2],
}

impl FourState {
    fn system(&self, with_a: bool, with_b: bool) -> Vec<u32> {
        let mut q = self.p.clone();
        if with_a {
            if let Some(t) = self.extras[0] {
                q[t - 1] += 1;
            }
        }
        if with_b {
            if let Some(t) = self.extras[1] {
                q[t - 1] += 1;
            }
        }
        q
    }
}

/// Simulates the four-system coupling for `variant` at the base point `x`
/// (a valid state whose difference stencil stays in the state space) and
/// compares the estimator with the exact finite difference of `f_h`.
///
/// Each replication accumulates the integral of the coupled `h` difference
/// until a collapse event (a tagged service completes, a buffered extra
/// reaches service, or the relevant system fills), then resolves the
/// remaining integral exactly through `f_h` at the four current states. The
/// resolution is unbiased at any stopping time because each marginal remains
/// a plain chain; the chosen events are the ones that make the remainder a
/// clean difference of `f_h` values.
pub fn four_system_second_difference(
    inst: &Instance,
    f_h: &GridFunction,
    variant: SecondDiffVariant,
    base: &JsqState,
    h: TestFunction,
    reps: usize,
    seed: u64,
) -> Result<FourSystemReport> {
    let params = &inst.params;

    let exact = exact_reference(inst, f_h, variant, base)?;
    let lookup = |q: &[u32]| -> f64 {
        let r = inst
            .space
            .rank(&JsqState(q.to_vec()))
            .unwrap_or_else(|| panic!("coupled system left the state space at {q:?}"));
        f_h.values[r]
    };
    let h_scaled = |q: &[u32]| -> f64 { h.eval(&JsqState(q.to_vec()).scale(params).0) };
    let samples: Vec<f64> = (0..reps as u64)
        .into_par_iter()
        .map(|rep| {
            let mut rng = replication_rng(seed, rep);
            match variant {
                SecondDiffVariant::Diagonal => {
                    simulate_diagonal(params, base, &mut rng, &lookup, &h_scaled)
                }
                _ => simulate_quadruple(params, variant, base, &mut rng, &lookup, &h_scaled),
            }
        })
        .collect();
    let estimate = MeanSe::from_samples(&samples);
    let gap_in_se = estimate.gap_in_se(exact);
    Ok(FourSystemReport {
        variant,
        estimate,
        exact,
        gap_in_se,
    })
}

fn exact_reference(
    inst: &Instance,
    f_h: &GridFunction,
    variant: SecondDiffVariant,
    base: &JsqState,
) -> Result<f64> {
    let d = inst.params.dim();
    let mut a = vec![0u32; d];
    match variant {
        SecondDiffVariant::D11 => a[0] = 2,
        SecondDiffVariant::D21 => {
            a[0] = 1;
            a[1] = 1;
        }
        SecondDiffVariant::D22 => a[1] = 2,
        SecondDiffVariant::Diagonal => {
            // f(0, x2) - f(delta, x2 + delta): base must sit on x1 = 0.
            if base.0[0] != inst.params.n {
                return Err(Error::Domain(
                    "diagonal variant needs q1 = n (x1 = 0)".into(),
                ));
            }
            let r0 = inst
                .space
                .rank(base)
                .ok_or_else(|| Error::Domain(format!("state {base} not enumerated")))?;
            let mut q = base.0.clone();
            q[0] -= 1;
            q[1] += 1;
            let r1 = inst
                .space
                .rank(&JsqState(q))
                .ok_or_else(|| Error::OutOfDomain("diagonal partner state".into()))?;
            return Ok(f_h.values[r0] - f_h.values[r1]);
        }
    }
    finite_difference(inst, f_h, &a, base, ExtensionPolicy::Strict)
}

/// Four-system run for the `D11`, `D21`, and `D22` variants.
///
/// The estimator integrates the mixed difference
/// `combo(g) = [g(A,B) - g(A)] - [g(B) - g()]` of `h` along the coupled
/// paths and resolves the remainder with the same combination of `f_h`
/// values at the stop; `sign` matches the combination to the requested
/// difference (`D21`'s stencil orients the A-axis the other way).
fn simulate_quadruple<R: Rng>(
    params: &ModelParams,
    variant: SecondDiffVariant,
    base: &JsqState,
    rng: &mut R,
    f_lookup: &impl Fn(&[u32]) -> f64,
    h_scaled: &impl Fn(&[u32]) -> f64,
) -> f64 {
    let n = params.n;
    let d = params.dim();
    // Poorest system, initial tagged depths, and orientation per variant.
    // `base` is the state at the difference's base point x.
    let (mut st, sign) = match variant {
        SecondDiffVariant::D11 => {
            // x has the most customers: p removes two in-service customers.
            let mut p = base.0.clone();
            assert!(
                p[0] >= 2 && p[0] - 2 >= p[1],
                "stencil must stay in the state space"
            );
            p[0] -= 2;
            (
                FourState {
                    p,
                    extras: [Some(1), Some(1)],
                },
                1.0,
            )
        }
        SecondDiffVariant::D21 => {
            // p = base minus one in-service customer (extra A, depth 1);
            // extra B waits at depth 2.
            let mut p = base.0.clone();
            assert!(
                p[0] >= 1 && p[0] - 1 >= p[1] + 1,
                "stencil must stay in the state space"
            );
            p[0] -= 1;
            (
                FourState {
                    p,
                    extras: [Some(1), Some(2)],
                },
                -1.0,
            )
        }
        SecondDiffVariant::D22 => {
            // p = base; both extras wait at depth 2 behind distinct servers.
            let p = base.0.clone();
            assert!(
                p[0] >= p[1] + 2,
                "two servers with exactly one customer are needed"
            );
            (
                FourState {
                    p,
                    extras: [Some(2), Some(2)],
                },
                1.0,
            )
        }
        SecondDiffVariant::Diagonal => unreachable!(),
    };
    let combo = |g: &dyn Fn(&[u32]) -> f64, st: &FourState| -> f64 {
        (g(&st.system(true, true)) - g(&st.system(true, false)))
            - (g(&st.system(false, true)) - g(&st.system(false, false)))
    };
    let in_service = |e: Option<usize>| -> bool { matches!(e, Some(1)) };
    let mut integral = 0.0;
    loop {
        // Collapse on fill: D11 stops when the richest system (two extras
        // in service) fills; D21 and D22 stop when the poorest fills.
        let filled = match variant {
            SecondDiffVariant::D11 => st.p[0] + 2 >= n,
            _ => st.p[0] >= n,
        };
        if filled {
            return sign * (integral + combo(f_lookup, &st));
        }
        // Rates: arrival, common services by level (tagged servers holding
        // exactly one common front customer are excluded; those completions
        // are the tagged events), and one unit-rate clock per live extra.
        let excluded_level1 = st.extras.iter().filter(|e| matches!(e, Some(2))).count() as u32;
        let mut rates = [0.0f64; 18];
        let mut total = params.n_lambda;
        for j in 0..d {
            let next = if j + 1 < d { st.p[j + 1] } else { 0 };
            let mut c = st.p[j] - next;
            if j == 0 {
                assert!(
                    c >= excluded_level1,
                    "tagged servers must hold exactly one customer"
                );
                c -= excluded_level1;
            }
            rates[j + 1] = c as f64;
            total += c as f64;
        }
        let tagged_base = d + 1;
        for (k, e) in st.extras.iter().enumerate() {
            if e.is_some() {
                rates[tagged_base + k] = 1.0;
                total += 1.0;
            }
        }
        let dt = exp_time(rng, total);
        integral += combo(h_scaled, &st) * dt;
        let mut pick = rng.random::<f64>() * total;
        if pick < params.n_lambda {
            // Arrival. If the richest live system is full, the arrival
            // preempts its in-service extras (it lands on the tagged
            // server); in every system it adds one busy server to the
            // common pool.
            let richest_q1 = st.p[0] + st.extras.iter().filter(|e| in_service(**e)).count() as u32;
            if richest_q1 == n {
                match variant {
                    SecondDiffVariant::D11 => {
                        unreachable!("the fill check stops before preemption")
                    }
                    _ => {
                        for e in st.extras.iter_mut() {
                            if in_service(*e) {
                                *e = Some(2);
                            }
                        }
                    }
                }
            }
            st.p[0] += 1;
            continue;
        }
        pick -= params.n_lambda;
        let mut done = false;
        for j in 0..d {
            if pick < rates[j + 1] {
                st.p[j] -= 1;
                done = true;
                break;
            }
            pick -= rates[j + 1];
        }
        if done {
            continue;
        }
        for k in 0..2 {
            if rates[tagged_base + k] > 0.0 {
                if pick < rates[tagged_base + k] {
                    match st.extras[k] {
                        Some(1) => {
                            // In-service extra completes: two system pairs
                            // merge and the remainder resolves exactly
                            // (to zero, as the lookup confirms).
                            st.extras[k] = None;
                            return sign * (integral + combo(f_lookup, &st));
                        }
                        Some(2) => {
                            // Front customer at the tagged server completes:
                            // the extra reaches service.
                            st.p[0] -= 1;
                            st.extras[k] = Some(1);
                            match variant {
                                // D21's waiting extra and both D22 extras
                                // reaching service are collapse events.
                                SecondDiffVariant::D21 if k == 1 => {
                                    return sign * (integral + combo(f_lookup, &st));
                                }
                                SecondDiffVariant::D22 => {
                                    return sign * (integral + combo(f_lookup, &st));
                                }
                                // D21's extra A returning to service just
                                // continues the run.
                                _ => {}
                            }
                        }
                        _ => unreachable!(),
                    }
                    done = true;
                    break;
                }
                pick -= rates[tagged_base + k];
            }
        }
        if !done {
            // Rounding fallthrough: take the last positive-rate service.
            for j in (0..d).rev() {
                if rates[j + 1] > 0.0 {
                    st.p[j] -= 1;
                    break;
                }
            }
        }
    }
}

/// Two-system run for the boundary diagonal difference
/// `f_h(0, x2) - f_h(delta, x2 + delta)`.
fn simulate_diagonal<R: Rng>(
    params: &ModelParams,
    base: &JsqState,
    rng: &mut R,
    f_lookup: &impl Fn(&[u32]) -> f64,
    h_scaled: &impl Fn(&[u32]) -> f64,
) -> f64 {
    let n = params.n;
    let d = params.dim();
    // Common configuration: base has q1 = n; the common part removes the
    // in-service customer (system 1's extra) from one server.
    let mut c = base.0.clone();
    assert!(c[0] == n && c[1] + 1 <= n - 1);
    c[0] -= 1;
    // System 1 = c + one in-service customer; system 2 = c + one waiting
    // customer behind a singleton server.
    let sys1 = |c: &[u32]| -> Vec<u32> {
        let mut q = c.to_vec();
        q[0] += 1;
        q
    };
    let sys2 = |c: &[u32]| -> Vec<u32> {
        let mut q = c.to_vec();
        q[1] += 1;
        q
    };
    let mut integral = 0.0;
    loop {
        // Rates: arrival; common services excluding the singleton server W
        // backing system 2's waiting customer; the in-service extra (rate
        // 1); W's front customer (rate 1).
        let mut rates = [0.0f64; 18];
        let mut total = params.n_lambda;
        for j in 0..d {
            let next = if j + 1 < d { c[j + 1] } else { 0 };
            let mut cnt = c[j] - next;
            if j == 0 {
                assert!(cnt >= 1, "the singleton server must persist until collapse");
                cnt -= 1;
            }
            rates[j + 1] = cnt as f64;
            total += cnt as f64;
        }
        total += 2.0; // extra completion + W front completion
        let dt = exp_time(rng, total);
        integral += (h_scaled(&sys1(&c)) - h_scaled(&sys2(&c))) * dt;
        let mut pick = rng.random::<f64>() * total;
        if pick < params.n_lambda {
            if c[0] == n - 1 {
                // System 1 is full and system 2 fills now; both systems
                // become "full with one depth-2 extra" and share the same
                // occupancy law: the remaining difference is zero.
                return integral;
            }
            c[0] += 1;
            continue;
        }
        pick -= params.n_lambda;
        let mut handled = false;
        for j in 0..d {
            if pick < rates[j + 1] {
                c[j] -= 1;
                handled = true;
                break;
            }
            pick -= rates[j + 1];
        }
        if handled {
            continue;
        }
        pick -= 0.0;
        if pick < 1.0 {
            // The in-service extra in system 1 completes: remaining
            // difference is f(c) - f(c + e2).
            return integral + f_lookup(&c) - f_lookup(&sys2(&c));
        }
        // W's front customer completes: system 2's waiting customer enters
        // service, and both systems have identical occupancy.
        c[0] -= 1;
        return integral;
    }
}
