//! Gambler's-ruin closed forms and brute-force oracles.
//!
//! A player starts with wealth `z`, wins one unit with probability `p`,
//! loses with probability `q = 1 - p`, and stops on hitting `0` (ruin) or
//! `a`. The ruin probability and the duration generating function calibrate
//! the coupling-phase probabilities of the queueing analysis, where turn
//! times are exponential with rate `r` and the relevant transform is
//! `E exp(-duration) = E s^{D_z}` at `s = r / (r + 1)`.

use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::rngutil::{replication_rng, MeanSe};
use rand::Rng;

/// Parameters of one gambler's-ruin game.
#[derive(Debug, Clone, Copy)]
pub struct RuinSpec {
    /// Up-step probability.
    pub p: f64,
    /// Down-step probability, `1 - p`.
    pub q: f64,
    /// Initial wealth, `0 < z < a`.
    pub z: u64,
    /// Terminal wealth.
    pub a: u64,
    /// Event rate of the continuous-time version.
    pub rate: f64,
}

impl RuinSpec {
    pub fn new(p: f64, z: u64, a: u64, rate: f64) -> Result<Self> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::Domain(format!("p = {p} must lie in (0,1)")));
        }
        if z == 0 || z >= a {
            return Err(Error::Domain(format!(
                "need 0 < z < a, got z = {z}, a = {a}"
            )));
        }
        if !(rate > 0.0) {
            return Err(Error::Domain("rate must be positive".into()));
        }
        Ok(RuinSpec {
            p,
            q: 1.0 - p,
            z,
            a,
            rate,
        })
    }
}

/// Probability of ruin (hitting 0 before `a`).
///
/// `((q/p)^a - (q/p)^z) / ((q/p)^a - 1)` for `p != q`, with the continuity
/// limit `1 - z/a` for the fair game. Powers are taken in log space and the
/// expression is rearranged per the sign of `ln(q/p)` so no intermediate
/// overflows for wealths in the hundreds.
pub fn ruin_probability(spec: &RuinSpec) -> f64 {
    let z = spec.z as f64;
    let a = spec.a as f64;
    let log_r = (spec.q / spec.p).ln();
    if log_r.abs() < 1e-14 {
        return 1.0 - z / a;
    }
    if log_r < 0.0 {
        // r < 1: (r^z - r^a) / (1 - r^a); powers decay.
        let rz = (z * log_r).exp();
        let ra = (a * log_r).exp();
        (rz - ra) / (1.0 - ra)
    } else {
        // r > 1: divide through by r^a; powers decay.
        let rza = ((z - a) * log_r).exp();
        let rma = (-a * log_r).exp();
        (1.0 - rza) / (1.0 - rma)
    }
}

fn lambda_roots(spec: &RuinSpec, s: f64) -> (f64, f64) {
    // 1 - 4 p q s^2 = (1 - s^2) + s^2 (p - q)^2, which is exact and
    // cancellation-free near s = 1 with p close to q.
    let disc = ((1.0 - s) * (1.0 + s) + (s * (spec.p - spec.q)).powi(2)).sqrt();
    let l1 = (1.0 + disc) / (2.0 * spec.p * s);
    let l2 = (1.0 - disc) / (2.0 * spec.p * s);
    (l1, l2)
}

/// Generating function `E s^{D_z}` of the game duration, `s` in `(0,1)`.
///
/// Evaluated in the combined form
/// `(l2^z (l1^a - 1) - l1^z (l2^a - 1)) / (l1^a - l2^a)` normalized by
/// `l1^a`, so every power in the final expression has magnitude at most one
/// (`l1 > 1 > l2 > 0` on the open interval).
pub fn duration_pgf(spec: &RuinSpec, s: f64) -> Result<f64> {
    if !(s > 0.0 && s < 1.0) {
        return Err(Error::Domain(format!("s = {s} must lie in (0,1)")));
    }
    let (l1, l2) = lambda_roots(spec, s);
    let z = spec.z as f64;
    let a = spec.a as f64;
    let log_l1 = l1.ln();
    let log_l2 = l2.ln();
    // Divide numerator and denominator by l1^a.
    let l2z = (z * log_l2).exp();
    let l1_zma = ((z - a) * log_l1).exp();
    let l1_ma = (-a * log_l1).exp();
    let l2a = (a * log_l2).exp();
    let ratio_a = (a * (log_l2 - log_l1)).exp();
    let num = l2z * (1.0 - l1_ma) - l1_zma * (l2a - 1.0);
    let den = 1.0 - ratio_a;
    Ok(num / den)
}

/// Laplace-type transform of the continuous-time game duration at unit
/// argument: `E exp(-sum_{i<=D_z} E_i) = E s^{D_z}` with `s = r/(r+1)`.
pub fn ct_duration_mgf(spec: &RuinSpec) -> Result<f64> {
    duration_pgf(spec, spec.rate / (spec.rate + 1.0))
}

/// Exact-by-linear-algebra reference values from first-step analysis on the
/// interior states `1..a-1`.
#[derive(Debug, Clone, Copy)]
pub struct AbsorbingOracle {
    pub ruin_probability: f64,
    pub expected_duration: f64,
    pub pgf: Option<f64>,
}

/// First-step-analysis solves for the ruin probability, expected duration,
/// and optionally the duration pgf at `s`. Dense tridiagonal solves; guarded
/// to `a <= 10_000`.
pub fn absorbing_oracle(spec: &RuinSpec, s: Option<f64>) -> Result<AbsorbingOracle> {
    if spec.a > 10_000 {
        return Err(Error::Capacity {
            states: spec.a as u128,
            max: 10_000,
        });
    }
    if let Some(s) = s {
        if !(s > 0.0 && s < 1.0) {
            return Err(Error::Domain(format!("s = {s} must lie in (0,1)")));
        }
    }
    let m = spec.a as usize - 1;
    // Generic tridiagonal first-step solve:
    //   x_j = c_j + coeff * (p x_{j+1} + q x_{j-1}),  j = 1..=m,
    // with boundary values x_0, x_a given. Backward substitution through
    //   x_j = alpha_j + beta_j x_{j+1}.
    let solve = |coeff: f64, c: f64, x0: f64, xa: f64, at: usize| -> f64 {
        let mut alpha = vec![0.0f64; m + 1];
        let mut beta = vec![0.0f64; m + 1];
        // j = 1: x_1 = c + coeff (p x_2 + q x_0)
        alpha[1] = c + coeff * spec.q * x0;
        beta[1] = coeff * spec.p;
        for j in 2..=m {
            let denom = 1.0 - coeff * spec.q * beta[j - 1];
            alpha[j] = (c + coeff * spec.q * alpha[j - 1]) / denom;
            beta[j] = coeff * spec.p / denom;
        }
        // x_m uses x_{m+1} = x_a.
        let mut x = alpha[m] + beta[m] * xa;
        let mut j = m;
        while j > at {
            j -= 1;
            x = alpha[j] + beta[j] * x;
        }
        x
    };
    let at = spec.z as usize;
    let ruin = solve(1.0, 0.0, 1.0, 0.0, at);
    let duration = solve(1.0, 1.0, 0.0, 0.0, at);
    let pgf = s.map(|s| solve(s, 0.0, 1.0, 1.0, at));
    Ok(AbsorbingOracle {
        ruin_probability: ruin,
        expected_duration: duration,
        pgf,
    })
}

/// Monte Carlo estimate of `E exp(-duration)` for the continuous-time game.
pub fn simulate_ct_mgf(spec: &RuinSpec, reps: usize, seed: u64) -> MeanSe {
    let samples: Vec<f64> = (0..reps)
        .map(|rep| {
            let mut rng = replication_rng(seed, rep as u64);
            let mut wealth = spec.z;
            let mut total = 0.0f64;
            while wealth > 0 && wealth < spec.a {
                let e: f64 = rng.random::<f64>();
                total += -e.ln() / spec.rate;
                if rng.random::<f64>() < spec.p {
                    wealth += 1;
                } else {
                    wealth -= 1;
                }
            }
            (-total).exp()
        })
        .collect();
    MeanSe::from_samples(&samples)
}

/// One row of the heavy-traffic transform scan.
#[derive(Debug, Clone)]
pub struct MgfScanRow {
    pub n: u64,
    pub q2: u64,
    /// Transform value maximized over the stage index `i = 1..=b+1`.
    pub mgf: f64,
    pub worst_stage: u32,
}

/// Scans the continuous-time ruin transform that certifies the coupling
/// region probability, across a ladder of system sizes.
///
/// For each `n`: with `theta3 = floor(sqrt(n) beta / 2)` and
/// `q2 = floor(q2_fraction * 2 * floor(gamma sqrt(n)))`, each stage
/// `i = 1..=b+1` plays a game with up probability
/// `p = n lambda / (n lambda + w_i)`, rate `n lambda + w_i` where
/// `w_i = q_bi - theta3` and `q_bi = n - q2 - 1 - theta3 +
/// floor(theta3 * i/(b+1))`, initial wealth `z = theta3`, and terminal
/// wealth `a = theta3 + floor(theta3/(b+1))`. The scan reports the max over
/// stages; the sequence staying uniformly below one is the certificate.
pub fn halfin_whitt_mgf_scan(
    b: u32,
    beta: f64,
    q2_fraction: f64,
    ns: &[u64],
) -> Result<Vec<MgfScanRow>> {
    if !(0.0..=1.0).contains(&q2_fraction) {
        return Err(Error::Domain("q2 fraction must lie in [0,1]".into()));
    }
    let gamma = cycle_gamma(beta);
    let mut rows = Vec::with_capacity(ns.len());
    for &n in ns {
        let sqrt_n = (n as f64).sqrt();
        if beta >= sqrt_n {
            return Err(Error::Regime(format!(
                "n = {n} too small for beta = {beta}"
            )));
        }
        let n_lambda = n as f64 * (1.0 - beta / sqrt_n);
        let theta3 = (sqrt_n * beta / 2.0).floor() as u64;
        if theta3 < 2 {
            return Err(Error::Regime(format!(
                "n = {n} gives initial wealth below 2"
            )));
        }
        let step = theta3 / (b as u64 + 1);
        if step == 0 {
            return Err(Error::Regime(format!("n = {n} gives zero terminal step")));
        }
        let q2 = (q2_fraction * 2.0 * (gamma * sqrt_n).floor()) as u64;
        let mut worst = f64::NEG_INFINITY;
        let mut worst_stage = 1u32;
        for i in 1..=(b + 1) {
            let q_bi = n as i64 - q2 as i64 - 1 - theta3 as i64
                + (theta3 as f64 * i as f64 / (b as f64 + 1.0)).floor() as i64;
            let w = q_bi - theta3 as i64;
            if w <= 0 {
                return Err(Error::Regime(format!(
                    "n = {n}, q2 = {q2}: down rate {w} must be positive"
                )));
            }
            let rate = n_lambda + w as f64;
            let p = n_lambda / rate;
            let spec = RuinSpec::new(p, theta3, theta3 + step, rate)?;
            let mgf = ct_duration_mgf(&spec)?;
            if mgf > worst {
                worst = mgf;
                worst_stage = i;
            }
        }
        rows.push(MgfScanRow {
            n,
            q2,
            mgf: worst,
            worst_stage,
        });
    }
    Ok(rows)
}

/// Cycle geometry constant `gamma = 2 (17/beta + beta + 1)` used by the
/// coupling-phase analysis.
pub fn cycle_gamma(beta: f64) -> f64 {
    2.0 * (17.0 / beta + beta + 1.0)
}

/// Closed-form lower bound on the probability that the idle-server count
/// rebuilds before the waiting mass doubles, from the biased-random-walk
/// comparison: ruin of a walk with initial wealth `floor(sqrt(n) beta/2)`,
/// span `floor(gamma sqrt(n))` above it, and step probabilities
/// `n lambda / (n lambda + theta1 - 3 theta2)` up.
pub fn rebuild_probability_bound(params: &ModelParams, gamma: f64) -> Result<f64> {
    let n = params.n as f64;
    let theta1 = params.n as i64 - (n.sqrt() * params.beta / 2.0).floor() as i64;
    let theta2 = (gamma * n.sqrt()).floor() as i64;
    let down = theta1 - 3 * theta2;
    if down <= 0 {
        return Err(Error::Regime(format!(
            "need theta1 - 3 theta2 > 0; got {theta1} - 3*{theta2}"
        )));
    }
    let z = (n.sqrt() * params.beta / 2.0).floor() as u64;
    if z == 0 {
        return Err(Error::Regime("initial wealth is zero".into()));
    }
    let a = z + theta2 as u64;
    let p = params.n_lambda / (params.n_lambda + down as f64);
    let spec = RuinSpec::new(p, z, a, params.n_lambda + down as f64)?;
    Ok(ruin_probability(&spec))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ruin_one_step_cases() {
        // z = 1, a = 2: ruin iff the single step goes down.
        let spec = RuinSpec::new(0.6, 1, 2, 1.0).unwrap();
        assert!((ruin_probability(&spec) - 0.4).abs() < 1e-15);
        let fair = RuinSpec::new(0.5, 1, 2, 1.0).unwrap();
        assert!((ruin_probability(&fair) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ruin_matches_oracle_grid() {
        for a in 2..=12u64 {
            for z in 1..a {
                for p in [0.3, 0.5, 0.55, 0.8] {
                    let spec = RuinSpec::new(p, z, a, 1.0).unwrap();
                    let oracle = absorbing_oracle(&spec, None).unwrap();
                    assert!(
                        (ruin_probability(&spec) - oracle.ruin_probability).abs() < 1e-12,
                        "p={p} z={z} a={a}"
                    );
                }
            }
        }
    }

    #[test]
    fn fair_game_duration_is_z_times_a_minus_z() {
        for a in 3..=10u64 {
            for z in 1..a {
                let spec = RuinSpec::new(0.5, z, a, 1.0).unwrap();
                let oracle = absorbing_oracle(&spec, None).unwrap();
                let classic = (z * (a - z)) as f64;
                assert!((oracle.expected_duration - classic).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn pgf_single_step_and_fair_example() {
        // z = 1, a = 2: the game lasts exactly one turn, E s^D = s.
        for p in [0.2, 0.5, 0.9] {
            let spec = RuinSpec::new(p, 1, 2, 1.0).unwrap();
            for s in [0.1, 0.5, 0.9] {
                assert!((duration_pgf(&spec, s).unwrap() - s).abs() < 1e-13);
            }
        }
        // Fair game, z = 1, a = 3, s = 1/2: first-step system gives 1/3.
        let spec = RuinSpec::new(0.5, 1, 3, 1.0).unwrap();
        assert!((duration_pgf(&spec, 0.5).unwrap() - 1.0 / 3.0).abs() < 1e-13);
    }

    #[test]
    fn pgf_matches_oracle_grid() {
        for a in 2..=10u64 {
            for z in 1..a {
                for p in [0.35, 0.5, 0.65] {
                    let spec = RuinSpec::new(p, z, a, 1.0).unwrap();
                    for s in [0.3, 0.7] {
                        let closed = duration_pgf(&spec, s).unwrap();
                        let oracle = absorbing_oracle(&spec, Some(s)).unwrap().pgf.unwrap();
                        assert!((closed - oracle).abs() < 1e-12, "p={p} z={z} a={a} s={s}");
                    }
                }
            }
        }
    }

    #[test]
    fn pgf_is_increasing_and_proper() {
        let spec = RuinSpec::new(0.55, 3, 9, 1.0).unwrap();
        let mut last = 0.0;
        for i in 1..40 {
            let s = i as f64 / 40.0;
            let v = duration_pgf(&spec, s).unwrap();
            assert!(v > last);
            last = v;
        }
        let near_one = duration_pgf(&spec, 1.0 - 1e-9).unwrap();
        assert!((near_one - 1.0).abs() < 1e-6);
    }

    #[test]
    fn root_identities() {
        let spec = RuinSpec::new(0.42, 2, 7, 1.0).unwrap();
        for s in [0.2, 0.5, 0.8, 0.99] {
            let (l1, l2) = lambda_roots(&spec, s);
            assert!((l1 * l2 - spec.q / spec.p).abs() < 1e-12);
            assert!((l1 + l2 - 1.0 / (spec.p * s)).abs() < 1e-12);
        }
    }

    #[test]
    fn ct_transform_examples() {
        // z = 1, a = 2: E s^D = s = rate / (rate + 1).
        for rate in [0.5, 2.0, 10.0] {
            let spec = RuinSpec::new(0.7, 1, 2, rate).unwrap();
            assert!((ct_duration_mgf(&spec).unwrap() - rate / (rate + 1.0)).abs() < 1e-13);
        }
        // Monotone in the rate: instantaneous games have transform near 1.
        let mut last = 0.0;
        for rate in [1.0, 4.0, 16.0, 64.0, 256.0, 4096.0] {
            let spec = RuinSpec::new(0.6, 2, 6, rate).unwrap();
            let v = ct_duration_mgf(&spec).unwrap();
            assert!(v > last);
            last = v;
        }
        assert!(last > 0.99);
    }

    #[test]
    fn ct_transform_matches_simulation() {
        let spec = RuinSpec::new(0.6, 2, 6, 3.0).unwrap();
        let closed = ct_duration_mgf(&spec).unwrap();
        let mc = simulate_ct_mgf(&spec, 40_000, 11);
        assert!(
            (closed - mc.mean).abs() <= 3.0 * mc.se,
            "closed {closed} vs mc {} +- {}",
            mc.mean,
            mc.se
        );
    }

    #[test]
    fn mgf_scan_stays_below_one() {
        for beta in [0.5, 1.0, 2.0] {
            let rows = halfin_whitt_mgf_scan(1, beta, 0.0, &[100, 10_000, 1_000_000]).unwrap();
            for row in &rows {
                assert!(row.mgf < 0.999, "beta={beta} n={} mgf={}", row.n, row.mgf);
            }
        }
        // Larger beta pushes the limiting value down.
        let low = halfin_whitt_mgf_scan(1, 0.5, 0.0, &[10_000]).unwrap()[0].mgf;
        let mid = halfin_whitt_mgf_scan(1, 1.0, 0.0, &[10_000]).unwrap()[0].mgf;
        let high = halfin_whitt_mgf_scan(1, 2.0, 0.0, &[10_000]).unwrap()[0].mgf;
        assert!(low > mid && mid > high);
        // Maximal waiting mass still certifies.
        let worst = halfin_whitt_mgf_scan(1, 1.0, 1.0, &[10_000]).unwrap()[0].mgf;
        assert!(worst < 1.0);
    }

    #[test]
    fn large_wealth_powers_stay_finite() {
        // n ~ 10^6 scale wealths; the log-space forms must not overflow.
        let spec = RuinSpec::new(0.52, 1000, 1500, 2e6).unwrap();
        let v = ct_duration_mgf(&spec).unwrap();
        assert!(v.is_finite() && v > 0.0 && v < 1.0);
        let r = ruin_probability(&spec);
        assert!(r.is_finite() && (0.0..=1.0).contains(&r));
    }
}
