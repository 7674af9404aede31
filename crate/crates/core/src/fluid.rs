//! Fluid trajectories, the smoothed indicator, the fluid-based Lyapunov
//! function, and numerical verification of its drift inequality.
//!
//! The fluid limit of the centered pair `((Q1 - n)/n, Q2/n)` lives on
//! `Omega = {w1 <= 0, w2 >= 0}` with interior drift
//! `(-beta*delta - w1 + w2, -w2)`; trajectories have the closed form
//! `w2(t) = w2 e^{-t}`, `w1(t) = (w1 + w2 t) e^{-t} - beta*delta (1 - e^{-t})`
//! until they hit the vertical axis, after which the flow slides along the
//! axis with `w2` decreasing at constant speed `beta*delta`. The Lyapunov
//! function integrates a smoothed indicator of `w2` along the flow:
//!
//! ```text
//! f2(w) = int_0^inf phi(w2-coordinate of the flow at time t) dt,
//! V(x)  = f2(-delta x1, delta x2),
//! ```
//!
//! with `phi` ramping from 0 to 1 between `kappa1 * delta` and
//! `kappa2 * delta`, `kappa1 = 17/beta + beta`, `kappa2 = 2 kappa1`. The
//! flow structure yields a closed-form piecewise expression for `f2` with
//! one-dimensional integrals of `phi`, evaluated here exactly (the `s`
//! integrals; `phi` is piecewise cubic) or by adaptive quadrature (the `t`
//! integrals). High above the ramp, `V` satisfies the transport identity
//! `(beta - x1 - x2) d1 V - delta x2 d2 V = -1` and the generator applied
//! to `V` has uniformly negative drift `-3/17` up to explicit corner terms.

use crate::error::{Error, Result};
use crate::model::{transition_rates, JsqState, ModelParams};

/// Piecewise-cubic ramp: 0 below `l`, 1 above `u`, C1 throughout.
#[derive(Debug, Clone, Copy)]
pub struct SmoothedIndicator {
    pub l: f64,
    pub u: f64,
}

impl SmoothedIndicator {
    pub fn new(l: f64, u: f64) -> Result<Self> {
        if !(l < u) {
            return Err(Error::Domain(format!("need l < u, got {l} >= {u}")));
        }
        Ok(SmoothedIndicator { l, u })
    }

    pub fn value(&self, x: f64) -> f64 {
        let (l, u) = (self.l, self.u);
        let m = 0.5 * (l + u);
        if x <= l {
            0.0
        } else if x <= m {
            let d = x - l;
            d * d * (-d / ((m - l) * (m - l) * (u - l)) + 2.0 / ((m - l) * (u - l)))
        } else if x <= u {
            let d = x - u;
            1.0 - d * d * (d / ((m - u) * (m - u) * (u - l)) - 2.0 / ((m - u) * (u - l)))
        } else {
            1.0
        }
    }

    pub fn derivative(&self, x: f64) -> f64 {
        let (l, u) = (self.l, self.u);
        let m = 0.5 * (l + u);
        if x <= l || x >= u {
            0.0
        } else if x <= m {
            let d = x - l;
            -3.0 * d * d / ((m - l) * (m - l) * (u - l)) + 4.0 * d / ((m - l) * (u - l))
        } else {
            let d = x - u;
            -3.0 * d * d / ((m - u) * (m - u) * (u - l)) + 4.0 * d / ((m - u) * (u - l))
        }
    }

    /// Exact integral over `[a, b]` (antiderivatives of the cubic pieces).
    pub fn integral(&self, a: f64, b: f64) -> f64 {
        assert!(a <= b);
        let (l, u) = (self.l, self.u);
        let m = 0.5 * (l + u);
        let anti_low = |x: f64| -> f64 {
            // On [l, m]: -(x-l)^4/4 * A + (x-l)^3/3 * B.
            let aa = 1.0 / ((m - l) * (m - l) * (u - l));
            let bb = 2.0 / ((m - l) * (u - l));
            let d = x - l;
            -aa * d * d * d * d / 4.0 + bb * d * d * d / 3.0
        };
        let anti_high = |x: f64| -> f64 {
            // On [m, u]: x - C(x-u)^4/4 + D(x-u)^3/3.
            let cc = 1.0 / ((m - u) * (m - u) * (u - l));
            let dd = 2.0 / ((m - u) * (u - l));
            let d = x - u;
            x - cc * d * d * d * d / 4.0 + dd * d * d * d / 3.0
        };
        let piece = |lo: f64, hi: f64| -> f64 {
            if hi <= lo {
                return 0.0;
            }
            let mut acc = 0.0;
            // [lo, hi] clipped to the three active pieces.
            let s1 = lo.max(l).min(m);
            let e1 = hi.max(l).min(m);
            if e1 > s1 {
                acc += anti_low(e1) - anti_low(s1);
            }
            let s2 = lo.max(m).min(u);
            let e2 = hi.max(m).min(u);
            if e2 > s2 {
                acc += anti_high(e2) - anti_high(s2);
            }
            let s3 = lo.max(u);
            if hi > s3 {
                acc += hi - s3;
            }
            acc
        };
        piece(a, b)
    }
}

/// Adaptive Simpson quadrature with splits at supplied breakpoints.
fn adaptive_simpson(f: &impl Fn(f64) -> f64, a: f64, b: f64, breaks: &[f64], tol: f64) -> f64 {
    fn simpson(f: &impl Fn(f64) -> f64, a: f64, fa: f64, b: f64, fb: f64) -> (f64, f64) {
        let m = 0.5 * (a + b);
        let fm = f(m);
        ((b - a) / 6.0 * (fa + 4.0 * fm + fb), fm)
    }
    fn recurse(
        f: &impl Fn(f64) -> f64,
        a: f64,
        fa: f64,
        b: f64,
        fb: f64,
        whole: f64,
        fm: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (left, flm) = simpson(f, a, fa, m, fm);
        let (right, frm) = simpson(f, m, fm, b, fb);
        if depth == 0 || (left + right - whole).abs() <= 15.0 * tol {
            left + right + (left + right - whole) / 15.0
        } else {
            recurse(f, a, fa, m, fm, left, flm, tol / 2.0, depth - 1)
                + recurse(f, m, fm, b, fb, right, frm, tol / 2.0, depth - 1)
        }
    }
    if b <= a {
        return 0.0;
    }
    let mut points = vec![a];
    for &p in breaks {
        if p > a && p < b {
            points.push(p);
        }
    }
    points.push(b);
    points.sort_by(|x, y| x.partial_cmp(y).unwrap());
    let mut acc = 0.0;
    for w in points.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        if hi - lo < 1e-300 {
            continue;
        }
        let flo = f(lo);
        let fhi = f(hi);
        let (whole, fm) = simpson(f, lo, flo, hi, fhi);
        acc += recurse(f, lo, flo, hi, fhi, whole, fm, tol, 48);
    }
    acc
}

/// A point of the fluid domain `Omega`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FluidPoint {
    pub w1: f64,
    pub w2: f64,
}

impl FluidPoint {
    pub fn new(w1: f64, w2: f64) -> Result<Self> {
        if w1 > 0.0 || w2 < 0.0 {
            return Err(Error::Domain(format!(
                "({w1}, {w2}) lies outside the fluid domain"
            )));
        }
        Ok(FluidPoint { w1, w2 })
    }
}

/// The deterministic flow on `Omega` with boundary sliding.
#[derive(Debug, Clone, Copy)]
pub struct FluidFlow {
    /// Drift offset `beta * delta`.
    pub beta_delta: f64,
}

impl FluidFlow {
    /// Interior position at time `t` ignoring the axis constraint.
    fn interior(&self, p: FluidPoint, t: f64) -> FluidPoint {
        let e = (-t).exp();
        FluidPoint {
            w1: (p.w1 + p.w2 * t) * e - self.beta_delta * (1.0 - e),
            w2: p.w2 * e,
        }
    }

    /// Flow position at time `t`, sliding along the axis after the hit.
    pub fn trajectory(&self, p: FluidPoint, t: f64) -> FluidPoint {
        match self.tau(p) {
            Ok(tau) if t >= tau => {
                let hit_height = p.w2 * (-tau).exp();
                FluidPoint {
                    w1: 0.0,
                    w2: (hit_height - self.beta_delta * (t - tau)).max(0.0),
                }
            }
            _ => {
                let q = self.interior(p, t);
                FluidPoint {
                    w1: q.w1.min(0.0),
                    w2: q.w2,
                }
            }
        }
    }

    /// First time the interior flow reaches the vertical axis, solved by
    /// bracketing and bisection to near machine precision.
    pub fn tau(&self, p: FluidPoint) -> Result<f64> {
        if p.w1 == 0.0 {
            return Ok(0.0);
        }
        if p.w2 <= 0.0 {
            return Err(Error::NoAxisHit(p.w1, p.w2));
        }
        let g = |t: f64| (p.w1 + p.w2 * t) * (-t).exp() - self.beta_delta * (1.0 - (-t).exp());
        // g rises to a single maximum then decays to -beta*delta.
        let t_star = (p.w2 - p.w1 - self.beta_delta) / p.w2;
        if t_star <= 0.0 || g(t_star) < 0.0 {
            return Err(Error::NoAxisHit(p.w1, p.w2));
        }
        let (mut lo, mut hi) = (0.0f64, t_star);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if g(mid) < 0.0 {
                lo = mid;
            } else {
                hi = mid;
            }
            if hi - lo < 1e-15 * (1.0 + hi) {
                break;
            }
        }
        Ok(0.5 * (lo + hi))
    }

    /// Height `w2 e^{-tau}` at which the flow meets the axis.
    pub fn hit_height(&self, p: FluidPoint) -> Result<f64> {
        let tau = self.tau(p)?;
        Ok(p.w2 * (-tau).exp())
    }
}

/// Region of the fluid domain relative to the two ramp trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Region {
    /// Below the ramp: `w2 <= kappa1 * delta`.
    S0,
    /// Above the ramp start but below the lower critical trajectory.
    S1,
    /// Between the critical trajectories.
    S2,
    /// Above the upper critical trajectory.
    S3,
}

/// The Lyapunov function with its flow, ramp, and scaling bundled.
#[derive(Debug, Clone, Copy)]
pub struct LyapunovFn {
    pub beta: f64,
    pub delta: f64,
    pub kappa1: f64,
    pub kappa2: f64,
    pub phi: SmoothedIndicator,
    pub flow: FluidFlow,
}

impl LyapunovFn {
    pub fn new(params: &ModelParams) -> Self {
        Self::with_scaling(params.beta, params.delta)
    }

    pub fn with_scaling(beta: f64, delta: f64) -> Self {
        let kappa1 = 17.0 / beta + beta;
        let kappa2 = 2.0 * kappa1;
        LyapunovFn {
            beta,
            delta,
            kappa1,
            kappa2,
            phi: SmoothedIndicator::new(kappa1 * delta, kappa2 * delta)
                .expect("kappa1 < kappa2 always"),
            flow: FluidFlow {
                beta_delta: beta * delta,
            },
        }
    }

    /// Drift threshold in scaled chain coordinates: states with
    /// `x2 >= kappa2 + delta` satisfy the drift inequality.
    pub fn drift_threshold(&self) -> f64 {
        self.kappa2 + self.delta
    }

    pub fn classify(&self, p: FluidPoint) -> Region {
        let l = self.kappa1 * self.delta;
        let u = self.kappa2 * self.delta;
        if p.w2 <= l {
            return Region::S0;
        }
        match self.flow.hit_height(p) {
            Err(_) => Region::S1,
            Ok(eta) => {
                if eta < l {
                    Region::S1
                } else if eta <= u {
                    Region::S2
                } else {
                    Region::S3
                }
            }
        }
    }

    /// The integrated-ramp value at a fluid point.
    pub fn value_fluid(&self, p: FluidPoint) -> Result<f64> {
        let l = self.kappa1 * self.delta;
        let u = self.kappa2 * self.delta;
        let quad_tol = 1e-12;
        // Integrand of the interior segments after substituting
        // s = w2 e^{-t}: phi(s)/s over s, with breaks at the ramp knots.
        let phi = self.phi;
        let over_s = move |s: f64| phi.value(s) / s;
        let m = 0.5 * (l + u);
        let breaks = [l, m, u];
        match self.classify(p) {
            Region::S0 => Ok(0.0),
            Region::S1 => {
                if p.w2 <= u {
                    // int_0^{ln(w2/l)} phi(w2 e^{-t}) dt = int_l^{w2} phi/s ds.
                    Ok(adaptive_simpson(&over_s, l, p.w2, &breaks, quad_tol))
                } else {
                    let head = (p.w2 / u).ln();
                    let tail = adaptive_simpson(&over_s, l, u, &breaks, quad_tol);
                    Ok(head + tail)
                }
            }
            Region::S2 => {
                let eta = self.flow.hit_height(p)?;
                let s_tail = self.phi.integral(l, eta) / self.flow.beta_delta;
                if p.w2 <= u {
                    // int_0^{tau} phi(w2 e^{-t}) dt = int_eta^{w2} phi/s ds.
                    let inner = adaptive_simpson(&over_s, eta, p.w2, &breaks, quad_tol);
                    Ok(inner + s_tail)
                } else {
                    let head = (p.w2 / u).ln();
                    let inner = adaptive_simpson(&over_s, eta, u, &breaks, quad_tol);
                    Ok(head + inner + s_tail)
                }
            }
            Region::S3 => {
                let tau = self.flow.tau(p)?;
                let eta = p.w2 * (-tau).exp();
                let s_tail = self.phi.integral(l, u) / self.flow.beta_delta;
                Ok(tau + (eta - u) / self.flow.beta_delta + s_tail)
            }
        }
    }

    /// `V` on the scaled chain coordinates: `V(x) = f2(-delta x1, delta x2)`.
    pub fn value_scaled(&self, x1: f64, x2: f64) -> Result<f64> {
        self.value_fluid(FluidPoint {
            w1: -self.delta * x1,
            w2: self.delta * x2,
        })
    }
}

/// One state's drift comparison.
#[derive(Debug, Clone)]
pub struct DriftRow {
    pub q: JsqState,
    pub x2: f64,
    pub gxv: f64,
    pub bound: f64,
    /// `bound - gxv`; the inequality holds when this is >= -cushion.
    pub margin: f64,
}

#[derive(Debug, Clone)]
pub struct DriftReport {
    pub rows: Vec<DriftRow>,
    pub excluded: usize,
    pub cushion: f64,
    pub all_within_cushion: bool,
}

impl DriftReport {
    pub fn to_csv(&self, dim: usize) -> String {
        let mut out = String::new();
        for i in 1..=dim {
            out.push_str(&format!("q{i},"));
        }
        out.push_str("gxv,bound_rhs,margin\n");
        for row in &self.rows {
            for v in &row.q.0 {
                out.push_str(&format!("{v},"));
            }
            out.push_str(&format!("{:e},{:e},{:e}\n", row.gxv, row.bound, row.margin));
        }
        out
    }
}

/// Numerical tolerance cushion on the drift bound: the generator multiplies
/// `V` differences by rates of order `n`, so evaluation noise near 1e-10 can
/// amplify to around 1e-3 at desk-scale `n`.
pub const DRIFT_CUSHION: f64 = 0.02;

/// Verifies `G_X V(x^q) <= -3/17 + (delta/beta)(q3 1(b>1) - n lambda
/// 1(q1 = q2 = n))` over the supplied states. States below the threshold
/// `x2 >= kappa2 + delta` are excluded and counted.
pub fn lyapunov_drift_check(params: &ModelParams, states: &[JsqState]) -> Result<DriftReport> {
    let lyap = LyapunovFn::new(params);
    let threshold = lyap.drift_threshold();
    let mut rows = Vec::new();
    let mut excluded = 0usize;
    for q in states {
        if !q.is_valid(params) {
            return Err(Error::Domain(format!("invalid state {q}")));
        }
        let x = q.scale(params);
        if x.0[1] < threshold {
            excluded += 1;
            continue;
        }
        let v_here = lyap.value_scaled(x.0[0], x.0[1])?;
        let mut gxv = 0.0;
        for (target, rate) in transition_rates(params, q) {
            let xt = target.scale(params);
            gxv += rate * (lyap.value_scaled(xt.0[0], xt.0[1])? - v_here);
        }
        let q3 = if params.b > 1 { q.0[2] as f64 } else { 0.0 };
        let corner = if q.0[0] == params.n && q.0[1] == params.n {
            params.n_lambda
        } else {
            0.0
        };
        let bound = -3.0 / 17.0 + params.delta / params.beta * (q3 - corner);
        rows.push(DriftRow {
            q: q.clone(),
            x2: x.0[1],
            gxv,
            bound,
            margin: bound - gxv,
        });
    }
    let all_within_cushion = rows.iter().all(|r| r.margin >= -DRIFT_CUSHION);
    Ok(DriftReport {
        rows,
        excluded,
        cushion: DRIFT_CUSHION,
        all_within_cushion,
    })
}

/// Deterministic sample of states at and above the drift threshold:
/// `q2` sweeps the eligible range, `q1` takes extremes and midpoints.
pub fn drift_sample_states(params: &ModelParams, max_states: usize) -> Vec<JsqState> {
    let lyap = LyapunovFn::new(params);
    let threshold = lyap.drift_threshold();
    let q2_min = (threshold / params.delta).ceil() as u32;
    let n = params.n;
    let d = params.dim();
    let mut out = Vec::new();
    if q2_min > n {
        return out;
    }
    let q2_steps = 8u32;
    let q2_span = (n - q2_min).max(1);
    for i in 0..=q2_steps {
        let q2 = q2_min + (q2_span * i) / q2_steps;
        if q2 > n {
            break;
        }
        for frac in [0u32, 1, 2, 4] {
            let q1 = q2 + ((n - q2) * frac) / 4;
            let mut q = vec![0u32; d];
            q[0] = q1;
            q[1] = q2;
            let state = JsqState(q);
            if state.is_valid(params) && !out.contains(&state) {
                out.push(state);
                if out.len() >= max_states {
                    return out;
                }
            }
        }
    }
    out
}

/// Transport-identity spot check at function level: central differences of
/// `V` must satisfy `(beta - x1 - x2) d1 V - x2 d2 V = -1` wherever
/// `x2 >= kappa2` (any real point, not only states). The identity is the
/// flow equation of `f2` pushed through the scaling `V(x) =
/// f2(-delta x1, delta x2)`, and is the step that turns the generator
/// expansion into the constant `-1` drift.
pub fn transport_identity_residual(lyap: &LyapunovFn, x1: f64, x2: f64) -> Result<f64> {
    let h = 1e-5;
    assert!(x1 >= h, "central differences need interior points");
    let d1 = (lyap.value_scaled(x1 + h, x2)? - lyap.value_scaled(x1 - h, x2)?) / (2.0 * h);
    let d2 = (lyap.value_scaled(x1, x2 + h)? - lyap.value_scaled(x1, x2 - h)?) / (2.0 * h);
    let lhs = (lyap.beta - (x1 + x2)) * d1 - x2 * d2;
    Ok(lhs + 1.0)
}
