//! Grid functions and the shipped test-function family.
//!
//! A [`GridFunction`] assigns one real value to every enumerated state; it is
//! the common currency of the exact analysis (stationary distribution,
//! Poisson solutions, Lyapunov values). A [`TestFunction`] is a named member
//! of the family of observables `h` used throughout the pipeline. Each test
//! function is defined functionally on all of the nonnegative orthant, is
//! normalized to `h(0) = 0`, and carries a claimed constant `c` bounding its
//! forward differences, `|Delta^a h| <= c * delta^{|a|}` for `|a| <= 2`.

use crate::error::{Error, Result};
use crate::model::{ModelParams, StateSpace};

/// A real value per enumerated state.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    pub values: Vec<f64>,
}

impl GridFunction {
    pub fn zeros(len: usize) -> Self {
        GridFunction {
            values: vec![0.0; len],
        }
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        GridFunction { values }
    }

    /// Evaluates `f` on the scaled image of every state.
    pub fn from_scaled_fn(space: &StateSpace, f: impl Fn(&[f64]) -> f64) -> Self {
        let values = (0..space.len()).map(|i| f(&space.scaled(i).0)).collect();
        GridFunction { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

impl std::ops::Index<usize> for GridFunction {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.values[i]
    }
}

/// Named family of observables, each normalized so `h(0) = 0` and defined on
/// the whole nonnegative orthant (not just the lattice of states).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TestFunction {
    /// Identically zero; degenerate member for exactness checks.
    Zero,
    /// `x_1` (scaled idle-server count).
    X1,
    /// `x_2` (scaled count of servers with a waiting customer).
    X2,
    /// `x_1 + x_2`.
    SumFirstTwo,
    /// `|x_1 + ... + x_{b+1} - beta| - beta`: the centered total-mass
    /// deviation used by the moment-bound pipeline.
    CenteredTotalAbs { beta: f64 },
    /// `1 - exp(-(x_1 + x_2))`: bounded and smooth.
    ExpSaturating,
    /// `(1 - exp(-x_1)) * (1 - exp(-x_2))`: smooth saturating product.
    SaturatingProduct,
}

impl TestFunction {
    /// The shipped family for a given slack parameter.
    pub fn family(beta: f64) -> Vec<TestFunction> {
        vec![
            TestFunction::X1,
            TestFunction::X2,
            TestFunction::SumFirstTwo,
            TestFunction::CenteredTotalAbs { beta },
            TestFunction::ExpSaturating,
            TestFunction::SaturatingProduct,
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            TestFunction::Zero => "zero",
            TestFunction::X1 => "x1",
            TestFunction::X2 => "x2",
            TestFunction::SumFirstTwo => "x1_plus_x2",
            TestFunction::CenteredTotalAbs { .. } => "abs_total_minus_beta",
            TestFunction::ExpSaturating => "one_minus_exp",
            TestFunction::SaturatingProduct => "saturating_product",
        }
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        match self {
            TestFunction::Zero => 0.0,
            TestFunction::X1 => x[0],
            TestFunction::X2 => {
                if x.len() > 1 {
                    x[1]
                } else {
                    0.0
                }
            }
            TestFunction::SumFirstTwo => x[0] + if x.len() > 1 { x[1] } else { 0.0 },
            TestFunction::CenteredTotalAbs { beta } => {
                let total: f64 = x.iter().sum();
                (total - beta).abs() - beta
            }
            TestFunction::ExpSaturating => {
                let s = x[0] + if x.len() > 1 { x[1] } else { 0.0 };
                1.0 - (-s).exp()
            }
            TestFunction::SaturatingProduct => {
                let x2 = if x.len() > 1 { x[1] } else { 0.0 };
                (1.0 - (-x[0]).exp()) * (1.0 - (-x2).exp())
            }
        }
    }

    /// Claimed difference-class constant: `|Delta^a h| <= c delta^{|a|}`
    /// for `1 <= |a| <= class_order()` over the nonnegative lattice.
    pub fn class_constant(&self) -> f64 {
        match self {
            TestFunction::Zero => 0.0,
            TestFunction::X1 | TestFunction::X2 | TestFunction::SumFirstTwo => 1.0,
            TestFunction::CenteredTotalAbs { .. } => 1.0,
            TestFunction::ExpSaturating => 1.0,
            TestFunction::SaturatingProduct => 1.0,
        }
    }

    /// Highest difference order the class constant covers. The centered
    /// absolute value has a kink, so its second difference across the kink
    /// is of size `2 delta` rather than `O(delta^2)`: it is a first-order
    /// class member only. The smooth members are second-order.
    pub fn class_order(&self) -> u32 {
        match self {
            TestFunction::CenteredTotalAbs { .. } => 1,
            _ => 2,
        }
    }

    /// Samples the grid function on a state space.
    pub fn on_space(&self, space: &StateSpace) -> GridFunction {
        GridFunction::from_scaled_fn(space, |x| self.eval(x))
    }
}

/// Result of checking `|Delta^a h| <= c delta^{|a|}` over the whole grid of
/// states, for every multi-index with `1 <= |a| <= 2`.
#[derive(Debug, Clone)]
pub struct MembershipReport {
    pub name: &'static str,
    pub claimed_constant: f64,
    /// Largest observed `|Delta^a h| / delta^{|a|}` over states and
    /// multi-indices.
    pub max_normalized_difference: f64,
    pub holds: bool,
}

/// Numerically verifies the difference-class membership of `h`, up to its
/// claimed order, over the grid `delta * N^{b+1}` restricted to indices
/// reachable from enumerated states (the lattice inequality is defined on
/// the whole orthant; states cover the region the pipeline touches).
pub fn verify_membership(
    params: &ModelParams,
    space: &StateSpace,
    h: TestFunction,
) -> MembershipReport {
    let d = params.dim();
    let delta = params.delta;
    let mut max_norm: f64 = 0.0;
    let eval_at = |k: &[i64]| -> f64 {
        let x: Vec<f64> = k.iter().map(|&ki| ki as f64 * delta).collect();
        h.eval(&x)
    };
    let mut multi_indices: Vec<Vec<u32>> = Vec::new();
    for i in 0..d {
        let mut a = vec![0u32; d];
        a[i] = 1;
        multi_indices.push(a.clone());
        if h.class_order() >= 2 {
            a[i] = 2;
            multi_indices.push(a);
            for j in (i + 1)..d {
                let mut a = vec![0u32; d];
                a[i] = 1;
                a[j] = 1;
                multi_indices.push(a);
            }
        }
    }
    for idx in 0..space.len() {
        let k = space.scaled(idx).grid_index(params);
        for a in &multi_indices {
            let order: u32 = a.iter().sum();
            let diff = forward_difference_lattice(&k, a, &eval_at);
            let norm = diff.abs() / delta.powi(order as i32);
            max_norm = max_norm.max(norm);
        }
    }
    let claimed = h.class_constant();
    MembershipReport {
        name: h.name(),
        claimed_constant: claimed,
        max_normalized_difference: max_norm,
        holds: max_norm <= claimed * (1.0 + 1e-9),
    }
}

/// Iterated forward difference of a lattice function at index `k`:
/// `Delta^a f(k) = sum over the binomial stencil` with unit steps in each
/// coordinate.
pub fn forward_difference_lattice(k: &[i64], a: &[u32], f: &impl Fn(&[i64]) -> f64) -> f64 {
    fn binom(n: u32, k: u32) -> f64 {
        let mut acc = 1.0;
        for i in 0..k {
            acc = acc * (n - i) as f64 / (i + 1) as f64;
        }
        acc
    }
    // Expand one coordinate at a time.
    let mut terms: Vec<(Vec<i64>, f64)> = vec![(k.to_vec(), 1.0)];
    for (coord, &ai) in a.iter().enumerate() {
        if ai == 0 {
            continue;
        }
        let mut next = Vec::with_capacity(terms.len() * (ai as usize + 1));
        for (point, w) in &terms {
            for j in 0..=ai {
                let sign = if (ai - j) % 2 == 0 { 1.0 } else { -1.0 };
                let mut p = point.clone();
                p[coord] += j as i64;
                next.push((p, w * sign * binom(ai, j)));
            }
        }
        terms = next;
    }
    terms.iter().map(|(p, w)| w * f(p)).sum()
}

/// Expectation of `h` under a probability vector on the state space.
pub fn expect(space: &StateSpace, pi: &GridFunction, h: TestFunction) -> f64 {
    expect_values(pi, &h.on_space(space))
}

/// Expectation of an arbitrary grid function under a probability vector.
pub fn expect_values(pi: &GridFunction, h: &GridFunction) -> f64 {
    assert_eq!(pi.len(), h.len());
    pi.values
        .iter()
        .zip(h.values.iter())
        .map(|(p, v)| p * v)
        .sum()
}

/// Guards that a vector is a probability distribution within tolerance.
pub fn check_distribution(pi: &GridFunction, tol: f64) -> Result<()> {
    let total: f64 = pi.values.iter().sum();
    if (total - 1.0).abs() > tol {
        return Err(Error::Domain(format!(
            "distribution mass {total} differs from 1"
        )));
    }
    if pi.values.iter().any(|&p| p < -tol) {
        return Err(Error::Domain("distribution has a negative entry".into()));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Instance, JsqState, ModelParams};

    #[test]
    fn test_functions_vanish_at_origin() {
        for h in TestFunction::family(0.7) {
            assert_eq!(h.eval(&[0.0, 0.0]), 0.0, "{}", h.name());
        }
    }

    #[test]
    fn expectation_examples() {
        let p = ModelParams::new(1, 1, 0.5).unwrap();
        let inst = Instance::build(p).unwrap();
        // Exact stationary law of the three-state chain.
        let pi = GridFunction::from_values(vec![4.0 / 7.0, 2.0 / 7.0, 1.0 / 7.0]);
        let got = expect(&inst.space, &pi, TestFunction::SumFirstTwo);
        assert!((got - 5.0 / 7.0).abs() < 1e-15);

        // h == 0 has zero expectation; an indicator recovers the mass.
        let zero = GridFunction::zeros(3);
        assert_eq!(expect_values(&pi, &zero), 0.0);
        let q = JsqState(vec![1, 1]);
        let r = inst.space.rank(&q).unwrap();
        let mut ind = GridFunction::zeros(3);
        ind.values[r] = 1.0;
        assert!((expect_values(&pi, &ind) - 1.0 / 7.0).abs() < 1e-15);
    }

    #[test]
    fn family_membership_holds_on_small_instances() {
        for (n, b, beta) in [(4u32, 1u32, 1.0), (6, 2, 0.8)] {
            let p = ModelParams::new(n, b, beta).unwrap();
            let inst = Instance::build(p).unwrap();
            for h in TestFunction::family(beta) {
                let report = verify_membership(&p, &inst.space, h);
                assert!(
                    report.holds,
                    "{}: observed {} > claimed {}",
                    report.name, report.max_normalized_difference, report.claimed_constant
                );
            }
        }
    }

    #[test]
    fn lattice_difference_bilinear() {
        // f = x1 * x2 on the unit lattice: Delta1 Delta2 f = 1 everywhere.
        let f = |k: &[i64]| (k[0] * k[1]) as f64;
        let d = forward_difference_lattice(&[3, 5], &[1, 1], &f);
        assert_eq!(d, 1.0);
        // Second difference of a quadratic is constant 2.
        let g = |k: &[i64]| (k[0] * k[0]) as f64;
        let d = forward_difference_lattice(&[7, 0], &[2, 0], &g);
        assert_eq!(d, 2.0);
    }
}
