//! Five-point degree-7 spline interpolation on a uniform grid, with exact
//! analytic derivatives to third order and a tensor-product extension.
//!
//! On each cell `[delta k, delta (k+1))` the interpolant is the unique
//! degree-7 two-point Hermite polynomial matching, at both cell ends, the
//! value together with first, second, and third derivative data read off
//! one-sided Newton-forward stencils:
//!
//! ```text
//! d1 = (D - D^2/2 + D^3/3) f / delta,   d2 = (D^2 - D^3) f / delta^2,
//! d3 = D^3 f / delta^3,
//! ```
//!
//! where `D` is the forward difference. These stencils are exact on cubics,
//! so the construction reproduces polynomials of degree up to three, is
//! globally `C^3` (adjacent cells share node data), uses exactly the five
//! grid points `k..k+4` per cell, and its weights are degree-7 polynomials
//! in the local coordinate `t = (x - delta k)/delta` independent of `k` and
//! `delta`. At a grid point the first derivative equals
//! `(D - D^2/2 + D^3/3) f / delta` by construction.

use crate::error::{Error, Result};

/// Points per cell in each axis.
pub const STENCIL: usize = 5;

/// Degree-7 two-point Hermite basis: `H[m]` matches the `m`-th derivative at
/// the left end and annihilates derivatives 0..=3 at the right end.
const H_BASIS: [[f64; 8]; 4] = [
    // 1 - 35 t^4 + 84 t^5 - 70 t^6 + 20 t^7
    [1.0, 0.0, 0.0, 0.0, -35.0, 84.0, -70.0, 20.0],
    // t - 20 t^4 + 45 t^5 - 36 t^6 + 10 t^7
    [0.0, 1.0, 0.0, 0.0, -20.0, 45.0, -36.0, 10.0],
    // t^2/2 - 5 t^4 + 10 t^5 - 15/2 t^6 + 2 t^7
    [0.0, 0.0, 0.5, 0.0, -5.0, 10.0, -7.5, 2.0],
    // t^3/6 - 2/3 t^4 + t^5 - 2/3 t^6 + 1/6 t^7
    [
        0.0,
        0.0,
        0.0,
        1.0 / 6.0,
        -2.0 / 3.0,
        1.0,
        -2.0 / 3.0,
        1.0 / 6.0,
    ],
];

/// Newton-forward derivative stencils at the left node of a cell, as weights
/// on the five cell points; row `m` is the order-`m` data (`m = 0` is the
/// value itself).
const LEFT_STENCIL: [[f64; 5]; 4] = [
    [1.0, 0.0, 0.0, 0.0, 0.0],
    [-11.0 / 6.0, 3.0, -1.5, 1.0 / 3.0, 0.0],
    [2.0, -5.0, 4.0, -1.0, 0.0],
    [-1.0, 3.0, -3.0, 1.0, 0.0],
];

/// Same stencils anchored at the right node (one step in).
const RIGHT_STENCIL: [[f64; 5]; 4] = [
    [0.0, 1.0, 0.0, 0.0, 0.0],
    [0.0, -11.0 / 6.0, 3.0, -1.5, 1.0 / 3.0],
    [0.0, 2.0, -5.0, 4.0, -1.0],
    [0.0, -1.0, 3.0, -3.0, 1.0],
];

/// Evaluates the `order`-th derivative of the polynomial with coefficients
/// `c` (ascending powers) at `t`.
fn poly_deriv(c: &[f64; 8], order: usize, t: f64) -> f64 {
    let mut acc = 0.0;
    for i in (order..8).rev() {
        let mut factor = 1.0;
        for j in 0..order {
            factor *= (i - j) as f64;
        }
        acc = acc * t + c[i] * factor;
    }
    acc
}

/// Five local weights and their `t`-derivatives of the requested order, for
/// local coordinate `t` in `[0, 1)`. Derivatives with respect to `x` scale
/// by `delta^{-order}`.
pub fn weight_derivs(t: f64, order: usize) -> Result<[f64; 5]> {
    if !(0.0..=1.0).contains(&t) {
        return Err(Error::Domain(format!(
            "local coordinate t = {t} outside [0,1]"
        )));
    }
    if order > 3 {
        return Err(Error::Domain(format!("derivative order {order} exceeds 3")));
    }
    let mut w = [0.0f64; 5];
    for m in 0..4 {
        // Each basis half annihilates derivatives 0..=3 at the opposite cell
        // end; evaluate that as an exact zero so node collocation is exact.
        let hm = if t == 1.0 {
            0.0
        } else {
            poly_deriv(&H_BASIS[m], order, t)
        };
        // Right-end basis g_m(t) = (-1)^m h_m(1 - t), so the r-th derivative
        // is (-1)^{m+r} h_m^{(r)}(1-t).
        let sign = if (m + order) % 2 == 0 { 1.0 } else { -1.0 };
        let gm = if t == 0.0 {
            0.0
        } else {
            sign * poly_deriv(&H_BASIS[m], order, 1.0 - t)
        };
        for i in 0..5 {
            w[i] += hm * LEFT_STENCIL[m][i] + gm * RIGHT_STENCIL[m][i];
        }
    }
    Ok(w)
}

/// Interpolation weights at local coordinate `t`.
pub fn weights(t: f64) -> Result<[f64; 5]> {
    weight_derivs(t, 0)
}

/// Values of a grid function on the integer lattice; `None` marks an
/// undefined point, which surfaces as a stencil error at evaluation.
pub trait GridSource {
    fn dim(&self) -> usize;
    fn value(&self, k: &[i64]) -> Option<f64>;
}

/// A grid source backed by a closure.
pub struct FnSource<F: Fn(&[i64]) -> Option<f64>> {
    pub dim: usize,
    pub f: F,
}

impl<F: Fn(&[i64]) -> Option<f64>> GridSource for FnSource<F> {
    fn dim(&self) -> usize {
        self.dim
    }
    fn value(&self, k: &[i64]) -> Option<f64> {
        (self.f)(k)
    }
}

/// Tensor-product interpolant over a grid source with spacing `delta`.
pub struct Interpolant<'a, G: GridSource> {
    source: &'a G,
    delta: f64,
}

impl<'a, G: GridSource> Interpolant<'a, G> {
    pub fn new(source: &'a G, delta: f64) -> Self {
        Interpolant { source, delta }
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Base lattice index and local coordinates of `x`. Points within one
    /// part in 1e9 of a knot snap onto it, so knot evaluation is exact even
    /// when the coordinate was computed through non-representable
    /// arithmetic.
    fn locate(&self, x: &[f64]) -> (Vec<i64>, Vec<f64>) {
        let mut k = Vec::with_capacity(x.len());
        let mut t = Vec::with_capacity(x.len());
        for &xi in x {
            let scaled = xi / self.delta;
            let mut ki = scaled.floor();
            let mut ti = scaled - ki;
            if ti > 1.0 - 1e-9 {
                ki += 1.0;
                ti = 0.0;
            }
            k.push(ki as i64);
            t.push(ti);
        }
        (k, t)
    }

    pub fn eval(&self, x: &[f64]) -> Result<f64> {
        self.derivative(x, &vec![0; x.len()])
    }

    /// Exact derivative `d^a / dx^a` of the piecewise polynomial at `x`,
    /// total order at most 3. At a knot the derivative is taken from the
    /// cell on the right, which agrees with the left limit by `C^3`
    /// continuity.
    pub fn derivative(&self, x: &[f64], a: &[u32]) -> Result<f64> {
        let d = self.source.dim();
        assert_eq!(x.len(), d);
        assert_eq!(a.len(), d);
        let total: u32 = a.iter().sum();
        if total > 3 {
            return Err(Error::Domain(format!("derivative order {total} exceeds 3")));
        }
        let (k, t) = self.locate(x);
        let mut axis_weights = Vec::with_capacity(d);
        for j in 0..d {
            let w = weight_derivs(t[j], a[j] as usize)?;
            axis_weights.push(w);
        }
        // Odometer over the 5^d stencil.
        let mut idx = vec![0usize; d];
        let mut point = vec![0i64; d];
        let mut acc = 0.0;
        loop {
            let mut w = 1.0;
            for j in 0..d {
                w *= axis_weights[j][idx[j]];
                point[j] = k[j] + idx[j] as i64;
            }
            if w != 0.0 {
                let v = self
                    .source
                    .value(&point)
                    .ok_or(Error::Stencil([x[0], if d > 1 { x[1] } else { 0.0 }]))?;
                acc += w * v;
            } else {
                // Still require the stencil point to exist.
                if self.source.value(&point).is_none() {
                    return Err(Error::Stencil([x[0], if d > 1 { x[1] } else { 0.0 }]));
                }
            }
            // Advance the odometer.
            let mut j = 0;
            loop {
                idx[j] += 1;
                if idx[j] < STENCIL {
                    break;
                }
                idx[j] = 0;
                j += 1;
                if j == d {
                    let scale = self.delta.powi(-(total as i32));
                    return Ok(acc * scale);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn source_1d(f: impl Fn(i64) -> f64 + 'static) -> FnSource<impl Fn(&[i64]) -> Option<f64>> {
        FnSource {
            dim: 1,
            f: move |k: &[i64]| Some(f(k[0])),
        }
    }

    #[test]
    fn weights_collocate_at_the_node() {
        let w = weights(0.0).unwrap();
        assert_eq!(w, [1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn weights_sum_to_one() {
        for i in 0..200 {
            let t = i as f64 / 200.0;
            let w = weights(t).unwrap();
            let s: f64 = w.iter().sum();
            assert!((s - 1.0).abs() < 1e-12, "t={t}");
            // Derivative weights sum to zero.
            for order in 1..=3 {
                let dw = weight_derivs(t, order).unwrap();
                let ds: f64 = dw.iter().sum();
                assert!(ds.abs() < 2e-10, "t={t} order={order} sum={ds}");
            }
        }
    }

    #[test]
    fn first_derivative_weights_at_node() {
        // In x units these weights are the one-sided stencil divided by
        // delta; in t units they are the stencil itself.
        let dw = weight_derivs(0.0, 1).unwrap();
        let expected = [-11.0 / 6.0, 3.0, -1.5, 1.0 / 3.0, 0.0];
        for (got, want) in dw.iter().zip(expected.iter()) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolates_grid_values_exactly() {
        let delta = 0.25;
        let src = source_1d(|k| (k as f64).sin());
        let a = Interpolant::new(&src, delta);
        for k in -3i64..6 {
            let x = k as f64 * delta;
            let v = a.eval(&[x]).unwrap();
            assert!((v - (k as f64).sin()).abs() < 1e-12);
        }
    }

    #[test]
    fn reproduces_constants_and_linear() {
        let delta = 0.2;
        let src = source_1d(|_| 4.25);
        let a = Interpolant::new(&src, delta);
        for i in 0..40 {
            let x = -1.0 + i as f64 * 0.1;
            assert!((a.eval(&[x]).unwrap() - 4.25).abs() < 1e-12);
        }
        let src = source_1d(move |k| 3.0 * (k as f64 * 0.2) - 1.0);
        let a = Interpolant::new(&src, delta);
        for i in 0..40 {
            let x = -1.0 + i as f64 * 0.095;
            assert!((a.eval(&[x]).unwrap() - (3.0 * x - 1.0)).abs() < 1e-11);
            // Second and third derivatives of a linear function vanish.
            assert!(a.derivative(&[x], &[2]).unwrap().abs() < 1e-9);
            assert!(a.derivative(&[x], &[3]).unwrap().abs() < 1e-8);
        }
    }

    #[test]
    fn reproduces_cubics_exactly() {
        let delta = 0.5;
        let cubic = |x: f64| 2.0 - x + 0.5 * x * x + 0.125 * x * x * x;
        let dcubic = |x: f64| -1.0 + x + 0.375 * x * x;
        let d2cubic = |x: f64| 1.0 + 0.75 * x;
        let src = source_1d(move |k| cubic(k as f64 * 0.5));
        let a = Interpolant::new(&src, delta);
        for i in 0..60 {
            let x = -2.0 + i as f64 * 0.077;
            assert!((a.eval(&[x]).unwrap() - cubic(x)).abs() < 1e-10);
            assert!((a.derivative(&[x], &[1]).unwrap() - dcubic(x)).abs() < 1e-9);
            assert!((a.derivative(&[x], &[2]).unwrap() - d2cubic(x)).abs() < 1e-8);
            assert!((a.derivative(&[x], &[3]).unwrap() - 0.75).abs() < 1e-7);
        }
    }

    #[test]
    fn grid_point_first_derivative_is_the_stencil() {
        // For f(x) = x^2 the stencil identity at a grid point gives exactly
        // 2 delta k: the forward differences are delta^2 (2k+1), 2 delta^2, 0.
        let delta = 0.1;
        let src = source_1d(move |k| {
            let x = k as f64 * 0.1;
            x * x
        });
        let a = Interpolant::new(&src, delta);
        for k in -2i64..8 {
            let x = k as f64 * delta;
            let v = a.derivative(&[x], &[1]).unwrap();
            assert!((v - 2.0 * x).abs() < 1e-10, "k={k}");
        }
    }

    #[test]
    fn c3_continuity_at_knots() {
        // Rough grid data; one-sided limits at interior knots must agree for
        // derivative orders 0..=3. The left limit is the previous cell's
        // polynomial evaluated at local coordinate t = 1.
        let delta = 0.125;
        let data = |k: i64| ((k * k * 7919 + 13 * k) % 101) as f64 / 17.0;
        let src = source_1d(data);
        let a = Interpolant::new(&src, delta);
        for k in 1i64..8 {
            let x = k as f64 * delta;
            for order in 0usize..=3 {
                let w = weight_derivs(1.0, order).unwrap();
                let left: f64 = (0..5).map(|i| w[i] * data(k - 1 + i as i64)).sum::<f64>()
                    / delta.powi(order as i32);
                let right = a.derivative(&[x], &[order as u32]).unwrap();
                let scale = left.abs().max(right.abs()).max(1.0);
                assert!(
                    ((left - right) / scale).abs() < 1e-8,
                    "order {order} at knot {k}: {left} vs {right}"
                );
            }
        }
    }

    #[test]
    fn translation_invariance() {
        let delta = 0.3;
        let vals = [0.4, -1.2, 3.3, 0.0, 2.2, -0.7, 1.9, 5.0, -2.0];
        let src = FnSource {
            dim: 1,
            f: move |k: &[i64]| {
                let i = k[0];
                if (0..9).contains(&i) {
                    Some(vals[i as usize])
                } else {
                    None
                }
            },
        };
        let shifted = FnSource {
            dim: 1,
            f: move |k: &[i64]| {
                let i = k[0] - 3;
                if (0..9).contains(&i) {
                    Some(vals[i as usize])
                } else {
                    None
                }
            },
        };
        let a = Interpolant::new(&src, delta);
        let b = Interpolant::new(&shifted, delta);
        for i in 0..30 {
            let x = 0.05 + i as f64 * 0.035;
            let va = a.eval(&[x]).unwrap();
            let vb = b.eval(&[x + 3.0 * delta]).unwrap();
            assert!((va - vb).abs() < 1e-12);
        }
    }

    #[test]
    fn linearity_in_the_data() {
        let delta = 0.25;
        let f = source_1d(|k| (k as f64).cos());
        let g = source_1d(|k| (k as f64 * 0.5).sin());
        let fg = source_1d(|k| 2.0 * (k as f64).cos() - 3.0 * (k as f64 * 0.5).sin());
        let af = Interpolant::new(&f, delta);
        let ag = Interpolant::new(&g, delta);
        let afg = Interpolant::new(&fg, delta);
        for i in 0..25 {
            let x = i as f64 * 0.11;
            let lhs = afg.eval(&[x]).unwrap();
            let rhs = 2.0 * af.eval(&[x]).unwrap() - 3.0 * ag.eval(&[x]).unwrap();
            assert!((lhs - rhs).abs() < 1e-11);
        }
    }

    #[test]
    fn tensor_product_two_dimensional() {
        let delta = 0.2;
        // f(x, y) = x^2 y + 3 y: products of cubics reproduce exactly.
        let f = move |x: f64, y: f64| x * x * y + 3.0 * y;
        let src = FnSource {
            dim: 2,
            f: move |k: &[i64]| Some(f(k[0] as f64 * 0.2, k[1] as f64 * 0.2)),
        };
        let a = Interpolant::new(&src, delta);
        for i in 0..12 {
            for j in 0..12 {
                let x = 0.03 + i as f64 * 0.07;
                let y = 0.02 + j as f64 * 0.06;
                assert!((a.eval(&[x, y]).unwrap() - f(x, y)).abs() < 1e-10);
                let dx = a.derivative(&[x, y], &[1, 0]).unwrap();
                assert!((dx - 2.0 * x * y).abs() < 1e-8);
                let dxy = a.derivative(&[x, y], &[1, 1]).unwrap();
                assert!((dxy - 2.0 * x).abs() < 1e-7);
                let dxx = a.derivative(&[x, y], &[2, 0]).unwrap();
                assert!((dxx - 2.0 * y).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn missing_stencil_point_is_an_error() {
        let src = FnSource {
            dim: 1,
            f: |k: &[i64]| if k[0] >= 0 { Some(k[0] as f64) } else { None },
        };
        let a = Interpolant::new(&src, 0.5);
        assert!(a.eval(&[0.1]).is_ok());
        assert!(matches!(a.eval(&[-0.1]), Err(Error::Stencil(_))));
    }

    #[test]
    fn derivative_order_guard() {
        let src = source_1d(|k| k as f64);
        let a = Interpolant::new(&src, 0.5);
        assert!(a.derivative(&[0.1], &[4]).is_err());
    }

    #[test]
    fn derivative_envelope_scales_with_delta() {
        // |d^a A f| <= C delta^{-|a|} max stencil difference: check the
        // fitted constant is stable across grid refinements.
        let data = |k: i64| ((k * 2654435761i64) % 97) as f64 / 29.0;
        let mut fitted = Vec::new();
        for &delta in &[0.2, 0.1, 0.05] {
            let src = FnSource {
                dim: 1,
                f: move |k: &[i64]| Some(data(k[0])),
            };
            let a = Interpolant::new(&src, delta);
            let mut worst: f64 = 0.0;
            for i in 0..50 {
                let x = (0.05 + i as f64 * 0.173) * delta * 10.0;
                let d = a.derivative(&[x], &[1]).unwrap().abs();
                let k0 = (x / delta).floor() as i64;
                let max_diff = (0..4)
                    .map(|j| (data(k0 + j + 1) - data(k0 + j)).abs())
                    .fold(0.0f64, f64::max);
                if max_diff > 0.0 {
                    worst = worst.max(d * delta / max_diff);
                }
            }
            fitted.push(worst);
        }
        for w in &fitted {
            assert!(*w < 25.0, "fitted envelope constant {w} too large");
        }
        let spread = fitted.iter().cloned().fold(0.0f64, f64::max)
            / fitted.iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(
            spread < 4.0,
            "envelope constant unstable across delta: {fitted:?}"
        );
    }
}
