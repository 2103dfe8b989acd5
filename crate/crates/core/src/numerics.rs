//! Grid utilities: cumulative quadrature, differences, unwrapping, interpolation.

use std::ops::{Add, Mul, Sub};

use num_traits::Zero;

use crate::scalar::Real;

/// Running integral of uniformly sampled values, 4th-order accurate.
///
/// Interior intervals use the symmetric four-point rule; the first and last
/// intervals use the one-sided cubic rule. Falls back to trapezoids below 4 samples.
pub fn cumulative_integral<T, V>(values: &[V], h: T) -> Vec<V>
where
    T: Real,
    V: Copy + Zero + Add<Output = V> + Sub<Output = V> + Mul<T, Output = V>,
{
    let n = values.len();
    let mut out = vec![V::zero(); n];
    if n < 2 {
        return out;
    }
    if n < 4 {
        for i in 1..n {
            out[i] = out[i - 1] + (values[i - 1] + values[i]) * (h * T::lit(0.5));
        }
        return out;
    }
    let w = h / T::lit(24.0);
    let (c9, c19, c5, c13) = (T::lit(9.0), T::lit(19.0), T::lit(5.0), T::lit(13.0));
    for i in 1..n {
        let a = i - 1;
        let piece = if a == 0 {
            values[0] * c9 + values[1] * c19 - values[2] * c5 + values[3]
        } else if i == n - 1 {
            values[i] * c9 + values[a] * c19 - values[a - 1] * c5 + values[a - 2]
        } else {
            (values[a] + values[i]) * c13 - values[a - 1] - values[i + 1]
        };
        out[i] = out[a] + piece * w;
    }
    out
}

/// Second-order centred differences, second-order one-sided at the ends.
pub fn centered_derivative<T, V>(values: &[V], h: T) -> Vec<V>
where
    T: Real,
    V: Copy + Zero + Add<Output = V> + Sub<Output = V> + Mul<T, Output = V>,
{
    let n = values.len();
    if n < 3 {
        return match n {
            2 => {
                let d = (values[1] - values[0]) * (T::one() / h);
                vec![d, d]
            }
            _ => vec![V::zero(); n],
        };
    }
    let inv2h = T::one() / (T::lit(2.0) * h);
    let mut out = Vec::with_capacity(n);
    out.push((values[1] * T::lit(4.0) - values[0] * T::lit(3.0) - values[2]) * inv2h);
    for i in 1..n - 1 {
        out.push((values[i + 1] - values[i - 1]) * inv2h);
    }
    out.push((values[n - 1] * T::lit(3.0) - values[n - 2] * T::lit(4.0) + values[n - 3]) * inv2h);
    out
}

/// Removes `2 pi` jumps so adjacent samples never differ by more than `pi`.
pub fn unwrap_phase<T: Real>(phases: &[T]) -> Vec<T> {
    let tau = T::TAU();
    let mut out = Vec::with_capacity(phases.len());
    let mut offset = T::zero();
    for (i, &p) in phases.iter().enumerate() {
        if i > 0 {
            let prev = phases[i - 1];
            let jump = p - prev;
            offset -= tau * ((jump / tau).round());
        }
        out.push(p + offset);
    }
    out
}

/// Cubic Lagrange interpolation on a uniform grid; zero outside `[t0, t_last]`.
pub fn interp_uniform<T, V>(values: &[V], t0: T, h: T, t: T) -> V
where
    T: Real,
    V: Copy + Zero + Add<Output = V> + Mul<T, Output = V>,
{
    let n = values.len();
    if n == 0 {
        return V::zero();
    }
    let s = (t - t0) / h;
    let last = T::from_usize_lossy(n - 1);
    let tol = T::lit(1e-9);
    if !(s >= -tol && s <= last + tol) {
        return V::zero();
    }
    if n < 4 {
        let s = s.max(T::zero()).min(last);
        let i = s.floor().to_usize().unwrap_or(0).min(n.saturating_sub(2));
        if n == 1 {
            return values[0];
        }
        let f = s - T::from_usize_lossy(i);
        return values[i] * (T::one() - f) + values[i + 1] * f;
    }
    let s = s.max(T::zero()).min(last);
    let base = s.floor().to_usize().unwrap_or(0).max(1).min(n - 3) - 1;
    let x = s - T::from_usize_lossy(base);
    let one = T::one();
    let two = T::lit(2.0);
    let three = T::lit(3.0);
    let six = T::lit(6.0);
    let l0 = -(x - one) * (x - two) * (x - three) / six;
    let l1 = x * (x - two) * (x - three) / two;
    let l2 = -x * (x - one) * (x - three) / two;
    let l3 = x * (x - one) * (x - two) / six;
    values[base] * l0 + values[base + 1] * l1 + values[base + 2] * l2 + values[base + 3] * l3
}

/// Uniform grid `t0 + i h`, `i in 0..n`.
pub fn uniform_times<T: Real>(t0: T, h: T, n: usize) -> Vec<T> {
    (0..n).map(|i| t0 + h * T::from_usize_lossy(i)).collect()
}

/// Least-squares slope of `y` against `x`.
pub fn fit_slope<T: Real>(x: &[T], y: &[T]) -> T {
    let n = T::from_usize_lossy(x.len());
    let mx = x.iter().copied().sum::<T>() / n;
    let my = y.iter().copied().sum::<T>() / n;
    let mut sxy = T::zero();
    let mut sxx = T::zero();
    for (a, b) in x.iter().zip(y) {
        sxy += (*a - mx) * (*b - my);
        sxx += (*a - mx) * (*a - mx);
    }
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_complex::Complex64;
    use proptest::prelude::*;

    #[test]
    fn cumulative_is_fourth_order() {
        let err = |n: usize| {
            let h = 2.0 / (n - 1) as f64;
            let v: Vec<f64> = (0..n).map(|i| (-1.0 + h * i as f64).exp()).collect();
            let c = cumulative_integral(&v, h);
            (0..n)
                .map(|i| (c[i] - ((-1.0 + h * i as f64).exp() - (-1.0f64).exp())).abs())
                .fold(0.0, f64::max)
        };
        let (e1, e2) = (err(41), err(81));
        let order = (e1 / e2).log2();
        assert!(order > 3.7, "order {order}");
    }

    #[test]
    fn cumulative_exact_for_cubics() {
        let h = 0.1;
        let v: Vec<f64> = (0..30).map(|i| (h * i as f64).powi(3)).collect();
        let c = cumulative_integral(&v, h);
        let t = h * 29.0;
        assert!((c[29] - t.powi(4) / 4.0).abs() < 1e-12);
    }

    #[test]
    fn complex_values_integrate() {
        let h = 0.01;
        let v: Vec<Complex64> = (0..101)
            .map(|i| Complex64::new(0.0, h * i as f64).exp())
            .collect();
        let c = cumulative_integral(&v, h);
        let exact = (Complex64::new(0.0, 1.0).exp() - 1.0) / Complex64::new(0.0, 1.0);
        assert!((c[100] - exact).norm() < 1e-9);
    }

    #[test]
    fn derivative_of_quadratic_exact() {
        let h = 0.5;
        let v: Vec<f64> = (0..7).map(|i| (i as f64 * h).powi(2)).collect();
        let d = centered_derivative(&v, h);
        for (i, x) in d.iter().enumerate() {
            assert!((x - 2.0 * h * i as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn interpolation_reproduces_cubic() {
        let h = 0.25;
        let f = |t: f64| 1.0 - 2.0 * t + 0.5 * t * t * t;
        let v: Vec<f64> = (0..12).map(|i| f(h * i as f64)).collect();
        for t in [0.0, 0.1, 1.3, 2.6, 2.75] {
            assert!((interp_uniform(&v, 0.0, h, t) - f(t)).abs() < 1e-12);
        }
        assert_eq!(interp_uniform(&v, 0.0, h, -0.1), 0.0);
        assert_eq!(interp_uniform(&v, 0.0, h, 3.0), 0.0);
    }

    proptest! {
        #[test]
        fn unwrap_has_no_large_jumps(steps in proptest::collection::vec(-3.0f64..3.0, 1..200)) {
            let mut acc = 0.0;
            let wrapped: Vec<f64> = steps.iter().map(|s| { acc += s; (acc as f64).sin().atan2(acc.cos()) }).collect();
            let u = unwrap_phase(&wrapped);
            for w in u.windows(2) {
                prop_assert!((w[1] - w[0]).abs() <= std::f64::consts::PI + 1e-12);
            }
            for (a, b) in u.iter().zip(&wrapped) {
                let k = (a - b) / std::f64::consts::TAU;
                prop_assert!((k - k.round()).abs() < 1e-9);
            }
        }
    }
}
