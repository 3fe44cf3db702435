//! Shared numeric kernels: adaptive quadrature, small dense linear solves,
//! finite-difference stencils.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NumericError {
    #[error("quadrature did not converge on [{a}, {b}] (budget exhausted)")]
    QuadratureNonConvergence { a: f64, b: f64 },
    #[error("singular linear system (pivot {pivot:.3e})")]
    SingularSystem { pivot: f64 },
    #[error("root bracketing failed on [{lo}, {hi}]")]
    BracketFailure { lo: f64, hi: f64 },
    #[error("integrand evaluation failed: {0}")]
    Integrand(String),
}

/// Adaptive Simpson quadrature, absolute tolerance driven.
///
/// Defaults elsewhere in the crate: tol 1e-10, max depth 40.
pub fn adaptive_simpson<F>(f: &F, a: f64, b: f64, tol: f64, max_depth: u32) -> Result<f64, NumericError>
where
    F: Fn(f64) -> Result<f64, NumericError>,
{
    if a == b {
        return Ok(0.0);
    }
    let fa = f(a)?;
    let fb = f(b)?;
    let m = 0.5 * (a + b);
    let fm = f(m)?;
    let whole = simpson(a, b, fa, fm, fb);
    simpson_rec(f, a, b, fa, fm, fb, whole, tol, max_depth)
}

fn simpson(a: f64, b: f64, fa: f64, fm: f64, fb: f64) -> f64 {
    (b - a) / 6.0 * (fa + 4.0 * fm + fb)
}

#[allow(clippy::too_many_arguments)]
fn simpson_rec<F>(
    f: &F,
    a: f64,
    b: f64,
    fa: f64,
    fm: f64,
    fb: f64,
    whole: f64,
    tol: f64,
    depth: u32,
) -> Result<f64, NumericError>
where
    F: Fn(f64) -> Result<f64, NumericError>,
{
    let m = 0.5 * (a + b);
    let lm = 0.5 * (a + m);
    let rm = 0.5 * (m + b);
    let flm = f(lm)?;
    let frm = f(rm)?;
    let left = simpson(a, m, fa, flm, fm);
    let right = simpson(m, b, fm, frm, fb);
    let delta = left + right - whole;
    if delta.abs() <= 15.0 * tol {
        return Ok(left + right + delta / 15.0);
    }
    if depth == 0 {
        return Err(NumericError::QuadratureNonConvergence { a, b });
    }
    let l = simpson_rec(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1)?;
    let r = simpson_rec(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)?;
    Ok(l + r)
}

/// Solve `A x = b` in place for small dense systems (Gauss, partial pivoting).
/// `a` is row-major n x n.
pub fn solve_dense(a: &mut [f64], b: &mut [f64], n: usize) -> Result<(), NumericError> {
    for col in 0..n {
        let mut pivot_row = col;
        let mut pivot_val = a[col * n + col].abs();
        for row in col + 1..n {
            let v = a[row * n + col].abs();
            if v > pivot_val {
                pivot_val = v;
                pivot_row = row;
            }
        }
        if pivot_val == 0.0 {
            return Err(NumericError::SingularSystem { pivot: 0.0 });
        }
        if pivot_row != col {
            for k in 0..n {
                a.swap(col * n + k, pivot_row * n + k);
            }
            b.swap(col, pivot_row);
        }
        let inv = 1.0 / a[col * n + col];
        for row in col + 1..n {
            let factor = a[row * n + col] * inv;
            if factor == 0.0 {
                continue;
            }
            for k in col..n {
                a[row * n + k] -= factor * a[col * n + k];
            }
            b[row] -= factor * b[col];
        }
    }
    for col in (0..n).rev() {
        let mut acc = b[col];
        for k in col + 1..n {
            acc -= a[col * n + k] * b[k];
        }
        b[col] = acc / a[col * n + col];
    }
    Ok(())
}

/// Determinant of a small dense row-major matrix (destroys the copy).
pub fn det_dense(a: &[f64], n: usize) -> f64 {
    let mut m = a.to_vec();
    let mut det = 1.0;
    for col in 0..n {
        let mut pivot_row = col;
        let mut pivot_val = m[col * n + col].abs();
        for row in col + 1..n {
            let v = m[row * n + col].abs();
            if v > pivot_val {
                pivot_val = v;
                pivot_row = row;
            }
        }
        if pivot_val == 0.0 {
            return 0.0;
        }
        if pivot_row != col {
            for k in 0..n {
                m.swap(col * n + k, pivot_row * n + k);
            }
            det = -det;
        }
        det *= m[col * n + col];
        let inv = 1.0 / m[col * n + col];
        for row in col + 1..n {
            let factor = m[row * n + col] * inv;
            for k in col..n {
                m[row * n + k] -= factor * m[col * n + k];
            }
        }
    }
    det
}

/// 4th-order central finite difference for f'(x).
pub fn central_diff_4<F>(f: &F, x: f64, h: f64) -> Result<f64, NumericError>
where
    F: Fn(f64) -> Result<f64, NumericError>,
{
    let f2p = f(x + 2.0 * h)?;
    let f1p = f(x + h)?;
    let f1m = f(x - h)?;
    let f2m = f(x - 2.0 * h)?;
    Ok((-f2p + 8.0 * f1p - 8.0 * f1m + f2m) / (12.0 * h))
}

/// 2nd-order central finite difference for f'(x).
pub fn central_diff_2<F>(f: &F, x: f64, h: f64) -> Result<f64, NumericError>
where
    F: Fn(f64) -> Result<f64, NumericError>,
{
    Ok((f(x + h)? - f(x - h)?) / (2.0 * h))
}

/// Bracketed Newton with bisection fallback for a monotone function.
/// `g` must be increasing on the bracket.
pub fn bracketed_newton<F, D>(
    g: &F,
    dg: &D,
    target: f64,
    mut lo: f64,
    mut hi: f64,
    tol: f64,
    max_iters: usize,
) -> Result<f64, NumericError>
where
    F: Fn(f64) -> Result<f64, NumericError>,
    D: Fn(f64) -> Result<f64, NumericError>,
{
    let glo = g(lo)? - target;
    let ghi = g(hi)? - target;
    if glo > 0.0 || ghi < 0.0 {
        return Err(NumericError::BracketFailure { lo, hi });
    }
    let mut x = 0.5 * (lo + hi);
    for _ in 0..max_iters {
        let gx = g(x)? - target;
        if gx.abs() <= tol {
            return Ok(x);
        }
        if gx > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        let d = dg(x)?;
        let mut next = if d != 0.0 { x - gx / d } else { f64::NAN };
        if !next.is_finite() || next <= lo || next >= hi {
            next = 0.5 * (lo + hi);
        }
        if (next - x).abs() <= tol * x.abs().max(1.0) {
            return Ok(next);
        }
        x = next;
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn simpson_polynomial_exact() {
        let f = |x: f64| Ok(x * x * x - 2.0 * x + 1.0);
        let v = adaptive_simpson(&f, 0.0, 2.0, 1e-12, 40).unwrap();
        // exact: 4 - 4 + 2 = 2
        assert!((v - 2.0).abs() < 1e-12);
    }

    #[test]
    fn simpson_handles_steep_integrand() {
        let f = |x: f64| Ok((-50.0 * x).exp());
        let v = adaptive_simpson(&f, 0.0, 1.0, 1e-12, 40).unwrap();
        let exact = (1.0 - (-50.0_f64).exp()) / 50.0;
        assert!((v - exact).abs() < 1e-11);
    }

    #[test]
    fn dense_solve_3x3() {
        let mut a = vec![2.0, 1.0, -1.0, -3.0, -1.0, 2.0, -2.0, 1.0, 2.0];
        let mut b = vec![8.0, -11.0, -3.0];
        solve_dense(&mut a, &mut b, 3).unwrap();
        assert!((b[0] - 2.0).abs() < 1e-12);
        assert!((b[1] - 3.0).abs() < 1e-12);
        assert!((b[2] - (-1.0)).abs() < 1e-12);
    }

    #[test]
    fn det_sign_and_value() {
        let a = vec![0.0, 8.0, 4.0, 8.0, 0.0, 2.0, 4.0, 2.0, 0.0];
        assert!((det_dense(&a, 3) - 128.0).abs() < 1e-9);
    }

    #[test]
    fn newton_inverts_monotone() {
        let g = |x: f64| Ok(x * x * x + x);
        let dg = |x: f64| Ok(3.0 * x * x + 1.0);
        let x = bracketed_newton(&g, &dg, 10.0, 0.0, 5.0, 1e-13, 100).unwrap();
        assert!((x * x * x + x - 10.0).abs() < 1e-10);
    }
}
