//! Connection coefficients, Tsarev semi-Hamiltonicity, curvature components,
//! Lame-coefficient reconstruction and the Hamiltonian (flatness) test.
//!
//! The connection of a diagonal system is Gamma^i_ij = v_{i,u^j}/(v_j - v_i)
//! for i != j. The diagonal entries Gamma^i_ii are gauge data: they come from
//! the metric, which the system determines only up to one function of u^i per
//! component. [`Gauge`] pins that freedom either by a base-point convention
//! (line integration of the connection) or by explicitly supplied Lame
//! potentials.

use thiserror::Error;

use crate::expr::{self, Expr};
use crate::numeric::{self, NumericError};
use crate::system::{DiagonalSystem, FieldError, ScalarField, SystemError};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("operation needs n >= 3 components, got {0}")]
    NeedsThreeComponents(usize),
    #[error("diagonal connection entry Gamma^{i}_{i}{i} requested but no gauge chosen")]
    MissingGauge { i: usize },
}

/// Quadrature settings for Lame reconstruction: adaptive Simpson.
#[derive(Debug, Clone, Copy)]
pub struct QuadOptions {
    pub tol: f64,
    pub max_depth: u32,
}

impl Default for QuadOptions {
    fn default() -> Self {
        QuadOptions {
            tol: 1e-10,
            max_depth: 40,
        }
    }
}

/// Gamma^i_ij = v_{i,u^j} / (v_j - v_i) for i != j, at a packed point.
pub fn gamma(
    sys: &DiagonalSystem,
    i: usize,
    j: usize,
    packed: &[f64],
) -> Result<f64, GeometryError> {
    debug_assert_ne!(i, j);
    let vi = sys.speed_value(i, packed)?;
    let vj = sys.speed_value(j, packed)?;
    let dv = vj - vi;
    if dv.abs() <= 1e-10 {
        return Err(GeometryError::System(SystemError::Hyperbolicity {
            i: i + 1,
            j: j + 1,
            gap: dv.abs(),
        }));
    }
    Ok(sys.speed_partial(i, j, packed)? / dv)
}

/// Gamma^i_ij as a field over the system variables. Symbolic whenever the
/// speeds are expression-backed.
pub fn gamma_field(sys: &DiagonalSystem, i: usize, j: usize) -> ScalarField {
    debug_assert_ne!(i, j);
    let vars = sys.vars();
    let var_refs: Vec<&str> = vars.iter().map(|s| s.as_str()).collect();
    if let (Some(vi), Some(vj)) = (sys.speed(i).as_expr(), sys.speed(j).as_expr()) {
        let expr = expr::div(
            vi.differentiate(&vars[j]),
            expr::sub(vj.clone(), vi.clone()),
        );
        return ScalarField::from_expr(expr, &var_refs);
    }
    let sys = sys.clone();
    ScalarField::from_fn(&var_refs, move |packed| {
        gamma(&sys, i, j, packed).map_err(|e| FieldError::Other(e.to_string()))
    })
}

/// Gamma^i_ij as an expression when the speeds are symbolic.
pub fn gamma_expr(sys: &DiagonalSystem, i: usize, j: usize) -> Option<Expr> {
    let vars = sys.vars();
    match (sys.speed(i).as_expr(), sys.speed(j).as_expr()) {
        (Some(vi), Some(vj)) => Some(expr::div(
            vi.differentiate(&vars[j]),
            expr::sub(vj.clone(), vi.clone()),
        )),
        _ => None,
    }
}

/// The n x n matrix of connection coefficients at a point; diagonal entries
/// are zero unless a gauge is supplied.
pub fn connection(
    sys: &DiagonalSystem,
    packed: &[f64],
) -> Result<Vec<Vec<f64>>, GeometryError> {
    sys.require_strict_hyperbolicity(packed)?;
    let n = sys.n();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i != j {
                out[i][j] = gamma(sys, i, j, packed)?;
            }
        }
    }
    Ok(out)
}

pub fn connection_with_gauge(
    sys: &DiagonalSystem,
    gauge: &Gauge,
    packed: &[f64],
) -> Result<Vec<Vec<f64>>, GeometryError> {
    let mut out = connection(sys, packed)?;
    for i in 0..sys.n() {
        out[i][i] = gauge.gamma_ii(sys, i, packed)?;
    }
    Ok(out)
}

/// Max residual of the Tsarev conditions
/// d/du^k [Gamma^i_ij] = d/du^j [Gamma^i_ik] over distinct (i, j, k).
/// Empty condition set for n = 2: returns 0.
pub fn tsarev_residual(sys: &DiagonalSystem, packed: &[f64]) -> Result<f64, GeometryError> {
    sys.require_strict_hyperbolicity(packed)?;
    let n = sys.n();
    if n < 3 {
        return Ok(0.0);
    }
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            if j == i {
                continue;
            }
            let gij = gamma_field(sys, i, j);
            for k in 0..n {
                if k == i || k == j {
                    continue;
                }
                let gik = gamma_field(sys, i, k);
                let lhs = gij.partial(k, packed)?;
                let rhs = gik.partial(j, packed)?;
                worst = worst.max((lhs - rhs).abs());
            }
        }
    }
    Ok(worst)
}

/// Residuals of the curvature components that must vanish on any
/// semi-Hamiltonian system: R^i_ikj (identical to the Tsarev form) and
/// R^i_jki (first-derivative form, equivalent up to algebra).
#[derive(Debug, Clone)]
pub struct CurvatureReport {
    pub r_ikj_max: f64,
    pub r_jki_max: f64,
}

pub fn curvature_check(
    sys: &DiagonalSystem,
    packed: &[f64],
) -> Result<CurvatureReport, GeometryError> {
    let n = sys.n();
    if n < 3 {
        return Err(GeometryError::NeedsThreeComponents(n));
    }
    let r_ikj_max = tsarev_residual(sys, packed)?;
    let mut r_jki_max: f64 = 0.0;
    for i in 0..n {
        for j in 0..n {
            if j == i {
                continue;
            }
            let gij_field = gamma_field(sys, i, j);
            for k in 0..n {
                if k == i || k == j {
                    continue;
                }
                // R^i_jki = Gamma^i_ij,u^k
                //   - [Gamma^i_ik Gamma^k_kj + Gamma^i_ij (Gamma^j_jk - Gamma^i_ik)]
                let d = gij_field.partial(k, packed)?;
                let gik = gamma(sys, i, k, packed)?;
                let gkj = gamma(sys, k, j, packed)?;
                let gij = gamma(sys, i, j, packed)?;
                let gjk = gamma(sys, j, k, packed)?;
                let r = d - (gik * gkj + gij * (gjk - gik));
                r_jki_max = r_jki_max.max(r.abs());
            }
        }
    }
    Ok(CurvatureReport { r_ikj_max, r_jki_max })
}

// ---------------------------------------------------------------------------
// Lame reconstruction and gauges
// ---------------------------------------------------------------------------

/// How the metric gauge (the diagonal connection entries) is fixed.
#[derive(Debug, Clone)]
pub enum LameGauge {
    /// Phi_i vanishes on the u^i-line through `base`; the remaining values
    /// come from composed one-dimensional quadratures of Gamma^i_ij along
    /// axis-aligned segments.
    BasePoint { base: Vec<f64> },
    /// Explicit Lame potentials Phi_i(u); Gamma^i_ii = d Phi_i / d u^i.
    Explicit { phi: Vec<ScalarField> },
}

/// Gauge plus metric signature. `signs[i]` is the sign of g_ii; the
/// reconstruction itself only produces |g_ii| = exp(2 Phi_i).
#[derive(Debug, Clone)]
pub struct Gauge {
    pub lame: LameGauge,
    pub signs: Vec<f64>,
    pub quad: QuadOptions,
}

impl Gauge {
    pub fn base_point(base: Vec<f64>) -> Self {
        let n = base.len();
        Gauge {
            lame: LameGauge::BasePoint { base },
            signs: vec![1.0; n],
            quad: QuadOptions::default(),
        }
    }

    pub fn explicit(phi: Vec<ScalarField>) -> Self {
        let n = phi.len();
        Gauge {
            lame: LameGauge::Explicit { phi },
            signs: vec![1.0; n],
            quad: QuadOptions::default(),
        }
    }

    pub fn with_signs(mut self, signs: Vec<f64>) -> Self {
        self.signs = signs;
        self
    }

    /// Phi_i at a packed point (base value taken as 0).
    pub fn phi(&self, sys: &DiagonalSystem, i: usize, packed: &[f64]) -> Result<f64, GeometryError> {
        match &self.lame {
            LameGauge::Explicit { phi } => Ok(phi[i].eval(packed)?),
            LameGauge::BasePoint { base } => {
                path_integral(sys, i, base, packed, self.quad, &|f, pt| f.eval(pt))
            }
        }
    }

    /// Gamma^i_ii = d Phi_i / d u^i.
    pub fn gamma_ii(
        &self,
        sys: &DiagonalSystem,
        i: usize,
        packed: &[f64],
    ) -> Result<f64, GeometryError> {
        match &self.lame {
            LameGauge::Explicit { phi } => Ok(phi[i].partial(i, packed)?),
            LameGauge::BasePoint { base } => path_integral(
                sys,
                i,
                base,
                packed,
                self.quad,
                &|f, pt| f.partial(i, pt),
            ),
        }
    }

    /// d Gamma^i_ii / d u^i (needed by second-order recursion coefficients).
    pub fn gamma_ii_du(
        &self,
        sys: &DiagonalSystem,
        i: usize,
        packed: &[f64],
    ) -> Result<f64, GeometryError> {
        match &self.lame {
            LameGauge::Explicit { phi } => Ok(phi[i].derivative(i).partial(i, packed)?),
            LameGauge::BasePoint { base } => {
                let quad = self.quad;
                path_integral(sys, i, base, packed, quad, &|f, pt| {
                    f.derivative(i).partial(i, pt)
                })
            }
        }
    }

    /// Gamma^i_ii as an expression when everything involved is symbolic.
    pub fn gamma_ii_expr(&self, sys: &DiagonalSystem, i: usize) -> Option<Expr> {
        match &self.lame {
            LameGauge::Explicit { phi } => {
                let vars = sys.vars();
                phi[i].as_expr().map(|e| e.differentiate(&vars[i]))
            }
            LameGauge::BasePoint { .. } => None,
        }
    }
}

/// Integrate `extract(Gamma^i_ij field, point)` along the axis-aligned path
/// through `target`'s u^i-line: start at (u^i = target_i, u^j = base_j), then
/// sweep each axis j != i from base to target in ascending order.
fn path_integral(
    sys: &DiagonalSystem,
    i: usize,
    base: &[f64],
    target: &[f64],
    quad: QuadOptions,
    extract: &dyn Fn(&ScalarField, &[f64]) -> Result<f64, FieldError>,
) -> Result<f64, GeometryError> {
    let order: Vec<usize> = (0..sys.n()).filter(|&j| j != i).collect();
    path_integral_ordered(sys, i, base, target, &order, quad, extract)
}

fn path_integral_ordered(
    sys: &DiagonalSystem,
    i: usize,
    base: &[f64],
    target: &[f64],
    order: &[usize],
    quad: QuadOptions,
    extract: &dyn Fn(&ScalarField, &[f64]) -> Result<f64, FieldError>,
) -> Result<f64, GeometryError> {
    let mut point = target.to_vec();
    for &j in order {
        point[j] = base[j];
    }
    let mut total = 0.0;
    for &j in order {
        let field = gamma_field(sys, i, j);
        let mut seg_point = point.clone();
        let integrand = |x: f64| -> Result<f64, NumericError> {
            let mut p = seg_point.clone();
            p[j] = x;
            extract(&field, &p).map_err(|e| NumericError::Integrand(e.to_string()))
        };
        total += numeric::adaptive_simpson(&integrand, base[j], target[j], quad.tol, quad.max_depth)?;
        seg_point[j] = target[j];
        point[j] = target[j];
    }
    Ok(total)
}

/// Reconstructed Lame data at one point.
#[derive(Debug, Clone)]
pub struct LameData {
    pub phi: Vec<f64>,
    pub h: Vec<f64>,
    /// rotation coefficients beta[j][i] = H_{i,u^j} / H_j for i != j
    pub beta: Vec<Vec<f64>>,
}

/// Reconstruct Phi_i, H_i = exp(Phi_i) and the rotation coefficients at
/// `point` by composed one-dimensional quadratures from `base_point`.
/// `initial` are the Phi_i values on the base line (defaults to zero).
pub fn lame_reconstruct(
    sys: &DiagonalSystem,
    base_point: &[f64],
    point: &[f64],
    initial: Option<&[f64]>,
) -> Result<LameData, GeometryError> {
    let n = sys.n();
    let order_default: Vec<usize> = (0..n).collect();
    lame_reconstruct_with_order(sys, base_point, point, initial, &order_default)
}

/// Same as [`lame_reconstruct`] with an explicit axis sweep order (used to
/// test path independence, which is guaranteed by the Tsarev conditions).
pub fn lame_reconstruct_with_order(
    sys: &DiagonalSystem,
    base_point: &[f64],
    point: &[f64],
    initial: Option<&[f64]>,
    axis_order: &[usize],
) -> Result<LameData, GeometryError> {
    let n = sys.n();
    sys.require_strict_hyperbolicity(point)?;
    let quad = QuadOptions::default();
    let mut phi = vec![0.0; n];
    for i in 0..n {
        let order: Vec<usize> = axis_order.iter().copied().filter(|&j| j != i).collect();
        let val = path_integral_ordered(sys, i, base_point, point, &order, quad, &|f, pt| {
            f.eval(pt)
        })?;
        phi[i] = val + initial.map(|v| v[i]).unwrap_or(0.0);
    }
    let h: Vec<f64> = phi.iter().map(|p| p.exp()).collect();
    let mut beta = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            // H_{i,u^j} = H_i Gamma^i_ij exactly, since d Phi_i/d u^j = Gamma^i_ij
            beta[j][i] = h[i] * gamma(sys, i, j, point)? / h[j];
        }
    }
    Ok(LameData { phi, h, beta })
}

// ---------------------------------------------------------------------------
// Hamiltonian (flatness) check
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct HamiltonianReport {
    /// max over samples and (i, j) of |R^i_jji|
    pub max_residual: f64,
    pub pass: bool,
    pub tolerance: f64,
    pub per_point: Vec<f64>,
}

/// Evaluate the curvature components R^i_jji of the metric fixed by `gauge`
/// and report whether they vanish (Hamiltonian criterion for the supplied
/// metric candidate).
///
/// The outcome depends on the gauge: the system determines the metric only up
/// to one function of u^i per component plus a signature, and flatness holds
/// for the physically correct representative. Callers verifying a known
/// Hamiltonian structure should pass its metric explicitly.
pub fn hamiltonian_check(
    sys: &DiagonalSystem,
    gauge: &Gauge,
    samples: &[Vec<f64>],
    tolerance: f64,
) -> Result<HamiltonianReport, GeometryError> {
    let n = sys.n();
    let mut per_point = Vec::with_capacity(samples.len());
    let mut max_residual: f64 = 0.0;
    for packed in samples {
        sys.require_strict_hyperbolicity(packed)?;
        let phi: Vec<f64> = (0..n)
            .map(|i| gauge.phi(sys, i, packed))
            .collect::<Result<_, _>>()?;
        let p = |i: usize, j: usize| -> Result<f64, GeometryError> {
            if i == j {
                gauge.gamma_ii(sys, i, packed)
            } else {
                gamma(sys, i, j, packed)
            }
        };
        let mut worst: f64 = 0.0;
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                // signed metric ratio g_jj / g_ii
                let ratio = |a: usize, b: usize| -> f64 {
                    (gauge.signs[a] / gauge.signs[b]) * (2.0 * (phi[a] - phi[b])).exp()
                };
                let dp_ij = gamma_field(sys, i, j).partial(j, packed)?;
                let dp_ji = gamma_field(sys, j, i).partial(i, packed)?;
                let p_ij = p(i, j)?;
                let p_ji = p(j, i)?;
                let p_ii = p(i, i)?;
                let p_jj = p(j, j)?;
                let mut r = dp_ij + p_ij * p_ij - p_ij * p_jj
                    + ratio(j, i) * (dp_ji + p_ji * p_ji - p_ii * p_ji);
                for m in 0..n {
                    if m == i || m == j {
                        continue;
                    }
                    r += ratio(j, m) * p(i, m)? * p(j, m)?;
                }
                worst = worst.max(r.abs());
            }
        }
        per_point.push(worst);
        max_residual = max_residual.max(worst);
    }
    Ok(HamiltonianReport {
        max_residual,
        pass: max_residual < tolerance,
        tolerance,
        per_point,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::{epsilon_system, Dependence};
    use std::collections::HashMap;

    fn eps3() -> DiagonalSystem {
        epsilon_system(3)
    }

    #[test]
    fn epsilon_connection_entry() {
        let sys = eps3();
        let g = gamma(&sys, 0, 1, &[1.0, 2.0, 4.0]).unwrap();
        assert!((g - (-1.0)).abs() < 1e-14);
    }

    #[test]
    fn constant_speed_connection_vanishes() {
        let sys = DiagonalSystem::from_exprs(
            &["1 + 0*u1", "2 + 0*u1", "3 + 0*u1"],
            Dependence::Autonomous,
            &HashMap::new(),
        )
        .unwrap();
        let c = connection(&sys, &[0.3, 0.5, 0.9]).unwrap();
        for row in &c {
            for v in row {
                assert_eq!(*v, 0.0);
            }
        }
        assert_eq!(tsarev_residual(&sys, &[0.3, 0.5, 0.9]).unwrap(), 0.0);
    }

    #[test]
    fn epsilon_is_semi_hamiltonian() {
        let sys = eps3();
        for pt in [[1.0, 2.0, 4.0], [0.1, 0.7, -0.4], [3.0, -1.0, 5.0]] {
            let r = tsarev_residual(&sys, &pt).unwrap();
            assert!(r < 1e-10, "residual {r}");
            let c = curvature_check(&sys, &pt).unwrap();
            assert!(c.r_ikj_max < 1e-10);
            assert!(c.r_jki_max < 1e-10);
        }
    }

    #[test]
    fn perturbed_epsilon_fails_tsarev_and_curvature() {
        let sys = DiagonalSystem::from_exprs(
            &[
                "u1 + u2 + u3 - u1 + u2^2*u3",
                "u1 + u2 + u3 - u2",
                "u1 + u2 + u3 - u3",
            ],
            Dependence::Autonomous,
            &HashMap::new(),
        )
        .unwrap();
        let pt = [1.0, 2.0, 4.0];
        let r = tsarev_residual(&sys, &pt).unwrap();
        // hand value: the worst triple is (i,j,k) = (3,1,2) with
        // d/du^2 [1/(v_1 - v_3)] = -2 u^2 u^3 / (u^3 - u^1 + (u^2)^2 u^3)^2
        // = -16/361 and a vanishing partner term
        assert!((r - 16.0 / 361.0).abs() < 1e-12, "residual {r}");
        let c = curvature_check(&sys, &pt).unwrap();
        assert!(c.r_jki_max > 0.1, "curvature residual {}", c.r_jki_max);
    }

    #[test]
    fn tsarev_is_permutation_equivariant() {
        // relabeling components does not change the residual
        let sys = DiagonalSystem::from_exprs(
            &[
                "u1 + u2 + u3 - u1 + u2^2*u3",
                "u1 + u2 + u3 - u2",
                "u1 + u2 + u3 - u3",
            ],
            Dependence::Autonomous,
            &HashMap::new(),
        )
        .unwrap();
        let relabeled = DiagonalSystem::from_exprs(
            &[
                "u1 + u2 + u3 - u1",
                "u1 + u2 + u3 - u2 + u1^2*u3",
                "u1 + u2 + u3 - u3",
            ],
            Dependence::Autonomous,
            &HashMap::new(),
        )
        .unwrap();
        let r1 = tsarev_residual(&sys, &[1.0, 2.0, 4.0]).unwrap();
        let r2 = tsarev_residual(&relabeled, &[2.0, 1.0, 4.0]).unwrap();
        assert!((r1 - r2).abs() < 1e-9, "{r1} vs {r2}");
    }

    #[test]
    fn lame_constant_speed_trivial() {
        let sys = DiagonalSystem::from_exprs(
            &["1 + 0*u1", "2 + 0*u1", "3 + 0*u1"],
            Dependence::Autonomous,
            &HashMap::new(),
        )
        .unwrap();
        let data = lame_reconstruct(&sys, &[0.0, 0.0, 0.0], &[1.0, -2.0, 0.5], None).unwrap();
        for i in 0..3 {
            assert!(data.phi[i].abs() < 1e-12);
            assert!((data.h[i] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn lame_path_independence_epsilon() {
        let sys = eps3();
        let base = [6.0, 7.5, 9.0];
        let target = [5.0, 7.0, 10.0];
        let a = lame_reconstruct_with_order(&sys, &base, &target, None, &[0, 1, 2]).unwrap();
        let b = lame_reconstruct_with_order(&sys, &base, &target, None, &[2, 1, 0]).unwrap();
        for i in 0..3 {
            assert!(
                (a.phi[i] - b.phi[i]).abs() < 1e-8,
                "component {i}: {} vs {}",
                a.phi[i],
                b.phi[i]
            );
        }
    }

    #[test]
    fn epsilon_base_point_gauge_matches_closed_form() {
        // Phi_i = -sum_{j != i} [ln(u^i - u^j) - ln(u^i - b^j)] for ordered points
        let sys = eps3();
        let base = [10.0, 7.0, 4.0];
        let target = [9.0, 6.5, 3.0];
        let data = lame_reconstruct(&sys, &base, &target, None).unwrap();
        for i in 0..3 {
            let mut expect = 0.0;
            for j in 0..3 {
                if j != i {
                    expect -= ((target[i] - target[j]).abs()).ln()
                        - ((target[i] - base[j]).abs()).ln();
                }
            }
            assert!(
                (data.phi[i] - expect).abs() < 1e-9,
                "phi[{i}] = {}, expected {expect}",
                data.phi[i]
            );
        }
    }

    #[test]
    fn constant_speed_metric_is_flat() {
        let sys = DiagonalSystem::from_exprs(
            &["1 + 0*u1", "2 + 0*u1", "3 + 0*u1"],
            Dependence::Autonomous,
            &HashMap::new(),
        )
        .unwrap();
        let gauge = Gauge::base_point(vec![0.0, 0.0, 0.0]);
        let report =
            hamiltonian_check(&sys, &gauge, &[vec![0.4, -0.3, 1.1], vec![2.0, 0.0, -1.0]], 1e-8)
                .unwrap();
        assert!(report.pass, "max residual {}", report.max_residual);
    }
}
