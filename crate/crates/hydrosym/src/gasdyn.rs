//! Gas-dynamics specialization: Riemann transform, named state equations,
//! the closed-form first order recursion operator on jet characteristics,
//! higher-symmetry chains, kernel bases and the matrix-integral solution
//! series in physical variables.

use std::collections::HashMap;
use std::sync::Arc;

use thiserror::Error;

use crate::expr::{self, Expr, UnsupportedAntiderivative};
use crate::numeric::{self, NumericError};
use crate::system::{
    Dependence, DiagonalSystem, FieldError, JetError, JetPoint, ScalarField, SystemError,
};

#[derive(Debug, Error)]
pub enum GasError {
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error(transparent)]
    Jet(#[from] JetError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error(transparent)]
    System(#[from] SystemError),
    #[error(transparent)]
    Antiderivative(#[from] UnsupportedAntiderivative),
    #[error("density out of domain: {0}")]
    DensityDomain(f64),
    #[error("inverse Riemann transform failed: {0}")]
    InverseTransform(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum GasKind {
    /// P = a^2 rho^gamma, alpha = a sqrt(gamma) rho^((gamma-3)/2)
    Polytropic { a: f64, gamma: f64 },
    /// P = P0 - a^2/rho, alpha = a / rho^2
    Chaplygin { a: f64, p0: f64 },
    Custom,
}

/// Isoentropic gas model described by the sound-speed function
/// alpha(rho) > 0 and a reference density rho0 for the Riemann transform.
#[derive(Debug, Clone)]
pub struct GasModel {
    pub kind: GasKind,
    alpha: Expr,
    alpha_prime: Expr,
    pub rho0: f64,
}

pub const JET_VARS: [&str; 13] = [
    "x", "t", "s", "r", "rho", "s1", "r1", "s2", "r2", "s3", "r3", "s4", "r4",
];

impl GasModel {
    pub fn polytropic(a: f64, gamma: f64, rho0: f64) -> Self {
        let alpha = expr::mul(
            expr::constant(a * gamma.sqrt()),
            expr::pow(expr::var("rho"), (gamma - 3.0) / 2.0),
        );
        Self::custom_with_kind(alpha, rho0, GasKind::Polytropic { a, gamma })
    }

    pub fn chaplygin(a: f64, p0: f64, rho0: f64) -> Self {
        let alpha = expr::div(expr::constant(a), expr::pow(expr::var("rho"), 2.0));
        Self::custom_with_kind(alpha, rho0, GasKind::Chaplygin { a, p0 })
    }

    /// Arbitrary alpha(rho) > 0 given as an expression in `rho`.
    pub fn custom(alpha: Expr, rho0: f64) -> Self {
        Self::custom_with_kind(alpha, rho0, GasKind::Custom)
    }

    fn custom_with_kind(alpha: Expr, rho0: f64, kind: GasKind) -> Self {
        let alpha_prime = alpha.differentiate("rho");
        GasModel {
            kind,
            alpha,
            alpha_prime,
            rho0,
        }
    }

    pub fn alpha_expr(&self) -> &Expr {
        &self.alpha
    }

    pub fn alpha(&self, rho: f64) -> Result<f64, GasError> {
        Ok(eval_rho(&self.alpha, rho)?)
    }

    pub fn alpha_prime(&self, rho: f64) -> Result<f64, GasError> {
        Ok(eval_rho(&self.alpha_prime, rho)?)
    }

    /// alpha'(rho) / (4 alpha^2), the coefficient of the linear symmetry
    /// system in Riemann invariants.
    pub fn h(&self, rho: f64) -> Result<f64, GasError> {
        let a = self.alpha(rho)?;
        Ok(self.alpha_prime(rho)? / (4.0 * a * a))
    }

    /// I(rho) = int_{rho0}^{rho} alpha. Closed form for the named kinds.
    pub fn int_alpha(&self, rho: f64) -> Result<f64, GasError> {
        match self.kind {
            GasKind::Polytropic { a, gamma } if gamma != 1.0 => {
                let p = (gamma - 1.0) / 2.0;
                Ok(a * gamma.sqrt() * (rho.powf(p) - self.rho0.powf(p)) / p)
            }
            GasKind::Polytropic { a, .. } => {
                if rho <= 0.0 || self.rho0 <= 0.0 {
                    return Err(GasError::DensityDomain(rho));
                }
                Ok(a * (rho / self.rho0).ln())
            }
            GasKind::Chaplygin { a, .. } => {
                if rho <= 0.0 || self.rho0 <= 0.0 {
                    return Err(GasError::DensityDomain(rho));
                }
                Ok(a * (1.0 / self.rho0 - 1.0 / rho))
            }
            GasKind::Custom => {
                if let Ok(anti) = self.alpha.antiderivative("rho", self.rho0) {
                    return Ok(eval_rho(&anti, rho)?);
                }
                let alpha = self.alpha.clone();
                let f = move |x: f64| -> Result<f64, NumericError> {
                    eval_rho(&alpha, x).map_err(|e| NumericError::Integrand(e.to_string()))
                };
                Ok(numeric::adaptive_simpson(&f, self.rho0, rho, 1e-12, 40)?)
            }
        }
    }

    /// Invert I(rho) = delta; monotone since alpha > 0. Closed form for the
    /// named kinds, bracketed Newton with bisection fallback otherwise.
    pub fn rho_from_delta(&self, delta: f64) -> Result<f64, GasError> {
        match self.kind {
            GasKind::Polytropic { a, gamma } if gamma != 1.0 => {
                let p = (gamma - 1.0) / 2.0;
                let base = delta * p / (a * gamma.sqrt()) + self.rho0.powf(p);
                if base <= 0.0 {
                    return Err(GasError::DensityDomain(base));
                }
                Ok(base.powf(1.0 / p))
            }
            GasKind::Polytropic { a, .. } => Ok(self.rho0 * (delta / a).exp()),
            GasKind::Chaplygin { a, .. } => {
                let inv = 1.0 / self.rho0 - delta / a;
                if inv <= 0.0 {
                    return Err(GasError::DensityDomain(inv));
                }
                Ok(1.0 / inv)
            }
            GasKind::Custom => {
                // expand a bracket around rho0 until I covers delta
                let mut lo = self.rho0;
                let mut hi = self.rho0;
                let mut step = self.rho0.abs().max(1.0) * 0.5;
                for _ in 0..200 {
                    if self.int_alpha(lo)? <= delta {
                        break;
                    }
                    lo = if lo > 0.0 { (lo - step).max(lo * 0.5) } else { lo - step };
                    step *= 2.0;
                }
                step = self.rho0.abs().max(1.0) * 0.5;
                for _ in 0..200 {
                    if self.int_alpha(hi)? >= delta {
                        break;
                    }
                    hi += step;
                    step *= 2.0;
                }
                let g = |x: f64| {
                    self.int_alpha(x)
                        .map_err(|e| NumericError::Integrand(e.to_string()))
                };
                let dg = |x: f64| {
                    self.alpha(x)
                        .map_err(|e| NumericError::Integrand(e.to_string()))
                };
                numeric::bracketed_newton(&g, &dg, delta, lo, hi, 1e-12, 200)
                    .map_err(|e| GasError::InverseTransform(e.to_string()))
            }
        }
    }

    /// Riemann invariants from physical variables:
    /// s = u - I(rho), r = u + I(rho).
    pub fn riemann_from_physical(&self, u: f64, rho: f64) -> Result<(f64, f64), GasError> {
        let i = self.int_alpha(rho)?;
        Ok((u - i, u + i))
    }

    /// Inverse transform; rho solves I(rho) = (r - s)/2.
    pub fn physical_from_riemann(&self, s: f64, r: f64) -> Result<(f64, f64), GasError> {
        let rho = self.rho_from_delta(0.5 * (r - s))?;
        Ok((0.5 * (s + r), rho))
    }

    pub fn rho_from_invariants(&self, s: f64, r: f64) -> Result<f64, GasError> {
        self.rho_from_delta(0.5 * (r - s))
    }

    /// phi(s, r) = -[(s+r)/2 - rho alpha], psi = -[(s+r)/2 + rho alpha].
    pub fn speeds_at(&self, s: f64, r: f64) -> Result<(f64, f64), GasError> {
        let rho = self.rho_from_invariants(s, r)?;
        let ra = rho * self.alpha(rho)?;
        let m = 0.5 * (s + r);
        Ok((-(m - ra), -(m + ra)))
    }

    /// The diagonal system in Riemann invariants (components u1 = s, u2 = r).
    /// Speeds carry exact gradients obtained by implicit differentiation of
    /// the inverse transform.
    pub fn riemann_system(&self) -> DiagonalSystem {
        let vars = ["u1", "u2"];
        let m_phi = self.clone();
        let g_phi = self.clone();
        let phi = ScalarField::from_fn_with_grad(
            &vars,
            move |p| {
                m_phi
                    .speeds_at(p[0], p[1])
                    .map(|(phi, _)| phi)
                    .map_err(|e| FieldError::Other(e.to_string()))
            },
            move |p, slot| {
                let half_ratio = half_log_alpha_slope(&g_phi, p[0], p[1])?;
                Ok(if slot == 0 { -1.0 - half_ratio } else { half_ratio })
            },
        );
        let m_psi = self.clone();
        let g_psi = self.clone();
        let psi = ScalarField::from_fn_with_grad(
            &vars,
            move |p| {
                m_psi
                    .speeds_at(p[0], p[1])
                    .map(|(_, psi)| psi)
                    .map_err(|e| FieldError::Other(e.to_string()))
            },
            move |p, slot| {
                let half_ratio = half_log_alpha_slope(&g_psi, p[0], p[1])?;
                Ok(if slot == 0 { half_ratio } else { -1.0 - half_ratio })
            },
        );
        DiagonalSystem::new(vec![phi, psi], Dependence::Autonomous)
            .expect("two components")
            .with_labels(&["s", "r"])
    }
}

/// rho alpha'/(2 alpha) at (s, r): the off-diagonal speed gradient.
fn half_log_alpha_slope(model: &GasModel, s: f64, r: f64) -> Result<f64, FieldError> {
    let rho = model
        .rho_from_invariants(s, r)
        .map_err(|e| FieldError::Other(e.to_string()))?;
    let a = model.alpha(rho).map_err(|e| FieldError::Other(e.to_string()))?;
    let ap = model
        .alpha_prime(rho)
        .map_err(|e| FieldError::Other(e.to_string()))?;
    Ok(rho * ap / (2.0 * a))
}

fn eval_rho(e: &Expr, rho: f64) -> Result<f64, FieldError> {
    Ok(e.eval_with(&mut |name| if name == "rho" { Some(rho) } else { None })?)
}

// ---------------------------------------------------------------------------
// jet characteristics and the first order recursion operator
// ---------------------------------------------------------------------------

/// A symmetry characteristic (f, g) as expressions over the jet variables
/// x, t, s, r, rho, s1, r1, ..., s4, r4 where sk is the k-th x-derivative of
/// s and rho is tied to (s, r) through the inverse Riemann transform.
#[derive(Debug, Clone)]
pub struct JetCharacteristic {
    pub f: Expr,
    pub g: Expr,
}

impl JetCharacteristic {
    pub fn constant_pair(cf: f64, cg: f64) -> Self {
        JetCharacteristic {
            f: expr::constant(cf),
            g: expr::constant(cg),
        }
    }

    /// (1, 1): the seed of the higher-symmetry chain.
    pub fn unit() -> Self {
        Self::constant_pair(1.0, 1.0)
    }

    pub fn depth(&self) -> usize {
        self.f
            .variables()
            .iter()
            .chain(self.g.variables().iter())
            .fold(0, |d, v| {
                let vd = match v.as_str() {
                    "s1" | "r1" => 1,
                    "s2" | "r2" => 2,
                    "s3" | "r3" => 3,
                    "s4" | "r4" => 4,
                    _ => 0,
                };
                d.max(vd)
            })
    }
}

/// Total x-derivative on the jet: expands through s, r, rho (via
/// rho_x = (r_x - s_x)/(2 alpha)) and shifts each derivative slot up by one.
pub fn total_derivative_x(model: &GasModel, e: &Expr) -> Expr {
    let rho_x = expr::div(
        expr::sub(expr::var("r1"), expr::var("s1")),
        expr::mul(expr::constant(2.0), model.alpha.clone()),
    );
    let mut out = e.differentiate("x");
    let chain: [(&str, Expr); 9] = [
        ("s", expr::var("s1")),
        ("r", expr::var("r1")),
        ("rho", rho_x),
        ("s1", expr::var("s2")),
        ("r1", expr::var("r2")),
        ("s2", expr::var("s3")),
        ("r2", expr::var("r3")),
        ("s3", expr::var("s4")),
        ("r3", expr::var("r4")),
    ];
    for (v, rate) in chain {
        let d = e.differentiate(v);
        out = expr::add(out, expr::mul(d, rate));
    }
    out
}

/// One application of the first order recursion operator
/// R = (I D_x - (alpha_x / 2 alpha) sigma) diag(1/s_x, 1/r_x), symbolically.
pub fn recursion_symbolic(model: &GasModel, c: &JetCharacteristic) -> JetCharacteristic {
    let p = expr::div(c.f.clone(), expr::var("s1"));
    let q = expr::div(c.g.clone(), expr::var("r1"));
    // alpha_x / (2 alpha) = [alpha'/(4 alpha^2)] (r_x - s_x)
    let h = expr::div(
        model.alpha_prime.clone(),
        expr::mul(expr::constant(4.0), expr::pow(model.alpha.clone(), 2.0)),
    );
    let m = expr::mul(h, expr::sub(expr::var("r1"), expr::var("s1")));
    let diff = expr::sub(p.clone(), q.clone());
    JetCharacteristic {
        f: expr::sub(total_derivative_x(model, &p), expr::mul(m.clone(), diff.clone())),
        g: expr::add(total_derivative_x(model, &q), expr::mul(m, diff)),
    }
}

/// Evaluate a jet expression at a jet point; rho is recovered from the
/// invariants. Fails fast when the expression references derivative slots
/// the jet does not carry.
pub fn eval_jet(model: &GasModel, e: &Expr, jet: &JetPoint) -> Result<f64, GasError> {
    let mut values = [0.0; 13];
    values[0] = jet.x;
    values[1] = jet.t;
    values[2] = jet.u[0];
    values[3] = jet.u[1];
    values[4] = model.rho_from_invariants(jet.u[0], jet.u[1])?;
    for v in e.variables() {
        let (slot, order, comp) = match v.as_str() {
            "s1" => (5, 1, 0),
            "r1" => (6, 1, 1),
            "s2" => (7, 2, 0),
            "r2" => (8, 2, 1),
            "s3" => (9, 3, 0),
            "r3" => (10, 3, 1),
            "s4" => (11, 4, 0),
            "r4" => (12, 4, 1),
            _ => continue,
        };
        let value = jet.deriv(comp, order).ok_or(JetError::InsufficientDepth {
            available: jet.depth(),
            needed: order,
        })?;
        values[slot] = value;
    }
    let got = e.eval_with(&mut |name| JET_VARS.iter().position(|x| *x == name).map(|i| values[i]));
    got.map_err(|e| GasError::Field(FieldError::Eval(e)))
}

/// Apply R once to a characteristic and evaluate at the jet point.
pub fn recursion_apply(
    model: &GasModel,
    c: &JetCharacteristic,
    jet: &JetPoint,
) -> Result<(f64, f64), GasError> {
    jet.require_nonzero_slopes()?;
    let image = recursion_symbolic(model, c);
    jet.require_depth(image.depth())?;
    Ok((
        eval_jet(model, &image.f, jet)?,
        eval_jet(model, &image.g, jet)?,
    ))
}

/// (f_N, g_N) = R^{N-1} (1,1) for N >= 2, evaluated at the jet point.
/// The jet must be populated to depth N.
pub fn characteristic_chain(
    model: &GasModel,
    order: usize,
    jet: &JetPoint,
) -> Result<(f64, f64), GasError> {
    assert!(order >= 2, "chain starts at second order");
    jet.require_nonzero_slopes()?;
    jet.require_depth(order)?;
    let c = characteristic_chain_symbolic(model, order);
    Ok((eval_jet(model, &c.f, jet)?, eval_jet(model, &c.g, jet)?))
}

/// Symbolic form of the chain, for callers that reuse it across many jets.
pub fn characteristic_chain_symbolic(model: &GasModel, order: usize) -> JetCharacteristic {
    assert!(order >= 2);
    let mut c = JetCharacteristic::unit();
    for _ in 0..order - 1 {
        c = recursion_symbolic(model, &c);
    }
    c
}

// ---------------------------------------------------------------------------
// reduced recursion on symmetry coefficients (a, c)
// ---------------------------------------------------------------------------

/// The reduced action of R on hydrodynamic symmetry coefficients:
/// a1 = a_s + [alpha'/(4 alpha^2)](a - c),
/// c1 = c_r + [alpha'/(4 alpha^2)](a - c).
/// Fields are over (u1, u2) = (s, r).
pub fn recursion_ac(
    model: &GasModel,
    a: &ScalarField,
    c: &ScalarField,
    s: f64,
    r: f64,
) -> Result<(f64, f64), GasError> {
    let point = [s, r];
    let rho = model.rho_from_invariants(s, r)?;
    let h = model.h(rho)?;
    let av = a.eval(&point)?;
    let cv = c.eval(&point)?;
    let a1 = a.partial(0, &point)? + h * (av - cv);
    let c1 = c.partial(1, &point)? + h * (av - cv);
    Ok((a1, c1))
}

/// Apply the reduced recursion to coefficient fields, producing new fields
/// (kept as callbacks so they can be iterated).
pub fn recursion_ac_fields(
    model: &GasModel,
    a: &ScalarField,
    c: &ScalarField,
) -> (ScalarField, ScalarField) {
    let vars = ["u1", "u2"];
    let (m1, a1, c1) = (model.clone(), a.clone(), c.clone());
    let out_a = ScalarField::from_fn(&vars, move |p| {
        recursion_ac(&m1, &a1, &c1, p[0], p[1])
            .map(|(x, _)| x)
            .map_err(|e| FieldError::Other(e.to_string()))
    });
    let (m2, a2, c2) = (model.clone(), a.clone(), c.clone());
    let out_c = ScalarField::from_fn(&vars, move |p| {
        recursion_ac(&m2, &a2, &c2, p[0], p[1])
            .map(|(_, x)| x)
            .map_err(|e| FieldError::Other(e.to_string()))
    });
    (out_a, out_c)
}

/// The speed fields (phi, psi) of the gas system as a coefficient pair over
/// (u1, u2); they solve the linear symmetry system.
pub fn speed_coefficients(model: &GasModel) -> (ScalarField, ScalarField) {
    let sys = model.riemann_system();
    (sys.speed(0).clone(), sys.speed(1).clone())
}

// ---------------------------------------------------------------------------
// kernel bases of R and R^2
// ---------------------------------------------------------------------------

/// Kernel of R (free functions frozen to the constants c[0], c[1]):
/// c1 (s_x, r_x) + c2 alpha(rho) (-s_x, r_x).
pub fn kernel_basis_1(model: &GasModel, c: &[f64; 2]) -> JetCharacteristic {
    let alpha = model.alpha.clone();
    JetCharacteristic {
        f: expr::mul(
            expr::sub(
                expr::constant(c[0]),
                expr::mul(expr::constant(c[1]), alpha.clone()),
            ),
            expr::var("s1"),
        ),
        g: expr::mul(
            expr::add(expr::constant(c[0]), expr::mul(expr::constant(c[1]), alpha)),
            expr::var("r1"),
        ),
    }
}

/// Kernel of R^2 with constants c[0..4]:
/// c1 ((u - rho alpha) s_x, (u + rho alpha) r_x)
/// + c2 ((Q - u alpha) s_x, (Q + u alpha) r_x) with Q = int alpha^2
/// + c3 (s_x, r_x) + c4 alpha (-s_x, r_x).
pub fn kernel_basis_2(model: &GasModel, c: &[f64; 4]) -> Result<JetCharacteristic, GasError> {
    let alpha = model.alpha.clone();
    let u = expr::mul(
        expr::constant(0.5),
        expr::add(expr::var("s"), expr::var("r")),
    );
    let rho_alpha = expr::mul(expr::var("rho"), alpha.clone());
    let q = expr::pow(alpha.clone(), 2.0).antiderivative("rho", model.rho0)?;
    let u_alpha = expr::mul(u.clone(), alpha.clone());

    let term = |coef: f64, base_minus: Expr, base_plus: Expr| {
        (
            expr::mul(expr::constant(coef), expr::mul(base_minus, expr::var("s1"))),
            expr::mul(expr::constant(coef), expr::mul(base_plus, expr::var("r1"))),
        )
    };
    let (f1, g1) = term(
        c[0],
        expr::sub(u.clone(), rho_alpha.clone()),
        expr::add(u.clone(), rho_alpha),
    );
    let (f2, g2) = term(
        c[1],
        expr::sub(q.clone(), u_alpha.clone()),
        expr::add(q, u_alpha),
    );
    let (f3, g3) = term(c[2], expr::constant(1.0), expr::constant(1.0));
    let (f4, g4) = term(c[3], expr::neg(alpha.clone()), alpha);
    Ok(JetCharacteristic {
        f: expr::add(expr::add(f1, f2), expr::add(f3, f4)),
        g: expr::add(expr::add(g1, g2), expr::add(g3, g4)),
    })
}

// ---------------------------------------------------------------------------
// matrix-integral operator K and the solution series in (u, rho)
// ---------------------------------------------------------------------------

/// Apply K = d_u^{-1} I + d_rho^{-1} [[0, alpha^2], [1, 0]] to a symbolic
/// 2-vector over (u, rho). Lower limits: u from 0, rho from rho0.
pub fn k_apply(model: &GasModel, w: &[Expr; 2]) -> Result<[Expr; 2], GasError> {
    let alpha2 = expr::pow(model.alpha.clone(), 2.0);
    let at_rho0 = |e: &Expr| e.substitute("rho", &Expr::Const(model.rho0));
    let comp1 = expr::add(
        at_rho0(&w[0]).antiderivative("u", 0.0)?,
        expr::mul(alpha2, w[1].clone()).antiderivative("rho", model.rho0)?,
    );
    let comp2 = expr::add(
        at_rho0(&w[1]).antiderivative("u", 0.0)?,
        w[0].clone().antiderivative("rho", model.rho0)?,
    );
    Ok([comp1, comp2])
}

/// Basis vectors of the solution series: entry m holds
/// [K^m (1,0), K^m (0,1)] as expressions in (u, rho), for m = 0..levels-1.
pub fn k_chain_terms(model: &GasModel, levels: usize) -> Result<Vec<[[Expr; 2]; 2]>, GasError> {
    let mut out = Vec::with_capacity(levels);
    let mut ea = [expr::constant(1.0), expr::constant(0.0)];
    let mut eb = [expr::constant(0.0), expr::constant(1.0)];
    out.push([ea.clone(), eb.clone()]);
    for _ in 1..levels {
        ea = k_apply(model, &ea)?;
        eb = k_apply(model, &eb)?;
        out.push([ea.clone(), eb.clone()]);
    }
    Ok(out)
}

/// Residual expressions of the depth-N invariant-solution family in physical
/// variables, over (u, rho, x, t):
///
/// F = sum of constants times basis terms - (x - u t, -rho t).
///
/// Constants are ordered so that (c1, c2) multiply the top level K^{N-1}
/// basis pair and (c_{2N-1}, c_{2N}) multiply (1,0), (0,1).
pub fn gas_series_residual_exprs(
    model: &GasModel,
    depth: usize,
    constants: &[f64],
) -> Result<[Expr; 2], GasError> {
    assert!(depth >= 1);
    assert_eq!(constants.len(), 2 * depth, "need 2N constants");
    let terms = k_chain_terms(model, depth)?;
    let mut f1 = expr::constant(0.0);
    let mut f2 = expr::constant(0.0);
    for (m, pair) in terms.iter().enumerate() {
        // level m couples to constants c_{2(N-m)-1}, c_{2(N-m)} (1-based)
        let ca = constants[2 * (depth - m) - 2];
        let cb = constants[2 * (depth - m) - 1];
        f1 = expr::add(
            f1,
            expr::add(
                expr::mul(expr::constant(ca), pair[0][0].clone()),
                expr::mul(expr::constant(cb), pair[1][0].clone()),
            ),
        );
        f2 = expr::add(
            f2,
            expr::add(
                expr::mul(expr::constant(ca), pair[0][1].clone()),
                expr::mul(expr::constant(cb), pair[1][1].clone()),
            ),
        );
    }
    // minus the right-hand side (x - u t, -rho t)
    f1 = expr::add(
        expr::sub(f1, expr::var("x")),
        expr::mul(expr::var("u"), expr::var("t")),
    );
    f2 = expr::add(f2, expr::mul(expr::var("rho"), expr::var("t")));
    Ok([f1, f2])
}

/// Numeric K application by nested quadrature along the axis path
/// (0, rho0) -> (u, rho0) -> (u, rho); independent oracle for the symbolic
/// chain.
pub type PhysicalField = Arc<dyn Fn(f64, f64) -> f64 + Send + Sync>;

pub fn k_apply_numeric(
    model: &GasModel,
    w: &(PhysicalField, PhysicalField),
    u: f64,
    rho: f64,
) -> Result<(f64, f64), GasError> {
    let rho0 = model.rho0;
    let (w1, w2) = (w.0.clone(), w.1.clone());
    let alpha = model.alpha.clone();
    let seg_u_1 = {
        let w1 = w1.clone();
        move |x: f64| -> Result<f64, NumericError> { Ok(w1(x, rho0)) }
    };
    let seg_u_2 = {
        let w2 = w2.clone();
        move |x: f64| -> Result<f64, NumericError> { Ok(w2(x, rho0)) }
    };
    let seg_rho_1 = {
        let w2 = w2.clone();
        let alpha = alpha.clone();
        move |p: f64| -> Result<f64, NumericError> {
            let a = eval_rho(&alpha, p).map_err(|e| NumericError::Integrand(e.to_string()))?;
            Ok(a * a * w2(u, p))
        }
    };
    let seg_rho_2 = move |p: f64| -> Result<f64, NumericError> { Ok(w1(u, p)) };
    let c1 = numeric::adaptive_simpson(&seg_u_1, 0.0, u, 1e-12, 48)?
        + numeric::adaptive_simpson(&seg_rho_1, rho0, rho, 1e-12, 48)?;
    let c2 = numeric::adaptive_simpson(&seg_u_2, 0.0, u, 1e-12, 48)?
        + numeric::adaptive_simpson(&seg_rho_2, rho0, rho, 1e-12, 48)?;
    Ok((c1, c2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::system::validate_hyperbolic;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn jet(s: f64, r: f64, depth: usize, rng: &mut StdRng) -> JetPoint {
        let mut nonzero = |rng: &mut StdRng| loop {
            let v: f64 = rng.gen_range(-1.5..1.5);
            if v.abs() > 0.2 {
                return v;
            }
        };
        JetPoint {
            x: 0.0,
            t: 0.0,
            u: vec![s, r],
            u_x: vec![nonzero(rng), nonzero(rng)],
            u_xx: (depth >= 2).then(|| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]),
            u_xxx: (depth >= 3).then(|| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]),
        }
    }

    /// closed form (f2, g2) of the second order symmetry
    fn f2g2(model: &GasModel, j: &JetPoint) -> (f64, f64) {
        let rho = model.rho_from_invariants(j.u[0], j.u[1]).unwrap();
        let h = model.h(rho).unwrap();
        let (sx, rx) = (j.u_x[0], j.u_x[1]);
        let (sxx, rxx) = (j.u_xx.as_ref().unwrap()[0], j.u_xx.as_ref().unwrap()[1]);
        let shared = h * (sx - rx) * (sx - rx) / (sx * rx);
        (-sxx / (sx * sx) - shared, -rxx / (rx * rx) + shared)
    }

    #[test]
    fn riemann_transform_hand_values() {
        // a=1, gamma=2, rho0=0: int alpha = 2 sqrt(2) sqrt(rho)
        let model = GasModel::polytropic(1.0, 2.0, 0.0);
        let (s, r) = model.riemann_from_physical(0.0, 2.0).unwrap();
        assert!((s + 4.0).abs() < 1e-12);
        assert!((r - 4.0).abs() < 1e-12);
        // rho = rho0 gives (u, u)
        let model = GasModel::polytropic(1.0, 1.4, 1.0);
        let (s, r) = model.riemann_from_physical(0.7, 1.0).unwrap();
        assert_eq!((s, r), (0.7, 0.7));
    }

    #[test]
    fn inverse_transform_round_trip() {
        for model in [
            GasModel::polytropic(1.0, 1.4, 1.0),
            GasModel::polytropic(0.7, 3.0, 0.5),
            GasModel::polytropic(1.0, 1.0, 1.0),
            GasModel::chaplygin(1.0, 2.0, 1.0),
            GasModel::custom(
                expr::parse("1 + rho^2", &["rho"], &HashMap::new()).unwrap(),
                1.0,
            ),
        ] {
            for (u, rho) in [(0.0, 1.3), (-0.5, 0.7), (1.2, 2.0)] {
                let (s, r) = model.riemann_from_physical(u, rho).unwrap();
                let (u2, rho2) = model.physical_from_riemann(s, r).unwrap();
                assert!((u - u2).abs() < 1e-10, "{:?}", model.kind);
                assert!(
                    (rho - rho2).abs() < 1e-10,
                    "{:?} rho {rho} vs {rho2}",
                    model.kind
                );
            }
        }
    }

    #[test]
    fn gamma3_system_is_diagonal_transport() {
        // gamma = 3: phi = -s, psi = -r
        let model = GasModel::polytropic(1.0, 3.0, 1.0);
        let (phi, psi) = model.speeds_at(0.4, 1.9).unwrap();
        assert!((phi + 0.4).abs() < 1e-12);
        assert!((psi + 1.9).abs() < 1e-12);
    }

    #[test]
    fn speed_difference_is_sound_speed() {
        // phi - psi = 2 rho alpha > 0 for rho > 0
        let model = GasModel::polytropic(1.0, 1.4, 1.0);
        for (s, r) in [(0.0, 1.0), (-0.8, 0.4), (0.3, 2.5)] {
            let rho = model.rho_from_invariants(s, r).unwrap();
            let (phi, psi) = model.speeds_at(s, r).unwrap();
            let expect = 2.0 * rho * model.alpha(rho).unwrap();
            assert!((phi - psi - expect).abs() < 1e-10 * expect.max(1.0));
        }
        let sys = model.riemann_system();
        let rep = validate_hyperbolic(&sys, &[0.0, 1.0]).unwrap();
        assert!(rep.pass);
    }

    #[test]
    fn speed_gradients_match_finite_differences() {
        let model = GasModel::polytropic(1.0, 1.4, 1.0);
        let sys = model.riemann_system();
        for (s, r) in [(0.0, 1.0), (-0.6, 0.9)] {
            for i in 0..2 {
                for slot in 0..2 {
                    let exact = sys.speed(i).partial(slot, &[s, r]).unwrap();
                    let fd = sys.speed(i).partial_fd(slot, &[s, r]).unwrap();
                    assert!(
                        (exact - fd).abs() < 1e-8 * exact.abs().max(1.0),
                        "speed {i} slot {slot}: {exact} vs {fd}"
                    );
                }
            }
        }
    }

    #[test]
    fn recursion_of_unit_matches_closed_form() {
        let model = GasModel::polytropic(1.0, 1.4, 1.0);
        let mut rng = StdRng::seed_from_u64(7);
        for _ in 0..50 {
            let s = rng.gen_range(-0.5..0.5);
            let r = s + rng.gen_range(0.4..2.0);
            let j = jet(s, r, 2, &mut rng);
            let (f, g) = recursion_apply(&model, &JetCharacteristic::unit(), &j).unwrap();
            let (ef, eg) = f2g2(&model, &j);
            assert!((f - ef).abs() < 1e-10 * ef.abs().max(1.0), "{f} vs {ef}");
            assert!((g - eg).abs() < 1e-10 * eg.abs().max(1.0), "{g} vs {eg}");
        }
    }

    #[test]
    fn gamma3_drops_inhomogeneous_term() {
        // alpha' = 0: R(1,1) = (-s_xx/s_x^2, -r_xx/r_x^2)
        let model = GasModel::polytropic(1.0, 3.0, 1.0);
        let mut rng = StdRng::seed_from_u64(8);
        let j = jet(0.0, 1.0, 2, &mut rng);
        let (f, g) = recursion_apply(&model, &JetCharacteristic::unit(), &j).unwrap();
        let sxx = j.u_xx.as_ref().unwrap()[0];
        let rxx = j.u_xx.as_ref().unwrap()[1];
        assert!((f + sxx / (j.u_x[0] * j.u_x[0])).abs() < 1e-12);
        assert!((g + rxx / (j.u_x[1] * j.u_x[1])).abs() < 1e-12);
    }

    #[test]
    fn gamma3_second_term_vanishes_for_equal_slopes() {
        // s_x = r_x kills the (s_x - r_x)^2 part regardless of alpha
        let model = GasModel::polytropic(1.0, 1.4, 1.0);
        let j = JetPoint {
            x: 0.0,
            t: 0.0,
            u: vec![0.1, 1.2],
            u_x: vec![0.8, 0.8],
            u_xx: Some(vec![0.3, -0.5]),
            u_xxx: None,
        };
        let (f, g) = recursion_apply(&model, &JetCharacteristic::unit(), &j).unwrap();
        assert!((f + 0.3 / 0.64).abs() < 1e-12);
        assert!((g - 0.5 / 0.64).abs() < 1e-12);
    }

    #[test]
    fn chain_needs_enough_depth() {
        let model = GasModel::polytropic(1.0, 1.4, 1.0);
        let mut rng = StdRng::seed_from_u64(9);
        let j = jet(0.0, 1.0, 2, &mut rng);
        assert!(characteristic_chain(&model, 3, &j).is_err());
    }

    #[test]
    fn reduced_recursion_fixed_points() {
        let model = GasModel::polytropic(1.0, 1.4, 1.0);
        let vars = ["u1", "u2"];
        let one = ScalarField::constant(1.0, &vars);
        let (a1, c1) = recursion_ac(&model, &one, &one, 0.2, 1.1).unwrap();
        assert_eq!((a1, c1), (0.0, 0.0));

        let (phi, psi) = speed_coefficients(&model);
        let mut rng = StdRng::seed_from_u64(10);
        for _ in 0..50 {
            let s = rng.gen_range(-0.5..0.5);
            let r = s + rng.gen_range(0.4..2.0);
            let (a1, c1) = recursion_ac(&model, &phi, &psi, s, r).unwrap();
            assert!((a1 + 1.0).abs() < 1e-10, "a1 = {a1}");
            assert!((c1 + 1.0).abs() < 1e-10, "c1 = {c1}");
        }
    }

    #[test]
    fn kernel_of_r_annihilated() {
        let model = GasModel::polytropic(1.0, 1.4, 1.0);
        let kern = kernel_basis_1(&model, &[0.7, -1.3]);
        let mut rng = StdRng::seed_from_u64(11);
        for _ in 0..20 {
            let s = rng.gen_range(-0.5..0.5);
            let r = s + rng.gen_range(0.4..2.0);
            let j = jet(s, r, 2, &mut rng);
            let (f, g) = recursion_apply(&model, &kern, &j).unwrap();
            assert!(f.abs() < 1e-8, "f = {f}");
            assert!(g.abs() < 1e-8, "g = {g}");
        }
    }

    #[test]
    fn kernel_of_r2_annihilated_by_two_applications() {
        let model = GasModel::polytropic(1.0, 1.4, 1.0);
        let kern = kernel_basis_2(&model, &[0.9, -0.4, 0.3, 1.1]).unwrap();
        let once = recursion_symbolic(&model, &kern);
        let twice = recursion_symbolic(&model, &once);
        let mut rng = StdRng::seed_from_u64(12);
        for _ in 0..20 {
            let s = rng.gen_range(-0.5..0.5);
            let r = s + rng.gen_range(0.4..2.0);
            let j = jet(s, r, 3, &mut rng);
            let f = eval_jet(&model, &twice.f, &j).unwrap();
            let g = eval_jet(&model, &twice.g, &j).unwrap();
            assert!(f.abs() < 1e-7, "f = {f}");
            assert!(g.abs() < 1e-7, "g = {g}");
        }
    }

    #[test]
    fn gamma3_kernel_with_constant_alpha() {
        let model = GasModel::polytropic(1.0, 3.0, 1.0);
        let kern = kernel_basis_1(&model, &[1.0, 0.5]);
        let mut rng = StdRng::seed_from_u64(13);
        let j = jet(-0.2, 0.9, 2, &mut rng);
        let (f, g) = recursion_apply(&model, &kern, &j).unwrap();
        assert!(f.abs() < 1e-12 && g.abs() < 1e-12);
    }

    #[test]
    fn k_chain_level_one_is_u_rho() {
        // gamma = 3, rho0 = 0: K(1,0) = (u, rho), K(0,1) = (3 a^2 rho, u)
        let model = GasModel::polytropic(1.0, 3.0, 0.0);
        let terms = k_chain_terms(&model, 2).unwrap();
        let at = |e: &Expr, u: f64, rho: f64| {
            e.eval_with(&mut |n| match n {
                "u" => Some(u),
                "rho" => Some(rho),
                _ => None,
            })
            .unwrap()
        };
        let b1a = &terms[1][0];
        assert_eq!(at(&b1a[0], 0.7, 1.2), 0.7);
        assert_eq!(at(&b1a[1], 0.7, 1.2), 1.2);
        let b1b = &terms[1][1];
        assert!((at(&b1b[0], 0.7, 1.2) - 3.0 * 1.2).abs() < 1e-14);
        assert_eq!(at(&b1b[1], 0.7, 1.2), 0.7);
    }

    #[test]
    fn k_chain_matches_nested_quadrature() {
        let model = GasModel::polytropic(1.0, 3.0, 0.0);
        let terms = k_chain_terms(&model, 3).unwrap();
        // level 2 basis vector K^2 (1,0) = K(u, rho)
        let w: (PhysicalField, PhysicalField) = (Arc::new(|u, _| u), Arc::new(|_, rho| rho));
        for (u, rho) in [(0.5, 1.0), (1.1, 0.4), (-0.3, 2.0)] {
            let (n1, n2) = k_apply_numeric(&model, &w, u, rho).unwrap();
            let mut lookup = |n: &str| match n {
                "u" => Some(u),
                "rho" => Some(rho),
                _ => None,
            };
            let s1 = terms[2][0][0].eval_with(&mut lookup).unwrap();
            let s2 = terms[2][0][1].eval_with(&mut lookup).unwrap();
            assert!((n1 - s1).abs() < 1e-9, "{n1} vs {s1}");
            assert!((n2 - s2).abs() < 1e-9, "{n2} vs {s2}");
        }
    }

    #[test]
    fn series_level_one_is_lagrangian_trivial_solution() {
        // N=1: (c1, c2) = (x - u t, -rho t)
        let model = GasModel::polytropic(1.0, 1.4, 1.0);
        let f = gas_series_residual_exprs(&model, 1, &[2.0, -3.0]).unwrap();
        // u = (x - c1)/t, rho = -c2/t solves F = 0 (t < 0, c2 < 0 keeps rho > 0)
        let (x, t) = (1.0, -2.0);
        let u = (x - 2.0) / t;
        let rho = 3.0 / -t;
        let mut lookup = |n: &str| match n {
            "u" => Some(u),
            "rho" => Some(rho),
            "x" => Some(x),
            "t" => Some(t),
            _ => None,
        };
        assert!(f[0].eval_with(&mut lookup).unwrap().abs() < 1e-12);
        assert!(f[1].eval_with(&mut lookup).unwrap().abs() < 1e-12);
    }
}
