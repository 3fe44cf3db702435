//! Core types: scalar coefficient fields with derivative access, diagonal
//! quasi-linear systems, jet points and hyperbolicity validation.

use std::collections::HashMap;
use std::fmt;
use std::sync::Arc;

use thiserror::Error;

use crate::expr::{self, EvalError, Expr};
use crate::numeric::{self, NumericError};

#[derive(Debug, Error)]
pub enum FieldError {
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Numeric(#[from] NumericError),
    #[error("field expects {expected} values, got {got}")]
    Arity { expected: usize, got: usize },
    #[error("{0}")]
    Other(String),
}

/// How partial derivatives of a field are produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DerivMode {
    Symbolic,
    FiniteDifference,
}

/// Finite-difference settings used when no symbolic or user gradient exists.
/// 4th-order central stencil, step `step_scale * max(1, |value|)` per slot.
#[derive(Debug, Clone, Copy)]
pub struct FdOptions {
    pub step_scale: f64,
}

impl Default for FdOptions {
    fn default() -> Self {
        // second derivatives retain ~6 significant digits at this setting
        FdOptions { step_scale: 1e-4 }
    }
}

type EvalFn = Arc<dyn Fn(&[f64]) -> Result<f64, FieldError> + Send + Sync>;
type GradFn = Arc<dyn Fn(&[f64], usize) -> Result<f64, FieldError> + Send + Sync>;

#[derive(Clone)]
enum Backend {
    Symbolic {
        expr: Arc<Expr>,
        /// first partials per variable slot, built eagerly
        grads: Arc<Vec<Expr>>,
    },
    Callback {
        f: EvalFn,
        grad: Option<GradFn>,
    },
}

/// A scalar function of the system variables: either an expression tree or an
/// opaque callback with an optional user-supplied gradient.
#[derive(Clone)]
pub struct ScalarField {
    vars: Arc<Vec<String>>,
    backend: Backend,
    fd: FdOptions,
}

impl fmt::Debug for ScalarField {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.backend {
            Backend::Symbolic { expr, .. } => write!(f, "ScalarField[{expr}]"),
            Backend::Callback { grad, .. } => write!(
                f,
                "ScalarField[callback{}]",
                if grad.is_some() { "+grad" } else { "" }
            ),
        }
    }
}

impl ScalarField {
    pub fn from_expr(expr: Expr, vars: &[&str]) -> Self {
        let grads = vars
            .iter()
            .map(|v| expr.differentiate(v))
            .collect::<Vec<_>>();
        ScalarField {
            vars: Arc::new(vars.iter().map(|s| s.to_string()).collect()),
            backend: Backend::Symbolic {
                expr: Arc::new(expr),
                grads: Arc::new(grads),
            },
            fd: FdOptions::default(),
        }
    }

    pub fn parse(
        source: &str,
        vars: &[&str],
        params: &HashMap<String, f64>,
    ) -> Result<Self, expr::ParseError> {
        Ok(Self::from_expr(expr::parse(source, vars, params)?, vars))
    }

    pub fn constant(value: f64, vars: &[&str]) -> Self {
        Self::from_expr(Expr::Const(value), vars)
    }

    pub fn from_fn<F>(vars: &[&str], f: F) -> Self
    where
        F: Fn(&[f64]) -> Result<f64, FieldError> + Send + Sync + 'static,
    {
        ScalarField {
            vars: Arc::new(vars.iter().map(|s| s.to_string()).collect()),
            backend: Backend::Callback {
                f: Arc::new(f),
                grad: None,
            },
            fd: FdOptions::default(),
        }
    }

    pub fn from_fn_with_grad<F, G>(vars: &[&str], f: F, grad: G) -> Self
    where
        F: Fn(&[f64]) -> Result<f64, FieldError> + Send + Sync + 'static,
        G: Fn(&[f64], usize) -> Result<f64, FieldError> + Send + Sync + 'static,
    {
        ScalarField {
            vars: Arc::new(vars.iter().map(|s| s.to_string()).collect()),
            backend: Backend::Callback {
                f: Arc::new(f),
                grad: Some(Arc::new(grad)),
            },
            fd: FdOptions::default(),
        }
    }

    pub fn with_fd_options(mut self, fd: FdOptions) -> Self {
        self.fd = fd;
        self
    }

    pub fn vars(&self) -> &[String] {
        &self.vars
    }

    pub fn var_index(&self, name: &str) -> Option<usize> {
        self.vars.iter().position(|v| v == name)
    }

    pub fn mode(&self) -> DerivMode {
        match &self.backend {
            Backend::Symbolic { .. } => DerivMode::Symbolic,
            Backend::Callback { .. } => DerivMode::FiniteDifference,
        }
    }

    pub fn as_expr(&self) -> Option<&Expr> {
        match &self.backend {
            Backend::Symbolic { expr, .. } => Some(expr),
            Backend::Callback { .. } => None,
        }
    }

    pub fn eval(&self, values: &[f64]) -> Result<f64, FieldError> {
        if values.len() != self.vars.len() {
            return Err(FieldError::Arity {
                expected: self.vars.len(),
                got: values.len(),
            });
        }
        match &self.backend {
            Backend::Symbolic { expr, .. } => {
                let v = expr.eval_with(&mut |name| {
                    self.vars
                        .iter()
                        .position(|x| x == name)
                        .map(|i| values[i])
                })?;
                Ok(v)
            }
            Backend::Callback { f, .. } => f(values),
        }
    }

    /// Partial derivative with respect to the variable in `slot`.
    /// Symbolic mode differentiates exactly; callback mode uses the supplied
    /// gradient if any, otherwise a 4th-order central difference.
    pub fn partial(&self, slot: usize, values: &[f64]) -> Result<f64, FieldError> {
        match &self.backend {
            Backend::Symbolic { grads, .. } => {
                let v = grads[slot].eval_with(&mut |name| {
                    self.vars
                        .iter()
                        .position(|x| x == name)
                        .map(|i| values[i])
                })?;
                Ok(v)
            }
            Backend::Callback { grad: Some(g), .. } => g(values, slot),
            Backend::Callback { .. } => self.partial_fd(slot, values),
        }
    }

    pub fn partial_by_name(&self, name: &str, values: &[f64]) -> Result<f64, FieldError> {
        let slot = self
            .var_index(name)
            .ok_or_else(|| FieldError::Other(format!("unknown variable `{name}`")))?;
        self.partial(slot, values)
    }

    /// Finite-difference partial regardless of backend (used for mode
    /// cross-checks).
    pub fn partial_fd(&self, slot: usize, values: &[f64]) -> Result<f64, FieldError> {
        let h = self.fd.step_scale * values[slot].abs().max(1.0);
        let mut point = values.to_vec();
        let f = |x: f64| -> Result<f64, NumericError> {
            point_eval(self, &mut point.clone(), slot, x)
        };
        numeric::central_diff_4(&f, values[slot], h).map_err(FieldError::from)
    }

    /// The derivative as a new field. Symbolic stays symbolic; a callback
    /// with user gradient becomes a callback (further derivatives fall back
    /// to finite differences).
    pub fn derivative(&self, slot: usize) -> ScalarField {
        let vars: Vec<&str> = self.vars.iter().map(|s| s.as_str()).collect();
        match &self.backend {
            Backend::Symbolic { expr, .. } => {
                ScalarField::from_expr(expr.differentiate(&self.vars[slot]), &vars)
            }
            Backend::Callback { grad: Some(g), .. } => {
                let g = g.clone();
                ScalarField::from_fn(&vars, move |values| g(values, slot))
            }
            Backend::Callback { .. } => {
                let base = self.clone();
                ScalarField::from_fn(&vars, move |values| base.partial_fd(slot, values))
            }
        }
    }
}

fn point_eval(
    field: &ScalarField,
    scratch: &mut [f64],
    slot: usize,
    x: f64,
) -> Result<f64, NumericError> {
    scratch[slot] = x;
    field
        .eval(scratch)
        .map_err(|e| NumericError::Integrand(e.to_string()))
}

/// Free-function form used throughout the checks: the partial of `f` at a
/// point, by name.
pub fn partial(f: &ScalarField, var: &str, values: &[f64]) -> Result<f64, FieldError> {
    f.partial_by_name(var, values)
}

// ---------------------------------------------------------------------------
// diagonal systems
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dependence {
    Autonomous,
    ExplicitT,
    ExplicitX,
}

/// n-component diagonal quasi-linear system u^i_t = v_i u^i_x.
///
/// Field variables are `u1..un` plus `t` or `x` for explicitly dependent
/// systems, in that order.
#[derive(Debug, Clone)]
pub struct DiagonalSystem {
    n: usize,
    speeds: Vec<ScalarField>,
    dependence: Dependence,
    labels: Vec<String>,
}

#[derive(Debug, Error)]
pub enum SystemError {
    #[error("need at least 2 components, got {0}")]
    TooFewComponents(usize),
    #[error("expected {expected} speed fields, got {got}")]
    SpeedCount { expected: usize, got: usize },
    #[error(transparent)]
    Field(#[from] FieldError),
    #[error("hyperbolicity failure: |v_{i} - v_{j}| = {gap:.3e} at the queried point")]
    Hyperbolicity { i: usize, j: usize, gap: f64 },
}

pub fn component_vars(n: usize) -> Vec<String> {
    (1..=n).map(|i| format!("u{i}")).collect()
}

pub fn system_vars(n: usize, dependence: Dependence) -> Vec<String> {
    let mut vars = component_vars(n);
    match dependence {
        Dependence::Autonomous => {}
        Dependence::ExplicitT => vars.push("t".to_string()),
        Dependence::ExplicitX => vars.push("x".to_string()),
    }
    vars
}

impl DiagonalSystem {
    pub fn new(
        speeds: Vec<ScalarField>,
        dependence: Dependence,
    ) -> Result<Self, SystemError> {
        let n = speeds.len();
        if n < 2 {
            return Err(SystemError::TooFewComponents(n));
        }
        let labels = component_vars(n);
        Ok(DiagonalSystem {
            n,
            speeds,
            dependence,
            labels,
        })
    }

    /// Build from expression strings over u1..un (plus t or x).
    pub fn from_exprs(
        sources: &[&str],
        dependence: Dependence,
        params: &HashMap<String, f64>,
    ) -> Result<Self, SystemError> {
        let n = sources.len();
        if n < 2 {
            return Err(SystemError::TooFewComponents(n));
        }
        let vars = system_vars(n, dependence);
        let var_refs: Vec<&str> = vars.iter().map(|s| s.as_str()).collect();
        let mut speeds = Vec::with_capacity(n);
        for src in sources {
            let field = ScalarField::parse(src, &var_refs, params)
                .map_err(|e| SystemError::Field(FieldError::Other(e.to_string())))?;
            speeds.push(field);
        }
        Self::new(speeds, dependence)
    }

    pub fn with_labels(mut self, labels: &[&str]) -> Self {
        self.labels = labels.iter().map(|s| s.to_string()).collect();
        self
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dependence(&self) -> Dependence {
        self.dependence
    }

    pub fn speeds(&self) -> &[ScalarField] {
        &self.speeds
    }

    pub fn speed(&self, i: usize) -> &ScalarField {
        &self.speeds[i]
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn vars(&self) -> Vec<String> {
        system_vars(self.n, self.dependence)
    }

    /// Assemble the evaluation point for speed fields: components plus the
    /// explicit t or x slot when present.
    pub fn pack_point(&self, u: &[f64], t: f64, x: f64) -> Vec<f64> {
        let mut p = u.to_vec();
        match self.dependence {
            Dependence::Autonomous => {}
            Dependence::ExplicitT => p.push(t),
            Dependence::ExplicitX => p.push(x),
        }
        p
    }

    pub fn speed_value(&self, i: usize, packed: &[f64]) -> Result<f64, SystemError> {
        Ok(self.speeds[i].eval(packed)?)
    }

    /// v_{i,u^j} at a packed point.
    pub fn speed_partial(&self, i: usize, j: usize, packed: &[f64]) -> Result<f64, SystemError> {
        Ok(self.speeds[i].partial(j, packed)?)
    }

    pub fn require_strict_hyperbolicity(&self, packed: &[f64]) -> Result<Vec<f64>, SystemError> {
        let v: Vec<f64> = self
            .speeds
            .iter()
            .map(|s| s.eval(packed))
            .collect::<Result<_, _>>()?;
        for i in 0..self.n {
            for j in i + 1..self.n {
                let gap = (v[i] - v[j]).abs();
                if gap <= 1e-10 {
                    return Err(SystemError::Hyperbolicity { i: i + 1, j: j + 1, gap });
                }
            }
        }
        Ok(v)
    }
}

/// Hyperbolicity report: min over i<j of |v_i - v_j| and a pass flag.
#[derive(Debug, Clone)]
pub struct HyperbolicityReport {
    pub min_gap: f64,
    pub worst_pair: (usize, usize),
    pub pass: bool,
    pub speeds: Vec<f64>,
}

pub fn validate_hyperbolic(
    sys: &DiagonalSystem,
    packed: &[f64],
) -> Result<HyperbolicityReport, SystemError> {
    let v: Vec<f64> = sys
        .speeds
        .iter()
        .map(|s| s.eval(packed))
        .collect::<Result<_, _>>()?;
    let mut min_gap = f64::INFINITY;
    let mut worst = (0, 1);
    for i in 0..sys.n {
        for j in i + 1..sys.n {
            let gap = (v[i] - v[j]).abs();
            if gap < min_gap {
                min_gap = gap;
                worst = (i + 1, j + 1);
            }
        }
    }
    Ok(HyperbolicityReport {
        min_gap,
        worst_pair: worst,
        pass: min_gap > 1e-10,
        speeds: v,
    })
}

// ---------------------------------------------------------------------------
// jets and coefficient vectors
// ---------------------------------------------------------------------------

/// Values of (x, t, u, u_x, u_xx, u_xxx) at a single point. Higher entries
/// are optional; presence is tracked so operators can fail fast on
/// insufficient depth.
#[derive(Debug, Clone)]
pub struct JetPoint {
    pub x: f64,
    pub t: f64,
    pub u: Vec<f64>,
    pub u_x: Vec<f64>,
    pub u_xx: Option<Vec<f64>>,
    pub u_xxx: Option<Vec<f64>>,
}

#[derive(Debug, Error)]
pub enum JetError {
    #[error("jet populated to depth {available}, operation needs depth {needed}")]
    InsufficientDepth { available: usize, needed: usize },
    #[error("component {component}: u_x = 0 where an operator divides by it")]
    ZeroSlope { component: usize },
}

impl JetPoint {
    pub fn first_order(x: f64, t: f64, u: Vec<f64>, u_x: Vec<f64>) -> Self {
        JetPoint {
            x,
            t,
            u,
            u_x,
            u_xx: None,
            u_xxx: None,
        }
    }

    pub fn depth(&self) -> usize {
        if self.u_xxx.is_some() {
            3
        } else if self.u_xx.is_some() {
            2
        } else {
            1
        }
    }

    pub fn require_depth(&self, needed: usize) -> Result<(), JetError> {
        let available = self.depth();
        if available < needed {
            return Err(JetError::InsufficientDepth { available, needed });
        }
        Ok(())
    }

    pub fn require_nonzero_slopes(&self) -> Result<(), JetError> {
        for (i, ux) in self.u_x.iter().enumerate() {
            if *ux == 0.0 {
                return Err(JetError::ZeroSlope { component: i + 1 });
            }
        }
        Ok(())
    }

    /// u^{i} derivative of the given order (0 = value).
    pub fn deriv(&self, i: usize, order: usize) -> Option<f64> {
        match order {
            0 => self.u.get(i).copied(),
            1 => self.u_x.get(i).copied(),
            2 => self.u_xx.as_ref().and_then(|v| v.get(i)).copied(),
            3 => self.u_xxx.as_ref().and_then(|v| v.get(i)).copied(),
            _ => None,
        }
    }
}

/// The n functions w_i(u) parametrizing a hydrodynamic symmetry. For n = 2
/// the components are conventionally called (a, c).
#[derive(Debug, Clone)]
pub struct CoefficientVector {
    pub components: Vec<ScalarField>,
}

impl CoefficientVector {
    pub fn new(components: Vec<ScalarField>) -> Self {
        CoefficientVector { components }
    }

    /// w_i == value for every component, over u1..un.
    pub fn constant(n: usize, value: f64) -> Self {
        let vars = component_vars(n);
        let var_refs: Vec<&str> = vars.iter().map(|s| s.as_str()).collect();
        CoefficientVector {
            components: (0..n)
                .map(|_| ScalarField::constant(value, &var_refs))
                .collect(),
        }
    }

    pub fn n(&self) -> usize {
        self.components.len()
    }

    pub fn eval(&self, u: &[f64]) -> Result<Vec<f64>, FieldError> {
        self.components.iter().map(|c| c.eval(u)).collect()
    }
}

// ---------------------------------------------------------------------------
// named builtin systems
// ---------------------------------------------------------------------------

/// v_i = sum_j u^j - u^i. Strictly hyperbolic wherever components are
/// pairwise distinct; Tsarev conditions hold identically.
pub fn epsilon_system(n: usize) -> DiagonalSystem {
    let vars = component_vars(n);
    let var_refs: Vec<&str> = vars.iter().map(|s| s.as_str()).collect();
    let speeds = (0..n)
        .map(|i| {
            let mut e = expr::neg(expr::var(&vars[i]));
            for v in &vars {
                e = expr::add(e, expr::var(v));
            }
            ScalarField::from_expr(e, &var_refs)
        })
        .collect();
    DiagonalSystem::new(speeds, Dependence::Autonomous).expect("n >= 2")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::expr::var;

    fn field(src: &str, vars: &[&str]) -> ScalarField {
        ScalarField::parse(src, vars, &HashMap::new()).unwrap()
    }

    #[test]
    fn partial_product() {
        let f = field("u1*u2", &["u1", "u2"]);
        let v = partial(&f, "u1", &[2.0, 5.0]).unwrap();
        assert_eq!(v, 5.0);
    }

    #[test]
    fn fd_matches_symbolic_on_exp() {
        let f = field("exp(u1)", &["u1"]);
        let sym = f.partial(0, &[1.0]).unwrap();
        let fd = f.partial_fd(0, &[1.0]).unwrap();
        assert!((sym - fd).abs() < 1e-8, "sym={sym} fd={fd}");
    }

    #[test]
    fn callback_gradient_used() {
        let f = ScalarField::from_fn_with_grad(
            &["u1", "u2"],
            |v| Ok(v[0] * v[0] * v[1]),
            |v, slot| Ok(if slot == 0 { 2.0 * v[0] * v[1] } else { v[0] * v[0] }),
        );
        assert_eq!(f.partial(0, &[3.0, 2.0]).unwrap(), 12.0);
        assert_eq!(f.partial(1, &[3.0, 2.0]).unwrap(), 9.0);
        assert_eq!(f.mode(), DerivMode::FiniteDifference);
    }

    #[test]
    fn epsilon_system_gaps() {
        let sys = epsilon_system(3);
        let report = validate_hyperbolic(&sys, &[1.0, 2.0, 4.0]).unwrap();
        assert_eq!(report.speeds, vec![6.0, 5.0, 3.0]);
        assert!((report.min_gap - 1.0).abs() < 1e-15);
        assert!(report.pass);
    }

    #[test]
    fn identical_speeds_fail() {
        let vars = ["u1", "u2"];
        let speeds = vec![
            ScalarField::from_expr(var("u1"), &vars),
            ScalarField::from_expr(var("u1"), &vars),
        ];
        let sys = DiagonalSystem::new(speeds, Dependence::Autonomous).unwrap();
        let report = validate_hyperbolic(&sys, &[1.0, 2.0]).unwrap();
        assert!(!report.pass);
        assert_eq!(report.min_gap, 0.0);
    }

    #[test]
    fn fd_and_symbolic_modes_agree_on_smooth_fields() {
        let cases = ["u1^2*u2 - u2^3", "exp(u1 - u2)", "sqrt(u1 + 3)*u2"];
        for src in cases {
            let sym = field(src, &["u1", "u2"]);
            let cb_src = sym.clone();
            let fd = ScalarField::from_fn(&["u1", "u2"], move |v| cb_src.eval(v));
            for point in [[1.2, 0.7], [0.3, 1.9], [2.5, 2.5]] {
                for slot in 0..2 {
                    let a = sym.partial(slot, &point).unwrap();
                    let b = fd.partial(slot, &point).unwrap();
                    assert!(
                        (a - b).abs() <= 1e-6 * a.abs().max(1.0),
                        "{src} slot {slot}: {a} vs {b}"
                    );
                }
            }
        }
    }

    #[test]
    fn jet_depth_tracking() {
        let jet = JetPoint::first_order(0.0, 0.0, vec![1.0, 2.0], vec![0.1, -0.2]);
        assert_eq!(jet.depth(), 1);
        assert!(jet.require_depth(2).is_err());
        let jet = JetPoint {
            u_xx: Some(vec![0.0, 0.0]),
            ..jet
        };
        assert_eq!(jet.depth(), 2);
    }
}
