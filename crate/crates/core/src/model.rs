//! Strict-feedback plants, their simulation-only ground truth, and validated
//! controller gains.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::controller::AlphaPartials;
use crate::diff::{reals, values, Num};
use crate::error::{Error, Result};

/// Regressor row φ_i: takes the first `i` states, returns a q-vector.
pub type PhiMap = Arc<dyn Fn(&[Num]) -> Vec<Num> + Send + Sync>;

/// Closed-form factor W_i (i rows, q columns) with ω_i = W_iᵀ z̄_i.
pub type WMap = Arc<dyn Fn(&WContext) -> Vec<Vec<Num>> + Send + Sync>;

/// Closed-form Ω̄ without the soft-sign slot.
pub type OmegaBarMap = Arc<dyn Fn(&OmegaContext) -> Vec<Num> + Send + Sync>;

pub type TruthMap<T> = Arc<dyn Fn(f64, &[f64]) -> T + Send + Sync>;

pub struct WContext<'a> {
    /// Step index, 1-based.
    pub i: usize,
    pub x: &'a [Num],
    pub z: &'a [Num],
    pub theta_hat: &'a [Num],
    pub delta_hat: &'a Num,
    /// ∂α_{i−1}/∂x_j for j < i; empty at step 1.
    pub dalpha_dx: &'a [Num],
}

pub struct OmegaContext<'a> {
    pub x: &'a [Num],
    pub z: &'a [Num],
    pub theta_hat: &'a [Num],
    pub delta_hat: &'a Num,
    /// Entry `j − 1` holds the partials of α_j.
    pub partials: &'a [AlphaPartials],
    pub w: &'a [Vec<Vec<Num>>],
    pub gains: &'a GainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Positive,
    Negative,
}

impl Direction {
    pub fn sign(self) -> f64 {
        match self {
            Direction::Positive => 1.0,
            Direction::Negative => -1.0,
        }
    }

    pub fn from_sign(s: f64) -> Result<Self> {
        if s == 1.0 {
            Ok(Direction::Positive)
        } else if s == -1.0 {
            Ok(Direction::Negative)
        } else {
            Err(Error::config(format!(
                "control direction must be +1 or -1, got {s}"
            )))
        }
    }
}

#[derive(Clone)]
pub struct SystemSpec {
    pub name: String,
    pub n: usize,
    pub q: usize,
    pub phi: Vec<PhiMap>,
    pub closed_form_w: Option<Vec<WMap>>,
    pub closed_form_omega_bar: Option<OmegaBarMap>,
    pub control_direction: Direction,
    pub b_bar: f64,
}

impl fmt::Debug for SystemSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemSpec")
            .field("name", &self.name)
            .field("n", &self.n)
            .field("q", &self.q)
            .field("closed_form_w", &self.closed_form_w.is_some())
            .field(
                "closed_form_omega_bar",
                &self.closed_form_omega_bar.is_some(),
            )
            .field("control_direction", &self.control_direction)
            .field("b_bar", &self.b_bar)
            .finish()
    }
}

impl SystemSpec {
    /// Checks the structural invariants, including φ_i(0) = 0.
    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(Error::config(format!(
                "system order must be at least 2, got {}",
                self.n
            )));
        }
        if self.q < 1 {
            return Err(Error::config("parameter dimension must be at least 1"));
        }
        if self.phi.len() != self.n {
            return Err(Error::config(format!(
                "expected {} regressor rows, got {}",
                self.n,
                self.phi.len()
            )));
        }
        if !(self.b_bar > 0.0 && self.b_bar.is_finite()) {
            return Err(Error::config(format!(
                "b_bar must be positive, got {}",
                self.b_bar
            )));
        }
        if let Some(w) = &self.closed_form_w {
            if w.len() != self.n {
                return Err(Error::config(
                    "closed-form W list must have one entry per step",
                ));
            }
        }
        for i in 1..=self.n {
            let at_origin = eval_phi(self, i, &vec![0.0; i])?;
            if at_origin.len() != self.q {
                return Err(Error::config(format!(
                    "phi_{i} must return {} entries",
                    self.q
                )));
            }
            if let Some(v) = at_origin.iter().find(|v| v.abs() > 1e-12) {
                return Err(Error::config(format!(
                    "phi_{i}(0) = {v}, must vanish at the origin"
                )));
            }
        }
        Ok(())
    }

    /// Same plant with every closed form removed, so the generic factorization
    /// paths are exercised.
    pub fn without_closed_forms(&self) -> SystemSpec {
        SystemSpec {
            closed_form_w: None,
            closed_form_omega_bar: None,
            ..self.clone()
        }
    }
}

/// Plant-side ground truth. Never visible to the controller.
#[derive(Clone)]
pub struct TruthSignals {
    pub theta: TruthMap<Vec<f64>>,
    pub b: TruthMap<f64>,
    /// Arguments of the sign functions inside θ and b; a sign change between
    /// samples marks a discontinuity.
    pub switching: Option<TruthMap<Vec<f64>>>,
}

impl fmt::Debug for TruthSignals {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("TruthSignals { .. }")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GainConfig {
    pub k: Vec<f64>,
    /// Row-major q×q.
    #[serde(rename = "Gamma")]
    pub gamma: Vec<f64>,
    pub gamma_rho: f64,
    pub gamma_delta: f64,
    pub eps_omega: f64,
    pub xi: f64,
    pub gamma_u: f64,
    pub theta_hat0: Vec<f64>,
    pub rho_hat0: f64,
    pub delta_hat0: f64,
}

impl GainConfig {
    pub fn validate(&self, spec: &SystemSpec) -> Result<()> {
        let (n, q) = (spec.n, spec.q);
        if self.k.len() != n {
            return Err(Error::config(format!(
                "k needs {n} entries, got {}",
                self.k.len()
            )));
        }
        for (i, k) in self.k.iter().enumerate() {
            if !(*k > 0.0 && k.is_finite()) {
                return Err(Error::config(format!(
                    "k{} must be positive, got {k}",
                    i + 1
                )));
            }
        }
        if self.gamma.len() != q * q {
            return Err(Error::config(format!(
                "Gamma needs {} entries, got {}",
                q * q,
                self.gamma.len()
            )));
        }
        cholesky(&self.gamma, q)
            .ok_or_else(|| Error::config("Gamma must be symmetric positive definite"))?;
        for (name, v) in [
            ("gamma_rho", self.gamma_rho),
            ("gamma_delta", self.gamma_delta),
            ("eps_omega", self.eps_omega),
            ("xi", self.xi),
            ("gamma_u", self.gamma_u),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.theta_hat0.len() != q || self.theta_hat0.iter().any(|v| !v.is_finite()) {
            return Err(Error::config(format!(
                "theta_hat0 needs {q} finite entries"
            )));
        }
        if !(self.delta_hat0 >= 0.0 && self.delta_hat0.is_finite()) {
            return Err(Error::config(format!(
                "delta_hat0 must be nonnegative, got {}",
                self.delta_hat0
            )));
        }
        let ok = match spec.control_direction {
            Direction::Positive => self.rho_hat0 >= 0.0,
            Direction::Negative => self.rho_hat0 < 0.0,
        };
        if !ok || !self.rho_hat0.is_finite() {
            return Err(Error::config(format!(
                "rho_hat0 = {} has the wrong sign for control direction {:?}",
                self.rho_hat0, spec.control_direction
            )));
        }
        Ok(())
    }

    /// Γ as an exact matrix of reals.
    pub fn gamma_rows(&self, q: usize) -> Vec<Vec<f64>> {
        self.gamma.chunks(q).map(<[f64]>::to_vec).collect()
    }

    pub fn k_min(&self) -> f64 {
        self.k.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

/// Lower Cholesky factor of a row-major symmetric matrix, `None` unless it is
/// symmetric positive definite.
pub fn cholesky(a: &[f64], q: usize) -> Option<Vec<f64>> {
    for r in 0..q {
        for c in 0..r {
            let (x, y) = (a[r * q + c], a[c * q + r]);
            if (x - y).abs() > 1e-12 * (1.0 + x.abs().max(y.abs())) {
                return None;
            }
        }
    }
    let mut l = vec![0.0; q * q];
    for r in 0..q {
        for c in 0..=r {
            let s: f64 = (0..c).map(|k| l[r * q + k] * l[c * q + k]).sum();
            if r == c {
                let d = a[r * q + r] - s;
                if !(d > 0.0) {
                    return None;
                }
                l[r * q + r] = d.sqrt();
            } else {
                l[r * q + c] = (a[r * q + c] - s) / l[c * q + c];
            }
        }
    }
    Some(l)
}

/// Solves `A y = b` given the Cholesky factor of `A`.
pub fn cholesky_solve(l: &[f64], q: usize, b: &[f64]) -> Vec<f64> {
    let mut y = b.to_vec();
    for r in 0..q {
        let s: f64 = (0..r).map(|k| l[r * q + k] * y[k]).sum();
        y[r] = (y[r] - s) / l[r * q + r];
    }
    for r in (0..q).rev() {
        let s: f64 = (r + 1..q).map(|k| l[k * q + r] * y[k]).sum();
        y[r] = (y[r] - s) / l[r * q + r];
    }
    y
}

/// φ_i at a real point. `i` is 1-based.
pub fn eval_phi(spec: &SystemSpec, i: usize, x_prefix: &[f64]) -> Result<Vec<f64>> {
    if i == 0 || i > spec.n {
        return Err(Error::config(format!(
            "regressor index {i} outside 1..={}",
            spec.n
        )));
    }
    if x_prefix.len() != i {
        return Err(Error::config(format!(
            "phi_{i} takes {i} states, got {}",
            x_prefix.len()
        )));
    }
    Ok(values(&(spec.phi[i - 1])(&reals(x_prefix))))
}

/// Right-hand side of the plant for a given input.
pub fn plant_derivative(
    spec: &SystemSpec,
    truth: &TruthSignals,
    t: f64,
    x: &[f64],
    u: f64,
) -> Result<Vec<f64>> {
    let n = spec.n;
    let theta = (truth.theta)(t, x);
    let b = (truth.b)(t, x);
    let mut dx = Vec::with_capacity(n);
    for i in 1..=n {
        let phi = eval_phi(spec, i, &x[..i])?;
        let drift: f64 = phi.iter().zip(&theta).map(|(p, th)| p * th).sum();
        dx.push(if i < n { x[i] + drift } else { b * u + drift });
    }
    if dx.iter().any(|v| !v.is_finite()) {
        return Err(Error::Blowup {
            t,
            state: x.to_vec(),
        });
    }
    Ok(dx)
}

/// Signum with sgn(0) = 0.
pub fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

pub const SYSTEM_NAMES: &[&str] = &["demo", "chain3"];

/// Built-in system by name, with its default gains.
pub fn builtin(name: &str) -> Result<(SystemSpec, TruthSignals, GainConfig)> {
    match name {
        "demo" => Ok(builtin_demo()),
        "chain3" => Ok(builtin_chain3()),
        other => Err(Error::config(format!(
            "unknown system `{other}`; known systems: {}",
            SYSTEM_NAMES.join(", ")
        ))),
    }
}

/// Default initial state of a built-in system.
pub fn builtin_x0(name: &str) -> Vec<f64> {
    match name {
        "chain3" => vec![0.5, -0.5, 0.2],
        _ => vec![1.0, -4.0],
    }
}

/// Second-order benchmark: ẋ₁ = x₂ + θ(t)x₁², ẋ₂ = b(t)u.
pub fn builtin_demo() -> (SystemSpec, TruthSignals, GainConfig) {
    let phi: Vec<PhiMap> = vec![
        Arc::new(|x: &[Num]| vec![x[0].square()]),
        Arc::new(|_: &[Num]| vec![Num::ZERO]),
    ];
    // ω₁ = x₁·z₁ and ω₂ = −(∂α₁/∂x₁)x₁·z₁
    let w: Vec<WMap> = vec![
        Arc::new(|c: &WContext| vec![vec![c.x[0].clone()]]),
        Arc::new(|c: &WContext| vec![vec![-(&c.dalpha_dx[0] * &c.x[0])], vec![Num::ZERO]]),
    ];
    let omega_bar: OmegaBarMap = Arc::new(demo_omega_bar);
    let spec = SystemSpec {
        name: "demo".into(),
        n: 2,
        q: 1,
        phi,
        closed_form_w: Some(w),
        closed_form_omega_bar: Some(omega_bar),
        control_direction: Direction::Positive,
        b_bar: 3.1,
    };
    let truth = TruthSignals {
        theta: Arc::new(|t, x| {
            vec![
                2.0 + 0.8 * (2.0 * t).sin()
                    + (x[0] * x[1]).sin()
                    + 0.2 * (x[0] * t).sin()
                    + sgn(t.sin()),
            ]
        }),
        b: Arc::new(|_, x| 2.0 + 0.1 * x[0].cos() + 0.5 * x[1].sin() + 0.5 * sgn(x[0] * x[1])),
        switching: Some(Arc::new(|t, x| vec![t.sin(), x[0] * x[1]])),
    };
    let gains = GainConfig {
        k: vec![0.65, 0.05],
        gamma: vec![0.01],
        gamma_rho: 0.01,
        gamma_delta: 0.01,
        eps_omega: 5.0,
        xi: 1.0,
        gamma_u: 0.1,
        theta_hat0: vec![0.0],
        rho_hat0: 0.4,
        delta_hat0: 0.0,
    };
    (spec, truth, gains)
}

/// Ω̄ of the second-order benchmark without the soft-sign slot.
fn demo_omega_bar(c: &OmegaContext) -> Vec<Num> {
    let g = c.gains;
    let x1 = &c.x[0];
    let z2 = &c.z[1];
    let dl = c.delta_hat;
    let p = &c.partials[0];
    let (ax, at, ad) = (&p.dx[0], &p.dtheta[0], &p.ddelta);
    let gam = g.gamma[0];
    let x1sq = x1.square();
    let w2sq: Num = c.w[1].iter().flatten().map(Num::square).sum();
    let first = 1.0
        - ax * (-g.k[0] - dl * 0.5 * (&x1sq + 2.0) - 0.5 / g.eps_omega)
        - at * gam * &x1sq
        - 0.5 * g.gamma_delta * ad * (&x1sq + 2.0) * x1;
    let second = -(ax * (1.0 + gam * x1sq.square())) - 0.5 * g.gamma_delta * ad * (w2sq + 1.0) * z2;
    vec![first, second]
}

/// Third-order chain with two parameters, used to exercise the generic
/// factorization and second-order partials.
pub fn builtin_chain3() -> (SystemSpec, TruthSignals, GainConfig) {
    let phi: Vec<PhiMap> = vec![
        Arc::new(|x: &[Num]| vec![x[0].square(), Num::ZERO]),
        Arc::new(|x: &[Num]| vec![Num::ZERO, &x[0] * &x[1]]),
        Arc::new(|x: &[Num]| vec![Num::ZERO, 0.5 * &x[2]]),
    ];
    let spec = SystemSpec {
        name: "chain3".into(),
        n: 3,
        q: 2,
        phi,
        closed_form_w: None,
        closed_form_omega_bar: None,
        control_direction: Direction::Positive,
        b_bar: 2.0,
    };
    let truth = TruthSignals {
        theta: Arc::new(|t, _| vec![0.5 + 0.3 * (2.0 * t).sin(), -0.4 + 0.2 * t.cos()]),
        b: Arc::new(|t, x| 1.5 + 0.3 * t.sin() + 0.1 * x[0].cos()),
        switching: None,
    };
    let gains = GainConfig {
        k: vec![1.0, 1.0, 1.0],
        gamma: vec![0.05, 0.0, 0.0, 0.05],
        gamma_rho: 0.01,
        gamma_delta: 0.01,
        eps_omega: 5.0,
        xi: 1.0,
        gamma_u: 0.1,
        theta_hat0: vec![0.0, 0.0],
        rho_hat0: 0.5,
        delta_hat0: 0.0,
    };
    (spec, truth, gains)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn demo_phi_values() {
        let (spec, _, _) = builtin_demo();
        assert_eq!(eval_phi(&spec, 1, &[1.0]).unwrap(), vec![1.0]);
        assert_eq!(eval_phi(&spec, 1, &[0.0]).unwrap(), vec![0.0]);
        assert_eq!(eval_phi(&spec, 2, &[3.0, -7.0]).unwrap(), vec![0.0]);
        assert!(eval_phi(&spec, 3, &[0.0, 0.0, 0.0]).is_err());
        assert!(eval_phi(&spec, 2, &[0.0]).is_err());
    }

    #[test]
    fn demo_plant_examples() {
        let (spec, truth, _) = builtin_demo();
        assert_eq!(
            plant_derivative(&spec, &truth, 0.0, &[0.0, 0.0], 0.0).unwrap(),
            vec![0.0, 0.0]
        );
        assert_eq!(
            plant_derivative(&spec, &truth, 0.0, &[0.0, 0.0], 1.0).unwrap(),
            vec![0.0, 2.1]
        );
        let dx = plant_derivative(&spec, &truth, 0.0, &[1.0, -4.0], 0.0).unwrap();
        let theta = 2.0 + (-4.0f64).sin();
        assert_eq!(dx[0], -4.0 + theta);
    }

    #[test]
    fn plant_is_affine_in_u() {
        let (spec, truth, _) = builtin_demo();
        let x = [0.3, -1.7];
        let f = |u| plant_derivative(&spec, &truth, 1.3, &x, u).unwrap();
        let (a, b, m) = (f(2.5), f(-1.25), f(0.625));
        for k in 0..2 {
            assert!((a[k] + b[k] - 2.0 * m[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn demo_defaults() {
        let (spec, _, gains) = builtin_demo();
        assert_eq!(gains.k, vec![0.65, 0.05]);
        assert_eq!(gains.rho_hat0, 0.4);
        assert_eq!(spec.b_bar, 3.1);
        spec.validate().unwrap();
        gains.validate(&spec).unwrap();
    }

    #[test]
    fn builtins_validate() {
        for name in SYSTEM_NAMES {
            let (spec, _, gains) = builtin(name).unwrap();
            spec.validate().unwrap();
            gains.validate(&spec).unwrap();
        }
        assert!(builtin("nope").is_err());
    }

    #[test]
    fn gain_validation_rejects_bad_values() {
        let (spec, _, gains) = builtin_demo();
        let mut g = gains.clone();
        g.k[0] = -1.0;
        assert!(g.validate(&spec).is_err());
        let mut g = gains.clone();
        g.gamma_u = 0.0;
        assert!(g.validate(&spec).is_err());
        let mut g = gains.clone();
        g.rho_hat0 = -0.1;
        assert!(g.validate(&spec).is_err());
        let mut g = gains;
        g.gamma = vec![-1.0];
        assert!(g.validate(&spec).is_err());
    }

    #[test]
    fn cholesky_checks_definiteness_and_solves() {
        assert!(cholesky(&[1.0, 2.0, 2.0, 1.0], 2).is_none());
        assert!(cholesky(&[1.0, 0.5, 0.4, 1.0], 2).is_none());
        let a = [4.0, 2.0, 2.0, 3.0];
        let l = cholesky(&a, 2).unwrap();
        let y = cholesky_solve(&l, 2, &[2.0, 1.0]);
        assert!((4.0 * y[0] + 2.0 * y[1] - 2.0).abs() < 1e-14);
        assert!((2.0 * y[0] + 3.0 * y[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn demo_b_stays_positive_and_bounded() {
        let (spec, truth, _) = builtin_demo();
        for i in 0..2000 {
            let t = i as f64 * 0.01;
            let x = [(t * 3.1).sin() * 5.0, (t * 1.7).cos() * 5.0];
            let b = (truth.b)(t, &x);
            assert!(b >= 0.9 && b <= spec.b_bar);
        }
    }

    #[test]
    fn direction_parsing() {
        assert_eq!(Direction::from_sign(-1.0).unwrap(), Direction::Negative);
        assert!(Direction::from_sign(0.0).is_err());
    }
}
