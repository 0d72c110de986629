//! The adaptive event-triggered backstepping law.
//!
//! One call to [`Controller::evaluate`] runs the whole recursion at a point
//! `(t, x, θ̂, ρ̂, δ̂)`. The partials of each virtual control are obtained by
//! running the lower part of the recursion on dual numbers, so step `m` sees
//! exact `∂α_{m−1}/∂x_j`, `∂α_{m−1}/∂θ̂` and `∂α_{m−1}/∂δ̂` and anything built
//! on them stays differentiable for step `m + 1`.

use serde::{Deserialize, Serialize};

use crate::diff::{
    axis_factor, domain_checked, dot, level_of, norm_sq, ray_factor, reals, soft_abs, values, Num,
    UnitRule,
};
use crate::error::{Error, Result};
use crate::model::{GainConfig, OmegaContext, SystemSpec, WContext};

/// Partials of one virtual control α_j with respect to x̄_j, θ̂ and δ̂.
#[derive(Debug, Clone)]
pub struct AlphaPartials {
    pub dx: Vec<Num>,
    pub dtheta: Vec<Num>,
    pub ddelta: Num,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RealPartials {
    pub dx: Vec<f64>,
    pub dtheta: Vec<f64>,
    pub ddelta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Estimates {
    pub theta_hat: Vec<f64>,
    pub rho_hat: f64,
    pub delta_hat: f64,
}

impl Estimates {
    pub fn initial(gains: &GainConfig) -> Self {
        Estimates {
            theta_hat: gains.theta_hat0.clone(),
            rho_hat: gains.rho_hat0,
            delta_hat: gains.delta_hat0,
        }
    }
}

/// Which update law drives δ̂: `General` scales the tuning function by γ_δ,
/// `Printed` uses it unscaled, as in the closed-form second-order scheme.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum DeltaLaw {
    #[default]
    General,
    Printed,
}

impl DeltaLaw {
    pub fn gain(self, gains: &GainConfig) -> f64 {
        match self {
            DeltaLaw::General => gains.gamma_delta,
            DeltaLaw::Printed => 1.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ControllerOptions {
    pub delta_law: DeltaLaw,
    pub factor_tol: f64,
    pub quad_nodes: usize,
    /// Mutation hook for the verification suite: flips the sign of κ.
    pub kappa_sign_flip: bool,
}

impl Default for ControllerOptions {
    fn default() -> Self {
        ControllerOptions {
            delta_law: DeltaLaw::General,
            factor_tol: 1e-8,
            quad_nodes: 16,
            kappa_sign_flip: false,
        }
    }
}

/// Everything one evaluation of the recursion produces, as reals.
#[derive(Debug, Clone)]
pub struct CascadeOutput {
    pub z: Vec<f64>,
    pub alpha: Vec<f64>,
    pub omega: Vec<Vec<f64>>,
    pub w: Vec<Vec<Vec<f64>>>,
    pub partials: Vec<RealPartials>,
    pub tau_theta: Vec<f64>,
    pub tau_delta: f64,
    pub v: Vec<f64>,
    pub omega_big: f64,
    pub omega_bar: Vec<f64>,
    pub kappa: f64,
    pub k_gain: f64,
    pub u_bar: f64,
    pub u_e: f64,
    pub dtheta_hat: Vec<f64>,
    pub drho_hat: f64,
    pub ddelta_hat: f64,
    pub sigma: f64,
    pub w_residual: f64,
    pub omega_residual: f64,
}

/// Constants that only appear in the stability analysis. Built by the
/// simulator from the truth signals; never used for control.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisConstants {
    pub ell_theta: Vec<f64>,
    pub delta_theta: f64,
    pub ell_b: f64,
    pub mu: f64,
}

impl AnalysisConstants {
    /// Δ_θ(t) = θ(t) − ℓ_θ.
    pub fn theta_residual(&self, theta: &[f64]) -> Vec<f64> {
        theta
            .iter()
            .zip(&self.ell_theta)
            .map(|(a, b)| a - b)
            .collect()
    }

    /// Δ_b(t) = b(t) − ℓ_b.
    pub fn b_residual(&self, b: f64) -> f64 {
        b - self.ell_b
    }
}

/// Recursion state for steps 1..m.
#[derive(Clone)]
struct Chain {
    z: Vec<Num>,
    alpha: Vec<Num>,
    omega: Vec<Vec<Num>>,
    w: Vec<Vec<Vec<Num>>>,
    tau_theta: Vec<Vec<Num>>,
    tau_delta: Vec<Num>,
    v: Vec<Num>,
    partials: Vec<AlphaPartials>,
    w_residual: f64,
}

impl Chain {
    fn primal(&self, level: u32) -> Chain {
        let p = |v: &Num| v.primal(level);
        let pv = |v: &[Num]| v.iter().map(p).collect::<Vec<_>>();
        Chain {
            z: pv(&self.z),
            alpha: pv(&self.alpha),
            omega: self.omega.iter().map(|o| pv(o)).collect(),
            w: self
                .w
                .iter()
                .map(|m| m.iter().map(|r| pv(r)).collect())
                .collect(),
            tau_theta: self.tau_theta.iter().map(|t| pv(t)).collect(),
            tau_delta: pv(&self.tau_delta),
            v: pv(&self.v),
            partials: Vec::new(),
            w_residual: self.w_residual,
        }
    }
}

pub struct Controller {
    pub spec: SystemSpec,
    pub gains: GainConfig,
    pub opts: ControllerOptions,
    rule: UnitRule,
    gamma: Vec<Vec<f64>>,
}

impl Controller {
    pub fn new(spec: SystemSpec, gains: GainConfig, opts: ControllerOptions) -> Result<Self> {
        spec.validate()?;
        gains.validate(&spec)?;
        let rule = UnitRule::new(opts.quad_nodes)?;
        let gamma = gains.gamma_rows(spec.q);
        Ok(Controller {
            spec,
            gains,
            opts,
            rule,
            gamma,
        })
    }

    /// `aᵀ Γ b`.
    fn gamma_form(&self, a: &[Num], b: &[Num]) -> Num {
        let mut acc = Num::ZERO;
        for (r, ar) in a.iter().enumerate() {
            if ar.value() == 0.0 && ar.level() == 0 {
                continue;
            }
            let row: Num = self.gamma[r].iter().zip(b).map(|(g, bv)| bv * *g).sum();
            acc = acc + ar * row;
        }
        acc
    }

    fn gamma_apply(&self, v: &[f64]) -> Vec<f64> {
        self.gamma
            .iter()
            .map(|row| row.iter().zip(v).map(|(g, x)| g * x).sum())
            .collect()
    }

    fn phi(&self, i: usize, x: &[Num]) -> Vec<Num> {
        (self.spec.phi[i - 1])(&x[..i])
    }

    /// Steps 1..m−1 in full plus z_m and ω_m, with partials of every α_j, j < m.
    fn pre_step(&self, x: &[Num], th: &[Num], dl: &Num, m: usize) -> Result<Chain> {
        if m == 1 {
            return Ok(Chain {
                z: vec![x[0].clone()],
                alpha: Vec::new(),
                omega: vec![self.phi(1, x)],
                w: Vec::new(),
                tau_theta: Vec::new(),
                tau_delta: Vec::new(),
                v: Vec::new(),
                partials: Vec::new(),
                w_residual: 0.0,
            });
        }
        let q = self.spec.q;
        let level = level_of(&[&x[..m - 1], th, std::slice::from_ref(dl)]) + 1;
        let width = m - 1 + q + 1;
        let mut seeded = Vec::with_capacity(width);
        for (k, v) in x[..m - 1]
            .iter()
            .chain(th)
            .chain(std::iter::once(dl))
            .enumerate()
        {
            seeded.push(Num::seed(v.clone(), level, k, width));
        }
        let inner = self.full_step(
            &seeded[..m - 1],
            &seeded[m - 1..m - 1 + q],
            &seeded[m - 1 + q],
            m - 1,
        )?;
        let mut chain = inner.primal(level);
        chain.partials = inner
            .alpha
            .iter()
            .enumerate()
            .map(|(j, a)| {
                let (_, d) = a.split(level, width);
                AlphaPartials {
                    dx: d[..=j].to_vec(),
                    dtheta: d[m - 1..m - 1 + q].to_vec(),
                    ddelta: d[m - 1 + q].clone(),
                }
            })
            .collect();

        let last = &chain.partials[m - 2];
        chain.z.push(&x[m - 1] - &chain.alpha[m - 2]);
        let mut omega = self.phi(m, x);
        for (j, dax) in last.dx.iter().enumerate() {
            let phi_j = self.phi(j + 1, x);
            for (o, p) in omega.iter_mut().zip(&phi_j) {
                *o = &*o - dax * p;
            }
        }
        chain.omega.push(omega);
        Ok(chain)
    }

    /// Steps 1..m with α_m (m < n).
    fn full_step(&self, x: &[Num], th: &[Num], dl: &Num, m: usize) -> Result<Chain> {
        let mut c = self.pre_step(x, th, dl, m)?;
        let (w, res) = self.factor_w(m, &c, x, th, dl)?;
        c.w_residual = c.w_residual.max(res);
        c.w.push(w);
        let (alpha, v) = self.virtual_law(m, &mut c, x, th, dl);
        c.alpha.push(alpha);
        c.v.push(v);
        Ok(c)
    }

    /// Appends τ_θm, τ_δm and returns (α_m, v_m).
    fn virtual_law(&self, m: usize, c: &mut Chain, x: &[Num], th: &[Num], dl: &Num) -> (Num, Num) {
        let g = &self.gains;
        let eps = g.eps_omega;
        let zm = c.z[m - 1].clone();
        let cm = self.c_coef(m, &c.w[m - 1]);
        let omega_m = c.omega[m - 1].clone();
        let tau_theta: Vec<Num> = match c.tau_theta.last() {
            Some(prev) => prev
                .iter()
                .zip(&omega_m)
                .map(|(a, o)| a + o * &zm)
                .collect(),
            None => omega_m.iter().map(|o| o * &zm).collect(),
        };
        let tau_delta = match c.tau_delta.last() {
            Some(prev) => prev + &cm * zm.square(),
            None => &cm * zm.square(),
        };
        c.tau_theta.push(tau_theta.clone());
        c.tau_delta.push(tau_delta.clone());

        let mut v = -(dl * &cm * &zm) - &zm * (0.5 / eps);
        if m >= 3 {
            let s_delta: Num = (2..m)
                .map(|j| &c.partials[j - 2].ddelta * &c.z[j - 1])
                .sum();
            v = v + g.gamma_delta * (&cm + 0.5 / eps) * &zm * s_delta;
            let s_theta: Num = (2..m)
                .map(|j| self.gamma_form(&c.partials[j - 2].dtheta, &omega_m) * &c.z[j - 1])
                .sum();
            v = v + s_theta;
        }
        let mut alpha = -(&zm * g.k[m - 1]) - dot(&omega_m, th) + &v;
        if m >= 2 {
            let p = &c.partials[m - 2];
            let drift: Num = (0..m - 1).map(|j| &p.dx[j] * &x[j + 1]).sum();
            alpha = alpha
                + g.gamma_delta * &p.ddelta * &tau_delta
                + drift
                + self.gamma_form(&p.dtheta, &tau_theta)
                - &c.z[m - 2];
        }
        (alpha, v)
    }

    /// c_i = ½(|W_i|²_F + n + 1 − i).
    fn c_coef(&self, i: usize, w: &[Vec<Num>]) -> Num {
        let nsq: Num = w.iter().map(|r| norm_sq(r)).sum();
        0.5 * (nsq + (self.spec.n + 1 - i) as f64)
    }

    /// W_i with ω_i = W_iᵀ z̄_i, closed form when available.
    fn factor_w(
        &self,
        i: usize,
        c: &Chain,
        x: &[Num],
        th: &[Num],
        dl: &Num,
    ) -> Result<(Vec<Vec<Num>>, f64)> {
        let z = &c.z[..i];
        let w = match &self.spec.closed_form_w {
            Some(maps) => {
                let empty = Vec::new();
                let ctx = WContext {
                    i,
                    x: &x[..i],
                    z,
                    theta_hat: th,
                    delta_hat: dl,
                    dalpha_dx: if i >= 2 {
                        &c.partials[i - 2].dx
                    } else {
                        &empty
                    },
                };
                (maps[i - 1])(&ctx)
            }
            None if i == 1 => {
                // a single coordinate: ray and axis paths coincide
                let floor = level_of(&[z, th, std::slice::from_ref(dl)]);
                let jac = axis_factor(|zs| Ok(self.phi(1, zs)), z, floor, &self.rule)?;
                vec![jac.iter().map(|row| row[0].clone()).collect()]
            }
            None => {
                let floor = level_of(&[z, th, std::slice::from_ref(dl)]);
                let jac = ray_factor(
                    |zs| {
                        let xs = self.inverse(zs, th, dl)?;
                        Ok(self
                            .pre_step(&xs, th, dl, i)?
                            .omega
                            .pop()
                            .unwrap_or_default())
                    },
                    z,
                    floor,
                    &self.rule,
                )?;
                // jac is q×i; W_i is i×q
                (0..i)
                    .map(|r| jac.iter().map(|row| row[r].clone()).collect())
                    .collect()
            }
        };
        let omega = values(&c.omega[i - 1]);
        let zr = values(z);
        let mut res = 0.0f64;
        let mut scale = 0.0f64;
        for (col, o) in omega.iter().enumerate() {
            let wz: f64 = (0..i).map(|r| w[r][col].value() * zr[r]).sum();
            res += (o - wz).powi(2);
            scale += o * o;
        }
        let (res, scale) = (res.sqrt(), scale.sqrt());
        if !(res <= self.opts.factor_tol * (1.0 + scale)) {
            return Err(Error::Factorization {
                what: format!("W_{i}"),
                residual: res,
            });
        }
        Ok((w, res))
    }

    /// x̄ from z̄: x₁ = z₁, x_j = z_j + α_{j−1}(x̄_{j−1}).
    fn inverse(&self, z: &[Num], th: &[Num], dl: &Num) -> Result<Vec<Num>> {
        let mut x = vec![z[0].clone()];
        for j in 2..=z.len() {
            let c = self.full_step(&x, th, dl, j - 1)?;
            x.push(&z[j - 1] + &c.alpha[j - 2]);
        }
        Ok(x)
    }

    /// Ω without the soft-sign term, from a completed step-n chain.
    fn omega_core(&self, c: &Chain, x: &[Num], th: &[Num]) -> Num {
        let n = self.spec.n;
        let g = &self.gains;
        let zn = &c.z[n - 1];
        let omega_n = &c.omega[n - 1];
        let p = &c.partials[n - 2];
        let tau_theta = &c.tau_theta[n - 1];
        let tau_delta = &c.tau_delta[n - 1];
        let cn = self.c_coef(n, &c.w[n - 1]);
        let mut psi_theta = self.gamma_form(&p.dtheta, tau_theta);
        let mut s_delta = Num::ZERO;
        for j in 2..n {
            let pj = &c.partials[j - 2];
            psi_theta = psi_theta + self.gamma_form(&pj.dtheta, omega_n) * &c.z[j - 1];
            s_delta = s_delta + &pj.ddelta * &c.z[j - 1];
        }
        let psi_delta = g.gamma_delta * &p.ddelta * tau_delta + g.gamma_delta * &cn * zn * s_delta;
        let drift: Num = (0..n - 1).map(|j| &p.dx[j] * &x[j + 1]).sum();
        &c.z[n - 2] + dot(omega_n, th) - drift - psi_delta - psi_theta
    }

    /// Full step-n chain (W_n, τ_θn, τ_δn, v_n included).
    fn final_chain(&self, x: &[Num], th: &[Num], dl: &Num) -> Result<Chain> {
        let n = self.spec.n;
        let mut c = self.pre_step(x, th, dl, n)?;
        let (w, res) = self.factor_w(n, &c, x, th, dl)?;
        c.w_residual = c.w_residual.max(res);
        c.w.push(w);
        let zn = c.z[n - 1].clone();
        let cn = self.c_coef(n, &c.w[n - 1]);
        let prev_t = c.tau_theta[n - 2].clone();
        let omega_n = c.omega[n - 1].clone();
        c.tau_theta.push(
            prev_t
                .iter()
                .zip(&omega_n)
                .map(|(a, o)| a + o * &zn)
                .collect(),
        );
        let prev_d = c.tau_delta[n - 2].clone();
        c.tau_delta.push(prev_d + &cn * zn.square());
        c.v.push(-(dl * &cn * &zn) - &zn * (0.5 / self.gains.eps_omega));
        Ok(c)
    }

    /// Ω̄ without the soft-sign slot.
    fn omega_bar_core(&self, c: &Chain, x: &[Num], th: &[Num], dl: &Num) -> Result<Vec<Num>> {
        if let Some(map) = &self.spec.closed_form_omega_bar {
            return Ok(map(&OmegaContext {
                x,
                z: &c.z,
                theta_hat: th,
                delta_hat: dl,
                partials: &c.partials,
                w: &c.w,
                gains: &self.gains,
            }));
        }
        let floor = level_of(&[&c.z, th, std::slice::from_ref(dl)]);
        let m = axis_factor(
            |zs| {
                let xs = self.inverse(zs, th, dl)?;
                let cs = self.final_chain(&xs, th, dl)?;
                Ok(vec![self.omega_core(&cs, &xs, th)])
            },
            &c.z,
            floor,
            &self.rule,
        )?;
        Ok(m.into_iter().next().unwrap_or_default())
    }

    /// Runs the whole law at a real point.
    pub fn evaluate(&self, t: f64, x: &[f64], est: &Estimates) -> Result<CascadeOutput> {
        let n = self.spec.n;
        if x.len() != n || est.theta_hat.len() != self.spec.q {
            return Err(Error::config("state or estimate dimension mismatch"));
        }
        if !(est.delta_hat >= 0.0) {
            return Err(Error::Invariant(format!(
                "delta_hat = {} is negative",
                est.delta_hat
            )));
        }
        let g = &self.gains;
        let (xn, th, dl) = (reals(x), reals(&est.theta_hat), Num::Real(est.delta_hat));
        let (c, core, bar_core) = domain_checked(|| -> Result<_> {
            let c = self.final_chain(&xn, &th, &dl)?;
            let core = self.omega_core(&c, &xn, &th);
            let bar = self.omega_bar_core(&c, &xn, &th, &dl)?;
            Ok((c, core, bar))
        })??;

        let sigma = (-g.xi * t).exp();
        let z = values(&c.z);
        let zn = z[n - 1];
        let soft_coef = self.spec.b_bar.abs() * g.gamma_u / (zn * zn + sigma * sigma).sqrt();
        let omega_big = core.value() + soft_coef * zn;
        let mut omega_bar = values(&bar_core);
        omega_bar[n - 1] += soft_coef;
        let recon: f64 = omega_bar.iter().zip(&z).map(|(a, b)| a * b).sum();
        let omega_residual = (omega_big - recon).abs();
        if !(omega_residual <= self.opts.factor_tol * (1.0 + omega_big.abs())) {
            return Err(Error::Factorization {
                what: "Omega".into(),
                residual: omega_residual,
            });
        }

        let w: Vec<Vec<Vec<f64>>> =
            c.w.iter()
                .map(|m| m.iter().map(|r| values(r)).collect())
                .collect();
        let wn_sq: f64 = w[n - 1].iter().flatten().map(|v| v * v).sum();
        let v = values(&c.v);
        let fc = final_control(
            g,
            zn,
            wn_sq,
            v[n - 1],
            &omega_bar,
            est,
            self.opts.kappa_sign_flip,
        )?;
        let omega: Vec<Vec<f64>> = c.omega.iter().map(|o| values(o)).collect();
        let tau_theta = values(&c.tau_theta[n - 1]);
        let tau_delta = c.tau_delta[n - 1].value();
        let (dtheta_hat, drho_hat, ddelta_hat) = estimate_derivatives(
            &self.gamma_apply(&tau_theta),
            tau_delta,
            fc.k_gain,
            zn,
            g,
            self.spec.control_direction.sign(),
            self.opts.delta_law,
        );

        let out = CascadeOutput {
            z,
            alpha: values(&c.alpha),
            omega,
            w,
            partials: c
                .partials
                .iter()
                .map(|p| RealPartials {
                    dx: values(&p.dx),
                    dtheta: values(&p.dtheta),
                    ddelta: p.ddelta.value(),
                })
                .collect(),
            tau_theta,
            tau_delta,
            v,
            omega_big,
            omega_bar,
            kappa: fc.kappa,
            k_gain: fc.k_gain,
            u_bar: fc.u_bar,
            u_e: fc.u_e,
            dtheta_hat,
            drho_hat,
            ddelta_hat,
            sigma,
            w_residual: c.w_residual,
            omega_residual,
        };
        out.check_finite()?;
        Ok(out)
    }

    /// (z, α) at a real point.
    pub fn coordinate_transform(&self, x: &[f64], est: &Estimates) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.spec.n;
        let (xn, th, dl) = (reals(x), reals(&est.theta_hat), Num::Real(est.delta_hat));
        let c = domain_checked(|| self.full_step(&xn, &th, &dl, n - 1))??;
        let mut z = values(&c.z);
        let alpha = values(&c.alpha);
        z.push(x[n - 1] - alpha[n - 2]);
        Ok((z, alpha))
    }

    /// α_i alone (1-based, i < n).
    pub fn virtual_control(&self, i: usize, x: &[f64], est: &Estimates) -> Result<f64> {
        if i == 0 || i >= self.spec.n {
            return Err(Error::config(format!(
                "virtual control index {i} outside 1..{}",
                self.spec.n
            )));
        }
        let (xn, th, dl) = (
            reals(&x[..i]),
            reals(&est.theta_hat),
            Num::Real(est.delta_hat),
        );
        let c = domain_checked(|| self.full_step(&xn, &th, &dl, i))??;
        Ok(c.alpha[i - 1].value())
    }

    /// α_1..α_{n−1} and their partials, without the last step.
    pub fn alpha_partials(
        &self,
        x: &[f64],
        est: &Estimates,
    ) -> Result<(Vec<f64>, Vec<RealPartials>)> {
        let n = self.spec.n;
        let (xn, th, dl) = (reals(x), reals(&est.theta_hat), Num::Real(est.delta_hat));
        let c = domain_checked(|| self.pre_step(&xn, &th, &dl, n))??;
        let partials = c
            .partials
            .iter()
            .map(|p| RealPartials {
                dx: values(&p.dx),
                dtheta: values(&p.dtheta),
                ddelta: p.ddelta.value(),
            })
            .collect();
        Ok((values(&c.alpha), partials))
    }

    /// ω_i at a real point (1-based).
    pub fn regressor_omega(&self, i: usize, x: &[f64], est: &Estimates) -> Result<Vec<f64>> {
        if i == 0 || i > self.spec.n {
            return Err(Error::config(format!(
                "regressor index {i} outside 1..={}",
                self.spec.n
            )));
        }
        let (xn, th, dl) = (
            reals(&x[..i]),
            reals(&est.theta_hat),
            Num::Real(est.delta_hat),
        );
        let c = domain_checked(|| self.pre_step(&xn, &th, &dl, i))??;
        Ok(values(&c.omega[i - 1]))
    }

    /// W_i at a real point (1-based), closed form when the system has one.
    pub fn hadamard_w(&self, i: usize, x: &[f64], est: &Estimates) -> Result<Vec<Vec<f64>>> {
        if i == 0 || i > self.spec.n {
            return Err(Error::config(format!(
                "factor index {i} outside 1..={}",
                self.spec.n
            )));
        }
        let (xn, th, dl) = (
            reals(&x[..i]),
            reals(&est.theta_hat),
            Num::Real(est.delta_hat),
        );
        let w = domain_checked(|| -> Result<_> {
            let c = self.pre_step(&xn, &th, &dl, i)?;
            Ok(self.factor_w(i, &c, &xn, &th, &dl)?.0)
        })??;
        Ok(w.iter().map(|r| values(r)).collect())
    }
}

impl CascadeOutput {
    fn check_finite(&self) -> Result<()> {
        let scalars = [
            ("Omega", self.omega_big),
            ("kappa", self.kappa),
            ("K", self.k_gain),
            ("u_e", self.u_e),
            ("rho_hat derivative", self.drho_hat),
            ("delta_hat derivative", self.ddelta_hat),
            ("tau_delta", self.tau_delta),
        ];
        for (name, v) in scalars {
            if !v.is_finite() {
                return Err(Error::NonFinite { step: name.into() });
            }
        }
        let vectors: [(&str, &[f64]); 6] = [
            ("z", &self.z),
            ("alpha", &self.alpha),
            ("v", &self.v),
            ("Omega_bar", &self.omega_bar),
            ("tau_theta", &self.tau_theta),
            ("theta_hat derivative", &self.dtheta_hat),
        ];
        for (name, vs) in vectors {
            if let Some(i) = vs.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite {
                    step: format!("{name}[{}]", i + 1),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FinalControl {
    pub kappa: f64,
    pub k_gain: f64,
    pub u_bar: f64,
    pub u_e: f64,
}

/// κ, 𝒦, ū and u_e from the last-step quantities. `wn_sq` is |W_n|²_F and
/// `v_n` the last damping term; ū is assembled both as −𝒦z_n and as
/// −k_n z_n + v_n + κz_n and the two must agree.
pub fn final_control(
    gains: &GainConfig,
    z_n: f64,
    wn_sq: f64,
    v_n: f64,
    omega_bar: &[f64],
    est: &Estimates,
    kappa_sign_flip: bool,
) -> Result<FinalControl> {
    let k_n = *gains.k.last().expect("k is nonempty");
    let eps = gains.eps_omega;
    let ob_sq: f64 = omega_bar.iter().map(|v| v * v).sum();
    let mut kappa = -0.5 * eps * ob_sq;
    if kappa_sign_flip {
        kappa = -kappa;
    }
    let k_gain = k_n + 0.5 * est.delta_hat * (wn_sq + 1.0) + 0.5 / eps - kappa;
    if !(k_gain > 0.0) {
        return Err(Error::Invariant(format!(
            "gain K = {k_gain} is not positive"
        )));
    }
    let u_bar = -k_gain * z_n;
    let other = -k_n * z_n + v_n + kappa * z_n;
    if (other - u_bar).abs() > 1e-12 * (1.0 + u_bar.abs()) {
        return Err(Error::Invariant(format!(
            "two assemblies of u_bar disagree: {u_bar} vs {other}"
        )));
    }
    Ok(FinalControl {
        kappa,
        k_gain,
        u_bar,
        u_e: est.rho_hat * u_bar,
    })
}

/// (θ̂̇, ρ̂̇, δ̂̇) given Γτ_θn, τ_δn and 𝒦.
pub fn estimate_derivatives(
    gamma_tau_theta: &[f64],
    tau_delta: f64,
    k_gain: f64,
    z_n: f64,
    gains: &GainConfig,
    direction: f64,
    law: DeltaLaw,
) -> (Vec<f64>, f64, f64) {
    (
        gamma_tau_theta.to_vec(),
        gains.gamma_rho * direction * k_gain * z_n * z_n,
        law.gain(gains) * tau_delta,
    )
}

/// τ_θi = Σ_{j≤i} ω_j z_j.
pub fn tuning_tau_theta(omega: &[Vec<f64>], z: &[f64], upto: usize) -> Vec<f64> {
    let q = omega.first().map_or(0, Vec::len);
    let mut acc = vec![0.0; q];
    for j in 0..upto {
        for (a, o) in acc.iter_mut().zip(&omega[j]) {
            *a += o * z[j];
        }
    }
    acc
}

/// τ_δi = Σ_{j≤i} ½(|W_j|²_F + n + 1 − j) z_j².
pub fn tuning_tau_delta(w: &[Vec<Vec<f64>>], z: &[f64], n: usize, upto: usize) -> f64 {
    (0..upto)
        .map(|j| {
            let f: f64 = w[j].iter().flatten().map(|v| v * v).sum();
            0.5 * (f + (n - j) as f64) * z[j] * z[j]
        })
        .sum()
}

/// |s| − s²/√(s²+σ²), which lies in [0, σ].
pub fn soft_sign_gap(s: f64, sigma: f64) -> f64 {
    s.abs() - soft_abs(&Num::Real(s), &Num::Real(sigma)).value()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{builtin_chain3, builtin_demo};

    fn demo(opts: ControllerOptions) -> Controller {
        let (spec, _, gains) = builtin_demo();
        Controller::new(spec, gains, opts).unwrap()
    }

    fn est(th: f64, rho: f64, dl: f64) -> Estimates {
        Estimates {
            theta_hat: vec![th],
            rho_hat: rho,
            delta_hat: dl,
        }
    }

    #[test]
    fn coordinate_transform_examples() {
        let c = demo(Default::default());
        let (z, a) = c
            .coordinate_transform(&[1.0, -4.0], &est(0.0, 0.4, 0.0))
            .unwrap();
        assert!((a[0] + 0.75).abs() < 1e-15);
        assert!((z[1] + 3.25).abs() < 1e-15);
        let (z, a) = c
            .coordinate_transform(&[1.0, -4.0], &est(1.0, 0.4, 2.0))
            .unwrap();
        assert!((a[0] + 4.75).abs() < 1e-14);
        assert!((z[1] - 0.75).abs() < 1e-14);
        assert_eq!(
            c.virtual_control(1, &[1.0, -4.0], &est(1.0, 0.4, 2.0))
                .unwrap(),
            a[0]
        );
    }

    #[test]
    fn origin_is_an_equilibrium() {
        for generic in [false, true] {
            let (spec, _, gains) = builtin_demo();
            let spec = if generic {
                spec.without_closed_forms()
            } else {
                spec
            };
            let c = Controller::new(spec, gains, Default::default()).unwrap();
            let out = c.evaluate(0.3, &[0.0, 0.0], &est(1.7, 0.4, 0.9)).unwrap();
            assert_eq!(out.u_e, 0.0);
            assert!(out.alpha.iter().all(|a| *a == 0.0));
            assert!(out.dtheta_hat.iter().all(|a| *a == 0.0));
            assert_eq!(out.drho_hat, 0.0);
            assert_eq!(out.ddelta_hat, 0.0);
            assert_eq!(out.omega_big, 0.0);
            let sigma = (-0.3f64).exp();
            // the core part of the last slot is −∂α₁/∂x₁ at x₁ = 0
            let core = -out.partials[0].dx[0];
            assert!((out.omega_bar[1] - core - 3.1 * 0.1 / sigma).abs() < 1e-12);
        }
    }

    #[test]
    fn omega_examples() {
        let c = demo(Default::default());
        let e = est(0.3, 0.4, 0.2);
        assert_eq!(c.regressor_omega(1, &[1.5, 2.0], &e).unwrap(), vec![2.25]);
        assert_eq!(c.regressor_omega(2, &[0.0, 0.0], &e).unwrap(), vec![0.0]);
        let out = c.evaluate(0.0, &[1.5, 2.0], &e).unwrap();
        let a = out.partials[0].dx[0];
        assert!((out.omega[1][0] + a * 2.25).abs() < 1e-12);
    }

    #[test]
    fn tuning_examples() {
        let z = [1.0, 0.0];
        let omega = vec![vec![1.0], vec![5.0]];
        assert_eq!(tuning_tau_theta(&omega, &z, 1), vec![1.0]);
        assert_eq!(tuning_tau_theta(&omega, &[0.0, 0.0], 2), vec![0.0]);
        let w = vec![vec![vec![1.0]], vec![vec![3.0], vec![0.0]]];
        assert_eq!(tuning_tau_delta(&w, &z, 2, 1), 1.5);
        assert!(tuning_tau_delta(&w, &[1.0, 2.0], 2, 2) >= tuning_tau_delta(&w, &[1.0, 2.0], 2, 1));
    }

    #[test]
    fn damping_examples() {
        let c = demo(Default::default());
        // v₁ = −(δ̂/2)(x₁²+2)x₁ − x₁/(2ε) at x₁=1, δ̂=2
        let out = c.evaluate(0.0, &[1.0, 0.0], &est(0.0, 0.4, 2.0)).unwrap();
        assert!((out.v[0] + 3.1).abs() < 1e-14);
        // v₂ at z₂ = 1, δ̂ = 0, x₁ = 0
        let out = c.evaluate(0.0, &[0.0, 1.0], &est(0.0, 0.4, 0.0)).unwrap();
        assert!((out.v[1] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn final_control_examples() {
        let (_, _, g) = builtin_demo();
        let e = est(0.0, 0.4, 0.0);
        let f = final_control(&g, 0.0, 0.0, 0.0, &[0.0, 0.0], &e, false).unwrap();
        assert_eq!((f.u_bar, f.u_e), (0.0, 0.0));
        let f = final_control(&g, 1.0, 0.0, -0.1, &[0.0, 0.0], &e, false).unwrap();
        assert!((f.k_gain - 0.15).abs() < 1e-15);
        assert!((f.u_e + 0.4 * 0.15).abs() < 1e-15);
    }

    #[test]
    fn soft_sign_examples() {
        assert_eq!(soft_sign_gap(0.0, 1.0), 0.0);
        assert_eq!(soft_sign_gap(2.5, 0.0), 0.0);
        assert!((soft_sign_gap(3.0, 4.0) - 1.2).abs() < 1e-15);
        assert_eq!(soft_sign_gap(0.0, 0.0), 0.0);
    }

    #[test]
    fn soft_sign_slot_tends_to_inverse_magnitude() {
        let c = demo(Default::default());
        let (z, _) = c
            .coordinate_transform(&[0.0, 0.5], &est(0.0, 0.4, 0.0))
            .unwrap();
        let out = c.evaluate(60.0, &[0.0, 0.5], &est(0.0, 0.4, 0.0)).unwrap();
        // x₁ = 0 leaves only the soft-sign part in the second slot
        let expect = 3.1 * 0.1 / z[1].abs() - out.partials[0].dx[0];
        assert!((out.omega_bar[1] - expect).abs() < 1e-12);
    }

    #[test]
    fn closed_forms_agree_with_generic_factorization() {
        let closed = demo(Default::default());
        let (spec, _, gains) = builtin_demo();
        let generic =
            Controller::new(spec.without_closed_forms(), gains, Default::default()).unwrap();
        for (x, e, t) in [
            ([1.0, -4.0], est(0.0, 0.4, 0.0), 0.0),
            ([-0.7, 0.3], est(1.2, 0.5, 0.8), 1.5),
            ([0.2, 1.9], est(-0.5, 0.1, 2.0), 4.0),
        ] {
            let a = closed.evaluate(t, &x, &e).unwrap();
            let b = generic.evaluate(t, &x, &e).unwrap();
            for (u, v) in a.omega_bar.iter().zip(&b.omega_bar) {
                assert!((u - v).abs() < 1e-8 * (1.0 + u.abs()), "{u} vs {v}");
            }
            assert!((a.w[1][0][0] - b.w[1][0][0]).abs() < 1e-8);
            assert!((a.u_e - b.u_e).abs() < 1e-8 * (1.0 + a.u_e.abs()));
        }
    }

    #[test]
    fn estimate_derivatives_signs() {
        let c = demo(ControllerOptions {
            delta_law: DeltaLaw::Printed,
            ..Default::default()
        });
        let out = c.evaluate(0.0, &[1.0, -4.0], &est(0.0, 0.4, 0.0)).unwrap();
        assert!(out.ddelta_hat > 0.0 && out.drho_hat > 0.0);
        let general = demo(Default::default())
            .evaluate(0.0, &[1.0, -4.0], &est(0.0, 0.4, 0.0))
            .unwrap();
        assert!((general.ddelta_hat - 0.01 * out.ddelta_hat).abs() < 1e-15 * out.ddelta_hat);
    }

    #[test]
    fn kappa_flip_breaks_gain_bound() {
        let c = demo(ControllerOptions {
            kappa_sign_flip: true,
            ..Default::default()
        });
        let r = c.evaluate(0.0, &[1.0, -4.0], &est(0.0, 0.4, 0.0));
        // either 𝒦 is rejected outright or it falls below k_n + 1/(2ε)
        if let Ok(out) = r {
            assert!(out.k_gain < 0.05 + 0.1);
        }
    }

    #[test]
    fn third_order_chain_evaluates() {
        let (spec, _, gains) = builtin_chain3();
        let c = Controller::new(spec, gains, Default::default()).unwrap();
        let e = Estimates {
            theta_hat: vec![0.2, -0.1],
            rho_hat: 0.5,
            delta_hat: 0.3,
        };
        let out = c.evaluate(0.5, &[0.4, -0.3, 0.2], &e).unwrap();
        assert!(out.k_gain >= 1.0 + 0.1);
        assert_eq!(out.partials.len(), 2);
        assert!(out.omega_residual <= 1e-8 * (1.0 + out.omega_big.abs()));
    }
}
