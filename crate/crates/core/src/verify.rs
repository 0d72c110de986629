//! Randomized invariant sweeps behind `etadapt verify`.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::controller::{soft_sign_gap, Controller, ControllerOptions, DeltaLaw, Estimates};
use crate::error::Result;
use crate::model::{builtin_chain3, builtin_demo, GainConfig, SystemSpec};
use crate::sim::{run, SimConfig};

pub type Rng = ChaCha8Rng;

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

/// A random operating point (t, x, estimates).
#[derive(Debug, Clone)]
pub struct Point {
    pub t: f64,
    pub x: Vec<f64>,
    pub est: Estimates,
}

pub fn random_point(rng: &mut Rng, spec: &SystemSpec, radius: f64) -> Point {
    Point {
        t: rng.random_range(0.0..10.0),
        x: (0..spec.n)
            .map(|_| rng.random_range(-radius..radius))
            .collect(),
        est: Estimates {
            theta_hat: (0..spec.q)
                .map(|_| rng.random_range(-radius..radius))
                .collect(),
            rho_hat: spec.control_direction.sign() * rng.random_range(0.0..1.0),
            delta_hat: rng.random_range(0.0..radius),
        },
    }
}

/// Smallest slack of `0 ≤ |s| − s²/√(s²+σ²) ≤ σ` over random (s, σ).
pub fn soft_sign_slack(rng: &mut Rng, count: usize) -> f64 {
    let mut worst = f64::INFINITY;
    for _ in 0..count {
        let s = rng.random_range(-1e3..1e3);
        let sigma = rng.random_range(0.0..1e3);
        let gap = soft_sign_gap(s, sigma);
        worst = worst.min(gap).min(sigma - gap);
    }
    worst
}

/// Largest `|exact − central difference| / (1 + |exact|)` over every partial
/// of every virtual control.
pub fn derivative_error(
    ctl: &Controller,
    rng: &mut Rng,
    points: usize,
    radius: f64,
) -> Result<f64> {
    const STEP: f64 = 1e-6;
    let (n, q) = (ctl.spec.n, ctl.spec.q);
    let mut worst = 0.0f64;
    for _ in 0..points {
        let p = random_point(rng, &ctl.spec, radius);
        let (_, partials) = ctl.alpha_partials(&p.x, &p.est)?;
        for j in 1..n {
            let alpha = |x: &[f64], est: &Estimates| ctl.virtual_control(j, x, est);
            let exact = &partials[j - 1];
            let mut check = |exact: f64, plus: f64, minus: f64| {
                let fd = (plus - minus) / (2.0 * STEP);
                worst = worst.max((exact - fd).abs() / (1.0 + exact.abs()));
            };
            for k in 0..j {
                let (mut xp, mut xm) = (p.x.clone(), p.x.clone());
                xp[k] += STEP;
                xm[k] -= STEP;
                check(exact.dx[k], alpha(&xp, &p.est)?, alpha(&xm, &p.est)?);
            }
            for k in 0..q {
                let (mut ep, mut em) = (p.est.clone(), p.est.clone());
                ep.theta_hat[k] += STEP;
                em.theta_hat[k] -= STEP;
                check(exact.dtheta[k], alpha(&p.x, &ep)?, alpha(&p.x, &em)?);
            }
            let (mut ep, mut em) = (p.est.clone(), p.est.clone());
            ep.delta_hat += STEP;
            em.delta_hat -= STEP;
            check(exact.ddelta, alpha(&p.x, &ep)?, alpha(&p.x, &em)?);
        }
    }
    Ok(worst)
}

/// Largest relative factorization residuals (W, Ω) seen by the controller.
pub fn residuals(
    ctl: &Controller,
    rng: &mut Rng,
    points: usize,
    radius: f64,
) -> Result<(f64, f64)> {
    let (mut w, mut o) = (0.0f64, 0.0f64);
    for _ in 0..points {
        let p = random_point(rng, &ctl.spec, radius);
        let out = ctl.evaluate(p.t, &p.x, &p.est)?;
        for (i, om) in out.omega.iter().enumerate() {
            let wi = &out.w[i];
            let mut res = 0.0;
            let mut scale = 0.0;
            for (c, ov) in om.iter().enumerate() {
                let wz: f64 = (0..=i).map(|r| wi[r][c] * out.z[r]).sum();
                res += (ov - wz).powi(2);
                scale += ov * ov;
            }
            w = w.max(res.sqrt() / (1.0 + scale.sqrt()));
        }
        let recon: f64 = out.omega_bar.iter().zip(&out.z).map(|(a, b)| a * b).sum();
        o = o.max((out.omega_big - recon).abs() / (1.0 + out.omega_big.abs()));
    }
    Ok((w, o))
}

/// Largest Frobenius gap between quadrature and closed-form W₂ on the demo.
pub fn demo_w2_gap(rng: &mut Rng, points: usize) -> Result<f64> {
    let (spec, _, gains) = builtin_demo();
    let closed = Controller::new(spec.clone(), gains.clone(), Default::default())?;
    let generic = Controller::new(spec.without_closed_forms(), gains, Default::default())?;
    let mut worst = 0.0f64;
    for _ in 0..points {
        let p = random_point(rng, &closed.spec, 2.0);
        let a = closed.hadamard_w(2, &p.x, &p.est)?;
        let b = generic.hadamard_w(2, &p.x, &p.est)?;
        let gap: f64 = a
            .iter()
            .flatten()
            .zip(b.iter().flatten())
            .map(|(u, v)| (u - v).powi(2))
            .sum::<f64>()
            .sqrt();
        worst = worst.max(gap);
    }
    Ok(worst)
}

/// Straight-line second-order scheme with consistent signs, independent of
/// the recursion. Returns (α₁, W₂[0], Ω̄, 𝒦, u_e, θ̂̇, ρ̂̇, δ̂̇).
pub struct DemoScheme {
    pub alpha1: f64,
    pub w2: f64,
    pub omega_bar: [f64; 2],
    pub k_gain: f64,
    pub u_e: f64,
    pub dtheta: f64,
    pub drho: f64,
    pub ddelta: f64,
}

pub fn demo_scheme(
    g: &GainConfig,
    b_bar: f64,
    law: DeltaLaw,
    t: f64,
    x: &[f64],
    e: &Estimates,
) -> DemoScheme {
    let (k1, k2, gam, eps) = (g.k[0], g.k[1], g.gamma[0], g.eps_omega);
    let (x1, x2, th, dl, rho) = (x[0], x[1], e.theta_hat[0], e.delta_hat, e.rho_hat);
    let alpha1 = -k1 * x1 - x1 * x1 * th - dl / 2.0 * (x1 * x1 + 2.0) * x1 - x1 / (2.0 * eps);
    let ax = -k1 - 2.0 * x1 * th - dl / 2.0 * (3.0 * x1 * x1 + 2.0) - 1.0 / (2.0 * eps);
    let at = -x1 * x1;
    let ad = -(x1 * x1 + 2.0) * x1 / 2.0;
    let z2 = x2 - alpha1;
    let w2 = -ax * x1;
    let w2sq = w2 * w2;
    let sigma = (-g.xi * t).exp();
    let ob1 = 1.0
        - ax * (-k1 - dl / 2.0 * (x1 * x1 + 2.0) - 1.0 / (2.0 * eps))
        - at * gam * x1 * x1
        - g.gamma_delta / 2.0 * ad * (x1 * x1 + 2.0) * x1;
    let ob2 = -ax * (1.0 + gam * x1.powi(4)) - g.gamma_delta / 2.0 * ad * (w2sq + 1.0) * z2
        + b_bar * g.gamma_u / (z2 * z2 + sigma * sigma).sqrt();
    let k_gain = k2 + 0.5 * (dl * w2sq + dl + eps * (ob1 * ob1 + ob2 * ob2) + 1.0 / eps);
    let tau_delta = 0.5 * (w2sq + 1.0) * z2 * z2 + 0.5 * (x1 * x1 + 2.0) * x1 * x1;
    DemoScheme {
        alpha1,
        w2,
        omega_bar: [ob1, ob2],
        k_gain,
        u_e: -rho * k_gain * z2,
        dtheta: gam * x1.powi(3) - gam * z2 * ax * x1 * x1,
        drho: g.gamma_rho * k_gain * z2 * z2,
        ddelta: law.gain(g) * tau_delta,
    }
}

/// Largest relative gap between the recursion and [`demo_scheme`].
pub fn demo_scheme_gap(rng: &mut Rng, points: usize, law: DeltaLaw) -> Result<f64> {
    let (spec, _, gains) = builtin_demo();
    let ctl = Controller::new(
        spec.without_closed_forms(),
        gains.clone(),
        ControllerOptions {
            delta_law: law,
            ..Default::default()
        },
    )?;
    let mut worst = 0.0f64;
    for _ in 0..points {
        let p = random_point(rng, &ctl.spec, 2.0);
        let out = ctl.evaluate(p.t, &p.x, &p.est)?;
        let s = demo_scheme(&gains, spec.b_bar, law, p.t, &p.x, &p.est);
        let pairs = [
            (out.alpha[0], s.alpha1),
            (out.w[1][0][0], s.w2),
            (out.omega_bar[0], s.omega_bar[0]),
            (out.omega_bar[1], s.omega_bar[1]),
            (out.k_gain, s.k_gain),
            (out.u_e, s.u_e),
            (out.dtheta_hat[0], s.dtheta),
            (out.drho_hat, s.drho),
            (out.ddelta_hat, s.ddelta),
        ];
        for (a, b) in pairs {
            worst = worst.max((a - b).abs() / (1.0 + b.abs()));
        }
    }
    Ok(worst)
}

/// Smallest `𝒦 − (k_n + 1/(2ε))` seen; negative means the bound failed.
pub fn gain_margin(ctl: &Controller, rng: &mut Rng, points: usize) -> Result<f64> {
    let g = &ctl.gains;
    let floor = g.k[ctl.spec.n - 1] + 0.5 / g.eps_omega;
    let mut worst = f64::INFINITY;
    for _ in 0..points {
        let p = random_point(rng, &ctl.spec, 2.0);
        let out = ctl.evaluate(p.t, &p.x, &p.est)?;
        worst = worst.min(out.k_gain - floor);
    }
    Ok(worst)
}

/// Smallest δ̂̇ and ρ̂̇·direction seen.
pub fn rate_signs(ctl: &Controller, rng: &mut Rng, points: usize) -> Result<(f64, f64)> {
    let dir = ctl.spec.control_direction.sign();
    let (mut d, mut r) = (f64::INFINITY, f64::INFINITY);
    for _ in 0..points {
        let p = random_point(rng, &ctl.spec, 2.0);
        let out = ctl.evaluate(p.t, &p.x, &p.est)?;
        d = d.min(out.ddelta_hat);
        r = r.min(out.drho_hat * dir);
    }
    Ok((d, r))
}

fn suite(name: &'static str, r: Result<(bool, String)>) -> SuiteResult {
    match r {
        Ok((passed, detail)) => SuiteResult {
            name,
            passed,
            detail,
        },
        Err(e) => SuiteResult {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

/// Runs every suite. `mutate_kappa` flips the sign of κ in the controllers
/// under test, which the gain and Lyapunov-style suites must catch.
pub fn run_all(seed: u64, mutate_kappa: bool) -> Vec<SuiteResult> {
    let opts = ControllerOptions {
        kappa_sign_flip: mutate_kappa,
        ..Default::default()
    };
    let demo = || {
        let (spec, _, gains) = builtin_demo();
        Controller::new(spec, gains, opts.clone())
    };
    let chain3 = || {
        let (spec, _, gains) = builtin_chain3();
        Controller::new(spec, gains, opts.clone())
    };
    let mut out = Vec::new();

    let mut r = rng(seed);
    let slack = soft_sign_slack(&mut r, 100_000);
    out.push(suite(
        "soft-sign-gap",
        Ok((slack >= -1e-12, format!("min slack {slack:.3e}"))),
    ));

    out.push(suite(
        "derivatives",
        (|| {
            let mut r = rng(seed.wrapping_add(1));
            let a = derivative_error(&demo()?, &mut r, 100, 2.0)?;
            let b = derivative_error(&chain3()?, &mut r, 100, 1.0)?;
            Ok((
                a.max(b) < 1e-6,
                format!("max relative error n=2 {a:.3e}, n=3 {b:.3e}"),
            ))
        })(),
    ));

    out.push(suite(
        "residuals",
        (|| {
            let mut r = rng(seed.wrapping_add(2));
            let (spec, _, gains) = builtin_demo();
            let generic = Controller::new(spec.without_closed_forms(), gains, opts.clone())?;
            let (w2, o2) = residuals(&generic, &mut r, 100, 2.0)?;
            let (w3, o3) = residuals(&chain3()?, &mut r, 10, 1.0)?;
            let gap = demo_w2_gap(&mut r, 100)?;
            let worst = w2.max(o2).max(w3).max(o3);
            Ok((
                worst <= 1e-8 && gap < 1e-8,
                format!("max residual {worst:.3e}, W2 closed-form gap {gap:.3e}"),
            ))
        })(),
    ));

    out.push(suite(
        "second-order-scheme",
        (|| {
            let mut r = rng(seed.wrapping_add(3));
            let a = demo_scheme_gap(&mut r, 100, DeltaLaw::General)?;
            let b = demo_scheme_gap(&mut r, 100, DeltaLaw::Printed)?;
            Ok((
                a.max(b) < 1e-10,
                format!("max relative gap {:.3e}", a.max(b)),
            ))
        })(),
    ));

    out.push(suite(
        "gain-positivity",
        (|| {
            let mut r = rng(seed.wrapping_add(4));
            let m = gain_margin(&demo()?, &mut r, 1000)?;
            Ok((m >= 0.0, format!("min K - (k_n + 1/(2 eps)) = {m:.3e}")))
        })(),
    ));

    out.push(suite(
        "monotonicity",
        (|| {
            let mut r = rng(seed.wrapping_add(5));
            let (d, rho) = rate_signs(&demo()?, &mut r, 10_000)?;
            let (spec, truth, gains) = builtin_demo();
            let cfg = SimConfig {
                t_end: 1.0,
                h: 1e-4,
                decimate: 1,
                demo_delta_law: DeltaLaw::Printed,
                ..Default::default()
            };
            let mut ok_traj = true;
            if !mutate_kappa {
                let o = run(&spec, &truth, &gains, &cfg)?;
                ok_traj = o
                    .trace
                    .samples
                    .windows(2)
                    .all(|w| w[1].delta_hat >= w[0].delta_hat && w[1].rho_hat >= w[0].rho_hat);
            }
            Ok((
                d >= 0.0 && rho >= 0.0 && ok_traj,
                format!(
                    "min delta rate {d:.3e}, min rho rate {rho:.3e}, trajectory monotone {ok_traj}"
                ),
            ))
        })(),
    ));
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn soft_sign_small_sweep() {
        assert!(soft_sign_slack(&mut rng(7), 10_000) >= -1e-12);
    }

    #[test]
    fn demo_derivatives_match_differences() {
        let (spec, _, gains) = builtin_demo();
        let ctl = Controller::new(spec, gains, Default::default()).unwrap();
        assert!(derivative_error(&ctl, &mut rng(3), 20, 2.0).unwrap() < 1e-6);
    }

    #[test]
    fn scheme_matches_recursion() {
        assert!(demo_scheme_gap(&mut rng(11), 20, DeltaLaw::Printed).unwrap() < 1e-10);
    }

    #[test]
    fn mutation_is_caught() {
        let results = run_all(1, true);
        let gain = results
            .iter()
            .find(|r| r.name == "gain-positivity")
            .unwrap();
        assert!(!gain.passed);
    }
}
