//! Fixed-step closed-loop simulation, the two comparison controllers, and
//! Lyapunov diagnostics.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::controller::{
    AnalysisConstants, CascadeOutput, Controller, ControllerOptions, DeltaLaw, Estimates,
};
use crate::error::{Error, Result};
use crate::model::{
    cholesky, cholesky_solve, plant_derivative, GainConfig, SystemSpec, TruthSignals,
};
use crate::trigger::{zeno_stats, EventLog, TriggerState, ZenoStats};

/// Any logged magnitude above this aborts the run.
pub const GUARD: f64 = 1e6;

/// Comparison controllers divide by b; refuse below this.
pub const B_GUARD: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ControllerKind {
    #[default]
    Proposed,
    Baseline,
    Controller1,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 3] = [
        ControllerKind::Proposed,
        ControllerKind::Baseline,
        ControllerKind::Controller1,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ControllerKind::Proposed => "proposed",
            ControllerKind::Baseline => "baseline",
            ControllerKind::Controller1 => "controller1",
        }
    }
}

/// Sign convention for the comparison schemes. `Printed` takes the
/// closed-form expressions literally; `Standard` uses the signs that make the
/// backstepping cancellation work (see README).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ComparisonLaw {
    #[default]
    Standard,
    Printed,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Controller1Params {
    pub m_bar: f64,
    pub eps: f64,
    pub sigma_leak: f64,
}

impl Default for Controller1Params {
    fn default() -> Self {
        Controller1Params {
            m_bar: 2.0,
            eps: 0.01,
            sigma_leak: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    #[serde(rename = "T")]
    pub t_end: f64,
    pub h: f64,
    pub controller: ControllerKind,
    pub x0: Vec<f64>,
    pub diagnostics: bool,
    pub demo_delta_law: DeltaLaw,
    pub decimate: usize,
    pub comparison_law: ComparisonLaw,
    pub c1_m_bar: f64,
    pub c1_eps: f64,
    pub c1_sigma_leak: f64,
    pub quad_nodes: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        let c1 = Controller1Params::default();
        SimConfig {
            t_end: 20.0,
            h: 1e-4,
            controller: ControllerKind::Proposed,
            x0: vec![1.0, -4.0],
            diagnostics: true,
            demo_delta_law: DeltaLaw::General,
            decimate: 10,
            comparison_law: ComparisonLaw::Standard,
            c1_m_bar: c1.m_bar,
            c1_eps: c1.eps,
            c1_sigma_leak: c1.sigma_leak,
            quad_nodes: 16,
        }
    }
}

impl SimConfig {
    pub fn validate(&self, spec: &SystemSpec) -> Result<()> {
        if !(self.t_end > 0.0 && self.t_end.is_finite()) {
            return Err(Error::config(format!(
                "T must be positive, got {}",
                self.t_end
            )));
        }
        if !(self.h > 0.0 && self.h <= self.t_end) {
            return Err(Error::config(format!(
                "h must lie in (0, T], got {}",
                self.h
            )));
        }
        if self.x0.len() != spec.n || self.x0.iter().any(|v| !v.is_finite()) {
            return Err(Error::config(format!("x0 needs {} finite entries", spec.n)));
        }
        if self.decimate == 0 {
            return Err(Error::config("decimate must be at least 1"));
        }
        if self.quad_nodes < 8 {
            return Err(Error::config("quad_nodes must be at least 8"));
        }
        for (name, v) in [
            ("c1_m_bar", self.c1_m_bar),
            ("c1_eps", self.c1_eps),
            ("c1_sigma_leak", self.c1_sigma_leak),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.controller != ControllerKind::Proposed && !is_demo_shape(spec) {
            return Err(Error::config(
                "comparison controllers are only defined for the second-order demo system",
            ));
        }
        Ok(())
    }

    pub fn steps(&self) -> usize {
        (self.t_end / self.h).round() as usize
    }

    pub fn c1(&self) -> Controller1Params {
        Controller1Params {
            m_bar: self.c1_m_bar,
            eps: self.c1_eps,
            sigma_leak: self.c1_sigma_leak,
        }
    }

    pub fn controller_options(&self) -> ControllerOptions {
        ControllerOptions {
            delta_law: self.demo_delta_law,
            quad_nodes: self.quad_nodes,
            ..ControllerOptions::default()
        }
    }
}

fn is_demo_shape(spec: &SystemSpec) -> bool {
    spec.name == "demo" && spec.n == 2 && spec.q == 1
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub t: f64,
    pub x: Vec<f64>,
    pub z: Vec<f64>,
    pub u: f64,
    pub u_e: f64,
    pub theta_hat: Vec<f64>,
    pub rho_hat: f64,
    pub delta_hat: f64,
    /// An event fired at this sample or since the previous one.
    pub event: bool,
    pub v: f64,
    pub vz: f64,
    pub rhs: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trace {
    pub n: usize,
    pub q: usize,
    pub samples: Vec<Sample>,
}

impl Trace {
    pub fn header(&self) -> Vec<String> {
        let mut h = vec!["t".to_string()];
        h.extend((1..=self.n).map(|i| format!("x{i}")));
        h.extend((1..=self.n).map(|i| format!("z{i}")));
        h.push("u".into());
        h.push("u_e".into());
        h.extend((1..=self.q).map(|i| format!("theta_hat_{i}")));
        for c in ["rho_hat", "delta_hat", "event", "V", "Vz", "rhs"] {
            h.push(c.into());
        }
        h
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "{}", self.header().join(","))?;
        let mut line = String::new();
        for s in &self.samples {
            line.clear();
            let mut push = |v: f64| {
                if !line.is_empty() {
                    line.push(',');
                }
                line.push_str(&format!("{v:.16e}"));
            };
            push(s.t);
            s.x.iter().for_each(|v| push(*v));
            s.z.iter().for_each(|v| push(*v));
            push(s.u);
            push(s.u_e);
            s.theta_hat.iter().for_each(|v| push(*v));
            push(s.rho_hat);
            push(s.delta_hat);
            line.push_str(if s.event { ",1" } else { ",0" });
            for v in [s.v, s.vz, s.rhs] {
                line.push_str(&format!(",{v:.16e}"));
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LyapunovDiagnostics {
    pub constants: AnalysisConstants,
    /// k = 2·min k_i.
    pub k: f64,
    pub v: Vec<f64>,
    pub vz: Vec<f64>,
    /// Centered differences; NaN at the two ends.
    pub v_dot: Vec<f64>,
    pub rhs: Vec<f64>,
    /// Samples left out because a truth-signal switch lies within h.
    pub excluded: Vec<bool>,
    pub max_violation: f64,
    pub satisfied_fraction: f64,
    /// V(0) + b̄γ_u/ξ.
    pub integrated_bound: f64,
    pub integrated_bound_holds: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub controller: ControllerKind,
    pub steps: usize,
    pub final_t: f64,
    pub final_x: Vec<f64>,
    pub final_theta_hat: Vec<f64>,
    pub final_rho_hat: f64,
    pub final_delta_hat: f64,
    pub transmissions: usize,
    pub min_interval: Option<f64>,
    pub mean_interval: Option<f64>,
    pub mu_hat: f64,
    /// max |dθ̂/dt| over the final second.
    pub terminal_dtheta: f64,
    /// sup |x| over t ≤ 5.
    pub sup_x_early: f64,
    /// sup |x| over t ≥ T − 5.
    pub sup_x_late: f64,
    /// sup |dθ̂/dt| over t ≥ T − 5.
    pub sup_dtheta_late: f64,
    pub max_signal: f64,
    pub max_lyapunov_violation: Option<f64>,
    pub lyapunov_satisfied_fraction: Option<f64>,
    /// Set when the run stopped early; the other fields cover the prefix.
    pub aborted: Option<String>,
}

#[derive(Debug, Clone)]
pub struct RunOutput {
    pub trace: Trace,
    pub events: EventLog,
    pub zeno: ZenoStats,
    pub diagnostics: Option<LyapunovDiagnostics>,
    pub summary: RunSummary,
}

/// One classical RK4 step of `f`.
pub fn rk4_step<F>(mut f: F, t: f64, y: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let k1 = f(t, y)?;
    rk4_from(k1, f, t, y, h)
}

/// RK4 with the first stage supplied by the caller.
fn rk4_from<F>(k1: Vec<f64>, mut f: F, t: f64, y: &[f64], h: f64) -> Result<Vec<f64>>
where
    F: FnMut(f64, &[f64]) -> Result<Vec<f64>>,
{
    let axpy =
        |a: f64, k: &[f64]| -> Vec<f64> { y.iter().zip(k).map(|(yi, ki)| yi + a * ki).collect() };
    let k2 = f(t + 0.5 * h, &axpy(0.5 * h, &k1))?;
    let k3 = f(t + 0.5 * h, &axpy(0.5 * h, &k2))?;
    let k4 = f(t + h, &axpy(h, &k3))?;
    Ok((0..y.len())
        .map(|i| y[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect())
}

/// Demo-scheme quantities shared by the two comparison controllers.
struct Backstep {
    z1: f64,
    z2: f64,
    a1: f64,
    ax: f64,
    at: f64,
}

fn backstep(x: &[f64], theta_hat: f64, k1: f64) -> Backstep {
    let x1 = x[0];
    let a1 = -k1 * x1 - x1 * x1 * theta_hat;
    Backstep {
        z1: x1,
        z2: x[1] - a1,
        a1,
        ax: -k1 - 2.0 * x1 * theta_hat,
        at: -x1 * x1,
    }
}

/// Classical adaptive backstepping for the demo. Returns (u, dθ̂).
pub fn baseline_controller(
    x: &[f64],
    theta_hat: f64,
    gains: &GainConfig,
    b: f64,
    law: ComparisonLaw,
) -> Result<(f64, f64)> {
    let (u_num, dth) = baseline_parts(x, theta_hat, gains, law);
    if b.abs() < B_GUARD {
        return Err(Error::DivisionGuard { t: f64::NAN, b });
    }
    Ok((u_num / b, dth))
}

/// Numerator of u (before dividing by b) and dθ̂.
fn baseline_parts(x: &[f64], theta_hat: f64, gains: &GainConfig, law: ComparisonLaw) -> (f64, f64) {
    let (k1, k2, g) = (gains.k[0], gains.k[1], gains.gamma[0]);
    let Backstep { z1, z2, a1, ax, at } = backstep(x, theta_hat, k1);
    let x1sq = x[0] * x[0];
    match law {
        ComparisonLaw::Printed => {
            let dth = g * z1 * x1sq - g * x1sq * ax;
            let u = -k2 * z2 - z1 - z2 * ax - a1 * ax - x1sq * theta_hat * ax - at * dth;
            (u, dth)
        }
        ComparisonLaw::Standard => {
            let dth = g * (z1 * x1sq - z2 * ax * x1sq);
            let u = -k2 * z2 - z1 + ax * (x[1] + x1sq * theta_hat) + at * dth;
            (u, dth)
        }
    }
}

/// Event-triggered comparison scheme with tanh compensation and leakage.
/// Returns (u_e, dθ̂).
pub fn controller1(
    x: &[f64],
    theta_hat: f64,
    gains: &GainConfig,
    p: &Controller1Params,
    b: f64,
    law: ComparisonLaw,
) -> Result<(f64, f64)> {
    let (u_num, dth) = baseline_parts(x, theta_hat, gains, law);
    let z2 = backstep(x, theta_hat, gains.k[0]).z2;
    if b.abs() < B_GUARD {
        return Err(Error::DivisionGuard { t: f64::NAN, b });
    }
    let u = (u_num - p.m_bar * (z2 * p.m_bar / p.eps).tanh()) / b;
    Ok((u, dth - p.sigma_leak * theta_hat))
}

struct Tracker {
    n: usize,
    t_end: f64,
    sup_x_early: f64,
    sup_x_late: f64,
    sup_dtheta_late: f64,
    terminal_dtheta: f64,
    max_signal: f64,
    mu_hat: f64,
    prev_u_e: Option<f64>,
    theta_sum: Vec<f64>,
    theta_series: Vec<Vec<f64>>,
    min_abs_b: f64,
    switch_prev: Option<Vec<f64>>,
    switch_steps: Vec<usize>,
}

impl Tracker {
    fn new(n: usize, q: usize, t_end: f64) -> Self {
        Tracker {
            n,
            t_end,
            sup_x_early: 0.0,
            sup_x_late: 0.0,
            sup_dtheta_late: 0.0,
            terminal_dtheta: 0.0,
            max_signal: 0.0,
            mu_hat: 0.0,
            prev_u_e: None,
            theta_sum: vec![0.0; q],
            theta_series: Vec::new(),
            min_abs_b: f64::INFINITY,
            switch_prev: None,
            switch_steps: Vec::new(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn observe(
        &mut self,
        k: usize,
        t: f64,
        h: f64,
        state: &[f64],
        extra: &[f64],
        u_e: f64,
        dtheta: &[f64],
        truth: &TruthSignals,
    ) -> Result<()> {
        let x = &state[..self.n];
        for v in state.iter().chain(extra) {
            if !v.is_finite() || v.abs() > GUARD {
                return Err(Error::Blowup {
                    t,
                    state: state.to_vec(),
                });
            }
            self.max_signal = self.max_signal.max(v.abs());
        }
        let xn = norm(x);
        if t <= 5.0 {
            self.sup_x_early = self.sup_x_early.max(xn);
        }
        let dth = norm(dtheta);
        if t >= self.t_end - 5.0 {
            self.sup_x_late = self.sup_x_late.max(xn);
            self.sup_dtheta_late = self.sup_dtheta_late.max(dth);
        }
        if t >= self.t_end - 1.0 {
            self.terminal_dtheta = self.terminal_dtheta.max(dth);
        }
        if let Some(prev) = self.prev_u_e {
            self.mu_hat = self.mu_hat.max(((u_e - prev) / h).abs());
        }
        self.prev_u_e = Some(u_e);

        let theta = (truth.theta)(t, x);
        for (s, v) in self.theta_sum.iter_mut().zip(&theta) {
            *s += v;
        }
        self.theta_series.push(theta);
        self.min_abs_b = self.min_abs_b.min((truth.b)(t, x).abs());
        if let Some(sw) = &truth.switching {
            let now: Vec<f64> = sw(t, x).iter().map(|v| crate::model::sgn(*v)).collect();
            if let Some(prev) = &self.switch_prev {
                if prev != &now {
                    self.switch_steps.push(k);
                }
            }
            self.switch_prev = Some(now);
        }
        Ok(())
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn check_truth_b(spec: &SystemSpec, truth: &TruthSignals, t: f64, x: &[f64]) -> Result<f64> {
    let b = (truth.b)(t, x);
    let ok = b * spec.control_direction.sign() > 0.0 && b.abs() <= spec.b_bar * (1.0 + 1e-12);
    if !ok {
        return Err(Error::TruthSignal { t, b });
    }
    Ok(b)
}

/// Simulates one closed loop.
pub fn run(
    spec: &SystemSpec,
    truth: &TruthSignals,
    gains: &GainConfig,
    cfg: &SimConfig,
) -> Result<RunOutput> {
    match run_partial(spec, truth, gains, cfg)? {
        (out, None) => Ok(out),
        (_, Some(e)) => Err(e),
    }
}

/// Like [`run`], but a runtime abort still yields the trace recorded up to
/// that point together with the error.
pub fn run_partial(
    spec: &SystemSpec,
    truth: &TruthSignals,
    gains: &GainConfig,
    cfg: &SimConfig,
) -> Result<(RunOutput, Option<Error>)> {
    cfg.validate(spec)?;
    match cfg.controller {
        ControllerKind::Proposed => run_proposed(spec, truth, gains, cfg),
        kind => run_comparison(spec, truth, gains, cfg, kind),
    }
}

fn run_proposed(
    spec: &SystemSpec,
    truth: &TruthSignals,
    gains: &GainConfig,
    cfg: &SimConfig,
) -> Result<(RunOutput, Option<Error>)> {
    let ctl = Controller::new(spec.clone(), gains.clone(), cfg.controller_options())?;
    let (n, q) = (spec.n, spec.q);
    let h = cfg.h;
    let steps = cfg.steps();
    let split = |s: &[f64]| Estimates {
        theta_hat: s[n..n + q].to_vec(),
        rho_hat: s[n + q],
        delta_hat: s[n + q + 1],
    };
    let field = |t: f64, s: &[f64], u: f64, out: &CascadeOutput| -> Result<Vec<f64>> {
        let mut d = plant_derivative(spec, truth, t, &s[..n], u)?;
        d.extend_from_slice(&out.dtheta_hat);
        d.push(out.drho_hat);
        d.push(out.ddelta_hat);
        Ok(d)
    };

    let est0 = Estimates::initial(gains);
    let mut state: Vec<f64> = cfg.x0.clone();
    state.extend_from_slice(&est0.theta_hat);
    state.push(est0.rho_hat);
    state.push(est0.delta_hat);

    let mut trig = TriggerState::new();
    let mut log = EventLog::default();
    let mut tracker = Tracker::new(n, q, cfg.t_end);
    let mut samples = Vec::new();
    let mut pending_event = false;

    let abort = (|| -> Result<()> {
        for k in 0..=steps {
            let t = k as f64 * h;
            let est = split(&state);
            let out = ctl.evaluate(t, &state[..n], &est)?;
            check_truth_b(spec, truth, t, &state[..n])?;
            let (u, fired) = trig.maybe_fire(t, out.u_e, gains.gamma_u)?;
            if fired {
                log.push(t, out.u_e);
            }
            pending_event |= fired;
            let mut extra = out.z.clone();
            extra.push(out.u_e);
            tracker.observe(k, t, h, &state, &extra, out.u_e, &out.dtheta_hat, truth)?;

            if k % cfg.decimate == 0 || k == steps {
                samples.push(Sample {
                    t,
                    x: state[..n].to_vec(),
                    z: out.z.clone(),
                    u,
                    u_e: out.u_e,
                    theta_hat: est.theta_hat.clone(),
                    rho_hat: est.rho_hat,
                    delta_hat: est.delta_hat,
                    event: pending_event,
                    v: f64::NAN,
                    vz: 0.5 * out.z.iter().map(|z| z * z).sum::<f64>(),
                    rhs: f64::NAN,
                });
                pending_event = false;
            }
            if k == steps {
                break;
            }
            let k1 = field(t, &state, u, &out)?;
            state = rk4_from(
                k1,
                |ts, s| {
                    let o = ctl.evaluate(ts, &s[..n], &split(s))?;
                    field(ts, s, u, &o)
                },
                t,
                &state,
                h,
            )
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::Blowup {
                    t,
                    state: state.clone(),
                },
                other => other,
            })?;
        }
        Ok(())
    })()
    .err();
    if samples.is_empty() {
        return Err(abort.expect("no sample without an abort"));
    }

    let mut trace = Trace { n, q, samples };
    let zeno = zeno_stats(&log, tracker.mu_hat);
    let diagnostics = if cfg.diagnostics {
        let d = lyapunov_diagnostics(&trace, &tracker, spec, gains, cfg)?;
        for (s, (v, r)) in trace.samples.iter_mut().zip(d.v.iter().zip(&d.rhs)) {
            s.v = *v;
            s.rhs = *r;
        }
        Some(d)
    } else {
        for s in trace.samples.iter_mut() {
            s.rhs = rhs_value(spec, gains, s.vz, s.t);
        }
        None
    };
    let mut summary = summarize(
        cfg,
        steps,
        &trace,
        &zeno,
        &tracker,
        diagnostics.as_ref(),
        log.len(),
    );
    summary.aborted = abort.as_ref().map(|e| e.to_string());
    let out = RunOutput {
        trace,
        events: log,
        zeno,
        diagnostics,
        summary,
    };
    Ok((out, abort))
}

fn run_comparison(
    spec: &SystemSpec,
    truth: &TruthSignals,
    gains: &GainConfig,
    cfg: &SimConfig,
    kind: ControllerKind,
) -> Result<(RunOutput, Option<Error>)> {
    let (n, q) = (spec.n, spec.q);
    let h = cfg.h;
    let steps = cfg.steps();
    let law = cfg.comparison_law;
    let p1 = cfg.c1();
    let law_at = |t: f64, s: &[f64]| -> Result<(f64, f64)> {
        let b = (truth.b)(t, &s[..n]);
        let r = match kind {
            ControllerKind::Baseline => baseline_controller(&s[..n], s[n], gains, b, law),
            _ => controller1(&s[..n], s[n], gains, &p1, b, law),
        };
        r.map_err(|e| match e {
            Error::DivisionGuard { b, .. } => Error::DivisionGuard { t, b },
            other => other,
        })
    };
    let triggered = kind == ControllerKind::Controller1;

    let mut state: Vec<f64> = cfg.x0.clone();
    state.extend_from_slice(&gains.theta_hat0);
    let mut trig = TriggerState::new();
    let mut log = EventLog::default();
    let mut tracker = Tracker::new(n, q, cfg.t_end);
    let mut samples = Vec::new();
    let mut pending_event = false;

    let abort = (|| -> Result<()> {
        for k in 0..=steps {
            let t = k as f64 * h;
            check_truth_b(spec, truth, t, &state[..n])?;
            let (u_e, dth) = law_at(t, &state)?;
            let u = if triggered {
                let (u, fired) = trig.maybe_fire(t, u_e, p1.m_bar)?;
                if fired {
                    log.push(t, u_e);
                }
                pending_event |= fired;
                u
            } else {
                u_e
            };
            let bs = backstep(&state, state[n], gains.k[0]);
            let z = vec![bs.z1, bs.z2];
            let mut extra = z.clone();
            extra.push(u_e);
            tracker.observe(k, t, h, &state, &extra, u_e, &[dth], truth)?;
            if k % cfg.decimate == 0 || k == steps {
                samples.push(Sample {
                    t,
                    x: state[..n].to_vec(),
                    z,
                    u,
                    u_e,
                    theta_hat: vec![state[n]],
                    rho_hat: f64::NAN,
                    delta_hat: f64::NAN,
                    event: pending_event,
                    v: f64::NAN,
                    vz: f64::NAN,
                    rhs: f64::NAN,
                });
                pending_event = false;
            }
            if k == steps {
                break;
            }
            let field = |ts: f64, s: &[f64]| -> Result<Vec<f64>> {
                let (ue, d) = law_at(ts, s)?;
                let applied = if triggered { u } else { ue };
                let mut out = plant_derivative(spec, truth, ts, &s[..n], applied)?;
                out.push(d);
                Ok(out)
            };
            state = rk4_step(field, t, &state, h)?;
        }
        Ok(())
    })()
    .err();
    if samples.is_empty() {
        return Err(abort.expect("no sample without an abort"));
    }

    let trace = Trace { n, q, samples };
    let zeno = zeno_stats(&log, tracker.mu_hat);
    let transmissions = if triggered { log.len() } else { steps + 1 };
    let mut summary = summarize(cfg, steps, &trace, &zeno, &tracker, None, transmissions);
    summary.aborted = abort.as_ref().map(|e| e.to_string());
    let out = RunOutput {
        trace,
        events: log,
        zeno,
        diagnostics: None,
        summary,
    };
    Ok((out, abort))
}

fn rhs_value(spec: &SystemSpec, gains: &GainConfig, vz: f64, t: f64) -> f64 {
    -2.0 * gains.k_min() * vz + spec.b_bar.abs() * gains.gamma_u * (-gains.xi * t).exp()
}

fn lyapunov_diagnostics(
    trace: &Trace,
    tracker: &Tracker,
    spec: &SystemSpec,
    gains: &GainConfig,
    cfg: &SimConfig,
) -> Result<LyapunovDiagnostics> {
    let count = tracker.theta_series.len().max(1) as f64;
    let ell_theta: Vec<f64> = tracker.theta_sum.iter().map(|s| s / count).collect();
    let delta_theta = tracker
        .theta_series
        .iter()
        .map(|th| {
            norm(
                &th.iter()
                    .zip(&ell_theta)
                    .map(|(a, b)| a - b)
                    .collect::<Vec<_>>(),
            )
        })
        .fold(0.0, f64::max);
    let ell_b = spec.control_direction.sign() * tracker.min_abs_b;
    let constants = AnalysisConstants {
        ell_theta,
        delta_theta,
        ell_b,
        mu: tracker.mu_hat,
    };
    lyapunov_series(trace, &constants, spec, gains, cfg, &tracker.switch_steps)
}

/// V, its centered-difference derivative and the decay bound along a trace.
pub fn lyapunov_series(
    trace: &Trace,
    constants: &AnalysisConstants,
    spec: &SystemSpec,
    gains: &GainConfig,
    cfg: &SimConfig,
    switch_steps: &[usize],
) -> Result<LyapunovDiagnostics> {
    let q = spec.q;
    let l =
        cholesky(&gains.gamma, q).ok_or_else(|| Error::config("Gamma is not positive definite"))?;
    let delta_gain = cfg.demo_delta_law.gain(gains);
    let k = 2.0 * gains.k_min();
    let samples = &trace.samples;
    let mut v = Vec::with_capacity(samples.len());
    let mut vz = Vec::with_capacity(samples.len());
    let mut rhs = Vec::with_capacity(samples.len());
    for s in samples {
        let e: Vec<f64> = constants
            .ell_theta
            .iter()
            .zip(&s.theta_hat)
            .map(|(a, b)| a - b)
            .collect();
        let ge = cholesky_solve(&l, q, &e);
        let v_theta = 0.5 * e.iter().zip(&ge).map(|(a, b)| a * b).sum::<f64>();
        let v_rho = constants.ell_b.abs() / (2.0 * gains.gamma_rho)
            * (1.0 / constants.ell_b - s.rho_hat).powi(2);
        let v_delta = (constants.delta_theta - s.delta_hat).powi(2) / (2.0 * delta_gain);
        let z = 0.5 * s.z.iter().map(|a| a * a).sum::<f64>();
        vz.push(z);
        v.push(z + v_theta + v_rho + v_delta);
        rhs.push(rhs_value(spec, gains, z, s.t));
    }
    let m = samples.len();
    let mut v_dot = vec![f64::NAN; m];
    for j in 1..m.saturating_sub(1) {
        v_dot[j] = (v[j + 1] - v[j - 1]) / (samples[j + 1].t - samples[j - 1].t);
    }
    // a switch detected at step k happened somewhere in [t_{k−1}, t_k]
    let h = cfg.h;
    let mut excluded = vec![false; m];
    let mut idx = 0;
    for (j, s) in samples.iter().enumerate() {
        while idx < switch_steps.len() && (switch_steps[idx] as f64) * h < s.t - h {
            idx += 1;
        }
        if let Some(&ks) = switch_steps.get(idx) {
            let (lo, hi) = ((ks as f64 - 1.0) * h, ks as f64 * h);
            excluded[j] = s.t >= lo - h && s.t <= hi + h;
        }
    }
    let mut max_violation = f64::NEG_INFINITY;
    let (mut checked, mut ok) = (0usize, 0usize);
    for j in 0..m {
        if v_dot[j].is_nan() || excluded[j] {
            continue;
        }
        let slack = v_dot[j] - rhs[j];
        max_violation = max_violation.max(slack);
        checked += 1;
        if slack <= 1e-3 * (1.0 + v_dot[j].abs()) {
            ok += 1;
        }
    }
    let integrated_bound =
        v.first().copied().unwrap_or(0.0) + spec.b_bar.abs() * gains.gamma_u / gains.xi;
    let integrated_bound_holds = v.iter().all(|x| *x <= integrated_bound);
    Ok(LyapunovDiagnostics {
        constants: constants.clone(),
        k,
        v,
        vz,
        v_dot,
        rhs,
        excluded,
        max_violation,
        satisfied_fraction: if checked > 0 {
            ok as f64 / checked as f64
        } else {
            1.0
        },
        integrated_bound,
        integrated_bound_holds,
    })
}

fn summarize(
    cfg: &SimConfig,
    steps: usize,
    trace: &Trace,
    zeno: &ZenoStats,
    tracker: &Tracker,
    diag: Option<&LyapunovDiagnostics>,
    transmissions: usize,
) -> RunSummary {
    let last = trace.samples.last().expect("at least one sample");
    RunSummary {
        controller: cfg.controller,
        steps,
        final_t: last.t,
        final_x: last.x.clone(),
        final_theta_hat: last.theta_hat.clone(),
        final_rho_hat: last.rho_hat,
        final_delta_hat: last.delta_hat,
        transmissions,
        min_interval: zeno.min_interval,
        mean_interval: zeno.mean_interval,
        mu_hat: zeno.mu_hat,
        terminal_dtheta: tracker.terminal_dtheta,
        sup_x_early: tracker.sup_x_early,
        sup_x_late: tracker.sup_x_late,
        sup_dtheta_late: tracker.sup_dtheta_late,
        max_signal: tracker.max_signal,
        max_lyapunov_violation: diag.map(|d| d.max_violation),
        lyapunov_satisfied_fraction: diag.map(|d| d.satisfied_fraction),
        aborted: None,
    }
}

impl RunSummary {
    /// `key = value` lines.
    pub fn to_text(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("none".to_string(), |x| format!("{x:.16e}"));
        let vec = |v: &[f64]| {
            v.iter()
                .map(|x| format!("{x:.16e}"))
                .collect::<Vec<_>>()
                .join(" ")
        };
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        line(
            "status",
            self.aborted
                .as_ref()
                .map_or("ok".into(), |e| format!("aborted: {e}")),
        );
        line("controller", self.controller.name().into());
        line("steps", self.steps.to_string());
        line("final_t", format!("{:.16e}", self.final_t));
        line("final_x", vec(&self.final_x));
        line("final_theta_hat", vec(&self.final_theta_hat));
        line("final_rho_hat", format!("{:.16e}", self.final_rho_hat));
        line("final_delta_hat", format!("{:.16e}", self.final_delta_hat));
        line("transmissions", self.transmissions.to_string());
        line("min_interval", opt(self.min_interval));
        line("mean_interval", opt(self.mean_interval));
        line("mu_hat", format!("{:.16e}", self.mu_hat));
        line("terminal_dtheta", format!("{:.16e}", self.terminal_dtheta));
        line("sup_x_early", format!("{:.16e}", self.sup_x_early));
        line("sup_x_late", format!("{:.16e}", self.sup_x_late));
        line("sup_dtheta_late", format!("{:.16e}", self.sup_dtheta_late));
        line("max_signal", format!("{:.16e}", self.max_signal));
        line("max_lyapunov_violation", opt(self.max_lyapunov_violation));
        line(
            "lyapunov_satisfied_fraction",
            opt(self.lyapunov_satisfied_fraction),
        );
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::builtin_demo;

    #[test]
    fn rk4_zero_field_keeps_state() {
        let y = rk4_step(|_, y| Ok(vec![0.0; y.len()]), 0.0, &[1.0, -2.0], 0.1).unwrap();
        assert_eq!(y, vec![1.0, -2.0]);
    }

    #[test]
    fn rk4_exponential_decay() {
        // one step reproduces the degree-4 Taylor polynomial; the remaining
        // gap to e^{−h} is the h⁵/120 local error, about 8.3e−8 here
        let h = 0.1f64;
        let y = rk4_step(|_, y| Ok(vec![-y[0]]), 0.0, &[1.0], h).unwrap();
        let taylor = 1.0 - h + h * h / 2.0 - h.powi(3) / 6.0 + h.powi(4) / 24.0;
        assert!((y[0] - taylor).abs() < 1e-15);
        assert!((y[0] - (-h).exp()).abs() < 1e-7);
        let mut y = vec![1.0];
        for k in 0..10 {
            y = rk4_step(|_, y| Ok(vec![-y[0]]), k as f64 * 0.01, &y, 0.01).unwrap();
        }
        assert!((y[0] - (-h).exp()).abs() < 1e-8);
    }

    #[test]
    fn rk4_is_fourth_order() {
        let solve = |h: f64| {
            let mut y = vec![1.0];
            let steps = (1.0 / h).round() as usize;
            for k in 0..steps {
                y = rk4_step(|t, y| Ok(vec![y[0] * t.cos()]), k as f64 * h, &y, h).unwrap();
            }
            (y[0] - 1f64.sin().exp()).abs()
        };
        let ratio = solve(0.1) / solve(0.05);
        assert!((ratio - 16.0).abs() < 2.0, "ratio {ratio}");
    }

    #[test]
    fn baseline_examples() {
        let (_, _, g) = builtin_demo();
        for law in [ComparisonLaw::Standard, ComparisonLaw::Printed] {
            assert_eq!(
                baseline_controller(&[0.0, 0.0], 0.0, &g, 2.0, law).unwrap(),
                (0.0, 0.0)
            );
        }
        let bs = backstep(&[1.0, -4.0], 0.0, 0.65);
        assert_eq!(bs.a1, -0.65);
        assert!((bs.z2 + 3.35).abs() < 1e-15);
        assert!(baseline_controller(&[1.0, 0.0], 0.0, &g, 0.0, ComparisonLaw::Standard).is_err());
    }

    #[test]
    fn baseline_standard_by_hand() {
        let (_, _, g) = builtin_demo();
        // x = (1, −4), θ̂ = 0: α₁ = −0.65, ∂α₁/∂x₁ = −0.65, ∂α₁/∂θ̂ = −1, z₂ = −3.35
        let dth = 0.01 * (1.0 - (-3.35) * (-0.65));
        let u = (-0.05 * -3.35 - 1.0 + (-0.65) * (-4.0) + (-1.0) * dth) / 2.0;
        let (bu, bd) =
            baseline_controller(&[1.0, -4.0], 0.0, &g, 2.0, ComparisonLaw::Standard).unwrap();
        assert!((bd - dth).abs() < 1e-15);
        assert!((bu - u).abs() < 1e-14);
    }

    #[test]
    fn controller1_tanh_limits() {
        let (_, _, g) = builtin_demo();
        let p = Controller1Params::default();
        assert_eq!(
            controller1(&[0.0, 0.0], 0.0, &g, &p, 2.0, ComparisonLaw::Standard)
                .unwrap()
                .0,
            0.0
        );
        let (a, _) = controller1(&[0.0, 50.0], 0.0, &g, &p, 1.0, ComparisonLaw::Standard).unwrap();
        let (b, _) =
            baseline_controller(&[0.0, 50.0], 0.0, &g, 1.0, ComparisonLaw::Standard).unwrap();
        assert!((b - a - 2.0).abs() < 1e-12);
    }

    #[test]
    fn controller1_leakage_decays_exponentially() {
        // z ≡ 0 keeps only the leakage term: θ̂(t) = θ̂(0)e^{−σt}
        let (_, _, g) = builtin_demo();
        let p = Controller1Params::default();
        let mut th = vec![1.0];
        let h = 1e-2;
        for k in 0..100 {
            th = rk4_step(
                |_, y| {
                    Ok(vec![
                        controller1(&[0.0, 0.0], y[0], &g, &p, 2.0, ComparisonLaw::Standard)?.1,
                    ])
                },
                k as f64 * h,
                &th,
                h,
            )
            .unwrap();
        }
        assert!((th[0] - (-0.1f64).exp()).abs() < 1e-10);
    }

    #[test]
    fn origin_stays_put() {
        let (spec, truth, gains) = builtin_demo();
        for controller in ControllerKind::ALL {
            let cfg = SimConfig {
                t_end: 0.05,
                x0: vec![0.0, 0.0],
                controller,
                ..Default::default()
            };
            let out = run(&spec, &truth, &gains, &cfg).unwrap();
            for s in &out.trace.samples {
                assert_eq!(s.x, vec![0.0, 0.0]);
                assert_eq!(s.u, 0.0);
            }
            if controller != ControllerKind::Baseline {
                assert_eq!(out.events.len(), 1);
            }
        }
    }

    #[test]
    fn short_run_is_deterministic_and_monotone() {
        let (spec, truth, gains) = builtin_demo();
        let cfg = SimConfig {
            t_end: 0.2,
            h: 1e-3,
            decimate: 1,
            ..Default::default()
        };
        let a = run(&spec, &truth, &gains, &cfg).unwrap();
        let b = run(&spec, &truth, &gains, &cfg).unwrap();
        assert_eq!(a.trace, b.trace);
        for w in a.trace.samples.windows(2) {
            assert!(w[1].delta_hat >= w[0].delta_hat);
            assert!(w[1].rho_hat >= w[0].rho_hat);
        }
        let mut buf = Vec::new();
        a.trace.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(
            text.starts_with("t,x1,x2,z1,z2,u,u_e,theta_hat_1,rho_hat,delta_hat,event,V,Vz,rhs\n")
        );
        assert_eq!(text.lines().count(), 202);
    }

    #[test]
    fn config_validation() {
        let (spec, _, _) = builtin_demo();
        let ok = SimConfig::default();
        ok.validate(&spec).unwrap();
        assert!(SimConfig {
            h: 0.0,
            ..ok.clone()
        }
        .validate(&spec)
        .is_err());
        assert!(SimConfig {
            x0: vec![1.0],
            ..ok.clone()
        }
        .validate(&spec)
        .is_err());
        assert!(SimConfig { decimate: 0, ..ok }.validate(&spec).is_err());
    }
}
