//! Event-triggered transmission of the control input.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Actuator-side hold state.
#[derive(Debug, Clone, Default)]
pub struct TriggerState {
    pub k: usize,
    pub t_k: f64,
    pub u_held: f64,
    pub u_e_last: f64,
    last_t: Option<f64>,
}

impl TriggerState {
    pub fn new() -> Self {
        Self::default()
    }

    /// Transmits `u_e` when it has drifted at least `gamma_u` from the held
    /// value, and always on the first call. Returns the applied input and
    /// whether an event fired.
    pub fn maybe_fire(&mut self, t: f64, u_e: f64, gamma_u: f64) -> Result<(f64, bool)> {
        if let Some(last) = self.last_t {
            if t < last {
                return Err(Error::TimeRegression { last, t });
            }
        }
        let first = self.last_t.is_none();
        self.last_t = Some(t);
        self.u_e_last = u_e;
        if first || (u_e - self.u_held).abs() >= gamma_u {
            self.k += 1;
            self.t_k = t;
            self.u_held = u_e;
            return Ok((u_e, true));
        }
        Ok((self.u_held, false))
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    pub events: Vec<(f64, f64)>,
}

impl EventLog {
    pub fn push(&mut self, t: f64, u_e: f64) {
        self.events.push((t, u_e));
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn intervals(&self) -> Vec<f64> {
        self.events.windows(2).map(|w| w[1].0 - w[0].0).collect()
    }

    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(out, "t_k,u_e")?;
        for (t, u) in &self.events {
            writeln!(out, "{t:.16e},{u:.16e}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ZenoStats {
    pub count: usize,
    pub min_interval: Option<f64>,
    pub mean_interval: Option<f64>,
    pub mu_hat: f64,
}

impl ZenoStats {
    /// Analytical lower bound γ_u/μ̂ on inter-event times.
    pub fn interval_bound(&self, gamma_u: f64) -> f64 {
        if self.mu_hat > 0.0 {
            gamma_u / self.mu_hat
        } else {
            f64::INFINITY
        }
    }
}

/// Interval statistics; with fewer than two events only the count is set.
pub fn zeno_stats(log: &EventLog, mu_hat: f64) -> ZenoStats {
    let iv = log.intervals();
    let (min_interval, mean_interval) = if iv.is_empty() {
        (None, None)
    } else {
        let min = iv.iter().copied().fold(f64::INFINITY, f64::min);
        (Some(min), Some(iv.iter().sum::<f64>() / iv.len() as f64))
    };
    ZenoStats {
        count: log.len(),
        min_interval,
        mean_interval,
        mu_hat,
    }
}

/// Largest finite-difference slope `|Δu/Δt|` of a sampled series.
pub fn max_slope(t: &[f64], u: &[f64]) -> f64 {
    t.windows(2)
        .zip(u.windows(2))
        .map(|(tw, uw)| ((uw[1] - uw[0]) / (tw[1] - tw[0])).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_call_fires() {
        let mut s = TriggerState::new();
        assert_eq!(s.maybe_fire(0.0, 0.37, 0.1).unwrap(), (0.37, true));
        assert_eq!(s.u_held, 0.37);
    }

    #[test]
    fn threshold_is_inclusive() {
        let mut s = TriggerState::new();
        s.maybe_fire(0.0, 0.0, 0.125).unwrap();
        assert_eq!(s.maybe_fire(0.1, 0.125, 0.125).unwrap(), (0.125, true));
        assert_eq!(
            s.maybe_fire(0.2, 0.125 + 0.99 * 0.125, 0.125).unwrap(),
            (0.125, false)
        );
        assert_eq!(s.k, 2);
    }

    #[test]
    fn time_regression_is_rejected() {
        let mut s = TriggerState::new();
        s.maybe_fire(1.0, 0.0, 0.1).unwrap();
        assert!(matches!(
            s.maybe_fire(0.5, 0.0, 0.1),
            Err(Error::TimeRegression { .. })
        ));
    }

    #[test]
    fn stats_from_three_events() {
        let log = EventLog {
            events: vec![(0.0, 0.0), (1.0, 1.0), (3.0, 2.0)],
        };
        let st = zeno_stats(&log, 2.0);
        assert_eq!(st.count, 3);
        assert_eq!(st.min_interval, Some(1.0));
        assert_eq!(st.mean_interval, Some(1.5));
        assert_eq!(st.interval_bound(0.1), 0.05);
    }

    #[test]
    fn stats_with_one_event() {
        let log = EventLog {
            events: vec![(0.0, 1.0)],
        };
        let st = zeno_stats(&log, 0.0);
        assert_eq!(
            (st.count, st.min_interval, st.mean_interval),
            (1, None, None)
        );
    }

    #[test]
    fn slope_of_ramp() {
        assert_eq!(max_slope(&[0.0, 0.5, 1.0], &[0.0, 1.0, 1.5]), 2.0);
    }

    #[test]
    fn csv_has_header() {
        let log = EventLog {
            events: vec![(0.0, 1.5)],
        };
        let mut buf = Vec::new();
        log.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("t_k,u_e\n0.0000000000000000e0,1.5000000000000000e0"));
    }
}
