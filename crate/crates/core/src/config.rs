//! TOML run configuration with `[system]`, `[gains]` and `[sim]` sections.
//! Every key is optional and falls back to the chosen system's defaults;
//! unknown keys are rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::controller::DeltaLaw;
use crate::error::{Error, Result};
use crate::model::{builtin, builtin_x0, GainConfig, SystemSpec, TruthSignals};
use crate::sim::{ComparisonLaw, ControllerKind, SimConfig};

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    system: Option<RawSystem>,
    gains: Option<RawGains>,
    sim: Option<RawSim>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSystem {
    name: Option<String>,
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum GammaValue {
    Scalar(f64),
    Matrix(Vec<f64>),
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawGains {
    k: Option<Vec<f64>>,
    #[serde(rename = "Gamma")]
    gamma: Option<GammaValue>,
    gamma_rho: Option<f64>,
    gamma_delta: Option<f64>,
    eps_omega: Option<f64>,
    xi: Option<f64>,
    gamma_u: Option<f64>,
    theta_hat0: Option<Vec<f64>>,
    rho_hat0: Option<f64>,
    delta_hat0: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawSim {
    #[serde(rename = "T")]
    t_end: Option<f64>,
    h: Option<f64>,
    controller: Option<ControllerKind>,
    x0: Option<Vec<f64>>,
    diagnostics: Option<bool>,
    demo_delta_law: Option<DeltaLaw>,
    decimate: Option<usize>,
    comparison_law: Option<ComparisonLaw>,
    c1_m_bar: Option<f64>,
    c1_eps: Option<f64>,
    c1_sigma_leak: Option<f64>,
    quad_nodes: Option<usize>,
}

/// Fully resolved parameters; serializing this reproduces the run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Resolved {
    pub system: ResolvedSystem,
    pub gains: GainConfig,
    pub sim: SimConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedSystem {
    pub name: String,
}

/// A validated configuration together with the system it names.
pub struct Loaded {
    pub resolved: Resolved,
    pub spec: SystemSpec,
    pub truth: TruthSignals,
}

fn line_of(text: &str, offset: usize) -> usize {
    text[..offset.min(text.len())].matches('\n').count() + 1
}

/// Line on which `key` is assigned inside `[section]`, if it can be found.
fn key_line(text: &str, section: &str, key: &str) -> Option<usize> {
    let mut current = String::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if let Some(name) = line.strip_prefix('[').and_then(|l| l.strip_suffix(']')) {
            current = name.trim().to_string();
        } else if current == section {
            if let Some((k, _)) = line.split_once('=') {
                if k.trim() == key {
                    return Some(i + 1);
                }
            }
        }
    }
    None
}

pub fn parse(text: &str) -> Result<Loaded> {
    let raw: RawConfig = toml::from_str(text).map_err(|e| Error::Config {
        line: e.span().map(|s| line_of(text, s.start)),
        message: e.message().trim().to_string(),
    })?;
    let name = raw
        .system
        .and_then(|s| s.name)
        .unwrap_or_else(|| "demo".to_string());
    let (spec, truth, mut gains) = builtin(&name).map_err(|e| Error::Config {
        line: key_line(text, "system", "name"),
        message: e.to_string(),
    })?;
    let q = spec.q;
    if let Some(g) = raw.gains {
        if let Some(v) = g.k {
            gains.k = v;
        }
        match g.gamma {
            Some(GammaValue::Scalar(s)) => {
                gains.gamma = (0..q * q)
                    .map(|i| if i % (q + 1) == 0 { s } else { 0.0 })
                    .collect();
            }
            Some(GammaValue::Matrix(m)) => gains.gamma = m,
            None => {}
        }
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = g.$f { gains.$f = v; } )* };
        }
        take!(
            gamma_rho,
            gamma_delta,
            eps_omega,
            xi,
            gamma_u,
            theta_hat0,
            rho_hat0,
            delta_hat0
        );
    }
    let mut sim = SimConfig {
        x0: builtin_x0(&name),
        ..SimConfig::default()
    };
    if let Some(s) = raw.sim {
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = s.$f { sim.$f = v; } )* };
        }
        take!(
            t_end,
            h,
            controller,
            x0,
            diagnostics,
            demo_delta_law,
            decimate,
            comparison_law,
            c1_m_bar,
            c1_eps,
            c1_sigma_leak,
            quad_nodes
        );
    }
    let resolved = Resolved {
        system: ResolvedSystem { name },
        gains,
        sim,
    };
    validate(&resolved, &spec).map_err(|e| match e {
        Error::Config {
            line: None,
            message,
        } => Error::Config {
            line: guess_line(text, &message),
            message,
        },
        other => other,
    })?;
    Ok(Loaded {
        resolved,
        spec,
        truth,
    })
}

/// Points a validation message at the line of the key it names.
fn guess_line(text: &str, message: &str) -> Option<usize> {
    let first = message.split_whitespace().next()?;
    let stripped = first.trim_end_matches(|c: char| c.is_ascii_digit());
    [first, stripped]
        .iter()
        .flat_map(|key| ["gains", "sim"].map(|section| key_line(text, section, key)))
        .flatten()
        .next()
}

fn validate(r: &Resolved, spec: &SystemSpec) -> Result<()> {
    r.gains.validate(spec)?;
    r.sim.validate(spec)
}

pub fn load(path: &Path) -> Result<Loaded> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
    parse(&text)
}

impl Resolved {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("resolved config serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_the_demo() {
        let l = parse("").unwrap();
        assert_eq!(l.resolved.system.name, "demo");
        assert_eq!(l.resolved.gains.k, vec![0.65, 0.05]);
        assert_eq!(l.resolved.sim.x0, vec![1.0, -4.0]);
    }

    #[test]
    fn scalar_and_matrix_gamma() {
        let l = parse("[system]\nname = \"chain3\"\n[gains]\nGamma = 0.5\n").unwrap();
        assert_eq!(l.resolved.gains.gamma, vec![0.5, 0.0, 0.0, 0.5]);
        let l =
            parse("[system]\nname = \"chain3\"\n[gains]\nGamma = [2.0, 0.5, 0.5, 1.0]\n").unwrap();
        assert_eq!(l.resolved.gains.gamma, vec![2.0, 0.5, 0.5, 1.0]);
    }

    #[test]
    fn unknown_key_rejected_with_line() {
        let err = parse("[sim]\nT = 1.0\nfoo = 3\n").err().unwrap();
        match err {
            Error::Config { line, .. } => assert_eq!(line, Some(3)),
            other => panic!("{other:?}"),
        }
        assert_eq!(parse("[sim]\nfoo = 3\n").err().unwrap().exit_code(), 2);
    }

    #[test]
    fn negative_gain_rejected() {
        let err = parse("[gains]\nk = [-1.0, 0.05]\n").err().unwrap();
        assert_eq!(err.exit_code(), 2);
        match err {
            Error::Config { line, .. } => assert_eq!(line, Some(2)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_threshold_rejected() {
        assert!(parse("[gains]\ngamma_u = 0.0\n").is_err());
    }

    #[test]
    fn malformed_toml_has_line() {
        match parse("[sim]\nT = = 2\n").err().unwrap() {
            Error::Config { line, .. } => assert_eq!(line, Some(2)),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn enum_values_parse() {
        let l = parse("[sim]\ncontroller = \"controller1\"\ndemo_delta_law = \"printed\"\ncomparison_law = \"printed\"\n").unwrap();
        assert_eq!(l.resolved.sim.controller, ControllerKind::Controller1);
        assert_eq!(l.resolved.sim.demo_delta_law, DeltaLaw::Printed);
        assert!(parse("[sim]\ncontroller = \"pid\"\n").is_err());
    }

    #[test]
    fn resolved_round_trips() {
        let l = parse("[sim]\nT = 2\nh = 1e-3\n[gains]\nxi = 0.5\n").unwrap();
        let again = parse(&l.resolved.to_toml()).unwrap();
        assert_eq!(l.resolved, again.resolved);
    }
}
