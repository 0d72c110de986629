//! Command implementations behind the `etadapt` binary. Each returns the
//! process exit code: 0 success, 1 runtime abort, 2 config rejection.

use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::config::{load, Loaded, Resolved};
use crate::error::{Error, Result};
use crate::sim::{run_partial, ControllerKind, RunOutput};
use crate::verify;

#[derive(Debug, Clone, Serialize)]
pub struct Versions {
    pub etadapt: &'static str,
    pub trace_format: u32,
}

/// Everything needed to replay a run; `resolved` alone determines the output.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: &'static str,
    pub config_path: PathBuf,
    pub resolved: Resolved,
    pub output_dir: PathBuf,
    pub versions: Versions,
    pub runtime_seconds: f64,
    pub status: Vec<(String, String)>,
}

/// Options shared by every command.
#[derive(Debug, Clone)]
pub struct Common {
    pub out: PathBuf,
    pub decimate: Option<usize>,
}

fn report(e: &Error) -> i32 {
    eprintln!("error: {e}");
    e.exit_code()
}

fn load_with(config: &Path, common: &Common) -> Result<Loaded> {
    let mut l = load(config)?;
    if let Some(k) = common.decimate {
        if k == 0 {
            return Err(Error::config("--decimate must be at least 1"));
        }
        l.resolved.sim.decimate = k;
    }
    Ok(l)
}

fn write_outputs(dir: &Path, out: &RunOutput) -> Result<()> {
    fs::create_dir_all(dir)?;
    out.trace
        .write_csv(BufWriter::new(File::create(dir.join("trace.csv"))?))?;
    out.events
        .write_csv(BufWriter::new(File::create(dir.join("events.csv"))?))?;
    fs::write(dir.join("summary.txt"), out.summary.to_text())?;
    Ok(())
}

fn write_manifest(dir: &Path, m: &RunManifest) -> Result<()> {
    let text = serde_json::to_string_pretty(m).map_err(|e| Error::Invariant(e.to_string()))?;
    fs::write(dir.join("manifest.json"), text + "\n")?;
    fs::write(dir.join("resolved.toml"), m.resolved.to_toml())?;
    Ok(())
}

fn manifest(
    command: &'static str,
    config: &Path,
    l: &Loaded,
    out: &Path,
    start: Instant,
) -> RunManifest {
    RunManifest {
        command,
        config_path: config.to_path_buf(),
        resolved: l.resolved.clone(),
        output_dir: out.to_path_buf(),
        versions: Versions {
            etadapt: env!("CARGO_PKG_VERSION"),
            trace_format: 1,
        },
        runtime_seconds: start.elapsed().as_secs_f64(),
        status: Vec::new(),
    }
}

/// Single simulation: trace.csv, events.csv, summary.txt, manifest.json and
/// resolved.toml in the output directory. An aborted run still writes what
/// it recorded before the abort, then exits 1.
pub fn cmd_run(config: &Path, common: &Common) -> i32 {
    let start = Instant::now();
    let result = (|| -> Result<Option<Error>> {
        let l = load_with(config, common)?;
        let r = &l.resolved;
        let (out, abort) = run_partial(&l.spec, &l.truth, &r.gains, &r.sim)?;
        write_outputs(&common.out, &out)?;
        let mut m = manifest("run", config, &l, &common.out, start);
        let status = abort.as_ref().map_or("ok".into(), |e| e.to_string());
        m.status.push((r.sim.controller.name().into(), status));
        write_manifest(&common.out, &m)?;
        print!("{}", out.summary.to_text());
        Ok(abort)
    })();
    match result {
        Ok(None) => 0,
        Ok(Some(e)) | Err(e) => report(&e),
    }
}

type Partial = (RunOutput, Option<Error>);

/// One row of the comparison table.
#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub controller: ControllerKind,
    pub status: String,
    pub transmissions: Option<usize>,
    pub terminal_x: Option<f64>,
    pub terminal_dtheta: Option<f64>,
}

impl ComparisonRow {
    fn aborted(controller: ControllerKind) -> Self {
        ComparisonRow {
            controller,
            status: "aborted".into(),
            transmissions: None,
            terminal_x: None,
            terminal_dtheta: None,
        }
    }
}

pub fn comparison_table(rows: &[ComparisonRow]) -> String {
    let num = |v: Option<f64>| v.map_or("nan".to_string(), |x| format!("{x:.6e}"));
    let mut s = format!(
        "{:<12} {:<8} {:>13} {:>14} {:>16}\n",
        "controller", "status", "transmissions", "terminal_abs_x", "terminal_dtheta"
    );
    for r in rows {
        s.push_str(&format!(
            "{:<12} {:<8} {:>13} {:>14} {:>16}\n",
            r.controller.name(),
            r.status,
            r.transmissions.map_or("nan".to_string(), |n| n.to_string()),
            num(r.terminal_x),
            num(r.terminal_dtheta),
        ));
    }
    s
}

/// Parses a table written by [`comparison_table`].
pub fn parse_comparison(text: &str) -> Vec<ComparisonRow> {
    let opt = |s: &str| s.parse::<f64>().ok().filter(|v| v.is_finite());
    text.lines()
        .skip(1)
        .filter_map(|line| {
            let f: Vec<&str> = line.split_whitespace().collect();
            let name = *f.first()?;
            let controller = ControllerKind::ALL.into_iter().find(|k| k.name() == name)?;
            Some(ComparisonRow {
                controller,
                status: f.get(1)?.to_string(),
                transmissions: f.get(2)?.parse().ok(),
                terminal_x: opt(f.get(3)?),
                terminal_dtheta: opt(f.get(4)?),
            })
        })
        .collect()
}

/// Runs the three controllers in parallel on the same configuration. Each
/// writes into its own subdirectory; a controller that aborts is marked in
/// the table and the others still finish. Exit 1 if any aborted.
pub fn cmd_compare(config: &Path, common: &Common) -> i32 {
    let start = Instant::now();
    let l = match load_with(config, common) {
        Ok(l) => l,
        Err(e) => return report(&e),
    };
    let results: Vec<(ControllerKind, Result<Partial>)> = std::thread::scope(|s| {
        let handles: Vec<_> = ControllerKind::ALL
            .into_iter()
            .map(|kind| {
                let l = &l;
                s.spawn(move || {
                    let mut cfg = l.resolved.sim.clone();
                    cfg.controller = kind;
                    (
                        kind,
                        run_partial(&l.spec, &l.truth, &l.resolved.gains, &cfg),
                    )
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("run thread panicked"))
            .collect()
    });
    let mut rows = Vec::new();
    let mut m = manifest("compare", config, &l, &common.out, start);
    let mut failed = false;
    for (kind, res) in &results {
        let dir = common.out.join(kind.name());
        let (row, detail) = match res {
            Ok((out, abort)) => {
                if let Err(e) = write_outputs(&dir, out) {
                    return report(&e);
                }
                let s = &out.summary;
                match abort {
                    None => (
                        ComparisonRow {
                            controller: *kind,
                            status: "ok".into(),
                            transmissions: Some(s.transmissions),
                            terminal_x: Some(s.final_x.iter().map(|v| v * v).sum::<f64>().sqrt()),
                            terminal_dtheta: Some(s.terminal_dtheta),
                        },
                        "ok".to_string(),
                    ),
                    Some(e) => (ComparisonRow::aborted(*kind), e.to_string()),
                }
            }
            Err(e) => (ComparisonRow::aborted(*kind), e.to_string()),
        };
        if row.status != "ok" {
            failed = true;
            eprintln!("{}: {detail}", kind.name());
        }
        m.status.push((kind.name().into(), detail));
        rows.push(row);
    }
    let table = comparison_table(&rows);
    let written = fs::create_dir_all(&common.out)
        .map_err(Error::from)
        .and_then(|_| fs::write(common.out.join("comparison.txt"), &table).map_err(Error::from))
        .and_then(|_| {
            m.runtime_seconds = start.elapsed().as_secs_f64();
            write_manifest(&common.out, &m)
        });
    if let Err(e) = written {
        return report(&e);
    }
    print!("{table}");
    i32::from(failed)
}

/// Invariant suites; nonzero exit lists the failing suites and the seed.
pub fn cmd_verify(seed: u64, mutate_kappa: bool) -> i32 {
    println!("seed = {seed}");
    let results = verify::run_all(seed, mutate_kappa);
    for r in &results {
        println!(
            "{} {}: {}",
            if r.passed { "PASS" } else { "FAIL" },
            r.name,
            r.detail
        );
    }
    let failing: Vec<_> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.name)
        .collect();
    if failing.is_empty() {
        0
    } else {
        eprintln!("failing suites: {} (seed {seed})", failing.join(", "));
        1
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_round_trips() {
        let rows = vec![
            ComparisonRow {
                controller: ControllerKind::Proposed,
                status: "ok".into(),
                transmissions: Some(12),
                terminal_x: Some(0.5),
                terminal_dtheta: Some(1e-9),
            },
            ComparisonRow {
                controller: ControllerKind::Baseline,
                status: "aborted".into(),
                transmissions: None,
                terminal_x: None,
                terminal_dtheta: None,
            },
        ];
        let text = comparison_table(&rows);
        assert_eq!(text.lines().count(), 3);
        let back = parse_comparison(&text);
        assert_eq!(back[0].transmissions, Some(12));
        assert_eq!(back[0].terminal_x, Some(0.5));
        assert_eq!(back[1].status, "aborted");
        assert_eq!(back[1].terminal_dtheta, None);
    }
}
