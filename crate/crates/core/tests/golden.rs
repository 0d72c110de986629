//! Frozen run summaries. Regenerate with UPDATE_GOLDEN=1 after a deliberate
//! change to the dynamics, gains or step size. The default-decay run is
//! chaotic after t ≈ 6, so its digits are tied to this platform's libm.

use std::path::Path;

use etadapt::config::load;
use etadapt::sim::run_partial;

fn check(name: &str) {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let l = load(&dir.join(format!("{name}.toml"))).unwrap();
    let (out, _) = run_partial(&l.spec, &l.truth, &l.resolved.gains, &l.resolved.sim).unwrap();
    let text = out.summary.to_text();
    let path = dir.join(format!("{name}.summary"));
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&path, &text).unwrap();
        return;
    }
    let frozen =
        std::fs::read_to_string(&path).expect("golden summary missing; run with UPDATE_GOLDEN=1");
    assert_eq!(text, frozen, "{name} summary drifted from the golden file");
}

#[test]
fn default_decay_run_matches_golden() {
    check("demo");
}

#[test]
fn slow_decay_run_matches_golden() {
    check("demo_slow_sigma");
}

#[test]
fn slow_decay_run_converges() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden");
    let l = load(&dir.join("demo_slow_sigma.toml")).unwrap();
    let (out, abort) = run_partial(&l.spec, &l.truth, &l.resolved.gains, &l.resolved.sim).unwrap();
    assert!(abort.is_none());
    let s = &out.summary;
    assert!(s.sup_x_late <= 0.1 * s.sup_x_early);
    assert!(s.sup_dtheta_late < 1e-3);
    assert!(s.transmissions * 10 <= s.steps + 1);
}
