use gmpt::verify::{run, Faults, VerifyOptions, VerifyReport};

fn report(faults: Faults) -> VerifyReport {
    run(&VerifyOptions { cells_in: 2, cells_out: 2, faults, ..VerifyOptions::default() }).unwrap()
}

#[test]
fn clean_run_passes_every_check() {
    let r = report(Faults::default());
    assert!(r.passed(), "{}", r.to_table());
    assert!(r.check("interface_normal_flux").unwrap().informational);
    assert!(r.to_table().lines().count() > r.checks.len());
}

#[test]
fn dropped_sign_factor_is_detected() {
    let r = report(Faults { flip_m_sign: true, ..Faults::default() });
    let failed: Vec<_> = r.failures().iter().map(|c| c.name.as_str()).collect();
    assert!(failed.contains(&"m_alternation_oracle"), "{}", r.to_table());
    assert!(r.check("reduction_chain").unwrap().passed);
}

#[test]
fn tampered_alternating_tensor_is_detected() {
    let r = report(Faults { tamper_epsilon: true, ..Faults::default() });
    let failed: Vec<_> = r.failures().iter().map(|c| c.name.as_str()).collect();
    assert_eq!(failed, ["reduction_chain"], "{}", r.to_table());
}
