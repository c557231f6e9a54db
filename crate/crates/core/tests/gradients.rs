use dhpf::training::{gradcheck, GradcheckConfig};

#[test]
fn analytic_gradients_match_finite_differences() {
    let cfg = GradcheckConfig::default();
    let report = gradcheck(&cfg).unwrap();
    println!("{}", report.table());
    println!("gates: {:?}", report.gates_on);
    assert!(report.passed(), "max rel err {}", report.max_rel_err);
}
