use transvg_core::selfcheck::{check_model, check_ops, run, SelfCheckOptions};
use transvg_core::RegInitMode;

#[test]
fn every_op_and_reg_mode_passes() {
    let report = run(&SelfCheckOptions::default()).unwrap();
    for r in &report.results {
        println!("{r}");
    }
    assert!(report.passed());
    assert!(report.results.iter().all(|r| r.seeds >= 5));
    assert!(report.seconds < 120.0, "took {:.1}s", report.seconds);
}

#[test]
fn corrupted_backward_rule_is_reported() {
    let opts = SelfCheckOptions {
        corrupt: Some("softmax".into()),
        ..Default::default()
    };
    let results = check_ops(&opts).unwrap();
    let softmax = results.iter().find(|r| r.name == "softmax").unwrap();
    assert!(!softmax.passed(), "{softmax}");
    assert!(results.iter().filter(|r| r.name != "softmax").all(|r| r.passed()));

    let opts = SelfCheckOptions {
        corrupt: Some("model_loss[learnable]".into()),
        reg_modes: vec![RegInitMode::Learnable],
        seeds: vec![0],
        ..Default::default()
    };
    let results = check_model(&opts).unwrap();
    assert!(!results[0].passed(), "{}", results[0]);
}
