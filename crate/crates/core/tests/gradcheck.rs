use stmoe_core::gradcheck::{run, sweep_config, GradcheckConfig};
use stmoe_core::Model;

#[test]
fn desk_model_at_hidden_eight_passes() {
    let cfg = GradcheckConfig {
        hidden: vec![8],
        experts: vec![2],
        ..GradcheckConfig::default()
    };
    let report = run(&cfg).unwrap();
    assert!(report.passes(1e-4), "max relative error {}", report.max_rel_err);
    // Every parameter tensor of the model is covered.
    let model = Model::new(sweep_config(&cfg, 8, 2), 0).unwrap();
    let names: Vec<&str> = report.tensors.iter().map(|t| t.name.as_str()).collect();
    let expected: Vec<&str> = model.params.iter().map(|(n, _)| n).collect();
    assert_eq!(names, expected);
    assert!(report.tensors.iter().all(|t| t.checked > 0));
}

#[test]
fn empty_sweep_is_rejected() {
    let cfg = GradcheckConfig {
        hidden: vec![],
        ..GradcheckConfig::default()
    };
    assert!(run(&cfg).is_err());
}
