use plearner::pipeline::{fit_plearner, PipelineConfig};
use plearner::simulate::{generate, DgpConfig};

#[test]
fn kernel_ridge_beats_constant_predictor_end_to_end() {
    let train = generate(2000, 61, &DgpConfig::default());
    let test = generate(1000, 62, &DgpConfig::default());
    let fit = fit_plearner(&train.dataset, &PipelineConfig::default(), 63).unwrap();
    let constant = fit.scores.gamma.iter().sum::<f64>() / fit.scores.len() as f64;
    let tau_hat = fit.model.predict(test.dataset.x()).unwrap();
    let mse = |pred: &dyn Fn(usize) -> f64| {
        (0..test.tau_true.len()).map(|i| (pred(i) - test.tau_true[i]).powi(2)).sum::<f64>() / test.tau_true.len() as f64
    };
    let (mse_krr, mse_const) = (mse(&|i| tau_hat[i]), mse(&|_| constant));
    assert!(2.0 * mse_krr <= mse_const, "kernel ridge {mse_krr}, constant {mse_const}");
}
