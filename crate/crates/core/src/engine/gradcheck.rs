use serde::{Deserialize, Serialize};

use super::model::{ForwardMode, Model};
use super::params::Weights;
use super::train::{masked_mse, Batch};
use super::EngineError;

/// Denominator floor of the relative error, so that gradients that are
/// zero up to finite-difference noise are compared in absolute terms.
pub const RELATIVE_FLOOR: f64 = 1e-6;

pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_FLOOR)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub parameters: usize,
    pub max_relative_error: f64,
    pub worst_tensor: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_relative_error < tolerance
    }
}

/// Compares reverse-mode gradients of the masked MSE with central finite
/// differences over every trainable scalar.
///
/// `corrupt` is applied to the analytic gradients before comparison; it
/// exists so that callers can exercise the failure path.
pub fn gradient_check(
    model: &Model,
    batch: &Batch,
    step: f64,
    corrupt: Option<&dyn Fn(&mut Weights)>,
) -> Result<GradCheckReport, EngineError> {
    let loss_of = |m: &Model| -> Result<f64, EngineError> {
        let pred = m.predict(batch.inputs.view())?;
        Ok(masked_mse(pred.view(), batch.targets.view(), batch.mask.as_ref()).0)
    };
    let pass = model.forward(batch.inputs.view(), ForwardMode::Full)?;
    let (_, grad) = masked_mse(pass.predictions().view(), batch.targets.view(), batch.mask.as_ref());
    let mut analytic = model.backward(&pass, grad.view())?;
    if let Some(f) = corrupt {
        f(&mut analytic);
    }
    let names = model.params().weights.names();
    let mut probe = model.clone();
    let mut report = GradCheckReport {
        parameters: 0,
        max_relative_error: 0.0,
        worst_tensor: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
    };
    for (t, name) in names.iter().enumerate() {
        let len = analytic.tensors()[t].len();
        for k in 0..len {
            let original = model.params().weights.tensors()[t].as_slice().expect("owned")[k];
            let mut evaluate = |value: f64| -> Result<f64, EngineError> {
                probe.weights_mut().tensors_mut()[t].as_slice_mut().expect("owned")[k] = value;
                loss_of(&probe)
            };
            let plus = evaluate(original + step)?;
            let minus = evaluate(original - step)?;
            evaluate(original)?;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic.tensors()[t].as_slice().expect("owned")[k];
            let err = relative_error(a, numeric);
            report.parameters += 1;
            if err > report.max_relative_error || report.worst_tensor.is_empty() {
                report.max_relative_error = err;
                report.worst_tensor = name.clone();
                report.worst_index = k;
                report.analytic = a;
                report.numeric = numeric;
            }
        }
    }
    Ok(report)
}
