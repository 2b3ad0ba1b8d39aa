use crate::error::{ensure, Result};
use crate::tensor::Tensor;

/// Probabilities are clamped this far from 0 and 1 before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Mean binary cross entropy over a batch.
pub fn classification_loss(y_true: &[f64], y_pred: &[f64]) -> Result<f64> {
    ensure!(
        y_true.len() == y_pred.len(),
        "classification loss: {} labels vs {} predictions",
        y_true.len(),
        y_pred.len()
    );
    ensure!(!y_true.is_empty(), "classification loss on an empty batch");
    let k = y_true.len() as f64;
    let total: f64 = y_true
        .iter()
        .zip(y_pred)
        .map(|(&y, &p)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -y * p.ln() - (1.0 - y) * (1.0 - p).ln()
        })
        .sum();
    Ok(total / k)
}

/// Mean over every activation cell of `(1 - m) * ln(max(a, epsilon))`.
///
/// Non-positive; zero wherever the mask is 1, and driven toward
/// `ln(epsilon)` as activations outside the mask shrink.
pub fn guidance_loss(activation: &Tensor, mask: &Tensor, epsilon: f64) -> Result<f64> {
    ensure!(
        activation.shape() == mask.shape(),
        "guidance loss: activation shape {:?} vs mask shape {:?}",
        activation.shape(),
        mask.shape()
    );
    ensure!(epsilon > 0.0, "guidance epsilon must be positive, got {}", epsilon);
    ensure!(!activation.is_empty(), "guidance loss on an empty batch");
    ensure!(
        mask.data().iter().all(|&m| m == 0.0 || m == 1.0),
        "guidance mask must be 0/1 valued"
    );
    let total: f64 = activation
        .data()
        .iter()
        .zip(mask.data())
        .map(|(&a, &m)| (1.0 - m) * a.max(epsilon).ln())
        .sum();
    Ok(total / activation.len() as f64)
}

/// `classification + lambda * guidance`.
pub fn total_loss(
    y_true: &[f64],
    y_pred: &[f64],
    activation: &Tensor,
    mask: &Tensor,
    lambda: f64,
    epsilon: f64,
) -> Result<f64> {
    let class = classification_loss(y_true, y_pred)?;
    let guide = guidance_loss(activation, mask, epsilon)?;
    Ok(class + lambda * guide)
}
