use super::NnError;

/// Numerically stable softmax (max-subtracted).
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

pub fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
    logits.iter().map(|&l| l - lse).collect()
}

/// Cross-entropy of `softmax(logits)` against `target`, with its gradient
/// with respect to the logits (`softmax - one_hot`).
pub fn softmax_cross_entropy(logits: &[f64], target: usize) -> Result<(f64, Vec<f64>), NnError> {
    if target >= logits.len() {
        return Err(NnError::TargetOutOfRange {
            target,
            classes: logits.len(),
        });
    }
    let loss = -log_softmax(logits)[target];
    let mut grad = softmax(logits);
    grad[target] -= 1.0;
    Ok((loss.max(0.0), grad))
}
