use super::TrainError;

/// Mean over all `2·B` components of the squared differences, with its
/// gradient w.r.t. `pred`.
pub fn mse_loss(pred: &[[f64; 2]], target: &[[f64; 2]]) -> Result<(f64, Vec<[f64; 2]>), TrainError> {
    if pred.len() != target.len() || pred.is_empty() {
        return Err(TrainError::ShapeMismatch {
            pred: pred.len(),
            target: target.len(),
        });
    }
    let count = (2 * pred.len()) as f64;
    let mut loss = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(p, t)| {
            let d = [p[0] - t[0], p[1] - t[1]];
            loss += d[0] * d[0] + d[1] * d[1];
            [2.0 * d[0] / count, 2.0 * d[1] / count]
        })
        .collect();
    Ok((loss / count, grad))
}
