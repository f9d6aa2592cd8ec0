//! Caption-generation loss and the combined objective.

use ndarray::Array2;

use super::SalmError;
use crate::nn;

fn check_targets(logits: &Array2<f64>, targets: &[usize]) -> Result<(), SalmError> {
    let vocab = logits.ncols();
    if let Some(&token) = targets.iter().find(|&&t| t >= vocab) {
        return Err(SalmError::TokenOutOfVocab { token, vocab });
    }
    if targets.len() != logits.nrows() || targets.is_empty() {
        return Err(SalmError::ShapeMismatch(format!("{} targets for {} positions", targets.len(), logits.nrows())));
    }
    Ok(())
}

/// Mean over positions of `−log softmax(logits)[target]`.
pub fn itg_loss(logits: &Array2<f64>, targets: &[usize]) -> Result<f64, SalmError> {
    Ok(itg_loss_and_grad(logits, targets)?.0)
}

/// [`itg_loss`] together with its gradient with respect to `logits`.
pub fn itg_loss_and_grad(logits: &Array2<f64>, targets: &[usize]) -> Result<(f64, Array2<f64>), SalmError> {
    check_targets(logits, targets)?;
    Ok(nn::cross_entropy(logits, targets))
}

/// `l_itg + λ·l_ce`.
pub fn combined_loss(l_itg: f64, l_ce: f64, lambda: f64) -> Result<f64, SalmError> {
    if !l_itg.is_finite() || !l_ce.is_finite() || !lambda.is_finite() || lambda < 0.0 {
        return Err(SalmError::NonFinite);
    }
    Ok(l_itg + lambda * l_ce)
}
