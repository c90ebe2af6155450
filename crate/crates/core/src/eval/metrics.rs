use crate::error::{Error, Result};

/// Per-landmark Euclidean error divided by the square root of the garment
/// area.
pub fn ne_components(
    pred: &[(f64, f64)],
    gt: &[(f64, f64)],
    area: f64,
) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::data(format!(
            "normalized error: {} predictions vs {} ground-truth landmarks",
            pred.len(),
            gt.len()
        )));
    }
    if !(area > 0.0) {
        return Err(Error::data(format!("normalized error: area {area} must be positive")));
    }
    let scale = area.sqrt();
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(p, g)| ((p.0 - g.0).powi(2) + (p.1 - g.1).powi(2)).sqrt() / scale)
        .collect())
}

/// Mean over landmarks of `ne_components`.
pub fn normalized_error(pred: &[(f64, f64)], gt: &[(f64, f64)], area: f64) -> Result<f64> {
    let components = ne_components(pred, gt, area)?;
    if components.is_empty() {
        return Err(Error::data("normalized error of an empty landmark list"));
    }
    Ok(mean(&components))
}

pub fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len() as f64
}

/// Half-width of a normal-approximation 95% confidence interval:
/// `1.96 * sample stddev / sqrt(n)`.
pub fn ci95(values: &[f64]) -> Result<f64> {
    let n = values.len();
    if n < 2 {
        return Err(Error::data(format!(
            "confidence interval needs at least 2 values, got {n}"
        )));
    }
    let m = mean(values);
    let var = values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (n - 1) as f64;
    Ok(1.96 * var.sqrt() / (n as f64).sqrt())
}

/// Cosine similarity. Identical bit patterns short-circuit to exactly 1;
/// a zero vector on either side scores 0.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    if a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()) {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    dot / (na * nb)
}
