use super::{EvalError, Result};

/// Average precision of a ranking.
///
/// Items are sorted by descending score; ties keep their original index
/// order (stable sort), so a tied positive listed first outranks a tied
/// negative listed after it. `AP = (1/P) Σ precision@r` over the ranks `r`
/// that hold a positive.
pub fn average_precision(scores: &[f64], positives: &[bool]) -> Result<f64> {
    if scores.len() != positives.len() {
        return Err(EvalError::Shape(format!(
            "{} scores for {} labels",
            scores.len(),
            positives.len()
        )));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EvalError::Shape("NaN score".into()));
    }
    let total_pos = positives.iter().filter(|p| **p).count();
    if total_pos == 0 {
        return Err(EvalError::NoPositives);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut hits = 0usize;
    let mut acc = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if positives[i] {
            hits += 1;
            acc += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(acc / total_pos as f64)
}
