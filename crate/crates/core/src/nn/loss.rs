use super::matrix::{Matrix, Real};
use crate::error::{Error, Result};

/// Mean softmax cross-entropy over rows, with the gradient w.r.t. the logits.
pub fn softmax_cross_entropy<T: Real>(
    logits: &Matrix<T>,
    targets: &[usize],
) -> Result<(T, Matrix<T>)> {
    let (rows, k) = logits.shape();
    if targets.len() != rows {
        return Err(Error::dim(
            "softmax_cross_entropy",
            logits.shape_str(),
            format!("{} targets", targets.len()),
        ));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::Label {
            label: bad,
            classes: k,
        });
    }
    let n = T::from_f64(rows as f64);
    let mut loss = T::ZERO;
    let mut grad = Matrix::zeros(rows, k);
    for (i, &t) in targets.iter().enumerate() {
        let row = logits.row(i);
        let max = row.iter().copied().fold(row[0], T::max);
        let mut denom = T::ZERO;
        for &z in row {
            denom += (z - max).exp();
        }
        let log_denom = denom.ln();
        loss += log_denom - (row[t] - max);
        let g = grad.row_mut(i);
        for (j, &z) in row.iter().enumerate() {
            let p = (z - max).exp() / denom;
            g[j] = (p - if j == t { T::ONE } else { T::ZERO }) / n;
        }
    }
    Ok((loss / n, grad))
}

/// `(1/rows) Σ_i ‖a_i − b_i‖²` and its gradient w.r.t. `a` (the gradient
/// w.r.t. `b` is the negation).
pub fn mean_squared_error<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<(T, Matrix<T>)> {
    if a.shape() != b.shape() {
        return Err(Error::dim("mean_squared_error", a.shape_str(), b.shape_str()));
    }
    let n = T::from_f64(a.rows().max(1) as f64);
    let two = T::from_f64(2.0);
    let mut total = T::ZERO;
    let data = a
        .as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(&x, &y)| {
            let d = x - y;
            total += d * d;
            two * d / n
        })
        .collect();
    Ok((total / n, Matrix::from_vec(a.rows(), a.cols(), data)?))
}
