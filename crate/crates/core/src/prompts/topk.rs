use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Number of entries a row of length `len` keeps for fraction `k`.
pub fn keep_count(k: f64, len: usize) -> Result<usize> {
    if !(k > 0.0 && k <= 1.0) || len == 0 {
        return Err(Error::InvalidK { k, len });
    }
    // absorb representation error such as 0.3 * 10 = 3.0000000000000004
    let n = (k * len as f64 - 1e-9).ceil() as usize;
    if n < 1 {
        return Err(Error::InvalidK { k, len });
    }
    Ok(n.min(len))
}

/// Row-wise keep mask for a `rows x cols` matrix: an entry survives when it
/// is at least the row's `ceil(k * cols)`-th largest value, so ties at the
/// threshold all survive.
pub fn topk_mask(data: &[f64], rows: usize, cols: usize, k: f64) -> Result<Vec<bool>> {
    let n = keep_count(k, cols)?;
    let mut keep = Vec::with_capacity(data.len());
    let mut sorted = Vec::with_capacity(cols);
    for row in data.chunks(cols).take(rows) {
        sorted.clear();
        sorted.extend_from_slice(row);
        sorted.sort_unstable_by(|a, b| b.total_cmp(a));
        let threshold = sorted[n - 1];
        keep.extend(row.iter().map(|&v| v >= threshold));
    }
    Ok(keep)
}

/// Zeroes every attention score below its row's top-k threshold.
/// Rows are not renormalized.
pub fn sparsify_topk(a: &Tensor, k: f64) -> Result<Tensor> {
    if a.shape().len() != 2 {
        return Err(Error::shape("sparsify_topk", a.shape(), &[0, 0]));
    }
    let (rows, cols) = (a.shape()[0], a.shape()[1]);
    let keep = topk_mask(a.data(), rows, cols, k)?;
    let data = a
        .data()
        .iter()
        .zip(keep)
        .map(|(&v, k)| if k { v } else { 0.0 })
        .collect();
    Tensor::new(a.shape(), data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(v: &[f64]) -> Tensor {
        Tensor::new(&[1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn half_of_four() {
        let out = sparsify_topk(&row(&[0.4, 0.3, 0.2, 0.1]), 0.5).unwrap();
        assert_eq!(out.data(), &[0.4, 0.3, 0.0, 0.0]);
    }

    #[test]
    fn full_tie_keeps_everything() {
        let out = sparsify_topk(&row(&[0.25; 4]), 0.25).unwrap();
        assert_eq!(out.data(), &[0.25; 4]);
    }

    #[test]
    fn single_survivor() {
        let v: Vec<f64> = (0..10).map(|i| 1.0 - i as f64 * 0.05).collect();
        let out = sparsify_topk(&row(&v), 0.1).unwrap();
        assert_eq!(out.data().iter().filter(|&&x| x != 0.0).count(), 1);
        assert_eq!(out.data()[0], 1.0);
    }

    #[test]
    fn k_one_is_identity() {
        let t = row(&[0.1, 0.5, 0.2, 0.2]);
        assert_eq!(sparsify_topk(&t, 1.0).unwrap(), t);
    }

    #[test]
    fn invalid_fractions() {
        for k in [0.0, -0.1, 1.5, f64::NAN] {
            assert!(matches!(keep_count(k, 8), Err(Error::InvalidK { .. })));
        }
        assert_eq!(keep_count(0.3, 10).unwrap(), 3);
        assert_eq!(keep_count(0.01, 10).unwrap(), 1);
    }
}
