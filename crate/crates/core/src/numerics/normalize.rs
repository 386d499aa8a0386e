use crate::error::{MixcoError, Result};

use super::{dot, Tensor};

/// Result of a row normalization, kept around for the backward pass.
#[derive(Debug, Clone)]
pub struct NormalizedRows {
    pub output: Tensor,
    /// Euclidean norm of each input row, before the `eps` guard.
    pub norms: Vec<f64>,
    pub eps: f64,
}

impl NormalizedRows {
    /// True when at least one row had norm `<= eps` and was not scaled to unit length.
    pub fn degenerate(&self) -> bool {
        self.norms.iter().any(|&n| n <= self.eps)
    }

    /// Gradient with respect to the input rows given the gradient of the output.
    ///
    /// For a guarded row (`norm > eps`) with output `y`: `(g - y (y·g)) / norm`.
    /// Rows at or below `eps` were divided by the constant `eps`, so their
    /// Jacobian is `I / eps`.
    pub fn backward(&self, grad_out: &Tensor) -> Result<Tensor> {
        self.output.check_same_shape(grad_out, "l2_normalize_rows backward")?;
        let mut grad_in = grad_out.clone();
        for (i, &norm) in self.norms.iter().enumerate() {
            let y = self.output.row(i);
            let g = grad_in.row_mut(i);
            if norm > self.eps {
                let yg = dot(y, g);
                for (gj, yj) in g.iter_mut().zip(y) {
                    *gj = (*gj - yj * yg) / norm;
                }
            } else {
                for gj in g.iter_mut() {
                    *gj /= self.eps;
                }
            }
        }
        Ok(grad_in)
    }
}

/// Divides each row by `max(eps, ‖row‖₂)`.
pub fn l2_normalize_rows(x: &Tensor, eps: f64) -> Result<NormalizedRows> {
    x.expect_matrix("l2_normalize_rows")?;
    if !(eps > 0.0) {
        return Err(MixcoError::config(format!("eps must be positive, got {eps}")));
    }
    let mut output = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = output.row_mut(i);
        let norm = dot(row, row).sqrt();
        let denom = norm.max(eps);
        for v in row.iter_mut() {
            *v /= denom;
        }
        norms.push(norm);
    }
    Ok(NormalizedRows { output, norms, eps })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_four_five() {
        let x = Tensor::from_rows(&[[3.0, 4.0]]).unwrap();
        let y = l2_normalize_rows(&x, 1e-12).unwrap().output;
        assert!((y.get(0, 0) - 0.6).abs() < 1e-15);
        assert!((y.get(0, 1) - 0.8).abs() < 1e-15);
    }

    #[test]
    fn unit_row_unchanged() {
        let x = Tensor::from_rows(&[[0.0, 1.0, 0.0]]).unwrap();
        let y = l2_normalize_rows(&x, 1e-12).unwrap().output;
        assert!(y.bit_eq(&x));
    }

    #[test]
    fn zero_row_guarded() {
        let x = Tensor::zeros(&[2, 3]);
        let n = l2_normalize_rows(&x, 1e-12).unwrap();
        assert!(n.degenerate());
        assert!(n.output.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn rejects_nonpositive_eps() {
        assert!(l2_normalize_rows(&Tensor::zeros(&[1, 2]), 0.0).is_err());
    }
}
