//! Dense-matrix views of convolutions and a one-sided Jacobi SVD, used as
//! oracles for the matrix-free estimators.

use crate::error::{Error, Result};
use crate::nn::conv::{conv2d_forward, ConvGeometry};
use crate::tensor::Tensor;

/// Largest number of entries a materialized convolution matrix may hold.
pub const DENSE_CAP: usize = 4096 * 4096;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let cols = rows.first().map_or(0, Vec::len);
        Self {
            rows: rows.len(),
            cols,
            data: rows.iter().flatten().copied().collect(),
        }
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.cols);
        self.data
            .chunks(self.cols)
            .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
            .collect()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Matrix `M` with `M · vec(x) = vec(conv(x))` for one `[c_in, h, w]` sample.
/// Column `j` is the response to the `j`-th standard basis vector.
pub fn materialize_conv_matrix(
    geom: &ConvGeometry,
    weight: &Tensor,
    (h, w): (usize, usize),
) -> Result<DenseMatrix> {
    let cols = geom.input_dim(h, w);
    let rows = geom.output_dim(h, w)?;
    if rows.saturating_mul(cols) > DENSE_CAP {
        return Err(Error::Size {
            rows,
            cols,
            cap: DENSE_CAP,
        });
    }
    let mut m = DenseMatrix::zeros(rows, cols);
    let chunk = 64;
    for start in (0..cols).step_by(chunk) {
        let count = chunk.min(cols - start);
        let mut basis = Tensor::zeros(&[count, geom.in_channels, h, w]);
        for k in 0..count {
            basis.data_mut()[k * cols + start + k] = 1.0;
        }
        let responses = conv2d_forward(&basis, weight, geom)?;
        for (k, col) in responses.data().chunks(rows).enumerate() {
            for (r, v) in col.iter().enumerate() {
                m.data[r * cols + start + k] = *v;
            }
        }
    }
    Ok(m)
}

/// `sqrt(sum_j ||conv(e_j)||^2)` by pushing every basis vector through the
/// convolution. Quadratic cost; meant for cross-checking the closed form.
pub fn frobenius_norm_by_basis(geom: &ConvGeometry, weight: &Tensor, (h, w): (usize, usize)) -> Result<f64> {
    let n = geom.input_dim(h, w);
    let chunk = 64;
    let mut total = 0.0;
    for start in (0..n).step_by(chunk) {
        let count = chunk.min(n - start);
        let mut basis = Tensor::zeros(&[count, geom.in_channels, h, w]);
        for k in 0..count {
            basis.data_mut()[k * n + start + k] = 1.0;
        }
        total += conv2d_forward(&basis, weight, geom)?.norm_sq();
    }
    Ok(total.sqrt())
}

/// All singular values in descending order, by one-sided (Hestenes) Jacobi
/// rotations on the columns of the thinner orientation.
pub fn exact_singular_values(m: &DenseMatrix) -> Vec<f64> {
    // work on columns of A with n <= rows
    let a = if m.cols <= m.rows { m.clone() } else { m.transpose() };
    let (rows, n) = (a.rows, a.cols);
    // column-major copy
    let mut cols: Vec<Vec<f64>> = (0..n).map(|c| (0..rows).map(|r| a.get(r, c)).collect()).collect();
    let eps = 1e-15;
    for _sweep in 0..60 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (cp, cq) = (&cols[p], &cols[q]);
                    let mut al = 0.0;
                    let mut be = 0.0;
                    let mut ga = 0.0;
                    for (x, y) in cp.iter().zip(cq) {
                        al += x * x;
                        be += y * y;
                        ga += x * y;
                    }
                    (al, be, ga)
                };
                if alpha == 0.0 || beta == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let (lo, hi) = cols.split_at_mut(q);
                for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
                    let (xp, yq) = (*x, *y);
                    *x = c * xp - s * yq;
                    *y = s * xp + c * yq;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = cols
        .iter()
        .map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    sv
}
