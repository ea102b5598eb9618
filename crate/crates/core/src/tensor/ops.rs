//! Pure forward kernels. Every kernel that does arithmetic takes the
//! caller's [`FlopCounter`].

use super::{FlopCounter, Matrix};
use crate::error::{FlexError, Result};

/// Additive mask value for blocked attention entries.
pub const MASKED: f64 = f64::NEG_INFINITY;

/// Epsilon inside the layer-norm square root.
pub const LN_EPS: f64 = 1e-5;

const GELU_C: f64 = 0.044_715;
// sqrt(2 / pi)
const GELU_K: f64 = 0.797_884_560_802_865_4;

pub fn matmul(a: &Matrix, b: &Matrix, ctr: &mut FlopCounter) -> Result<Matrix> {
    if a.cols() != b.rows() {
        return Err(FlexError::Shape(format!(
            "matmul: {}x{} cannot multiply {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let (m, k, n) = (a.rows(), a.cols(), b.cols());
    let mut out = Matrix::zeros(m, n);
    let bd = b.data();
    for i in 0..m {
        let arow = a.row(i);
        let orow = out.row_mut(i);
        // i-k-j order: every output element accumulates over k in ascending
        // order, so a single row computed alone is bitwise identical to the
        // same row of a batched product.
        for (kk, &av) in arow.iter().enumerate() {
            let brow = &bd[kk * n..(kk + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    ctr.matmul(m, k, n);
    Ok(out)
}

/// Row-wise softmax with optional additive mask whose entries are `0` or
/// [`MASKED`]. Masked entries come out as exactly `0.0`.
pub fn softmax_rows(x: &Matrix, mask: Option<&Matrix>, ctr: &mut FlopCounter) -> Result<Matrix> {
    if let Some(m) = mask {
        if m.shape() != x.shape() {
            return Err(FlexError::Shape(format!(
                "softmax mask {}x{} does not match input {}x{}",
                m.rows(),
                m.cols(),
                x.rows(),
                x.cols()
            )));
        }
    }
    let cols = x.cols();
    let mut out = Matrix::zeros(x.rows(), cols);
    let mut z = vec![0.0; cols];
    for i in 0..x.rows() {
        z.copy_from_slice(x.row(i));
        if let Some(m) = mask {
            for (zj, mj) in z.iter_mut().zip(m.row(i)) {
                *zj += mj;
            }
        }
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(FlexError::Contract(format!(
                "softmax row {i} is entirely masked"
            )));
        }
        let orow = out.row_mut(i);
        let mut sum = 0.0;
        for (o, &zj) in orow.iter_mut().zip(&z) {
            let e = (zj - max).exp();
            *o = e;
            sum += e;
        }
        for o in orow.iter_mut() {
            *o /= sum;
        }
    }
    ctr.softmax(x.rows(), cols);
    Ok(out)
}

/// Per-row normalisation output together with the saved statistics needed
/// for the backward pass.
pub(crate) struct LayerNormParts {
    pub out: Matrix,
    pub xhat: Matrix,
    pub std: Vec<f64>,
}

pub(crate) fn layer_norm_parts(
    x: &Matrix,
    gain: &[f64],
    bias: &[f64],
    ctr: &mut FlopCounter,
) -> Result<LayerNormParts> {
    let c = x.cols();
    if gain.len() != c || bias.len() != c {
        return Err(FlexError::Shape(format!(
            "layer_norm: gain/bias of length {}/{} for {} columns",
            gain.len(),
            bias.len(),
            c
        )));
    }
    let mut out = Matrix::zeros(x.rows(), c);
    let mut xhat = Matrix::zeros(x.rows(), c);
    let mut stds = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / c as f64;
        let hrow = xhat.row_mut(i);
        let mut var = 0.0;
        for (h, &v) in hrow.iter_mut().zip(row) {
            let centered = v - mean;
            *h = centered;
            var += centered * centered;
        }
        var /= c as f64;
        let std = (var + LN_EPS).sqrt();
        for h in hrow.iter_mut() {
            *h /= std;
        }
        stds.push(std);
        let hrow = xhat.row(i).to_vec();
        for (j, o) in out.row_mut(i).iter_mut().enumerate() {
            *o = gain[j] * hrow[j] + bias[j];
        }
    }
    ctr.layer_norm(x.rows(), c);
    Ok(LayerNormParts {
        out,
        xhat,
        std: stds,
    })
}

pub fn layer_norm(x: &Matrix, gain: &[f64], bias: &[f64], ctr: &mut FlopCounter) -> Result<Matrix> {
    layer_norm_parts(x, gain, bias, ctr).map(|p| p.out)
}

pub fn concat_rows(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(FlexError::Shape(format!(
            "concat_rows: {}x{} with {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let mut data = Vec::with_capacity(a.len() + b.len());
    data.extend_from_slice(a.data());
    data.extend_from_slice(b.data());
    Matrix::from_vec(a.rows() + b.rows(), a.cols(), data)
}

pub fn concat_cols(parts: &[&Matrix]) -> Result<Matrix> {
    let rows = parts.first().map_or(0, |p| p.rows());
    if let Some(p) = parts.iter().find(|p| p.rows() != rows) {
        return Err(FlexError::Shape(format!(
            "concat_cols: {} rows next to {} rows",
            p.rows(),
            rows
        )));
    }
    let cols: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Matrix::zeros(rows, cols);
    for i in 0..rows {
        let mut off = 0;
        let orow = out.row_mut(i);
        for p in parts {
            orow[off..off + p.cols()].copy_from_slice(p.row(i));
            off += p.cols();
        }
    }
    Ok(out)
}

pub fn add(a: &Matrix, b: &Matrix, ctr: &mut FlopCounter) -> Result<Matrix> {
    if a.shape() != b.shape() {
        return Err(FlexError::Shape(format!(
            "add: {}x{} with {}x{}",
            a.rows(),
            a.cols(),
            b.rows(),
            b.cols()
        )));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    ctr.adds_n(a.len());
    Matrix::from_vec(a.rows(), a.cols(), data)
}

/// Adds `bias` (length `x.cols()`) to every row.
pub fn add_row(x: &Matrix, bias: &[f64], ctr: &mut FlopCounter) -> Result<Matrix> {
    if bias.len() != x.cols() {
        return Err(FlexError::Shape(format!(
            "add_row: bias of length {} for {} columns",
            bias.len(),
            x.cols()
        )));
    }
    let mut out = x.clone();
    for i in 0..out.rows() {
        for (o, b) in out.row_mut(i).iter_mut().zip(bias) {
            *o += b;
        }
    }
    ctr.adds_n(x.len());
    Ok(out)
}

pub fn div_scalar(x: &Matrix, s: f64, ctr: &mut FlopCounter) -> Matrix {
    ctr.divs_n(x.len());
    x.map(|v| v / s)
}

pub fn gelu(x: &Matrix, ctr: &mut FlopCounter) -> Matrix {
    ctr.gelu(x.len());
    x.map(gelu_scalar)
}

#[inline]
pub(crate) fn gelu_scalar(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    0.5 * x * (1.0 + tanh_via_exp(u))
}

#[inline]
pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = tanh_via_exp(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

#[inline]
fn tanh_via_exp(u: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * u).exp() + 1.0)
}

pub fn gather_rows(x: &Matrix, indices: &[usize]) -> Result<Matrix> {
    let mut out = Matrix::zeros(indices.len(), x.cols());
    for (r, &i) in indices.iter().enumerate() {
        if i >= x.rows() {
            return Err(FlexError::Shape(format!(
                "row index {i} out of range for {} rows",
                x.rows()
            )));
        }
        out.row_mut(r).copy_from_slice(x.row(i));
    }
    Ok(out)
}

/// Causal additive mask for `rows` queries over `cols` keys. Query `i` sits
/// at absolute position `offset + i` and may see keys `0..=offset+i` among
/// the first `causal_cols` columns; columns past `causal_cols` are always
/// visible.
pub fn causal_mask(rows: usize, cols: usize, causal_cols: usize, offset: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |i, j| {
        if j < causal_cols && j > offset + i {
            MASKED
        } else {
            0.0
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_matmul(a: &Matrix, b: &Matrix) -> Matrix {
        Matrix::from_fn(a.rows(), b.cols(), |i, j| {
            let mut s = 0.0;
            for k in 0..a.cols() {
                s += a.get(i, k) * b.get(k, j);
            }
            s
        })
    }

    #[test]
    fn matmul_identity_counts_sixteen() {
        let mut c = FlopCounter::new();
        let i2 = Matrix::identity(2);
        assert_eq!(matmul(&i2, &i2, &mut c).unwrap(), i2);
        assert_eq!(c.mul_adds(), 16);
    }

    #[test]
    fn matmul_column_pick() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        let b = Matrix::from_rows(&[[0.0], [1.0]]);
        let out = matmul(&a, &b, &mut FlopCounter::new()).unwrap();
        assert_eq!(out, Matrix::from_rows(&[[2.0], [4.0]]));
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = Matrix::from_fn(3, 4, |_, _| rng.gen_range(-10.0..10.0));
        let b = Matrix::from_fn(4, 5, |_, _| rng.gen_range(-10.0..10.0));
        let got = matmul(&a, &b, &mut FlopCounter::new()).unwrap();
        assert!(got.max_abs_diff(&naive_matmul(&a, &b)) <= 1e-12);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(
            &Matrix::zeros(2, 3),
            &Matrix::zeros(2, 3),
            &mut FlopCounter::new(),
        )
        .unwrap_err()
        .to_string();
        assert!(
            err.contains("2x3") && err.matches("2x3").count() == 2,
            "{err}"
        );
    }

    #[test]
    fn softmax_examples() {
        let mut c = FlopCounter::new();
        let out = softmax_rows(&Matrix::from_rows(&[[0.0, 0.0]]), None, &mut c).unwrap();
        assert_eq!(out.row(0), &[0.5, 0.5]);
        assert_eq!((c.exps(), c.divs(), c.adds()), (2, 2, 6));

        let mask = Matrix::from_rows(&[[0.0, MASKED]]);
        let out = softmax_rows(&Matrix::from_rows(&[[0.0, 0.0]]), Some(&mask), &mut c).unwrap();
        assert_eq!(out.row(0), &[1.0, 0.0]);

        let out =
            softmax_rows(&Matrix::from_rows(&[[1000.0, 1000.0, 999.0]]), None, &mut c).unwrap();
        assert!(out.data().iter().all(|v| v.is_finite()));
        assert!((out.sum() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let mask = Matrix::from_rows(&[[MASKED, MASKED]]);
        let r = softmax_rows(&Matrix::zeros(1, 2), Some(&mask), &mut FlopCounter::new());
        assert!(matches!(r, Err(FlexError::Contract(_))));
    }

    #[test]
    fn layer_norm_examples() {
        let mut c = FlopCounter::new();
        let out = layer_norm(&Matrix::filled(1, 4, 3.0), &[1.0; 4], &[0.0; 4], &mut c).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));

        // var = 1, so each entry is +-1 / sqrt(1 + 1e-5).
        let out = layer_norm(
            &Matrix::from_rows(&[[1.0, -1.0]]),
            &[1.0; 2],
            &[0.0; 2],
            &mut c,
        )
        .unwrap();
        let expect = 1.0 / (1.0f64 + 1e-5).sqrt();
        assert!((out.get(0, 0) - expect).abs() < 1e-12);
        assert!((out.get(0, 0) - 1.0).abs() < 1e-4 && (out.get(0, 1) + 1.0).abs() < 1e-4);

        let x = Matrix::from_rows(&[[0.3, -2.0, 5.0]]);
        let out = layer_norm(&x, &[0.0; 3], &[1.5; 3], &mut c).unwrap();
        assert!(out.data().iter().all(|&v| v == 1.5));
    }

    #[test]
    fn concat_rows_examples() {
        let a = Matrix::from_rows(&[[1.0, 2.0]]);
        assert_eq!(concat_rows(&a, &Matrix::zeros(0, 2)).unwrap(), a);
        let b = Matrix::from_rows(&[[3.0, 4.0]]);
        assert_eq!(
            concat_rows(&a, &b).unwrap(),
            Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]])
        );
        assert_eq!(
            concat_rows(&Matrix::zeros(3, 5), &Matrix::zeros(4, 5))
                .unwrap()
                .shape(),
            (7, 5)
        );
        assert!(concat_rows(&a, &Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn gelu_reference_points() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        // tanh-approximate GELU at 1 is 0.841192 (to 6 places).
        assert!((gelu_scalar(1.0) - 0.841_192).abs() < 1e-6);
        assert!((gelu_scalar(50.0) - 50.0).abs() < 1e-12);
        assert!(gelu_scalar(-50.0).abs() < 1e-12);
    }

    #[test]
    fn causal_mask_layout() {
        let m = causal_mask(2, 4, 3, 0);
        assert_eq!(m.row(0), &[0.0, MASKED, MASKED, 0.0]);
        assert_eq!(m.row(1), &[0.0, 0.0, MASKED, 0.0]);
    }
}
