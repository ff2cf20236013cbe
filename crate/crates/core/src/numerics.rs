//! Dense row-major matrices and the hand-derived forward/backward rules used
//! by the extraction networks and the loss terms.
//!
//! Everything is `f64`. Reductions run row-major, left to right, so a given
//! input always produces the same bits.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm floor below which a vector counts as degenerate for cosine similarity.
pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(
                "Matrix::new",
                format!("{rows}x{cols}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Like [`Matrix::new`] but also rejects NaN/Inf entries.
    pub fn new_finite(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                path: format!("matrix[{},{}]", pos / cols.max(1), pos % cols.max(1)),
            });
        }
        Self::new(rows, cols, data)
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::dim(
                    "Matrix::from_rows",
                    format!("row 0 has {cols} cols"),
                    format!("row {i} has {}", r.len()),
                ));
            }
            data.extend_from_slice(r);
        }
        Self::new(rows.len(), cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn shape_str(&self) -> String {
        format!("{}x{}", self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        // chunks_exact(0) panics, so guard the degenerate zero-column case.
        let cols = self.cols.max(1);
        self.data.chunks_exact(cols).take(self.rows)
    }

    pub fn transpose(&self) -> Matrix {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                out.data[j * self.rows + i] = self.data[i * self.cols + j];
            }
        }
        out
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::dim("matmul", self.shape_str(), other.shape_str()));
        }
        let (n, k, m) = (self.rows, self.cols, other.cols);
        let mut out = Matrix::zeros(n, m);
        for i in 0..n {
            let out_row = &mut out.data[i * m..(i + 1) * m];
            for p in 0..k {
                let a = self.data[i * k + p];
                let w_row = &other.data[p * m..(p + 1) * m];
                for (o, w) in out_row.iter_mut().zip(w_row) {
                    *o += a * w;
                }
            }
        }
        Ok(out)
    }

    fn check_same(&self, other: &Matrix, op: &'static str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(op, self.shape_str(), other.shape_str()));
        }
        Ok(())
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same(other, "add")?;
        Ok(self.zip_map(other, |a, b| a + b))
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.check_same(other, "sub")?;
        Ok(self.zip_map(other, |a, b| a - b))
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        self.check_same(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &Matrix, alpha: f64) -> Result<()> {
        self.check_same(other, "add_scaled")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, alpha: f64) -> Matrix {
        self.map(|v| alpha * v)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    fn zip_map(&self, other: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn column_sums(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for row in self.row_iter() {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        out
    }

    pub fn column_means(&self) -> Vec<f64> {
        let n = self.rows as f64;
        let mut sums = self.column_sums();
        if self.rows > 0 {
            sums.iter_mut().for_each(|v| *v /= n);
        }
        sums
    }

    /// Stack `self` on top of `other`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::dim("vstack", self.shape_str(), other.shape_str()));
        }
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Matrix::new(self.rows + other.rows, self.cols, data)
    }

    /// Split rows `[0, at)` and `[at, rows)`.
    pub fn split_rows(&self, at: usize) -> (Matrix, Matrix) {
        let at = at.min(self.rows);
        let (a, b) = self.data.split_at(at * self.cols);
        (
            Matrix {
                rows: at,
                cols: self.cols,
                data: a.to_vec(),
            },
            Matrix {
                rows: self.rows - at,
                cols: self.cols,
                data: b.to_vec(),
            },
        )
    }

    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// A scalar value together with its gradient with respect to one input.
#[derive(Debug, Clone, PartialEq)]
pub struct GradPair<G> {
    pub value: f64,
    pub grad: G,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `Y = X W + bias`.
pub fn affine_forward(x: &Matrix, w: &Matrix, bias: &[f64]) -> Result<Matrix> {
    if x.cols() != w.rows() {
        return Err(Error::dim("affine_forward", x.shape_str(), w.shape_str()));
    }
    if bias.len() != w.cols() {
        return Err(Error::dim(
            "affine_forward",
            w.shape_str(),
            format!("bias[{}]", bias.len()),
        ));
    }
    let mut y = x.matmul(w)?;
    for r in 0..y.rows() {
        for (v, b) in y.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
    Ok(y)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AffineGrads {
    pub dx: Matrix,
    pub dw: Matrix,
    pub dbias: Vec<f64>,
}

pub fn affine_backward(x: &Matrix, w: &Matrix, dy: &Matrix) -> Result<AffineGrads> {
    if x.cols() != w.rows() {
        return Err(Error::dim("affine_backward", x.shape_str(), w.shape_str()));
    }
    if dy.rows() != x.rows() || dy.cols() != w.cols() {
        return Err(Error::dim(
            "affine_backward",
            format!("expected dY {}x{}", x.rows(), w.cols()),
            dy.shape_str(),
        ));
    }
    Ok(AffineGrads {
        dx: dy.matmul(&w.transpose())?,
        dw: x.transpose().matmul(dy)?,
        dbias: dy.column_sums(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    pub fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => v.tanh(),
            Activation::Relu => v.max(0.0),
            Activation::Identity => v,
        }
    }

    /// Derivative evaluated at the pre-activation `v`. ReLU takes 0 at the kink.
    pub fn derivative(self, v: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = v.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if v > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Identity => 1.0,
        }
    }

    pub fn forward(self, x: &Matrix) -> Matrix {
        x.map(|v| self.apply(v))
    }

    /// Chain `dy` through the activation evaluated at pre-activation `x`.
    pub fn backward(self, x: &Matrix, dy: &Matrix) -> Result<Matrix> {
        x.check_same(dy, "activation_backward")?;
        Ok(x.zip_map(dy, |v, g| g * self.derivative(v)))
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Config(format!("unknown activation {other:?}"))),
        }
    }
}

/// Forward pass plus a backward closure bound to the input.
pub fn activation(kind: Activation, x: &Matrix) -> (Matrix, impl Fn(&Matrix) -> Result<Matrix>) {
    let y = kind.forward(x);
    let saved = x.clone();
    (y, move |dy: &Matrix| kind.backward(&saved, dy))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CosineSim {
    pub value: f64,
    pub grad_a: Vec<f64>,
    pub grad_b: Vec<f64>,
}

fn check_norm(n: f64, context: &str) -> Result<()> {
    if n.is_finite() && n > NORM_FLOOR {
        Ok(())
    } else {
        Err(Error::DegenerateVector {
            context: context.to_string(),
            norm: n,
        })
    }
}

/// Cosine similarity without gradients. Errors on near-zero norms.
pub fn cosine_value(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::dim(
            "cosine_sim",
            format!("len {}", a.len()),
            format!("len {}", b.len()),
        ));
    }
    let na = norm(a);
    let nb = norm(b);
    check_norm(na, "cosine_sim(a)")?;
    check_norm(nb, "cosine_sim(b)")?;
    Ok(dot(a, b) / (na * nb))
}

/// Cosine similarity with gradients for both arguments.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<CosineSim> {
    let value = cosine_value(a, b)?;
    let na = norm(a);
    let nb = norm(b);
    let inv = 1.0 / (na * nb);
    let grad_a = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| y * inv - value * x / (na * na))
        .collect();
    let grad_b = a
        .iter()
        .zip(b)
        .map(|(&x, &y)| x * inv - value * y / (nb * nb))
        .collect();
    Ok(CosineSim {
        value,
        grad_a,
        grad_b,
    })
}

/// Mean squared error over all entries. The gradient is w.r.t. `a`; the
/// gradient w.r.t. `b` is its negation.
pub fn mse(a: &Matrix, b: &Matrix) -> Result<GradPair<Matrix>> {
    a.check_same(b, "mse")?;
    let count = a.data.len();
    if count == 0 {
        return Ok(GradPair {
            value: 0.0,
            grad: Matrix::zeros(a.rows, a.cols),
        });
    }
    let diff = a.zip_map(b, |x, y| x - y);
    let value = diff.data.iter().map(|d| d * d).sum::<f64>() / count as f64;
    let grad = diff.scale(2.0 / count as f64);
    Ok(GradPair { value, grad })
}

/// Mean cross-entropy of row-wise softmax against integer labels. The
/// gradient is w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[usize]) -> Result<GradPair<Matrix>> {
    if labels.len() != logits.rows() {
        return Err(Error::dim(
            "softmax_cross_entropy",
            logits.shape_str(),
            format!("{} labels", labels.len()),
        ));
    }
    let classes = logits.cols();
    for (row, &label) in labels.iter().enumerate() {
        if label >= classes {
            return Err(Error::LabelOutOfRange {
                row,
                label,
                classes,
            });
        }
    }
    let n = logits.rows();
    let mut grad = Matrix::zeros(n, classes);
    if n == 0 {
        return Ok(GradPair { value: 0.0, grad });
    }
    let mut total = 0.0;
    for (r, (row, &label)) in logits.row_iter().zip(labels).enumerate() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
        let z: f64 = exps.iter().sum();
        total += z.ln() - (row[label] - max);
        let g = grad.row_mut(r);
        for (c, e) in exps.iter().enumerate() {
            g[c] = e / z / n as f64;
        }
        g[label] -= 1.0 / n as f64;
    }
    Ok(GradPair {
        value: total / n as f64,
        grad,
    })
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_difference_gradient(
    mut f: impl FnMut(&[f64]) -> f64,
    x: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    if h.is_nan() || h <= 0.0 {
        return Err(Error::Config(format!("finite-difference step must be > 0, got {h}")));
    }
    let mut probe = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + h;
        let plus = f(&probe);
        probe[i] = orig - h;
        let minus = f(&probe);
        probe[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                path: format!("finite difference probe at coordinate {i}"),
            });
        }
        grad.push((plus - minus) / (2.0 * h));
    }
    Ok(grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖, 1e-8)`, the comparison used by every gradient check.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    diff / norm(a).max(norm(b)).max(1e-8)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn affine_forward_examples() {
        let x = m(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let y = affine_forward(&x, &Matrix::identity(2), &[0.0, 0.0]).unwrap();
        assert_eq!(y, x);

        let y = affine_forward(&m(&[&[1.0, 2.0]]), &m(&[&[1.0], &[1.0]]), &[3.0]).unwrap();
        assert_eq!(y, m(&[&[6.0]]));

        let w = m(&[&[0.3, -2.0], &[1.5, 4.0]]);
        let y = affine_forward(&m(&[&[0.0, 0.0]]), &w, &[5.0, 7.0]).unwrap();
        assert_eq!(y, m(&[&[5.0, 7.0]]));
    }

    #[test]
    fn affine_shape_errors_name_both_shapes() {
        let err = affine_forward(&Matrix::zeros(2, 3), &Matrix::zeros(2, 2), &[0.0, 0.0]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("2x3") && msg.contains("2x2"), "{msg}");
        assert!(affine_backward(&Matrix::zeros(1, 2), &Matrix::zeros(2, 2), &Matrix::zeros(2, 2)).is_err());
    }

    #[test]
    fn affine_backward_examples() {
        let x = m(&[&[1.0, -2.0, 0.5]]);
        let w = m(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]);
        let g = affine_backward(&x, &w, &Matrix::zeros(1, 2)).unwrap();
        assert!(g.dx.data().iter().chain(g.dw.data()).chain(&g.dbias).all(|&v| v == 0.0));

        let g = affine_backward(&m(&[&[1.0]]), &m(&[&[2.0]]), &m(&[&[1.0]])).unwrap();
        assert_eq!(g.dx, m(&[&[2.0]]));
        assert_eq!(g.dw, m(&[&[1.0]]));
        assert_eq!(g.dbias, vec![1.0]);
    }

    #[test]
    fn activation_examples() {
        let x = m(&[&[0.0, -3.0, 2.5]]);
        let ones = m(&[&[1.0, 1.0, 1.0]]);

        let (y, back) = activation(Activation::Tanh, &x);
        assert_eq!(y.get(0, 0), 0.0);
        assert_eq!(back(&ones).unwrap().get(0, 0), 1.0);

        let (y, back) = activation(Activation::Relu, &x);
        assert_eq!(y.get(0, 1), 0.0);
        assert_eq!(back(&ones).unwrap().get(0, 1), 0.0);
        assert_eq!(y.get(0, 2), 2.5);

        let (y, back) = activation(Activation::Identity, &x);
        assert_eq!(y, x);
        assert_eq!(back(&ones).unwrap(), ones);
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[0.0, 1.0]).unwrap().value, 0.0);

        let c = cosine_sim(&[3.0, 4.0], &[3.0, 4.0]).unwrap();
        assert!((c.value - 1.0).abs() < 1e-15);
        assert!(c.grad_a.iter().all(|g| g.abs() < 1e-15));

        let c = cosine_sim(&[1.0, 2.0], &[2.0, 1.0]).unwrap();
        assert!((c.value - 0.8).abs() < 1e-15);
    }

    #[test]
    fn cosine_rejects_zero_vectors() {
        let err = cosine_sim(&[0.0, 0.0], &[1.0, 0.0]).unwrap_err();
        assert!(matches!(err, Error::DegenerateVector { .. }));
        assert!(cosine_sim(&[1.0, 0.0], &[1e-13, 0.0]).is_err());
    }

    #[test]
    fn mse_examples() {
        let a = m(&[&[1.0, 2.0], &[3.0, -1.0]]);
        assert_eq!(mse(&a, &a).unwrap().value, 0.0);

        let r = mse(&m(&[&[1.0]]), &m(&[&[0.0]])).unwrap();
        assert_eq!(r.value, 1.0);
        assert_eq!(r.grad, m(&[&[2.0]]));

        let b = m(&[&[0.5, 1.0], &[2.0, 0.0]]);
        let doubled = a.scale(2.0).sub(&b.scale(2.0)).unwrap();
        let base = mse(&a, &b).unwrap().value;
        let twice = mse(&doubled, &Matrix::zeros(2, 2)).unwrap().value;
        assert!((twice - 4.0 * base).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_examples() {
        let r = softmax_cross_entropy(&Matrix::zeros(3, 4), &[0, 1, 3]).unwrap();
        assert!((r.value - 4f64.ln()).abs() < 1e-12);

        let r = softmax_cross_entropy(&m(&[&[800.0, 0.0, 0.0]]), &[0]).unwrap();
        assert!(r.value.abs() < 1e-12);

        let r = softmax_cross_entropy(&m(&[&[1.0, 0.0], &[0.0, 1.0]]), &[0, 1]).unwrap();
        let e = std::f64::consts::E;
        assert!((r.value - (-(e / (e + 1.0)).ln())).abs() < 1e-12);
        assert!((r.value - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        let err = softmax_cross_entropy(&Matrix::zeros(1, 2), &[2]).unwrap_err();
        assert!(matches!(err, Error::LabelOutOfRange { label: 2, classes: 2, .. }));
    }

    #[test]
    fn finite_difference_examples() {
        let g = finite_difference_gradient(|x| x.iter().map(|v| v * v).sum(), &[1.0, 2.0], 1e-5).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-8 && (g[1] - 4.0).abs() < 1e-8);

        let g = finite_difference_gradient(|_| 3.0, &[1.0, -5.0, 2.0], 1e-5).unwrap();
        assert!(g.iter().all(|&v| v == 0.0));

        let g = finite_difference_gradient(|x| 2.5 * x[0] + 2.5 * x[1], &[0.25, 0.5], 1e-3).unwrap();
        assert!(g.iter().all(|&v| (v - 2.5).abs() < 1e-9));

        assert!(finite_difference_gradient(|x| x[0], &[0.0], 0.0).is_err());
        assert!(finite_difference_gradient(|x| if x[0] > 0.0 { f64::NAN } else { 0.0 }, &[0.0], 1e-5).is_err());
    }
}
