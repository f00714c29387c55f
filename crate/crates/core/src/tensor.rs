//! Dense row-major `f64` tensors and the handful of kernels the model needs.
//!
//! Every kernel uses a fixed loop order so repeated runs are bit-identical.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Input(format!(
                "shape {shape:?} needs {expected} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Input("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Ok(Self {
            shape: vec![rows.len(), cols],
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(0)
    }

    /// Width of a row: product of all but the leading extent.
    pub fn row_width(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let w = self.row_width();
        &self.data[i * w..(i + 1) * w]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        let w = self.row_width();
        &mut self.data[i * w..(i + 1) * w]
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        let cols = self.shape[1];
        self.data[i * cols + j] = v;
    }

    /// Elementwise `self + other` for identically shaped tensors.
    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op: "add",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op: "add_assign",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::Shape {
                op: "sub",
                lhs: self.shape.clone(),
                rhs: other.shape.clone(),
            });
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn scale(&self, k: f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|x| x * k).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::Shape {
            op: "matmul",
            lhs: a.shape.clone(),
            rhs: b.shape.clone(),
        });
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    // i-p-j order, single accumulator per output cell, no reassociation
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let aip = a.data[i * k + p];
            let b_row = &b.data[p * n..(p + 1) * n];
            for (o, bv) in out_row.iter_mut().zip(b_row) {
                *o += aip * bv;
            }
        }
    }
    Ok(Tensor {
        shape: vec![m, n],
        data: out,
    })
}

pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Domain("softmax of an empty vector".into()));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

pub fn log_softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Domain("log_softmax of an empty vector".into()));
    }
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    Ok(v.iter().map(|x| x - lse).collect())
}

/// Normalizes `x` to zero mean and unit population variance, then applies
/// `gamma * x + beta`.
pub fn layer_norm(x: &[f64], gamma: &[f64], beta: &[f64], eps: f64) -> Result<Vec<f64>> {
    let d = x.len();
    if d < 2 {
        return Err(Error::Domain(format!("layer_norm needs d >= 2, got {d}")));
    }
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Domain(format!("layer_norm eps must be > 0, got {eps}")));
    }
    if gamma.len() != d || beta.len() != d {
        return Err(Error::Shape {
            op: "layer_norm",
            lhs: vec![d],
            rhs: vec![gamma.len(), beta.len()],
        });
    }
    let mean = x.iter().sum::<f64>() / d as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
    let inv = 1.0 / (var + eps).sqrt();
    Ok(x
        .iter()
        .zip(gamma.iter().zip(beta))
        .map(|(v, (g, b))| (v - mean) * inv * g + b)
        .collect())
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x.data.iter().map(|v| v.max(0.0)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn m(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_examples() {
        let x = m(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&m(&[&[1.0, 0.0], &[0.0, 1.0]]), &x).unwrap(), x);

        let sel = matmul(&m(&[&[1.0, 0.0], &[0.0, 0.0]]), &m(&[&[5.0, 6.0], &[7.0, 8.0]])).unwrap();
        assert_eq!(sel, m(&[&[5.0, 6.0], &[0.0, 0.0]]));

        let col = matmul(&x, &m(&[&[1.0], &[1.0]])).unwrap();
        assert_eq!(col, m(&[&[3.0], &[7.0]]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::zeros(vec![2, 3]), &Tensor::zeros(vec![2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, Error::Shape { .. }));
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax(&[0.0, 0.0]).unwrap(), vec![0.5, 0.5]);
        let e = std::f64::consts::E;
        let p = softmax(&[1.0, 0.0]).unwrap();
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p[0] - 0.73106).abs() < 1e-5);
        assert!((p[1] - 0.26894).abs() < 1e-5);
        let big = softmax(&[1000.0, 0.0]).unwrap();
        assert!((big[0] - 1.0).abs() < 1e-12 && big[1] < 1e-300 && big[1] >= 0.0);
        assert!(softmax(&[]).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let y = layer_norm(&[1.0, 3.0], &[1.0, 1.0], &[0.0, 0.0], 1e-12).unwrap();
        assert!((y[0] + 1.0).abs() < 1e-9 && (y[1] - 1.0).abs() < 1e-9);
        let c = layer_norm(&[2.5, 2.5, 2.5], &[1.0; 3], &[0.0; 3], 1e-5).unwrap();
        assert_eq!(c, vec![0.0, 0.0, 0.0]);
        let a = layer_norm(&[1.0, 3.0], &[2.0, 2.0], &[1.0, 1.0], 1e-12).unwrap();
        assert!((a[0] + 1.0).abs() < 1e-9 && (a[1] - 3.0).abs() < 1e-9);
        assert!(layer_norm(&[1.0], &[1.0], &[0.0], 1e-5).is_err());
        assert!(layer_norm(&[1.0, 2.0], &[1.0; 2], &[0.0; 2], 0.0).is_err());
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::vector(vec![-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        assert!(relu(&Tensor::vector(vec![-3.0, -0.5])).data().iter().all(|v| *v == 0.0));
        assert_eq!(relu(&relu(&x)), relu(&x));
    }

    fn finite_vec(n: usize) -> impl Strategy<Value = Vec<f64>> {
        proptest::collection::vec(-50.0f64..50.0, n)
    }

    proptest! {
        #[test]
        fn softmax_shift_invariant(v in finite_vec(6), c in -100.0f64..100.0) {
            let a = softmax(&v).unwrap();
            let shifted: Vec<f64> = v.iter().map(|x| x + c).collect();
            let b = softmax(&shifted).unwrap();
            for (x, y) in a.iter().zip(&b) {
                prop_assert!((x - y).abs() < 1e-12);
            }
            prop_assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn softmax_is_monotone(v in finite_vec(5)) {
            let p = softmax(&v).unwrap();
            for i in 0..v.len() {
                for j in 0..v.len() {
                    if v[i] > v[j] {
                        prop_assert!(p[i] >= p[j]);
                    }
                }
            }
        }

        #[test]
        fn layer_norm_moments(v in finite_vec(8)) {
            let spread = v.iter().cloned().fold(f64::MIN, f64::max) - v.iter().cloned().fold(f64::MAX, f64::min);
            prop_assume!(spread > 1e-3);
            let eps = 1e-9;
            let y = layer_norm(&v, &[1.0; 8], &[0.0; 8], eps).unwrap();
            let mean = y.iter().sum::<f64>() / 8.0;
            let var = y.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }

        #[test]
        fn matmul_distributes(a in finite_vec(64), b in finite_vec(64), c in finite_vec(64)) {
            let ta = Tensor::new(vec![8, 8], a).unwrap();
            let tb = Tensor::new(vec![8, 8], b).unwrap();
            let tc = Tensor::new(vec![8, 8], c).unwrap();
            let lhs = matmul(&ta, &tb.add(&tc).unwrap()).unwrap();
            let rhs = matmul(&ta, &tb).unwrap().add(&matmul(&ta, &tc).unwrap()).unwrap();
            for (x, y) in lhs.data().iter().zip(rhs.data()) {
                // magnitudes reach ~8*50*100; compare relative to that scale
                prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
            }
        }

        #[test]
        fn matmul_is_deterministic(a in finite_vec(64), b in finite_vec(64)) {
            let ta = Tensor::new(vec![8, 8], a).unwrap();
            let tb = Tensor::new(vec![8, 8], b).unwrap();
            let x = matmul(&ta, &tb).unwrap();
            let y = matmul(&ta, &tb).unwrap();
            prop_assert_eq!(x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            y.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
