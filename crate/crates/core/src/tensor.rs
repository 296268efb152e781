//! Dense row-major f64 tensor used as the value carrier throughout the crate.
//!
//! Values are required to stay finite: every constructor and every graph op
//! validates its output and aborts loudly on NaN/Inf rather than letting bad
//! numbers propagate.

use rand::Rng;
use rand_distr::StandardNormal;

/// Dense tensor: `shape` extents with row-major `data`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

/// Panics when `data` contains a NaN or infinity. `what` names the producer.
pub fn assert_finite(what: &str, data: &[f64]) {
    for (i, v) in data.iter().enumerate() {
        assert!(
            v.is_finite(),
            "non-finite value {v} at flat index {i} produced by {what}"
        );
    }
}

impl Tensor {
    pub fn from_vec(shape: Vec<usize>, data: Vec<f64>) -> Self {
        let numel: usize = shape.iter().product();
        assert_eq!(
            numel,
            data.len(),
            "shape {shape:?} implies {numel} elements, got {}",
            data.len()
        );
        assert_finite("Tensor::from_vec", &data);
        Tensor { shape, data }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, data: vec![0.0; numel] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor::from_vec(vec![1, 1], vec![v])
    }

    /// 2-D constructor from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let r = rows.len();
        let c = if r == 0 { 0 } else { rows[0].len() };
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            assert_eq!(row.len(), c, "ragged rows: {} vs {c}", row.len());
            data.extend_from_slice(row);
        }
        Tensor::from_vec(vec![r, c], data)
    }

    /// I.i.d. normal entries with the given standard deviation.
    pub fn randn<R: Rng>(rng: &mut R, shape: Vec<usize>, std: f64) -> Self {
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| {
                let z: f64 = rng.sample(StandardNormal);
                z * std
            })
            .collect();
        Tensor::from_vec(shape, data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Row count of a 2-D tensor.
    pub fn rows(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "rows() needs 2-D, got {:?}", self.shape);
        self.shape[0]
    }

    /// Column count of a 2-D tensor.
    pub fn cols(&self) -> usize {
        assert_eq!(self.shape.len(), 2, "cols() needs 2-D, got {:?}", self.shape);
        self.shape[1]
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    /// Sole element of a 1x1 tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.numel(), 1, "item() needs a scalar, got {:?}", self.shape);
        self.data[0]
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    /// Mean over rows of a 2-D tensor, as a plain vector.
    pub fn mean_rows(&self) -> Vec<f64> {
        let (r, c) = (self.rows(), self.cols());
        assert!(r > 0, "mean_rows on empty tensor");
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (j, o) in out.iter_mut().enumerate() {
                *o += self.data[i * c + j];
            }
        }
        for o in &mut out {
            *o /= r as f64;
        }
        out
    }
}
