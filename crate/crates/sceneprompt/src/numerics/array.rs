//! Dense row-major `f64` arrays.
//!
//! `DenseArray` is the value carrier for every vector and matrix in the
//! crate. Shapes are dynamic; the differentiable layer restricts itself
//! to rank-2 arrays but plain numeric helpers accept any rank.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct DenseArray {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl DenseArray {
    /// Builds an array, validating element count and finiteness.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let count: usize = shape.iter().product();
        if count != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} holds {} elements, got {}",
                shape,
                count,
                data.len()
            )));
        }
        let arr = DenseArray { shape, data };
        arr.check_finite("DenseArray::new")?;
        Ok(arr)
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let count = shape.iter().product();
        DenseArray {
            shape,
            data: vec![0.0; count],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let count = shape.iter().product();
        DenseArray {
            shape,
            data: vec![value; count],
        }
    }

    pub fn scalar(value: f64) -> Self {
        DenseArray {
            shape: vec![1, 1],
            data: vec![value],
        }
    }

    /// Rank-2 array from nested rows; all rows must share a length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map(|r| r.len()).unwrap_or(0);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Dimension("ragged rows".into()));
        }
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            data.extend_from_slice(row);
        }
        DenseArray::new(vec![r, c], data)
    }

    pub fn row_vector(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        DenseArray::new(vec![1, n], values)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// (rows, cols) of a rank-2 array.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Dimension(format!("expected rank 2, got {other:?}"))),
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Single element of a 1x1 array.
    pub fn scalar_value(&self) -> Result<f64> {
        if self.data.len() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Dimension(format!(
                "expected scalar, got shape {:?}",
                self.shape
            )))
        }
    }

    pub fn get2(&self, i: usize, j: usize) -> f64 {
        let c = self.shape[1];
        self.data[i * c + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f64) {
        let c = self.shape[1];
        self.data[i * c + j] = v;
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.shape[1];
        &self.data[i * c..(i + 1) * c]
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> DenseArray {
        DenseArray {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &DenseArray, f: impl Fn(f64, f64) -> f64) -> Result<DenseArray> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "elementwise op on {:?} vs {:?}",
                self.shape, other.shape
            )));
        }
        Ok(DenseArray {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn add(&self, other: &DenseArray) -> Result<DenseArray> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &DenseArray) -> Result<DenseArray> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> DenseArray {
        self.map(|v| v * c)
    }

    pub fn add_assign(&mut self, other: &DenseArray) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Dimension(format!(
                "accumulate {:?} into {:?}",
                other.shape, self.shape
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn fill(&mut self, v: f64) {
        self.data.iter_mut().for_each(|x| *x = v);
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn reshaped(&self, shape: Vec<usize>) -> Result<DenseArray> {
        let count: usize = shape.iter().product();
        if count != self.data.len() {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {:?}",
                self.shape, shape
            )));
        }
        Ok(DenseArray {
            shape,
            data: self.data.clone(),
        })
    }

    /// Plain matrix product; the tape has its own differentiable version.
    pub fn matmul(&self, other: &DenseArray) -> Result<DenseArray> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul [{m}x{k}] x [{k2}x{n}]"
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for j in 0..n {
                    orow[j] += a * brow[j];
                }
            }
        }
        Ok(DenseArray {
            shape: vec![m, n],
            data: out,
        })
    }

    pub fn transposed(&self) -> Result<DenseArray> {
        let (m, n) = self.dims2()?;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = self.data[i * n + j];
            }
        }
        Ok(DenseArray {
            shape: vec![n, m],
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_count_mismatch() {
        assert!(DenseArray::new(vec![2, 3], vec![0.0; 5]).is_err());
    }

    #[test]
    fn new_rejects_non_finite() {
        let err = DenseArray::new(vec![1, 2], vec![1.0, f64::NAN]).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn matmul_known_product() {
        let a = DenseArray::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
        let b = DenseArray::from_rows(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.as_slice(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn transpose_round_trip() {
        let a = DenseArray::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
        let t = a.transposed().unwrap();
        assert_eq!(t.shape(), &[3, 2]);
        assert_eq!(t.transposed().unwrap(), a);
    }
}
