//! Complex tensors stored as separate real and imaginary planes.

use crate::complex::{smith_div, ExtendedComplex};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor {
    re: Tensor,
    im: Tensor,
}

/// Elementwise complex operation for [`ComplexTensor::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl ComplexTensor {
    pub fn new(re: Tensor, im: Tensor) -> Result<Self> {
        if re.shape() != im.shape() {
            return Err(Error::ShapeMismatch(format!(
                "real plane {:?} vs imaginary plane {:?}",
                re.shape(),
                im.shape()
            )));
        }
        Ok(Self { re, im })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self { re: Tensor::zeros(shape), im: Tensor::zeros(shape) }
    }

    pub fn from_real(re: Tensor) -> Self {
        let im = Tensor::zeros(re.shape());
        Self { re, im }
    }

    /// Builds from `(re, im)` pairs laid out row-major.
    pub fn from_pairs(shape: &[usize], pairs: &[(f64, f64)]) -> Result<Self> {
        let re = Tensor::new(shape, pairs.iter().map(|p| p.0).collect())?;
        let im = Tensor::new(shape, pairs.iter().map(|p| p.1).collect())?;
        Ok(Self { re, im })
    }

    pub fn shape(&self) -> &[usize] {
        self.re.shape()
    }

    pub fn numel(&self) -> usize {
        self.re.numel()
    }

    pub fn re(&self) -> &Tensor {
        &self.re
    }

    pub fn im(&self) -> &Tensor {
        &self.im
    }

    pub fn into_parts(self) -> (Tensor, Tensor) {
        (self.re, self.im)
    }

    pub fn at(&self, idx: &[usize]) -> (f64, f64) {
        (self.re.at(idx), self.im.at(idx))
    }

    pub fn get(&self, idx: &[usize]) -> Result<ExtendedComplex> {
        let (r, i) = self.at(idx);
        ExtendedComplex::new(r, i)
    }

    pub fn set(&mut self, idx: &[usize], v: (f64, f64)) {
        self.re.set(idx, v.0);
        self.im.set(idx, v.1);
    }

    /// `(A_r + iA_i)(B_r + iB_i)` as four real products.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let rr = self.re.matmul(&other.re)?;
        let ii = self.im.matmul(&other.im)?;
        let ri = self.re.matmul(&other.im)?;
        let ir = self.im.matmul(&other.re)?;
        Ok(Self { re: rr.zip_with(&ii, |a, b| a - b)?, im: ri.zip_with(&ir, |a, b| a + b)? })
    }

    pub fn transpose(&self) -> Result<Self> {
        Ok(Self { re: self.re.transpose()?, im: self.im.transpose()? })
    }

    pub fn conj_transpose(&self) -> Result<Self> {
        Ok(Self { re: self.re.transpose()?, im: self.im.transpose()?.map(|x| -x) })
    }

    pub fn elementwise(&self, op: ElementwiseOp, other: &Self) -> Result<Self> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", self.shape(), other.shape())));
        }
        let n = self.numel();
        let (ar, ai, br, bi) = (self.re.data(), self.im.data(), other.re.data(), other.im.data());
        let mut re = Vec::with_capacity(n);
        let mut im = Vec::with_capacity(n);
        for k in 0..n {
            let (r, i) = match op {
                ElementwiseOp::Add => (ar[k] + br[k], ai[k] + bi[k]),
                ElementwiseOp::Sub => (ar[k] - br[k], ai[k] - bi[k]),
                ElementwiseOp::Mul => (ar[k] * br[k] - ai[k] * bi[k], ar[k] * bi[k] + ai[k] * br[k]),
                ElementwiseOp::Div => {
                    if br[k] == 0.0 && bi[k] == 0.0 {
                        return Err(Error::IndeterminateForm("elementwise division by zero"));
                    }
                    smith_div(ar[k], ai[k], br[k], bi[k])
                }
            };
            re.push(r);
            im.push(i);
        }
        Ok(Self { re: Tensor::new(self.shape(), re)?, im: Tensor::new(self.shape(), im)? })
    }

    /// Elementwise `re + im`, the real collapse used between complex and real layers.
    pub fn collapse(&self) -> Tensor {
        self.re.zip_with(&self.im, |a, b| a + b).expect("planes share a shape")
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.re.max_abs_diff(&other.re).max(self.im.max_abs_diff(&other.im))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> ComplexTensor {
        let n: usize = shape.iter().product();
        let pairs: Vec<(f64, f64)> =
            (0..n).map(|_| (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        ComplexTensor::from_pairs(shape, &pairs).unwrap()
    }

    // scalar-loop oracle on (re, im) tuples
    fn loop_matmul(a: &ComplexTensor, b: &ComplexTensor) -> ComplexTensor {
        let (n, k, m) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = ComplexTensor::zeros(&[n, m]);
        for i in 0..n {
            for j in 0..m {
                let (mut sr, mut si) = (0.0, 0.0);
                for p in 0..k {
                    let (xr, xi) = a.at(&[i, p]);
                    let (yr, yi) = b.at(&[p, j]);
                    sr += xr * yr - xi * yi;
                    si += xr * yi + xi * yr;
                }
                out.set(&[i, j], (sr, si));
            }
        }
        out
    }

    #[test]
    fn i_times_i() {
        let i = ComplexTensor::from_pairs(&[1, 1], &[(0.0, 1.0)]).unwrap();
        assert_eq!(i.matmul(&i).unwrap().at(&[0, 0]), (-1.0, 0.0));
    }

    #[test]
    fn identity_is_neutral() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&[3, 4], &mut rng);
        let id = ComplexTensor::from_real(Tensor::identity(4));
        assert!(a.matmul(&id).unwrap().max_abs_diff(&a) == 0.0);
    }

    #[test]
    fn matmul_matches_loop_oracle_all_small_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for n in 1..=8 {
            for k in 1..=8 {
                for m in 1..=8 {
                    let a = random(&[n, k], &mut rng);
                    let b = random(&[k, m], &mut rng);
                    assert!(a.matmul(&b).unwrap().max_abs_diff(&loop_matmul(&a, &b)) < 1e-12);
                }
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch() {
        let a = ComplexTensor::zeros(&[2, 3]);
        assert!(matches!(a.matmul(&a), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn conj_transpose_row() {
        let a = ComplexTensor::from_pairs(&[1, 2], &[(1.0, 1.0), (2.0, 0.0)]).unwrap();
        let t = a.conj_transpose().unwrap();
        assert_eq!(t.shape(), &[2, 1]);
        assert_eq!(t.at(&[0, 0]), (1.0, -1.0));
        assert_eq!(t.at(&[1, 0]), (2.0, -0.0));
    }

    #[test]
    fn elementwise_against_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = random(&[2, 2], &mut rng);
        let b = random(&[2, 2], &mut rng);
        let ones = ComplexTensor::from_real(Tensor::ones(&[2, 2]));
        assert_eq!(a.elementwise(ElementwiseOp::Mul, &ones).unwrap(), a);
        let prod = a.elementwise(ElementwiseOp::Mul, &b).unwrap();
        let quot = a.elementwise(ElementwiseOp::Div, &b).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let x = a.get(&[i, j]).unwrap();
                let y = b.get(&[i, j]).unwrap();
                let p = crate::complex::c_mul(x, y).unwrap();
                let q = crate::complex::c_div(x, y).unwrap();
                assert!(prod.get(&[i, j]).unwrap().dist(&p) < 1e-12);
                assert!(quot.get(&[i, j]).unwrap().dist(&q) < 1e-12);
            }
        }
        assert!(a.elementwise(ElementwiseOp::Add, &ComplexTensor::zeros(&[2, 3])).is_err());
        assert!(a.elementwise(ElementwiseOp::Div, &ComplexTensor::zeros(&[2, 2])).is_err());
    }
}
