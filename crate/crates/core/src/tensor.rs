//! Dense row-major real tensors of rank at most three.

use crate::error::{Error, Result};

pub const MAX_RANK: usize = 3;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.len() > MAX_RANK {
            return Err(Error::ShapeMismatch(format!("rank {} exceeds {MAX_RANK}", shape.len())));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::ShapeMismatch(format!(
                "shape {shape:?} needs {n} elements, got {}",
                data.len()
            )));
        }
        Ok(Self { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        assert!(shape.len() <= MAX_RANK, "rank {} exceeds {MAX_RANK}", shape.len());
        Self { shape: shape.to_vec(), data: vec![v; shape.iter().product()] }
    }

    pub fn scalar(v: f64) -> Self {
        Self { shape: vec![], data: vec![v] }
    }

    /// Builds a matrix from rows; all rows must have equal length.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::ShapeMismatch("ragged rows".into()));
        }
        Self::new(&[rows.len(), cols], rows.concat())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    /// Extent of the last axis (1 for scalars).
    pub fn last_dim(&self) -> usize {
        self.shape.last().copied().unwrap_or(1)
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn at(&self, idx: &[usize]) -> f64 {
        self.data[self.offset(idx)]
    }

    pub fn set(&mut self, idx: &[usize], v: f64) {
        let o = self.offset(idx);
        self.data[o] = v;
    }

    fn offset(&self, idx: &[usize]) -> usize {
        assert_eq!(idx.len(), self.shape.len(), "index rank mismatch");
        let mut o = 0;
        for (i, (&x, &n)) in idx.iter().zip(&self.shape).enumerate() {
            assert!(x < n, "index {x} out of bounds for axis {i} of extent {n}");
            o = o * n + x;
        }
        o
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() || shape.len() > MAX_RANK {
            return Err(Error::ShapeMismatch(format!("cannot reshape {:?} to {shape:?}", self.shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    pub fn zip_with(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        if self.shape != other.shape {
            return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", self.shape, other.shape)));
        }
        Ok(Self {
            shape: self.shape.clone(),
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Self> {
        if self.rank() < 2 {
            return Err(Error::ShapeMismatch(format!("transpose needs rank >= 2, got {:?}", self.shape)));
        }
        let r = self.rank();
        let (n, m) = (self.shape[r - 2], self.shape[r - 1]);
        let batch = self.numel() / (n * m).max(1);
        let mut out = vec![0.0; self.numel()];
        for b in 0..batch {
            let src = &self.data[b * n * m..(b + 1) * n * m];
            let dst = &mut out[b * n * m..(b + 1) * n * m];
            for i in 0..n {
                for j in 0..m {
                    dst[j * n + i] = src[i * m + j];
                }
            }
        }
        let mut shape = self.shape.clone();
        shape.swap(r - 2, r - 1);
        Ok(Self { shape, data: out })
    }

    /// Matrix product over the last two axes.
    ///
    /// `[.., n, k] x [k, m]` broadcasts the right operand over leading axes;
    /// `[b, n, k] x [b, k, m]` multiplies batch-wise.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let plan = MatmulPlan::new(&self.shape, &other.shape)?;
        let mut out = vec![0.0; plan.out_numel()];
        plan.run(&self.data, &other.data, &mut out, 0.0);
        Self::new(&plan.out_shape, out)
    }
}

/// Shape bookkeeping shared by the tensor and tape matmuls.
#[derive(Clone, Debug)]
pub(crate) struct MatmulPlan {
    pub batch: usize,
    pub n: usize,
    pub k: usize,
    pub m: usize,
    pub batched_rhs: bool,
    pub out_shape: Vec<usize>,
}

impl MatmulPlan {
    pub fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        let mismatch = || Error::ShapeMismatch(format!("matmul {a:?} x {b:?}"));
        if a.len() < 2 || b.len() < 2 {
            return Err(mismatch());
        }
        let k = a[a.len() - 1];
        if b[b.len() - 2] != k {
            return Err(mismatch());
        }
        let m = b[b.len() - 1];
        let mut out_shape = a[..a.len() - 1].to_vec();
        out_shape.push(m);
        match b.len() {
            2 => {
                let rows = a[..a.len() - 1].iter().product();
                Ok(Self { batch: 1, n: rows, k, m, batched_rhs: false, out_shape })
            }
            3 if a.len() == 3 && a[0] == b[0] => {
                Ok(Self { batch: a[0], n: a[1], k, m, batched_rhs: true, out_shape })
            }
            _ => Err(mismatch()),
        }
    }

    pub fn out_numel(&self) -> usize {
        self.batch * self.n * self.m
    }

    /// `out = beta * out + a * b` per batch.
    pub fn run(&self, a: &[f64], b: &[f64], out: &mut [f64], beta: f64) {
        let (n, k, m) = (self.n, self.k, self.m);
        for bi in 0..self.batch {
            let ao = &a[bi * n * k..(bi + 1) * n * k];
            let bo = if self.batched_rhs { &b[bi * k * m..(bi + 1) * k * m] } else { b };
            let co = &mut out[bi * n * m..(bi + 1) * n * m];
            gemm(n, k, m, ao, k as isize, 1, bo, m as isize, 1, co, beta);
        }
    }
}

/// `c[m x n] = beta * c + a[m x k] * b[k x n]` with arbitrary strides on `a`
/// and `b`; `c` is row-major and contiguous.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n);
    if k == 0 {
        c[..m * n].iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let span = |rows: usize, cols: usize, rs: isize, cs: isize| {
        ((rows - 1) as isize * rs + (cols - 1) as isize * cs) as usize + 1
    };
    assert!(a.len() >= span(m, k, rsa, csa));
    assert!(b.len() >= span(k, n, rsb, csb));
    // SAFETY: the asserts above bound every strided access into a, b and c.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
