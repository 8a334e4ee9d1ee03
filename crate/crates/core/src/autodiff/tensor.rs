use std::fmt;
use std::sync::Arc;

use crate::error::{Error, Result};

/// Immutable, reference-counted, row-major `f64` array.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape)?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self {
            shape,
            data: Arc::new(data),
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self::from_parts(shape.to_vec(), vec![value; shape.iter().product()])
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_parts(vec![], vec![value])
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.data.as_ref().clone()
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a tensor with {} elements", self.data.len());
        self.data[0]
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.shape.clone(), self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        assert_eq!(self.shape, other.shape, "max_abs_diff shape mismatch");
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn permute(&self, dims: &[usize]) -> Result<Self> {
        check_permutation(dims, self.rank())?;
        let shape: Vec<usize> = dims.iter().map(|&d| self.shape[d]).collect();
        Ok(Self::from_parts(shape, permute_data(&self.data, &self.shape, dims)))
    }

    /// Elementwise in-place sum with a tensor of identical shape.
    pub fn add_assign(&mut self, other: &Tensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(format!("cannot add {:?} to {:?}", other.shape, self.shape)));
        }
        for (a, b) in std::sync::Arc::make_mut(&mut self.data).iter_mut().zip(other.data.iter()) {
            *a += b;
        }
        Ok(())
    }

    /// Elements along `axis` at positions `indices`.
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Self> {
        if axis >= self.rank() {
            return Err(Error::shape(format!("axis {axis} out of range for {:?}", self.shape)));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.shape[axis]) {
            return Err(Error::shape(format!(
                "index {bad} out of range for axis {axis} of {:?}",
                self.shape
            )));
        }
        let (outer, n, inner) = split_axis(&self.shape, axis);
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                out.extend_from_slice(&self.data[(o * n + i) * inner..][..inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = indices.len();
        Ok(Self::from_parts(shape, out))
    }
}

pub(crate) fn check_permutation(dims: &[usize], rank: usize) -> Result<()> {
    let mut seen = vec![false; rank];
    if dims.len() != rank {
        return Err(Error::shape(format!("permutation {dims:?} for rank {rank}")));
    }
    for &d in dims {
        if d >= rank || seen[d] {
            return Err(Error::shape(format!("invalid permutation {dims:?}")));
        }
        seen[d] = true;
    }
    Ok(())
}

/// `(outer, len, inner)` element counts around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Walks a row-major index space of `shape`, calling `f(offsets)` once per
/// innermost run with the starting offset of each strided operand. The
/// innermost run has length `shape.last()`.
fn for_each_run<const N: usize>(
    shape: &[usize],
    operand_strides: [&[usize]; N],
    mut f: impl FnMut([usize; N]),
) {
    let rank = shape.len();
    if rank == 0 {
        f([0; N]);
        return;
    }
    if shape.iter().any(|&d| d == 0) {
        return;
    }
    let outer_rank = rank - 1;
    let mut idx = vec![0usize; outer_rank];
    let mut offs = [0usize; N];
    loop {
        f(offs);
        // Increment the multi-index over the outer dims.
        let mut d = outer_rank;
        loop {
            if d == 0 {
                return;
            }
            d -= 1;
            idx[d] += 1;
            for (k, s) in operand_strides.iter().enumerate() {
                offs[k] += s[d];
            }
            if idx[d] < shape[d] {
                break;
            }
            for (k, s) in operand_strides.iter().enumerate() {
                offs[k] -= s[d] * shape[d];
            }
            idx[d] = 0;
        }
    }
}

pub(crate) fn permute_data(data: &[f64], shape: &[usize], dims: &[usize]) -> Vec<f64> {
    if dims.iter().enumerate().all(|(i, &d)| i == d) {
        return data.to_vec();
    }
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = dims.iter().map(|&d| shape[d]).collect();
    let src_strides: Vec<usize> = dims.iter().map(|&d| in_strides[d]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let last = *out_shape.last().unwrap_or(&1);
    let inner_stride = *src_strides.last().unwrap_or(&1);
    for_each_run(&out_shape, [&src_strides], |[src]| {
        if inner_stride == 1 {
            out.extend_from_slice(&data[src..src + last]);
        } else {
            out.extend((0..last).map(|i| data[src + i * inner_stride]));
        }
    });
    out
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(format!(
                    "cannot broadcast {a:?} with {b:?}"
                )))
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` when viewed inside `out` (zero on broadcast dims).
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let s = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| {
            if i < off || shape[i - off] == 1 {
                0
            } else {
                s[i - off]
            }
        })
        .collect()
}

pub(crate) fn broadcast_binary(
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    if a.shape == b.shape {
        let data = a.data.iter().zip(b.data.iter()).map(|(&x, &y)| f(x, y)).collect();
        return Ok(Tensor::from_parts(a.shape.clone(), data));
    }
    let shape = broadcast_shape(&a.shape, &b.shape)?;
    let sa = broadcast_strides(&a.shape, &shape);
    let sb = broadcast_strides(&b.shape, &shape);
    let n: usize = shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let last = *shape.last().unwrap_or(&1);
    let (ia, ib) = (*sa.last().unwrap_or(&0), *sb.last().unwrap_or(&0));
    let (ad, bd) = (a.data(), b.data());
    for_each_run(&shape, [&sa, &sb], |[oa, ob]| {
        for i in 0..last {
            out.push(f(ad[oa + i * ia], bd[ob + i * ib]));
        }
    });
    Ok(Tensor::from_parts(shape, out))
}

/// Sums `grad` (shaped like a broadcast result) back down to `shape`.
pub(crate) fn sum_to_shape(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let out_shape = grad.shape();
    let st = broadcast_strides(shape, out_shape);
    let mut acc = vec![0.0; shape.iter().product()];
    let last = *out_shape.last().unwrap_or(&1);
    let inner = *st.last().unwrap_or(&0);
    let g = grad.data();
    let mut pos = 0;
    for_each_run(out_shape, [&st], |[o]| {
        for i in 0..last {
            acc[o + i * inner] += g[pos + i];
        }
        pos += last;
    });
    Tensor::from_parts(shape.to_vec(), acc)
}

/// `c = alpha * a·b + beta * c` for arbitrarily strided row/column layouts.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let a_max = (m - 1) * a_strides.0 + (k - 1) * a_strides.1;
    let b_max = (k - 1) * b_strides.0 + (n - 1) * b_strides.1;
    assert!(a_max < a.len() && b_max < b.len() && m * n <= c.len(), "gemm operand out of bounds");
    // SAFETY: the bounds check above covers every element addressed by the
    // given strides; `c` is densely row-major with `m * n` elements.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
