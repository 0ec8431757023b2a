use ndarray::linalg::general_mat_mul;
use ndarray::{ArrayView2, ArrayViewMut2, ShapeBuilder};

use super::NnError;

/// Dense row-major `f64` tensor. The first axis is the batch axis wherever a
/// layer consumes one.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NnError> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(NnError::Shape(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; n],
        }
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

    pub fn batch(&self) -> usize {
        self.shape[0]
    }

    /// Values per batch item.
    pub fn item_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn item(&self, b: usize) -> &[f64] {
        let n = self.item_len();
        &self.data[b * n..(b + 1) * n]
    }

    pub fn reshape(mut self, shape: Vec<usize>) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len(), "reshape size");
        self.shape = shape;
        self
    }

    /// Stacks equally shaped items into a batch.
    pub fn stack(items: &[&[f64]], item_shape: &[usize]) -> Self {
        let mut shape = vec![items.len()];
        shape.extend_from_slice(item_shape);
        let data = items.iter().flat_map(|i| i.iter().copied()).collect();
        Tensor { shape, data }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `c = alpha * op(a) * op(b) + beta * c` on row-major slices, where `op(a)`
/// is `m x k` and `op(b)` is `k x n`. A transposed operand is stored with
/// its dimensions swapped.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    n: usize,
    k: usize,
    alpha: f64,
    a: &[f64],
    b: &[f64],
    beta: f64,
    c: &mut [f64],
) {
    let a = if trans_a {
        ArrayView2::from_shape((m, k).strides((1, m)), a)
    } else {
        ArrayView2::from_shape((m, k), a)
    }
    .expect("gemm a shape");
    let b = if trans_b {
        ArrayView2::from_shape((k, n).strides((1, k)), b)
    } else {
        ArrayView2::from_shape((k, n), b)
    }
    .expect("gemm b shape");
    let mut c = ArrayViewMut2::from_shape((m, n), c).expect("gemm c shape");
    general_mat_mul(alpha, &a, &b, beta, &mut c);
}
