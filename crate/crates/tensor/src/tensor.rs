use std::fmt;

/// Dense 4-D array in NCHW order.
///
/// Every value flowing through the engine is a `Tensor`; scalars are `[1, 1, 1, 1]`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f64>,
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
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: [usize; 4], value: f64) -> Self {
        Self {
            shape,
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::full([1, 1, 1, 1], value)
    }

    /// Panics when `data.len()` does not match the shape.
    pub fn from_vec(shape: [usize; 4], data: Vec<f64>) -> Self {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "tensor data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// Size of one batch item (`C * H * W`).
    pub fn item_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn item(&self, n: usize) -> &[f64] {
        let len = self.item_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn item_mut(&mut self, n: usize) -> &mut [f64] {
        let len = self.item_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    /// Extracts a contiguous range of batch items as a new tensor.
    pub fn batch_slice(&self, start: usize, count: usize) -> Tensor {
        assert!(start + count <= self.n(), "batch slice out of range");
        let len = self.item_len();
        let [_, c, h, w] = self.shape;
        Tensor::from_vec(
            [count, c, h, w],
            self.data[start * len..(start + count) * len].to_vec(),
        )
    }

    /// Stacks tensors along the batch axis. All parts must agree on `[C, H, W]`.
    pub fn concat_batch(parts: &[&Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_batch needs at least one tensor");
        let [_, c, h, w] = parts[0].shape;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            assert_eq!(&p.shape[1..], &[c, h, w], "concat_batch shape mismatch");
            data.extend_from_slice(&p.data);
            n += p.n();
        }
        Tensor::from_vec([n, c, h, w], data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        assert_eq!(self.shape, other.shape, "zip_map shape mismatch");
        Tensor {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale_assign(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    /// Sequential left-to-right sum; summation order is fixed for reproducibility.
    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn mean(&self) -> f64 {
        self.sum() / self.data.len() as f64
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, x| m.max(x.abs()))
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Value at `[n, c, y, x]`.
    pub fn at(&self, n: usize, c: usize, y: usize, x: usize) -> f64 {
        let [_, cc, h, w] = self.shape;
        self.data[((n * cc + c) * h + y) * w + x]
    }

    /// Broadcasts `self` up to `shape`; every axis of `self` must be 1 or equal to the target.
    pub fn broadcast_to(&self, shape: [usize; 4]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        let strides = broadcast_strides(self.shape, shape);
        let mut out = Vec::with_capacity(shape.iter().product());
        for n in 0..shape[0] {
            for c in 0..shape[1] {
                for y in 0..shape[2] {
                    let base = n * strides[0] + c * strides[1] + y * strides[2];
                    for x in 0..shape[3] {
                        out.push(self.data[base + x * strides[3]]);
                    }
                }
            }
        }
        Tensor::from_vec(shape, out)
    }

    /// Sums `self` down to `shape`, the adjoint of [`Tensor::broadcast_to`].
    pub fn reduce_to(&self, shape: [usize; 4]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        let strides = broadcast_strides(shape, self.shape);
        let mut out = vec![0.0; shape.iter().product()];
        let mut i = 0;
        for n in 0..self.shape[0] {
            for c in 0..self.shape[1] {
                for y in 0..self.shape[2] {
                    let base = n * strides[0] + c * strides[1] + y * strides[2];
                    for x in 0..self.shape[3] {
                        out[base + x * strides[3]] += self.data[i];
                        i += 1;
                    }
                }
            }
        }
        Tensor::from_vec(shape, out)
    }
}

/// Element strides of `small` when iterated over `big`, with zero stride on broadcast axes.
pub(crate) fn broadcast_strides(small: [usize; 4], big: [usize; 4]) -> [usize; 4] {
    let mut strides = [0usize; 4];
    let mut acc = 1;
    for d in (0..4).rev() {
        assert!(
            small[d] == big[d] || small[d] == 1,
            "cannot broadcast {small:?} to {big:?}"
        );
        strides[d] = if small[d] == 1 { 0 } else { acc };
        acc *= small[d];
    }
    strides
}
