use crate::error::{Error, Result};

/// Dense row-major `f64` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim("tensor", shape, &[data.len()]));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![value],
        }
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn eye(n: usize) -> Self {
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

    /// Value of a single-element tensor.
    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn reshaped(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::dim("reshape", &self.shape, shape));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        debug_assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.data {
            *a *= s;
        }
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let len = shape[axis];
    let inner = shape[axis + 1..].iter().product();
    (outer, len, inner)
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// How an operand of a broadcast maps onto the output's flat index.
#[derive(Clone, Debug)]
pub(crate) enum BcastMap {
    Same,
    Scalar,
    /// Operand shape is a suffix of the output shape: index = i % n.
    Suffix(usize),
    General(Vec<usize>),
}

impl BcastMap {
    pub(crate) fn new(out: &[usize], operand: &[usize]) -> Self {
        let n: usize = operand.iter().product();
        if out == operand {
            return BcastMap::Same;
        }
        if n == 1 {
            return BcastMap::Scalar;
        }
        let lead = operand.iter().take_while(|&&d| d == 1).count();
        let trimmed = &operand[lead..];
        let k = trimmed.len();
        if k <= out.len() && out[out.len() - k..] == *trimmed {
            return BcastMap::Suffix(n);
        }
        let total: usize = out.iter().product();
        let pad = out.len() - operand.len();
        let op_strides = strides(operand);
        let mut eff = vec![0; out.len()];
        for i in 0..operand.len() {
            if operand[i] != 1 {
                eff[pad + i] = op_strides[i];
            }
        }
        let mut idx = Vec::with_capacity(total);
        let mut counter = vec![0usize; out.len()];
        let mut cur = 0usize;
        for _ in 0..total {
            idx.push(cur);
            for d in (0..out.len()).rev() {
                counter[d] += 1;
                cur += eff[d];
                if counter[d] < out[d] {
                    break;
                }
                cur -= eff[d] * counter[d];
                counter[d] = 0;
            }
        }
        BcastMap::General(idx)
    }

    #[inline]
    pub(crate) fn at(&self, i: usize) -> usize {
        match self {
            BcastMap::Same => i,
            BcastMap::Scalar => 0,
            BcastMap::Suffix(n) => i % n,
            BcastMap::General(v) => v[i],
        }
    }

    /// Sum `grad` (output-shaped) back into an operand-shaped buffer.
    pub(crate) fn reduce(&self, grad: &[f64], operand_len: usize) -> Vec<f64> {
        match self {
            BcastMap::Same => grad.to_vec(),
            _ => {
                let mut out = vec![0.0; operand_len];
                for (i, g) in grad.iter().enumerate() {
                    out[self.at(i)] += g;
                }
                out
            }
        }
    }
}
