use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense row-major array of `f64` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn from_vec(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::shape("ragged rows"));
        }
        Ok(Tensor {
            shape: vec![rows.len(), cols],
            data: rows.concat(),
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

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    /// Single value of a one-element tensor.
    pub fn item(&self) -> Result<f64> {
        match self.data.as_slice() {
            [v] => Ok(*v),
            _ => Err(Error::shape(format!(
                "item() on tensor with shape {:?}",
                self.shape
            ))),
        }
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    /// Row `i` of a 2-D tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        let cols = *self.shape.last().unwrap_or(&1);
        &self.data[i * cols..(i + 1) * cols]
    }

    /// Column `j` of a 2-D tensor, copied.
    pub fn column(&self, j: usize) -> Vec<f64> {
        let cols = self.shape[self.shape.len() - 1];
        self.data.iter().skip(j).step_by(cols).copied().collect()
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Trailing-dimension broadcast of two shapes.
pub fn broadcast_shapes(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(format!(
                    "shapes {a:?} and {b:?} are not broadcastable"
                )))
            }
        };
    }
    Ok(out)
}

/// For every flat index of `out_shape`, the flat index into a tensor of
/// shape `in_shape` that broadcasts to it.
pub(crate) fn broadcast_index_map(in_shape: &[usize], out_shape: &[usize]) -> Vec<usize> {
    let numel: usize = out_shape.iter().product();
    if in_shape.iter().product::<usize>() == numel {
        return (0..numel).collect();
    }
    let n = out_shape.len();
    let offset = n - in_shape.len();
    // strides of the input expressed on the output's axes; 0 where broadcast
    let mut strides = vec![0usize; n];
    let mut acc = 1;
    for i in (0..in_shape.len()).rev() {
        if in_shape[i] != 1 {
            strides[i + offset] = acc;
        }
        acc *= in_shape[i];
    }
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; n];
    let mut flat = 0usize;
    for _ in 0..numel {
        map.push(flat);
        for ax in (0..n).rev() {
            idx[ax] += 1;
            flat += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            flat -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    map
}

/// How flat indices of a broadcast output map back onto one input.
#[derive(Debug)]
pub(crate) enum Broadcast {
    Same,
    /// Input matches the trailing axes: index `i % n`.
    Cycle(usize),
    /// Input matches the leading axes: index `i / r`.
    Repeat(usize),
    General(Vec<usize>),
}

impl Broadcast {
    pub(crate) fn new(in_shape: &[usize], out_shape: &[usize]) -> Self {
        let in_numel: usize = in_shape.iter().product();
        let out_numel: usize = out_shape.iter().product();
        if in_numel == out_numel {
            return Broadcast::Same;
        }
        let core: Vec<usize> = {
            let first = in_shape.iter().position(|&d| d != 1).unwrap_or(in_shape.len());
            in_shape[first..].to_vec()
        };
        if out_shape.ends_with(&core) {
            return Broadcast::Cycle(in_numel);
        }
        let offset = out_shape.len() - in_shape.len();
        let last = in_shape.iter().rposition(|&d| d != 1).map_or(0, |p| p + 1);
        if in_numel > 0 && out_shape[offset..].starts_with(&in_shape[..last]) && offset == 0 {
            return Broadcast::Repeat(out_numel / in_numel);
        }
        Broadcast::General(broadcast_index_map(in_shape, out_shape))
    }

    #[inline]
    pub(crate) fn index(&self, i: usize) -> usize {
        match self {
            Broadcast::Same => i,
            Broadcast::Cycle(n) => i % n,
            Broadcast::Repeat(r) => i / r,
            Broadcast::General(map) => map[i],
        }
    }

    /// Sum an output-shaped gradient back onto the input.
    pub(crate) fn reduce(&self, grad: Vec<f64>, in_numel: usize) -> Vec<f64> {
        match self {
            Broadcast::Same => grad,
            Broadcast::Cycle(n) => {
                let mut out = vec![0.0; in_numel];
                for chunk in grad.chunks(*n) {
                    out.iter_mut().zip(chunk).for_each(|(o, g)| *o += g);
                }
                out
            }
            Broadcast::Repeat(r) => grad.chunks(*r).map(|c| c.iter().sum()).collect(),
            Broadcast::General(map) => {
                let mut out = vec![0.0; in_numel];
                for (g, &j) in grad.iter().zip(map) {
                    out[j] += g;
                }
                out
            }
        }
    }
}

#[cfg(test)]
/// Sum `grad` (shaped like the broadcast output) back onto `in_shape`.
pub(crate) fn reduce_to_shape(grad: &[f64], in_shape: &[usize], out_shape: &[usize]) -> Vec<f64> {
    Broadcast::new(in_shape, out_shape).reduce(grad.to_vec(), in_shape.iter().product())
}
