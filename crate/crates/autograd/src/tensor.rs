//! Dense row-major `f64` tensors and the broadcasting helpers shared by the
//! forward and backward kernels.

use std::fmt;

/// Number of elements of a shape. The empty shape is a scalar.
pub fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

/// Row-major strides for `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for d in (0..shape.len().saturating_sub(1)).rev() {
        s[d] = s[d + 1] * shape[d + 1];
    }
    s
}

/// Numpy-style broadcast of two shapes.
///
/// Panics when the shapes are incompatible.
pub fn broadcast_shape(a: &[usize], b: &[usize]) -> Vec<usize> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => panic!("shapes {a:?} and {b:?} do not broadcast"),
        };
    }
    out
}

/// How an input of shape `inp` is laid out against a broadcast output `out`.
pub(crate) enum BroadcastMap {
    /// Same shape, index `i` maps to `i`.
    Identity,
    /// Input is a trailing block repeated over leading dims: `i % n`.
    Suffix(usize),
    /// General case: explicit per-element index table.
    Table(Vec<usize>),
}

impl BroadcastMap {
    pub(crate) fn new(out: &[usize], inp: &[usize]) -> Self {
        if out == inp {
            return BroadcastMap::Identity;
        }
        let stripped: Vec<usize> = inp.iter().copied().skip_while(|&d| d == 1).collect();
        if stripped.len() <= out.len() && out[out.len() - stripped.len()..] == stripped[..] {
            return BroadcastMap::Suffix(numel(&stripped).max(1));
        }
        BroadcastMap::Table(broadcast_indices(out, inp))
    }

    #[inline]
    pub(crate) fn index(&self, i: usize) -> usize {
        match self {
            BroadcastMap::Identity => i,
            BroadcastMap::Suffix(n) => i % n,
            BroadcastMap::Table(t) => t[i],
        }
    }
}

fn broadcast_indices(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let off = nd - inp.len();
    let mut in_strides = vec![0usize; nd];
    let mut s = 1;
    for d in (0..inp.len()).rev() {
        in_strides[d + off] = if inp[d] == 1 { 0 } else { s };
        s *= inp[d];
    }
    let n = numel(out);
    let mut idx = vec![0usize; nd];
    let mut res = Vec::with_capacity(n);
    let mut cur = 0usize;
    for _ in 0..n {
        res.push(cur);
        for d in (0..nd).rev() {
            idx[d] += 1;
            cur += in_strides[d];
            if idx[d] < out[d] {
                break;
            }
            cur -= in_strides[d] * out[d];
            idx[d] = 0;
        }
    }
    res
}

#[derive(Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
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
    pub fn new(shape: &[usize], data: Vec<f64>) -> Self {
        assert_eq!(
            numel(shape),
            data.len(),
            "shape {shape:?} does not match {} elements",
            data.len()
        );
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Tensor::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Tensor::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], v: f64) -> Self {
        Tensor { shape: shape.to_vec(), data: vec![v; numel(shape)] }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor { shape: vec![], data: vec![v] }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> f64) -> Self {
        let data = (0..numel(shape)).map(&mut f).collect();
        Tensor { shape: shape.to_vec(), data }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
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

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on tensor of shape {:?}", self.shape);
        self.data[0]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Self {
        assert_eq!(numel(shape), self.data.len(), "cannot reshape {:?} to {shape:?}", self.shape);
        self.shape = shape.to_vec();
        self
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Tensor { shape: self.shape.clone(), data: self.data.iter().map(|&x| f(x)).collect() }
    }

    /// Elementwise combination with numpy broadcasting.
    pub fn zip_map(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Self {
        if self.shape == other.shape {
            let data = self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect();
            return Tensor { shape: self.shape.clone(), data };
        }
        let out = broadcast_shape(&self.shape, &other.shape);
        let ma = BroadcastMap::new(&out, &self.shape);
        let mb = BroadcastMap::new(&out, &other.shape);
        let data = (0..numel(&out))
            .map(|i| f(self.data[ma.index(i)], other.data[mb.index(i)]))
            .collect();
        Tensor { shape: out, data }
    }

    /// Sums `self` (shaped like a broadcast output) down to `shape`.
    pub fn reduce_to(&self, shape: &[usize]) -> Tensor {
        if self.shape == shape {
            return self.clone();
        }
        let map = BroadcastMap::new(&self.shape, shape);
        let mut out = vec![0.0; numel(shape)];
        for (i, &g) in self.data.iter().enumerate() {
            out[map.index(i)] += g;
        }
        Tensor { shape: shape.to_vec(), data: out }
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape, "add_assign shape mismatch");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0f64, |m, &x| m.max(x.abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Copies `len` entries starting at `start` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Tensor {
        let (outer, dim, inner) = split_axis(&self.shape, axis);
        assert!(start + len <= dim, "narrow {start}+{len} out of range {dim}");
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            data.extend_from_slice(&self.data[base..base + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Tensor { shape, data }
    }

    /// Rows selected along `axis` (indices may repeat).
    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Tensor {
        let (outer, dim, inner) = split_axis(&self.shape, axis);
        let mut data = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                assert!(i < dim, "index {i} out of range {dim}");
                let base = (o * dim + i) * inner;
                data.extend_from_slice(&self.data[base..base + inner]);
            }
        }
        let mut shape = self.shape.clone();
        shape[axis] = indices.len();
        Tensor { shape, data }
    }

    pub fn concat(parts: &[&Tensor], axis: usize) -> Tensor {
        assert!(!parts.is_empty(), "concat of nothing");
        let first = parts[0].shape();
        let mut shape = first.to_vec();
        shape[axis] = parts.iter().map(|p| p.shape[axis]).sum();
        for p in parts {
            assert_eq!(p.ndim(), first.len(), "concat rank mismatch");
            for d in 0..first.len() {
                assert!(d == axis || p.shape[d] == first[d], "concat shape mismatch {:?} vs {first:?}", p.shape);
            }
        }
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut data = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let block = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * block..(o + 1) * block]);
            }
        }
        Tensor { shape, data }
    }

    pub fn permute(&self, axes: &[usize]) -> Tensor {
        assert_eq!(axes.len(), self.ndim(), "permute rank mismatch");
        let in_strides = strides(&self.shape);
        let shape: Vec<usize> = axes.iter().map(|&a| self.shape[a]).collect();
        let perm_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
        let n = self.numel();
        let nd = shape.len();
        let mut data = Vec::with_capacity(n);
        let mut idx = vec![0usize; nd];
        let mut cur = 0usize;
        for _ in 0..n {
            data.push(self.data[cur]);
            for d in (0..nd).rev() {
                idx[d] += 1;
                cur += perm_strides[d];
                if idx[d] < shape[d] {
                    break;
                }
                cur -= perm_strides[d] * shape[d];
                idx[d] = 0;
            }
        }
        Tensor { shape, data }
    }

    /// Rounds every element through `f32`. Parameters are kept
    /// `f32`-representable so checkpoints restore them exactly.
    pub fn round_to_f32(&mut self) {
        for x in &mut self.data {
            *x = *x as f32 as f64;
        }
    }
}

/// `(outer, dim, inner)` sizes around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    assert!(axis < shape.len(), "axis {axis} out of range for {shape:?}");
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[4]), vec![2, 3, 4]);
        assert_eq!(broadcast_shape(&[2, 1, 4], &[3, 1]), vec![2, 3, 4]);
        assert_eq!(broadcast_shape(&[], &[5]), vec![5]);
    }

    #[test]
    #[should_panic]
    fn incompatible_broadcast_panics() {
        broadcast_shape(&[2, 3], &[4]);
    }

    #[test]
    fn zip_map_general_broadcast_matches_loops() {
        let a = Tensor::from_fn(&[2, 1, 3], |i| i as f64);
        let b = Tensor::from_fn(&[4, 1], |i| 10.0 * i as f64);
        let c = a.zip_map(&b, |x, y| x + y);
        assert_eq!(c.shape(), &[2, 4, 3]);
        for i in 0..2 {
            for j in 0..4 {
                for k in 0..3 {
                    let got = c.data()[(i * 4 + j) * 3 + k];
                    assert_eq!(got, a.data()[i * 3 + k] + b.data()[j]);
                }
            }
        }
        let r = c.reduce_to(&[4, 1]);
        // each b entry is used 2*3 times; sum of a entries = 15.
        for j in 0..4 {
            assert_eq!(r.data()[j], 6.0 * 10.0 * j as f64 + 15.0);
        }
    }

    #[test]
    fn permute_then_inverse_is_identity() {
        let t = Tensor::from_fn(&[2, 3, 4], |i| i as f64);
        let p = t.permute(&[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        assert_eq!(p.data()[1], t.data()[4]);
        assert_eq!(p.permute(&[1, 2, 0]), t);
    }

    #[test]
    fn narrow_concat_roundtrip() {
        let t = Tensor::from_fn(&[2, 5, 3], |i| i as f64);
        let a = t.narrow(1, 0, 2);
        let b = t.narrow(1, 2, 3);
        assert_eq!(Tensor::concat(&[&a, &b], 1), t);
    }
}
