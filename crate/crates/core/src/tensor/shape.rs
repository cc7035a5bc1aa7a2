//! Shape manipulation: reshape, axis permutation, global average pooling.

use super::{Graph, Op, TensorError, TensorId};

impl Graph {
    /// Reinterpret the row-major buffer under new dims of equal element count.
    pub fn reshape(&mut self, a: TensorId, new_dims: &[usize]) -> Result<TensorId, TensorError> {
        let n: usize = new_dims.iter().product();
        if n != self.data(a).len() || new_dims.iter().any(|&d| d == 0) {
            return Err(TensorError::Shape {
                op: "reshape",
                detail: format!("cannot view {:?} as {:?}", self.dims(a), new_dims),
            });
        }
        let data = self.data(a).to_vec();
        let rg = self.requires(a);
        Ok(self.push(new_dims.to_vec(), data, rg, Op::Reshape { a }))
    }

    /// Materialized axis permutation; `axes[i]` names the source axis that
    /// becomes output axis `i`.
    pub fn permute(&mut self, a: TensorId, axes: &[usize]) -> Result<TensorId, TensorError> {
        let rank = self.dims(a).len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&ax| ax >= rank || std::mem::replace(&mut seen[ax], true)) {
            return Err(TensorError::Shape {
                op: "permute",
                detail: format!("axes {:?} is not a permutation of 0..{rank}", axes),
            });
        }
        let (new_dims, new_data) = permute_data(self.dims(a), self.data(a), axes);
        let rg = self.requires(a);
        Ok(self.push(new_dims, new_data, rg, Op::Permute { a, axes: axes.to_vec() }))
    }

    pub(super) fn permute_backward(&mut self, a: TensorId, axes: &[usize], gout: &[f32]) {
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        let out_dims: Vec<usize> = axes.iter().map(|&ax| self.dims(a)[ax]).collect();
        let (_, ga) = permute_data(&out_dims, gout, &inverse);
        self.accumulate(a, &ga);
    }

    /// Mean over the spatial axes of an [N, C, H, W] tensor, yielding [N, C].
    pub fn global_avg_pool(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let dims = self.dims(a).to_vec();
        if dims.len() != 4 {
            return Err(TensorError::Shape {
                op: "global_avg_pool",
                detail: format!("expected [N, C, H, W], got {dims:?}"),
            });
        }
        let (n, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
        let hw = (h * w) as f32;
        let src = self.data(a);
        let mut out = vec![0.0f32; n * c];
        for i in 0..n {
            for j in 0..c {
                let base = (i * c + j) * h * w;
                let s: f32 = src[base..base + h * w].iter().sum();
                out[i * c + j] = s / hw;
            }
        }
        let rg = self.requires(a);
        Ok(self.push(vec![n, c], out, rg, Op::GlobalAvgPool { a }))
    }

    pub(super) fn global_avg_pool_backward(&mut self, a: TensorId, gout: &[f32]) {
        let dims = self.dims(a);
        let (n, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
        let hw = (h * w) as f32;
        let mut ga = vec![0.0f32; n * c * h * w];
        for i in 0..n {
            for j in 0..c {
                let g = gout[i * c + j] / hw;
                let base = (i * c + j) * h * w;
                for v in &mut ga[base..base + h * w] {
                    *v += g;
                }
            }
        }
        self.accumulate(a, &ga);
    }
}

fn permute_data(dims: &[usize], data: &[f32], axes: &[usize]) -> (Vec<usize>, Vec<f32>) {
    let rank = dims.len();
    let new_dims: Vec<usize> = axes.iter().map(|&ax| dims[ax]).collect();
    let mut src_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        src_strides[i] = src_strides[i + 1] * dims[i + 1];
    }
    let mut out = vec![0.0f32; data.len()];
    let mut index = vec![0usize; rank];
    for slot in out.iter_mut() {
        let mut src_off = 0;
        for (i, &ix) in index.iter().enumerate() {
            src_off += ix * src_strides[axes[i]];
        }
        *slot = data[src_off];
        for i in (0..rank).rev() {
            index[i] += 1;
            if index[i] < new_dims[i] {
                break;
            }
            index[i] = 0;
        }
    }
    (new_dims, out)
}
