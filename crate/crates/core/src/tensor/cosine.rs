//! Cosine similarity, single-pair and batched row-wise forms.

use super::{Graph, Op, TensorError, TensorId};

fn norm2(v: &[f32]) -> f32 {
    v.iter().map(|x| x * x).sum::<f32>()
}

impl Graph {
    /// Cosine similarity of two vectors of equal length; scalar in [-1, 1].
    /// A zero-norm operand is an error, never a silent 0.
    pub fn cosine_similarity(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        if self.dims(a) != self.dims(b) || self.dims(a).len() != 1 {
            return Err(TensorError::Shape {
                op: "cosine_similarity",
                detail: format!("expected equal [D] vectors, got {:?} and {:?}", self.dims(a), self.dims(b)),
            });
        }
        let (na2, nb2) = (norm2(self.data(a)), norm2(self.data(b)));
        if na2 == 0.0 || nb2 == 0.0 {
            return Err(TensorError::Degenerate {
                op: "cosine_similarity",
                detail: "zero-norm input vector".to_string(),
            });
        }
        let dot: f32 = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).sum();
        let s = dot / (na2.sqrt() * nb2.sqrt());
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(Vec::new(), vec![s], rg, Op::CosineSim { a, b }))
    }

    pub(super) fn cosine_sim_backward(&mut self, a: TensorId, b: TensorId, gout: f32) {
        let av = self.data(a).to_vec();
        let bv = self.data(b).to_vec();
        let (ga, gb) = cosine_pair_grads(&av, &bv, gout);
        self.accumulate(a, &ga);
        self.accumulate(b, &gb);
    }

    /// Row-wise cosine similarity of two [N, D] tensors, yielding [N].
    pub fn cosine_rowwise(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let dims = self.dims(a).to_vec();
        if dims.len() != 2 || self.dims(b) != dims {
            return Err(TensorError::Shape {
                op: "cosine_rowwise",
                detail: format!("expected equal [N, D] tensors, got {:?} and {:?}", self.dims(a), self.dims(b)),
            });
        }
        let (n, d) = (dims[0], dims[1]);
        let av = self.data(a);
        let bv = self.data(b);
        let mut out = vec![0.0f32; n];
        for r in 0..n {
            let ar = &av[r * d..(r + 1) * d];
            let br = &bv[r * d..(r + 1) * d];
            let (na2, nb2) = (norm2(ar), norm2(br));
            if na2 == 0.0 || nb2 == 0.0 {
                return Err(TensorError::Degenerate {
                    op: "cosine_rowwise",
                    detail: format!("zero-norm embedding at row {r}"),
                });
            }
            let dot: f32 = ar.iter().zip(br).map(|(x, y)| x * y).sum();
            out[r] = dot / (na2.sqrt() * nb2.sqrt());
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(vec![n], out, rg, Op::CosineRowwise { a, b }))
    }

    pub(super) fn cosine_rowwise_backward(&mut self, a: TensorId, b: TensorId, gout: &[f32]) {
        let dims = self.dims(a).to_vec();
        let (n, d) = (dims[0], dims[1]);
        let av = self.data(a).to_vec();
        let bv = self.data(b).to_vec();
        let mut ga = vec![0.0f32; av.len()];
        let mut gb = vec![0.0f32; bv.len()];
        for r in 0..n {
            let ar = &av[r * d..(r + 1) * d];
            let br = &bv[r * d..(r + 1) * d];
            let (gra, grb) = cosine_pair_grads(ar, br, gout[r]);
            ga[r * d..(r + 1) * d].copy_from_slice(&gra);
            gb[r * d..(r + 1) * d].copy_from_slice(&grb);
        }
        self.accumulate(a, &ga);
        self.accumulate(b, &gb);
    }
}

/// d/da and d/db of g * cos(a, b).
fn cosine_pair_grads(a: &[f32], b: &[f32], g: f32) -> (Vec<f32>, Vec<f32>) {
    let na = norm2(a).sqrt();
    let nb = norm2(b).sqrt();
    let dot: f32 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let s = dot / (na * nb);
    let ga: Vec<f32> = a
        .iter()
        .zip(b)
        .map(|(x, y)| g * (y / (na * nb) - s * x / (na * na)))
        .collect();
    let gb: Vec<f32> = a
        .iter()
        .zip(b)
        .map(|(x, y)| g * (x / (na * nb) - s * y / (nb * nb)))
        .collect();
    (ga, gb)
}
