//! Normalizing transforms: layer normalization, softmax, row L2 normalization,
//! and softmax cross-entropy.

use super::{Graph, Op, TensorError, TensorId};

impl Graph {
    /// Normalize the last dimension of `x` per sample (biased variance,
    /// `eps` inside the square root), then apply the affine `gamma`/`beta`.
    pub fn layer_norm(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f32,
    ) -> Result<TensorId, TensorError> {
        if eps <= 0.0 {
            return Err(TensorError::Config {
                op: "layer_norm",
                detail: format!("eps must be positive, got {eps}"),
            });
        }
        let dims = self.dims(x).to_vec();
        let d = *dims.last().ok_or(TensorError::Shape {
            op: "layer_norm",
            detail: "input must have at least one dimension".to_string(),
        })?;
        if self.dims(gamma) != [d] || self.dims(beta) != [d] {
            return Err(TensorError::Shape {
                op: "layer_norm",
                detail: format!(
                    "gamma {:?} / beta {:?} must both be [{d}] for input {:?}",
                    self.dims(gamma),
                    self.dims(beta),
                    dims
                ),
            });
        }
        let xv = self.data(x);
        let gv = self.data(gamma);
        let bv = self.data(beta);
        let rows = xv.len() / d;
        let mut out = vec![0.0f32; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let inv_std = 1.0 / (var + eps).sqrt();
            let or = &mut out[r * d..(r + 1) * d];
            for i in 0..d {
                or[i] = gv[i] * ((row[i] - mean) * inv_std) + bv[i];
            }
        }
        let rg = self.requires(x) || self.requires(gamma) || self.requires(beta);
        Ok(self.push(dims, out, rg, Op::LayerNorm { input: x, gamma, beta, eps }))
    }

    pub(super) fn layer_norm_backward(
        &mut self,
        x: TensorId,
        gamma: TensorId,
        beta: TensorId,
        eps: f32,
        gout: &[f32],
    ) {
        let d = *self.dims(x).last().unwrap();
        let xv = self.data(x).to_vec();
        let gv = self.data(gamma).to_vec();
        let rows = xv.len() / d;

        let need_gx = self.requires(x);
        let need_gg = self.requires(gamma);
        let need_gb = self.requires(beta);
        let mut gx = if need_gx { vec![0.0f32; xv.len()] } else { Vec::new() };
        let mut gg = if need_gg { vec![0.0f32; d] } else { Vec::new() };
        let mut gb = if need_gb { vec![0.0f32; d] } else { Vec::new() };

        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let g = &gout[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let inv_std = 1.0 / (var + eps).sqrt();
            // xhat_i = (x_i - mean) * inv_std
            if need_gg || need_gb {
                for i in 0..d {
                    let xhat = (row[i] - mean) * inv_std;
                    if need_gg {
                        gg[i] += g[i] * xhat;
                    }
                    if need_gb {
                        gb[i] += g[i];
                    }
                }
            }
            if need_gx {
                // h = g * gamma; gx = (h - mean(h) - xhat * mean(h * xhat)) * inv_std
                let mut h_mean = 0.0f32;
                let mut hx_mean = 0.0f32;
                for i in 0..d {
                    let h = g[i] * gv[i];
                    let xhat = (row[i] - mean) * inv_std;
                    h_mean += h;
                    hx_mean += h * xhat;
                }
                h_mean /= d as f32;
                hx_mean /= d as f32;
                let gr = &mut gx[r * d..(r + 1) * d];
                for i in 0..d {
                    let h = g[i] * gv[i];
                    let xhat = (row[i] - mean) * inv_std;
                    gr[i] = (h - h_mean - xhat * hx_mean) * inv_std;
                }
            }
        }
        if need_gx {
            self.accumulate(x, &gx);
        }
        if need_gg {
            self.accumulate(gamma, &gg);
        }
        if need_gb {
            self.accumulate(beta, &gb);
        }
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let dims = self.dims(a).to_vec();
        let d = *dims.last().ok_or(TensorError::Shape {
            op: "softmax",
            detail: "input must have at least one dimension".to_string(),
        })?;
        let xv = self.data(a);
        let rows = xv.len() / d;
        let mut out = vec![0.0f32; xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let or = &mut out[r * d..(r + 1) * d];
            let mut z = 0.0f32;
            for i in 0..d {
                or[i] = (row[i] - max).exp();
                z += or[i];
            }
            for v in or.iter_mut() {
                *v /= z;
            }
        }
        let rg = self.requires(a);
        Ok(self.push(dims, out, rg, Op::Softmax { a }))
    }

    pub(super) fn softmax_backward(&mut self, out_idx: usize, a: TensorId, gout: &[f32]) {
        let y = self.nodes[out_idx].tensor.data.clone();
        let d = *self.dims(a).last().unwrap();
        let rows = y.len() / d;
        let mut ga = vec![0.0f32; y.len()];
        for r in 0..rows {
            let yr = &y[r * d..(r + 1) * d];
            let gr = &gout[r * d..(r + 1) * d];
            let dot: f32 = yr.iter().zip(gr).map(|(yv, gv)| yv * gv).sum();
            let or = &mut ga[r * d..(r + 1) * d];
            for i in 0..d {
                or[i] = yr[i] * (gr[i] - dot);
            }
        }
        self.accumulate(a, &ga);
    }

    /// Scale each row of an [N, D] tensor to unit L2 norm.
    pub fn l2_normalize_rows(&mut self, a: TensorId) -> Result<TensorId, TensorError> {
        let dims = self.dims(a).to_vec();
        if dims.len() != 2 {
            return Err(TensorError::Shape {
                op: "l2_normalize_rows",
                detail: format!("expected [N, D], got {dims:?}"),
            });
        }
        let d = dims[1];
        let xv = self.data(a);
        let mut out = vec![0.0f32; xv.len()];
        for r in 0..dims[0] {
            let row = &xv[r * d..(r + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            if norm == 0.0 {
                return Err(TensorError::Degenerate {
                    op: "l2_normalize_rows",
                    detail: format!("row {r} has zero norm"),
                });
            }
            let or = &mut out[r * d..(r + 1) * d];
            for i in 0..d {
                or[i] = row[i] / norm;
            }
        }
        let rg = self.requires(a);
        Ok(self.push(dims, out, rg, Op::L2NormalizeRows { a }))
    }

    pub(super) fn l2_normalize_rows_backward(&mut self, out_idx: usize, a: TensorId, gout: &[f32]) {
        let y = self.nodes[out_idx].tensor.data.clone();
        let dims = self.dims(a).to_vec();
        let d = dims[1];
        let xv = self.data(a).to_vec();
        let mut ga = vec![0.0f32; xv.len()];
        for r in 0..dims[0] {
            let row = &xv[r * d..(r + 1) * d];
            let yr = &y[r * d..(r + 1) * d];
            let gr = &gout[r * d..(r + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            let dot: f32 = gr.iter().zip(yr).map(|(g, yv)| g * yv).sum();
            let or = &mut ga[r * d..(r + 1) * d];
            for i in 0..d {
                or[i] = (gr[i] - dot * yr[i]) / norm;
            }
        }
        self.accumulate(a, &ga);
    }

    /// Mean softmax cross-entropy of row logits against integer class targets.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: TensorId,
        targets: &[usize],
    ) -> Result<TensorId, TensorError> {
        let dims = self.dims(logits).to_vec();
        if dims.len() != 2 || dims[0] != targets.len() {
            return Err(TensorError::Shape {
                op: "softmax_cross_entropy",
                detail: format!("logits {dims:?} vs {} targets", targets.len()),
            });
        }
        let (n, k) = (dims[0], dims[1]);
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(TensorError::Config {
                op: "softmax_cross_entropy",
                detail: format!("target class {bad} out of range 0..{k}"),
            });
        }
        let xv = self.data(logits);
        let mut total = 0.0f32;
        for r in 0..n {
            let row = &xv[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let lse = row.iter().map(|v| (v - max).exp()).sum::<f32>().ln() + max;
            total += lse - row[targets[r]];
        }
        let rg = self.requires(logits);
        Ok(self.push(
            Vec::new(),
            vec![total / n as f32],
            rg,
            Op::SoftmaxCrossEntropy { logits, targets: targets.to_vec() },
        ))
    }

    pub(super) fn softmax_cross_entropy_backward(
        &mut self,
        logits: TensorId,
        targets: &[usize],
        gout: f32,
    ) {
        let dims = self.dims(logits).to_vec();
        let (n, k) = (dims[0], dims[1]);
        let xv = self.data(logits).to_vec();
        let mut ga = vec![0.0f32; xv.len()];
        for r in 0..n {
            let row = &xv[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let mut z = 0.0f32;
            for v in row {
                z += (v - max).exp();
            }
            let gr = &mut ga[r * k..(r + 1) * k];
            for i in 0..k {
                let p = (row[i] - max).exp() / z;
                let indicator = if i == targets[r] { 1.0 } else { 0.0 };
                gr[i] = gout * (p - indicator) / n as f32;
            }
        }
        self.accumulate(logits, &ga);
    }
}
