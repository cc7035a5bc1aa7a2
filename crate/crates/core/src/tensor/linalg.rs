//! Dense linear maps: affine layers and batched matrix products.

use super::{Graph, Op, TensorError, TensorId};

impl Graph {
    /// out[n, j] = sum_i input[n, i] * weight[j, i] + bias[j]
    ///
    /// `input` is [N, D_in], `weight` is [D_out, D_in], `bias` is [D_out].
    pub fn linear(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
    ) -> Result<TensorId, TensorError> {
        let idims = self.dims(input).to_vec();
        let wdims = self.dims(weight).to_vec();
        if idims.len() != 2 || wdims.len() != 2 || idims[1] != wdims[1] {
            return Err(TensorError::Shape {
                op: "linear",
                detail: format!("input {idims:?} incompatible with weight {wdims:?}"),
            });
        }
        let (n, d_in) = (idims[0], idims[1]);
        let d_out = wdims[0];
        if let Some(b) = bias {
            if self.dims(b) != [d_out] {
                return Err(TensorError::Shape {
                    op: "linear",
                    detail: format!("bias dims {:?}, expected [{d_out}]", self.dims(b)),
                });
            }
        }
        let x = self.data(input);
        let w = self.data(weight);
        let mut out = vec![0.0f32; n * d_out];
        for row in 0..n {
            let xr = &x[row * d_in..(row + 1) * d_in];
            let or = &mut out[row * d_out..(row + 1) * d_out];
            for j in 0..d_out {
                let wr = &w[j * d_in..(j + 1) * d_in];
                let mut acc = 0.0f32;
                for i in 0..d_in {
                    acc += xr[i] * wr[i];
                }
                or[j] = acc;
            }
        }
        if let Some(b) = bias {
            let bd = self.data(b);
            for row in 0..n {
                for j in 0..d_out {
                    out[row * d_out + j] += bd[j];
                }
            }
        }
        let rg = self.requires(input)
            || self.requires(weight)
            || bias.map_or(false, |b| self.requires(b));
        Ok(self.push(vec![n, d_out], out, rg, Op::Linear { input, weight, bias }))
    }

    pub(super) fn linear_backward(
        &mut self,
        input: TensorId,
        weight: TensorId,
        bias: Option<TensorId>,
        gout: &[f32],
    ) {
        let idims = self.dims(input);
        let (n, d_in) = (idims[0], idims[1]);
        let d_out = self.dims(weight)[0];
        let x = self.data(input).to_vec();
        let w = self.data(weight).to_vec();

        if self.requires(input) {
            let mut gx = vec![0.0f32; n * d_in];
            for row in 0..n {
                for j in 0..d_out {
                    let g = gout[row * d_out + j];
                    let wr = &w[j * d_in..(j + 1) * d_in];
                    let gr = &mut gx[row * d_in..(row + 1) * d_in];
                    for i in 0..d_in {
                        gr[i] += g * wr[i];
                    }
                }
            }
            self.accumulate(input, &gx);
        }
        if self.requires(weight) {
            let mut gw = vec![0.0f32; d_out * d_in];
            for row in 0..n {
                let xr = &x[row * d_in..(row + 1) * d_in];
                for j in 0..d_out {
                    let g = gout[row * d_out + j];
                    let gr = &mut gw[j * d_in..(j + 1) * d_in];
                    for i in 0..d_in {
                        gr[i] += g * xr[i];
                    }
                }
            }
            self.accumulate(weight, &gw);
        }
        if let Some(b) = bias {
            if self.requires(b) {
                let mut gb = vec![0.0f32; d_out];
                for row in 0..n {
                    for j in 0..d_out {
                        gb[j] += gout[row * d_out + j];
                    }
                }
                self.accumulate(b, &gb);
            }
        }
    }

    /// Batched matrix product: [B, M, K] x [B, K, N] -> [B, M, N].
    pub fn matmul_batched(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        let ad = self.dims(a).to_vec();
        let bd = self.dims(b).to_vec();
        if ad.len() != 3 || bd.len() != 3 || ad[0] != bd[0] || ad[2] != bd[1] {
            return Err(TensorError::Shape {
                op: "matmul_batched",
                detail: format!("lhs {ad:?} incompatible with rhs {bd:?}"),
            });
        }
        let (batch, m, k, n) = (ad[0], ad[1], ad[2], bd[2]);
        let av = self.data(a);
        let bv = self.data(b);
        let mut out = vec![0.0f32; batch * m * n];
        for t in 0..batch {
            let ab = &av[t * m * k..(t + 1) * m * k];
            let bb = &bv[t * k * n..(t + 1) * k * n];
            let ob = &mut out[t * m * n..(t + 1) * m * n];
            for i in 0..m {
                for p in 0..k {
                    let aval = ab[i * k + p];
                    if aval == 0.0 {
                        continue;
                    }
                    let br = &bb[p * n..(p + 1) * n];
                    let or = &mut ob[i * n..(i + 1) * n];
                    for j in 0..n {
                        or[j] += aval * br[j];
                    }
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(vec![batch, m, n], out, rg, Op::MatmulBatched { a, b }))
    }

    pub(super) fn matmul_batched_backward(&mut self, a: TensorId, b: TensorId, gout: &[f32]) {
        let ad = self.dims(a).to_vec();
        let bd = self.dims(b).to_vec();
        let (batch, m, k, n) = (ad[0], ad[1], ad[2], bd[2]);
        let av = self.data(a).to_vec();
        let bv = self.data(b).to_vec();

        if self.requires(a) {
            // ga = gout . b^T
            let mut ga = vec![0.0f32; batch * m * k];
            for t in 0..batch {
                for i in 0..m {
                    for p in 0..k {
                        let mut acc = 0.0f32;
                        for j in 0..n {
                            acc += gout[(t * m + i) * n + j] * bv[(t * k + p) * n + j];
                        }
                        ga[(t * m + i) * k + p] += acc;
                    }
                }
            }
            self.accumulate(a, &ga);
        }
        if self.requires(b) {
            // gb = a^T . gout
            let mut gb = vec![0.0f32; batch * k * n];
            for t in 0..batch {
                for p in 0..k {
                    for i in 0..m {
                        let aval = av[(t * m + i) * k + p];
                        if aval == 0.0 {
                            continue;
                        }
                        for j in 0..n {
                            gb[(t * k + p) * n + j] += aval * gout[(t * m + i) * n + j];
                        }
                    }
                }
            }
            self.accumulate(b, &gb);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn linear_identity_weight_passes_through() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let eye = g.leaf(
            Tensor::new(vec![3, 3], vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
        );
        let zero = g.leaf(Tensor::zeros(&[3]));
        let y = g.linear(x, eye, Some(zero)).unwrap();
        assert_eq!(g.data(y), g.data(x));
    }

    #[test]
    fn linear_worked_example() {
        // [[1,2]] x [[3,4]]^T + [5] = [[16]]
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![1, 2], vec![1., 2.]).unwrap());
        let w = g.leaf(Tensor::new(vec![1, 2], vec![3., 4.]).unwrap());
        let b = g.leaf(Tensor::new(vec![1], vec![5.]).unwrap());
        let y = g.linear(x, w, Some(b)).unwrap();
        assert_eq!(g.data(y), &[16.0][..]);
    }

    #[test]
    fn linear_rejects_dim_mismatch() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[2, 3]));
        let w = g.leaf(Tensor::ones(&[4, 5]));
        assert!(matches!(g.linear(x, w, None), Err(TensorError::Shape { .. })));
    }

    #[test]
    fn matmul_batched_small_case() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::new(vec![1, 2, 2], vec![1., 2., 3., 4.]).unwrap());
        let b = g.leaf(Tensor::new(vec![1, 2, 2], vec![5., 6., 7., 8.]).unwrap());
        let c = g.matmul_batched(a, b).unwrap();
        assert_eq!(g.data(c), &[19., 22., 43., 50.][..]);
    }
}
