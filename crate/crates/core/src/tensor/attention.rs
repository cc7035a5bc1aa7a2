//! Multi-head scaled dot-product self-attention, built from recorded
//! primitives so gradients flow through the existing backward rules.

use super::{Graph, TensorError, TensorId};

impl Graph {
    /// Self-attention over `x` [N, T, D] with projection weights
    /// `wq`/`wk`/`wv`/`wo`, each [D, D]. `D` must be divisible by `heads`.
    pub fn multihead_attention(
        &mut self,
        x: TensorId,
        wq: TensorId,
        wk: TensorId,
        wv: TensorId,
        wo: TensorId,
        heads: usize,
    ) -> Result<TensorId, TensorError> {
        let dims = self.dims(x).to_vec();
        if dims.len() != 3 {
            return Err(TensorError::Shape {
                op: "multihead_attention",
                detail: format!("expected [N, T, D], got {dims:?}"),
            });
        }
        let (n, t, d) = (dims[0], dims[1], dims[2]);
        for (name, w) in [("wq", wq), ("wk", wk), ("wv", wv), ("wo", wo)] {
            if self.dims(w) != [d, d] {
                return Err(TensorError::Shape {
                    op: "multihead_attention",
                    detail: format!("{name} dims {:?}, expected [{d}, {d}]", self.dims(w)),
                });
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(TensorError::Config {
                op: "multihead_attention",
                detail: format!("model dim {d} not divisible by heads {heads}"),
            });
        }
        let dh = d / heads;

        let flat = self.reshape(x, &[n * t, d])?;
        let q = self.project_heads(flat, wq, n, t, heads, dh)?;
        let k = self.project_heads(flat, wk, n, t, heads, dh)?;
        let v = self.project_heads(flat, wv, n, t, heads, dh)?;

        let kt = self.permute(k, &[0, 2, 1])?; // [N*H, dh, T]
        let scores = self.matmul_batched(q, kt)?; // [N*H, T, T]
        let scaled = self.scale(scores, 1.0 / (dh as f32).sqrt());
        let att = self.softmax(scaled)?;
        let ctx = self.matmul_batched(att, v)?; // [N*H, T, dh]

        // [N*H, T, dh] -> [N, T, D]
        let split = self.reshape(ctx, &[n, heads, t, dh])?;
        let merged = self.permute(split, &[0, 2, 1, 3])?; // [N, T, H, dh]
        let tokens = self.reshape(merged, &[n * t, d])?;
        let out = self.linear(tokens, wo, None)?;
        self.reshape(out, &[n, t, d])
    }

    /// x_flat [N*T, D] -> w-projected head layout [N*heads, T, dh].
    fn project_heads(
        &mut self,
        x_flat: TensorId,
        w: TensorId,
        n: usize,
        t: usize,
        heads: usize,
        dh: usize,
    ) -> Result<TensorId, TensorError> {
        let p = self.linear(x_flat, w, None)?; // [N*T, D]
        let split = self.reshape(p, &[n, t, heads, dh])?;
        let swapped = self.permute(split, &[0, 2, 1, 3])?; // [N, H, T, dh]
        self.reshape(swapped, &[n * heads, t, dh])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, dims: &[usize]) -> Tensor {
        let n: usize = dims.iter().product();
        let data: Vec<f32> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(dims.to_vec(), data).unwrap()
    }

    #[test]
    fn single_token_reduces_to_value_path() {
        // With T = 1 the softmax over one key is exactly 1, so
        // out = x . Wv . Wo regardless of Wq and Wk.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let d = 6;
        let mut g = Graph::new();
        let x = g.leaf(random_tensor(&mut rng, &[2, 1, d]));
        let wq = g.leaf(random_tensor(&mut rng, &[d, d]));
        let wk = g.leaf(random_tensor(&mut rng, &[d, d]));
        let wv = g.leaf(random_tensor(&mut rng, &[d, d]));
        let wo = g.leaf(random_tensor(&mut rng, &[d, d]));
        let out = g.multihead_attention(x, wq, wk, wv, wo, 2).unwrap();

        let flat = g.reshape(x, &[2, d]).unwrap();
        let pv = g.linear(flat, wv, None).unwrap();
        let expected = g.linear(pv, wo, None).unwrap();
        for (a, b) in g.data(out).iter().zip(g.data(expected)) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_query_key_gives_uniform_attention() {
        // Wq = Wk = 0 makes every logit 0, so each output token is the mean
        // of the value-projected tokens.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let (t, d) = (3, 4);
        let mut g = Graph::new();
        let x = g.leaf(random_tensor(&mut rng, &[1, t, d]));
        let zeros = g.leaf(Tensor::zeros(&[d, d]));
        let wv = g.leaf(random_tensor(&mut rng, &[d, d]));
        let wo = g.leaf(random_tensor(&mut rng, &[d, d]));
        let out = g.multihead_attention(x, zeros, zeros, wv, wo, 2).unwrap();

        let flat = g.reshape(x, &[t, d]).unwrap();
        let pv = g.linear(flat, wv, None).unwrap();
        let mean_v: Vec<f32> = (0..d)
            .map(|j| (0..t).map(|i| g.data(pv)[i * d + j]).sum::<f32>() / t as f32)
            .collect();
        let mv = g.leaf(Tensor::new(vec![1, d], mean_v).unwrap());
        let expected = g.linear(mv, wo, None).unwrap();
        for token in 0..t {
            for j in 0..d {
                let a = g.data(out)[token * d + j];
                let b = g.data(expected)[j];
                assert!((a - b).abs() < 1e-5, "token {token}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn rejects_indivisible_heads() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 2, 6]));
        let w = g.leaf(Tensor::zeros(&[6, 6]));
        assert!(matches!(
            g.multihead_attention(x, w, w, w, w, 4),
            Err(TensorError::Config { .. })
        ));
    }
}
