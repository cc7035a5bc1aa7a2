//! Training objectives: cosine contrastive alignment, self-distillation
//! against a frozen teacher, and their lambda-weighted combination.

use crate::tensor::{Graph, TensorError, TensorId};

/// Loss hyperparameters; both live in [0, 1].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub margin: f32,
    pub lambda: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig { margin: 0.0, lambda: 0.75 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), TensorError> {
        if !(0.0..=1.0).contains(&self.margin) || !self.margin.is_finite() {
            return Err(TensorError::Config {
                op: "loss_config",
                detail: format!("margin must be in [0, 1], got {}", self.margin),
            });
        }
        validate_lambda(self.lambda)
    }
}

pub fn validate_lambda(lambda: f32) -> Result<(), TensorError> {
    if !(0.0..=1.0).contains(&lambda) || !lambda.is_finite() {
        return Err(TensorError::Config {
            op: "total_loss",
            detail: format!("lambda must be in [0, 1], got {lambda}"),
        });
    }
    Ok(())
}

/// Single-pair contrastive loss on embeddings `e_s`, `e_t` of shape [D]:
/// genuine pairs (y = 1) pay `1 - cos`, impostor pairs pay the hinge
/// `max(0, cos - margin)`.
pub fn contrastive_loss(
    g: &mut Graph,
    e_s: TensorId,
    e_t: TensorId,
    genuine: bool,
    margin: f32,
) -> Result<TensorId, TensorError> {
    let cos = g.cosine_similarity(e_s, e_t)?;
    if genuine {
        let neg = g.neg(cos);
        Ok(g.add_scalar(neg, 1.0))
    } else {
        let shifted = g.add_scalar(cos, -margin);
        Ok(g.relu(shifted))
    }
}

/// Batched contrastive loss over row-aligned embeddings [N, D] with labels
/// `y[i]` in {0, 1}; returns the mean over samples.
pub fn contrastive_loss_batch(
    g: &mut Graph,
    e_s: TensorId,
    e_t: TensorId,
    labels: &[f32],
    margin: f32,
) -> Result<TensorId, TensorError> {
    let n = g.dims(e_s).first().copied().unwrap_or(0);
    if labels.len() != n {
        return Err(TensorError::Shape {
            op: "contrastive_loss",
            detail: format!("{} labels for {} embedding rows", labels.len(), n),
        });
    }
    if let Some(bad) = labels.iter().find(|v| **v != 0.0 && **v != 1.0) {
        return Err(TensorError::Config {
            op: "contrastive_loss",
            detail: format!("labels must be 0 or 1, got {bad}"),
        });
    }
    let cos = g.cosine_rowwise(e_s, e_t)?; // [N]
    let y = g.constant(crate::tensor::Tensor::new(vec![n], labels.to_vec()).unwrap());
    let one_minus_y = {
        let neg = g.neg(y);
        g.add_scalar(neg, 1.0)
    };
    // y * (1 - cos)
    let neg_cos = g.neg(cos);
    let one_minus_cos = g.add_scalar(neg_cos, 1.0);
    let pos_term = g.mul(y, one_minus_cos)?;
    // (1 - y) * max(0, cos - margin)
    let shifted = g.add_scalar(cos, -margin);
    let hinge = g.relu(shifted);
    let neg_term = g.mul(one_minus_y, hinge)?;
    let per_sample = g.add(pos_term, neg_term)?;
    Ok(g.mean_all(per_sample))
}

/// Self-distillation: `1 - cos(e_teacher, e_student)` per pair. The teacher
/// embedding must enter the graph without gradient so the penalty only
/// shapes the student.
pub fn self_distillation_loss(
    g: &mut Graph,
    e_teacher: TensorId,
    e_student: TensorId,
) -> Result<TensorId, TensorError> {
    let cos = g.cosine_similarity(e_teacher, e_student)?;
    let neg = g.neg(cos);
    Ok(g.add_scalar(neg, 1.0))
}

/// Batched self-distillation over [N, D] teacher/student embeddings; mean
/// over samples.
pub fn self_distillation_loss_batch(
    g: &mut Graph,
    e_teacher: TensorId,
    e_student: TensorId,
) -> Result<TensorId, TensorError> {
    let cos = g.cosine_rowwise(e_teacher, e_student)?;
    let neg = g.neg(cos);
    let per_sample = g.add_scalar(neg, 1.0);
    Ok(g.mean_all(per_sample))
}

/// Weighted combination `(1 - lambda) * l_contrastive + lambda * l_distill`.
pub fn total_loss(
    g: &mut Graph,
    l_contrastive: TensorId,
    l_distill: TensorId,
    lambda: f32,
) -> Result<TensorId, TensorError> {
    validate_lambda(lambda)?;
    let a = g.scale(l_contrastive, 1.0 - lambda);
    let b = g.scale(l_distill, lambda);
    g.add(a, b)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Graph, Tensor};

    fn vec_leaf(g: &mut Graph, v: Vec<f32>) -> TensorId {
        let n = v.len();
        g.leaf(Tensor::new(vec![n], v).unwrap())
    }

    #[test]
    fn genuine_identical_embeddings_cost_nothing() {
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, vec![1.0, 2.0, 3.0]);
        let b = vec_leaf(&mut g, vec![1.0, 2.0, 3.0]);
        let l = contrastive_loss(&mut g, a, b, true, 0.0).unwrap();
        assert!(g.data(l)[0].abs() < 1e-6);
    }

    #[test]
    fn impostor_orthogonal_embeddings_sit_on_the_hinge() {
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, vec![1.0, 0.0]);
        let b = vec_leaf(&mut g, vec![0.0, 1.0]);
        let l = contrastive_loss(&mut g, a, b, false, 0.0).unwrap();
        assert_eq!(g.data(l)[0], 0.0);
    }

    #[test]
    fn impostor_worked_example_with_margin() {
        // cos([1,2],[2,1]) = 0.8; max(0, 0.8 - 0.25) = 0.55
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, vec![1.0, 2.0]);
        let b = vec_leaf(&mut g, vec![2.0, 1.0]);
        let l = contrastive_loss(&mut g, a, b, false, 0.25).unwrap();
        assert!((g.data(l)[0] - 0.55).abs() < 1e-6);
    }

    #[test]
    fn distillation_identity_and_opposite() {
        let mut g = Graph::new();
        let t = vec_leaf(&mut g, vec![0.5, -1.5, 2.0]);
        let s_same = vec_leaf(&mut g, vec![0.5, -1.5, 2.0]);
        let s_opp = vec_leaf(&mut g, vec![-0.5, 1.5, -2.0]);
        let l0 = self_distillation_loss(&mut g, t, s_same).unwrap();
        let l2 = self_distillation_loss(&mut g, t, s_opp).unwrap();
        assert!(g.data(l0)[0].abs() < 1e-6);
        assert!((g.data(l2)[0] - 2.0).abs() < 1e-6);
    }

    #[test]
    fn distillation_worked_example() {
        // 1 - cos([1,0],[1,1]) = 1 - 1/sqrt(2)
        let mut g = Graph::new();
        let t = vec_leaf(&mut g, vec![1.0, 0.0]);
        let s = vec_leaf(&mut g, vec![1.0, 1.0]);
        let l = self_distillation_loss(&mut g, t, s).unwrap();
        let expected = 1.0 - 1.0 / (2.0f32).sqrt();
        assert!((g.data(l)[0] - expected).abs() < 1e-6);
    }

    #[test]
    fn total_loss_endpoints_and_midpoint() {
        let mut g = Graph::new();
        let lc = g.leaf(Tensor::scalar(0.4));
        let ls = g.leaf(Tensor::scalar(0.2));
        let at0 = total_loss(&mut g, lc, ls, 0.0).unwrap();
        let at1 = total_loss(&mut g, lc, ls, 1.0).unwrap();
        let mid = total_loss(&mut g, lc, ls, 0.75).unwrap();
        assert_eq!(g.data(at0)[0], 0.4);
        assert_eq!(g.data(at1)[0], 0.2);
        assert!((g.data(mid)[0] - 0.25).abs() < 1e-6);
    }

    #[test]
    fn lambda_out_of_range_is_rejected() {
        let mut g = Graph::new();
        let lc = g.leaf(Tensor::scalar(0.4));
        let ls = g.leaf(Tensor::scalar(0.2));
        assert!(matches!(
            total_loss(&mut g, lc, ls, 1.5),
            Err(TensorError::Config { .. })
        ));
        assert!(matches!(
            total_loss(&mut g, lc, ls, -0.1),
            Err(TensorError::Config { .. })
        ));
    }

    #[test]
    fn zero_norm_embedding_aborts() {
        let mut g = Graph::new();
        let a = vec_leaf(&mut g, vec![0.0, 0.0]);
        let b = vec_leaf(&mut g, vec![1.0, 1.0]);
        assert!(matches!(
            contrastive_loss(&mut g, a, b, true, 0.0),
            Err(TensorError::Degenerate { .. })
        ));
    }

    #[test]
    fn contrastive_is_scale_invariant() {
        for alpha in [0.1f32, 1.0, 10.0] {
            for beta in [0.1f32, 1.0, 10.0] {
                let mut g = Graph::new();
                let a = vec_leaf(&mut g, vec![0.3, -0.7, 1.1]);
                let b = vec_leaf(&mut g, vec![-0.2, 0.9, 0.4]);
                let sa = g.scale(a, alpha);
                let sb = g.scale(b, beta);
                let base = contrastive_loss(&mut g, a, b, false, 0.1).unwrap();
                let scaled = contrastive_loss(&mut g, sa, sb, false, 0.1).unwrap();
                assert!((g.data(base)[0] - g.data(scaled)[0]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn batch_version_averages_samples() {
        let mut g = Graph::new();
        // Row 0 genuine identical (0), row 1 impostor with cos 0.8, margin 0 (0.8).
        let a = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 1.0, 2.0]).unwrap());
        let b = g.leaf(Tensor::new(vec![2, 2], vec![1.0, 2.0, 2.0, 1.0]).unwrap());
        let l = contrastive_loss_batch(&mut g, a, b, &[1.0, 0.0], 0.0).unwrap();
        assert!((g.data(l)[0] - 0.4).abs() < 1e-6);
    }

    #[test]
    fn contrastive_range_bounds_hold() {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let m: f32 = rng.gen_range(0.0..1.0);
            let d = rng.gen_range(2..6);
            let a: Vec<f32> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f32> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            if a.iter().all(|v| *v == 0.0) || b.iter().all(|v| *v == 0.0) {
                continue;
            }
            let mut g = Graph::new();
            let ta = vec_leaf(&mut g, a);
            let tb = vec_leaf(&mut g, b);
            let lp = contrastive_loss(&mut g, ta, tb, true, m).unwrap();
            let ln = contrastive_loss(&mut g, ta, tb, false, m).unwrap();
            let vp = g.data(lp)[0];
            let vn = g.data(ln)[0];
            assert!((-1e-6..=2.0 + 1e-6).contains(&vp), "genuine loss {vp} out of [0,2]");
            assert!(
                (-1e-6..=1.0 - m + 1e-6).contains(&vn),
                "impostor loss {vn} out of [0, 1-m], m={m}"
            );
        }
    }
}
