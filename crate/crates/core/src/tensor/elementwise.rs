//! Elementwise graph operations.

use super::{Graph, Op, TensorError, TensorId};

/// Tanh-approximation GELU constants: gelu(x) = 0.5 x (1 + tanh(c0 (x + c1 x^3))).
const GELU_C0: f32 = 0.797_884_56; // sqrt(2/pi)
const GELU_C1: f32 = 0.044_715;

impl Graph {
    fn check_same_dims(
        &self,
        op: &'static str,
        a: TensorId,
        b: TensorId,
    ) -> Result<(), TensorError> {
        if self.dims(a) != self.dims(b) {
            return Err(TensorError::Shape {
                op,
                detail: format!("operand dims {:?} vs {:?}", self.dims(a), self.dims(b)),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_dims("add", a, b)?;
        let data: Vec<f32> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(self.dims(a).to_vec(), data, rg, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_dims("sub", a, b)?;
        let data: Vec<f32> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(self.dims(a).to_vec(), data, rg, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId, TensorError> {
        self.check_same_dims("mul", a, b)?;
        let data: Vec<f32> =
            self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(self.dims(a).to_vec(), data, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: TensorId, factor: f32) -> TensorId {
        let data: Vec<f32> = self.data(a).iter().map(|x| x * factor).collect();
        let rg = self.requires(a);
        self.push(self.dims(a).to_vec(), data, rg, Op::Scale { a, factor })
    }

    pub fn add_scalar(&mut self, a: TensorId, offset: f32) -> TensorId {
        let data: Vec<f32> = self.data(a).iter().map(|x| x + offset).collect();
        let rg = self.requires(a);
        self.push(self.dims(a).to_vec(), data, rg, Op::AddScalar { a })
    }

    pub fn neg(&mut self, a: TensorId) -> TensorId {
        self.scale(a, -1.0)
    }

    pub fn relu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f32> = self.data(a).iter().map(|x| x.max(0.0)).collect();
        let rg = self.requires(a);
        self.push(self.dims(a).to_vec(), data, rg, Op::Relu { a })
    }

    pub(super) fn relu_backward(&mut self, a: TensorId, gout: &[f32]) {
        let ga: Vec<f32> = self
            .data(a)
            .iter()
            .zip(gout)
            .map(|(x, g)| if *x > 0.0 { *g } else { 0.0 })
            .collect();
        self.accumulate(a, &ga);
    }

    /// Gaussian error linear unit, tanh approximation (constants above).
    pub fn gelu(&mut self, a: TensorId) -> TensorId {
        let data: Vec<f32> = self.data(a).iter().map(|&x| gelu_scalar(x)).collect();
        let rg = self.requires(a);
        self.push(self.dims(a).to_vec(), data, rg, Op::Gelu { a })
    }

    pub(super) fn gelu_backward(&mut self, a: TensorId, gout: &[f32]) {
        let ga: Vec<f32> = self
            .data(a)
            .iter()
            .zip(gout)
            .map(|(&x, g)| g * gelu_grad_scalar(x))
            .collect();
        self.accumulate(a, &ga);
    }
}

pub(crate) fn gelu_scalar(x: f32) -> f32 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

fn gelu_grad_scalar(x: f32) -> f32 {
    let u = GELU_C0 * (x + GELU_C1 * x * x * x);
    let t = u.tanh();
    let du = GELU_C0 * (1.0 + 3.0 * GELU_C1 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    #[test]
    fn gelu_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(0.0));
        let y = g.gelu(x);
        assert_eq!(g.data(y)[0], 0.0);
    }

    #[test]
    fn gelu_large_input_is_identity() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(10.0));
        let y = g.gelu(x);
        assert!((g.data(y)[0] - 10.0).abs() < 1e-3);
    }

    #[test]
    fn gelu_at_one_matches_high_precision_eval() {
        // f64 evaluation of the same tanh-form expression.
        let c0 = (2.0f64 / std::f64::consts::PI).sqrt();
        let c1 = 0.044715f64;
        let x = 1.0f64;
        let expected = 0.5 * x * (1.0 + (c0 * (x + c1 * x.powi(3))).tanh());
        let mut g = Graph::new();
        let xv = g.leaf(Tensor::scalar(1.0));
        let y = g.gelu(xv);
        assert!((g.data(y)[0] as f64 - expected).abs() < 1e-6);
    }

    #[test]
    fn add_rejects_mismatched_dims() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::ones(&[2, 3]));
        let b = g.leaf(Tensor::ones(&[3, 2]));
        let err = g.add(a, b).unwrap_err();
        match err {
            TensorError::Shape { detail, .. } => {
                assert!(detail.contains("[2, 3]") && detail.contains("[3, 2]"));
            }
            other => panic!("unexpected error {other:?}"),
        }
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(vec![4], vec![-1.0, 0.0, 0.5, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.data(y), &[0.0, 0.0, 0.5, 2.0][..]);
    }
}
