//! Reductions to scalars.

use super::{Graph, Op, TensorId};

impl Graph {
    /// Sum of all elements; result is a scalar node.
    pub fn sum_all(&mut self, a: TensorId) -> TensorId {
        let s: f32 = self.data(a).iter().sum();
        let rg = self.requires(a);
        self.push(Vec::new(), vec![s], rg, Op::SumAll { a })
    }

    /// Arithmetic mean of all elements; result is a scalar node.
    pub fn mean_all(&mut self, a: TensorId) -> TensorId {
        let n = self.data(a).len();
        let s: f32 = self.data(a).iter().sum();
        let rg = self.requires(a);
        self.push(Vec::new(), vec![s / n as f32], rg, Op::MeanAll { a })
    }
}
