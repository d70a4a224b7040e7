use crate::autodiff::ParamStore;

/// Adaptive-moment optimizer with bias correction.
///
/// Parameters that received no gradient since the last step are left untouched
/// (moments included), so a bank that a batch never reached does not drift.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<u64>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || store.iter().map(|(_, p)| vec![0.0; p.value.len()]).collect::<Vec<_>>();
        Self {
            beta1,
            beta2,
            eps,
            m: zeros(),
            v: zeros(),
            t: vec![0; store.len()],
        }
    }

    /// Applies the accumulated gradients at learning rate `lr`, then clears them.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) {
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id);
            if p.frozen {
                continue;
            }
            let Some(grad) = p.value.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let c1 = 1.0 - self.beta1.powi(t);
            let c2 = 1.0 - self.beta2.powi(t);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, g), m), v) in p.value.data_mut().iter_mut().zip(&grad).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *w -= lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
        store.zero_grads();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{Graph, Tensor};

    #[test]
    fn first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![1.0, -2.0]).unwrap()).unwrap();
        let unused = store.add("u", Tensor::vector(vec![5.0]).unwrap()).unwrap();
        let mut adam = Adam::new(&store, 0.9, 0.998, 1e-8);
        let mut g = Graph::new();
        let w = g.param(&store, id);
        let sq = g.mul(w, w).unwrap();
        let l = g.sum(sq).unwrap();
        g.backward(l).unwrap();
        store.accumulate_grads(&g);
        adam.step(&mut store, 0.01);
        // Bias-corrected first step is lr * sign(grad).
        let w = store.get(id).value.data();
        assert!((w[0] - 0.99).abs() < 1e-9 && (w[1] + 1.99).abs() < 1e-9);
        assert_eq!(store.get(unused).value.data(), &[5.0]);
        assert!(store.get(id).value.grad().is_none());
    }

    #[test]
    fn minimizes_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::vector(vec![3.0]).unwrap()).unwrap();
        let mut adam = Adam::new(&store, 0.9, 0.998, 1e-8);
        for _ in 0..500 {
            let mut g = Graph::new();
            let w = g.param(&store, id);
            let sq = g.mul(w, w).unwrap();
            let l = g.sum(sq).unwrap();
            g.backward(l).unwrap();
            store.accumulate_grads(&g);
            adam.step(&mut store, 0.05);
        }
        assert!(store.get(id).value.data()[0].abs() < 0.05);
    }
}
