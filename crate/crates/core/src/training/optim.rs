use crate::numcore::ParamStore;

/// Adam with bias correction; moments are kept per parameter in store order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.ids().map(|id| vec![0.0; store.grad(id).len()]).collect();
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    /// One update from the gradients currently held in `store`.
    pub fn update(&mut self, store: &mut ParamStore, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for id in store.ids().collect::<Vec<_>>() {
            let g = store.grad(id).to_vec();
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.value_mut(id);
            for i in 0..g.len() {
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g[i];
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Scale gradients down so their global norm is at most `max_norm`. Returns the pre-clip norm.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = store.grad_norm();
    if max_norm > 0.0 && norm > max_norm {
        store.scale_grads(max_norm / norm);
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Tensor;

    #[test]
    fn first_step_moves_by_lr_in_gradient_sign() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row(vec![1.0, -2.0, 0.5])).unwrap();
        store.accumulate(id, &[3.0, -0.1, 0.0]);
        let mut adam = Adam::new(&store, 0.9, 0.999, 1e-8);
        adam.update(&mut store, 0.01);
        let p = store.get(id).data();
        assert!((p[0] - 0.99).abs() < 1e-8);
        assert!((p[1] + 1.99).abs() < 1e-6);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn zero_lr_leaves_parameters_untouched() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::row(vec![1.0, 2.0])).unwrap();
        store.accumulate(id, &[1.0, 1.0]);
        let mut adam = Adam::new(&store, 0.9, 0.999, 1e-8);
        adam.update(&mut store, 0.0);
        assert_eq!(store.get(id).data(), &[1.0, 2.0]);
    }

    #[test]
    fn minimises_a_quadratic() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(4.0)).unwrap();
        let mut adam = Adam::new(&store, 0.9, 0.999, 1e-8);
        for _ in 0..2000 {
            store.zero_grad();
            let x = store.get(id).item();
            store.accumulate(id, &[2.0 * (x - 1.0)]);
            adam.update(&mut store, 0.05);
        }
        assert!((store.get(id).item() - 1.0).abs() < 1e-3);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let mut store = ParamStore::new();
        let a = store.add("a", Tensor::row(vec![0.0, 0.0])).unwrap();
        store.accumulate(a, &[3.0, 4.0]);
        assert_eq!(clip_grad_norm(&mut store, 1.0), 5.0);
        assert!((store.grad_norm() - 1.0).abs() < 1e-12);
        assert!((store.grad(a)[0] - 0.6).abs() < 1e-12);
    }
}
