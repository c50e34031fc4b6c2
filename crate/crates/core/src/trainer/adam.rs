//! Adam optimizer over the backbone's canonical parameter ordering, with
//! optional global-norm gradient clipping.

use crate::backbone::BackboneModel;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64, beta1: f64, beta2: f64, model: &BackboneModel) -> Self {
        let m = model.collect_params().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = model.collect_params().iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Self { lr, beta1, beta2, eps: 1e-8, t: 0, m, v }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }

    /// Restore moment buffers (checkpoint load).
    pub fn restore(&mut self, t: u64, m: Vec<Vec<f64>>, v: Vec<Vec<f64>>) {
        assert_eq!(m.len(), self.m.len());
        assert_eq!(v.len(), self.v.len());
        self.t = t;
        self.m = m;
        self.v = v;
    }

    pub fn moments(&self) -> (&[Vec<f64>], &[Vec<f64>]) {
        (&self.m, &self.v)
    }

    /// One update: `m,v` moment tracking with bias correction.
    pub fn step(&mut self, model: &mut BackboneModel, grads: &BackboneModel) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let gs: Vec<&[f64]> = grads.collect_params().into_iter().map(|(_, t)| t.data.as_slice()).collect();
        let (lr, b1, b2, eps) = (self.lr, self.beta1, self.beta2, self.eps);
        let (m, v) = (&mut self.m, &mut self.v);
        model.visit_params_mut(|i, tensor| {
            let (mi, vi, gi) = (&mut m[i], &mut v[i], gs[i]);
            for j in 0..tensor.data.len() {
                let g = gi[j];
                mi[j] = b1 * mi[j] + (1.0 - b1) * g;
                vi[j] = b2 * vi[j] + (1.0 - b2) * g * g;
                let m_hat = mi[j] / bc1;
                let v_hat = vi[j] / bc2;
                tensor.data[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        });
    }
}

/// Scale gradients so their global l2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut BackboneModel, max_norm: f64) -> f64 {
    let mut sq = 0.0;
    for (_, t) in grads.collect_params() {
        sq += t.data.iter().map(|g| g * g).sum::<f64>();
    }
    let norm = sq.sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let scale = max_norm / norm;
        grads.visit_params_mut(|_, t| {
            for g in t.data.iter_mut() {
                *g *= scale;
            }
        });
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ModelConfig;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            channels: 1,
            n_pab: 0,
            concat_blocks: vec![],
            time_embed_dim: 1,
            time_mlp_layers: 1,
            ..ModelConfig::default()
        }
    }

    #[test]
    fn single_step_matches_hand_computation() {
        // Two-parameter toy: start at p = [0.5, -0.25], gradient [0.1, -0.2],
        // lr = 0.01, betas (0.9, 0.999). After one step:
        //   m = 0.1 g, v = 0.001 g^2, m_hat = g, v_hat = g^2,
        //   p' = p - lr * g / (|g| + 1e-8).
        let cfg = tiny_config();
        let mut model = BackboneModel::zeros(&cfg);
        let mut grads = BackboneModel::zeros(&cfg);
        // Use the first two weights of the input conv as the toy parameters.
        model.input_conv.w.data[0] = 0.5;
        model.input_conv.w.data[1] = -0.25;
        grads.input_conv.w.data[0] = 0.1;
        grads.input_conv.w.data[1] = -0.2;

        let mut adam = Adam::new(0.01, 0.9, 0.999, &model);
        adam.step(&mut model, &grads);

        let expect = |p: f64, g: f64| p - 0.01 * g / (g.abs() + 1e-8);
        assert!((model.input_conv.w.data[0] - expect(0.5, 0.1)).abs() < 1e-10);
        assert!((model.input_conv.w.data[1] - expect(-0.25, -0.2)).abs() < 1e-10);

        // Second step with the same gradient: m = 0.19 g / bias corrections.
        adam.step(&mut model, &grads);
        let expect2 = |p1: f64, g: f64| {
            let m = 0.9 * 0.1 * g + 0.1 * g;
            let v = 0.999 * 0.001 * g * g + 0.001 * g * g;
            let m_hat = m / (1.0 - 0.9f64.powi(2));
            let v_hat = v / (1.0 - 0.999f64.powi(2));
            p1 - 0.01 * m_hat / (v_hat.sqrt() + 1e-8)
        };
        assert!((model.input_conv.w.data[0] - expect2(expect(0.5, 0.1), 0.1)).abs() < 1e-10);
    }

    #[test]
    fn clip_rescales_large_gradients() {
        let cfg = tiny_config();
        let mut grads = BackboneModel::zeros(&cfg);
        grads.input_conv.w.data[0] = 3.0;
        grads.input_conv.w.data[1] = 4.0;
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-12);
        let new_sq: f64 = grads
            .collect_params()
            .iter()
            .flat_map(|(_, t)| t.data.iter())
            .map(|g| g * g)
            .sum();
        assert!((new_sq.sqrt() - 1.0).abs() < 1e-12);

        // Below the threshold nothing changes.
        let mut small = BackboneModel::zeros(&cfg);
        small.input_conv.w.data[0] = 0.3;
        let before = small.input_conv.w.data[0];
        clip_global_norm(&mut small, 1.0);
        assert_eq!(small.input_conv.w.data[0], before);
    }
}
