//! Adaptive-moment optimizer with decoupled weight decay, plus global-norm
//! gradient clipping. Updates compute in f64 and store back to the f32
//! master copies, so replicas applying the same averaged gradients stay
//! bit-identical.

use dinomx_core::tensor::Tensor;
use dinomx_core::vit::ParameterSet;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, Default)]
pub struct AdamW {
    pub m: ParameterSet,
    pub v: ParameterSet,
    pub step_count: usize,
}

/// Decoupled decay applies to genuinely matrix-shaped tensors only; biases,
/// tokens, norm scales, and gain vectors are exempt.
pub fn decays(name: &str, t: &Tensor) -> bool {
    let _ = name;
    t.shape().len() >= 2 && t.shape().iter().all(|&d| d > 1)
}

impl AdamW {
    pub fn new() -> Self {
        Self::default()
    }

    /// One update over every gradient entry. Tensors without a gradient are
    /// untouched; moments materialize lazily.
    pub fn step(
        &mut self,
        params: &mut ParameterSet,
        grads: &ParameterSet,
        lr: f64,
        weight_decay: f64,
    ) {
        self.step_count += 1;
        let bc1 = 1.0 - BETA1.powi(self.step_count as i32);
        let bc2 = 1.0 - BETA2.powi(self.step_count as i32);
        for (name, g) in grads {
            let p = params
                .get_mut(name)
                .unwrap_or_else(|| panic!("gradient for unknown parameter {name}"));
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Tensor::zeros(g.shape().to_vec()));
            let wd = if decays(name, p) { weight_decay } else { 0.0 };
            let pd = p.data_mut();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..g.numel() {
                let gi = g.data()[i] as f64;
                let mi = BETA1 * md[i] as f64 + (1.0 - BETA1) * gi;
                let vi = BETA2 * vd[i] as f64 + (1.0 - BETA2) * gi * gi;
                md[i] = mi as f32;
                vd[i] = vi as f32;
                let mhat = md[i] as f64 / bc1;
                let vhat = vd[i] as f64 / bc2;
                let mut x = pd[i] as f64;
                x -= lr * wd * x;
                x -= lr * mhat / (vhat.sqrt() + EPS);
                pd[i] = x as f32;
            }
        }
    }
}

/// Global L2 norm across all gradient tensors.
pub fn global_grad_norm(grads: &ParameterSet) -> f64 {
    grads
        .values()
        .flat_map(|t| t.data())
        .map(|&v| v as f64 * v as f64)
        .sum::<f64>()
        .sqrt()
}

/// Scales gradients in place so the global norm is at most `max_norm`.
pub fn clip_global_norm(grads: &mut ParameterSet, max_norm: f64) -> f64 {
    let norm = global_grad_norm(grads);
    if norm > max_norm && norm > 0.0 {
        let scale = max_norm / norm;
        for t in grads.values_mut() {
            for v in t.data_mut() {
                *v = (*v as f64 * scale) as f32;
            }
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(v: Vec<f32>) -> Tensor {
        Tensor::new(vec![v.len()], v).unwrap()
    }

    #[test]
    fn first_step_moves_against_gradient_sign() {
        let mut params = ParameterSet::new();
        params.insert("w".into(), tensor(vec![1.0, -1.0]));
        let mut grads = ParameterSet::new();
        grads.insert("w".into(), tensor(vec![0.5, -0.25]));
        let mut opt = AdamW::new();
        opt.step(&mut params, &grads, 0.1, 0.0);
        let w = params["w"].data();
        // bias-corrected first step is approximately -lr * sign(g)
        assert!(w[0] < 1.0 && (w[0] - 0.9).abs() < 1e-3);
        assert!(w[1] > -1.0 && (w[1] + 0.9).abs() < 1e-3);
    }

    #[test]
    fn decay_exempts_vectors() {
        let bias = Tensor::zeros(vec![8]);
        assert!(!decays("b", &bias));
        let gain = Tensor::zeros(vec![16, 1]);
        assert!(!decays("g", &gain));
        let w = Tensor::zeros(vec![4, 4]);
        assert!(decays("w", &w));
    }

    #[test]
    fn weight_decay_shrinks_matrices_without_gradient_signal() {
        let mut params = ParameterSet::new();
        params.insert("w".into(), Tensor::filled(vec![2, 2], 2.0).unwrap());
        let mut grads = ParameterSet::new();
        grads.insert("w".into(), Tensor::zeros(vec![2, 2]));
        let mut opt = AdamW::new();
        opt.step(&mut params, &grads, 0.1, 0.5);
        for &v in params["w"].data() {
            assert!((v - 2.0 * (1.0 - 0.1 * 0.5)).abs() < 1e-6);
        }
    }

    #[test]
    fn untracked_params_are_untouched() {
        let mut params = ParameterSet::new();
        params.insert("w".into(), tensor(vec![1.0]));
        params.insert("frozen".into(), tensor(vec![5.0]));
        let mut grads = ParameterSet::new();
        grads.insert("w".into(), tensor(vec![1.0]));
        let mut opt = AdamW::new();
        opt.step(&mut params, &grads, 0.1, 0.0);
        assert_eq!(params["frozen"].data(), &[5.0]);
        assert!(!opt.m.contains_key("frozen"));
    }

    #[test]
    fn clipping_caps_the_global_norm() {
        let mut grads = ParameterSet::new();
        grads.insert("a".into(), tensor(vec![3.0, 4.0])); // norm 5
        let norm = clip_global_norm(&mut grads, 1.0);
        assert!((norm - 5.0).abs() < 1e-6);
        let clipped = global_grad_norm(&grads);
        assert!((clipped - 1.0).abs() < 1e-6);

        let mut small = ParameterSet::new();
        small.insert("a".into(), tensor(vec![0.1, 0.1]));
        let before = small["a"].data().to_vec();
        clip_global_norm(&mut small, 3.0);
        assert_eq!(small["a"].data(), &before[..]);
    }
}
