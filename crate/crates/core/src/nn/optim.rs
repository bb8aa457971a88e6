//! AdamW with decoupled weight decay.

use super::params::ParamSet;
use super::real::Real;

#[derive(Debug, Clone)]
pub struct AdamW<S: Real> {
    pub lr: S,
    pub beta1: S,
    pub beta2: S,
    pub eps: S,
    pub weight_decay: S,
    step: u64,
    m: Vec<Vec<S>>,
    v: Vec<Vec<S>>,
}

impl<S: Real> AdamW<S> {
    pub fn new(params: &ParamSet<S>, lr: f64, weight_decay: f64) -> Self {
        Self {
            lr: S::from_f64(lr),
            beta1: S::from_f64(0.9),
            beta2: S::from_f64(0.999),
            eps: S::from_f64(1e-8),
            weight_decay: S::from_f64(weight_decay),
            step: 0,
            m: params.iter().map(|(_, p)| vec![S::ZERO; p.len()]).collect(),
            v: params.iter().map(|(_, p)| vec![S::ZERO; p.len()]).collect(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One optimizer step using the gradients currently stored in `params`.
    /// Frozen parameters are skipped entirely; weight decay is applied
    /// directly to the weights, not through the gradient.
    pub fn step(&mut self, params: &mut ParamSet<S>) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = S::ONE - self.beta1.powi(t);
        let bc2 = S::ONE - self.beta2.powi(t);
        for (idx, (_, p)) in params.iter_mut().enumerate() {
            if !p.trainable {
                continue;
            }
            let m = &mut self.m[idx];
            let v = &mut self.v[idx];
            for i in 0..p.values.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (S::ONE - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (S::ONE - self.beta2) * g * g;
                let mhat = m[i] / bc1;
                let vhat = v[i] / bc2;
                let w = p.values[i];
                p.values[i] =
                    w - self.lr * self.weight_decay * w - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

/// Linearly decayed learning rate: `initial · (1 − step/total)`, floored at 0.
pub fn linear_decay(initial: f64, step: u64, total_steps: u64) -> f64 {
    if total_steps == 0 {
        return initial;
    }
    let frac = 1.0 - (step as f64 / total_steps as f64);
    initial * frac.max(0.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::Init;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_param(value: f64, grad: f64, trainable: bool) -> ParamSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut ps = ParamSet::new();
        let id = ps.add("p", 1, 1, Init::Zeros, &mut rng, trainable);
        ps.get_mut(id).values[0] = value;
        ps.get_mut(id).grad[0] = grad;
        ps
    }

    #[test]
    fn first_step_matches_hand_recurrence() {
        // param=1, grad=1, lr=0.1, betas (0.9,0.999), eps 1e-8, wd 0:
        // mhat = vhat = 1, update = 0.1 → 0.9
        let mut ps = one_param(1.0, 1.0, true);
        let mut opt = AdamW::new(&ps, 0.1, 0.0);
        opt.step(&mut ps);
        let got = ps.get(crate::nn::params::ParamId(0)).values[0];
        assert!((got - 0.9).abs() < 1e-6, "got {got}");
    }

    #[test]
    fn zero_grad_leaves_param_unchanged() {
        let mut ps = one_param(1.5, 0.0, true);
        let mut opt = AdamW::new(&ps, 0.1, 0.0);
        opt.step(&mut ps);
        assert_eq!(ps.get(crate::nn::params::ParamId(0)).values[0], 1.5);
    }

    #[test]
    fn frozen_param_unchanged_despite_gradient() {
        let mut ps = one_param(2.0, 1.0, false);
        let mut opt = AdamW::new(&ps, 0.1, 0.0);
        opt.step(&mut ps);
        assert_eq!(ps.get(crate::nn::params::ParamId(0)).values[0], 2.0);
    }

    #[test]
    fn decay_schedule_reaches_zero() {
        assert_eq!(linear_decay(1.0, 0, 10), 1.0);
        assert!((linear_decay(1.0, 5, 10) - 0.5).abs() < 1e-12);
        assert_eq!(linear_decay(1.0, 10, 10), 0.0);
        assert_eq!(linear_decay(1.0, 15, 10), 0.0);
    }
}
