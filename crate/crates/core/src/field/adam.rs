use super::{FieldParams, Real};
use crate::error::{Error, Result};

/// Bias-corrected adaptive-moment optimizer state.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T: Real> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<T>,
    v: Vec<T>,
}

impl<T: Real> AdamState<T> {
    pub fn new(len: usize) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.99,
            eps: 1e-10,
            step: 0,
            m: vec![T::zero(); len],
            v: vec![T::zero(); len],
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// Applies one update. A gradient containing NaN or ±inf is rejected
    /// before anything is modified.
    pub fn step(&mut self, params: &mut FieldParams<T>, grad: &[T], lr: f64) -> Result<()> {
        if grad.len() != params.len() || grad.len() != self.m.len() {
            return Err(Error::DimensionMismatch(format!(
                "gradient of {} entries for {} parameters and {} moments",
                grad.len(),
                params.len(),
                self.m.len()
            )));
        }
        if let Some(index) = grad.iter().position(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient { index });
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let (one_b1, one_b2) = (T::of(1.0 - self.beta1), T::of(1.0 - self.beta2));
        let step_size = T::of(lr / bc1);
        let inv_bc2 = T::of(1.0 / bc2);
        let eps = T::of(self.eps);
        let values = params.values_mut();
        for (((p, &g), m), v) in values
            .iter_mut()
            .zip(grad)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            *m = b1 * *m + one_b1 * g;
            *v = b2 * *v + one_b2 * g * g;
            *p -= step_size * *m / ((*v * inv_bc2).sqrt() + eps);
        }
        Ok(())
    }
}

/// Multi-step learning-rate decay.
#[derive(Debug, Clone, PartialEq)]
pub struct LrSchedule {
    pub base: f64,
    pub milestones: Vec<u64>,
    pub factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        Self {
            base: 0.01,
            milestones: vec![20_000, 30_000],
            factor: 1.0 / 3.0,
        }
    }
}

impl LrSchedule {
    pub fn at(&self, iteration: u64) -> f64 {
        lr_at(self.base, iteration, &self.milestones, self.factor)
    }
}

/// `base · factor^k` where `k` counts milestones `<= iteration`.
pub fn lr_at(base: f64, iteration: u64, milestones: &[u64], factor: f64) -> f64 {
    let passed = milestones.iter().filter(|&&m| iteration >= m).count();
    base * factor.powi(passed as i32)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{EncodingConfig, FieldLayout};
    use approx::assert_relative_eq;

    fn tiny() -> FieldParams<f64> {
        let enc = EncodingConfig {
            levels: 1,
            base_resolution: 2,
            growth: 2.0,
            features_per_level: 1,
        };
        FieldParams::init(FieldLayout::new(enc, 1, 1).unwrap(), 0)
    }

    #[test]
    fn first_step_moves_by_learning_rate() {
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps)
        let mut p = tiny();
        let before = p.values().to_vec();
        let mut adam = AdamState::new(p.len());
        let mut g = vec![0.0; p.len()];
        g[0] = 1.0;
        adam.step(&mut p, &g, 0.01).unwrap();
        assert_relative_eq!(p.values()[0] - before[0], -0.01, epsilon = 1e-10);
        assert_eq!(&p.values()[1..], &before[1..]);
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let mut p = tiny();
        let before = p.values().to_vec();
        let mut adam = AdamState::new(p.len());
        let zeros = vec![0.0; p.len()];
        adam.step(&mut p, &zeros, 0.01).unwrap();
        assert_eq!(p.values(), &before[..]);
    }

    #[test]
    fn nan_gradient_leaves_everything_untouched() {
        let mut p = tiny();
        let before = p.clone();
        let mut adam = AdamState::new(p.len());
        let mut g = vec![1.0; p.len()];
        g[3] = f64::NAN;
        let snapshot = adam.clone();
        assert!(matches!(
            adam.step(&mut p, &g, 0.01),
            Err(Error::NonFiniteGradient { index: 3 })
        ));
        assert_eq!(adam, snapshot);
        assert_eq!(p, before);
        assert_eq!(p.stamp(), before.stamp());
    }

    #[test]
    fn schedule_milestones() {
        let s = LrSchedule::default();
        assert_eq!(s.at(0), 0.01);
        assert_eq!(s.at(19_999), 0.01);
        assert_relative_eq!(s.at(20_000), 0.01 / 3.0, epsilon = 1e-15);
        assert_relative_eq!(s.at(30_001), 0.01 / 9.0, epsilon = 1e-15);
    }
}
