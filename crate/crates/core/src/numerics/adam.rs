use super::{Parameters, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            learning_rate: 5e-4,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Bias-corrected Adam moments laid out in `Parameters::visit` order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<R> {
    pub config: AdamConfig,
    pub step: u64,
    pub first_moment: Vec<Vec<R>>,
    pub second_moment: Vec<Vec<R>>,
}

fn slice_lengths<R: Real, P: Parameters<R> + ?Sized>(params: &P) -> Vec<usize> {
    let mut lens = Vec::new();
    params.visit("", &mut |_, s| lens.push(s.len()));
    lens
}

impl<R: Real> AdamState<R> {
    pub fn new<P: Parameters<R> + ?Sized>(params: &P, config: AdamConfig) -> Self {
        let lens = slice_lengths(params);
        AdamState {
            config,
            step: 0,
            first_moment: lens.iter().map(|n| vec![R::zero(); *n]).collect(),
            second_moment: lens.iter().map(|n| vec![R::zero(); *n]).collect(),
        }
    }

    /// One update with `learning_rate` overriding the configured rate (schedules).
    pub fn step_with_lr<P: Parameters<R> + ?Sized>(
        &mut self,
        params: &mut P,
        grads: &P,
        learning_rate: f64,
    ) -> Result<()> {
        let mut grad_slices: Vec<(String, Vec<R>)> = Vec::new();
        grads.visit("", &mut |name, s| grad_slices.push((name.to_string(), s.to_vec())));
        if grad_slices.len() != self.first_moment.len()
            || grad_slices
                .iter()
                .zip(&self.first_moment)
                .any(|((_, g), m)| g.len() != m.len())
        {
            return Err(Error::Usage("gradient shapes do not match optimizer state".into()));
        }
        if slice_lengths(params) != slice_lengths(grads) {
            return Err(Error::Usage("parameter and gradient shapes disagree".into()));
        }
        for (name, g) in &grad_slices {
            if let Some(i) = g.iter().position(|v| !v.is_finite()) {
                return Err(Error::Training {
                    param: name.trim_start_matches('.').to_string(),
                    message: format!("non-finite gradient at element {i}"),
                });
            }
        }

        self.step += 1;
        let c = self.config;
        let t = self.step as i32;
        let b1 = R::of(c.beta1);
        let b2 = R::of(c.beta2);
        let one = R::one();
        let bias1 = R::of(1.0 - c.beta1.powi(t));
        let bias2 = R::of(1.0 - c.beta2.powi(t));
        let lr = R::of(learning_rate);
        let eps = R::of(c.epsilon);
        let mut idx = 0;
        let (m_all, v_all) = (&mut self.first_moment, &mut self.second_moment);
        params.visit_mut("", &mut |_, p| {
            let g = &grad_slices[idx].1;
            let m = &mut m_all[idx];
            let v = &mut v_all[idx];
            for j in 0..p.len() {
                m[j] = b1 * m[j] + (one - b1) * g[j];
                v[j] = b2 * v[j] + (one - b2) * g[j] * g[j];
                let m_hat = m[j] / bias1;
                let v_hat = v[j] / bias2;
                p[j] -= lr * m_hat / (v_hat.sqrt() + eps);
            }
            idx += 1;
        });
        Ok(())
    }

    pub fn step<P: Parameters<R> + ?Sized>(&mut self, params: &mut P, grads: &P) -> Result<()> {
        let lr = self.config.learning_rate;
        self.step_with_lr(params, grads, lr)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[derive(Debug, Clone, PartialEq)]
    struct Flat(Vec<f64>);

    impl Parameters<f64> for Flat {
        fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &[f64])) {
            f(&format!("{prefix}.w"), &self.0);
        }
        fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
            f(&format!("{prefix}.w"), &mut self.0);
        }
    }

    #[test]
    fn zero_gradient_first_step_leaves_params() {
        let mut p = Flat(vec![1.0, -2.0]);
        let mut adam = AdamState::new(&p, AdamConfig::default());
        adam.step(&mut p, &Flat(vec![0.0, 0.0])).unwrap();
        assert_eq!(p.0, vec![1.0, -2.0]);
    }

    #[test]
    fn constant_gradient_approaches_sign_descent() {
        let mut p = Flat(vec![0.0]);
        let cfg = AdamConfig {
            learning_rate: 1e-3,
            ..AdamConfig::default()
        };
        let mut adam = AdamState::new(&p, cfg);
        let mut last = 0.0;
        for _ in 0..2000 {
            last = p.0[0];
            adam.step(&mut p, &Flat(vec![3.7])).unwrap();
        }
        let delta = last - p.0[0];
        assert!((delta - 1e-3).abs() < 1e-6, "step {delta}");
    }

    #[test]
    fn step_from_known_moments_matches_hand_formula() {
        let mut p = Flat(vec![0.5]);
        let cfg = AdamConfig {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.99,
            epsilon: 1e-8,
        };
        let mut adam = AdamState::new(&p, cfg);
        adam.step = 2;
        adam.first_moment[0][0] = 0.2;
        adam.second_moment[0][0] = 0.05;
        adam.step(&mut p, &Flat(vec![0.4])).unwrap();
        // m = 0.9*0.2 + 0.1*0.4 = 0.22 ; v = 0.99*0.05 + 0.01*0.16 = 0.0511 ; t = 3
        let m_hat = 0.22 / (1.0 - 0.9f64.powi(3));
        let v_hat = 0.0511 / (1.0 - 0.99f64.powi(3));
        let expect = 0.5 - 0.01 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p.0[0] - expect).abs() < 1e-15);
        assert_eq!(adam.step, 3);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut p = Flat(vec![0.0, 1.0]);
        let mut adam = AdamState::new(&p, AdamConfig::default());
        let err = adam.step(&mut p, &Flat(vec![0.0, f64::NAN])).unwrap_err();
        match err {
            Error::Training { param, .. } => assert_eq!(param, "w"),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(p.0, vec![0.0, 1.0]);
        assert_eq!(adam.step, 0);
    }
}
