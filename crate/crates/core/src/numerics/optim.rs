use super::{ParamStore, Scalar, Tensor};
use crate::error::{Error, Result};

/// Learning-rate schedule for [`Adam`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Schedule {
    /// Constant `lr`.
    Fixed,
    /// `lr · min(step^-0.5, step · warmup^-1.5)`.
    Noam { warmup: u64 },
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub schedule: Schedule,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 5e-5,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            schedule: Schedule::Fixed,
        }
    }
}

/// Noam learning rate at `step` (1-based).
pub fn noam_lr(base: f64, step: u64, warmup: u64) -> Result<f64> {
    if step == 0 {
        return Err(Error::Domain("noam schedule is undefined at step 0".into()));
    }
    if warmup == 0 {
        return Err(Error::Config("noam warmup must be positive".into()));
    }
    let s = step as f64;
    Ok(base * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5)))
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam<T> {
    pub config: AdamConfig,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
    steps: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(config: AdamConfig, store: &ParamStore<T>) -> Self {
        let zeros: Vec<Tensor<T>> = store
            .iter()
            .map(|(_, p)| Tensor::zeros(p.value.shape()))
            .collect();
        Self {
            config,
            second: zeros.clone(),
            first: zeros,
            steps: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn learning_rate(&self, step: u64) -> Result<f64> {
        match self.config.schedule {
            Schedule::Fixed => Ok(self.config.lr),
            Schedule::Noam { warmup } => noam_lr(self.config.lr, step, warmup),
        }
    }

    /// Applies one update from the gradients held in `store`.
    pub fn step(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        let t = self.steps + 1;
        let lr = self.learning_rate(t)?;
        let c = &self.config;
        let b1 = T::from_f64_lossy(c.beta1);
        let b2 = T::from_f64_lossy(c.beta2);
        let one = T::one();
        let corr1 = T::from_f64_lossy(1.0 - c.beta1.powi(t as i32));
        let corr2 = T::from_f64_lossy(1.0 - c.beta2.powi(t as i32));
        let lr = T::from_f64_lossy(lr);
        let eps = T::from_f64_lossy(c.eps);
        for ((p, m), v) in store
            .iter_mut()
            .zip(self.first.iter_mut())
            .zip(self.second.iter_mut())
        {
            if !p.trainable {
                continue;
            }
            let g = p.grad.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for (i, w) in p.value.data_mut().iter_mut().enumerate() {
                md[i] = b1 * md[i] + (one - b1) * g[i];
                vd[i] = b2 * vd[i] + (one - b2) * g[i] * g[i];
                let mhat = md[i] / corr1;
                let vhat = vd[i] / corr2;
                *w = *w - lr * mhat / (vhat.sqrt() + eps);
            }
        }
        self.steps = t;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::column(&[1.0, -2.0]));
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store).unwrap();
        assert_eq!(store.value(id).data(), &[1.0, -2.0]);
    }

    #[test]
    fn scalar_adam_two_steps_matches_reference() {
        // Reference: hand-rolled Adam on a single scalar with g = 1.
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let (mut w, mut m, mut v) = (0.5f64, 0.0f64, 0.0f64);
        for t in 1..=2 {
            m = cfg.beta1 * m + (1.0 - cfg.beta1);
            v = cfg.beta2 * v + (1.0 - cfg.beta2);
            let mh = m / (1.0 - cfg.beta1.powi(t));
            let vh = v / (1.0 - cfg.beta2.powi(t));
            w -= cfg.lr * mh / (vh.sqrt() + cfg.eps);
        }
        let mut store = ParamStore::<f64>::new();
        let id = store.add("w", Tensor::scalar(0.5));
        let mut adam = Adam::new(cfg, &store);
        for _ in 0..2 {
            store.get_mut(id).grad = Tensor::scalar(1.0);
            adam.step(&mut store).unwrap();
        }
        assert!((store.value(id).data()[0] - w).abs() < 1e-15);
    }

    #[test]
    fn noam_peaks_at_warmup() {
        let warmup = 50;
        let lrs: Vec<f64> = (1..=400).map(|s| noam_lr(1.0, s, warmup).unwrap()).collect();
        let best = lrs
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0
            + 1;
        assert_eq!(best as u64, warmup);
        assert!(noam_lr(1.0, 0, warmup).is_err());
    }
}
