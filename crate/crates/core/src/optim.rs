//! Adam and a step-decay learning-rate schedule.

use crate::error::{Error, Result};
use crate::nn::ParamTree;
use crate::tensor::{Element, Tensor};

/// Adam with bias correction. Moments are stored per parameter tensor in
/// canonical order.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Completed steps.
    pub t: u64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
}

impl<T: Element> Adam<T> {
    /// Zero moments for parameters of the given shapes.
    pub fn new<'a>(shapes: impl IntoIterator<Item = &'a [usize]>) -> Self {
        let m: Vec<Tensor<T>> = shapes.into_iter().map(Tensor::zeros).collect();
        Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, v: m.clone(), m }
    }

    pub fn for_params<M: ParamTree<Tensor<T>>>(params: &M) -> Self {
        let mut shapes = Vec::new();
        params.map_params("", &mut |_, p: &Tensor<T>| shapes.push(p.shape().to_vec()));
        Self::new(shapes.iter().map(Vec::as_slice))
    }

    /// One update of every parameter in `params` with the matching entry of
    /// `grads`. Nothing is modified if any gradient is non-finite or
    /// mis-shaped.
    pub fn step<M: ParamTree<Tensor<T>>>(&mut self, params: &mut M, grads: &[Tensor<T>], lr: f64) -> Result<()> {
        if !(lr > 0.0) || !lr.is_finite() {
            return Err(Error::InvalidConfig(format!("learning rate must be positive, got {lr}")));
        }
        if grads.len() != self.m.len() {
            return Err(Error::Dimension(format!("{} gradients for {} parameters", grads.len(), self.m.len())));
        }
        for (i, (g, m)) in grads.iter().zip(&self.m).enumerate() {
            if g.shape() != m.shape() {
                return Err(Error::Dimension(format!(
                    "gradient {i} has shape {:?}, parameter {:?}",
                    g.shape(),
                    m.shape()
                )));
            }
            if !g.all_finite() {
                return Err(Error::NonFinite { op: "adam gradient" });
            }
        }
        let mut count = 0;
        let mut shape_err = None;
        params.map_params("", &mut |_, p: &Tensor<T>| {
            if self.m.get(count).map(|m| m.shape()) != Some(p.shape()) && shape_err.is_none() {
                shape_err = Some(count);
            }
            count += 1;
        });
        if count != self.m.len() || shape_err.is_some() {
            return Err(Error::Dimension("optimizer state does not match the parameters".into()));
        }

        self.t += 1;
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let c1 = 1.0 - b1.powi(self.t as i32);
        let c2 = 1.0 - b2.powi(self.t as i32);
        let mut i = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        params.visit_params_mut(&mut |p: &mut Tensor<T>| {
            let g = grads[i].data();
            let m = ms[i].data_mut();
            let v = vs[i].data_mut();
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g.as_f64();
                let mn = b1 * m.as_f64() + (1.0 - b1) * g;
                let vn = b2 * v.as_f64() + (1.0 - b2) * g * g;
                *m = T::from_f64(mn);
                *v = T::from_f64(vn);
                let update = lr * (mn / c1) / ((vn / c2).sqrt() + eps);
                *p = T::from_f64(p.as_f64() - update);
            }
            i += 1;
        });
        Ok(())
    }
}

/// `lr(e) = base_lr · decay_factor^n(e)`, where `n(e)` counts the decays
/// applied at the start of epochs `first_decay_epoch`,
/// `first_decay_epoch + decay_every`, ... (epochs are 0-based).
#[derive(Clone, Debug, PartialEq)]
pub struct StepSchedule {
    pub base_lr: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub first_decay_epoch: usize,
    pub total_epochs: usize,
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule { base_lr: 3e-5, decay_factor: 0.1, decay_every: 2, first_decay_epoch: 2, total_epochs: 10 }
    }
}

impl StepSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("base_lr must be positive, got {}", self.base_lr)));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor < 1.0) {
            return Err(Error::InvalidConfig(format!("decay_factor must be in (0, 1), got {}", self.decay_factor)));
        }
        if self.decay_every == 0 {
            return Err(Error::InvalidConfig("decay_every must be at least 1".into()));
        }
        if self.total_epochs == 0 {
            return Err(Error::InvalidConfig("total_epochs must be at least 1".into()));
        }
        Ok(())
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> Result<f64> {
        if epoch >= self.total_epochs {
            return Err(Error::Usage(format!("epoch {epoch} outside 0..{}", self.total_epochs)));
        }
        let decays = if epoch < self.first_decay_epoch {
            0
        } else {
            (epoch - self.first_decay_epoch) / self.decay_every + 1
        };
        Ok(self.base_lr * self.decay_factor.powi(decays as i32))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Linear;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() <= 1e-12 * b.abs()
    }

    #[test]
    fn schedule_values() {
        let s = StepSchedule::default();
        assert!(close(s.lr_at_epoch(0).unwrap(), 3e-5));
        assert!(close(s.lr_at_epoch(1).unwrap(), 3e-5));
        assert!(close(s.lr_at_epoch(2).unwrap(), 3e-6));
        assert!(close(s.lr_at_epoch(9).unwrap(), 3e-9));
        assert!(s.lr_at_epoch(10).is_err());
        let later = StepSchedule { first_decay_epoch: 3, ..s };
        assert!(close(later.lr_at_epoch(2).unwrap(), 3e-5));
        assert!(close(later.lr_at_epoch(3).unwrap(), 3e-6));
    }

    #[test]
    fn schedule_validation() {
        assert!(StepSchedule::default().validate().is_ok());
        assert!(StepSchedule { decay_factor: 1.0, ..Default::default() }.validate().is_err());
        assert!(StepSchedule { base_lr: 0.0, ..Default::default() }.validate().is_err());
        assert!(StepSchedule { decay_every: 0, ..Default::default() }.validate().is_err());
    }

    fn layer() -> Linear<Tensor<f64>> {
        Linear {
            weight: Tensor::from_f64(&[2, 2], &[1.0, -2.0, 0.5, 3.0]).unwrap(),
            bias: Tensor::from_f64(&[2], &[0.0, 1.0]).unwrap(),
        }
    }

    #[test]
    fn zero_gradient_is_fixed_point() {
        let mut p = layer();
        let before = p.clone();
        let mut adam = Adam::for_params(&p);
        let grads = [Tensor::zeros(&[2, 2]), Tensor::zeros(&[2])];
        for _ in 0..5 {
            adam.step(&mut p, &grads, 0.1).unwrap();
        }
        assert_eq!(p, before);
        assert_eq!(adam.t, 5);
    }

    #[test]
    fn first_step_moves_by_lr_times_sign() {
        let mut p = layer();
        let before = p.clone();
        let mut adam = Adam::for_params(&p);
        let grads = [
            Tensor::from_f64(&[2, 2], &[0.3, -4.0, 1e-3, 0.0]).unwrap(),
            Tensor::from_f64(&[2], &[-7.0, 2.0]).unwrap(),
        ];
        let lr = 0.01;
        adam.step(&mut p, &grads, lr).unwrap();
        let moved: Vec<f64> = p.weight.data().iter().zip(before.weight.data()).map(|(a, b)| a - b).collect();
        // m̂ = g, v̂ = g², so the step is lr·g/(|g| + eps).
        assert!((moved[0] + lr).abs() < 1e-9);
        assert!((moved[1] - lr).abs() < 1e-9);
        assert!((moved[2] + lr).abs() < 1e-7);
        assert_eq!(moved[3], 0.0);
        assert!((p.bias.data()[0] - (0.0 + lr)).abs() < 1e-9);
    }

    #[test]
    fn bounded_steps() {
        let mut rng = crate::rng::Rng::new(4);
        let mut p = layer();
        let mut adam = Adam::for_params(&p);
        let lr = 1e-3;
        for _ in 0..200 {
            let before = p.clone();
            let gw: Vec<f64> = (0..4).map(|_| 3.0 * rng.normal()).collect();
            let gb: Vec<f64> = (0..2).map(|_| rng.normal()).collect();
            let grads = [Tensor::from_f64(&[2, 2], &gw).unwrap(), Tensor::from_f64(&[2], &gb).unwrap()];
            adam.step(&mut p, &grads, lr).unwrap();
            for (a, b) in p.weight.data().iter().zip(before.weight.data()) {
                assert!((a - b).abs() <= 1.1 * lr);
            }
        }
    }

    #[test]
    fn non_finite_gradient_aborts_without_mutation() {
        let mut p = layer();
        let before = p.clone();
        let mut adam = Adam::for_params(&p);
        let grads = [Tensor::from_f64(&[2, 2], &[1.0, f64::NAN, 0.0, 0.0]).unwrap(), Tensor::zeros(&[2])];
        assert!(matches!(adam.step(&mut p, &grads, 0.1), Err(Error::NonFinite { .. })));
        assert_eq!(p, before);
        assert_eq!(adam.t, 0);
        let grads = [Tensor::zeros(&[2, 2])];
        assert!(matches!(adam.step(&mut p, &grads, 0.1), Err(Error::Dimension(_))));
        let grads = [Tensor::zeros(&[4]), Tensor::zeros(&[2])];
        assert!(adam.step(&mut p, &grads, 0.1).is_err());
        assert!(adam.step(&mut p, &[Tensor::zeros(&[2, 2]), Tensor::zeros(&[2])], 0.0).is_err());
    }

    #[test]
    fn deterministic_trajectory() {
        let run = || {
            let mut p = layer();
            let mut adam = Adam::for_params(&p);
            let mut rng = crate::rng::Rng::new(11);
            for _ in 0..20 {
                let gw: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
                let grads = [Tensor::from_f64(&[2, 2], &gw).unwrap(), Tensor::zeros(&[2])];
                adam.step(&mut p, &grads, 0.01).unwrap();
            }
            (p, adam)
        };
        assert_eq!(run(), run());
    }
}
