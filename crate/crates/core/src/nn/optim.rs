use super::Tensor;
use crate::error::{Error, Result};

/// Plain SGD with a polynomial ("poly") learning-rate decay.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdConfig {
    pub lr0: f64,
    pub max_steps: usize,
    pub power: f64,
    pub batch: usize,
}

impl SgdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if self.max_steps == 0 {
            return Err(Error::Config("max_steps must be at least 1".into()));
        }
        if !(self.power >= 0.0) {
            return Err(Error::Config(format!(
                "power must be >= 0, got {}",
                self.power
            )));
        }
        Ok(())
    }
}

/// `lr0 · (1 − step/max_steps)^power`.
pub fn poly_decay_lr(step: usize, cfg: &SgdConfig) -> Result<f64> {
    if step > cfg.max_steps {
        return Err(Error::OutOfRange(format!(
            "step {step} beyond max_steps {}",
            cfg.max_steps
        )));
    }
    let frac = 1.0 - step as f64 / cfg.max_steps as f64;
    Ok(cfg.lr0 * frac.powf(cfg.power))
}

/// `p ← p − lr·g` for every parameter tensor.
pub fn sgd_step(params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
    if params.len() != grads.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} parameter tensors but {} gradients",
            params.len(),
            grads.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        p.same_shape(g)?;
    }
    for (p, g) in params.iter_mut().zip(grads) {
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SgdConfig {
        SgdConfig {
            lr0: 1e-2,
            max_steps: 50,
            power: 0.9,
            batch: 1,
        }
    }

    #[test]
    fn decay_boundaries_and_midpoint() {
        assert_eq!(poly_decay_lr(0, &cfg()).unwrap(), 1e-2);
        assert_eq!(poly_decay_lr(50, &cfg()).unwrap(), 0.0);
        let mid = poly_decay_lr(25, &cfg()).unwrap();
        assert!((mid - 1e-2 * 0.5f64.powf(0.9)).abs() < 1e-15);
        assert!((mid - 5.359e-3).abs() < 1e-6);
        assert!(poly_decay_lr(51, &cfg()).is_err());
    }

    #[test]
    fn decay_is_non_increasing() {
        let lrs: Vec<f64> = (0..=50)
            .map(|s| poly_decay_lr(s, &cfg()).unwrap())
            .collect();
        assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn sgd_updates() {
        let mut p = Tensor::from_vec(vec![1], vec![1.0]).unwrap();
        let g = Tensor::from_vec(vec![1], vec![0.5]).unwrap();
        sgd_step(&mut [&mut p], std::slice::from_ref(&g), 0.0).unwrap();
        assert_eq!(p.data()[0], 1.0);
        sgd_step(&mut [&mut p], std::slice::from_ref(&g), 0.1).unwrap();
        assert_eq!(p.data()[0], 0.95);

        let mut twice = Tensor::from_vec(vec![2], vec![0.25, -3.0]).unwrap();
        let mut once = twice.clone();
        let g = Tensor::from_vec(vec![2], vec![0.5, 0.125]).unwrap();
        sgd_step(&mut [&mut twice], std::slice::from_ref(&g), 0.25).unwrap();
        sgd_step(&mut [&mut twice], std::slice::from_ref(&g), 0.25).unwrap();
        sgd_step(&mut [&mut once], std::slice::from_ref(&g), 0.5).unwrap();
        assert_eq!(twice, once);
    }

    #[test]
    fn sgd_rejects_shape_mismatch() {
        let mut p = Tensor::zeros(&[2]);
        assert!(sgd_step(&mut [&mut p], &[Tensor::zeros(&[3])], 0.1).is_err());
        assert!(sgd_step(&mut [&mut p], &[], 0.1).is_err());
    }
}
