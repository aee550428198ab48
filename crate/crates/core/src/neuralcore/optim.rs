use serde::{Deserialize, Serialize};

use super::{NnError, Param};

/// SGD schedule and run length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.01,
            decay: 0.005,
            epochs: 30,
            seed: 42,
        }
    }
}

impl TrainConfig {
    /// Checks the schedule. `allow_zero_epochs` admits the no-op run used
    /// to materialize an initialization.
    pub fn validate(&self, allow_zero_epochs: bool) -> Result<(), NnError> {
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return Err(NnError::InvalidConfig(format!(
                "lr0 must be positive, got {}",
                self.lr0
            )));
        }
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            return Err(NnError::InvalidConfig(format!(
                "decay must be >= 0, got {}",
                self.decay
            )));
        }
        if self.epochs == 0 && !allow_zero_epochs {
            return Err(NnError::InvalidConfig("epochs must be >= 1".into()));
        }
        Ok(())
    }

    /// Inverse-time decay: `lr0 / (1 + decay · epoch)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr0 / (1.0 + self.decay * epoch as f64)
    }
}

/// Applies one SGD update at the epoch's learning rate and clears the
/// gradients. Nothing is updated if any gradient is non-finite.
pub fn sgd_step(params: &mut [&mut Param], epoch: usize, cfg: &TrainConfig) -> Result<(), NnError> {
    if let Some(bad) = params
        .iter()
        .find(|p| p.grad.iter().any(|g| !g.is_finite()))
    {
        return Err(NnError::NonFiniteGradient(bad.name.clone()));
    }
    let lr = cfg.lr_at(epoch);
    for p in params.iter_mut() {
        let Param { value, grad, .. } = &mut **p;
        for (v, g) in value.iter_mut().zip(grad.iter_mut()) {
            *v -= lr * *g;
            *g = 0.0;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.01);
        assert!((cfg.lr_at(10) - 0.01 / 1.05).abs() < 1e-18);
        assert!((cfg.lr_at(10) - 0.009524).abs() < 1e-6);
        assert!(cfg.lr_at(30) > 0.0);
    }

    #[test]
    fn zero_gradient_is_identity() {
        let mut p = Param::from_values("p", 2, 2, vec![1.0, -2.0, 3.5, 0.25]);
        let before = p.value.clone();
        sgd_step(&mut [&mut p], 3, &TrainConfig::default()).unwrap();
        assert_eq!(p.value, before);
    }

    #[test]
    fn update_and_zeroing() {
        let mut p = Param::from_values("p", 1, 2, vec![1.0, 1.0]);
        p.grad = vec![1.0, -2.0];
        sgd_step(&mut [&mut p], 0, &TrainConfig::default()).unwrap();
        assert_eq!(p.value, vec![0.99, 1.02]);
        assert_eq!(p.grad, vec![0.0, 0.0]);
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut a = Param::zeros("a", 1, 1);
        let mut b = Param::zeros("enc.weight", 1, 2);
        b.grad[1] = f64::NAN;
        let err = sgd_step(&mut [&mut a, &mut b], 0, &TrainConfig::default()).unwrap_err();
        assert_eq!(
            err.to_string(),
            "non-finite gradient in parameter enc.weight"
        );
        assert_eq!(b.value, vec![0.0, 0.0]);
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::default();
        assert!(cfg.validate(false).is_ok());
        cfg.epochs = 0;
        assert!(cfg.validate(false).is_err());
        assert!(cfg.validate(true).is_ok());
        cfg.lr0 = 0.0;
        assert!(cfg.validate(true).is_err());
    }
}
