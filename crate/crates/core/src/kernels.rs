//! Ground-truth stationary covariance functions for the synthetic tasks.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A covariance function on scalar inputs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum KernelSpec {
    /// `σ² exp(-r² / 2ℓ²)`
    Eq { variance: f64, lengthscale: f64 },
    /// `σ² (1 + r/ℓ + r²/3ℓ²) exp(-r/ℓ)`
    Matern52 { variance: f64, lengthscale: f64 },
    /// Sum of two EQ kernels.
    NoisyMixture {
        variance1: f64,
        lengthscale1: f64,
        variance2: f64,
        lengthscale2: f64,
    },
    /// EQ times `exp(-2 sin²(π r / p) / ℓ_p²)`.
    WeaklyPeriodic {
        variance: f64,
        lengthscale: f64,
        period: f64,
        periodic_lengthscale: f64,
    },
}

fn eq(variance: f64, lengthscale: f64, r: f64) -> f64 {
    variance * (-0.5 * r * r / (lengthscale * lengthscale)).exp()
}

impl KernelSpec {
    pub fn eq() -> Self {
        KernelSpec::Eq {
            variance: 1.0,
            lengthscale: 1.0,
        }
    }

    pub fn matern52() -> Self {
        KernelSpec::Matern52 {
            variance: 1.0,
            lengthscale: 1.0,
        }
    }

    pub fn noisy_mixture() -> Self {
        KernelSpec::NoisyMixture {
            variance1: 1.0,
            lengthscale1: 1.0,
            variance2: 1.0,
            lengthscale2: 0.25,
        }
    }

    pub fn weakly_periodic() -> Self {
        KernelSpec::WeaklyPeriodic {
            variance: 1.0,
            lengthscale: 1.0,
            period: 0.25,
            periodic_lengthscale: 1.0,
        }
    }

    /// The four benchmark kernels with their default parameters.
    pub fn benchmarks() -> [KernelSpec; 4] {
        [
            KernelSpec::eq(),
            KernelSpec::matern52(),
            KernelSpec::noisy_mixture(),
            KernelSpec::weakly_periodic(),
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            KernelSpec::Eq { .. } => "eq",
            KernelSpec::Matern52 { .. } => "matern52",
            KernelSpec::NoisyMixture { .. } => "noisy_mixture",
            KernelSpec::WeaklyPeriodic { .. } => "weakly_periodic",
        }
    }

    fn params(&self) -> Vec<(&'static str, f64)> {
        match *self {
            KernelSpec::Eq { variance, lengthscale } | KernelSpec::Matern52 { variance, lengthscale } => {
                vec![("variance", variance), ("lengthscale", lengthscale)]
            }
            KernelSpec::NoisyMixture {
                variance1,
                lengthscale1,
                variance2,
                lengthscale2,
            } => vec![
                ("variance1", variance1),
                ("lengthscale1", lengthscale1),
                ("variance2", variance2),
                ("lengthscale2", lengthscale2),
            ],
            KernelSpec::WeaklyPeriodic {
                variance,
                lengthscale,
                period,
                periodic_lengthscale,
            } => vec![
                ("variance", variance),
                ("lengthscale", lengthscale),
                ("period", period),
                ("periodic_lengthscale", periodic_lengthscale),
            ],
        }
    }

    /// All parameters must be finite and strictly positive.
    pub fn validate(&self) -> Result<()> {
        for (name, v) in self.params() {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "{} kernel: {name} must be positive, got {v}",
                    self.name()
                )));
            }
        }
        Ok(())
    }

    /// `k(x, x')`. Parameters are assumed valid.
    pub fn eval(&self, x: f64, xp: f64) -> f64 {
        let r = (x - xp).abs();
        match *self {
            KernelSpec::Eq { variance, lengthscale } => eq(variance, lengthscale, r),
            KernelSpec::Matern52 { variance, lengthscale } => {
                let s = r / lengthscale;
                variance * (1.0 + s + s * s / 3.0) * (-s).exp()
            }
            KernelSpec::NoisyMixture {
                variance1,
                lengthscale1,
                variance2,
                lengthscale2,
            } => eq(variance1, lengthscale1, r) + eq(variance2, lengthscale2, r),
            KernelSpec::WeaklyPeriodic {
                variance,
                lengthscale,
                period,
                periodic_lengthscale,
            } => {
                let s = (PI * r / period).sin();
                eq(variance, lengthscale, r) * (-2.0 * s * s / (periodic_lengthscale * periodic_lengthscale)).exp()
            }
        }
    }

    /// `[len(xa), len(xb)]` matrix of `k(xa_i, xb_j)`.
    pub fn matrix(&self, xa: &[f64], xb: &[f64]) -> Result<Tensor> {
        self.validate()?;
        if let Some(bad) = xa.iter().chain(xb).find(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter(format!("non-finite kernel input {bad}")));
        }
        Ok(Tensor::from_fn2(xa.len(), xb.len(), |i, j| self.eval(xa[i], xb[j])))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eq_values() {
        let k = KernelSpec::eq();
        assert_eq!(k.eval(0.0, 0.0), 1.0);
        assert!((k.eval(0.0, 1.0) - 0.606_530_659_712_633_4).abs() < 1e-12);
    }

    #[test]
    fn matern_value() {
        // (7/3) e^{-1}
        let expected = 7.0 / 3.0 * (-1.0f64).exp();
        assert!((KernelSpec::matern52().eval(0.0, 1.0) - expected).abs() < 1e-14);
        assert!((expected - 0.858_385_362_733_365_5).abs() < 1e-15);
    }

    #[test]
    fn mixture_at_zero_sums_variances() {
        assert_eq!(KernelSpec::noisy_mixture().eval(0.0, 0.0), 2.0);
    }

    #[test]
    fn weakly_periodic_full_period() {
        let v = KernelSpec::weakly_periodic().eval(0.0, 0.25);
        assert!((v - (-0.03125f64).exp()).abs() < 1e-14);
        assert!((v - 0.969_233).abs() < 1e-6);
    }

    #[test]
    fn rejects_non_positive_params() {
        let k = KernelSpec::Eq {
            variance: 1.0,
            lengthscale: 0.0,
        };
        assert!(k.matrix(&[0.0], &[0.0]).is_err());
        let k = KernelSpec::WeaklyPeriodic {
            variance: 1.0,
            lengthscale: 1.0,
            period: -0.25,
            periodic_lengthscale: 1.0,
        };
        assert!(k.validate().is_err());
    }

    #[test]
    fn json_form() {
        let k: KernelSpec = serde_json::from_str(r#"{"kind":"eq","variance":1.0,"lengthscale":2.0}"#).unwrap();
        assert_eq!(
            k,
            KernelSpec::Eq {
                variance: 1.0,
                lengthscale: 2.0
            }
        );
        let typo = serde_json::from_str::<KernelSpec>(r#"{"kind":"eq","variance":1.0,"lenghtscale":2.0}"#);
        assert!(typo.is_err());
    }
}
