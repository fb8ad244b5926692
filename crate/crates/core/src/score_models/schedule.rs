use std::f64::consts::FRAC_PI_2;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Weighting `w(t)` applied to score-distillation gradients.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Weighting {
    #[default]
    SigmaSquared,
    Constant,
}

impl Weighting {
    pub fn name(self) -> &'static str {
        match self {
            Self::SigmaSquared => "sigma2",
            Self::Constant => "constant",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "sigma2" => Ok(Self::SigmaSquared),
            "constant" => Ok(Self::Constant),
            other => Err(Error::InvalidArgument(format!("unknown weighting `{other}`"))),
        }
    }
}

/// Variance-preserving cosine schedule: `alpha = cos(pi t / 2)`,
/// `sigma = sin(pi t / 2)`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct NoiseSchedule {
    pub weighting: Weighting,
}

impl NoiseSchedule {
    pub fn alpha(&self, t: f64) -> f64 {
        (FRAC_PI_2 * t).cos()
    }

    pub fn sigma(&self, t: f64) -> f64 {
        (FRAC_PI_2 * t).sin()
    }

    pub fn weight(&self, t: f64) -> f64 {
        match self.weighting {
            Weighting::SigmaSquared => self.sigma(t).powi(2),
            Weighting::Constant => 1.0,
        }
    }

    pub fn check_t(t: f64) -> Result<()> {
        if t > 0.0 && t <= 1.0 {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("timestep {t} outside (0, 1]")))
        }
    }

    /// `x_t = alpha_t x0 + sigma_t eps`
    pub fn add_noise(&self, x0: &Tensor, t: f64, eps: &Tensor) -> Result<Tensor> {
        Self::check_t(t)?;
        let (a, s) = (self.alpha(t), self.sigma(t));
        x0.zip_map(eps, |x, e| a * x + s * e)
    }
}
