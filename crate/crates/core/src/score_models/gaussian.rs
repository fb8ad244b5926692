use std::sync::Arc;

use super::unet::{read_model, write_model};
use super::{Conditioning, NoiseSchedule, ScoreModel, TrainableScore};
use crate::error::{Error, Result};
use crate::params::{checksum_f32, Adam, AdamConfig, ParamSet};
use crate::tensor::Tensor;

/// Exact noise predictor for data distributed as `N(mu, sigma^2 I)`:
/// `eps_hat = sigma_t (x_t - alpha_t mu) / (alpha_t^2 sigma^2 + sigma_t^2)`.
/// Conditioning is ignored.
#[derive(Clone, Debug, PartialEq)]
pub struct AnalyticGaussian {
    pub mu: Tensor,
    pub sigma: f64,
    pub schedule: NoiseSchedule,
}

fn closed_form(schedule: &NoiseSchedule, mean: impl Fn(usize) -> f64, sigma: f64, x_t: &Tensor, t: f64) -> Result<Tensor> {
    NoiseSchedule::check_t(t)?;
    let (a, s) = (schedule.alpha(t), schedule.sigma(t));
    let var = a * a * sigma * sigma + s * s;
    let data = x_t
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| s * (x - a * mean(i)) / var)
        .collect();
    Tensor::new(x_t.shape(), data)
}

impl AnalyticGaussian {
    pub fn new(mu: Tensor, sigma: f64) -> Self {
        Self {
            mu,
            sigma,
            schedule: NoiseSchedule::default(),
        }
    }
}

impl ScoreModel for AnalyticGaussian {
    fn predict(&self, x_t: &Tensor, t: f64, _cond: &Conditioning) -> Result<Tensor> {
        x_t.check_same(&self.mu)?;
        let mu = self.mu.data();
        closed_form(&self.schedule, |i| mu[i], self.sigma, x_t, t)
    }

    fn checksum(&self) -> u64 {
        let v: Vec<f32> = self.mu.data().iter().map(|&x| x as f32).collect();
        checksum_f32(&v) ^ self.sigma.to_bits()
    }
}

/// Trainable copy of an [`AnalyticGaussian`]: same `sigma`, mean `mu + delta`
/// with `delta` starting at zero.
#[derive(Clone, Debug)]
pub struct GaussianAdapter {
    pub base: Arc<AnalyticGaussian>,
    pub delta: Vec<f32>,
    pub adam: Adam,
}

impl GaussianAdapter {
    pub fn new(base: Arc<AnalyticGaussian>, lr: f64) -> Self {
        let n = base.mu.len();
        Self {
            base,
            delta: vec![0.0; n],
            adam: Adam::new(AdamConfig::with_lr(lr), n),
        }
    }

    pub fn mean(&self) -> Tensor {
        let data = self
            .base
            .mu
            .data()
            .iter()
            .zip(&self.delta)
            .map(|(&m, &d)| m + d as f64)
            .collect();
        Tensor::new(self.base.mu.shape(), data).unwrap()
    }
}

impl ScoreModel for GaussianAdapter {
    fn predict(&self, x_t: &Tensor, t: f64, _cond: &Conditioning) -> Result<Tensor> {
        x_t.check_same(&self.base.mu)?;
        let mu = self.base.mu.data();
        let d = &self.delta;
        closed_form(&self.base.schedule, |i| mu[i] + d[i] as f64, self.base.sigma, x_t, t)
    }

    fn checksum(&self) -> u64 {
        checksum_f32(&self.delta)
    }
}

impl TrainableScore for GaussianAdapter {
    fn loss_and_grad(&self, x_t: &Tensor, t: f64, eps: &Tensor, cond: &Conditioning) -> Result<(f64, Vec<f64>)> {
        eps.check_same(x_t)?;
        let pred = self.predict(x_t, t, cond)?;
        let sch = &self.base.schedule;
        let (a, s) = (sch.alpha(t), sch.sigma(t));
        let dpred = -s * a / (a * a * self.base.sigma.powi(2) + s * s);
        let n = eps.len() as f64;
        let mut loss = 0.0;
        let grad = pred
            .data()
            .iter()
            .zip(eps.data())
            .map(|(&p, &e)| {
                loss += (p - e).powi(2) / n;
                2.0 * (p - e) * dpred / n
            })
            .collect();
        Ok((loss, grad))
    }

    fn apply_gradient(&mut self, grad: &[f64]) {
        self.adam.update(&mut self.delta, grad);
    }

    fn params(&self) -> &[f32] {
        &self.delta
    }

    fn params_mut(&mut self) -> &mut [f32] {
        &mut self.delta
    }

    fn optimizer(&self) -> &Adam {
        &self.adam
    }

    fn optimizer_mut(&mut self) -> &mut Adam {
        &mut self.adam
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut p = ParamSet::new();
        p.push("delta", self.base.mu.shape(), self.delta.clone());
        write_model(&format!("kind=gaussian\nsigma={}\nadapter=1\n", self.base.sigma), &p)
    }

    fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let (map, mut blocks) = read_model(bytes)?;
        if map.get("kind").map(String::as_str) != Some("gaussian") || blocks.len() != 1 {
            return Err(Error::InvalidArgument("not a Gaussian adapter checkpoint".into()));
        }
        let (_, dims, data) = blocks.pop().unwrap();
        if dims != self.base.mu.shape() {
            return Err(Error::Shape(format!("adapter delta {dims:?} for mean {:?}", self.base.mu.shape())));
        }
        self.delta = data;
        Ok(())
    }
}
