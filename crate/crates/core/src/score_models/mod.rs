//! Denoisers used for score distillation: the frozen conditioned teacher, its
//! trainable low-rank copy, the frozen super-resolution prior, the latent
//! codec, and a closed-form Gaussian teacher used as a verification oracle.

mod codec;
mod data;
mod gaussian;
mod pretrain;
mod schedule;
mod unet;

pub use codec::{LatentCodec, LATENT_CHANNELS};
pub use data::{gaussian_blur, Pattern, PatternKind, SrDataset, SrSample, TeacherDataset, TeacherSample};
pub use gaussian::{AnalyticGaussian, GaussianAdapter};
pub use pretrain::{
    heldout_loss, pretrain_sr, pretrain_teacher, sr_enhance, teacher_conditioning, PretrainConfig,
    PretrainReport, SrPass,
};
pub use schedule::{NoiseSchedule, Weighting};
pub use unet::{read_model, time_features, write_model, Lora, ModelKind, UNet, UNetAdapter, UNetConfig};

use crate::error::{Error, Result};
use crate::params::Adam;
use crate::raster::Mask;
use crate::tensor::Tensor;

/// How per-instance reference conditioning is combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Routing {
    /// Masks applied inside every cross-attention block.
    #[default]
    FeatureMask,
    /// One unmasked pass per instance, predictions blended by the masks.
    NoiseLevel,
}

/// Everything a denoiser may condition on. Spatial inputs are at latent
/// resolution.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Conditioning {
    pub depth: Option<Tensor>,
    pub tokens: Vec<Tensor>,
    pub masks: Vec<Mask>,
    /// Clean latent for the super-resolution model.
    pub cond_latent: Option<Tensor>,
    pub routing: Routing,
}

/// A noise predictor `eps_hat(x_t, t, cond)`.
pub trait ScoreModel {
    fn predict(&self, x_t: &Tensor, t: f64, cond: &Conditioning) -> Result<Tensor>;
    /// Hash of all weights, used to assert frozen-ness.
    fn checksum(&self) -> u64;
}

/// A score model trained on the denoising objective `mean |eps_hat - eps|^2`.
pub trait TrainableScore: ScoreModel {
    fn loss_and_grad(&self, x_t: &Tensor, t: f64, eps: &Tensor, cond: &Conditioning) -> Result<(f64, Vec<f64>)>;
    fn apply_gradient(&mut self, grad: &[f64]);
    fn params(&self) -> &[f32];
    fn params_mut(&mut self) -> &mut [f32];
    fn optimizer(&self) -> &Adam;
    fn optimizer_mut(&mut self) -> &mut Adam;
    fn to_bytes(&self) -> Vec<u8>;
    fn load_bytes(&mut self, bytes: &[u8]) -> Result<()>;

    /// One optimizer step on the denoising objective; returns the loss.
    fn train_step(&mut self, x_t: &Tensor, t: f64, eps: &Tensor, cond: &Conditioning) -> Result<f64> {
        let (loss, grad) = self.loss_and_grad(x_t, t, eps, cond)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFinite {
                iteration: self.optimizer().step,
                what: "adapter loss".into(),
            });
        }
        self.apply_gradient(&grad);
        Ok(loss)
    }
}
