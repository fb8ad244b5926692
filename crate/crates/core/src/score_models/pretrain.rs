use super::codec::LatentCodec;
use super::data::{SrDataset, TeacherDataset, TeacherSample};
use super::unet::{UNet, UNetConfig};
use super::{Conditioning, NoiseSchedule, Routing, ScoreModel};
use crate::error::{Error, Result};
use crate::params::{Adam, AdamConfig};
use crate::rng::Stream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    /// Held-out samples scored after training.
    pub heldout: usize,
    /// Training timesteps are drawn from `U(t_min, t_max)`.
    pub t_range: (f64, f64),
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 4000,
            batch: 2,
            lr: 1e-3,
            seed: 0,
            heldout: 32,
            t_range: (0.02, 0.98),
        }
    }
}

impl PretrainConfig {
    /// Defaults for the super-resolution prior, which converges faster.
    pub fn sr() -> Self {
        Self {
            steps: 1500,
            lr: 2e-3,
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainReport {
    /// Mean batch loss per step.
    pub losses: Vec<f64>,
    pub heldout_loss: f64,
    /// Loss of the constant `eps_hat = 0` predictor on the same draws.
    pub baseline_loss: f64,
}

pub fn teacher_conditioning(s: &TeacherSample) -> Conditioning {
    Conditioning {
        depth: Some(s.depth.clone()),
        tokens: s.tokens.clone(),
        masks: s.masks.clone(),
        cond_latent: None,
        routing: Routing::FeatureMask,
    }
}

fn train<F>(config: UNetConfig, pc: &PretrainConfig, mut sample: F) -> Result<(UNet, Vec<f64>)>
where
    F: FnMut(u64) -> Result<(Tensor, Conditioning)>,
{
    let mut net = UNet::new(config, pc.seed)?;
    let mut adam = Adam::new(AdamConfig::with_lr(pc.lr), net.params.len());
    let schedule = NoiseSchedule::default();
    let mut rng = Stream::new(pc.seed, 0x7072_6574);
    let mut losses = Vec::with_capacity(pc.steps);
    let batch = pc.batch.max(1);
    for step in 0..pc.steps {
        let mut grad = vec![0.0; net.params.len()];
        let mut loss = 0.0;
        for b in 0..batch {
            let (x0, cond) = sample((step * batch + b) as u64)?;
            let t = rng.uniform(pc.t_range.0, pc.t_range.1);
            let eps = Tensor::new(x0.shape(), rng.normals(x0.len()))?;
            let x_t = schedule.add_noise(&x0, t, &eps)?;
            let (l, g) = net.loss_and_grad(&x_t, t, &eps, &cond)?;
            if !l.is_finite() {
                return Err(Error::NonFinite {
                    iteration: step as u64,
                    what: format!("pretraining loss (t = {t:.3})"),
                });
            }
            loss += l / batch as f64;
            grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b / batch as f64);
        }
        adam.update(net.params.data_mut(), &grad);
        losses.push(loss);
    }
    net.pretrained = true;
    Ok((net, losses))
}

/// Fixed held-out draws: `(x0, cond, t, eps)` from a dedicated stream.
fn heldout_draws<F>(n: usize, seed: u64, mut sample: F) -> Result<Vec<(Tensor, Conditioning, f64, Tensor)>>
where
    F: FnMut(u64) -> Result<(Tensor, Conditioning)>,
{
    let mut rng = Stream::new(seed, 0x6865_6c64);
    (0..n as u64)
        .map(|k| {
            let (x0, cond) = sample(k)?;
            let t = rng.uniform(0.02, 0.98);
            let eps = Tensor::new(x0.shape(), rng.normals(x0.len()))?;
            Ok((x0, cond, t, eps))
        })
        .collect()
}

/// Mean held-out denoising loss of `model` and of the zero predictor.
/// `edit` may alter the conditioning before prediction (e.g. shuffling).
pub fn heldout_loss(
    model: &dyn ScoreModel,
    draws: &[(Tensor, Conditioning, f64, Tensor)],
    edit: &dyn Fn(&Conditioning) -> Conditioning,
) -> Result<(f64, f64)> {
    let schedule = NoiseSchedule::default();
    let (mut loss, mut base) = (0.0, 0.0);
    for (x0, cond, t, eps) in draws {
        let x_t = schedule.add_noise(x0, *t, eps)?;
        let pred = model.predict(&x_t, *t, &edit(cond))?;
        let n = eps.len() as f64;
        loss += pred.data().iter().zip(eps.data()).map(|(p, e)| (p - e).powi(2)).sum::<f64>() / n;
        base += eps.data().iter().map(|e| e * e).sum::<f64>() / n;
    }
    let k = draws.len().max(1) as f64;
    Ok((loss / k, base / k))
}

impl TeacherDataset {
    /// Held-out draws from the dataset's sibling seed.
    pub fn heldout(&self, n: usize) -> Result<Vec<(Tensor, Conditioning, f64, Tensor)>> {
        let other = TeacherDataset {
            seed: self.seed ^ 0x00ff_00ff_00ff,
            ..self.clone()
        };
        heldout_draws(n, self.seed, |k| {
            let s = other.sample(k)?;
            Ok((s.latent.clone(), teacher_conditioning(&s)))
        })
    }
}

impl SrDataset {
    pub fn heldout(&self, n: usize) -> Result<Vec<(Tensor, Conditioning, f64, Tensor)>> {
        let other = SrDataset {
            seed: self.seed ^ 0x00ff_00ff_00ff,
            ..self.clone()
        };
        heldout_draws(n, self.seed, |k| {
            let s = other.sample(k)?;
            Ok((s.latent, sr_conditioning(s.cond_latent)))
        })
    }
}

fn sr_conditioning(cond_latent: Tensor) -> Conditioning {
    Conditioning {
        cond_latent: Some(cond_latent),
        ..Default::default()
    }
}

/// Train the conditioned teacher on rendered procedural rooms.
pub fn pretrain_teacher(dataset: &TeacherDataset, config: UNetConfig, pc: &PretrainConfig) -> Result<(UNet, PretrainReport)> {
    let (net, losses) = train(config, pc, |k| {
        let s = dataset.sample(k)?;
        Ok((s.latent.clone(), teacher_conditioning(&s)))
    })?;
    let draws = dataset.heldout(pc.heldout)?;
    let (heldout_loss, baseline_loss) = heldout_loss(&net, &draws, &|c| c.clone())?;
    Ok((
        net,
        PretrainReport {
            losses,
            heldout_loss,
            baseline_loss,
        },
    ))
}

/// Train the super-resolution denoiser on sharp latents conditioned on their
/// blurred counterparts.
pub fn pretrain_sr(dataset: &SrDataset, config: UNetConfig, pc: &PretrainConfig) -> Result<(UNet, PretrainReport)> {
    let (net, losses) = train(config, pc, |k| {
        let s = dataset.sample(k)?;
        Ok((s.latent, sr_conditioning(s.cond_latent)))
    })?;
    let draws = dataset.heldout(pc.heldout)?;
    let (heldout_loss, baseline_loss) = heldout_loss(&net, &draws, &|c| c.clone())?;
    Ok((
        net,
        PretrainReport {
            losses,
            heldout_loss,
            baseline_loss,
        },
    ))
}

/// One super-resolution denoising pass over an image.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SrPass {
    /// Noise level the input latent is lifted to before denoising.
    pub t_start: f64,
    pub steps: usize,
    /// 0 is deterministic DDIM; 1 adds the ancestral noise.
    pub eta: f64,
}

impl Default for SrPass {
    fn default() -> Self {
        Self {
            t_start: 0.4,
            steps: 8,
            eta: 0.0,
        }
    }
}

/// Encode `image`, noise it to `t_start`, then denoise back to `t = 0` with
/// the SR model conditioned on the input latent; returns the decoded image.
/// Height and width must be multiples of `2^levels`.
pub fn sr_enhance(sr: &UNet, image: &Tensor, pass: &SrPass, seed: u64) -> Result<Tensor> {
    NoiseSchedule::check_t(pass.t_start)?;
    let codec = LatentCodec;
    let schedule = NoiseSchedule::default();
    let c = codec.encode(image)?;
    let cond = sr_conditioning(c.clone());
    let mut rng = Stream::new(seed, 0x656e_6863);
    let eps = Tensor::new(c.shape(), rng.normals(c.len()))?;
    let mut x = schedule.add_noise(&c, pass.t_start, &eps)?;
    let steps = pass.steps.max(1);
    let mut x0 = c.clone();
    for k in 0..steps {
        let t = pass.t_start * (1.0 - k as f64 / steps as f64);
        let t_next = pass.t_start * (1.0 - (k + 1) as f64 / steps as f64);
        let e = sr.predict(&x, t, &cond)?;
        let (a, s) = (schedule.alpha(t), schedule.sigma(t));
        x0 = x.zip_map(&e, |xv, ev| (xv - s * ev) / a)?;
        if t_next <= 0.0 {
            break;
        }
        let (an, sn) = (schedule.alpha(t_next), schedule.sigma(t_next));
        // DDIM with optional ancestral noise
        let var = (sn * sn / (s * s)) * (1.0 - (a * a * sn * sn) / (an * an * s * s).max(1e-300));
        let noise_sd = pass.eta * var.max(0.0).sqrt();
        let dir = (sn * sn - noise_sd * noise_sd).max(0.0).sqrt();
        let z = rng.normals(x.len());
        let mut next = x0.scale(an);
        next.add_scaled(&e, dir);
        if noise_sd > 0.0 {
            next.add_scaled(&Tensor::new(x.shape(), z)?, noise_sd);
        }
        x = next;
    }
    codec.decode(&x0)
}
