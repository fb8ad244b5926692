//! The distillation loop: texture updates from the difference between the
//! frozen teacher's and the adapter's noise predictions (plus the
//! super-resolution term), alternated with adapter training on the current
//! renders.

mod checkpoint;
mod config;
mod particle;

pub use checkpoint::{read_metrics, write_metrics, MetricsRow};
pub use config::{DistillConfig, ReferenceMode, SrSchedule, TimeSchedule};
pub use particle::{masked_mean_color, render_step_inputs, Particle, PixelParticle, Rendered, SceneParticle};

use std::path::Path;
use std::sync::Arc;

use crate::conditioning::ReferenceSet;
use crate::error::{Error, Result};
use crate::geometry::Scene;
use crate::params::{Adam, AdamConfig};
use crate::rng::Stream;
use crate::score_models::{gaussian_blur, Conditioning, NoiseSchedule, ScoreModel, TrainableScore, UNet, UNetAdapter};
use crate::tensor::Tensor;
use crate::texture_field::TextureField;

const VIEW_STREAM: u64 = 1;
const TIME_STREAM: u64 = 2;
const NOISE_STREAM: u64 = 3;

/// The random draw shared by every term of one iteration.
#[derive(Clone, Debug, PartialEq)]
pub struct Draw {
    pub iteration: u64,
    pub t: f64,
    pub eps: Tensor,
}

fn check_finite(values: &[f64], iteration: u64, what: &str) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite {
            iteration,
            what: what.into(),
        })
    }
}

/// `w(t) * alpha_t * (a - b)`: the latent-space gradient of a score
/// difference, with `alpha_t = d x_t / d x0`.
fn latent_gradient(schedule: &NoiseSchedule, t: f64, a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let c = schedule.weight(t) * schedule.alpha(t);
    a.zip_map(b, |p, q| c * (p - q))
}

fn pull_back<P: Particle + ?Sized>(
    particle: &P,
    rendered: &Rendered,
    grad_latent: &Tensor,
    draw: &Draw,
    what: &str,
) -> Result<Vec<f64>> {
    check_finite(grad_latent.data(), draw.iteration, what)?;
    let g = particle.backward(rendered, grad_latent)?;
    check_finite(&g, draw.iteration, what)?;
    Ok(g)
}

/// Latent-space blur applied to the render before it conditions the SR
/// prior; half the image-space blur the prior was trained on.
pub const SR_CONDITION_BLUR: f64 = 0.75;

/// Conditioning of the super-resolution prior: the rendered latent, degraded
/// like the prior's training inputs. Conditioning on the sharp render makes
/// the prior an identity map and the term amplifies texture noise.
pub fn sr_conditioning(rendered: &Rendered) -> Conditioning {
    Conditioning {
        cond_latent: Some(gaussian_blur(&rendered.latent, SR_CONDITION_BLUR)),
        ..Default::default()
    }
}

/// Texture gradient of the score-distillation term. Denoiser outputs are
/// constants; only the render path is differentiated.
pub fn vsd_gradient<P: Particle + ?Sized>(
    particle: &P,
    rendered: &Rendered,
    teacher: &dyn ScoreModel,
    adapter: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    draw: &Draw,
) -> Result<Vec<f64>> {
    let x_t = schedule.add_noise(&rendered.latent, draw.t, &draw.eps)?;
    let e_d = teacher.predict(&x_t, draw.t, &rendered.cond)?;
    let e_l = adapter.predict(&x_t, draw.t, &rendered.cond)?;
    let g = latent_gradient(schedule, draw.t, &e_d, &e_l)?;
    pull_back(particle, rendered, &g, draw, "VSD gradient")
}

/// Texture gradient of the super-resolution term.
pub fn sr_gradient<P: Particle + ?Sized>(
    particle: &P,
    rendered: &Rendered,
    sr: &dyn ScoreModel,
    adapter: &dyn ScoreModel,
    schedule: &NoiseSchedule,
    draw: &Draw,
) -> Result<Vec<f64>> {
    let x_t = schedule.add_noise(&rendered.latent, draw.t, &draw.eps)?;
    let e_sr = sr.predict(&x_t, draw.t, &sr_conditioning(rendered))?;
    let e_l = adapter.predict(&x_t, draw.t, &rendered.cond)?;
    let g = latent_gradient(schedule, draw.t, &e_sr, &e_l)?;
    pull_back(particle, rendered, &g, draw, "SR gradient")
}

/// `steps` adapter updates on the denoising objective for the (detached)
/// rendered latent; returns the mean loss.
pub fn adapter_step(
    adapter: &mut dyn TrainableScore,
    rendered: &Rendered,
    schedule: &NoiseSchedule,
    draw: &Draw,
    steps: usize,
) -> Result<f64> {
    let x_t = schedule.add_noise(&rendered.latent, draw.t, &draw.eps)?;
    let mut total = 0.0;
    for _ in 0..steps {
        total += adapter.train_step(&x_t, draw.t, &draw.eps, &rendered.cond).map_err(|e| match e {
            Error::NonFinite { what, .. } => Error::NonFinite {
                iteration: draw.iteration,
                what,
            },
            other => other,
        })?;
    }
    Ok(total / steps.max(1) as f64)
}

fn norm(g: &[f64]) -> f64 {
    g.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Optimization state: particle, models, optimizer moments, iteration and
/// the three random streams.
pub struct Distiller<P: Particle> {
    pub config: DistillConfig,
    pub particle: P,
    pub teacher: Arc<dyn ScoreModel>,
    pub sr: Option<Arc<dyn ScoreModel>>,
    pub adapter: Box<dyn TrainableScore>,
    pub schedule: NoiseSchedule,
    pub texture_adam: Adam,
    pub iteration: u64,
    pub metrics: Vec<MetricsRow>,
    view_rng: Stream,
    time_rng: Stream,
    noise_rng: Stream,
    teacher_checksum: u64,
    sr_checksum: Option<u64>,
}

impl<P: Particle> Distiller<P> {
    pub fn new(
        config: DistillConfig,
        particle: P,
        teacher: Arc<dyn ScoreModel>,
        sr: Option<Arc<dyn ScoreModel>>,
        adapter: Box<dyn TrainableScore>,
    ) -> Result<Self> {
        config.validate()?;
        if sr.is_none() && config.sr.lambda != 0.0 && config.sr.start < config.iterations {
            return Err(Error::InvalidArgument(
                "the SR term is scheduled but no SR model was given".into(),
            ));
        }
        if particle.view_count() == 0 {
            return Err(Error::InvalidArgument("particle has no views".into()));
        }
        let seed = config.seed;
        Ok(Self {
            texture_adam: Adam::new(AdamConfig::with_lr(config.lr_texture), particle.params().len()),
            schedule: NoiseSchedule {
                weighting: config.weighting,
            },
            teacher_checksum: teacher.checksum(),
            sr_checksum: sr.as_ref().map(|m| m.checksum()),
            config,
            particle,
            teacher,
            sr,
            adapter,
            iteration: 0,
            metrics: Vec::new(),
            view_rng: Stream::new(seed, VIEW_STREAM),
            time_rng: Stream::new(seed, TIME_STREAM),
            noise_rng: Stream::new(seed, NOISE_STREAM),
        })
    }

    /// Draw the view and `(t, eps)` for the current iteration.
    fn draw(&mut self) -> Result<(Rendered, Draw)> {
        let k = self.iteration;
        let view = self.view_rng.index(self.particle.view_count());
        let t = self.config.time.sample(k, &mut self.time_rng);
        let rendered = self.particle.render(view)?;
        let n = rendered.latent.len();
        let eps = Tensor::new(rendered.latent.shape(), self.noise_rng.normals(n))?;
        Ok((rendered, Draw { iteration: k, t, eps }))
    }

    /// One combined iteration: texture step on `VSD + lambda_SR * SR`, then
    /// adapter steps on a fresh render with the same view, `t` and `eps`.
    pub fn step(&mut self) -> Result<MetricsRow> {
        let (rendered, draw) = self.draw()?;
        let sch = self.schedule;
        let x_t = sch.add_noise(&rendered.latent, draw.t, &draw.eps)?;
        let e_l = self.adapter.predict(&x_t, draw.t, &rendered.cond)?;
        let e_d = self.teacher.predict(&x_t, draw.t, &rendered.cond)?;
        let g_vsd = pull_back(
            &self.particle,
            &rendered,
            &latent_gradient(&sch, draw.t, &e_d, &e_l)?,
            &draw,
            "VSD gradient",
        )?;
        let lambda = self.config.sr.lambda(draw.iteration);
        let mut grad = g_vsd.clone();
        let mut sr_norm = 0.0;
        if lambda != 0.0 {
            let sr = self.sr.as_ref().ok_or_else(|| Error::InvalidArgument("no SR model".into()))?;
            let e_sr = sr.predict(&x_t, draw.t, &sr_conditioning(&rendered))?;
            let g_sr = pull_back(
                &self.particle,
                &rendered,
                &latent_gradient(&sch, draw.t, &e_sr, &e_l)?,
                &draw,
                "SR gradient",
            )?;
            sr_norm = norm(&g_sr);
            grad.iter_mut().zip(&g_sr).for_each(|(a, b)| *a += lambda * b);
        }
        self.texture_adam.update(self.particle.params_mut(), &grad);
        check_finite(
            &self.particle.params().iter().map(|&v| v as f64).collect::<Vec<_>>(),
            draw.iteration,
            "texture parameters",
        )?;

        let updated = self.particle.render(rendered.view)?;
        let adapter_loss = adapter_step(self.adapter.as_mut(), &updated, &sch, &draw, self.config.adapter_steps)?;
        let row = MetricsRow {
            iteration: draw.iteration,
            t: draw.t,
            lambda_sr: lambda,
            vsd_grad_norm: norm(&g_vsd),
            sr_grad_norm: sr_norm,
            adapter_loss,
            color_errors: self.particle.color_errors(&updated),
        };
        self.iteration += 1;
        self.metrics.push(row.clone());
        Ok(row)
    }

    /// Error if a frozen model changed since construction.
    pub fn verify_frozen(&self) -> Result<()> {
        if self.teacher.checksum() != self.teacher_checksum {
            return Err(Error::Checkpoint("teacher weights changed during optimization".into()));
        }
        if self.sr.as_ref().map(|m| m.checksum()) != self.sr_checksum {
            return Err(Error::Checkpoint("SR weights changed during optimization".into()));
        }
        Ok(())
    }

    /// Step until `config.iterations`, checkpointing into `checkpoint_dir`
    /// every `checkpoint_every` iterations and at the end. A failing step
    /// leaves the last written checkpoint in place.
    pub fn run(&mut self, checkpoint_dir: Option<&Path>, progress: &mut dyn FnMut(&MetricsRow)) -> Result<()> {
        while self.iteration < self.config.iterations {
            let row = self.step()?;
            progress(&row);
            let every = self.config.checkpoint_every;
            if let Some(dir) = checkpoint_dir {
                if every > 0 && self.iteration % every == 0 && self.iteration < self.config.iterations {
                    self.verify_frozen()?;
                    self.save_checkpoint(dir)?;
                }
            }
        }
        self.verify_frozen()?;
        if let Some(dir) = checkpoint_dir {
            self.save_checkpoint(dir)?;
        }
        Ok(())
    }
}

/// Build the UNet-backed distiller for a scene.
pub fn scene_distiller(
    scene: Scene,
    refs: &ReferenceSet,
    teacher: Arc<UNet>,
    sr: Option<Arc<UNet>>,
    config: &DistillConfig,
) -> Result<Distiller<SceneParticle>> {
    let particle = SceneParticle::new(scene, refs, config)?;
    let adapter = UNetAdapter::new(teacher.clone(), config.adapter_rank, config.lr_adapter, config.seed)?;
    Distiller::new(
        config.clone(),
        particle,
        teacher,
        sr.map(|m| m as Arc<dyn ScoreModel>),
        Box::new(adapter),
    )
}

/// Run the full optimization and return the final field. With `out` set, the
/// checkpoint bundle lives in `out`; `resume` continues from it.
pub fn run_optimization(
    scene: Scene,
    refs: &ReferenceSet,
    teacher: Arc<UNet>,
    sr: Option<Arc<UNet>>,
    config: &DistillConfig,
    out: Option<&Path>,
    resume: bool,
    progress: &mut dyn FnMut(&MetricsRow),
) -> Result<(TextureField, Vec<MetricsRow>)> {
    let mut d = scene_distiller(scene, refs, teacher, sr, config)?;
    if resume {
        let dir = out.ok_or_else(|| Error::InvalidArgument("resume needs a checkpoint directory".into()))?;
        d.restore(dir)?;
    }
    d.run(out, progress)?;
    Ok((d.particle.field, d.metrics))
}
