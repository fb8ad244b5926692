use crate::conditioning::{resample_mask, ReferenceSet};
use crate::error::{Error, Result};
use crate::geometry::{sample_viewpoints, Camera, Scene, ViewpointConfig};
use crate::raster::{depth_image, instance_masks, rasterize, shade, shade_backward, GBuffer, Mask};
use crate::score_models::{Conditioning, LatentCodec, Routing};
use crate::tensor::{avg_pool2, Tensor};
use crate::texture_field::TextureField;

use super::config::{DistillConfig, ReferenceMode};

/// Everything one rendered view feeds into the denoisers.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub view: usize,
    /// Rendered RGB `[3, H, W]`, absent for particles living in latent space.
    pub image: Option<Tensor>,
    pub latent: Tensor,
    pub cond: Conditioning,
    pub gbuffer: Option<GBuffer>,
    /// Instance masks at render resolution.
    pub render_masks: Vec<Mask>,
}

/// The optimized object: parameters `theta` plus a differentiable map from
/// `theta` to a latent for a given view.
pub trait Particle {
    fn view_count(&self) -> usize;
    fn render(&self, view: usize) -> Result<Rendered>;
    /// Pull a latent-space gradient back to `theta`.
    fn backward(&self, rendered: &Rendered, grad_latent: &Tensor) -> Result<Vec<f64>>;
    fn params(&self) -> &[f32];
    fn params_mut(&mut self) -> &mut [f32];
    fn to_bytes(&self) -> Vec<u8>;
    fn load_bytes(&mut self, bytes: &[u8]) -> Result<()>;

    /// L2 distance between each instance's masked mean colour and its target
    /// colour; `None` where the instance is not visible.
    fn color_errors(&self, _rendered: &Rendered) -> Vec<Option<f64>> {
        Vec::new()
    }
}

/// Rasterize, shade, encode and assemble the conditioning for one camera.
/// `tokens` are in instance order, or a single set for the stitched mode.
pub fn render_step_inputs(
    scene: &Scene,
    field: &TextureField,
    camera: &Camera,
    tokens: &[Tensor],
    mode: ReferenceMode,
    routing: Routing,
) -> Result<Rendered> {
    let (w, h) = camera.image_size;
    let gb = rasterize(&scene.mesh, camera, (w, h))?;
    let image = shade(&gb, field);
    let latent = LatentCodec.encode(&image)?;
    let depth = avg_pool2(&depth_image(&gb));
    let render_masks = instance_masks(&gb, scene.instance_count)?;
    let masks = match mode {
        ReferenceMode::PerInstance => {
            if tokens.len() != render_masks.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} reference token sets for {} instances",
                    tokens.len(),
                    render_masks.len()
                )));
            }
            render_masks.iter().map(|m| resample_mask(m, w / 2, h / 2).mask).collect()
        }
        ReferenceMode::Stitched => {
            if tokens.len() != 1 {
                return Err(Error::InvalidArgument("stitched mode takes one token set".into()));
            }
            vec![Mask::full(w / 2, h / 2, 1.0)]
        }
    };
    Ok(Rendered {
        view: 0,
        image: Some(image),
        latent,
        cond: Conditioning {
            depth: Some(depth),
            tokens: tokens.to_vec(),
            masks,
            cond_latent: None,
            routing,
        },
        gbuffer: Some(gb),
        render_masks,
    })
}

/// A texture field seen through a fixed set of cameras of a scene.
#[derive(Clone, Debug)]
pub struct SceneParticle {
    pub scene: Scene,
    pub field: TextureField,
    pub cameras: Vec<Camera>,
    pub tokens: Vec<Tensor>,
    pub reference_colors: Vec<[f64; 3]>,
    pub mode: ReferenceMode,
    pub routing: Routing,
}

impl SceneParticle {
    /// Field initialized from `config.seed`; cameras drawn from the same seed.
    pub fn new(scene: Scene, refs: &ReferenceSet, config: &DistillConfig) -> Result<Self> {
        config.validate()?;
        if refs.len() != scene.instance_count as usize {
            return Err(Error::InvalidArgument(format!(
                "{} references for {} instances",
                refs.len(),
                scene.instance_count
            )));
        }
        let field = TextureField::new(config.field, config.field_hidden, config.seed)?;
        let vp = ViewpointConfig {
            image_size: (config.render_size, config.render_size),
            ..Default::default()
        };
        let cameras = sample_viewpoints(&scene, config.viewpoints, config.seed, &vp)?;
        let tokens = match config.reference_mode {
            ReferenceMode::PerInstance => refs.tokens.clone(),
            ReferenceMode::Stitched => refs.stitched()?.tokens,
        };
        Ok(Self {
            scene,
            field,
            cameras,
            tokens,
            reference_colors: refs.mean_colors(),
            mode: config.reference_mode,
            routing: config.routing,
        })
    }
}

/// Masked mean colour of `image` under `mask`, `None` for an empty mask.
pub fn masked_mean_color(image: &Tensor, mask: &Mask) -> Option<[f64; 3]> {
    let total = mask.sum();
    if total <= 0.0 {
        return None;
    }
    Some([0, 1, 2].map(|c| {
        image.plane(c).iter().zip(&mask.data).map(|(v, m)| v * m).sum::<f64>() / total
    }))
}

impl Particle for SceneParticle {
    fn view_count(&self) -> usize {
        self.cameras.len()
    }

    fn render(&self, view: usize) -> Result<Rendered> {
        let mut r = render_step_inputs(
            &self.scene,
            &self.field,
            &self.cameras[view],
            &self.tokens,
            self.mode,
            self.routing,
        )?;
        r.view = view;
        Ok(r)
    }

    fn backward(&self, rendered: &Rendered, grad_latent: &Tensor) -> Result<Vec<f64>> {
        let gb = rendered
            .gbuffer
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("render has no g-buffer".into()))?;
        let grad_image = LatentCodec.encode_backward(grad_latent);
        Ok(shade_backward(gb, &self.field, &grad_image))
    }

    fn params(&self) -> &[f32] {
        self.field.params.data()
    }

    fn params_mut(&mut self) -> &mut [f32] {
        self.field.params.data_mut()
    }

    fn to_bytes(&self) -> Vec<u8> {
        self.field.to_bytes()
    }

    fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let f = TextureField::from_bytes(bytes)?;
        if f.config != self.field.config || f.hidden != self.field.hidden {
            return Err(Error::InvalidArgument("field checkpoint has a different layout".into()));
        }
        self.field = f;
        Ok(())
    }

    fn color_errors(&self, rendered: &Rendered) -> Vec<Option<f64>> {
        let Some(image) = &rendered.image else {
            return Vec::new();
        };
        rendered
            .render_masks
            .iter()
            .zip(&self.reference_colors)
            .map(|(m, r)| {
                masked_mean_color(image, m)
                    .map(|c| (0..3).map(|k| (c[k] - r[k]).powi(2)).sum::<f64>().sqrt())
            })
            .collect()
    }
}

/// Direct-pixel particle: `theta` is the latent itself, rendering and
/// encoding are the identity and there is a single view.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelParticle {
    pub shape: Vec<usize>,
    pub values: Vec<f32>,
    pub cond: Conditioning,
}

impl PixelParticle {
    pub fn new(init: &Tensor) -> Self {
        Self {
            shape: init.shape().to_vec(),
            values: init.data().iter().map(|&v| v as f32).collect(),
            cond: Conditioning::default(),
        }
    }

    pub fn tensor(&self) -> Tensor {
        Tensor::new(&self.shape, self.values.iter().map(|&v| v as f64).collect()).unwrap()
    }
}

impl Particle for PixelParticle {
    fn view_count(&self) -> usize {
        1
    }

    fn render(&self, view: usize) -> Result<Rendered> {
        Ok(Rendered {
            view,
            image: None,
            latent: self.tensor(),
            cond: self.cond.clone(),
            gbuffer: None,
            render_masks: Vec::new(),
        })
    }

    fn backward(&self, _rendered: &Rendered, grad_latent: &Tensor) -> Result<Vec<f64>> {
        if grad_latent.shape() != self.shape.as_slice() {
            return Err(Error::Shape(format!(
                "latent gradient {:?} for particle {:?}",
                grad_latent.shape(),
                self.shape
            )));
        }
        Ok(grad_latent.data().to_vec())
    }

    fn params(&self) -> &[f32] {
        &self.values
    }

    fn params_mut(&mut self) -> &mut [f32] {
        &mut self.values
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = b"WPIX1".to_vec();
        out.extend((self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend((d as u32).to_le_bytes());
        }
        for v in &self.values {
            out.extend(v.to_le_bytes());
        }
        out
    }

    fn load_bytes(&mut self, bytes: &[u8]) -> Result<()> {
        let mut r = crate::params::ByteReader::new(bytes);
        r.expect_magic("WPIX1")?;
        let nd = r.u32()? as usize;
        let shape = (0..nd).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        if shape != self.shape {
            return Err(Error::Shape(format!("pixel checkpoint {shape:?} for particle {:?}", self.shape)));
        }
        self.values = (0..self.values.len()).map(|_| r.f32()).collect::<Result<_>>()?;
        r.finish()
    }
}
