//! Procedural training data for the toy denoisers.

use rand::RngCore;

use super::codec::LatentCodec;
use crate::conditioning::{extract_reference_features, resample_mask};
use crate::error::Result;
use crate::geometry::{build_box_room, sample_viewpoints, BoxSpec, RoomSpec, ViewpointConfig};
use crate::raster::{depth_image, instance_masks, rasterize, Mask};
use crate::rng::Stream;
use crate::tensor::{avg_pool2, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PatternKind {
    /// Every instance one flat colour.
    #[default]
    Flat,
    /// Flat colours, stripes and checkers.
    Mixed,
}

impl PatternKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Flat => "flat",
            Self::Mixed => "mixed",
        }
    }

    pub fn parse(s: &str) -> crate::Result<Self> {
        match s {
            "flat" => Ok(Self::Flat),
            "mixed" => Ok(Self::Mixed),
            other => Err(crate::Error::InvalidArgument(format!("unknown pattern set `{other}`"))),
        }
    }
}

/// A UV-space texture used as procedural ground truth.
#[derive(Clone, Debug, PartialEq)]
pub enum Pattern {
    Flat([f64; 3]),
    Stripes { a: [f64; 3], b: [f64; 3], period: f64, angle: f64 },
    Checker { a: [f64; 3], b: [f64; 3], cell: f64 },
}

/// Reference images show this much UV extent of a pattern.
const REFERENCE_UV_EXTENT: f64 = 0.1;

impl Pattern {
    pub fn color(&self, uv: [f64; 2]) -> [f64; 3] {
        match *self {
            Self::Flat(c) => c,
            Self::Stripes { a, b, period, angle } => {
                let s = uv[0] * angle.cos() + uv[1] * angle.sin();
                if (s / period).rem_euclid(1.0) < 0.5 { a } else { b }
            }
            Self::Checker { a, b, cell } => {
                let k = (uv[0] / cell).floor() as i64 + (uv[1] / cell).floor() as i64;
                if k.rem_euclid(2) == 0 { a } else { b }
            }
        }
    }

    /// Reference image of the pattern, `size x size`.
    pub fn reference_image(&self, size: usize) -> Tensor {
        let mut data = vec![0.0; 3 * size * size];
        for y in 0..size {
            for x in 0..size {
                let uv = [
                    (x as f64 + 0.5) / size as f64 * REFERENCE_UV_EXTENT,
                    (y as f64 + 0.5) / size as f64 * REFERENCE_UV_EXTENT,
                ];
                let c = self.color(uv);
                for k in 0..3 {
                    data[k * size * size + y * size + x] = c[k];
                }
            }
        }
        Tensor::new(&[3, size, size], data).unwrap()
    }

    fn random(kind: PatternKind, rng: &mut Stream) -> Self {
        let color = |rng: &mut Stream| [0, 1, 2].map(|_| rng.uniform(0.0, 1.0));
        let choice = match kind {
            PatternKind::Flat => 0,
            PatternKind::Mixed => rng.index(3),
        };
        match choice {
            0 => Self::Flat(color(rng)),
            1 => Self::Stripes {
                a: color(rng),
                b: color(rng),
                period: rng.uniform(0.01, 0.04),
                angle: rng.uniform(0.0, std::f64::consts::PI),
            },
            _ => Self::Checker {
                a: color(rng),
                b: color(rng),
                cell: rng.uniform(0.005, 0.02),
            },
        }
    }
}

/// One rendered training view with its conditioning, latent-resolution inputs
/// alongside the render-resolution originals.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherSample {
    pub image: Tensor,
    pub latent: Tensor,
    /// Normalized depth at latent resolution.
    pub depth: Tensor,
    pub tokens: Vec<Tensor>,
    pub masks: Vec<Mask>,
    pub render_masks: Vec<Mask>,
    pub patterns: Vec<Pattern>,
}

/// Random box rooms with procedurally textured instances, one view each.
/// Sample `k` is a pure function of `(seed, k)`.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherDataset {
    pub seed: u64,
    pub patterns: PatternKind,
    pub image_size: usize,
}

impl TeacherDataset {
    pub fn new(seed: u64, patterns: PatternKind) -> Self {
        Self {
            seed,
            patterns,
            image_size: 64,
        }
    }

    pub fn sample(&self, index: u64) -> Result<TeacherSample> {
        let mut rng = Stream::new(self.seed, index.wrapping_add(0x6461_7461));
        let size = [rng.uniform(3.0, 5.0) as f32, rng.uniform(2.5, 3.5) as f32, rng.uniform(3.0, 5.0) as f32];
        let mut spec = RoomSpec::single_instance(size, 2048);
        let boxes = 1 + rng.index(2);
        for b in 0..boxes {
            let ext = [rng.uniform(0.6, 1.8), rng.uniform(0.4, 1.4), rng.uniform(0.6, 1.8)];
            let x0 = rng.uniform(0.3, size[0] as f64 - ext[0] - 0.3);
            let z0 = rng.uniform(0.3, size[2] as f64 - ext[2] - 0.3);
            spec.furniture.push(BoxSpec {
                min: [x0 as f32, 0.0, z0 as f32],
                max: [(x0 + ext[0]) as f32, ext[1] as f32, (z0 + ext[2]) as f32],
                instance: b as u32 + 1,
            });
        }
        let scene = build_box_room(&spec)?;
        let n = scene.instance_count;
        let patterns: Vec<Pattern> = (0..n).map(|_| Pattern::random(self.patterns, &mut rng)).collect();
        let res = (self.image_size, self.image_size);
        let cfg = ViewpointConfig {
            image_size: res,
            ..Default::default()
        };
        let view_seed = rng.rng().next_u64();
        let cam = sample_viewpoints(&scene, 1, view_seed, &cfg)?.remove(0);
        let gb = rasterize(&scene.mesh, &cam, res)?;
        let hw = res.0 * res.1;
        let mut img = vec![0.0; 3 * hw];
        for p in 0..hw {
            if gb.is_valid(p) {
                let c = patterns[gb.instance[p] as usize].color(gb.uv[p]);
                for k in 0..3 {
                    img[k * hw + p] = c[k];
                }
            }
        }
        let image = Tensor::new(&[3, res.1, res.0], img)?;
        let latent = LatentCodec.encode(&image)?;
        let depth = avg_pool2(&depth_image(&gb));
        let render_masks = instance_masks(&gb, n)?;
        let masks = render_masks
            .iter()
            .map(|m| resample_mask(m, res.0 / 2, res.1 / 2).mask)
            .collect();
        let tokens = patterns
            .iter()
            .map(|p| extract_reference_features(&p.reference_image(32)))
            .collect::<Result<_>>()?;
        Ok(TeacherSample {
            image,
            latent,
            depth,
            tokens,
            masks,
            render_masks,
            patterns,
        })
    }
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub fn gaussian_blur(img: &Tensor, sigma: f64) -> Tensor {
    if sigma <= 0.0 {
        return img.clone();
    }
    let (c, h, w) = img.chw();
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r).map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= total);
    let mut out = img.clone();
    let mut tmp = vec![0.0; h * w];
    for ch in 0..c {
        let plane = &img.data()[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| {
                        let xx = (x as isize + j as isize - r).clamp(0, w as isize - 1) as usize;
                        kv * plane[y * w + xx]
                    })
                    .sum();
            }
        }
        let dst = &mut out.data_mut()[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                dst[y * w + x] = k
                    .iter()
                    .enumerate()
                    .map(|(j, kv)| {
                        let yy = (y as isize + j as isize - r).clamp(0, h as isize - 1) as usize;
                        kv * tmp[yy * w + x]
                    })
                    .sum();
            }
        }
    }
    out
}

/// A sharp procedural image and its blurred counterpart, with latents.
#[derive(Clone, Debug, PartialEq)]
pub struct SrSample {
    pub sharp: Tensor,
    pub blurred: Tensor,
    pub latent: Tensor,
    pub cond_latent: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SrDataset {
    pub seed: u64,
    pub image_size: usize,
    pub blur_range: (f64, f64),
    pub patterns: PatternKind,
}

impl SrDataset {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            image_size: 64,
            blur_range: (1.0, 2.0),
            // Patterned training images teach the prior to paint stripes onto flat surfaces.
            patterns: PatternKind::Flat,
        }
    }

    /// Sharp image: a random pattern on a random axis-aligned partition.
    pub fn sharp_image(&self, rng: &mut Stream) -> Tensor {
        let s = self.image_size;
        let regions: Vec<Pattern> = (0..2).map(|_| Pattern::random(self.patterns, rng)).collect();
        let split = rng.uniform(0.2, 0.8);
        let vertical = rng.index(2) == 0;
        let scale = rng.uniform(0.3, 1.0);
        let mut data = vec![0.0; 3 * s * s];
        for y in 0..s {
            for x in 0..s {
                let (u, v) = ((x as f64 + 0.5) / s as f64, (y as f64 + 0.5) / s as f64);
                let r = if (if vertical { u } else { v }) < split { 0 } else { 1 };
                let c = regions[r].color([u * scale, v * scale]);
                for k in 0..3 {
                    data[k * s * s + y * s + x] = c[k];
                }
            }
        }
        Tensor::new(&[3, s, s], data).unwrap()
    }

    pub fn sample(&self, index: u64) -> Result<SrSample> {
        let mut rng = Stream::new(self.seed, index.wrapping_add(0x7372_6473));
        let sharp = self.sharp_image(&mut rng);
        let sigma = rng.uniform(self.blur_range.0, self.blur_range.1);
        let blurred = gaussian_blur(&sharp, sigma);
        Ok(SrSample {
            latent: LatentCodec.encode(&sharp)?,
            cond_latent: LatentCodec.encode(&blurred)?,
            sharp,
            blurred,
        })
    }
}
