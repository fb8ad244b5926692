use crate::error::{Error, Result};
use crate::tensor::{avg_pool2, upsample2, Tensor};

pub const LATENT_CHANNELS: usize = 4;

/// Orthonormal columns lifting 3 colour channels into 4 latent channels.
const LIFT: [[f64; 3]; 4] = [
    [0.5, 0.5, 0.5],
    [0.5, -0.5, 0.5],
    [0.5, 0.5, -0.5],
    [0.5, -0.5, -0.5],
];

/// Fixed linear image <-> latent map. `encode` maps `[0,1]` RGB to `[-1,1]`,
/// box-averages 2x2 and lifts to 4 channels; `decode` is its pseudo-inverse,
/// so `decode(encode(x))` is the 2x2 box projection of `x`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LatentCodec;

impl LatentCodec {
    fn check_image(img: &Tensor) -> Result<()> {
        let (c, h, w) = img.chw();
        if c != 3 || h % 2 != 0 || w % 2 != 0 || h == 0 {
            return Err(Error::Shape(format!("codec needs [3, even H, even W], got {:?}", img.shape())));
        }
        Ok(())
    }

    fn lift(x: &Tensor) -> Tensor {
        let (_, h, w) = x.chw();
        let hw = h * w;
        let mut out = vec![0.0; LATENT_CHANNELS * hw];
        for (k, row) in LIFT.iter().enumerate() {
            for (c, &q) in row.iter().enumerate() {
                let src = &x.data()[c * hw..(c + 1) * hw];
                out[k * hw..(k + 1) * hw].iter_mut().zip(src).for_each(|(o, s)| *o += q * s);
            }
        }
        Tensor::new(&[LATENT_CHANNELS, h, w], out).unwrap()
    }

    fn lower(z: &Tensor) -> Tensor {
        let (_, h, w) = z.chw();
        let hw = h * w;
        let mut out = vec![0.0; 3 * hw];
        for (k, row) in LIFT.iter().enumerate() {
            let src = &z.data()[k * hw..(k + 1) * hw];
            for (c, &q) in row.iter().enumerate() {
                out[c * hw..(c + 1) * hw].iter_mut().zip(src).for_each(|(o, s)| *o += q * s);
            }
        }
        Tensor::new(&[3, h, w], out).unwrap()
    }

    pub fn encode(&self, img: &Tensor) -> Result<Tensor> {
        Self::check_image(img)?;
        Ok(Self::lift(&avg_pool2(&img.map(|v| 2.0 * v - 1.0))))
    }

    pub fn decode(&self, z: &Tensor) -> Result<Tensor> {
        if z.shape().len() != 3 || z.shape()[0] != LATENT_CHANNELS {
            return Err(Error::Shape(format!("latent must be [4, h, w], got {:?}", z.shape())));
        }
        Ok(upsample2(&Self::lower(z)).map(|v| 0.5 * (v + 1.0)))
    }

    /// Adjoint of `encode`'s linear part: image gradient from a latent gradient.
    pub fn encode_backward(&self, grad_latent: &Tensor) -> Tensor {
        upsample2(&Self::lower(grad_latent)).scale(0.5)
    }
}
