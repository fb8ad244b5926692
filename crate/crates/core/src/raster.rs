//! Software z-buffer rasterization into per-pixel UV / depth / instance /
//! face buffers, texture shading with its adjoint, instance masks and the
//! normalized depth image.
//!
//! Geometry and cameras are constants: differentiability lives entirely in
//! the texture lookup, so the rasterizer itself never carries gradients.

use crate::error::{Error, Result};
use crate::geometry::{Camera, Mesh};
use crate::params::ByteReader;
use crate::tensor::Tensor;
use crate::texture_field::TextureField;

pub const INVALID: u32 = u32::MAX;

/// Per-pixel geometry buffers. All channels share one validity pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct GBuffer {
    pub width: usize,
    pub height: usize,
    pub uv: Vec<[f64; 2]>,
    pub depth: Vec<f64>,
    pub instance: Vec<u32>,
    pub face: Vec<u32>,
}

impl GBuffer {
    pub fn empty(width: usize, height: usize) -> Self {
        let n = width * height;
        Self {
            width,
            height,
            uv: vec![[f64::NAN; 2]; n],
            depth: vec![f64::NAN; n],
            instance: vec![INVALID; n],
            face: vec![INVALID; n],
        }
    }

    pub fn is_valid(&self, p: usize) -> bool {
        self.face[p] != INVALID
    }

    pub fn valid_count(&self) -> usize {
        self.face.iter().filter(|&&f| f != INVALID).count()
    }

    pub fn coverage(&self) -> f64 {
        self.valid_count() as f64 / (self.width * self.height) as f64
    }

    /// Validity as a `{0, 1}` mask.
    pub fn validity(&self) -> Mask {
        Mask {
            width: self.width,
            height: self.height,
            data: self.face.iter().map(|&f| (f != INVALID) as u8 as f64).collect(),
        }
    }

    /// Serialize as `WGBF1`, width, height, N, then row-major planes
    /// `u`, `v`, `depth` (f64, NaN when invalid) and `instance`, `face`
    /// (i32, -1 when invalid).
    pub fn to_blob(&self, instance_count: u32) -> Vec<u8> {
        let mut out = b"WGBF1".to_vec();
        for v in [self.width as u32, self.height as u32, instance_count] {
            out.extend(v.to_le_bytes());
        }
        for uv in &self.uv {
            out.extend(uv[0].to_le_bytes());
        }
        for uv in &self.uv {
            out.extend(uv[1].to_le_bytes());
        }
        for d in &self.depth {
            out.extend(d.to_le_bytes());
        }
        for plane in [&self.instance, &self.face] {
            for &v in plane.iter() {
                let s: i32 = if v == INVALID { -1 } else { v as i32 };
                out.extend(s.to_le_bytes());
            }
        }
        out
    }

    pub fn from_blob(bytes: &[u8]) -> Result<(Self, u32)> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic("WGBF1")?;
        let width = r.u32()? as usize;
        let height = r.u32()? as usize;
        let n = r.u32()?;
        let count = width * height;
        let mut gb = Self::empty(width, height);
        for i in 0..count {
            gb.uv[i][0] = r.f64()?;
        }
        for i in 0..count {
            gb.uv[i][1] = r.f64()?;
        }
        for i in 0..count {
            gb.depth[i] = r.f64()?;
        }
        for plane in [&mut gb.instance, &mut gb.face] {
            for v in plane.iter_mut() {
                let s = r.i32()?;
                *v = if s < 0 { INVALID } else { s as u32 };
            }
        }
        r.finish()?;
        Ok((gb, n))
    }
}

/// A per-pixel weight map (binary at render resolution, fractional after resampling).
#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl Mask {
    pub fn full(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

#[derive(Clone, Copy)]
struct ClipVertex {
    cam: [f64; 3],
    uv: [f64; 2],
}

fn lerp_vertex(a: &ClipVertex, b: &ClipVertex, t: f64) -> ClipVertex {
    ClipVertex {
        cam: [0, 1, 2].map(|i| a.cam[i] + t * (b.cam[i] - a.cam[i])),
        uv: [0, 1].map(|i| a.uv[i] + t * (b.uv[i] - a.uv[i])),
    }
}

/// Clip a polygon against the plane `z = near`, keeping `z >= near`.
fn clip_near(poly: &[ClipVertex], near: f64) -> Vec<ClipVertex> {
    let mut out = Vec::with_capacity(poly.len() + 1);
    for i in 0..poly.len() {
        let a = &poly[i];
        let b = &poly[(i + 1) % poly.len()];
        let a_in = a.cam[2] >= near;
        let b_in = b.cam[2] >= near;
        if a_in {
            out.push(*a);
        }
        if a_in != b_in {
            let t = (near - a.cam[2]) / (b.cam[2] - a.cam[2]);
            out.push(lerp_vertex(a, b, t));
        }
    }
    out
}

/// Rasterize `mesh` from `camera` at `resolution` with one sample at each
/// pixel centre, perspective-correct UVs, nearest-depth wins and ties going
/// to the lowest face id. Back faces are not culled.
pub fn rasterize(mesh: &Mesh, camera: &Camera, resolution: (usize, usize)) -> Result<GBuffer> {
    let (w, h) = resolution;
    if w == 0 || h == 0 {
        return Err(Error::InvalidArgument("zero-area image".into()));
    }
    camera.validate()?;
    let mut gb = GBuffer::empty(w, h);
    let tan = (camera.vertical_fov * 0.5).tan();
    let aspect = w as f64 / h as f64;
    let (near, far) = (camera.near, camera.far);

    for f in 0..mesh.triangles.len() {
        let pos = mesh.triangle_positions(f);
        let uvs = mesh.triangle_uvs(f);
        let poly: Vec<ClipVertex> = (0..3)
            .map(|i| ClipVertex {
                cam: camera.to_camera(pos[i]),
                uv: uvs[i],
            })
            .collect();
        let clipped = clip_near(&poly, near);
        if clipped.len() < 3 {
            continue;
        }
        for k in 1..clipped.len() - 1 {
            let tri = [clipped[0], clipped[k], clipped[k + 1]];
            let screen = tri.map(|v| {
                let x_ndc = v.cam[0] / v.cam[2] / (tan * aspect);
                let y_ndc = v.cam[1] / v.cam[2] / tan;
                [(x_ndc + 1.0) * 0.5 * w as f64, (1.0 - y_ndc) * 0.5 * h as f64]
            });
            let area = edge(screen[0], screen[1], screen[2]);
            if area == 0.0 || !area.is_finite() {
                continue;
            }
            let min_x = screen.iter().map(|s| s[0]).fold(f64::INFINITY, f64::min);
            let max_x = screen.iter().map(|s| s[0]).fold(f64::NEG_INFINITY, f64::max);
            let min_y = screen.iter().map(|s| s[1]).fold(f64::INFINITY, f64::min);
            let max_y = screen.iter().map(|s| s[1]).fold(f64::NEG_INFINITY, f64::max);
            let x0 = (min_x - 0.5).ceil().max(0.0) as usize;
            let y0 = (min_y - 0.5).ceil().max(0.0) as usize;
            let x1 = ((max_x - 0.5).floor().min(w as f64 - 1.0)).max(-1.0);
            let y1 = ((max_y - 0.5).floor().min(h as f64 - 1.0)).max(-1.0);
            if x1 < 0.0 || y1 < 0.0 {
                continue;
            }
            let (x1, y1) = (x1 as usize, y1 as usize);
            for py in y0..=y1 {
                for px in x0..=x1 {
                    let p = [px as f64 + 0.5, py as f64 + 0.5];
                    let b0 = edge(screen[1], screen[2], p) / area;
                    let b1 = edge(screen[2], screen[0], p) / area;
                    let b2 = edge(screen[0], screen[1], p) / area;
                    if b0 < 0.0 || b1 < 0.0 || b2 < 0.0 {
                        continue;
                    }
                    let wts = [b0 / tri[0].cam[2], b1 / tri[1].cam[2], b2 / tri[2].cam[2]];
                    let inv_z = wts[0] + wts[1] + wts[2];
                    let z = 1.0 / inv_z;
                    if !(z > near && z < far) {
                        continue;
                    }
                    let idx = py * w + px;
                    let cur = gb.depth[idx];
                    let wins = gb.face[idx] == INVALID
                        || z < cur
                        || (z == cur && (f as u32) < gb.face[idx]);
                    if !wins {
                        continue;
                    }
                    let uv = [0, 1].map(|c| {
                        let v = z * (wts[0] * tri[0].uv[c] + wts[1] * tri[1].uv[c] + wts[2] * tri[2].uv[c]);
                        v.clamp(0.0, 1.0)
                    });
                    gb.depth[idx] = z;
                    gb.uv[idx] = uv;
                    gb.face[idx] = f as u32;
                    gb.instance[idx] = mesh.face_instance[f];
                }
            }
        }
    }
    Ok(gb)
}

fn edge(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Pixel indices and UVs of the valid pixels, in row-major order.
pub fn valid_uvs(gb: &GBuffer) -> (Vec<usize>, Vec<[f64; 2]>) {
    let idx: Vec<usize> = (0..gb.face.len()).filter(|&p| gb.is_valid(p)).collect();
    let uvs = idx.iter().map(|&p| gb.uv[p]).collect();
    (idx, uvs)
}

/// Texture the buffer: each valid pixel samples the field at its UV;
/// background stays 0. Output is `[3, H, W]`.
pub fn shade(gb: &GBuffer, field: &TextureField) -> Tensor {
    let (idx, uvs) = valid_uvs(gb);
    let rgb = field.sample(&uvs);
    let hw = gb.width * gb.height;
    let mut img = Tensor::zeros(&[3, gb.height, gb.width]);
    let d = img.data_mut();
    for (k, &p) in idx.iter().enumerate() {
        for c in 0..3 {
            d[c * hw + p] = rgb[k][c];
        }
    }
    img
}

/// Adjoint of [`shade`]: pulls an image-space gradient back to the field
/// parameters (UVs held constant).
pub fn shade_backward(gb: &GBuffer, field: &TextureField, grad_image: &Tensor) -> Vec<f64> {
    let (idx, uvs) = valid_uvs(gb);
    let hw = gb.width * gb.height;
    let g = grad_image.data();
    let grad_rgb: Vec<[f64; 3]> = idx
        .iter()
        .map(|&p| [g[p], g[hw + p], g[2 * hw + p]])
        .collect();
    field.backward(&uvs, &grad_rgb)
}

/// One indicator mask per instance; together they partition the valid pixels.
pub fn instance_masks(gb: &GBuffer, n: u32) -> Result<Vec<Mask>> {
    if let Some(&max) = gb.instance.iter().filter(|&&i| i != INVALID).max() {
        if max >= n {
            return Err(Error::InvalidArgument(format!(
                "instance id {max} present but only {n} instances requested"
            )));
        }
    }
    Ok((0..n)
        .map(|i| Mask {
            width: gb.width,
            height: gb.height,
            data: gb.instance.iter().map(|&v| (v == i) as u8 as f64).collect(),
        })
        .collect())
}

/// Per-frame min-max normalized depth as `[1, H, W]`; background is 1 and a
/// constant-depth frame maps to 0.
pub fn depth_image(gb: &GBuffer) -> Tensor {
    let valid = gb.depth.iter().zip(&gb.face).filter(|(_, &f)| f != INVALID);
    let (lo, hi) = valid.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), (&d, _)| {
        (lo.min(d), hi.max(d))
    });
    let span = hi - lo;
    let data = gb
        .depth
        .iter()
        .zip(&gb.face)
        .map(|(&d, &f)| {
            if f == INVALID {
                1.0
            } else if span > 0.0 {
                (d - lo) / span
            } else {
                0.0
            }
        })
        .collect();
    Tensor::new(&[1, gb.height, gb.width], data).unwrap()
}
