//! Implicit UV texture: a multi-resolution hash grid whose per-level features
//! are bilinearly blended, concatenated, and decoded to RGB by a small MLP.
//!
//! Parameters (the optimized θ) are all hash tables followed by the decoder
//! weights, packed in one [`ParamSet`].

use std::path::Path;

use rand::Rng;

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};
use crate::geometry::Mesh;
use crate::params::{ByteReader, ParamSet};
use crate::raster::Mask;
use crate::rng::Stream;
use crate::tensor::{gemm, Tensor};

pub const HASH_PRIMES: [u32; 2] = [1, 2_654_435_761];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct HashGridConfig {
    pub levels: usize,
    pub base_resolution: usize,
    pub growth_factor: f64,
    pub table_log2: u32,
    pub features_per_level: usize,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        Self {
            levels: 8,
            base_resolution: 16,
            growth_factor: 1.5,
            table_log2: 16,
            features_per_level: 2,
        }
    }
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels < 1
            || self.base_resolution < 2
            || !(self.growth_factor > 1.0)
            || self.features_per_level < 1
            || self.table_log2 > 24
        {
            return Err(Error::InvalidArgument(format!("invalid hash grid config {self:?}")));
        }
        Ok(())
    }

    /// `floor(N_min * b^l)`
    pub fn level_resolution(&self, level: usize) -> usize {
        (self.base_resolution as f64 * self.growth_factor.powi(level as i32)).floor() as usize
    }

    pub fn table_size(&self) -> usize {
        1 << self.table_log2
    }

    pub fn embedding_dim(&self) -> usize {
        self.levels * self.features_per_level
    }
}

/// Spatial hash of an integer grid corner into a table of `2^table_log2` rows.
pub fn hash_corner(x: u32, y: u32, table_log2: u32) -> usize {
    let h = x.wrapping_mul(HASH_PRIMES[0]) ^ y.wrapping_mul(HASH_PRIMES[1]);
    (h & ((1u32 << table_log2) - 1)) as usize
}

/// Batch of UV embeddings, `rows x dim` row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Embeddings {
    pub dim: usize,
    pub values: Vec<f64>,
    /// UVs that fell outside `[0,1]^2` and were clamped.
    pub clamped: usize,
}

#[derive(Clone, Copy)]
struct Corner {
    row: usize,
    weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TextureField {
    pub config: HashGridConfig,
    pub hidden: usize,
    pub params: ParamSet,
}

struct Forward {
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
    out: Vec<f64>,
}

impl TextureField {
    /// Tables uniform in `[-1e-4, 1e-4]`, decoder Glorot-uniform, zero biases.
    pub fn new(config: HashGridConfig, hidden: usize, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Stream::new(seed, 0x7465_7866);
        let mut params = ParamSet::new();
        let rows = config.table_size();
        let f = config.features_per_level;
        for l in 0..config.levels {
            let vals = (0..rows * f)
                .map(|_| rng.rng().random_range(-1e-4f32..=1e-4))
                .collect();
            params.push(format!("table.{l}"), &[rows, f], vals);
        }
        let dims = [config.embedding_dim(), hidden, hidden, 3];
        for (i, w) in dims.windows(2).enumerate() {
            let limit = (6.0 / (w[0] + w[1]) as f64).sqrt() as f32;
            let vals = (0..w[0] * w[1])
                .map(|_| rng.rng().random_range(-limit..=limit))
                .collect();
            params.push(format!("decoder.w{i}"), &[w[0], w[1]], vals);
            params.push(format!("decoder.b{i}"), &[w[1]], vec![0.0; w[1]]);
        }
        Ok(Self {
            config,
            hidden,
            params,
        })
    }

    pub fn with_defaults(seed: u64) -> Self {
        Self::new(HashGridConfig::default(), 64, seed).expect("default config is valid")
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    fn table_offset(&self, level: usize) -> usize {
        self.params.block(level).offset
    }

    fn decoder(&self, i: usize) -> (Vec<f64>, Vec<f64>) {
        let w = self.params.tensor(self.config.levels + 2 * i).into_data();
        let b = self.params.tensor(self.config.levels + 2 * i + 1).into_data();
        (w, b)
    }

    fn corners(&self, uv: [f64; 2], level: usize) -> [Corner; 4] {
        let res = self.config.level_resolution(level) as f64;
        let x = uv[0] * res;
        let y = uv[1] * res;
        let (x0, y0) = (x.floor(), y.floor());
        let (fx, fy) = (x - x0, y - y0);
        let (xi, yi) = (x0 as u32, y0 as u32);
        let t = self.config.table_log2;
        let base = self.table_offset(level);
        let f = self.config.features_per_level;
        let c = |dx: u32, dy: u32, w: f64| Corner {
            row: base + hash_corner(xi + dx, yi + dy, t) * f,
            weight: w,
        };
        [
            c(0, 0, (1.0 - fx) * (1.0 - fy)),
            c(1, 0, fx * (1.0 - fy)),
            c(0, 1, (1.0 - fx) * fy),
            c(1, 1, fx * fy),
        ]
    }

    fn clamp_uv(uv: [f64; 2]) -> ([f64; 2], bool) {
        let c = [uv[0].clamp(0.0, 1.0), uv[1].clamp(0.0, 1.0)];
        let nan = uv.iter().any(|v| v.is_nan());
        let c = if nan { [0.0, 0.0] } else { c };
        (c, nan || c != uv)
    }

    /// Hash-grid encoding: per level, bilinear blend of the four hashed
    /// corner rows; levels concatenated in order.
    pub fn encode_uv(&self, uvs: &[[f64; 2]]) -> Embeddings {
        let dim = self.config.embedding_dim();
        let f = self.config.features_per_level;
        let data = self.params.data();
        let mut values = vec![0.0; uvs.len() * dim];
        let mut clamped = 0;
        for (p, &uv) in uvs.iter().enumerate() {
            let (uv, was_clamped) = Self::clamp_uv(uv);
            clamped += was_clamped as usize;
            for l in 0..self.config.levels {
                let out = &mut values[p * dim + l * f..p * dim + (l + 1) * f];
                for c in self.corners(uv, l) {
                    for k in 0..f {
                        out[k] += c.weight * data[c.row + k] as f64;
                    }
                }
            }
        }
        Embeddings {
            dim,
            values,
            clamped,
        }
    }

    fn forward(&self, emb: &[f64], rows: usize) -> Forward {
        let h = self.hidden;
        let d = self.config.embedding_dim();
        let (w0, b0) = self.decoder(0);
        let (w1, b1) = self.decoder(1);
        let (w2, b2) = self.decoder(2);
        let dense = |x: &[f64], w: &[f64], b: &[f64], k: usize, n: usize| {
            let mut z = vec![0.0; rows * n];
            for row in z.chunks_mut(n) {
                row.copy_from_slice(b);
            }
            gemm(rows, k, n, 1.0, x, false, w, false, 1.0, &mut z);
            z
        };
        let z1 = dense(emb, &w0, &b0, d, h);
        let a1: Vec<f64> = z1.iter().map(|&z| z * sigmoid(z)).collect();
        let z2 = dense(&a1, &w1, &b1, h, h);
        let a2: Vec<f64> = z2.iter().map(|&z| z * sigmoid(z)).collect();
        let out: Vec<f64> = dense(&a2, &w2, &b2, h, 3).into_iter().map(sigmoid).collect();
        Forward { z1, a1, z2, a2, out }
    }

    /// Decode embeddings to RGB in `(0, 1)`.
    pub fn decode(&self, emb: &Embeddings) -> Result<Vec<[f64; 3]>> {
        if emb.dim != self.config.embedding_dim() {
            return Err(Error::Shape(format!(
                "embedding dim {} but decoder expects {}",
                emb.dim,
                self.config.embedding_dim()
            )));
        }
        let rows = emb.values.len() / emb.dim;
        let fwd = self.forward(&emb.values, rows);
        Ok(fwd.out.chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    pub fn sample(&self, uvs: &[[f64; 2]]) -> Vec<[f64; 3]> {
        self.decode(&self.encode_uv(uvs)).expect("own embedding dim")
    }

    /// Gradient of `sum_p <grad_rgb[p], sample(uvs)[p]>` with respect to every
    /// parameter, dense in parameter order.
    pub fn backward(&self, uvs: &[[f64; 2]], grad_rgb: &[[f64; 3]]) -> Vec<f64> {
        let mut grad = vec![0.0; self.params.len()];
        self.backward_into(uvs, grad_rgb, &mut grad);
        grad
    }

    pub fn backward_into(&self, uvs: &[[f64; 2]], grad_rgb: &[[f64; 3]], grad: &mut [f64]) {
        assert_eq!(uvs.len(), grad_rgb.len());
        let rows = uvs.len();
        if rows == 0 {
            return;
        }
        let h = self.hidden;
        let d = self.config.embedding_dim();
        let emb = self.encode_uv(uvs);
        let fwd = self.forward(&emb.values, rows);
        let (w0, _) = self.decoder(0);
        let (w1, _) = self.decoder(1);
        let (w2, _) = self.decoder(2);

        let dz3: Vec<f64> = fwd
            .out
            .iter()
            .zip(grad_rgb.iter().flatten())
            .map(|(&s, &g)| g * s * (1.0 - s))
            .collect();
        let silu_grad = |z: f64| {
            let s = sigmoid(z);
            s + z * s * (1.0 - s)
        };
        let mut da2 = vec![0.0; rows * h];
        gemm(rows, 3, h, 1.0, &dz3, false, &w2, true, 0.0, &mut da2);
        let dz2: Vec<f64> = da2.iter().zip(&fwd.z2).map(|(g, &z)| g * silu_grad(z)).collect();
        let mut da1 = vec![0.0; rows * h];
        gemm(rows, h, h, 1.0, &dz2, false, &w1, true, 0.0, &mut da1);
        let dz1: Vec<f64> = da1.iter().zip(&fwd.z1).map(|(g, &z)| g * silu_grad(z)).collect();
        let mut demb = vec![0.0; rows * d];
        gemm(rows, h, d, 1.0, &dz1, false, &w0, true, 0.0, &mut demb);

        let layers: [(&[f64], &[f64], usize, usize); 3] = [
            (&emb.values, &dz1, d, h),
            (&fwd.a1, &dz2, h, h),
            (&fwd.a2, &dz3, h, 3),
        ];
        for (i, (x, dz, k, n)) in layers.into_iter().enumerate() {
            let wb = self.params.block(self.config.levels + 2 * i).clone();
            let bb = self.params.block(self.config.levels + 2 * i + 1).clone();
            gemm(
                k,
                rows,
                n,
                1.0,
                x,
                true,
                dz,
                false,
                1.0,
                &mut grad[wb.offset..wb.offset + k * n],
            );
            let gb = &mut grad[bb.offset..bb.offset + n];
            for row in dz.chunks(n) {
                gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
            }
        }

        let f = self.config.features_per_level;
        for (p, &uv) in uvs.iter().enumerate() {
            let (uv, _) = Self::clamp_uv(uv);
            for l in 0..self.config.levels {
                let g = &demb[p * d + l * f..p * d + (l + 1) * f];
                for c in self.corners(uv, l) {
                    for k in 0..f {
                        grad[c.row + k] += c.weight * g[k];
                    }
                }
            }
        }
    }

    /// Evaluate the field on a regular `w x h` UV grid in `tile x tile` chunks.
    /// Texel `(i, j)` samples `((i + 0.5) / w, (j + 0.5) / h)`; texels outside
    /// `validity` are 0. Output is `[3, h, w]`.
    pub fn bake(&self, resolution: (usize, usize), tile: usize, validity: Option<&Mask>) -> Tensor {
        let (w, h) = resolution;
        let tile = tile.max(1);
        let mut img = Tensor::zeros(&[3, h, w]);
        let hw = w * h;
        let mut idx = Vec::with_capacity(tile * tile);
        let mut uvs = Vec::with_capacity(tile * tile);
        for ty in (0..h).step_by(tile) {
            for tx in (0..w).step_by(tile) {
                idx.clear();
                uvs.clear();
                for j in ty..(ty + tile).min(h) {
                    for i in tx..(tx + tile).min(w) {
                        let p = j * w + i;
                        if validity.is_some_and(|m| m.data[p] <= 0.0) {
                            continue;
                        }
                        idx.push(p);
                        uvs.push([(i as f64 + 0.5) / w as f64, (j as f64 + 0.5) / h as f64]);
                    }
                }
                let rgb = self.sample(&uvs);
                let d = img.data_mut();
                for (&p, c) in idx.iter().zip(&rgb) {
                    d[p] = c[0];
                    d[hw + p] = c[1];
                    d[2 * hw + p] = c[2];
                }
            }
        }
        img
    }

    /// `WTFX1` checkpoint: magic, config block, then every parameter as
    /// little-endian `f32` in declaration order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let c = &self.config;
        let mut out = b"WTFX1".to_vec();
        out.extend((c.levels as u32).to_le_bytes());
        out.extend((c.base_resolution as u32).to_le_bytes());
        out.extend(c.growth_factor.to_le_bytes());
        out.extend(c.table_log2.to_le_bytes());
        out.extend((c.features_per_level as u32).to_le_bytes());
        out.extend((self.hidden as u32).to_le_bytes());
        for v in self.params.data() {
            out.extend(v.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        r.expect_magic("WTFX1")?;
        let config = HashGridConfig {
            levels: r.u32()? as usize,
            base_resolution: r.u32()? as usize,
            growth_factor: r.f64()?,
            table_log2: r.u32()?,
            features_per_level: r.u32()? as usize,
        };
        let hidden = r.u32()? as usize;
        let mut field = Self::new(config, hidden, 0)?;
        let values = (0..field.params.len())
            .map(|_| r.f32())
            .collect::<Result<Vec<_>>>()?;
        r.finish()?;
        field.params.set_data(values)?;
        Ok(field)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
    }
}

/// Texels of a `w x h` atlas whose centres fall inside some UV triangle.
pub fn uv_coverage_mask(mesh: &Mesh, resolution: (usize, usize)) -> Mask {
    let (w, h) = resolution;
    let mut mask = Mask::full(w, h, 0.0);
    for f in 0..mesh.triangles.len() {
        let uv = mesh.triangle_uvs(f).map(|p| [p[0] * w as f64, p[1] * h as f64]);
        let area = (uv[1][0] - uv[0][0]) * (uv[2][1] - uv[0][1])
            - (uv[2][0] - uv[0][0]) * (uv[1][1] - uv[0][1]);
        if area == 0.0 {
            continue;
        }
        let x0 = uv.iter().map(|p| p[0]).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let x1 = (uv.iter().map(|p| p[0]).fold(0.0, f64::max).ceil() as usize).min(w);
        let y0 = uv.iter().map(|p| p[1]).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let y1 = (uv.iter().map(|p| p[1]).fold(0.0, f64::max).ceil() as usize).min(h);
        for y in y0..y1 {
            for x in x0..x1 {
                let p = [x as f64 + 0.5, y as f64 + 0.5];
                let inside = (0..3).all(|e| {
                    let a = uv[e];
                    let b = uv[(e + 1) % 3];
                    area.signum() * ((b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]))
                        >= 0.0
                });
                if inside {
                    mask.data[y * w + x] = 1.0;
                }
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_field(seed: u64) -> TextureField {
        let cfg = HashGridConfig {
            levels: 2,
            base_resolution: 4,
            growth_factor: 2.0,
            table_log2: 6,
            features_per_level: 2,
        };
        let mut f = TextureField::new(cfg, 8, seed).unwrap();
        // spread the table values so blending is visible
        let mut rng = Stream::new(seed, 1);
        for v in f.params.data_mut() {
            *v = rng.uniform(-1.0, 1.0) as f32;
        }
        f
    }

    #[test]
    fn grid_corner_reads_one_hashed_row() {
        let f = small_field(1);
        for l in 0..2 {
            let res = f.config.level_resolution(l);
            let (x, y) = (3u32, 2u32);
            let uv = [x as f64 / res as f64, y as f64 / res as f64];
            let e = f.encode_uv(&[uv]);
            let table = f.params.slice(l);
            let row = hash_corner(x, y, 6) * 2;
            let slice = &e.values[l * 2..l * 2 + 2];
            assert_eq!(slice, &[table[row] as f64, table[row + 1] as f64]);
        }
    }

    #[test]
    fn cell_center_is_mean_of_corners() {
        let f = small_field(2);
        let res = f.config.level_resolution(0) as f64;
        let uv = [1.5 / res, 2.5 / res];
        let e = f.encode_uv(&[uv]);
        let table = f.params.slice(0);
        for k in 0..2 {
            let mean: f64 = [(1, 2), (2, 2), (1, 3), (2, 3)]
                .iter()
                .map(|&(x, y)| table[hash_corner(x, y, 6) * 2 + k] as f64)
                .sum::<f64>()
                / 4.0;
            assert!((e.values[k] - mean).abs() < 1e-12);
        }
    }

    #[test]
    fn out_of_range_uvs_are_clamped_and_counted() {
        let f = small_field(3);
        let e = f.encode_uv(&[[1.2, 0.5], [0.5, 0.5], [-0.1, 2.0]]);
        assert_eq!(e.clamped, 2);
        assert_eq!(
            f.encode_uv(&[[1.0, 0.5]]).values,
            e.values[..f.config.embedding_dim()].to_vec()
        );
    }

    #[test]
    fn zero_decoder_outputs_half_gray() {
        let mut f = small_field(4);
        for i in f.config.levels..f.params.blocks().len() {
            f.params.slice_mut(i).fill(0.0);
        }
        for c in f.sample(&[[0.1, 0.9], [0.7, 0.3]]) {
            assert_eq!(c, [0.5; 3]);
        }
    }

    #[test]
    fn decode_rejects_wrong_dim() {
        let f = small_field(5);
        let e = Embeddings {
            dim: 3,
            values: vec![0.0; 3],
            clamped: 0,
        };
        assert!(matches!(f.decode(&e), Err(Error::Shape(_))));
    }

    #[test]
    fn checkpoint_round_trips_bit_exact() {
        let f = small_field(6);
        let back = TextureField::from_bytes(&f.to_bytes()).unwrap();
        assert_eq!(back, f);
        let mut bad = f.to_bytes();
        bad[0] = b'X';
        assert!(matches!(TextureField::from_bytes(&bad), Err(Error::Magic { .. })));
    }

    #[test]
    fn bake_is_tile_independent_and_masked() {
        let f = small_field(7);
        let a = f.bake((64, 64), 64, None);
        let b = f.bake((64, 64), 8, None);
        assert!(a.max_abs_diff(&b) < 1e-6);
        let mut m = Mask::full(64, 64, 1.0);
        m.data[5] = 0.0;
        let c = f.bake((64, 64), 16, Some(&m));
        assert_eq!(c.data()[5], 0.0);
        assert_eq!(c.data()[6], a.data()[6]);
    }
}
