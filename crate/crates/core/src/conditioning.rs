//! Reference-image tokens and instance-masked cross-attention.
//!
//! Each instance `i` owns a token sequence `f_i` (K x d_f). A feature grid
//! `Z` (S x d_z) attends to every instance separately and the results are
//! combined through per-position instance masks:
//!
//! `Z' = (1/N) sum_i m_i * softmax(Q K_i^T / sqrt(d_k)) V_i`
//!
//! with `Q = Z W_q`, `K_i = f_i W_k`, `V_i = f_i W_v`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::image_io::load_rgb;
use crate::params::ByteReader;
use crate::raster::Mask;
use crate::rng::Stream;
use crate::tensor::Tensor;

pub const REF_GRID: usize = 32;
pub const REF_PATCH: usize = 8;
pub const TOKEN_COUNT: usize = (REF_GRID / REF_PATCH) * (REF_GRID / REF_PATCH);
pub const TOKEN_DIM: usize = 32;
/// Raw statistics per patch: 3 channel means, mean |dx|, mean |dy|, luminance std.
pub const PATCH_STATS: usize = 6;
const PROJECTION_SEED: u64 = 0x5245_4650;

pub fn luminance(rgb: [f64; 3]) -> f64 {
    0.2126 * rgb[0] + 0.7152 * rgb[1] + 0.0722 * rgb[2]
}

/// Area-weighted 1D resampling matrix, `n_out x n_in`, rows sum to 1.
fn area_weights(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let s = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|j| {
            let (a, b) = (j as f64 * s, (j + 1) as f64 * s);
            let mut row = Vec::new();
            let mut i = a.floor() as usize;
            while (i as f64) < b && i < n_in {
                let overlap = (b.min(i as f64 + 1.0) - a.max(i as f64)).max(0.0);
                if overlap > 0.0 {
                    row.push((i, overlap / s));
                }
                i += 1;
            }
            row
        })
        .collect()
}

/// Box-filter resample of one `w x h` plane to `nw x nh`.
pub fn area_resample(plane: &[f64], (w, h): (usize, usize), (nw, nh): (usize, usize)) -> Vec<f64> {
    let wx = area_weights(w, nw);
    let wy = area_weights(h, nh);
    let mut tmp = vec![0.0; h * nw];
    for y in 0..h {
        for (x, row) in wx.iter().enumerate() {
            tmp[y * nw + x] = row.iter().map(|&(i, c)| c * plane[y * w + i]).sum();
        }
    }
    let mut out = vec![0.0; nh * nw];
    for (y, row) in wy.iter().enumerate() {
        for x in 0..nw {
            out[y * nw + x] = row.iter().map(|&(i, c)| c * tmp[i * nw + x]).sum();
        }
    }
    out
}

fn projection() -> Vec<f64> {
    let mut rng = Stream::new(PROJECTION_SEED, 0);
    let scale = 1.0 / (PATCH_STATS as f64).sqrt();
    rng.normals(PATCH_STATS * TOKEN_DIM)
        .into_iter()
        .map(|v| v * scale)
        .collect()
}

/// Per-patch statistics before projection, `TOKEN_COUNT x PATCH_STATS`.
pub fn patch_statistics(image: &Tensor) -> Result<Vec<[f64; PATCH_STATS]>> {
    let (c, h, w) = image.chw();
    if c != 3 {
        return Err(Error::Shape(format!("reference image has {c} channels, expected 3")));
    }
    if h == 0 || w == 0 {
        return Err(Error::EmptyImage);
    }
    let g = REF_GRID;
    let planes: Vec<Vec<f64>> = (0..3)
        .map(|k| area_resample(image.plane(k), (w, h), (g, g)))
        .collect();
    let lum: Vec<f64> = (0..g * g)
        .map(|p| luminance([planes[0][p], planes[1][p], planes[2][p]]))
        .collect();
    let per_side = g / REF_PATCH;
    let n = (REF_PATCH * REF_PATCH) as f64;
    let mut out = Vec::with_capacity(TOKEN_COUNT);
    for py in 0..per_side {
        for px in 0..per_side {
            let mut s = [0.0; PATCH_STATS];
            let (mut dx, mut dy, mut lsum, mut lsq) = (0.0, 0.0, 0.0, 0.0);
            for y in py * REF_PATCH..(py + 1) * REF_PATCH {
                for x in px * REF_PATCH..(px + 1) * REF_PATCH {
                    let p = y * g + x;
                    for k in 0..3 {
                        s[k] += planes[k][p] / n;
                    }
                    lsum += lum[p];
                    lsq += lum[p] * lum[p];
                    if x + 1 < (px + 1) * REF_PATCH {
                        dx += (lum[p + 1] - lum[p]).abs();
                    }
                    if y + 1 < (py + 1) * REF_PATCH {
                        dy += (lum[p + g] - lum[p]).abs();
                    }
                }
            }
            let diffs = (REF_PATCH * (REF_PATCH - 1)) as f64;
            let mean = lsum / n;
            s[3] = dx / diffs;
            s[4] = dy / diffs;
            s[5] = (lsq / n - mean * mean).max(0.0).sqrt();
            out.push(s);
        }
    }
    Ok(out)
}

/// Project patch statistics to tokens with the fixed seeded projection.
pub fn project_statistics(stats: &[[f64; PATCH_STATS]]) -> Tensor {
    let proj = projection();
    let mut data = vec![0.0; stats.len() * TOKEN_DIM];
    for (k, s) in stats.iter().enumerate() {
        for j in 0..TOKEN_DIM {
            data[k * TOKEN_DIM + j] = (0..PATCH_STATS).map(|i| s[i] * proj[i * TOKEN_DIM + j]).sum();
        }
    }
    Tensor::new(&[stats.len(), TOKEN_DIM], data).unwrap()
}

/// Frozen reference encoder: `TOKEN_COUNT x TOKEN_DIM` tokens.
pub fn extract_reference_features(image: &Tensor) -> Result<Tensor> {
    Ok(project_statistics(&patch_statistics(image)?))
}

/// Reference images and their tokens, one per instance in instance order.
#[derive(Clone, Debug, PartialEq)]
pub struct ReferenceSet {
    pub images: Vec<Tensor>,
    pub tokens: Vec<Tensor>,
}

impl ReferenceSet {
    pub fn from_images(images: Vec<Tensor>) -> Result<Self> {
        let tokens = images
            .iter()
            .map(extract_reference_features)
            .collect::<Result<_>>()?;
        Ok(Self { images, tokens })
    }

    pub fn load(paths: &[&Path]) -> Result<Self> {
        Self::from_images(paths.iter().map(|p| load_rgb(p)).collect::<Result<_>>()?)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Mean colour of each reference image.
    pub fn mean_colors(&self) -> Vec<[f64; 3]> {
        self.images
            .iter()
            .map(|img| [0, 1, 2].map(|c| img.plane(c).iter().sum::<f64>() / img.plane(c).len() as f64))
            .collect()
    }

    /// All references side by side in one image (each resized to the tallest
    /// height), encoded as a single token sequence.
    pub fn stitched(&self) -> Result<Self> {
        let h = self.images.iter().map(|i| i.chw().1).max().ok_or(Error::EmptyImage)?;
        let parts: Vec<(usize, Vec<Vec<f64>>)> = self
            .images
            .iter()
            .map(|img| {
                let (_, ih, iw) = img.chw();
                let nw = (iw * h).div_ceil(ih);
                let planes = (0..3).map(|c| area_resample(img.plane(c), (iw, ih), (nw, h))).collect();
                (nw, planes)
            })
            .collect();
        let w: usize = parts.iter().map(|p| p.0).sum();
        let mut data = vec![0.0; 3 * h * w];
        let mut x0 = 0;
        for (pw, planes) in &parts {
            for (c, plane) in planes.iter().enumerate() {
                for y in 0..h {
                    let dst = c * h * w + y * w + x0;
                    data[dst..dst + pw].copy_from_slice(&plane[y * pw..(y + 1) * pw]);
                }
            }
            x0 += pw;
        }
        Self::from_images(vec![Tensor::new(&[3, h, w], data)?])
    }

    /// Token cache: a text header line then little-endian `f64` values.
    pub fn tokens_to_bytes(&self) -> Vec<u8> {
        let mut out = format!("WEAVE-TOKENS v1 {} {} {}\n", self.len(), TOKEN_COUNT, TOKEN_DIM).into_bytes();
        for t in &self.tokens {
            for v in t.data() {
                out.extend(v.to_le_bytes());
            }
        }
        out
    }

    pub fn tokens_from_bytes(bytes: &[u8]) -> Result<Vec<Tensor>> {
        let nl = bytes.iter().position(|&b| b == b'\n').ok_or(Error::Parse {
            line: 1,
            message: "missing token cache header".into(),
        })?;
        let header = String::from_utf8_lossy(&bytes[..nl]);
        let f: Vec<&str> = header.split_whitespace().collect();
        if f.len() != 5 || f[0] != "WEAVE-TOKENS" {
            return Err(Error::Parse {
                line: 1,
                message: format!("bad token cache header `{header}`"),
            });
        }
        if f[1] != "v1" {
            return Err(Error::Version {
                expected: "v1".into(),
                found: f[1].into(),
            });
        }
        let dims: Vec<usize> = f[2..]
            .iter()
            .map(|s| {
                s.parse().map_err(|_| Error::Parse {
                    line: 1,
                    message: format!("bad count `{s}`"),
                })
            })
            .collect::<Result<_>>()?;
        let mut r = ByteReader::new(&bytes[nl + 1..]);
        let mut tokens = Vec::with_capacity(dims[0]);
        for _ in 0..dims[0] {
            let data = (0..dims[1] * dims[2]).map(|_| r.f64()).collect::<Result<_>>()?;
            tokens.push(Tensor::new(&[dims[1], dims[2]], data)?);
        }
        r.finish()?;
        Ok(tokens)
    }
}

/// Projection matrices of one cross-attention block.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionWeights {
    /// `d_z x d_k`
    pub w_q: Tensor,
    /// `d_f x d_k`
    pub w_k: Tensor,
    /// `d_f x d_v`
    pub w_v: Tensor,
}

fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for l in 0..k {
            let x = a[i * k + l];
            for j in 0..n {
                out[i * n + j] += x * b[l * n + j];
            }
        }
    }
    out
}

/// Direct evaluation of the masked cross-attention. With `mask_normalize`
/// the sum is divided by `sum_i m_i` per position instead of `N`.
pub fn masked_cross_attention(
    z: &Tensor,
    tokens: &[Tensor],
    masks: &[Vec<f64>],
    weights: &AttentionWeights,
    mask_normalize: bool,
) -> Result<Tensor> {
    let [s, dz] = z.shape() else {
        return Err(Error::Shape(format!("Z must be S x d_z, got {:?}", z.shape())));
    };
    let (s, dz) = (*s, *dz);
    let (wq, wk, wv) = (weights.w_q.shape(), weights.w_k.shape(), weights.w_v.shape());
    if wq.len() != 2 || wq[0] != dz || wk.len() != 2 || wv.len() != 2 || wk[1] != wq[1] || wv[0] != wk[0] {
        return Err(Error::Shape(format!(
            "attention weights {wq:?} {wk:?} {wv:?} inconsistent with d_z = {dz}"
        )));
    }
    if tokens.len() != masks.len() {
        return Err(Error::Shape(format!("{} token sets for {} masks", tokens.len(), masks.len())));
    }
    let (dk, df, dv) = (wq[1], wk[0], wv[1]);
    let q = matmul(z.data(), weights.w_q.data(), s, dz, dk);
    let scale = 1.0 / (dk as f64).sqrt();
    let n = tokens.len();
    let mut out = vec![0.0; s * dv];
    let mut mask_sum = vec![0.0; s];
    for (f, m) in tokens.iter().zip(masks) {
        if m.len() != s {
            return Err(Error::Shape(format!("mask has {} positions, Z has {s}", m.len())));
        }
        let [kn, fd] = f.shape() else {
            return Err(Error::Shape(format!("tokens must be K x d_f, got {:?}", f.shape())));
        };
        if *fd != df {
            return Err(Error::Shape(format!("token dim {fd}, W_k expects {df}")));
        }
        let kn = *kn;
        let k = matmul(f.data(), weights.w_k.data(), kn, df, dk);
        let v = matmul(f.data(), weights.w_v.data(), kn, df, dv);
        for p in 0..s {
            mask_sum[p] += m[p];
            if m[p] == 0.0 {
                continue;
            }
            let logits: Vec<f64> = (0..kn)
                .map(|j| (0..dk).map(|c| q[p * dk + c] * k[j * dk + c]).sum::<f64>() * scale)
                .collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
            let total: f64 = e.iter().sum();
            for c in 0..dv {
                let a: f64 = (0..kn).map(|j| e[j] / total * v[j * dv + c]).sum();
                out[p * dv + c] += m[p] * a;
            }
        }
    }
    for p in 0..s {
        let denom = if mask_normalize { mask_sum[p] } else { n as f64 };
        if denom > 0.0 {
            out[p * dv..(p + 1) * dv].iter_mut().for_each(|v| *v /= denom);
        }
    }
    Tensor::new(&[s, dv], out)
}

/// Mask brought to another resolution. `upsampled` marks the nearest-neighbour
/// fallback, which does not preserve area.
#[derive(Clone, Debug, PartialEq)]
pub struct Resampled {
    pub mask: Mask,
    pub upsampled: bool,
}

pub fn resample_mask(mask: &Mask, width: usize, height: usize) -> Resampled {
    if (width, height) == (mask.width, mask.height) {
        return Resampled {
            mask: mask.clone(),
            upsampled: false,
        };
    }
    if width > mask.width || height > mask.height {
        let data = (0..width * height)
            .map(|p| {
                let (x, y) = (p % width, p / width);
                let sx = (x * mask.width / width).min(mask.width - 1);
                let sy = (y * mask.height / height).min(mask.height - 1);
                mask.data[sy * mask.width + sx]
            })
            .collect();
        return Resampled {
            mask: Mask { width, height, data },
            upsampled: true,
        };
    }
    Resampled {
        mask: Mask {
            width,
            height,
            data: area_resample(&mask.data, (mask.width, mask.height), (width, height)),
        },
        upsampled: false,
    }
}

/// Noise-level instance routing: `(1/N) sum_i m_i * eps_i`, masks broadcast
/// over channels.
pub fn noise_level_masking(eps: &[Tensor], masks: &[Mask]) -> Result<Tensor> {
    if eps.len() != masks.len() || eps.is_empty() {
        return Err(Error::Shape(format!("{} predictions for {} masks", eps.len(), masks.len())));
    }
    let (c, h, w) = eps[0].chw();
    let mut out = Tensor::zeros(&[c, h, w]);
    let n = eps.len() as f64;
    for (e, m) in eps.iter().zip(masks) {
        e.check_same(&out)?;
        if (m.width, m.height) != (w, h) {
            return Err(Error::Shape(format!(
                "mask {}x{} for prediction {w}x{h}",
                m.width, m.height
            )));
        }
        let o = out.data_mut();
        for k in 0..c {
            for p in 0..h * w {
                o[k * h * w + p] += m.data[p] * e.data()[k * h * w + p] / n;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image_io::solid;

    fn rand_tensor(shape: &[usize], rng: &mut Stream) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, rng.normals(n)).unwrap()
    }

    fn weights(dz: usize, df: usize, dk: usize, dv: usize, rng: &mut Stream) -> AttentionWeights {
        AttentionWeights {
            w_q: rand_tensor(&[dz, dk], rng),
            w_k: rand_tensor(&[df, dk], rng),
            w_v: rand_tensor(&[df, dv], rng),
        }
    }

    #[test]
    fn constant_image_gives_identical_tokens() {
        let t = extract_reference_features(&solid([1.0, 0.0, 0.0], 40, 24)).unwrap();
        assert_eq!(t.shape(), &[TOKEN_COUNT, TOKEN_DIM]);
        let first = &t.data()[..TOKEN_DIM];
        for row in t.data().chunks(TOKEN_DIM) {
            assert_eq!(row, first);
        }
        let stats = patch_statistics(&solid([1.0, 0.0, 0.0], 40, 24)).unwrap();
        assert!(stats.iter().all(|s| s[3] == 0.0 && s[4] == 0.0 && s[5].abs() < 1e-7));
    }

    #[test]
    fn complement_tokens_follow_complemented_means() {
        let mut rng = Stream::new(3, 0);
        let img = Tensor::new(&[3, 20, 28], (0..3 * 20 * 28).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap();
        let comp = img.map(|v| 1.0 - v);
        let stats = patch_statistics(&img).unwrap();
        let expect: Vec<[f64; PATCH_STATS]> = stats
            .iter()
            .map(|s| [1.0 - s[0], 1.0 - s[1], 1.0 - s[2], s[3], s[4], s[5]])
            .collect();
        let got = extract_reference_features(&comp).unwrap();
        assert!(got.max_abs_diff(&project_statistics(&expect)) < 1e-9);
        assert_eq!(extract_reference_features(&img).unwrap(), extract_reference_features(&img).unwrap());
    }

    #[test]
    fn single_full_mask_is_plain_cross_attention() {
        let mut rng = Stream::new(1, 0);
        let z = rand_tensor(&[6, 4], &mut rng);
        let f = rand_tensor(&[3, 5], &mut rng);
        let w = weights(4, 5, 2, 3, &mut rng);
        let got = masked_cross_attention(&z, &[f.clone()], &[vec![1.0; 6]], &w, false).unwrap();
        // unmasked attention written out with softmax over keys
        let q = matmul(z.data(), w.w_q.data(), 6, 4, 2);
        let k = matmul(f.data(), w.w_k.data(), 3, 5, 2);
        let v = matmul(f.data(), w.w_v.data(), 3, 5, 3);
        for p in 0..6 {
            let l: Vec<f64> = (0..3)
                .map(|j| (q[p * 2] * k[j * 2] + q[p * 2 + 1] * k[j * 2 + 1]) / 2f64.sqrt())
                .collect();
            let e: Vec<f64> = l.iter().map(|x| x.exp()).collect();
            let s: f64 = e.iter().sum();
            for c in 0..3 {
                let want: f64 = (0..3).map(|j| e[j] / s * v[j * 3 + c]).sum();
                assert!((got.data()[p * 3 + c] - want).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn zero_masks_give_zero_and_locality_holds() {
        let mut rng = Stream::new(2, 0);
        let z = rand_tensor(&[4, 3], &mut rng);
        let f1 = rand_tensor(&[2, 3], &mut rng);
        let f2 = rand_tensor(&[2, 3], &mut rng);
        let w = weights(3, 3, 3, 3, &mut rng);
        let zero = masked_cross_attention(&z, &[f1.clone(), f2.clone()], &[vec![0.0; 4], vec![0.0; 4]], &w, false).unwrap();
        assert!(zero.data().iter().all(|&v| v == 0.0));
        let m = vec![vec![1.0, 1.0, 0.0, 1.0], vec![0.0; 4]];
        let a = masked_cross_attention(&z, &[f1.clone(), f2.clone()], &m, &w, false).unwrap();
        let b = masked_cross_attention(&z, &[f1, f2.map(|v| v * 5.0 + 1.0)], &m, &w, false).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn scalar_hand_case() {
        // S=2, N=2, K=1, d=1: one key per reference so softmax is 1 and the
        // output is m_i * v_i / 2.
        let z = Tensor::new(&[2, 1], vec![0.3, -1.2]).unwrap();
        let w = AttentionWeights {
            w_q: Tensor::new(&[1, 1], vec![2.0]).unwrap(),
            w_k: Tensor::new(&[1, 1], vec![1.0]).unwrap(),
            w_v: Tensor::new(&[1, 1], vec![3.0]).unwrap(),
        };
        let f1 = Tensor::new(&[1, 1], vec![0.5]).unwrap();
        let f2 = Tensor::new(&[1, 1], vec![-2.0]).unwrap();
        let out = masked_cross_attention(&z, &[f1, f2], &[vec![1.0, 0.0], vec![0.0, 1.0]], &w, false).unwrap();
        assert_eq!(out.data(), &[1.5 / 2.0, -6.0 / 2.0]);
    }

    #[test]
    fn permutation_scaling_and_splitting() {
        let mut rng = Stream::new(4, 0);
        let z = rand_tensor(&[5, 3], &mut rng);
        let fs = [rand_tensor(&[4, 2], &mut rng), rand_tensor(&[4, 2], &mut rng)];
        let ms = [vec![1.0, 0.0, 0.5, 1.0, 0.0], vec![0.0, 1.0, 0.5, 0.0, 0.0]];
        let w = weights(3, 2, 4, 3, &mut rng);
        let a = masked_cross_attention(&z, &fs, &ms, &w, false).unwrap();
        let b = masked_cross_attention(&z, &[fs[1].clone(), fs[0].clone()], &[ms[1].clone(), ms[0].clone()], &w, false).unwrap();
        assert!(a.max_abs_diff(&b) < 1e-12);
        let mut w2 = w.clone();
        w2.w_v = w.w_v.scale(2.5);
        let c = masked_cross_attention(&z, &fs, &ms, &w2, false).unwrap();
        assert!(c.max_abs_diff(&a.scale(2.5)) < 1e-12);
        // one instance over all positions, then split into two identical halves
        let full = masked_cross_attention(&z, &fs[..1], &[vec![1.0; 5]], &w, false).unwrap();
        let halves = [vec![1.0, 1.0, 0.0, 0.0, 0.0], vec![0.0, 0.0, 1.0, 1.0, 1.0]];
        let split = masked_cross_attention(&z, &[fs[0].clone(), fs[0].clone()], &halves, &w, false).unwrap();
        assert!(split.max_abs_diff(&full.scale(0.5)) < 1e-12);
        let norm = masked_cross_attention(&z, &[fs[0].clone(), fs[0].clone()], &halves, &w, true).unwrap();
        assert!(norm.max_abs_diff(&full) < 1e-12);
    }

    #[test]
    fn mismatched_mask_is_an_error() {
        let mut rng = Stream::new(5, 0);
        let z = rand_tensor(&[4, 2], &mut rng);
        let w = weights(2, 2, 2, 2, &mut rng);
        let f = rand_tensor(&[1, 2], &mut rng);
        assert!(matches!(masked_cross_attention(&z, &[f], &[vec![1.0; 3]], &w, false), Err(Error::Shape(_))));
    }

    #[test]
    fn resampling_averages_and_preserves_partition() {
        let half = Mask {
            width: 6,
            height: 2,
            data: (0..12).map(|p| ((p % 6) < 3) as u8 as f64).collect(),
        };
        let r = resample_mask(&half, 3, 1);
        assert!(!r.upsampled);
        assert_eq!(r.mask.data, vec![1.0, 0.5, 0.0]);
        assert_eq!(resample_mask(&half, 6, 2).mask, half);
        let up = resample_mask(&half, 12, 4);
        assert!(up.upsampled);

        let mut rng = Stream::new(6, 0);
        let ids: Vec<usize> = (0..64 * 48).map(|_| rng.index(4)).collect();
        let masks: Vec<Mask> = (0..3)
            .map(|i| Mask { width: 64, height: 48, data: ids.iter().map(|&v| (v == i) as u8 as f64).collect() })
            .collect();
        let valid = Mask { width: 64, height: 48, data: ids.iter().map(|&v| (v < 3) as u8 as f64).collect() };
        let rv = resample_mask(&valid, 16, 12).mask;
        let mut acc = vec![0.0; 16 * 12];
        for m in &masks {
            let r = resample_mask(m, 16, 12).mask;
            assert!(r.data.iter().all(|v| (0.0..=1.0 + 1e-12).contains(v)));
            acc.iter_mut().zip(&r.data).for_each(|(a, b)| *a += b);
        }
        for (a, b) in acc.iter().zip(&rv.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn noise_level_masking_cases() {
        let mut rng = Stream::new(7, 0);
        let e = rand_tensor(&[4, 3, 2], &mut rng);
        let ones = Mask::full(2, 3, 1.0);
        assert_eq!(noise_level_masking(&[e.clone()], &[ones]).unwrap(), e);
        let m0 = Mask { width: 2, height: 3, data: vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0] };
        let m1 = Mask { width: 2, height: 3, data: vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0] };
        let out = noise_level_masking(&[e.clone(), e.clone()], &[m0.clone(), m1.clone()]).unwrap();
        for c in 0..4 {
            for p in 0..6 {
                let valid = m0.data[p] + m1.data[p];
                assert_eq!(out.data()[c * 6 + p], valid * e.data()[c * 6 + p] / 2.0);
            }
        }
        let e2 = rand_tensor(&[4, 3, 2], &mut rng);
        let out = noise_level_masking(&[e.clone(), e2.clone()], &[m0.clone(), m1.clone()]).unwrap();
        for c in 0..4 {
            for p in 0..6 {
                let want = (m0.data[p] * e.data()[c * 6 + p] + m1.data[p] * e2.data()[c * 6 + p]) / 2.0;
                assert_eq!(out.data()[c * 6 + p], want);
            }
        }
        assert!(noise_level_masking(&[e], &[m0, m1]).is_err());
    }

    #[test]
    fn token_cache_round_trips() {
        let refs = ReferenceSet::from_images(vec![solid([1.0, 0.0, 0.0], 8, 8), solid([0.0, 0.0, 1.0], 16, 4)]).unwrap();
        assert_eq!(ReferenceSet::tokens_from_bytes(&refs.tokens_to_bytes()).unwrap(), refs.tokens);
        let st = refs.stitched().unwrap();
        assert_eq!(st.len(), 1);
        assert_eq!(st.images[0].chw(), (3, 8, 8 + 32));
    }
}
