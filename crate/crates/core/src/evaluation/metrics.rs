use std::fmt::Write as _;

use crate::conditioning::{luminance, ReferenceSet};
use crate::distillation::masked_mean_color;
use crate::raster::Mask;
use crate::tensor::Tensor;

/// One evaluated view: the render and its per-instance masks.
#[derive(Clone, Debug)]
pub struct View {
    pub image: Tensor,
    pub masks: Vec<Mask>,
}

/// Scores for one instance; `None` fields mean the instance was never seen.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceScore {
    pub color_error: Option<f64>,
    pub style_distance: Option<f64>,
    /// Needs the instance in at least two views.
    pub shading_leak: Option<f64>,
}

fn luma_plane(image: &Tensor) -> Vec<f64> {
    let (_, h, w) = image.chw();
    let (r, g, b) = (image.plane(0), image.plane(1), image.plane(2));
    (0..h * w).map(|p| luminance([r[p], g[p], b[p]])).collect()
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
const STYLE_FEATURES: usize = 6;

/// 3x3 kernel response at `(x, y)`; the caller guarantees an interior pixel.
fn apply3(plane: &[f64], w: usize, x: usize, y: usize, k: &[[f64; 3]; 3]) -> f64 {
    let mut s = 0.0;
    for (dy, row) in k.iter().enumerate() {
        for (dx, kv) in row.iter().enumerate() {
            s += kv * plane[(y + dy - 1) * w + x + dx - 1];
        }
    }
    s
}

/// Pixels whose whole 3x3 neighbourhood lies inside `keep`.
fn interior(w: usize, h: usize, keep: impl Fn(usize) -> bool) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            if (0..3).all(|dy| (0..3).all(|dx| keep((y + dy - 1) * w + x + dx - 1))) {
                out.push((x, y));
            }
        }
    }
    out
}

/// Gram matrix of the Sobel-x/y responses of the three channels over the
/// selected pixels, normalized by the pixel count. `None` for no pixels.
pub fn gradient_gram(image: &Tensor, pixels: &[(usize, usize)]) -> Option<[[f64; STYLE_FEATURES]; STYLE_FEATURES]> {
    if pixels.is_empty() {
        return None;
    }
    let (_, _, w) = image.chw();
    let mut g = [[0.0; STYLE_FEATURES]; STYLE_FEATURES];
    for &(x, y) in pixels {
        let mut f = [0.0; STYLE_FEATURES];
        for c in 0..3 {
            f[2 * c] = apply3(image.plane(c), w, x, y, &SOBEL_X);
            f[2 * c + 1] = apply3(image.plane(c), w, x, y, &SOBEL_Y);
        }
        for i in 0..STYLE_FEATURES {
            for j in 0..STYLE_FEATURES {
                g[i][j] += f[i] * f[j];
            }
        }
    }
    let n = pixels.len() as f64;
    g.iter_mut().flatten().for_each(|v| *v /= n);
    Some(g)
}

fn gram_distance(a: &[[f64; STYLE_FEATURES]; STYLE_FEATURES], b: &[[f64; STYLE_FEATURES]; STYLE_FEATURES]) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        .sqrt()
}

/// Per-instance colour error (L2 of masked mean render colour against the
/// reference mean colour) and Gram style distance, each averaged over the
/// views where the instance is visible, plus the luminance spread across
/// views.
pub fn instance_consistency(views: &[View], refs: &ReferenceSet) -> Vec<InstanceScore> {
    let ref_colors = refs.mean_colors();
    let ref_grams: Vec<_> = refs
        .images
        .iter()
        .map(|img| {
            let (_, h, w) = img.chw();
            gradient_gram(img, &interior(w, h, |_| true))
        })
        .collect();
    let leak = shading_leak(views);
    (0..refs.len())
        .map(|i| {
            let mut colors = Vec::new();
            let mut styles = Vec::new();
            for v in views {
                let Some(mask) = v.masks.get(i) else { continue };
                let Some(c) = masked_mean_color(&v.image, mask) else { continue };
                let r = ref_colors[i];
                colors.push((0..3).map(|k| (c[k] - r[k]).powi(2)).sum::<f64>().sqrt());
                let (_, h, w) = v.image.chw();
                let px = interior(w, h, |p| mask.data[p] > 0.5);
                if let (Some(g), Some(rg)) = (gradient_gram(&v.image, &px), ref_grams[i].as_ref()) {
                    styles.push(gram_distance(&g, rg));
                }
            }
            let mean = |v: &[f64]| (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64);
            InstanceScore {
                color_error: mean(&colors),
                style_distance: mean(&styles),
                shading_leak: leak.get(i).copied().flatten(),
            }
        })
        .collect()
}

/// Variance of the 4-neighbour Laplacian of luminance over valid pixels
/// whose 3x3 neighbourhood is valid. 0 when no such pixel exists.
pub fn sharpness(image: &Tensor, validity: Option<&Mask>) -> f64 {
    let (_, h, w) = image.chw();
    let luma = luma_plane(image);
    let px = interior(w, h, |p| validity.is_none_or(|m| m.data[p] > 0.5));
    if px.is_empty() {
        return 0.0;
    }
    const LAPLACE: [[f64; 3]; 3] = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];
    let vals: Vec<f64> = px.iter().map(|&(x, y)| apply3(&luma, w, x, y, &LAPLACE)).collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Per instance: standard deviation across views of the masked mean
/// luminance. `None` unless the instance is visible in two or more views.
pub fn shading_leak(views: &[View]) -> Vec<Option<f64>> {
    let n = views.iter().map(|v| v.masks.len()).max().unwrap_or(0);
    (0..n)
        .map(|i| {
            let lum: Vec<f64> = views
                .iter()
                .filter_map(|v| v.masks.get(i).and_then(|m| masked_mean_color(&v.image, m)))
                .map(luminance)
                .collect();
            if lum.len() < 2 {
                return None;
            }
            let k = lum.len() as f64;
            let mean = lum.iter().sum::<f64>() / k;
            Some((lum.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / k).sqrt())
        })
        .collect()
}

/// Scores for one textured scene.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub instances: Vec<InstanceScore>,
    /// Mean render sharpness over the evaluated views.
    pub render_sharpness: f64,
    /// Sharpness of the baked texture over covered texels.
    pub baked_sharpness: f64,
}

impl EvalReport {
    /// Mean colour error over observed instances.
    pub fn mean_color_error(&self) -> f64 {
        let v: Vec<f64> = self.instances.iter().filter_map(|s| s.color_error).collect();
        if v.is_empty() {
            0.0
        } else {
            v.iter().sum::<f64>() / v.len() as f64
        }
    }

    /// `instance,color_error,style_distance,shading_leak` rows; unobserved
    /// values are written as `unobserved`, then the two sharpness rows.
    pub fn to_csv(&self) -> String {
        let f = |v: Option<f64>| v.map_or("unobserved".to_string(), |x| x.to_string());
        let mut out = "instance,color_error,style_distance,shading_leak\n".to_string();
        for (i, s) in self.instances.iter().enumerate() {
            let _ = writeln!(out, "{i},{},{},{}", f(s.color_error), f(s.style_distance), f(s.shading_leak));
        }
        let _ = writeln!(out, "render_sharpness,{}", self.render_sharpness);
        let _ = writeln!(out, "baked_sharpness,{}", self.baked_sharpness);
        out
    }
}
