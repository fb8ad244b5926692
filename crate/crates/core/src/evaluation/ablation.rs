use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use super::metrics::{instance_consistency, sharpness, EvalReport, View};
use crate::conditioning::ReferenceSet;
use crate::distillation::{run_optimization, DistillConfig, MetricsRow, ReferenceMode};
use crate::error::{Error, Result};
use crate::geometry::{sample_viewpoints, Camera, Scene, ViewpointConfig};
use crate::raster::{instance_masks, rasterize, shade, valid_uvs, GBuffer};
use crate::score_models::{sr_enhance, Routing, SrPass, UNet};
use crate::tensor::Tensor;
use crate::texture_field::{uv_coverage_mask, TextureField};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Variant {
    Full,
    /// Trained without the SR term, then one SR pass over the baked texture.
    PostSr,
    NoSr,
    /// Noise-level routing instead of feature-level masks.
    NoFeatureMask,
    /// References stitched into one image and one token set.
    NoMultiRef,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::Full,
        Variant::PostSr,
        Variant::NoSr,
        Variant::NoFeatureMask,
        Variant::NoMultiRef,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::PostSr => "post-sr",
            Self::NoSr => "no-sr",
            Self::NoFeatureMask => "no-fmask",
            Self::NoMultiRef => "no-multiref",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown ablation variant `{s}`")))
    }

    /// Training config of the variant.
    pub fn config(self, base: &DistillConfig) -> DistillConfig {
        let mut c = base.clone();
        match self {
            Self::Full => {}
            Self::PostSr | Self::NoSr => c.sr.lambda = 0.0,
            Self::NoFeatureMask => c.routing = Routing::NoiseLevel,
            Self::NoMultiRef => c.reference_mode = ReferenceMode::Stitched,
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationOptions {
    pub variants: Vec<Variant>,
    pub eval_views: usize,
    pub eval_seed: u64,
    /// Square bake side; a multiple of 8 so the SR pass can run on it.
    pub bake_resolution: usize,
    pub sr_pass: SrPass,
}

impl Default for AblationOptions {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            eval_views: 16,
            eval_seed: 1000,
            bake_resolution: 128,
            sr_pass: SrPass::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct VariantResult {
    pub variant: Variant,
    pub report: EvalReport,
    pub field: TextureField,
    pub baked: Tensor,
    pub renders: Vec<Tensor>,
    pub metrics: Vec<MetricsRow>,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub results: Vec<VariantResult>,
}

/// Nearest-texel lookup into a baked `[3, r, r]` texture.
pub fn shade_baked(gb: &GBuffer, texture: &Tensor) -> Tensor {
    let (_, th, tw) = texture.chw();
    let (idx, uvs) = valid_uvs(gb);
    let hw = gb.width * gb.height;
    let mut img = Tensor::zeros(&[3, gb.height, gb.width]);
    let d = img.data_mut();
    for (&p, uv) in idx.iter().zip(&uvs) {
        let x = ((uv[0] * tw as f64) as usize).min(tw - 1);
        let y = ((uv[1] * th as f64) as usize).min(th - 1);
        for c in 0..3 {
            d[c * hw + p] = texture.plane(c)[y * tw + x];
        }
    }
    img
}

/// Fixed evaluation cameras at the render resolution of `config`.
pub fn eval_cameras(scene: &Scene, config: &DistillConfig, views: usize, seed: u64) -> Result<Vec<Camera>> {
    let vp = ViewpointConfig {
        image_size: (config.render_size, config.render_size),
        ..Default::default()
    };
    sample_viewpoints(scene, views, seed, &vp)
}

/// Render every camera with `texture` (a field, or a baked image when given)
/// and score against `refs`.
pub fn evaluate(
    scene: &Scene,
    field: &TextureField,
    baked: &Tensor,
    use_baked: bool,
    refs: &ReferenceSet,
    cameras: &[Camera],
) -> Result<(EvalReport, Vec<Tensor>)> {
    let mut views = Vec::with_capacity(cameras.len());
    let mut sharp = 0.0;
    for cam in cameras {
        let gb = rasterize(&scene.mesh, cam, cam.image_size)?;
        let image = if use_baked { shade_baked(&gb, baked) } else { shade(&gb, field) };
        sharp += sharpness(&image, Some(&gb.validity()));
        views.push(View {
            masks: instance_masks(&gb, scene.instance_count)?,
            image,
        });
    }
    let (_, h, w) = baked.chw();
    let coverage = uv_coverage_mask(&scene.mesh, (w, h));
    let report = EvalReport {
        instances: instance_consistency(&views, refs),
        render_sharpness: sharp / cameras.len().max(1) as f64,
        baked_sharpness: sharpness(baked, Some(&coverage)),
    };
    Ok((report, views.into_iter().map(|v| v.image).collect()))
}

/// Train each requested variant on the same seed and evaluate it on shared
/// cameras. Variants with identical training configs share one run.
pub fn run_ablations(
    scene: &Scene,
    refs: &ReferenceSet,
    teacher: Arc<UNet>,
    sr: Arc<UNet>,
    base: &DistillConfig,
    options: &AblationOptions,
    progress: &mut dyn FnMut(Variant, &MetricsRow),
) -> Result<AblationReport> {
    let r = options.bake_resolution;
    if r == 0 || r % 8 != 0 {
        return Err(Error::InvalidArgument(format!("bake resolution {r} must be a positive multiple of 8")));
    }
    let cameras = eval_cameras(scene, base, options.eval_views, options.eval_seed)?;
    let coverage = uv_coverage_mask(&scene.mesh, (r, r));
    let mut trained: BTreeMap<String, (TextureField, Vec<MetricsRow>)> = BTreeMap::new();
    let mut results = Vec::new();
    for &variant in &options.variants {
        let config = variant.config(base);
        let key = config.to_text();
        if !trained.contains_key(&key) {
            let out = run_optimization(
                scene.clone(),
                refs,
                teacher.clone(),
                Some(sr.clone()),
                &config,
                None,
                false,
                &mut |row| progress(variant, row),
            )?;
            trained.insert(key.clone(), out);
        }
        let (field, metrics) = &trained[&key];
        let mut baked = field.bake((r, r), 64, Some(&coverage));
        if variant == Variant::PostSr {
            baked = sr_enhance(&sr, &baked, &options.sr_pass, config.seed)?;
            // keep uncovered texels black like every other bake
            let hw = r * r;
            let d = baked.data_mut();
            for p in 0..hw {
                if coverage.data[p] <= 0.0 {
                    for c in 0..3 {
                        d[c * hw + p] = 0.0;
                    }
                }
            }
        }
        let (report, renders) = evaluate(scene, field, &baked, variant == Variant::PostSr, refs, &cameras)?;
        results.push(VariantResult {
            variant,
            report,
            field: field.clone(),
            baked,
            renders,
            metrics: metrics.clone(),
        });
    }
    Ok(AblationReport { results })
}

impl AblationReport {
    pub fn get(&self, v: Variant) -> Option<&VariantResult> {
        self.results.iter().find(|r| r.variant == v)
    }

    /// `variant,color_error,style_distance,render_sharpness,baked_sharpness`
    /// plus the same metrics as differences against the full model.
    pub fn to_csv(&self) -> String {
        let metrics = |r: &EvalReport| {
            let styles: Vec<f64> = r.instances.iter().filter_map(|s| s.style_distance).collect();
            let style = if styles.is_empty() {
                0.0
            } else {
                styles.iter().sum::<f64>() / styles.len() as f64
            };
            [r.mean_color_error(), style, r.render_sharpness, r.baked_sharpness]
        };
        let full = self.get(Variant::Full).map(|r| metrics(&r.report));
        let mut out = "variant,color_error,style_distance,render_sharpness,baked_sharpness,\
d_color_error,d_style_distance,d_render_sharpness,d_baked_sharpness\n"
            .to_string();
        for r in &self.results {
            let m = metrics(&r.report);
            let _ = write!(out, "{},{},{},{},{}", r.variant.name(), m[0], m[1], m[2], m[3]);
            for k in 0..4 {
                match full {
                    Some(f) => {
                        let _ = write!(out, ",{}", m[k] - f[k]);
                    }
                    None => out.push_str(",-"),
                }
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_box_room, RoomSpec};
    use crate::image_io::solid;
    use crate::score_models::UNetConfig;
    use crate::texture_field::HashGridConfig;

    #[test]
    fn variant_configs_toggle_one_thing() {
        let base = DistillConfig::default();
        assert_eq!(Variant::Full.config(&base), base);
        assert_eq!(Variant::NoSr.config(&base).sr.lambda, 0.0);
        assert_eq!(Variant::PostSr.config(&base), Variant::NoSr.config(&base));
        assert_eq!(Variant::NoFeatureMask.config(&base).routing, Routing::NoiseLevel);
        assert_eq!(Variant::NoMultiRef.config(&base).reference_mode, ReferenceMode::Stitched);
        for v in Variant::ALL {
            assert_eq!(Variant::parse(v.name()).unwrap(), v);
        }
        assert!(Variant::parse("nope").is_err());
    }

    #[test]
    fn full_vs_full_has_zero_deltas() {
        let scene = build_box_room(&RoomSpec::toy()).unwrap();
        let refs = ReferenceSet::from_images(vec![solid([0.9, 0.1, 0.1], 16, 16), solid([0.1, 0.1, 0.9], 16, 16)]).unwrap();
        let mut t = UNet::new(UNetConfig::teacher(), 1).unwrap();
        t.pretrained = true;
        let mut s = UNet::new(UNetConfig::sr(), 2).unwrap();
        s.pretrained = true;
        let base = DistillConfig {
            viewpoints: 4,
            render_size: 32,
            field: HashGridConfig {
                levels: 3,
                table_log2: 8,
                ..Default::default()
            },
            field_hidden: 8,
            ..DistillConfig::scaled(3)
        };
        let options = AblationOptions {
            variants: vec![Variant::Full, Variant::Full, Variant::PostSr],
            eval_views: 3,
            bake_resolution: 32,
            sr_pass: SrPass {
                steps: 2,
                ..Default::default()
            },
            ..Default::default()
        };
        let rep = run_ablations(&scene, &refs, Arc::new(t), Arc::new(s), &base, &options, &mut |_, _| {}).unwrap();
        let csv = rep.to_csv();
        let lines: Vec<&str> = csv.lines().collect();
        assert!(lines[1].ends_with(",0,0,0,0"));
        assert_eq!(lines[1], lines[2]);
        assert!(lines[3].starts_with("post-sr,"));
        assert_eq!(rep.results[2].renders.len(), 3);
    }
}
