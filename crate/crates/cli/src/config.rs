//! Run configuration: one TOML file with sections, overridden by flags.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use weave_core::distillation::{DistillConfig, ReferenceMode, SrSchedule, TimeSchedule};
use weave_core::evaluation::Variant;
use weave_core::geometry::{BoxSpec, RoomSpec};
use weave_core::score_models::{PatternKind, PretrainConfig, Routing, SrPass, Weighting};
use weave_core::HashGridConfig;

use crate::error::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Parent of the timestamped run directories.
    pub out: PathBuf,
    pub paths: Paths,
    pub room: RoomSection,
    pub distill: DistillSection,
    pub field: FieldSection,
    pub pretrain: PretrainSection,
    pub bake: BakeSection,
    pub render: RenderSection,
    pub eval: EvalSection,
    pub bench: BenchSection,
    pub ablate: AblateSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("runs"),
            paths: Paths::default(),
            room: RoomSection::default(),
            distill: DistillSection::default(),
            field: FieldSection::default(),
            pretrain: PretrainSection::default(),
            bake: BakeSection::default(),
            render: RenderSection::default(),
            eval: EvalSection::default(),
            bench: BenchSection::default(),
            ablate: AblateSection::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub scene: Option<PathBuf>,
    /// One image per instance; defaults to the scene's reference assignment.
    pub references: Vec<PathBuf>,
    pub teacher: Option<PathBuf>,
    pub sr: Option<PathBuf>,
    /// Field checkpoint: a `.wtfx` file, a checkpoint bundle or a run dir.
    pub checkpoint: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FurnitureSection {
    pub min: [f32; 3],
    pub max: [f32; 3],
    pub instance: u32,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoomSection {
    pub size: [f32; 3],
    pub floor: u32,
    pub ceiling: u32,
    pub walls: [u32; 4],
    pub furniture: Vec<FurnitureSection>,
    pub atlas_texels: u32,
    pub texels_per_unit: f64,
    /// Flat reference colour per instance, written as `ref_<id>.png`.
    pub reference_colors: Vec<[f64; 3]>,
}

impl Default for RoomSection {
    fn default() -> Self {
        let toy = RoomSpec::toy();
        Self {
            size: toy.size,
            floor: toy.floor,
            ceiling: toy.ceiling,
            walls: toy.walls,
            furniture: toy
                .furniture
                .iter()
                .map(|b| FurnitureSection {
                    min: b.min,
                    max: b.max,
                    instance: b.instance,
                })
                .collect(),
            atlas_texels: toy.atlas_texels,
            texels_per_unit: toy.texels_per_unit,
            reference_colors: vec![[0.9, 0.1, 0.1], [0.1, 0.1, 0.9]],
        }
    }
}

impl RoomSection {
    pub fn spec(&self) -> RoomSpec {
        RoomSpec {
            size: self.size,
            floor: self.floor,
            ceiling: self.ceiling,
            walls: self.walls,
            furniture: self
                .furniture
                .iter()
                .map(|f| BoxSpec {
                    min: f.min,
                    max: f.max,
                    instance: f.instance,
                })
                .collect(),
            atlas_texels: self.atlas_texels,
            texels_per_unit: self.texels_per_unit,
            references: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub iterations: u64,
    pub lr_texture: f64,
    pub lr_adapter: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub t_max_final: f64,
    /// Unset boundaries scale with `iterations` (5000/10000/5000 of 30000).
    pub anneal_start: Option<u64>,
    pub anneal_end: Option<u64>,
    pub sr_start: Option<u64>,
    pub lambda_sr: f64,
    pub viewpoints: usize,
    pub checkpoint_every: u64,
    pub weighting: String,
    pub render_size: usize,
    pub adapter_rank: usize,
    pub adapter_steps: usize,
    pub reference_mode: String,
    pub routing: String,
}

impl Default for DistillSection {
    fn default() -> Self {
        let d = DistillConfig::default();
        Self {
            iterations: d.iterations,
            lr_texture: d.lr_texture,
            lr_adapter: d.lr_adapter,
            t_min: d.time.t_min,
            t_max: d.time.t_max,
            t_max_final: d.time.t_max_final,
            anneal_start: None,
            anneal_end: None,
            sr_start: None,
            lambda_sr: d.sr.lambda,
            viewpoints: d.viewpoints,
            checkpoint_every: d.checkpoint_every,
            weighting: d.weighting.name().into(),
            render_size: d.render_size,
            adapter_rank: d.adapter_rank,
            adapter_steps: d.adapter_steps,
            reference_mode: "per_instance".into(),
            routing: "feature".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FieldSection {
    pub levels: usize,
    pub base_resolution: usize,
    pub growth_factor: f64,
    pub table_log2: u32,
    pub features_per_level: usize,
    pub hidden: usize,
}

impl Default for FieldSection {
    fn default() -> Self {
        let c = HashGridConfig::default();
        Self {
            levels: c.levels,
            base_resolution: c.base_resolution,
            growth_factor: c.growth_factor,
            table_log2: c.table_log2,
            features_per_level: c.features_per_level,
            hidden: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub steps: usize,
    pub sr_steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub sr_lr: f64,
    pub heldout: usize,
    pub patterns: String,
}

impl Default for PretrainSection {
    fn default() -> Self {
        let p = PretrainConfig::default();
        let sr = PretrainConfig::sr();
        Self {
            steps: p.steps,
            sr_steps: sr.steps,
            batch: p.batch,
            lr: p.lr,
            sr_lr: sr.lr,
            heldout: p.heldout,
            patterns: PatternKind::Flat.name().into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BakeSection {
    pub resolution: usize,
    pub tile: usize,
}

impl Default for BakeSection {
    fn default() -> Self {
        Self {
            resolution: 1024,
            tile: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RenderSection {
    pub views: usize,
    pub resolution: usize,
    /// Camera seed; the run seed when unset.
    pub camera_seed: Option<u64>,
}

impl Default for RenderSection {
    fn default() -> Self {
        Self {
            views: 4,
            resolution: 256,
            camera_seed: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalSection {
    pub views: usize,
    pub camera_seed: u64,
    pub bake_resolution: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            views: 16,
            camera_seed: 1000,
            bake_resolution: 128,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    pub resolutions: Vec<usize>,
    pub repeats: usize,
    pub tile: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            resolutions: vec![1024, 2048, 4096],
            repeats: 3,
            tile: 256,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    pub variants: Vec<String>,
    pub sr_t_start: f64,
    pub sr_steps: usize,
}

impl Default for AblateSection {
    fn default() -> Self {
        let p = SrPass::default();
        Self {
            variants: Variant::ALL.iter().map(|v| v.name().to_string()).collect(),
            sr_t_start: p.t_start,
            sr_steps: p.steps,
        }
    }
}

fn schema(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

impl RunConfig {
    /// Parse a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::from_io(path, e))?;
        let mut c: RunConfig = toml::from_str(&text).map_err(|e| schema(format!("{}: {}", path.display(), e.message())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut c.out);
        for p in [
            &mut c.paths.scene,
            &mut c.paths.teacher,
            &mut c.paths.sr,
            &mut c.paths.checkpoint,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        c.paths.references.iter_mut().for_each(fix);
        Ok(c)
    }

    /// Fill scaled schedule boundaries so the echo is explicit.
    pub fn resolve(&mut self) {
        let scaled = DistillConfig::scaled(self.distill.iterations);
        let d = &mut self.distill;
        d.anneal_start.get_or_insert(scaled.time.anneal_start);
        d.anneal_end.get_or_insert(scaled.time.anneal_end);
        d.sr_start.get_or_insert(scaled.sr.start);
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn distill_config(&self) -> Result<DistillConfig, CliError> {
        let d = &self.distill;
        let scaled = DistillConfig::scaled(d.iterations);
        let f = &self.field;
        let c = DistillConfig {
            iterations: d.iterations,
            lr_texture: d.lr_texture,
            lr_adapter: d.lr_adapter,
            time: TimeSchedule {
                t_min: d.t_min,
                t_max: d.t_max,
                t_max_final: d.t_max_final,
                anneal_start: d.anneal_start.unwrap_or(scaled.time.anneal_start),
                anneal_end: d.anneal_end.unwrap_or(scaled.time.anneal_end),
            },
            sr: SrSchedule {
                start: d.sr_start.unwrap_or(scaled.sr.start),
                lambda: d.lambda_sr,
            },
            viewpoints: d.viewpoints,
            seed: self.seed,
            checkpoint_every: d.checkpoint_every,
            weighting: Weighting::parse(&d.weighting).map_err(|e| schema(e.to_string()))?,
            render_size: d.render_size,
            adapter_rank: d.adapter_rank,
            adapter_steps: d.adapter_steps,
            reference_mode: match d.reference_mode.as_str() {
                "per_instance" => ReferenceMode::PerInstance,
                "stitched" => ReferenceMode::Stitched,
                other => return Err(schema(format!("distill.reference_mode `{other}`"))),
            },
            routing: match d.routing.as_str() {
                "feature" => Routing::FeatureMask,
                "noise" => Routing::NoiseLevel,
                other => return Err(schema(format!("distill.routing `{other}`"))),
            },
            field: HashGridConfig {
                levels: f.levels,
                base_resolution: f.base_resolution,
                growth_factor: f.growth_factor,
                table_log2: f.table_log2,
                features_per_level: f.features_per_level,
            },
            field_hidden: f.hidden,
        };
        c.validate().map_err(|e| schema(e.to_string()))?;
        Ok(c)
    }

    pub fn pretrain_config(&self, sr: bool) -> PretrainConfig {
        let p = &self.pretrain;
        PretrainConfig {
            steps: if sr { p.sr_steps } else { p.steps },
            batch: p.batch,
            lr: if sr { p.sr_lr } else { p.lr },
            seed: self.seed,
            heldout: p.heldout,
            ..Default::default()
        }
    }

    pub fn patterns(&self) -> Result<PatternKind, CliError> {
        PatternKind::parse(&self.pretrain.patterns).map_err(|e| schema(e.to_string()))
    }

    pub fn variants(&self) -> Result<Vec<Variant>, CliError> {
        self.ablate
            .variants
            .iter()
            .map(|v| Variant::parse(v).map_err(|e| schema(e.to_string())))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let mut c = RunConfig::default();
        c.resolve();
        let back: RunConfig = toml::from_str(&c.to_toml()).unwrap();
        assert_eq!(back, c);
        assert_eq!(c.distill_config().unwrap(), DistillConfig::default());
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("[distill]\nlearning_rate = 1.0\n").is_err());
        let c: RunConfig = toml::from_str("seed = 4\n[distill]\niterations = 300\n").unwrap();
        let d = c.distill_config().unwrap();
        assert_eq!((d.seed, d.time.anneal_start, d.sr.start), (4, 50, 50));
    }

    #[test]
    fn bundled_toy_config_loads() {
        let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/toy.toml");
        let c = RunConfig::load(&path).unwrap();
        let d = c.distill_config().unwrap();
        assert_eq!((d.iterations, d.viewpoints, d.lr_adapter), (3000, 500, 1e-3));
        assert_eq!((d.time.anneal_start, d.time.anneal_end, d.sr.start), (500, 1000, 500));
        assert_eq!(c.room.reference_colors.len(), 2);
        assert!(c.out.ends_with("../runs"));
    }
}
