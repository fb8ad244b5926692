use crate::error::{Error, Result};
use crate::rng::Stream;
use crate::score_models::{Routing, Weighting};
use crate::texture_field::HashGridConfig;

/// Timestep annealing: `t ~ U(t_min, upper(k))` where the upper bound moves
/// linearly from `t_max` to `t_max_final` over `[anneal_start, anneal_end]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TimeSchedule {
    pub t_min: f64,
    pub t_max: f64,
    pub t_max_final: f64,
    pub anneal_start: u64,
    pub anneal_end: u64,
}

impl Default for TimeSchedule {
    fn default() -> Self {
        Self {
            t_min: 0.02,
            t_max: 0.98,
            t_max_final: 0.5,
            anneal_start: 5000,
            anneal_end: 10000,
        }
    }
}

impl TimeSchedule {
    pub fn upper(&self, iteration: u64) -> f64 {
        if iteration < self.anneal_start {
            return self.t_max;
        }
        if iteration >= self.anneal_end {
            return self.t_max_final;
        }
        let f = (iteration - self.anneal_start) as f64 / (self.anneal_end - self.anneal_start) as f64;
        self.t_max + f * (self.t_max_final - self.t_max)
    }

    pub fn sample(&self, iteration: u64, rng: &mut Stream) -> f64 {
        rng.uniform(self.t_min, self.upper(iteration))
    }
}

/// `lambda_SR(k)`: 0 before `start`, `lambda` from `start` on.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SrSchedule {
    pub start: u64,
    pub lambda: f64,
}

impl Default for SrSchedule {
    fn default() -> Self {
        Self {
            start: 5000,
            lambda: 1.2,
        }
    }
}

impl SrSchedule {
    pub fn lambda(&self, iteration: u64) -> f64 {
        if iteration < self.start {
            0.0
        } else {
            self.lambda
        }
    }
}

/// How reference images reach the teacher.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ReferenceMode {
    /// One token set and mask per instance.
    #[default]
    PerInstance,
    /// All references stitched into one image, one token set, whole-frame mask.
    Stitched,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub iterations: u64,
    pub lr_texture: f64,
    pub lr_adapter: f64,
    pub time: TimeSchedule,
    pub sr: SrSchedule,
    pub viewpoints: usize,
    pub seed: u64,
    /// Iterations between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
    pub weighting: Weighting,
    pub render_size: usize,
    pub adapter_rank: usize,
    pub adapter_steps: usize,
    pub reference_mode: ReferenceMode,
    pub routing: Routing,
    pub field: HashGridConfig,
    pub field_hidden: usize,
}

impl Default for DistillConfig {
    fn default() -> Self {
        Self {
            iterations: 30_000,
            lr_texture: 1e-3,
            lr_adapter: 1e-4,
            time: TimeSchedule::default(),
            sr: SrSchedule::default(),
            viewpoints: 5000,
            seed: 0,
            checkpoint_every: 1000,
            weighting: Weighting::SigmaSquared,
            render_size: 64,
            adapter_rank: 4,
            adapter_steps: 1,
            reference_mode: ReferenceMode::PerInstance,
            routing: Routing::FeatureMask,
            field: HashGridConfig::default(),
            field_hidden: 64,
        }
    }
}

impl DistillConfig {
    /// Default schedule with every boundary scaled by `iterations / 30000`.
    pub fn scaled(iterations: u64) -> Self {
        let base = Self::default();
        let s = |k: u64| k * iterations / base.iterations;
        Self {
            iterations,
            time: TimeSchedule {
                anneal_start: s(base.time.anneal_start),
                anneal_end: s(base.time.anneal_end),
                ..base.time
            },
            sr: SrSchedule {
                start: s(base.sr.start),
                ..base.sr
            },
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.lr_texture > 0.0) || !(self.lr_adapter > 0.0) {
            return bad("learning rates must be positive".into());
        }
        let t = &self.time;
        if !(0.0 < t.t_min && t.t_min < t.t_max_final && t.t_max_final <= t.t_max && t.t_max <= 1.0) {
            return bad(format!("invalid timestep range {t:?}"));
        }
        if t.anneal_start > t.anneal_end || t.anneal_end > self.iterations || self.sr.start > self.iterations {
            return bad(format!(
                "schedule boundaries ({}, {}, {}) must be ordered and <= iterations {}",
                t.anneal_start, t.anneal_end, self.sr.start, self.iterations
            ));
        }
        if self.viewpoints == 0 || self.render_size == 0 || self.render_size % 8 != 0 {
            return bad("need >= 1 viewpoint and a render size divisible by 8".into());
        }
        if self.adapter_rank == 0 || self.adapter_steps == 0 {
            return bad("adapter rank and steps must be >= 1".into());
        }
        self.field.validate()
    }

    /// `key = value` echo, one line per field, stable order.
    pub fn to_text(&self) -> String {
        let f = &self.field;
        [
            format!("iterations = {}", self.iterations),
            format!("lr_texture = {:e}", self.lr_texture),
            format!("lr_adapter = {:e}", self.lr_adapter),
            format!("t_min = {}", self.time.t_min),
            format!("t_max = {}", self.time.t_max),
            format!("t_max_final = {}", self.time.t_max_final),
            format!("anneal_start = {}", self.time.anneal_start),
            format!("anneal_end = {}", self.time.anneal_end),
            format!("sr_start = {}", self.sr.start),
            format!("lambda_sr = {}", self.sr.lambda),
            format!("viewpoints = {}", self.viewpoints),
            format!("seed = {}", self.seed),
            format!("checkpoint_every = {}", self.checkpoint_every),
            format!("weighting = {}", self.weighting.name()),
            format!("render_size = {}", self.render_size),
            format!("adapter_rank = {}", self.adapter_rank),
            format!("adapter_steps = {}", self.adapter_steps),
            format!(
                "reference_mode = {}",
                match self.reference_mode {
                    ReferenceMode::PerInstance => "per_instance",
                    ReferenceMode::Stitched => "stitched",
                }
            ),
            format!(
                "routing = {}",
                match self.routing {
                    Routing::FeatureMask => "feature",
                    Routing::NoiseLevel => "noise",
                }
            ),
            format!("levels = {}", f.levels),
            format!("base_resolution = {}", f.base_resolution),
            format!("growth_factor = {}", f.growth_factor),
            format!("table_log2 = {}", f.table_log2),
            format!("features_per_level = {}", f.features_per_level),
            format!("field_hidden = {}", self.field_hidden),
        ]
        .join("\n")
            + "\n"
    }
}
