//! Desk-scale quality proxies: per-instance colour and style consistency
//! with the references, Laplacian sharpness, cross-view shading leak, bake
//! timing and the ablation runner.

mod ablation;
mod bench;
mod metrics;

pub use ablation::{
    eval_cameras, evaluate, run_ablations, shade_baked, AblationOptions, AblationReport, Variant, VariantResult,
};
pub use bench::{bench_bake, median, BakeTable, BakeTiming};
pub use metrics::{gradient_gram, instance_consistency, shading_leak, sharpness, EvalReport, InstanceScore, View};
