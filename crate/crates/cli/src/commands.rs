use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use weave_core::conditioning::ReferenceSet;
use weave_core::distillation::{run_optimization, write_metrics, MetricsRow};
use weave_core::evaluation::{bench_bake, eval_cameras, evaluate, run_ablations, AblationOptions, Variant};
use weave_core::geometry::{build_box_room, load_scene, sample_viewpoints, save_scene, validate_scene, ViewpointConfig};
use weave_core::image_io::{grid, save_rgb, solid};
use weave_core::raster::{rasterize, shade};
use weave_core::score_models::{pretrain_sr, pretrain_teacher, ModelKind, SrDataset, SrPass, TeacherDataset, UNet, UNetConfig};
use weave_core::texture_field::uv_coverage_mask;
use weave_core::{Scene, TextureField};

use crate::config::{RoomSection, RunConfig};
use crate::error::CliError;
use crate::run::{sha256_file, Run};
use crate::{Cli, Command, Inputs};

/// Environment variable naming an optional cache for pretrained models.
pub const CACHE_ENV: &str = "WEAVE_CACHE_DIR";

struct Ctx {
    config: RunConfig,
    quiet: bool,
    resume: Option<PathBuf>,
}

impl Ctx {
    fn log(&self, msg: impl AsRef<str>) {
        if !self.quiet {
            eprintln!("{}", msg.as_ref());
        }
    }

    /// New run dir with the merged config echoed into it.
    fn run(&self, command: &str) -> Result<Run, CliError> {
        let run = Run::create(&self.config.out, command, self.config.seed)?;
        run.write("config.toml", self.config.to_toml())?;
        self.log(format!("run directory {}", run.dir.display()));
        Ok(run)
    }
}

fn require(path: &Path) -> Result<&Path, CliError> {
    if path.exists() {
        Ok(path)
    } else {
        Err(CliError::MissingPath(format!("{} does not exist", path.display())))
    }
}

/// Flags win over the config file.
fn apply_inputs(config: &mut RunConfig, inputs: &Inputs) {
    let p = &mut config.paths;
    if inputs.scene.is_some() {
        p.scene = inputs.scene.clone();
    }
    if !inputs.references.is_empty() {
        p.references = inputs.references.clone();
    }
    if inputs.teacher.is_some() {
        p.teacher = inputs.teacher.clone();
    }
    if inputs.sr.is_some() {
        p.sr = inputs.sr.clone();
    }
    if inputs.checkpoint.is_some() {
        p.checkpoint = inputs.checkpoint.clone();
    }
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    let mut config = match &cli.config {
        Some(p) => RunConfig::load(require(p)?)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    if let Some(o) = &cli.out {
        config.out = o.clone();
    }
    match &cli.command {
        Command::MakeScene { .. } | Command::Pretrain { .. } => {}
        Command::Optimize { inputs, iterations } | Command::Ablate { inputs, iterations, .. } => {
            apply_inputs(&mut config, inputs);
            if let Some(n) = iterations {
                config.distill.iterations = *n;
            }
        }
        Command::Bake { inputs, .. }
        | Command::Render { inputs, .. }
        | Command::Eval { inputs, .. }
        | Command::Bench { inputs, .. } => apply_inputs(&mut config, inputs),
    }
    match &cli.command {
        Command::Pretrain { steps, sr_steps } => {
            if let Some(s) = steps {
                config.pretrain.steps = *s;
            }
            if let Some(s) = sr_steps {
                config.pretrain.sr_steps = *s;
            }
        }
        Command::Bake { resolution, tile, .. } => {
            if let Some(r) = resolution {
                config.bake.resolution = *r;
            }
            if let Some(t) = tile {
                config.bake.tile = *t;
            }
        }
        Command::Render {
            views,
            resolution,
            camera_seed,
            ..
        } => {
            if let Some(v) = views {
                config.render.views = *v;
            }
            if let Some(r) = resolution {
                config.render.resolution = *r;
            }
            if camera_seed.is_some() {
                config.render.camera_seed = *camera_seed;
            }
        }
        Command::Eval { views: Some(v), .. } => config.eval.views = *v,
        Command::Bench {
            resolutions,
            repeats,
            tile,
            ..
        } => {
            if let Some(r) = resolutions {
                config.bench.resolutions = r.clone();
            }
            if let Some(r) = repeats {
                config.bench.repeats = *r;
            }
            if let Some(t) = tile {
                config.bench.tile = *t;
            }
        }
        Command::Ablate {
            variants: Some(v), ..
        } => config.ablate.variants = v.clone(),
        _ => {}
    }
    config.resolve();
    let ctx = Ctx {
        config,
        quiet: cli.quiet,
        resume: cli.resume.clone(),
    };
    match cli.command {
        Command::MakeScene { spec } => make_scene(&ctx, spec.as_deref()),
        Command::Pretrain { .. } => pretrain(&ctx),
        Command::Optimize { .. } => optimize(&ctx),
        Command::Bake { .. } => bake(&ctx),
        Command::Render { .. } => render(&ctx),
        Command::Eval { .. } => eval(&ctx),
        Command::Bench { .. } => bench(&ctx),
        Command::Ablate { .. } => ablate(&ctx),
    }
}

fn make_scene(ctx: &Ctx, spec: Option<&Path>) -> Result<(), CliError> {
    let room = match spec {
        Some(p) => {
            let text = fs::read_to_string(require(p)?).map_err(|e| CliError::from_io(p, e))?;
            toml::from_str::<RoomSection>(&text)
                .map_err(|e| CliError::Config(format!("{}: {}", p.display(), e.message())))?
        }
        None => ctx.config.room.clone(),
    };
    let scene = build_box_room(&room.spec())?;
    let problems = validate_scene(&scene);
    if let Some(first) = problems.first() {
        return Err(CliError::InvalidInput(format!("scene fails validation: {first}")));
    }
    let mut run = ctx.run("make-scene")?;
    if let Some(p) = spec {
        run.input(p);
    }
    save_scene(&scene, &run.path("scene.txt"))?;
    for (id, color) in room.reference_colors.iter().enumerate() {
        let Some(name) = scene.reference_assignment.get(&(id as u32)) else {
            continue;
        };
        save_rgb(&run.path(name), &solid(*color, 64, 64))?;
    }
    ctx.log(format!(
        "scene: {} triangles, {} instances",
        scene.mesh.triangles.len(),
        scene.instance_count
    ));
    run.finish()?;
    Ok(())
}

fn cache_dir(ctx: &Ctx) -> Option<PathBuf> {
    let root = std::env::var_os(CACHE_ENV)?;
    let key = format!(
        "{}|{:?}|{:?}|{}",
        env!("CARGO_PKG_VERSION"),
        ctx.config.pretrain,
        ctx.config.seed,
        ctx.config.pretrain.patterns
    );
    use sha2::{Digest, Sha256};
    let h: String = Sha256::digest(key.as_bytes()).iter().take(8).map(|b| format!("{b:02x}")).collect();
    Some(PathBuf::from(root).join(format!("pretrain-{h}")))
}

fn pretrain(ctx: &Ctx) -> Result<(), CliError> {
    let c = &ctx.config;
    let run = ctx.run("pretrain")?;
    let cache = cache_dir(ctx);
    if let Some(dir) = &cache {
        if dir.join("teacher.wmdl").exists() && dir.join("sr.wmdl").exists() {
            ctx.log(format!("using cached models from {}", dir.display()));
            for name in ["teacher.wmdl", "sr.wmdl", "pretrain.csv"] {
                let from = dir.join(name);
                if from.exists() {
                    fs::copy(&from, run.path(name)).map_err(|e| CliError::from_io(&from, e))?;
                }
            }
            run.finish()?;
            return Ok(());
        }
    }
    ctx.log(format!("pretraining teacher for {} steps", c.pretrain.steps));
    let (teacher, trep) = pretrain_teacher(
        &TeacherDataset::new(c.seed, c.patterns()?),
        UNetConfig::teacher(),
        &c.pretrain_config(false),
    )?;
    ctx.log(format!("teacher held-out loss {:.4} (zero predictor {:.4})", trep.heldout_loss, trep.baseline_loss));
    ctx.log(format!("pretraining SR prior for {} steps", c.pretrain.sr_steps));
    let (sr, srep) = pretrain_sr(&SrDataset::new(c.seed), UNetConfig::sr(), &c.pretrain_config(true))?;
    ctx.log(format!("SR held-out loss {:.4} (zero predictor {:.4})", srep.heldout_loss, srep.baseline_loss));
    teacher.save(&run.path("teacher.wmdl"))?;
    sr.save(&run.path("sr.wmdl"))?;
    let mut csv = String::from("model,step,loss\n");
    for (name, rep) in [("teacher", &trep), ("sr", &srep)] {
        for (k, l) in rep.losses.iter().enumerate() {
            csv.push_str(&format!("{name},{k},{l}\n"));
        }
        csv.push_str(&format!("{name},heldout,{}\n{name},baseline,{}\n", rep.heldout_loss, rep.baseline_loss));
    }
    run.write("pretrain.csv", &csv)?;
    if let Some(dir) = cache {
        if fs::create_dir_all(&dir).is_ok() {
            for name in ["teacher.wmdl", "sr.wmdl", "pretrain.csv"] {
                let _ = fs::copy(run.path(name), dir.join(name));
            }
        }
    }
    run.finish()?;
    Ok(())
}

fn load_model(path: Option<&PathBuf>, kind: ModelKind, what: &str) -> Result<(PathBuf, Arc<UNet>), CliError> {
    let p = path.ok_or_else(|| CliError::missing(what))?;
    let net = UNet::load(require(p)?)?;
    if net.config.kind != kind {
        return Err(CliError::InvalidInput(format!("{} is not a {what} model", p.display())));
    }
    Ok((p.clone(), Arc::new(net)))
}

fn load_scene_input(ctx: &Ctx) -> Result<(PathBuf, Scene), CliError> {
    let p = ctx.config.paths.scene.as_ref().ok_or_else(|| CliError::missing("scene"))?;
    Ok((p.clone(), load_scene(require(p)?)?))
}

/// References from the config, or the scene's assignment resolved next to
/// the scene file.
fn load_references(ctx: &Ctx, scene_path: &Path, scene: &Scene) -> Result<(Vec<PathBuf>, ReferenceSet), CliError> {
    let paths: Vec<PathBuf> = if ctx.config.paths.references.is_empty() {
        let dir = scene_path.parent().unwrap_or(Path::new("."));
        (0..scene.instance_count)
            .map(|i| {
                scene
                    .reference_assignment
                    .get(&i)
                    .map(|name| dir.join(name))
                    .ok_or_else(|| CliError::InvalidInput(format!("instance {i} has no reference image")))
            })
            .collect::<Result<_, _>>()?
    } else {
        ctx.config.paths.references.clone()
    };
    for p in &paths {
        require(p)?;
    }
    let refs = ReferenceSet::load(&paths.iter().map(PathBuf::as_path).collect::<Vec<_>>())?;
    Ok((paths, refs))
}

/// Accept a `.wtfx` file, a checkpoint bundle, or a run dir holding one.
fn resolve_checkpoint(p: &Path) -> Result<PathBuf, CliError> {
    require(p)?;
    if p.is_file() {
        return Ok(p.to_path_buf());
    }
    for c in [p.join("field.wtfx"), p.join("checkpoint").join("field.wtfx")] {
        if c.is_file() {
            return Ok(c);
        }
    }
    Err(CliError::MissingPath(format!("no field checkpoint under {}", p.display())))
}

fn load_field(ctx: &Ctx) -> Result<(PathBuf, TextureField), CliError> {
    let p = ctx.config.paths.checkpoint.as_ref().ok_or_else(|| CliError::missing("checkpoint"))?;
    let file = resolve_checkpoint(p)?;
    let field = TextureField::load(&file)?;
    Ok((file, field))
}

fn progress_printer(quiet: bool, every: u64) -> impl FnMut(&MetricsRow) {
    move |r: &MetricsRow| {
        if !quiet && r.iteration % every.max(1) == 0 {
            let errs: Vec<String> = r
                .color_errors
                .iter()
                .map(|e| e.map_or("-".into(), |v| format!("{v:.3}")))
                .collect();
            eprintln!(
                "iter {} t={:.3} lambda_sr={} adapter_loss={:.4} color_errors=[{}]",
                r.iteration,
                r.t,
                r.lambda_sr,
                r.adapter_loss,
                errs.join(",")
            );
        }
    }
}

fn copy_dir(from: &Path, to: &Path) -> Result<(), CliError> {
    fs::create_dir_all(to).map_err(|e| CliError::from_io(to, e))?;
    for entry in fs::read_dir(from).map_err(|e| CliError::from_io(from, e))? {
        let entry = entry.map_err(|e| CliError::from_io(from, e))?;
        let dst = to.join(entry.file_name());
        fs::copy(entry.path(), &dst).map_err(|e| CliError::from_io(&dst, e))?;
    }
    Ok(())
}

fn optimize(ctx: &Ctx) -> Result<(), CliError> {
    let dc = ctx.config.distill_config()?;
    let (scene_path, scene) = load_scene_input(ctx)?;
    let (ref_paths, refs) = load_references(ctx, &scene_path, &scene)?;
    let (tp, teacher) = load_model(ctx.config.paths.teacher.as_ref(), ModelKind::Teacher, "teacher")?;
    let (sp, sr) = load_model(ctx.config.paths.sr.as_ref(), ModelKind::Sr, "SR")?;
    let mut run = ctx.run("optimize")?;
    for p in [&scene_path, &tp, &sp].into_iter().chain(&ref_paths) {
        run.input(p);
    }
    let bundle = run.path("checkpoint");
    if let Some(from) = &ctx.resume {
        require(from)?;
        let src = if from.join("state.txt").exists() {
            from.clone()
        } else {
            from.join("checkpoint")
        };
        require(&src.join("state.txt"))?;
        run.input(&src);
        copy_dir(&src, &bundle)?;
        ctx.log(format!("resuming from {}", src.display()));
    }
    let every = (dc.iterations / 20).max(1);
    let (field, metrics) = run_optimization(
        scene,
        &refs,
        teacher,
        Some(sr),
        &dc,
        Some(&bundle),
        ctx.resume.is_some(),
        &mut progress_printer(ctx.quiet, every),
    )?;
    field.save(&run.path("field.wtfx"))?;
    run.write("metrics.csv", write_metrics(&metrics))?;
    run.finish()?;
    Ok(())
}

fn bake(ctx: &Ctx) -> Result<(), CliError> {
    let b = &ctx.config.bake;
    if b.resolution == 0 || b.tile == 0 {
        return Err(CliError::Config("bake resolution and tile must be positive".into()));
    }
    let (fp, field) = load_field(ctx)?;
    let mut run = ctx.run("bake")?;
    run.input(&fp);
    let img = field.bake((b.resolution, b.resolution), b.tile, None);
    save_rgb(&run.path("texture.png"), &img)?;
    ctx.log(format!("texture sha256 {}", sha256_file(&run.path("texture.png"))?));
    run.finish()?;
    Ok(())
}

fn render(ctx: &Ctx) -> Result<(), CliError> {
    let r = &ctx.config.render;
    let (fp, field) = load_field(ctx)?;
    let (sp, scene) = load_scene_input(ctx)?;
    let vp = ViewpointConfig {
        image_size: (r.resolution, r.resolution),
        ..Default::default()
    };
    let cameras = sample_viewpoints(&scene, r.views, r.camera_seed.unwrap_or(ctx.config.seed), &vp)?;
    let mut run = ctx.run("render")?;
    run.input(&fp);
    run.input(&sp);
    for (k, cam) in cameras.iter().enumerate() {
        let gb = rasterize(&scene.mesh, cam, cam.image_size)?;
        save_rgb(&run.path(&format!("render_{k:03}.png")), &shade(&gb, &field))?;
    }
    run.finish()?;
    Ok(())
}

fn eval(ctx: &Ctx) -> Result<(), CliError> {
    let e = &ctx.config.eval;
    let dc = ctx.config.distill_config()?;
    let (fp, field) = load_field(ctx)?;
    let (sp, scene) = load_scene_input(ctx)?;
    let (ref_paths, refs) = load_references(ctx, &sp, &scene)?;
    let cameras = eval_cameras(&scene, &dc, e.views, e.camera_seed)?;
    let r = e.bake_resolution;
    let baked = field.bake((r, r), 64, Some(&uv_coverage_mask(&scene.mesh, (r, r))));
    let (report, _) = evaluate(&scene, &field, &baked, false, &refs, &cameras)?;
    let mut run = ctx.run("eval")?;
    for p in [&fp, &sp].into_iter().chain(&ref_paths) {
        run.input(p);
    }
    run.write("eval.csv", report.to_csv())?;
    ctx.log(format!("mean colour error {:.4}", report.mean_color_error()));
    run.finish()?;
    Ok(())
}

fn bench(ctx: &Ctx) -> Result<(), CliError> {
    let b = &ctx.config.bench;
    if b.resolutions.is_empty() || b.resolutions.contains(&0) {
        return Err(CliError::Config("bench resolutions must be positive".into()));
    }
    let mut run = ctx.run("bench")?;
    let field = match &ctx.config.paths.checkpoint {
        Some(_) => {
            let (fp, f) = load_field(ctx)?;
            run.input(&fp);
            f
        }
        None => {
            let dc = ctx.config.distill_config()?;
            TextureField::new(dc.field, dc.field_hidden, ctx.config.seed)?
        }
    };
    let table = bench_bake(&field, &b.resolutions, b.repeats, b.tile);
    run.write("bench.csv", table.to_csv())?;
    ctx.log(format!(
        "monotone={} per_texel_spread={:.2}",
        table.monotone(),
        table.per_texel_spread()
    ));
    run.finish()?;
    Ok(())
}

fn ablate(ctx: &Ctx) -> Result<(), CliError> {
    let dc = ctx.config.distill_config()?;
    let (sp, scene) = load_scene_input(ctx)?;
    let (ref_paths, refs) = load_references(ctx, &sp, &scene)?;
    let (tp, teacher) = load_model(ctx.config.paths.teacher.as_ref(), ModelKind::Teacher, "teacher")?;
    let (srp, sr) = load_model(ctx.config.paths.sr.as_ref(), ModelKind::Sr, "SR")?;
    let e = &ctx.config.eval;
    let options = AblationOptions {
        variants: ctx.config.variants()?,
        eval_views: e.views,
        eval_seed: e.camera_seed,
        bake_resolution: e.bake_resolution,
        sr_pass: SrPass {
            t_start: ctx.config.ablate.sr_t_start,
            steps: ctx.config.ablate.sr_steps,
            ..Default::default()
        },
    };
    let mut run = ctx.run("ablate")?;
    for p in [&sp, &tp, &srp].into_iter().chain(&ref_paths) {
        run.input(p);
    }
    let every = (dc.iterations / 10).max(1);
    let quiet = ctx.quiet;
    let report = run_ablations(&scene, &refs, teacher, sr, &dc, &options, &mut |v: Variant, r: &MetricsRow| {
        if !quiet && r.iteration % every == 0 {
            eprintln!("{} iter {} adapter_loss={:.4}", v.name(), r.iteration, r.adapter_loss);
        }
    })?;
    run.write("ablation.csv", report.to_csv())?;
    for r in &report.results {
        let name = r.variant.name();
        run.write(&format!("eval_{name}.csv"), r.report.to_csv())?;
        save_rgb(&run.path(&format!("baked_{name}.png")), &r.baked)?;
        if !r.renders.is_empty() {
            save_rgb(&run.path(&format!("renders_{name}.png")), &grid(&r.renders, 4, 2)?)?;
        }
    }
    run.finish()?;
    Ok(())
}
