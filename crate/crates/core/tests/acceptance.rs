//! Acceptance suite. Runs every criterion in order, prints one
//! `[PASS]`/`[FAIL]` line per criterion and exits non-zero on any failure.
//!
//! The end-to-end criteria (5 and 6) pretrain the toy teacher and SR
//! models once; set `WEAVE_MODEL_CACHE` to a directory to reuse them across
//! invocations.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::{Duration, Instant};

use weave_core::conditioning::{masked_cross_attention, AttentionWeights, ReferenceSet};
use weave_core::distillation::{
    scene_distiller, vsd_gradient, DistillConfig, Distiller, Draw, Particle, PixelParticle,
    SceneParticle, SrSchedule, TimeSchedule,
};
use weave_core::evaluation::{bench_bake, run_ablations, AblationOptions, AblationReport, Variant};
use weave_core::geometry::{build_box_room, parse_scene, write_scene, BoxSpec, RoomSpec};
use weave_core::image_io::solid;
use weave_core::rng::Stream;
use weave_core::score_models::{
    pretrain_sr, pretrain_teacher, AnalyticGaussian, GaussianAdapter, NoiseSchedule, PatternKind, PretrainConfig,
    SrDataset, TeacherDataset, TrainableScore, UNet, UNetAdapter, UNetConfig,
};
use weave_core::{HashGridConfig, Scene, Tensor, TextureField};

// Tolerances and budgets.
const ATTENTION_TOL: f64 = 1e-6;
const HAND_CASE_TOL: f64 = 1e-15;
const FD_REL_TOL: f64 = 1e-3;
const FD_ABS_FLOOR: f64 = 1e-9;
const ORACLE_MAD: f64 = 0.05;
const ORACLE_ITERATIONS: u64 = 2000;
const COLOR_TOL: f64 = 0.1;
const E2E_ITERATIONS: u64 = 3000;
const TILE_TOL: f64 = 1e-6;
const BAKE_BAND: f64 = 3.0;
const KS_ALPHA: f64 = 0.01;
const KS_DRAWS: usize = 5000;

const RED: [f64; 3] = [0.9, 0.1, 0.1];
const BLUE: [f64; 3] = [0.1, 0.1, 0.9];

type Outcome = Result<String, String>;

fn check(cond: bool, msg: String) -> Result<(), String> {
    if cond { Ok(()) } else { Err(msg) }
}

fn within(elapsed: Duration, budget: Duration, what: &str) -> Result<(), String> {
    check(
        elapsed <= budget,
        format!("{what} took {:.1}s, budget {:.0}s", elapsed.as_secs_f64(), budget.as_secs_f64()),
    )
}

fn toy_refs() -> ReferenceSet {
    ReferenceSet::from_images(vec![solid(RED, 32, 32), solid(BLUE, 32, 32)]).unwrap()
}

fn random_weights_net(config: UNetConfig, seed: u64) -> Arc<UNet> {
    let mut net = UNet::new(config, seed).unwrap();
    net.pretrained = true;
    Arc::new(net)
}

fn random_tensor(shape: &[usize], rng: &mut Stream) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, rng.normals(n)).unwrap()
}

/// Room with random size and one or two random boxes.
fn random_room(seed: u64) -> Scene {
    let mut rng = Stream::new(seed, 77);
    let size = [rng.uniform(3.0, 5.0) as f32, rng.uniform(2.5, 3.5) as f32, rng.uniform(3.0, 5.0) as f32];
    let mut spec = RoomSpec::single_instance(size, 1024);
    for b in 0..1 + rng.index(2) {
        let ext = [rng.uniform(0.6, 1.4), rng.uniform(0.4, 1.2), rng.uniform(0.6, 1.4)];
        let x0 = rng.uniform(0.3, size[0] as f64 - ext[0] - 0.3);
        let z0 = rng.uniform(0.3, size[2] as f64 - ext[2] - 0.3);
        spec.furniture.push(BoxSpec {
            min: [x0 as f32, 0.0, z0 as f32],
            max: [(x0 + ext[0]) as f32, ext[1] as f32, (z0 + ext[2]) as f32],
            instance: b as u32 + 1,
        });
    }
    build_box_room(&spec).unwrap()
}

fn small_field() -> HashGridConfig {
    HashGridConfig {
        levels: 4,
        table_log2: 10,
        ..Default::default()
    }
}

// ---------------------------------------------------------------- 1

/// Textbook single-head cross-attention, written out independently.
fn plain_attention(z: &Tensor, f: &Tensor, w: &AttentionWeights) -> Vec<f64> {
    let (s, dz) = (z.shape()[0], z.shape()[1]);
    let (kn, df) = (f.shape()[0], f.shape()[1]);
    let dk = w.w_q.shape()[1];
    let dv = w.w_v.shape()[1];
    let proj = |x: &[f64], rows: usize, inner: usize, m: &Tensor, cols: usize| {
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[r * cols + c] = (0..inner).map(|i| x[r * inner + i] * m.data()[i * cols + c]).sum();
            }
        }
        out
    };
    let q = proj(z.data(), s, dz, &w.w_q, dk);
    let k = proj(f.data(), kn, df, &w.w_k, dk);
    let v = proj(f.data(), kn, df, &w.w_v, dv);
    let mut out = vec![0.0; s * dv];
    for p in 0..s {
        let logits: Vec<f64> = (0..kn)
            .map(|j| (0..dk).map(|c| q[p * dk + c] * k[j * dk + c]).sum::<f64>() / (dk as f64).sqrt())
            .collect();
        let z: f64 = logits.iter().map(|l| l.exp()).sum();
        for c in 0..dv {
            out[p * dv + c] = (0..kn).map(|j| logits[j].exp() / z * v[j * dv + c]).sum();
        }
    }
    out
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = Stream::new(1, 0);
    let mut worst: f64 = 0.0;
    for trial in 0..20 {
        let (s, dz, kn, df, dk, dv) = (6 + trial % 5, 5, 3 + trial % 4, 4, 3, 2);
        let z = random_tensor(&[s, dz], &mut rng);
        let f = random_tensor(&[kn, df], &mut rng);
        let w = AttentionWeights {
            w_q: random_tensor(&[dz, dk], &mut rng),
            w_k: random_tensor(&[df, dk], &mut rng),
            w_v: random_tensor(&[df, dv], &mut rng),
        };
        let ours = masked_cross_attention(&z, &[f.clone()], &[vec![1.0; s]], &w, false).map_err(|e| e.to_string())?;
        let want = plain_attention(&z, &f, &w);
        worst = worst.max(ours.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max));

        let zero = masked_cross_attention(&z, &[f.clone(), f], &[vec![0.0; s], vec![0.0; s]], &w, false)
            .map_err(|e| e.to_string())?;
        check(zero.data().iter().all(|&v| v == 0.0), "zero masks gave a nonzero output".into())?;
    }
    check(worst < ATTENTION_TOL, format!("N=1 all-ones mask differs from plain attention by {worst:e}"))?;

    // Two positions, one reference with two scalar keys. Position 0 has
    // logits (0, ln 3) so the softmax is (1/4, 3/4); position 1 has equal
    // logits. Values are (0, 1), so the outputs are 3/4 and 1/2; the second
    // reference is masked out at position 0 and the 1/N average halves both.
    let z = Tensor::new(&[2, 1], vec![3f64.ln(), 0.0]).unwrap();
    let w = AttentionWeights {
        w_q: Tensor::new(&[1, 1], vec![1.0]).unwrap(),
        w_k: Tensor::new(&[1, 1], vec![1.0]).unwrap(),
        w_v: Tensor::new(&[1, 1], vec![1.0]).unwrap(),
    };
    let f = Tensor::new(&[2, 1], vec![0.0, 1.0]).unwrap();
    let g = Tensor::new(&[1, 1], vec![2.0]).unwrap();
    let single = masked_cross_attention(&z, &[f.clone()], &[vec![1.0, 1.0]], &w, false).map_err(|e| e.to_string())?;
    let pair = masked_cross_attention(&z, &[f, g], &[vec![1.0, 1.0], vec![0.0, 1.0]], &w, false).map_err(|e| e.to_string())?;
    let hand_single = [0.75, 0.5];
    let hand_pair = [0.75 / 2.0, (0.5 + 2.0) / 2.0];
    let hand_err = single
        .data()
        .iter()
        .zip(&hand_single)
        .chain(pair.data().iter().zip(&hand_pair))
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    check(hand_err <= HAND_CASE_TOL, format!("hand case off by {hand_err:e}"))?;
    within(start.elapsed(), Duration::from_secs(1), "attention checks")?;
    Ok(format!(
        "masked cross-attention reductions hold (max dev {worst:.1e}, hand case dev {hand_err:.1e})"
    ))
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let teacher = random_weights_net(UNetConfig::teacher(), 21);
    let refs = ReferenceSet::from_images(vec![
        solid(RED, 32, 32),
        solid(BLUE, 32, 32),
        solid([0.2, 0.8, 0.3], 32, 32),
    ])
    .unwrap();
    let schedule = NoiseSchedule::default();
    let mut rng = Stream::new(2, 0);
    let mut draws = 0;
    for scene_seed in 0..10 {
        let scene = random_room(scene_seed);
        let n = scene.instance_count;
        let refs = ReferenceSet::from_images(refs.images[..n as usize].to_vec()).unwrap();
        let config = DistillConfig {
            viewpoints: 10,
            render_size: 32,
            field: small_field(),
            field_hidden: 16,
            seed: scene_seed,
            ..DistillConfig::scaled(100)
        };
        let mut particle = SceneParticle::new(scene, &refs, &config).map_err(|e| e.to_string())?;
        for v in particle.params_mut() {
            *v += 0.1 * rng.normal() as f32;
        }
        let adapter = UNetAdapter::new(teacher.clone(), 4, 1e-4, scene_seed).unwrap();
        for view in 0..10 {
            let r = particle.render(view).map_err(|e| e.to_string())?;
            let draw = Draw {
                iteration: 0,
                t: rng.uniform(0.02, 0.98),
                eps: random_tensor(r.latent.shape(), &mut rng),
            };
            let g = vsd_gradient(&particle, &r, teacher.as_ref(), &adapter, &schedule, &draw).map_err(|e| e.to_string())?;
            let nonzero = g.iter().filter(|&&v| v != 0.0).count();
            check(nonzero == 0, format!("scene {scene_seed} view {view}: {nonzero} nonzero gradient entries"))?;
            draws += 1;
        }
    }
    within(start.elapsed(), Duration::from_secs(30), "fixpoint draws")?;
    Ok(format!("VSD gradient is exactly zero with zero adapter deltas on {draws} draws"))
}

// ---------------------------------------------------------------- 3

/// Central difference in parameter `i` of a copy of `obj`, divided by the
/// step actually stored in f32.
fn fd<T: Clone>(obj: &T, i: usize, params: fn(&mut T) -> &mut [f32], f: impl Fn(&T) -> f64) -> f64 {
    let mut probe = obj.clone();
    let orig = params(&mut probe)[i];
    params(&mut probe)[i] = orig + 1e-3;
    let up = params(&mut probe)[i] as f64;
    let fp = f(&probe);
    params(&mut probe)[i] = orig - 1e-3;
    let down = params(&mut probe)[i] as f64;
    let fm = f(&probe);
    (fp - fm) / (up - down)
}

/// Relative error; entries where both derivatives vanish count as agreeing.
fn rel_err(fd: f64, an: f64) -> f64 {
    let scale = fd.abs().max(an.abs());
    if scale < FD_ABS_FLOOR {
        0.0
    } else {
        (fd - an).abs() / scale
    }
}

fn criterion_3() -> Outcome {
    let start = Instant::now();
    let mut rng = Stream::new(3, 0);

    // (a) field sampling
    let mut field = TextureField::new(small_field(), 16, 4).unwrap();
    for v in field.params.data_mut() {
        *v += 0.05 * rng.normal() as f32;
    }
    let uvs: Vec<[f64; 2]> = (0..40).map(|_| [rng.uniform(0.0, 1.0), rng.uniform(0.0, 1.0)]).collect();
    let weights: Vec<[f64; 3]> = (0..40).map(|_| [rng.normal(), rng.normal(), rng.normal()]).collect();
    let objective = |f: &TextureField| -> f64 {
        f.sample(&uvs).iter().zip(&weights).map(|(c, w)| (0..3).map(|k| c[k] * w[k]).sum::<f64>()).sum()
    };
    let grad = field.backward(&uvs, &weights);
    let mut worst_a: f64 = 0.0;
    let n = field.params.len();
    let mut indices: Vec<usize> = (0..30).map(|_| rng.index(n)).collect();
    // make sure table entries that the samples actually touch are covered
    indices.extend(grad.iter().enumerate().filter(|(_, g)| g.abs() > 1e-3).map(|(i, _)| i).take(30));
    for &i in &indices {
        let fd = fd(&field, i, |f| f.params.data_mut(), objective);
        worst_a = worst_a.max(rel_err(fd, grad[i]));
    }
    check(worst_a < FD_REL_TOL, format!("(a) field gradient rel err {worst_a:e}"))?;

    // (b) render -> latent -> noised latent
    let scene = build_box_room(&RoomSpec::toy()).unwrap();
    let config = DistillConfig {
        viewpoints: 3,
        render_size: 32,
        field: small_field(),
        field_hidden: 16,
        ..DistillConfig::scaled(100)
    };
    let mut particle = SceneParticle::new(scene, &toy_refs(), &config).unwrap();
    for v in particle.params_mut() {
        *v += 0.05 * rng.normal() as f32;
    }
    let schedule = NoiseSchedule::default();
    let t = 0.37;
    let r = particle.render(1).unwrap();
    let eps = random_tensor(r.latent.shape(), &mut rng);
    let probe_dir = random_tensor(r.latent.shape(), &mut rng);
    let noised = |p: &SceneParticle| -> f64 {
        let r = p.render(1).unwrap();
        let x_t = schedule.add_noise(&r.latent, t, &eps).unwrap();
        x_t.data().iter().zip(probe_dir.data()).map(|(a, b)| a * b).sum()
    };
    let grad: Vec<f64> = particle
        .backward(&r, &probe_dir)
        .unwrap()
        .into_iter()
        .map(|g| g * schedule.alpha(t))
        .collect();
    let n = grad.len();
    let mut indices: Vec<usize> = (0..20).map(|_| rng.index(n)).collect();
    indices.extend(grad.iter().enumerate().filter(|(_, g)| g.abs() > 1e-2).map(|(i, _)| i).take(20));
    let mut worst_b: f64 = 0.0;
    for &i in &indices {
        let fd = fd(&particle, i, |p| p.params_mut(), noised);
        worst_b = worst_b.max(rel_err(fd, grad[i]));
    }
    check(worst_b < FD_REL_TOL, format!("(b) render path rel err {worst_b:e}"))?;

    // (c) adapter parameters under the denoising objective
    let base = random_weights_net(UNetConfig::teacher(), 5);
    let mut adapter = UNetAdapter::new(base, 2, 1e-4, 6).unwrap();
    for v in adapter.params_mut() {
        *v += 0.02 * rng.normal() as f32;
    }
    let x_t = schedule.add_noise(&r.latent, 0.4, &eps).unwrap();
    let (_, g) = adapter.loss_and_grad(&x_t, 0.4, &eps, &r.cond).unwrap();
    let mut worst_c: f64 = 0.0;
    let n = g.len();
    let mut indices: Vec<usize> = (0..8).map(|_| rng.index(n)).collect();
    let mut by_size: Vec<usize> = (0..n).collect();
    by_size.sort_by(|&a, &b| g[b].abs().total_cmp(&g[a].abs()));
    indices.extend(by_size.iter().step_by(n / 8 / 4 + 1).take(8));
    for &i in &indices {
        let fd = fd(&adapter, i, |a| a.params_mut(), |a| a.loss_and_grad(&x_t, 0.4, &eps, &r.cond).unwrap().0);
        worst_c = worst_c.max(rel_err(fd, g[i]));
    }
    let largest = g[by_size[0]].abs();
    check(worst_c < FD_REL_TOL, format!("(c) adapter rel err {worst_c:e}"))?;
    within(start.elapsed(), Duration::from_secs(120), "finite differences")?;
    Ok(format!(
        "finite differences agree: field {worst_a:.1e}, render path {worst_b:.1e}, adapter {worst_c:.1e} (largest |g| {largest:.1e})"
    ))
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let start = Instant::now();
    let mut rng = Stream::new(4, 1);
    let shape = [3, 8, 8];
    let n = 3 * 64;
    let mu = Tensor::new(&shape, (0..n).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap();
    let init = Tensor::new(&shape, (0..n).map(|_| rng.uniform(0.0, 1.0)).collect()).unwrap();
    let teacher = Arc::new(AnalyticGaussian::new(mu.clone(), 0.2));
    let adapter = GaussianAdapter::new(teacher.clone(), 5e-2);
    let mut config = DistillConfig::scaled(ORACLE_ITERATIONS);
    config.sr.lambda = 0.0;
    let mad = |t: &Tensor| t.zip_map(&mu, |a, b| (a - b).abs()).unwrap().sum() / n as f64;
    let before = mad(&init);
    let mut d = Distiller::new(config, PixelParticle::new(&init), teacher, None, Box::new(adapter)).map_err(|e| e.to_string())?;
    d.run(None, &mut |_| {}).map_err(|e| e.to_string())?;
    let after = mad(&d.particle.tensor());
    check(after < ORACLE_MAD, format!("mean abs deviation {after:.4} (from {before:.4})"))?;
    within(start.elapsed(), Duration::from_secs(60), "oracle run")?;
    Ok(format!(
        "Gaussian oracle: mean abs deviation {before:.3} -> {after:.4} in {ORACLE_ITERATIONS} iterations ({:.1}s)",
        start.elapsed().as_secs_f64()
    ))
}

// ---------------------------------------------------------------- 5 and 6

struct Toy {
    teacher: Arc<UNet>,
    sr: Arc<UNet>,
    base: DistillConfig,
}

fn toy_models() -> Toy {
    let cache = std::env::var_os("WEAVE_MODEL_CACHE").map(PathBuf::from);
    let load = |name: &str| {
        let p = cache.as_ref()?.join(name);
        UNet::load(&p).ok()
    };
    let teacher = load("teacher.wmdl").unwrap_or_else(|| {
        let (net, _) = pretrain_teacher(&TeacherDataset::new(11, PatternKind::Flat), UNetConfig::teacher(), &PretrainConfig::default()).unwrap();
        if let Some(dir) = &cache {
            std::fs::create_dir_all(dir).unwrap();
            net.save(&dir.join("teacher.wmdl")).unwrap();
        }
        net
    });
    let sr = load("sr.wmdl").unwrap_or_else(|| {
        let (net, _) = pretrain_sr(&SrDataset::new(12), UNetConfig::sr(), &PretrainConfig::sr()).unwrap();
        if let Some(dir) = &cache {
            std::fs::create_dir_all(dir).unwrap();
            net.save(&dir.join("sr.wmdl")).unwrap();
        }
        net
    });
    Toy {
        teacher: Arc::new(teacher),
        sr: Arc::new(sr),
        base: DistillConfig {
            viewpoints: 500,
            lr_adapter: 1e-3,
            ..DistillConfig::scaled(E2E_ITERATIONS)
        },
    }
}

fn ablate(toy: &Toy, variants: Vec<Variant>) -> Result<AblationReport, String> {
    let scene = build_box_room(&RoomSpec::toy()).unwrap();
    let options = AblationOptions {
        variants,
        ..Default::default()
    };
    run_ablations(&scene, &toy_refs(), toy.teacher.clone(), toy.sr.clone(), &toy.base, &options, &mut |_, _| {})
        .map_err(|e| e.to_string())
}

fn criterion_5(toy: &Toy) -> (Outcome, Option<AblationReport>) {
    let start = Instant::now();
    let report = match ablate(toy, vec![Variant::Full]) {
        Ok(r) => r,
        Err(e) => return (Err(e), None),
    };
    let elapsed = start.elapsed();
    let full = &report.results[0].report;
    let errors: Vec<Option<f64>> = full.instances.iter().map(|s| s.color_error).collect();
    let outcome = (|| {
        for (i, e) in errors.iter().enumerate() {
            let e = e.ok_or(format!("instance {i} never visible"))?;
            check(e < COLOR_TOL, format!("instance {i} color error {e:.4} (all: {errors:.4?})"))?;
        }
        within(elapsed, Duration::from_secs(30 * 60), "toy run")?;
        Ok(format!(
            "toy room after {E2E_ITERATIONS} iterations: color errors {errors:.4?} ({:.0}s)",
            elapsed.as_secs_f64()
        ))
    })();
    (outcome, Some(report))
}

fn criterion_6(toy: &Toy, full: Option<&AblationReport>) -> Outcome {
    let full = full.and_then(|r| r.get(Variant::Full)).ok_or("full run unavailable")?;
    let others = ablate(toy, vec![Variant::NoMultiRef, Variant::NoSr, Variant::PostSr])?;
    let get = |v| others.get(v).ok_or(format!("{} missing", v.name()));
    let (multi, nosr, post) = (get(Variant::NoMultiRef)?, get(Variant::NoSr)?, get(Variant::PostSr)?);
    let c_full = full.report.mean_color_error();
    let c_multi = multi.report.mean_color_error();
    let summary = format!(
        "color full {c_full:.4} vs no-multiref {c_multi:.4}; render sharpness full {:.5} vs no-sr {:.5}; \
         baked sharpness full {:.5} vs post-sr {:.5}",
        full.report.render_sharpness, nosr.report.render_sharpness, full.report.baked_sharpness, post.report.baked_sharpness
    );
    check(c_full < c_multi, format!("full does not beat no-multiref on color error: {summary}"))?;
    check(
        full.report.render_sharpness > nosr.report.render_sharpness,
        format!("full does not beat no-sr on sharpness: {summary}"),
    )?;
    check(
        full.report.baked_sharpness > post.report.baked_sharpness,
        format!("full does not beat post-sr on baked sharpness: {summary}"),
    )?;
    Ok(summary)
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let start = Instant::now();
    let field = TextureField::with_defaults(7);
    let whole = field.bake((1024, 1024), 1024, None);
    let tiled = field.bake((1024, 1024), 256, None);
    let odd = field.bake((1024, 1024), 300, None);
    let dev = whole.max_abs_diff(&tiled).max(whole.max_abs_diff(&odd));
    check(dev <= TILE_TOL, format!("tiled bake deviates by {dev:e}"))?;
    let table = bench_bake(&field, &[1024, 2048, 4096], 1, 256);
    let per: Vec<String> = table.rows.iter().map(|r| format!("{}: {:.1}ns", r.resolution, r.per_texel() * 1e9)).collect();
    check(table.monotone(), format!("timings not monotone: {per:?}"))?;
    check(
        table.near_linear(BAKE_BAND),
        format!("per-texel spread {:.2} exceeds {BAKE_BAND}: {per:?}", table.per_texel_spread()),
    )?;
    within(start.elapsed(), Duration::from_secs(120), "baking")?;
    Ok(format!(
        "tiled == untiled (dev {dev:.0e}); per-texel {per:?}, spread {:.2}",
        table.per_texel_spread()
    ))
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let config = DistillConfig {
        viewpoints: 6,
        render_size: 32,
        checkpoint_every: 0,
        field: small_field(),
        field_hidden: 16,
        sr: SrSchedule { start: 3, lambda: 1.2 },
        ..DistillConfig::scaled(8)
    };
    let teacher = random_weights_net(UNetConfig::teacher(), 81);
    let sr = random_weights_net(UNetConfig::sr(), 82);
    let scene = build_box_room(&RoomSpec::toy()).unwrap();
    let make = |c: &DistillConfig| scene_distiller(scene.clone(), &toy_refs(), teacher.clone(), Some(sr.clone()), c).unwrap();

    let mut straight = make(&config);
    straight.run(None, &mut |_| {}).map_err(|e| e.to_string())?;
    let ck = dir.path().join("bundle");
    let mut first = make(&DistillConfig {
        iterations: 5,
        ..config.clone()
    });
    first.run(Some(&ck), &mut |_| {}).map_err(|e| e.to_string())?;
    let mut resumed = make(&config);
    resumed.restore(&ck).map_err(|e| e.to_string())?;
    resumed.run(Some(&ck), &mut |_| {}).map_err(|e| e.to_string())?;
    check(resumed.particle.params() == straight.particle.params(), "texture differs after resume".into())?;
    check(resumed.adapter.params() == straight.adapter.params(), "adapter differs after resume".into())?;
    check(resumed.metrics == straight.metrics, "metrics differ after resume".into())?;

    let text = write_scene(&scene);
    let back = parse_scene(&text).map_err(|e| e.to_string())?;
    check(back == scene && write_scene(&back) == text, "scene file does not round-trip".into())?;
    let path = dir.path().join("teacher.wmdl");
    teacher.save(&path).map_err(|e| e.to_string())?;
    let loaded = UNet::load(&path).map_err(|e| e.to_string())?;
    check(loaded.params == teacher.params && loaded.config == teacher.config, "model file does not round-trip".into())?;
    let field_path = dir.path().join("field.wtfx");
    straight.particle.field.save(&field_path).map_err(|e| e.to_string())?;
    check(
        TextureField::load(&field_path).map_err(|e| e.to_string())? == straight.particle.field,
        "field file does not round-trip".into(),
    )?;
    let bytes = straight.adapter.to_bytes();
    let mut other = UNetAdapter::new(teacher.clone(), config.adapter_rank, 1e-4, 99).unwrap();
    other.load_bytes(&bytes).map_err(|e| e.to_string())?;
    check(other.params() == straight.adapter.params(), "adapter file does not round-trip".into())?;
    within(start.elapsed(), Duration::from_secs(60), "persistence checks")?;
    Ok("resume reproduces the uninterrupted run bit for bit; scene, model, field and adapter files round-trip".into())
}

// ---------------------------------------------------------------- 9

/// Asymptotic Kolmogorov distribution tail with the Stephens correction.
fn ks_p_value(d: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    let mut p = 0.0;
    for j in 1..=100 {
        let term = 2.0 * (-1f64).powi(j - 1) * (-2.0 * (j as f64 * lambda).powi(2)).exp();
        p += term;
        if term.abs() < 1e-12 {
            break;
        }
    }
    p.clamp(0.0, 1.0)
}

fn ks_statistic(mut xs: Vec<f64>, cdf: impl Fn(f64) -> f64) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).max((i + 1) as f64 / n - f)
        })
        .fold(0.0, f64::max)
}

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let time = TimeSchedule::default();
    let mut rng = Stream::new(9, 2);
    let phases = [
        ("warm-up", 0..time.anneal_start),
        ("anneal", time.anneal_start..time.anneal_end),
        ("final", time.anneal_end..time.anneal_end + KS_DRAWS as u64),
    ];
    let mut report = Vec::new();
    for (name, range) in phases {
        let ks: Vec<u64> = range.clone().step_by(((range.end - range.start) as usize / KS_DRAWS).max(1)).take(KS_DRAWS).collect();
        check(ks.len() == KS_DRAWS, format!("{name}: {} draws", ks.len()))?;
        let draws: Vec<f64> = ks.iter().map(|&k| time.sample(k, &mut rng)).collect();
        // Mixture of U(t_min, upper(k)) over the iterations drawn, with the
        // bound recomputed from the schedule constants.
        let uppers: Vec<f64> = ks
            .iter()
            .map(|&k| {
                let f = ((k as f64 - 5000.0) / 5000.0).clamp(0.0, 1.0);
                0.98 - f * (0.98 - 0.5)
            })
            .collect();
        let cdf = |x: f64| uppers.iter().map(|u| ((x - 0.02) / (u - 0.02)).clamp(0.0, 1.0)).sum::<f64>() / uppers.len() as f64;
        let d = ks_statistic(draws, cdf);
        let p = ks_p_value(d, KS_DRAWS);
        check(p > KS_ALPHA, format!("{name}: KS D = {d:.4}, p = {p:.4}"))?;
        report.push(format!("{name} p={p:.3}"));
    }

    let sr = SrSchedule::default();
    check(sr.lambda(4999) == 0.0 && sr.lambda(5000) == 1.2, "lambda boundary misplaced".into())?;
    // and in a live run with the boundary moved to iteration 3
    let config = DistillConfig {
        viewpoints: 4,
        render_size: 32,
        checkpoint_every: 0,
        field: small_field(),
        field_hidden: 16,
        sr: SrSchedule { start: 3, lambda: 1.2 },
        ..DistillConfig::scaled(5)
    };
    let scene = build_box_room(&RoomSpec::toy()).unwrap();
    let mut d = scene_distiller(
        scene,
        &toy_refs(),
        random_weights_net(UNetConfig::teacher(), 91),
        Some(random_weights_net(UNetConfig::sr(), 92)),
        &config,
    )
    .map_err(|e| e.to_string())?;
    d.run(None, &mut |_| {}).map_err(|e| e.to_string())?;
    let lambdas: Vec<f64> = d.metrics.iter().map(|r| r.lambda_sr).collect();
    check(lambdas == [0.0, 0.0, 0.0, 1.2, 1.2], format!("live lambda sequence {lambdas:?}"))?;
    within(start.elapsed(), Duration::from_secs(10), "schedule checks")?;
    Ok(format!("timestep KS tests pass ({}); lambda 0 -> 1.2 at the boundary", report.join(", ")))
}

fn main() {
    // `cargo test -- --list` and filters should not trigger the long run.
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        println!("acceptance: test");
        return;
    }
    // Numeric arguments select criteria, e.g. `-- 1 2 9`.
    let only: Vec<u32> = args.iter().filter_map(|a| a.parse().ok()).collect();
    let want = |n: u32| only.is_empty() || only.contains(&n);
    let mut outcomes: Vec<(u32, Outcome)> = Vec::new();
    let mut record = |n: u32, o: Outcome| {
        match &o {
            Ok(msg) => println!("[PASS] criterion {n}: {msg}"),
            Err(msg) => println!("[FAIL] criterion {n}: {msg}"),
        }
        outcomes.push((n, o));
    };
    let quick: [(u32, fn() -> Outcome); 4] = [(1, criterion_1), (2, criterion_2), (3, criterion_3), (4, criterion_4)];
    for (n, f) in quick {
        if want(n) {
            record(n, f());
        }
    }
    if want(5) || want(6) {
        let toy = toy_models();
        let (o5, full) = criterion_5(&toy);
        if want(5) {
            record(5, o5);
        }
        if want(6) {
            record(6, criterion_6(&toy, full.as_ref()));
        }
    }
    let rest: [(u32, fn() -> Outcome); 3] = [(7, criterion_7), (8, criterion_8), (9, criterion_9)];
    for (n, f) in rest {
        if want(n) {
            record(n, f());
        }
    }
    let failed: Vec<u32> = outcomes.iter().filter(|(_, o)| o.is_err()).map(|(n, _)| *n).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", outcomes.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
