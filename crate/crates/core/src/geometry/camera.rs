use super::mesh::Scene;
use super::{cross, dot, normalize, sub, Vec3};
use crate::error::{Error, Result};
use crate::raster::rasterize;
use crate::rng::Stream;

/// Pinhole camera looking from `position` at `target`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Camera {
    pub position: [f64; 3],
    pub target: [f64; 3],
    pub up: [f64; 3],
    /// Vertical field of view in radians.
    pub vertical_fov: f64,
    pub image_size: (usize, usize),
    pub near: f64,
    pub far: f64,
}

impl Camera {
    pub fn look_at(position: Vec3, target: Vec3, image_size: (usize, usize)) -> Self {
        Self {
            position,
            target,
            up: [0.0, 1.0, 0.0],
            vertical_fov: 60f64.to_radians(),
            image_size,
            near: 0.01,
            far: 100.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.near > 0.0) || !(self.far > self.near) {
            return Err(Error::InvalidArgument(format!(
                "camera clip range ({}, {}) invalid",
                self.near, self.far
            )));
        }
        if self.position == self.target {
            return Err(Error::InvalidArgument("camera position equals target".into()));
        }
        let f = normalize(sub(self.target, self.position));
        if cross(f, self.up).iter().all(|v| v.abs() < 1e-9) {
            return Err(Error::InvalidArgument("camera up is parallel to view direction".into()));
        }
        Ok(())
    }

    /// Orthonormal camera frame `(right, up, forward)`.
    pub fn basis(&self) -> [Vec3; 3] {
        let f = normalize(sub(self.target, self.position));
        let r = normalize(cross(f, self.up));
        let u = cross(r, f);
        [r, u, f]
    }

    /// World point to camera space `(x right, y up, z forward depth)`.
    pub fn to_camera(&self, p: Vec3) -> Vec3 {
        let [r, u, f] = self.basis();
        let d = sub(p, self.position);
        [dot(d, r), dot(d, u), dot(d, f)]
    }

    pub fn with_size(mut self, w: usize, h: usize) -> Self {
        self.image_size = (w, h);
        self
    }
}

/// Knobs for [`sample_viewpoints`].
#[derive(Clone, Debug, PartialEq)]
pub struct ViewpointConfig {
    pub image_size: (usize, usize),
    /// Shell radii as fractions of the bounds' half diagonal.
    pub shell_fractions: [f64; 3],
    pub jitter: f64,
    pub max_retries: usize,
    pub min_coverage: f64,
    /// Resolution of the coverage probe render.
    pub probe_size: usize,
    /// Keep cameras this far from any wall or furniture face.
    pub clearance: f64,
}

impl Default for ViewpointConfig {
    fn default() -> Self {
        Self {
            image_size: (64, 64),
            shell_fractions: [0.5, 0.7, 0.9],
            jitter: 0.15,
            max_retries: 100,
            min_coverage: 0.01,
            probe_size: 64,
            clearance: 0.05,
        }
    }
}

const GOLDEN_ANGLE: f64 = 2.399_963_229_728_653;

/// Place `count` cameras on three concentric spherical shells around the
/// bounds centre, using Fibonacci-lattice directions jittered by `seed`.
/// Positions must lie inside the bounds and outside every obstacle; targets
/// are uniform in the bounds interior.
pub fn sample_viewpoints(
    scene: &Scene,
    count: usize,
    seed: u64,
    config: &ViewpointConfig,
) -> Result<Vec<Camera>> {
    if count == 0 {
        return Err(Error::InvalidArgument("viewpoint count must be >= 1".into()));
    }
    let mut rng = Stream::new(seed, 0x7669_6577);
    let center = scene.bounds.center();
    let half = scene.bounds.half_diagonal();
    let obstacles = scene.obstacles();
    let probe = (config.probe_size, config.probe_size);
    let mut cameras = Vec::with_capacity(count);
    for k in 0..count {
        let z = 1.0 - 2.0 * (k as f64 + 0.5) / count as f64;
        let rho = (1.0 - z * z).max(0.0).sqrt();
        let phi = k as f64 * GOLDEN_ANGLE;
        let lattice = [rho * phi.cos(), z, rho * phi.sin()];
        let mut last_failure = "no attempt";
        let mut placed = None;
        for attempt in 0..=config.max_retries {
            let (dir, shell) = if attempt == 0 {
                let j = [rng.normal(), rng.normal(), rng.normal()];
                let d = [0, 1, 2].map(|i| lattice[i] + config.jitter * j[i]);
                (normalize(d), k % 3)
            } else {
                let d = [rng.normal(), rng.normal(), rng.normal()];
                (normalize(d), rng.index(3))
            };
            let radius = config.shell_fractions[shell] * half;
            let pos = [0, 1, 2].map(|i| center[i] + radius * dir[i]);
            let target = [0, 1, 2].map(|i| {
                let lo = scene.bounds.min[i] as f64;
                let hi = scene.bounds.max[i] as f64;
                let m = 0.05 * (hi - lo);
                rng.uniform(lo + m, hi - m)
            });
            if !scene.bounds.contains(pos, config.clearance) {
                last_failure = "position outside scene bounds";
                continue;
            }
            if obstacles.iter().any(|o| {
                (0..3).all(|i| {
                    pos[i] > o.min[i] as f64 - config.clearance
                        && pos[i] < o.max[i] as f64 + config.clearance
                })
            }) {
                last_failure = "position inside furniture";
                continue;
            }
            let cam = Camera::look_at(pos, target, config.image_size);
            let f = sub(target, pos);
            if dot(f, f).sqrt() < 1e-3 || cam.validate().is_err() {
                last_failure = "degenerate view direction";
                continue;
            }
            let gb = rasterize(&scene.mesh, &cam.with_size(probe.0, probe.1), probe)?;
            if gb.coverage() < config.min_coverage {
                last_failure = "coverage below minimum";
                continue;
            }
            placed = Some(cam);
            break;
        }
        match placed {
            Some(c) => cameras.push(c),
            None => {
                return Err(Error::Viewpoints {
                    index: k,
                    constraint: last_failure.to_string(),
                })
            }
        }
    }
    Ok(cameras)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_box_room, RoomSpec};

    #[test]
    fn viewpoints_are_deterministic_and_in_free_space() {
        let scene = build_box_room(&RoomSpec::toy()).unwrap();
        let cfg = ViewpointConfig::default();
        let a = sample_viewpoints(&scene, 60, 7, &cfg).unwrap();
        let b = sample_viewpoints(&scene, 60, 7, &cfg).unwrap();
        assert_eq!(a, b);
        let obstacles = scene.obstacles();
        for c in &a {
            assert!(scene.bounds.contains(c.position, 0.0));
            for o in &obstacles {
                assert!(!(0..3).all(|i| c.position[i] > o.min[i] as f64
                    && c.position[i] < o.max[i] as f64));
            }
        }
        let other = sample_viewpoints(&scene, 60, 8, &cfg).unwrap();
        assert_ne!(a, other);
    }

    #[test]
    fn single_camera_in_empty_room_sees_something() {
        let scene = build_box_room(&RoomSpec::single_instance([2.0, 2.0, 2.0], 256)).unwrap();
        let cams = sample_viewpoints(&scene, 1, 0, &ViewpointConfig::default()).unwrap();
        assert_eq!(cams.len(), 1);
        let gb = rasterize(&scene.mesh, &cams[0], (64, 64)).unwrap();
        assert!(gb.coverage() > 0.0);
    }

    #[test]
    fn impossible_constraint_names_itself() {
        let scene = build_box_room(&RoomSpec::single_instance([1.0, 1.0, 1.0], 256)).unwrap();
        let cfg = ViewpointConfig {
            clearance: 10.0,
            max_retries: 3,
            ..Default::default()
        };
        match sample_viewpoints(&scene, 2, 0, &cfg) {
            Err(Error::Viewpoints { index, constraint }) => {
                assert_eq!(index, 0);
                assert!(constraint.contains("bounds"));
            }
            other => panic!("{other:?}"),
        }
    }
}
