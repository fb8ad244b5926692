//! Scenes: UV-unwrapped triangle meshes with per-face instance labels, the
//! procedural box-room generator, camera sampling, validation and the text
//! scene format.

mod camera;
mod io;
mod mesh;
mod room;
mod validate;

pub use camera::{sample_viewpoints, Camera, ViewpointConfig};
pub use io::{load_scene, parse_scene, save_scene, write_scene, SCENE_HEADER};
pub use mesh::{Aabb, Mesh, Scene, Triangle};
pub use room::{build_box_room, BoxSpec, RoomSpec};
pub use validate::{validate_scene, Diagnostic};

pub(crate) type Vec3 = [f64; 3];

pub(crate) fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub(crate) fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub(crate) fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

pub(crate) fn normalize(a: Vec3) -> Vec3 {
    let n = dot(a, a).sqrt();
    [a[0] / n, a[1] / n, a[2] / n]
}
