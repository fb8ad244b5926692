use std::collections::BTreeSet;
use std::fmt;

use super::mesh::Scene;

/// One violated scene invariant.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Diagnostic {
    PositionIndexOutOfRange { triangle: usize, index: u32 },
    UvIndexOutOfRange { triangle: usize, index: u32 },
    UvOutOfRange { vertex: usize },
    FaceInstanceLength { triangles: usize, labels: usize },
    InstanceOutOfRange { triangle: usize, instance: u32 },
    UnusedInstance { instance: u32 },
    MissingReference { instance: u32 },
    ExtraReference { instance: u32 },
    UvOverlap { first: usize, second: usize },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::PositionIndexOutOfRange { triangle, index } => {
                write!(f, "triangle {triangle}: position index {index} out of range")
            }
            Self::UvIndexOutOfRange { triangle, index } => {
                write!(f, "triangle {triangle}: uv index {index} out of range")
            }
            Self::UvOutOfRange { vertex } => write!(f, "uv vertex {vertex} outside [0,1]^2"),
            Self::FaceInstanceLength { triangles, labels } => {
                write!(f, "{labels} instance labels for {triangles} triangles")
            }
            Self::InstanceOutOfRange { triangle, instance } => {
                write!(f, "triangle {triangle}: instance {instance} out of range")
            }
            Self::UnusedInstance { instance } => write!(f, "unused instance id {instance}"),
            Self::MissingReference { instance } => {
                write!(f, "instance {instance} has no reference image")
            }
            Self::ExtraReference { instance } => {
                write!(f, "reference assigned to unknown instance {instance}")
            }
            Self::UvOverlap { first, second } => {
                write!(f, "uv islands of triangles {first} and {second} overlap")
            }
        }
    }
}

/// Resolution of the texel grid used for the UV overlap check.
const OVERLAP_GRID: usize = 1024;

/// Check every mesh and scene invariant; an empty list means the scene is valid.
pub fn validate_scene(scene: &Scene) -> Vec<Diagnostic> {
    let mesh = &scene.mesh;
    let n = scene.instance_count;
    let mut out = Vec::new();
    let mut indices_ok = true;
    for (f, t) in mesh.triangles.iter().enumerate() {
        for &i in &t.positions {
            if i as usize >= mesh.positions.len() {
                out.push(Diagnostic::PositionIndexOutOfRange { triangle: f, index: i });
                indices_ok = false;
            }
        }
        for &i in &t.uvs {
            if i as usize >= mesh.uv_coords.len() {
                out.push(Diagnostic::UvIndexOutOfRange { triangle: f, index: i });
                indices_ok = false;
            }
        }
    }
    let mut uvs_ok = true;
    for (v, uv) in mesh.uv_coords.iter().enumerate() {
        if uv.iter().any(|c| !(0.0..=1.0).contains(c)) {
            out.push(Diagnostic::UvOutOfRange { vertex: v });
            uvs_ok = false;
        }
    }
    if mesh.face_instance.len() != mesh.triangles.len() {
        out.push(Diagnostic::FaceInstanceLength {
            triangles: mesh.triangles.len(),
            labels: mesh.face_instance.len(),
        });
    }
    let mut used = BTreeSet::new();
    for (f, &id) in mesh.face_instance.iter().enumerate() {
        if id >= n {
            out.push(Diagnostic::InstanceOutOfRange {
                triangle: f,
                instance: id,
            });
        } else {
            used.insert(id);
        }
    }
    for id in (0..n).filter(|i| !used.contains(i)) {
        out.push(Diagnostic::UnusedInstance { instance: id });
    }
    for id in 0..n {
        if !scene.reference_assignment.contains_key(&id) {
            out.push(Diagnostic::MissingReference { instance: id });
        }
    }
    for &id in scene.reference_assignment.keys().filter(|&&id| id >= n) {
        out.push(Diagnostic::ExtraReference { instance: id });
    }
    if indices_ok && uvs_ok {
        out.extend(uv_overlaps(scene));
    }
    out
}

/// Rasterize the UV layout at texel centres, counting only texels strictly
/// inside a triangle so shared edges are not reported.
fn uv_overlaps(scene: &Scene) -> Vec<Diagnostic> {
    let g = OVERLAP_GRID;
    let mut owner: Vec<u32> = vec![u32::MAX; g * g];
    let mut pairs = BTreeSet::new();
    for f in 0..scene.mesh.triangles.len() {
        let uv = scene.mesh.triangle_uvs(f).map(|p| [p[0] * g as f64, p[1] * g as f64]);
        let area = (uv[1][0] - uv[0][0]) * (uv[2][1] - uv[0][1])
            - (uv[2][0] - uv[0][0]) * (uv[1][1] - uv[0][1]);
        if area.abs() < 1e-12 {
            continue;
        }
        let sign = area.signum();
        let lo = |a: usize| uv.iter().map(|p| p[a]).fold(f64::INFINITY, f64::min).floor().max(0.0) as usize;
        let hi = |a: usize| {
            (uv.iter().map(|p| p[a]).fold(f64::NEG_INFINITY, f64::max).ceil() as usize).min(g)
        };
        for y in lo(1)..hi(1) {
            for x in lo(0)..hi(0) {
                let p = [x as f64 + 0.5, y as f64 + 0.5];
                let inside = (0..3).all(|e| {
                    let a = uv[e];
                    let b = uv[(e + 1) % 3];
                    let len = ((b[0] - a[0]).powi(2) + (b[1] - a[1]).powi(2)).sqrt();
                    let ef = (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0]);
                    sign * ef > 1e-6 * len
                });
                if !inside {
                    continue;
                }
                let slot = &mut owner[y * g + x];
                if *slot == u32::MAX {
                    *slot = f as u32;
                } else {
                    pairs.insert((*slot as usize, f));
                }
            }
        }
    }
    pairs
        .into_iter()
        .map(|(first, second)| Diagnostic::UvOverlap { first, second })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_box_room, BoxSpec, RoomSpec};

    #[test]
    fn built_rooms_are_valid() {
        assert_eq!(validate_scene(&build_box_room(&RoomSpec::toy()).unwrap()), vec![]);
    }

    #[test]
    fn out_of_range_uv_cites_vertex() {
        let mut scene = build_box_room(&RoomSpec::toy()).unwrap();
        scene.mesh.uv_coords[3][0] = 1.2;
        assert_eq!(
            validate_scene(&scene),
            vec![Diagnostic::UvOutOfRange { vertex: 3 }]
        );
    }

    #[test]
    fn unused_instance_is_the_set_difference() {
        let mut spec = RoomSpec::toy();
        spec.furniture.push(BoxSpec {
            min: [0.2, 0.0, 0.2],
            max: [0.6, 0.5, 0.6],
            instance: 2,
        });
        let mut scene = build_box_room(&spec).unwrap();
        for id in scene.mesh.face_instance.iter_mut() {
            if *id == 2 {
                *id = 1;
            }
        }
        let used: BTreeSet<u32> = scene.mesh.face_instance.iter().copied().collect();
        let expected: Vec<Diagnostic> = (0..3)
            .filter(|i| !used.contains(i))
            .map(|instance| Diagnostic::UnusedInstance { instance })
            .collect();
        assert_eq!(expected.len(), 1);
        assert_eq!(validate_scene(&scene), expected);
    }

    #[test]
    fn overlapping_islands_are_reported() {
        let mut scene = build_box_room(&RoomSpec::toy()).unwrap();
        let t0 = scene.mesh.triangles[0].uvs;
        scene.mesh.triangles[5].uvs = t0;
        let d = validate_scene(&scene);
        assert!(d.contains(&Diagnostic::UvOverlap { first: 0, second: 5 }), "{d:?}");
    }
}
