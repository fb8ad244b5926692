use std::collections::{BTreeMap, BTreeSet};

use super::mesh::{Aabb, Mesh, Scene, Triangle};
use crate::error::{Error, Result};

/// An axis-aligned furniture box.
#[derive(Clone, Debug, PartialEq)]
pub struct BoxSpec {
    pub min: [f32; 3],
    pub max: [f32; 3],
    pub instance: u32,
}

/// Parameters of a procedural box room. The room spans `[0, size]` on each
/// axis with `y` pointing up.
#[derive(Clone, Debug, PartialEq)]
pub struct RoomSpec {
    pub size: [f32; 3],
    pub floor: u32,
    pub ceiling: u32,
    /// Walls at `x = 0`, `x = size.x`, `z = 0`, `z = size.z`.
    pub walls: [u32; 4],
    pub furniture: Vec<BoxSpec>,
    /// Atlas side length in texels.
    pub atlas_texels: u32,
    /// Texel density used to size each face's atlas rectangle.
    pub texels_per_unit: f64,
    /// Reference image per instance; defaults to `ref_<id>.png`.
    pub references: Vec<String>,
}

impl RoomSpec {
    /// A room whose whole shell is instance 0.
    pub fn single_instance(size: [f32; 3], atlas_texels: u32) -> Self {
        Self {
            size,
            floor: 0,
            ceiling: 0,
            walls: [0; 4],
            furniture: Vec::new(),
            atlas_texels,
            texels_per_unit: 16.0,
            references: Vec::new(),
        }
    }

    /// Two-instance toy room: shell is instance 0, one centred box is instance 1.
    pub fn toy() -> Self {
        let mut spec = Self::single_instance([4.0, 3.0, 4.0], 512);
        spec.furniture.push(BoxSpec {
            min: [1.25, 0.0, 1.25],
            max: [2.75, 1.2, 2.75],
            instance: 1,
        });
        spec
    }
}

const PAD_TEXELS: u32 = 1;

struct Quad {
    corners: [u32; 4],
    width: f64,
    height: f64,
    instance: u32,
}

/// Build a box room as a triangle soup with a shelf-packed per-face UV atlas.
pub fn build_box_room(spec: &RoomSpec) -> Result<Scene> {
    if spec.size.iter().any(|&s| !(s > 0.0)) {
        return Err(Error::InvalidArgument(format!(
            "room dimensions must be positive, got {:?}",
            spec.size
        )));
    }
    if spec.atlas_texels == 0 || !(spec.texels_per_unit > 0.0) {
        return Err(Error::InvalidArgument(
            "atlas budget and texel density must be positive".into(),
        ));
    }
    let mut ids: BTreeSet<u32> = [spec.floor, spec.ceiling].into_iter().collect();
    ids.extend(spec.walls);
    for (i, b) in spec.furniture.iter().enumerate() {
        if (0..3).any(|a| !(b.max[a] > b.min[a])) {
            return Err(Error::InvalidArgument(format!("furniture box {i} is empty")));
        }
        ids.insert(b.instance);
    }
    let n = ids.len() as u32;
    if ids.iter().copied().ne(0..n) {
        return Err(Error::InvalidArgument(format!(
            "instance ids must be contiguous from 0, got {ids:?}"
        )));
    }
    if !spec.references.is_empty() && spec.references.len() != n as usize {
        return Err(Error::InvalidArgument(format!(
            "{} references given for {n} instances",
            spec.references.len()
        )));
    }

    let mut positions = Vec::new();
    let mut quads = Vec::new();
    let room = Aabb {
        min: [0.0; 3],
        max: spec.size,
    };
    // face order: -x, +x, -y, +y, -z, +z
    let room_ids = [
        spec.walls[0],
        spec.walls[1],
        spec.floor,
        spec.ceiling,
        spec.walls[2],
        spec.walls[3],
    ];
    push_box(&mut positions, &mut quads, &room, room_ids, true);
    for b in &spec.furniture {
        let bx = Aabb {
            min: b.min,
            max: b.max,
        };
        push_box(&mut positions, &mut quads, &bx, [b.instance; 6], false);
    }

    let rects = pack_or_report(&quads, spec)?;
    let budget = spec.atlas_texels as f64;
    let mut uv_coords = Vec::with_capacity(quads.len() * 4);
    let mut triangles = Vec::with_capacity(quads.len() * 2);
    let mut face_instance = Vec::with_capacity(quads.len() * 2);
    for (q, rect) in quads.iter().zip(&rects) {
        let u0 = (rect.x + PAD_TEXELS) as f64 / budget;
        let v0 = (rect.y + PAD_TEXELS) as f64 / budget;
        let u1 = (rect.x + rect.w - PAD_TEXELS) as f64 / budget;
        let v1 = (rect.y + rect.h - PAD_TEXELS) as f64 / budget;
        let base = uv_coords.len() as u32;
        uv_coords.extend([
            [u0 as f32, v0 as f32],
            [u1 as f32, v0 as f32],
            [u1 as f32, v1 as f32],
            [u0 as f32, v1 as f32],
        ]);
        let c = q.corners;
        triangles.push(Triangle {
            positions: [c[0], c[1], c[2]],
            uvs: [base, base + 1, base + 2],
        });
        triangles.push(Triangle {
            positions: [c[0], c[2], c[3]],
            uvs: [base, base + 2, base + 3],
        });
        face_instance.extend([q.instance, q.instance]);
    }

    let reference_assignment: BTreeMap<u32, String> = (0..n)
        .map(|i| {
            let name = spec
                .references
                .get(i as usize)
                .cloned()
                .unwrap_or_else(|| format!("ref_{i}.png"));
            (i, name)
        })
        .collect();

    Ok(Scene {
        mesh: Mesh {
            positions,
            uv_coords,
            triangles,
            face_instance,
        },
        instance_count: n,
        reference_assignment,
        bounds: room,
    })
}

fn push_box(
    positions: &mut Vec<[f32; 3]>,
    quads: &mut Vec<Quad>,
    b: &Aabb,
    ids: [u32; 6],
    inward: bool,
) {
    let base = positions.len() as u32;
    // corner index bits: x = 1, y = 2, z = 4
    for bits in 0..8u32 {
        positions.push([0, 1, 2].map(|a| {
            if bits >> a & 1 == 1 {
                b.max[a]
            } else {
                b.min[a]
            }
        }));
    }
    let extent = [0, 1, 2].map(|a| (b.max[a] - b.min[a]) as f64);
    for axis in 0..3 {
        let (u, v) = ((axis + 1) % 3, (axis + 2) % 3);
        for side in 0..2u32 {
            let corner = |cu: u32, cv: u32| base + (side << axis) + (cu << u) + (cv << v);
            // outward winding on the max side is (u, v) counter-clockwise
            let ccw = [corner(0, 0), corner(1, 0), corner(1, 1), corner(0, 1)];
            let cw = [corner(0, 0), corner(0, 1), corner(1, 1), corner(1, 0)];
            let outward = side == 1;
            let corners = if outward != inward { ccw } else { cw };
            let (width, height) = if corners == ccw {
                (extent[u], extent[v])
            } else {
                (extent[v], extent[u])
            };
            quads.push(Quad {
                corners,
                width,
                height,
                instance: ids[axis * 2 + side as usize],
            });
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Rect {
    x: u32,
    y: u32,
    w: u32,
    h: u32,
}

fn rect_sizes(quads: &[Quad], density: f64) -> Vec<(u32, u32)> {
    quads
        .iter()
        .map(|q| {
            let w = (q.width * density).ceil().max(1.0) as u32 + 2 * PAD_TEXELS;
            let h = (q.height * density).ceil().max(1.0) as u32 + 2 * PAD_TEXELS;
            (w, h)
        })
        .collect()
}

fn shelf_pack(sizes: &[(u32, u32)], budget: u32) -> Option<Vec<Rect>> {
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.sort_by_key(|&i| std::cmp::Reverse(sizes[i].1));
    let mut rects = vec![Rect { x: 0, y: 0, w: 0, h: 0 }; sizes.len()];
    let (mut x, mut y, mut shelf_h) = (0u32, 0u32, 0u32);
    for i in order {
        let (w, h) = sizes[i];
        if w > budget {
            return None;
        }
        if x + w > budget {
            y += shelf_h;
            x = 0;
            shelf_h = 0;
        }
        if y + h > budget {
            return None;
        }
        rects[i] = Rect { x, y, w, h };
        x += w;
        shelf_h = shelf_h.max(h);
    }
    Some(rects)
}

fn pack_or_report(quads: &[Quad], spec: &RoomSpec) -> Result<Vec<Rect>> {
    let sizes = rect_sizes(quads, spec.texels_per_unit);
    if let Some(r) = shelf_pack(&sizes, spec.atlas_texels) {
        return Ok(r);
    }
    let mut required = spec.atlas_texels + 1;
    while shelf_pack(&sizes, required).is_none() {
        required += 1;
    }
    Err(Error::AtlasOverflow {
        budget: spec.atlas_texels,
        required,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn unit_room(furniture: Vec<BoxSpec>) -> RoomSpec {
        let mut s = RoomSpec::single_instance([1.0, 1.0, 1.0], 256);
        s.furniture = furniture;
        s
    }

    #[test]
    fn unit_room_with_one_box_has_24_triangles() {
        let scene = build_box_room(&unit_room(vec![BoxSpec {
            min: [0.3, 0.0, 0.3],
            max: [0.6, 0.4, 0.6],
            instance: 1,
        }]))
        .unwrap();
        assert_eq!(scene.instance_count, 2);
        assert_eq!(scene.mesh.triangles.len(), 12 + 12);
        assert_eq!(scene.faces_of(1).count(), 12);
    }

    #[test]
    fn empty_room_is_all_instance_zero() {
        let scene = build_box_room(&unit_room(vec![])).unwrap();
        assert_eq!(scene.mesh.triangles.len(), 12);
        assert!(scene.mesh.face_instance.iter().all(|&i| i == 0));
    }

    #[test]
    fn duplicate_furniture_ids_merge_into_one_instance() {
        let b = |x: f32| BoxSpec {
            min: [x, 0.0, 0.2],
            max: [x + 0.2, 0.3, 0.4],
            instance: 1,
        };
        let scene = build_box_room(&unit_room(vec![b(0.1), b(0.6)])).unwrap();
        assert_eq!(scene.instance_count, 2);
        assert_eq!(scene.faces_of(1).count(), 24);
    }

    #[test]
    fn room_shell_faces_inward_and_boxes_outward() {
        let scene = build_box_room(&RoomSpec::toy()).unwrap();
        let c = scene.bounds.center();
        for (f, &inst) in scene.mesh.face_instance.iter().enumerate() {
            let [a, b, d] = scene.mesh.triangle_positions(f);
            let n = super::super::cross(super::super::sub(b, a), super::super::sub(d, a));
            let centroid = [0, 1, 2].map(|i| (a[i] + b[i] + d[i]) / 3.0);
            let to_center = super::super::sub(c, centroid);
            let facing = super::super::dot(n, to_center);
            if inst == 0 {
                assert!(facing > 0.0, "shell face {f} should face inward");
            }
        }
        let obstacles = scene.obstacles();
        assert_eq!(obstacles.len(), 1);
        assert_eq!(obstacles[0].min, [1.25, 0.0, 1.25]);
    }

    #[test]
    fn non_contiguous_ids_are_rejected() {
        let mut s = unit_room(vec![BoxSpec {
            min: [0.1; 3],
            max: [0.2; 3],
            instance: 2,
        }]);
        s.floor = 0;
        assert!(matches!(build_box_room(&s), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn atlas_overflow_reports_required_budget() {
        let mut s = unit_room(vec![]);
        s.atlas_texels = 16;
        s.texels_per_unit = 64.0;
        match build_box_room(&s) {
            Err(Error::AtlasOverflow { budget, required }) => {
                assert_eq!(budget, 16);
                assert!(required > 16);
                s.atlas_texels = required;
                assert!(build_box_room(&s).is_ok());
            }
            other => panic!("expected overflow, got {other:?}"),
        }
    }
}
