use std::collections::BTreeMap;

/// Triangle with position indices and UV indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Triangle {
    pub positions: [u32; 3],
    pub uvs: [u32; 3],
}

/// UV-unwrapped triangle soup. Coordinates are stored in `f32` so the text
/// format (9 significant digits) round-trips exactly.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub positions: Vec<[f32; 3]>,
    pub uv_coords: Vec<[f32; 2]>,
    pub triangles: Vec<Triangle>,
    pub face_instance: Vec<u32>,
}

impl Mesh {
    pub fn triangle_positions(&self, face: usize) -> [[f64; 3]; 3] {
        let t = &self.triangles[face];
        t.positions.map(|i| self.positions[i as usize].map(f64::from))
    }

    pub fn triangle_uvs(&self, face: usize) -> [[f64; 2]; 3] {
        let t = &self.triangles[face];
        t.uvs.map(|i| self.uv_coords[i as usize].map(f64::from))
    }
}

/// Axis-aligned box in world units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aabb {
    pub min: [f32; 3],
    pub max: [f32; 3],
}

impl Aabb {
    pub fn center(&self) -> [f64; 3] {
        [0, 1, 2].map(|i| 0.5 * (self.min[i] as f64 + self.max[i] as f64))
    }

    pub fn half_diagonal(&self) -> f64 {
        let d: f64 = (0..3)
            .map(|i| (self.max[i] as f64 - self.min[i] as f64).powi(2))
            .sum();
        0.5 * d.sqrt()
    }

    /// Strict containment after shrinking every face inward by `margin`.
    pub fn contains(&self, p: [f64; 3], margin: f64) -> bool {
        (0..3).all(|i| p[i] > self.min[i] as f64 + margin && p[i] < self.max[i] as f64 - margin)
    }
}

/// A mesh with instance labels and the reference image assigned to each instance.
#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub mesh: Mesh,
    pub instance_count: u32,
    pub reference_assignment: BTreeMap<u32, String>,
    pub bounds: Aabb,
}

impl Scene {
    /// Triangles owned by `instance`.
    pub fn faces_of(&self, instance: u32) -> impl Iterator<Item = usize> + '_ {
        self.mesh
            .face_instance
            .iter()
            .enumerate()
            .filter(move |(_, &id)| id == instance)
            .map(|(f, _)| f)
    }

    /// Bounding boxes of the closed objects inside the room, found as the
    /// position-connected components of the mesh whose box is not the scene
    /// bounds (that component is the room shell).
    pub fn obstacles(&self) -> Vec<Aabb> {
        let n = self.mesh.positions.len();
        let mut parent: Vec<usize> = (0..n).collect();
        fn root(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for t in &self.mesh.triangles {
            let a = root(&mut parent, t.positions[0] as usize);
            for &p in &t.positions[1..] {
                let b = root(&mut parent, p as usize);
                parent[b] = a;
            }
        }
        let mut boxes: BTreeMap<usize, Aabb> = BTreeMap::new();
        for t in &self.mesh.triangles {
            for &p in &t.positions {
                let r = root(&mut parent, p as usize);
                let v = self.mesh.positions[p as usize];
                let b = boxes.entry(r).or_insert(Aabb { min: v, max: v });
                for i in 0..3 {
                    b.min[i] = b.min[i].min(v[i]);
                    b.max[i] = b.max[i].max(v[i]);
                }
            }
        }
        boxes.into_values().filter(|b| *b != self.bounds).collect()
    }
}
