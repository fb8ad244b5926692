//! `WEAVE-SCENE v1` text format.
//!
//! ```text
//! WEAVE-SCENE v1
//! positions <n>       x y z per line
//! uvs <n>             u v per line
//! triangles <n>       p0 p1 p2 t0 t1 t2 per line
//! face_instance <n>   one id per line
//! references <n>      <instance id> <image filename> per line
//! bounds              minx miny minz maxx maxy maxz
//! ```
//!
//! Floats are written with 9 significant digits, which round-trips `f32`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::mesh::{Aabb, Mesh, Scene, Triangle};
use crate::error::{Error, Result};

pub const SCENE_HEADER: &str = "WEAVE-SCENE";
const SCENE_VERSION: &str = "v1";
const SECTIONS: [&str; 6] = [
    "positions",
    "uvs",
    "triangles",
    "face_instance",
    "references",
    "bounds",
];

fn fmt_f32(v: f32) -> String {
    format!("{v:.8e}")
}

pub fn write_scene(scene: &Scene) -> String {
    let m = &scene.mesh;
    let mut s = String::new();
    let _ = writeln!(s, "{SCENE_HEADER} {SCENE_VERSION}");
    let _ = writeln!(s, "positions {}", m.positions.len());
    for p in &m.positions {
        let _ = writeln!(s, "{} {} {}", fmt_f32(p[0]), fmt_f32(p[1]), fmt_f32(p[2]));
    }
    let _ = writeln!(s, "uvs {}", m.uv_coords.len());
    for uv in &m.uv_coords {
        let _ = writeln!(s, "{} {}", fmt_f32(uv[0]), fmt_f32(uv[1]));
    }
    let _ = writeln!(s, "triangles {}", m.triangles.len());
    for t in &m.triangles {
        let [p0, p1, p2] = t.positions;
        let [t0, t1, t2] = t.uvs;
        let _ = writeln!(s, "{p0} {p1} {p2} {t0} {t1} {t2}");
    }
    let _ = writeln!(s, "face_instance {}", m.face_instance.len());
    for id in &m.face_instance {
        let _ = writeln!(s, "{id}");
    }
    let _ = writeln!(s, "references {}", scene.instance_count);
    for (id, name) in &scene.reference_assignment {
        let _ = writeln!(s, "{id} {name}");
    }
    let b = &scene.bounds;
    let _ = writeln!(s, "bounds");
    let _ = writeln!(
        s,
        "{}",
        b.min
            .iter()
            .chain(&b.max)
            .map(|&v| fmt_f32(v))
            .collect::<Vec<_>>()
            .join(" ")
    );
    s
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    std::fs::write(path, write_scene(scene)).map_err(|e| Error::io(path, e))
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_scene(&text)
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> Result<(usize, Vec<&'a str>)> {
        loop {
            match self.inner.next() {
                Some((i, l)) => {
                    self.last = i + 1;
                    let fields: Vec<&str> = l.split_whitespace().collect();
                    if !fields.is_empty() {
                        return Ok((i + 1, fields));
                    }
                }
                None => {
                    return Err(Error::Parse {
                        line: self.last + 1,
                        message: format!("unexpected end of file, expected {what}"),
                    })
                }
            }
        }
    }
}

fn perr(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn num<T: std::str::FromStr>(line: usize, s: &str) -> Result<T> {
    s.parse()
        .map_err(|_| perr(line, format!("cannot parse `{s}`")))
}

fn fixed<'a>(line: usize, fields: &[&'a str], n: usize) -> Result<()> {
    if fields.len() != n {
        return Err(perr(
            line,
            format!("expected {n} fields, found {}", fields.len()),
        ));
    }
    Ok(())
}

pub fn parse_scene(text: &str) -> Result<Scene> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
        last: 0,
    };
    let (ln, header) = lines.next("header")?;
    if header.first() != Some(&SCENE_HEADER) {
        return Err(perr(ln, format!("missing `{SCENE_HEADER}` header")));
    }
    match header.get(1) {
        Some(&SCENE_VERSION) if header.len() == 2 => {}
        Some(v) => {
            return Err(Error::Version {
                expected: SCENE_VERSION.into(),
                found: v.to_string(),
            })
        }
        None => return Err(perr(ln, "missing version")),
    }

    let section = |name: &str, lines: &mut Lines| -> Result<(usize, usize)> {
        let (ln, f) = lines.next(name)?;
        if f[0] != name {
            if !SECTIONS.contains(&f[0]) {
                return Err(Error::UnknownSection(f[0].to_string()));
            }
            return Err(perr(ln, format!("expected section `{name}`, found `{}`", f[0])));
        }
        if name == "bounds" {
            fixed(ln, &f, 1)?;
            return Ok((ln, 1));
        }
        fixed(ln, &f, 2)?;
        Ok((ln, num(ln, f[1])?))
    };

    let (_, n) = section("positions", &mut lines)?;
    let mut positions = Vec::with_capacity(n);
    for _ in 0..n {
        let (ln, f) = lines.next("position")?;
        fixed(ln, &f, 3)?;
        positions.push([num(ln, f[0])?, num(ln, f[1])?, num(ln, f[2])?]);
    }
    let (_, n) = section("uvs", &mut lines)?;
    let mut uv_coords = Vec::with_capacity(n);
    for _ in 0..n {
        let (ln, f) = lines.next("uv")?;
        fixed(ln, &f, 2)?;
        uv_coords.push([num(ln, f[0])?, num(ln, f[1])?]);
    }
    let (_, n) = section("triangles", &mut lines)?;
    let mut triangles = Vec::with_capacity(n);
    for _ in 0..n {
        let (ln, f) = lines.next("triangle")?;
        fixed(ln, &f, 6)?;
        let v: Vec<u32> = f.iter().map(|s| num(ln, s)).collect::<Result<_>>()?;
        triangles.push(Triangle {
            positions: [v[0], v[1], v[2]],
            uvs: [v[3], v[4], v[5]],
        });
    }
    let (_, n) = section("face_instance", &mut lines)?;
    let mut face_instance = Vec::with_capacity(n);
    for _ in 0..n {
        let (ln, f) = lines.next("instance id")?;
        fixed(ln, &f, 1)?;
        face_instance.push(num(ln, f[0])?);
    }
    let (_, n) = section("references", &mut lines)?;
    let mut reference_assignment = BTreeMap::new();
    for _ in 0..n {
        let (ln, f) = lines.next("reference")?;
        fixed(ln, &f, 2)?;
        let id: u32 = num(ln, f[0])?;
        if reference_assignment.insert(id, f[1].to_string()).is_some() {
            return Err(perr(ln, format!("duplicate reference for instance {id}")));
        }
    }
    section("bounds", &mut lines)?;
    let (ln, f) = lines.next("bounds values")?;
    fixed(ln, &f, 6)?;
    let v: Vec<f32> = f.iter().map(|s| num(ln, s)).collect::<Result<_>>()?;
    let bounds = Aabb {
        min: [v[0], v[1], v[2]],
        max: [v[3], v[4], v[5]],
    };
    if let Ok((ln, f)) = lines.next("") {
        return if SECTIONS.contains(&f[0]) {
            Err(perr(ln, format!("duplicate section `{}`", f[0])))
        } else {
            Err(Error::UnknownSection(f[0].to_string()))
        };
    }

    Ok(Scene {
        mesh: Mesh {
            positions,
            uv_coords,
            triangles,
            face_instance,
        },
        instance_count: n as u32,
        reference_assignment,
        bounds,
    })
}
