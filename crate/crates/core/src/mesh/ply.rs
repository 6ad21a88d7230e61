//! ASCII PLY reading and writing (vertex positions and triangle faces).

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::Vec3;

use super::SurfaceMesh;

pub fn write_ply(m: &SurfaceMesh, path: &Path) -> Result<()> {
    let mut s = String::new();
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", m.vertices.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    let _ = writeln!(s, "element face {}", m.triangles.len());
    s.push_str("property list uchar int vertex_indices\nend_header\n");
    for v in &m.vertices {
        let _ = writeln!(s, "{} {} {}", v.x, v.y, v.z);
    }
    for t in &m.triangles {
        let _ = writeln!(s, "3 {} {} {}", t[0], t[1], t[2]);
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_ply(path: &Path) -> Result<SurfaceMesh> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    parse_ply(&text)
}

fn parse_ply(text: &str) -> Result<SurfaceMesh> {
    let bad = |m: &str| Error::Ply(m.to_string());
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some("ply") {
        return Err(bad("missing `ply` magic"));
    }
    let mut n_vert = None;
    let mut n_face = None;
    let mut props: Vec<String> = Vec::new();
    let mut current = "";
    for line in lines.by_ref() {
        let w: Vec<&str> = line.split_whitespace().collect();
        match w.as_slice() {
            ["format", f, _] if *f != "ascii" => return Err(bad("only ASCII PLY is supported")),
            ["element", "vertex", n] => {
                n_vert = Some(n.parse::<usize>().map_err(|_| bad("bad vertex count"))?);
                current = "vertex";
            }
            ["element", "face", n] => {
                n_face = Some(n.parse::<usize>().map_err(|_| bad("bad face count"))?);
                current = "face";
            }
            ["element", ..] => return Err(bad("unsupported element")),
            ["property", "list", ..] => {}
            ["property", _, name] if current == "vertex" => props.push(name.to_string()),
            ["end_header"] => break,
            _ => {}
        }
    }
    let (nv, nf) = (n_vert.ok_or_else(|| bad("no vertex element"))?, n_face.ok_or_else(|| bad("no face element"))?);
    let col = |name: &str| props.iter().position(|p| p == name).ok_or_else(|| bad("vertex needs x, y, z"));
    let (ix, iy, iz) = (col("x")?, col("y")?, col("z")?);
    let mut body = lines.filter(|l| !l.trim().is_empty());
    let mut vertices = Vec::with_capacity(nv);
    for _ in 0..nv {
        let line = body.next().ok_or_else(|| bad("truncated vertex list"))?;
        let vals: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|_| bad("bad vertex value")))
            .collect::<Result<_>>()?;
        if vals.len() != props.len() {
            return Err(bad("vertex line has the wrong number of values"));
        }
        vertices.push(Vec3::new(vals[ix], vals[iy], vals[iz]));
    }
    let mut triangles = Vec::with_capacity(nf);
    for _ in 0..nf {
        let line = body.next().ok_or_else(|| bad("truncated face list"))?;
        let vals: Vec<usize> = line
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|_| bad("bad face index")))
            .collect::<Result<_>>()?;
        match vals.as_slice() {
            [3, a, b, c] => triangles.push([*a, *b, *c]),
            _ => return Err(bad("only triangle faces are supported")),
        }
    }
    SurfaceMesh::new(vertices, triangles).map_err(|e| bad(&e.to_string()))
}
