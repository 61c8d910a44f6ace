//! Wavefront OBJ, `v` and `f` records only.

use crate::error::{Error, Result};
use crate::so3::Vec3;
use std::fmt::Write;

/// Parses vertices and faces; polygons are fan-triangulated and any
/// `/vt/vn` suffixes are ignored.
pub fn parse_obj(text: &str) -> Result<(Vec<Vec3>, Vec<[usize; 3]>)> {
    let mut vertices = Vec::new();
    let mut faces = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let lineno = n + 1;
        let mut it = line.split_whitespace();
        match it.next() {
            Some("v") => {
                let xyz: Vec<f64> = it
                    .take(3)
                    .map(|s| s.parse::<f64>())
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| Error::invalid(format!("obj line {lineno}: {e}")))?;
                if xyz.len() != 3 {
                    return Err(Error::invalid(format!("obj line {lineno}: vertex needs 3 coordinates")));
                }
                vertices.push(Vec3::new(xyz[0], xyz[1], xyz[2]));
            }
            Some("f") => {
                let idx: Vec<usize> = it
                    .map(|tok| {
                        let first = tok.split('/').next().unwrap_or("");
                        let i: i64 = first
                            .parse()
                            .map_err(|e| Error::invalid(format!("obj line {lineno}: {e}")))?;
                        let resolved = if i < 0 { vertices.len() as i64 + i } else { i - 1 };
                        usize::try_from(resolved)
                            .map_err(|_| Error::invalid(format!("obj line {lineno}: bad vertex index {i}")))
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(Error::invalid(format!("obj line {lineno}: face needs ≥ 3 vertices")));
                }
                for k in 1..idx.len() - 1 {
                    faces.push([idx[0], idx[k], idx[k + 1]]);
                }
            }
            _ => {}
        }
    }
    Ok((vertices, faces))
}

fn sig9(x: f64) -> f64 {
    format!("{x:.8e}").parse().unwrap_or(x)
}

pub fn write_obj(vertices: &[Vec3], faces: &[[usize; 3]]) -> String {
    let mut out = String::new();
    for v in vertices {
        let _ = writeln!(out, "v {} {} {}", sig9(v.x), sig9(v.y), sig9(v.z));
    }
    for f in faces {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}
