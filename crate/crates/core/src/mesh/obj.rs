//! Minimal Wavefront OBJ reader/writer: `v` and `f` records only.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{MetroError, Result};

pub type Point3 = [f64; 3];
pub type Face = [usize; 3];

/// Parses OBJ text. Polygons are fan-triangulated; indices are converted to 0-based.
pub fn parse_obj(text: &str) -> Result<(Vec<Point3>, Vec<Face>)> {
    let mut vertices = Vec::new();
    let mut polygons: Vec<(usize, Vec<usize>)> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line_no = lineno + 1;
        let line = raw.split('#').next().unwrap_or("").trim();
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let coords: Vec<f64> = parts
                    .take(3)
                    .map(str::parse)
                    .collect::<std::result::Result<_, _>>()
                    .map_err(|e| MetroError::Parse {
                        line: line_no,
                        msg: format!("bad vertex coordinate: {e}"),
                    })?;
                if coords.len() != 3 {
                    return Err(MetroError::Parse {
                        line: line_no,
                        msg: "vertex needs 3 coordinates".into(),
                    });
                }
                vertices.push([coords[0], coords[1], coords[2]]);
            }
            Some("f") => {
                let idx: Vec<usize> = parts
                    .map(|tok| {
                        let first = tok.split('/').next().unwrap_or("");
                        first
                            .parse::<usize>()
                            .ok()
                            .filter(|&i| i >= 1)
                            .ok_or_else(|| MetroError::Parse {
                                line: line_no,
                                msg: format!("bad face index {tok:?}"),
                            })
                    })
                    .collect::<Result<_>>()?;
                if idx.len() < 3 {
                    return Err(MetroError::Parse {
                        line: line_no,
                        msg: "face needs at least 3 vertices".into(),
                    });
                }
                polygons.push((line_no, idx));
            }
            _ => {}
        }
    }
    let mut faces = Vec::new();
    for (line_no, poly) in polygons {
        if let Some(&bad) = poly.iter().find(|&&i| i > vertices.len()) {
            return Err(MetroError::Validation(format!(
                "face on line {line_no} references vertex {bad}, only {} defined",
                vertices.len()
            )));
        }
        for k in 1..poly.len() - 1 {
            faces.push([poly[0] - 1, poly[k] - 1, poly[k + 1] - 1]);
        }
    }
    Ok((vertices, faces))
}

pub fn format_obj(vertices: &[Point3], faces: &[Face]) -> String {
    let mut out = String::with_capacity(vertices.len() * 48 + faces.len() * 24);
    for v in vertices {
        let _ = writeln!(out, "v {} {} {}", v[0], v[1], v[2]);
    }
    for f in faces {
        let _ = writeln!(out, "f {} {} {}", f[0] + 1, f[1] + 1, f[2] + 1);
    }
    out
}

pub fn load_obj(path: impl AsRef<Path>) -> Result<(Vec<Point3>, Vec<Face>)> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| MetroError::io(path, e))?;
    parse_obj(&text)
}

pub fn save_obj(path: impl AsRef<Path>, vertices: &[Point3], faces: &[Face]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_obj(vertices, faces)).map_err(|e| MetroError::io(path, e))
}
