//! OFF mesh and XYZ point-cloud files.
//!
//! OFF: line 1 `OFF`; line 2 `V F E`; then V vertex lines `x y z` and F face
//! lines `3 i j k`. XYZ: one `x y z` triple per line. Both are ASCII,
//! whitespace-separated; `#` starts a comment. Coordinates are written in the
//! shortest representation that parses back to the identical value, so
//! save/load round-trips are exact.

use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use super::{Mesh, MeshError, PointCloud, Topology};

fn io_err(path: &Path, source: std::io::Error) -> MeshError {
    MeshError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> MeshError {
    MeshError::Parse {
        path: path.display().to_string(),
        line,
        msg: msg.into(),
    }
}

/// Yields (1-based line number, content with comments stripped), skipping
/// blank lines.
fn significant_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().filter_map(|(i, raw)| {
        let content = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        };
        let trimmed = content.trim();
        if trimmed.is_empty() {
            None
        } else {
            Some((i + 1, trimmed))
        }
    })
}

pub fn load_mesh(path: impl AsRef<Path>) -> Result<Mesh, MeshError> {
    let path = path.as_ref();
    let mut file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut text = String::new();
    file.read_to_string(&mut text).map_err(|e| io_err(path, e))?;
    parse_off(&text, path)
}

fn parse_off(text: &str, path: &Path) -> Result<Mesh, MeshError> {
    let mut lines = significant_lines(text);
    let (ln, header) = lines
        .next()
        .ok_or_else(|| parse_err(path, 1, "empty file, expected OFF header"))?;
    if header != "OFF" {
        return Err(parse_err(path, ln, format!("expected 'OFF', found '{header}'")));
    }
    let (ln, counts) = lines
        .next()
        .ok_or_else(|| parse_err(path, ln, "missing counts line"))?;
    let parts: Vec<&str> = counts.split_whitespace().collect();
    if parts.len() != 3 {
        return Err(parse_err(path, ln, "counts line must be 'V F E'"));
    }
    let n_vertices: usize = parts[0]
        .parse()
        .map_err(|_| parse_err(path, ln, format!("bad vertex count '{}'", parts[0])))?;
    let n_faces: usize = parts[1]
        .parse()
        .map_err(|_| parse_err(path, ln, format!("bad face count '{}'", parts[1])))?;
    let _edges: i64 = parts[2]
        .parse()
        .map_err(|_| parse_err(path, ln, format!("bad edge count '{}'", parts[2])))?;

    let mut vertices = Vec::with_capacity(n_vertices);
    let mut last_line = ln;
    for _ in 0..n_vertices {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| parse_err(path, last_line, "unexpected end of file in vertex list"))?;
        last_line = ln;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(parse_err(path, ln, "vertex line must be 'x y z'"));
        }
        let mut v = [0.0f64; 3];
        for (k, p) in parts.iter().enumerate() {
            v[k] = p
                .parse()
                .map_err(|_| parse_err(path, ln, format!("bad coordinate '{p}'")))?;
        }
        vertices.push(v);
    }

    let mut faces = Vec::with_capacity(n_faces);
    for _ in 0..n_faces {
        let (ln, line) = lines
            .next()
            .ok_or_else(|| parse_err(path, last_line, "unexpected end of file in face list"))?;
        last_line = ln;
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "3" {
            return Err(parse_err(path, ln, "face line must be '3 i j k' (triangles only)"));
        }
        let mut f = [0usize; 3];
        for (k, p) in parts[1..].iter().enumerate() {
            f[k] = p
                .parse()
                .map_err(|_| parse_err(path, ln, format!("bad face index '{p}'")))?;
            if f[k] >= n_vertices {
                return Err(parse_err(
                    path,
                    ln,
                    format!("face index {} out of range ({n_vertices} vertices)", f[k]),
                ));
            }
        }
        faces.push(f);
    }

    let topology = Arc::new(Topology::build(n_vertices, faces)?);
    Mesh::new(vertices, topology)
}

pub fn save_mesh(mesh: &Mesh, path: impl AsRef<Path>) -> Result<(), MeshError> {
    let path = path.as_ref();
    let mut out = String::new();
    out.push_str("OFF\n");
    out.push_str(&format!(
        "{} {} {}\n",
        mesh.n_vertices(),
        mesh.topology().faces().len(),
        mesh.topology().edges().len()
    ));
    for v in mesh.vertices() {
        out.push_str(&format!("{} {} {}\n", v[0], v[1], v[2]));
    }
    for f in mesh.topology().faces() {
        out.push_str(&format!("3 {} {} {}\n", f[0], f[1], f[2]));
    }
    write_atomic(path, out.as_bytes()).map_err(|e| io_err(path, e))
}

pub fn load_pointcloud(path: impl AsRef<Path>) -> Result<PointCloud, MeshError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let mut points = Vec::new();
    for (ln, line) in significant_lines(&text) {
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 3 {
            return Err(parse_err(path, ln, "point line must be 'x y z'"));
        }
        let mut p = [0.0f64; 3];
        for (k, s) in parts.iter().enumerate() {
            p[k] = s
                .parse()
                .map_err(|_| parse_err(path, ln, format!("bad coordinate '{s}'")))?;
        }
        points.push(p);
    }
    if points.is_empty() {
        return Err(parse_err(path, 1, "point cloud file has no points"));
    }
    PointCloud::new(points)
}

pub fn save_pointcloud(cloud: &PointCloud, path: impl AsRef<Path>) -> Result<(), MeshError> {
    let path = path.as_ref();
    let mut out = String::new();
    for p in cloud.points() {
        out.push_str(&format!("{} {} {}\n", p[0], p[1], p[2]));
    }
    write_atomic(path, out.as_bytes()).map_err(|e| io_err(path, e))
}

/// Writes via a temp file in the same directory, then renames into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> std::io::Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    std::fs::create_dir_all(dir)?;
    let mut tmp = tempfile_path(dir, path);
    let mut n = 0;
    while tmp.exists() {
        n += 1;
        tmp = dir.join(format!(
            ".{}.tmp{}",
            path.file_name().and_then(|s| s.to_str()).unwrap_or("out"),
            n
        ));
    }
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)
}

fn tempfile_path(dir: &Path, path: &Path) -> std::path::PathBuf {
    dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|s| s.to_str()).unwrap_or("out")
    ))
}
