//! Back-projection of depth maps and ASCII PLY meshes.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::maps::DepthMap;

/// Triangles whose corner depths differ by more than this are dropped.
pub const DEFAULT_DISCONTINUITY: f64 = 0.3;

/// Pinhole camera intrinsics in pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0) || ![fx, fy, cx, cy].iter().all(|v| v.is_finite()) {
            return Err(Error::Contract(format!("focal lengths must be positive, got fx={fx} fy={fy}")));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    /// Generic camera for a `height x width` image: focal length equal to the
    /// width (about 53 degrees horizontal field of view), centred principal
    /// point.
    pub fn generic(height: usize, width: usize) -> Self {
        Self {
            fx: width as f64,
            fy: width as f64,
            cx: (width as f64 - 1.0) / 2.0,
            cy: (height as f64 - 1.0) / 2.0,
        }
    }
}

/// Camera-frame point of every valid pixel, row-major, with its grid index.
pub fn depth_to_points(d: &DepthMap, k: &Intrinsics) -> Vec<(usize, [f64; 3])> {
    let (h, w) = d.dims();
    let mut out = Vec::with_capacity(d.valid_count());
    for i in 0..h {
        for j in 0..w {
            if d.is_valid(i, j) {
                let z = d.get(i, j);
                out.push((i * w + j, [(j as f64 - k.cx) * z / k.fx, (i as f64 - k.cy) * z / k.fy, z]));
            }
        }
    }
    out
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Mesh {
    pub vertices: Vec<[f64; 3]>,
    pub faces: Vec<[usize; 3]>,
}

/// Triangulates a depth grid: every valid pixel is a vertex, each 2x2 cell
/// gives two triangles (or one when a corner is invalid), and triangles that
/// span a depth jump above `max_jump` are dropped.
pub fn grid_mesh(d: &DepthMap, k: &Intrinsics, max_jump: f64) -> Mesh {
    let (h, w) = d.dims();
    let points = depth_to_points(d, k);
    let mut index = vec![usize::MAX; h * w];
    for (n, (grid, _)) in points.iter().enumerate() {
        index[*grid] = n;
    }
    let depth = |g: usize| d.values()[g];
    let mut faces = Vec::new();
    let mut push = |tri: [usize; 3]| {
        let z = tri.map(depth);
        let spread = z.iter().cloned().fold(f64::MIN, f64::max) - z.iter().cloned().fold(f64::MAX, f64::min);
        if spread <= max_jump {
            faces.push(tri.map(|g| index[g]));
        }
    };
    for i in 0..h.saturating_sub(1) {
        for j in 0..w.saturating_sub(1) {
            let (a, b, c, e) = (i * w + j, i * w + j + 1, (i + 1) * w + j, (i + 1) * w + j + 1);
            let ok = |g: usize| index[g] != usize::MAX;
            match (ok(a), ok(b), ok(c), ok(e)) {
                (true, true, true, true) => {
                    push([a, c, b]);
                    push([b, c, e]);
                }
                (false, true, true, true) => push([b, c, e]),
                (true, false, true, true) => push([a, c, e]),
                (true, true, false, true) => push([a, e, b]),
                (true, true, true, false) => push([a, c, b]),
                _ => {}
            }
        }
    }
    Mesh {
        vertices: points.into_iter().map(|(_, p)| p).collect(),
        faces,
    }
}

pub fn mesh_to_ply(mesh: &Mesh) -> String {
    let mut s = String::with_capacity(48 * mesh.vertices.len() + 16 * mesh.faces.len() + 256);
    s.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(s, "element vertex {}", mesh.vertices.len());
    s.push_str("property double x\nproperty double y\nproperty double z\n");
    let _ = writeln!(s, "element face {}", mesh.faces.len());
    s.push_str("property list uchar int vertex_indices\nend_header\n");
    for v in &mesh.vertices {
        let _ = writeln!(s, "{} {} {}", v[0], v[1], v[2]);
    }
    for f in &mesh.faces {
        let _ = writeln!(s, "3 {} {} {}", f[0], f[1], f[2]);
    }
    s
}

pub fn write_mesh(mesh: &Mesh, path: &Path) -> Result<()> {
    fs::write(path, mesh_to_ply(mesh)).map_err(|e| Error::io(path, e))
}

/// Parses the ASCII PLY subset written by [`mesh_to_ply`].
pub fn parse_ply(text: &str) -> std::result::Result<Mesh, String> {
    let mut lines = text.lines();
    if lines.next() != Some("ply") {
        return Err("missing ply magic".into());
    }
    let (mut n_vertices, mut n_faces) = (None, None);
    for line in lines.by_ref() {
        let f: Vec<&str> = line.split_whitespace().collect();
        match f.as_slice() {
            ["end_header"] => break,
            ["format", fmt, _] if *fmt != "ascii" => return Err(format!("unsupported format {fmt}")),
            ["element", "vertex", n] => n_vertices = Some(n.parse::<usize>().map_err(|e| e.to_string())?),
            ["element", "face", n] => n_faces = Some(n.parse::<usize>().map_err(|e| e.to_string())?),
            _ => {}
        }
    }
    let n_vertices = n_vertices.ok_or("no vertex element")?;
    let mut mesh = Mesh::default();
    for _ in 0..n_vertices {
        let line = lines.next().ok_or("truncated vertex list")?;
        let v: Vec<f64> = line
            .split_whitespace()
            .map(|t| t.parse::<f64>().map_err(|e| e.to_string()))
            .collect::<std::result::Result<_, _>>()?;
        if v.len() != 3 {
            return Err(format!("vertex line {line:?}"));
        }
        mesh.vertices.push([v[0], v[1], v[2]]);
    }
    for _ in 0..n_faces.unwrap_or(0) {
        let line = lines.next().ok_or("truncated face list")?;
        let v: Vec<usize> = line
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| e.to_string()))
            .collect::<std::result::Result<_, _>>()?;
        if v.len() != 4 || v[0] != 3 || v[1..].iter().any(|&i| i >= n_vertices) {
            return Err(format!("face line {line:?}"));
        }
        mesh.faces.push([v[1], v[2], v[3]]);
    }
    Ok(mesh)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn principal_ray() {
        let d = DepthMap::constant(5, 5, 2.0);
        let k = Intrinsics::new(100.0, 100.0, 2.0, 2.0).unwrap();
        let pts = depth_to_points(&d, &k);
        assert_eq!(pts[12].1, [0.0, 0.0, 2.0]);
        assert!(Intrinsics::new(0.0, 1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn doubling_focal_length_halves_x() {
        let mut rng = ChaCha8Rng::seed_from_u64(70);
        let d = DepthMap::new(6, 7, (0..42).map(|_| rng.random_range(0.5..4.0)).collect()).unwrap();
        let k = Intrinsics::new(50.0, 60.0, 3.1, 2.7).unwrap();
        let k2 = Intrinsics { fx: 100.0, ..k };
        for ((_, a), (_, b)) in depth_to_points(&d, &k).iter().zip(&depth_to_points(&d, &k2)) {
            assert!((a[0] / 2.0 - b[0]).abs() < 1e-15);
            assert_eq!(a[1], b[1]);
        }
    }

    #[test]
    fn points_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        let vals: Vec<f64> = (0..80).map(|i| if i % 9 == 0 { 0.0 } else { rng.random_range(0.5..4.0) }).collect();
        let d = DepthMap::new(8, 10, vals.clone()).unwrap();
        let k = Intrinsics::new(320.0, 310.0, 4.5, 3.5).unwrap();
        let pts = depth_to_points(&d, &k);
        let mut n = 0;
        for i in 0..8 {
            for j in 0..10 {
                let z = vals[i * 10 + j];
                if z == 0.0 {
                    continue;
                }
                let want = [(j as f64 - 4.5) * z / 320.0, (i as f64 - 3.5) * z / 310.0, z];
                assert_eq!(pts[n], (i * 10 + j, want));
                n += 1;
            }
        }
        assert_eq!(n, pts.len());
    }

    #[test]
    fn small_grids_triangulate() {
        let k = Intrinsics::generic(2, 2);
        let full = grid_mesh(&DepthMap::constant(2, 2, 1.0), &k, DEFAULT_DISCONTINUITY);
        assert_eq!((full.vertices.len(), full.faces.len()), (4, 2));
        let holed = DepthMap::new(2, 2, vec![1.0, 1.0, 1.0, 0.0]).unwrap();
        let m = grid_mesh(&holed, &k, DEFAULT_DISCONTINUITY);
        assert_eq!((m.vertices.len(), m.faces.len()), (3, 1));
        let jump = DepthMap::new(2, 2, vec![1.0, 1.0, 1.0, 2.0]).unwrap();
        assert_eq!(grid_mesh(&jump, &k, DEFAULT_DISCONTINUITY).faces.len(), 1);
    }

    #[test]
    fn ply_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let d = DepthMap::new(9, 9, (0..81).map(|_| rng.random_range(1.0..1.2)).collect()).unwrap();
        let mesh = grid_mesh(&d, &Intrinsics::generic(9, 9), DEFAULT_DISCONTINUITY);
        let text = mesh_to_ply(&mesh);
        assert_eq!(parse_ply(&text).unwrap(), mesh);
        assert_eq!(text, mesh_to_ply(&grid_mesh(&d, &Intrinsics::generic(9, 9), DEFAULT_DISCONTINUITY)));
        assert!(parse_ply("ply\nformat ascii 1.0\nelement vertex 2\nend_header\n1 2 3\n").is_err());
    }
}
