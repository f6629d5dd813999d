//! Gradient integration, the depth error metric and mesh export.
//!
//! Both solvers minimise the same discrete energy: for every pair of
//! 4-neighbours `p, q` inside the mask, `z_q - z_p` should equal the average of
//! the two gradients times the pixel scale. Its normal equations are a graph
//! Laplacian with Neumann boundaries.

use std::io::{BufRead, Write};

use rustdct::DctPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par_map;
use crate::types::{DepthMap, GradientField, Mask};

/// Relative residual at which the iterative solver stops.
pub const CG_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Backend {
    /// Spectral for full rectangles, iterative otherwise.
    #[default]
    Auto,
    /// Cosine transform; only valid on a full mask.
    Spectral,
    /// Preconditioned conjugate gradients on the mask.
    Iterative,
}

/// Right-hand side `b` of `L z = b`.
fn divergence(g: &GradientField) -> Vec<f64> {
    let plane = g.plane;
    let (w, h, s) = (plane.width, plane.height, plane.pixel_scale);
    let mut b = vec![0.0; plane.len()];
    for y in 0..h {
        for x in 0..w {
            let p = plane.index(x, y);
            if !g.mask.at(p) {
                continue;
            }
            if x + 1 < w && g.mask.at(p + 1) {
                let t = 0.5 * s * (g.gx[p] + g.gx[p + 1]);
                b[p] -= t;
                b[p + 1] += t;
            }
            if y + 1 < h && g.mask.at(p + w) {
                let t = 0.5 * s * (g.gy[p] + g.gy[p + w]);
                b[p] -= t;
                b[p + w] += t;
            }
        }
    }
    b
}

fn check_field(g: &GradientField) -> Result<()> {
    if g.mask.count() == 0 {
        return Err(Error::SingularSystem);
    }
    if g.mask
        .indices()
        .any(|i| !(g.gx[i].is_finite() && g.gy[i].is_finite()))
    {
        return Err(Error::InvalidInput(
            "gradient is not finite on its mask".into(),
        ));
    }
    Ok(())
}

fn solve_spectral(g: &GradientField) -> Vec<f64> {
    let (w, h) = (g.plane.width, g.plane.height);
    let mut data = divergence(g);
    let mut planner = DctPlanner::new();
    let row = planner.plan_dct2(w);
    let col = planner.plan_dct2(h);
    let mut column = vec![0.0; h];

    for r in data.chunks_exact_mut(w) {
        row.process_dct2(r);
    }
    for x in 0..w {
        for y in 0..h {
            column[y] = data[y * w + x];
        }
        col.process_dct2(&mut column);
        for y in 0..h {
            data[y * w + x] = column[y];
        }
    }

    let pi = std::f64::consts::PI;
    for l in 0..h {
        let ey = 2.0 - 2.0 * (pi * l as f64 / h as f64).cos();
        for k in 0..w {
            let ex = 2.0 - 2.0 * (pi * k as f64 / w as f64).cos();
            let i = l * w + k;
            data[i] = if k == 0 && l == 0 {
                0.0
            } else {
                data[i] / (ex + ey)
            };
        }
    }

    let scale_x = 2.0 / w as f64;
    let scale_y = 2.0 / h as f64;
    for x in 0..w {
        for y in 0..h {
            column[y] = data[y * w + x];
        }
        col.process_dct3(&mut column);
        for y in 0..h {
            data[y * w + x] = column[y] * scale_y;
        }
    }
    for r in data.chunks_exact_mut(w) {
        row.process_dct3(r);
        r.iter_mut().for_each(|v| *v *= scale_x);
    }
    data
}

/// Mask Laplacian in compact form: for each mask pixel its neighbour slots.
struct Laplacian {
    /// Mask pixel index of each unknown.
    pixels: Vec<usize>,
    neighbours: Vec<[u32; 4]>,
    degree: Vec<u32>,
}

const NONE: u32 = u32::MAX;

impl Laplacian {
    fn new(mask: &Mask) -> Self {
        let (w, h) = (mask.width(), mask.height());
        let pixels: Vec<usize> = mask.indices().collect();
        let mut slot = vec![NONE; w * h];
        for (k, &p) in pixels.iter().enumerate() {
            slot[p] = k as u32;
        }
        let mut neighbours = Vec::with_capacity(pixels.len());
        let mut degree = Vec::with_capacity(pixels.len());
        for &p in &pixels {
            let (x, y) = (p % w, p / w);
            let mut nb = [NONE; 4];
            if x > 0 {
                nb[0] = slot[p - 1];
            }
            if x + 1 < w {
                nb[1] = slot[p + 1];
            }
            if y > 0 {
                nb[2] = slot[p - w];
            }
            if y + 1 < h {
                nb[3] = slot[p + w];
            }
            degree.push(nb.iter().filter(|&&n| n != NONE).count() as u32);
            neighbours.push(nb);
        }
        Self {
            pixels,
            neighbours,
            degree,
        }
    }

    fn apply(&self, z: &[f64]) -> Vec<f64> {
        par_map(z.len(), |k| {
            let mut acc = self.degree[k] as f64 * z[k];
            for &n in &self.neighbours[k] {
                if n != NONE {
                    acc -= z[n as usize];
                }
            }
            acc
        })
    }

    /// Connected component label of every unknown.
    fn components(&self) -> (Vec<usize>, usize) {
        let mut label = vec![usize::MAX; self.pixels.len()];
        let mut next = 0;
        let mut stack = Vec::new();
        for start in 0..self.pixels.len() {
            if label[start] != usize::MAX {
                continue;
            }
            label[start] = next;
            stack.push(start);
            while let Some(k) = stack.pop() {
                for &n in &self.neighbours[k] {
                    if n != NONE && label[n as usize] == usize::MAX {
                        label[n as usize] = next;
                        stack.push(n as usize);
                    }
                }
            }
            next += 1;
        }
        (label, next)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Removes the mean of every connected component, which spans the null
/// space of the Laplacian.
fn project_components(v: &mut [f64], label: &[usize], n_components: usize) {
    let mut sum = vec![0.0; n_components];
    let mut count = vec![0usize; n_components];
    for (x, &c) in v.iter().zip(label) {
        sum[c] += x;
        count[c] += 1;
    }
    for (x, &c) in v.iter_mut().zip(label) {
        *x -= sum[c] / count[c] as f64;
    }
}

fn solve_iterative(g: &GradientField) -> Result<Vec<f64>> {
    let lap = Laplacian::new(&g.mask);
    let full_b = divergence(g);
    let b: Vec<f64> = lap.pixels.iter().map(|&p| full_b[p]).collect();
    let (label, n_components) = lap.components();
    let n = b.len();
    let inv_diag: Vec<f64> = lap
        .degree
        .iter()
        .map(|&d| if d > 0 { 1.0 / d as f64 } else { 1.0 })
        .collect();

    let mut z = vec![0.0; n];
    let mut r = b.clone();
    let b_norm = dot(&b, &b).sqrt();
    if b_norm > 0.0 {
        let mut s: Vec<f64> = r.iter().zip(&inv_diag).map(|(r, d)| r * d).collect();
        project_components(&mut s, &label, n_components);
        let mut p = s.clone();
        let mut rs = dot(&r, &s);
        let max_iters = 20 * n + 100;
        let mut converged = false;
        for _ in 0..max_iters {
            let ap = lap.apply(&p);
            let pap = dot(&p, &ap);
            if pap <= 0.0 {
                converged = dot(&r, &r).sqrt() <= CG_TOL * b_norm;
                break;
            }
            let alpha = rs / pap;
            for k in 0..n {
                z[k] += alpha * p[k];
                r[k] -= alpha * ap[k];
            }
            if dot(&r, &r).sqrt() <= CG_TOL * b_norm {
                converged = true;
                break;
            }
            for k in 0..n {
                s[k] = r[k] * inv_diag[k];
            }
            project_components(&mut s, &label, n_components);
            let rs_new = dot(&r, &s);
            let beta = rs_new / rs;
            rs = rs_new;
            for k in 0..n {
                p[k] = s[k] + beta * p[k];
            }
        }
        if !converged {
            return Err(Error::DivergedSolve {
                stage: "integration",
            });
        }
    }
    project_components(&mut z, &label, n_components);
    let mut depth = vec![0.0; g.plane.len()];
    for (k, &p) in lap.pixels.iter().enumerate() {
        depth[p] = z[k];
    }
    Ok(depth)
}

/// Integrates a gradient field into a zero-mean depth map.
pub fn integrate(g: &GradientField) -> Result<DepthMap> {
    integrate_with(g, Backend::Auto)
}

pub fn integrate_with(g: &GradientField, backend: Backend) -> Result<DepthMap> {
    check_field(g)?;
    let full = g.mask.count() == g.plane.len();
    let depth = match backend {
        Backend::Auto if full => solve_spectral(g),
        Backend::Spectral if full => solve_spectral(g),
        Backend::Spectral => {
            return Err(Error::InvalidInput(
                "spectral integration needs a full rectangular mask".into(),
            ))
        }
        Backend::Auto | Backend::Iterative => solve_iterative(g)?,
    };
    DepthMap::centered(g.plane, depth, g.mask.clone())
}

/// How a reconstruction is aligned to the truth before measuring error.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Alignment {
    #[default]
    Offset,
    OffsetScale,
}

fn median_of(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Best offset and its L1 cost for a fixed scale.
fn l1_fit(recon: &[f64], truth: &[f64], scale: f64) -> (f64, f64) {
    let c = median_of(
        truth
            .iter()
            .zip(recon)
            .map(|(t, r)| t - scale * r)
            .collect(),
    );
    let cost = truth
        .iter()
        .zip(recon)
        .map(|(t, r)| (scale * r + c - t).abs())
        .sum();
    (c, cost)
}

/// Mean absolute depth difference after L1 alignment, over the truth's depth
/// range.
pub fn depth_error(recon: &DepthMap, truth: &DepthMap, alignment: Alignment) -> Result<f64> {
    recon.plane.check_same(&truth.plane, "truth depth")?;
    if recon.mask != truth.mask {
        return Err(Error::InvalidInput("depth masks differ".into()));
    }
    let range = truth.range();
    if !(range > 0.0) {
        return Err(Error::DegenerateTruth);
    }
    let r: Vec<f64> = recon.mask.indices().map(|i| recon.depth[i]).collect();
    let t: Vec<f64> = truth.mask.indices().map(|i| truth.depth[i]).collect();
    let scale = match alignment {
        Alignment::Offset => 1.0,
        Alignment::OffsetScale => {
            // The partial minimum over the offset is convex in the scale.
            let spread = |v: &[f64]| v.iter().map(|x| x.abs()).sum::<f64>();
            let hi = 4.0 * spread(&t) / spread(&r).max(f64::MIN_POSITIVE);
            let (mut lo, mut hi) = (-hi, hi);
            for _ in 0..200 {
                let a = lo + (hi - lo) / 3.0;
                let b = hi - (hi - lo) / 3.0;
                if l1_fit(&r, &t, a).1 <= l1_fit(&r, &t, b).1 {
                    hi = b;
                } else {
                    lo = a;
                }
            }
            0.5 * (lo + hi)
        }
    };
    let (_, cost) = l1_fit(&r, &t, scale);
    Ok(cost / r.len() as f64 / range)
}

/// Indexed triangle mesh.
#[derive(Clone, Debug, PartialEq)]
pub struct TriangleMesh {
    pub vertices: Vec<[f64; 3]>,
    pub triangles: Vec<[u32; 3]>,
}

/// One vertex per mask pixel at `(x·s, y·s, z)` and two triangles per pixel
/// quad, each kept only if all its corners are in the mask.
pub fn export_mesh(depth: &DepthMap) -> TriangleMesh {
    let plane = depth.plane;
    let (w, h, s) = (plane.width, plane.height, plane.pixel_scale);
    let mut slot = vec![NONE; plane.len()];
    let mut vertices = Vec::with_capacity(depth.mask.count());
    for i in depth.mask.indices() {
        let (x, y) = plane.coords(i);
        slot[i] = vertices.len() as u32;
        vertices.push([x as f64 * s, y as f64 * s, depth.depth[i]]);
    }
    let mut triangles = Vec::new();
    for y in 0..h.saturating_sub(1) {
        for x in 0..w - 1 {
            let tl = slot[plane.index(x, y)];
            let tr = slot[plane.index(x + 1, y)];
            let bl = slot[plane.index(x, y + 1)];
            let br = slot[plane.index(x + 1, y + 1)];
            for tri in [[tl, tr, bl], [tr, br, bl]] {
                if tri.iter().all(|&v| v != NONE) {
                    triangles.push(tri);
                }
            }
        }
    }
    TriangleMesh {
        vertices,
        triangles,
    }
}

pub fn write_obj(mesh: &TriangleMesh, out: &mut impl Write) -> Result<()> {
    for v in &mesh.vertices {
        writeln!(out, "v {} {} {}", v[0], v[1], v[2])?;
    }
    for t in &mesh.triangles {
        writeln!(out, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
    }
    Ok(())
}

/// Reads the vertices and triangular faces of an OBJ file.
pub fn read_obj(input: impl BufRead) -> Result<TriangleMesh> {
    let bad = |line: &str| Error::InvalidInput(format!("malformed OBJ line: {line}"));
    let mut mesh = TriangleMesh {
        vertices: Vec::new(),
        triangles: Vec::new(),
    };
    for line in input.lines() {
        let line = line?;
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let v: Vec<f64> = parts
                    .map(|p| p.parse::<f64>().map_err(|_| bad(&line)))
                    .collect::<Result<_>>()?;
                if v.len() < 3 {
                    return Err(bad(&line));
                }
                mesh.vertices.push([v[0], v[1], v[2]]);
            }
            Some("f") => {
                let f: Vec<u32> = parts
                    .map(|p| {
                        p.split('/')
                            .next()
                            .and_then(|i| i.parse::<u32>().ok())
                            .filter(|&i| i > 0)
                            .map(|i| i - 1)
                            .ok_or_else(|| bad(&line))
                    })
                    .collect::<Result<_>>()?;
                if f.len() != 3 {
                    return Err(bad(&line));
                }
                mesh.triangles.push([f[0], f[1], f[2]]);
            }
            _ => {}
        }
    }
    Ok(mesh)
}

/// Binary little-endian PLY with `float` vertices and `uchar`/`int` faces.
pub fn write_ply(mesh: &TriangleMesh, out: &mut impl Write) -> Result<()> {
    write!(
        out,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\nproperty float x\nproperty float y\nproperty float z\nelement face {}\nproperty list uchar int vertex_indices\nend_header\n",
        mesh.vertices.len(),
        mesh.triangles.len()
    )?;
    for v in &mesh.vertices {
        for c in v {
            out.write_all(&(*c as f32).to_le_bytes())?;
        }
    }
    for t in &mesh.triangles {
        out.write_all(&[3u8])?;
        for i in t {
            out.write_all(&(*i as i32).to_le_bytes())?;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::ImagePlane;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn field(plane: ImagePlane, mask: Mask, f: impl Fn(f64, f64) -> (f64, f64)) -> GradientField {
        let (gx, gy) = (0..plane.len())
            .map(|i| {
                let (x, y) = plane.coords(i);
                let (wx, wy) = plane.world_xy(x as f64, y as f64);
                f(wx, wy)
            })
            .unzip();
        GradientField::new(plane, gx, gy, mask).unwrap()
    }

    fn disc(w: usize) -> Mask {
        let c = (w as f64 - 1.0) / 2.0;
        Mask::from_fn(w, w, |x, y| {
            (x as f64 - c).powi(2) + (y as f64 - c).powi(2) < (0.45 * w as f64).powi(2)
        })
    }

    fn max_plane_error(depth: &DepthMap, a: f64, b: f64) -> f64 {
        let truth: Vec<f64> = (0..depth.plane.len())
            .map(|i| {
                let (x, y) = depth.plane.coords(i);
                let (wx, wy) = depth.plane.world_xy(x as f64, y as f64);
                a * wx + b * wy
            })
            .collect();
        let truth = DepthMap::centered(depth.plane, truth, depth.mask.clone()).unwrap();
        depth
            .mask
            .indices()
            .map(|i| (depth.depth[i] - truth.depth[i]).abs())
            .fold(0.0, f64::max)
    }

    #[test]
    fn zero_gradients_give_flat_depth() {
        let plane = ImagePlane::new(9, 7, 0.1).unwrap();
        for mask in [Mask::full(9, 7), Mask::from_fn(9, 7, |x, y| x + y > 2)] {
            let d = integrate(&field(plane, mask, |_, _| (0.0, 0.0))).unwrap();
            assert!(d.mask.indices().all(|i| d.depth[i] == 0.0));
        }
    }

    #[test]
    fn planes_are_exact_on_both_backends() {
        let plane = ImagePlane::new(40, 33, 0.05).unwrap();
        let (a, b) = (0.7, -1.3);
        let full = field(plane, Mask::full(40, 33), |_, _| (a, b));
        for backend in [Backend::Spectral, Backend::Iterative] {
            let d = integrate_with(&full, backend).unwrap();
            assert!(max_plane_error(&d, a, b) < 1e-8, "{backend:?}");
        }
        let holed = Mask::from_fn(40, 33, |x, y| {
            !(10..20).contains(&x) || !(5..12).contains(&y)
        });
        let d = integrate(&field(plane, holed, |_, _| (a, b))).unwrap();
        assert!(max_plane_error(&d, a, b) < 1e-8);
    }

    #[test]
    fn spectral_rejects_partial_mask() {
        let plane = ImagePlane::new(8, 8, 1.0).unwrap();
        let g = field(plane, disc(8), |_, _| (0.0, 0.0));
        assert!(integrate_with(&g, Backend::Spectral).is_err());
        let g = field(plane, Mask::empty(8, 8), |_, _| (0.0, 0.0));
        assert!(matches!(integrate(&g), Err(Error::SingularSystem)));
    }

    #[test]
    fn backends_agree_on_smooth_field() {
        let plane = ImagePlane::new(32, 24, 1.0 / 32.0).unwrap();
        let g = field(plane, Mask::full(32, 24), |x, y| {
            ((3.0 * x).cos() * y, (3.0 * x).sin() / 3.0 + y)
        });
        let a = integrate_with(&g, Backend::Spectral).unwrap();
        let b = integrate_with(&g, Backend::Iterative).unwrap();
        for i in 0..plane.len() {
            assert!((a.depth[i] - b.depth[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn integrable_field_reproduces_its_gradients() {
        let n = 64;
        let plane = ImagePlane::new(n, n, 1.0 / n as f64).unwrap();
        // Gradients of 0.05 sin(4x) cos(3y).
        let g = field(plane, disc(n), |x, y| {
            (
                0.2 * (4.0 * x).cos() * (3.0 * y).cos(),
                -0.15 * (4.0 * x).sin() * (3.0 * y).sin(),
            )
        });
        let d = integrate(&g).unwrap();
        let s = plane.pixel_scale;
        let mut ss = 0.0;
        let mut count = 0;
        for y in 1..n - 1 {
            for x in 1..n - 1 {
                let i = plane.index(x, y);
                let neighbours = [i - 1, i + 1, i - n, i + n];
                if !g.mask.at(i) || neighbours.iter().any(|&j| !g.mask.at(j)) {
                    continue;
                }
                let dx = (d.depth[i + 1] - d.depth[i - 1]) / (2.0 * s);
                let dy = (d.depth[i + n] - d.depth[i - n]) / (2.0 * s);
                ss += (dx - g.gx[i]).powi(2) + (dy - g.gy[i]).powi(2);
                count += 1;
            }
        }
        assert!((ss / count as f64).sqrt() < 1e-3);
    }

    #[test]
    fn integration_is_linear() {
        let plane = ImagePlane::new(30, 30, 0.1).unwrap();
        let mask = disc(30);
        let g1 = field(plane, mask.clone(), |x, y| (x.sin(), y * y));
        let g2 = field(plane, mask.clone(), |x, y| (x * y, (2.0 * y).cos()));
        let (a, b) = (2.0, -0.5);
        let combo = field(plane, mask, |x, y| {
            (a * x.sin() + b * x * y, a * y * y + b * (2.0 * y).cos())
        });
        let (z1, z2, z) = (
            integrate(&g1).unwrap(),
            integrate(&g2).unwrap(),
            integrate(&combo).unwrap(),
        );
        for i in z.mask.indices() {
            assert!((z.depth[i] - (a * z1.depth[i] + b * z2.depth[i])).abs() < 1e-7);
        }
    }

    #[test]
    fn disconnected_pieces_are_each_centered() {
        let plane = ImagePlane::new(10, 4, 1.0).unwrap();
        let mask = Mask::from_fn(10, 4, |x, _| x != 4 && x != 5);
        let d = integrate(&field(plane, mask, |_, _| (1.0, 0.0))).unwrap();
        let left: f64 = (0..4)
            .flat_map(|y| (0..4).map(move |x| (x, y)))
            .map(|(x, y)| d.depth[plane.index(x, y)])
            .sum();
        assert!(left.abs() < 1e-9);
    }

    fn depth(plane: ImagePlane, mask: &Mask, f: impl Fn(usize) -> f64) -> DepthMap {
        DepthMap::centered(plane, (0..plane.len()).map(f).collect(), mask.clone()).unwrap()
    }

    #[test]
    fn depth_error_ignores_offsets() {
        let plane = ImagePlane::new(20, 20, 1.0).unwrap();
        let mask = disc(20);
        let truth = depth(plane, &mask, |i| (i as f64 * 0.37).sin());
        assert_eq!(depth_error(&truth, &truth, Alignment::Offset).unwrap(), 0.0);
        let shifted = DepthMap {
            depth: truth.depth.iter().map(|z| z + 5.0).collect(),
            ..truth.clone()
        };
        assert!(depth_error(&shifted, &truth, Alignment::Offset).unwrap() < 1e-12);
        let scaled = DepthMap {
            depth: truth.depth.iter().map(|z| 2.0 * z + 1.0).collect(),
            ..truth.clone()
        };
        assert!(depth_error(&scaled, &truth, Alignment::Offset).unwrap() > 0.1);
        assert!(depth_error(&scaled, &truth, Alignment::OffsetScale).unwrap() < 1e-9);
    }

    #[test]
    fn flat_truth_is_degenerate() {
        let plane = ImagePlane::new(4, 4, 1.0).unwrap();
        let flat = depth(plane, &Mask::full(4, 4), |_| 1.0);
        assert!(matches!(
            depth_error(&flat, &flat, Alignment::Offset),
            Err(Error::DegenerateTruth)
        ));
    }

    #[test]
    fn uniform_noise_of_one_percent_scores_half_a_percent() {
        let plane = ImagePlane::new(64, 64, 1.0).unwrap();
        let mask = Mask::full(64, 64);
        let truth = depth(plane, &mask, |i| (i % 64) as f64 / 63.0);
        let r = 0.01 * truth.range();
        let mut total = 0.0;
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let noisy = DepthMap {
                depth: truth
                    .depth
                    .iter()
                    .map(|z| z + rng.random_range(-r..r))
                    .collect(),
                ..truth.clone()
            };
            total += depth_error(&noisy, &truth, Alignment::Offset).unwrap();
        }
        let mean = total / 20.0;
        assert!((mean - 0.005).abs() < 2e-4, "{mean}");
    }

    #[test]
    fn smallest_mesh() {
        let plane = ImagePlane::new(2, 2, 0.5).unwrap();
        let d = depth(plane, &Mask::full(2, 2), |i| i as f64);
        let mesh = export_mesh(&d);
        assert_eq!(mesh.vertices.len(), 4);
        assert_eq!(mesh.triangles, vec![[0, 1, 2], [1, 3, 2]]);
        assert_eq!(mesh.vertices[3][..2], [0.5, 0.5]);
    }

    #[test]
    fn masked_pixel_has_no_triangles() {
        let plane = ImagePlane::new(3, 3, 1.0).unwrap();
        let mask = Mask::from_fn(3, 3, |x, y| (x, y) != (1, 1));
        let mesh = export_mesh(&depth(plane, &mask, |_| 0.0));
        assert_eq!(mesh.vertices.len(), 8);
        // Only the two triangles cut off at the far corners survive.
        assert_eq!(mesh.triangles.len(), 2);
        for t in &mesh.triangles {
            assert!(t
                .iter()
                .all(|&v| mesh.vertices[v as usize][..2] != [1.0, 1.0]));
        }
    }

    #[test]
    fn obj_round_trip() {
        let plane = ImagePlane::new(12, 12, 0.25).unwrap();
        let mask = disc(12);
        let d = depth(plane, &mask, |i| (i as f64).sqrt());
        let mesh = export_mesh(&d);
        let mut buf = Vec::new();
        write_obj(&mesh, &mut buf).unwrap();
        let back = read_obj(buf.as_slice()).unwrap();
        assert_eq!(back.vertices.len(), mask.count());
        assert_eq!(back, mesh);
    }

    #[test]
    fn ply_layout() {
        let plane = ImagePlane::new(2, 2, 1.0).unwrap();
        let mesh = export_mesh(&depth(plane, &Mask::full(2, 2), |i| i as f64));
        let mut buf = Vec::new();
        write_ply(&mesh, &mut buf).unwrap();
        let header_end = buf.windows(11).position(|w| w == b"end_header\n").unwrap() + 11;
        assert_eq!(buf.len() - header_end, 4 * 12 + 2 * 13);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn integration_is_linear_in_random_fields(
            seed in any::<u64>(),
            a in -3.0f64..3.0,
            b in -3.0f64..3.0,
        ) {
            let plane = ImagePlane::new(16, 12, 0.1).unwrap();
            let mask = Mask::from_fn(16, 12, |x, y| (x + 2 * y) % 7 != 0);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut noise = || (0..plane.len()).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
            let (g1x, g1y, g2x, g2y) = (noise(), noise(), noise(), noise());
            let mix = |u: &[f64], v: &[f64]| u.iter().zip(v).map(|(p, q)| a * p + b * q).collect::<Vec<_>>();
            let g1 = GradientField::new(plane, g1x.clone(), g1y.clone(), mask.clone()).unwrap();
            let g2 = GradientField::new(plane, g2x.clone(), g2y.clone(), mask.clone()).unwrap();
            let g = GradientField::new(plane, mix(&g1x, &g2x), mix(&g1y, &g2y), mask).unwrap();
            let (z1, z2, z) = (integrate(&g1).unwrap(), integrate(&g2).unwrap(), integrate(&g).unwrap());
            for i in z.mask.indices() {
                prop_assert!((z.depth[i] - (a * z1.depth[i] + b * z2.depth[i])).abs() < 1e-6);
            }
        }
    }
}
