//! Forward Lambertian renderer under near point lights, with synthetic
//! scenes that carry exact ground truth.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::par_map;
use crate::types::{DepthMap, ImagePlane, LightRig, Mask, ObservationStack, ProxyGeometry, Vec3};

/// Horizontal ray-march step, in pixels.
pub const SHADOW_STEP: f64 = 0.5;

/// Ground-truth scene: geometry, albedo, lights.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub proxy_truth: ProxyGeometry,
    pub albedo: Vec<f64>,
    pub rig_truth: LightRig,
    pub cast_shadows: bool,
}

impl SyntheticScene {
    pub fn plane(&self) -> &ImagePlane {
        self.proxy_truth.plane()
    }

    /// Ground-truth depth, zero mean over the recon mask.
    pub fn depth(&self) -> DepthMap {
        let z = self.proxy_truth.positions().iter().map(|p| p.z).collect();
        DepthMap::centered(*self.plane(), z, self.proxy_truth.recon_mask().clone())
            .expect("scene geometry is finite on its mask")
    }

    pub fn with_rig(mut self, rig: LightRig) -> Self {
        self.rig_truth = rig;
        self
    }

    pub fn with_albedo(mut self, albedo: Vec<f64>) -> Self {
        assert_eq!(albedo.len(), self.plane().len());
        self.albedo = albedo;
        self
    }

    pub fn with_cast_shadows(mut self, on: bool) -> Self {
        self.cast_shadows = on;
        self
    }

    /// Height of the surface at fractional pixel `(x, y)` by bilinear
    /// interpolation, `None` outside the grid or the recon mask.
    fn height_at(&self, x: f64, y: f64) -> Option<f64> {
        let plane = self.plane();
        if x < 0.0 || y < 0.0 {
            return None;
        }
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        if x0 >= plane.width || y0 >= plane.height {
            return None;
        }
        let x1 = (x0 + 1).min(plane.width - 1);
        let y1 = (y0 + 1).min(plane.height - 1);
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        let mask = self.proxy_truth.recon_mask();
        let pos = self.proxy_truth.positions();
        let mut acc = 0.0;
        for (xi, yi, w) in [
            (x0, y0, (1.0 - fx) * (1.0 - fy)),
            (x1, y0, fx * (1.0 - fy)),
            (x0, y1, (1.0 - fx) * fy),
            (x1, y1, fx * fy),
        ] {
            if w == 0.0 {
                continue;
            }
            let i = plane.index(xi, yi);
            if !mask.at(i) {
                return None;
            }
            acc += w * pos[i].z;
        }
        Some(acc)
    }

    /// Whether the segment from the surface at `pixel` to `light` passes below
    /// the height field.
    pub fn is_occluded(&self, pixel: usize, light: &Vec3, max_height: f64) -> bool {
        let plane = self.plane();
        let v = self.proxy_truth.positions()[pixel];
        let u = light - v;
        let horizontal = (u.x * u.x + u.y * u.y).sqrt() / plane.pixel_scale;
        if horizontal < 1e-9 {
            return false;
        }
        let (px, py) = plane.coords(pixel);
        let (dx, dy) = (
            u.x / plane.pixel_scale / horizontal,
            u.y / plane.pixel_scale / horizontal,
        );
        let rise = u.z / horizontal;
        let eps = 1e-3 * plane.pixel_scale;
        let mut t = SHADOW_STEP;
        while t < horizontal {
            let ray_z = v.z + rise * t;
            if ray_z > max_height {
                return false;
            }
            let (sx, sy) = (px as f64 + dx * t, py as f64 + dy * t);
            if sx < 0.0
                || sy < 0.0
                || sx > (plane.width - 1) as f64
                || sy > (plane.height - 1) as f64
            {
                return false;
            }
            if let Some(h) = self.height_at(sx, sy) {
                if h > ray_z + eps {
                    return true;
                }
            }
            t += SHADOW_STEP;
        }
        false
    }
}

/// Rendered stack plus, per light, the pixels the ray march found occluded.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendering {
    pub observations: ObservationStack,
    pub occluded: Vec<Mask>,
}

/// `max(0, ρ N·D)` at every recon pixel and light, zero where cast shadows
/// block the light.
pub fn render(scene: &SyntheticScene) -> ObservationStack {
    render_with_occlusion(scene).observations
}

pub fn render_with_occlusion(scene: &SyntheticScene) -> Rendering {
    let plane = *scene.plane();
    let proxy = &scene.proxy_truth;
    let rig = &scene.rig_truth;
    let n = rig.len();
    let mask = proxy.recon_mask();
    let max_height = mask
        .indices()
        .map(|i| proxy.positions()[i].z)
        .fold(f64::NEG_INFINITY, f64::max);

    let per_pixel = par_map(plane.len(), |i| {
        let mut values = vec![0.0; n];
        let mut occluded = vec![false; n];
        if !mask.at(i) {
            return (values, occluded);
        }
        let nrm = proxy.normals()[i];
        let v = proxy.positions()[i];
        for j in 0..n {
            let u = rig.positions()[j] - v;
            let r = u.norm();
            let shade = rig.intensities()[j] * nrm.dot(&u) / (r * r * r);
            if shade <= 0.0 {
                continue;
            }
            if scene.cast_shadows && scene.is_occluded(i, &rig.positions()[j], max_height) {
                occluded[j] = true;
                continue;
            }
            values[j] = scene.albedo[i] * shade;
        }
        (values, occluded)
    });

    let mut layers = vec![vec![0.0; plane.len()]; n];
    let mut occluded = vec![Mask::empty(plane.width, plane.height); n];
    for (i, (values, occ)) in per_pixel.into_iter().enumerate() {
        for j in 0..n {
            layers[j][i] = values[j];
            occluded[j].set(i, occ[j]);
        }
    }
    Rendering {
        observations: ObservationStack::new(plane, layers)
            .expect("rendered intensities are finite"),
        occluded,
    }
}

/// Lambertian rendering under distant lights: `max(0, ρ N·L_j)`.
pub fn render_directional(
    proxy: &ProxyGeometry,
    albedo: &[f64],
    directions: &[Vec3],
) -> Result<ObservationStack> {
    let plane = *proxy.plane();
    if albedo.len() != plane.len() {
        return Err(Error::InvalidInput(
            "albedo map does not match the plane".into(),
        ));
    }
    let layers = directions
        .iter()
        .map(|l| {
            (0..plane.len())
                .map(|i| {
                    if proxy.recon_mask().at(i) {
                        (albedo[i] * proxy.normals()[i].dot(l)).max(0.0)
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    ObservationStack::new(plane, layers)
}

/// Adds zero-mean Gaussian noise of standard deviation `sigma` to every
/// nonzero intensity, clamping at zero.
pub fn add_noise(obs: &ObservationStack, sigma: f64, seed: u64) -> ObservationStack {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = obs
        .layers()
        .iter()
        .map(|layer| {
            layer
                .iter()
                .map(|&v| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    if v > 0.0 {
                        (v + sigma * e).max(0.0)
                    } else {
                        v
                    }
                })
                .collect()
        })
        .collect();
    ObservationStack::new(*obs.plane(), layers).expect("noise keeps intensities finite")
}

/// Builds a scene from an analytic height field `z(X, Y)` and its gradient.
fn height_field_scene(
    plane: ImagePlane,
    recon: Mask,
    hairy: Mask,
    rig: LightRig,
    surface: impl Fn(f64, f64) -> (f64, f64, f64),
) -> SyntheticScene {
    let mut normals = Vec::with_capacity(plane.len());
    let mut positions = Vec::with_capacity(plane.len());
    for i in 0..plane.len() {
        let (x, y) = plane.coords(i);
        let (wx, wy) = plane.world_xy(x as f64, y as f64);
        if recon.at(i) {
            let (z, zx, zy) = surface(wx, wy);
            normals.push(Vec3::new(-zx, -zy, 1.0).normalize());
            positions.push(Vec3::new(wx, wy, z));
        } else {
            normals.push(Vec3::z());
            positions.push(Vec3::new(wx, wy, 0.0));
        }
    }
    let smooth = recon.and_not(&hairy);
    let proxy = ProxyGeometry::new(plane, normals, positions, recon, smooth, hairy)
        .expect("analytic scene satisfies proxy invariants");
    SyntheticScene {
        proxy_truth: proxy,
        albedo: vec![1.0; plane.len()],
        rig_truth: rig,
        cast_shadows: false,
    }
}

/// Fraction of the sphere radius covered by the recon mask.
pub const SPHERE_CAP_FRACTION: f64 = 0.95;

/// Front hemisphere of a sphere of `radius` centered at the origin, filling a
/// `resolution`² image. The recon and smooth masks are the cap out to
/// [`SPHERE_CAP_FRACTION`] of the radius.
pub fn make_sphere_scene(resolution: usize, radius: f64, rig: LightRig) -> Result<SyntheticScene> {
    if !(radius > 0.0) {
        return Err(Error::InvalidInput(format!(
            "sphere radius must be positive, got {radius}"
        )));
    }
    let plane = ImagePlane::new(resolution, resolution, 2.0 * radius / resolution as f64)?;
    let cap = SPHERE_CAP_FRACTION * radius;
    let recon = Mask::from_fn(resolution, resolution, |x, y| {
        let (wx, wy) = plane.world_xy(x as f64, y as f64);
        wx * wx + wy * wy <= cap * cap
    });
    let hairy = Mask::empty(resolution, resolution);
    Ok(height_field_scene(plane, recon, hairy, rig, |x, y| {
        let z = (radius * radius - x * x - y * y).sqrt();
        (z, -x / z, -y / z)
    }))
}

/// Egg-crate surface `amp · sin(2π f X) · sin(2π f Y)` over a unit square.
/// Cells whose Laplacian magnitude exceeds 70 % of its maximum form the hairy
/// mask; the rest is smooth. `amp = 0` gives the flat plane.
pub fn make_bumpy_scene(
    resolution: usize,
    freq: f64,
    amp: f64,
    rig: LightRig,
) -> Result<SyntheticScene> {
    let plane = ImagePlane::new(resolution, resolution, 1.0 / resolution as f64)?;
    let k = 2.0 * std::f64::consts::PI * freq;
    let laplacian = |x: f64, y: f64| (2.0 * k * k * amp * (k * x).sin() * (k * y).sin()).abs();
    let peak = 2.0 * k * k * amp.abs();
    let hairy = Mask::from_fn(resolution, resolution, |x, y| {
        let (wx, wy) = plane.world_xy(x as f64, y as f64);
        peak > 0.0 && laplacian(wx, wy) > 0.7 * peak
    });
    let recon = Mask::full(resolution, resolution);
    Ok(height_field_scene(plane, recon, hairy, rig, |x, y| {
        let (sx, cx) = (k * x).sin_cos();
        let (sy, cy) = (k * y).sin_cos();
        (amp * sx * sy, amp * k * cx * sy, amp * k * sx * cy)
    }))
}

/// Smooth random albedo field in `[lo, hi]`.
pub fn textured_albedo(plane: &ImagePlane, lo: f64, hi: f64, seed: u64) -> Vec<f64> {
    let field = smooth_noise(
        plane,
        (plane.width.min(plane.height) as f64 / 16.0).max(1.0),
        seed,
    );
    let (min, max) = field
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let span = (max - min).max(f64::MIN_POSITIVE);
    field
        .iter()
        .map(|v| lo + (hi - lo) * (v - min) / span)
        .collect()
}

/// White Gaussian noise blurred by a Gaussian of `scale` pixels.
fn smooth_noise(plane: &ImagePlane, scale: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise: Vec<f64> = (0..plane.len())
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    gaussian_blur(&noise, plane.width, plane.height, scale)
}

/// Separable Gaussian blur with clamp-to-edge borders.
pub(crate) fn gaussian_blur(data: &[f64], width: usize, height: usize, sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return data.to_vec();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|k| (-(k * k) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let pass = |src: &[f64], horizontal: bool| -> Vec<f64> {
        let mut out = vec![0.0; src.len()];
        for y in 0..height {
            for x in 0..width {
                let mut acc = 0.0;
                for (t, w) in kernel.iter().enumerate() {
                    let o = t as isize - radius;
                    let (sx, sy) = if horizontal {
                        ((x as isize + o).clamp(0, width as isize - 1) as usize, y)
                    } else {
                        (x, (y as isize + o).clamp(0, height as isize - 1) as usize)
                    };
                    acc += w * src[sy * width + sx];
                }
                out[y * width + x] = acc;
            }
        }
        out
    };
    pass(&pass(data, true), false)
}

/// Angle between unit vectors in degrees.
pub fn angle_deg(a: &Vec3, b: &Vec3) -> f64 {
    a.dot(b).clamp(-1.0, 1.0).acos().to_degrees()
}

/// Simulates proxy error: adds a smooth random height field to the surface,
/// scaled so the RMS angular deviation of the normals over the recon mask is
/// `angle_sigma` degrees. Positions move with the height field.
pub fn perturb_proxy(
    truth: &ProxyGeometry,
    angle_sigma: f64,
    smooth_scale: f64,
    seed: u64,
) -> Result<ProxyGeometry> {
    if !(angle_sigma >= 0.0) {
        return Err(Error::InvalidInput(format!(
            "angle sigma must be >= 0, got {angle_sigma}"
        )));
    }
    if angle_sigma == 0.0 {
        return Ok(truth.clone());
    }
    let plane = *truth.plane();
    let h = smooth_noise(&plane, smooth_scale.max(1.0), seed);
    // World-space gradient of the perturbation by central differences.
    let (w, ht) = (plane.width, plane.height);
    let s = plane.pixel_scale;
    let grad: Vec<(f64, f64)> = (0..plane.len())
        .map(|i| {
            let (x, y) = plane.coords(i);
            let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
            let (yu, yd) = (y.saturating_sub(1), (y + 1).min(ht - 1));
            let hx =
                (h[plane.index(xr, y)] - h[plane.index(xl, y)]) / ((xr - xl).max(1) as f64 * s);
            let hy =
                (h[plane.index(x, yd)] - h[plane.index(x, yu)]) / ((yd - yu).max(1) as f64 * s);
            (hx, hy)
        })
        .collect();
    let mask = truth.recon_mask();
    let perturbed = |k: f64, i: usize| -> Vec3 {
        let n = truth.normals()[i];
        let slope = n / n.z - Vec3::new(k * grad[i].0, k * grad[i].1, 0.0);
        slope.normalize()
    };
    let rms_angle = |k: f64| -> f64 {
        let (sum, count) = mask.indices().fold((0.0, 0usize), |(s, c), i| {
            (
                s + angle_deg(&truth.normals()[i], &perturbed(k, i)).powi(2),
                c + 1,
            )
        });
        (sum / count.max(1) as f64).sqrt()
    };

    let mut hi = 1e-6;
    while rms_angle(hi) < angle_sigma {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(Error::InvalidInput(format!(
                "cannot reach an RMS deviation of {angle_sigma} degrees"
            )));
        }
    }
    let mut lo = 0.0;
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if rms_angle(mid) < angle_sigma {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let k = 0.5 * (lo + hi);

    let normals = (0..plane.len())
        .map(|i| {
            if mask.at(i) {
                perturbed(k, i)
            } else {
                truth.normals()[i]
            }
        })
        .collect();
    let positions = (0..plane.len())
        .map(|i| {
            let p = truth.positions()[i];
            if mask.at(i) {
                Vec3::new(p.x, p.y, p.z + k * h[i])
            } else {
                p
            }
        })
        .collect();
    truth.with_geometry(normals, positions)
}
