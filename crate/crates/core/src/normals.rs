//! Per-pixel normal and albedo recovery from the valid lights.

use nalgebra::{Matrix3, SymmetricEigen};

use crate::error::Result;
use crate::par_map;
use crate::shadow::{shading_terms, ValidLightMask};
use crate::types::{ImagePlane, LightRig, Mask, NormalMap, ObservationStack, ProxyGeometry, Vec3};

/// Fewest valid lights for a photometric solve.
pub const MIN_VALID_LIGHTS: usize = 3;

/// Design matrices with a larger condition number are flagged degenerate.
pub const MAX_CONDITION: f64 = 1e6;

#[derive(Clone, Debug, PartialEq)]
pub struct NormalEstimate {
    pub normals: NormalMap,
    pub albedo: Vec<f64>,
    /// Pixels that kept the proxy normal.
    pub fallback: Mask,
    /// Pixels whose valid-light design matrix was ill-conditioned.
    pub degenerate: Mask,
    /// RMS of `I - ρ N·D` over each pixel's valid lights.
    pub residual_rms: Vec<f64>,
}

struct PixelSolve {
    normal: Vec3,
    albedo: f64,
    fallback: bool,
    degenerate: bool,
    residual: f64,
}

fn fallback_solve(
    intensities: &[f64],
    dirs: &[Vec3],
    proxy_normal: Vec3,
    degenerate: bool,
) -> PixelSolve {
    let (num, den) = intensities
        .iter()
        .zip(dirs)
        .fold((0.0, 0.0), |(num, den), (i, d)| {
            let a = proxy_normal.dot(d);
            (num + i * a, den + a * a)
        });
    let albedo = if den > 0.0 { (num / den).max(0.0) } else { 0.0 };
    PixelSolve {
        normal: proxy_normal,
        albedo,
        fallback: true,
        degenerate,
        residual: rms_residual(intensities, dirs, albedo, &proxy_normal),
    }
}

fn rms_residual(intensities: &[f64], dirs: &[Vec3], albedo: f64, normal: &Vec3) -> f64 {
    if intensities.is_empty() {
        return 0.0;
    }
    let ss: f64 = intensities
        .iter()
        .zip(dirs)
        .map(|(i, d)| (i - albedo * normal.dot(d)).powi(2))
        .sum();
    (ss / intensities.len() as f64).sqrt()
}

/// Least-squares `b = ρN` from `I_j = b·D_j`.
fn solve_pixel(intensities: &[f64], dirs: &[Vec3], proxy_normal: Vec3) -> PixelSolve {
    if dirs.len() < MIN_VALID_LIGHTS {
        return fallback_solve(intensities, dirs, proxy_normal, false);
    }
    let mut ata = Matrix3::zeros();
    let mut atb = Vec3::zeros();
    for (i, d) in intensities.iter().zip(dirs) {
        ata += d * d.transpose();
        atb += d * *i;
    }
    let eig = SymmetricEigen::new(ata);
    let (lo, hi) = (eig.eigenvalues.min(), eig.eigenvalues.max());
    // cond(A) = sqrt(cond(AᵀA))
    if !(lo > 0.0) || (hi / lo).sqrt() > MAX_CONDITION {
        return fallback_solve(intensities, dirs, proxy_normal, true);
    }
    let Some(b) = ata.cholesky().map(|c| c.solve(&atb)) else {
        return fallback_solve(intensities, dirs, proxy_normal, true);
    };
    let albedo = b.norm();
    if !(albedo > 0.0 && albedo.is_finite()) {
        return fallback_solve(intensities, dirs, proxy_normal, false);
    }
    let normal = b / albedo;
    PixelSolve {
        normal,
        albedo,
        fallback: false,
        degenerate: false,
        residual: rms_residual(intensities, dirs, albedo, &normal),
    }
}

/// Recovers `ρ_i` and `N_i` at every recon pixel from its valid lights;
/// pixels with fewer than [`MIN_VALID_LIGHTS`] keep the proxy normal.
pub fn estimate_normals(
    obs: &ObservationStack,
    proxy: &ProxyGeometry,
    rig: &LightRig,
    valid: &ValidLightMask,
) -> Result<NormalEstimate> {
    let plane = *proxy.plane();
    plane.check_same(obs.plane(), "observation stack")?;
    plane.check_same(&valid.plane, "valid-light mask")?;
    if rig.len() != obs.n_lights() || valid.n_lights != rig.len() {
        return Err(crate::Error::InvalidInput("light counts disagree".into()));
    }
    let mask = proxy.recon_mask();
    let solves = par_map(plane.len(), |i| {
        if !mask.at(i) {
            return None;
        }
        let v = proxy.positions()[i];
        let mut intensities = Vec::with_capacity(rig.len());
        let mut dirs = Vec::with_capacity(rig.len());
        for j in 0..rig.len() {
            if valid.is_valid(i, j) {
                let u = rig.positions()[j] - v;
                dirs.push(u * (rig.intensities()[j] / u.norm().powi(3)));
                intensities.push(obs.intensity(i, j));
            }
        }
        Some(solve_pixel(&intensities, &dirs, proxy.normals()[i]))
    });
    Ok(collect(plane, mask, solves))
}

fn collect(plane: ImagePlane, mask: &Mask, solves: Vec<Option<PixelSolve>>) -> NormalEstimate {
    let mut normals = vec![Vec3::zeros(); plane.len()];
    let mut albedo = vec![0.0; plane.len()];
    let mut residual_rms = vec![0.0; plane.len()];
    let mut fallback = Mask::empty(plane.width, plane.height);
    let mut degenerate = Mask::empty(plane.width, plane.height);
    for (i, s) in solves.into_iter().enumerate() {
        if let Some(s) = s {
            normals[i] = s.normal;
            albedo[i] = s.albedo;
            residual_rms[i] = s.residual;
            fallback.set(i, s.fallback);
            degenerate.set(i, s.degenerate);
        }
    }
    NormalEstimate {
        normals: NormalMap {
            plane,
            normals,
            mask: mask.clone(),
        },
        albedo,
        fallback,
        degenerate,
        residual_rms,
    }
}

/// Normal recovery under directional lights `L_j` (direction times
/// intensity). A light is used at a pixel when it is lit there and in front
/// of the proxy tangent plane.
pub fn estimate_normals_directional(
    obs: &ObservationStack,
    proxy: &ProxyGeometry,
    lights: &[Vec3],
) -> Result<NormalEstimate> {
    let plane = *proxy.plane();
    plane.check_same(obs.plane(), "observation stack")?;
    if lights.len() != obs.n_lights() {
        return Err(crate::Error::InvalidInput("light counts disagree".into()));
    }
    let mask = proxy.recon_mask();
    let solves = par_map(plane.len(), |i| {
        if !mask.at(i) {
            return None;
        }
        let n = proxy.normals()[i];
        let (intensities, dirs): (Vec<f64>, Vec<Vec3>) = lights
            .iter()
            .enumerate()
            .filter(|(j, l)| obs.intensity(i, *j) > 0.0 && n.dot(l) > 0.0)
            .map(|(j, l)| (obs.intensity(i, j), *l))
            .unzip();
        Some(solve_pixel(&intensities, &dirs, n))
    });
    Ok(collect(plane, mask, solves))
}

/// Shading `N·D` of the proxy at one pixel for every light; handy for
/// diagnostics.
pub fn proxy_shading(proxy: &ProxyGeometry, rig: &LightRig, pixel: usize) -> Vec<f64> {
    shading_terms(proxy, rig, pixel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::renderer::{angle_deg, make_sphere_scene, render, textured_albedo};
    use crate::shadow::{albedo_per_light, valid_lights, ShadowConfig};

    fn solve_scene(
        scene: &crate::renderer::SyntheticScene,
        obs: &ObservationStack,
    ) -> NormalEstimate {
        let a = albedo_per_light(obs, &scene.proxy_truth, &scene.rig_truth).unwrap();
        let v = valid_lights(
            &a,
            &scene.proxy_truth,
            &scene.rig_truth,
            &ShadowConfig::default(),
        )
        .unwrap();
        estimate_normals(obs, &scene.proxy_truth, &scene.rig_truth, &v).unwrap()
    }

    #[test]
    fn exact_rig_recovers_normals_and_albedo() {
        let rig = LightRig::dome(5, 1.5, 45.0, &[1.0, 0.8, 1.2, 0.9, 1.1]).unwrap();
        let scene = make_sphere_scene(64, 0.5, rig)
            .unwrap()
            .with_albedo(vec![0.7; 64 * 64]);
        let obs = render(&scene);
        let est = solve_scene(&scene, &obs);
        let mut solved = 0;
        let mut close = 0;
        for i in scene.proxy_truth.recon_mask().indices() {
            let n = est.normals.normals[i];
            assert!((n.norm() - 1.0).abs() < 1e-6);
            assert!(est.albedo[i] >= 0.0);
            if !est.fallback.at(i) {
                solved += 1;
                let a = angle_deg(&n, &scene.proxy_truth.normals()[i]);
                assert!(a < 1e-4, "pixel {i}: {a} deg");
                if (est.albedo[i] - 0.7).abs() < 0.007 {
                    close += 1;
                }
            }
        }
        assert!(solved > 2500);
        assert!(close as f64 >= 0.99 * solved as f64);
    }

    #[test]
    fn directional_lights_recover_normals() {
        let dirs: Vec<Vec3> = LightRig::dome(5, 1.0, 50.0, &[])
            .unwrap()
            .positions()
            .iter()
            .map(|p| p * 0.8)
            .collect();
        let scene = make_sphere_scene(32, 0.5, LightRig::dome(5, 1.0, 50.0, &[]).unwrap()).unwrap();
        let obs =
            crate::renderer::render_directional(&scene.proxy_truth, &scene.albedo, &dirs).unwrap();
        let est = estimate_normals_directional(&obs, &scene.proxy_truth, &dirs).unwrap();
        for i in scene.proxy_truth.recon_mask().indices() {
            if !est.fallback.at(i) {
                assert!(angle_deg(&est.normals.normals[i], &scene.proxy_truth.normals()[i]) < 1e-4);
                assert!((est.albedo[i] - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn two_valid_lights_fall_back_to_proxy() {
        let d = [Vec3::new(0.0, 0.0, 1.0), Vec3::new(1.0, 0.0, 1.0)];
        let proxy_n = Vec3::new(0.1, 0.0, 1.0).normalize();
        let s = solve_pixel(&[0.5, 0.4], &d, proxy_n);
        assert!(s.fallback);
        assert_eq!(s.normal, proxy_n);
    }

    #[test]
    fn coplanar_lights_are_degenerate() {
        let d = [
            Vec3::new(0.0, 0.0, 1.0),
            Vec3::new(1.0, 0.0, 1.0),
            Vec3::new(-1.0, 0.0, 1.0),
        ];
        let s = solve_pixel(&[0.5, 0.4, 0.3], &d, Vec3::z());
        assert!(s.degenerate && s.fallback);
    }

    #[test]
    fn scaling_beta_and_intensity_by_two_is_bitwise_neutral() {
        let rig = LightRig::dome(5, 1.5, 40.0, &[]).unwrap();
        let scene = make_sphere_scene(40, 0.5, rig.clone()).unwrap();
        let scene = scene
            .clone()
            .with_albedo(textured_albedo(scene.plane(), 0.3, 0.9, 5));
        let obs = render(&scene);
        let base = solve_scene(&scene, &obs);

        let rig2 = LightRig::new(
            rig.positions().to_vec(),
            rig.intensities().iter().map(|b| b * 2.0).collect(),
        )
        .unwrap();
        let scene2 = scene.clone().with_rig(rig2);
        let obs2 = obs.scaled(2.0).unwrap();
        let scaled = solve_scene(&scene2, &obs2);
        assert_eq!(base.normals, scaled.normals);
    }
}
