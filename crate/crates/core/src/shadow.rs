//! Photometric shadow rejection.
//!
//! Under light `j` a pixel's apparent albedo is `I_ij / (N_i·D_ij)`. Lights
//! whose apparent albedo drops well below the pixel's typical bright value
//! are treated as shadowed, and lights behind the tangent plane are invalid.

use serde::{Deserialize, Serialize};

use crate::calibration::scaled_direction;
use crate::error::{Error, Result};
use crate::par_map;
use crate::types::{ImagePlane, LightRig, ObservationStack, ProxyGeometry};

/// Grazing cutoff: apparent albedo is undefined where `N·D <= GRAZING_EPS`.
pub const GRAZING_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShadowConfig {
    /// Relative albedo drop beyond which a light is rejected.
    pub tau: f64,
}

impl Default for ShadowConfig {
    fn default() -> Self {
        Self { tau: 0.4 }
    }
}

impl ShadowConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.tau) {
            return Err(Error::InvalidInput(format!(
                "tau must lie in [0, 1), got {}",
                self.tau
            )));
        }
        Ok(())
    }
}

/// Apparent albedo of every pixel under every light, pixel-major. `NaN` marks
/// undefined entries (grazing or back-facing light, or outside the recon
/// mask).
#[derive(Clone, Debug, PartialEq)]
pub struct AlbedoPerLight {
    pub plane: ImagePlane,
    pub n_lights: usize,
    pub values: Vec<f64>,
}

impl AlbedoPerLight {
    #[inline]
    pub fn get(&self, pixel: usize, light: usize) -> Option<f64> {
        let v = self.values[pixel * self.n_lights + light];
        (!v.is_nan()).then_some(v)
    }

    pub fn pixel(&self, pixel: usize) -> &[f64] {
        &self.values[pixel * self.n_lights..(pixel + 1) * self.n_lights]
    }
}

/// Per-pixel set of lights usable for normal estimation.
#[derive(Clone, Debug, PartialEq)]
pub struct ValidLightMask {
    pub plane: ImagePlane,
    pub n_lights: usize,
    /// Pixel-major validity flags.
    pub valid: Vec<bool>,
    pub albedo_per_light: Vec<f64>,
}

impl ValidLightMask {
    #[inline]
    pub fn is_valid(&self, pixel: usize, light: usize) -> bool {
        self.valid[pixel * self.n_lights + light]
    }

    pub fn count(&self, pixel: usize) -> usize {
        self.valid[pixel * self.n_lights..(pixel + 1) * self.n_lights]
            .iter()
            .filter(|&&v| v)
            .count()
    }

    /// Validity of one light as a pixel mask.
    pub fn light_mask(&self, light: usize) -> crate::types::Mask {
        crate::types::Mask::from_fn(self.plane.width, self.plane.height, |x, y| {
            self.is_valid(self.plane.index(x, y), light)
        })
    }
}

fn check_rig(obs: &ObservationStack, proxy: &ProxyGeometry, rig: &LightRig) -> Result<()> {
    proxy.plane().check_same(obs.plane(), "observation stack")?;
    if rig.len() != obs.n_lights() {
        return Err(Error::InvalidInput(format!(
            "rig has {} lights, stack has {}",
            rig.len(),
            obs.n_lights()
        )));
    }
    Ok(())
}

/// `N_i · D_ij` for every light at one pixel. A light sitting on the surface
/// point gets `NaN`.
pub(crate) fn shading_terms(proxy: &ProxyGeometry, rig: &LightRig, pixel: usize) -> Vec<f64> {
    let n = proxy.normals()[pixel];
    let v = proxy.positions()[pixel];
    rig.positions()
        .iter()
        .zip(rig.intensities())
        .map(|(p, &b)| scaled_direction(p, &v, b).map_or(f64::NAN, |d| n.dot(&d)))
        .collect()
}

/// `ρ_ij = I_ij / (N_i·D_ij)` where `N_i·D_ij > GRAZING_EPS`.
pub fn albedo_per_light(
    obs: &ObservationStack,
    proxy: &ProxyGeometry,
    rig: &LightRig,
) -> Result<AlbedoPerLight> {
    check_rig(obs, proxy, rig)?;
    let n = rig.len();
    let mask = proxy.recon_mask();
    let rows = par_map(obs.plane().len(), |i| {
        if !mask.at(i) {
            return vec![f64::NAN; n];
        }
        shading_terms(proxy, rig, i)
            .into_iter()
            .enumerate()
            .map(|(j, nd)| {
                if nd > GRAZING_EPS {
                    obs.intensity(i, j) / nd
                } else {
                    f64::NAN
                }
            })
            .collect()
    });
    Ok(AlbedoPerLight {
        plane: *obs.plane(),
        n_lights: n,
        values: rows.concat(),
    })
}

/// Valid lights of one pixel from its apparent albedos and shading terms.
///
/// With `ρ̄` the mean of the defined albedos, `S = {ρ_j > ρ̄}` and `μ` the mean
/// of `S`, a light passes the shadow test when `ρ_j > (1 - τ) μ`, and the
/// attached-shadow test when `N·D_j > 0`. An empty `S` keeps every light that
/// passes the attached-shadow test.
pub fn classify_pixel(albedos: &[f64], shading: &[f64], tau: f64) -> Vec<bool> {
    let defined: Vec<f64> = albedos.iter().copied().filter(|v| !v.is_nan()).collect();
    let attached = shading.iter().map(|&nd| nd > 0.0);
    if defined.is_empty() {
        return attached.collect();
    }
    let mean = defined.iter().sum::<f64>() / defined.len() as f64;
    let above: Vec<f64> = defined.iter().copied().filter(|&v| v > mean).collect();
    if above.is_empty() {
        return attached.collect();
    }
    let mu = above.iter().sum::<f64>() / above.len() as f64;
    let threshold = (1.0 - tau) * mu;
    albedos
        .iter()
        .zip(attached)
        .map(|(&rho, front)| front && rho > threshold)
        .collect()
}

/// Applies [`classify_pixel`] over the recon mask. Pixels off the mask have
/// no valid lights.
pub fn valid_lights(
    albedos: &AlbedoPerLight,
    proxy: &ProxyGeometry,
    rig: &LightRig,
    config: &ShadowConfig,
) -> Result<ValidLightMask> {
    config.validate()?;
    proxy.plane().check_same(&albedos.plane, "albedo map")?;
    if albedos.n_lights != rig.len() {
        return Err(Error::InvalidInput(
            "albedo map and rig differ in light count".into(),
        ));
    }
    let n = rig.len();
    let mask = proxy.recon_mask();
    let rows = par_map(albedos.plane.len(), |i| {
        if !mask.at(i) {
            return vec![false; n];
        }
        classify_pixel(albedos.pixel(i), &shading_terms(proxy, rig, i), config.tau)
    });
    Ok(ValidLightMask {
        plane: albedos.plane,
        n_lights: n,
        valid: rows.concat(),
        albedo_per_light: albedos.values.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::renderer::{make_sphere_scene, render};
    use crate::types::Vec3;
    use proptest::prelude::*;

    #[test]
    fn drop_in_one_light_is_rejected() {
        let rho = [1.0, 1.0, 1.0, 1.0, 0.1];
        let valid = classify_pixel(&rho, &[1.0; 5], 0.4);
        assert_eq!(valid, vec![true, true, true, true, false]);
    }

    #[test]
    fn equal_albedos_keep_attached_set() {
        let valid = classify_pixel(&[0.5; 4], &[1.0, 1.0, 0.0, 1.0], 0.4);
        assert_eq!(valid, vec![true, true, false, true]);
    }

    #[test]
    fn back_facing_light_is_excluded() {
        let rho = [0.9, 0.8, f64::NAN, 0.85];
        let valid = classify_pixel(&rho, &[1.0, 1.0, -0.2, 1.0], 0.4);
        assert_eq!(valid, vec![true, true, false, true]);
        // Even a bright reading cannot rescue a light behind the surface.
        let valid = classify_pixel(&[0.9, 0.8, 5.0, 0.85], &[1.0, 1.0, -0.2, 1.0], 0.4);
        assert!(!valid[2]);
    }

    #[test]
    fn albedo_inversion_on_clean_render() {
        let rig = LightRig::dome(5, 2.0, 45.0, &[1.0, 0.9, 1.1, 0.95, 1.05]).unwrap();
        let scene = make_sphere_scene(48, 0.5, rig.clone()).unwrap();
        let scene = scene.clone().with_albedo(vec![0.7; 48 * 48]);
        let obs = render(&scene);
        let albedos = albedo_per_light(&obs, &scene.proxy_truth, &rig).unwrap();
        let mut checked = 0;
        for i in scene.proxy_truth.recon_mask().indices() {
            for j in 0..5 {
                if let Some(r) = albedos.get(i, j) {
                    assert!((r - 0.7).abs() < 1e-6, "pixel {i} light {j}: {r}");
                    checked += 1;
                }
            }
        }
        assert!(checked > 5000);
    }

    #[test]
    fn zero_intensity_gives_zero_albedo_and_grazing_gives_sentinel() {
        let plane = ImagePlane::new(2, 1, 1.0).unwrap();
        let proxy = ProxyGeometry::new(
            plane,
            vec![Vec3::z(), Vec3::new(0.0, 1.0, 0.0)],
            vec![Vec3::zeros(), Vec3::new(1.0, 0.0, 0.0)],
            crate::types::Mask::full(2, 1),
            crate::types::Mask::full(2, 1),
            crate::types::Mask::empty(2, 1),
        )
        .unwrap();
        let rig = LightRig::new(vec![Vec3::new(0.0, 0.0, 1.0)], vec![1.0]).unwrap();
        let obs = ObservationStack::new(plane, vec![vec![0.0, 0.3]]).unwrap();
        let a = albedo_per_light(&obs, &proxy, &rig).unwrap();
        assert_eq!(a.get(0, 0), Some(0.0));
        // Second pixel's normal is perpendicular to its light direction.
        assert_eq!(a.get(1, 0), None);
    }

    proptest! {
        #[test]
        fn classification_is_scale_invariant(
            rho in prop::collection::vec(0.01f64..2.0, 5),
            shading in prop::collection::vec(-0.5f64..1.0, 5),
            k in 1u32..8,
        ) {
            let k = 2f64.powi(k as i32);
            let scaled: Vec<f64> = rho.iter().map(|r| r * k).collect();
            prop_assert_eq!(classify_pixel(&rho, &shading, 0.4), classify_pixel(&scaled, &shading, 0.4));
        }

        #[test]
        fn smaller_tau_never_grows_the_light_set(
            rho in prop::collection::vec(0.0f64..2.0, 5),
            t1 in 0.0f64..0.99,
            t2 in 0.0f64..0.99,
        ) {
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            let shading = [1.0; 5];
            let small = classify_pixel(&rho, &shading, lo);
            let large = classify_pixel(&rho, &shading, hi);
            for (s, l) in small.iter().zip(&large) {
                prop_assert!(!s || *l);
            }
        }

        #[test]
        fn valid_implies_front_facing(
            rho in prop::collection::vec(0.0f64..2.0, 5),
            shading in prop::collection::vec(-1.0f64..1.0, 5),
        ) {
            let rho: Vec<f64> = rho.iter().zip(&shading).map(|(r, s)| if *s > GRAZING_EPS { *r } else { f64::NAN }).collect();
            for (v, s) in classify_pixel(&rho, &shading, 0.4).iter().zip(&shading) {
                prop_assert!(!v || *s > 0.0);
            }
        }
    }
}
