//! Browser bindings: relight a synthetic scene, reconstruct it from five
//! near-light images, and compare the extremum filter with a low-pass filter.

use photostereo::calibration::CalibrationConfig;
use photostereo::gradient_filter::{
    bidirectional_extremum_filter, low_pass_filter, normals_to_gradients, FilterConfig,
};
use photostereo::integration::depth_error;
use photostereo::pipeline::{reconstruct, sweep_scene, PipelineConfig, SceneFamily, SweepConfig};
use photostereo::renderer::{perturb_proxy, render, SyntheticScene};
use photostereo::{LightRig, Mask, NormalMap, ObservationStack, ProxyGeometry, Vec3};
use wasm_bindgen::prelude::*;

fn js_err(e: photostereo::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Grey RGBA bytes of `values` mapped linearly from `[lo, hi]`; pixels off
/// the mask are drawn in a dark blue.
fn grey(values: &[f64], mask: &Mask, lo: f64, hi: f64) -> Vec<u8> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    values
        .iter()
        .enumerate()
        .flat_map(|(i, v)| {
            if mask.at(i) && v.is_finite() {
                let g = (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8;
                [g, g, g, 255]
            } else {
                [20, 24, 40, 255]
            }
        })
        .collect()
}

fn range(values: &[f64], mask: &Mask) -> (f64, f64) {
    mask.indices()
        .map(|i| values[i])
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
            (lo.min(v), hi.max(v))
        })
}

#[wasm_bindgen]
pub struct Demo {
    scene: SyntheticScene,
    obs: ObservationStack,
    proxy: ProxyGeometry,
    distance: f64,
    depth: Option<Vec<f64>>,
    normals: Option<Vec<Vec3>>,
}

#[wasm_bindgen]
impl Demo {
    /// `scene` is `"sphere"` or `"bumpy"`. Five lights sit at `distance`; the
    /// proxy handed to the reconstruction has `proxy_error` degrees of RMS
    /// normal error.
    #[wasm_bindgen(constructor)]
    pub fn new(
        scene: &str,
        resolution: usize,
        distance: f64,
        proxy_error: f64,
        seed: u64,
    ) -> Result<Demo, JsError> {
        let family = match scene {
            "sphere" => SceneFamily::Sphere,
            "bumpy" => SceneFamily::Bumpy,
            other => return Err(JsError::new(&format!("unknown scene {other:?}"))),
        };
        let config = SweepConfig {
            resolution,
            seed,
            ..Default::default()
        };
        let scene = sweep_scene(family, distance, &config).map_err(js_err)?;
        let obs = render(&scene);
        let proxy = perturb_proxy(&scene.proxy_truth, proxy_error, 8.0, seed).map_err(js_err)?;
        Ok(Demo {
            scene,
            obs,
            proxy,
            distance,
            depth: None,
            normals: None,
        })
    }

    pub fn width(&self) -> usize {
        self.scene.plane().width
    }

    pub fn height(&self) -> usize {
        self.scene.plane().height
    }

    /// One of the five input images, scaled by the stack maximum.
    pub fn input_image(&self, light: usize) -> Result<Vec<u8>, JsError> {
        if light >= self.obs.n_lights() {
            return Err(JsError::new("no such light"));
        }
        let full = Mask::full(self.width(), self.height());
        Ok(grey(self.obs.layer(light), &full, 0.0, self.obs.max()))
    }

    /// The scene under a single unit light at the given direction and
    /// distance, scaled by its own maximum.
    pub fn relight(
        &self,
        azimuth_deg: f64,
        elevation_deg: f64,
        distance: f64,
    ) -> Result<Vec<u8>, JsError> {
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let p = Vec3::new(el.cos() * az.cos(), el.cos() * az.sin(), el.sin()) * distance;
        let rig = LightRig::new(vec![p], vec![1.0]).map_err(js_err)?;
        let obs = render(&self.scene.clone().with_rig(rig));
        let full = Mask::full(self.width(), self.height());
        Ok(grey(obs.layer(0), &full, 0.0, obs.max()))
    }

    /// Runs the reconstruction loop for at most `max_iters` global
    /// iterations and returns a JSON summary with per-iteration errors.
    pub fn reconstruct(&mut self, max_iters: usize) -> Result<String, JsError> {
        let config = PipelineConfig {
            max_global_iters: max_iters,
            calibration: CalibrationConfig {
                d: self.distance,
                ..Default::default()
            },
            ..Default::default()
        };
        let truth = self.scene.depth();
        let out = reconstruct(&self.obs, &self.proxy, &config, Some(&truth)).map_err(js_err)?;
        let light_error: Vec<f64> = out
            .rig
            .positions()
            .iter()
            .zip(self.scene.rig_truth.positions())
            .map(|(a, b)| (a - b).norm() / self.distance)
            .collect();
        let summary = serde_json::json!({
            "iterations": out.report.iterations.len(),
            "converged": out.report.converged,
            "depth_error": out.report.iterations.iter().map(|r| r.depth_error).collect::<Vec<_>>(),
            "final_error": depth_error(&out.depth, &truth, config.alignment).map_err(js_err)?,
            "light_error_over_d": light_error,
        });
        self.depth = Some(out.depth.depth);
        self.normals = Some(out.normals.normals);
        Ok(summary.to_string())
    }

    /// Reconstructed depth, or the true depth before any reconstruction.
    pub fn depth_image(&self) -> Vec<u8> {
        let mask = self.scene.proxy_truth.recon_mask();
        let depth = match &self.depth {
            Some(d) => d.clone(),
            None => self.scene.depth().depth,
        };
        let (lo, hi) = range(&depth, mask);
        grey(&depth, mask, lo, hi)
    }

    /// Normals as RGB `(N + 1) / 2`, reconstructed once available.
    pub fn normal_image(&self) -> Vec<u8> {
        let mask = self.scene.proxy_truth.recon_mask();
        let normals = self
            .normals
            .as_deref()
            .unwrap_or(self.scene.proxy_truth.normals());
        normals
            .iter()
            .enumerate()
            .flat_map(|(i, n)| {
                if mask.at(i) {
                    let c = |v: f64| ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8;
                    [c(n.x), c(n.y), c(n.z), 255]
                } else {
                    [20, 24, 40, 255]
                }
            })
            .collect()
    }

    /// Injects `spikes` impulse outliers into the true `Gx` inside the
    /// scene's hairy region and filters it both ways.
    pub fn filter_comparison(
        &self,
        spikes: usize,
        sigma: f64,
        window: usize,
    ) -> Result<FilterView, JsError> {
        let truth = &self.scene.proxy_truth;
        let plane = *truth.plane();
        let normals = NormalMap {
            plane,
            normals: truth.normals().to_vec(),
            mask: truth.recon_mask().clone(),
        };
        let mut field = normals_to_gradients(&normals, truth.recon_mask()).map_err(js_err)?;
        let region = truth.hairy_mask().clone();
        let hairy: Vec<usize> = region.indices().collect();
        if hairy.is_empty() {
            return Err(JsError::new("this scene has no hairy region"));
        }
        let (lo, hi) = range(&field.gx, &region);
        let magnitude = 20.0 * (hi - lo).max(1e-3);
        let mut injected = Mask::empty(plane.width, plane.height);
        for k in 0..spikes.min(hairy.len()) {
            let i = hairy[(k * 7919 + 13) % hairy.len()];
            field.gx[i] += if k % 2 == 0 { magnitude } else { -magnitude };
            injected.set(i, true);
        }
        let config = FilterConfig {
            sigma,
            window,
            ..Default::default()
        };
        let filtered = bidirectional_extremum_filter(&field, &region, &config).map_err(js_err)?;
        let smoothed = low_pass_filter(&field, &region, window).map_err(js_err)?;

        let changed = |out: &[f64]| region.indices().filter(|&i| out[i] != field.gx[i]).count();
        let removed = injected
            .indices()
            .filter(|&i| (filtered.gx[i] - field.gx[i]).abs() > 0.5 * magnitude)
            .count();
        let (w, h) = (plane.width, plane.height);
        let mask = truth.recon_mask();
        let panels = [
            grey(&field.gx, mask, lo, hi),
            grey(&filtered.gx, mask, lo, hi),
            grey(&smoothed.gx, mask, lo, hi),
        ];
        let mut rgba = Vec::with_capacity(3 * w * h * 4);
        for y in 0..h {
            for panel in &panels {
                rgba.extend_from_slice(&panel[y * w * 4..(y + 1) * w * 4]);
            }
        }
        Ok(FilterView {
            rgba,
            injected: injected.count(),
            removed,
            extremum_changed: changed(&filtered.gx),
            lowpass_changed: changed(&smoothed.gx),
            region: region.count(),
        })
    }
}

/// Three panels side by side: noisy `Gx`, extremum-filtered, low-passed.
#[wasm_bindgen]
pub struct FilterView {
    rgba: Vec<u8>,
    injected: usize,
    removed: usize,
    extremum_changed: usize,
    lowpass_changed: usize,
    region: usize,
}

#[wasm_bindgen]
impl FilterView {
    pub fn rgba(&self) -> Vec<u8> {
        self.rgba.clone()
    }

    pub fn injected(&self) -> usize {
        self.injected
    }

    pub fn removed(&self) -> usize {
        self.removed
    }

    pub fn extremum_changed(&self) -> usize {
        self.extremum_changed
    }

    pub fn lowpass_changed(&self) -> usize {
        self.lowpass_changed
    }

    /// Pixels in the filtered region.
    pub fn region(&self) -> usize {
        self.region
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn filter_removes_spikes_that_low_pass_smears() {
        let demo = Demo::new("bumpy", 64, 2.0, 0.0, 1).unwrap();
        let view = demo.filter_comparison(20, 5.0, 10).unwrap();
        assert_eq!(view.injected(), 20);
        assert_eq!(view.removed(), 20);
        assert!(view.lowpass_changed() > view.extremum_changed());
        assert_eq!(view.rgba().len(), 3 * 64 * 64 * 4);
    }

    #[test]
    fn images_have_one_rgba_pixel_per_cell() {
        let demo = Demo::new("sphere", 32, 1.5, 5.0, 2).unwrap();
        assert_eq!(demo.input_image(0).unwrap().len(), 32 * 32 * 4);
        assert_eq!(demo.relight(30.0, 60.0, 2.0).unwrap().len(), 32 * 32 * 4);
        assert_eq!(demo.normal_image().len(), 32 * 32 * 4);
    }

    #[test]
    fn reconstruction_summary_is_json() {
        let mut demo = Demo::new("bumpy", 48, 2.0, 10.0, 3).unwrap();
        let summary: serde_json::Value =
            serde_json::from_str(&demo.reconstruct(2).unwrap()).unwrap();
        assert!(summary["final_error"].as_f64().unwrap() < 0.2);
        assert_eq!(demo.depth_image().len(), 48 * 48 * 4);
    }
}
