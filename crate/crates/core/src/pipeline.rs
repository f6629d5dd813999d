//! Reconstruction loop.
//!
//! One global iteration runs calibration, shadow rejection, normal
//! estimation, gradient filtering and integration. The integrated surface then
//! replaces the proxy geometry and the loop repeats until the lights stop
//! moving or the iteration cap is reached.

use std::io::Write;

use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use crate::calibration::{
    calibrate_joint, calibrate_parallel_baseline, fit_parallel_lights, refine_alternating,
    CalibrationConfig, CalibrationResult,
};
use crate::error::{Error, Result};
use crate::gradient_filter::{bidirectional_extremum_filter, normals_to_gradients, FilterConfig};
use crate::integration::{depth_error, integrate_with, Alignment, Backend};
use crate::normals::{estimate_normals, estimate_normals_directional, NormalEstimate};
use crate::renderer::{
    make_bumpy_scene, make_sphere_scene, perturb_proxy, render, textured_albedo, SyntheticScene,
};
use crate::shadow::{albedo_per_light, valid_lights, ShadowConfig};
use crate::types::{
    normalize_observations, sample_keypoints, DepthMap, GradientField, LightRig, Mask, NormalMap,
    ObservationStack, ProxyGeometry, Vec3,
};

/// Depth errors rising this many iterations in a row abort a synthetic run.
pub const DIVERGENCE_STREAK: usize = 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub calibration: CalibrationConfig,
    pub shadow: ShadowConfig,
    pub filter: FilterConfig,
    pub max_global_iters: usize,
    /// Stop once no light moves more than `global_tol · d`.
    pub global_tol: f64,
    /// Number of calibration key points.
    pub keypoints: usize,
    pub seed: u64,
    /// Run the alternating refinement after the joint calibration.
    pub refine: bool,
    pub integration: Backend,
    /// Alignment used when a ground-truth depth is supplied.
    pub alignment: Alignment,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            calibration: CalibrationConfig::default(),
            shadow: ShadowConfig::default(),
            filter: FilterConfig::default(),
            max_global_iters: 10,
            global_tol: 1e-3,
            keypoints: 500,
            seed: 0,
            refine: true,
            integration: Backend::Auto,
            alignment: Alignment::Offset,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        self.calibration.validate()?;
        self.shadow.validate()?;
        self.filter.validate()?;
        if self.max_global_iters < 1 {
            return Err(Error::InvalidInput(
                "max_global_iters must be at least 1".into(),
            ));
        }
        if !(self.global_tol >= 0.0) {
            return Err(Error::InvalidInput(
                "global_tol must be non-negative".into(),
            ));
        }
        if self.keypoints < 4 {
            return Err(Error::InvalidInput(
                "at least 4 key points are needed".into(),
            ));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LightRecord {
    pub position: [f64; 3],
    pub beta: f64,
}

fn rig_records(rig: &LightRig) -> Vec<LightRecord> {
    rig.positions()
        .iter()
        .zip(rig.intensities())
        .map(|(p, &beta)| LightRecord {
            position: [p.x, p.y, p.z],
            beta,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub rig: Vec<LightRecord>,
    /// Final calibration objective.
    pub objective: f64,
    /// Largest light displacement since the previous iteration.
    pub max_light_shift: Option<f64>,
    /// Depth error against the truth, when one was supplied.
    pub depth_error: Option<f64>,
    pub fallback_pixels: usize,
    pub clamped_pixels: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub iterations: Vec<IterationRecord>,
    /// Whether the light positions settled before the iteration cap.
    pub converged: bool,
    /// Scale by which the input stack was divided before processing.
    pub intensity_scale: f64,
}

#[derive(Clone, Debug)]
pub struct Reconstruction {
    pub depth: DepthMap,
    pub normals: NormalMap,
    pub albedo: Vec<f64>,
    pub gradients: GradientField,
    pub rig: LightRig,
    pub report: Report,
}

/// Output of the per-iteration stages after calibration.
struct Surface {
    estimate: NormalEstimate,
    gradients: GradientField,
    depth: DepthMap,
}

fn surface_from_normals(
    estimate: NormalEstimate,
    proxy: &ProxyGeometry,
    config: &PipelineConfig,
) -> Result<Surface> {
    let raw = normals_to_gradients(&estimate.normals, proxy.recon_mask())?;
    let gradients = if proxy.hairy_mask().count() > 0 {
        bidirectional_extremum_filter(&raw, proxy.hairy_mask(), &config.filter)?
    } else {
        raw
    };
    let depth = integrate_with(&gradients, config.integration)?;
    Ok(Surface {
        estimate,
        gradients,
        depth,
    })
}

fn calibrate(
    obs: &ObservationStack,
    proxy: &ProxyGeometry,
    config: &PipelineConfig,
) -> Result<CalibrationResult> {
    let kp = sample_keypoints(proxy, obs, config.keypoints, config.seed)?;
    let joint = calibrate_joint(&kp, &config.calibration)?;
    if config.refine {
        refine_alternating(&joint, &kp, &config.calibration)
    } else {
        Ok(joint)
    }
}

/// Least-squares plane `c0 + c1 x + c2 y` through `z` over the masked pixels.
fn fit_plane(positions: &[Vec3], z: impl Fn(usize) -> f64, mask: &Mask) -> Result<[f64; 3]> {
    let mut ata = Matrix3::zeros();
    let mut atb = Vec3::zeros();
    for i in mask.indices() {
        let row = Vec3::new(1.0, positions[i].x, positions[i].y);
        ata += row * row.transpose();
        atb += row * z(i);
    }
    let c = ata
        .cholesky()
        .map(|c| c.solve(&atb))
        .ok_or_else(|| Error::InvalidInput("proxy coverage is collinear".into()))?;
    Ok([c.x, c.y, c.z])
}

/// Proxy rebuilt from an integrated surface. Lateral positions are kept; the
/// depth is registered to `original` by the least-squares offset and tilt,
/// since a tilt of the surface traded against a rotation of the rig barely
/// changes the images and would otherwise drift from one iteration to the
/// next. Normals follow the registered gradients.
fn feedback_proxy(original: &ProxyGeometry, surface: &Surface) -> Result<ProxyGeometry> {
    let mask = original.recon_mask();
    let g = &surface.gradients;
    let [c0, cx, cy] = fit_plane(
        original.positions(),
        |i| original.positions()[i].z - surface.depth.depth[i],
        mask,
    )?;
    let (normals, positions) = original
        .normals()
        .iter()
        .zip(original.positions())
        .enumerate()
        .map(|(i, (n, p))| {
            if mask.at(i) {
                (
                    Vec3::new(-(g.gx[i] + cx), -(g.gy[i] + cy), 1.0).normalize(),
                    Vec3::new(p.x, p.y, surface.depth.depth[i] + c0 + cx * p.x + cy * p.y),
                )
            } else {
                (*n, *p)
            }
        })
        .unzip();
    original.with_geometry(normals, positions)
}

fn max_shift(a: &LightRig, b: &LightRig) -> f64 {
    a.positions()
        .iter()
        .zip(b.positions())
        .map(|(p, q)| (p - q).norm())
        .fold(0.0, f64::max)
}

/// Runs the full loop. With `truth`, each iteration's depth error is recorded
/// and a run whose error rises [`DIVERGENCE_STREAK`] times in a row fails with
/// [`Error::PipelineDiverged`].
pub fn reconstruct(
    obs: &ObservationStack,
    proxy: &ProxyGeometry,
    config: &PipelineConfig,
    truth: Option<&DepthMap>,
) -> Result<Reconstruction> {
    config.validate()?;
    proxy.plane().check_same(obs.plane(), "observation stack")?;
    let intensity_scale = obs.max();
    let obs = normalize_observations(obs)?;

    let mut report = Report {
        intensity_scale,
        ..Report::default()
    };
    let mut current = proxy.clone();
    let mut previous_rig: Option<LightRig> = None;
    let mut rising = 0;
    let mut last = None;
    for iteration in 1..=config.max_global_iters {
        let calib = calibrate(&obs, &current, config)?;
        let rig = calib.rig;
        let albedos = albedo_per_light(&obs, &current, &rig)?;
        let valid = valid_lights(&albedos, &current, &rig, &config.shadow)?;
        let estimate = estimate_normals(&obs, &current, &rig, &valid)?;
        let surface = surface_from_normals(estimate, &current, config)?;
        let shift = previous_rig.as_ref().map(|p| max_shift(p, &rig));
        let error = truth
            .map(|t| depth_error(&surface.depth, t, config.alignment))
            .transpose()?;
        if let (Some(e), Some(prev)) = (error, report.iterations.last().and_then(|r| r.depth_error))
        {
            rising = if e > prev { rising + 1 } else { 0 };
        }
        report.iterations.push(IterationRecord {
            iteration,
            rig: rig_records(&rig),
            objective: calib.objective_trace.last().copied().unwrap_or(f64::NAN),
            max_light_shift: shift,
            depth_error: error,
            fallback_pixels: surface.estimate.fallback.count(),
            clamped_pixels: surface.gradients.clamped.count(),
        });
        if rising >= DIVERGENCE_STREAK {
            return Err(Error::PipelineDiverged(iteration));
        }
        let settled = shift.is_some_and(|s| s < config.global_tol * config.calibration.d);
        if settled || iteration == config.max_global_iters {
            report.converged = settled;
            last = Some((surface, rig));
            break;
        }
        current = feedback_proxy(proxy, &surface)?;
        previous_rig = Some(rig);
    }

    let (surface, rig) = last.expect("at least one iteration runs");
    // Albedo is reported in the units of the input images.
    let albedo = surface
        .estimate
        .albedo
        .iter()
        .map(|a| a * intensity_scale)
        .collect();
    Ok(Reconstruction {
        depth: surface.depth,
        normals: surface.estimate.normals,
        albedo,
        gradients: surface.gradients,
        rig,
        report,
    })
}

/// Parallel-light reconstruction: directional lights fitted at the key
/// points with the given albedo and normals, then the same normal, filter and
/// integration stages as the main pipeline.
pub fn reconstruct_parallel(
    obs: &ObservationStack,
    proxy: &ProxyGeometry,
    keypoint_source: &ProxyGeometry,
    albedo: &[f64],
    config: &PipelineConfig,
) -> Result<(DepthMap, Vec<Vec3>)> {
    config.validate()?;
    let obs = normalize_observations(obs)?;
    let kp = sample_keypoints(keypoint_source, &obs, config.keypoints, config.seed)?;
    let kp_albedo: Vec<f64> = kp
        .pixels
        .iter()
        .map(|&(x, y)| albedo[obs.plane().index(x, y)])
        .collect();
    let lights = fit_parallel_lights(&kp, &kp_albedo)?;
    let estimate = estimate_normals_directional(&obs, proxy, &lights)?;
    let surface = surface_from_normals(estimate, proxy, config)?;
    Ok((surface.depth, calibrate_parallel_baseline(&kp, &kp_albedo)?))
}

/// Synthetic scene families for the distance sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SceneFamily {
    Sphere,
    Bumpy,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub resolution: usize,
    /// Light elevation above the image plane in degrees.
    pub elevation_deg: f64,
    /// RMS angular error of the proxy handed to the near-light pipeline.
    pub proxy_error_deg: f64,
    pub seed: u64,
    pub pipeline: PipelineConfig,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            resolution: 256,
            elevation_deg: 45.0,
            proxy_error_deg: 10.0,
            seed: 1,
            pipeline: PipelineConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub distance: f64,
    pub near_error: f64,
    pub parallel_error: f64,
}

/// Rig of five lights for the sweep: one overhead, four on a ring, all at
/// `distance` from the scene centre, with slightly unequal intensities.
pub fn sweep_rig(distance: f64, elevation_deg: f64) -> Result<LightRig> {
    LightRig::dome(5, distance, elevation_deg, &[1.0, 0.9, 1.1, 0.95, 1.05])
}

/// The synthetic scene of one sweep family at one light distance. Distances
/// are in units of the scene's height.
pub fn sweep_scene(
    family: SceneFamily,
    distance: f64,
    config: &SweepConfig,
) -> Result<SyntheticScene> {
    let rig = sweep_rig(distance, config.elevation_deg)?;
    let scene = match family {
        SceneFamily::Sphere => make_sphere_scene(config.resolution, 0.5, rig)?,
        SceneFamily::Bumpy => make_bumpy_scene(config.resolution, 2.0, 0.04, rig)?,
    };
    let albedo = textured_albedo(scene.plane(), 0.4, 0.9, config.seed);
    Ok(scene.with_albedo(albedo))
}

/// Renders each distance, reconstructs with the near-light pipeline from a
/// perturbed proxy and with the parallel-light baseline, and scores both
/// against the true depth.
pub fn evaluate_distance_sweep(
    family: SceneFamily,
    distances: &[f64],
    config: &SweepConfig,
) -> Result<Vec<SweepRow>> {
    if let Some(d) = distances.iter().find(|d| !(**d > 0.0)) {
        return Err(Error::InvalidInput(format!(
            "distances must be positive, got {d}"
        )));
    }
    distances
        .iter()
        .map(|&distance| {
            let scene = sweep_scene(family, distance, config)?;
            let obs = render(&scene);
            let truth = scene.depth();
            let proxy =
                perturb_proxy(&scene.proxy_truth, config.proxy_error_deg, 8.0, config.seed)?;
            let pipeline = PipelineConfig {
                calibration: CalibrationConfig {
                    d: distance,
                    ..config.pipeline.calibration
                },
                ..config.pipeline.clone()
            };
            let near = reconstruct(&obs, &proxy, &pipeline, None)?;
            let (parallel, _) =
                reconstruct_parallel(&obs, &proxy, &scene.proxy_truth, &scene.albedo, &pipeline)?;
            Ok(SweepRow {
                distance,
                near_error: depth_error(&near.depth, &truth, pipeline.alignment)?,
                parallel_error: depth_error(&parallel, &truth, pipeline.alignment)?,
            })
        })
        .collect()
}

pub fn write_sweep_csv(out: impl Write, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for row in rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml() {
        let config = PipelineConfig::default();
        let text = config.to_toml().unwrap();
        assert_eq!(PipelineConfig::from_toml(&text).unwrap(), config);
        let partial =
            PipelineConfig::from_toml("max_global_iters = 3\n[shadow]\ntau = 0.3\n").unwrap();
        assert_eq!(partial.max_global_iters, 3);
        assert_eq!(partial.shadow.tau, 0.3);
        assert_eq!(partial.filter, FilterConfig::default());
    }

    #[test]
    fn config_rejects_bad_values() {
        assert!(PipelineConfig::from_toml("max_global_iters = 0").is_err());
        assert!(PipelineConfig::from_toml("unknown = 1").is_err());
        assert!(PipelineConfig::from_toml("[filter]\nsigma = -1.0").is_err());
    }

    #[test]
    fn default_weights_and_thresholds() {
        let c = PipelineConfig::default();
        assert_eq!(
            (
                c.calibration.lambda1,
                c.calibration.lambda2,
                c.calibration.lambda_beta
            ),
            (1e-3, 1e-3, 1e-3)
        );
        assert_eq!(
            (c.calibration.lambda3, c.calibration.lambda_p),
            (1e-4, 1e-4)
        );
        assert_eq!(c.calibration.lambda_n, 1e-6);
        assert_eq!(
            (c.shadow.tau, c.filter.sigma, c.filter.window),
            (0.4, 5.0, 10)
        );
        assert_eq!(c.max_global_iters, 10);
    }

    #[test]
    fn single_iteration_matches_the_stages_run_once() {
        let rig = LightRig::dome(5, 1.5, 45.0, &[]).unwrap();
        let scene = make_sphere_scene(48, 0.5, rig).unwrap();
        let scene = scene
            .clone()
            .with_albedo(textured_albedo(scene.plane(), 0.4, 0.9, 2));
        let obs = render(&scene);
        let config = PipelineConfig {
            max_global_iters: 1,
            keypoints: 200,
            calibration: CalibrationConfig {
                d: 1.5,
                ..Default::default()
            },
            ..Default::default()
        };
        let out = reconstruct(&obs, &scene.proxy_truth, &config, None).unwrap();
        assert_eq!(out.report.iterations.len(), 1);

        let norm = normalize_observations(&obs).unwrap();
        let calib = calibrate(&norm, &scene.proxy_truth, &config).unwrap();
        let a = albedo_per_light(&norm, &scene.proxy_truth, &calib.rig).unwrap();
        let v = valid_lights(&a, &scene.proxy_truth, &calib.rig, &config.shadow).unwrap();
        let est = estimate_normals(&norm, &scene.proxy_truth, &calib.rig, &v).unwrap();
        let surface = surface_from_normals(est, &scene.proxy_truth, &config).unwrap();
        let bits = |d: &DepthMap| d.depth.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&out.depth), bits(&surface.depth));
        assert_eq!(out.rig, calib.rig);
    }

    fn truth_surface(scene: &SyntheticScene, config: &PipelineConfig) -> Surface {
        let proxy = &scene.proxy_truth;
        let plane = *proxy.plane();
        let estimate = NormalEstimate {
            normals: NormalMap {
                plane,
                normals: proxy.normals().to_vec(),
                mask: proxy.recon_mask().clone(),
            },
            albedo: vec![1.0; plane.len()],
            fallback: Mask::empty(plane.width, plane.height),
            degenerate: Mask::empty(plane.width, plane.height),
            residual_rms: vec![0.0; plane.len()],
        };
        surface_from_normals(estimate, proxy, config).unwrap()
    }

    #[test]
    fn feedback_of_the_true_surface_is_close_to_the_truth() {
        let rig = LightRig::dome(5, 2.0, 45.0, &[]).unwrap();
        let scene = make_bumpy_scene(64, 2.0, 0.04, rig).unwrap();
        let config = PipelineConfig::default();
        let fed = feedback_proxy(&scene.proxy_truth, &truth_surface(&scene, &config)).unwrap();
        let range = scene.depth().range();
        for i in scene.proxy_truth.recon_mask().indices() {
            let (a, b) = (fed.positions()[i], scene.proxy_truth.positions()[i]);
            assert_eq!((a.x, a.y), (b.x, b.y));
            assert!(
                (a.z - b.z).abs() < 0.02 * range,
                "pixel {i}: {} vs {}",
                a.z,
                b.z
            );
            assert!(
                crate::renderer::angle_deg(&fed.normals()[i], &scene.proxy_truth.normals()[i])
                    < 1.0
            );
        }
    }

    #[test]
    fn feedback_ignores_the_surface_tilt() {
        let rig = LightRig::dome(5, 2.0, 45.0, &[]).unwrap();
        let scene = make_bumpy_scene(48, 2.0, 0.04, rig).unwrap();
        let config = PipelineConfig::default();
        let surface = truth_surface(&scene, &config);
        let base = feedback_proxy(&scene.proxy_truth, &surface).unwrap();

        let (a, b, c) = (0.3, -0.2, 5.0);
        let mut tilted = truth_surface(&scene, &config);
        for i in scene.proxy_truth.recon_mask().indices() {
            let p = scene.proxy_truth.positions()[i];
            tilted.depth.depth[i] += c + a * p.x + b * p.y;
            tilted.gradients.gx[i] += a;
            tilted.gradients.gy[i] += b;
        }
        let fed = feedback_proxy(&scene.proxy_truth, &tilted).unwrap();
        for i in scene.proxy_truth.recon_mask().indices() {
            assert!((fed.positions()[i] - base.positions()[i]).norm() < 1e-9);
            assert!((fed.normals()[i] - base.normals()[i]).norm() < 1e-9);
        }
    }

    #[test]
    fn sweep_rejects_non_positive_distance() {
        let config = SweepConfig::default();
        assert!(evaluate_distance_sweep(SceneFamily::Bumpy, &[1.0, 0.0], &config).is_err());
    }
}
