//! Near point light calibration.
//!
//! Every key point `i` is modelled as `I_ij = ρ_i N_i · D_ij`, where the scaled
//! direction `D_ij = β_j (P_j - V_i) / |P_j - V_i|³` folds the inverse-square
//! falloff into the light vector. [`calibrate_joint`] fits albedos, light
//! intensities and positions at once; [`refine_alternating`] then lets the
//! key-point normals move away from the proxy while alternating with the
//! lights. [`calibrate_parallel_baseline`] is the classic directional-light
//! fit used for comparison.
//!
//! Pairs with zero observed intensity are attached or cast shadows under the
//! clamped Lambertian model and carry no information about the light, so they
//! are left out of the data term.

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par_map;
use crate::types::{KeyPointSet, LightRig, Vec3};

/// Distances below this are treated as a light sitting on the surface.
pub const MIN_LIGHT_DISTANCE: f64 = 1e-9;

/// Consecutive rejected damping escalations before a solve is declared
/// stalled.
const MAX_ESCALATIONS: usize = 16;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    /// Pull of each `β_j` toward the mean intensity in the joint solve.
    pub lambda1: f64,
    /// Albedo magnitude penalty; removes the `ρ`/`β` scale ambiguity.
    pub lambda2: f64,
    /// Pull of each `|P_j|` toward the distance prior `d`.
    pub lambda3: f64,
    /// Anchor of refined key-point normals to the proxy normals.
    pub lambda_n: f64,
    /// Same role as `lambda1`, for the refinement light step.
    pub lambda_beta: f64,
    /// Same role as `lambda3`, for the refinement light step.
    pub lambda_p: f64,
    /// Prior light-to-surface distance in world units.
    pub d: f64,
    pub max_outer_iters: usize,
    /// Iteration cap of the damped Gauss-Newton solves.
    pub max_joint_iters: usize,
    /// Relative objective decrease below which a solve stops.
    pub tol: f64,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        Self {
            lambda1: 1e-3,
            lambda2: 1e-3,
            lambda3: 1e-4,
            lambda_n: 1e-6,
            lambda_beta: 1e-3,
            lambda_p: 1e-4,
            d: 1.0,
            max_outer_iters: 50,
            max_joint_iters: 200,
            tol: 1e-6,
        }
    }
}

impl CalibrationConfig {
    pub fn validate(&self) -> Result<()> {
        let weights = [
            self.lambda1,
            self.lambda2,
            self.lambda3,
            self.lambda_n,
            self.lambda_beta,
            self.lambda_p,
        ];
        if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
            return Err(Error::InvalidInput(
                "calibration weights must be >= 0".into(),
            ));
        }
        if !(self.d > 0.0 && self.d.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "distance prior must be positive, got {}",
                self.d
            )));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::InvalidInput("tolerance must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CalibrationResult {
    pub rig: LightRig,
    pub keypoint_albedo: Vec<f64>,
    pub refined_normals: Vec<Vec3>,
    /// Objective before the first iteration, then after every iteration.
    pub objective_trace: Vec<f64>,
}

/// `β (P - V) / |P - V|³`: unit direction toward the light scaled by the
/// inverse-square irradiance.
pub fn scaled_direction(light: &Vec3, vertex: &Vec3, beta: f64) -> Result<Vec3> {
    let u = light - vertex;
    let r = u.norm();
    if r < MIN_LIGHT_DISTANCE {
        return Err(Error::CoincidentLightAndVertex);
    }
    Ok(u * (beta / (r * r * r)))
}

/// Unchecked `N · D` and its partial derivatives with respect to `β` and `P`.
#[inline]
fn shading_with_grad(n: &Vec3, v: &Vec3, p: &Vec3, beta: f64) -> (f64, f64, Vec3) {
    let u = p - v;
    let r2 = u.norm_squared();
    let r = r2.sqrt();
    let inv_r3 = 1.0 / (r2 * r);
    let nu = n.dot(&u);
    let a = beta * nu * inv_r3;
    let da_dbeta = nu * inv_r3;
    let da_dp = (n - u * (3.0 * nu / r2)) * (beta * inv_r3);
    (a, da_dbeta, da_dp)
}

/// Whether pair `(i, j)` enters the data term.
#[inline]
fn is_lit(intensity: f64) -> bool {
    intensity > 0.0
}

/// Flat parameter vector: `[ρ_0 .. ρ_{m-1}, β_0, P_0, β_1, P_1, ..]`.
#[derive(Clone, Debug, PartialEq)]
pub struct JointParams {
    pub rho: Vec<f64>,
    pub beta: Vec<f64>,
    pub positions: Vec<Vec3>,
}

impl JointParams {
    pub fn len(&self) -> usize {
        self.rho.len() + 4 * self.beta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.len());
        v.extend_from_slice(&self.rho);
        for (b, p) in self.beta.iter().zip(&self.positions) {
            v.extend_from_slice(&[*b, p.x, p.y, p.z]);
        }
        DVector::from_vec(v)
    }

    pub fn from_vector(m: usize, n: usize, v: &DVector<f64>) -> Self {
        let rho = v.as_slice()[..m].to_vec();
        let mut beta = Vec::with_capacity(n);
        let mut positions = Vec::with_capacity(n);
        for j in 0..n {
            let o = m + 4 * j;
            beta.push(v[o]);
            positions.push(Vec3::new(v[o + 1], v[o + 2], v[o + 3]));
        }
        Self {
            rho,
            beta,
            positions,
        }
    }
}

/// Weights of the light-side regularizers, shared by the joint objective and
/// the refinement light step.
#[derive(Clone, Copy, Debug)]
struct Regularizers {
    beta_mean: f64,
    rho: f64,
    distance: f64,
    d: f64,
}

/// Least-squares problem over key points with fixed normals.
struct Problem<'a> {
    kp: &'a KeyPointSet,
    normals: &'a [Vec3],
    reg: Regularizers,
    /// When false, `ρ` is held fixed and only `(β, P)` move.
    rho_free: bool,
}

impl Problem<'_> {
    /// Visits every residual with its derivative entries: an optional `ρ`
    /// entry `(i, ∂r/∂ρ_i)` and light entries `(k, ∂r/∂θ_k)` where `θ` is the
    /// `4n` light block.
    fn for_each_residual(
        &self,
        p: &JointParams,
        mut visit: impl FnMut(f64, Option<(usize, f64)>, &[(usize, f64)]),
    ) {
        let n = p.beta.len();
        for (i, row) in self.kp.intensities.iter().enumerate() {
            let nrm = &self.normals[i];
            let v = &self.kp.positions[i];
            for j in 0..n {
                if !is_lit(row[j]) {
                    continue;
                }
                let (a, da_db, da_dp) = shading_with_grad(nrm, v, &p.positions[j], p.beta[j]);
                let rho = p.rho[i];
                let e = row[j] - rho * a;
                let o = 4 * j;
                visit(
                    e,
                    Some((i, -a)),
                    &[
                        (o, -rho * da_db),
                        (o + 1, -rho * da_dp.x),
                        (o + 2, -rho * da_dp.y),
                        (o + 3, -rho * da_dp.z),
                    ],
                );
            }
        }
        if self.reg.beta_mean > 0.0 {
            let s = self.reg.beta_mean.sqrt();
            let mean = p.beta.iter().sum::<f64>() / n as f64;
            let mut entries: Vec<(usize, f64)> = (0..n).map(|l| (4 * l, s / n as f64)).collect();
            for j in 0..n {
                entries[j].1 = s * (1.0 / n as f64 - 1.0);
                visit(s * (mean - p.beta[j]), None, &entries);
                entries[j].1 = s / n as f64;
            }
        }
        if self.reg.rho > 0.0 {
            let s = self.reg.rho.sqrt();
            for (i, &rho) in p.rho.iter().enumerate() {
                visit(s * rho, Some((i, s)), &[]);
            }
        }
        if self.reg.distance > 0.0 {
            let s = self.reg.distance.sqrt();
            for (j, pos) in p.positions.iter().enumerate() {
                let r = pos.norm();
                let g = pos * (s / r);
                let o = 4 * j;
                visit(
                    s * (r - self.reg.d),
                    None,
                    &[(o + 1, g.x), (o + 2, g.y), (o + 3, g.z)],
                );
            }
        }
    }

    fn objective(&self, p: &JointParams) -> f64 {
        let mut sum = 0.0;
        self.for_each_residual(p, |r, _, _| sum += r * r);
        sum
    }

    fn residuals(&self, p: &JointParams) -> DVector<f64> {
        let mut out = Vec::new();
        self.for_each_residual(p, |r, _, _| out.push(r));
        DVector::from_vec(out)
    }

    fn jacobian(&self, p: &JointParams) -> DMatrix<f64> {
        let m = p.rho.len();
        let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
        self.for_each_residual(p, |_, rho, theta| {
            let mut row = Vec::with_capacity(theta.len() + 1);
            if let Some((i, d)) = rho {
                row.push((i, d));
            }
            row.extend(theta.iter().map(|&(k, d)| (m + k, d)));
            rows.push(row);
        });
        let mut jac = DMatrix::zeros(rows.len(), p.len());
        for (r, row) in rows.iter().enumerate() {
            for &(c, d) in row {
                jac[(r, c)] += d;
            }
        }
        jac
    }
}

/// Gauss-Newton normal equations with the per-key-point `ρ` block kept
/// diagonal so it can be eliminated in closed form.
struct NormalEquations {
    h_rho: Vec<f64>,
    g_rho: Vec<f64>,
    /// `m x 4n` coupling between `ρ` and the light block.
    coupling: DMatrix<f64>,
    h_light: DMatrix<f64>,
    g_light: DVector<f64>,
}

impl NormalEquations {
    fn assemble(problem: &Problem, p: &JointParams) -> Self {
        let m = p.rho.len();
        let nt = 4 * p.beta.len();
        let mut eq = Self {
            h_rho: vec![0.0; m],
            g_rho: vec![0.0; m],
            coupling: DMatrix::zeros(m, nt),
            h_light: DMatrix::zeros(nt, nt),
            g_light: DVector::zeros(nt),
        };
        // Derivatives are taken with respect to ln ρ and ln β, which makes the
        // ρ/β scale ambiguity a straight line in parameter space.
        let mut scaled = Vec::with_capacity(4);
        problem.for_each_residual(p, |r, rho, theta| {
            scaled.clear();
            scaled.extend(theta.iter().map(|&(k, d)| {
                if k % 4 == 0 {
                    (k, d * p.beta[k / 4])
                } else {
                    (k, d)
                }
            }));
            let theta = &scaled[..];
            if let (true, Some((i, jr))) = (problem.rho_free, rho) {
                let jr = jr * p.rho[i];
                eq.h_rho[i] += jr * jr;
                eq.g_rho[i] += jr * r;
                for &(k, jt) in theta {
                    eq.coupling[(i, k)] += jr * jt;
                }
            }
            for &(k, jk) in theta {
                eq.g_light[k] += jk * r;
                for &(l, jl) in theta {
                    eq.h_light[(k, l)] += jk * jl;
                }
            }
        });
        eq
    }

    /// Solves `(H + μ diag H) δ = -g`. Returns `None` when the reduced light
    /// system is not positive definite.
    fn solve(&self, mu: f64, rho_free: bool) -> Option<(Vec<f64>, DVector<f64>)> {
        const FLOOR: f64 = 1e-12;
        let nt = self.g_light.len();
        let mut s = self.h_light.clone();
        for k in 0..nt {
            s[(k, k)] += mu * self.h_light[(k, k)].max(FLOOR);
        }
        let mut rhs = -&self.g_light;
        let m = self.h_rho.len();
        let damped_rho: Vec<f64> = self
            .h_rho
            .iter()
            .map(|&h| h + mu * h.max(FLOOR) + FLOOR)
            .collect();
        if rho_free {
            for i in 0..m {
                let b = self.coupling.row(i);
                let inv = 1.0 / damped_rho[i];
                s.ger(-inv, &b.transpose(), &b.transpose(), 1.0);
                rhs.axpy(inv * self.g_rho[i], &b.transpose(), 1.0);
            }
        }
        let delta_light = s.cholesky()?.solve(&rhs);
        let delta_rho = if rho_free {
            (0..m)
                .map(|i| {
                    let b = self.coupling.row(i);
                    (-self.g_rho[i] - b.dot(&delta_light.transpose())) / damped_rho[i]
                })
                .collect()
        } else {
            vec![0.0; m]
        };
        Some((delta_rho, delta_light))
    }

    /// Decrease of the objective predicted by the undamped quadratic model.
    fn predicted_decrease(&self, d_rho: &[f64], d_light: &DVector<f64>) -> f64 {
        let mut lin = self.g_light.dot(d_light);
        let mut quad = d_light.dot(&(&self.h_light * d_light));
        for i in 0..d_rho.len() {
            lin += self.g_rho[i] * d_rho[i];
            quad += self.h_rho[i] * d_rho[i] * d_rho[i];
            quad += 2.0 * d_rho[i] * self.coupling.row(i).dot(&d_light.transpose());
        }
        -(2.0 * lin + quad)
    }
}

fn apply_step(p: &JointParams, d_rho: &[f64], d_light: &DVector<f64>) -> JointParams {
    let mut q = p.clone();
    for (r, d) in q.rho.iter_mut().zip(d_rho) {
        *r *= d.exp();
    }
    for j in 0..q.beta.len() {
        q.beta[j] *= d_light[4 * j].exp();
        q.positions[j] += Vec3::new(d_light[4 * j + 1], d_light[4 * j + 2], d_light[4 * j + 3]);
    }
    q
}

/// Damped Gauss-Newton (Levenberg-Marquardt) on `problem`, appending the
/// objective after every accepted step to `trace`.
fn damped_gauss_newton(
    problem: &Problem,
    params: &mut JointParams,
    max_iters: usize,
    tol: f64,
    stage: &'static str,
    trace: &mut Vec<f64>,
) -> Result<()> {
    let mut f = problem.objective(params);
    if !f.is_finite() {
        return Err(Error::DivergedSolve { stage });
    }
    let mut mu = 1e-3;
    for _ in 0..max_iters {
        if f < 1e-30 {
            break;
        }
        let eq = NormalEquations::assemble(problem, params);
        let mut escalations = 0;
        let accepted = loop {
            let step = eq.solve(mu, problem.rho_free);
            if let Some((d_rho, d_light)) = &step {
                let candidate = apply_step(params, d_rho, d_light);
                let f_new = problem.objective(&candidate);
                if f_new.is_finite() && f_new < f {
                    mu = (mu / 3.0).max(1e-12);
                    break Some((candidate, f_new));
                }
            }
            escalations += 1;
            mu *= 10.0;
            if escalations >= MAX_ESCALATIONS {
                let stalled = match &step {
                    Some((d_rho, d_light)) => eq.predicted_decrease(d_rho, d_light) <= tol * f,
                    None => false,
                };
                if stalled {
                    break None;
                }
                return Err(Error::DivergedSolve { stage });
            }
        };
        let Some((candidate, f_new)) = accepted else {
            break;
        };
        *params = candidate;
        let decrease = (f - f_new) / f;
        f = f_new;
        trace.push(f);
        if decrease < tol {
            break;
        }
    }
    Ok(())
}

fn check_inputs(keypoints: &KeyPointSet, config: &CalibrationConfig) -> Result<()> {
    config.validate()?;
    keypoints.check_consistent()?;
    if keypoints.len() < 4 {
        return Err(Error::InvalidInput(format!(
            "calibration needs at least 4 key points, got {}",
            keypoints.len()
        )));
    }
    if keypoints.n_lights() == 0 {
        return Err(Error::InvalidInput(
            "calibration needs at least one light".into(),
        ));
    }
    if let Some(i) = keypoints
        .intensities
        .iter()
        .position(|row| !row.iter().copied().any(is_lit))
    {
        return Err(Error::InvalidInput(format!(
            "key point {i} is dark under every light"
        )));
    }
    Ok(())
}

fn joint_problem<'a>(
    keypoints: &'a KeyPointSet,
    normals: &'a [Vec3],
    config: &CalibrationConfig,
) -> Problem<'a> {
    Problem {
        kp: keypoints,
        normals,
        reg: Regularizers {
            beta_mean: config.lambda1,
            rho: config.lambda2,
            distance: config.lambda3,
            d: config.d,
        },
        rho_free: true,
    }
}

/// Value of the joint calibration objective:
/// `Σ (I_ij - ρ_i N_i·D_ij)² + λ1 Σ (β̄ - β_j)² + λ2 |ρ|² + λ3 Σ (|P_j| - d)²`,
/// the data sum running over lit pairs.
pub fn objective(
    rho: &[f64],
    rig: &LightRig,
    normals: &[Vec3],
    keypoints: &KeyPointSet,
    config: &CalibrationConfig,
) -> Result<f64> {
    keypoints.check_consistent()?;
    if rho.len() != keypoints.len() || normals.len() != keypoints.len() {
        return Err(Error::InvalidInput(
            "albedo/normal count differs from key points".into(),
        ));
    }
    if rig.len() != keypoints.n_lights() {
        return Err(Error::InvalidInput(
            "rig size differs from intensity columns".into(),
        ));
    }
    let params = JointParams {
        rho: rho.to_vec(),
        beta: rig.intensities().to_vec(),
        positions: rig.positions().to_vec(),
    };
    Ok(joint_problem(keypoints, normals, config).objective(&params))
}

/// Residual vector of the joint objective, in a fixed row order. Exposed for
/// derivative checks.
pub fn joint_residuals(
    params: &JointParams,
    keypoints: &KeyPointSet,
    config: &CalibrationConfig,
) -> DVector<f64> {
    joint_problem(keypoints, &keypoints.normals, config).residuals(params)
}

/// Analytic Jacobian of [`joint_residuals`] with columns ordered as
/// [`JointParams::to_vector`].
pub fn joint_jacobian(
    params: &JointParams,
    keypoints: &KeyPointSet,
    config: &CalibrationConfig,
) -> DMatrix<f64> {
    joint_problem(keypoints, &keypoints.normals, config).jacobian(params)
}

fn finish(
    params: JointParams,
    normals: Vec<Vec3>,
    trace: Vec<f64>,
    stage: &'static str,
) -> Result<CalibrationResult> {
    if params.rho.iter().any(|r| !(*r > 0.0)) {
        return Err(Error::DivergedSolve { stage });
    }
    let rig =
        LightRig::new(params.positions, params.beta).map_err(|_| Error::DivergedSolve { stage })?;
    Ok(CalibrationResult {
        rig,
        keypoint_albedo: params.rho,
        refined_normals: normals,
        objective_trace: trace,
    })
}

/// Candidate light positions tried per light during initialization.
pub const INIT_CANDIDATES: usize = 256;

/// Initial parameters: albedo at each key point's brightest observation, and
/// for each light the point of a Fibonacci spiral over the `z > 0`
/// half-sphere of radius `d` that best explains its image, with the intensity
/// fitted in closed form.
pub fn initial_params(keypoints: &KeyPointSet, config: &CalibrationConfig) -> JointParams {
    let rho: Vec<f64> = keypoints
        .intensities
        .iter()
        .map(|row| row.iter().copied().fold(0.0, f64::max))
        .collect();
    let candidates = LightRig::fibonacci_hemisphere(INIT_CANDIDATES, config.d);
    let (beta, positions) = (0..keypoints.n_lights())
        .map(|j| {
            let mut best = (f64::INFINITY, 1.0, candidates.positions()[0]);
            for p in candidates.positions() {
                // Residual after the best β: Σ I² - (Σ I a)² / Σ a².
                let (mut ia, mut aa, mut ii) = (0.0, 0.0, 0.0);
                for i in 0..keypoints.len() {
                    let intensity = keypoints.intensities[i][j];
                    if !is_lit(intensity) {
                        continue;
                    }
                    let u = p - keypoints.positions[i];
                    let a = rho[i] * keypoints.normals[i].dot(&u) / u.norm().powi(3);
                    ia += intensity * a;
                    aa += a * a;
                    ii += intensity * intensity;
                }
                if !(ia > 0.0 && aa > 0.0) {
                    continue;
                }
                let cost = ii - ia * ia / aa;
                if cost < best.0 {
                    best = (cost, ia / aa, *p);
                }
            }
            (best.1, best.2)
        })
        .unzip();
    let params = JointParams {
        rho,
        beta,
        positions,
    };
    params
}

/// Jointly estimates key-point albedos, light intensities and light positions
/// with the proxy normals held fixed.
pub fn calibrate_joint(
    keypoints: &KeyPointSet,
    config: &CalibrationConfig,
) -> Result<CalibrationResult> {
    check_inputs(keypoints, config)?;
    let mut params = initial_params(keypoints, config);
    let problem = joint_problem(keypoints, &keypoints.normals, config);
    let mut trace = vec![problem.objective(&params)];
    damped_gauss_newton(
        &problem,
        &mut params,
        config.max_joint_iters,
        config.tol,
        "joint calibration",
        &mut trace,
    )?;
    finish(
        params,
        keypoints.normals.clone(),
        trace,
        "joint calibration",
    )
}

/// Orthonormal tangent vectors of a unit normal.
fn tangent_basis(n: &Vec3) -> (Vec3, Vec3) {
    let axis = if n.x.abs() < 0.9 {
        Vec3::x()
    } else {
        Vec3::y()
    };
    let t1 = n.cross(&axis).normalize();
    (t1, n.cross(&t1))
}

/// Gauss-Newton system of the refinement objective. Each key point owns a
/// `(ln ρ, two tangent moves of N̂)` block that only couples to the lights.
struct RefineEquations {
    point_h: Vec<Matrix3<f64>>,
    point_g: Vec<Vec3>,
    /// `3 x 4n` per key point.
    coupling: Vec<DMatrix<f64>>,
    h_light: DMatrix<f64>,
    g_light: DVector<f64>,
    tangents: Vec<(Vec3, Vec3)>,
}

struct RefineProblem<'a> {
    kp: &'a KeyPointSet,
    reg: Regularizers,
    lambda_n: f64,
}

impl RefineProblem<'_> {
    fn light_regularizers(&self, p: &JointParams) -> Problem<'static> {
        static EMPTY: KeyPointSet = KeyPointSet {
            pixels: Vec::new(),
            normals: Vec::new(),
            positions: Vec::new(),
            intensities: Vec::new(),
        };
        debug_assert!(p.rho.len() == self.kp.len());
        Problem {
            kp: &EMPTY,
            normals: &[],
            reg: self.reg,
            rho_free: false,
        }
    }

    fn lights_only(p: &JointParams) -> JointParams {
        JointParams {
            rho: Vec::new(),
            beta: p.beta.clone(),
            positions: p.positions.clone(),
        }
    }

    fn objective(&self, p: &JointParams, normals: &[Vec3]) -> f64 {
        let data = Problem {
            kp: self.kp,
            normals,
            reg: Regularizers {
                beta_mean: 0.0,
                rho: 0.0,
                distance: 0.0,
                d: self.reg.d,
            },
            rho_free: false,
        }
        .objective(p);
        let anchor: f64 = normals
            .iter()
            .zip(&self.kp.normals)
            .map(|(a, b)| (a - b).norm_squared())
            .sum();
        data + self.lambda_n * anchor + self.light_regularizers(p).objective(&Self::lights_only(p))
    }

    fn assemble(&self, p: &JointParams, normals: &[Vec3]) -> RefineEquations {
        let n = p.beta.len();
        let nt = 4 * n;
        let s = self.lambda_n.sqrt();
        let blocks = par_map(self.kp.len(), |i| {
            let nrm = normals[i];
            let (t1, t2) = tangent_basis(&nrm);
            let v = self.kp.positions[i];
            let rho = p.rho[i];
            let mut h = Matrix3::zeros();
            let mut g = Vec3::zeros();
            let mut c = DMatrix::zeros(3, nt);
            let mut hl = DMatrix::zeros(nt, nt);
            let mut gl = DVector::zeros(nt);
            for j in 0..n {
                let intensity = self.kp.intensities[i][j];
                if !is_lit(intensity) {
                    continue;
                }
                let u = p.positions[j] - v;
                let dir = u * (p.beta[j] / u.norm().powi(3));
                let (a, da_db, da_dp) = shading_with_grad(&nrm, &v, &p.positions[j], p.beta[j]);
                let e = intensity - rho * a;
                let jp = Vec3::new(-rho * a, -rho * t1.dot(&dir), -rho * t2.dot(&dir));
                let o = 4 * j;
                let jl = [
                    -rho * da_db * p.beta[j],
                    -rho * da_dp.x,
                    -rho * da_dp.y,
                    -rho * da_dp.z,
                ];
                h += jp * jp.transpose();
                g += jp * e;
                for (k, &jk) in jl.iter().enumerate() {
                    gl[o + k] += jk * e;
                    for r in 0..3 {
                        c[(r, o + k)] += jp[r] * jk;
                    }
                    for (l, &jj) in jl.iter().enumerate() {
                        hl[(o + k, o + l)] += jk * jj;
                    }
                }
            }
            let off = nrm - self.kp.normals[i];
            h[(1, 1)] += s * s;
            h[(2, 2)] += s * s;
            g[1] += s * s * t1.dot(&off);
            g[2] += s * s * t2.dot(&off);
            (h, g, c, hl, gl, (t1, t2))
        });
        let lights = Self::lights_only(p);
        let reg = NormalEquations::assemble(&self.light_regularizers(p), &lights);
        let mut eq = RefineEquations {
            point_h: Vec::with_capacity(blocks.len()),
            point_g: Vec::with_capacity(blocks.len()),
            coupling: Vec::with_capacity(blocks.len()),
            h_light: reg.h_light,
            g_light: reg.g_light,
            tangents: Vec::with_capacity(blocks.len()),
        };
        for (h, g, c, hl, gl, t) in blocks {
            eq.point_h.push(h);
            eq.point_g.push(g);
            eq.coupling.push(c);
            eq.h_light += hl;
            eq.g_light += gl;
            eq.tangents.push(t);
        }
        eq
    }
}

impl RefineEquations {
    /// Damped step with the point blocks eliminated.
    fn solve(&self, mu: f64) -> Option<(Vec<Vec3>, DVector<f64>)> {
        const FLOOR: f64 = 1e-12;
        let nt = self.g_light.len();
        let mut s = self.h_light.clone();
        for k in 0..nt {
            s[(k, k)] += mu * self.h_light[(k, k)].max(FLOOR);
        }
        let mut rhs = -&self.g_light;
        let mut inverses = Vec::with_capacity(self.point_h.len());
        for ((h, g), c) in self.point_h.iter().zip(&self.point_g).zip(&self.coupling) {
            let mut damped = *h;
            for k in 0..3 {
                damped[(k, k)] += mu * h[(k, k)].max(FLOOR) + FLOOR;
            }
            let inv = damped.try_inverse()?;
            // Sᵢ = Cᵢᵀ Hᵢ⁻¹
            let ct_inv = c.transpose() * DMatrix::from_iterator(3, 3, inv.iter().copied());
            s -= &ct_inv * c;
            rhs += &ct_inv * DVector::from_iterator(3, g.iter().copied());
            inverses.push(inv);
        }
        let delta_light = s.cholesky()?.solve(&rhs);
        let delta_points = inverses
            .iter()
            .zip(&self.point_g)
            .zip(&self.coupling)
            .map(|((inv, g), c)| {
                let cd = c * &delta_light;
                inv * (-g - Vec3::new(cd[0], cd[1], cd[2]))
            })
            .collect();
        Some((delta_points, delta_light))
    }

    fn predicted_decrease(&self, d_points: &[Vec3], d_light: &DVector<f64>) -> f64 {
        let mut lin = self.g_light.dot(d_light);
        let mut quad = d_light.dot(&(&self.h_light * d_light));
        for (i, dp) in d_points.iter().enumerate() {
            lin += self.point_g[i].dot(dp);
            quad += dp.dot(&(self.point_h[i] * dp));
            let cd = &self.coupling[i] * d_light;
            quad += 2.0 * dp.dot(&Vec3::new(cd[0], cd[1], cd[2]));
        }
        -(2.0 * lin + quad)
    }

    fn apply(
        &self,
        p: &JointParams,
        normals: &[Vec3],
        d_points: &[Vec3],
        d_light: &DVector<f64>,
    ) -> (JointParams, Vec<Vec3>) {
        let rho = vec![0.0; p.rho.len()];
        let mut q = apply_step(p, &rho, d_light);
        let normals = normals
            .iter()
            .zip(d_points)
            .zip(&self.tangents)
            .enumerate()
            .map(|(i, ((n, d), (t1, t2)))| {
                q.rho[i] *= d[0].exp();
                (n + t1 * d[1] + t2 * d[2]).normalize()
            })
            .collect();
        (q, normals)
    }
}

/// Per-key-point albedo and normal update with the lights fixed:
/// `min Σ_j (I_ij - ρ N̂·D_ij)² + λn |N̂ - N|²` over `(ρ, N̂)`, `|N̂| = 1`.
fn refine_point(
    intensities: &[f64],
    directions: &[Vec3],
    anchor: &Vec3,
    lambda_n: f64,
    rho: f64,
    normal: &Vec3,
) -> (f64, Vec3) {
    let cost = |rho: f64, n: &Vec3| {
        let data: f64 = intensities
            .iter()
            .zip(directions)
            .filter(|(i, _)| is_lit(**i))
            .map(|(i, d)| (i - rho * n.dot(d)).powi(2))
            .sum();
        data + lambda_n * (n - anchor).norm_squared()
    };
    let mut a = Matrix3::zeros();
    let mut c = Vec3::zeros();
    let mut lit = 0;
    for (&i, d) in intensities.iter().zip(directions) {
        if is_lit(i) {
            a += d * d.transpose();
            c += d * i;
            lit += 1;
        }
    }
    let best_rho = |n: &Vec3| {
        let den = n.dot(&(a * n));
        if den > 0.0 {
            n.dot(&c) / den
        } else {
            rho
        }
    };

    let start = cost(rho, normal);
    let (mut r, mut n) = (rho, *normal);
    for _ in 0..2 {
        if lit >= 3 && r > 0.0 {
            let system = a * (r * r) + Matrix3::identity() * lambda_n;
            if let Some(sol) = system.lu().solve(&(c * r + anchor * lambda_n)) {
                let len = sol.norm();
                if len > 0.0 && len.is_finite() {
                    n = sol / len;
                }
            }
        }
        r = best_rho(&n);
    }
    if r > 0.0 && cost(r, &n) < start {
        (r, n)
    } else {
        (rho, *normal)
    }
}

/// Damped Gauss-Newton on the refinement objective over every unknown.
/// Returns the final objective.
fn refine_gauss_newton(
    problem: &RefineProblem,
    params: &mut JointParams,
    normals: &mut Vec<Vec3>,
    max_iters: usize,
    tol: f64,
) -> Result<f64> {
    const STAGE: &str = "alternating refinement";
    let mut f = problem.objective(params, normals);
    if !f.is_finite() {
        return Err(Error::DivergedSolve { stage: STAGE });
    }
    let mut mu = 1e-3;
    for _ in 0..max_iters {
        if f < 1e-30 {
            break;
        }
        let eq = problem.assemble(params, normals);
        let mut escalations = 0;
        let accepted = loop {
            let step = eq.solve(mu);
            if let Some((d_points, d_light)) = &step {
                let (q, nq) = eq.apply(params, normals, d_points, d_light);
                let f_new = problem.objective(&q, &nq);
                if f_new.is_finite() && f_new < f {
                    mu = (mu / 3.0).max(1e-12);
                    break Some((q, nq, f_new));
                }
            }
            escalations += 1;
            mu *= 10.0;
            if escalations >= MAX_ESCALATIONS {
                let stalled = match &step {
                    Some((d_points, d_light)) => {
                        eq.predicted_decrease(d_points, d_light) <= tol * f
                    }
                    None => false,
                };
                if stalled {
                    break None;
                }
                return Err(Error::DivergedSolve { stage: STAGE });
            }
        };
        let Some((q, nq, f_new)) = accepted else {
            break;
        };
        *params = q;
        *normals = nq;
        let decrease = (f - f_new) / f;
        f = f_new;
        if decrease < tol {
            break;
        }
    }
    Ok(f)
}

/// Lets the key-point normals `N̂` move away from the proxy normals `N`,
/// starting from a joint calibration, by minimizing
/// `Σ (I - ρ N̂·D)² + λn Σ |N̂ - N|² + λβ Σ (β̄ - β)² + λP Σ (|P| - d)²`.
/// Each outer iteration updates every key point's `(ρ, N̂)` with the lights
/// fixed, then moves the lights with the key points eliminated, so a light
/// step already accounts for how the key points would follow it. The trace
/// records the objective before the first and after every outer iteration;
/// the returned rig is rescaled to mean `β = 1`.
pub fn refine_alternating(
    result: &CalibrationResult,
    keypoints: &KeyPointSet,
    config: &CalibrationConfig,
) -> Result<CalibrationResult> {
    const STAGE: &str = "alternating refinement";
    check_inputs(keypoints, config)?;
    let m = keypoints.len();
    if result.keypoint_albedo.len() != m || result.refined_normals.len() != m {
        return Err(Error::InvalidInput(
            "calibration result does not match key points".into(),
        ));
    }
    if result.rig.len() != keypoints.n_lights() {
        return Err(Error::InvalidInput(
            "rig size differs from intensity columns".into(),
        ));
    }
    let problem = RefineProblem {
        kp: keypoints,
        reg: Regularizers {
            beta_mean: config.lambda_beta,
            rho: 0.0,
            distance: config.lambda_p,
            d: config.d,
        },
        lambda_n: config.lambda_n,
    };
    let mut params = JointParams {
        rho: result.keypoint_albedo.clone(),
        beta: result.rig.intensities().to_vec(),
        positions: result.rig.positions().to_vec(),
    };
    // The data term only sees ρβ. The joint solve's albedo penalty leaves β
    // at an arbitrary scale where the β term could swamp the data; restart
    // from mean β = 1, the scale lights are initialized at.
    unit_mean_beta(&mut params);
    let mut normals = result.refined_normals.clone();
    let mut f = problem.objective(&params, &normals);
    if !f.is_finite() {
        return Err(Error::DivergedSolve { stage: STAGE });
    }
    let mut trace = vec![f];
    for _ in 0..config.max_outer_iters {
        let updates = par_map(m, |i| {
            let dirs: Vec<Vec3> = (0..params.beta.len())
                .map(|j| {
                    let u = params.positions[j] - keypoints.positions[i];
                    u * (params.beta[j] / u.norm().powi(3))
                })
                .collect();
            refine_point(
                &keypoints.intensities[i],
                &dirs,
                &keypoints.normals[i],
                config.lambda_n,
                params.rho[i],
                &normals[i],
            )
        });
        for (i, (r, n)) in updates.into_iter().enumerate() {
            params.rho[i] = r;
            normals[i] = n;
        }
        let f_new = refine_gauss_newton(
            &problem,
            &mut params,
            &mut normals,
            config.max_joint_iters,
            config.tol,
        )?;
        let decrease = (f - f_new) / f.max(f64::MIN_POSITIVE);
        f = f_new.min(f);
        trace.push(f);
        if decrease < config.tol {
            break;
        }
    }
    // Without an albedo penalty the β term keeps shrinking the β scale.
    unit_mean_beta(&mut params);
    finish(params, normals, trace, STAGE)
}

/// Moves the `ρ`/`β` scale to mean `β = 1`; products are unchanged.
fn unit_mean_beta(params: &mut JointParams) {
    let mean = params.beta.iter().sum::<f64>() / params.beta.len() as f64;
    params.beta.iter_mut().for_each(|b| *b /= mean);
    params.rho.iter_mut().for_each(|r| *r *= mean);
}

/// Least-squares directional lights: for each light `j`, the vector `L_j`
/// minimizing `Σ_i (I_ij - ρ_i N_i·L_j)²` over lit key points. The length of
/// `L_j` carries the light's apparent intensity.
pub fn fit_parallel_lights(keypoints: &KeyPointSet, albedo: &[f64]) -> Result<Vec<Vec3>> {
    keypoints.check_consistent()?;
    if albedo.len() != keypoints.len() {
        return Err(Error::InvalidInput(
            "albedo count differs from key points".into(),
        ));
    }
    (0..keypoints.n_lights())
        .map(|j| {
            let mut ata = Matrix3::zeros();
            let mut atb = Vec3::zeros();
            for i in 0..keypoints.len() {
                let intensity = keypoints.intensities[i][j];
                if !is_lit(intensity) {
                    continue;
                }
                let row = keypoints.normals[i] * albedo[i];
                ata += row * row.transpose();
                atb += row * intensity;
            }
            let eig = SymmetricEigen::new(ata);
            let max = eig.eigenvalues.max();
            let rank = eig
                .eigenvalues
                .iter()
                .filter(|&&e| e > max * 1e-20 && e > 0.0)
                .count();
            if rank < 3 {
                return Err(Error::RankDeficient { rank });
            }
            ata.cholesky()
                .map(|c| c.solve(&atb))
                .ok_or(Error::RankDeficient { rank: 2 })
        })
        .collect()
}

/// Unit directional lights fitted with known albedo and normals.
pub fn calibrate_parallel_baseline(keypoints: &KeyPointSet, albedo: &[f64]) -> Result<Vec<Vec3>> {
    Ok(fit_parallel_lights(keypoints, albedo)?
        .into_iter()
        .map(|l| l.normalize())
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn single(i: f64, normal: Vec3, v: Vec3) -> KeyPointSet {
        KeyPointSet {
            pixels: vec![(0, 0)],
            normals: vec![normal],
            positions: vec![v],
            intensities: vec![vec![i]],
        }
    }

    fn zero_weights() -> CalibrationConfig {
        CalibrationConfig {
            lambda1: 0.0,
            lambda2: 0.0,
            lambda3: 0.0,
            ..Default::default()
        }
    }

    #[test]
    fn scaled_direction_examples() {
        let o = Vec3::zeros();
        assert_eq!(scaled_direction(&Vec3::z(), &o, 1.0).unwrap(), Vec3::z());
        assert_eq!(
            scaled_direction(&Vec3::new(0.0, 0.0, 2.0), &o, 1.0).unwrap(),
            Vec3::new(0.0, 0.0, 0.25)
        );
        let d = scaled_direction(&Vec3::new(3.0, 0.0, 4.0), &o, 2.0).unwrap();
        assert_relative_eq!(d, Vec3::new(0.048, 0.0, 0.064), epsilon = 1e-15);
        assert!(matches!(
            scaled_direction(&o, &o, 1.0),
            Err(Error::CoincidentLightAndVertex)
        ));
    }

    #[test]
    fn scaled_direction_homogeneity() {
        let v = Vec3::new(0.1, -0.2, 0.05);
        let p = Vec3::new(0.7, 0.3, 1.2);
        let base = scaled_direction(&p, &v, 1.5).unwrap();
        assert_relative_eq!(
            scaled_direction(&p, &v, 3.0).unwrap(),
            base * 2.0,
            epsilon = 1e-14
        );
        let far = v + (p - v) * 3.0;
        assert_relative_eq!(
            scaled_direction(&far, &v, 1.5).unwrap(),
            base / 9.0,
            epsilon = 1e-14
        );
    }

    #[test]
    fn objective_examples() {
        // Predicted 0.5 against observed 1.
        let kp = single(1.0, Vec3::z(), Vec3::zeros());
        let rig = LightRig::new(vec![Vec3::new(0.0, 0.0, 1.0)], vec![0.5]).unwrap();
        let f = objective(&[1.0], &rig, &kp.normals, &kp, &zero_weights()).unwrap();
        assert_relative_eq!(f, 0.25, epsilon = 1e-15);

        // Exact data, only the distance prior active.
        let kp = single(1.0 / 9.0, Vec3::z(), Vec3::zeros());
        let rig = LightRig::new(vec![Vec3::new(0.0, 0.0, 3.0)], vec![1.0]).unwrap();
        let config = CalibrationConfig {
            lambda3: 1.0,
            d: 2.0,
            ..zero_weights()
        };
        let f = objective(&[1.0], &rig, &kp.normals, &kp, &config).unwrap();
        assert_relative_eq!(f, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn objective_ignores_dark_pairs() {
        let kp = KeyPointSet {
            pixels: vec![(0, 0)],
            normals: vec![Vec3::z()],
            positions: vec![Vec3::zeros()],
            intensities: vec![vec![0.0, 1.0]],
        };
        let rig = LightRig::new(vec![Vec3::z(), Vec3::z()], vec![1.0, 1.0]).unwrap();
        let f = objective(&[1.0], &rig, &kp.normals, &kp, &zero_weights()).unwrap();
        assert_eq!(f, 0.0);
    }

    #[test]
    fn baseline_rank_failure() {
        let kp = KeyPointSet {
            pixels: vec![(0, 0); 3],
            normals: vec![Vec3::z(); 3],
            positions: vec![Vec3::zeros(); 3],
            intensities: vec![vec![0.5]; 3],
        };
        assert!(matches!(
            calibrate_parallel_baseline(&kp, &[1.0; 3]),
            Err(Error::RankDeficient { .. })
        ));
    }

    #[test]
    fn baseline_recovers_directional_light() {
        let l = Vec3::new(0.3, -0.2, 0.9).normalize() * 0.8;
        let normals = [
            Vec3::new(0.2, 0.1, 1.0),
            Vec3::new(-0.3, 0.2, 1.0),
            Vec3::new(0.1, -0.4, 1.0),
            Vec3::new(0.0, 0.0, 1.0),
        ]
        .map(|n| n.normalize());
        let albedo = [0.5, 0.7, 0.9, 0.3];
        let kp = KeyPointSet {
            pixels: vec![(0, 0); 4],
            normals: normals.to_vec(),
            positions: vec![Vec3::zeros(); 4],
            intensities: normals
                .iter()
                .zip(albedo)
                .map(|(n, a)| vec![a * n.dot(&l)])
                .collect(),
        };
        let fitted = fit_parallel_lights(&kp, &albedo).unwrap();
        assert_relative_eq!(fitted[0], l, epsilon = 1e-12);
        let unit = calibrate_parallel_baseline(&kp, &albedo).unwrap();
        assert_relative_eq!(unit[0].norm(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn config_validation() {
        let bad = CalibrationConfig {
            d: 0.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let bad = CalibrationConfig {
            lambda1: -1.0,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        assert!(CalibrationConfig::default().validate().is_ok());
    }

    #[test]
    fn joint_requires_four_keypoints() {
        let kp = single(1.0, Vec3::z(), Vec3::zeros());
        assert!(calibrate_joint(&kp, &CalibrationConfig::default()).is_err());
    }

    #[test]
    fn params_vector_round_trip() {
        let p = JointParams {
            rho: vec![0.1, 0.2],
            beta: vec![1.0, 2.0],
            positions: vec![Vec3::new(1.0, 2.0, 3.0), Vec3::new(4.0, 5.0, 6.0)],
        };
        let v = p.to_vector();
        assert_eq!(v.len(), 10);
        assert_eq!(JointParams::from_vector(2, 2, &v), p);
    }
}
