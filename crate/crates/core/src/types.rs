//! Domain types shared by every stage, plus key-point sampling and
//! observation normalization.

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;

/// Tolerance on the length of normals accepted as unit vectors.
pub const UNIT_NORMAL_TOL: f64 = 1e-6;

/// Pixel grid of the camera. Pixel `(x, y)` sits at world coordinates
/// `((x - cx) * pixel_scale, (y - cy) * pixel_scale)` with `(cx, cy)` the
/// grid center, so the image is centered on the optical axis. The camera is
/// orthographic and looks down `-z`; surfaces face `+z`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImagePlane {
    pub width: usize,
    pub height: usize,
    pub pixel_scale: f64,
}

impl ImagePlane {
    pub fn new(width: usize, height: usize, pixel_scale: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidInput(format!(
                "image plane must be non-empty, got {width}x{height}"
            )));
        }
        if !(pixel_scale > 0.0 && pixel_scale.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "pixel scale must be positive, got {pixel_scale}"
            )));
        }
        Ok(Self {
            width,
            height,
            pixel_scale,
        })
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize) -> usize {
        y * self.width + x
    }

    #[inline]
    pub fn coords(&self, index: usize) -> (usize, usize) {
        (index % self.width, index / self.width)
    }

    /// World `(X, Y)` of a (possibly fractional) pixel position.
    #[inline]
    pub fn world_xy(&self, x: f64, y: f64) -> (f64, f64) {
        let cx = (self.width as f64 - 1.0) * 0.5;
        let cy = (self.height as f64 - 1.0) * 0.5;
        ((x - cx) * self.pixel_scale, (y - cy) * self.pixel_scale)
    }

    /// Inverse of [`ImagePlane::world_xy`].
    #[inline]
    pub fn pixel_xy(&self, wx: f64, wy: f64) -> (f64, f64) {
        let cx = (self.width as f64 - 1.0) * 0.5;
        let cy = (self.height as f64 - 1.0) * 0.5;
        (wx / self.pixel_scale + cx, wy / self.pixel_scale + cy)
    }

    pub(crate) fn check_same(&self, other: &ImagePlane, what: &str) -> Result<()> {
        if self.width != other.width || self.height != other.height {
            return Err(Error::InvalidInput(format!(
                "{what}: {}x{} does not match {}x{}",
                other.width, other.height, self.width, self.height
            )));
        }
        Ok(())
    }
}

/// Per-pixel boolean map in row-major order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn full(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![true; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self {
            width,
            height,
            bits,
        }
    }

    pub fn from_bits(width: usize, height: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height {
            return Err(Error::InvalidInput(format!(
                "mask has {} entries, expected {}",
                bits.len(),
                width * height
            )));
        }
        Ok(Self {
            width,
            height,
            bits,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn at(&self, index: usize) -> bool {
        self.bits[index]
    }

    #[inline]
    pub fn set(&mut self, index: usize, value: bool) {
        self.bits[index] = value;
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Linear indices of the set pixels, ascending.
    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !a || b)
    }

    pub fn intersects(&self, other: &Mask) -> bool {
        self.bits.iter().zip(&other.bits).any(|(&a, &b)| a && b)
    }

    pub fn and(&self, other: &Mask) -> Mask {
        let bits = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(&a, &b)| a && b)
            .collect();
        Mask { bits, ..*self }
    }

    pub fn and_not(&self, other: &Mask) -> Mask {
        let bits = self
            .bits
            .iter()
            .zip(&other.bits)
            .map(|(&a, &b)| a && !b)
            .collect();
        Mask { bits, ..*self }
    }

    fn check_plane(&self, plane: &ImagePlane, what: &str) -> Result<()> {
        if self.width != plane.width || self.height != plane.height {
            return Err(Error::InvalidInput(format!(
                "{what} is {}x{}, plane is {}x{}",
                self.width, self.height, plane.width, plane.height
            )));
        }
        Ok(())
    }
}

/// Image intensities under `n` single-light exposures, one layer per light.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservationStack {
    plane: ImagePlane,
    layers: Vec<Vec<f64>>,
}

impl ObservationStack {
    pub fn new(plane: ImagePlane, layers: Vec<Vec<f64>>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidInput(
                "observation stack has no layers".into(),
            ));
        }
        for (j, layer) in layers.iter().enumerate() {
            if layer.len() != plane.len() {
                return Err(Error::InvalidInput(format!(
                    "layer {j} has {} pixels, expected {}",
                    layer.len(),
                    plane.len()
                )));
            }
            if let Some(v) = layer.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
                return Err(Error::InvalidInput(format!(
                    "layer {j} holds an invalid intensity {v}"
                )));
            }
        }
        Ok(Self { plane, layers })
    }

    pub fn plane(&self) -> &ImagePlane {
        &self.plane
    }

    pub fn n_lights(&self) -> usize {
        self.layers.len()
    }

    pub fn layers(&self) -> &[Vec<f64>] {
        &self.layers
    }

    pub fn layer(&self, light: usize) -> &[f64] {
        &self.layers[light]
    }

    #[inline]
    pub fn intensity(&self, pixel: usize, light: usize) -> f64 {
        self.layers[light][pixel]
    }

    /// All `n` intensities of one pixel.
    pub fn pixel(&self, pixel: usize) -> Vec<f64> {
        self.layers.iter().map(|l| l[pixel]).collect()
    }

    pub fn max(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|l| l.iter().copied())
            .fold(0.0, f64::max)
    }

    /// Returns a copy with every intensity multiplied by `k`.
    pub fn scaled(&self, k: f64) -> Result<Self> {
        let layers = self
            .layers
            .iter()
            .map(|l| l.iter().map(|v| v * k).collect())
            .collect();
        Self::new(self.plane, layers)
    }
}

/// Divide every intensity by the global maximum over all layers.
pub fn normalize_observations(raw: &ObservationStack) -> Result<ObservationStack> {
    let max = raw.max();
    if max <= 0.0 {
        return Err(Error::AllZeroInput);
    }
    let layers = raw
        .layers
        .iter()
        .map(|l| l.iter().map(|v| v / max).collect())
        .collect();
    ObservationStack::new(raw.plane, layers)
}

/// Approximate surface supplying normals `N`, positions `V` and the region
/// masks. `smooth` and `hairy` are disjoint subsets of `recon`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProxyGeometry {
    plane: ImagePlane,
    normals: Vec<Vec3>,
    positions: Vec<Vec3>,
    recon_mask: Mask,
    smooth_mask: Mask,
    hairy_mask: Mask,
}

impl ProxyGeometry {
    pub fn new(
        plane: ImagePlane,
        normals: Vec<Vec3>,
        positions: Vec<Vec3>,
        recon_mask: Mask,
        smooth_mask: Mask,
        hairy_mask: Mask,
    ) -> Result<Self> {
        if normals.len() != plane.len() || positions.len() != plane.len() {
            return Err(Error::InvalidInput(
                "proxy normal/position maps do not match the image plane".into(),
            ));
        }
        recon_mask.check_plane(&plane, "recon mask")?;
        smooth_mask.check_plane(&plane, "smooth mask")?;
        hairy_mask.check_plane(&plane, "hairy mask")?;
        if !smooth_mask.is_subset_of(&recon_mask) {
            return Err(Error::InvalidInput(
                "smooth mask leaves the recon mask".into(),
            ));
        }
        if !hairy_mask.is_subset_of(&recon_mask) {
            return Err(Error::InvalidInput(
                "hairy mask leaves the recon mask".into(),
            ));
        }
        if smooth_mask.intersects(&hairy_mask) {
            return Err(Error::InvalidInput("smooth and hairy masks overlap".into()));
        }
        for i in recon_mask.indices() {
            let n = normals[i];
            if !((n.norm() - 1.0).abs() <= UNIT_NORMAL_TOL) {
                let (x, y) = plane.coords(i);
                return Err(Error::InvalidInput(format!(
                    "proxy normal at ({x}, {y}) is not unit length: {n:?}"
                )));
            }
            if !positions[i].iter().all(|v| v.is_finite()) {
                let (x, y) = plane.coords(i);
                return Err(Error::InvalidInput(format!(
                    "proxy position at ({x}, {y}) is not finite"
                )));
            }
        }
        Ok(Self {
            plane,
            normals,
            positions,
            recon_mask,
            smooth_mask,
            hairy_mask,
        })
    }

    pub fn plane(&self) -> &ImagePlane {
        &self.plane
    }
    pub fn normals(&self) -> &[Vec3] {
        &self.normals
    }
    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }
    pub fn recon_mask(&self) -> &Mask {
        &self.recon_mask
    }
    pub fn smooth_mask(&self) -> &Mask {
        &self.smooth_mask
    }
    pub fn hairy_mask(&self) -> &Mask {
        &self.hairy_mask
    }

    /// Same masks and plane with new geometry.
    pub fn with_geometry(&self, normals: Vec<Vec3>, positions: Vec<Vec3>) -> Result<Self> {
        Self::new(
            self.plane,
            normals,
            positions,
            self.recon_mask.clone(),
            self.smooth_mask.clone(),
            self.hairy_mask.clone(),
        )
    }

    /// Mean depth (`z` of the positions) over the recon mask.
    pub fn mean_depth(&self) -> f64 {
        let (sum, count) = self
            .recon_mask
            .indices()
            .fold((0.0, 0usize), |(s, c), i| (s + self.positions[i].z, c + 1));
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }
}

/// Key points sampled from the smooth region: proxy geometry plus the `n`
/// observed intensities of each.
#[derive(Clone, Debug, PartialEq)]
pub struct KeyPointSet {
    pub pixels: Vec<(usize, usize)>,
    pub normals: Vec<Vec3>,
    pub positions: Vec<Vec3>,
    /// `m` rows of `n` intensities.
    pub intensities: Vec<Vec<f64>>,
}

impl KeyPointSet {
    pub fn len(&self) -> usize {
        self.normals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normals.is_empty()
    }

    pub fn n_lights(&self) -> usize {
        self.intensities.first().map_or(0, Vec::len)
    }

    pub(crate) fn check_consistent(&self) -> Result<()> {
        let m = self.len();
        if self.positions.len() != m || self.intensities.len() != m {
            return Err(Error::InvalidInput(
                "key point arrays differ in length".into(),
            ));
        }
        let n = self.n_lights();
        if self.intensities.iter().any(|row| row.len() != n) {
            return Err(Error::InvalidInput(
                "ragged key point intensity matrix".into(),
            ));
        }
        Ok(())
    }
}

/// Draw `m` key points from the smooth mask by stratified grid subsampling.
///
/// The smooth region is tiled with square cells, the cell side being the
/// largest that still yields at least `m` occupied cells. One pixel is drawn
/// from each occupied cell, then `m` cells are kept. Both draws come from a
/// ChaCha stream seeded by `seed`, so the result is a pure function of the
/// inputs. Points are returned in raster order.
pub fn sample_keypoints(
    proxy: &ProxyGeometry,
    obs: &ObservationStack,
    m: usize,
    seed: u64,
) -> Result<KeyPointSet> {
    proxy.plane.check_same(obs.plane(), "observation stack")?;
    let candidates: Vec<usize> = proxy.smooth_mask.indices().collect();
    if m == 0 || candidates.len() < m {
        return Err(Error::InsufficientSmoothRegion {
            available: candidates.len(),
            requested: m,
        });
    }
    let plane = proxy.plane;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    let mut cell = ((candidates.len() as f64 / m as f64).sqrt().floor() as usize).max(1);
    let cells = loop {
        let cols = plane.width.div_ceil(cell);
        let mut buckets: Vec<Vec<usize>> = Vec::new();
        let mut slot = std::collections::HashMap::new();
        for &i in &candidates {
            let (x, y) = plane.coords(i);
            let key = (y / cell) * cols + x / cell;
            let b = *slot.entry(key).or_insert_with(|| {
                buckets.push(Vec::new());
                buckets.len() - 1
            });
            buckets[b].push(i);
        }
        if buckets.len() >= m || cell == 1 {
            break buckets;
        }
        cell -= 1;
    };

    let mut picks: Vec<usize> = cells
        .iter()
        .map(|bucket| bucket[rng.random_range(0..bucket.len())])
        .collect();
    if picks.len() > m {
        let (chosen, _) = picks.partial_shuffle(&mut rng, m);
        picks = chosen.to_vec();
    }
    picks.sort_unstable();

    Ok(KeyPointSet {
        pixels: picks.iter().map(|&i| plane.coords(i)).collect(),
        normals: picks.iter().map(|&i| proxy.normals[i]).collect(),
        positions: picks.iter().map(|&i| proxy.positions[i]).collect(),
        intensities: picks.iter().map(|&i| obs.pixel(i)).collect(),
    })
}

/// Light positions `P` and scalar intensities `β`.
#[derive(Clone, Debug, PartialEq)]
pub struct LightRig {
    positions: Vec<Vec3>,
    intensities: Vec<f64>,
}

impl LightRig {
    pub fn new(positions: Vec<Vec3>, intensities: Vec<f64>) -> Result<Self> {
        if positions.is_empty() || positions.len() != intensities.len() {
            return Err(Error::InvalidInput(format!(
                "light rig needs matching positions and intensities, got {} and {}",
                positions.len(),
                intensities.len()
            )));
        }
        for (j, (p, &b)) in positions.iter().zip(&intensities).enumerate() {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::InvalidInput(format!("light {j} has intensity {b}")));
            }
            if !(p.z > 0.0) || !p.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidInput(format!(
                    "light {j} must lie in front of the surface (z > 0), got {p:?}"
                )));
            }
        }
        Ok(Self {
            positions,
            intensities,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensities
    }

    /// `n` points spread over the `z > 0` half-sphere of radius `radius` along
    /// a Fibonacci spiral, all with unit intensity.
    pub fn fibonacci_hemisphere(n: usize, radius: f64) -> Self {
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let positions = (0..n)
            .map(|k| {
                let z = 1.0 - (k as f64 + 0.5) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let phi = golden * k as f64;
                Vec3::new(r * phi.cos(), r * phi.sin(), z) * radius
            })
            .collect();
        Self {
            positions,
            intensities: vec![1.0; n],
        }
    }

    /// One light on the optical axis followed by `n - 1` lights evenly spaced in
    /// azimuth at the given elevation, all at distance `radius` from the origin.
    pub fn dome(n: usize, radius: f64, elevation_deg: f64, intensities: &[f64]) -> Result<Self> {
        let elev = elevation_deg.to_radians();
        let mut positions = vec![Vec3::new(0.0, 0.0, radius)];
        let ring = n.saturating_sub(1);
        for k in 0..ring {
            let az = 2.0 * std::f64::consts::PI * (k as f64 + 0.125) / ring as f64;
            positions
                .push(Vec3::new(elev.cos() * az.cos(), elev.cos() * az.sin(), elev.sin()) * radius);
        }
        positions.truncate(n);
        let intensities = if intensities.is_empty() {
            vec![1.0; n]
        } else {
            intensities.to_vec()
        };
        Self::new(positions, intensities)
    }
}

/// Depth gradients `(Gx, Gy)`. Values off the mask are `NaN`.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientField {
    pub plane: ImagePlane,
    pub gx: Vec<f64>,
    pub gy: Vec<f64>,
    pub mask: Mask,
    /// Pixels whose gradient was clamped at a grazing normal.
    pub clamped: Mask,
}

impl GradientField {
    /// Builds a field from raw maps; entries off `mask` are replaced by `NaN`.
    pub fn new(plane: ImagePlane, mut gx: Vec<f64>, mut gy: Vec<f64>, mask: Mask) -> Result<Self> {
        if gx.len() != plane.len() || gy.len() != plane.len() {
            return Err(Error::InvalidInput(
                "gradient maps do not match the plane".into(),
            ));
        }
        mask.check_plane(&plane, "gradient mask")?;
        for i in 0..plane.len() {
            if mask.at(i) {
                if !(gx[i].is_finite() && gy[i].is_finite()) {
                    return Err(Error::InvalidInput(
                        "gradient is not finite on its mask".into(),
                    ));
                }
            } else {
                gx[i] = f64::NAN;
                gy[i] = f64::NAN;
            }
        }
        Ok(Self {
            plane,
            gx,
            gy,
            mask,
            clamped: Mask::empty(plane.width, plane.height),
        })
    }
}

/// Integrated height field. Zero mean over the mask, `NaN` off it.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    pub plane: ImagePlane,
    pub depth: Vec<f64>,
    pub mask: Mask,
}

impl DepthMap {
    /// Wraps raw depths, shifting them to zero mean over the mask.
    pub fn centered(plane: ImagePlane, mut depth: Vec<f64>, mask: Mask) -> Result<Self> {
        if depth.len() != plane.len() {
            return Err(Error::InvalidInput(
                "depth map does not match the plane".into(),
            ));
        }
        mask.check_plane(&plane, "depth mask")?;
        let count = mask.count();
        if count == 0 {
            return Err(Error::SingularSystem);
        }
        let mean = mask.indices().map(|i| depth[i]).sum::<f64>() / count as f64;
        for (i, z) in depth.iter_mut().enumerate() {
            *z = if mask.at(i) { *z - mean } else { f64::NAN };
        }
        if mask.indices().any(|i| !depth[i].is_finite()) {
            return Err(Error::InvalidInput(
                "depth is not finite on its mask".into(),
            ));
        }
        Ok(Self { plane, depth, mask })
    }

    pub fn range(&self) -> f64 {
        let (lo, hi) = self
            .mask
            .indices()
            .map(|i| self.depth[i])
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), z| {
                (lo.min(z), hi.max(z))
            });
        hi - lo
    }
}

/// Unit normals over a mask; zero vectors off it.
#[derive(Clone, Debug, PartialEq)]
pub struct NormalMap {
    pub plane: ImagePlane,
    pub normals: Vec<Vec3>,
    pub mask: Mask,
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn plane(w: usize, h: usize) -> ImagePlane {
        ImagePlane::new(w, h, 1.0).unwrap()
    }

    fn flat_proxy(w: usize, h: usize, smooth: Mask) -> ProxyGeometry {
        let p = plane(w, h);
        ProxyGeometry::new(
            p,
            vec![Vec3::z(); p.len()],
            (0..p.len())
                .map(|i| {
                    let (x, y) = p.coords(i);
                    Vec3::new(x as f64, y as f64, 0.0)
                })
                .collect(),
            Mask::full(w, h),
            smooth,
            Mask::empty(w, h),
        )
        .unwrap()
    }

    fn ramp_obs(w: usize, h: usize, n: usize) -> ObservationStack {
        let layers = (0..n)
            .map(|j| {
                (0..w * h)
                    .map(|i| (i + j) as f64 / (w * h + n) as f64)
                    .collect()
            })
            .collect();
        ObservationStack::new(plane(w, h), layers).unwrap()
    }

    #[test]
    fn plane_rejects_degenerate() {
        assert!(ImagePlane::new(0, 3, 1.0).is_err());
        assert!(ImagePlane::new(3, 3, 0.0).is_err());
        let p = plane(4, 2);
        assert_eq!(p.world_xy(1.5, 0.5), (0.0, 0.0));
        assert_eq!(p.pixel_xy(0.0, 0.0), (1.5, 0.5));
    }

    #[test]
    fn normalize_scales_to_unit_max() {
        let p = plane(1, 1);
        let s = ObservationStack::new(p, vec![vec![0.2], vec![0.8]]).unwrap();
        let n = normalize_observations(&s).unwrap();
        assert_eq!(n.layer(0), &[0.25]);
        assert_eq!(n.layer(1), &[1.0]);

        let half = ObservationStack::new(p, vec![vec![0.5], vec![0.25]]).unwrap();
        let n = normalize_observations(&half).unwrap();
        assert_eq!(n.layers(), &[vec![1.0], vec![0.5]]);
        assert_eq!(normalize_observations(&n).unwrap(), n);
    }

    #[test]
    fn normalize_rejects_all_zero() {
        let s = ObservationStack::new(plane(2, 1), vec![vec![0.0, 0.0]]).unwrap();
        assert!(matches!(
            normalize_observations(&s),
            Err(Error::AllZeroInput)
        ));
    }

    #[test]
    fn stack_rejects_negative_and_nan() {
        assert!(ObservationStack::new(plane(1, 1), vec![vec![-0.1]]).is_err());
        assert!(ObservationStack::new(plane(1, 1), vec![vec![f64::NAN]]).is_err());
    }

    #[test]
    fn proxy_checks_mask_relations() {
        let p = plane(2, 1);
        let normals = vec![Vec3::z(); 2];
        let positions = vec![Vec3::zeros(); 2];
        let recon = Mask::from_bits(2, 1, vec![true, false]).unwrap();
        let outside = Mask::from_bits(2, 1, vec![false, true]).unwrap();
        let err = ProxyGeometry::new(
            p,
            normals.clone(),
            positions.clone(),
            recon.clone(),
            outside,
            Mask::empty(2, 1),
        );
        assert!(err.is_err());
        let err = ProxyGeometry::new(
            p,
            normals.clone(),
            positions.clone(),
            recon.clone(),
            recon.clone(),
            recon.clone(),
        );
        assert!(err.is_err());
        let bad_normals = vec![Vec3::new(0.0, 0.0, 2.0), Vec3::z()];
        assert!(ProxyGeometry::new(
            p,
            bad_normals,
            positions,
            recon,
            Mask::empty(2, 1),
            Mask::empty(2, 1)
        )
        .is_err());
    }

    #[test]
    fn single_candidate_keypoint() {
        let mut smooth = Mask::empty(3, 3);
        smooth.set(4, true);
        let proxy = flat_proxy(3, 3, smooth);
        let obs = ramp_obs(3, 3, 2);
        let kp = sample_keypoints(&proxy, &obs, 1, 7).unwrap();
        assert_eq!(kp.pixels, vec![(1, 1)]);
        assert_eq!(kp.normals, vec![Vec3::z()]);
        assert_eq!(kp.positions, vec![Vec3::new(1.0, 1.0, 0.0)]);
        assert_eq!(kp.intensities, vec![obs.pixel(4)]);
    }

    #[test]
    fn keypoints_deterministic_and_inside_mask() {
        let smooth = Mask::from_fn(64, 48, |x, y| (x + y) % 3 != 0 && x > 5);
        let proxy = flat_proxy(64, 48, smooth.clone());
        let obs = ramp_obs(64, 48, 5);
        let a = sample_keypoints(&proxy, &obs, 500, 3).unwrap();
        let b = sample_keypoints(&proxy, &obs, 500, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 500);
        assert!(a.pixels.iter().all(|&(x, y)| smooth.get(x, y)));
        let mut unique = a.pixels.clone();
        unique.dedup();
        assert_eq!(unique.len(), 500);
        let c = sample_keypoints(&proxy, &obs, 500, 4).unwrap();
        assert_ne!(a.pixels, c.pixels);
    }

    #[test]
    fn keypoints_require_population() {
        let mut smooth = Mask::empty(3, 3);
        smooth.set(0, true);
        let proxy = flat_proxy(3, 3, smooth);
        let obs = ramp_obs(3, 3, 1);
        assert!(matches!(
            sample_keypoints(&proxy, &obs, 2, 0),
            Err(Error::InsufficientSmoothRegion {
                available: 1,
                requested: 2
            })
        ));
    }

    #[test]
    fn keypoints_cover_the_region() {
        // Stratification: every quadrant of a full mask gets key points.
        let proxy = flat_proxy(40, 40, Mask::full(40, 40));
        let obs = ramp_obs(40, 40, 1);
        let kp = sample_keypoints(&proxy, &obs, 100, 11).unwrap();
        for (qx, qy) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
            let hits = kp
                .pixels
                .iter()
                .filter(|&&(x, y)| x / 20 == qx && y / 20 == qy)
                .count();
            assert!(hits >= 15, "quadrant ({qx},{qy}) got {hits}");
        }
    }

    #[test]
    fn fibonacci_rig_is_on_the_half_sphere() {
        let rig = LightRig::fibonacci_hemisphere(5, 2.0);
        for p in rig.positions() {
            assert!((p.norm() - 2.0).abs() < 1e-12);
            assert!(p.z > 0.0);
        }
        assert_eq!(rig.intensities(), &[1.0; 5]);
    }

    #[test]
    fn rig_validation() {
        assert!(LightRig::new(vec![Vec3::new(0.0, 0.0, -1.0)], vec![1.0]).is_err());
        assert!(LightRig::new(vec![Vec3::z()], vec![0.0]).is_err());
        assert!(LightRig::new(vec![Vec3::z()], vec![1.0, 2.0]).is_err());
    }

    #[test]
    fn depth_map_is_centered() {
        let p = plane(3, 1);
        let mask = Mask::from_bits(3, 1, vec![true, true, false]).unwrap();
        let d = DepthMap::centered(p, vec![1.0, 3.0, 100.0], mask).unwrap();
        assert_eq!(d.depth[0], -1.0);
        assert_eq!(d.depth[1], 1.0);
        assert!(d.depth[2].is_nan());
        assert_eq!(d.range(), 2.0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn centering_ignores_constant_offsets(
            values in prop::collection::vec(-10.0f64..10.0, 30),
            offset in -100.0f64..100.0,
        ) {
            let plane = ImagePlane::new(6, 5, 1.0).unwrap();
            let mask = Mask::from_fn(6, 5, |x, y| x != y);
            let a = DepthMap::centered(plane, values.clone(), mask.clone()).unwrap();
            let shifted = values.iter().map(|v| v + offset).collect();
            let b = DepthMap::centered(plane, shifted, mask.clone()).unwrap();
            for i in mask.indices() {
                prop_assert!((a.depth[i] - b.depth[i]).abs() < 1e-9);
            }
        }

        #[test]
        fn keypoint_sampling_is_pure(seed in any::<u64>(), m in 1usize..40) {
            let proxy = flat_proxy(12, 10, Mask::from_fn(12, 10, |x, _| x > 2));
            let obs = ramp_obs(12, 10, 3);
            let a = sample_keypoints(&proxy, &obs, m, seed).unwrap();
            let b = sample_keypoints(&proxy, &obs, m, seed).unwrap();
            prop_assert_eq!(a.pixels, b.pixels);
            prop_assert_eq!(a.intensities, b.intensities);
        }
    }
}
