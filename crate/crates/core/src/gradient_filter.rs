//! Normals to depth gradients, and impulse removal on gradient maps.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par_map;
use crate::types::{GradientField, Mask, NormalMap};

/// Normals with `Nz` at or below this are treated as grazing.
pub const NZ_EPS: f64 = 0.05;

/// Where the filter's mean and mean deviation are measured.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StatsScope {
    /// Over the filtered region only.
    #[default]
    Region,
    /// Over the whole gradient mask.
    Mask,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterConfig {
    /// Outlier threshold as a multiple of the mean absolute deviation.
    pub sigma: f64,
    /// Side of the square median window in pixels.
    pub window: usize,
    pub stats_scope: StatsScope,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            sigma: 5.0,
            window: 10,
            stats_scope: StatsScope::Region,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "sigma must be positive, got {}",
                self.sigma
            )));
        }
        if self.window < 2 {
            return Err(Error::InvalidInput(format!(
                "window must be at least 2, got {}",
                self.window
            )));
        }
        Ok(())
    }

    /// Inclusive offset range of the window. Even sizes extend one pixel
    /// further toward the top-left.
    pub fn offsets(&self) -> (isize, isize) {
        let w = self.window as isize;
        (-(w / 2), (w - 1) - w / 2)
    }
}

/// `Gx = -Nx/Nz`, `Gy = -Ny/Nz`. Grazing normals (`Nz <= NZ_EPS`) keep their
/// direction but get the magnitude of a normal with `Nz = NZ_EPS`, and are
/// flagged in `clamped`.
pub fn normals_to_gradients(normals: &NormalMap, mask: &Mask) -> Result<GradientField> {
    let plane = normals.plane;
    if !mask.is_subset_of(&normals.mask) {
        return Err(Error::InvalidInput(
            "gradient mask exceeds the normal map".into(),
        ));
    }
    let max_slope = (1.0 - NZ_EPS * NZ_EPS).sqrt() / NZ_EPS;
    let mut gx = vec![0.0; plane.len()];
    let mut gy = vec![0.0; plane.len()];
    let mut clamped = Mask::empty(plane.width, plane.height);
    for i in mask.indices() {
        let n = normals.normals[i];
        if n.z > NZ_EPS {
            gx[i] = -n.x / n.z;
            gy[i] = -n.y / n.z;
        } else {
            let t = n.x.hypot(n.y);
            if t > 0.0 {
                gx[i] = -n.x / t * max_slope;
                gy[i] = -n.y / t * max_slope;
            }
            clamped.set(i, true);
        }
    }
    let mut field = GradientField::new(plane, gx, gy, mask.clone())?;
    field.clamped = clamped;
    Ok(field)
}

/// Pixels of `region` whose deviation from the mean exceeds `sigma` times the
/// mean absolute deviation. Statistics are taken over `stats`.
pub fn detect_outliers(values: &[f64], stats: &Mask, region: &Mask, sigma: f64) -> Vec<bool> {
    let count = stats.count();
    let mut flags = vec![false; values.len()];
    if count == 0 {
        return flags;
    }
    let mean = stats.indices().map(|i| values[i]).sum::<f64>() / count as f64;
    let mad = stats
        .indices()
        .map(|i| (values[i] - mean).abs())
        .sum::<f64>()
        / count as f64;
    let threshold = sigma * mad;
    for i in region.indices() {
        flags[i] = (values[i] - mean).abs() > threshold;
    }
    flags
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn window_values(
    values: &[f64],
    mask: &Mask,
    x: usize,
    y: usize,
    offsets: (isize, isize),
) -> Vec<f64> {
    let (w, h) = (mask.width() as isize, mask.height() as isize);
    let mut out = Vec::new();
    for dy in offsets.0..=offsets.1 {
        let yy = y as isize + dy;
        if yy < 0 || yy >= h {
            continue;
        }
        for dx in offsets.0..=offsets.1 {
            let xx = x as isize + dx;
            if xx < 0 || xx >= w {
                continue;
            }
            let j = (yy * w + xx) as usize;
            if mask.at(j) {
                out.push(values[j]);
            }
        }
    }
    out
}

fn filter_channel(
    values: &[f64],
    field_mask: &Mask,
    region: &Mask,
    config: &FilterConfig,
) -> Vec<f64> {
    let stats = match config.stats_scope {
        StatsScope::Region => region,
        StatsScope::Mask => field_mask,
    };
    let flags = detect_outliers(values, stats, region, config.sigma);
    let offsets = config.offsets();
    let width = field_mask.width();
    par_map(values.len(), |i| {
        if !flags[i] {
            return values[i];
        }
        let mut window = window_values(values, field_mask, i % width, i / width, offsets);
        median(&mut window)
    })
}

/// Replaces impulse outliers inside `region` by the median of their window,
/// clipped to the field mask. Everything else is returned bitwise unchanged.
pub fn bidirectional_extremum_filter(
    field: &GradientField,
    region: &Mask,
    config: &FilterConfig,
) -> Result<GradientField> {
    config.validate()?;
    if region.width() != field.plane.width || region.height() != field.plane.height {
        return Err(Error::InvalidInput(
            "region does not match the gradient plane".into(),
        ));
    }
    if region.count() == 0 {
        return Err(Error::EmptyRegion);
    }
    if !region.is_subset_of(&field.mask) {
        return Err(Error::InvalidInput(
            "filter region exceeds the gradient mask".into(),
        ));
    }
    Ok(GradientField {
        plane: field.plane,
        gx: filter_channel(&field.gx, &field.mask, region, config),
        gy: filter_channel(&field.gy, &field.mask, region, config),
        mask: field.mask.clone(),
        clamped: field.clamped.clone(),
    })
}

/// Box-filter baseline: every pixel in `region` becomes the mean of its
/// window over the mask.
pub fn low_pass_filter(
    field: &GradientField,
    region: &Mask,
    window: usize,
) -> Result<GradientField> {
    let config = FilterConfig {
        window,
        ..FilterConfig::default()
    };
    config.validate()?;
    if !region.is_subset_of(&field.mask) {
        return Err(Error::InvalidInput(
            "filter region exceeds the gradient mask".into(),
        ));
    }
    let offsets = config.offsets();
    let width = field.plane.width;
    let smooth = |values: &[f64]| {
        par_map(values.len(), |i| {
            if !region.at(i) {
                return values[i];
            }
            let w = window_values(values, &field.mask, i % width, i / width, offsets);
            w.iter().sum::<f64>() / w.len() as f64
        })
    };
    Ok(GradientField {
        plane: field.plane,
        gx: smooth(&field.gx),
        gy: smooth(&field.gy),
        mask: field.mask.clone(),
        clamped: field.clamped.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{ImagePlane, Vec3};
    use proptest::prelude::*;

    fn field(w: usize, h: usize, f: impl Fn(usize, usize) -> (f64, f64)) -> GradientField {
        let plane = ImagePlane::new(w, h, 1.0).unwrap();
        let (gx, gy) = (0..plane.len()).map(|i| f(i % w, i / w)).unzip();
        GradientField::new(plane, gx, gy, Mask::full(w, h)).unwrap()
    }

    fn normal_map(normals: Vec<Vec3>) -> NormalMap {
        let n = normals.len();
        NormalMap {
            plane: ImagePlane::new(n, 1, 1.0).unwrap(),
            normals,
            mask: Mask::full(n, 1),
        }
    }

    #[test]
    fn flat_and_sloped_normals() {
        let map = normal_map(vec![Vec3::z(), Vec3::new(1.0, 0.0, 1.0).normalize()]);
        let g = normals_to_gradients(&map, &map.mask).unwrap();
        assert_eq!((g.gx[0], g.gy[0]), (0.0, 0.0));
        assert!((g.gx[1] + 1.0).abs() < 1e-12 && g.gy[1] == 0.0);
        assert_eq!(g.clamped.count(), 0);
    }

    #[test]
    fn grazing_normals_are_clamped_and_flagged() {
        let map = normal_map(vec![
            Vec3::new(0.6, 0.8, 0.0),
            Vec3::new(-1.0, 0.0, 0.01).normalize(),
        ]);
        let g = normals_to_gradients(&map, &map.mask).unwrap();
        let cap = (1.0 - NZ_EPS * NZ_EPS).sqrt() / NZ_EPS;
        assert!(g.clamped.at(0) && g.clamped.at(1));
        assert!((g.gx[0].hypot(g.gy[0]) - cap).abs() < 1e-9);
        assert!((g.gx[0] / g.gy[0] - 0.75).abs() < 1e-12);
        assert!((g.gx[1] - cap).abs() < 1e-9);
    }

    #[test]
    fn even_window_leans_top_left() {
        let c = FilterConfig::default();
        assert_eq!(c.offsets(), (-5, 4));
        let c = FilterConfig { window: 3, ..c };
        assert_eq!(c.offsets(), (-1, 1));
    }

    #[test]
    fn constant_field_is_untouched() {
        let g = field(12, 12, |_, _| (0.3, -1.0));
        let out = bidirectional_extremum_filter(&g, &g.mask, &FilterConfig::default()).unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn single_spike_is_replaced_by_zero() {
        let g = field(20, 20, |x, y| {
            if (x, y) == (7, 9) {
                (100.0, 0.0)
            } else {
                (0.0, 0.0)
            }
        });
        let out = bidirectional_extremum_filter(&g, &g.mask, &FilterConfig::default()).unwrap();
        assert!(out.gx.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gentle_sinusoid_is_bitwise_unchanged() {
        let g = field(32, 32, |x, y| {
            ((x as f64 * 0.4).sin(), (y as f64 * 0.3).cos())
        });
        let out = bidirectional_extremum_filter(&g, &g.mask, &FilterConfig::default()).unwrap();
        assert_eq!(out, g);
    }

    #[test]
    fn empty_region_is_an_error() {
        let g = field(4, 4, |_, _| (0.0, 0.0));
        assert!(matches!(
            bidirectional_extremum_filter(&g, &Mask::empty(4, 4), &FilterConfig::default()),
            Err(Error::EmptyRegion)
        ));
    }

    #[test]
    fn median_window_is_clipped_to_mask() {
        let plane = ImagePlane::new(6, 1, 1.0).unwrap();
        let mask = Mask::from_fn(6, 1, |x, _| x != 1);
        let g = GradientField::new(
            plane,
            vec![1.0, 0.0, 2.0, 50.0, 4.0, 1.0],
            vec![0.0; 6],
            mask.clone(),
        )
        .unwrap();
        let config = FilterConfig {
            sigma: 1.5,
            window: 3,
            stats_scope: StatsScope::Mask,
        };
        let out = bidirectional_extremum_filter(&g, &mask, &config).unwrap();
        // Window {2, 50, 4} -> 4.
        assert_eq!(out.gx[3], 4.0);
        assert!(out.gx[1].is_nan());
        assert_eq!(out.gx[0], 1.0);
    }

    #[test]
    fn low_pass_blurs_a_ramp_edge() {
        let g = field(16, 16, |x, y| (((x + y) % 3) as f64, 0.0));
        let out = low_pass_filter(&g, &g.mask, 10).unwrap();
        let changed = (0..g.gx.len()).filter(|&i| out.gx[i] != g.gx[i]).count();
        assert!(changed > g.gx.len() / 2);
    }

    proptest! {
        #[test]
        fn filter_is_local_and_counts_match(
            values in prop::collection::vec(-1.0f64..1.0, 64),
            spikes in prop::collection::vec((0usize..64, 20.0f64..200.0), 0..4),
            region_bits in prop::collection::vec(any::<bool>(), 64),
        ) {
            let mut values = values;
            for (i, s) in &spikes {
                values[*i] = *s;
            }
            let g = field(8, 8, |x, y| (values[y * 8 + x], 0.0));
            let region = Mask::from_bits(8, 8, region_bits).unwrap();
            prop_assume!(region.count() > 0);
            let config = FilterConfig { window: 3, ..FilterConfig::default() };
            let out = bidirectional_extremum_filter(&g, &region, &config).unwrap();
            let flagged = detect_outliers(&g.gx, &region, &region, config.sigma);
            for i in 0..64 {
                if !region.at(i) || !flagged[i] {
                    prop_assert_eq!(out.gx[i].to_bits(), g.gx[i].to_bits());
                }
            }
            // A replaced value may coincide with the original.
            let changed = (0..64).filter(|&i| out.gx[i] != g.gx[i]).count();
            prop_assert!(changed <= flagged.iter().filter(|&&f| f).count());
        }

        #[test]
        fn filter_is_idempotent_without_outliers(
            values in prop::collection::vec(-1.0f64..1.0, 100),
        ) {
            let g = field(10, 10, |x, y| (values[y * 10 + x], values[x * 10 + y]));
            let config = FilterConfig::default();
            let flagged = detect_outliers(&g.gx, &g.mask, &g.mask, config.sigma).iter().any(|&f| f)
                || detect_outliers(&g.gy, &g.mask, &g.mask, config.sigma).iter().any(|&f| f);
            prop_assume!(!flagged);
            let out = bidirectional_extremum_filter(&g, &g.mask, &config).unwrap();
            prop_assert_eq!(out, g);
        }
    }
}
