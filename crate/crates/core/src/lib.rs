//! Sparse near-light photometric stereo.
//!
//! Given a handful of photographs of a surface, each lit by one nearby point
//! light, and an approximate proxy geometry, the crate
//!
//! * calibrates the light positions and intensities against the proxy
//!   ([`calibration`]),
//! * rejects shadowed lights per pixel ([`shadow`]) and recovers normals and
//!   albedo ([`normals`]),
//! * converts normals to depth gradients and removes impulse outliers in
//!   noisy regions ([`gradient_filter`]),
//! * integrates the gradients into a depth map and exports a mesh
//!   ([`integration`]),
//! * and loops the result back into calibration ([`pipeline`]).
//!
//! [`renderer`] is a forward Lambertian renderer with synthetic scenes that
//! provides ground truth for every stage.

pub mod calibration;
pub mod error;
pub mod gradient_filter;
pub mod integration;
pub mod io;
pub mod normals;
pub mod pipeline;
pub mod renderer;
pub mod shadow;
pub mod types;

pub use error::{Error, Result};
pub use types::{
    normalize_observations, sample_keypoints, DepthMap, GradientField, ImagePlane, KeyPointSet,
    LightRig, Mask, NormalMap, ObservationStack, ProxyGeometry, Vec3,
};

/// Evaluates `f` for every index in `0..n`, in parallel when the `parallel`
/// feature is on. Output order always follows the index.
pub(crate) fn par_map<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        (0..n).into_par_iter().map(f).collect()
    }
    #[cfg(not(feature = "parallel"))]
    {
        (0..n).map(f).collect()
    }
}
