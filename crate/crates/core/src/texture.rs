//! Procedural texture exemplars for small, fully reproducible experiments.
//!
//! Each exemplar is a two-color sinusoidal grating: a random orientation,
//! spatial frequency, and phase define a stripe pattern, and two random
//! palette colors are blended by the stripe intensity. Values stay in
//! [-1, 1] by construction. A dataset of exemplars can be wrapped into a
//! Gaussian-mixture prior (one component per exemplar), which gives the
//! panorama engine a cheap "texture model" with exact densities and
//! gradients.

use crate::error::{Error, Result};
use crate::grid::ImageGrid;
use crate::models::GaussianMixturePrior;
use crate::rng::{NoiseStream, StreamDomain};

/// Parameters of a procedural grating dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct TextureDatasetSpec {
    pub count: usize,
    pub h: usize,
    pub w: usize,
    pub d: usize,
    /// Stripe orientation in radians, drawn uniformly from this range.
    pub orientation_range: (f64, f64),
    /// Spatial frequency in cycles per pixel, drawn uniformly.
    pub frequency_range: (f64, f64),
    pub seed: u64,
}

impl TextureDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.count == 0 {
            return Err(Error::config("dataset.count", "must be at least 1"));
        }
        if self.h == 0 || self.w == 0 || self.d == 0 {
            return Err(Error::config("dataset.shape", "all dimensions must be positive"));
        }
        let ok_range = |(lo, hi): (f64, f64)| lo.is_finite() && hi.is_finite() && lo <= hi;
        if !ok_range(self.orientation_range) {
            return Err(Error::config("dataset.orientation", "range must be finite with lo <= hi"));
        }
        if !ok_range(self.frequency_range) || self.frequency_range.0 < 0.0 {
            return Err(Error::config(
                "dataset.frequency",
                "range must be finite, nonnegative, with lo <= hi",
            ));
        }
        Ok(())
    }
}

/// Generate the dataset. Exemplar `i` is a pure function of
/// `(spec.seed, i)` via its own counter-based stream, so datasets are
/// reproducible and order-independent.
pub fn make_texture_dataset(spec: &TextureDatasetSpec) -> Result<Vec<ImageGrid>> {
    spec.validate()?;
    let mut out = Vec::with_capacity(spec.count);
    for i in 0..spec.count {
        let mut stream = NoiseStream::new(spec.seed, StreamDomain::Texture, i as u32, 0);
        let theta = stream.next_range(spec.orientation_range.0, spec.orientation_range.1);
        let freq = stream.next_range(spec.frequency_range.0, spec.frequency_range.1);
        let phase = stream.next_range(0.0, std::f64::consts::TAU);
        let c0: Vec<f64> = (0..spec.d).map(|_| stream.next_range(-1.0, 1.0)).collect();
        let c1: Vec<f64> = (0..spec.d).map(|_| stream.next_range(-1.0, 1.0)).collect();
        let (sin_t, cos_t) = theta.sin_cos();
        out.push(ImageGrid::from_fn(spec.h, spec.w, spec.d, |y, x, c| {
            let u = x as f64 * cos_t + y as f64 * sin_t;
            let m = ((std::f64::consts::TAU * freq * u + phase).sin() + 1.0) * 0.5;
            c0[c] * (1.0 - m) + c1[c] * m
        }));
    }
    Ok(out)
}

/// Wrap a dataset into a mixture prior with one equally weighted component
/// per exemplar and a shared isotropic variance.
pub fn texture_prior(dataset: &[ImageGrid], variance: f64) -> Result<GaussianMixturePrior> {
    GaussianMixturePrior::from_grids(dataset, variance)
}
