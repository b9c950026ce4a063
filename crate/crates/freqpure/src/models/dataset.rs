//! Synthetic labeled image dataset.
//!
//! Each class is defined by two redundant low-frequency cues: the orientation
//! of a sinusoidal grating and the angular position of a bright Gaussian blob
//! on a ring. Per-image latent draws (grating phase and amplitude, blob
//! angle/radius jitter, blob amplitude) keep samples within a class varied
//! while the class identity stays linearly visible at low frequencies — so a
//! small CNN separates the classes and the content survives diffusion-based
//! denoising.

use crate::error::{Error, Result};
use crate::image::{ImageBatch, RangeTag};
use crate::scalar::Scalar;
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Shape, class count, split sizes, and seed of the generated dataset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyDatasetSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub class_count: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
}

impl Default for ToyDatasetSpec {
    fn default() -> Self {
        ToyDatasetSpec {
            channels: 1,
            height: 32,
            width: 32,
            class_count: 10,
            train: 4000,
            val: 500,
            test: 2000,
            seed: 7,
        }
    }
}

impl ToyDatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.channels != 1 {
            return Err(Error::invalid(format!(
                "toy generator draws single-channel images, got {} channels",
                self.channels
            )));
        }
        if self.height < 8 || self.width < 8 {
            return Err(Error::invalid(format!(
                "images must be at least 8x8, got {}x{}",
                self.height, self.width
            )));
        }
        if self.height % 4 != 0 || self.width % 4 != 0 {
            return Err(Error::invalid(format!(
                "height and width must be divisible by 4 (two 2x poolings), got {}x{}",
                self.height, self.width
            )));
        }
        if self.class_count < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 classes, got {}",
                self.class_count
            )));
        }
        if self.train == 0 || self.val == 0 || self.test == 0 {
            return Err(Error::invalid("every split must be non-empty"));
        }
        Ok(())
    }
}

/// Images plus integer labels, one per image.
#[derive(Debug, Clone)]
pub struct LabeledBatch<T> {
    pub images: ImageBatch<T>,
    pub labels: Vec<usize>,
}

impl<T: Scalar> LabeledBatch<T> {
    /// Copies out the rows at `indices` (repeats allowed).
    pub fn select(&self, indices: &[usize]) -> Result<LabeledBatch<T>> {
        let (b, c, h, w) = self.images.dims();
        if let Some(&bad) = indices.iter().find(|&&i| i >= b) {
            return Err(Error::invalid(format!(
                "index {bad} out of range for batch of {b}"
            )));
        }
        let mut data = Array4::zeros((indices.len(), c, h, w));
        let mut labels = Vec::with_capacity(indices.len());
        for (row, &i) in indices.iter().enumerate() {
            data.index_axis_mut(ndarray::Axis(0), row)
                .assign(&self.images.data().index_axis(ndarray::Axis(0), i));
            labels.push(self.labels[i]);
        }
        Ok(LabeledBatch {
            images: ImageBatch::new(data, self.images.range_tag())?,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Train/validation/test splits drawn from disjoint random streams.
#[derive(Debug, Clone)]
pub struct ToyDataset<T> {
    pub spec: ToyDatasetSpec,
    pub train: LabeledBatch<T>,
    pub val: LabeledBatch<T>,
    pub test: LabeledBatch<T>,
}

/// Latent draws for one image, in fixed stream order.
struct ImageLatents {
    grating_phase: f64,
    grating_amp: f64,
    blob_angle_jitter: f64,
    blob_radius_jitter: f64,
    blob_amp: f64,
}

impl ImageLatents {
    fn draw(rng: &mut ChaCha8Rng) -> Self {
        ImageLatents {
            grating_phase: rng.random_range(0.0..2.0 * PI),
            grating_amp: rng.random_range(0.18..0.28),
            blob_angle_jitter: rng.random_range(-0.15..0.15),
            blob_radius_jitter: rng.random_range(-0.03..0.03),
            blob_amp: rng.random_range(0.28..0.40),
        }
    }
}

/// Cycles of the grating across the image diagonal-normalized coordinates.
const GRATING_CYCLES: f64 = 3.0;
/// Gray level everything is painted over.
const BASE_LEVEL: f64 = 0.45;
/// Blob ring radius and width, as fractions of the short image side.
const BLOB_RING_RADIUS: f64 = 0.30;
const BLOB_SIGMA: f64 = 0.08;

fn render_image<T: Scalar>(
    out: &mut ndarray::ArrayViewMut2<'_, T>,
    spec: &ToyDatasetSpec,
    label: usize,
    lat: &ImageLatents,
) {
    let (h, w) = (spec.height, spec.width);
    let k = spec.class_count as f64;
    let side = h.min(w) as f64;
    // Grating orientation: classes evenly spaced over half a turn.
    let theta = PI * label as f64 / k;
    let (cos_t, sin_t) = (theta.cos(), theta.sin());
    // Blob center: classes evenly spaced around a full ring.
    let blob_angle = 2.0 * PI * label as f64 / k + lat.blob_angle_jitter;
    let radius = side * (BLOB_RING_RADIUS + lat.blob_radius_jitter);
    let cx = w as f64 / 2.0 + radius * blob_angle.cos();
    let cy = h as f64 / 2.0 + radius * blob_angle.sin();
    let sigma = BLOB_SIGMA * side;
    let inv_two_sigma_sq = 1.0 / (2.0 * sigma * sigma);
    for y in 0..h {
        let py = y as f64 + 0.5;
        let v = py / h as f64 - 0.5;
        for x in 0..w {
            let px = x as f64 + 0.5;
            let u = px / w as f64 - 0.5;
            let projection = u * cos_t + v * sin_t;
            let grating =
                lat.grating_amp * (2.0 * PI * GRATING_CYCLES * projection + lat.grating_phase).sin();
            let d2 = (px - cx) * (px - cx) + (py - cy) * (py - cy);
            let blob = lat.blob_amp * (-d2 * inv_two_sigma_sq).exp();
            let value = (BASE_LEVEL + grating + blob).clamp(0.0, 1.0);
            out[[y, x]] = T::from_f64_c(value);
        }
    }
}

fn generate_split<T: Scalar>(
    spec: &ToyDatasetSpec,
    count: usize,
    stream: u64,
) -> Result<LabeledBatch<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let mut data = Array4::zeros((count, spec.channels, spec.height, spec.width));
    let mut labels = Vec::with_capacity(count);
    for i in 0..count {
        // Round-robin labels keep every split exactly class-balanced.
        let label = i % spec.class_count;
        let lat = ImageLatents::draw(&mut rng);
        let mut view = data
            .index_axis_mut(ndarray::Axis(0), i)
            .index_axis_move(ndarray::Axis(0), 0);
        render_image(&mut view, spec, label, &lat);
        labels.push(label);
    }
    Ok(LabeledBatch {
        images: ImageBatch::new(data, RangeTag::Unit)?,
        labels,
    })
}

/// Generates the full dataset. Each split reads an independent stream of the
/// seeded generator, so splits are disjoint draws and any one split can be
/// regenerated without the others.
pub fn generate_toy_dataset<T: Scalar>(spec: &ToyDatasetSpec) -> Result<ToyDataset<T>> {
    spec.validate()?;
    Ok(ToyDataset {
        spec: *spec,
        train: generate_split(spec, spec.train, 0)?,
        val: generate_split(spec, spec.val, 1)?,
        test: generate_split(spec, spec.test, 2)?,
    })
}
