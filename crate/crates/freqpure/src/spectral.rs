//! Per-channel 2-D DFT decomposition of image batches into magnitude and
//! phase, the symmetry projection that keeps perturbed spectra real-valued,
//! and radial log-energy histograms.
//!
//! Conventions (fixed across the crate):
//! * forward transform is unnormalized, the inverse carries the `1/(H*W)`
//!   factor;
//! * each channel is transformed independently;
//! * phase lies in `(-pi, pi]`.

use crate::error::{Error, Result};
use crate::image::{ImageBatch, RangeTag};
use crate::scalar::Scalar;
use ndarray::{Array4, ArrayView2, ArrayViewMut2};
use num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use std::sync::Arc;

/// Magnitude/phase split of a batch spectrum, axes `(batch, c, u, v)`.
#[derive(Debug, Clone)]
pub struct SpectralDecomposition<T> {
    /// Nonnegative spectral magnitudes.
    pub magnitude: Array4<T>,
    /// Phases in `(-pi, pi]`.
    pub phase: Array4<T>,
}

/// Radial histogram of spectral log-energy over annuli of normalized
/// frequency radius `[0, sqrt(2)/2]`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpectrumHistogram<T> {
    /// `(bin-center radius, mean log(1 + |S|^2))` pairs, radius increasing.
    pub radial_bins: Vec<(T, T)>,
}

/// Planned forward+inverse 2-D FFTs for one `(H, W)` size.
///
/// Reused across a batch (and across attack iterations) so twiddle tables are
/// built once.
pub(crate) struct FftPair<T: Scalar> {
    h: usize,
    w: usize,
    fwd_row: Arc<dyn Fft<T>>,
    fwd_col: Arc<dyn Fft<T>>,
    inv_row: Arc<dyn Fft<T>>,
    inv_col: Arc<dyn Fft<T>>,
    scratch: Vec<Complex<T>>,
    transpose: Vec<Complex<T>>,
}

impl<T: Scalar> FftPair<T> {
    pub(crate) fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        let fwd_row = planner.plan_fft_forward(w);
        let fwd_col = planner.plan_fft_forward(h);
        let inv_row = planner.plan_fft_inverse(w);
        let inv_col = planner.plan_fft_inverse(h);
        let scratch_len = fwd_row
            .get_inplace_scratch_len()
            .max(fwd_col.get_inplace_scratch_len())
            .max(inv_row.get_inplace_scratch_len())
            .max(inv_col.get_inplace_scratch_len());
        FftPair {
            h,
            w,
            fwd_row,
            fwd_col,
            inv_row,
            inv_col,
            scratch: vec![Complex::new(T::zero(), T::zero()); scratch_len],
            transpose: vec![Complex::new(T::zero(), T::zero()); h * w],
        }
    }

    /// In-place 2-D pass over a row-major `h*w` buffer: rows, then columns
    /// (via transpose), then back to row-major layout.
    fn pass(&mut self, buf: &mut [Complex<T>], row: Arc<dyn Fft<T>>, col: Arc<dyn Fft<T>>) {
        debug_assert_eq!(buf.len(), self.h * self.w);
        row.process_with_scratch(buf, &mut self.scratch);
        for y in 0..self.h {
            for x in 0..self.w {
                self.transpose[x * self.h + y] = buf[y * self.w + x];
            }
        }
        col.process_with_scratch(&mut self.transpose, &mut self.scratch);
        for x in 0..self.w {
            for y in 0..self.h {
                buf[y * self.w + x] = self.transpose[x * self.h + y];
            }
        }
    }

    /// Unnormalized forward DFT of a real field.
    pub(crate) fn forward(&mut self, field: ArrayView2<T>) -> Vec<Complex<T>> {
        let mut buf: Vec<Complex<T>> = field.iter().map(|&v| Complex::new(v, T::zero())).collect();
        self.pass(&mut buf, self.fwd_row.clone(), self.fwd_col.clone());
        buf
    }

    /// Inverse DFT with the `1/(h*w)` normalization, in place.
    pub(crate) fn inverse(&mut self, buf: &mut [Complex<T>]) {
        self.pass(buf, self.inv_row.clone(), self.inv_col.clone());
        let scale = T::one() / T::from_usize(self.h * self.w).unwrap();
        for v in buf.iter_mut() {
            *v = *v * scale;
        }
    }
}

/// Splits a batch into per-channel spectral magnitude and phase.
///
/// Errors on non-finite input (checked at `ImageBatch` construction; repeated
/// here for tensors mutated in place since).
pub fn decompose<T: Scalar>(x: &ImageBatch<T>) -> Result<SpectralDecomposition<T>> {
    let (b, c, h, w) = x.dims();
    if x.data().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            context: "decompose input".into(),
        });
    }
    let mut fft = FftPair::new(h, w);
    let mut magnitude = Array4::zeros((b, c, h, w));
    let mut phase = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            let spec = fft.forward(x.data().index_axis(ndarray::Axis(0), bi).index_axis(ndarray::Axis(0), ci));
            let mut mslice = magnitude.index_axis_mut(ndarray::Axis(0), bi);
            let mut mslice = mslice.index_axis_mut(ndarray::Axis(0), ci);
            let mut pslice = phase.index_axis_mut(ndarray::Axis(0), bi);
            let mut pslice = pslice.index_axis_mut(ndarray::Axis(0), ci);
            write_polar(&spec, &mut mslice, &mut pslice, w);
        }
    }
    Ok(SpectralDecomposition { magnitude, phase })
}

fn write_polar<T: Scalar>(
    spec: &[Complex<T>],
    mag: &mut ArrayViewMut2<T>,
    phase: &mut ArrayViewMut2<T>,
    w: usize,
) {
    let pi = T::from_f64_c(std::f64::consts::PI);
    for (idx, s) in spec.iter().enumerate() {
        let (u, v) = (idx / w, idx % w);
        mag[[u, v]] = s.norm();
        let mut p = s.im.atan2(s.re);
        // atan2 yields [-pi, pi]; store in (-pi, pi].
        if p == -pi {
            p = pi;
        }
        phase[[u, v]] = p;
    }
}

/// Rebuilds the spatial batch from magnitude and phase.
///
/// Returns the real part together with the largest absolute imaginary
/// residual of the inverse transform (nonzero when the spectrum is not
/// Hermitian-symmetric). Residual reporting replaces failure here.
pub fn recompose<T: Scalar>(d: &SpectralDecomposition<T>) -> Result<(Array4<T>, T)> {
    let shape = d.magnitude.dim();
    if d.phase.dim() != shape {
        return Err(Error::shape(d.magnitude.shape(), d.phase.shape()));
    }
    let (b, c, h, w) = shape;
    let mut fft = FftPair::new(h, w);
    let mut out = Array4::zeros(shape);
    let mut residual = T::zero();
    let mut buf = vec![Complex::new(T::zero(), T::zero()); h * w];
    for bi in 0..b {
        for ci in 0..c {
            for u in 0..h {
                for v in 0..w {
                    let m = d.magnitude[[bi, ci, u, v]];
                    let p = d.phase[[bi, ci, u, v]];
                    buf[u * w + v] = Complex::new(m * p.cos(), m * p.sin());
                }
            }
            fft.inverse(&mut buf);
            for u in 0..h {
                for v in 0..w {
                    let z = buf[u * w + v];
                    out[[bi, ci, u, v]] = z.re;
                    residual = residual.max(z.im.abs());
                }
            }
        }
    }
    Ok((out, residual))
}

/// Index of the point-reflected bin `(-u mod h, -v mod w)`.
#[inline]
pub(crate) fn reflect(u: usize, v: usize, h: usize, w: usize) -> (usize, usize) {
    ((h - u) % h, (w - v) % w)
}

/// Projects a multiplicative magnitude perturbation onto even symmetry and an
/// additive phase perturbation onto odd symmetry under point reflection, so
/// that perturbed spectra of real images stay Hermitian-symmetric.
///
/// Self-conjugate bins (DC and, for even axes, Nyquist intersections) end up
/// with zero phase perturbation automatically under the odd projection.
pub fn symmetrize<T: Scalar>(
    delta_mag: &Array4<T>,
    delta_phase: &Array4<T>,
) -> Result<(Array4<T>, Array4<T>)> {
    if delta_mag.dim() != delta_phase.dim() {
        return Err(Error::shape(delta_mag.shape(), delta_phase.shape()));
    }
    let (b, c, h, w) = delta_mag.dim();
    let half = T::from_f64_c(0.5);
    let mut mag = delta_mag.clone();
    let mut phase = delta_phase.clone();
    for bi in 0..b {
        for ci in 0..c {
            for u in 0..h {
                for v in 0..w {
                    let (ru, rv) = reflect(u, v, h, w);
                    if (u, v) > (ru, rv) {
                        continue; // pair already handled from its mirror
                    }
                    let m_a = delta_mag[[bi, ci, u, v]];
                    let m_b = delta_mag[[bi, ci, ru, rv]];
                    let even = half * (m_a + m_b);
                    mag[[bi, ci, u, v]] = even;
                    mag[[bi, ci, ru, rv]] = even;
                    let p_a = delta_phase[[bi, ci, u, v]];
                    let p_b = delta_phase[[bi, ci, ru, rv]];
                    let odd = half * (p_a - p_b);
                    phase[[bi, ci, u, v]] = odd;
                    phase[[bi, ci, ru, rv]] = -odd;
                    if (u, v) == (ru, rv) {
                        phase[[bi, ci, u, v]] = T::zero();
                    }
                }
            }
        }
    }
    Ok((mag, phase))
}

/// Signed normalized frequency of index `i` on an axis of length `n`,
/// in cycles per sample: `(-0.5, 0.5]`.
#[inline]
fn signed_freq<T: Scalar>(i: usize, n: usize) -> T {
    let half = n / 2;
    let signed = if i <= half {
        i as f64
    } else {
        i as f64 - n as f64
    };
    T::from_f64_c(signed / n as f64)
}

/// Radial histogram of `log(1 + |S|^2)` over `bins` uniform annuli of
/// normalized frequency radius in `[0, sqrt(2)/2]`, with DC in the innermost
/// annulus. Channel values pool into their item's histogram; the returned
/// histogram is the mean over batch items, so it is invariant to batch order.
pub fn radial_spectrum<T: Scalar>(
    perturbation: &ImageBatch<T>,
    bins: usize,
) -> Result<SpectrumHistogram<T>> {
    if bins < 2 {
        return Err(Error::invalid(format!(
            "radial histogram needs at least 2 bins, got {bins}"
        )));
    }
    let (b, c, h, w) = perturbation.dims();
    let r_max = std::f64::consts::SQRT_2 / 2.0;
    let mut fft = FftPair::new(h, w);
    // Precompute each bin's membership once; it only depends on (h, w, bins).
    let mut bin_of = vec![0usize; h * w];
    let mut counts = vec![0usize; bins];
    for u in 0..h {
        for v in 0..w {
            let fu = signed_freq::<f64>(u, h);
            let fv = signed_freq::<f64>(v, w);
            let r = (fu * fu + fv * fv).sqrt();
            let idx = ((r / r_max) * bins as f64).floor() as usize;
            let idx = idx.min(bins - 1);
            bin_of[u * w + v] = idx;
            counts[idx] += 1;
        }
    }
    let mut pooled = vec![T::zero(); bins];
    for bi in 0..b {
        let mut item = vec![T::zero(); bins];
        for ci in 0..c {
            let spec = fft.forward(
                perturbation
                    .data()
                    .index_axis(ndarray::Axis(0), bi)
                    .index_axis(ndarray::Axis(0), ci),
            );
            for (idx, s) in spec.iter().enumerate() {
                let e = (T::one() + s.norm_sqr()).ln();
                item[bin_of[idx]] += e;
            }
        }
        for (k, v) in item.iter().enumerate() {
            if counts[k] > 0 {
                pooled[k] += *v / T::from_usize(counts[k] * c).unwrap();
            }
        }
    }
    let inv_b = T::one() / T::from_usize(b).unwrap();
    let width = r_max / bins as f64;
    let radial_bins = (0..bins)
        .map(|k| {
            let center = T::from_f64_c((k as f64 + 0.5) * width);
            (center, pooled[k] * inv_b)
        })
        .collect();
    Ok(SpectrumHistogram { radial_bins })
}

/// Convenience: batch-pooled histogram of `x_adv - x`.
pub fn perturbation_spectrum<T: Scalar>(
    x_adv: &ImageBatch<T>,
    x: &ImageBatch<T>,
    bins: usize,
) -> Result<SpectrumHistogram<T>> {
    if x_adv.dims() != x.dims() {
        return Err(Error::shape(x.data().shape(), x_adv.data().shape()));
    }
    let diff = ImageBatch::new(x_adv.data() - x.data(), RangeTag::Signed)?;
    radial_spectrum(&diff, bins)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array4, Axis};
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_unit_batch(
        rng: &mut ChaCha8Rng,
        b: usize,
        c: usize,
        h: usize,
        w: usize,
    ) -> ImageBatch<f64> {
        let data = Array4::from_shape_fn((b, c, h, w), |_| rng.random::<f64>());
        ImageBatch::new(data, RangeTag::Unit).unwrap()
    }

    #[test]
    fn round_trip_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(h, w) in &[(8, 8), (13, 7), (16, 32)] {
            let x = random_unit_batch(&mut rng, 2, 2, h, w);
            let d = decompose(&x).unwrap();
            let (y, residual) = recompose(&d).unwrap();
            let mut max_err = 0.0f64;
            for (a, b) in x.data().iter().zip(y.iter()) {
                max_err = max_err.max((a - b).abs());
            }
            assert!(max_err < 1e-10, "round trip error {max_err} at {h}x{w}");
            assert!(residual < 1e-10, "imag residual {residual}");
        }
    }

    #[test]
    fn parseval_against_direct_summation() {
        // Oracle: spatial-domain energy summed directly must equal
        // spectral energy divided by H*W under the unnormalized-forward
        // convention.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_unit_batch(&mut rng, 1, 1, 8, 8);
        let spatial: f64 = x.data().iter().map(|v| v * v).sum();
        let d = decompose(&x).unwrap();
        let spectral: f64 = d.magnitude.iter().map(|m| m * m).sum::<f64>() / 64.0;
        let rel = (spatial - spectral).abs() / spatial;
        assert!(rel < 1e-12, "Parseval relative error {rel}");
    }

    #[test]
    fn constant_image_concentrates_at_dc() {
        let c = 0.37f64;
        let data = Array4::from_elem((1, 1, 8, 8), c);
        let x = ImageBatch::new(data, RangeTag::Unit).unwrap();
        let d = decompose(&x).unwrap();
        assert!((d.magnitude[[0, 0, 0, 0]] - 64.0 * c).abs() < 1e-10);
        assert!(d.phase[[0, 0, 0, 0]].abs() < 1e-12);
        for u in 0..8 {
            for v in 0..8 {
                if (u, v) != (0, 0) {
                    assert!(d.magnitude[[0, 0, u, v]] < 1e-10);
                }
            }
        }
    }

    #[test]
    fn unit_impulse_has_flat_magnitude_and_zero_phase() {
        let mut data = Array4::<f64>::zeros((1, 1, 8, 8));
        data[[0, 0, 0, 0]] = 1.0;
        let x = ImageBatch::new(data, RangeTag::Unit).unwrap();
        let d = decompose(&x).unwrap();
        for u in 0..8 {
            for v in 0..8 {
                assert!((d.magnitude[[0, 0, u, v]] - 1.0).abs() < 1e-12);
                assert!(d.phase[[0, 0, u, v]].abs() < 1e-12);
            }
        }
    }

    #[test]
    fn phase_range_and_hermitian_magnitude() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_unit_batch(&mut rng, 1, 1, 6, 10);
        let d = decompose(&x).unwrap();
        let pi = std::f64::consts::PI;
        for u in 0..6 {
            for v in 0..10 {
                let p = d.phase[[0, 0, u, v]];
                assert!(p > -pi && p <= pi, "phase {p} outside (-pi, pi]");
                let (ru, rv) = reflect(u, v, 6, 10);
                let m = d.magnitude[[0, 0, u, v]];
                let mr = d.magnitude[[0, 0, ru, rv]];
                assert!((m - mr).abs() < 1e-9, "magnitude not even");
            }
        }
    }

    #[test]
    fn asymmetric_spectrum_reports_residual_but_returns_real_part() {
        let mut magnitude = Array4::<f64>::zeros((1, 1, 4, 4));
        let mut phase = Array4::<f64>::zeros((1, 1, 4, 4));
        // A lone off-axis bin with no conjugate partner.
        magnitude[[0, 0, 1, 2]] = 3.0;
        phase[[0, 0, 1, 2]] = 0.9;
        let d = SpectralDecomposition { magnitude, phase };
        let (x, residual) = recompose(&d).unwrap();
        assert!(residual > 1e-3, "expected a visible imaginary residual");
        assert!(x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn symmetrize_is_idempotent_and_fixes_symmetric_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let dm = Array4::from_shape_fn((1, 1, 8, 6), |_| rng.random::<f64>() * 2.0);
            let dp = Array4::from_shape_fn((1, 1, 8, 6), |_| rng.random::<f64>() - 0.5);
            let (m1, p1) = symmetrize(&dm, &dp).unwrap();
            let (m2, p2) = symmetrize(&m1, &p1).unwrap();
            for (a, b) in m1.iter().zip(m2.iter()) {
                assert!((a - b).abs() <= 1e-12);
            }
            for (a, b) in p1.iter().zip(p2.iter()) {
                assert!((a - b).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn symmetrize_rejects_mismatched_shapes() {
        let dm = Array4::<f64>::zeros((1, 1, 4, 4));
        let dp = Array4::<f64>::zeros((1, 1, 4, 6));
        assert!(matches!(
            symmetrize(&dm, &dp),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn symmetrized_perturbation_keeps_reconstruction_real() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = random_unit_batch(&mut rng, 1, 1, 8, 8);
        let d = decompose(&x).unwrap();
        let dm = Array4::from_shape_fn((1, 1, 8, 8), |_| 0.5 + rng.random::<f64>());
        let dp = Array4::from_shape_fn((1, 1, 8, 8), |_| rng.random::<f64>() - 0.5);
        let (dm, dp) = symmetrize(&dm, &dp).unwrap();
        let perturbed = SpectralDecomposition {
            magnitude: &d.magnitude * &dm,
            phase: &d.phase + &dp,
        };
        let (_, residual) = recompose(&perturbed).unwrap();
        assert!(residual <= 1e-6, "residual {residual} exceeds 1e-6");
    }

    #[test]
    fn zero_perturbation_gives_zero_histogram() {
        let zeros = ImageBatch::<f64>::zeros((2, 1, 16, 16), RangeTag::Signed);
        let h = radial_spectrum(&zeros, 6).unwrap();
        for (_, e) in &h.radial_bins {
            assert_eq!(*e, 0.0);
        }
    }

    #[test]
    fn histogram_radii_are_strictly_increasing() {
        let zeros = ImageBatch::<f64>::zeros((1, 1, 12, 12), RangeTag::Signed);
        let h = radial_spectrum(&zeros, 5).unwrap();
        for pair in h.radial_bins.windows(2) {
            assert!(pair[0].0 < pair[1].0);
        }
        assert!(radial_spectrum(&zeros, 1).is_err());
    }

    #[test]
    fn white_noise_histogram_is_roughly_flat() {
        // Oracle: i.i.d. noise has a flat expected spectrum, so bin means
        // should agree within a factor of two once averaged over trials.
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let bins = 6;
        let mut acc = vec![0.0f64; bins];
        for _ in 0..10 {
            let data = Array4::from_shape_fn((1, 1, 32, 32), |_| rng.random::<f64>() - 0.5);
            let x = ImageBatch::new(data, RangeTag::Signed).unwrap();
            let h = radial_spectrum(&x, bins).unwrap();
            for (k, (_, e)) in h.radial_bins.iter().enumerate() {
                acc[k] += e / 10.0;
            }
        }
        let max = acc.iter().cloned().fold(f64::MIN, f64::max);
        let min = acc.iter().cloned().fold(f64::MAX, f64::min);
        assert!(
            max / min < 2.0,
            "white-noise bins not flat: min {min}, max {max}"
        );
    }

    #[test]
    fn sinusoid_energy_lands_in_its_annulus() {
        let h = 16;
        let w = 16;
        // Two cycles across the image: normalized radius 2/16 = 0.125.
        let data = Array4::from_shape_fn((1, 1, h, w), |(_, _, _, x)| {
            (2.0 * std::f64::consts::PI * 2.0 * x as f64 / w as f64).sin() * 0.5
        });
        let x = ImageBatch::new(data, RangeTag::Signed).unwrap();
        let bins = 6;
        let hist = radial_spectrum(&x, bins).unwrap();
        let width = std::f64::consts::SQRT_2 / 2.0 / bins as f64;
        let expected_bin = (0.125 / width).floor() as usize;
        let argmax = hist
            .radial_bins
            .iter()
            .enumerate()
            .max_by(|a, b| a.1 .1.partial_cmp(&b.1 .1).unwrap())
            .unwrap()
            .0;
        assert_eq!(argmax, expected_bin);
        assert!(expected_bin != 0, "test should target a non-DC annulus");
    }

    #[test]
    fn histogram_is_batch_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let data = Array4::from_shape_fn((3, 1, 8, 8), |_| rng.random::<f64>() - 0.5);
        let x = ImageBatch::new(data.clone(), RangeTag::Signed).unwrap();
        let mut swapped = data;
        let tmp0 = swapped.index_axis(Axis(0), 0).to_owned();
        let tmp2 = swapped.index_axis(Axis(0), 2).to_owned();
        swapped.index_axis_mut(Axis(0), 0).assign(&tmp2);
        swapped.index_axis_mut(Axis(0), 2).assign(&tmp0);
        let y = ImageBatch::new(swapped, RangeTag::Signed).unwrap();
        let hx = radial_spectrum(&x, 5).unwrap();
        let hy = radial_spectrum(&y, 5).unwrap();
        for (a, b) in hx.radial_bins.iter().zip(hy.radial_bins.iter()) {
            assert!((a.1 - b.1).abs() < 1e-12);
        }
    }
}
