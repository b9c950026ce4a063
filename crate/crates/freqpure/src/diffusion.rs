//! Variance-preserving diffusion: the linear noise schedule, closed-form
//! forward diffusion, Euler–Maruyama reverse denoising, and the two-step
//! purification wrapper used to strip adversarial perturbations.

use crate::error::{Error, Result};
use crate::image::{ImageBatch, RangeTag};
use crate::scalar::Scalar;
use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Linear noise schedule `beta(t) = beta_min + (beta_max - beta_min) * t`
/// on `t in [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DiffusionSchedule {
    pub beta_min: f64,
    pub beta_max: f64,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        DiffusionSchedule {
            beta_min: 0.1,
            beta_max: 20.0,
        }
    }
}

impl DiffusionSchedule {
    pub fn new(beta_min: f64, beta_max: f64) -> Result<Self> {
        if !(beta_min > 0.0 && beta_max > beta_min) {
            return Err(Error::invalid(format!(
                "schedule requires 0 < beta_min < beta_max, got ({beta_min}, {beta_max})"
            )));
        }
        Ok(DiffusionSchedule { beta_min, beta_max })
    }

    fn check_t(&self, t: f64) -> Result<()> {
        if !(0.0..=1.0).contains(&t) || !t.is_finite() {
            return Err(Error::invalid(format!(
                "diffusion time must lie in [0, 1], got {t}"
            )));
        }
        Ok(())
    }

    /// Instantaneous noise rate at `t`.
    pub fn beta(&self, t: f64) -> f64 {
        self.beta_min + (self.beta_max - self.beta_min) * t
    }

    /// `\int_0^t beta(s) ds`, in closed form for the linear schedule.
    pub fn integral_beta(&self, t: f64) -> f64 {
        self.beta_min * t + 0.5 * (self.beta_max - self.beta_min) * t * t
    }

    /// Signal retention `alpha(t) = exp(-\int_0^t beta)`; `alpha(0) = 1`,
    /// strictly decreasing in `t`.
    pub fn alpha(&self, t: f64) -> Result<f64> {
        self.check_t(t)?;
        Ok((-self.integral_beta(t)).exp())
    }
}

/// Anything that can evaluate the score `∇_x log p_t(x)` on a signed-domain
/// batch at diffusion time `t`. Implementations must be deterministic and
/// safe to call concurrently.
pub trait ScoreModel<T: Scalar>: Send + Sync {
    fn evaluate(&self, x: &ImageBatch<T>, t: f64) -> Result<Array4<T>>;
}

/// Exact score of a standard normal data distribution: `s(x, t) = -x`.
/// The variance-preserving reverse process leaves `N(0, I)` invariant under
/// it, which makes it the reference oracle for the solver.
#[derive(Debug, Clone, Copy, Default)]
pub struct AnalyticGaussianScore;

impl<T: Scalar> ScoreModel<T> for AnalyticGaussianScore {
    fn evaluate(&self, x: &ImageBatch<T>, _t: f64) -> Result<Array4<T>> {
        Ok(x.data().mapv(|v| -v))
    }
}

/// Identically-zero score; reduces the reverse SDE to a linear ODE with a
/// known closed form, used to validate the integrator.
#[derive(Debug, Clone, Copy, Default)]
pub struct ZeroScore;

impl<T: Scalar> ScoreModel<T> for ZeroScore {
    fn evaluate(&self, x: &ImageBatch<T>, _t: f64) -> Result<Array4<T>> {
        Ok(Array4::zeros(x.data().dim()))
    }
}

/// Settings for purification / reverse denoising.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PurifyConfig {
    /// Diffusion depth in `(0, 1)`.
    pub t_star: f64,
    /// Positive Euler–Maruyama step size.
    pub dt: f64,
    /// Skip the noise term on the last reverse step.
    pub final_step_noiseless: bool,
    /// Seed for forward and reverse noise.
    pub seed: u64,
}

impl Default for PurifyConfig {
    fn default() -> Self {
        PurifyConfig {
            t_star: 0.15,
            dt: 1e-3,
            final_step_noiseless: true,
            seed: 0,
        }
    }
}

impl PurifyConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t_star > 0.0 && self.t_star < 1.0) {
            return Err(Error::invalid(format!(
                "t_star must lie strictly inside (0, 1), got {}",
                self.t_star
            )));
        }
        if !(self.dt > 0.0 && self.dt.is_finite()) {
            return Err(Error::invalid(format!(
                "dt must be positive and finite, got {}",
                self.dt
            )));
        }
        Ok(())
    }
}

/// Per-image noise stream: same master seed, one counter-mode stream per
/// batch index. Forward and reverse noise for an image draw from its stream
/// in a fixed order, so results do not depend on worker count.
fn image_stream(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Closed-form forward diffusion to time `t`:
/// `x(t) = sqrt(alpha_t) x + sqrt(1 - alpha_t) eps`, `eps ~ N(0, I)`.
///
/// Input must carry the signed (`[-1, 1]`) convention. The output keeps the
/// signed tag although noise may place entries outside the interval.
pub fn forward_diffuse<T: Scalar>(
    x: &ImageBatch<T>,
    schedule: &DiffusionSchedule,
    t: f64,
    seed: u64,
) -> Result<ImageBatch<T>> {
    x.require_range(RangeTag::Signed)?;
    let alpha = schedule.alpha(t)?;
    let mut rngs: Vec<ChaCha8Rng> = (0..x.batch_len()).map(|i| image_stream(seed, i)).collect();
    let out = forward_diffuse_with_streams(x, alpha, &mut rngs);
    ImageBatch::new(out, RangeTag::Signed)
}

fn forward_diffuse_with_streams<T: Scalar>(
    x: &ImageBatch<T>,
    alpha: f64,
    rngs: &mut [ChaCha8Rng],
) -> Array4<T> {
    let sqrt_a = T::from_f64_c(alpha.sqrt());
    let sqrt_1ma = T::from_f64_c((1.0 - alpha).sqrt());
    let (b, c, h, w) = x.dims();
    let per_image = c * h * w;
    let mut out = x.data().mapv(|v| sqrt_a * v);
    let flat = out.as_slice_mut().expect("standard layout");
    for (i, rng) in rngs.iter_mut().enumerate().take(b) {
        for v in flat[i * per_image..(i + 1) * per_image].iter_mut() {
            *v += sqrt_1ma * T::standard_normal(rng);
        }
    }
    out
}

/// Number of reverse steps and snapshots collected by
/// [`reverse_denoise_traced`].
#[derive(Debug, Clone)]
pub struct ReverseTrace<T> {
    /// Euler–Maruyama steps actually taken (final partial step included).
    pub steps: usize,
    /// `(t, state)` pairs captured at roughly even step intervals when
    /// snapshots were requested; excludes the initial and final states.
    pub snapshots: Vec<(f64, ImageBatch<T>)>,
}

/// Integrates the reverse-time dynamics from `t_star` down to `0` with
/// Euler–Maruyama steps of size `dt` (final step shortened to land exactly
/// on zero):
///
/// `x <- x + [beta(t)/2 * x + beta(t) * score(x, t)] * h + sqrt(beta(t) h) z`
pub fn reverse_denoise<T: Scalar>(
    x_t: &ImageBatch<T>,
    schedule: &DiffusionSchedule,
    score: &dyn ScoreModel<T>,
    cfg: &PurifyConfig,
) -> Result<ImageBatch<T>> {
    cfg.validate()?;
    let mut rngs: Vec<ChaCha8Rng> = (0..x_t.batch_len())
        .map(|i| image_stream(cfg.seed, i))
        .collect();
    let (out, _) = reverse_denoise_core(x_t, schedule, score, cfg, &mut rngs, true, 0)?;
    Ok(out)
}

/// [`reverse_denoise`] plus step count and optional intermediate snapshots.
pub fn reverse_denoise_traced<T: Scalar>(
    x_t: &ImageBatch<T>,
    schedule: &DiffusionSchedule,
    score: &dyn ScoreModel<T>,
    cfg: &PurifyConfig,
    snapshot_count: usize,
) -> Result<(ImageBatch<T>, ReverseTrace<T>)> {
    cfg.validate()?;
    let mut rngs: Vec<ChaCha8Rng> = (0..x_t.batch_len())
        .map(|i| image_stream(cfg.seed, i))
        .collect();
    reverse_denoise_core(x_t, schedule, score, cfg, &mut rngs, true, snapshot_count)
}

/// Drift-only variant (all noise terms dropped) used to validate the
/// integrator against closed-form ODE solutions.
pub fn reverse_denoise_deterministic<T: Scalar>(
    x_t: &ImageBatch<T>,
    schedule: &DiffusionSchedule,
    score: &dyn ScoreModel<T>,
    cfg: &PurifyConfig,
) -> Result<ImageBatch<T>> {
    cfg.validate()?;
    let mut rngs: Vec<ChaCha8Rng> = Vec::new();
    let (out, _) = reverse_denoise_core(x_t, schedule, score, cfg, &mut rngs, false, 0)?;
    Ok(out)
}

fn reverse_denoise_core<T: Scalar>(
    x_t: &ImageBatch<T>,
    schedule: &DiffusionSchedule,
    score: &dyn ScoreModel<T>,
    cfg: &PurifyConfig,
    rngs: &mut [ChaCha8Rng],
    with_noise: bool,
    snapshot_count: usize,
) -> Result<(ImageBatch<T>, ReverseTrace<T>)> {
    if cfg.dt > cfg.t_star {
        log::warn!(
            "reverse step dt = {} exceeds t_star = {}; integrating in a single step",
            cfg.dt,
            cfg.t_star
        );
    }
    let total_steps = (cfg.t_star / cfg.dt).ceil().max(1.0) as usize;
    let snap_every = if snapshot_count > 0 {
        (total_steps as f64 / (snapshot_count + 1) as f64).max(1.0)
    } else {
        f64::INFINITY
    };
    let (b, c, h, w) = x_t.dims();
    let per_image = c * h * w;
    let mut state = x_t.clone();
    let mut t = cfg.t_star;
    let mut steps = 0usize;
    let mut snapshots = Vec::new();
    let mut next_snap = snap_every;
    while t > 0.0 {
        let h_step = cfg.dt.min(t);
        let is_final = t - h_step <= f64::EPSILON * cfg.t_star;
        let beta = schedule.beta(t);
        let s = score.evaluate(&state, t)?;
        if s.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("score model output at t = {t}"),
            });
        }
        if s.dim() != state.data().dim() {
            return Err(Error::shape(state.data().shape(), s.shape()));
        }
        let half_beta_h = T::from_f64_c(0.5 * beta * h_step);
        let beta_h = T::from_f64_c(beta * h_step);
        let noise_scale = T::from_f64_c((beta * h_step).sqrt());
        {
            let data = state.data_mut();
            ndarray::Zip::from(&mut *data).and(&s).for_each(|x, &sc| {
                *x = *x + half_beta_h * *x + beta_h * sc;
            });
            let draw_noise = with_noise && !(is_final && cfg.final_step_noiseless);
            if draw_noise {
                let flat = data.as_slice_mut().expect("standard layout");
                for (i, rng) in rngs.iter_mut().enumerate().take(b) {
                    for v in flat[i * per_image..(i + 1) * per_image].iter_mut() {
                        *v += noise_scale * T::standard_normal(rng);
                    }
                }
            }
        }
        steps += 1;
        t -= h_step;
        if t <= 0.0 || is_final {
            break;
        }
        if snapshot_count > 0 && steps as f64 >= next_snap && snapshots.len() < snapshot_count {
            snapshots.push((t, state.clone()));
            next_snap += snap_every;
        }
    }
    let _ = (h, w);
    Ok((state, ReverseTrace { steps, snapshots }))
}

/// Collected intermediate states of one purification call.
#[derive(Debug, Clone)]
pub struct PurifySnapshots<T> {
    /// Signed-domain diffused state at `t_star`.
    pub diffused: ImageBatch<T>,
    /// Signed-domain reverse states at `(t, state)` checkpoints.
    pub reverse: Vec<(f64, ImageBatch<T>)>,
}

/// Purifies a unit-range batch: rescale to `[-1, 1]`, diffuse forward to
/// `t_star`, denoise back to `0`, rescale, clip into `[0, 1]`.
///
/// Forward and reverse noise for each image come from one per-image stream
/// seeded by `cfg.seed`, so a seed fixes the output bitwise.
pub fn purify<T: Scalar>(
    x: &ImageBatch<T>,
    schedule: &DiffusionSchedule,
    score: &dyn ScoreModel<T>,
    cfg: &PurifyConfig,
) -> Result<ImageBatch<T>> {
    Ok(purify_traced(x, schedule, score, cfg, 0)?.0)
}

/// [`purify`] with snapshot capture for visualization.
pub fn purify_traced<T: Scalar>(
    x: &ImageBatch<T>,
    schedule: &DiffusionSchedule,
    score: &dyn ScoreModel<T>,
    cfg: &PurifyConfig,
    snapshot_count: usize,
) -> Result<(ImageBatch<T>, PurifySnapshots<T>)> {
    cfg.validate()?;
    x.require_range(RangeTag::Unit)?;
    let signed = x.unit_to_signed()?;
    let alpha = schedule.alpha(cfg.t_star)?;
    let mut rngs: Vec<ChaCha8Rng> = (0..x.batch_len())
        .map(|i| image_stream(cfg.seed, i))
        .collect();
    let diffused_data = forward_diffuse_with_streams(&signed, alpha, &mut rngs);
    let diffused = ImageBatch::new(diffused_data, RangeTag::Signed)?;
    let (denoised, trace) =
        reverse_denoise_core(&diffused, schedule, score, cfg, &mut rngs, true, snapshot_count)?;
    let out = denoised.signed_to_unit()?.clip_to_range();
    Ok((
        out,
        PurifySnapshots {
            diffused,
            reverse: trace.snapshots,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;

    fn schedule() -> DiffusionSchedule {
        DiffusionSchedule::default()
    }

    /// Composite-Simpson quadrature oracle for `\int_0^t beta`.
    fn simpson_integral_beta(s: &DiffusionSchedule, t: f64, n: usize) -> f64 {
        let n = if n % 2 == 0 { n } else { n + 1 };
        let h = t / n as f64;
        let mut acc = s.beta(0.0) + s.beta(t);
        for k in 1..n {
            let coeff = if k % 2 == 1 { 4.0 } else { 2.0 };
            acc += coeff * s.beta(k as f64 * h);
        }
        acc * h / 3.0
    }

    #[test]
    fn alpha_matches_quadrature_oracle() {
        let s = schedule();
        for &t in &[0.05, 0.1, 0.15, 0.5, 0.99, 1.0] {
            let closed = s.alpha(t).unwrap();
            let quad = (-simpson_integral_beta(&s, t, 2000)).exp();
            assert!(
                (closed - quad).abs() <= 1e-10,
                "alpha({t}): closed {closed} vs quadrature {quad}"
            );
        }
    }

    #[test]
    fn alpha_endpoints_and_monotonicity() {
        let s = schedule();
        assert_eq!(s.alpha(0.0).unwrap(), 1.0);
        let mut prev = 1.0;
        for k in 1..=20 {
            let a = s.alpha(k as f64 / 20.0).unwrap();
            assert!(a < prev, "alpha must strictly decrease");
            assert!(a > 0.0);
            prev = a;
        }
        assert!(s.alpha(-0.1).is_err());
        assert!(s.alpha(1.5).is_err());
    }

    #[test]
    fn schedule_rejects_bad_parameters() {
        assert!(DiffusionSchedule::new(0.0, 20.0).is_err());
        assert!(DiffusionSchedule::new(1.0, 0.5).is_err());
        assert!(DiffusionSchedule::new(0.1, 20.0).is_ok());
    }

    #[test]
    fn forward_moments_match_closed_form() {
        // Monte Carlo oracle on a nonzero constant image.
        let s = schedule();
        let x0 = 0.4f64;
        let n = 4000usize;
        let x = ImageBatch::new(Array4::from_elem((n, 1, 2, 2), x0), RangeTag::Signed).unwrap();
        for &t in &[0.1, 0.5] {
            let alpha = s.alpha(t).unwrap();
            let y = forward_diffuse(&x, &s, t, 99).unwrap();
            let vals: Vec<f64> = y.data().iter().cloned().collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
            let want_mean = alpha.sqrt() * x0;
            let want_var = 1.0 - alpha;
            assert!(
                (mean - want_mean).abs() < 0.05 * want_mean.abs().max(0.05),
                "t={t}: mean {mean} vs {want_mean}"
            );
            assert!(
                (var - want_var).abs() < 0.05 * want_var,
                "t={t}: var {var} vs {want_var}"
            );
        }
    }

    #[test]
    fn forward_diffuse_requires_signed_range() {
        let x = ImageBatch::new(Array4::from_elem((1, 1, 2, 2), 0.5f64), RangeTag::Unit).unwrap();
        assert!(matches!(
            forward_diffuse(&x, &schedule(), 0.1, 0),
            Err(Error::RangeTagMismatch { .. })
        ));
    }

    #[test]
    fn forward_diffuse_is_bitwise_deterministic_per_seed() {
        let x = ImageBatch::new(Array4::from_elem((3, 1, 4, 4), 0.2f64), RangeTag::Signed).unwrap();
        let a = forward_diffuse(&x, &schedule(), 0.15, 7).unwrap();
        let b = forward_diffuse(&x, &schedule(), 0.15, 7).unwrap();
        assert_eq!(a.data(), b.data());
        let c = forward_diffuse(&x, &schedule(), 0.15, 8).unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn zero_score_drift_matches_linear_ode() {
        // With score = 0 the implemented update is dx = beta/2 x per unit of
        // remaining time, whose solution from t_star to 0 multiplies the
        // state by exp(+integral_beta(t_star)/2) = 1/sqrt(alpha).
        let s = schedule();
        let x0 = 0.8f64;
        let x = ImageBatch::new(Array4::from_elem((1, 1, 2, 2), x0), RangeTag::Signed).unwrap();
        let cfg = PurifyConfig {
            t_star: 0.15,
            dt: 1e-3,
            ..Default::default()
        };
        let out = reverse_denoise_deterministic(&x, &s, &ZeroScore, &cfg).unwrap();
        let expected = x0 / s.alpha(0.15).unwrap().sqrt();
        let got = out.data()[[0, 0, 0, 0]];
        let rel = ((got - expected) / expected).abs();
        assert!(rel <= 1e-2, "relative error {rel}");

        // First-order convergence: halving dt should at least cut the error
        // to 0.6x.
        let cfg_half = PurifyConfig {
            dt: 5e-4,
            ..cfg
        };
        let out_half = reverse_denoise_deterministic(&x, &s, &ZeroScore, &cfg_half).unwrap();
        let err_full = (out.data()[[0, 0, 0, 0]] - expected).abs();
        let err_half = (out_half.data()[[0, 0, 0, 0]] - expected).abs();
        assert!(
            err_half <= 0.6 * err_full,
            "halving dt: {err_full} -> {err_half}"
        );
    }

    #[test]
    fn gaussian_score_preserves_standard_normal() {
        // Reduced-size version of the stationarity oracle (the acceptance
        // suite runs the full 10k-sample variant).
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let n = 2000;
        let data = Array4::from_shape_fn((n, 1, 2, 2), |_| {
            rng.sample::<f64, _>(rand_distr::StandardNormal)
        });
        let x = ImageBatch::new(data, RangeTag::Signed).unwrap();
        let cfg = PurifyConfig {
            t_star: 0.15,
            dt: 1e-3,
            seed: 5,
            ..Default::default()
        };
        let out = reverse_denoise(&x, &schedule(), &AnalyticGaussianScore, &cfg).unwrap();
        let vals: Vec<f64> = out.data().iter().cloned().collect();
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (vals.len() - 1) as f64;
        assert!(mean.abs() < 0.08, "mean {mean}");
        assert!((var - 1.0).abs() < 0.08, "variance {var}");
    }

    #[test]
    fn single_step_when_dt_exceeds_t_star() {
        let x = ImageBatch::new(Array4::from_elem((1, 1, 2, 2), 0.3f64), RangeTag::Signed).unwrap();
        let cfg = PurifyConfig {
            t_star: 0.05,
            dt: 0.2,
            seed: 1,
            ..Default::default()
        };
        let (_, trace) =
            reverse_denoise_traced(&x, &schedule(), &ZeroScore, &cfg, 0).unwrap();
        assert_eq!(trace.steps, 1);
    }

    #[test]
    fn purify_near_identity_for_tiny_t_star() {
        let x = ImageBatch::new(Array4::from_elem((2, 1, 4, 4), 0.6f64), RangeTag::Unit).unwrap();
        let cfg = PurifyConfig {
            t_star: 1e-9,
            dt: 1e-3,
            seed: 3,
            ..Default::default()
        };
        let out = purify(&x, &schedule(), &AnalyticGaussianScore, &cfg).unwrap();
        assert!(out.max_abs_diff(&x).unwrap() < 2e-2);
        assert_eq!(out.range_tag(), RangeTag::Unit);
    }

    #[test]
    fn purify_is_deterministic_per_seed_and_stays_in_range() {
        use rand::Rng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let data = Array4::from_shape_fn((3, 1, 8, 8), |_| rng.random::<f64>());
        let x = ImageBatch::new(data, RangeTag::Unit).unwrap();
        let cfg = PurifyConfig {
            t_star: 0.1,
            dt: 5e-3,
            seed: 17,
            ..Default::default()
        };
        let a = purify(&x, &schedule(), &AnalyticGaussianScore, &cfg).unwrap();
        let b = purify(&x, &schedule(), &AnalyticGaussianScore, &cfg).unwrap();
        assert_eq!(a.data(), b.data());
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
        let c = purify(
            &x,
            &schedule(),
            &AnalyticGaussianScore,
            &PurifyConfig { seed: 18, ..cfg },
        )
        .unwrap();
        assert_ne!(a.data(), c.data());
    }

    #[test]
    fn purify_rejects_bad_configs_and_ranges() {
        let x = ImageBatch::new(Array4::from_elem((1, 1, 2, 2), 0.5f64), RangeTag::Unit).unwrap();
        let s = schedule();
        let bad_t = PurifyConfig {
            t_star: 0.0,
            ..Default::default()
        };
        assert!(purify(&x, &s, &ZeroScore, &bad_t).is_err());
        let signed = x.unit_to_signed().unwrap();
        assert!(matches!(
            purify(&signed, &s, &ZeroScore, &PurifyConfig::default()),
            Err(Error::RangeTagMismatch { .. })
        ));
    }

    #[test]
    fn traced_purify_collects_snapshots() {
        let x = ImageBatch::new(Array4::from_elem((1, 1, 4, 4), 0.5f64), RangeTag::Unit).unwrap();
        let cfg = PurifyConfig {
            t_star: 0.05,
            dt: 1e-3,
            seed: 2,
            ..Default::default()
        };
        let (_, snaps) = purify_traced(&x, &schedule(), &AnalyticGaussianScore, &cfg, 4).unwrap();
        assert_eq!(snaps.reverse.len(), 4);
        for pair in snaps.reverse.windows(2) {
            assert!(pair[0].0 > pair[1].0, "snapshot times must decrease");
        }
    }
}
