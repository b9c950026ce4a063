//! Gradient-based adversarial attacks in pixel space, frequency space, or
//! both.
//!
//! The perturbation model is applied as one fixed chain regardless of mode:
//!
//! ```text
//! x_adv = clip_[0,1]( IDFT( clip_{>=0}(M * delta_mag) * e^{i (phi + delta_phase)} ) + delta_pixel )
//! ```
//!
//! where `(M, phi)` is the per-channel spectrum of the clean batch. The mode
//! only decides which of the three tensors the optimizer may move; inactive
//! tensors stay at their identity values (`delta_mag = 1`, others `0`), so
//! every mode shares a single forward/backward implementation.
//!
//! Optimization descends `lambda * MSE(x_adv, x) - CE(f(x_adv), y)` with Adam,
//! evaluating before each update so the identity perturbation is both the
//! first trace row and the first incumbent. After every step the spectral
//! perturbations are projected back onto even (magnitude) / odd (phase)
//! symmetry, which keeps reconstructions real-valued.

use crate::error::{Error, Result};
use crate::image::{ImageBatch, RangeTag};
use crate::nn::softmax_cross_entropy;
use crate::optim::{Adam, AdamState};
use crate::scalar::Scalar;
use crate::spectral::{decompose, symmetrize, FftPair, SpectralDecomposition};
use ndarray::{Array2, Array4, Axis, Zip};
use num_complex::Complex;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::str::FromStr;

/// Anything that maps unit-range batches to logits and can differentiate the
/// mean cross-entropy with respect to its input.
///
/// The attack is generic over this trait, so hand-built linear probes and
/// trained convolutional models run through identical code.
pub trait Classifier<T: Scalar>: Send + Sync {
    fn class_count(&self) -> usize;

    /// Logits of shape `(batch, class_count)`.
    fn logits(&self, x: &ImageBatch<T>) -> Result<Array2<T>>;

    /// Logits together with `d(mean CE)/dx` for the given labels, from a
    /// single forward/backward pass.
    fn input_gradient(
        &self,
        x: &ImageBatch<T>,
        labels: &[usize],
    ) -> Result<(Array2<T>, Array4<T>)>;

    /// Top-1 accuracy in percent.
    fn accuracy_pct(&self, x: &ImageBatch<T>, labels: &[usize]) -> Result<f64> {
        let logits = self.logits(x)?;
        if labels.len() != logits.dim().0 {
            return Err(Error::shape(&[logits.dim().0], &[labels.len()]));
        }
        Ok(crate::nn::accuracy_pct(&logits, labels))
    }
}

/// Which perturbation tensors the optimizer is allowed to move.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackMode {
    /// Additive pixel perturbation only.
    Pixel,
    /// Multiplicative spectral-magnitude perturbation only.
    Mag,
    /// Additive spectral-phase perturbation only.
    Phase,
    /// Magnitude and phase together.
    PhaseMag,
    /// All three tensors.
    All,
}

impl AttackMode {
    /// Every mode, in canonical reporting order.
    pub const ALL_MODES: [AttackMode; 5] = [
        AttackMode::Pixel,
        AttackMode::Mag,
        AttackMode::Phase,
        AttackMode::PhaseMag,
        AttackMode::All,
    ];

    pub fn uses_magnitude(self) -> bool {
        matches!(self, AttackMode::Mag | AttackMode::PhaseMag | AttackMode::All)
    }

    pub fn uses_phase(self) -> bool {
        matches!(
            self,
            AttackMode::Phase | AttackMode::PhaseMag | AttackMode::All
        )
    }

    pub fn uses_pixel(self) -> bool {
        matches!(self, AttackMode::Pixel | AttackMode::All)
    }

    pub fn name(self) -> &'static str {
        match self {
            AttackMode::Pixel => "pixel",
            AttackMode::Mag => "mag",
            AttackMode::Phase => "phase",
            AttackMode::PhaseMag => "phase_mag",
            AttackMode::All => "all",
        }
    }
}

impl fmt::Display for AttackMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AttackMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pixel" => Ok(AttackMode::Pixel),
            "mag" => Ok(AttackMode::Mag),
            "phase" => Ok(AttackMode::Phase),
            "phase_mag" => Ok(AttackMode::PhaseMag),
            "all" => Ok(AttackMode::All),
            other => Err(Error::invalid(format!(
                "unknown attack mode {other:?}; expected one of pixel, mag, phase, phase_mag, all"
            ))),
        }
    }
}

/// The three perturbation tensors, all shaped like the batch they attack.
#[derive(Debug, Clone)]
pub struct PerturbationSet<T> {
    /// Multiplies the spectral magnitude; identity is 1.
    pub delta_mag: Array4<T>,
    /// Adds to the spectral phase; identity is 0.
    pub delta_phase: Array4<T>,
    /// Adds to the reconstructed pixels; identity is 0.
    pub delta_pixel: Array4<T>,
    /// Which tensors the producing attack was allowed to move.
    pub mode: AttackMode,
}

impl<T: Scalar> PerturbationSet<T> {
    /// Identity perturbation: applying it reproduces the input up to
    /// transform round-off.
    pub fn identity(shape: (usize, usize, usize, usize), mode: AttackMode) -> Self {
        PerturbationSet {
            delta_mag: Array4::from_elem(shape, T::one()),
            delta_phase: Array4::zeros(shape),
            delta_pixel: Array4::zeros(shape),
            mode,
        }
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.delta_mag.dim()
    }
}

/// Attack hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    /// Weight of the mean-squared distortion term.
    pub lambda: f64,
    /// Adam learning rate.
    pub lr: f64,
    /// Weight decay toward each tensor's identity value.
    pub weight_decay: f64,
    /// Hard cap on objective evaluations.
    pub max_iterations: usize,
    /// Stop after this many consecutive evaluations without a new best.
    pub patience: usize,
}

impl Default for AttackConfig {
    fn default() -> Self {
        AttackConfig {
            lambda: 5e4,
            lr: 5e-3,
            weight_decay: 5e-6,
            max_iterations: 1000,
            patience: 5,
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        // `lambda = +inf` is the documented no-op sentinel: any distortion is
        // infinitely expensive, so the attack returns the identity.
        if self.lambda.is_nan() || self.lambda < 0.0 {
            return Err(Error::invalid(format!(
                "lambda must be >= 0 (or +inf for the identity sentinel), got {}",
                self.lambda
            )));
        }
        if !self.lr.is_finite() || self.lr <= 0.0 {
            return Err(Error::invalid(format!("lr must be > 0, got {}", self.lr)));
        }
        if !self.weight_decay.is_finite() || self.weight_decay < 0.0 {
            return Err(Error::invalid(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations must be >= 1"));
        }
        if self.patience == 0 {
            return Err(Error::invalid("patience must be >= 1"));
        }
        Ok(())
    }
}

/// One objective evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    /// 1-based evaluation index.
    pub iteration: usize,
    /// Descent objective `lambda * distortion - cross_entropy`.
    pub objective: f64,
    /// Batch-mean per-image mean squared pixel difference.
    pub distortion: f64,
    /// Mean cross-entropy of the classifier on the perturbed batch.
    pub cross_entropy: f64,
}

/// Objective history of one attack run, one row per evaluation.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttackTrace {
    pub rows: Vec<TraceRow>,
}

impl AttackTrace {
    /// Row with the lowest objective (first occurrence on ties).
    pub fn best(&self) -> Option<&TraceRow> {
        self.rows.iter().reduce(|best, row| {
            if row.objective < best.objective {
                row
            } else {
                best
            }
        })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }
}

/// Everything an attack run returns: the best perturbed batch found, the
/// parameters that produced it, and the per-evaluation history.
#[derive(Debug, Clone)]
pub struct AttackOutcome<T> {
    pub adversarial: ImageBatch<T>,
    pub perturbation: PerturbationSet<T>,
    pub trace: AttackTrace,
}

/// Reported loss value `lambda * MSE(x_adv, x) + CE(logits, labels)`.
///
/// This is the summary statistic written to reports; the optimizer descends
/// the signed variant (`- CE`) internally.
pub fn attack_loss<T: Scalar>(
    x: &ImageBatch<T>,
    x_adv: &ImageBatch<T>,
    logits: &Array2<T>,
    labels: &[usize],
    lambda: f64,
) -> Result<T> {
    if x.dims() != x_adv.dims() {
        return Err(Error::shape(x.data().shape(), x_adv.data().shape()));
    }
    if logits.dim().0 != x.dims().0 {
        return Err(Error::shape(&[x.dims().0], &[logits.dim().0]));
    }
    let mse = mean_sq_diff(x_adv.data(), x.data());
    let (ce, _) = softmax_cross_entropy(logits, labels)?;
    Ok(T::from_f64_c(lambda) * mse + ce)
}

/// Batch-mean per-image mean squared difference. With a uniform image shape
/// this equals the global element mean of the squared difference.
fn mean_sq_diff<T: Scalar>(a: &Array4<T>, b: &Array4<T>) -> T {
    debug_assert_eq!(a.dim(), b.dim());
    let mut acc = T::zero();
    Zip::from(a).and(b).for_each(|&x, &y| {
        let d = x - y;
        acc += d * d;
    });
    acc / T::from_usize(a.len()).unwrap()
}

/// Forward pass of the perturbation chain plus the intermediates the
/// backward pass needs.
struct AppliedPerturbation<T> {
    x_adv: Array4<T>,
    /// `cos(phi + delta_phase)`, `sin(phi + delta_phase)`.
    cos_theta: Array4<T>,
    sin_theta: Array4<T>,
    /// Clipped magnitude `max(M * delta_mag, 0)` actually synthesized.
    r: Array4<T>,
    /// 1 where the magnitude clip passed the raw product through.
    mask_mag: Array4<T>,
    /// 1 where the final `[0, 1]` clip passed the sum through.
    mask_pix: Array4<T>,
}

fn apply_with_spectrum<T: Scalar>(
    fft: &mut FftPair<T>,
    spec: &SpectralDecomposition<T>,
    p: &PerturbationSet<T>,
) -> Result<AppliedPerturbation<T>> {
    let dims = spec.magnitude.dim();
    for (name, arr) in [
        ("delta_mag", &p.delta_mag),
        ("delta_phase", &p.delta_phase),
        ("delta_pixel", &p.delta_pixel),
    ] {
        if arr.dim() != dims {
            return Err(Error::shape(spec.magnitude.shape(), arr.shape()));
        }
        if arr.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("{name} perturbation"),
            });
        }
    }
    let (b, c, h, w) = dims;
    let zero = T::zero();
    let one = T::one();

    let mut r = Array4::zeros(dims);
    let mut mask_mag = Array4::zeros(dims);
    Zip::from(&mut r)
        .and(&mut mask_mag)
        .and(&spec.magnitude)
        .and(&p.delta_mag)
        .for_each(|r, mk, &m, &dm| {
            let raw = m * dm;
            if raw >= zero {
                *r = raw;
                *mk = one;
            }
        });
    let mut cos_theta = Array4::zeros(dims);
    let mut sin_theta = Array4::zeros(dims);
    Zip::from(&mut cos_theta)
        .and(&mut sin_theta)
        .and(&spec.phase)
        .and(&p.delta_phase)
        .for_each(|ct, st, &ph, &dp| {
            let theta = ph + dp;
            *ct = theta.cos();
            *st = theta.sin();
        });

    let mut x_adv = Array4::zeros(dims);
    let mut mask_pix = Array4::zeros(dims);
    let mut buf: Vec<Complex<T>> = vec![Complex::new(zero, zero); h * w];
    for bi in 0..b {
        for ci in 0..c {
            for (idx, slot) in buf.iter_mut().enumerate() {
                let (u, v) = (idx / w, idx % w);
                let rad = r[[bi, ci, u, v]];
                slot.re = rad * cos_theta[[bi, ci, u, v]];
                slot.im = rad * sin_theta[[bi, ci, u, v]];
            }
            fft.inverse(&mut buf);
            for (idx, slot) in buf.iter().enumerate() {
                let (y, x) = (idx / w, idx % w);
                let pre = slot.re + p.delta_pixel[[bi, ci, y, x]];
                let (clipped, pass) = if pre < zero {
                    (zero, zero)
                } else if pre > one {
                    (one, zero)
                } else {
                    (pre, one)
                };
                x_adv[[bi, ci, y, x]] = clipped;
                mask_pix[[bi, ci, y, x]] = pass;
            }
        }
    }
    Ok(AppliedPerturbation {
        x_adv,
        cos_theta,
        sin_theta,
        r,
        mask_mag,
        mask_pix,
    })
}

/// Gradients of the objective with respect to each active perturbation
/// tensor; inactive entries are `None`.
struct PerturbationGrads<T> {
    d_mag: Option<Array4<T>>,
    d_phase: Option<Array4<T>>,
    d_pixel: Option<Array4<T>>,
}

/// Pulls `dJ/dx_adv` back through the perturbation chain.
///
/// The final clip and the magnitude clip use straight-through masks (exact
/// subgradients away from the clip boundary). For the spectral part, with the
/// synthesized spectrum `S = R e^{i theta}` and the `1/(HW)`-normalized
/// inverse transform, the adjoint of reconstruction is the unnormalized
/// forward transform scaled by `1/(HW)`:
///
/// ```text
/// G      = DFT(g) / (H*W)
/// dJ/dR  = Re(G) cos(theta) + Im(G) sin(theta)
/// dJ/dth = R (Im(G) cos(theta) - Re(G) sin(theta))
/// ```
///
/// then `d delta_mag = dJ/dR * M * mask_mag` and `d delta_phase = dJ/dth`.
fn backward_through_apply<T: Scalar>(
    fft: &mut FftPair<T>,
    applied: &AppliedPerturbation<T>,
    magnitude: &Array4<T>,
    g_adv: &Array4<T>,
    mode: AttackMode,
) -> PerturbationGrads<T> {
    let dims = g_adv.dim();
    let (b, c, h, w) = dims;
    let mut g_pre = g_adv.clone();
    g_pre *= &applied.mask_pix;

    let d_pixel = mode.uses_pixel().then(|| g_pre.clone());

    let mut d_mag = None;
    let mut d_phase = None;
    if mode.uses_magnitude() || mode.uses_phase() {
        let inv_hw = T::one() / T::from_usize(h * w).unwrap();
        let mut dm = mode.uses_magnitude().then(|| Array4::zeros(dims));
        let mut dp = mode.uses_phase().then(|| Array4::zeros(dims));
        for bi in 0..b {
            for ci in 0..c {
                let spec = fft.forward(
                    g_pre
                        .index_axis(Axis(0), bi)
                        .index_axis(Axis(0), ci),
                );
                for (idx, ghat) in spec.iter().enumerate() {
                    let (u, v) = (idx / w, idx % w);
                    let re = ghat.re * inv_hw;
                    let im = ghat.im * inv_hw;
                    let ct = applied.cos_theta[[bi, ci, u, v]];
                    let st = applied.sin_theta[[bi, ci, u, v]];
                    if let Some(dm) = dm.as_mut() {
                        let d_r = re * ct + im * st;
                        dm[[bi, ci, u, v]] = d_r
                            * magnitude[[bi, ci, u, v]]
                            * applied.mask_mag[[bi, ci, u, v]];
                    }
                    if let Some(dp) = dp.as_mut() {
                        dp[[bi, ci, u, v]] =
                            applied.r[[bi, ci, u, v]] * (im * ct - re * st);
                    }
                }
            }
        }
        d_mag = dm;
        d_phase = dp;
    }
    PerturbationGrads {
        d_mag,
        d_phase,
        d_pixel,
    }
}

/// Applies a perturbation set to a unit-range batch through the full chain.
///
/// The identity perturbation reproduces the input up to transform round-off.
pub fn apply_perturbations<T: Scalar>(
    x: &ImageBatch<T>,
    p: &PerturbationSet<T>,
) -> Result<ImageBatch<T>> {
    x.require_range(RangeTag::Unit)?;
    let (_, _, h, w) = x.dims();
    let spec = decompose(x)?;
    let mut fft = FftPair::new(h, w);
    let applied = apply_with_spectrum(&mut fft, &spec, p)?;
    ImageBatch::new(applied.x_adv, RangeTag::Unit)
}

/// Optimizes a perturbation of `x` against `classifier`, starting from the
/// identity.
///
/// Each iteration first evaluates the objective (so iteration 1 records the
/// unperturbed batch), updates the incumbent, then takes one Adam step on the
/// mode's active tensors followed by the spectral symmetry projection. The
/// run stops at `max_iterations`, or earlier once `patience` consecutive
/// evaluations fail to improve the incumbent. The returned batch is the best
/// evaluated point, not the last.
///
/// `lambda = +inf` is a no-op sentinel: the identity perturbation is
/// evaluated once and returned, giving a degenerate "attack" whose output
/// matches the input up to transform round-off.
///
/// The procedure is deterministic: identical inputs produce identical
/// outcomes bit for bit.
pub fn run_attack<T: Scalar>(
    classifier: &dyn Classifier<T>,
    x: &ImageBatch<T>,
    labels: &[usize],
    mode: AttackMode,
    cfg: &AttackConfig,
) -> Result<AttackOutcome<T>> {
    cfg.validate()?;
    x.require_range(RangeTag::Unit)?;
    let (b, c, h, w) = x.dims();
    if labels.len() != b {
        return Err(Error::shape(&[b], &[labels.len()]));
    }
    let k = classifier.class_count();
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!(
            "label {bad} out of range for {k} classes"
        )));
    }

    let spec = decompose(x)?;
    let mut fft = FftPair::new(h, w);
    let mut p = PerturbationSet::identity((b, c, h, w), mode);

    if cfg.lambda.is_infinite() {
        // Identity sentinel: evaluate the unperturbed chain once and return.
        let applied = apply_with_spectrum(&mut fft, &spec, &p)?;
        let adv_batch = ImageBatch::new(applied.x_adv.clone(), RangeTag::Unit)?;
        let logits = classifier.logits(&adv_batch)?;
        let (ce_t, _) = softmax_cross_entropy(&logits, labels)?;
        let trace = AttackTrace {
            rows: vec![TraceRow {
                iteration: 1,
                objective: -ce_t.to_f64_c(),
                distortion: mean_sq_diff(&applied.x_adv, x.data()).to_f64_c(),
                cross_entropy: ce_t.to_f64_c(),
            }],
        };
        return Ok(AttackOutcome {
            adversarial: adv_batch,
            perturbation: p,
            trace,
        });
    }

    let opt = Adam::new(cfg.lr, cfg.weight_decay);
    let n = b * c * h * w;
    let mut state_mag = AdamState::new(n);
    let mut state_phase = AdamState::new(n);
    let mut state_pixel = AdamState::new(n);

    let mut trace = AttackTrace::default();
    let mut best_objective = f64::INFINITY;
    let mut best: Option<(Array4<T>, PerturbationSet<T>)> = None;
    let mut stale = 0usize;
    let lambda_t = T::from_f64_c(cfg.lambda);
    let mse_grad_scale = T::from_f64_c(2.0) * lambda_t / T::from_usize(n).unwrap();

    for iteration in 1..=cfg.max_iterations {
        let applied = apply_with_spectrum(&mut fft, &spec, &p)?;
        if applied.x_adv.iter().any(|v| !v.is_finite()) {
            return Err(Error::AttackAborted {
                iteration,
                cause: "non-finite reconstruction".into(),
                trace,
            });
        }
        let adv_batch = ImageBatch::new(applied.x_adv.clone(), RangeTag::Unit)?;
        let (logits, g_ce) = classifier.input_gradient(&adv_batch, labels)?;
        let (ce_t, _) = softmax_cross_entropy(&logits, labels)?;
        let distortion = mean_sq_diff(&applied.x_adv, x.data()).to_f64_c();
        let cross_entropy = ce_t.to_f64_c();
        let objective = cfg.lambda * distortion - cross_entropy;
        if !objective.is_finite() {
            return Err(Error::AttackAborted {
                iteration,
                cause: format!(
                    "non-finite objective (distortion {distortion}, cross-entropy {cross_entropy})"
                ),
                trace,
            });
        }
        trace.rows.push(TraceRow {
            iteration,
            objective,
            distortion,
            cross_entropy,
        });
        if objective < best_objective {
            best_objective = objective;
            best = Some((applied.x_adv.clone(), p.clone()));
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
        if iteration == cfg.max_iterations {
            break;
        }

        // dJ/dx_adv = lambda * d(MSE)/dx_adv - d(CE)/dx_adv.
        let mut g_adv = &applied.x_adv - x.data();
        g_adv.mapv_inplace(|v| v * mse_grad_scale);
        g_adv -= &g_ce;
        let grads = backward_through_apply(&mut fft, &applied, &spec.magnitude, &g_adv, mode);
        for (name, grad) in [
            ("delta_mag", grads.d_mag.as_ref()),
            ("delta_phase", grads.d_phase.as_ref()),
            ("delta_pixel", grads.d_pixel.as_ref()),
        ] {
            if let Some(g) = grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::AttackAborted {
                        iteration,
                        cause: format!("non-finite gradient for {name}"),
                        trace,
                    });
                }
            }
        }
        if let Some(g) = grads.d_mag {
            state_mag.update(&opt, &mut p.delta_mag, &g, T::one());
        }
        if let Some(g) = grads.d_phase {
            state_phase.update(&opt, &mut p.delta_phase, &g, T::zero());
        }
        if let Some(g) = grads.d_pixel {
            state_pixel.update(&opt, &mut p.delta_pixel, &g, T::zero());
        }
        if mode.uses_magnitude() || mode.uses_phase() {
            let (sym_mag, sym_phase) = symmetrize(&p.delta_mag, &p.delta_phase)?;
            p.delta_mag = sym_mag;
            p.delta_phase = sym_phase;
        }
    }

    let (best_adv, best_p) = best.expect("at least one evaluation recorded");
    Ok(AttackOutcome {
        adversarial: ImageBatch::new(best_adv, RangeTag::Unit)?,
        perturbation: best_p,
        trace,
    })
}
