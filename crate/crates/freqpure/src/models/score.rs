//! Small U-Net score network trained with denoising score matching.
//!
//! The network consumes a signed-range image plus two constant conditioning
//! channels (`t` and `sqrt(1 - alpha_t)`) and predicts the noise `eps` that
//! the closed-form forward process added. The score the reverse integrator
//! needs is then `s(x, t) = -eps_hat / sqrt(1 - alpha_t)`.

use crate::diffusion::{DiffusionSchedule, ScoreModel};
use crate::error::{Error, Result};
use crate::image::{ImageBatch, RangeTag};
use crate::io::TensorMap;
use crate::models::dataset::{generate_toy_dataset, ToyDatasetSpec};
use crate::nn::{
    concat_channels, relu, relu_backward, split_channels, upsample2, upsample2_backward,
    ConvCache, Conv2d, ConvGrads,
};
use crate::optim::Adam;
use crate::scalar::Scalar;
use ndarray::Array4;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Lower bound on `t` for both DSM sampling and evaluation, keeping the
/// `1/sqrt(1 - alpha_t)` factor finite.
pub const MIN_SCORE_T: f64 = 1e-3;

const TENSOR_MAP_KIND: &str = "toy-unet/1";
const DEFAULT_FEATURES: usize = 12;
const BATCH_SIZE: usize = 32;
const LEARNING_RATE: f64 = 1e-3;

/// One-level U-Net: encoder at full resolution, strided downsample, two
/// middle blocks at half resolution, nearest-neighbor upsample, and a decoder
/// over the concatenated skip connection. All convolutions are 3x3.
#[derive(Debug, Clone)]
pub struct ToyUnet<T> {
    enc: Conv2d<T>,
    down: Conv2d<T>,
    mid1: Conv2d<T>,
    mid2: Conv2d<T>,
    up: Conv2d<T>,
    dec: Conv2d<T>,
    out: Conv2d<T>,
    feat: usize,
    in_channels: usize,
}

struct UnetCache<T> {
    c_enc: ConvCache<T>,
    a_enc: Array4<T>,
    c_down: ConvCache<T>,
    a_down: Array4<T>,
    c_mid1: ConvCache<T>,
    a_mid1: Array4<T>,
    c_mid2: ConvCache<T>,
    a_mid2: Array4<T>,
    c_up: ConvCache<T>,
    a_up: Array4<T>,
    c_dec: ConvCache<T>,
    a_dec: Array4<T>,
    c_out: ConvCache<T>,
}

struct UnetGrads<T> {
    enc: ConvGrads<T>,
    down: ConvGrads<T>,
    mid1: ConvGrads<T>,
    mid2: ConvGrads<T>,
    up: ConvGrads<T>,
    dec: ConvGrads<T>,
    out: ConvGrads<T>,
}

impl<T: Scalar> ToyUnet<T> {
    pub fn new(in_channels: usize, feat: usize, rng: &mut ChaCha8Rng) -> Self {
        let cond = in_channels + 2;
        ToyUnet {
            enc: Conv2d::new(cond, feat, 3, 1, 1, rng),
            down: Conv2d::new(feat, 2 * feat, 3, 2, 1, rng),
            mid1: Conv2d::new(2 * feat, 2 * feat, 3, 1, 1, rng),
            mid2: Conv2d::new(2 * feat, 2 * feat, 3, 1, 1, rng),
            up: Conv2d::new(2 * feat, feat, 3, 1, 1, rng),
            dec: Conv2d::new(2 * feat, feat, 3, 1, 1, rng),
            out: Conv2d::new(feat, in_channels, 3, 1, 1, rng),
            feat,
            in_channels,
        }
    }

    pub fn param_count(&self) -> usize {
        self.enc.param_count()
            + self.down.param_count()
            + self.mid1.param_count()
            + self.mid2.param_count()
            + self.up.param_count()
            + self.dec.param_count()
            + self.out.param_count()
    }

    fn forward(&self, x: &Array4<T>) -> (Array4<T>, UnetCache<T>) {
        let (z_enc, c_enc) = self.enc.forward(x);
        let a_enc = relu(&z_enc);
        let (z_down, c_down) = self.down.forward(&a_enc);
        let a_down = relu(&z_down);
        let (z_mid1, c_mid1) = self.mid1.forward(&a_down);
        let a_mid1 = relu(&z_mid1);
        let (z_mid2, c_mid2) = self.mid2.forward(&a_mid1);
        let a_mid2 = relu(&z_mid2);
        let upsampled = upsample2(&a_mid2);
        let (z_up, c_up) = self.up.forward(&upsampled);
        let a_up = relu(&z_up);
        let merged = concat_channels(&a_up, &a_enc);
        let (z_dec, c_dec) = self.dec.forward(&merged);
        let a_dec = relu(&z_dec);
        let (eps_hat, c_out) = self.out.forward(&a_dec);
        (
            eps_hat,
            UnetCache {
                c_enc,
                a_enc,
                c_down,
                a_down,
                c_mid1,
                a_mid1,
                c_mid2,
                a_mid2,
                c_up,
                a_up,
                c_dec,
                a_dec,
                c_out,
            },
        )
    }

    /// Weight gradients for one minibatch; the input gradient is never
    /// needed, so the encoder stops the chain.
    fn backward(&self, cache: &UnetCache<T>, dout: &Array4<T>) -> UnetGrads<T> {
        let g_out = self.out.backward(&cache.c_out, dout, true, true);
        let dz_dec = relu_backward(&cache.a_dec, g_out.dx.as_ref().unwrap());
        let g_dec = self.dec.backward(&cache.c_dec, &dz_dec, true, true);
        let (d_up, d_skip) = split_channels(g_dec.dx.as_ref().unwrap(), self.feat);
        let dz_up = relu_backward(&cache.a_up, &d_up);
        let g_up = self.up.backward(&cache.c_up, &dz_up, true, true);
        let d_mid2 = upsample2_backward(g_up.dx.as_ref().unwrap());
        let dz_mid2 = relu_backward(&cache.a_mid2, &d_mid2);
        let g_mid2 = self.mid2.backward(&cache.c_mid2, &dz_mid2, true, true);
        let dz_mid1 = relu_backward(&cache.a_mid1, g_mid2.dx.as_ref().unwrap());
        let g_mid1 = self.mid1.backward(&cache.c_mid1, &dz_mid1, true, true);
        let dz_down = relu_backward(&cache.a_down, g_mid1.dx.as_ref().unwrap());
        let g_down = self.down.backward(&cache.c_down, &dz_down, true, true);
        let d_enc = g_down.dx.as_ref().unwrap() + &d_skip;
        let dz_enc = relu_backward(&cache.a_enc, &d_enc);
        let g_enc = self.enc.backward(&cache.c_enc, &dz_enc, false, true);
        UnetGrads {
            enc: g_enc,
            down: g_down,
            mid1: g_mid1,
            mid2: g_mid2,
            up: g_up,
            dec: g_dec,
            out: g_out,
        }
    }

    fn apply_step(&mut self, opt: &Adam, grads: &UnetGrads<T>) {
        for (layer, g) in [
            (&mut self.enc, &grads.enc),
            (&mut self.down, &grads.down),
            (&mut self.mid1, &grads.mid1),
            (&mut self.mid2, &grads.mid2),
            (&mut self.up, &grads.up),
            (&mut self.dec, &grads.dec),
            (&mut self.out, &grads.out),
        ] {
            layer.step(opt, g.gw.as_ref().unwrap(), g.gb.as_ref().unwrap());
        }
    }

    fn validate_input(&self, x: &Array4<T>, ts: &[f64]) -> Result<()> {
        let (b, c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::invalid(format!(
                "score network expects {}-channel input, got {c}",
                self.in_channels
            )));
        }
        if ts.len() != b {
            return Err(Error::shape(&[b], &[ts.len()]));
        }
        if h % 2 != 0 || w % 2 != 0 || h < 4 || w < 4 {
            return Err(Error::invalid(format!(
                "score network input dims must be even and at least 4, got {h}x{w}"
            )));
        }
        if let Some(&bad) = ts.iter().find(|&&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::invalid(format!(
                "diffusion times must lie in (0, 1], got {bad}"
            )));
        }
        Ok(())
    }

    /// Stacks the conditioning channels onto `x` and predicts the forward
    /// noise, one diffusion time per image.
    pub fn predict_eps(
        &self,
        x: &Array4<T>,
        ts: &[f64],
        schedule: &DiffusionSchedule,
    ) -> Result<Array4<T>> {
        self.validate_input(x, ts)?;
        let input = self.conditioned_input(x, ts, schedule)?;
        Ok(self.forward(&input).0)
    }

    fn conditioned_input(
        &self,
        x: &Array4<T>,
        ts: &[f64],
        schedule: &DiffusionSchedule,
    ) -> Result<Array4<T>> {
        let (b, c, h, w) = x.dim();
        let mut input = Array4::zeros((b, c + 2, h, w));
        for (i, &t) in ts.iter().enumerate() {
            let alpha = schedule.alpha(t)?;
            let noise_level = T::from_f64_c((1.0 - alpha).sqrt());
            let t_chan = T::from_f64_c(t);
            let mut img = input.index_axis_mut(ndarray::Axis(0), i);
            img.slice_mut(ndarray::s![..c, .., ..])
                .assign(&x.index_axis(ndarray::Axis(0), i));
            img.index_axis_mut(ndarray::Axis(0), c).fill(t_chan);
            img.index_axis_mut(ndarray::Axis(0), c + 1).fill(noise_level);
        }
        Ok(input)
    }

    pub fn to_tensor_map(&self) -> TensorMap {
        let mut map = TensorMap::new(TENSOR_MAP_KIND);
        map.set_hyper("in_channels", self.in_channels as f64);
        map.set_hyper("feat", self.feat as f64);
        for (name, layer) in [
            ("enc", &self.enc),
            ("down", &self.down),
            ("mid1", &self.mid1),
            ("mid2", &self.mid2),
            ("up", &self.up),
            ("dec", &self.dec),
            ("out", &self.out),
        ] {
            map.insert(&format!("{name}.w"), &layer.w);
            map.insert(&format!("{name}.b"), &layer.b);
        }
        map
    }

    pub fn from_tensor_map(map: &TensorMap) -> Result<Self> {
        if map.kind != TENSOR_MAP_KIND {
            return Err(Error::ModelLoad(format!(
                "weights are `{}`, expected `{TENSOR_MAP_KIND}`",
                map.kind
            )));
        }
        let in_channels = map.hyper("in_channels")? as usize;
        let feat = map.hyper("feat")? as usize;
        let conv = |name: &str, stride: usize| -> Result<Conv2d<T>> {
            Ok(Conv2d::from_parts(
                map.get(&format!("{name}.w"))?,
                map.get(&format!("{name}.b"))?,
                stride,
                1,
            ))
        };
        let model = ToyUnet {
            enc: conv("enc", 1)?,
            down: conv("down", 2)?,
            mid1: conv("mid1", 1)?,
            mid2: conv("mid2", 1)?,
            up: conv("up", 1)?,
            dec: conv("dec", 1)?,
            out: conv("out", 1)?,
            feat,
            in_channels,
        };
        if model.enc.w.dim().1 != in_channels + 2 || model.out.w.dim().0 != in_channels {
            return Err(Error::ModelLoad(
                "weight shapes disagree with the declared hyperparameters".to_string(),
            ));
        }
        Ok(model)
    }
}

/// A trained noise predictor bound to its diffusion schedule; implements the
/// score interface the reverse integrator consumes.
#[derive(Debug, Clone)]
pub struct TrainedScore<T> {
    pub unet: ToyUnet<T>,
    pub schedule: DiffusionSchedule,
}

impl<T: Scalar> TrainedScore<T> {
    pub fn to_tensor_map(&self) -> TensorMap {
        let mut map = self.unet.to_tensor_map();
        map.set_hyper("beta_min", self.schedule.beta_min);
        map.set_hyper("beta_max", self.schedule.beta_max);
        map
    }

    pub fn from_tensor_map(map: &TensorMap) -> Result<Self> {
        let unet = ToyUnet::from_tensor_map(map)?;
        let schedule = DiffusionSchedule::new(map.hyper("beta_min")?, map.hyper("beta_max")?)?;
        Ok(TrainedScore { unet, schedule })
    }
}

impl<T: Scalar> ScoreModel<T> for TrainedScore<T> {
    fn evaluate(&self, x: &ImageBatch<T>, t: f64) -> Result<Array4<T>> {
        x.require_range(RangeTag::Signed)?;
        let t = t.max(MIN_SCORE_T);
        let alpha = self.schedule.alpha(t)?;
        let ts = vec![t; x.batch_len()];
        let eps_hat = self.unet.predict_eps(x.data(), &ts, &self.schedule)?;
        let scale = T::from_f64_c(-1.0 / (1.0 - alpha).sqrt());
        Ok(eps_hat.mapv(|v| v * scale))
    }
}

/// A trained score model plus its per-epoch `(train loss, val loss)` curve.
#[derive(Debug, Clone)]
pub struct ScoreTraining<T> {
    pub model: TrainedScore<T>,
    pub curve: Vec<(f64, f64)>,
}

/// Draws `(x_t, eps, t)` for one minibatch and returns the DSM loss and its
/// gradient w.r.t. the prediction.
fn dsm_batch<T: Scalar>(
    unet: &ToyUnet<T>,
    x0: &Array4<T>,
    schedule: &DiffusionSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, Array4<T>, UnetCache<T>, Array4<T>)> {
    let (b, c, h, w) = x0.dim();
    let ts: Vec<f64> = (0..b)
        .map(|_| rng.random_range(MIN_SCORE_T..1.0))
        .collect();
    let mut x_t = x0.clone();
    let mut eps = Array4::zeros((b, c, h, w));
    for i in 0..b {
        let alpha = schedule.alpha(ts[i])?;
        let sqrt_a = T::from_f64_c(alpha.sqrt());
        let sqrt_1ma = T::from_f64_c((1.0 - alpha).sqrt());
        let mut xi = x_t.index_axis_mut(ndarray::Axis(0), i);
        let mut ei = eps.index_axis_mut(ndarray::Axis(0), i);
        for (xv, ev) in xi.iter_mut().zip(ei.iter_mut()) {
            let e = T::standard_normal(rng);
            *ev = e;
            *xv = sqrt_a * *xv + sqrt_1ma * e;
        }
    }
    let input = unet.conditioned_input(&x_t, &ts, schedule)?;
    let (eps_hat, cache) = unet.forward(&input);
    let n = T::from_usize(eps_hat.len()).unwrap();
    let diff = &eps_hat - &eps;
    let loss = diff.iter().map(|&d| (d * d).to_f64_c()).sum::<f64>() / eps_hat.len() as f64;
    let dout = diff.mapv(|d| d * T::from_f64_c(2.0) / n);
    Ok((loss, dout, cache, eps_hat))
}

/// Trains a score network on signed-range image tensors with denoising score
/// matching. Deterministic given `seed`.
#[allow(clippy::too_many_arguments)]
pub fn train_score_on<T: Scalar>(
    train_signed: &Array4<T>,
    val_signed: &Array4<T>,
    schedule: DiffusionSchedule,
    feat: usize,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
) -> Result<ScoreTraining<T>> {
    let (n, c, _, _) = train_signed.dim();
    if n == 0 || val_signed.dim().1 != c {
        return Err(Error::invalid(
            "training and validation tensors must be non-empty with equal channels",
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut unet = ToyUnet::new(c, feat, &mut rng);
    let opt = Adam::new(lr, 0.0);
    let mut curve = Vec::with_capacity(epochs);
    let mut indices: Vec<usize> = (0..n).collect();
    for epoch in 0..epochs {
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in indices.chunks(batch_size) {
            let mut x0 = Array4::zeros((chunk.len(), c, train_signed.dim().2, train_signed.dim().3));
            for (row, &i) in chunk.iter().enumerate() {
                x0.index_axis_mut(ndarray::Axis(0), row)
                    .assign(&train_signed.index_axis(ndarray::Axis(0), i));
            }
            let (loss, dout, cache, _) = dsm_batch(&unet, &x0, &schedule, &mut rng)?;
            if !loss.is_finite() {
                return Err(Error::TrainingFailure {
                    message: format!("DSM loss diverged in epoch {epoch}"),
                    metric: curve.last().map_or(f64::NAN, |&(_, v)| v),
                    curve,
                });
            }
            let grads = unet.backward(&cache, &dout);
            unet.apply_step(&opt, &grads);
            loss_sum += loss;
            batches += 1;
        }
        // Fixed-seed validation pass: the same (t, eps) draws every epoch,
        // so the column is comparable across epochs.
        let mut val_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x76a1_15ed);
        let (val_loss, _, _, _) = dsm_batch(&unet, val_signed, &schedule, &mut val_rng)?;
        curve.push((loss_sum / batches.max(1) as f64, val_loss));
    }
    Ok(ScoreTraining {
        model: TrainedScore { unet, schedule },
        curve,
    })
}

/// Generates the toy dataset for `spec`, rescales it to the signed range,
/// and trains the default-size score network on it.
pub fn train_toy_score_model<T: Scalar>(
    spec: &ToyDatasetSpec,
    schedule: DiffusionSchedule,
    epochs: usize,
    seed: u64,
) -> Result<ScoreTraining<T>> {
    let dataset = generate_toy_dataset::<T>(spec)?;
    let train = dataset.train.images.unit_to_signed()?.into_data();
    let val = dataset.val.images.unit_to_signed()?.into_data();
    train_score_on(
        &train,
        &val,
        schedule,
        DEFAULT_FEATURES,
        epochs,
        BATCH_SIZE,
        LEARNING_RATE,
        seed,
    )
}
