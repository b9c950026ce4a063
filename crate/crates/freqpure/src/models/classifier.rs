//! Small convolutional classifier.
//!
//! Three 3x3 conv + ReLU stages with two average poolings, global average
//! pooling, and a linear head. Trained with Adam on softmax cross-entropy
//! plus mild Gaussian input noise, which widens decision margins so clean
//! accuracy survives the purifier's reconstruction error.

use crate::attack::Classifier;
use crate::error::{Error, Result};
use crate::image::{ImageBatch, RangeTag};
use crate::io::TensorMap;
use crate::models::dataset::{generate_toy_dataset, ToyDataset, ToyDatasetSpec};
use crate::nn::{
    avg_pool2, avg_pool2_backward, global_avg_pool, global_avg_pool_backward, relu,
    relu_backward, softmax_cross_entropy, ConvCache, Conv2d, Linear,
};
use crate::optim::Adam;
use crate::scalar::Scalar;
use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const WIDTH1: usize = 16;
const WIDTH2: usize = 32;
const WIDTH3: usize = 32;
const TENSOR_MAP_KIND: &str = "toy-cnn/1";

/// conv(C→16) → pool → conv(16→32) → pool → conv(32→32) → GAP → fc(→K).
#[derive(Debug, Clone)]
pub struct ToyCnn<T> {
    conv1: Conv2d<T>,
    conv2: Conv2d<T>,
    conv3: Conv2d<T>,
    fc: Linear<T>,
    in_channels: usize,
    class_count: usize,
}

/// Intermediate activations one forward pass produces for the backward pass.
struct Cache<T> {
    c1: ConvCache<T>,
    a1: Array4<T>,
    c2: ConvCache<T>,
    a2: Array4<T>,
    c3: ConvCache<T>,
    a3: Array4<T>,
    gap_out: Array2<T>,
}

/// Per-layer gradients of one backward pass.
struct CnnGrads<T> {
    g1: crate::nn::ConvGrads<T>,
    g2: crate::nn::ConvGrads<T>,
    g3: crate::nn::ConvGrads<T>,
    gfc: crate::nn::LinearGrads<T>,
}

impl<T: Scalar> ToyCnn<T> {
    pub fn new(in_channels: usize, class_count: usize, rng: &mut ChaCha8Rng) -> Self {
        ToyCnn {
            conv1: Conv2d::new(in_channels, WIDTH1, 3, 1, 1, rng),
            conv2: Conv2d::new(WIDTH1, WIDTH2, 3, 1, 1, rng),
            conv3: Conv2d::new(WIDTH2, WIDTH3, 3, 1, 1, rng),
            fc: Linear::new(WIDTH3, class_count, rng),
            in_channels,
            class_count,
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv1.param_count()
            + self.conv2.param_count()
            + self.conv3.param_count()
            + self.fc.param_count()
    }

    fn validate_input(&self, x: &Array4<T>) -> Result<()> {
        let (_, c, h, w) = x.dim();
        if c != self.in_channels {
            return Err(Error::invalid(format!(
                "classifier expects {}-channel input, got {c}",
                self.in_channels
            )));
        }
        if h % 4 != 0 || w % 4 != 0 || h < 4 || w < 4 {
            return Err(Error::invalid(format!(
                "classifier input dims must be divisible by 4, got {h}x{w}"
            )));
        }
        Ok(())
    }

    fn forward_cached(&self, x: &Array4<T>) -> (Array2<T>, Cache<T>) {
        let (z1, c1) = self.conv1.forward(x);
        let a1 = relu(&z1);
        let p1 = avg_pool2(&a1);
        let (z2, c2) = self.conv2.forward(&p1);
        let a2 = relu(&z2);
        let p2 = avg_pool2(&a2);
        let (z3, c3) = self.conv3.forward(&p2);
        let a3 = relu(&z3);
        let gap_out = global_avg_pool(&a3);
        let logits = self.fc.forward(&gap_out);
        (
            logits,
            Cache {
                c1,
                a1,
                c2,
                a2,
                c3,
                a3,
                gap_out,
            },
        )
    }

    /// Backpropagates `dlogits` through the frozen network; weight gradients
    /// are only materialized when `need_dw`, so the attack's input-gradient
    /// path skips their GEMMs entirely.
    fn backward(
        &self,
        cache: &Cache<T>,
        dlogits: &Array2<T>,
        need_dx: bool,
        need_dw: bool,
    ) -> (CnnGrads<T>, Option<Array4<T>>) {
        let gfc = self.fc.backward(&cache.gap_out, dlogits, true);
        let dgap = gfc.dx.as_ref().expect("head gradient requested");
        let (_, _, h3, w3) = cache.a3.dim();
        let da3 = global_avg_pool_backward(dgap, h3, w3);
        let dz3 = relu_backward(&cache.a3, &da3);
        let g3 = self.conv3.backward(&cache.c3, &dz3, true, need_dw);
        let da2 = avg_pool2_backward(g3.dx.as_ref().expect("pool gradient"));
        let dz2 = relu_backward(&cache.a2, &da2);
        let g2 = self.conv2.backward(&cache.c2, &dz2, true, need_dw);
        let da1 = avg_pool2_backward(g2.dx.as_ref().expect("pool gradient"));
        let dz1 = relu_backward(&cache.a1, &da1);
        let crate::nn::ConvGrads { gw, gb, dx } = self.conv1.backward(&cache.c1, &dz1, need_dx, need_dw);
        (
            CnnGrads {
                g1: crate::nn::ConvGrads { gw, gb, dx: None },
                g2,
                g3,
                gfc,
            },
            dx,
        )
    }

    fn apply_step(&mut self, opt: &Adam, grads: &CnnGrads<T>) {
        self.conv1.step(
            opt,
            grads.g1.gw.as_ref().expect("weight gradients requested"),
            grads.g1.gb.as_ref().expect("weight gradients requested"),
        );
        self.conv2.step(
            opt,
            grads.g2.gw.as_ref().expect("weight gradients requested"),
            grads.g2.gb.as_ref().expect("weight gradients requested"),
        );
        self.conv3.step(
            opt,
            grads.g3.gw.as_ref().expect("weight gradients requested"),
            grads.g3.gb.as_ref().expect("weight gradients requested"),
        );
        self.fc.step(opt, &grads.gfc.gw, &grads.gfc.gb);
    }

    /// One optimization step on a minibatch; returns the batch loss.
    fn train_batch(&mut self, opt: &Adam, x: &Array4<T>, labels: &[usize]) -> Result<T> {
        let (logits, cache) = self.forward_cached(x);
        let (loss, dlogits) = softmax_cross_entropy(&logits, labels)?;
        let (grads, _) = self.backward(&cache, &dlogits, false, true);
        self.apply_step(opt, &grads);
        Ok(loss)
    }

    /// Chunked accuracy so evaluation memory stays flat on large splits.
    pub fn accuracy_on(&self, images: &ImageBatch<T>, labels: &[usize]) -> Result<f64> {
        let (b, _, _, _) = images.dims();
        if labels.len() != b {
            return Err(Error::shape(&[b], &[labels.len()]));
        }
        let mut hits = 0usize;
        for start in (0..b).step_by(256) {
            let end = (start + 256).min(b);
            let chunk = images
                .data()
                .slice(ndarray::s![start..end, .., .., ..])
                .to_owned();
            let chunk = ImageBatch::new(chunk, images.range_tag())?;
            let logits = self.logits(&chunk)?;
            for (i, row) in logits.rows().into_iter().enumerate() {
                let mut best = 0usize;
                let mut best_v = row[0];
                for (j, &v) in row.iter().enumerate().skip(1) {
                    if v > best_v {
                        best_v = v;
                        best = j;
                    }
                }
                if best == labels[start + i] {
                    hits += 1;
                }
            }
        }
        Ok(100.0 * hits as f64 / b as f64)
    }

    pub fn to_tensor_map(&self) -> TensorMap {
        let mut map = TensorMap::new(TENSOR_MAP_KIND);
        map.set_hyper("in_channels", self.in_channels as f64);
        map.set_hyper("class_count", self.class_count as f64);
        map.insert("conv1.w", &self.conv1.w);
        map.insert("conv1.b", &self.conv1.b);
        map.insert("conv2.w", &self.conv2.w);
        map.insert("conv2.b", &self.conv2.b);
        map.insert("conv3.w", &self.conv3.w);
        map.insert("conv3.b", &self.conv3.b);
        map.insert("fc.w", &self.fc.w);
        map.insert("fc.b", &self.fc.b);
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
        let class_count = map.hyper("class_count")? as usize;
        let model = ToyCnn {
            conv1: Conv2d::from_parts(map.get("conv1.w")?, map.get("conv1.b")?, 1, 1),
            conv2: Conv2d::from_parts(map.get("conv2.w")?, map.get("conv2.b")?, 1, 1),
            conv3: Conv2d::from_parts(map.get("conv3.w")?, map.get("conv3.b")?, 1, 1),
            fc: Linear::from_parts(map.get("fc.w")?, map.get("fc.b")?),
            in_channels,
            class_count,
        };
        if model.conv1.w.dim().1 != in_channels || model.fc.w.dim().0 != class_count {
            return Err(Error::ModelLoad(
                "weight shapes disagree with the declared hyperparameters".to_string(),
            ));
        }
        Ok(model)
    }
}

impl<T: Scalar> ToyCnn<T> {
    /// Forward pass on a raw tensor; used by wrappers that normalize inputs
    /// out of the unit range before calling in.
    pub(crate) fn forward_raw(&self, x: &Array4<T>) -> Result<Array2<T>> {
        self.validate_input(x)?;
        Ok(self.forward_cached(x).0)
    }

    /// Logits plus the cross-entropy gradient w.r.t. the raw input tensor.
    pub(crate) fn input_gradient_raw(
        &self,
        x: &Array4<T>,
        labels: &[usize],
    ) -> Result<(Array2<T>, Array4<T>)> {
        self.validate_input(x)?;
        let (logits, cache) = self.forward_cached(x);
        let (_, dlogits) = softmax_cross_entropy(&logits, labels)?;
        let (_, dx) = self.backward(&cache, &dlogits, true, false);
        Ok((logits, dx.expect("input gradient requested")))
    }
}

impl<T: Scalar> Classifier<T> for ToyCnn<T> {
    fn class_count(&self) -> usize {
        self.class_count
    }

    fn logits(&self, x: &ImageBatch<T>) -> Result<Array2<T>> {
        x.require_range(RangeTag::Unit)?;
        self.forward_raw(x.data())
    }

    fn input_gradient(
        &self,
        x: &ImageBatch<T>,
        labels: &[usize],
    ) -> Result<(Array2<T>, Array4<T>)> {
        x.require_range(RangeTag::Unit)?;
        self.input_gradient_raw(x.data(), labels)
    }

    // The chunked path keeps evaluation memory flat on large batches.
    fn accuracy_pct(&self, x: &ImageBatch<T>, labels: &[usize]) -> Result<f64> {
        self.accuracy_on(x, labels)
    }
}

/// Standard deviation of the Gaussian input noise added during training.
const TRAIN_NOISE_STD: f64 = 0.06;
const BATCH_SIZE: usize = 64;
const LEARNING_RATE: f64 = 1e-3;
/// Validation floor below which training is reported as failed.
const ACCURACY_FLOOR_PCT: f64 = 60.0;

/// A trained classifier plus its per-epoch `(train loss, val accuracy %)`
/// curve.
#[derive(Debug, Clone)]
pub struct ClassifierTraining<T> {
    pub model: ToyCnn<T>,
    pub curve: Vec<(f64, f64)>,
}

/// Generates the dataset for `spec` and trains on it.
pub fn train_toy_classifier<T: Scalar>(
    spec: &ToyDatasetSpec,
    epochs: usize,
    seed: u64,
) -> Result<ClassifierTraining<T>> {
    let dataset = generate_toy_dataset(spec)?;
    train_classifier_on(&dataset, epochs, seed)
}

/// Trains on an already generated dataset (so callers sharing the dataset
/// across models do not regenerate it). Deterministic given `seed`.
pub fn train_classifier_on<T: Scalar>(
    dataset: &ToyDataset<T>,
    epochs: usize,
    seed: u64,
) -> Result<ClassifierTraining<T>> {
    let spec = &dataset.spec;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = ToyCnn::new(spec.channels, spec.class_count, &mut rng);
    let opt = Adam::new(LEARNING_RATE, 0.0);
    let train = &dataset.train;
    let n = train.len();
    let noise_std = T::from_f64_c(TRAIN_NOISE_STD);
    let mut curve = Vec::with_capacity(epochs);
    let mut indices: Vec<usize> = (0..n).collect();
    for epoch in 0..epochs {
        indices.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in indices.chunks(BATCH_SIZE) {
            let batch = train.select(chunk)?;
            let mut x = batch.images.into_data();
            for v in x.iter_mut() {
                let noisy = *v + noise_std * T::standard_normal(&mut rng);
                *v = noisy.max(T::zero()).min(T::one());
            }
            let loss = model.train_batch(&opt, &x, &batch.labels)?;
            let loss = loss.to_f64_c();
            if !loss.is_finite() {
                return Err(Error::TrainingFailure {
                    message: format!("loss diverged in epoch {epoch}"),
                    metric: curve.last().map_or(0.0, |&(_, a)| a),
                    curve,
                });
            }
            loss_sum += loss;
            batches += 1;
        }
        let val_acc = model.accuracy_on(&dataset.val.images, &dataset.val.labels)?;
        curve.push((loss_sum / batches.max(1) as f64, val_acc));
    }
    if epochs > 0 {
        let final_acc = curve.last().map_or(0.0, |&(_, a)| a);
        if final_acc < ACCURACY_FLOOR_PCT {
            return Err(Error::TrainingFailure {
                message: format!(
                    "validation accuracy {final_acc:.2}% is below the {ACCURACY_FLOOR_PCT}% floor"
                ),
                metric: final_acc,
                curve,
            });
        }
    }
    Ok(ClassifierTraining { model, curve })
}
