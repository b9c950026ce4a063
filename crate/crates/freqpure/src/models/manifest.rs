//! Manifest loader for externally supplied weights.
//!
//! A manifest is a small TOML file describing where the weights live and how
//! inputs must be shaped and normalized. Loading validates the description
//! against the weight tensors, runs a smoke forward pass, and returns the
//! model behind the same interfaces the trained toy models implement — so a
//! checkpoint trained elsewhere drops into the attack and purification
//! pipeline unchanged.

use crate::attack::Classifier;
use crate::diffusion::{DiffusionSchedule, ScoreModel};
use crate::error::{Error, Result};
use crate::image::{ImageBatch, RangeTag};
use crate::io::{read_text, TensorMap};
use crate::models::classifier::ToyCnn;
use crate::models::score::TrainedScore;
use crate::scalar::Scalar;
use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Description of an external checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelManifest {
    /// `"classifier"` or `"score"`.
    pub kind: String,
    /// Weight file path, resolved relative to the manifest when relative.
    pub weights: String,
    /// Expected input shape `[channels, height, width]`.
    pub input_shape: Vec<usize>,
    /// Range the model consumes: `"unit"` or `"signed"`.
    pub value_range: String,
    /// Per-channel normalization; empty means identity.
    #[serde(default)]
    pub mean: Vec<f64>,
    #[serde(default)]
    pub std: Vec<f64>,
    #[serde(default)]
    pub class_count: Option<usize>,
    /// Schedule overrides for score checkpoints.
    #[serde(default)]
    pub beta_min: Option<f64>,
    #[serde(default)]
    pub beta_max: Option<f64>,
}

impl ModelManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = read_text(path)?;
        toml::from_str(&text).map_err(|e| Error::Serde(format!("{}: {e}", path.display())))
    }

    /// Resolved weight-file location; relative entries anchor at the
    /// manifest's directory.
    pub fn weights_path(&self, manifest_path: &Path) -> std::path::PathBuf {
        let raw = Path::new(&self.weights);
        if raw.is_absolute() {
            raw.to_path_buf()
        } else {
            manifest_path
                .parent()
                .unwrap_or_else(|| Path::new("."))
                .join(raw)
        }
    }

    fn channels(&self, manifest_path: &Path) -> Result<usize> {
        if self.input_shape.len() != 3 {
            return Err(Error::ModelLoad(format!(
                "{}: input_shape must be [channels, height, width], got {:?}",
                manifest_path.display(),
                self.input_shape
            )));
        }
        Ok(self.input_shape[0])
    }

    fn range(&self, manifest_path: &Path) -> Result<RangeTag> {
        match self.value_range.as_str() {
            "unit" => Ok(RangeTag::Unit),
            "signed" => Ok(RangeTag::Signed),
            other => Err(Error::ModelLoad(format!(
                "{}: value_range `{other}` is neither `unit` nor `signed`",
                manifest_path.display()
            ))),
        }
    }
}

/// A classifier wrapped with per-channel input normalization
/// `z_c = (x_c - mean_c) / std_c`.
#[derive(Debug, Clone)]
pub struct NormalizedClassifier<T> {
    inner: ToyCnn<T>,
    mean: Vec<T>,
    std: Vec<T>,
}

impl<T: Scalar> NormalizedClassifier<T> {
    fn normalize(&self, x: &Array4<T>) -> Array4<T> {
        let mut z = x.clone();
        for (c, mut plane) in z.axis_iter_mut(ndarray::Axis(1)).enumerate() {
            let mean = self.mean[c];
            let inv_std = T::one() / self.std[c];
            plane.mapv_inplace(|v| (v - mean) * inv_std);
        }
        z
    }
}

impl<T: Scalar> Classifier<T> for NormalizedClassifier<T> {
    fn class_count(&self) -> usize {
        self.inner.class_count()
    }

    fn logits(&self, x: &ImageBatch<T>) -> Result<Array2<T>> {
        x.require_range(RangeTag::Unit)?;
        self.inner.forward_raw(&self.normalize(x.data()))
    }

    fn input_gradient(
        &self,
        x: &ImageBatch<T>,
        labels: &[usize],
    ) -> Result<(Array2<T>, Array4<T>)> {
        x.require_range(RangeTag::Unit)?;
        let (logits, mut grad) = self
            .inner
            .input_gradient_raw(&self.normalize(x.data()), labels)?;
        // d/dx = d/dz * dz/dx with dz/dx = 1/std per channel.
        for (c, mut plane) in grad.axis_iter_mut(ndarray::Axis(1)).enumerate() {
            let inv_std = T::one() / self.std[c];
            plane.mapv_inplace(|v| v * inv_std);
        }
        Ok((logits, grad))
    }
}

fn load_weights(manifest: &ModelManifest, manifest_path: &Path) -> Result<TensorMap> {
    let weights_path = manifest.weights_path(manifest_path);
    TensorMap::load(&weights_path).map_err(|e| {
        Error::ModelLoad(format!(
            "{}: weights `{}` failed to load: {e}",
            manifest_path.display(),
            weights_path.display()
        ))
    })
}

fn normalization<T: Scalar>(
    manifest: &ModelManifest,
    manifest_path: &Path,
    channels: usize,
) -> Result<(Vec<T>, Vec<T>)> {
    let mean = if manifest.mean.is_empty() {
        vec![0.0; channels]
    } else {
        manifest.mean.clone()
    };
    let std = if manifest.std.is_empty() {
        vec![1.0; channels]
    } else {
        manifest.std.clone()
    };
    if mean.len() != channels || std.len() != channels {
        return Err(Error::ModelLoad(format!(
            "{}: mean/std must have one entry per channel ({channels}), got {}/{}",
            manifest_path.display(),
            mean.len(),
            std.len()
        )));
    }
    if let Some(&bad) = std.iter().find(|&&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::ModelLoad(format!(
            "{}: std entries must be positive and finite, got {bad}",
            manifest_path.display()
        )));
    }
    Ok((
        mean.iter().map(|&v| T::from_f64_c(v)).collect(),
        std.iter().map(|&v| T::from_f64_c(v)).collect(),
    ))
}

/// Loads a classifier checkpoint described by a manifest and smoke-tests it
/// on a zero batch of the declared input shape.
pub fn load_external_classifier<T: Scalar>(manifest_path: &Path) -> Result<NormalizedClassifier<T>> {
    let manifest = ModelManifest::load(manifest_path)?;
    if manifest.kind != "classifier" {
        return Err(Error::ModelLoad(format!(
            "{}: kind `{}` is not `classifier`",
            manifest_path.display(),
            manifest.kind
        )));
    }
    if manifest.range(manifest_path)? != RangeTag::Unit {
        return Err(Error::ModelLoad(format!(
            "{}: classifier manifests must declare value_range = \"unit\"",
            manifest_path.display()
        )));
    }
    let channels = manifest.channels(manifest_path)?;
    let map = load_weights(&manifest, manifest_path)?;
    let inner = ToyCnn::<T>::from_tensor_map(&map)?;
    let weight_channels = map.hyper("in_channels")? as usize;
    if weight_channels != channels {
        return Err(Error::shape(
            &[weight_channels],
            &[channels],
        ));
    }
    if let Some(k) = manifest.class_count {
        if k != inner.class_count() {
            return Err(Error::ModelLoad(format!(
                "{}: manifest declares {k} classes, weights have {}",
                manifest_path.display(),
                inner.class_count()
            )));
        }
    }
    let (mean, std) = normalization::<T>(&manifest, manifest_path, channels)?;
    let model = NormalizedClassifier { inner, mean, std };
    // Smoke pass: the declared shape must run and produce finite logits.
    let zeros = ImageBatch::<T>::zeros(
        (1, channels, manifest.input_shape[1], manifest.input_shape[2]),
        RangeTag::Unit,
    );
    let logits = model.logits(&zeros).map_err(|e| {
        Error::ModelLoad(format!(
            "{}: smoke forward pass failed: {e}",
            manifest_path.display()
        ))
    })?;
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::ModelLoad(format!(
            "{}: smoke forward pass produced non-finite logits",
            manifest_path.display()
        )));
    }
    Ok(model)
}

/// Loads a score checkpoint described by a manifest and smoke-tests it at
/// `t = 0.5` on a zero batch of the declared input shape.
pub fn load_external_score<T: Scalar>(manifest_path: &Path) -> Result<TrainedScore<T>> {
    let manifest = ModelManifest::load(manifest_path)?;
    if manifest.kind != "score" {
        return Err(Error::ModelLoad(format!(
            "{}: kind `{}` is not `score`",
            manifest_path.display(),
            manifest.kind
        )));
    }
    if manifest.range(manifest_path)? != RangeTag::Signed {
        return Err(Error::ModelLoad(format!(
            "{}: score manifests must declare value_range = \"signed\"",
            manifest_path.display()
        )));
    }
    let channels = manifest.channels(manifest_path)?;
    let map = load_weights(&manifest, manifest_path)?;
    let model = match (manifest.beta_min, manifest.beta_max) {
        (Some(beta_min), Some(beta_max)) => TrainedScore {
            unet: crate::models::score::ToyUnet::from_tensor_map(&map)?,
            schedule: DiffusionSchedule::new(beta_min, beta_max)?,
        },
        (None, None) => TrainedScore::from_tensor_map(&map)?,
        _ => {
            return Err(Error::ModelLoad(format!(
                "{}: beta_min and beta_max must be given together",
                manifest_path.display()
            )))
        }
    };
    let weight_channels = map.hyper("in_channels")? as usize;
    if weight_channels != channels {
        return Err(Error::shape(
            &[weight_channels],
            &[channels],
        ));
    }
    let zeros = ImageBatch::<T>::zeros(
        (1, channels, manifest.input_shape[1], manifest.input_shape[2]),
        RangeTag::Signed,
    );
    let score = model.evaluate(&zeros, 0.5).map_err(|e| {
        Error::ModelLoad(format!(
            "{}: smoke forward pass failed: {e}",
            manifest_path.display()
        ))
    })?;
    if score.iter().any(|v| !v.is_finite()) {
        return Err(Error::ModelLoad(format!(
            "{}: smoke forward pass produced non-finite scores",
            manifest_path.display()
        )));
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::score::ToyUnet;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn write_manifest(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
        let path = dir.join(name);
        std::fs::write(&path, body).unwrap();
        path
    }

    fn random_classifier_weights(dir: &Path) -> String {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let model = ToyCnn::<f32>::new(1, 10, &mut rng);
        let path = dir.join("classifier.json");
        model.to_tensor_map().save(&path).unwrap();
        "classifier.json".to_string()
    }

    #[test]
    fn well_formed_classifier_manifest_loads_and_smokes() {
        let dir = tempfile::tempdir().unwrap();
        let weights = random_classifier_weights(dir.path());
        let manifest = write_manifest(
            dir.path(),
            "model.toml",
            &format!(
                r#"
kind = "classifier"
weights = "{weights}"
input_shape = [1, 32, 32]
value_range = "unit"
mean = [0.5]
std = [0.25]
class_count = 10
"#
            ),
        );
        let model = load_external_classifier::<f32>(&manifest).unwrap();
        assert_eq!(model.class_count(), 10);
        let x = ImageBatch::<f32>::zeros((2, 1, 32, 32), RangeTag::Unit);
        let logits = model.logits(&x).unwrap();
        assert_eq!(logits.dim(), (2, 10));
    }

    #[test]
    fn normalization_scales_the_gradient() {
        let dir = tempfile::tempdir().unwrap();
        let weights = random_classifier_weights(dir.path());
        let plain = write_manifest(
            dir.path(),
            "plain.toml",
            &format!(
                "kind = \"classifier\"\nweights = \"{weights}\"\ninput_shape = [1, 16, 16]\nvalue_range = \"unit\"\n"
            ),
        );
        let scaled = write_manifest(
            dir.path(),
            "scaled.toml",
            &format!(
                "kind = \"classifier\"\nweights = \"{weights}\"\ninput_shape = [1, 16, 16]\nvalue_range = \"unit\"\nmean = [0.0]\nstd = [0.5]\n"
            ),
        );
        let a = load_external_classifier::<f64>(&plain).unwrap();
        let b = load_external_classifier::<f64>(&scaled).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = ImageBatch::new(
            Array4::from_shape_fn((1, 1, 16, 16), |_| {
                0.4 + 0.2 * rand::Rng::random::<f64>(&mut rng)
            }),
            RangeTag::Unit,
        )
        .unwrap();
        let labels = [2usize];
        let (_, ga) = a.input_gradient(&x, &labels).unwrap();
        // b sees x/0.5 = 2x: different logits, and its gradient carries the
        // extra 1/std factor. Verify the chain rule against a manual probe.
        let (_, gb) = b.input_gradient(&x, &labels).unwrap();
        let doubled = ImageBatch::new(x.data().mapv(|v| 2.0 * v), RangeTag::Unit).unwrap();
        let (_, ga_at_2x) = a.input_gradient(&doubled, &labels).unwrap();
        let expected = ga_at_2x.mapv(|v| v * 2.0);
        let max_rel = gb
            .iter()
            .zip(expected.iter())
            .map(|(p, q)| (p - q).abs() / q.abs().max(1e-12))
            .fold(0.0f64, f64::max);
        assert!(max_rel < 1e-10, "chain rule mismatch: {max_rel}");
        let _ = ga;
    }

    #[test]
    fn wrong_channel_count_names_both_shapes() {
        let dir = tempfile::tempdir().unwrap();
        let weights = random_classifier_weights(dir.path());
        let manifest = write_manifest(
            dir.path(),
            "model.toml",
            &format!(
                "kind = \"classifier\"\nweights = \"{weights}\"\ninput_shape = [3, 32, 32]\nvalue_range = \"unit\"\n"
            ),
        );
        let err = load_external_classifier::<f32>(&manifest).unwrap_err();
        match err {
            Error::ShapeMismatch { expected, actual } => {
                assert_eq!(expected, vec![1]);
                assert_eq!(actual, vec![3]);
            }
            other => panic!("expected ShapeMismatch, got {other}"),
        }
    }

    #[test]
    fn missing_weights_file_names_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let manifest = write_manifest(
            dir.path(),
            "model.toml",
            "kind = \"classifier\"\nweights = \"absent.json\"\ninput_shape = [1, 32, 32]\nvalue_range = \"unit\"\n",
        );
        let err = load_external_classifier::<f32>(&manifest).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("model.toml"), "message lacks manifest path: {msg}");
        assert!(msg.contains("absent.json"), "message lacks weights path: {msg}");
    }

    #[test]
    fn non_finite_smoke_output_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let model = ToyCnn::<f32>::new(1, 4, &mut rng);
        let mut map = model.to_tensor_map();
        // A bias beyond f32 range casts to infinity and poisons the logits.
        if let Some(entry) = map.tensors.get_mut("fc.b") {
            entry.data[0] = 1e308;
        }
        let path = dir.path().join("classifier.json");
        map.save(&path).unwrap();
        let manifest = write_manifest(
            dir.path(),
            "model.toml",
            "kind = \"classifier\"\nweights = \"classifier.json\"\ninput_shape = [1, 16, 16]\nvalue_range = \"unit\"\n",
        );
        let err = load_external_classifier::<f32>(&manifest).unwrap_err();
        assert!(err.to_string().contains("non-finite"));
    }

    #[test]
    fn score_manifest_round_trips_with_schedule_override() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let unet = ToyUnet::<f32>::new(1, 4, &mut rng);
        let path = dir.path().join("score.json");
        unet.to_tensor_map().save(&path).unwrap();
        let manifest = write_manifest(
            dir.path(),
            "score.toml",
            "kind = \"score\"\nweights = \"score.json\"\ninput_shape = [1, 16, 16]\nvalue_range = \"signed\"\nbeta_min = 0.2\nbeta_max = 10.0\n",
        );
        let model = load_external_score::<f32>(&manifest).unwrap();
        assert_eq!(model.schedule, DiffusionSchedule::new(0.2, 10.0).unwrap());
        let x = ImageBatch::<f32>::zeros((1, 1, 16, 16), RangeTag::Signed);
        assert_eq!(model.evaluate(&x, 0.5).unwrap().dim(), (1, 1, 16, 16));
    }

    #[test]
    fn kind_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let weights = random_classifier_weights(dir.path());
        let manifest = write_manifest(
            dir.path(),
            "model.toml",
            &format!(
                "kind = \"score\"\nweights = \"{weights}\"\ninput_shape = [1, 32, 32]\nvalue_range = \"signed\"\n"
            ),
        );
        // Declared as score but the weights are a classifier checkpoint.
        assert!(load_external_score::<f32>(&manifest).is_err());
        let manifest2 = write_manifest(
            dir.path(),
            "model2.toml",
            &format!(
                "kind = \"oracle\"\nweights = \"{weights}\"\ninput_shape = [1, 32, 32]\nvalue_range = \"unit\"\n"
            ),
        );
        assert!(load_external_classifier::<f32>(&manifest2).is_err());
    }
}
