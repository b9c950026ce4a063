//! On-disk artifact formats.
//!
//! Everything the pipeline persists goes through this module: model weights
//! as JSON tensor maps, image batches as JSON containers, training curves /
//! attack traces / spectrum histograms as CSV, image exports as lossless PNG.
//! All writers are atomic (write to a sibling temp file, then rename) so a
//! failed run never leaves a truncated artifact behind, and all containers
//! use sorted maps so identical contents serialize to identical bytes.

use crate::attack::AttackTrace;
use crate::error::{Error, Result};
use crate::image::{ImageBatch, RangeTag};
use crate::scalar::Scalar;
use crate::spectral::SpectrumHistogram;
use ndarray::{Array, ArrayBase, ArrayD, Data, Dimension, IxDyn};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

/// Schema tag of weight files.
pub const TENSOR_MAP_SCHEMA: &str = "tensor-map/1";
/// Schema tag of image-batch files.
pub const IMAGE_BATCH_SCHEMA: &str = "image-batch/1";

/// Writes `bytes` to a sibling temp file and renames it over `path`, so the
/// destination is either absent, the old content, or the full new content.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let name = path
        .file_name()
        .ok_or_else(|| Error::invalid(format!("cannot write to {}", path.display())))?;
    let tmp = path.with_file_name(format!(
        ".{}.{}.tmp",
        name.to_string_lossy(),
        std::process::id()
    ));
    fs::write(&tmp, bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| {
        let _ = fs::remove_file(&tmp);
        Error::io(path.display().to_string(), e)
    })
}

/// [`atomic_write`] for text.
pub fn write_text(path: &Path, text: &str) -> Result<()> {
    atomic_write(path, text.as_bytes())
}

/// Reads a whole text file with the path attached to any error.
pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Creates a directory and its parents.
pub fn ensure_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Hex-encoded SHA-256 of a byte string; the content hash used for caches,
/// weight identities, and config identities.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// One named tensor: row-major values plus shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorEntry {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// A named collection of tensors plus scalar hyperparameters — the native
/// weight format. Values are stored as f64 regardless of the runtime scalar,
/// so f32 weights round-trip exactly; maps are sorted, so equal contents give
/// byte-equal files and stable hashes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TensorMap {
    pub schema: String,
    /// Identifies the architecture that can consume these weights.
    pub kind: String,
    pub hyper: BTreeMap<String, f64>,
    pub tensors: BTreeMap<String, TensorEntry>,
}

impl TensorMap {
    pub fn new(kind: &str) -> Self {
        TensorMap {
            schema: TENSOR_MAP_SCHEMA.to_string(),
            kind: kind.to_string(),
            hyper: BTreeMap::new(),
            tensors: BTreeMap::new(),
        }
    }

    pub fn set_hyper(&mut self, key: &str, value: f64) {
        self.hyper.insert(key.to_string(), value);
    }

    pub fn hyper(&self, key: &str) -> Result<f64> {
        self.hyper
            .get(key)
            .copied()
            .ok_or_else(|| Error::ModelLoad(format!("hyperparameter `{key}` missing")))
    }

    pub fn insert<T, S, D>(&mut self, name: &str, arr: &ArrayBase<S, D>)
    where
        T: Scalar,
        S: Data<Elem = T>,
        D: Dimension,
    {
        self.tensors.insert(
            name.to_string(),
            TensorEntry {
                shape: arr.shape().to_vec(),
                data: arr.iter().map(|&v| v.to_f64_c()).collect(),
            },
        );
    }

    /// Extracts a tensor into the requested dimensionality.
    pub fn get<T: Scalar, D: Dimension>(&self, name: &str) -> Result<Array<T, D>> {
        let entry = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::ModelLoad(format!("tensor `{name}` missing")))?;
        let expected: usize = entry.shape.iter().product();
        if expected != entry.data.len() {
            return Err(Error::ModelLoad(format!(
                "tensor `{name}` declares shape {:?} ({} values) but holds {}",
                entry.shape,
                expected,
                entry.data.len()
            )));
        }
        let values: Vec<T> = entry.data.iter().map(|&v| T::from_f64_c(v)).collect();
        let dynamic = ArrayD::from_shape_vec(IxDyn(&entry.shape), values)
            .map_err(|e| Error::ModelLoad(format!("tensor `{name}`: {e}")))?;
        dynamic.into_dimensionality::<D>().map_err(|_| {
            Error::ModelLoad(format!(
                "tensor `{name}` has rank {}, a different rank was requested",
                entry.shape.len()
            ))
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self).map_err(|e| Error::Serde(e.to_string()))?;
        atomic_write(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let map: TensorMap = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
        if map.schema != TENSOR_MAP_SCHEMA {
            return Err(Error::ModelLoad(format!(
                "{}: schema `{}` is not `{TENSOR_MAP_SCHEMA}`",
                path.display(),
                map.schema
            )));
        }
        Ok(map)
    }

    /// Hash of the canonical serialization; identical weights hash equal.
    pub fn content_hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("tensor map serializes");
        sha256_hex(&bytes)
    }
}

/// Image batch container: the interchange format between the attack, purify,
/// and eval commands.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchFile {
    pub schema: String,
    /// `[batch, channels, height, width]`
    pub shape: Vec<usize>,
    pub range: RangeTag,
    pub data: Vec<f64>,
    pub labels: Option<Vec<usize>>,
    pub meta: BTreeMap<String, String>,
}

impl BatchFile {
    pub fn from_batch<T: Scalar>(batch: &ImageBatch<T>, labels: Option<&[usize]>) -> Self {
        BatchFile {
            schema: IMAGE_BATCH_SCHEMA.to_string(),
            shape: batch.data().shape().to_vec(),
            range: batch.range_tag(),
            data: batch.data().iter().map(|&v| v.to_f64_c()).collect(),
            labels: labels.map(<[usize]>::to_vec),
            meta: BTreeMap::new(),
        }
    }

    pub fn to_batch<T: Scalar>(&self) -> Result<ImageBatch<T>> {
        if self.shape.len() != 4 {
            return Err(Error::invalid(format!(
                "batch shape must have 4 axes, got {:?}",
                self.shape
            )));
        }
        let dims = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let expected: usize = self.shape.iter().product();
        if expected != self.data.len() {
            return Err(Error::invalid(format!(
                "batch declares {} values but holds {}",
                expected,
                self.data.len()
            )));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != dims.0 {
                return Err(Error::invalid(format!(
                    "batch of {} images carries {} labels",
                    dims.0,
                    labels.len()
                )));
            }
        }
        let values: Vec<T> = self.data.iter().map(|&v| T::from_f64_c(v)).collect();
        let data = ndarray::Array4::from_shape_vec(dims, values)
            .map_err(|e| Error::invalid(e.to_string()))?;
        ImageBatch::new(data, self.range)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = serde_json::to_vec(self).map_err(|e| Error::Serde(e.to_string()))?;
        atomic_write(path, &bytes)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let file: BatchFile = serde_json::from_slice(&bytes)
            .map_err(|e| Error::Serde(format!("{}: {e}", path.display())))?;
        if file.schema != IMAGE_BATCH_SCHEMA {
            return Err(Error::invalid(format!(
                "{}: schema `{}` is not `{IMAGE_BATCH_SCHEMA}`",
                path.display(),
                file.schema
            )));
        }
        Ok(file)
    }
}

fn finish_csv(path: &Path, writer: csv::Writer<Vec<u8>>) -> Result<()> {
    let bytes = writer
        .into_inner()
        .map_err(|e| Error::Serde(e.to_string()))?;
    atomic_write(path, &bytes)
}

/// Two-column CSV, one row per epoch/step.
pub fn write_curve_csv(path: &Path, headers: (&str, &str), rows: &[(f64, f64)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([headers.0, headers.1])
        .map_err(|e| Error::Serde(e.to_string()))?;
    for &(a, b) in rows {
        w.write_record([a.to_string(), b.to_string()])
            .map_err(|e| Error::Serde(e.to_string()))?;
    }
    finish_csv(path, w)
}

/// Attack optimization trace, one row per evaluated iteration.
pub fn write_trace_csv(path: &Path, trace: &AttackTrace) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["iteration", "objective", "distortion", "cross_entropy"])
        .map_err(|e| Error::Serde(e.to_string()))?;
    for row in &trace.rows {
        w.write_record([
            row.iteration.to_string(),
            row.objective.to_string(),
            row.distortion.to_string(),
            row.cross_entropy.to_string(),
        ])
        .map_err(|e| Error::Serde(e.to_string()))?;
    }
    finish_csv(path, w)
}

/// Radial spectrum histogram: `radius, log_energy` per bin.
pub fn write_histogram_csv<T: Scalar>(path: &Path, hist: &SpectrumHistogram<T>) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["radius", "log_energy"])
        .map_err(|e| Error::Serde(e.to_string()))?;
    for &(r, v) in &hist.radial_bins {
        w.write_record([r.to_f64_c().to_string(), v.to_f64_c().to_string()])
            .map_err(|e| Error::Serde(e.to_string()))?;
    }
    finish_csv(path, w)
}

fn quantize_unit(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn save_pixels(path: &Path, c: usize, h: usize, w: usize, pixels: Vec<f64>) -> Result<()> {
    let io_err = |e: image::ImageError| Error::io(path.display().to_string(), std::io::Error::other(e.to_string()));
    match c {
        1 => {
            let raw: Vec<u8> = pixels.iter().map(|&v| quantize_unit(v)).collect();
            let img = image::ImageBuffer::<image::Luma<u8>, _>::from_raw(w as u32, h as u32, raw)
                .expect("buffer sized to image");
            img.save(path).map_err(io_err)
        }
        3 => {
            // Planar (C,H,W) to interleaved RGB.
            let plane = h * w;
            let mut raw = Vec::with_capacity(3 * plane);
            for p in 0..plane {
                for ch in 0..3 {
                    raw.push(quantize_unit(pixels[ch * plane + p]));
                }
            }
            let img = image::ImageBuffer::<image::Rgb<u8>, _>::from_raw(w as u32, h as u32, raw)
                .expect("buffer sized to image");
            img.save(path).map_err(io_err)
        }
        _ => Err(Error::invalid(format!(
            "PNG export supports 1 or 3 channels, got {c}"
        ))),
    }
}

/// Exports one image of a unit-range batch as 8-bit grayscale or RGB PNG.
pub fn save_unit_png<T: Scalar>(path: &Path, batch: &ImageBatch<T>, index: usize) -> Result<()> {
    batch.require_range(RangeTag::Unit)?;
    let (b, c, h, w) = batch.dims();
    if index >= b {
        return Err(Error::invalid(format!(
            "image index {index} out of range for batch of {b}"
        )));
    }
    let pixels: Vec<f64> = batch
        .data()
        .index_axis(ndarray::Axis(0), index)
        .iter()
        .map(|&v| v.to_f64_c())
        .collect();
    save_pixels(path, c, h, w, pixels)
}

/// Exports the difference `other - base` for one image, scaled by `factor`
/// and centered on mid-gray, so perturbations of magnitude ~1e-2 are visible.
pub fn save_magnified_diff_png<T: Scalar>(
    path: &Path,
    base: &ImageBatch<T>,
    other: &ImageBatch<T>,
    index: usize,
    factor: f64,
) -> Result<()> {
    let (b, c, h, w) = base.dims();
    if other.dims() != base.dims() {
        return Err(Error::shape(base.data().shape(), other.data().shape()));
    }
    if index >= b {
        return Err(Error::invalid(format!(
            "image index {index} out of range for batch of {b}"
        )));
    }
    let base_img = base.data().index_axis(ndarray::Axis(0), index);
    let other_img = other.data().index_axis(ndarray::Axis(0), index);
    let pixels: Vec<f64> = base_img
        .iter()
        .zip(other_img.iter())
        .map(|(&a, &o)| 0.5 + factor * (o.to_f64_c() - a.to_f64_c()))
        .collect();
    save_pixels(path, c, h, w, pixels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array1, Array4};

    #[test]
    fn tensor_map_round_trips_arrays_and_hypers() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.json");
        let mut map = TensorMap::new("test-net/1");
        map.set_hyper("class_count", 10.0);
        let w = Array4::from_shape_fn((2, 3, 3, 3), |(a, b, c, d)| {
            (a * 27 + b * 9 + c * 3 + d) as f32 * 0.25 - 1.0
        });
        let b = Array1::from_vec(vec![0.5f32, -0.5]);
        map.insert("conv.w", &w);
        map.insert("conv.b", &b);
        map.save(&path).unwrap();

        let loaded = TensorMap::load(&path).unwrap();
        assert_eq!(loaded.kind, "test-net/1");
        assert_eq!(loaded.hyper("class_count").unwrap(), 10.0);
        let w2: Array4<f32> = loaded.get("conv.w").unwrap();
        let b2: Array1<f32> = loaded.get("conv.b").unwrap();
        assert_eq!(w, w2);
        assert_eq!(b, b2);
        assert_eq!(map.content_hash(), loaded.content_hash());
    }

    #[test]
    fn tensor_map_reports_missing_and_misshapen_tensors() {
        let mut map = TensorMap::new("test-net/1");
        map.insert("b", &Array1::from_vec(vec![1.0f64, 2.0]));
        let missing = map.get::<f64, ndarray::Ix1>("a").unwrap_err();
        assert!(missing.to_string().contains("`a`"));
        let wrong_rank = map.get::<f64, ndarray::Ix4>("b").unwrap_err();
        assert!(wrong_rank.to_string().contains("rank"));
    }

    #[test]
    fn tensor_map_rejects_foreign_schema() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("weights.json");
        let mut map = TensorMap::new("test-net/1");
        map.schema = "something-else/9".to_string();
        let bytes = serde_json::to_vec(&map).unwrap();
        std::fs::write(&path, bytes).unwrap();
        let err = TensorMap::load(&path).unwrap_err();
        assert!(err.to_string().contains("something-else/9"));
    }

    #[test]
    fn batch_file_round_trips_data_range_and_labels() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("batch.json");
        let data = Array4::from_shape_fn((2, 1, 4, 4), |(b, _, y, x)| {
            (b * 16 + y * 4 + x) as f32 / 32.0
        });
        let batch = ImageBatch::new(data, RangeTag::Unit).unwrap();
        let mut file = BatchFile::from_batch(&batch, Some(&[3, 7]));
        file.meta.insert("origin".into(), "test".into());
        file.save(&path).unwrap();

        let loaded = BatchFile::load(&path).unwrap();
        assert_eq!(loaded.labels.as_deref(), Some(&[3usize, 7][..]));
        assert_eq!(loaded.meta["origin"], "test");
        let batch2: ImageBatch<f32> = loaded.to_batch().unwrap();
        assert_eq!(batch2.range_tag(), RangeTag::Unit);
        assert_eq!(batch.data(), batch2.data());
    }

    #[test]
    fn batch_file_rejects_label_count_mismatch() {
        let data = Array4::<f64>::zeros((2, 1, 2, 2));
        let batch = ImageBatch::new(data, RangeTag::Unit).unwrap();
        let mut file = BatchFile::from_batch(&batch, Some(&[1, 2]));
        file.labels = Some(vec![1, 2, 3]);
        let err = file.to_batch::<f64>().unwrap_err();
        assert!(err.to_string().contains("labels"));
    }

    #[test]
    fn curve_csv_has_header_and_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        write_curve_csv(&path, ("loss", "val_accuracy_pct"), &[(0.9, 55.0), (0.4, 80.5)])
            .unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "loss,val_accuracy_pct");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].starts_with("0.4,"));
    }

    #[test]
    fn png_export_round_trips_dimensions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.png");
        let data = Array4::from_shape_fn((1, 1, 5, 7), |(_, _, y, x)| (y * 7 + x) as f64 / 34.0);
        let batch = ImageBatch::new(data, RangeTag::Unit).unwrap();
        save_unit_png(&path, &batch, 0).unwrap();
        let img = image::open(&path).unwrap();
        assert_eq!((img.width(), img.height()), (7, 5));
    }

    #[test]
    fn magnified_diff_centers_on_mid_gray() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("diff.png");
        let base =
            ImageBatch::new(Array4::from_elem((1, 1, 4, 4), 0.5f64), RangeTag::Unit).unwrap();
        let mut shifted = base.clone();
        shifted.data_mut()[[0, 0, 0, 0]] += 0.01;
        save_magnified_diff_png(&path, &base, &shifted, 0, 20.0).unwrap();
        let img = image::open(&path).unwrap().to_luma8();
        // 0.5 + 20 * 0.01 = 0.7 at the touched pixel, 0.5 elsewhere.
        assert_eq!(img.get_pixel(0, 0).0[0], 179);
        assert_eq!(img.get_pixel(1, 1).0[0], 128);
    }

    #[test]
    fn atomic_write_replaces_existing_content() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.txt");
        atomic_write(&path, b"first").unwrap();
        atomic_write(&path, b"second").unwrap();
        assert_eq!(std::fs::read_to_string(&path).unwrap(), "second");
        // No temp files left behind.
        let leftovers: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| {
                e.as_ref()
                    .unwrap()
                    .file_name()
                    .to_string_lossy()
                    .ends_with(".tmp")
            })
            .collect();
        assert!(leftovers.is_empty());
    }
}
