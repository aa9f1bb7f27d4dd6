//! Model and dataset file formats.
//!
//! A model is stored as a JSON manifest plus one raw blob file per tensor.
//! Blobs are little-endian `f32` in row-major order and live next to the
//! manifest. Datasets load from IDX image/label file pairs (big-endian
//! headers, `u8` payload scaled to `[0,1]`).

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::model::{LayerOp, LayerRecord, ModelGraph};
use crate::tensor::Tensor;

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLayer {
    name: String,
    #[serde(flatten)]
    op: LayerOp,
    #[serde(skip_serializing_if = "Option::is_none")]
    weight_blob: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bias_blob: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    schema_version: u32,
    name: String,
    input_shape: Vec<usize>,
    layers: Vec<ManifestLayer>,
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Writes `bytes` to `path` via a sibling temp file and an atomic rename, so
/// a crash mid-write never leaves a truncated artifact behind.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let stem = path.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let tmp = dir.join(format!(".{stem}.tmp"));
    fs::write(&tmp, bytes).map_err(|e| Error::io(tmp.display().to_string(), e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path.display().to_string(), e))
}

fn blob_bytes(tensor: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(tensor.len() * 4);
    for v in tensor.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

fn tensor_from_blob(path: &Path, dims: Vec<usize>, layer: &str) -> Result<Tensor> {
    let bytes = read_file(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Io {
            path: path.display().to_string(),
            source: std::io::Error::new(
                std::io::ErrorKind::InvalidData,
                "blob length is not a multiple of 4",
            ),
        });
    }
    let expected: usize = dims.iter().product();
    let actual = bytes.len() / 4;
    if actual != expected {
        return Err(Error::BlobShape { layer: layer.to_string(), expected, actual });
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Tensor::new(dims, data)
}

fn expected_weight_dims(op: &LayerOp) -> Option<Vec<usize>> {
    match op {
        LayerOp::Dense { in_features, out_features } => Some(vec![*out_features, *in_features]),
        LayerOp::Conv2d { in_channels, out_channels, kernel, .. } => {
            Some(vec![*out_channels, *in_channels, *kernel, *kernel])
        }
        _ => None,
    }
}

fn expected_bias_dims(op: &LayerOp) -> Option<Vec<usize>> {
    match op {
        LayerOp::Dense { out_features, .. } => Some(vec![*out_features]),
        LayerOp::Conv2d { out_channels, .. } => Some(vec![*out_channels]),
        _ => None,
    }
}

/// Loads a model from its JSON manifest, pulling tensor blobs from the
/// manifest's directory and validating shape composition.
pub fn load_model(manifest_path: impl AsRef<Path>) -> Result<ModelGraph> {
    let manifest_path = manifest_path.as_ref();
    let bytes = read_file(manifest_path)?;
    let manifest: Manifest = serde_json::from_slice(&bytes)
        .map_err(|e| Error::Json { path: manifest_path.display().to_string(), source: e })?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));

    let mut layers = Vec::with_capacity(manifest.layers.len());
    for ml in manifest.layers {
        let weights = match (&ml.weight_blob, expected_weight_dims(&ml.op)) {
            (Some(blob), Some(dims)) => Some(tensor_from_blob(&dir.join(blob), dims, &ml.name)?),
            (None, Some(_)) => {
                return Err(Error::Shape {
                    layer: ml.name.clone(),
                    detail: "weight-bearing layer has no weight_blob".into(),
                })
            }
            (Some(_), None) => {
                return Err(Error::Shape {
                    layer: ml.name.clone(),
                    detail: format!("{} layer cannot carry weights", ml.op.kind_name()),
                })
            }
            (None, None) => None,
        };
        let bias = match (&ml.bias_blob, expected_bias_dims(&ml.op)) {
            (Some(blob), Some(dims)) => Some(tensor_from_blob(&dir.join(blob), dims, &ml.name)?),
            (Some(_), None) => {
                return Err(Error::Shape {
                    layer: ml.name.clone(),
                    detail: format!("{} layer cannot carry a bias", ml.op.kind_name()),
                })
            }
            _ => None,
        };
        layers.push(LayerRecord { name: ml.name, op: ml.op, weights, bias });
    }

    let model = ModelGraph { name: manifest.name, input_shape: manifest.input_shape, layers };
    model.validate()?;
    Ok(model)
}

/// Saves a model as `<path>` (JSON manifest) plus one blob per tensor in the
/// same directory. Every file is written with a temp-then-rename replace.
pub fn save_model(model: &ModelGraph, manifest_path: impl AsRef<Path>) -> Result<PathBuf> {
    let manifest_path = manifest_path.as_ref();
    model.validate()?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }

    let mut layers = Vec::with_capacity(model.layers.len());
    for layer in &model.layers {
        let weight_blob = match &layer.weights {
            Some(w) => {
                let blob = format!("{}.{}.w.bin", model.name, layer.name);
                write_atomic(&dir.join(&blob), &blob_bytes(w))?;
                Some(blob)
            }
            None => None,
        };
        let bias_blob = match &layer.bias {
            Some(b) => {
                let blob = format!("{}.{}.b.bin", model.name, layer.name);
                write_atomic(&dir.join(&blob), &blob_bytes(b))?;
                Some(blob)
            }
            None => None,
        };
        layers.push(ManifestLayer {
            name: layer.name.clone(),
            op: layer.op.clone(),
            weight_blob,
            bias_blob,
        });
    }

    let manifest = Manifest {
        schema_version: MODEL_SCHEMA_VERSION,
        name: model.name.clone(),
        input_shape: model.input_shape.clone(),
        layers,
    };
    let json = serde_json::to_vec_pretty(&manifest).expect("manifest serialization cannot fail");
    write_atomic(manifest_path, &json)?;
    Ok(manifest_path.to_path_buf())
}

// ── IDX datasets ─────────────────────────────────────────────────────────

fn idx_err(path: &Path, detail: impl Into<String>) -> Error {
    Error::Idx { path: path.display().to_string(), detail: detail.into() }
}

fn read_u32_be(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf).map_err(|_| idx_err(path, "truncated header"))?;
    Ok(u32::from_be_bytes(buf))
}

fn read_idx_u8(path: &Path, expected_ndims: u8) -> Result<(Vec<usize>, Vec<u8>)> {
    let bytes = read_file(path)?;
    let mut r = bytes.as_slice();
    let magic = read_u32_be(&mut r, path)?;
    let dtype = ((magic >> 8) & 0xff) as u8;
    let ndims = (magic & 0xff) as u8;
    if magic >> 16 != 0 || dtype != 0x08 {
        return Err(idx_err(path, format!("bad magic 0x{magic:08x}, expected u8 idx data")));
    }
    if ndims != expected_ndims {
        return Err(idx_err(path, format!("expected {expected_ndims} dims, header declares {ndims}")));
    }
    let mut dims = Vec::with_capacity(ndims as usize);
    for _ in 0..ndims {
        dims.push(read_u32_be(&mut r, path)? as usize);
    }
    let expected: usize = dims.iter().product();
    if r.len() != expected {
        return Err(idx_err(path, format!("payload holds {} bytes, dims require {expected}", r.len())));
    }
    Ok((dims, r.to_vec()))
}

/// Loads an IDX image/label pair into a dataset. Pixels are scaled by 1/255
/// into `[0,1]`; labels stay as class indices.
pub fn load_idx_dataset(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<Dataset> {
    let images_path = images_path.as_ref();
    let labels_path = labels_path.as_ref();

    let (img_dims, img_bytes) = read_idx_u8(images_path, 3)?;
    let (lab_dims, lab_bytes) = read_idx_u8(labels_path, 1)?;
    let n = img_dims[0];
    if lab_dims[0] != n {
        return Err(idx_err(
            labels_path,
            format!("label count {} does not match image count {n}", lab_dims[0]),
        ));
    }

    let inputs: Vec<f32> = img_bytes.iter().map(|&b| f32::from(b) / 255.0).collect();
    let labels: Vec<usize> = lab_bytes.iter().map(|&b| b as usize).collect();
    let num_classes = labels.iter().copied().max().map_or(1, |m| m + 1);
    Dataset::new(
        Tensor::new(vec![n, img_dims[1], img_dims[2]], inputs)?,
        labels,
        num_classes,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::LayerOp;
    use tempfile::tempdir;

    fn small_model() -> ModelGraph {
        let w = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.0, 0.0, 1.5, -0.25]).unwrap();
        let b = Tensor::new(vec![2], vec![0.1, -0.1]).unwrap();
        ModelGraph {
            name: "tiny".into(),
            input_shape: vec![3],
            layers: vec![
                LayerRecord {
                    name: "fc1".into(),
                    op: LayerOp::Dense { in_features: 3, out_features: 2 },
                    weights: Some(w),
                    bias: Some(b),
                },
                LayerRecord::weightless("act1", LayerOp::Relu),
            ],
        }
    }

    #[test]
    fn save_then_load_round_trips_exactly() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("tiny.json");
        let model = small_model();
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded, model);
    }

    #[test]
    fn save_overwrites_previous_contents() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("tiny.json");
        let mut model = small_model();
        save_model(&model, &path).unwrap();
        model.layers[0].weights.as_mut().unwrap().data_mut()[0] = 9.0;
        save_model(&model, &path).unwrap();
        let loaded = load_model(&path).unwrap();
        assert_eq!(loaded.layers[0].weights.as_ref().unwrap().data()[0], 9.0);
    }

    #[test]
    fn weightless_graph_saves_with_zero_blobs() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("passthrough.json");
        let model = ModelGraph {
            name: "passthrough".into(),
            input_shape: vec![4],
            layers: vec![
                LayerRecord::weightless("act", LayerOp::Relu),
                LayerRecord::weightless("flat", LayerOp::Flatten),
            ],
        };
        save_model(&model, &path).unwrap();
        let blobs = std::fs::read_dir(dir.path())
            .unwrap()
            .filter(|e| {
                e.as_ref().unwrap().path().extension().is_some_and(|x| x == "bin")
            })
            .count();
        assert_eq!(blobs, 0);
        assert_eq!(load_model(&path).unwrap(), model);
    }

    #[test]
    fn missing_blob_is_an_io_error() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("tiny.json");
        save_model(&small_model(), &path).unwrap();
        std::fs::remove_file(dir.path().join("tiny.fc1.w.bin")).unwrap();
        assert!(matches!(load_model(&path), Err(Error::Io { .. })));
    }

    #[test]
    fn truncated_blob_names_the_layer() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("tiny.json");
        save_model(&small_model(), &path).unwrap();
        std::fs::write(dir.path().join("tiny.fc1.w.bin"), [0u8; 8]).unwrap();
        match load_model(&path) {
            Err(Error::BlobShape { layer, expected, actual }) => {
                assert_eq!(layer, "fc1");
                assert_eq!(expected, 6);
                assert_eq!(actual, 2);
            }
            other => panic!("expected blob shape error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_kind_is_rejected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(
            &path,
            br#"{"schema_version":1,"name":"bad","input_shape":[3],
                "layers":[{"name":"mystery","kind":"gelu"}]}"#,
        )
        .unwrap();
        assert!(matches!(load_model(&path), Err(Error::Json { .. })));
    }

    fn write_idx3(path: &Path, n: usize, rows: usize, cols: usize, pix: &[u8]) {
        let mut bytes = vec![0, 0, 0x08, 3];
        bytes.extend_from_slice(&(n as u32).to_be_bytes());
        bytes.extend_from_slice(&(rows as u32).to_be_bytes());
        bytes.extend_from_slice(&(cols as u32).to_be_bytes());
        bytes.extend_from_slice(pix);
        std::fs::write(path, bytes).unwrap();
    }

    fn write_idx1(path: &Path, labels: &[u8]) {
        let mut bytes = vec![0, 0, 0x08, 1];
        bytes.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        bytes.extend_from_slice(labels);
        std::fs::write(path, bytes).unwrap();
    }

    #[test]
    fn idx_pair_loads_and_scales() {
        let dir = tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lab = dir.path().join("lab.idx");
        write_idx3(&img, 2, 2, 2, &[0, 255, 128, 64, 255, 0, 0, 32]);
        write_idx1(&lab, &[3, 1]);
        let ds = load_idx_dataset(&img, &lab).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.num_classes, 4);
        assert_eq!(ds.inputs.dims(), &[2, 2, 2]);
        assert_eq!(ds.inputs.data()[0], 0.0);
        assert_eq!(ds.inputs.data()[1], 1.0);
        assert!((ds.inputs.data()[2] - 128.0 / 255.0).abs() < 1e-7);
        assert_eq!(ds.labels, vec![3, 1]);
    }

    #[test]
    fn idx_bad_magic_and_count_mismatch_are_rejected() {
        let dir = tempdir().unwrap();
        let img = dir.path().join("img.idx");
        let lab = dir.path().join("lab.idx");

        std::fs::write(&img, [0u8, 0, 0x09, 3, 0, 0, 0, 0]).unwrap();
        write_idx1(&lab, &[0]);
        assert!(matches!(load_idx_dataset(&img, &lab), Err(Error::Idx { .. })));

        write_idx3(&img, 2, 1, 1, &[1, 2]);
        write_idx1(&lab, &[0, 1, 2]);
        assert!(matches!(load_idx_dataset(&img, &lab), Err(Error::Idx { .. })));
    }
}
