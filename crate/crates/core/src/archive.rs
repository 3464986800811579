//! The NWA v1 weight container.
//!
//! Layout on disk:
//!
//! ```text
//! bytes 0..8      ASCII magic "NWARCH01"
//! bytes 8..16     u64 little-endian manifest length L
//! bytes 16..16+L  UTF-8 JSON manifest
//! rest            blob of little-endian f32 values
//! ```
//!
//! All offsets in the manifest are relative to the start of the blob. Dense
//! weights are stored row-major with index `in_idx * fan_out + out_idx`; conv
//! kernels use `((kh * kernel_w + kw) * in_channels + in_idx) * out_channels + out_idx`.

use std::fs;
use std::ops::Range;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"NWARCH01";
pub const FORMAT_VERSION: u32 = 1;

/// `(gamma, moving_variance, epsilon)` of one batch-norm layer.
pub type BatchNormParts = (Vec<f32>, Vec<f32>, f64);
const HEADER_LEN: usize = 16;

#[derive(Debug, Error)]
pub enum ArchiveError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("file too short to hold an NWA header")]
    Truncated,
    #[error("bad magic: expected NWARCH01")]
    BadMagic,
    #[error("manifest length {len} exceeds file size")]
    ManifestLength { len: u64 },
    #[error("manifest is not valid JSON: {0}")]
    ManifestJson(#[from] serde_json::Error),
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("unsupported dtype {0:?}; only float32 is supported")]
    UnsupportedDtype(String),
    #[error("layer {layer}: {what}")]
    InvalidShape { layer: String, what: String },
    #[error("layer {layer}: {field} range {start}..{end} exceeds blob of {blob_len} bytes")]
    OutOfBounds {
        layer: String,
        field: &'static str,
        start: u64,
        end: u64,
        blob_len: usize,
    },
    #[error("layer {layer}: {field} offset {offset} is not 4-byte aligned")]
    Misaligned {
        layer: String,
        field: &'static str,
        offset: u64,
    },
    #[error("blob ranges overlap: {first} and {second}")]
    Overlap { first: String, second: String },
    #[error("layer {layer}: non-finite value in {field}")]
    NonFinite { layer: String, field: &'static str },
    #[error("layer {layer}: invalid batch norm: {what}")]
    InvalidBatchNorm { layer: String, what: String },
    #[error("shape mismatch between {prev} (out {prev_out}) and {next} (in {next_in})")]
    ShapeMismatch {
        prev: String,
        prev_out: usize,
        next: String,
        next_in: usize,
    },
    #[error("layer index {0} out of range")]
    NoSuchLayer(usize),
    #[error("replacement for {field} has {got} values, expected {expected}")]
    LengthMismatch {
        field: &'static str,
        got: usize,
        expected: usize,
    },
}

pub type Result<T> = std::result::Result<T, ArchiveError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Conv2d,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormSpec {
    pub gamma_offset: u64,
    pub moving_variance_offset: u64,
    pub epsilon: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// `[fan_in, fan_out]` for dense, `[kernel_h, kernel_w, in_channels, out_channels]` for conv.
    pub shape: Vec<usize>,
    pub weight_offset: u64,
    pub bias_offset: Option<u64>,
    pub batchnorm: Option<BatchNormSpec>,
}

impl LayerSpec {
    pub fn weight_count(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn in_units(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.shape[0],
            LayerKind::Conv2d => self.shape[2],
        }
    }

    pub fn out_units(&self) -> usize {
        match self.kind {
            LayerKind::Dense => self.shape[1],
            LayerKind::Conv2d => self.shape[3],
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    version: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    dtype: Option<String>,
    layers: Vec<LayerSpec>,
}

/// A validated set of layer weights backed by a raw f32 blob.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightArchive {
    version: u32,
    layers: Vec<LayerSpec>,
    blob: Vec<u8>,
}

/// Per-layer values used to assemble an archive without computing offsets by hand.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerData {
    pub name: String,
    pub kind: LayerKind,
    pub shape: Vec<usize>,
    pub weights: Vec<f32>,
    pub bias: Option<Vec<f32>>,
    pub batchnorm: Option<BatchNormData>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormData {
    pub gamma: Vec<f32>,
    pub moving_variance: Vec<f32>,
    pub epsilon: f64,
}

impl LayerData {
    pub fn dense(
        name: impl Into<String>,
        fan_in: usize,
        fan_out: usize,
        weights: Vec<f32>,
    ) -> Self {
        LayerData {
            name: name.into(),
            kind: LayerKind::Dense,
            shape: vec![fan_in, fan_out],
            weights,
            bias: None,
            batchnorm: None,
        }
    }

    pub fn conv2d(name: impl Into<String>, kernel: [usize; 4], weights: Vec<f32>) -> Self {
        LayerData {
            name: name.into(),
            kind: LayerKind::Conv2d,
            shape: kernel.to_vec(),
            weights,
            bias: None,
            batchnorm: None,
        }
    }

    pub fn with_bias(mut self, bias: Vec<f32>) -> Self {
        self.bias = Some(bias);
        self
    }

    pub fn with_batchnorm(mut self, bn: BatchNormData) -> Self {
        self.batchnorm = Some(bn);
        self
    }
}

fn push_f32s(blob: &mut Vec<u8>, values: &[f32]) -> u64 {
    let offset = blob.len() as u64;
    for v in values {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    offset
}

impl WeightArchive {
    /// Validates and wraps an already-laid-out manifest and blob.
    pub fn new(layers: Vec<LayerSpec>, blob: Vec<u8>) -> Result<Self> {
        let archive = WeightArchive {
            version: FORMAT_VERSION,
            layers,
            blob,
        };
        archive.validate()?;
        Ok(archive)
    }

    pub fn empty() -> Self {
        WeightArchive {
            version: FORMAT_VERSION,
            layers: Vec::new(),
            blob: Vec::new(),
        }
    }

    /// Lays the given layers out contiguously (weights, bias, gamma, variance per layer).
    pub fn from_layers(layers: Vec<LayerData>) -> Result<Self> {
        let mut blob = Vec::new();
        let mut specs = Vec::with_capacity(layers.len());
        for layer in layers {
            if layer.weights.len() != layer.shape.iter().product::<usize>() {
                return Err(ArchiveError::LengthMismatch {
                    field: "weights",
                    got: layer.weights.len(),
                    expected: layer.shape.iter().product(),
                });
            }
            let weight_offset = push_f32s(&mut blob, &layer.weights);
            let bias_offset = layer.bias.as_ref().map(|b| push_f32s(&mut blob, b));
            let batchnorm = layer.batchnorm.as_ref().map(|bn| BatchNormSpec {
                gamma_offset: push_f32s(&mut blob, &bn.gamma),
                moving_variance_offset: push_f32s(&mut blob, &bn.moving_variance),
                epsilon: bn.epsilon,
            });
            specs.push(LayerSpec {
                name: layer.name,
                kind: layer.kind,
                shape: layer.shape,
                weight_offset,
                bias_offset,
                batchnorm,
            });
        }
        Self::new(specs, blob)
    }

    pub fn version(&self) -> u32 {
        self.version
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn blob(&self) -> &[u8] {
        &self.blob
    }

    pub fn is_dense_only(&self) -> bool {
        self.layers.iter().all(|l| l.kind == LayerKind::Dense)
    }

    fn layer(&self, index: usize) -> Result<&LayerSpec> {
        self.layers
            .get(index)
            .ok_or(ArchiveError::NoSuchLayer(index))
    }

    fn read_f32s(&self, offset: u64, count: usize) -> Vec<f32> {
        let start = offset as usize;
        self.blob[start..start + 4 * count]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect()
    }

    fn write_f32s(&mut self, offset: u64, values: &[f32]) {
        let start = offset as usize;
        for (chunk, v) in self.blob[start..start + 4 * values.len()]
            .chunks_exact_mut(4)
            .zip(values)
        {
            chunk.copy_from_slice(&v.to_le_bytes());
        }
    }

    pub fn weights(&self, index: usize) -> Result<Vec<f32>> {
        let spec = self.layer(index)?;
        Ok(self.read_f32s(spec.weight_offset, spec.weight_count()))
    }

    pub fn bias(&self, index: usize) -> Result<Option<Vec<f32>>> {
        let spec = self.layer(index)?;
        Ok(spec
            .bias_offset
            .map(|o| self.read_f32s(o, spec.out_units())))
    }

    /// Returns `(gamma, moving_variance, epsilon)` when the layer carries batch norm.
    pub fn batchnorm(&self, index: usize) -> Result<Option<BatchNormParts>> {
        let spec = self.layer(index)?;
        Ok(spec.batchnorm.as_ref().map(|bn| {
            (
                self.read_f32s(bn.gamma_offset, spec.out_units()),
                self.read_f32s(bn.moving_variance_offset, spec.out_units()),
                bn.epsilon,
            )
        }))
    }

    /// Copy of this archive with one layer's weights replaced in place.
    pub fn with_weights(&self, index: usize, weights: &[f32]) -> Result<Self> {
        let spec = self.layer(index)?;
        if weights.len() != spec.weight_count() {
            return Err(ArchiveError::LengthMismatch {
                field: "weights",
                got: weights.len(),
                expected: spec.weight_count(),
            });
        }
        if let Some(layer) = weights
            .iter()
            .any(|w| !w.is_finite())
            .then(|| spec.name.clone())
        {
            return Err(ArchiveError::NonFinite {
                layer,
                field: "weights",
            });
        }
        let offset = spec.weight_offset;
        let mut out = self.clone();
        out.write_f32s(offset, weights);
        Ok(out)
    }

    fn validate(&self) -> Result<()> {
        if self.version != FORMAT_VERSION {
            return Err(ArchiveError::UnsupportedVersion(self.version));
        }
        let mut ranges: Vec<(Range<u64>, String)> = Vec::new();
        for spec in &self.layers {
            let expected_rank = match spec.kind {
                LayerKind::Dense => 2,
                LayerKind::Conv2d => 4,
            };
            if spec.shape.len() != expected_rank {
                return Err(ArchiveError::InvalidShape {
                    layer: spec.name.clone(),
                    what: format!("expected rank {expected_rank}, got {:?}", spec.shape),
                });
            }
            if spec.shape.contains(&0) {
                return Err(ArchiveError::InvalidShape {
                    layer: spec.name.clone(),
                    what: format!("zero dimension in {:?}", spec.shape),
                });
            }
            let count = spec
                .shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| ArchiveError::InvalidShape {
                    layer: spec.name.clone(),
                    what: "shape product overflows".into(),
                })?;
            let out = spec.out_units();
            let mut fields = vec![("weights", spec.weight_offset, count)];
            if let Some(o) = spec.bias_offset {
                fields.push(("bias", o, out));
            }
            if let Some(bn) = &spec.batchnorm {
                fields.push(("gamma", bn.gamma_offset, out));
                fields.push(("moving_variance", bn.moving_variance_offset, out));
            }
            for (field, offset, n) in fields {
                let range = self.check_range(&spec.name, field, offset, n)?;
                if self.read_f32s(offset, n).iter().any(|v| !v.is_finite()) {
                    return Err(ArchiveError::NonFinite {
                        layer: spec.name.clone(),
                        field,
                    });
                }
                if !range.is_empty() {
                    ranges.push((range, format!("{}.{}", spec.name, field)));
                }
            }
            if let Some(bn) = &spec.batchnorm {
                if !(bn.epsilon.is_finite() && bn.epsilon > 0.0) {
                    return Err(ArchiveError::InvalidBatchNorm {
                        layer: spec.name.clone(),
                        what: format!("epsilon must be > 0, got {}", bn.epsilon),
                    });
                }
                if self
                    .read_f32s(bn.moving_variance_offset, out)
                    .iter()
                    .any(|&v| v < 0.0)
                {
                    return Err(ArchiveError::InvalidBatchNorm {
                        layer: spec.name.clone(),
                        what: "negative moving variance".into(),
                    });
                }
            }
        }
        ranges.sort_by_key(|(r, _)| r.start);
        for pair in ranges.windows(2) {
            if pair[1].0.start < pair[0].0.end {
                return Err(ArchiveError::Overlap {
                    first: pair[0].1.clone(),
                    second: pair[1].1.clone(),
                });
            }
        }
        for pair in self.layers.windows(2) {
            let (prev, next) = (&pair[0], &pair[1]);
            if prev.kind == next.kind && prev.out_units() != next.in_units() {
                return Err(ArchiveError::ShapeMismatch {
                    prev: prev.name.clone(),
                    prev_out: prev.out_units(),
                    next: next.name.clone(),
                    next_in: next.in_units(),
                });
            }
        }
        Ok(())
    }

    fn check_range(
        &self,
        layer: &str,
        field: &'static str,
        offset: u64,
        count: usize,
    ) -> Result<Range<u64>> {
        if !offset.is_multiple_of(4) {
            return Err(ArchiveError::Misaligned {
                layer: layer.to_string(),
                field,
                offset,
            });
        }
        let end = (count as u64)
            .checked_mul(4)
            .and_then(|bytes| offset.checked_add(bytes));
        match end {
            Some(end) if end <= self.blob.len() as u64 => Ok(offset..end),
            _ => Err(ArchiveError::OutOfBounds {
                layer: layer.to_string(),
                field,
                start: offset,
                end: end.unwrap_or(u64::MAX),
                blob_len: self.blob.len(),
            }),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = Manifest {
            version: self.version,
            dtype: None,
            layers: self.layers.clone(),
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(HEADER_LEN + json.len() + self.blob.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&self.blob);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(ArchiveError::Truncated);
        }
        if &bytes[..8] != MAGIC {
            return Err(ArchiveError::BadMagic);
        }
        if bytes.len() < HEADER_LEN {
            return Err(ArchiveError::Truncated);
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
        let manifest_end = (HEADER_LEN as u64)
            .checked_add(len)
            .filter(|&end| end <= bytes.len() as u64)
            .ok_or(ArchiveError::ManifestLength { len })? as usize;
        let manifest: Manifest = serde_json::from_slice(&bytes[HEADER_LEN..manifest_end])?;
        if let Some(dtype) = manifest.dtype {
            if dtype != "float32" {
                return Err(ArchiveError::UnsupportedDtype(dtype));
            }
        }
        let archive = WeightArchive {
            version: manifest.version,
            layers: manifest.layers,
            blob: bytes[manifest_end..].to_vec(),
        };
        archive.validate()?;
        Ok(archive)
    }
}

pub fn read_archive(path: impl AsRef<Path>) -> Result<WeightArchive> {
    let bytes = fs::read(path)?;
    WeightArchive::from_bytes(&bytes)
}

pub fn write_archive(archive: &WeightArchive, path: impl AsRef<Path>) -> Result<()> {
    archive.validate()?;
    fs::write(path, archive.to_bytes())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn two_by_two() -> WeightArchive {
        WeightArchive::from_layers(vec![LayerData::dense(
            "d0",
            2,
            2,
            vec![1.0, -1.0, 0.0, 2.0],
        )])
        .unwrap()
    }

    fn header(manifest: &str) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(manifest.as_bytes());
        out
    }

    #[test]
    fn empty_archive_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.nwa");
        write_archive(&WeightArchive::empty(), &path).unwrap();
        let back = read_archive(&path).unwrap();
        assert_eq!(back, WeightArchive::empty());
        assert!(back.layers().is_empty());
        assert_eq!(fs::read(&path).unwrap(), back.to_bytes());
    }

    #[test]
    fn dense_layer_bytes_match_hex_dump() {
        let archive = two_by_two();
        let bytes = archive.to_bytes();
        let blob_hex: String = bytes[bytes.len() - 16..]
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect();
        // 1.0, -1.0, 0.0, 2.0 as little-endian IEEE-754 single precision
        assert_eq!(blob_hex, "0000803f000080bf0000000000000040");
        let back = WeightArchive::from_bytes(&bytes).unwrap();
        assert_eq!(back.weights(0).unwrap(), vec![1.0, -1.0, 0.0, 2.0]);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn batchnorm_round_trip_is_exact() {
        let layer = LayerData::conv2d("c0", [3, 3, 1, 2], vec![0.25; 18])
            .with_bias(vec![0.5, -0.5])
            .with_batchnorm(BatchNormData {
                gamma: vec![1.5, 0.1],
                moving_variance: vec![0.3, 7.0],
                epsilon: 1.0e-3,
            });
        let archive = WeightArchive::from_layers(vec![layer]).unwrap();
        let back = WeightArchive::from_bytes(&archive.to_bytes()).unwrap();
        let (gamma, var, eps) = back.batchnorm(0).unwrap().unwrap();
        assert_eq!(gamma, vec![1.5, 0.1]);
        assert_eq!(var, vec![0.3, 7.0]);
        assert_eq!(eps.to_bits(), 1.0e-3f64.to_bits());
        assert_eq!(back.to_bytes(), archive.to_bytes());
    }

    #[test]
    fn rejects_bad_magic() {
        let mut bytes = two_by_two().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            WeightArchive::from_bytes(&bytes),
            Err(ArchiveError::BadMagic)
        ));
    }

    #[test]
    fn rejects_bad_json() {
        let bytes = header("{not json");
        assert!(matches!(
            WeightArchive::from_bytes(&bytes),
            Err(ArchiveError::ManifestJson(_))
        ));
    }

    #[test]
    fn rejects_offset_past_blob_end() {
        let mut bytes = header(
            r#"{"version":1,"layers":[{"name":"d","kind":"dense","shape":[2,2],"weight_offset":8,"bias_offset":null,"batchnorm":null}]}"#,
        );
        bytes.extend_from_slice(&[0u8; 16]);
        assert!(matches!(
            WeightArchive::from_bytes(&bytes),
            Err(ArchiveError::OutOfBounds { .. })
        ));
    }

    #[test]
    fn rejects_manifest_length_past_eof() {
        let mut bytes = MAGIC.to_vec();
        bytes.extend_from_slice(&1000u64.to_le_bytes());
        bytes.extend_from_slice(b"{}");
        assert!(matches!(
            WeightArchive::from_bytes(&bytes),
            Err(ArchiveError::ManifestLength { .. })
        ));
    }

    #[test]
    fn rejects_non_finite() {
        let err =
            WeightArchive::from_layers(vec![LayerData::dense("d", 1, 2, vec![1.0, f32::NAN])])
                .unwrap_err();
        assert!(matches!(err, ArchiveError::NonFinite { .. }));
    }

    #[test]
    fn rejects_chain_mismatch() {
        let err = WeightArchive::from_layers(vec![
            LayerData::dense("a", 2, 3, vec![1.0; 6]),
            LayerData::dense("b", 2, 1, vec![1.0; 2]),
        ])
        .unwrap_err();
        assert!(matches!(err, ArchiveError::ShapeMismatch { .. }));
    }

    #[test]
    fn rejects_misaligned_and_overlapping() {
        let base = two_by_two();
        let mut spec = base.layers()[0].clone();
        spec.weight_offset = 2;
        let err = WeightArchive::new(vec![spec], vec![0u8; 20]).unwrap_err();
        assert!(matches!(err, ArchiveError::Misaligned { .. }));

        let spec = base.layers()[0].clone();
        let mut second = spec.clone();
        second.name = "other".into();
        second.shape = vec![2, 1];
        second.weight_offset = 8;
        let err = WeightArchive::new(vec![spec, second], base.blob().to_vec()).unwrap_err();
        assert!(matches!(err, ArchiveError::Overlap { .. }));
    }

    #[test]
    fn rejects_negative_variance_and_bad_epsilon() {
        let mk = |var: f32, eps: f64| {
            WeightArchive::from_layers(vec![LayerData::conv2d("c", [1, 1, 1, 1], vec![1.0])
                .with_batchnorm(BatchNormData {
                    gamma: vec![1.0],
                    moving_variance: vec![var],
                    epsilon: eps,
                })])
        };
        assert!(matches!(
            mk(-1.0, 1e-3),
            Err(ArchiveError::InvalidBatchNorm { .. })
        ));
        assert!(matches!(
            mk(1.0, 0.0),
            Err(ArchiveError::InvalidBatchNorm { .. })
        ));
        assert!(mk(0.0, 1e-3).is_ok());
    }

    #[test]
    fn rejects_other_dtypes_and_versions() {
        let bytes = header(r#"{"version":1,"dtype":"float16","layers":[]}"#);
        assert!(matches!(
            WeightArchive::from_bytes(&bytes),
            Err(ArchiveError::UnsupportedDtype(_))
        ));
        let bytes = header(r#"{"version":2,"layers":[]}"#);
        assert!(matches!(
            WeightArchive::from_bytes(&bytes),
            Err(ArchiveError::UnsupportedVersion(2))
        ));
    }
}
