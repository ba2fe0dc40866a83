//! Binary container for checkpoints, captures and ground truth.
//!
//! Layout: `b"GOBF"`, `u16` version, `u32` header length (both little
//! endian), the JSON header, then every declared tensor as little-endian
//! `f64` values in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::Tensor;
use crate::error::{Error, Result};
use crate::fedsim::Capture;
use crate::models::ModelSpec;
use crate::obfuscate::ObfuscationSpec;
use crate::params::{ParamVector, Segment};

pub const MAGIC: &[u8; 4] = b"GOBF";
pub const VERSION: u16 = 1;

const PARAMS: &str = "params/";
const GRADIENT: &str = "gradient/";
const IMAGES: &str = "images";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Checkpoint,
    Capture,
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

impl TensorEntry {
    fn len(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Metadata {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<ModelSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub round: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub client: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub obfuscation: Option<ObfuscationSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batch: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub role: Role,
    pub tensors: Vec<TensorEntry>,
    #[serde(default)]
    pub metadata: Metadata,
}

pub fn encode(header: &Header, payload: &[f64]) -> Result<Vec<u8>> {
    let declared: usize = header.tensors.iter().map(TensorEntry::len).sum();
    if declared != payload.len() {
        return Err(Error::shape(
            "container",
            format!("header declares {declared} values, payload has {}", payload.len()),
        ));
    }
    let json = serde_json::to_vec(header)?;
    let len = u32::try_from(json.len()).map_err(|_| Error::Config("container header too large".into()))?;
    let mut out = Vec::with_capacity(10 + json.len() + 8 * payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(&json);
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<(Header, Vec<f64>)> {
    let bad = |detail: String| Error::Container {
        path: path.to_path_buf(),
        detail,
    };
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(Error::Magic {
            path: path.to_path_buf(),
            expected: "GOBF".into(),
        });
    }
    if bytes.len() < 10 {
        return Err(bad("truncated preamble".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(Error::ContainerVersion {
            found: version,
            expected: VERSION,
        });
    }
    let len = u32::from_le_bytes([bytes[6], bytes[7], bytes[8], bytes[9]]) as usize;
    let body = &bytes[10..];
    if body.len() < len {
        return Err(bad(format!("header of {len} bytes runs past the end")));
    }
    let header: Header = serde_json::from_slice(&body[..len]).map_err(|e| bad(format!("header: {e}")))?;
    let payload = &body[len..];
    let declared: usize = header.tensors.iter().map(TensorEntry::len).sum();
    if payload.len() != declared * 8 {
        return Err(bad(format!(
            "payload has {} bytes, header declares {} values",
            payload.len(),
            declared
        )));
    }
    let values = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Ok((header, values))
}

pub fn write(path: &Path, header: &Header, payload: &[f64]) -> Result<()> {
    let bytes = encode(header, payload)?;
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<(Header, Vec<f64>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

fn param_entries(prefix: &str, p: &ParamVector) -> Vec<TensorEntry> {
    p.segments()
        .iter()
        .map(|s| TensorEntry {
            name: format!("{prefix}{}", s.name),
            shape: s.shape.clone(),
        })
        .collect()
}

/// Collect the tensors named `prefix*` into a parameter vector.
fn gather_params(header: &Header, values: &[f64], prefix: &str, path: &Path) -> Result<ParamVector> {
    let mut data = Vec::new();
    let mut segments = Vec::new();
    let mut offset = 0;
    for e in &header.tensors {
        let len = e.len();
        if let Some(name) = e.name.strip_prefix(prefix) {
            segments.push(Segment {
                name: name.to_string(),
                offset: data.len(),
                shape: e.shape.clone(),
            });
            data.extend_from_slice(&values[offset..offset + len]);
        }
        offset += len;
    }
    if segments.is_empty() {
        return Err(Error::Container {
            path: path.to_path_buf(),
            detail: format!("no {prefix} tensors"),
        });
    }
    ParamVector::from_parts(data, segments)
}

fn expect_role(header: &Header, role: Role, path: &Path) -> Result<()> {
    if header.role != role {
        return Err(Error::Container {
            path: path.to_path_buf(),
            detail: format!("expected a {role:?} container, found {:?}", header.role),
        });
    }
    Ok(())
}

fn required<T: Clone>(v: &Option<T>, field: &str, path: &Path) -> Result<T> {
    v.clone().ok_or_else(|| Error::Container {
        path: path.to_path_buf(),
        detail: format!("metadata lacks {field}"),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelSpec,
    pub round: usize,
    pub params: ParamVector,
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    let header = Header {
        role: Role::Checkpoint,
        tensors: param_entries(PARAMS, &ck.params),
        metadata: Metadata {
            model: Some(ck.model.clone()),
            round: Some(ck.round),
            ..Metadata::default()
        },
    };
    write(path, &header, ck.params.data())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let (header, values) = read(path)?;
    expect_role(&header, Role::Checkpoint, path)?;
    Ok(Checkpoint {
        model: required(&header.metadata.model, "model", path)?,
        round: required(&header.metadata.round, "round", path)?,
        params: gather_params(&header, &values, PARAMS, path)?,
    })
}

/// The attacker's view of a client update; no pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct CaptureFile {
    pub model: ModelSpec,
    pub round: usize,
    pub client: usize,
    pub params: ParamVector,
    pub gradient: ParamVector,
    pub labels: Vec<usize>,
    pub obfuscation: ObfuscationSpec,
    pub eta: f64,
    pub tau: usize,
    pub batch: usize,
}

impl CaptureFile {
    pub fn from_capture(model: &ModelSpec, c: &Capture) -> Self {
        Self {
            model: model.clone(),
            round: c.round,
            client: c.client,
            params: c.params.clone(),
            gradient: c.gradient.clone(),
            labels: c.labels.clone(),
            obfuscation: c.obfuscation.clone(),
            eta: c.eta,
            tau: c.tau,
            batch: c.batch,
        }
    }
}

pub fn save_capture(path: &Path, c: &CaptureFile) -> Result<()> {
    let mut tensors = param_entries(PARAMS, &c.params);
    tensors.extend(param_entries(GRADIENT, &c.gradient));
    let mut payload = c.params.data().to_vec();
    payload.extend_from_slice(c.gradient.data());
    let header = Header {
        role: Role::Capture,
        tensors,
        metadata: Metadata {
            model: Some(c.model.clone()),
            round: Some(c.round),
            client: Some(c.client),
            obfuscation: Some(c.obfuscation.clone()),
            labels: Some(c.labels.clone()),
            eta: Some(c.eta),
            tau: Some(c.tau),
            batch: Some(c.batch),
            seed: None,
        },
    };
    write(path, &header, &payload)
}

pub fn load_capture(path: &Path) -> Result<CaptureFile> {
    let (header, values) = read(path)?;
    expect_role(&header, Role::Capture, path)?;
    if let Some(e) = header
        .tensors
        .iter()
        .find(|e| !(e.name.starts_with(PARAMS) || e.name.starts_with(GRADIENT)))
    {
        return Err(Error::Container {
            path: path.to_path_buf(),
            detail: format!("capture may only hold parameters and gradients, found {}", e.name),
        });
    }
    let m = &header.metadata;
    Ok(CaptureFile {
        model: required(&m.model, "model", path)?,
        round: required(&m.round, "round", path)?,
        client: required(&m.client, "client", path)?,
        params: gather_params(&header, &values, PARAMS, path)?,
        gradient: gather_params(&header, &values, GRADIENT, path)?,
        labels: required(&m.labels, "labels", path)?,
        obfuscation: required(&m.obfuscation, "obfuscation", path)?,
        eta: required(&m.eta, "eta", path)?,
        tau: required(&m.tau, "tau", path)?,
        batch: required(&m.batch, "batch", path)?,
    })
}

pub fn save_ground_truth(path: &Path, images: &Tensor, labels: &[usize]) -> Result<()> {
    let header = Header {
        role: Role::GroundTruth,
        tensors: vec![TensorEntry {
            name: IMAGES.into(),
            shape: images.shape().to_vec(),
        }],
        metadata: Metadata {
            labels: Some(labels.to_vec()),
            ..Metadata::default()
        },
    };
    write(path, &header, images.data())
}

pub fn load_ground_truth(path: &Path) -> Result<(Tensor, Vec<usize>)> {
    let (header, values) = read(path)?;
    expect_role(&header, Role::GroundTruth, path)?;
    let entry = match header.tensors.as_slice() {
        [e] if e.name == IMAGES => e,
        _ => {
            return Err(Error::Container {
                path: path.to_path_buf(),
                detail: "ground truth holds exactly one images tensor".into(),
            })
        }
    };
    let labels = required(&header.metadata.labels, "labels", path)?;
    Ok((Tensor::new(entry.shape.clone(), values)?, labels))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Model;

    fn sample_header(n: usize) -> Header {
        Header {
            role: Role::Checkpoint,
            tensors: vec![TensorEntry {
                name: "params/w".into(),
                shape: vec![n],
            }],
            metadata: Metadata::default(),
        }
    }

    #[test]
    fn round_trip_and_layout() {
        let bytes = encode(&sample_header(3), &[1.0, -2.5, 0.125]).unwrap();
        assert_eq!(&bytes[..4], b"GOBF");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), VERSION);
        let len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 10 + len + 3 * 8);
        let (h, v) = decode(&bytes, Path::new("x")).unwrap();
        assert_eq!(h, sample_header(3));
        assert_eq!(v, vec![1.0, -2.5, 0.125]);
    }

    #[test]
    fn distinct_errors_for_magic_version_and_length() {
        let good = encode(&sample_header(2), &[1.0, 2.0]).unwrap();
        let mut wrong_magic = good.clone();
        wrong_magic[0] = b'X';
        assert!(matches!(decode(&wrong_magic, Path::new("x")), Err(Error::Magic { .. })));
        let mut wrong_version = good.clone();
        wrong_version[4] = 9;
        assert!(matches!(
            decode(&wrong_version, Path::new("x")),
            Err(Error::ContainerVersion { found: 9, .. })
        ));
        let truncated = &good[..good.len() - 1];
        assert!(matches!(decode(truncated, Path::new("x")), Err(Error::Container { .. })));
        assert!(encode(&sample_header(3), &[1.0]).is_err());
    }

    #[test]
    fn checkpoint_and_capture_files() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec::lenet([1, 28, 28], 10);
        let params = Model::new(spec.clone()).unwrap().init_params(1);
        let ck = Checkpoint {
            model: spec.clone(),
            round: 3,
            params: params.clone(),
        };
        let path = dir.path().join("ck.gobf");
        save_checkpoint(&path, &ck).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ck);
        assert!(load_capture(&path).is_err());

        let cap = CaptureFile {
            model: spec,
            round: 3,
            client: 2,
            params: params.clone(),
            gradient: params.scale(0.5),
            labels: vec![4, 1],
            obfuscation: ObfuscationSpec::identity(),
            eta: 0.01,
            tau: 1,
            batch: 2,
        };
        let path = dir.path().join("cap.gobf");
        save_capture(&path, &cap).unwrap();
        assert_eq!(load_capture(&path).unwrap(), cap);

        let images = Tensor::from_fn(&[2, 1, 2, 2], |i| i as f64 / 8.0);
        let path = dir.path().join("gt.gobf");
        save_ground_truth(&path, &images, &[4, 1]).unwrap();
        assert_eq!(load_ground_truth(&path).unwrap(), (images, vec![4, 1]));
        assert!(load_capture(&path).is_err());
    }
}
