//! Binary container for trained models.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"STGATMDL" | u32 format version | u32 header length | JSON header
//! | parameter blobs (row-major f64, in header order) | SHA-256 of all preceding bytes
//! ```
//!
//! The header records the method, its [`ModelConfig`], the data geometry
//! it was trained with and the name and shape of every blob. The checksum
//! is verified before anything else is parsed, so a truncated or edited
//! file never yields a partial model.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use stgat_core::eval::TrainedModel;
use stgat_core::layers::ParamStore;
use stgat_core::model::{LinearRegression, ModelConfig, ModelKind, Network, Regressor};
use stgat_core::pipeline::DataConfig;
use stgat_core::tensor::Tensor;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"STGATMDL";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BlobInfo {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    /// A network name such as `STGAT-Fuser`, or `MLR`.
    method: String,
    /// Absent for MLR.
    config: Option<ModelConfig>,
    data: DataConfig,
    params: Vec<BlobInfo>,
}

/// A model together with the data geometry needed to evaluate it.
#[derive(Clone, Debug, PartialEq)]
pub struct SavedModel {
    pub model: TrainedModel,
    pub data: DataConfig,
}

const MLR: &str = "MLR";

fn network_kind(name: &str) -> Option<ModelKind> {
    [ModelKind::StgatFuser, ModelKind::Mlp, ModelKind::Cnn, ModelKind::Lstm]
        .into_iter()
        .find(|k| k.name() == name)
}

/// Serializes `saved` to bytes.
pub fn encode(saved: &SavedModel) -> Result<Vec<u8>> {
    let (method, config, tensors): (String, Option<ModelConfig>, Vec<(String, Tensor)>) = match &saved.model {
        TrainedModel::Network(net) => (
            net.kind().name().to_string(),
            Some(net.config().clone()),
            net.params().iter().map(|(n, t)| (n.to_string(), t.clone())).collect(),
        ),
        TrainedModel::Linear(m) => {
            let coef = Tensor::from_vec(m.coefficients.clone())?;
            (
                MLR.to_string(),
                None,
                vec![("coefficients".into(), coef), ("intercept".into(), Tensor::scalar(m.intercept))],
            )
        }
    };
    let header = Header {
        method,
        config,
        data: saved.data.clone(),
        params: tensors
            .iter()
            .map(|(name, t)| BlobInfo {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
    let header_len = u32::try_from(json.len()).map_err(|_| Error::Format("model header too large".into()))?;

    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

/// Parses bytes produced by [`encode`]; `path` is only used in messages.
pub fn decode(bytes: &[u8], path: &Path) -> Result<SavedModel> {
    let bad = |message: String| Error::ModelFile {
        path: path.to_path_buf(),
        message,
    };
    if bytes.len() < MAGIC.len() + 8 + DIGEST_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(bad("not a model file".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("checksum mismatch: file is truncated or corrupt".into()));
    }
    let u32_at = |at: usize| u32::from_le_bytes(body[at..at + 4].try_into().expect("4 bytes"));
    let version = u32_at(8);
    if version != FORMAT_VERSION {
        return Err(bad(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let header_len = u32_at(12) as usize;
    let blobs_start = 16 + header_len;
    if blobs_start > body.len() {
        return Err(bad("header length exceeds file size".into()));
    }
    let header: Header =
        serde_json::from_slice(&body[16..blobs_start]).map_err(|e| bad(format!("invalid header: {e}")))?;

    let mut blobs = body[blobs_start..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let expected: usize = header.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if body.len() - blobs_start != expected * 8 {
        return Err(bad(format!(
            "expected {expected} parameter values, found {} bytes",
            body.len() - blobs_start
        )));
    }
    let mut store = ParamStore::new();
    for info in &header.params {
        let n = info.shape.iter().product();
        let data: Vec<f64> = blobs.by_ref().take(n).collect();
        store.add(info.name.clone(), Tensor::new(info.shape.clone(), data)?);
    }

    let model = if header.method == MLR {
        let coef = store.iter().find(|(n, _)| *n == "coefficients");
        let icpt = store.iter().find(|(n, _)| *n == "intercept").and_then(|(_, t)| t.item());
        match (coef, icpt, store.len()) {
            (Some((_, c)), Some(intercept), 2) => TrainedModel::Linear(LinearRegression {
                coefficients: c.data().to_vec(),
                intercept,
            }),
            _ => return Err(bad("MLR file must hold `coefficients` and a scalar `intercept`".into())),
        }
    } else {
        let kind = network_kind(&header.method).ok_or_else(|| bad(format!("unknown method `{}`", header.method)))?;
        let config = header.config.ok_or_else(|| bad("network file without a model config".into()))?;
        if config.window_len != header.data.window_len {
            return Err(Error::Conflict(format!(
                "{}: model window_len {} differs from data window_len {}",
                path.display(),
                config.window_len,
                header.data.window_len
            )));
        }
        let mut net = Network::build(kind, &config)?;
        net.params_mut().load_from(&store).map_err(|e| bad(e.to_string()))?;
        TrainedModel::Network(net)
    };
    Ok(SavedModel {
        model,
        data: header.data,
    })
}

pub fn save(path: &Path, saved: &SavedModel) -> Result<()> {
    let bytes = encode(saved)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<SavedModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

/// Number of input channels the model expects.
pub fn expected_channels(model: &TrainedModel, window_len: usize) -> usize {
    match model {
        TrainedModel::Network(net) => net.config().num_channels,
        TrainedModel::Linear(m) => m.coefficients.len() / window_len.max(1),
    }
}
