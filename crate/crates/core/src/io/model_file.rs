//! One-line JSON manifest, a newline, then every tensor as little-endian
//! row-major `f32`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{LstmLm, Model, RhnLm, TensorStore};
use crate::numerics::Matrix;
use crate::rnn::{LstmLayerParams, RhnLayerParams};

pub const FORMAT_VERSION: u32 = 1;
pub const GATE_ORDER: &str = "fiuo";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub dtype: String,
    pub byte_offset: usize,
}

impl TensorEntry {
    pub fn byte_len(&self) -> usize {
        self.shape[0] * self.shape[1] * 4
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReceiverDoc {
    pub tensor: String,
    pub row_offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LstmTopologyDoc {
    pub gate_order: String,
    pub vocab: usize,
    pub embed: usize,
    pub hidden: Vec<usize>,
    /// Per layer, the tensors that consume its hidden state.
    pub receivers: Vec<Vec<ReceiverDoc>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RhnTopologyDoc {
    pub vocab: usize,
    pub embed: usize,
    pub width: usize,
    pub depth: usize,
    pub coupled: bool,
    pub tied: bool,
}

/// Records that every group-member weight below `tau` was set to exactly
/// zero before saving.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ThresholdRecord {
    pub tau: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: String,
    pub topology: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<ThresholdRecord>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelFile {
    pub model: Model,
    pub threshold: Option<ThresholdRecord>,
}

fn topology_value(model: &Model) -> Result<serde_json::Value> {
    Ok(match model {
        Model::Lstm(m) => {
            let topo = m.topology();
            serde_json::to_value(LstmTopologyDoc {
                gate_order: GATE_ORDER.into(),
                vocab: m.vocab_size(),
                embed: m.embed_size(),
                hidden: m.hidden_sizes(),
                receivers: topo
                    .owners
                    .iter()
                    .map(|o| {
                        o.receivers
                            .iter()
                            .map(|r| ReceiverDoc { tensor: r.tensor.clone(), row_offset: r.row_offset })
                            .collect()
                    })
                    .collect(),
            })?
        }
        Model::Rhn(m) => serde_json::to_value(RhnTopologyDoc {
            vocab: m.vocab_size(),
            embed: m.embedding.cols(),
            width: m.rhn.width(),
            depth: m.rhn.depth(),
            coupled: m.rhn.coupled(),
            tied: m.tied(),
        })?,
    })
}

/// Serializes `model` with an optional threshold record.
pub fn encode_model(model: &Model, threshold: Option<ThresholdRecord>) -> Result<Vec<u8>> {
    let mut tensors = Vec::new();
    let mut payload = Vec::new();
    for (name, t) in model.tensors() {
        tensors.push(TensorEntry {
            name,
            shape: [t.rows(), t.cols()],
            dtype: "f32".into(),
            byte_offset: payload.len(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        kind: model.kind().into(),
        topology: topology_value(model)?,
        tensors,
        threshold,
    };
    let mut out = serde_json::to_vec(&manifest)?;
    out.push(b'\n');
    out.extend_from_slice(&payload);
    Ok(out)
}

fn format_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Format(msg.into()))
}

/// Checks version, dtypes and the offset layout against `payload_len`.
pub fn validate_manifest(m: &Manifest, payload_len: usize) -> Result<()> {
    if m.format_version != FORMAT_VERSION {
        return format_err(format!("format version {} is not supported (expected {FORMAT_VERSION})", m.format_version));
    }
    let mut end = 0usize;
    let mut prev: Option<&str> = None;
    for t in &m.tensors {
        if t.dtype != "f32" {
            return format_err(format!("tensor {} has dtype {:?}, only \"f32\" is supported", t.name, t.dtype));
        }
        if t.byte_offset < end {
            return format_err(match prev {
                Some(p) => format!("tensor {} at byte {} overlaps tensor {p}", t.name, t.byte_offset),
                None => format!("tensor {} has a bad offset", t.name),
            });
        }
        if t.byte_offset > end {
            return format_err(format!("gap of {} bytes before tensor {}", t.byte_offset - end, t.name));
        }
        end = t.byte_offset + t.byte_len();
        if end > payload_len {
            return format_err(format!(
                "payload truncated inside tensor {}: needs bytes {}..{end}, payload has {payload_len}",
                t.name, t.byte_offset
            ));
        }
        prev = Some(&t.name);
    }
    if end != payload_len {
        return format_err(format!("payload has {} trailing bytes", payload_len - end));
    }
    Ok(())
}

fn empty_model(kind: &str, topology: &serde_json::Value) -> Result<Model> {
    let bad = |e: serde_json::Error| Error::Format(format!("{kind} topology: {e}"));
    match kind {
        "lstm_stack" => {
            let t: LstmTopologyDoc = serde_json::from_value(topology.clone()).map_err(bad)?;
            if t.gate_order != GATE_ORDER {
                return format_err(format!("gate order {:?} is not supported (expected {GATE_ORDER:?})", t.gate_order));
            }
            if t.hidden.is_empty() {
                return format_err("lstm_stack topology has no layers");
            }
            let mut below = t.embed;
            let mut layers = Vec::with_capacity(t.hidden.len());
            for &h in &t.hidden {
                layers.push(LstmLayerParams::zeros(below, h));
                below = h;
            }
            let m = LstmLm::from_parts(
                Matrix::zeros(t.vocab, t.embed),
                layers,
                Matrix::zeros(below, t.vocab),
                Matrix::zeros(1, t.vocab),
            )
            .map_err(|e| Error::Format(format!("lstm_stack topology: {e}")))?;
            let derived = topology_value(&Model::Lstm(m.clone()))?;
            if &derived != topology {
                return format_err("lstm_stack receivers do not match the stacked layout");
            }
            Ok(Model::Lstm(m))
        }
        "rhn" => {
            let t: RhnTopologyDoc = serde_json::from_value(topology.clone()).map_err(bad)?;
            let build = || -> Result<RhnLm> {
                let rhn = RhnLayerParams::zeros(t.embed, t.width, t.depth, t.coupled)?;
                let softmax_w = (!t.tied).then(|| Matrix::zeros(t.width, t.vocab));
                RhnLm::from_parts(Matrix::zeros(t.vocab, t.embed), rhn, softmax_w, Matrix::zeros(1, t.vocab))
            };
            Ok(Model::Rhn(build().map_err(|e| Error::Format(format!("rhn topology: {e}")))?))
        }
        other => format_err(format!("unknown model kind {other:?}")),
    }
}

pub fn decode_model(bytes: &[u8]) -> Result<ModelFile> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing manifest line".into()))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[..nl]).map_err(|e| Error::Format(format!("bad manifest: {e}")))?;
    let payload = &bytes[nl + 1..];
    validate_manifest(&manifest, payload.len())?;
    let mut model = empty_model(&manifest.kind, &manifest.topology)?;
    {
        let mut slots = model.tensors_mut();
        if slots.len() != manifest.tensors.len() {
            return format_err(format!(
                "{} model has {} tensors, manifest lists {}",
                manifest.kind,
                slots.len(),
                manifest.tensors.len()
            ));
        }
        for entry in &manifest.tensors {
            let (_, slot) = slots
                .iter_mut()
                .find(|(n, _)| *n == entry.name)
                .ok_or_else(|| Error::Format(format!("manifest lists unknown tensor {}", entry.name)))?;
            if slot.shape() != (entry.shape[0], entry.shape[1]) {
                return format_err(format!(
                    "tensor {} is {:?} in the manifest but {}x{} in the topology",
                    entry.name,
                    entry.shape,
                    slot.rows(),
                    slot.cols()
                ));
            }
            let raw = &payload[entry.byte_offset..entry.byte_offset + entry.byte_len()];
            for (v, b) in slot.data_mut().iter_mut().zip(raw.chunks_exact(4)) {
                *v = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            }
        }
    }
    model.resync().map_err(|e| Error::Format(format!("loaded model is inconsistent: {e}")))?;
    Ok(ModelFile { model, threshold: manifest.threshold })
}

pub fn save_model(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    save_model_file(model, None, path)
}

pub fn save_model_file(model: &Model, threshold: Option<ThresholdRecord>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode_model(model, threshold)?)?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Model> {
    Ok(load_model_file(path)?.model)
}

pub fn load_model_file(path: impl AsRef<Path>) -> Result<ModelFile> {
    decode_model(&std::fs::read(path)?)
}
