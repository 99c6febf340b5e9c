//! Model checkpoints: a JSON header followed by named TNSR tensors.
//!
//! Layout: magic "AVCK" | u32 header length | header JSON | one TNSR blob
//! per entry of `tensors`, in order. The header carries the architecture,
//! the anchor set, training state, and the reproducibility stanza.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{AvError, Result};
use crate::io::tnsr;
use crate::io::ReproStanza;
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"AVCK";
const MAX_HEADER_LEN: usize = 16 << 20;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub epochs_done: usize,
    pub steps_done: u64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: String,
    pub model: ModelConfig,
    pub train_state: TrainState,
    pub repro: ReproStanza,
    pub tensors: Vec<String>,
}

pub fn encode(model: &Model<f32>, train_state: &TrainState) -> Result<Vec<u8>> {
    let header = CheckpointHeader {
        version: crate::VERSION.to_string(),
        model: model.cfg.clone(),
        train_state: train_state.clone(),
        repro: ReproStanza::for_config(train_state.seed, &model.cfg)?,
        tensors: model.param_names(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| AvError::Format(format!("checkpoint header: {e}")))?;
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for p in model.params() {
        out.extend_from_slice(&tnsr::encode(p));
    }
    Ok(out)
}

pub fn save(path: &Path, model: &Model<f32>, train_state: &TrainState) -> Result<()> {
    let bytes = encode(model, train_state)?;
    let mut f =
        std::fs::File::create(path).map_err(|e| AvError::io(path.display().to_string(), e))?;
    f.write_all(&bytes).map_err(|e| AvError::io(path.display().to_string(), e))
}

/// Named parameter tensors in checkpoint order.
pub type NamedTensors = Vec<(String, Tensor<f32>)>;

/// Parse a checkpoint image into its header and named tensors.
pub fn decode(bytes: &[u8]) -> Result<(CheckpointHeader, NamedTensors)> {
    if bytes.len() < 8 || bytes[0..4] != MAGIC {
        return Err(AvError::Format("checkpoint: bad magic".into()));
    }
    let header_len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    if header_len > MAX_HEADER_LEN || 8 + header_len > bytes.len() {
        return Err(AvError::Format("checkpoint: header length out of range".into()));
    }
    let header: CheckpointHeader = serde_json::from_slice(&bytes[8..8 + header_len])
        .map_err(|e| AvError::Format(format!("checkpoint header: {e}")))?;
    if header.tensors.len() > 4096 {
        return Err(AvError::Format("checkpoint: unreasonable tensor count".into()));
    }
    let mut tensors = Vec::with_capacity(header.tensors.len());
    let mut off = 8 + header_len;
    for name in &header.tensors {
        let (t, used) = tnsr::decode(&bytes[off..])
            .map_err(|e| AvError::Format(format!("checkpoint tensor {name:?}: {e}")))?;
        tensors.push((name.clone(), t.into_f32()));
        off += used;
    }
    if off != bytes.len() {
        return Err(AvError::Format(format!(
            "checkpoint: {} trailing bytes",
            bytes.len() - off
        )));
    }
    Ok((header, tensors))
}

/// Rebuild a model from a decoded checkpoint.
pub fn model_from_parts(
    header: &CheckpointHeader,
    tensors: &[(String, Tensor<f32>)],
) -> Result<Model<f32>> {
    header.model.validate()?;
    let mut model = Model::<f32>::init(header.model.clone(), header.train_state.seed)?;
    let names = model.param_names();
    if names.len() != tensors.len() {
        return Err(AvError::Format(format!(
            "checkpoint: expected {} tensors, found {}",
            names.len(),
            tensors.len()
        )));
    }
    for ((want_name, param), (name, tensor)) in
        names.iter().zip(model.params_mut()).zip(tensors.iter())
    {
        if want_name != name {
            return Err(AvError::Format(format!(
                "checkpoint: tensor {name:?} where {want_name:?} expected"
            )));
        }
        if param.shape() != tensor.shape() {
            return Err(AvError::Format(format!(
                "checkpoint: tensor {name:?} has shape {:?}, want {:?}",
                tensor.shape(),
                param.shape()
            )));
        }
        param.data_mut().copy_from_slice(tensor.data());
    }
    Ok(model)
}

pub fn load(path: &Path) -> Result<(Model<f32>, CheckpointHeader)> {
    let bytes =
        std::fs::read(path).map_err(|e| AvError::io(path.display().to_string(), e))?;
    let (header, tensors) = decode(&bytes)?;
    let model = model_from_parts(&header, &tensors)?;
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detect::AnchorSet;
    use crate::encoder::EncoderConfig;

    fn tiny_model(seed: u64) -> Model<f32> {
        let cfg = ModelConfig {
            encoder: EncoderConfig::tiny(),
            anchors: AnchorSet::new(vec![(0.2, 0.25), (0.5, 0.4)]).unwrap(),
        };
        Model::init(cfg, seed).unwrap()
    }

    #[test]
    fn round_trip_restores_every_parameter() {
        let model = tiny_model(3);
        let state = TrainState { epochs_done: 2, steps_done: 10, seed: 3 };
        let bytes = encode(&model, &state).unwrap();
        let (header, tensors) = decode(&bytes).unwrap();
        assert_eq!(header.train_state, state);
        let back = model_from_parts(&header, &tensors).unwrap();
        assert_eq!(model.flatten_params(), back.flatten_params());
        assert_eq!(model.cfg, back.cfg);
    }

    #[test]
    fn encode_is_deterministic() {
        let m1 = tiny_model(4);
        let m2 = tiny_model(4);
        let state = TrainState { epochs_done: 0, steps_done: 0, seed: 4 };
        assert_eq!(encode(&m1, &state).unwrap(), encode(&m2, &state).unwrap());
    }

    #[test]
    fn rejects_malformed_images() {
        assert!(decode(b"").is_err());
        assert!(decode(b"AVCKxxxx").is_err());
        let model = tiny_model(5);
        let state = TrainState { epochs_done: 0, steps_done: 0, seed: 5 };
        let bytes = encode(&model, &state).unwrap();
        // truncated payload
        assert!(decode(&bytes[..bytes.len() - 3]).is_err());
        // trailing garbage
        let mut padded = bytes.clone();
        padded.push(7);
        assert!(decode(&padded).is_err());
        // header length lies
        let mut lied = bytes.clone();
        lied[4] = lied[4].wrapping_add(1);
        assert!(decode(&lied).is_err());
    }
}
