//! Training checkpoints.
//!
//! Layout: 8-byte magic `PUMBACKP`, u16 format version, u32 header length,
//! a JSON header (configurations, parameter names and shapes, schedule
//! position), then every parameter tensor followed by the first and second
//! moment tensors as little-endian f32, and finally the SHA-256 of all
//! preceding bytes. Files are written to a temporary sibling and renamed
//! into place.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, PumbaModel};
use crate::optim::OptimizerState;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::train::{TrainConfig, Trainer};

pub const MAGIC: &[u8; 8] = b"PUMBACKP";
pub const VERSION: u16 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    names: Vec<String>,
    shapes: Vec<Vec<usize>>,
    opt_step: u64,
    epoch: usize,
    batch_in_epoch: usize,
}

pub fn encode(trainer: &Trainer) -> Vec<u8> {
    let params = &trainer.model.params;
    let header = Header {
        model: trainer.model.config.clone(),
        train: trainer.config.clone(),
        names: params.names().to_vec(),
        shapes: params.tensors().iter().map(|t| t.shape().to_vec()).collect(),
        opt_step: trainer.opt.step,
        epoch: trainer.epoch,
        batch_in_epoch: trainer.batch_in_epoch,
    };
    let json = serde_json::to_vec(&header).expect("checkpoint header serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for group in [params.tensors(), &trainer.opt.m, &trainer.opt.v] {
        for t in group {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    out
}

fn format_err(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

/// Decodes a checkpoint; `path` is only used to label checksum failures.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Trainer> {
    if bytes.len() < 14 || &bytes[..8] != MAGIC {
        return Err(format_err(0, "not a checkpoint (bad magic)"));
    }
    let found = u16::from_le_bytes([bytes[8], bytes[9]]);
    if found != VERSION {
        return Err(Error::Version {
            found,
            expected: VERSION,
        });
    }
    if bytes.len() < 14 + DIGEST_LEN {
        return Err(format_err(bytes.len(), "truncated checkpoint"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    let header_len = u32::from_le_bytes(body[10..14].try_into().unwrap()) as usize;
    let json = body
        .get(14..14 + header_len)
        .ok_or_else(|| format_err(14, "header runs past the end of the file"))?;
    let header: Header =
        serde_json::from_slice(json).map_err(|e| format_err(14, format!("bad header: {e}")))?;

    let mut pos = 14 + header_len;
    let mut read_group = |what: &str| -> Result<Vec<Tensor<f32>>> {
        header
            .shapes
            .iter()
            .map(|shape| {
                let n: usize = shape.iter().product();
                let raw = body
                    .get(pos..pos + 4 * n)
                    .ok_or_else(|| format_err(pos, format!("truncated {what} data")))?;
                pos += 4 * n;
                let data = raw
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                    .collect();
                Tensor::new(shape.clone(), data)
            })
            .collect()
    };
    let params = read_group("parameter")?;
    let m = read_group("first moment")?;
    let v = read_group("second moment")?;
    if pos != body.len() {
        return Err(format_err(pos, "trailing bytes after tensor data"));
    }

    let mut model = PumbaModel::new(header.model, 0).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("checkpoint model configuration: {msg}")),
        other => other,
    })?;
    model
        .params
        .load_from(ParamStore::from_parts(header.names, params))?;
    let opt = OptimizerState {
        config: header.train.optimizer,
        step: header.opt_step,
        m,
        v,
    };
    Ok(Trainer {
        model,
        opt,
        config: header.train,
        epoch: header.epoch,
        batch_in_epoch: header.batch_in_epoch,
    })
}

/// Writes atomically: temp file, fsync, rename.
pub fn save_checkpoint(trainer: &Trainer, path: &Path) -> Result<()> {
    let bytes = encode(trainer);
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut file = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
    file.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Trainer> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn tiny() -> Trainer {
        let mut cfg = ModelConfig::desk();
        cfg.image_size = 16;
        Trainer::new(PumbaModel::new(cfg, 5).unwrap(), TrainConfig::default()).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let mut t = tiny();
        t.opt.step = 7;
        t.epoch = 2;
        t.batch_in_epoch = 3;
        t.opt.m[0].data_mut()[0] = 0.25;
        let back = decode(&encode(&t), &PathBuf::from("x")).unwrap();
        assert_eq!(back.model.params.tensors(), t.model.params.tensors());
        assert_eq!(back.opt, t.opt);
        assert_eq!((back.epoch, back.batch_in_epoch), (2, 3));
        assert_eq!(back.config, t.config);
    }

    #[test]
    fn corruption_and_versions_detected() {
        let bytes = encode(&tiny());
        let mut flipped = bytes.clone();
        let mid = flipped.len() / 2;
        flipped[mid] ^= 1;
        assert!(matches!(decode(&flipped, Path::new("c")), Err(Error::Checksum(_))));
        let mut newer = bytes.clone();
        newer[8] = 9;
        let err = decode(&newer, Path::new("c")).unwrap_err();
        assert!(matches!(err, Error::Version { found: 9, expected: 1 }));
        assert!(err.to_string().contains('9') && err.to_string().contains('1'));
        assert!(matches!(decode(b"nope", Path::new("c")), Err(Error::Format { .. })));
    }
}
