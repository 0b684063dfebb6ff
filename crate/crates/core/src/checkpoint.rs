//! `ckpt.json` + `ckpt.bin` checkpoints: parameters, Adam moments and
//! training metadata.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{NetConfig, VelocityNet};
use crate::optim::{AdamConfig, AdamState};
use crate::params::ParamSet;
use crate::tensor::Tensor;

pub const HEADER: &str = "ckpt.json";
pub const BLOB: &str = "ckpt.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlobEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset in `f32` values from the start of `ckpt.bin`.
    pub offset: usize,
    pub length: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metadata {
    pub step: u64,
    pub config_hash: String,
    pub master_seed: u64,
    pub net: NetConfig,
    pub adam: AdamConfig,
    pub adam_steps: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    tensors: Vec<BlobEntry>,
    optimizer: Vec<BlobEntry>,
    metadata: Metadata,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: VelocityNet,
    pub optimizer: AdamState,
    pub metadata: Metadata,
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut blob: Vec<u8> = Vec::new();
        let mut offset = 0;
        let mut push = |name: String, shape: Vec<usize>, data: &[f32]| {
            for v in data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
            let e = BlobEntry {
                name,
                shape,
                offset,
                length: data.len(),
            };
            offset += data.len();
            e
        };
        let tensors: Vec<BlobEntry> = self
            .net
            .params
            .iter()
            .map(|(n, t)| push(n.to_string(), t.shape().to_vec(), t.data()))
            .collect();
        let mut optimizer = Vec::new();
        for (i, (n, t)) in self.net.params.iter().enumerate() {
            let shape = t.shape().to_vec();
            optimizer.push(push(format!("adam.m.{n}"), shape.clone(), &self.optimizer.first_moment[i]));
            optimizer.push(push(format!("adam.v.{n}"), shape, &self.optimizer.second_moment[i]));
        }
        let header = Header {
            tensors,
            optimizer,
            metadata: Metadata {
                adam: self.optimizer.config.clone(),
                adam_steps: self.optimizer.step_count,
                ..self.metadata.clone()
            },
        };
        // blob first, header last: a header only ever describes a complete blob
        write_atomic(&dir.join(BLOB), &blob)?;
        let json = serde_json::to_vec_pretty(&header).expect("header serializes");
        write_atomic(&dir.join(HEADER), &json)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let hpath = dir.join(HEADER);
        let text = fs::read(&hpath).map_err(|e| Error::io(&hpath, e))?;
        let header: Header = serde_json::from_slice(&text)
            .map_err(|e| Error::format("checkpoint", "header", e.to_string()))?;
        let bpath = dir.join(BLOB);
        let bytes = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        if bytes.len() % 4 != 0 {
            return Err(Error::format("checkpoint", "blob", "length not a multiple of 4"));
        }
        let values: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let slice = |e: &BlobEntry| -> Result<Vec<f32>> {
            let n: usize = e.shape.iter().product();
            if n != e.length || e.offset + e.length > values.len() {
                return Err(Error::format(
                    "checkpoint",
                    &e.name,
                    "entry out of range or shape/length mismatch".to_string(),
                ));
            }
            Ok(values[e.offset..e.offset + e.length].to_vec())
        };

        let meta = header.metadata;
        let mut net = VelocityNet::new(meta.net.clone(), 0)?;
        let expected: Vec<(String, Vec<usize>)> = net
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect();
        if expected.len() != header.tensors.len() {
            return Err(Error::format(
                "checkpoint",
                "tensors",
                format!(
                    "{} tensors stored, network config needs {}",
                    header.tensors.len(),
                    expected.len()
                ),
            ));
        }
        let mut params = ParamSet::default();
        for ((name, shape), e) in expected.iter().zip(&header.tensors) {
            if &e.name != name || &e.shape != shape {
                return Err(Error::format(
                    "checkpoint",
                    &e.name,
                    format!("expected {name} {shape:?}, found {} {:?}", e.name, e.shape),
                ));
            }
            params.insert(
                name.clone(),
                Tensor::from_vec(shape.clone(), slice(e)?)?.with_grad(),
            );
        }
        net.params = params;

        let mut optimizer = AdamState::new(meta.adam.clone(), &net.params);
        optimizer.step_count = meta.adam_steps;
        if header.optimizer.len() != 2 * expected.len() {
            return Err(Error::format(
                "checkpoint",
                "optimizer",
                "moment buffer count does not match parameters",
            ));
        }
        for (i, (name, _)) in expected.iter().enumerate() {
            for (k, e) in header.optimizer[2 * i..2 * i + 2].iter().enumerate() {
                let want = format!("adam.{}.{name}", if k == 0 { "m" } else { "v" });
                if e.name != want {
                    return Err(Error::format("checkpoint", &e.name, format!("expected {want}")));
                }
                let data = slice(e)?;
                if k == 0 {
                    optimizer.first_moment[i] = data;
                } else {
                    optimizer.second_moment[i] = data;
                }
            }
        }
        Ok(Self {
            net,
            optimizer,
            metadata: meta,
        })
    }

    pub fn exists(dir: &Path) -> bool {
        dir.join(HEADER).is_file() && dir.join(BLOB).is_file()
    }
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp: PathBuf = path.with_extension("partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
