//! Checkpoint container: a JSON header record followed by named SGRID blobs.
//!
//! ```text
//! "SCKP" | u32 header_len | header JSON | u32 count | count x (u32 name_len | name | u64 len | SGRID bytes)
//! ```
//! All integers little-endian.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dpm::TriggerState;
use crate::error::{Error, Result};
use crate::grid::Grid;
use crate::model::{ModelArch, ModelParams, Tensors};
use crate::sgrid;

const MAGIC: &[u8; 4] = b"SCKP";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Stage1,
    Stage2,
    Done,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub arch: ModelArch,
    pub phase: Phase,
    /// Epochs completed overall; also the counter every per-epoch stream derives from.
    pub epoch: usize,
    pub stage2_epoch: usize,
    pub step: u64,
    pub stage_step: u64,
    pub seed: u64,
    pub trigger: Option<TriggerState>,
    pub bank_generation: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub header: CheckpointHeader,
    pub params: ModelParams,
    pub velocity: Option<Tensors>,
}

fn tensor_grids(prefix: &str, arch: &ModelArch, t: &Tensors) -> Vec<(String, Grid<f32>)> {
    ModelParams::from_tensors(*arch, t.clone())
        .expect("tensor shapes match arch")
        .to_grids()
        .into_iter()
        .map(|(n, g)| (format!("{prefix}{n}"), g))
        .collect()
}

impl Checkpoint {
    pub fn encode(&self) -> Vec<u8> {
        let header = serde_json::to_vec(&self.header).expect("header serializes");
        let mut grids: Vec<(String, Grid<f32>)> = self
            .params
            .to_grids()
            .into_iter()
            .map(|(n, g)| (n.to_string(), g))
            .collect();
        if let Some(v) = &self.velocity {
            grids.extend(tensor_grids("velocity.", &self.header.arch, v));
        }
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(grids.len() as u32).to_le_bytes());
        for (name, g) in &grids {
            let blob = sgrid::encode(g);
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
            out.extend_from_slice(&blob);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, at: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let header_len = r.u32()? as usize;
        let header: CheckpointHeader =
            serde_json::from_slice(r.take(header_len)?).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let count = r.u32()?;
        let mut grids = Vec::new();
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))?;
            let len = r.u64()? as usize;
            grids.push((name, sgrid::decode(r.take(len)?)?.into_float32()?));
        }
        let params = ModelParams::from_grids(header.arch, &grids)?;
        let velocity_grids: Vec<(String, Grid<f32>)> = grids
            .iter()
            .filter_map(|(n, g)| n.strip_prefix("velocity.").map(|s| (s.to_string(), g.clone())))
            .collect();
        let velocity = if velocity_grids.is_empty() {
            None
        } else {
            Some(ModelParams::from_grids(header.arch, &velocity_grids)?.tensors().clone())
        };
        Ok(Self {
            header,
            params,
            velocity,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.at.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.at))
        })?;
        let s = &self.bytes[self.at..end];
        self.at = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_is_exact() {
        let arch = ModelArch::new(3, 5, 4).unwrap();
        let params = init_params(arch, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let ckpt = Checkpoint {
            header: CheckpointHeader {
                arch,
                phase: Phase::Stage2,
                epoch: 7,
                stage2_epoch: 2,
                step: 140,
                stage_step: 40,
                seed: 11,
                trigger: Some(TriggerState::new(0.4, 0.02, 25)),
                bank_generation: Some(2),
            },
            params: params.clone(),
            velocity: Some(params.tensors().clone()),
        };
        let bytes = ckpt.encode();
        let back = Checkpoint::decode(&bytes).unwrap();
        assert_eq!(back, ckpt);
        assert_eq!(back.encode(), bytes);
        assert!(Checkpoint::decode(&bytes[..bytes.len() - 3]).is_err());
    }
}
