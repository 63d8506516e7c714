//! Parameter storage, gradients and the versioned binary parameter format.
//!
//! Binary layout (little-endian): magic `SRNET\0\0\0`, `u32` format
//! version, `u32` manifest length, the JSON manifest (block names, shapes,
//! groups, trainability), then every block's values as `f64` in manifest
//! order.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PARAM_FORMAT_VERSION: u32 = 1;
const PARAM_MAGIC: &[u8; 8] = b"SRNET\0\0\0";

/// Which part of a network a block belongs to. Online fine-tuning touches
/// only [`ParamGroup::Classifier`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamGroup {
    Extractor,
    Recurrent,
    Classifier,
    /// Test scaffolding, e.g. an input tensor under gradient check.
    Probe,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub group: ParamGroup,
    /// Running statistics are stored but never receive gradients.
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockManifest {
    pub name: String,
    pub shape: Vec<usize>,
    pub group: ParamGroup,
    pub trainable: bool,
}

/// Index of a block inside a [`ParamStore`].
pub type BlockId = usize;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    blocks: Vec<ParamBlock>,
}

/// Gradient buffers aligned with a store's blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads(pub Vec<Vec<f64>>);

impl Grads {
    pub fn zeros_like(store: &ParamStore) -> Self {
        Grads(store.blocks.iter().map(|b| vec![0.0; b.data.len()]).collect())
    }

    pub fn block(&self, id: BlockId) -> &[f64] {
        &self.0[id]
    }

    pub fn block_mut(&mut self, id: BlockId) -> &mut [f64] {
        &mut self.0[id]
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.0.iter_mut().zip(&other.0) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.0.iter_mut().flatten().for_each(|x| *x *= s);
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().flatten().map(|x| x * x).sum::<f64>().sqrt()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        data: Vec<f64>,
        group: ParamGroup,
        trainable: bool,
    ) -> BlockId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.blocks.push(ParamBlock {
            name: name.into(),
            shape: shape.to_vec(),
            data,
            group,
            trainable,
        });
        self.blocks.len() - 1
    }

    /// Uniform Glorot initialization over `[-limit, limit]`.
    pub fn add_glorot<R: Rng + ?Sized>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        group: ParamGroup,
        rng: &mut R,
    ) -> BlockId {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let n = shape.iter().product();
        let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
        self.add(name, shape, data, group, true)
    }

    pub fn add_const(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        value: f64,
        group: ParamGroup,
        trainable: bool,
    ) -> BlockId {
        let n = shape.iter().product();
        self.add(name, shape, vec![value; n], group, trainable)
    }

    pub fn blocks(&self) -> &[ParamBlock] {
        &self.blocks
    }

    pub fn blocks_mut(&mut self) -> &mut [ParamBlock] {
        &mut self.blocks
    }

    pub fn get(&self, id: BlockId) -> &[f64] {
        &self.blocks[id].data
    }

    pub fn get_mut(&mut self, id: BlockId) -> &mut [f64] {
        &mut self.blocks[id].data
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.blocks.iter().map(|b| b.data.len()).sum()
    }

    pub fn manifest(&self) -> Vec<BlockManifest> {
        self.blocks
            .iter()
            .map(|b| BlockManifest {
                name: b.name.clone(),
                shape: b.shape.clone(),
                group: b.group,
                trainable: b.trainable,
            })
            .collect()
    }

    /// Values of every block in `group`, concatenated.
    pub fn group_values(&self, group: ParamGroup) -> Vec<f64> {
        self.blocks
            .iter()
            .filter(|b| b.group == group)
            .flat_map(|b| b.data.iter().copied())
            .collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let manifest = serde_json::to_vec(&self.manifest()).expect("manifest serializes");
        let mut out = Vec::with_capacity(16 + manifest.len() + 8 * self.num_values());
        out.extend_from_slice(PARAM_MAGIC);
        out.extend_from_slice(&PARAM_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest);
        for b in &self.blocks {
            for x in &b.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::format("<parameters>", msg.to_string());
        if bytes.len() < 16 || &bytes[..8] != PARAM_MAGIC {
            return Err(bad("bad parameter magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != PARAM_FORMAT_VERSION {
            return Err(bad(&format!("unsupported parameter format version {version}")));
        }
        let mlen = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        let body = bytes.get(16..16 + mlen).ok_or_else(|| bad("truncated manifest"))?;
        let manifest: Vec<BlockManifest> = serde_json::from_slice(body)?;
        let mut offset = 16 + mlen;
        let mut store = ParamStore::new();
        for m in manifest {
            let n: usize = m.shape.iter().product();
            let raw = bytes
                .get(offset..offset + 8 * n)
                .ok_or_else(|| bad(&format!("truncated values for block {}", m.name)))?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            offset += 8 * n;
            store.add(m.name, &m.shape, data, m.group, m.trainable);
        }
        if offset != bytes.len() {
            return Err(bad("trailing bytes after parameter values"));
        }
        Ok(store)
    }

    /// Copies values from `other` after checking that both stores share the
    /// same manifest.
    pub fn load_from(&mut self, other: &ParamStore) -> Result<()> {
        let (mine, theirs) = (self.manifest(), other.manifest());
        if mine.len() != theirs.len() {
            return Err(Error::config(format!(
                "parameter manifest has {} blocks, expected {}",
                theirs.len(),
                mine.len()
            )));
        }
        for (a, b) in mine.iter().zip(&theirs) {
            if a != b {
                return Err(Error::config(format!(
                    "parameter block mismatch: expected {} {:?}, found {} {:?}",
                    a.name, a.shape, b.name, b.shape
                )));
            }
        }
        for (dst, src) in self.blocks.iter_mut().zip(&other.blocks) {
            dst.data.clone_from(&src.data);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn bytes_round_trip_and_validation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut s = ParamStore::new();
        s.add_glorot("w", &[3, 4], 3, 4, ParamGroup::Classifier, &mut rng);
        s.add_const("running_var", &[4], 1.0, ParamGroup::Extractor, false);
        let bytes = s.to_bytes();
        let back = ParamStore::from_bytes(&bytes).unwrap();
        assert_eq!(back, s);
        assert!(ParamStore::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut other = ParamStore::new();
        other.add_const("w", &[4, 3], 0.0, ParamGroup::Classifier, true);
        other.add_const("running_var", &[4], 1.0, ParamGroup::Extractor, false);
        assert!(other.load_from(&s).is_err());
    }
}
