//! Binary checkpoint format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "BDIF" | u32 version | u32 meta_len | meta (JSON) | u32 tensor_count
//! tensor*: u32 name_len | name | u32 rank | u32 dims[rank] | f32 values
//! u64 checksum (first 8 bytes of SHA-256 over everything before it)
//! ```
//!
//! Adam moments are stored as extra tensors named `<param>#m` and `<param>#v`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{write_atomic, Standardization};
use crate::autodiff::ParameterStore;
use crate::denoiser::{Architecture, Denoiser, LabelGuidedDenoiser, MultiTaskDenoiser, TimeEmbedding};
use crate::diffusion::ProcessSpec;
use crate::error::{Error, Result};
use crate::hierarchy::BranchHierarchy;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"BDIF";
const TIME_Z: &str = "time.z";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Branched,
    LabelGuided,
}

/// JSON metadata block of a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub dim: usize,
    pub architecture: Architecture,
    pub process: ProcessSpec,
    pub classes: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hierarchy: Option<BranchHierarchy>,
    pub seed: u64,
    pub epochs_done: usize,
    #[serde(default)]
    pub frozen: Vec<String>,
    #[serde(default)]
    pub adam_steps: BTreeMap<String, u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub standardization: Option<Standardization>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Model {
    Branched {
        model: MultiTaskDenoiser<f32>,
        hierarchy: BranchHierarchy,
    },
    LabelGuided {
        model: LabelGuidedDenoiser<f32>,
        classes: Vec<String>,
    },
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Branched { .. } => ModelKind::Branched,
            Model::LabelGuided { .. } => ModelKind::LabelGuided,
        }
    }

    pub fn classes(&self) -> &[String] {
        match self {
            Model::Branched { hierarchy, .. } => hierarchy.classes(),
            Model::LabelGuided { classes, .. } => classes,
        }
    }

    pub fn denoiser(&self) -> &dyn Denoiser<f32> {
        match self {
            Model::Branched { model, .. } => model,
            Model::LabelGuided { model, .. } => model,
        }
    }

    fn parts(&self) -> (Architecture, &TimeEmbedding<f32>, &ParameterStore<f32>) {
        match self {
            Model::Branched { model, .. } => (*model.architecture(), model.time_embedding(), model.store()),
            Model::LabelGuided { model, .. } => (*model.architecture(), model.time_embedding(), model.store()),
        }
    }
}

/// A model plus the run information needed to resume or reproduce it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub seed: u64,
    pub epochs_done: usize,
    pub standardization: Option<Standardization>,
}

fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Format(format!("length {v} does not fit the format")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_tensor(out: &mut Vec<u8>, name: &str, shape: &[usize], values: &[f32]) -> Result<()> {
    put_u32(out, name.len())?;
    out.extend_from_slice(name.as_bytes());
    put_u32(out, shape.len())?;
    for &d in shape {
        put_u32(out, d)?;
    }
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated checkpoint at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f32>)> {
        let len = self.u32()?;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = self.u32()?;
        if rank > 8 {
            return Err(Error::Format(format!("tensor {name} has rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut count = 1usize;
        for _ in 0..rank {
            let d = self.u32()?;
            count = count
                .checked_mul(d)
                .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
            shape.push(d);
        }
        let raw = self.take(
            count
                .checked_mul(4)
                .ok_or_else(|| Error::Format("tensor too large".into()))?,
        )?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok((name, shape, values))
    }
}

impl Checkpoint {
    pub fn new(model: Model, seed: u64) -> Self {
        Self {
            model,
            seed,
            epochs_done: 0,
            standardization: None,
        }
    }

    pub fn meta(&self) -> CheckpointMeta {
        let (arch, _, store) = self.model.parts();
        let d = self.model.denoiser();
        CheckpointMeta {
            kind: self.model.kind(),
            dim: d.dim(),
            architecture: arch,
            process: d.process().spec(),
            classes: self.model.classes().to_vec(),
            hierarchy: match &self.model {
                Model::Branched { hierarchy, .. } => Some(hierarchy.clone()),
                Model::LabelGuided { .. } => None,
            },
            seed: self.seed,
            epochs_done: self.epochs_done,
            frozen: store.iter().filter(|p| p.frozen).map(|p| p.name.clone()).collect(),
            adam_steps: store
                .iter()
                .filter(|p| p.step > 0)
                .map(|p| (p.name.clone(), p.step))
                .collect(),
            standardization: self.standardization.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let (_, time, store) = self.model.parts();
        let meta = serde_json::to_vec(&self.meta()).map_err(|e| Error::Format(e.to_string()))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        put_u32(&mut out, meta.len())?;
        out.extend_from_slice(&meta);
        put_u32(&mut out, 1 + 3 * store.len())?;
        put_tensor(&mut out, TIME_Z, &[time.z().len()], time.z())?;
        for p in store.iter() {
            put_tensor(&mut out, &p.name, &p.shape, &p.value)?;
            put_tensor(&mut out, &format!("{}#m", p.name), &p.shape, &p.m)?;
            put_tensor(&mut out, &format!("{}#v", p.name), &p.shape, &p.v)?;
        }
        let sum = checksum(&out);
        out.extend_from_slice(&sum.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]);
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: CHECKPOINT_VERSION,
            });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 8);
        let mut stored = [0u8; 8];
        stored.copy_from_slice(tail);
        let stored = u64::from_le_bytes(stored);
        let computed = checksum(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }

        let mut r = Reader { bytes: body, pos: 8 };
        let meta_len = r.u32()?;
        let meta: CheckpointMeta =
            serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Format(format!("metadata: {e}")))?;
        let count = r.u32()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            tensors.push(r.tensor()?);
        }
        if r.pos != body.len() {
            return Err(Error::Format("trailing bytes after tensors".into()));
        }
        let mut iter = tensors.into_iter();
        let (zname, _, z) = iter.next().ok_or_else(|| Error::Format("no tensors".into()))?;
        if zname != TIME_Z {
            return Err(Error::Format(format!("expected {TIME_Z}, found {zname}")));
        }
        let process = meta.process.build::<f32>()?;
        let time = TimeEmbedding::from_parts(z, process.horizon())?;

        let mut store = ParameterStore::new();
        let rest: Vec<_> = iter.collect();
        if rest.len() % 3 != 0 {
            return Err(Error::Format("incomplete parameter records".into()));
        }
        for rec in rest.chunks(3) {
            let (name, shape, value) = &rec[0];
            let (mname, mshape, m) = &rec[1];
            let (vname, vshape, v) = &rec[2];
            if *mname != format!("{name}#m") || *vname != format!("{name}#v") || mshape != shape || vshape != shape {
                return Err(Error::Format(format!("optimizer state for {name} is malformed")));
            }
            let id = store.insert(name, shape.clone(), value.clone())?;
            let p = store.get_mut(id);
            p.m = m.clone();
            p.v = v.clone();
            p.step = meta.adam_steps.get(name).copied().unwrap_or(0);
            p.frozen = meta.frozen.contains(name);
        }

        let model = match meta.kind {
            ModelKind::Branched => {
                let hierarchy = meta
                    .hierarchy
                    .clone()
                    .ok_or_else(|| Error::Format("branched checkpoint without hierarchy".into()))?;
                let hierarchy = BranchHierarchy::new(
                    hierarchy.classes().to_vec(),
                    hierarchy.horizon(),
                    hierarchy.branches().to_vec(),
                )?;
                let model = MultiTaskDenoiser::from_parts(
                    meta.architecture,
                    meta.dim,
                    hierarchy.task_count(),
                    process,
                    time,
                    store,
                )?;
                Model::Branched { model, hierarchy }
            }
            ModelKind::LabelGuided => {
                let model = LabelGuidedDenoiser::from_parts(
                    meta.architecture,
                    meta.dim,
                    meta.classes.len(),
                    process,
                    time,
                    store,
                )?;
                Model::LabelGuided {
                    model,
                    classes: meta.classes.clone(),
                }
            }
        };
        Ok(Self {
            model,
            seed: meta.seed,
            epochs_done: meta.epochs_done,
            standardization: meta.standardization,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hierarchy::fixtures::digits_tree;
    use rand::{Rng, SeedableRng};

    fn arch() -> Architecture {
        Architecture {
            width: 6,
            trunk_layers: 2,
            head_layers: 2,
            time_frequencies: 3,
            label_dim: 2,
        }
    }

    fn branched() -> Checkpoint {
        let h = digits_tree();
        let process = ProcessSpec::default().build().unwrap();
        let mut model = MultiTaskDenoiser::new(arch(), 3, h.task_count(), process, 5).unwrap();
        let store = crate::denoiser::Denoiser::store_mut(&mut model);
        store.set_frozen("trunk.0.weight", true).unwrap();
        let id = store.id("head.1.0.bias").unwrap();
        store.get_mut(id).step = 7;
        store.get_mut(id).m[0] = 0.25;
        Checkpoint::new(Model::Branched { model, hierarchy: h }, 5)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = branched();
        let bytes = c.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);

        let process = ProcessSpec::discrete_default().build().unwrap();
        let lg = LabelGuidedDenoiser::new(arch(), 2, 3, process, 1).unwrap();
        let c = Checkpoint::new(
            Model::LabelGuided {
                model: lg,
                classes: vec!["a".into(), "b".into(), "c".into()],
            },
            1,
        );
        let bytes = c.to_bytes().unwrap();
        assert_eq!(Checkpoint::from_bytes(&bytes).unwrap().to_bytes().unwrap(), bytes);
    }

    #[test]
    fn save_and_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bdif");
        let c = branched();
        c.save(&path).unwrap();
        assert_eq!(Checkpoint::load(&path).unwrap(), c);
        assert!(matches!(
            Checkpoint::load(dir.path().join("none")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn corruption_is_detected() {
        let bytes = branched().to_bytes().unwrap();
        for pos in [20, bytes.len() / 2, bytes.len() - 9] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x40;
            assert!(matches!(Checkpoint::from_bytes(&bad), Err(Error::Checksum { .. })));
        }
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(
            Checkpoint::from_bytes(&bad),
            Err(Error::Version { found: 9, .. })
        ));
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn random_bytes_never_panic() {
        let good = branched().to_bytes().unwrap();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for i in 0..10_000 {
            let bytes: Vec<u8> = if i % 2 == 0 {
                let n = rng.random_range(0..256);
                let mut b: Vec<u8> = (0..n).map(|_| rng.random()).collect();
                if i % 4 == 0 && b.len() >= 8 {
                    b[..4].copy_from_slice(MAGIC);
                    b[4..8].copy_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
                }
                b
            } else {
                // valid prefix with a resealed checksum, so structure parsing is exercised
                let cut = rng.random_range(8..good.len() - 8);
                let mut b = good[..cut].to_vec();
                let k = rng.random_range(8..b.len().max(9));
                if k < b.len() {
                    b[k] = rng.random();
                }
                let sum = checksum(&b);
                b.extend_from_slice(&sum.to_le_bytes());
                b
            };
            assert!(Checkpoint::from_bytes(&bytes).is_err());
        }
    }
}
