use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::bytes::{put_string, put_u32, to_u32, Reader};
use super::config::RunConfig;
use crate::adapters::{AdapterSet, MaskSet, Method, RetainMask};
use crate::backbone::{build_backbone, FrozenModel};
use crate::error::{MosaError, Result};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::training::{Moments, OptimizerState};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"MSCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Bitmap record: `rows × cols` flags packed LSB-first.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskRecord {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub bits: Vec<bool>,
}

/// Raw checkpoint contents.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Checkpoint {
    pub config: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
    pub masks: Vec<MaskRecord>,
}

fn pack(bits: &[bool]) -> Vec<u8> {
    let mut out = vec![0u8; bits.len().div_ceil(8)];
    for (i, &b) in bits.iter().enumerate() {
        if b {
            out[i / 8] |= 1 << (i % 8);
        }
    }
    out
}

fn unpack(bytes: &[u8], n: usize) -> Vec<bool> {
    (0..n).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn mask(&self, name: &str) -> Option<&MaskRecord> {
        self.masks.iter().find(|m| m.name == name)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        put_u32(&mut out, CHECKPOINT_VERSION);
        let mut blob = String::new();
        for (k, v) in &self.config {
            if k.contains(['=', '\n']) || v.contains('\n') {
                return Err(MosaError::Format(format!("config entry '{k}' cannot be stored")));
            }
            blob.push_str(&format!("{k}={v}\n"));
        }
        put_string(&mut out, &blob)?;
        put_u32(&mut out, to_u32(self.tensors.len(), "tensor count")?);
        for (name, t) in &self.tensors {
            put_string(&mut out, name)?;
            put_u32(&mut out, to_u32(t.shape().len(), "rank")?);
            for &d in t.shape() {
                put_u32(&mut out, to_u32(d, "dimension")?);
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        put_u32(&mut out, to_u32(self.masks.len(), "mask count")?);
        for m in &self.masks {
            if m.bits.len() != m.rows * m.cols {
                return Err(MosaError::Invariant(format!("mask {} has {} bits for {}x{}", m.name, m.bits.len(), m.rows, m.cols)));
            }
            put_string(&mut out, &m.name)?;
            put_u32(&mut out, 2);
            put_u32(&mut out, to_u32(m.rows, "dimension")?);
            put_u32(&mut out, to_u32(m.cols, "dimension")?);
            out.extend_from_slice(&pack(&m.bits));
        }
        let crc = crc32fast::hash(&out);
        put_u32(&mut out, crc);
        Ok(out)
    }

    /// Parses and validates a checkpoint. Structure is read first so a short
    /// file is reported as truncated; the CRC is checked last.
    pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Reader::new(bytes, "checkpoint");
        let magic = r.array::<4>()?;
        if magic != CHECKPOINT_MAGIC {
            return Err(MosaError::Format(format!("checkpoint magic {magic:?} is not \"MSCK\"")));
        }
        let version = r.u32()?;
        if version > CHECKPOINT_VERSION {
            return Err(MosaError::Version { found: version, supported: CHECKPOINT_VERSION });
        }
        if version == 0 {
            return Err(MosaError::Format("checkpoint version 0 is invalid".into()));
        }
        let blob = r.string()?;
        let mut config = BTreeMap::new();
        for line in blob.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| MosaError::Format(format!("config line '{line}' is not key=value")))?;
            config.insert(k.to_string(), v.to_string());
        }
        let read_dims = |r: &mut Reader<'_>| -> Result<Vec<usize>> {
            let rank = r.u32()? as usize;
            if rank > 8 {
                return Err(MosaError::Format(format!("tensor rank {rank} is implausible")));
            }
            (0..rank).map(|_| Ok(r.u32()? as usize)).collect()
        };
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let dims = read_dims(&mut r)?;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|n| n.checked_mul(8).is_some())
                .ok_or_else(|| MosaError::Format(format!("tensor {name} is too large")))?;
            let raw = r.take(n * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            let t = Tensor::new(dims, data).map_err(|e| MosaError::Format(format!("tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        let count = r.u32()? as usize;
        let mut masks = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name = r.string()?;
            let dims = read_dims(&mut r)?;
            if dims.len() != 2 {
                return Err(MosaError::Format(format!("mask {name} has rank {}", dims.len())));
            }
            let n = dims[0]
                .checked_mul(dims[1])
                .ok_or_else(|| MosaError::Format(format!("mask {name} is too large")))?;
            let raw = r.take(n.div_ceil(8))?;
            masks.push(MaskRecord { name, rows: dims[0], cols: dims[1], bits: unpack(raw, n) });
        }
        let body_len = r.pos();
        let stored = r.u32()?;
        if r.remaining() != 0 {
            return Err(MosaError::Format(format!("{} trailing bytes after the CRC", r.remaining())));
        }
        let actual = crc32fast::hash(&bytes[..body_len]);
        if stored != actual {
            return Err(MosaError::Corruption(format!(
                "CRC mismatch: stored {stored:08x}, computed {actual:08x}"
            )));
        }
        Ok(Checkpoint { config, tensors, masks })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()?).map_err(|e| MosaError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| MosaError::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}

const META_MERGED: &str = "meta.merged";
const META_STEP: &str = "meta.optimizer_step";

/// A model, its adapters and (optionally) optimizer state, as saved by a run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub config: RunConfig,
    pub model: FrozenModel,
    pub adapters: AdapterSet,
    pub optimizer: Option<OptimizerState>,
}

/// Applies the trainable flags implied by the method.
pub fn set_trainable_flags(model: &mut FrozenModel, method: Method) {
    model.freeze();
    if method == Method::BiasTuning {
        model.unfreeze_biases();
    }
}

impl RunState {
    /// Fresh, untrained state for a config.
    pub fn initialize(config: &RunConfig) -> Result<RunState> {
        config.validate()?;
        let mut model = build_backbone(&config.backbone, &mut Rng::new(config.backbone_seed))?;
        set_trainable_flags(&mut model, config.adapter.method);
        let adapters = AdapterSet::build(
            &config.adapter,
            config.backbone.embed_dim,
            config.backbone.num_layers,
            config.plan.seed,
        )?;
        Ok(RunState { config: config.clone(), model, adapters, optimizer: None })
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut config = self.config.to_map();
        config.insert(META_MERGED.into(), self.adapters.merged.to_string());
        let mut tensors = vec![];
        for p in self.model.params().into_iter().chain(self.adapters.params()) {
            tensors.push((p.name.clone(), p.tensor.clone()));
        }
        if let Some(opt) = &self.optimizer {
            config.insert(META_STEP.into(), opt.step.to_string());
            for (name, m) in &opt.moments {
                tensors.push((format!("optim.m.{name}"), Tensor::new([m.m.len()], m.m.clone())?));
                tensors.push((format!("optim.v.{name}"), Tensor::new([m.v.len()], m.v.clone())?));
            }
        }
        let mut masks = vec![];
        for w in self.adapters.split_weights() {
            if let Some(ms) = &w.experts {
                for i in 0..ms.num_experts() {
                    masks.push(MaskRecord {
                        name: format!("{}#expert{i}", w.param.name),
                        rows: ms.rows(),
                        cols: ms.cols(),
                        bits: ms.bitmap(i),
                    });
                }
            }
            if let Some(r) = &w.retain {
                let s = w.param.tensor.shape();
                masks.push(MaskRecord {
                    name: format!("{}#retain", w.param.name),
                    rows: s[0],
                    cols: s[1],
                    bits: r.bitmap(),
                });
            }
        }
        Ok(Checkpoint { config, tensors, masks })
    }

    /// Rebuilds a run from a checkpoint. Shapes come from the stored config;
    /// every parameter and mask must be present with matching dimensions.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<RunState> {
        let mut pairs = ck.config.clone();
        let merged = match pairs.remove(META_MERGED).as_deref() {
            None | Some("false") => false,
            Some("true") => true,
            Some(v) => return Err(MosaError::Format(format!("bad merged flag '{v}'"))),
        };
        let step = pairs.remove(META_STEP);
        let (config, _) = RunConfig::from_map(&pairs)?;
        let mut state = RunState::initialize(&config)?;

        let restore = |name: &str, target: &mut Tensor| -> Result<()> {
            let t = ck
                .tensor(name)
                .ok_or_else(|| MosaError::Format(format!("checkpoint lacks tensor {name}")))?;
            if t.shape() != target.shape() {
                return Err(MosaError::Format(format!(
                    "tensor {name} has shape {:?}, config implies {:?}",
                    t.shape(),
                    target.shape()
                )));
            }
            target.data_mut().copy_from_slice(t.data());
            Ok(())
        };
        for p in state.model.params_mut().into_iter().chain(state.adapters.params_mut()) {
            restore(&p.name, &mut p.tensor)?;
        }
        for w in state.adapters.split_weights_mut() {
            let name = w.param.name.clone();
            if merged {
                w.experts = None;
            } else if let Some(ms) = &w.experts {
                let bitmaps = (0..ms.num_experts())
                    .map(|i| {
                        let key = format!("{name}#expert{i}");
                        let m = ck.mask(&key).ok_or_else(|| MosaError::Format(format!("checkpoint lacks mask {key}")))?;
                        if (m.rows, m.cols) != (ms.rows(), ms.cols()) {
                            return Err(MosaError::Format(format!("mask {key} has wrong dimensions")));
                        }
                        Ok(m.bits.clone())
                    })
                    .collect::<Result<Vec<_>>>()?;
                w.experts = Some(MaskSet::from_bitmaps(ms.rows(), ms.cols(), ms.seed(), &bitmaps)?);
            }
            if w.retain.is_some() {
                let key = format!("{name}#retain");
                let m = ck.mask(&key).ok_or_else(|| MosaError::Format(format!("checkpoint lacks mask {key}")))?;
                w.retain = Some(RetainMask::from_bitmap(m.rows, m.cols, &m.bits)?);
            }
        }
        state.adapters.merged = merged;

        if let Some(step) = step {
            let step = step.parse().map_err(|_| MosaError::Format(format!("bad optimizer step '{step}'")))?;
            let mut moments = BTreeMap::new();
            for (name, t) in &ck.tensors {
                if let Some(param) = name.strip_prefix("optim.m.") {
                    let v = ck
                        .tensor(&format!("optim.v.{param}"))
                        .ok_or_else(|| MosaError::Format(format!("checkpoint lacks optim.v.{param}")))?;
                    moments.insert(param.to_string(), Moments { m: t.data().to_vec(), v: v.data().to_vec() });
                }
            }
            state.optimizer = Some(OptimizerState { step, moments });
        }
        Ok(state)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RunState> {
        RunState::from_checkpoint(&Checkpoint::load(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Checkpoint {
        let mut config = BTreeMap::new();
        config.insert("a".to_string(), "1".to_string());
        Checkpoint {
            config,
            tensors: vec![("w".into(), Tensor::new([2], vec![1.5, -0.0]).unwrap())],
            masks: vec![MaskRecord { name: "m".into(), rows: 1, cols: 3, bits: vec![true, false, true] }],
        }
    }

    #[test]
    fn golden_layout() {
        let b = small().to_bytes().unwrap();
        let mut expected = b"MSCK".to_vec();
        expected.extend([1, 0, 0, 0]);
        expected.extend([4, 0, 0, 0]);
        expected.extend(b"a=1\n");
        expected.extend([1, 0, 0, 0, 1, 0, 0, 0, b'w', 1, 0, 0, 0, 2, 0, 0, 0]);
        expected.extend(1.5f64.to_le_bytes());
        expected.extend((-0.0f64).to_le_bytes());
        expected.extend([1, 0, 0, 0, 1, 0, 0, 0, b'm', 2, 0, 0, 0, 1, 0, 0, 0, 3, 0, 0, 0, 0b101]);
        let crc = crc32fast::hash(&expected);
        expected.extend(crc.to_le_bytes());
        assert_eq!(b, expected);
    }

    #[test]
    fn round_trip_and_rejections() {
        let ck = small();
        let b = ck.to_bytes().unwrap();
        let back = Checkpoint::from_bytes(&b).unwrap();
        assert_eq!(back.to_bytes().unwrap(), b);
        assert_eq!(back.tensor("w").unwrap().data()[1].to_bits(), (-0.0f64).to_bits());
        let mut flipped = b.clone();
        flipped[36] ^= 0x01; // inside the f64 payload
        assert!(matches!(Checkpoint::from_bytes(&flipped), Err(MosaError::Corruption(_))));
        for cut in [1, 3, 4, 5, 12, b.len() - 8] {
            assert!(matches!(Checkpoint::from_bytes(&b[..b.len() - cut]), Err(MosaError::Truncated(_))), "cut {cut}");
        }
        let mut newer = b;
        newer[4] = 2;
        assert!(matches!(Checkpoint::from_bytes(&newer), Err(MosaError::Version { found: 2, supported: 1 })));
    }

    #[test]
    fn run_state_round_trip() {
        let cfg = RunConfig::parse("method=mosa\nnum_experts=3\nembed_dim=16\nnum_heads=2\nnum_layers=2").unwrap();
        let mut st = RunState::initialize(&cfg).unwrap();
        st.optimizer = Some(OptimizerState::default());
        let ck = st.to_checkpoint().unwrap();
        let back = RunState::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes().unwrap()).unwrap()).unwrap();
        assert_eq!(back, st);
    }
}
