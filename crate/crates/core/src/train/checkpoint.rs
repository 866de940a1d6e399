//! Binary checkpoints.
//!
//! Layout (little-endian): magic `VNCK`, u32 version, u32 tensor count, then
//! per tensor a u16 name length, the name, a u8 rank, u32 dims and the f32
//! payload. Parameters keep their network names, batch-norm statistics are
//! `<norm>.running_mean` / `<norm>.running_var`, optimizer accumulators are
//! `optim.<param>`, and metadata lives in `meta.*` tensors holding small
//! integers (16-bit limbs for wide values).

use std::path::Path;

use rand_chacha::ChaCha8Rng;

use super::optim::{OptimizerState, RmsPropConfig};
use crate::arch::{ArchConfig, ArchKind, Network};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"VNCK";
pub const VERSION: u32 = 1;

const META_ARCH: &str = "meta.arch";
const META_EPOCH: &str = "meta.epoch";
const META_RNG: &str = "meta.rng";
const OPTIM_PREFIX: &str = "optim.";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub tensors: Vec<(String, Tensor)>,
}

fn limbs(mut v: u128, n: usize) -> Vec<f32> {
    (0..n)
        .map(|_| {
            let l = (v & 0xffff) as f32;
            v >>= 16;
            l
        })
        .collect()
}

fn unlimb(values: &[f32]) -> Option<u128> {
    values.iter().rev().try_fold(0u128, |acc, &l| {
        (l.fract() == 0.0 && (0.0..65536.0).contains(&l)).then(|| (acc << 16) | l as u128)
    })
}

fn small_int(v: f32) -> Option<usize> {
    (v.fract() == 0.0 && v >= 0.0 && v < 16_777_216.0).then_some(v as usize)
}

fn arch_tensor(c: &ArchConfig) -> Tensor {
    let v = [
        c.kind.code() as usize,
        c.num_scales,
        c.base_channels,
        c.per_path_channels.map_or(0, |p| p + 1),
        c.input_channels,
        c.deep_supervision as usize,
        c.input_size,
    ];
    Tensor::new(&[v.len()], v.iter().map(|&x| x as f32).collect()).expect("fixed shape")
}

fn rng_tensor(rng: &ChaCha8Rng) -> Tensor {
    let mut v: Vec<f32> = rng
        .get_seed()
        .chunks_exact(2)
        .map(|c| u16::from_le_bytes([c[0], c[1]]) as f32)
        .collect();
    v.extend(limbs(rng.get_stream() as u128, 4));
    v.extend(limbs(rng.get_word_pos(), 8));
    Tensor::new(&[v.len()], v).expect("fixed shape")
}

impl Checkpoint {
    /// Snapshot of `net` with optional training state.
    pub fn from_network(
        net: &Network,
        epoch: u64,
        rng: Option<&ChaCha8Rng>,
        optim: Option<&OptimizerState>,
    ) -> Self {
        let mut tensors = vec![
            (META_ARCH.to_string(), arch_tensor(net.config())),
            (
                META_EPOCH.to_string(),
                Tensor::new(&[4], limbs(epoch as u128, 4)).expect("fixed shape"),
            ),
        ];
        if let Some(rng) = rng {
            tensors.push((META_RNG.to_string(), rng_tensor(rng)));
        }
        for p in net.params() {
            tensors.push((p.name.clone(), p.value.clone()));
        }
        for n in net.norms() {
            let c = n.running_mean.len();
            tensors.push((
                format!("{}.running_mean", n.name),
                Tensor::new(&[c], n.running_mean.clone()).expect("non-empty stats"),
            ));
            tensors.push((
                format!("{}.running_var", n.name),
                Tensor::new(&[c], n.running_var.clone()).expect("non-empty stats"),
            ));
        }
        if let Some(opt) = optim {
            for (p, v) in net.params().iter().zip(&opt.v) {
                tensors.push((format!("{OPTIM_PREFIX}{}", p.name), v.clone()));
            }
        }
        Self {
            version: VERSION,
            tensors,
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn arch(&self) -> Result<ArchConfig> {
        let bad = || Error::Format("checkpoint: malformed meta.arch".into());
        let t = self.get(META_ARCH).ok_or_else(bad)?;
        let v: Vec<usize> = t
            .data()
            .iter()
            .map(|&x| small_int(x))
            .collect::<Option<_>>()
            .ok_or_else(bad)?;
        let [kind, n, base, path, in_ch, ds, size] = v[..] else {
            return Err(bad());
        };
        let kind = u8::try_from(kind)
            .ok()
            .and_then(ArchKind::from_code)
            .ok_or_else(bad)?;
        Ok(ArchConfig {
            kind,
            num_scales: n,
            base_channels: base,
            per_path_channels: path.checked_sub(1),
            input_channels: in_ch,
            deep_supervision: ds != 0,
            input_size: size,
        })
    }

    pub fn epoch(&self) -> Result<u64> {
        self.get(META_EPOCH)
            .and_then(|t| unlimb(t.data()))
            .and_then(|v| u64::try_from(v).ok())
            .ok_or_else(|| Error::Format("checkpoint: malformed meta.epoch".into()))
    }

    /// The saved generator position, if one was stored.
    pub fn rng(&self) -> Result<Option<ChaCha8Rng>> {
        let Some(t) = self.get(META_RNG) else {
            return Ok(None);
        };
        let bad = || Error::Format("checkpoint: malformed meta.rng".into());
        let d = t.data();
        if d.len() != 28 {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, &l) in d[..16].iter().enumerate() {
            let w = unlimb(&[l]).ok_or_else(bad)? as u16;
            seed[2 * i..2 * i + 2].copy_from_slice(&w.to_le_bytes());
        }
        let stream = unlimb(&d[16..20]).ok_or_else(bad)? as u64;
        let word_pos = unlimb(&d[20..28]).ok_or_else(bad)?;
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(word_pos);
        Ok(Some(rng))
    }

    /// Optimizer state matching `net`'s parameter table, if stored.
    pub fn optimizer(&self, net: &Network, config: RmsPropConfig) -> Option<OptimizerState> {
        let v = net
            .params()
            .iter()
            .map(|p| {
                self.get(&format!("{OPTIM_PREFIX}{}", p.name))
                    .filter(|t| t.shape() == p.value.shape())
                    .cloned()
            })
            .collect::<Option<Vec<_>>>()?;
        Some(OptimizerState { config, v })
    }

    /// Rebuild the stored architecture and load the weights strictly.
    pub fn to_network(&self) -> Result<Network> {
        let mut net = Network::build(&self.arch()?, 0)?;
        load_pretrained(self, &mut net, LoadMode::Strict)?;
        Ok(net)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("checkpoint: bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "checkpoint: unsupported version {version}"
            )));
        }
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = u16::from_le_bytes(r.take(2)?.try_into().expect("2 bytes")) as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("checkpoint: tensor name is not utf-8".into()))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let shape = (0..rank)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = r
                .take(4 * n)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&shape, data)
                .map_err(|e| Error::Format(format!("checkpoint: tensor {name}: {e}")))?;
            tensors.push((name, t));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("checkpoint: trailing bytes".into()));
        }
        Ok(Self { version, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
            other => other,
        })
    }
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
            .ok_or_else(|| Error::Format("checkpoint: truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LoadMode {
    /// Every parameter and running statistic must match by name and shape,
    /// and the checkpoint may hold no others.
    Strict,
    /// Copy whatever matches by name and shape.
    ByName,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadReport {
    pub matched: usize,
    pub total: usize,
}

impl LoadReport {
    pub fn fraction(&self) -> f64 {
        self.matched as f64 / self.total as f64
    }
}

fn is_weight_name(name: &str) -> bool {
    !name.starts_with("meta.") && !name.starts_with(OPTIM_PREFIX)
}

/// Copy weights and batch-norm statistics from `ckpt` into `net`. On error
/// `net` is left untouched.
pub fn load_pretrained(ckpt: &Checkpoint, net: &mut Network, mode: LoadMode) -> Result<LoadReport> {
    let mut wanted: Vec<(String, Vec<usize>)> = net
        .params()
        .iter()
        .map(|p| (p.name.clone(), p.value.shape().to_vec()))
        .collect();
    for n in net.norms() {
        let c = vec![n.running_mean.len()];
        wanted.push((format!("{}.running_mean", n.name), c.clone()));
        wanted.push((format!("{}.running_var", n.name), c));
    }
    let found: Vec<Option<&Tensor>> = wanted
        .iter()
        .map(|(name, shape)| ckpt.get(name).filter(|t| t.shape() == &shape[..]))
        .collect();
    if mode == LoadMode::Strict {
        let mut offenders: Vec<String> = wanted
            .iter()
            .zip(&found)
            .filter(|(_, f)| f.is_none())
            .map(|((name, shape), _)| match ckpt.get(name) {
                Some(t) => format!("{name} (shape {:?}, expected {shape:?})", t.shape()),
                None => format!("{name} (missing)"),
            })
            .collect();
        offenders.extend(
            ckpt.tensors
                .iter()
                .filter(|(n, _)| is_weight_name(n) && !wanted.iter().any(|(w, _)| w == n))
                .map(|(n, _)| format!("{n} (unexpected)")),
        );
        if !offenders.is_empty() {
            return Err(Error::Load { offenders });
        }
    }
    let n_params = net.params().len();
    let mut matched = 0;
    for (k, t) in found.iter().enumerate() {
        let Some(t) = t else { continue };
        matched += 1;
        if k < n_params {
            net.params_mut()[k].value = (*t).clone();
        } else {
            let j = k - n_params;
            let layer = &mut net.norms_mut()[j / 2];
            if j % 2 == 0 {
                layer.running_mean = t.data().to_vec();
            } else {
                layer.running_var = t.data().to_vec();
            }
        }
    }
    Ok(LoadReport {
        matched,
        total: wanted.len(),
    })
}
