//! Versioned binary checkpoint container shared by every method.
//!
//! Little-endian layout (version 1):
//!
//! | field            | encoding                                              |
//! |------------------|-------------------------------------------------------|
//! | magic            | 8 bytes `BNNCKPT\0`                                   |
//! | version          | u32                                                   |
//! | kind             | u8: 1 map, 2 chain, 3 vi, 4 laplace, 5 ensemble       |
//! | reserved         | 3 zero bytes                                          |
//! | spec fingerprint | u64, first 8 bytes of SHA-256 of the spec text        |
//! | spec text        | u32 length + UTF-8                                    |
//! | metadata         | u32 count, then per entry two u32-length UTF-8 strings |
//! | arrays           | u32 count, then per array a u32-length UTF-8 name, a u64 element count and that many f64 |
//!
//! Nothing may follow the last array.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{BnnError, Result};
use crate::hmc::{Chain, ChainTrace, HmcConfig};
use crate::laplace::LastLayerPosterior;
use crate::tensor_grad::{NetworkSpec, ParamVector};
use crate::vi::VariationalPosterior;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"BNNCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CheckpointKind {
    Map = 1,
    Chain = 2,
    Vi = 3,
    Laplace = 4,
    Ensemble = 5,
}

impl CheckpointKind {
    fn from_u8(v: u8) -> Option<Self> {
        Some(match v {
            1 => Self::Map,
            2 => Self::Chain,
            3 => Self::Vi,
            4 => Self::Laplace,
            5 => Self::Ensemble,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub spec: NetworkSpec,
    pub meta: BTreeMap<String, String>,
    pub arrays: Vec<(String, Vec<f64>)>,
}

impl Checkpoint {
    pub fn new(kind: CheckpointKind, spec: NetworkSpec) -> Self {
        Self {
            kind,
            spec,
            meta: BTreeMap::new(),
            arrays: Vec::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.meta.insert(key.to_string(), value.to_string());
        self
    }

    pub fn with_array(mut self, name: &str, values: Vec<f64>) -> Self {
        self.arrays.push((name.to_string(), values));
        self
    }

    pub fn array(&self, name: &str) -> Result<&[f64]> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| v.as_slice())
            .ok_or_else(|| BnnError::InvalidArgument(format!("checkpoint has no array {name:?}")))
    }

    pub fn meta_value<T: std::str::FromStr>(&self, key: &str) -> Result<T> {
        let raw = self
            .meta
            .get(key)
            .ok_or_else(|| BnnError::InvalidArgument(format!("checkpoint has no metadata {key:?}")))?;
        raw.parse()
            .map_err(|_| BnnError::InvalidArgument(format!("checkpoint metadata {key}={raw:?} is malformed")))
    }

    pub fn expect_kind(&self, kind: CheckpointKind) -> Result<()> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(BnnError::InvalidArgument(format!("expected a {kind:?} checkpoint, found {:?}", self.kind)))
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.push(self.kind as u8);
        out.extend_from_slice(&[0; 3]);
        out.extend_from_slice(&self.spec.fingerprint().to_le_bytes());
        put_str(&mut out, &self.spec.to_string());
        out.extend_from_slice(&(self.meta.len() as u32).to_le_bytes());
        for (k, v) in &self.meta {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, values) in &self.arrays {
            put_str(&mut out, name);
            out.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != CHECKPOINT_MAGIC {
            return Err(BnnError::Parse {
                offset: 0,
                message: "bad checkpoint magic".into(),
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(BnnError::Parse {
                offset: 8,
                message: format!("unsupported checkpoint version {version}"),
            });
        }
        let kind_byte = r.take(4)?[0];
        let kind = CheckpointKind::from_u8(kind_byte).ok_or_else(|| BnnError::Parse {
            offset: 12,
            message: format!("unknown checkpoint kind {kind_byte}"),
        })?;
        let fingerprint = r.u64()?;
        let spec_at = r.pos;
        let spec: NetworkSpec = r.string()?.parse()?;
        if spec.fingerprint() != fingerprint {
            return Err(BnnError::Parse {
                offset: spec_at,
                message: "network spec does not match its fingerprint".into(),
            });
        }
        let mut meta = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            meta.insert(k, r.string()?);
        }
        let n_arrays = r.u32()?;
        let mut arrays = Vec::new();
        for _ in 0..n_arrays {
            let name = r.string()?;
            let len = r.u64()? as usize;
            let raw = r.take(len.checked_mul(8).ok_or_else(|| r.truncated(usize::MAX))?)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            arrays.push((name, values));
        }
        if r.pos != bytes.len() {
            return Err(BnnError::Parse {
                offset: r.pos,
                message: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Self { kind, spec, meta, arrays })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.encode())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn truncated(&self, need: usize) -> BnnError {
        BnnError::Truncated {
            expected: self.pos.saturating_add(need),
            actual: self.bytes.len(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.truncated(n));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let len = self.u32()? as usize;
        let at = self.pos;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| BnnError::Parse {
            offset: at,
            message: "invalid UTF-8".into(),
        })
    }
}

// Typed views.

pub fn map_checkpoint(spec: &NetworkSpec, params: &ParamVector) -> Checkpoint {
    Checkpoint::new(CheckpointKind::Map, spec.clone()).with_array("theta", params.values.clone())
}

pub fn map_params(ckpt: &Checkpoint) -> Result<ParamVector> {
    ckpt.expect_kind(CheckpointKind::Map)?;
    ParamVector::from_values(&ckpt.spec, ckpt.array("theta")?.to_vec())
}

pub fn chain_checkpoint(spec: &NetworkSpec, chain: &Chain) -> Checkpoint {
    let c = &chain.config;
    let dim = chain.samples.first().map_or(0, Vec::len);
    let as_f64 = |v: &[usize]| v.iter().map(|&x| x as f64).collect();
    Checkpoint::new(CheckpointKind::Chain, spec.clone())
        .with_meta("seed", c.seed)
        .with_meta("step_size", c.step_size)
        .with_meta("leapfrog_steps", c.leapfrog_steps)
        .with_meta("total_steps", c.total_steps)
        .with_meta("burn_in", c.burn_in)
        .with_meta("thin", c.thin)
        .with_meta("divergence_threshold", c.divergence_threshold)
        .with_meta("monitor_every", c.monitor_every)
        .with_meta("accept_count", chain.accept_count)
        .with_meta("divergent_count", chain.divergent_count)
        .with_meta("n_samples", chain.samples.len())
        .with_meta("dim", dim)
        .with_array("samples", chain.samples.concat())
        .with_array("trace.step", as_f64(&chain.trace.step))
        .with_array("trace.potential", chain.trace.potential.clone())
        .with_array("trace.nll", chain.trace.nll.clone())
        .with_array("trace.val_accuracy", chain.trace.val_accuracy.clone())
}

pub fn chain_from_checkpoint(ckpt: &Checkpoint) -> Result<Chain> {
    ckpt.expect_kind(CheckpointKind::Chain)?;
    let config = HmcConfig {
        step_size: ckpt.meta_value("step_size")?,
        leapfrog_steps: ckpt.meta_value("leapfrog_steps")?,
        total_steps: ckpt.meta_value("total_steps")?,
        burn_in: ckpt.meta_value("burn_in")?,
        thin: ckpt.meta_value("thin")?,
        seed: ckpt.meta_value("seed")?,
        divergence_threshold: ckpt.meta_value("divergence_threshold")?,
        monitor_every: ckpt.meta_value("monitor_every")?,
    };
    let n: usize = ckpt.meta_value("n_samples")?;
    let dim: usize = ckpt.meta_value("dim")?;
    let flat = ckpt.array("samples")?;
    if flat.len() != n * dim {
        return Err(BnnError::InvalidArgument(format!("{} sample values for {n} x {dim}", flat.len())));
    }
    let samples = if dim == 0 { vec![Vec::new(); n] } else { flat.chunks(dim).map(<[f64]>::to_vec).collect() };
    Ok(Chain {
        config,
        samples,
        accept_count: ckpt.meta_value("accept_count")?,
        divergent_count: ckpt.meta_value("divergent_count")?,
        trace: ChainTrace {
            step: ckpt.array("trace.step")?.iter().map(|&s| s as usize).collect(),
            potential: ckpt.array("trace.potential")?.to_vec(),
            nll: ckpt.array("trace.nll")?.to_vec(),
            val_accuracy: ckpt.array("trace.val_accuracy")?.to_vec(),
        },
    })
}

pub fn vi_checkpoint(spec: &NetworkSpec, vp: &VariationalPosterior) -> Checkpoint {
    Checkpoint::new(CheckpointKind::Vi, spec.clone())
        .with_array("mu", vp.mu.values.clone())
        .with_array("rho", vp.rho.clone())
}

pub fn vi_from_checkpoint(ckpt: &Checkpoint) -> Result<VariationalPosterior> {
    ckpt.expect_kind(CheckpointKind::Vi)?;
    let mu = ParamVector::from_values(&ckpt.spec, ckpt.array("mu")?.to_vec())?;
    VariationalPosterior::new(mu, ckpt.array("rho")?.to_vec())
}

pub fn laplace_checkpoint(spec: &NetworkSpec, llp: &LastLayerPosterior) -> Checkpoint {
    Checkpoint::new(CheckpointKind::Laplace, spec.clone())
        .with_meta("prior_std", llp.prior_std)
        .with_array("theta_map", llp.map.values.clone())
        .with_array("last_layer_mean", llp.mean.clone())
        .with_array("last_layer_var", llp.var.clone())
}

pub fn laplace_from_checkpoint(ckpt: &Checkpoint) -> Result<LastLayerPosterior> {
    ckpt.expect_kind(CheckpointKind::Laplace)?;
    let map = ParamVector::from_values(&ckpt.spec, ckpt.array("theta_map")?.to_vec())?;
    let llp = LastLayerPosterior {
        mean: ckpt.array("last_layer_mean")?.to_vec(),
        var: ckpt.array("last_layer_var")?.to_vec(),
        prior_std: ckpt.meta_value("prior_std")?,
        map,
    };
    if llp.mean.len() != llp.range().len() || llp.var.len() != llp.mean.len() {
        return Err(BnnError::InvalidArgument("last-layer statistics do not match the network".into()));
    }
    Ok(llp)
}

pub fn ensemble_checkpoint(spec: &NetworkSpec, members: &[(u64, Vec<f64>)]) -> Checkpoint {
    let seeds: Vec<String> = members.iter().map(|(s, _)| s.to_string()).collect();
    let mut ckpt = Checkpoint::new(CheckpointKind::Ensemble, spec.clone())
        .with_meta("members", members.len())
        .with_meta("seeds", seeds.join(","));
    for (i, (_, theta)) in members.iter().enumerate() {
        ckpt = ckpt.with_array(&format!("member.{i}"), theta.clone());
    }
    ckpt
}

pub fn ensemble_from_checkpoint(ckpt: &Checkpoint) -> Result<Vec<Vec<f64>>> {
    ckpt.expect_kind(CheckpointKind::Ensemble)?;
    let n: usize = ckpt.meta_value("members")?;
    (0..n)
        .map(|i| Ok(ParamVector::from_values(&ckpt.spec, ckpt.array(&format!("member.{i}"))?.to_vec())?.values))
        .collect()
}
