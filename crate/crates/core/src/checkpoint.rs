//! Binary checkpoint container.
//!
//! ```text
//! "GELI-CKPT"                magic, 9 bytes
//! u32                        format version
//! u8 kind, u8 activation
//! u32 n, then n × (u32 rows, u32 cols)      shape manifest
//! u64 optimizer step count, 5 × f64 (lr, beta1, beta2, eps, weight decay)
//! u32 m, then m × (u64 len, len × f64)      parameters, first moments, second moments
//! ```
//! All integers and doubles are little-endian.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::reward_net::{Activation, AdamWConfig, AdamWState, Layer, ParamSet, RewardNet};

pub const MAGIC: &[u8; 9] = b"GELI-CKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    RewardNet = 0,
    Policy = 1,
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Container {
    pub kind: Kind,
    pub activation: u8,
    pub shapes: Vec<(u32, u32)>,
    pub step_count: u64,
    pub config: AdamWConfig,
    pub arrays: Vec<Vec<f64>>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        b.push(self.kind as u8);
        b.push(self.activation);
        b.extend_from_slice(&(self.shapes.len() as u32).to_le_bytes());
        for (r, c) in &self.shapes {
            b.extend_from_slice(&r.to_le_bytes());
            b.extend_from_slice(&c.to_le_bytes());
        }
        b.extend_from_slice(&self.step_count.to_le_bytes());
        let c = &self.config;
        for x in [c.lr, c.beta1, c.beta2, c.eps, c.weight_decay] {
            b.extend_from_slice(&x.to_le_bytes());
        }
        b.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for a in &self.arrays {
            b.extend_from_slice(&(a.len() as u64).to_le_bytes());
            for x in a {
                b.extend_from_slice(&x.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::CheckpointVersion("bad magic bytes".into()));
        }
        r.pos = MAGIC.len();
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::CheckpointVersion(format!(
                "format version {version}, expected {FORMAT_VERSION}"
            )));
        }
        let kind = match r.u8()? {
            0 => Kind::RewardNet,
            1 => Kind::Policy,
            k => return Err(Error::CheckpointCorrupt(format!("unknown kind {k}"))),
        };
        let activation = r.u8()?;
        let n = r.u32()? as usize;
        let mut shapes = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            shapes.push((r.u32()?, r.u32()?));
        }
        let step_count = r.u64()?;
        let config = AdamWConfig {
            lr: r.f64()?,
            beta1: r.f64()?,
            beta2: r.f64()?,
            eps: r.f64()?,
            weight_decay: r.f64()?,
        };
        let m = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(m.min(1024));
        for _ in 0..m {
            let len = r.u64()? as usize;
            if len > (bytes.len() - r.pos) / 8 {
                return Err(Error::CheckpointCorrupt("truncated array".into()));
            }
            arrays.push((0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?);
        }
        if r.pos != bytes.len() {
            return Err(Error::CheckpointCorrupt("trailing bytes".into()));
        }
        if arrays.len() != 3 * shapes.len()
            || shapes
                .iter()
                .cycle()
                .zip(&arrays)
                .any(|(&(rr, cc), a)| a.len() != rr as usize * cc as usize)
        {
            return Err(Error::CheckpointCorrupt("arrays disagree with shape manifest".into()));
        }
        Ok(Container {
            kind,
            activation,
            shapes,
            step_count,
            config,
            arrays,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Splits arrays into (params, first moments, second moments) and rebuilds the optimizer state.
    pub fn into_parts(self) -> (Vec<(u32, u32)>, Vec<Vec<f64>>, AdamWState) {
        let n = self.shapes.len();
        let mut arrays = self.arrays;
        let second = arrays.split_off(2 * n);
        let first = arrays.split_off(n);
        (
            self.shapes,
            arrays,
            AdamWState {
                config: self.config,
                step_count: self.step_count,
                first_moment: first,
                second_moment: second,
            },
        )
    }

    pub fn from_parts(
        kind: Kind,
        activation: u8,
        shapes: Vec<(u32, u32)>,
        params: &impl ParamSet,
        state: &AdamWState,
    ) -> Self {
        let mut arrays: Vec<Vec<f64>> = params.tensors().into_iter().map(<[f64]>::to_vec).collect();
        arrays.extend(state.first_moment.iter().cloned());
        arrays.extend(state.second_moment.iter().cloned());
        Container {
            kind,
            activation,
            shapes,
            step_count: state.step_count,
            config: state.config,
            arrays,
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take<const N: usize>(&mut self) -> Result<[u8; N]> {
        let end = self.pos + N;
        let slice = self
            .bytes
            .get(self.pos..end)
            .ok_or_else(|| Error::CheckpointCorrupt("unexpected end of file".into()))?;
        self.pos = end;
        Ok(slice.try_into().expect("length checked"))
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take::<1>()?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take()?))
    }
}

pub fn save_checkpoint(net: &RewardNet, state: &AdamWState, path: impl AsRef<Path>) -> Result<()> {
    let shapes = net
        .layers()
        .iter()
        .flat_map(|l| [(l.out_dim as u32, l.in_dim as u32), (l.out_dim as u32, 1)])
        .collect();
    Container::from_parts(Kind::RewardNet, net.activation().code(), shapes, net, state)
        .write(path.as_ref())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(RewardNet, AdamWState)> {
    let c = Container::read(path.as_ref())?;
    if c.kind != Kind::RewardNet {
        return Err(Error::CheckpointCorrupt("not a reward-network checkpoint".into()));
    }
    let activation = Activation::from_code(c.activation)
        .ok_or_else(|| Error::CheckpointCorrupt(format!("unknown activation {}", c.activation)))?;
    let (shapes, params, state) = c.into_parts();
    if shapes.len() % 2 != 0 {
        return Err(Error::CheckpointCorrupt("odd tensor count".into()));
    }
    let mut params = params.into_iter();
    let layers = shapes
        .chunks_exact(2)
        .map(|s| Layer {
            out_dim: s[0].0 as usize,
            in_dim: s[0].1 as usize,
            weights: params.next().unwrap_or_default(),
            bias: params.next().unwrap_or_default(),
        })
        .collect();
    let net = RewardNet::from_layers(layers, activation)
        .map_err(|e| Error::CheckpointCorrupt(e.to_string()))?;
    Ok((net, state))
}
