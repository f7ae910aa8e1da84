//! Binary checkpoint container.
//!
//! Layout (little-endian): magic `MSRN`, `u32` version, `u32` tensor count,
//! then per tensor: `u32` name length, UTF-8 name, `u8` dtype (1 = f32,
//! 2 = f64), `u32` rank, `u64` extent per axis, raw values.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::supernet::network::{Network, SupernetConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MSRN";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 1,
    F64 = 2,
}

/// Serializes named tensors; values are stored in `dtype`.
pub fn write_tensors<W: Write>(mut w: W, tensors: &[(String, Tensor)], dtype: DType) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(tensors.len() as u32).to_le_bytes())?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&[dtype as u8])?;
        w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        match dtype {
            DType::F64 => {
                for v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            DType::F32 => {
                for v in t.data() {
                    w.write_all(&(*v as f32).to_le_bytes())?;
                }
            }
        }
    }
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    source: &'a str,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.source,
                self.pos as u64,
                format!("truncated while reading {what}"),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn read_tensors(bytes: &[u8], source: &str) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { bytes, pos: 0, source };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format(source, 0, "bad magic bytes, not an MSRN checkpoint"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::format(source, 4, format!("unsupported version {version}")));
    }
    let count = r.u32("tensor count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let at = r.pos as u64;
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format(source, at, "tensor name is not UTF-8"))?
            .to_string();
        let dt_at = r.pos as u64;
        let dtype = match r.take(1, "dtype")?[0] {
            1 => DType::F32,
            2 => DType::F64,
            d => return Err(Error::format(source, dt_at, format!("unknown dtype tag {d}"))),
        };
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::format(source, at, "tensor extent overflows"))?;
        let data = match dtype {
            DType::F64 => r
                .take(n.saturating_mul(8), &name)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            DType::F32 => r
                .take(n.saturating_mul(4), &name)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
        };
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::format(source, r.pos as u64, "trailing bytes after last tensor"));
    }
    Ok(out)
}

fn meta(v: f64) -> Tensor {
    Tensor::scalar(v).reshape(&[1]).expect("one value")
}

impl Network {
    /// Every piece of training state as named tensors, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        let cfg = self.config();
        let (step, adjusted_at) = self.step_state();
        let mut out = vec![
            ("meta.cells".to_string(), meta(cfg.cells as f64)),
            ("meta.nodes".to_string(), meta(cfg.nodes as f64)),
            ("meta.channels".to_string(), meta(cfg.channels as f64)),
            ("meta.num_classes".to_string(), meta(cfg.num_classes as f64)),
            ("meta.input_channels".to_string(), meta(cfg.input_channels as f64)),
            ("meta.input_h".to_string(), meta(cfg.input_size.0 as f64)),
            ("meta.input_w".to_string(), meta(cfg.input_size.1 as f64)),
            ("meta.constrained".to_string(), meta(if self.is_constrained() { 1.0 } else { 0.0 })),
            ("meta.epoch".to_string(), meta(self.epoch as f64)),
            ("meta.step".to_string(), meta(step as f64)),
            ("meta.adjusted_at".to_string(), meta(adjusted_at.map_or(-1.0, |s| s as f64))),
        ];
        for (_, p) in self.store().iter() {
            out.push((format!("param/{}", p.name), p.value.clone()));
            out.push((format!("momentum/{}", p.name), p.momentum.clone()));
        }
        for bn in self.batch_norms() {
            let c = bn.stats.mean.len();
            out.push((
                format!("bn/{}.running_mean", bn.name),
                Tensor::new(vec![c], bn.stats.mean.clone()).expect("channel vector"),
            ));
            out.push((
                format!("bn/{}.running_var", bn.name),
                Tensor::new(vec![c], bn.stats.var.clone()).expect("channel vector"),
            ));
        }
        for (i, h) in self.handles().iter().enumerate() {
            out.push((format!("spectral/{i}.vector"), h.vector().clone()));
            out.push((format!("spectral/{i}.sigma"), meta(h.sigma())));
        }
        out
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        write_tensors(&mut buf, &self.named_tensors(), DType::F64)?;
        std::fs::write(path, buf)?;
        Ok(())
    }

    /// Rebuilds a supernet from a checkpoint written by [`Network::save_checkpoint`].
    pub fn load_supernet_checkpoint(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let source = path.display().to_string();
        let tensors = read_tensors(&bytes, &source)?;
        Self::from_named_tensors(&tensors, &source)
    }

    pub fn from_named_tensors(tensors: &[(String, Tensor)], source: &str) -> Result<Self> {
        let index: HashMap<&str, &Tensor> = tensors.iter().map(|(n, t)| (n.as_str(), t)).collect();
        let lookup = |name: &str| -> Result<&Tensor> {
            index
                .get(name)
                .copied()
                .ok_or_else(|| Error::format(source, 0, format!("missing tensor {name}")))
        };
        let scalar = |name: &str| -> Result<f64> { Ok(lookup(name)?.data()[0]) };
        let count = |name: &str| -> Result<usize> {
            let v = scalar(name)?;
            if v < 0.0 || v.fract() != 0.0 {
                return Err(Error::format(source, 0, format!("{name} = {v} is not a count")));
            }
            Ok(v as usize)
        };
        let cfg = SupernetConfig {
            cells: count("meta.cells")?,
            nodes: count("meta.nodes")?,
            channels: count("meta.channels")?,
            num_classes: count("meta.num_classes")?,
            input_channels: count("meta.input_channels")?,
            input_size: (count("meta.input_h")?, count("meta.input_w")?),
        };
        if scalar("meta.constrained")? != 1.0 {
            return Err(Error::format(source, 0, "checkpoint does not hold a supernet"));
        }
        let mut net = Network::supernet(&cfg, 0).map_err(|e| Error::format(source, 0, e.to_string()))?;
        net.epoch = count("meta.epoch")?;
        let adjusted = scalar("meta.adjusted_at")?;
        net.set_step_state(
            count("meta.step")? as u64,
            (adjusted >= 0.0).then_some(adjusted as u64),
        );
        let names: Vec<String> = net.store().iter().map(|(_, p)| p.name.clone()).collect();
        for (i, name) in names.iter().enumerate() {
            let value = lookup(&format!("param/{name}"))?.clone();
            let momentum = lookup(&format!("momentum/{name}"))?.clone();
            let p = net.store_mut().get_mut(crate::nn::ParamId(i));
            if value.shape() != p.value.shape() || momentum.shape() != p.value.shape() {
                return Err(Error::format(source, 0, format!("shape mismatch for parameter {name}")));
            }
            p.value = value;
            p.momentum = momentum;
        }
        for bn in net.batch_norms_mut() {
            let mean = lookup(&format!("bn/{}.running_mean", bn.name))?;
            let var = lookup(&format!("bn/{}.running_var", bn.name))?;
            if mean.len() != bn.stats.mean.len() || var.len() != bn.stats.var.len() {
                return Err(Error::format(source, 0, format!("shape mismatch for batch norm {}", bn.name)));
            }
            bn.stats.mean = mean.data().to_vec();
            bn.stats.var = var.data().to_vec();
        }
        for (i, h) in net.handles_mut().iter_mut().enumerate() {
            let v = lookup(&format!("spectral/{i}.vector"))?.clone();
            let s = lookup(&format!("spectral/{i}.sigma"))?.data()[0];
            h.restore(v, s).map_err(|e| Error::format(source, 0, e.to_string()))?;
        }
        Ok(net)
    }
}
