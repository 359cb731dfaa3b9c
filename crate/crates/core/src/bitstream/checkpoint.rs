//! Checkpoint file: a frozen codec, its coding tables and the training λ.
//!
//! ```text
//! "PCCK" u8 version=1  u8 config id  u32 P  f32 λ
//! u32 #params   { u16 name_len, name, u8 ndim, ndim × u32 dim, f32 values }
//! u32 #norms    { u16 name_len, name, u32 C, C × f32 mean, C × f32 var }
//! u32 #tables   { i32 min, u32 cdf_len, cdf_len × u32 }
//! ```
//!
//! All integers and floats little-endian. Loading restores every value
//! bit for bit.

use std::fs;
use std::path::Path;

use crate::codec::{Codec, CodecConfig, ConfigName};
use crate::entropy::CodingTable;
use crate::error::{Error, Result};
use crate::binio::{Reader, Writer};
use crate::nn::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"PCCK";
pub const CHECKPOINT_VERSION: u8 = 1;

/// A frozen codec in eval mode with the integer tables used for coding.
#[derive(Debug, Clone)]
pub struct Model {
    pub codec: Codec<f32>,
    pub tables: Vec<CodingTable>,
    pub lambda: f32,
}

impl Model {
    /// Freezes `codec` (eval mode) and builds its coding tables.
    pub fn freeze(mut codec: Codec<f32>, lambda: f32) -> Self {
        codec.set_mode(crate::nn::Mode::Eval);
        let tables = crate::entropy::build_tables(codec.prior(), codec.params());
        Model { codec, tables, lambda }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::default();
        w.0.extend_from_slice(CHECKPOINT_MAGIC);
        w.u8(CHECKPOINT_VERSION);
        let config = self.codec.config();
        w.u8(config.name.id());
        w.u32(config.points as u32);
        w.f32s(&[self.lambda]);

        let params = self.codec.params();
        w.u32(params.len() as u32);
        for p in params.iter() {
            w.name(&p.name);
            w.u8(p.value.shape().len() as u8);
            p.value.shape().iter().for_each(|&d| w.u32(d as u32));
            w.f32s(p.value.data());
        }
        let norms = self.codec.batch_norms();
        w.u32(norms.len() as u32);
        for (name, s) in norms {
            w.name(&name);
            w.u32(s.channels() as u32);
            w.f32s(&s.running_mean);
            w.f32s(&s.running_var);
        }
        w.u32(self.tables.len() as u32);
        for t in &self.tables {
            w.0.extend_from_slice(&t.min.to_le_bytes());
            w.u32(t.cdf.len() as u32);
            t.cdf.iter().for_each(|&c| w.u32(c));
        }
        w.0
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::format("not a checkpoint (bad magic)"));
        }
        let version = r.u8()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(format!("checkpoint version {version} is not supported")));
        }
        let name = ConfigName::from_id(r.u8()?)?;
        let points = r.u32()? as usize;
        let lambda = r.f32s(1)?[0];
        let mut codec = Codec::<f32>::new(CodecConfig::new(name, points)?, 0)?;

        let n_params = r.u32()? as usize;
        if n_params != codec.params().len() {
            return Err(Error::format(format!(
                "checkpoint has {n_params} parameters, `{name}` has {}",
                codec.params().len()
            )));
        }
        let mut seen = vec![false; n_params];
        for _ in 0..n_params {
            let pname = r.name()?;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape.iter().product();
            let values = Tensor::from_vec(&shape, r.f32s(len)?)?;
            let id = codec
                .params()
                .find(&pname)
                .ok_or_else(|| Error::format(format!("unknown parameter `{pname}`")))?;
            let idx = codec.params().ids().position(|i| i == id).unwrap();
            if std::mem::replace(&mut seen[idx], true) {
                return Err(Error::format(format!("duplicate parameter `{pname}`")));
            }
            codec.params_mut().set_value(id, values)?;
        }

        let n_norms = r.u32()? as usize;
        if n_norms != codec.batch_norms().len() {
            return Err(Error::format(format!("checkpoint has {n_norms} batch norms")));
        }
        for _ in 0..n_norms {
            let nname = r.name()?;
            let c = r.u32()? as usize;
            let mean = r.f32s(c)?;
            let var = r.f32s(c)?;
            let state = codec
                .batch_norm_mut(&nname)
                .ok_or_else(|| Error::format(format!("unknown batch norm `{nname}`")))?;
            if state.channels() != c {
                return Err(Error::shape("checkpoint", format!("batch norm `{nname}` has {c} channels")));
            }
            state.running_mean = mean;
            state.running_var = var;
        }

        let n_tables = r.u32()? as usize;
        if n_tables != codec.latent_size() {
            return Err(Error::format(format!(
                "checkpoint has {n_tables} coding tables for a latent of {}",
                codec.latent_size()
            )));
        }
        let mut tables = Vec::with_capacity(n_tables);
        for c in 0..n_tables {
            let min = i32::from_le_bytes(r.take(4)?.try_into().unwrap());
            let len = r.u32()? as usize;
            let cdf = (0..len).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
            let t = CodingTable { min, cdf };
            t.validate(c)?;
            tables.push(t);
        }
        if !r.is_done() {
            return Err(Error::format("trailing bytes after checkpoint"));
        }
        codec.set_mode(crate::nn::Mode::Eval);
        Ok(Model { codec, tables, lambda })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
