//! Binary checkpoint: `MPHN`, version, kind, image size, flags, a shape
//! table, then every weight as a little-endian f32. All integers are u32 LE.

use std::io::{Read, Write};
use std::path::Path;

use super::logreg::LogReg;
use super::net::{MiniPhysNet, NetConfig, FLAG_SHARED_HEADS};
use super::tensor::{ParamSpec, ParamStore};
use super::{AnyModel, LearnError, Model, ModelKind};

pub const MAGIC: &[u8; 4] = b"MPHN";
pub const VERSION: u32 = 1;

fn kind_code(kind: ModelKind) -> u32 {
    match kind {
        ModelKind::Mini => 0,
        ModelKind::Logreg => 1,
        ModelKind::LogregFactored => 2,
    }
}

pub fn write_checkpoint<W: Write>(model: &dyn Model<f32>, mut w: W) -> Result<(), LearnError> {
    let mut buf = Vec::with_capacity(64 + 4 * model.params().count());
    buf.extend_from_slice(MAGIC);
    let params = model.params();
    for v in [
        VERSION,
        kind_code(model.kind()),
        model.image_size() as u32,
        model.flags(),
        params.specs().len() as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for s in params.specs() {
        buf.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
        buf.extend_from_slice(s.name.as_bytes());
        buf.extend_from_slice(&(s.shape.len() as u32).to_le_bytes());
        for &d in &s.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for v in &params.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn checkpoint_bytes(model: &dyn Model<f32>) -> Vec<u8> {
    let mut out = Vec::new();
    write_checkpoint(model, &mut out).expect("writing to a Vec cannot fail");
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], LearnError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| LearnError::Checkpoint("truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, LearnError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<AnyModel, LearnError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(LearnError::Checkpoint("bad magic".into()));
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(LearnError::Checkpoint(format!("unsupported version {version}")));
    }
    let kind = c.u32()?;
    let image_size = c.u32()? as usize;
    let flags = c.u32()?;
    let n = c.u32()? as usize;
    let mut specs = Vec::with_capacity(n.min(1024));
    for _ in 0..n {
        let len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| LearnError::Checkpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let ndim = c.u32()? as usize;
        let shape = (0..ndim).map(|_| c.u32().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        specs.push(ParamSpec { name, shape });
    }
    let count: usize = specs.iter().map(ParamSpec::len).sum();
    let rest = &bytes[c.pos..];
    if rest.len() != 4 * count {
        return Err(LearnError::Checkpoint(format!(
            "expected {} weight bytes, found {}",
            4 * count,
            rest.len()
        )));
    }
    let data = rest
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    let params = ParamStore::with_data(specs, data)?;
    match kind {
        0 => {
            let cfg = NetConfig {
                image_size,
                shared_heads: flags & FLAG_SHARED_HEADS != 0,
            };
            Ok(AnyModel::Mini(MiniPhysNet::from_params(cfg, params)?))
        }
        1 | 2 => Ok(AnyModel::LogReg(LogReg::from_params(image_size, kind == 2, params)?)),
        other => Err(LearnError::Checkpoint(format!("unknown model kind {other}"))),
    }
}

pub fn save_checkpoint(model: &dyn Model<f32>, path: &Path) -> Result<(), LearnError> {
    std::fs::write(path, checkpoint_bytes(model))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<AnyModel, LearnError> {
    read_checkpoint(std::fs::File::open(path)?)
}
