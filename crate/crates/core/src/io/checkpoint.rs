use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"LPMK";
const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CheckpointKind {
    Backbone,
    /// Prompt set for the λ with this id and value.
    PromptSet {
        lambda_id: u8,
        lambda: f64,
    },
}

/// A named tensor table tied to one model architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model_id: u32,
    pub kind: CheckpointKind,
    pub params: ParamStore<f32>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.model_id.to_le_bytes());
        match self.kind {
            CheckpointKind::Backbone => out.push(0),
            CheckpointKind::PromptSet { lambda_id, lambda } => {
                out.push(1);
                out.push(lambda_id);
                out.extend_from_slice(&lambda.to_le_bytes());
            }
        }
        let entries: Vec<_> = self.params.all().collect();
        out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
        for (name, t) in entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(self.params.is_buffer(name) as u8);
            out.push(t.shape().len() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let model_id = r.u32()?;
        let kind = match r.u8()? {
            0 => CheckpointKind::Backbone,
            1 => {
                let lambda_id = r.u8()?;
                let lambda = f64::from_le_bytes(r.take(8)?.try_into().unwrap());
                CheckpointKind::PromptSet { lambda_id, lambda }
            }
            k => return Err(Error::Format(format!("unknown checkpoint kind {k}"))),
        };
        let count = r.u32()?;
        let mut params = ParamStore::new();
        for _ in 0..count {
            let len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
                .to_string();
            let buffer = r.u8()? != 0;
            let ndim = r.u8()? as usize;
            let shape = (0..ndim)
                .map(|_| r.u32().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let raw = r.take(
                n.checked_mul(4)
                    .ok_or_else(|| Error::Format("tensor too large".into()))?,
            )?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            if params.get(&name).is_ok() {
                return Err(Error::Format(format!("duplicate tensor {name}")));
            }
            let t = Tensor::new(&shape, data)?;
            if buffer {
                params.insert_buffer(name, t);
            } else {
                params.insert(name, t);
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after tensor table".into()));
        }
        Ok(Self {
            model_id,
            kind,
            params,
        })
    }

    /// Fails unless `reference` has exactly the same tensor names and shapes.
    pub fn check_layout(&self, reference: &ParamStore<f32>) -> Result<()> {
        let ours: Vec<_> = self.params.all().map(|(n, t)| (n, t.shape())).collect();
        let want: Vec<_> = reference.all().map(|(n, t)| (n, t.shape())).collect();
        if ours != want {
            let missing = want.iter().find(|w| !ours.contains(w));
            let extra = ours.iter().find(|o| !want.contains(o));
            return Err(Error::Format(format!(
                "tensor table does not match the model config (missing {missing:?}, unexpected {extra:?})"
            )));
        }
        Ok(())
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    super::write_atomic(path, &ck.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path)?;
    Checkpoint::parse(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        e => e,
    })
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("truncated checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bit_identical_round_trip() {
        let mut params = ParamStore::new();
        params.insert(
            "a.weight",
            Tensor::new(&[2, 2], vec![1.5, -0.0, f32::MIN_POSITIVE, 3e-41]).unwrap(),
        );
        params.insert_buffer("a.running_var", Tensor::full(&[2], 1.0f32));
        let ck = Checkpoint {
            model_id: 7,
            kind: CheckpointKind::PromptSet {
                lambda_id: 2,
                lambda: 0.013,
            },
            params,
        };
        let back = Checkpoint::parse(&ck.to_bytes()).unwrap();
        assert_eq!(back.params.checksum(), ck.params.checksum());
        assert_eq!(back.kind, ck.kind);
        assert!(back.params.is_buffer("a.running_var"));
        let bytes = ck.to_bytes();
        assert!(Checkpoint::parse(&bytes[..bytes.len() - 1]).is_err());
    }
}
