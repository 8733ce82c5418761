use crate::error::{Error, Result};

pub const CONTAINER_VERSION: u8 = 1;
/// `lambda_id` of a stream coded without prompts.
pub const NO_PROMPT: u8 = 0xFF;
/// Bytes before the hyperlatent payload, plus the y length field.
pub const HEADER_BYTES: usize = 4 + 1 + 4 + 1 + 4 + 4 + 4 + 4;
const MAGIC: &[u8; 4] = b"LPMC";

/// Compressed image: header fields plus the two range-coded payloads.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Container {
    pub model_id: u32,
    pub lambda_id: u8,
    pub width: u16,
    pub height: u16,
    pub padded_width: u16,
    pub padded_height: u16,
    pub z_payload: Vec<u8>,
    pub y_payload: Vec<u8>,
}

impl Container {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + self.payload_bytes());
        out.extend_from_slice(MAGIC);
        out.push(CONTAINER_VERSION);
        out.extend_from_slice(&self.model_id.to_le_bytes());
        out.push(self.lambda_id);
        for v in [
            self.width,
            self.height,
            self.padded_width,
            self.padded_height,
        ] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.extend_from_slice(&(self.z_payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.z_payload);
        out.extend_from_slice(&(self.y_payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.y_payload);
        out
    }

    /// Parses and checks the header against `expected_model`, before looking
    /// at either payload.
    pub fn parse(bytes: &[u8], expected_model: Option<u32>) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::CorruptStream("bad magic".into()));
        }
        let version = r.u8()?;
        if version != CONTAINER_VERSION {
            return Err(Error::CorruptStream(format!(
                "unsupported container version {version}"
            )));
        }
        let model_id = r.u32()?;
        if let Some(expected) = expected_model {
            if expected != model_id {
                return Err(Error::ModelMismatch {
                    expected,
                    found: model_id,
                });
            }
        }
        let lambda_id = r.u8()?;
        let (width, height, padded_width, padded_height) = (r.u16()?, r.u16()?, r.u16()?, r.u16()?);
        if width == 0 || height == 0 || padded_width < width || padded_height < height {
            return Err(Error::CorruptStream(format!(
                "bad extents {width}x{height} padded to {padded_width}x{padded_height}"
            )));
        }
        let zl = r.u32()? as usize;
        let z_payload = r.take(zl)?.to_vec();
        let yl = r.u32()? as usize;
        let y_payload = r.take(yl)?.to_vec();
        if r.pos != bytes.len() {
            return Err(Error::CorruptStream(format!(
                "{} trailing bytes",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            model_id,
            lambda_id,
            width,
            height,
            padded_width,
            padded_height,
            z_payload,
            y_payload,
        })
    }

    pub fn payload_bytes(&self) -> usize {
        self.z_payload.len() + self.y_payload.len()
    }

    /// Total file size in bits: header plus both payloads.
    pub fn total_bits(&self) -> usize {
        8 * (HEADER_BYTES + self.payload_bytes())
    }

    /// Bits per unpadded pixel of the whole file.
    pub fn bpp(&self) -> f64 {
        self.total_bits() as f64 / (self.width as f64 * self.height as f64)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::CorruptStream("truncated container".into()))?;
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
