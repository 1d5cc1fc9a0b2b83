//! Binary container shared by every model checkpoint.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        8 bytes   "GWEAVER\0"
//! version      u32       1
//! kind         u32 len + UTF-8 bytes   ("ngram", "qnet", "tuned")
//! sections     u32 count, then per section:
//!   name       u32 len + UTF-8 bytes
//!   dtype      u8        0 = f32, 1 = f64, 2 = u32, 3 = u64, 4 = UTF-8 text
//!   ndims      u8, then ndims × u64 dims
//!   payload    u64 byte length, then row-major elements
//! ```

use std::path::Path;

use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"GWEAVER\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("not a goalweaver checkpoint (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("truncated checkpoint")]
    Truncated,
    #[error("checkpoint kind '{found}', expected '{expected}'")]
    WrongKind { expected: String, found: String },
    #[error("missing section '{0}'")]
    MissingSection(String),
    #[error("section '{name}': {reason}")]
    BadSection { name: String, reason: String },
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    U32(Vec<u32>),
    U64(Vec<u64>),
    Text(String),
}

impl TensorData {
    fn dtype(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
            TensorData::U32(_) => 2,
            TensorData::U64(_) => 3,
            TensorData::Text(_) => 4,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::U32(v) => v.len(),
            TensorData::U64(v) => v.len(),
            TensorData::Text(s) => s.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub shape: Vec<u64>,
    pub data: TensorData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Container {
    pub kind: String,
    pub sections: Vec<Section>,
}

impl Container {
    pub fn new(kind: impl Into<String>) -> Self {
        Container { kind: kind.into(), sections: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<u64>, data: TensorData) {
        self.sections.push(Section { name: name.into(), shape, data });
    }

    pub fn text(&mut self, name: impl Into<String>, text: impl Into<String>) {
        let t: String = text.into();
        let len = t.len() as u64;
        self.push(name, vec![len], TensorData::Text(t));
    }

    pub fn get(&self, name: &str) -> Result<&Section, CheckpointError> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| CheckpointError::MissingSection(name.to_string()))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), CheckpointError> {
        if self.kind == kind {
            Ok(())
        } else {
            Err(CheckpointError::WrongKind { expected: kind.into(), found: self.kind.clone() })
        }
    }

    pub fn get_text(&self, name: &str) -> Result<&str, CheckpointError> {
        match &self.get(name)?.data {
            TensorData::Text(s) => Ok(s),
            _ => Err(bad(name, "expected text")),
        }
    }

    pub fn get_f64(&self, name: &str) -> Result<(&[u64], &[f64]), CheckpointError> {
        let s = self.get(name)?;
        match &s.data {
            TensorData::F64(v) => Ok((&s.shape, v)),
            _ => Err(bad(name, "expected f64 tensor")),
        }
    }

    pub fn get_f32(&self, name: &str) -> Result<(&[u64], &[f32]), CheckpointError> {
        let s = self.get(name)?;
        match &s.data {
            TensorData::F32(v) => Ok((&s.shape, v)),
            _ => Err(bad(name, "expected f32 tensor")),
        }
    }

    pub fn get_u32(&self, name: &str) -> Result<(&[u64], &[u32]), CheckpointError> {
        let s = self.get(name)?;
        match &s.data {
            TensorData::U32(v) => Ok((&s.shape, v)),
            _ => Err(bad(name, "expected u32 tensor")),
        }
    }

    pub fn get_u64(&self, name: &str) -> Result<(&[u64], &[u64]), CheckpointError> {
        let s = self.get(name)?;
        match &s.data {
            TensorData::U64(v) => Ok((&s.shape, v)),
            _ => Err(bad(name, "expected u64 tensor")),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.kind);
        out.extend_from_slice(&(self.sections.len() as u32).to_le_bytes());
        for s in &self.sections {
            put_str(&mut out, &s.name);
            out.push(s.data.dtype());
            out.push(s.shape.len() as u8);
            for d in &s.shape {
                out.extend_from_slice(&d.to_le_bytes());
            }
            let mut payload = Vec::new();
            match &s.data {
                TensorData::F32(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
                TensorData::U32(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
                TensorData::U64(v) => v.iter().for_each(|x| payload.extend_from_slice(&x.to_le_bytes())),
                TensorData::Text(t) => payload.extend_from_slice(t.as_bytes()),
            }
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let kind = r.string()?;
        let n = r.u32()? as usize;
        let mut sections = Vec::with_capacity(n);
        for _ in 0..n {
            let name = r.string()?;
            let dtype = r.take(1)?[0];
            let ndims = r.take(1)?[0] as usize;
            let shape = (0..ndims).map(|_| r.u64()).collect::<Result<Vec<_>, _>>()?;
            let len = r.u64()? as usize;
            let payload = r.take(len)?;
            let data = match dtype {
                0 => TensorData::F32(chunks::<4, _>(payload, &name, |c| f32::from_le_bytes(c.try_into().unwrap()))?),
                1 => TensorData::F64(chunks::<8, _>(payload, &name, |c| f64::from_le_bytes(c.try_into().unwrap()))?),
                2 => TensorData::U32(chunks::<4, _>(payload, &name, |c| u32::from_le_bytes(c.try_into().unwrap()))?),
                3 => TensorData::U64(chunks::<8, _>(payload, &name, |c| u64::from_le_bytes(c.try_into().unwrap()))?),
                4 => TensorData::Text(
                    String::from_utf8(payload.to_vec()).map_err(|_| bad(&name, "invalid UTF-8"))?,
                ),
                other => return Err(bad(&name, &format!("unknown dtype {other}"))),
            };
            let expected: u64 = if matches!(data, TensorData::Text(_)) { data.len() as u64 } else { shape.iter().product() };
            if expected != data.len() as u64 {
                return Err(bad(&name, "shape does not match payload"));
            }
            sections.push(Section { name, shape, data });
        }
        Ok(Container { kind, sections })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io { path: path.display().to_string(), source })?;
        Container::decode(&bytes)
    }
}

fn bad(name: &str, reason: &str) -> CheckpointError {
    CheckpointError::BadSection { name: name.to_string(), reason: reason.to_string() }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

fn chunks<const N: usize, T>(payload: &[u8], name: &str, f: impl Fn(&[u8]) -> T) -> Result<Vec<T>, CheckpointError> {
    if payload.len() % N != 0 {
        return Err(bad(name, "payload length not a multiple of element size"));
    }
    Ok(payload.chunks_exact(N).map(f).collect())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let slice = self.bytes.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn string(&mut self) -> Result<String, CheckpointError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CheckpointError::Truncated)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new("test");
        c.text("config", "order=3");
        c.push("emb", vec![2, 2], TensorData::F32(vec![1.0, -2.5, 3.25, 0.0]));
        c.push("w", vec![3], TensorData::F64(vec![0.1, f64::NEG_INFINITY, 7.0]));
        c.push("ids", vec![2], TensorData::U32(vec![4, 9]));
        c.push("counts", vec![1], TensorData::U64(vec![u64::MAX]));
        c
    }

    #[test]
    fn encode_decode() {
        let c = sample();
        let bytes = c.encode();
        assert_eq!(&bytes[..8], MAGIC);
        assert_eq!(Container::decode(&bytes).unwrap(), c);
    }

    #[test]
    fn f32_payload_is_little_endian() {
        let mut c = Container::new("k");
        c.push("x", vec![1], TensorData::F32(vec![1.0]));
        let bytes = c.encode();
        assert_eq!(&bytes[bytes.len() - 4..], &1.0f32.to_le_bytes());
    }

    #[test]
    fn corrupt_input() {
        let bytes = sample().encode();
        assert!(matches!(Container::decode(&bytes[..bytes.len() - 1]), Err(CheckpointError::Truncated)));
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(matches!(Container::decode(&bad_magic), Err(CheckpointError::BadMagic)));
        let mut bad_version = bytes;
        bad_version[8] = 9;
        assert!(matches!(Container::decode(&bad_version), Err(CheckpointError::Version(9))));
    }
}
