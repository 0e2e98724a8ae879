//! Binary checkpoint archive.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "SPGN"  u16 version
//! u32 text_len, text (UTF-8, canonical `key = value` lines in sections)
//! u32 record_count
//! per record: u16 name_len, name, u8 dtype, u8 rank, u64 dims[rank], raw data
//! ```
//!
//! Encoding is a pure function of the archive contents, so decoding and
//! re-encoding reproduces the input bytes.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"SPGN";
pub const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Little-endian element bytes.
    pub data: Vec<u8>,
}

impl Record {
    pub fn from_tensor<T: Real>(name: impl Into<String>, t: &Tensor<T>) -> Self {
        let mut data = Vec::with_capacity(t.len() * width(T::DTYPE));
        for &v in t.data() {
            v.write_le(&mut data);
        }
        Record {
            name: name.into(),
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            data,
        }
    }

    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        if self.dtype != T::DTYPE {
            return Err(Error::Format(format!(
                "record `{}` holds {}, expected {}",
                self.name,
                self.dtype.name(),
                T::DTYPE.name()
            )));
        }
        let w = width(self.dtype);
        Tensor::new(self.shape.clone(), self.data.chunks_exact(w).map(T::read_le).collect())
    }
}

fn width(d: DType) -> usize {
    match d {
        DType::F32 => 4,
        DType::F64 => 8,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Archive {
    pub text: String,
    pub records: Vec<Record>,
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
            .ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
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

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl Archive {
    pub fn record(&self, name: &str) -> Result<&Record> {
        self.records
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no record `{name}`")))
    }

    /// `key = value` lines of `[section]` in the text block.
    pub fn section(&self, name: &str) -> Vec<(String, String)> {
        let header = format!("[{name}]");
        let mut inside = false;
        let mut out = Vec::new();
        for line in self.text.lines() {
            if line.starts_with('[') {
                inside = line == header;
            } else if inside {
                if let Some((k, v)) = line.split_once(" = ") {
                    out.push((k.to_string(), v.to_string()));
                }
            }
        }
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let text_len = u32::try_from(self.text.len()).map_err(|_| Error::Format("text block too large".into()))?;
        out.extend_from_slice(&text_len.to_le_bytes());
        out.extend_from_slice(self.text.as_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            let name_len = u16::try_from(r.name.len()).map_err(|_| Error::Format(format!("record name too long: {}", r.name)))?;
            let expect: usize = r.shape.iter().product::<usize>() * width(r.dtype);
            if expect != r.data.len() || r.shape.len() > u8::MAX as usize {
                return Err(Error::Format(format!("record `{}` is inconsistent with its shape", r.name)));
            }
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(r.dtype.tag());
            out.push(r.shape.len() as u8);
            for &d in &r.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&r.data);
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        if rd.take(4)? != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = rd.u16()?;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let n = rd.u32()? as usize;
        let text = String::from_utf8(rd.take(n)?.to_vec()).map_err(|_| Error::Format("text block is not UTF-8".into()))?;
        let count = rd.u32()?;
        let mut records = Vec::new();
        for _ in 0..count {
            let nl = rd.u16()? as usize;
            let name = String::from_utf8(rd.take(nl)?.to_vec()).map_err(|_| Error::Format("record name is not UTF-8".into()))?;
            let dtype = match rd.u8()? {
                0 => DType::F32,
                1 => DType::F64,
                t => return Err(Error::Format(format!("record `{name}` has unknown dtype tag {t}"))),
            };
            let rank = rd.u8()? as usize;
            let shape = (0..rank).map(|_| rd.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(width(dtype), |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::Format(format!("record `{name}` is too large")))?;
            let data = rd.take(len)?.to_vec();
            records.push(Record { name, dtype, shape, data });
        }
        if rd.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after the last record".into()));
        }
        Ok(Archive { text, records })
    }

    /// Writes to a temporary sibling and renames it over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let tmp = dir.join(format!(
            ".{}.tmp",
            path.file_name().and_then(|s| s.to_str()).unwrap_or("checkpoint")
        ));
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
        drop(f);
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Archive::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Archive {
        Archive {
            text: "[config]\na = 1\n[state]\niteration = 3\n".into(),
            records: vec![
                Record::from_tensor("w", &Tensor::<f32>::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.25, f32::MIN_POSITIVE, -0.0]).unwrap()),
                Record::from_tensor("s", &Tensor::<f64>::scalar(std::f64::consts::PI)),
            ],
        }
    }

    #[test]
    fn bytes_round_trip_exactly() {
        let a = sample();
        let bytes = a.to_bytes().unwrap();
        assert_eq!(&bytes[..4], b"SPGN");
        let b = Archive::from_bytes(&bytes).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.to_bytes().unwrap(), bytes);
        let w: Tensor<f32> = b.record("w").unwrap().to_tensor().unwrap();
        assert_eq!(w.data()[5].to_bits(), (-0.0f32).to_bits());
        assert!(b.record("w").unwrap().to_tensor::<f64>().is_err());
    }

    #[test]
    fn sections_are_separated() {
        let a = sample();
        assert_eq!(a.section("config"), vec![("a".to_string(), "1".to_string())]);
        assert_eq!(a.section("state"), vec![("iteration".to_string(), "3".to_string())]);
        assert!(a.section("arch").is_empty());
    }

    #[test]
    fn corrupt_input_is_a_format_error() {
        let bytes = sample().to_bytes().unwrap();
        assert!(matches!(Archive::from_bytes(&bytes[..bytes.len() - 1]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(Archive::from_bytes(&bad), Err(Error::Format(_))));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(Archive::from_bytes(&long), Err(Error::Format(_))));
    }

    #[test]
    fn file_save_load_save_is_identical() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.spgn");
        sample().save(&p).unwrap();
        let first = fs::read(&p).unwrap();
        Archive::load(&p).unwrap().save(&p).unwrap();
        assert_eq!(fs::read(&p).unwrap(), first);
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
    }

    proptest! {
        #[test]
        fn arbitrary_f64_tensors_round_trip(vals in proptest::collection::vec(any::<f64>(), 0..40)) {
            let t = Tensor::new(vec![vals.len()], vals).unwrap();
            let a = Archive { text: String::new(), records: vec![Record::from_tensor("t", &t)] };
            let bytes = a.to_bytes().unwrap();
            prop_assert_eq!(Archive::from_bytes(&bytes).unwrap().to_bytes().unwrap(), bytes);
        }
    }
}
