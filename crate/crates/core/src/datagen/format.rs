//! Little-endian binary dataset container.
//!
//! ```text
//! magic "UPLL" | version u32 = 1 | n u64 | d u32 | C u32
//! n·d f32 features (row-major) | n u64 candidate bitmasks
//! n u16 true labels | n u16 corrupted labels | n u8 split tags
//! ```

use std::io::{Read, Write};

use super::{DatagenError, Dataset, Split};
use crate::refinement::{CandidateSet, MAX_CLASSES};

pub const MAGIC: &[u8; 4] = b"UPLL";
pub const VERSION: u32 = 1;

pub fn write_dataset<W: Write>(ds: &Dataset, mut w: W) -> Result<(), DatagenError> {
    if ds.num_classes > MAX_CLASSES {
        return Err(DatagenError::Param("at most 64 classes can be stored".into()));
    }
    let n = ds.len();
    let mut buf = Vec::with_capacity(24 + n * (ds.dim * 4 + 13));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(n as u64).to_le_bytes());
    buf.extend_from_slice(&(ds.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(ds.num_classes as u32).to_le_bytes());
    for &v in &ds.features {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    for s in &ds.candidate_sets {
        buf.extend_from_slice(&s.bits().to_le_bytes());
    }
    for &y in &ds.true_labels {
        buf.extend_from_slice(&(y as u16).to_le_bytes());
    }
    for &y in &ds.corrupted_labels {
        buf.extend_from_slice(&(y as u16).to_le_bytes());
    }
    buf.extend(ds.split_tags.iter().map(|s| s.tag()));
    w.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8], DatagenError> {
        if self.bytes.len() - self.pos < k {
            return Err(DatagenError::Format("truncated dataset file".into()));
        }
        let out = &self.bytes[self.pos..self.pos + k];
        self.pos += k;
        Ok(out)
    }

    fn u16(&mut self) -> Result<u16, DatagenError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, DatagenError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, DatagenError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f32(&mut self) -> Result<f32, DatagenError> {
        Ok(f32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Dataset, DatagenError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_dataset(&bytes)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset, DatagenError> {
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4)? != MAGIC {
        return Err(DatagenError::Format("bad magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(DatagenError::Format(format!("unsupported version {version}")));
    }
    let n = cur.u64()? as usize;
    let dim = cur.u32()? as usize;
    let num_classes = cur.u32()? as usize;
    if num_classes > MAX_CLASSES {
        return Err(DatagenError::Format(format!("{num_classes} classes exceeds 64")));
    }
    let expected =
        n.checked_mul(dim * 4 + 8 + 2 + 2 + 1).ok_or_else(|| DatagenError::Format("size overflow".into()))?;
    if bytes.len() - cur.pos != expected {
        return Err(DatagenError::Format(format!("payload is {} bytes, expected {expected}", bytes.len() - cur.pos)));
    }
    let features = (0..n * dim).map(|_| cur.f32().map(f64::from)).collect::<Result<Vec<_>, _>>()?;
    let candidate_sets = (0..n).map(|_| cur.u64().map(CandidateSet::from_bits)).collect::<Result<Vec<_>, _>>()?;
    let true_labels = (0..n).map(|_| cur.u16().map(usize::from)).collect::<Result<Vec<_>, _>>()?;
    let corrupted_labels = (0..n).map(|_| cur.u16().map(usize::from)).collect::<Result<Vec<_>, _>>()?;
    let split_tags = cur
        .take(n)?
        .iter()
        .map(|&t| Split::from_tag(t).ok_or_else(|| DatagenError::Format(format!("split tag {t}"))))
        .collect::<Result<Vec<_>, _>>()?;
    let ds = Dataset { dim, num_classes, features, candidate_sets, true_labels, corrupted_labels, split_tags };
    ds.check_invariants()?;
    Ok(ds)
}
