//! Binary checkpoints of named tensors: magic `SPDCKPT1`, a u32 tensor count,
//! then per tensor a u32 name length, the UTF-8 name, a u32 rank, u32 dims
//! and the entries as little-endian f64, row-major.

use std::fs;
use std::path::Path;

use crate::data::write_atomic;
use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::manifold::SpdMatrix;
use crate::search_space::Network;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"SPDCKPT1";

const RUNNING_MEAN: &str = ".running_mean";

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::contract(format!("{v} does not fit a checkpoint field")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn write_checkpoint(path: &Path, tensors: &[(String, Mat<f64>)]) -> Result<()> {
    let mut out = CHECKPOINT_MAGIC.to_vec();
    put_u32(&mut out, tensors.len())?;
    for (name, m) in tensors {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, 2)?;
        put_u32(&mut out, m.rows())?;
        put_u32(&mut out, m.cols())?;
        for x in m.as_slice() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    write_atomic(path, &out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::data(self.path, format!("truncated {what} at byte offset {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Mat<f64>)>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(8, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::data(path, "bad magic at byte offset 0 (expected \"SPDCKPT1\")"));
    }
    let count = r.u32("tensor count")?;
    let mut out = Vec::new();
    for _ in 0..count {
        let start = r.pos;
        let len = r.u32("name length")?;
        let name = String::from_utf8(r.take(len, "name")?.to_vec())
            .map_err(|_| Error::data(path, format!("name at byte offset {} is not UTF-8", start + 4)))?;
        let rank = r.u32("rank")?;
        let dims = (0..rank).map(|_| r.u32("dimension")).collect::<Result<Vec<_>>>()?;
        let (rows, cols) = match dims[..] {
            [n] => (n, 1),
            [a, b] => (a, b),
            _ => return Err(Error::data(path, format!("tensor {name:?} at byte offset {start} has rank {rank}"))),
        };
        let payload = r.take(rows * cols * 8, "tensor data")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        out.push((name, Mat::from_vec(rows, cols, data)));
    }
    if r.pos != bytes.len() {
        return Err(Error::data(path, format!("trailing bytes from byte offset {}", r.pos)));
    }
    Ok(out)
}

/// Parameters followed by batchnorm running means.
pub fn save_checkpoint(path: &Path, net: &Network) -> Result<()> {
    let mut t: Vec<(String, Mat<f64>)> = net.params().iter().map(|p| (p.name.clone(), p.value.clone())).collect();
    t.extend(
        net.bn_slots()
            .iter()
            .map(|s| (format!("{}{RUNNING_MEAN}", s.name), s.running_mean.as_mat().clone())),
    );
    write_checkpoint(path, &t)
}

/// Loads every parameter and running mean of `net`; names and shapes must
/// match exactly.
pub fn load_checkpoint(path: &Path, net: &mut Network) -> Result<()> {
    let tensors = read_checkpoint(path)?;
    let expected = net.params().len() + net.bn_slots().len();
    if tensors.len() != expected {
        return Err(Error::data(path, format!("{} tensors, the network has {expected}", tensors.len())));
    }
    for (name, m) in tensors {
        if let Some(i) = net.param_index(&name) {
            let p = &mut net.params_mut()[i];
            if p.value.shape() != m.shape() {
                return Err(Error::data(
                    path,
                    format!("{name} is {}x{}, expected {}x{}", m.rows(), m.cols(), p.value.rows(), p.value.cols()),
                ));
            }
            p.value = m;
        } else if let Some(slot) = name
            .strip_suffix(RUNNING_MEAN)
            .and_then(|b| net.bn_slots().iter().position(|s| s.name == b))
        {
            let s = &mut net.bn_slots_mut()[slot];
            if s.running_mean.dim() != m.rows() {
                return Err(Error::data(path, format!("{name} is {}x{}", m.rows(), m.cols())));
            }
            s.running_mean = SpdMatrix::new(m).map_err(|e| Error::data(path, format!("{name}: {e}")))?;
        } else {
            return Err(Error::data(path, format!("unknown tensor {name:?}")));
        }
    }
    Ok(())
}
