//! Named-tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"KTIR1"
//! repeated until EOF:
//!   u32 name_len, name bytes (UTF-8)
//!   u32 rank, rank × u64 dims
//!   product(dims) × f64 payload
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Tensor, TensorError};

pub const MAGIC: &[u8; 5] = b"KTIR1";

pub fn write_tensors<'a, W: Write>(
    mut w: W,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    for (name, t) in tensors {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()
}

pub fn read_tensors<R: Read>(mut r: R) -> Result<Vec<(String, Tensor)>, TensorError> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(TensorError::BadCheckpoint("missing KTIR1 header".into()));
    }
    let mut out = Vec::new();
    loop {
        let mut len = [0u8; 4];
        // Clean EOF is only allowed on a record boundary.
        if r.read(&mut len[..1])? == 0 {
            break;
        }
        r.read_exact(&mut len[1..])?;
        let mut name = vec![0u8; u32::from_le_bytes(len) as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| TensorError::BadCheckpoint("tensor name is not UTF-8".into()))?;
        let mut rank = [0u8; 4];
        r.read_exact(&mut rank)?;
        let mut shape = Vec::new();
        for _ in 0..u32::from_le_bytes(rank) {
            let mut d = [0u8; 8];
            r.read_exact(&mut d)?;
            shape.push(u64::from_le_bytes(d) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut buf = [0u8; 8];
        for _ in 0..n {
            r.read_exact(&mut buf)?;
            data.push(f64::from_le_bytes(buf));
        }
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

pub fn save<'a>(
    path: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<(), TensorError> {
    write_tensors(BufWriter::new(File::create(path)?), tensors)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>, TensorError> {
    read_tensors(BufReader::new(File::open(path)?))
}
