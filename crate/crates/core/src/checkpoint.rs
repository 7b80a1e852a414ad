//! Flat named-tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"NTSR" | u32 version=1 | u64 count
//! repeated count times:
//!   u32 name_len | name (utf-8) | u32 ndim | u64 dim[ndim] | f64 value[prod(dim)]
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::grad::Tensor;

const MAGIC: &[u8; 4] = b"NTSR";
const VERSION: u32 = 1;

pub fn write_tensors<W: Write>(mut out: W, tensors: &[(String, &Tensor)]) -> Result<()> {
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    out.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, t) in tensors {
        out.write_all(&(name.len() as u32).to_le_bytes())?;
        out.write_all(name.as_bytes())?;
        out.write_all(&(t.shape().len() as u32).to_le_bytes())?;
        for &d in t.shape() {
            out.write_all(&(d as u64).to_le_bytes())?;
        }
        for x in t.data() {
            out.write_all(&x.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensors<R: Read>(mut input: R) -> Result<Vec<(String, Tensor)>> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let count = read_u64(&mut input)? as usize;
    let mut out = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = read_u32(&mut input)? as usize;
        let mut name = vec![0u8; len];
        input.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| Error::Checkpoint("non-utf8 tensor name".into()))?;
        let ndim = read_u32(&mut input)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u64(&mut input)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = vec![0.0; numel];
        for x in data.iter_mut() {
            let mut b = [0u8; 8];
            input.read_exact(&mut b)?;
            *x = f64::from_le_bytes(b);
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_bytes_are_pinned() {
        let t = Tensor::new(vec![2], vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("a".to_string(), &t)]).unwrap();
        assert_eq!(&buf[..4], b"NTSR");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..16], &1u64.to_le_bytes());
        assert_eq!(&buf[16..20], &1u32.to_le_bytes());
        assert_eq!(buf[20], b'a');
        assert_eq!(&buf[21..25], &1u32.to_le_bytes());
        assert_eq!(&buf[25..33], &2u64.to_le_bytes());
        assert_eq!(&buf[33..41], &1.0f64.to_le_bytes());
        assert_eq!(buf.len(), 49);
        let back = read_tensors(buf.as_slice()).unwrap();
        assert_eq!(back, vec![("a".to_string(), t)]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(read_tensors(&b"XXXX\x01\0\0\0"[..]).is_err());
    }
}
