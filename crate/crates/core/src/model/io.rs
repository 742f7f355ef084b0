//! Flat parameter files: a little-endian `u64` tensor count, then per
//! tensor a `u64` name length, the UTF-8 name, `u64` rows, `u64` cols and
//! `rows·cols` little-endian `f64` values in row-major order.

use std::io::{Read, Write};

use crate::error::{shape_err, Error, Result};
use crate::matcore::{Matrix, Real};

const MAX_NAME: u64 = 4096;

pub fn write_tensors<S: AsRef<str>>(w: &mut impl Write, tensors: &[(S, &Matrix)]) -> Result<()> {
    w.write_all(&(tensors.len() as u64).to_le_bytes())?;
    for (name, m) in tensors {
        let name = name.as_ref().as_bytes();
        w.write_all(&(name.len() as u64).to_le_bytes())?;
        w.write_all(name)?;
        w.write_all(&(m.rows() as u64).to_le_bytes())?;
        w.write_all(&(m.cols() as u64).to_le_bytes())?;
        for &v in m.as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensors(r: &mut impl Read) -> Result<Vec<(String, Matrix)>> {
    let count = read_u64(r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let len = read_u64(r)?;
        if len > MAX_NAME {
            return Err(shape_err!("tensor name length {len} is implausible"));
        }
        let mut name = vec![0u8; len as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|e| Error::Io(e.to_string()))?;
        let rows = read_u64(r)? as usize;
        let cols = read_u64(r)? as usize;
        let count = rows
            .checked_mul(cols)
            .ok_or_else(|| shape_err!("tensor '{name}' is too large"))?;
        let mut bytes = vec![
            0u8;
            count
                .checked_mul(8)
                .ok_or_else(|| shape_err!("tensor '{name}' is too large"))?
        ];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")) as Real)
            .collect();
        out.push((name, Matrix::new(rows, cols, data)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_pinned() {
        let m = Matrix::from_rows(&[[1.0, -2.0]]).unwrap();
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("ab", &m)]).unwrap();
        let mut expect = Vec::new();
        expect.extend(1u64.to_le_bytes());
        expect.extend(2u64.to_le_bytes());
        expect.extend(b"ab");
        expect.extend(1u64.to_le_bytes());
        expect.extend(2u64.to_le_bytes());
        expect.extend(1.0f64.to_le_bytes());
        expect.extend((-2.0f64).to_le_bytes());
        assert_eq!(buf, expect);
        let back = read_tensors(&mut buf.as_slice()).unwrap();
        assert_eq!(back, vec![("ab".to_string(), m)]);
    }

    #[test]
    fn truncated_input_is_io_error() {
        let m = Matrix::zeros(2, 2);
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("w", &m)]).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(matches!(
            read_tensors(&mut buf.as_slice()),
            Err(Error::Io(_))
        ));
    }
}
