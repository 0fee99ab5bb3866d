//! Little-endian float64 array sidecar files.
//!
//! Layout: 8-byte magic, u32 rank, u64 per-dimension extents, then the
//! payload row-major. Readers reject a wrong magic or a shape that does not
//! match what the caller expects.

use crate::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: [u8; 8] = *b"BHPMF64\0";

pub fn write_f64(path: &Path, dims: &[usize], data: &[f64]) -> Result<()> {
    let expect: usize = dims.iter().product();
    if expect != data.len() {
        return Err(Error::Shape(format!(
            "sidecar write: {} values for shape {:?}",
            data.len(),
            dims
        )));
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(&MAGIC)?;
    f.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        f.write_all(&(d as u64).to_le_bytes())?;
    }
    for &x in data {
        f.write_all(&x.to_le_bytes())?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_f64(path: &Path) -> Result<(Vec<usize>, Vec<f64>)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(Error::Format(format!(
            "{}: not a float64 sidecar (bad magic)",
            path.display()
        )));
    }
    let mut b4 = [0u8; 4];
    f.read_exact(&mut b4)?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank > 8 {
        return Err(Error::Format(format!("{}: implausible rank {rank}", path.display())));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        f.read_exact(&mut b8)?;
        dims.push(u64::from_le_bytes(b8) as usize);
    }
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        f.read_exact(&mut b8)?;
        data.push(f64::from_le_bytes(b8));
    }
    // trailing bytes mean the header lied about the shape
    if f.read(&mut b4)? != 0 {
        return Err(Error::Format(format!(
            "{}: trailing bytes after declared payload",
            path.display()
        )));
    }
    Ok((dims, data))
}

pub fn write_array1(path: &Path, a: &ArrayView1<f64>) -> Result<()> {
    write_f64(path, &[a.len()], a.as_slice().unwrap())
}

pub fn write_array2(path: &Path, a: &ArrayView2<f64>) -> Result<()> {
    let owned;
    let slice = match a.as_slice() {
        Some(s) => s,
        None => {
            owned = a.to_owned();
            owned.as_slice().unwrap()
        }
    };
    write_f64(path, &[a.nrows(), a.ncols()], slice)
}

pub fn read_array1(path: &Path) -> Result<Array1<f64>> {
    let (dims, data) = read_f64(path)?;
    if dims.len() != 1 {
        return Err(Error::Format(format!(
            "{}: expected rank 1, found {:?}",
            path.display(),
            dims
        )));
    }
    Ok(Array1::from_vec(data))
}

pub fn read_array2(path: &Path) -> Result<Array2<f64>> {
    let (dims, data) = read_f64(path)?;
    if dims.len() != 2 {
        return Err(Error::Format(format!(
            "{}: expected rank 2, found {:?}",
            path.display(),
            dims
        )));
    }
    Array2::from_shape_vec((dims[0], dims[1]), data)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}
