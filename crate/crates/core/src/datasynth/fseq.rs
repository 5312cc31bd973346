//! FSEQ binary feature files: magic `FSEQ1`, u32 LE frame count, u32 LE dim,
//! f32 LE frame rate, then row-major f32 LE values. Also the boundary format
//! for externally dumped encoder features.

use crate::error::{Error, Result};
use ndarray::Array2;
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 5] = b"FSEQ1";

pub fn write_fseq(path: impl AsRef<Path>, features: &Array2<f64>, frame_rate_hz: f64) -> Result<()> {
    let path = path.as_ref();
    let (n, d) = features.dim();
    if n == 0 {
        return Err(Error::Data("refusing to write a zero-frame file".into()));
    }
    if !features.iter().all(|v| v.is_finite()) || !frame_rate_hz.is_finite() {
        return Err(Error::NonFinite(path.display().to_string()));
    }
    let mut buf = Vec::with_capacity(5 + 12 + 4 * n * d);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(n as u32).to_le_bytes());
    buf.extend_from_slice(&(d as u32).to_le_bytes());
    buf.extend_from_slice(&(frame_rate_hz as f32).to_le_bytes());
    for v in features.iter() {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn read_fseq(path: impl AsRef<Path>) -> Result<(Array2<f64>, f64)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let need = |offset: usize, n: usize| -> Result<&[u8]> {
        bytes.get(offset..offset + n).ok_or(Error::Parse {
            offset: offset as u64,
            message: format!("truncated: wanted {n} bytes at {offset}, file has {}", bytes.len()),
        })
    };
    let magic = need(0, 5)?;
    if magic != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let u32_at = |o: usize| -> Result<u32> {
        let b = need(o, 4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    };
    let n = u32_at(5)? as usize;
    let d = u32_at(9)? as usize;
    let rate_bytes = need(13, 4)?;
    let rate = f32::from_le_bytes([rate_bytes[0], rate_bytes[1], rate_bytes[2], rate_bytes[3]]);
    if n == 0 || d == 0 {
        return Err(Error::Parse {
            offset: 5,
            message: format!("degenerate header: {n} frames x {d} dims"),
        });
    }
    let mut values = Vec::with_capacity(n * d);
    for i in 0..n * d {
        let b = need(17 + 4 * i, 4)?;
        values.push(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
    }
    let end = 17 + 4 * n * d;
    if bytes.len() != end {
        return Err(Error::Parse {
            offset: end as u64,
            message: format!("{} trailing bytes after frame data", bytes.len() - end),
        });
    }
    let arr = Array2::from_shape_vec((n, d), values).expect("sized above");
    Ok((arr, rate as f64))
}
