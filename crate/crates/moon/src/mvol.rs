//! MVOL volume/mask files: magic "MVOL", version u16, dims 3×u32,
//! spacing 3×f64 (mm), dtype code (f64=1, u8=2), then raw little-endian
//! row-major voxels.

use std::io::{Read, Write};
use std::path::Path;

use crate::tensor::{Result, TensorError};

pub const MVOL_MAGIC: &[u8; 4] = b"MVOL";
pub const MVOL_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum MvolData {
    F64(Vec<f64>),
    U8(Vec<u8>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mvol {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub data: MvolData,
}

impl Mvol {
    pub fn voxel_count(&self) -> usize {
        self.dims.iter().product()
    }
}

fn io_err(e: std::io::Error) -> TensorError {
    TensorError::Invalid {
        op: "mvol_io",
        msg: e.to_string(),
    }
}

pub fn write_mvol(path: &Path, v: &Mvol) -> Result<()> {
    let n = v.voxel_count();
    let len = match &v.data {
        MvolData::F64(d) => d.len(),
        MvolData::U8(d) => d.len(),
    };
    if len != n {
        return Err(TensorError::Invalid {
            op: "write_mvol",
            msg: format!("{len} voxels for dims {:?}", v.dims),
        });
    }
    let mut buf = Vec::with_capacity(4 + 2 + 12 + 24 + 1 + len * 8);
    buf.extend_from_slice(MVOL_MAGIC);
    buf.extend_from_slice(&MVOL_VERSION.to_le_bytes());
    for &d in &v.dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &s in &v.spacing {
        buf.extend_from_slice(&s.to_le_bytes());
    }
    match &v.data {
        MvolData::F64(d) => {
            buf.push(1);
            for x in d {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        MvolData::U8(d) => {
            buf.push(2);
            buf.extend_from_slice(d);
        }
    }
    let mut f = std::fs::File::create(path).map_err(io_err)?;
    f.write_all(&buf).map_err(io_err)
}

pub fn read_mvol(path: &Path) -> Result<Mvol> {
    let mut buf = Vec::new();
    std::fs::File::open(path)
        .map_err(io_err)?
        .read_to_end(&mut buf)
        .map_err(io_err)?;
    let bad = |msg: String| TensorError::Invalid { op: "read_mvol", msg };
    if buf.len() < 43 {
        return Err(bad(format!("file too short: {} bytes", buf.len())));
    }
    if &buf[0..4] != MVOL_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = u16::from_le_bytes([buf[4], buf[5]]);
    if version != MVOL_VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 3];
    for (i, d) in dims.iter_mut().enumerate() {
        let o = 6 + i * 4;
        *d = u32::from_le_bytes(buf[o..o + 4].try_into().unwrap()) as usize;
    }
    let mut spacing = [0f64; 3];
    for (i, s) in spacing.iter_mut().enumerate() {
        let o = 18 + i * 8;
        *s = f64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
    }
    let dtype = buf[42];
    let n: usize = dims.iter().product();
    let payload = &buf[43..];
    let data = match dtype {
        1 => {
            if payload.len() != n * 8 {
                return Err(bad(format!("expected {} payload bytes, got {}", n * 8, payload.len())));
            }
            MvolData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            )
        }
        2 => {
            if payload.len() != n {
                return Err(bad(format!("expected {n} payload bytes, got {}", payload.len())));
            }
            MvolData::U8(payload.to_vec())
        }
        other => return Err(bad(format!("unknown dtype code {other}"))),
    };
    Ok(Mvol { dims, spacing, data })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trips_both_dtypes() {
        let dir = tempfile::tempdir().unwrap();
        let f = Mvol {
            dims: [2, 3, 4],
            spacing: [2.0, 2.0, 2.5],
            data: MvolData::F64((0..24).map(|i| i as f64 * 0.5 - 3.0).collect()),
        };
        let p = dir.path().join("vol.mvol");
        write_mvol(&p, &f).unwrap();
        assert_eq!(read_mvol(&p).unwrap(), f);

        let m = Mvol {
            dims: [3, 3, 3],
            spacing: [1.0, 1.0, 1.0],
            data: MvolData::U8((0..27).map(|i| (i % 2) as u8).collect()),
        };
        let p = dir.path().join("mask.mvol");
        write_mvol(&p, &m).unwrap();
        assert_eq!(read_mvol(&p).unwrap(), m);
    }

    #[test]
    fn rejects_corrupt_headers() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.mvol");
        std::fs::write(&p, b"NOPE").unwrap();
        assert!(read_mvol(&p).is_err());

        let v = Mvol {
            dims: [2, 2, 2],
            spacing: [1.0, 1.0, 1.0],
            data: MvolData::U8(vec![0; 8]),
        };
        let p2 = dir.path().join("trunc.mvol");
        write_mvol(&p2, &v).unwrap();
        let mut bytes = std::fs::read(&p2).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&p2, bytes).unwrap();
        assert!(read_mvol(&p2).is_err());
    }

    #[test]
    fn rejects_mismatched_payload() {
        let dir = tempfile::tempdir().unwrap();
        let v = Mvol {
            dims: [2, 2, 2],
            spacing: [1.0, 1.0, 1.0],
            data: MvolData::U8(vec![0; 7]),
        };
        assert!(write_mvol(&dir.path().join("x.mvol"), &v).is_err());
    }
}
