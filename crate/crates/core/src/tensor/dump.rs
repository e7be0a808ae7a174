//! `FTNS` tensor dump format.
//!
//! Little-endian layout:
//!
//! ```text
//! magic   b"FTNS"
//! version u32      (currently 1)
//! dtype   u8       0 = f32, 1 = f64
//! rank    u8
//! dims    u64 × rank
//! payload row-major values of `dtype`
//! ```
//!
//! Several records may be concatenated in one file; [`read_tensor`] consumes
//! exactly one.

use std::io::{self, Read, Write};

use thiserror::Error;

use super::{Matrix, Real};

pub const MAGIC: [u8; 4] = *b"FTNS";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn native() -> Self {
        if std::mem::size_of::<Real>() == 4 {
            DType::F32
        } else {
            DType::F64
        }
    }

    fn width(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("bad magic {0:?}, expected \"FTNS\"")]
    BadMagic([u8; 4]),
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("unknown dtype code {0}")]
    BadDtype(u8),
    #[error("truncated while reading `{0}`")]
    Truncated(&'static str),
    #[error("expected a rank-1 or rank-2 tensor, got rank {0}")]
    NotAMatrix(usize),
    #[error("dims {0:?} overflow the address space")]
    TooLarge(Vec<u64>),
    #[error("payload contains a non-finite value")]
    NonFinite,
    #[error(transparent)]
    Io(io::Error),
}

/// A tensor of any rank as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct RawTensor {
    pub dtype: DType,
    pub dims: Vec<u64>,
    pub data: Vec<f64>,
}

impl RawTensor {
    pub fn into_matrix(self) -> Result<Matrix, DumpError> {
        let (rows, cols) = match self.dims.as_slice() {
            [n] => (1, *n as usize),
            [r, c] => (*r as usize, *c as usize),
            other => return Err(DumpError::NotAMatrix(other.len())),
        };
        let data = self.data.into_iter().map(|x| x as Real).collect();
        Ok(Matrix::new(rows, cols, data).expect("dims checked on read"))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], field: &'static str) -> Result<(), DumpError> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => DumpError::Truncated(field),
        _ => DumpError::Io(e),
    })
}

pub fn write_raw<W: Write>(w: &mut W, dtype: DType, dims: &[u64], data: &[f64]) -> io::Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[dtype as u8, dims.len() as u8])?;
    for d in dims {
        w.write_all(&d.to_le_bytes())?;
    }
    match dtype {
        DType::F32 => {
            for &x in data {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        DType::F64 => {
            for &x in data {
                w.write_all(&x.to_le_bytes())?;
            }
        }
    }
    Ok(())
}

/// Writes `m` as a rank-2 record in the build's native precision.
pub fn write_tensor<W: Write>(w: &mut W, m: &Matrix) -> io::Result<()> {
    let data: Vec<f64> = m.data().iter().map(|&x| x as f64).collect();
    write_raw(w, DType::native(), &[m.rows() as u64, m.cols() as u64], &data)
}

pub fn read_raw<R: Read>(r: &mut R) -> Result<RawTensor, DumpError> {
    let mut magic = [0u8; 4];
    read_exact(r, &mut magic, "magic")?;
    if magic != MAGIC {
        return Err(DumpError::BadMagic(magic));
    }
    let mut b4 = [0u8; 4];
    read_exact(r, &mut b4, "version")?;
    let version = u32::from_le_bytes(b4);
    if version != VERSION {
        return Err(DumpError::BadVersion(version));
    }
    let mut b1 = [0u8; 1];
    read_exact(r, &mut b1, "dtype")?;
    let dtype = match b1[0] {
        0 => DType::F32,
        1 => DType::F64,
        other => return Err(DumpError::BadDtype(other)),
    };
    read_exact(r, &mut b1, "rank")?;
    let rank = b1[0] as usize;
    let mut dims = Vec::with_capacity(rank);
    let mut b8 = [0u8; 8];
    for _ in 0..rank {
        read_exact(r, &mut b8, "dims")?;
        dims.push(u64::from_le_bytes(b8));
    }
    let count = dims
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d))
        .filter(|&n| n.checked_mul(dtype.width() as u64).is_some_and(|b| b < (1 << 40)))
        .ok_or_else(|| DumpError::TooLarge(dims.clone()))? as usize;
    let mut payload = vec![0u8; count * dtype.width()];
    read_exact(r, &mut payload, "payload")?;
    let data: Vec<f64> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    if data.iter().any(|x| !x.is_finite()) {
        return Err(DumpError::NonFinite);
    }
    Ok(RawTensor { dtype, dims, data })
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Matrix, DumpError> {
    read_raw(r)?.into_matrix()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout_is_bit_exact() {
        let m = Matrix::from_rows(&[[1.0, 2.0, 3.0]]).unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &m).unwrap();
        assert_eq!(&buf[0..4], b"FTNS");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(buf[8], DType::native() as u8);
        assert_eq!(buf[9], 2);
        assert_eq!(&buf[10..18], &1u64.to_le_bytes());
        assert_eq!(&buf[18..26], &3u64.to_le_bytes());
        assert_eq!(buf.len(), 26 + 3 * std::mem::size_of::<Real>());
    }

    #[test]
    fn reads_f32_payloads_and_rank_one() {
        let mut buf = Vec::new();
        write_raw(&mut buf, DType::F32, &[3], &[0.5, -1.0, 2.0]).unwrap();
        let m = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(m.shape(), (1, 3));
        assert_eq!(m.data(), &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn rejects_corruption() {
        let m = Matrix::identity(2);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &m).unwrap();

        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(read_tensor(&mut bad.as_slice()), Err(DumpError::BadMagic(_))));

        let mut bad = buf.clone();
        bad[8] = 9;
        assert!(matches!(read_tensor(&mut bad.as_slice()), Err(DumpError::BadDtype(9))));

        let short = &buf[..buf.len() - 1];
        assert!(matches!(
            read_tensor(&mut &short[..]),
            Err(DumpError::Truncated("payload"))
        ));

        let mut rank3 = Vec::new();
        write_raw(&mut rank3, DType::F64, &[1, 1, 1], &[0.0]).unwrap();
        assert!(matches!(read_tensor(&mut rank3.as_slice()), Err(DumpError::NotAMatrix(3))));
    }

    proptest! {
        #[test]
        fn roundtrip(rows in 0usize..6, cols in 0usize..6, seed in any::<u64>()) {
            let mut rng = crate::tensor::rng::SeedStream::new(seed).stream(0);
            let m = crate::tensor::rng::normal_matrix(&mut rng, rows, cols, 3.0);
            let mut buf = Vec::new();
            write_tensor(&mut buf, &m).unwrap();
            write_tensor(&mut buf, &m.transpose()).unwrap();
            let mut cursor = buf.as_slice();
            prop_assert_eq!(read_tensor(&mut cursor).unwrap(), m.clone());
            prop_assert_eq!(read_tensor(&mut cursor).unwrap(), m.transpose());
            prop_assert!(cursor.is_empty());
        }
    }
}
