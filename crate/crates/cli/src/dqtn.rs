//! Raw tensor file format: magic "DQTN", version u16, dtype tag u8,
//! ndims u8, dims as u32 little-endian, then the row-major payload.
//! Zero-dependency ingestion path alongside PNG directories.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use graincode::{Error, Result};

const MAGIC: &[u8; 4] = b"DQTN";
const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DqtnDtype {
    U8,
    F32,
    F64,
}

impl DqtnDtype {
    fn tag(self) -> u8 {
        match self {
            DqtnDtype::U8 => 1,
            DqtnDtype::F32 => 2,
            DqtnDtype::F64 => 3,
        }
    }

    fn from_tag(tag: u8) -> Result<Self> {
        match tag {
            1 => Ok(DqtnDtype::U8),
            2 => Ok(DqtnDtype::F32),
            3 => Ok(DqtnDtype::F64),
            other => Err(Error::Data(format!("unknown dtype tag {other}"))),
        }
    }
}

/// Payload decoded to f64 regardless of on-disk dtype. u8 payloads are
/// pixel bytes and are mapped to [-1, 1]; float payloads are taken as-is.
#[derive(Debug, Clone)]
pub struct DqtnTensor {
    pub dims: Vec<usize>,
    pub data: Vec<f64>,
}

impl DqtnTensor {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }
}

pub fn read_dqtn(path: &Path) -> Result<DqtnTensor> {
    let mut file = fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let fail = |detail: &str| Error::Data(format!("{}: {detail}", path.display()));

    if bytes.len() < 8 || &bytes[0..4] != MAGIC {
        return Err(fail("missing DQTN magic"));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let dtype = DqtnDtype::from_tag(bytes[6])?;
    let ndims = bytes[7] as usize;
    let header = 8 + 4 * ndims;
    if bytes.len() < header {
        return Err(fail("truncated dimension list"));
    }
    let dims: Vec<usize> = (0..ndims)
        .map(|i| {
            let o = 8 + 4 * i;
            u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let numel: usize = dims.iter().product();
    let width = match dtype {
        DqtnDtype::U8 => 1,
        DqtnDtype::F32 => 4,
        DqtnDtype::F64 => 8,
    };
    if bytes.len() != header + numel * width {
        return Err(fail(&format!(
            "payload holds {} bytes, dims {dims:?} need {}",
            bytes.len() - header,
            numel * width
        )));
    }
    let payload = &bytes[header..];
    let data: Vec<f64> = match dtype {
        DqtnDtype::U8 => payload.iter().map(|&b| b as f64 / 127.5 - 1.0).collect(),
        DqtnDtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect(),
        DqtnDtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect(),
    };
    Ok(DqtnTensor {
        dims,
        data,
    })
}

/// Writes f64 data under the requested dtype. u8 quantizes from [-1, 1].
pub fn write_dqtn(path: &Path, dims: &[usize], dtype: DqtnDtype, data: &[f64]) -> Result<()> {
    let numel: usize = dims.iter().product();
    if numel != data.len() {
        return Err(Error::Shape {
            op: "write_dqtn",
            lhs: dims.to_vec(),
            rhs: vec![data.len()],
        });
    }
    if dims.iter().any(|&d| d > u32::MAX as usize) {
        return Err(Error::Data("dimension exceeds u32".into()));
    }
    let mut bytes = Vec::with_capacity(8 + 4 * dims.len() + numel * 8);
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.push(dtype.tag());
    bytes.push(dims.len() as u8);
    for &d in dims {
        bytes.extend_from_slice(&(d as u32).to_le_bytes());
    }
    match dtype {
        DqtnDtype::U8 => {
            for &v in data {
                let q = ((v + 1.0) * 127.5).round().clamp(0.0, 255.0);
                bytes.push(q as u8);
            }
        }
        DqtnDtype::F32 => {
            for &v in data {
                bytes.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        DqtnDtype::F64 => {
            for &v in data {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}
