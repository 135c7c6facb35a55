//! Little-endian container of named, typed n-dimensional arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic        [u8; 8]
//! count        u32
//! count × record:
//!     name_len u16, name [u8; name_len] (UTF-8)
//!     dtype    u8   (1=f64 2=f32 3=i64 4=i32 5=u32 6=u8)
//!     ndim     u8
//!     dims     [u64; ndim]
//!     offset   u64  (absolute byte offset of the payload)
//!     nbytes   u64
//! payloads     raw little-endian element data, row-major
//! ```
//!
//! Body models and training checkpoints are both stored in this format and
//! differ only in their magic.

use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub enum ArrayData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    I64(Vec<i64>),
    I32(Vec<i32>),
    U32(Vec<u32>),
    U8(Vec<u8>),
}

impl ArrayData {
    fn dtype(&self) -> u8 {
        match self {
            ArrayData::F64(_) => 1,
            ArrayData::F32(_) => 2,
            ArrayData::I64(_) => 3,
            ArrayData::I32(_) => 4,
            ArrayData::U32(_) => 5,
            ArrayData::U8(_) => 6,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            ArrayData::F64(v) => v.len(),
            ArrayData::F32(v) => v.len(),
            ArrayData::I64(v) => v.len(),
            ArrayData::I32(v) => v.len(),
            ArrayData::U32(v) => v.len(),
            ArrayData::U8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn elem_size(dtype: u8) -> Option<usize> {
        match dtype {
            1 | 3 => Some(8),
            2 | 4 | 5 => Some(4),
            6 => Some(1),
            _ => None,
        }
    }

    fn to_bytes(&self) -> Vec<u8> {
        match self {
            ArrayData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::I64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::U32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            ArrayData::U8(v) => v.clone(),
        }
    }

    fn from_bytes(dtype: u8, bytes: &[u8]) -> ArrayData {
        fn chunks<const N: usize>(b: &[u8]) -> impl Iterator<Item = [u8; N]> + '_ {
            b.chunks_exact(N).map(|c| c.try_into().unwrap())
        }
        match dtype {
            1 => ArrayData::F64(chunks::<8>(bytes).map(f64::from_le_bytes).collect()),
            2 => ArrayData::F32(chunks::<4>(bytes).map(f32::from_le_bytes).collect()),
            3 => ArrayData::I64(chunks::<8>(bytes).map(i64::from_le_bytes).collect()),
            4 => ArrayData::I32(chunks::<4>(bytes).map(i32::from_le_bytes).collect()),
            5 => ArrayData::U32(chunks::<4>(bytes).map(u32::from_le_bytes).collect()),
            _ => ArrayData::U8(bytes.to_vec()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<u64>,
    pub data: ArrayData,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    pub arrays: Vec<NamedArray>,
}

fn take<'a>(buf: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= buf.len())
        .ok_or_else(|| Error::Format(format!("truncated header at byte {pos}")))?;
    let s = &buf[*pos..end];
    *pos = end;
    Ok(s)
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: ArrayData) {
        let expected: usize = shape.iter().product();
        assert_eq!(expected, data.len(), "array `{name}` shape/data mismatch");
        self.arrays.push(NamedArray {
            name: name.to_string(),
            shape: shape.iter().map(|&d| d as u64).collect(),
            data,
        });
    }

    pub fn push_f64(&mut self, name: &str, shape: &[usize], data: Vec<f64>) {
        self.push(name, shape, ArrayData::F64(data));
    }

    pub fn push_bytes(&mut self, name: &str, data: Vec<u8>) {
        let n = data.len();
        self.push(name, &[n], ArrayData::U8(data));
    }

    pub fn get(&self, name: &str) -> Option<&NamedArray> {
        self.arrays.iter().find(|a| a.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&NamedArray> {
        self.get(name)
            .ok_or_else(|| Error::Format(format!("missing array `{name}`")))
    }

    /// Fetches an f64 array (f32 is widened) and returns it with its shape.
    pub fn f64_array(&self, name: &str) -> Result<(Vec<usize>, Vec<f64>)> {
        let a = self.require(name)?;
        let shape = a.shape.iter().map(|&d| d as usize).collect();
        let data = match &a.data {
            ArrayData::F64(v) => v.clone(),
            ArrayData::F32(v) => v.iter().map(|&x| x as f64).collect(),
            _ => return Err(Error::validation(name, "expected floating-point dtype")),
        };
        Ok((shape, data))
    }

    /// Fetches an integer array as i64.
    pub fn i64_array(&self, name: &str) -> Result<(Vec<usize>, Vec<i64>)> {
        let a = self.require(name)?;
        let shape = a.shape.iter().map(|&d| d as usize).collect();
        let data = match &a.data {
            ArrayData::I64(v) => v.clone(),
            ArrayData::I32(v) => v.iter().map(|&x| x as i64).collect(),
            ArrayData::U32(v) => v.iter().map(|&x| x as i64).collect(),
            ArrayData::U8(v) => v.iter().map(|&x| x as i64).collect(),
            _ => return Err(Error::validation(name, "expected integer dtype")),
        };
        Ok((shape, data))
    }

    pub fn bytes(&self, name: &str) -> Result<&[u8]> {
        match &self.require(name)?.data {
            ArrayData::U8(v) => Ok(v),
            _ => Err(Error::validation(name, "expected u8 dtype")),
        }
    }

    pub fn to_bytes(&self, magic: &[u8; 8]) -> Vec<u8> {
        let mut header = Vec::new();
        header.extend_from_slice(magic);
        header.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        let header_len: usize = 12
            + self
                .arrays
                .iter()
                .map(|a| 2 + a.name.len() + 2 + 8 * a.shape.len() + 16)
                .sum::<usize>();
        let payloads: Vec<Vec<u8>> = self.arrays.iter().map(|a| a.data.to_bytes()).collect();
        let mut offset = header_len as u64;
        for (a, p) in self.arrays.iter().zip(&payloads) {
            header.extend_from_slice(&(a.name.len() as u16).to_le_bytes());
            header.extend_from_slice(a.name.as_bytes());
            header.push(a.data.dtype());
            header.push(a.shape.len() as u8);
            for d in &a.shape {
                header.extend_from_slice(&d.to_le_bytes());
            }
            header.extend_from_slice(&offset.to_le_bytes());
            header.extend_from_slice(&(p.len() as u64).to_le_bytes());
            offset += p.len() as u64;
        }
        debug_assert_eq!(header.len(), header_len);
        for p in payloads {
            header.extend_from_slice(&p);
        }
        header
    }

    pub fn from_bytes(buf: &[u8], magic: &[u8; 8]) -> Result<Self> {
        let mut pos = 0usize;
        let m = take(buf, &mut pos, 8)?;
        if m != magic {
            return Err(Error::Format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(m),
                String::from_utf8_lossy(magic)
            )));
        }
        let count = u32::from_le_bytes(take(buf, &mut pos, 4)?.try_into().unwrap()) as usize;
        let mut arrays = Vec::with_capacity(count.min(1024));
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(buf, &mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(buf, &mut pos, name_len)?.to_vec())
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?;
            let dtype = take(buf, &mut pos, 1)?[0];
            let ndim = take(buf, &mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(take(buf, &mut pos, 8)?.try_into().unwrap()));
            }
            let offset = u64::from_le_bytes(take(buf, &mut pos, 8)?.try_into().unwrap()) as usize;
            let nbytes = u64::from_le_bytes(take(buf, &mut pos, 8)?.try_into().unwrap()) as usize;
            let esize = ArrayData::elem_size(dtype)
                .ok_or_else(|| Error::Format(format!("array `{name}`: unknown dtype {dtype}")))?;
            let count: u64 = shape.iter().product();
            if count as usize * esize != nbytes {
                return Err(Error::Format(format!(
                    "array `{name}`: shape {shape:?} does not match {nbytes} payload bytes"
                )));
            }
            let end = offset
                .checked_add(nbytes)
                .filter(|&e| e <= buf.len())
                .ok_or_else(|| Error::Format(format!("array `{name}`: payload truncated")))?;
            arrays.push(NamedArray {
                name,
                shape,
                data: ArrayData::from_bytes(dtype, &buf[offset..end]),
            });
        }
        Ok(Self { arrays })
    }

    pub fn write(&self, path: &Path, magic: &[u8; 8]) -> Result<()> {
        let bytes = self.to_bytes(magic);
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path, magic: &[u8; 8]) -> Result<Self> {
        let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf, magic)
    }
}
