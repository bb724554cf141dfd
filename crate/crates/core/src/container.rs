//! The ASWT tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   "ASWT"
//! version u16
//! record* until end of file:
//!     name_len u16, name (UTF-8, name_len bytes)
//!     dtype    u8   (0 = f32, 1 = f64)
//!     rank     u8
//!     dims     u32 * rank
//!     data     element_size * prod(dims) bytes
//! ```
//!
//! The same container carries network weights, activations, sample plans and
//! sensitivity maps. Readers skip records they do not understand by name.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"ASWT";
pub const VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::Container(format!("unknown dtype code {other}"))),
        }
    }

    fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(ArrayD<f32>),
    F64(ArrayD<f64>),
}

impl TensorData {
    pub fn shape(&self) -> &[usize] {
        match self {
            TensorData::F32(a) => a.shape(),
            TensorData::F64(a) => a.shape(),
        }
    }

    fn dtype(&self) -> DType {
        match self {
            TensorData::F32(_) => DType::F32,
            TensorData::F64(_) => DType::F64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub data: TensorData,
}

/// An ordered collection of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    tensors: Vec<NamedTensor>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.iter().map(|t| t.name.as_str())
    }

    pub fn tensors(&self) -> &[NamedTensor] {
        &self.tensors
    }

    /// Inserts or replaces a tensor.
    pub fn insert(&mut self, name: impl Into<String>, data: TensorData) {
        let name = name.into();
        if let Some(slot) = self.tensors.iter_mut().find(|t| t.name == name) {
            slot.data = data;
        } else {
            self.tensors.push(NamedTensor { name, data });
        }
    }

    pub fn insert_f32(&mut self, name: impl Into<String>, array: ArrayD<f32>) {
        self.insert(name, TensorData::F32(array));
    }

    pub fn insert_f64(&mut self, name: impl Into<String>, array: ArrayD<f64>) {
        self.insert(name, TensorData::F64(array));
    }

    pub fn get(&self, name: &str) -> Option<&TensorData> {
        self.tensors.iter().find(|t| t.name == name).map(|t| &t.data)
    }

    pub fn f32(&self, name: &str) -> Result<ArrayD<f32>> {
        match self.get(name) {
            Some(TensorData::F32(a)) => Ok(a.clone()),
            Some(TensorData::F64(_)) => Err(Error::Container(format!("tensor `{name}` is f64, expected f32"))),
            None => Err(Error::Container(format!("missing tensor `{name}`"))),
        }
    }

    pub fn f64(&self, name: &str) -> Result<ArrayD<f64>> {
        match self.get(name) {
            Some(TensorData::F64(a)) => Ok(a.clone()),
            Some(TensorData::F32(_)) => Err(Error::Container(format!("tensor `{name}` is f32, expected f64"))),
            None => Err(Error::Container(format!("missing tensor `{name}`"))),
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        for t in &self.tensors {
            let name = t.name.as_bytes();
            let name_len = u16::try_from(name.len())
                .map_err(|_| Error::Container(format!("tensor name too long: {}", t.name)))?;
            w.write_all(&name_len.to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[t.data.dtype() as u8])?;
            let shape = t.data.shape();
            let rank = u8::try_from(shape.len()).map_err(|_| Error::Container("rank exceeds 255".into()))?;
            w.write_all(&[rank])?;
            for &d in shape {
                let d = u32::try_from(d).map_err(|_| Error::Container("dimension exceeds u32".into()))?;
                w.write_all(&d.to_le_bytes())?;
            }
            match &t.data {
                TensorData::F32(a) => {
                    let mut buf = Vec::with_capacity(a.len() * 4);
                    for v in a.iter() {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                    w.write_all(&buf)?;
                }
                TensorData::F64(a) => {
                    let mut buf = Vec::with_capacity(a.len() * 8);
                    for v in a.iter() {
                        buf.extend_from_slice(&v.to_le_bytes());
                    }
                    w.write_all(&buf)?;
                }
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic, "magic")?;
        if &magic != MAGIC {
            return Err(Error::Container(format!("bad magic {magic:?}")));
        }
        let mut v = [0u8; 2];
        read_exact(&mut r, &mut v, "version")?;
        let version = u16::from_le_bytes(v);
        if version != VERSION {
            return Err(Error::Container(format!("unsupported version {version}")));
        }

        let mut tensors = Vec::new();
        loop {
            let mut len = [0u8; 2];
            // A clean end of file may only occur between records.
            match r.read(&mut len[..1])? {
                0 => break,
                _ => read_exact(&mut r, &mut len[1..], "name length")?,
            }
            let name_len = u16::from_le_bytes(len) as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name, "name")?;
            let name = String::from_utf8(name).map_err(|_| Error::Container("tensor name is not UTF-8".into()))?;
            let mut hdr = [0u8; 2];
            read_exact(&mut r, &mut hdr, "dtype/rank")?;
            let dtype = DType::from_code(hdr[0])?;
            let rank = hdr[1] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                let mut d = [0u8; 4];
                read_exact(&mut r, &mut d, "dims")?;
                shape.push(u32::from_le_bytes(d) as usize);
            }
            let count: usize = shape.iter().product();
            let mut raw = vec![0u8; count * dtype.size()];
            read_exact(&mut r, &mut raw, &name)?;
            let data = match dtype {
                DType::F32 => {
                    let v: Vec<f32> = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    TensorData::F32(ArrayD::from_shape_vec(IxDyn(&shape), v).expect("length matches shape"))
                }
                DType::F64 => {
                    let v: Vec<f64> = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                        .collect();
                    TensorData::F64(ArrayD::from_shape_vec(IxDyn(&shape), v).expect("length matches shape"))
                }
            };
            tensors.push(NamedTensor { name, data });
        }
        Ok(Self { tensors })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = File::create(path)?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let f = File::open(path)?;
        Self::read_from(BufReader::new(f))
    }
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => Error::Container(format!("truncated file while reading {what}")),
        _ => Error::Io(e),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Container {
        let mut c = Container::new();
        c.insert_f32("w", ArrayD::from_shape_vec(IxDyn(&[2, 3]), vec![1.0, -2.5, 3.0, 0.0, f32::MIN_POSITIVE, 7.0]).unwrap());
        c.insert_f64("u", ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.125, 1e-300]).unwrap());
        c.insert_f32("scalar", ArrayD::from_shape_vec(IxDyn(&[]), vec![4.0]).unwrap());
        c
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"ASWT");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        // first record: name "w"
        assert_eq!(u16::from_le_bytes([bytes[6], bytes[7]]), 1);
        assert_eq!(bytes[8], b'w');
        assert_eq!(bytes[9], 0); // f32
        assert_eq!(bytes[10], 2); // rank
    }

    #[test]
    fn roundtrip_is_byte_stable() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Container::read_from(&bytes[..]).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(Container::read_from(&bytes[..]), Err(Error::Container(_))));
    }

    #[test]
    fn truncated_file_is_rejected() {
        let bytes = sample().to_bytes();
        for cut in [3, 5, 9, 20, bytes.len() - 1] {
            let err = Container::read_from(&bytes[..cut]).unwrap_err();
            assert!(matches!(err, Error::Container(_)), "cut {cut}: {err}");
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[4] = 9;
        assert!(Container::read_from(&bytes[..]).is_err());
    }

    proptest! {
        #[test]
        fn arbitrary_tensors_roundtrip(values in proptest::collection::vec(any::<f32>(), 0..64), name in "[a-z.]{1,12}") {
            let n = values.len();
            let mut c = Container::new();
            c.insert_f32(name.clone(), ArrayD::from_shape_vec(IxDyn(&[n]), values.clone()).unwrap());
            let back = Container::read_from(&c.to_bytes()[..]).unwrap();
            let got = back.f32(&name).unwrap();
            let same = got.iter().zip(&values).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
