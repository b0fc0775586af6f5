//! `.vvt` tensor archive: `"VVTF"`, version `u32 = 1`, entry count `u32`, then
//! per entry `name_len u32, name, ndim u32, dims u32…, f32 payload`, all
//! little-endian.

use std::collections::HashSet;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use crate::error::{Error, Result};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"VVTF";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl TensorEntry {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            dims,
            data,
        }
    }

    pub fn from_f64(name: impl Into<String>, dims: Vec<usize>, data: &[f64]) -> Self {
        Self::new(name, dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

/// An ordered set of named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Archive {
    pub entries: Vec<TensorEntry>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, entry: TensorEntry) {
        self.entries.push(entry);
    }

    pub fn get(&self, name: &str) -> Option<&TensorEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Looks up `name`, failing with a validation error when absent.
    pub fn require(&self, name: &str) -> Result<&TensorEntry> {
        self.get(name)
            .ok_or_else(|| Error::Validation(format!("archive has no entry named {name:?}")))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.name.as_str())
    }

    pub fn extend(&mut self, other: Archive) {
        self.entries.extend(other.entries);
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for e in &self.entries {
            if !seen.insert(e.name.as_str()) {
                return Err(Error::Validation(format!("duplicate entry name {:?}", e.name)));
            }
            if e.dims.contains(&0) {
                return Err(Error::Validation(format!("entry {:?} has a zero dim", e.name)));
            }
            let n: usize = e.dims.iter().product();
            if n != e.data.len() {
                return Err(Error::Validation(format!(
                    "entry {:?}: dims {:?} imply {n} values, found {}",
                    e.name,
                    e.dims,
                    e.data.len()
                )));
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.validate()?;
        let mut out = Vec::new();
        out.extend_from_slice(ARCHIVE_MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
            for &d in &e.dims {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &v in &e.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut cur = Cursor::new(bytes);
        let io = |e| Error::io(path, e);
        let mut magic = [0u8; 4];
        cur.read_exact(&mut magic).map_err(io)?;
        if &magic != ARCHIVE_MAGIC {
            return Err(Error::Format(format!("{}: bad archive magic", path.display())));
        }
        let version = read_u32(&mut cur).map_err(io)?;
        if version != ARCHIVE_VERSION {
            return Err(Error::Format(format!(
                "{}: unsupported archive version {version}",
                path.display()
            )));
        }
        let count = read_u32(&mut cur).map_err(io)?;
        let mut entries = Vec::new();
        for _ in 0..count {
            let name_len = read_u32(&mut cur).map_err(io)? as usize;
            let mut name = vec![0u8; name_len.min(bytes.len())];
            cur.read_exact(&mut name).map_err(io)?;
            if name.len() != name_len {
                return Err(io(std::io::ErrorKind::UnexpectedEof.into()));
            }
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format(format!("{}: entry name is not UTF-8", path.display())))?;
            let ndim = read_u32(&mut cur).map_err(io)?;
            let mut dims = Vec::new();
            for _ in 0..ndim {
                dims.push(read_u32(&mut cur).map_err(io)? as usize);
            }
            let n: usize = dims.iter().product();
            let remaining = bytes.len() - cur.position() as usize;
            if n.saturating_mul(4) > remaining {
                return Err(io(std::io::ErrorKind::UnexpectedEof.into()));
            }
            let mut data = Vec::with_capacity(n);
            let mut buf = [0u8; 4];
            for _ in 0..n {
                cur.read_exact(&mut buf).map_err(io)?;
                data.push(f32::from_le_bytes(buf));
            }
            entries.push(TensorEntry { name, dims, data });
        }
        Ok(Self { entries })
    }
}

fn read_u32(cur: &mut Cursor<&[u8]>) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    cur.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

pub fn save_archive(archive: &Archive, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = archive.to_bytes()?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_archive(path: impl AsRef<Path>) -> Result<Archive> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Archive::from_bytes(&bytes, path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Archive {
        let mut a = Archive::new();
        a.push(TensorEntry::new("net/head", vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, f32::MIN_POSITIVE, 7.0]));
        a.push(TensorEntry::new("meta/step", vec![1], vec![42.0]));
        a
    }

    #[test]
    fn round_trip_preserves_names_dims_and_bits() {
        let tmp = tempfile::tempdir().unwrap();
        let path = tmp.path().join("a.vvt");
        let a = sample();
        save_archive(&a, &path).unwrap();
        let b = load_archive(&path).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn empty_archive_is_a_twelve_byte_header() {
        let bytes = Archive::new().to_bytes().unwrap();
        assert_eq!(bytes.len(), 12);
        assert_eq!(&bytes[..4], b"VVTF");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &0u32.to_le_bytes());
    }

    #[test]
    fn duplicate_names_are_rejected() {
        let mut a = sample();
        a.push(TensorEntry::new("meta/step", vec![1], vec![1.0]));
        assert!(matches!(a.to_bytes(), Err(Error::Validation(_))));
    }

    #[test]
    fn dims_must_match_payload() {
        let mut a = Archive::new();
        a.push(TensorEntry::new("x", vec![2, 2], vec![1.0; 3]));
        assert!(matches!(a.to_bytes(), Err(Error::Validation(_))));
    }

    #[test]
    fn bad_magic_and_version_are_format_errors() {
        let p = Path::new("mem");
        let mut bytes = sample().to_bytes().unwrap();
        bytes[0] = b'X';
        assert!(matches!(Archive::from_bytes(&bytes, p), Err(Error::Format(_))));
        let mut bytes = sample().to_bytes().unwrap();
        bytes[4] = 2;
        assert!(matches!(Archive::from_bytes(&bytes, p), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_is_an_io_error() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [3, 10, 20, bytes.len() - 1] {
            let err = Archive::from_bytes(&bytes[..cut], Path::new("mem")).unwrap_err();
            assert!(matches!(err, Error::Io { .. }), "cut {cut}: {err}");
        }
    }

    proptest! {
        #[test]
        fn arbitrary_archives_round_trip_bit_exactly(
            tensors in prop::collection::vec(prop::collection::vec(any::<u32>(), 1..20), 0..6)
        ) {
            let mut a = Archive::new();
            for (i, raw) in tensors.iter().enumerate() {
                let data: Vec<f32> = raw.iter().map(|&b| f32::from_bits(b)).collect();
                a.push(TensorEntry::new(format!("t{i}"), vec![data.len()], data));
            }
            let b = Archive::from_bytes(&a.to_bytes().unwrap(), Path::new("mem")).unwrap();
            prop_assert_eq!(a.entries.len(), b.entries.len());
            for (x, y) in a.entries.iter().zip(&b.entries) {
                prop_assert_eq!(&x.name, &y.name);
                prop_assert_eq!(&x.dims, &y.dims);
                let xb: Vec<u32> = x.data.iter().map(|v| v.to_bits()).collect();
                let yb: Vec<u32> = y.data.iter().map(|v| v.to_bits()).collect();
                prop_assert_eq!(xb, yb);
            }
        }
    }
}
