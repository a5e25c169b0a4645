//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   "MPSI-CKPT-1"                      11 bytes
//! count   u32                               number of entries
//! entry*  name_len u32, name utf-8 bytes,
//!         ndim u32, dims u32 * ndim,
//!         numel u64, values f64 * numel (LE bit patterns)
//! check   u64                               FNV-1a 64 over everything
//!                                           after the magic
//! ```
//!
//! Entries preserve insertion order, so writing and re-reading a checkpoint
//! reproduces the file byte for byte. A human-readable manifest (name,
//! shape, element count per line) can be emitted alongside for inspection.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::param::ParamVisit;
use crate::scalar::Scalar;

pub const MAGIC: &[u8; 11] = b"MPSI-CKPT-1";

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    for b in bytes {
        h ^= u64::from(*b);
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// An ordered name -> (shape, values) map of 64-bit floats.
#[derive(Debug, Default, Clone)]
pub struct Checkpoint {
    entries: Vec<(String, Vec<usize>, Vec<f64>)>,
    index: HashMap<String, usize>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, values: Vec<f64>) {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            values.len(),
            "checkpoint entry {name}: shape does not match value count"
        );
        assert!(
            !self.index.contains_key(&name),
            "checkpoint entry {name} inserted twice"
        );
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, shape, values));
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.index
            .get(name)
            .map(|&i| (self.entries[i].1.as_slice(), self.entries[i].2.as_slice()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    fn payload(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        buf.extend_from_slice(
            &u32::try_from(self.entries.len())
                .expect("entry count fits u32")
                .to_le_bytes(),
        );
        for (name, shape, values) in &self.entries {
            let nb = name.as_bytes();
            buf.extend_from_slice(
                &u32::try_from(nb.len())
                    .expect("name length fits u32")
                    .to_le_bytes(),
            );
            buf.extend_from_slice(nb);
            buf.extend_from_slice(
                &u32::try_from(shape.len())
                    .expect("rank fits u32")
                    .to_le_bytes(),
            );
            for &d in shape {
                buf.extend_from_slice(&u32::try_from(d).expect("dim fits u32").to_le_bytes());
            }
            buf.extend_from_slice(&(values.len() as u64).to_le_bytes());
            for v in values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        buf
    }

    pub fn write_to(&self, path: &Path) -> Result<()> {
        let payload = self.payload();
        let checksum = fnv1a64(&payload);
        let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let io = |e| Error::io(path, e);
        file.write_all(MAGIC).map_err(io)?;
        file.write_all(&payload).map_err(io)?;
        file.write_all(&checksum.to_le_bytes()).map_err(io)?;
        Ok(())
    }

    pub fn read_from(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::checkpoint(format!(
                "{}: missing or unrecognized magic header",
                path.display()
            )));
        }
        let payload = &bytes[MAGIC.len()..bytes.len() - 8];
        let stored = u64::from_le_bytes(
            bytes[bytes.len() - 8..]
                .try_into()
                .expect("slice is 8 bytes"),
        );
        let computed = fnv1a64(payload);
        if stored != computed {
            return Err(Error::checkpoint(format!(
                "{}: checksum mismatch (stored {stored:#018x}, computed {computed:#018x})",
                path.display()
            )));
        }

        let mut r = Cursor {
            buf: payload,
            pos: 0,
        };
        let count = r.u32()? as usize;
        let mut ckpt = Checkpoint::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::checkpoint("entry name is not valid utf-8"))?;
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            let numel = r.u64()? as usize;
            if numel != shape.iter().product::<usize>() {
                return Err(Error::checkpoint(format!(
                    "entry {name}: value count {numel} does not match shape {shape:?}"
                )));
            }
            let mut values = Vec::with_capacity(numel);
            for _ in 0..numel {
                values.push(f64::from_le_bytes(
                    r.take(8)?.try_into().expect("slice is 8 bytes"),
                ));
            }
            if ckpt.index.contains_key(&name) {
                return Err(Error::checkpoint(format!("duplicate entry {name}")));
            }
            ckpt.insert(name, shape, values);
        }
        if r.pos != payload.len() {
            return Err(Error::checkpoint(format!(
                "{} trailing bytes after last entry",
                payload.len() - r.pos
            )));
        }
        Ok(ckpt)
    }

    /// Human-readable sidecar: one `name shape numel` line per entry.
    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for (name, shape, values) in &self.entries {
            out.push_str(&format!("{}\t{:?}\t{}\n", name, shape, values.len()));
        }
        out
    }
}

/// Prefix for model parameter entries.
pub const PARAM_PREFIX: &str = "param/";

/// Record every parameter of `module` as `param/NAME`.
pub fn store_params<T: Scalar>(ckpt: &mut Checkpoint, module: &dyn ParamVisit<T>) {
    module.visit_params(&mut |p| {
        let values = p.tensor().data().iter().map(|v| v.to_c()).collect();
        ckpt.insert(
            format!("{PARAM_PREFIX}{}", p.name()),
            p.shape().to_vec(),
            values,
        );
    });
}

/// Restore every parameter of `module` from `param/NAME` entries.
///
/// Strict in both directions: a parameter missing from the checkpoint, a
/// shape mismatch, or a `param/` entry naming no parameter each fail with
/// the first offending name.
pub fn load_params<T: Scalar>(ckpt: &Checkpoint, module: &mut dyn ParamVisit<T>) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    let mut first_err: Option<Error> = None;
    module.visit_params_mut(&mut |p| {
        if first_err.is_some() {
            return;
        }
        let key = format!("{PARAM_PREFIX}{}", p.name());
        seen.insert(key.clone());
        match ckpt.get(&key) {
            None => {
                first_err = Some(Error::checkpoint(format!("missing entry {key}")));
            }
            Some((shape, values)) => {
                if shape != p.shape() {
                    first_err = Some(Error::checkpoint(format!(
                        "entry {key}: stored shape {:?} does not match parameter shape {:?}",
                        shape,
                        p.shape()
                    )));
                    return;
                }
                let data = values.iter().map(|&v| T::from_c(v)).collect();
                if let Err(e) = p.set_data(data) {
                    first_err = Some(e);
                }
            }
        }
    });
    if let Some(e) = first_err {
        return Err(e);
    }
    for name in ckpt.names() {
        if name.starts_with(PARAM_PREFIX) && !seen.contains(name) {
            return Err(Error::checkpoint(format!(
                "entry {name} does not correspond to any model parameter"
            )));
        }
    }
    Ok(())
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::checkpoint("file truncated mid-entry"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("slice is 4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("slice is 8 bytes"),
        ))
    }
}
