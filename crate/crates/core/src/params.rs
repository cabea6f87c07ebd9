//! Named trainable arrays, their gradient buffers and Adam moments, plus the
//! `HSMW` checkpoint format.
//!
//! Checkpoint layout (all little-endian): magic `HSMW`, version `u32`, then
//! records until end of file, each being name length `u32`, UTF-8 name
//! bytes, rank `u32`, `rank` extents as `u64`, and the values as `f64`.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{read_file, Error, Result};
use crate::tensor::NdArray;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"HSMW";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub value: NdArray,
    pub grad: NdArray,
    /// Adam first moment.
    pub m: NdArray,
    /// Adam second moment.
    pub v: NdArray,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
    by_name: HashMap<String, usize>,
    /// Number of optimizer steps taken.
    pub step: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: NdArray) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter name `{name}`")));
        }
        let id = ParamId(self.params.len());
        let zeros = NdArray::zeros(value.shape());
        self.by_name.insert(name.clone(), id.0);
        self.params.push(Parameter {
            name,
            grad: zeros.clone(),
            m: zeros.clone(),
            v: zeros,
            value,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &NdArray {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut NdArray {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.grad.data_mut().fill(0.0);
        }
    }

    pub fn accumulate_grad(&mut self, id: ParamId, grad: &NdArray) {
        self.params[id.0].grad.add_assign(grad);
    }

    /// Total number of trainable scalars.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Number of scalars in parameters whose name starts with `prefix`.
    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.params.iter().filter(|p| p.name.starts_with(prefix)).map(|p| p.value.len()).sum()
    }

    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        for p in &self.params {
            out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
            out.extend_from_slice(p.name.as_bytes());
            out.extend_from_slice(&(p.value.rank() as u32).to_le_bytes());
            for &e in p.value.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in p.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_checkpoint_bytes())?;
        Ok(())
    }

    /// Overwrite values from checkpoint records. Every parameter in the store
    /// must be present with a matching shape.
    pub fn load_values(&mut self, records: Vec<(String, NdArray)>) -> Result<()> {
        let mut seen = vec![false; self.params.len()];
        for (name, value) in records {
            let Some(&i) = self.by_name.get(&name) else {
                return Err(Error::Config(format!("checkpoint has unknown parameter `{name}`")));
            };
            if self.params[i].value.shape() != value.shape() {
                return Err(Error::Dimension(format!(
                    "checkpoint parameter `{name}` has shape {:?}, model expects {:?}",
                    value.shape(),
                    self.params[i].value.shape()
                )));
            }
            self.params[i].value = value;
            seen[i] = true;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Config(format!(
                "checkpoint is missing parameter `{}`",
                self.params[i].name
            )));
        }
        Ok(())
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                msg: format!(
                    "truncated {what}: expected {n} bytes, {} available",
                    self.buf.len() - self.pos
                ),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

/// Parse checkpoint bytes into `(name, array)` records.
pub fn parse_checkpoint(bytes: &[u8]) -> Result<Vec<(String, NdArray)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        return Err(Error::Format { offset: 0, msg: "bad magic, expected HSMW".into() });
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format { offset: 4, msg: format!("unsupported version {version}") });
    }
    let mut records = Vec::new();
    while r.pos < bytes.len() {
        let name_len = r.u32("name length")? as usize;
        let name_at = r.pos;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| Error::Format { offset: name_at as u64, msg: "name is not UTF-8".into() })?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        let mut count: usize = 1;
        for _ in 0..rank {
            let at = r.pos;
            let e = usize::try_from(r.u64("extent")?).ok();
            count = match e.and_then(|e| count.checked_mul(e).map(|c| (e, c))) {
                Some((e, c)) if c.checked_mul(8).is_some() => {
                    shape.push(e);
                    c
                }
                _ => {
                    return Err(Error::Format {
                        offset: at as u64,
                        msg: format!("extent overflow in `{name}`"),
                    })
                }
            };
        }
        let payload = r.take(count * 8, "values")?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        records.push((name, NdArray::new(&shape, data)?));
    }
    Ok(records)
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<Vec<(String, NdArray)>> {
    parse_checkpoint(&read_file(path.as_ref())?)
}
