//! Named parameters with gradient accumulators, the SGD update and the
//! binary checkpoint container.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "MDBCKPT\0"
//! version    u32      1
//! endianness u8       b'L'
//! count      u64      number of parameter records
//! record*    name_len u32 | name (UTF-8) | rank u32 | extents u64*rank | values f64*
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng::RngState;
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"MDBCKPT\0";
const FORMAT_VERSION: u32 = 1;
const LITTLE_ENDIAN_TAG: u8 = b'L';

#[derive(Debug, Clone, PartialEq)]
enum Touch {
    None,
    Rows(BTreeSet<usize>),
    All,
}

#[derive(Debug, Clone)]
struct Param {
    value: Tensor,
    grad: Tensor,
    touch: Touch,
}

#[derive(Debug, Clone, Default)]
pub struct ParameterStore {
    params: BTreeMap<String, Param>,
}

impl ParameterStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(Error::Duplicate(name));
        }
        let grad = Tensor::zeros(value.shape());
        self.params.insert(
            name,
            Param {
                value,
                grad,
                touch: Touch::None,
            },
        );
        Ok(())
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.params.remove(name).map(|p| p.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.values().map(|p| p.value.len()).sum()
    }

    fn param(&self, name: &str) -> Result<&Param> {
        self.params.get(name).ok_or_else(|| Error::Unknown {
            what: "parameter",
            name: name.to_string(),
        })
    }

    fn param_mut(&mut self, name: &str) -> Result<&mut Param> {
        self.params.get_mut(name).ok_or_else(|| Error::Unknown {
            what: "parameter",
            name: name.to_string(),
        })
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.param(name)?.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        Ok(&mut self.param_mut(name)?.value)
    }

    pub fn grad(&self, name: &str) -> Result<&Tensor> {
        Ok(&self.param(name)?.grad)
    }

    /// Adds `delta` to the whole gradient of `name` and marks it touched.
    pub fn accumulate(&mut self, name: &str, delta: &Tensor) -> Result<()> {
        let p = self.param_mut(name)?;
        if p.grad.shape() != delta.shape() {
            return Err(Error::dim(
                "accumulate",
                format!("{}: gradient {:?} vs parameter {:?}", name, delta.shape(), p.grad.shape()),
            ));
        }
        for (g, d) in p.grad.data_mut().iter_mut().zip(delta.data()) {
            *g += d;
        }
        p.touch = Touch::All;
        Ok(())
    }

    /// Adds `delta` to one leading-axis row of the gradient of `name`.
    /// Only touched rows are visited by [`ParameterStore::sgd_step`].
    pub fn accumulate_row(&mut self, name: &str, row: usize, delta: &[f64]) -> Result<()> {
        let p = self.param_mut(name)?;
        let rows = p.grad.shape()[0];
        if row >= rows {
            return Err(Error::Index {
                what: "parameter rows",
                index: row,
                size: rows,
            });
        }
        if delta.len() != p.grad.row_width() {
            return Err(Error::dim("accumulate_row", format!("{}: row width mismatch", name)));
        }
        for (g, d) in p.grad.row_mut(row).iter_mut().zip(delta) {
            *g += d;
        }
        match &mut p.touch {
            Touch::All => {}
            Touch::Rows(set) => {
                set.insert(row);
            }
            t @ Touch::None => *t = Touch::Rows(BTreeSet::from([row])),
        }
        Ok(())
    }

    pub fn is_touched(&self, name: &str) -> bool {
        self.params.get(name).is_some_and(|p| p.touch != Touch::None)
    }

    pub fn touched_names(&self) -> Vec<String> {
        self.params
            .iter()
            .filter(|(_, p)| p.touch != Touch::None)
            .map(|(n, _)| n.clone())
            .collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params.values_mut() {
            reset_grad(p);
        }
    }

    /// Clears gradients of every parameter whose name starts with `prefix`,
    /// so the next SGD step leaves them unchanged.
    pub fn discard_grads(&mut self, prefix: &str) {
        for (_, p) in self.params.iter_mut().filter(|(n, _)| n.starts_with(prefix)) {
            reset_grad(p);
        }
    }

    /// Applies `p ← p − lr·g` to every touched parameter (or touched rows),
    /// then clears those gradients. Untouched parameters are not read or
    /// written. A non-finite gradient aborts before any parameter changes.
    pub fn sgd_step(&mut self, learning_rate: f64) -> Result<()> {
        for (name, p) in &self.params {
            let finite = match &p.touch {
                Touch::None => true,
                Touch::All => p.grad.data().iter().all(|v| v.is_finite()),
                Touch::Rows(rows) => rows.iter().all(|&r| p.grad.row(r).iter().all(|v| v.is_finite())),
            };
            if !finite {
                return Err(Error::NonFinite(format!("gradient of parameter {}", name)));
            }
        }
        for p in self.params.values_mut() {
            match &p.touch {
                Touch::None => continue,
                Touch::All => {
                    for (v, g) in p.value.data_mut().iter_mut().zip(p.grad.data()) {
                        *v -= learning_rate * g;
                    }
                }
                Touch::Rows(rows) => {
                    for &r in rows {
                        let g = p.grad.row(r).to_vec();
                        for (v, gv) in p.value.row_mut(r).iter_mut().zip(&g) {
                            *v -= learning_rate * gv;
                        }
                    }
                }
            }
            reset_grad(p);
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.push(LITTLE_ENDIAN_TAG);
        out.extend_from_slice(&(self.params.len() as u64).to_le_bytes());
        for (name, p) in &self.params {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
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

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {}", version)));
        }
        if r.take(1)?[0] != LITTLE_ENDIAN_TAG {
            return Err(Error::Checkpoint("unsupported endianness tag".into()));
        }
        let count = r.u64()? as usize;
        let mut store = ParameterStore::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("parameter name is not UTF-8".into()))?
                .to_string();
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            store.insert(name, Tensor::new(shape, data)?)?;
        }
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

fn reset_grad(p: &mut Param) {
    match std::mem::replace(&mut p.touch, Touch::None) {
        Touch::None => {}
        Touch::All => p.grad.fill(0.0),
        Touch::Rows(rows) => {
            for r in rows {
                p.grad.row_mut(r).fill(0.0);
            }
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

/// Scaled-uniform initialisation in `±sqrt(6 / (fan_in + fan_out))`.
pub fn glorot_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut RngState) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    uniform(shape, bound, rng)
}

pub const EMBEDDING_INIT_BOUND: f64 = 0.05;

pub fn uniform(shape: &[usize], bound: f64, rng: &mut RngState) -> Tensor {
    let mut t = Tensor::zeros(shape);
    t.data_mut().iter_mut().for_each(|v| *v = rng.uniform(-bound, bound));
    t
}
