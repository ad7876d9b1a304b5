//! Named parameter storage, per-tape binding and the binary checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "MOFM"  version:u32  digest:[u8; 32]  count:u32
//! repeat count times:
//!     name_len:u32  name:utf8  ndim:u32  dims:u32*ndim  values:f64*numel
//! ```

use std::cell::RefCell;
use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;
use std::sync::Arc;

use crate::autodiff::gradcheck::{check_gradients, GradCheckReport};
use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{Scalar, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MOFM";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug)]
pub struct ParamStore<T: Scalar = f64> {
    names: Vec<String>,
    values: Vec<Arc<Tensor<T>>>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(Arc::new(value));
        Ok(ParamId(id))
    }

    /// Uniform `U(-bound, bound)` initialization.
    pub fn add_uniform(&mut self, name: impl Into<String>, shape: &[usize], bound: f64, rng: &mut RngStream) -> Result<ParamId> {
        let t = Tensor::from_fn(shape.to_vec(), |_| T::of(rng.uniform_in(-bound, bound)));
        self.add(name, t)
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> Result<ParamId> {
        self.add(name, Tensor::full(shape.to_vec(), T::of(value)))
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Arc<Tensor<T>> {
        &self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id).as_ref())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.values.iter().map(|v| v.as_ref()))
    }

    /// Replaces a value; the shape must not change.
    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<()> {
        let old = &self.values[id.0];
        if old.shape() != value.shape() {
            return Err(Error::shape("ParamStore::set", old.shape(), value.shape()));
        }
        self.values[id.0] = Arc::new(value);
        Ok(())
    }

    pub fn set_by_name(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::config(format!("unknown parameter {name}")))?;
        self.set(id, value)
    }

    /// Mutable access, cloning the buffer only if a tape still shares it.
    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.values[id.0])
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(|v| v.numel()).sum()
    }

    /// Scalar count of parameters whose name starts with `prefix`.
    pub fn numel_with_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }

    /// Copies every same-name, same-shape parameter from `other`; returns how many were copied.
    pub fn copy_matching_from(&mut self, other: &ParamStore<T>) -> usize {
        let mut copied = 0;
        for i in 0..self.values.len() {
            if let Some(src) = other.by_name(&self.names[i]) {
                if src.shape() == self.values[i].shape() {
                    self.values[i] = Arc::new(src.clone());
                    copied += 1;
                }
            }
        }
        copied
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            values: self.values.iter().map(|v| Arc::new(v.cast())).collect(),
            index: self.index.clone(),
        }
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W, digest: &[u8; 32]) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(digest)?;
        w.write_all(&u32_len(self.len())?.to_le_bytes())?;
        for (name, value) in self.iter() {
            w.write_all(&u32_len(name.len())?.to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&u32_len(value.ndim())?.to_le_bytes())?;
            for &d in value.shape() {
                w.write_all(&u32_len(d)?.to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(value.numel() * 8);
            for &x in value.data() {
                buf.extend_from_slice(&x.as_f64().to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    /// Reads a checkpoint, returning the stored digest alongside the parameters.
    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<([u8; 32], ParamStore<T>)> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut digest = [0u8; 32];
        r.read_exact(&mut digest).map_err(truncated)?;
        let count = read_u32(&mut r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name).map_err(truncated)?;
            let name = String::from_utf8(name).map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let ndim = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut raw = vec![0u8; numel * 8];
            r.read_exact(&mut raw).map_err(truncated)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
                .collect();
            let value = Tensor::new(shape, data).map_err(|e| Error::Format(format!("parameter {name}: {e}")))?;
            store.add(name, value).map_err(|e| Error::Format(e.to_string()))?;
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after last parameter".into()));
        }
        Ok((digest, store))
    }

    pub fn save(&self, path: impl AsRef<Path>, digest: &[u8; 32]) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w, digest)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<([u8; 32], ParamStore<T>)> {
        let file = std::fs::File::open(path)?;
        Self::read_checkpoint(std::io::BufReader::new(file))
    }
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Format(format!("{n} does not fit in u32")))
}

fn truncated(e: std::io::Error) -> Error {
    if e.kind() == std::io::ErrorKind::UnexpectedEof {
        Error::Format("truncated file".into())
    } else {
        Error::Io(e)
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

/// Lazily places parameters on a tape, once each, and maps gradients back to [`ParamId`]s.
pub struct Binder<'t, 's, T: Scalar = f64> {
    tape: &'t Tape<T>,
    store: &'s ParamStore<T>,
    trainable: bool,
    vars: RefCell<Vec<Option<Var<'t, T>>>>,
}

impl<'t, 's, T: Scalar> Binder<'t, 's, T> {
    /// Parameters bound this way receive gradients when the tape records.
    pub fn new(tape: &'t Tape<T>, store: &'s ParamStore<T>) -> Self {
        Self {
            tape,
            store,
            trainable: tape.is_recording(),
            vars: RefCell::new(vec![None; store.len()]),
        }
    }

    /// Parameters are bound as constants (no gradients).
    pub fn frozen(tape: &'t Tape<T>, store: &'s ParamStore<T>) -> Self {
        Self {
            trainable: false,
            ..Self::new(tape, store)
        }
    }

    /// Uses `vars[i]` as the binding of `ParamId(i)`.
    pub fn with_vars(tape: &'t Tape<T>, store: &'s ParamStore<T>, vars: &[Var<'t, T>]) -> Result<Self> {
        if vars.len() != store.len() {
            return Err(Error::dim(
                "Binder::with_vars",
                format!("{} vars for {} parameters", vars.len(), store.len()),
            ));
        }
        Ok(Self {
            tape,
            store,
            trainable: tape.is_recording(),
            vars: RefCell::new(vars.iter().copied().map(Some).collect()),
        })
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    pub fn var(&self, id: ParamId) -> Var<'t, T> {
        let mut vars = self.vars.borrow_mut();
        *vars[id.0].get_or_insert_with(|| self.tape.leaf_shared(self.store.get(id).clone(), self.trainable))
    }

    /// Gradients of every parameter that was bound, in id order.
    pub fn grads(&self, grads: &Gradients<T>) -> Vec<(ParamId, Tensor<T>)> {
        self.vars
            .borrow()
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.and_then(|v| grads.get(v).map(|g| (ParamId(i), g.clone()))))
            .collect()
    }
}

/// Finite-difference check of `f` with respect to every parameter in `store`
/// (inputs `0..store.len()`) and the extra tensors in `inputs` (passed to `f`).
pub fn check_param_gradients<F>(
    store: &ParamStore<f64>,
    inputs: &[Tensor<f64>],
    h: f64,
    stride: usize,
    f: F,
) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&Binder<'t, '_, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let mut all: Vec<Tensor<f64>> = store.iter().map(|(_, v)| v.clone()).collect();
    all.extend_from_slice(inputs);
    let np = store.len();
    check_gradients(&all, h, stride, |tape, vars| {
        let bx = Binder::with_vars(tape, store, &vars[..np])?;
        f(&bx, &vars[np..])
    })
}
