//! Named parameter storage, gradient buffers and the binary checkpoint format.

use super::Tensor;
use crate::error::{arg_err, Error, Result};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

/// Index of a parameter inside its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Gradient contribution for one parameter: dense, or a set of touched rows
/// (embedding lookups).
#[derive(Debug, Clone)]
pub enum GradBuf {
    Dense(Tensor),
    Rows {
        width: usize,
        rows: BTreeMap<usize, Vec<f64>>,
    },
}

impl GradBuf {
    pub fn to_dense(&self, shape: &[usize]) -> Tensor {
        match self {
            GradBuf::Dense(t) => t.clone(),
            GradBuf::Rows { width, rows } => {
                let mut out = Tensor::zeros(shape);
                let data = out.data_mut();
                for (&r, vals) in rows {
                    for (dst, v) in data[r * width..(r + 1) * width].iter_mut().zip(vals) {
                        *dst += v;
                    }
                }
                out
            }
        }
    }
}

/// Gradients of one scalar with respect to the parameters it touched.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    pub(crate) bufs: BTreeMap<ParamId, GradBuf>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&GradBuf> {
        self.bufs.get(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.bufs.keys().copied()
    }

    /// Dense gradient for `id`, zeros when the parameter was not reached.
    pub fn dense(&self, store: &ParamStore, id: ParamId) -> Tensor {
        let shape = store.value(id).shape();
        self.bufs
            .get(&id)
            .map_or_else(|| Tensor::zeros(shape), |g| g.to_dense(shape))
    }
}

#[derive(Debug, Clone)]
struct Slot {
    name: String,
    value: Tensor,
    grad: Tensor,
    m: Tensor,
    v: Tensor,
}

/// Learned weights plus gradient and Adam moment buffers.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    slots: Vec<Slot>,
    index: BTreeMap<String, ParamId>,
    step: u64,
    grads_pending: bool,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return arg_err(format!("duplicate parameter {name}"));
        }
        value.ensure_finite(name)?;
        let id = ParamId(self.slots.len());
        let shape = value.shape().to_vec();
        self.slots.push(Slot {
            name: name.to_string(),
            grad: Tensor::zeros(&shape),
            m: Tensor::zeros(&shape),
            v: Tensor::zeros(&shape),
            value,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.slots.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.slots[id.0].name
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.slots[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor> {
        self.id(name).map(|id| self.value(id))
    }

    pub fn grad(&self, id: ParamId) -> &Tensor {
        &self.slots[id.0].grad
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    /// Total number of scalar weights.
    pub fn num_scalars(&self) -> usize {
        self.slots.iter().map(|s| s.value.numel()).sum()
    }

    pub fn accumulate(&mut self, grads: &Gradients) {
        for (&id, buf) in &grads.bufs {
            let slot = &mut self.slots[id.0];
            match buf {
                GradBuf::Dense(t) => {
                    for (g, d) in slot.grad.data_mut().iter_mut().zip(t.data()) {
                        *g += d;
                    }
                }
                GradBuf::Rows { width, rows } => {
                    let data = slot.grad.data_mut();
                    for (&r, vals) in rows {
                        for (g, d) in data[r * width..(r + 1) * width].iter_mut().zip(vals) {
                            *g += d;
                        }
                    }
                }
            }
        }
        self.grads_pending = true;
    }

    /// Overwrites the gradient of one parameter.
    pub fn set_grad(&mut self, id: ParamId, grad: Tensor) -> Result<()> {
        let slot = &mut self.slots[id.0];
        if grad.shape() != slot.value.shape() {
            return Err(Error::Consistency(format!(
                "gradient shape {:?} does not match parameter {} {:?}",
                grad.shape(),
                slot.name,
                slot.value.shape()
            )));
        }
        slot.grad = grad;
        self.grads_pending = true;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for slot in &mut self.slots {
            slot.grad.data_mut().fill(0.0);
        }
        self.grads_pending = false;
    }

    pub(crate) fn grads_pending(&self) -> bool {
        self.grads_pending
    }

    pub(crate) fn adam_update(&mut self, lr: f64, beta1: f64, beta2: f64, eps: f64) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for slot in &mut self.slots {
            let Slot {
                value, grad, m, v, ..
            } = slot;
            let it = value
                .data_mut()
                .iter_mut()
                .zip(grad.data_mut().iter_mut())
                .zip(m.data_mut().iter_mut().zip(v.data_mut().iter_mut()));
            for ((p, g), (mi, vi)) in it {
                let gv = *g;
                // untouched coordinates with empty moments stay exactly put
                if gv == 0.0 && *mi == 0.0 && *vi == 0.0 {
                    continue;
                }
                *mi = beta1 * *mi + (1.0 - beta1) * gv;
                *vi = beta2 * *vi + (1.0 - beta2) * gv * gv;
                *p -= lr * (*mi / bc1) / ((*vi / bc2).sqrt() + eps);
                *g = 0.0;
            }
        }
        self.grads_pending = false;
    }

    /// Snapshot of the values only, keyed by name.
    pub fn values_by_name(&self) -> BTreeMap<String, Tensor> {
        self.slots
            .iter()
            .map(|s| (s.name.clone(), s.value.clone()))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let mut w = std::io::BufWriter::new(file);
        self.write_checkpoint(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::read_checkpoint(&mut std::io::BufReader::new(file))
    }

    pub fn write_checkpoint(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        w.write_all(&(self.slots.len() as u64).to_le_bytes())?;
        for slot in &self.slots {
            let name = slot.name.as_bytes();
            w.write_all(&(name.len() as u64).to_le_bytes())?;
            w.write_all(name)?;
            let shape = slot.value.shape();
            w.write_all(&(shape.len() as u64).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in slot.value.data() {
                w.write_all(&x.to_bits().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a diffrank checkpoint".into()));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let count = read_u64(r)? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let len = read_u64(r)? as usize;
            let mut name = vec![0u8; len];
            r.read_exact(&mut name)?;
            let name =
                String::from_utf8(name).map_err(|e| Error::Format(format!("bad name: {e}")))?;
            let rank = read_u64(r)? as usize;
            let shape = (0..rank)
                .map(|_| read_u64(r).map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 8];
            r.read_exact(&mut bytes)?;
            let data = bytes
                .chunks_exact(8)
                .map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap())))
                .collect();
            store.add(&name, Tensor::new(shape, data)?)?;
        }
        Ok(store)
    }

    /// Copies values from `other` for every name present in both stores.
    pub fn load_values_from(&mut self, other: &ParamStore) -> Result<()> {
        for slot in &mut self.slots {
            let src = other
                .by_name(&slot.name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks {}", slot.name)))?;
            if src.shape() != slot.value.shape() {
                return Err(Error::Format(format!(
                    "checkpoint {} has shape {:?}, model expects {:?}",
                    slot.name,
                    src.shape(),
                    slot.value.shape()
                )));
            }
            slot.value = src.clone();
        }
        Ok(())
    }
}

const CHECKPOINT_MAGIC: &[u8; 8] = b"DRNKCKPT";
const CHECKPOINT_VERSION: u32 = 1;

fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
