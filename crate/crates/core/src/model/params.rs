use crate::generators::RngStream;
use crate::scalar::Scalar;

/// Index of a trainable array in a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamMeta {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamMeta {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Initial values for a new array.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Uniform(f64),
    Const(f64),
}

/// Flat collection of trainable arrays with one gradient buffer each.
/// Values and gradients live in separate vectors so that a backward pass can
/// read weights while writing gradients.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    meta: Vec<ParamMeta>,
    pub values: Vec<Vec<T>>,
    pub grads: Vec<Vec<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            meta: Vec::new(),
            values: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        init: Init,
        rng: &mut RngStream,
    ) -> ParamId {
        let n: usize = shape.iter().product();
        let values = match init {
            Init::Const(c) => vec![T::lit(c); n],
            Init::Uniform(bound) => (0..n)
                .map(|_| T::lit((2.0 * rng.unit() - 1.0) * bound))
                .collect(),
        };
        self.meta.push(ParamMeta {
            name: name.into(),
            shape: shape.to_vec(),
        });
        self.values.push(values);
        self.grads.push(vec![T::zero(); n]);
        ParamId(self.meta.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn meta(&self, id: ParamId) -> &ParamMeta {
        &self.meta[id.0]
    }

    pub fn metas(&self) -> &[ParamMeta] {
        &self.meta
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.meta.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.meta.iter().position(|m| m.name == name).map(ParamId)
    }

    pub fn value(&self, id: ParamId) -> &[T] {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [T] {
        &mut self.values[id.0]
    }

    pub fn grad(&self, id: ParamId) -> &[T] {
        &self.grads[id.0]
    }

    /// Total number of trainable scalars.
    pub fn num_elements(&self) -> usize {
        self.meta.iter().map(ParamMeta::numel).sum()
    }

    pub fn zero_grads(&mut self) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x = T::zero());
        }
    }

    /// Global L2 norm of all gradients, accumulated in `f64`.
    pub fn grad_norm(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.iter())
            .map(|x| {
                let v = x.to_f64().unwrap_or(f64::NAN);
                v * v
            })
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale_grads(&mut self, s: T) {
        for g in &mut self.grads {
            g.iter_mut().for_each(|x| *x *= s);
        }
    }

    /// Order-sensitive digest of every value, used to detect mutation.
    pub fn checksum(&self) -> u64 {
        let mut h = crc32fast::Hasher::new();
        let mut buf = Vec::new();
        for v in &self.values {
            buf.clear();
            for x in v {
                x.write_le(&mut buf);
            }
            h.update(&buf);
        }
        u64::from(h.finalize()) ^ ((self.num_elements() as u64) << 32)
    }
}
