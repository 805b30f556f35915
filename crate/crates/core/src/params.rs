//! Named parameter storage and the layer shapes built on it.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Index of a parameter within a [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Ordered, uniquely named collection of model parameters.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.params.iter().any(|p| p.name == name) {
            return Err(Error::contract(format!("duplicate parameter name '{name}'")));
        }
        self.params.push(Param { name, value });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn total_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Puts every parameter on the graph; `trainable` decides which ones
    /// receive gradients.
    pub fn bind(&self, graph: &mut Graph<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| graph.leaf(p.value.clone(), trainable(&p.name)))
            .collect();
        Bound { vars }
    }

    /// FNV-1a over names, shapes, and value bits of the selected parameters.
    pub fn fingerprint(&self, select: impl Fn(&str) -> bool) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(0x0100_0000_01b3);
            }
        };
        let mut buf = Vec::new();
        for p in self.params.iter().filter(|p| select(&p.name)) {
            feed(p.name.as_bytes());
            for &d in p.value.shape() {
                feed(&(d as u64).to_le_bytes());
            }
            buf.clear();
            p.value.data().iter().for_each(|v| v.write_le(&mut buf));
            feed(&buf);
        }
        h
    }

    pub fn zero_all(&mut self) {
        for p in &mut self.params {
            p.value.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}

/// Graph handles for a [`ParamStore`] bound to one graph.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    /// Wraps graph vars that stand in for a store's parameters, in store order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Bound { vars }
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }
}

/// He-style uniform init: `U(-b, b)` with `b = sqrt(6 / fan_in)`.
pub fn he_uniform<T: Real>(shape: &[usize], fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| T::of(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("numel matches shape")
}

#[derive(Debug, Clone, Copy)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.insert(
            format!("{name}.weight"),
            he_uniform(&[out_channels, in_channels, kernel, kernel], fan_in, rng),
        )?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros([out_channels]))?;
        Ok(Conv2d {
            weight,
            bias,
            stride,
            padding,
        })
    }

    pub fn pointwise<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Self::new(store, name, in_channels, out_channels, 1, 1, 0, rng)
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.conv2d(x, p.var(self.weight), p.var(self.bias), self.stride, self.padding)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_features: usize,
        out_features: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let weight = store.insert(
            format!("{name}.weight"),
            he_uniform(&[out_features, in_features], in_features, rng),
        )?;
        let bias = store.insert(format!("{name}.bias"), Tensor::zeros([out_features]))?;
        Ok(Linear { weight, bias })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        g.linear(x, p.var(self.weight), p.var(self.bias))
    }
}

/// Two pointwise convolutions with a ReLU between them, `C -> C/r -> C_out`.
#[derive(Debug, Clone, Copy)]
pub struct Bottleneck {
    pub reduce: Conv2d,
    pub restore: Conv2d,
}

impl Bottleneck {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        in_channels: usize,
        hidden: usize,
        out_channels: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Ok(Bottleneck {
            reduce: Conv2d::pointwise(store, &format!("{name}.reduce"), in_channels, hidden, rng)?,
            restore: Conv2d::pointwise(store, &format!("{name}.restore"), hidden, out_channels, rng)?,
        })
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, p: &Bound, x: Var) -> Result<Var> {
        let h = self.reduce.forward(g, p, x)?;
        let h = g.relu(h);
        self.restore.forward(g, p, h)
    }

    /// Zeroes the restoring layer so the bottleneck outputs exactly zero.
    pub fn zero_output<T: Real>(&self, store: &mut ParamStore<T>) {
        for id in [self.restore.weight, self.restore.bias] {
            store.value_mut(id).data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }
}
