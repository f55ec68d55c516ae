//! Named parameter storage and the layer helpers networks are built from.
//!
//! Networks never own their weights. A forward function asks a
//! [`ParamSource`] for each tensor by its stable dotted name
//! (`G.enc.0.conv.w`); the source either binds an existing tensor into the
//! graph or, during initialisation, creates it.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor<T>) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast()))
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(Tensor::is_finite)
    }

    /// 64-bit FNV-1a over names, shapes and the exact bit patterns of every
    /// element. Equal checksums mean bit-identical stores in practice.
    pub fn checksum(&self) -> u64 {
        const PRIME: u64 = 0x100_0000_01b3;
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bytes: &[u8]| {
            for &b in bytes {
                h ^= b as u64;
                h = h.wrapping_mul(PRIME);
            }
        };
        for (name, t) in &self.tensors {
            eat(name.as_bytes());
            for &d in t.shape() {
                eat(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                eat(&v.to_f64().unwrap_or(f64::NAN).to_bits().to_le_bytes());
            }
        }
        h
    }

    /// Same names and shapes as `other`.
    pub fn check_layout(&self, other: &Self) -> Result<()> {
        for (name, t) in &other.tensors {
            match self.tensors.get(name) {
                None => return Err(Error::Param(format!("{name} is missing"))),
                Some(mine) if mine.shape() != t.shape() => {
                    return Err(Error::Param(format!(
                        "{name} has shape {:?}, expected {:?}",
                        mine.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        if let Some(extra) = self.tensors.keys().find(|k| !other.tensors.contains_key(*k)) {
            return Err(Error::Param(format!("{extra} is not part of the network")));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub enum Init {
    /// Uniform in `±sqrt(6 / fan_in)`.
    HeUniform { fan_in: usize },
    Zeros,
    Ones,
}

pub trait ParamSource<T: Scalar> {
    fn param(&mut self, g: &mut Graph<T>, name: &str, shape: &[usize], init: Init) -> Var;
}

/// Binds tensors of an existing store into a graph, once per name.
pub struct Binder<'a, T> {
    store: &'a ParamStore<T>,
    vars: BTreeMap<String, Var>,
    trainable: bool,
}

impl<'a, T: Scalar> Binder<'a, T> {
    /// Parameters that receive gradients.
    pub fn trainable(store: &'a ParamStore<T>) -> Self {
        Self {
            store,
            vars: BTreeMap::new(),
            trainable: true,
        }
    }

    /// Parameters treated as constants.
    pub fn frozen(store: &'a ParamStore<T>) -> Self {
        Self {
            store,
            vars: BTreeMap::new(),
            trainable: false,
        }
    }

    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients of every bound parameter that was reached by `backward`.
    pub fn collect(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.vars
            .iter()
            .filter_map(|(k, v)| grads.get(*v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

impl<T: Scalar> ParamSource<T> for Binder<'_, T> {
    fn param(&mut self, g: &mut Graph<T>, name: &str, shape: &[usize], _init: Init) -> Var {
        if let Some(v) = self.vars.get(name) {
            return *v;
        }
        let t = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name} missing from store"));
        assert_eq!(t.shape(), shape, "parameter {name} shape");
        let v = if self.trainable {
            g.param(t.clone())
        } else {
            g.constant(t.clone())
        };
        self.vars.insert(name.to_string(), v);
        v
    }
}

/// Creates missing parameters from their declared initialiser.
pub struct Initializer<'a, T, R> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
}

impl<'a, T: Scalar, R: Rng> Initializer<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        Self { store, rng }
    }
}

impl<T: Scalar, R: Rng> ParamSource<T> for Initializer<'_, T, R> {
    fn param(&mut self, g: &mut Graph<T>, name: &str, shape: &[usize], init: Init) -> Var {
        if self.store.get(name).is_none() {
            let n: usize = shape.iter().product();
            let data: Vec<T> = match init {
                Init::Zeros => alloc::vec![T::zero(); n],
                Init::Ones => alloc::vec![T::one(); n],
                Init::HeUniform { fan_in } => {
                    let bound = num_traits::Float::sqrt(6.0 / fan_in.max(1) as f64);
                    (0..n)
                        .map(|_| T::lit(self.rng.gen_range(-bound..bound)))
                        .collect()
                }
            };
            self.store.insert(name, Tensor::new(shape, data));
        }
        let t = self.store.get(name).unwrap();
        assert_eq!(t.shape(), shape, "parameter {name} declared twice with different shapes");
        g.constant(t.clone())
    }
}

pub const LRELU_SLOPE: f64 = 0.2;
pub const NORM_EPS: f64 = 1e-5;

/// Convolution with weight `{name}.w` and bias `{name}.b`.
#[allow(clippy::too_many_arguments)]
pub fn conv<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut impl ParamSource<T>,
    name: &str,
    x: Var,
    out_ch: usize,
    k: usize,
    stride: usize,
    pad: usize,
) -> Var {
    let in_ch = g.shape(x)[1];
    let fan_in = in_ch * k * k;
    let w = p.param(g, &format!("{name}.w"), &[out_ch, in_ch, k, k], Init::HeUniform { fan_in });
    let b = p.param(g, &format!("{name}.b"), &[out_ch], Init::Zeros);
    g.conv2d(x, w, Some(b), stride, pad)
}

/// 3x3 "same" convolution.
pub fn conv3<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut impl ParamSource<T>,
    name: &str,
    x: Var,
    out_ch: usize,
) -> Var {
    conv(g, p, name, x, out_ch, 3, 1, 1)
}

pub fn linear<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut impl ParamSource<T>,
    name: &str,
    x: Var,
    out: usize,
) -> Var {
    let din = g.shape(x)[1];
    let w = p.param(g, &format!("{name}.w"), &[out, din], Init::HeUniform { fan_in: din });
    let b = p.param(g, &format!("{name}.b"), &[out], Init::Zeros);
    g.linear(x, w, Some(b))
}

/// Instance normalisation with a learned per-channel scale and shift.
pub fn instance_norm_affine<T: Scalar>(
    g: &mut Graph<T>,
    p: &mut impl ParamSource<T>,
    name: &str,
    x: Var,
) -> Var {
    let c = g.shape(x)[1];
    let w = p.param(g, &format!("{name}.w"), &[1, c], Init::Ones);
    let b = p.param(g, &format!("{name}.b"), &[1, c], Init::Zeros);
    let y = g.instance_norm(x, NORM_EPS);
    g.channel_affine(y, w, b)
}

pub fn lrelu<T: Scalar>(g: &mut Graph<T>, x: Var) -> Var {
    g.leaky_relu(x, LRELU_SLOPE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn initializer_then_binder_share_layout() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        {
            let mut init = Initializer::new(&mut store, &mut rng);
            conv3(&mut g, &mut init, "net.c", x, 5);
        }
        assert_eq!(store.get("net.c.w").unwrap().shape(), &[5, 3, 3, 3]);
        let bound = num_traits::Float::sqrt(6.0f64 / 27.0) as f32;
        assert!(store.get("net.c.w").unwrap().data().iter().all(|v| v.abs() <= bound));
        assert!(store.get("net.c.b").unwrap().data().iter().all(|&v| v == 0.0));

        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        let mut bind = Binder::trainable(&store);
        let y = conv3(&mut g, &mut bind, "net.c", x, 5);
        let y2 = conv3(&mut g, &mut bind, "net.c", x, 5);
        assert_eq!(bind.bound().count(), 2, "reused names bind once");
        assert_eq!(g.value(y), g.value(y2));
    }

    #[test]
    fn checksum_tracks_bits() {
        let mut a = ParamStore::<f32>::new();
        a.insert("x", Tensor::new(&[2], alloc::vec![1.0, 2.0]));
        let b = a.clone();
        assert_eq!(a.checksum(), b.checksum());
        a.get_mut("x").unwrap().data_mut()[0] = f32::from_bits(1.0f32.to_bits() + 1);
        assert_ne!(a.checksum(), b.checksum());
    }

    #[test]
    fn layout_check_reports_missing_and_extra() {
        let mut a = ParamStore::<f32>::new();
        a.insert("x", Tensor::zeros(&[2]));
        let mut b = a.clone();
        b.insert("y", Tensor::zeros(&[1]));
        assert!(a.check_layout(&b).is_err());
        assert!(b.check_layout(&a).is_err());
        assert!(a.check_layout(&a.clone()).is_ok());
    }
}
