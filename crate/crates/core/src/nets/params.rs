use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ArchConfig, Domain};
use crate::tensor::{Graph, Tensor, Var};

/// Named parameter tensors in a fixed insertion order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.tensors[i] = t;
            return;
        }
        self.index.insert(name.clone(), self.names.len());
        self.names.push(name);
        self.tensors.push(t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.tensors[i])
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.names.iter().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensor_at(&self, i: usize) -> &Tensor {
        &self.tensors[i]
    }

    pub fn tensor_at_mut(&mut self, i: usize) -> &mut Tensor {
        &mut self.tensors[i]
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn bind(&self, g: &mut Graph, trainable: impl Fn(&str) -> bool) -> Binding {
        let vars = self
            .names
            .iter()
            .zip(&self.tensors)
            .map(|(n, t)| {
                Some(if trainable(n) {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                })
            })
            .collect();
        Binding { vars }
    }

    /// Binds the parameters selected by `select` into an existing binding.
    pub fn bind_into(&self, g: &mut Graph, b: &mut Binding, select: impl Fn(&str) -> bool, trainable: bool) {
        for (i, (n, t)) in self.iter().enumerate() {
            if select(n) {
                b.vars[i] = Some(if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                });
            }
        }
    }
}

/// Graph handles for the parameters of a [`ParamStore`], aligned with its order.
#[derive(Debug, Clone)]
pub struct Binding {
    vars: Vec<Option<Var>>,
}

impl Binding {
    pub fn empty(store: &ParamStore) -> Self {
        Self {
            vars: vec![None; store.len()],
        }
    }

    pub fn set(&mut self, i: usize, v: Var) {
        self.vars[i] = Some(v);
    }

    pub fn get(&self, i: usize) -> Option<Var> {
        self.vars[i]
    }

    /// Handle of a named parameter. Panics when the name is unknown or
    /// unbound, which is a programming error.
    pub fn var(&self, store: &ParamStore, name: &str) -> Var {
        let i = store
            .position(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        self.vars[i].unwrap_or_else(|| panic!("parameter {name} is not bound"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum InitScheme {
    /// Weights from `N(0, std^2)`, biases zero.
    Normal { std: f64 },
    /// Everything zero (test hook).
    Zeros,
}

fn param_shapes(a: &ArchConfig) -> Vec<(String, Vec<usize>)> {
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    let mut add = |name: String, shape: Vec<usize>| out.push((name, shape));
    let (cc, b, dim) = (a.code_channels, a.base_filters, a.code_dim);
    for d in [Domain::X, Domain::Y] {
        let e = format!("enc_{}", d.tag());
        let ch = a.channels(d);
        add(format!("{e}.stem1.w"), vec![b, ch, 3, 3]);
        add(format!("{e}.stem1.b"), vec![b]);
        add(format!("{e}.stem2.w"), vec![cc, b, 3, 3]);
        add(format!("{e}.stem2.b"), vec![cc]);
        for i in 0..a.encoder_res_blocks {
            add(format!("{e}.res{i}.conv1.w"), vec![cc, cc, 3, 3]);
            add(format!("{e}.res{i}.conv2.w"), vec![cc, cc, 3, 3]);
        }
        for i in 0..a.specific_downsamples {
            add(format!("{e}.spec{i}.w"), vec![cc, cc, 3, 3]);
            add(format!("{e}.spec{i}.b"), vec![cc]);
        }
        add(format!("{e}.mu.w"), vec![cc, dim]);
        add(format!("{e}.mu.b"), vec![dim]);
        add(format!("{e}.logvar.w"), vec![cc, dim]);
        add(format!("{e}.logvar.b"), vec![dim]);
    }
    for d in [Domain::X, Domain::Y] {
        let p = format!("gen_{}", d.tag());
        add(format!("{p}.in.w"), vec![cc, cc + dim, 3, 3]);
        add(format!("{p}.in.b"), vec![cc]);
        for i in 0..a.generator_res_blocks {
            add(format!("{p}.res{i}.conv1.w"), vec![cc, cc, 3, 3]);
            add(format!("{p}.res{i}.conv2.w"), vec![cc, cc, 3, 3]);
        }
        add(format!("{p}.up1.w"), vec![cc, b, 4, 4]);
        add(format!("{p}.up1.b"), vec![b]);
        add(format!("{p}.up2.w"), vec![b, a.channels(d), 4, 4]);
        add(format!("{p}.up2.b"), vec![a.channels(d)]);
    }
    for d in [Domain::X, Domain::Y] {
        let p = format!("dis_{}", d.tag());
        let mut prev = a.channels(d);
        for i in 0..a.disc_downsamples {
            let f = a.disc_base_filters << i;
            add(format!("{p}.c{i}.w"), vec![f, prev, 3, 3]);
            if i == 0 {
                add(format!("{p}.c{i}.b"), vec![f]);
            }
            prev = f;
        }
        add(format!("{p}.out.w"), vec![1, prev, 3, 3]);
        add(format!("{p}.out.b"), vec![1]);
    }
    out
}

pub(super) fn init_params(arch: &ArchConfig, seed: u64, init: InitScheme) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::default();
    for (name, shape) in param_shapes(arch) {
        let mut t = Tensor::zeros(&shape);
        if let InitScheme::Normal { std } = init {
            if shape.len() > 1 {
                let normal = Normal::new(0.0, std).expect("finite std");
                for v in t.data_mut() {
                    *v = normal.sample(&mut rng);
                }
            }
        }
        store.insert(name, t);
    }
    store
}
