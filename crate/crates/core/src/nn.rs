//! Parameter storage, the two layer types every network here is built from,
//! and the Adam optimizer.

use crate::autograd::{Gradients, Tensor, Var};
use crate::rng::Rng;
use ndarray::IxDyn;
use rand::Rng as _;
use serde::{Deserialize, Serialize};
use std::ops::Index;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

/// Named, ordered parameter tensors of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.names.contains(&name), "duplicate parameter {name}");
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [Tensor] {
        &mut self.values
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    /// Graph leaves for one forward pass. Frozen stores yield constants.
    pub fn leaves(&self, trainable: bool) -> Leaves {
        Leaves(self.values.iter().map(|v| Var::leaf(v.clone(), trainable)).collect())
    }

    /// Replace all values, checking names and shapes.
    pub fn load(&mut self, named: &[(String, Tensor)]) -> crate::Result<()> {
        if named.len() != self.values.len() {
            return Err(crate::Error::Load(format!(
                "expected {} tensors, found {}",
                self.values.len(),
                named.len()
            )));
        }
        for (i, (name, t)) in named.iter().enumerate() {
            if *name != self.names[i] || t.shape() != self.values[i].shape() {
                return Err(crate::Error::Load(format!(
                    "tensor {i}: expected {} {:?}, found {name} {:?}",
                    self.names[i],
                    self.values[i].shape(),
                    t.shape()
                )));
            }
        }
        for (i, (_, t)) in named.iter().enumerate() {
            self.values[i] = t.clone();
        }
        Ok(())
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.names.iter().cloned().zip(self.values.iter().cloned()).collect()
    }
}

pub struct Leaves(Vec<Var>);

impl Leaves {
    pub fn vars(&self) -> &[Var] {
        &self.0
    }

    /// Gradient tensors in parameter order.
    pub fn grads(&self, g: &Gradients) -> Vec<Tensor> {
        self.0.iter().map(|v| g.wrt(v)).collect()
    }
}

impl Index<ParamId> for Leaves {
    type Output = Var;
    fn index(&self, id: ParamId) -> &Var {
        &self.0[id.0]
    }
}

fn uniform(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::from_shape_vec(IxDyn(shape), (0..n).map(|_| rng.random_range(-bound..=bound)).collect())
        .expect("shape")
}

/// He-style uniform bound for leaky-relu fan-in.
fn he_bound(fan_in: usize) -> f64 {
    (6.0 / fan_in as f64).sqrt()
}

/// 2-D convolution with square kernel, stride 1 and "same" padding.
#[derive(Clone, Debug)]
pub struct Conv2d {
    w: ParamId,
    b: ParamId,
    pad: usize,
    pub cin: usize,
    pub cout: usize,
}

impl Conv2d {
    pub fn new(store: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, rng: &mut Rng) -> Self {
        Self::with_gain(store, name, cin, cout, k, 1.0, rng)
    }

    /// `gain` scales the init bound; heads that should start near zero use a small gain.
    pub fn with_gain(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        gain: f64,
        rng: &mut Rng,
    ) -> Self {
        assert!(k % 2 == 1, "odd kernels only");
        let w = store.add(format!("{name}.weight"), uniform(&[cout, cin, k, k], gain * he_bound(cin * k * k), rng));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(IxDyn(&[1, cout, 1, 1])));
        Conv2d { w, b, pad: k / 2, cin, cout }
    }

    pub fn forward(&self, p: &Leaves, x: &Var) -> Var {
        x.conv2d(&p[self.w], self.pad).add(&p[self.b])
    }

    pub fn weight(&self) -> ParamId {
        self.w
    }

    pub fn bias(&self) -> ParamId {
        self.b
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    w: ParamId,
    b: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, din: usize, dout: usize, rng: &mut Rng) -> Self {
        let w = store.add(format!("{name}.weight"), uniform(&[din, dout], he_bound(din), rng));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(IxDyn(&[1, dout])));
        Linear { w, b }
    }

    /// `[N, din] -> [N, dout]`
    pub fn forward(&self, p: &Leaves, x: &Var) -> Var {
        x.matmul(&p[self.w]).add(&p[self.b])
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        AdamConfig { lr, beta1, beta2, eps: 1e-8 }
    }
}

/// Adam with bias correction; state is kept per parameter tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    pub t: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.values().iter().map(|v| Tensor::zeros(v.raw_dim())).collect();
        Adam { cfg, t: 0, m: zeros.clone(), v: zeros }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        assert_eq!(grads.len(), store.len(), "one gradient per parameter tensor");
        self.t += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (((p, g), m), v) in store
            .values_mut()
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut())
            .zip(self.v.iter_mut())
        {
            ndarray::Zip::from(p).and(g).and(m).and(v).for_each(|p, &g, m, v| {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let mhat = *m / bc1;
                let vhat = *v / bc2;
                *p -= lr * mhat / (vhat.sqrt() + eps);
            });
        }
    }

    /// Optimizer state as named tensors for checkpointing.
    pub fn state(&self, prefix: &str) -> Vec<(String, Tensor)> {
        let mut out = vec![(format!("{prefix}.t"), ndarray::arr1(&[self.t as f64]).into_dyn())];
        for (i, (m, v)) in self.m.iter().zip(&self.v).enumerate() {
            out.push((format!("{prefix}.m{i}"), m.clone()));
            out.push((format!("{prefix}.v{i}"), v.clone()));
        }
        out
    }

    pub fn load_state(&mut self, prefix: &str, named: &[(String, Tensor)]) -> crate::Result<()> {
        let find = |n: String| {
            named
                .iter()
                .find(|(k, _)| *k == n)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| crate::Error::Load(format!("missing optimizer tensor {n}")))
        };
        self.t = find(format!("{prefix}.t"))?[[0]] as u64;
        for i in 0..self.m.len() {
            let m = find(format!("{prefix}.m{i}"))?;
            let v = find(format!("{prefix}.v{i}"))?;
            if m.shape() != self.m[i].shape() || v.shape() != self.v[i].shape() {
                return Err(crate::Error::Load(format!("optimizer tensor {prefix}.{i} has wrong shape")));
            }
            self.m[i] = m;
            self.v[i] = v;
        }
        Ok(())
    }
}

/// True if every gradient entry is finite.
pub fn all_finite(grads: &[Tensor]) -> bool {
    grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
}
