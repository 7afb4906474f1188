//! Named parameter storage, initialization and binding onto a tape.

use std::collections::HashMap;
use std::ops::Index;

use tokenmotion_tensor::{Rng, Tape, Tensor, Var};

use crate::error::{CoreError, Result};

/// Which part of the model a parameter belongs to. Control fine-tuning
/// trains `Encoder` and `Fusion` only.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Role {
    Backbone,
    Encoder,
    Fusion,
}

impl Role {
    pub fn as_str(&self) -> &'static str {
        match self {
            Role::Backbone => "backbone",
            Role::Encoder => "encoder",
            Role::Fusion => "fusion",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "backbone" => Some(Role::Backbone),
            "encoder" => Some(Role::Encoder),
            "fusion" => Some(Role::Fusion),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub role: Role,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, role: Role) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, role });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params
            .iter_mut()
            .enumerate()
            .map(|(i, p)| (ParamId(i), p))
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(CoreError::Checkpoint(format!(
                "parameter {} has shape {:?}, got {:?}",
                p.name,
                p.value.shape(),
                value.shape()
            )));
        }
        p.value = value;
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn count_role(&self, role: Role) -> usize {
        self.params
            .iter()
            .filter(|p| p.role == role)
            .map(|p| p.value.numel())
            .sum()
    }

    /// Order-sensitive checksum over every parameter with the given role.
    pub fn checksum_role(&self, role: Role) -> u64 {
        self.params
            .iter()
            .filter(|p| p.role == role)
            .fold(0u64, |h, p| {
                h.rotate_left(7) ^ p.value.checksum() ^ tokenmotion_tensor::rng::splitmix64(h)
            })
    }

    pub fn checksum(&self) -> u64 {
        self.params.iter().fold(0u64, |h, p| {
            h.rotate_left(7) ^ p.value.checksum() ^ tokenmotion_tensor::rng::splitmix64(h)
        })
    }

    /// Places every parameter on `tape`; those for which `trainable` holds
    /// become gradient leaves, the rest constants.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: impl Fn(Role) -> bool) -> Bound<'t> {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable(p.role) {
                    tape.param(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    pub fn bind_frozen<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        self.bind(tape, |_| false)
    }
}

/// Parameters placed on one tape, indexed by [`ParamId`].
pub struct Bound<'t> {
    vars: Vec<Var<'t>>,
}

impl<'t> Index<ParamId> for Bound<'t> {
    type Output = Var<'t>;

    fn index(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }
}

impl<'t> Bound<'t> {
    /// Wraps variables already on a tape, in store order.
    pub fn from_vars(vars: Vec<Var<'t>>) -> Self {
        Self { vars }
    }

    pub fn vars(&self) -> &[Var<'t>] {
        &self.vars
    }
}

/// Seeded initializer. Each parameter draws from its own stream keyed by name.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub seed: u64,
    pub role: Role,
    pub prefix: String,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64, role: Role, prefix: &str) -> Self {
        Self {
            store,
            seed,
            role,
            prefix: prefix.to_string(),
        }
    }

    pub fn scoped(&mut self, prefix: &str) -> Init<'_> {
        Init {
            store: self.store,
            seed: self.seed,
            role: self.role,
            prefix: format!("{}{}.", self.prefix, prefix),
        }
    }

    fn full_name(&self, name: &str) -> String {
        format!("{}{}", self.prefix, name)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let n = self.full_name(name);
        self.store.add(n, Tensor::zeros(shape), self.role)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], std: f64) -> ParamId {
        let n = self.full_name(name);
        let value = Rng::stream(self.seed, &n).normal_tensor(shape, std);
        self.store.add(n, value, self.role)
    }

    /// Weight of a `fan_in x fan_out` linear map, Xavier-uniform.
    pub fn linear(&mut self, name: &str, fan_in: usize, fan_out: usize) -> ParamId {
        let n = self.full_name(name);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let value = Rng::stream(self.seed, &n).uniform_tensor(&[fan_in, fan_out], bound);
        self.store.add(n, value, self.role)
    }

    /// Convolution kernel with He-uniform scaling on `fan_in`.
    pub fn kernel(&mut self, name: &str, shape: &[usize]) -> ParamId {
        let n = self.full_name(name);
        let fan_in: usize = shape[1..].iter().product();
        let bound = (3.0 / fan_in as f64).sqrt();
        let value = Rng::stream(self.seed, &n).uniform_tensor(shape, bound);
        self.store.add(n, value, self.role)
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> ParamId {
        let n = self.full_name(name);
        self.store.add(n, value, self.role)
    }
}

/// `rows x cols` matrix with orthonormal columns (`rows >= cols`) or
/// orthonormal rows (`rows < cols`), from Gram-Schmidt on a Gaussian draw.
pub fn orthogonal(rows: usize, cols: usize, rng: &mut Rng) -> Tensor {
    let (n, m) = if rows >= cols {
        (rows, cols)
    } else {
        (cols, rows)
    };
    // m vectors of length n
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(m);
    while basis.len() < m {
        let mut v: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        for _ in 0..2 {
            for b in &basis {
                let dot: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= dot * y;
                }
            }
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|x| *x /= norm);
            basis.push(v);
        }
    }
    if rows >= cols {
        Tensor::from_fn(&[rows, cols], |i| basis[i % cols][i / cols])
    } else {
        Tensor::from_fn(&[rows, cols], |i| basis[i / cols][i % cols])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orthogonal_has_orthonormal_short_side() {
        let mut rng = Rng::new(3);
        for (r, c) in [(6, 4), (4, 6), (5, 5)] {
            let q = orthogonal(r, c, &mut rng);
            let (k, n) = (r.min(c), r.max(c));
            for a in 0..k {
                for b in 0..k {
                    let dot: f64 = (0..n)
                        .map(|i| {
                            if r >= c {
                                q.data()[i * c + a] * q.data()[i * c + b]
                            } else {
                                q.data()[a * c + i] * q.data()[b * c + i]
                            }
                        })
                        .sum();
                    let want = if a == b { 1.0 } else { 0.0 };
                    assert!((dot - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn init_streams_depend_only_on_name() {
        let mut s1 = ParamStore::new();
        let mut s2 = ParamStore::new();
        let a1 = Init::new(&mut s1, 5, Role::Backbone, "m.").normal("w", &[3], 1.0);
        let mut i2 = Init::new(&mut s2, 5, Role::Backbone, "m.");
        i2.normal("other", &[7], 1.0);
        let a2 = i2.normal("w", &[3], 1.0);
        assert_eq!(s1.get(a1), s2.get(a2));
    }
}
