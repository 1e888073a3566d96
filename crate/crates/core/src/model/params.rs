use std::collections::HashMap;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::{Real, Tape, Tensor, Var};

/// Which training stage owns a parameter.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    /// Pretrained teacher weights.
    Base,
    /// Feature maps, gates and mixing scalars added for linearization.
    Approx,
    Lora,
}

impl ParamGroup {
    pub fn of(name: &str) -> Self {
        let leaf = name.rsplit('.').next().unwrap_or(name);
        if name.contains(".lora_") {
            ParamGroup::Lora
        } else if leaf == "fq" || leaf == "fk" || leaf == "alpha" || name.contains(".gate.") {
            ParamGroup::Approx
        } else {
            ParamGroup::Base
        }
    }
}

/// Named tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        let name = name.into();
        match self.index.get(&name) {
            Some(&i) => self.entries[i].1 = t,
            None => {
                self.index.insert(name.clone(), self.entries.len());
                self.entries.push((name, t));
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.entries[i].1)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::ConfigMismatch(format!("missing parameter `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn names(&self) -> Vec<String> {
        self.entries.iter().map(|(n, _)| n.clone()).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn remove_where(&mut self, pred: impl Fn(&str) -> bool) {
        self.entries.retain(|(n, _)| !pred(n));
        self.index = self
            .entries
            .iter()
            .enumerate()
            .map(|(i, (n, _))| (n.clone(), i))
            .collect();
    }

    pub fn float_count(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// SHA-256 over names, shapes and raw little-endian values of the
    /// selected parameters.
    pub fn hash_where(&self, pred: impl Fn(&str) -> bool) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.entries.iter().filter(|(n, _)| pred(n)) {
            h.update(name.as_bytes());
            for &d in t.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn group_hash(&self, group: ParamGroup) -> String {
        self.hash_where(|n| ParamGroup::of(n) == group)
    }

    /// Places every parameter on `tape`, as a trainable leaf when
    /// `trainable(name)` holds and as a constant otherwise.
    pub fn bind<T: Real>(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let mut vars = HashMap::with_capacity(self.entries.len());
        let mut order = Vec::new();
        for (name, t) in &self.entries {
            let value = t.convert::<T>();
            let v = if trainable(name) {
                order.push((name.clone(), tape.param(value)));
                order.last().unwrap().1
            } else {
                tape.constant(value)
            };
            vars.insert(name.clone(), v);
        }
        Bound {
            vars,
            trainable: order,
        }
    }
}

/// Parameters placed on a tape.
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: HashMap<String, Var>,
    trainable: Vec<(String, Var)>,
}

impl Bound {
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>, trainable: bool) -> Self {
        let vars: HashMap<String, Var> = vars.into_iter().collect();
        let mut t: Vec<(String, Var)> = if trainable {
            vars.iter().map(|(n, v)| (n.clone(), *v)).collect()
        } else {
            Vec::new()
        };
        t.sort_by(|a, b| a.0.cmp(&b.0));
        Self { vars, trainable: t }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::ConfigMismatch(format!("missing parameter `{name}`")))
    }

    pub fn opt(&self, name: &str) -> Option<Var> {
        self.vars.get(name).copied()
    }

    pub fn has(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    /// Trainable parameters in binding order.
    pub fn trainable(&self) -> &[(String, Var)] {
        &self.trainable
    }
}
