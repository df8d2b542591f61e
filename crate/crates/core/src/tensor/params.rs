use std::collections::{BTreeMap, HashMap};

use super::{Scalar, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// A named tensor owned by a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Param<F> {
    pub name: String,
    pub value: Tensor<F>,
    /// Buffers (batch-norm running statistics) are stored but never bound as
    /// differentiable leaves.
    pub is_buffer: bool,
    /// Frozen parameters are bound without gradient tracking.
    pub frozen: bool,
}

/// Ordered collection of named parameters and buffers.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F = f32> {
    entries: Vec<Param<F>>,
    index: HashMap<String, usize>,
}

/// Gradients keyed by parameter name.
pub type Gradients<F> = BTreeMap<String, Tensor<F>>;

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    fn insert(&mut self, name: &str, value: Tensor<F>, is_buffer: bool) {
        match self.index.get(name) {
            Some(&i) => {
                self.entries[i].value = value;
                self.entries[i].is_buffer = is_buffer;
            }
            None => {
                self.index.insert(name.to_string(), self.entries.len());
                self.entries.push(Param {
                    name: name.to_string(),
                    value,
                    is_buffer,
                    frozen: false,
                });
            }
        }
    }

    pub fn insert_param(&mut self, name: &str, value: Tensor<F>) {
        self.insert(name, value, false);
    }

    pub fn insert_buffer(&mut self, name: &str, value: Tensor<F>) {
        self.insert(name, value, true);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<F>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<F>> {
        self.entries.iter_mut()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Tensor<F>> {
        self.index
            .get(name)
            .map(|&i| &self.entries[i].value)
            .ok_or_else(|| Error::Integrity(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor<F>> {
        match self.index.get(name) {
            Some(&i) => Ok(&mut self.entries[i].value),
            None => Err(Error::Integrity(format!("missing parameter `{name}`"))),
        }
    }

    /// Marks every non-buffer entry whose name starts with `prefix` as frozen
    /// (or unfrozen).
    pub fn set_frozen(&mut self, prefix: &str, frozen: bool) {
        for p in self.entries.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.frozen = frozen;
        }
    }

    /// Trainable (non-buffer, non-frozen) entries.
    pub fn trainable(&self) -> impl Iterator<Item = &Param<F>> {
        self.entries.iter().filter(|p| !p.is_buffer && !p.frozen)
    }

    /// Total element count over non-buffer entries.
    pub fn num_parameters(&self) -> usize {
        self.entries
            .iter()
            .filter(|p| !p.is_buffer)
            .map(|p| p.value.len())
            .sum()
    }

    /// Places every non-buffer entry on `tape` as a leaf. Gradients are
    /// tracked when `track` is set and the entry is not frozen.
    pub fn bind<'t>(&self, tape: &'t Tape<F>, track: bool) -> Binding<'t, F> {
        let vars = self
            .entries
            .iter()
            .filter(|p| !p.is_buffer)
            .map(|p| {
                let v = tape.leaf(p.value.clone(), track && !p.frozen);
                (p.name.clone(), v)
            })
            .collect();
        Binding { vars }
    }

    /// A copy with every entry name prefixed.
    pub fn prefixed(&self, prefix: &str) -> ParamStore<F> {
        let mut out = ParamStore::new();
        for p in &self.entries {
            out.insert(&format!("{prefix}{}", p.name), p.value.clone(), p.is_buffer);
        }
        out
    }

    /// Entries whose name starts with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamStore<F> {
        let mut out = ParamStore::new();
        for p in &self.entries {
            if let Some(rest) = p.name.strip_prefix(prefix) {
                out.insert(rest, p.value.clone(), p.is_buffer);
            }
        }
        out
    }

    /// Adds all entries of `other`, replacing same-named ones.
    pub fn extend_from(&mut self, other: &ParamStore<F>) {
        for p in &other.entries {
            self.insert(&p.name, p.value.clone(), p.is_buffer);
        }
    }

    /// Copies values for names present in both stores, checking shapes.
    pub fn load_matching(&mut self, other: &ParamStore<F>) -> Result<usize> {
        let mut copied = 0;
        for p in &other.entries {
            if let Some(&i) = self.index.get(&p.name) {
                let dst = &mut self.entries[i];
                if dst.value.shape() != p.value.shape() {
                    return Err(Error::Integrity(format!(
                        "parameter `{}`: expected shape {:?}, checkpoint has {:?}",
                        p.name,
                        dst.value.shape(),
                        p.value.shape()
                    )));
                }
                dst.value = p.value.clone();
                copied += 1;
            }
        }
        Ok(copied)
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        let mut out = ParamStore::new();
        for p in &self.entries {
            out.insert(&p.name, p.value.cast(), p.is_buffer);
            let i = out.index[&p.name];
            out.entries[i].frozen = p.frozen;
        }
        out
    }
}

/// Leaves of a [`ParamStore`] placed on one tape.
pub struct Binding<'t, F: Scalar> {
    vars: Vec<(String, Var<'t, F>)>,
}

impl<'t, F: Scalar> Binding<'t, F> {
    #[cfg(test)]
    pub(crate) fn from_vars(vars: Vec<(String, Var<'t, F>)>) -> Self {
        Binding { vars }
    }

    pub fn var(&self, name: &str) -> Result<Var<'t, F>> {
        self.vars
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Integrity(format!("parameter `{name}` is not bound")))
    }

    /// Gradients collected by the last backward pass, for leaves that have
    /// one.
    pub fn gradients(&self) -> Gradients<F> {
        self.vars
            .iter()
            .filter_map(|(n, v)| v.grad().map(|g| (n.clone(), g)))
            .collect()
    }
}
