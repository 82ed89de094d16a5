//! Named weight storage shared by the executor, optimizer and checkpoints.

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::rng::SplitMix64;
use crate::tensor::{same_shape, Scalar, Shape, Tensor};

/// How a declared array gets its initial value.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Gaussian with std sqrt(2 / fan_in).
    He {
        fan_in: usize,
    },
    Zeros,
    Ones,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamDecl {
    pub name: String,
    pub shape: Shape,
    pub init: Init,
    /// Running statistics are stored but not trained.
    pub trainable: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub value: Tensor,
    pub trainable: bool,
}

/// Insertion-ordered map from parameter name to array.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: IndexMap<String, Entry>,
}

pub type Grads = IndexMap<String, Tensor>;

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Draws every declaration in order from one seeded stream.
    pub fn init(decls: &[ParamDecl], seed: u64) -> Self {
        let mut rng = SplitMix64::new(seed);
        let mut store = ParamStore::new();
        for d in decls {
            let value = match d.init {
                Init::He { fan_in } => {
                    let std = (2.0 / fan_in.max(1) as f64).sqrt();
                    Tensor::from_fn(d.shape, |_| rng.gaussian_scalar(std))
                }
                Init::Zeros => Tensor::zeros(d.shape),
                Init::Ones => Tensor::full(d.shape, 1.0),
            };
            store.insert(&d.name, value, d.trainable);
        }
        store
    }

    pub fn insert(&mut self, name: &str, value: Tensor, trainable: bool) {
        self.entries
            .insert(name.to_string(), Entry { value, trainable });
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .get(name)
            .map(|e| &e.value)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.entries
            .get_mut(name)
            .map(|e| &mut e.value)
            .ok_or_else(|| Error::config(format!("missing parameter `{name}`")))
    }

    /// Replaces the values of an existing entry, keeping its shape.
    pub fn set(&mut self, name: &str, data: Vec<Scalar>) -> Result<()> {
        let t = self.get_mut(name)?;
        *t = Tensor::from_vec(t.shape(), data)?;
        Ok(())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn is_trainable(&self, name: &str) -> bool {
        self.entries.get(name).is_some_and(|e| e.trainable)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Entry)> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Entry)> {
        self.entries.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    /// Total trainable scalar count.
    pub fn trainable_count(&self) -> usize {
        self.entries
            .values()
            .filter(|e| e.trainable)
            .map(|e| e.value.len())
            .sum()
    }

    /// Checks that every declaration is present with the declared shape.
    pub fn check_against(&self, decls: &[ParamDecl]) -> Result<()> {
        for d in decls {
            same_shape("ParamStore", d.shape, self.get(&d.name)?.shape())?;
        }
        Ok(())
    }
}
