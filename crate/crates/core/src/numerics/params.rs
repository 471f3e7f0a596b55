use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use super::{Graph, NumericsError, Scalar, SeedStream, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
    pub trainable: bool,
    /// Optimizer parameter group (learning rate / weight decay bucket).
    pub group: String,
}

/// Named parameter tensors owned by a model.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
    index: BTreeMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn insert(
        &mut self,
        name: impl Into<String>,
        value: Tensor<T>,
        group: &str,
    ) -> Result<ParamId, NumericsError> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(NumericsError::InvalidArgument {
                op: "param_store",
                reason: format!("duplicate parameter name {name}"),
            });
        }
        let id = self.entries.len();
        self.index.insert(name.clone(), id);
        self.entries.push(ParamEntry {
            name,
            value: Arc::new(value),
            trainable: true,
            group: group.to_string(),
        });
        Ok(ParamId(id))
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn insert_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        group: &str,
        seeds: &SeedStream,
    ) -> Result<ParamId, NumericsError> {
        let name = name.into();
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let mut rng = seeds.keyed(&name, 0);
        let n: usize = shape.iter().product();
        let data = (0..n)
            .map(|_| T::of(rng.random_range(-bound..bound)))
            .collect();
        self.insert(name, Tensor::new(shape.to_vec(), data)?, group)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId, NumericsError> {
        self.index
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| NumericsError::UnknownParameter(name.to_string()))
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn set(&mut self, id: ParamId, value: Tensor<T>) -> Result<(), NumericsError> {
        let current = &self.entries[id.0].value;
        if current.shape() != value.shape() {
            return Err(NumericsError::ShapeMismatch {
                op: "param_set",
                left: current.shape().to_vec(),
                right: value.shape().to_vec(),
            });
        }
        self.entries[id.0].value = Arc::new(value);
        Ok(())
    }

    pub fn update(&mut self, id: ParamId, f: impl FnOnce(&mut Tensor<T>)) {
        f(Arc::make_mut(&mut self.entries[id.0].value));
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    pub fn freeze_all(&mut self) {
        self.entries.iter_mut().for_each(|e| e.trainable = false);
    }

    pub fn set_group_all(&mut self, group: &str, trainable: bool) {
        for e in &mut self.entries {
            e.group = group.to_string();
            e.trainable = trainable;
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.entries
            .iter()
            .filter(|e| e.trainable)
            .map(|e| e.value.numel())
            .sum()
    }

    pub fn total_count(&self) -> usize {
        self.entries.iter().map(|e| e.value.numel()).sum()
    }

    /// Puts every parameter on the graph; trainable ones become gradient leaves.
    pub fn bind(&self, graph: &Graph<T>) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|e| {
                if e.trainable {
                    graph.leaf_shared(e.value.clone())
                } else {
                    graph.constant_shared(e.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Replaces values by name from another store with the same layout.
    pub fn copy_values_from(&mut self, other: &ParamStore<T>) -> Result<(), NumericsError> {
        for e in other.entries() {
            let id = self.id(&e.name)?;
            self.set(id, (*e.value).clone())?;
        }
        Ok(())
    }

    pub fn named_tensors(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|e| (e.name.as_str(), &*e.value))
    }
}

/// A parameter store's values placed on one graph.
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }
}
