use crate::autodiff::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// What a stored tensor is for; running statistics are buffers, not parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    Scale,
    Shift,
    RunningMean,
    RunningVar,
}

impl ParamRole {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamRole::RunningMean | ParamRole::RunningVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub role: ParamRole,
    pub tensor: Tensor<T>,
}

/// Flat, ordered storage for every tensor a model owns.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    entries: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            entries: Vec::new(),
        }
    }

    pub(crate) fn push(&mut self, name: String, role: ParamRole, tensor: Tensor<T>) -> ParamId {
        let tensor = tensor.with_requires_grad(role.trainable());
        self.entries.push(Param { name, role, tensor });
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param<T> {
        &self.entries[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param<T> {
        &mut self.entries[id.0]
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<&Param<T>> {
        self.entries.iter().find(|p| p.name == name)
    }

    pub fn trainable(&self) -> impl Iterator<Item = &Param<T>> {
        self.entries.iter().filter(|p| p.role.trainable())
    }

    pub fn trainable_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.entries.iter_mut().filter(|p| p.role.trainable())
    }

    /// Number of trainable scalars.
    pub fn count(&self) -> usize {
        self.trainable().map(|p| p.tensor.numel()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.entries {
            p.tensor.zero_grad();
        }
    }

    /// Keeps only `ids` (in the given order) and returns the old-to-new id map.
    pub(crate) fn retain_ordered(&mut self, ids: &[ParamId]) -> Vec<Option<ParamId>> {
        let mut remap = vec![None; self.entries.len()];
        let mut kept = Vec::with_capacity(ids.len());
        for id in ids {
            if remap[id.0].is_none() {
                remap[id.0] = Some(ParamId(kept.len()));
                kept.push(self.entries[id.0].clone());
            }
        }
        self.entries = kept;
        remap
    }
}
