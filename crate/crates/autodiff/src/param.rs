//! Named parameter storage shared by model modules and the optimizer.

use std::rc::Rc;

use crate::error::AdError;
use crate::scalar::Scalar;
use crate::shape::numel;
use crate::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub usize);

pub struct Parameter<T: Scalar> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Rc<Vec<T>>,
    pub trainable: bool,
    /// A frozen parameter receives zero update regardless of gradient.
    pub frozen: bool,
}

/// Insertion-ordered parameter table. Order is part of the determinism
/// contract: iteration never goes through a hash map.
pub struct ParamStore<T: Scalar> {
    params: Vec<Parameter<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<T>) -> ParamId {
        let name = name.into();
        assert_eq!(data.len(), numel(shape), "param {name}: data/shape mismatch");
        assert!(
            self.find(&name).is_none(),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name,
            shape: shape.to_vec(),
            data: Rc::new(data),
            trainable: true,
            frozen: false,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn total_elements(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    /// Mutable access for the optimizer and checkpoint loader. Requires that
    /// no graph is currently holding the value (drop graphs first).
    pub fn data_mut(&mut self, id: ParamId) -> &mut Vec<T> {
        Rc::make_mut(&mut self.params[id.0].data)
    }

    pub fn set_frozen(&mut self, id: ParamId, frozen: bool) {
        self.params[id.0].frozen = frozen;
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    /// Freeze/unfreeze every parameter whose name matches the predicate.
    pub fn freeze_where(&mut self, frozen: bool, pred: impl Fn(&str) -> bool) {
        for p in self.params.iter_mut() {
            if pred(&p.name) {
                p.frozen = frozen;
            }
        }
    }

    /// Overwrite a parameter's data (shapes must match).
    pub fn set_data(&mut self, id: ParamId, data: Vec<T>) -> Result<()> {
        let p = &mut self.params[id.0];
        if data.len() != numel(&p.shape) {
            return Err(AdError::contract(
                "set_data",
                format!("param {}: {} elements for shape {:?}", p.name, data.len(), p.shape),
            ));
        }
        p.data = Rc::new(data);
        Ok(())
    }
}
