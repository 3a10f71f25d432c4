use std::collections::HashMap;
use std::sync::Arc;

use indexmap::IndexMap;

use super::{Graph, Real, Result, Tensor, TensorError, Var};

/// Named trainable tensors in insertion order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Real> {
    params: IndexMap<String, Arc<Tensor<T>>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(TensorError::Invalid {
                op: "param_store",
                detail: format!("duplicate parameter name `{}`", name),
            });
        }
        self.params.insert(name, Arc::new(value));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name).map(|a| a.as_ref())
    }

    /// Mutable access; copies the buffer only if a graph still shares it.
    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name).map(Arc::make_mut)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn num_elements(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), Arc::make_mut(v)))
    }

    /// Registers every parameter as a leaf on `g`.
    pub fn bind(&self, g: &Graph<T>, trainable: bool) -> BoundParams {
        let mut vars = HashMap::with_capacity(self.params.len());
        let mut order = Vec::with_capacity(self.params.len());
        for (name, value) in &self.params {
            let v = g.leaf_shared(value.clone(), trainable);
            vars.insert(name.clone(), v);
            order.push(name.clone());
        }
        BoundParams { vars, order }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), Arc::new(v.cast())))
                .collect(),
        }
    }
}

/// Parameter name → graph handle for one forward pass.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: HashMap<String, Var>,
    order: Vec<String>,
}

impl BoundParams {
    /// Wraps handles that already live on a graph.
    pub fn from_vars(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        let mut vars = HashMap::new();
        let mut order = Vec::new();
        for (n, v) in pairs {
            order.push(n.clone());
            vars.insert(n, v);
        }
        Self { vars, order }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| TensorError::MissingParam(name.to_string()))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(|s| s.as_str())
    }

    pub fn vars(&self) -> impl Iterator<Item = (&str, Var)> {
        self.order.iter().map(move |n| (n.as_str(), self.vars[n]))
    }

    /// Gradients after `g.backward`, zero-filled for parameters the loss
    /// never reached.
    pub fn grads<T: Real>(&self, g: &Graph<T>) -> IndexMap<String, Tensor<T>> {
        self.order
            .iter()
            .map(|n| {
                let v = self.vars[n];
                let grad = g.grad(v).unwrap_or_else(|| Tensor::zeros(g.shape(v)));
                (n.clone(), grad)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.insert("a", Tensor::zeros(vec![2])).unwrap();
        assert!(s.insert("a", Tensor::zeros(vec![2])).is_err());
    }

    #[test]
    fn order_is_insertion_order() {
        let mut s = ParamStore::<f32>::new();
        for n in ["z", "a", "m"] {
            s.insert(n, Tensor::zeros(vec![1])).unwrap();
        }
        assert_eq!(s.names().collect::<Vec<_>>(), vec!["z", "a", "m"]);
    }

    #[test]
    fn unreached_params_get_zero_grad() {
        let mut s = ParamStore::<f64>::new();
        s.insert("used", Tensor::full(vec![3], 2.0)).unwrap();
        s.insert("unused", Tensor::full(vec![2], 1.0)).unwrap();
        let g = Graph::new();
        let b = s.bind(&g, true);
        let loss = g.sum(b.get("used").unwrap()).unwrap();
        g.backward(loss).unwrap();
        let grads = b.grads(&g);
        assert_eq!(grads["used"].data(), &[1.0, 1.0, 1.0]);
        assert_eq!(grads["unused"].data(), &[0.0, 0.0]);
    }
}
