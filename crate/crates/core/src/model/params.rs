//! Named parameter storage, initialization, and graph binding.

use std::collections::BTreeMap;

use crate::error::{CamError, Result};
use crate::graph::{Gradients, Graph, Var};
use crate::model::config::ModelConfig;
use crate::rng::{lane, normal, stream};
use crate::tensor::{Scalar, Tensor};

/// Gradients keyed by parameter name, in the same order as the store.
pub type GradMap<T> = BTreeMap<String, Tensor<T>>;

/// All learnable tensors of a model, keyed by name. The BTreeMap ordering is
/// the canonical iteration order for initialization, optimizer updates, and
/// checkpoint layout, which is what makes those paths deterministic.
#[derive(Clone, Debug)]
pub struct ParamStore<T: Scalar = f32> {
    tensors: BTreeMap<String, Tensor<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn from_tensors(tensors: BTreeMap<String, Tensor<T>>) -> Self {
        ParamStore { tensors }
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.tensors.iter_mut()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn param_count(&self) -> u64 {
        self.tensors.values().map(|t| t.len() as u64).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.values().all(|t| t.all_finite())
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), v.cast::<U>()))
                .collect(),
        }
    }

    /// Check that the stored tensors are exactly the config's shapes.
    pub fn matches_config(&self, config: &ModelConfig) -> Result<()> {
        let shapes = config.param_shapes();
        if shapes.len() != self.tensors.len() {
            return Err(CamError::CacheMismatch(format!(
                "parameter count {} != config's {}",
                self.tensors.len(),
                shapes.len()
            )));
        }
        for (name, shape) in shapes {
            match self.tensors.get(&name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                Some(t) => {
                    return Err(CamError::CacheMismatch(format!(
                        "parameter {name} has shape {:?}, config says {:?}",
                        t.shape(),
                        shape
                    )));
                }
                None => {
                    return Err(CamError::CacheMismatch(format!("missing parameter {name}")));
                }
            }
        }
        Ok(())
    }
}

impl ParamStore<f32> {
    /// Initialize parameters for `config`: truncated normal (std 0.02) for
    /// weights, ones for norm gains, zeros for biases, and zeros for the
    /// adaptive-norm modulation projections so every block starts as the
    /// identity. One named substream, consumed in name order.
    pub fn init(config: &ModelConfig, seed: u64) -> Self {
        let mut rng = stream(seed, &[lane::INIT]);
        let mut tensors = BTreeMap::new();
        let mut shapes = config.param_shapes();
        shapes.sort_by(|a, b| a.0.cmp(&b.0));
        for (name, shape) in shapes {
            let n: usize = shape.iter().product();
            let data = if name.contains(".mod.") || name.contains("final_mod") {
                vec![0.0f32; n]
            } else if name.ends_with(".g") {
                vec![1.0f32; n]
            } else if name.ends_with(".b") {
                vec![0.0f32; n]
            } else {
                (0..n).map(|_| trunc_normal(&mut rng, 0.02)).collect()
            };
            tensors.insert(name, Tensor::from_vec(&shape, data));
        }
        ParamStore { tensors }
    }
}

/// Normal(0, std) truncated at two standard deviations by resampling.
fn trunc_normal(rng: &mut impl rand::Rng, std: f64) -> f32 {
    loop {
        let n = normal(rng);
        if n.abs() <= 2.0 {
            return (n * std) as f32;
        }
    }
}

/// Parameters bound into a graph as leaves, for one training step.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn bind<T: Scalar>(g: &mut Graph<T>, params: &ParamStore<T>) -> Self {
        let mut vars = BTreeMap::new();
        for (name, tensor) in params.iter() {
            vars.insert(name.clone(), g.leaf(tensor.clone()));
        }
        BoundParams { vars }
    }

    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter {name}"))
    }

    /// Pull the gradient for every parameter that received one.
    pub fn collect_grads<T: Scalar>(&self, grads: &mut Gradients<T>) -> GradMap<T> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.vars {
            if let Some(g) = grads.take(*var) {
                out.insert(name.clone(), g);
            }
        }
        out
    }
}
