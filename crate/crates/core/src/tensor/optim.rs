//! Named parameters and SGD with momentum and weight decay.

use std::collections::BTreeMap;

use thiserror::Error;

use super::{Scalar, Tensor};

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<S: Scalar = f32> {
    /// Dotted path, e.g. `stream.rgb.block1.conv`.
    pub name: String,
    pub tensor: Tensor<S>,
    /// A frozen parameter is never bound for gradient and never stepped.
    pub frozen: bool,
}

impl<S: Scalar> Parameter<S> {
    pub fn new(name: impl Into<String>, mut tensor: Tensor<S>) -> Self {
        tensor.requires_grad = true;
        Self {
            name: name.into(),
            tensor,
            frozen: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

/// Ordered collection of parameters, addressable by id or name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet<S: Scalar = f32> {
    params: Vec<Parameter<S>>,
    by_name: BTreeMap<String, ParamId>,
}

impl<S: Scalar> ParamSet<S> {
    pub fn new() -> Self {
        Self {
            params: Vec::new(),
            by_name: BTreeMap::new(),
        }
    }

    /// Appends a parameter. Names must be unique; a duplicate replaces the old value.
    pub fn push(&mut self, p: Parameter<S>) -> ParamId {
        if let Some(&id) = self.by_name.get(&p.name) {
            self.params[id.0] = p;
            return id;
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(p.name.clone(), id);
        self.params.push(p);
        id
    }

    pub fn get(&self, id: ParamId) -> &Parameter<S> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<S> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<S>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<S>> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn freeze_all(&mut self) {
        for p in &mut self.params {
            p.frozen = true;
            p.tensor.grad = None;
        }
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.tensor.grad = None;
        }
    }

    /// Copies every parameter of `other` in, keeping ids of `self` stable.
    pub fn extend(&mut self, other: &ParamSet<S>) {
        for p in other.iter() {
            self.push(p.clone());
        }
    }

    pub fn cast<T: Scalar>(&self) -> ParamSet<T> {
        let mut out = ParamSet::new();
        for p in &self.params {
            out.push(Parameter {
                name: p.name.clone(),
                tensor: p.tensor.cast(),
                frozen: p.frozen,
            });
        }
        out
    }
}

/// SGD hyperparameters. Defaults follow the reference training recipe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.001,
            momentum: 0.9,
            weight_decay: 0.0005,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OptimError {
    #[error("non-finite gradient in parameter {0}")]
    NonFiniteGradient(String),
    #[error("invalid optimizer config: {0}")]
    InvalidConfig(String),
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<(), OptimError> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(OptimError::InvalidConfig(format!("learning_rate {}", self.learning_rate)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(OptimError::InvalidConfig(format!("momentum {} not in [0, 1)", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(OptimError::InvalidConfig(format!("weight_decay {}", self.weight_decay)));
        }
        Ok(())
    }
}

/// Momentum SGD. Velocity buffers are keyed by parameter name and start at zero.
#[derive(Clone, Debug)]
pub struct Sgd<S: Scalar = f32> {
    pub config: OptimizerConfig,
    velocity: BTreeMap<String, Vec<S>>,
}

impl<S: Scalar> Sgd<S> {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocity(&self, name: &str) -> Option<&[S]> {
        self.velocity.get(name).map(Vec::as_slice)
    }

    /// For each non-frozen parameter: `g = grad + wd·w; v = μ·v + g; w -= lr·v`.
    /// A missing gradient counts as zero. Nothing is modified if any gradient is non-finite.
    pub fn step(&mut self, params: &mut ParamSet<S>) -> Result<(), OptimError> {
        for p in params.iter().filter(|p| !p.frozen) {
            if let Some(g) = &p.tensor.grad {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(OptimError::NonFiniteGradient(p.name.clone()));
                }
            }
        }
        let lr = S::from_f64(self.config.learning_rate);
        let mu = S::from_f64(self.config.momentum);
        let wd = S::from_f64(self.config.weight_decay);
        for p in params.params.iter_mut().filter(|p| !p.frozen) {
            let n = p.tensor.len();
            let v = self.velocity.entry(p.name.clone()).or_insert_with(|| vec![S::zero(); n]);
            let grad = p.tensor.grad.take();
            let w = p.tensor.data_mut();
            for i in 0..n {
                let g = grad.as_ref().map_or(S::zero(), |g| g[i]) + wd * w[i];
                v[i] = mu * v[i] + g;
                w[i] -= lr * v[i];
            }
            p.tensor.grad = grad;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(w: f32, g: f32) -> ParamSet<f32> {
        let mut set = ParamSet::new();
        let id = set.push(Parameter::new("w", Tensor::full(&[1], w)));
        set.get_mut(id).tensor.grad = Some(vec![g]);
        set
    }

    #[test]
    fn defaults_match_recipe() {
        let c = OptimizerConfig::default();
        assert_eq!((c.learning_rate, c.momentum, c.weight_decay), (0.001, 0.9, 0.0005));
    }

    #[test]
    fn one_step_with_defaults() {
        let mut set = single(1.0, 1.0);
        let mut sgd = Sgd::new(OptimizerConfig::default());
        sgd.step(&mut set).unwrap();
        assert!((sgd.velocity("w").unwrap()[0] - 1.0005).abs() < 1e-7);
        assert!((set.by_name("w").unwrap().tensor.item() - 0.9989995).abs() < 1e-7);
    }

    #[test]
    fn zero_gradient_without_decay_is_noop() {
        let mut set = single(0.37, 0.0);
        let mut sgd = Sgd::new(OptimizerConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        sgd.step(&mut set).unwrap();
        assert_eq!(set.by_name("w").unwrap().tensor.item(), 0.37);
    }

    #[test]
    fn frozen_parameter_is_bit_identical() {
        let mut set = single(0.123_456_7, 5.0);
        set.params[0].frozen = true;
        let before = set.clone();
        Sgd::new(OptimizerConfig::default()).step(&mut set).unwrap();
        assert_eq!(
            before.params[0].tensor.data()[0].to_bits(),
            set.params[0].tensor.data()[0].to_bits()
        );
    }

    #[test]
    fn non_finite_gradient_is_rejected_untouched() {
        let mut set = single(1.0, f32::NAN);
        let err = Sgd::new(OptimizerConfig::default()).step(&mut set).unwrap_err();
        assert_eq!(err, OptimError::NonFiniteGradient("w".into()));
        assert_eq!(set.params[0].tensor.item(), 1.0);
    }

    #[test]
    fn config_validation() {
        assert!(OptimizerConfig {
            momentum: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(OptimizerConfig::default().validate().is_ok());
    }
}
