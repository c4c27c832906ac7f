use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::graph::{Graph, Var};
use super::tensor::{Element, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Init {
    /// U(-1/sqrt(fan_in), +1/sqrt(fan_in))
    Uniform {
        fan_in: usize,
    },
    Ones,
    Zeros,
}

/// Declared parameter: name, shape and how to initialise it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    #[serde(default)]
    pub frozen: bool,
}

impl ParamSpec {
    pub fn new(name: impl Into<String>, shape: Vec<usize>, init: Init) -> Self {
        Self {
            name: name.into(),
            shape,
            init,
            frozen: false,
        }
    }

    pub fn weight(name: impl Into<String>, fan_in: usize, fan_out: usize) -> Self {
        Self::new(name, vec![fan_in, fan_out], Init::Uniform { fan_in })
    }

    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// A named trainable (or frozen) array.
///
/// Values are held in f64 but are always exactly representable in f32, which
/// is the storage precision of checkpoints.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub frozen: bool,
}

impl Parameter {
    pub fn new(
        name: impl Into<String>,
        shape: Vec<usize>,
        data: Vec<f64>,
        frozen: bool,
    ) -> Result<Self> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Shape {
                op: "parameter",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(Self {
            name,
            shape,
            data: data.into_iter().map(round_f32).collect(),
            frozen,
        })
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn tensor<T: Element>(&self) -> Tensor<T> {
        Tensor::new(
            self.shape.clone(),
            self.data.iter().map(|&x| T::of(x)).collect(),
        )
        .expect("parameter shape invariant")
    }
}

#[inline]
pub fn round_f32(x: f64) -> f64 {
    x as f32 as f64
}

/// Ordered collection of parameters; order defines checkpoint layout.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn init(specs: &[ParamSpec], rng: &mut impl Rng) -> Result<Self> {
        let mut set = Self::new();
        for spec in specs {
            let n = spec.numel();
            let data = match spec.init {
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
                }
                Init::Ones => vec![1.0; n],
                Init::Zeros => vec![0.0; n],
            };
            set.push(Parameter::new(
                spec.name.clone(),
                spec.shape.clone(),
                data,
                spec.frozen,
            )?)?;
        }
        Ok(set)
    }

    pub fn push(&mut self, p: Parameter) -> Result<()> {
        if self.index.contains_key(&p.name) {
            return Err(Error::Config(format!(
                "duplicate parameter name {}",
                p.name
            )));
        }
        self.index.insert(p.name.clone(), self.params.len());
        self.params.push(p);
        Ok(())
    }

    /// Replace the parameter of the same name (shape may change) or append it.
    pub fn upsert(&mut self, p: Parameter) {
        match self.index.get(&p.name) {
            Some(&i) => self.params[i] = p,
            None => {
                self.index.insert(p.name.clone(), self.params.len());
                self.params.push(p);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.index.get(name).map(|&i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.index.get(name).map(|&i| &mut self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.iter().map(|p| p.name.as_str())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    /// Checks that every declared spec is present with a matching shape.
    pub fn check_specs(&self, specs: &[ParamSpec]) -> Result<()> {
        for s in specs {
            match self.get(&s.name) {
                None => return Err(Error::Config(format!("missing parameter {}", s.name))),
                Some(p) if p.shape != s.shape => {
                    return Err(Error::Shape {
                        op: "parameter",
                        lhs: p.shape.clone(),
                        rhs: s.shape.clone(),
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Put every parameter on `graph` as a leaf. Grad is requested only when
    /// `trainable` is set and the parameter is not frozen.
    pub fn bind<T: Element>(&self, graph: &mut Graph<T>, trainable: bool) -> Bindings {
        self.bind_where(graph, trainable, |_| true)
    }

    /// Like [`ParamSet::bind`], restricted to names accepted by `keep`.
    pub fn bind_where<T: Element>(
        &self,
        graph: &mut Graph<T>,
        trainable: bool,
        keep: impl Fn(&str) -> bool,
    ) -> Bindings {
        let vars = self
            .params
            .iter()
            .filter(|p| keep(&p.name))
            .map(|p| {
                let v = graph.leaf(p.tensor(), trainable && !p.frozen);
                (p.name.clone(), v)
            })
            .collect();
        Bindings { vars }
    }
}

/// Parameter name to graph node lookup for one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Bindings {
    vars: HashMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter {name} not bound")))
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, &v)| (k.as_str(), v))
    }
}
