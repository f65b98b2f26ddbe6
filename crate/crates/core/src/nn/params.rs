use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::VarMap;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::seeding::{stream, StreamDomain};

/// Parameter initialisation schemes.
#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    Normal { std: f64 },
    Uniform { bound: f64 },
    /// Identity for a square 2-d weight, zeros otherwise.
    Eye,
}

/// Hierarchical parameter registry backed by a [`VarMap`].
///
/// Unlike `candle_nn::VarBuilder`, initial values come from a seeded stream so
/// two models built with the same seed are bit-identical. Requesting a name
/// that already exists returns the stored variable (after a shape check),
/// which is how checkpoints are loaded: build, then overwrite.
#[derive(Clone)]
pub struct ParamBuilder {
    varmap: VarMap,
    rng: Rc<RefCell<ChaCha8Rng>>,
    prefix: Vec<String>,
    dtype: DType,
    device: Device,
}

impl ParamBuilder {
    pub fn new(varmap: &VarMap, seed: u64, dtype: DType, device: &Device) -> Self {
        Self {
            varmap: varmap.clone(),
            rng: Rc::new(RefCell::new(stream(seed, StreamDomain::Init, 0))),
            prefix: Vec::new(),
            dtype,
            device: device.clone(),
        }
    }

    pub fn pp(&self, name: impl ToString) -> Self {
        let mut child = self.clone();
        child.prefix.push(name.to_string());
        child
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn varmap(&self) -> &VarMap {
        &self.varmap
    }

    fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix.join("."), name)
        }
    }

    pub fn get<S: Into<Shape>>(&self, shape: S, name: &str, init: Init) -> Result<Tensor> {
        Ok(self.get_var(shape, name, init)?.as_tensor().clone())
    }

    pub fn get_var<S: Into<Shape>>(&self, shape: S, name: &str, init: Init) -> Result<Var> {
        let shape: Shape = shape.into();
        let path = self.path(name);
        let mut data = self.varmap.data().lock().unwrap();
        if let Some(var) = data.get(&path) {
            if var.shape() != &shape {
                return Err(Error::Shape(format!(
                    "parameter {path}: stored {:?}, requested {:?}",
                    var.shape(),
                    shape
                )));
            }
            return Ok(var.clone());
        }
        let values = self.sample(&shape, init)?;
        let tensor = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&tensor)?;
        data.insert(path, var.clone());
        Ok(var)
    }

    fn sample(&self, shape: &Shape, init: Init) -> Result<Vec<f64>> {
        let n = shape.elem_count();
        let mut rng = self.rng.borrow_mut();
        Ok(match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::Normal { std } => {
                let dist = Normal::new(0.0, std)
                    .map_err(|e| Error::InvalidArgument(format!("normal init: {e}")))?;
                (0..n).map(|_| dist.sample(&mut *rng)).collect()
            }
            Init::Uniform { bound } => (0..n).map(|_| rng.random_range(-bound..=bound)).collect(),
            Init::Eye => {
                let dims = shape.dims();
                let mut v = vec![0.0; n];
                if dims.len() == 2 && dims[0] == dims[1] {
                    for i in 0..dims[0] {
                        v[i * dims[1] + i] = 1.0;
                    }
                }
                v
            }
        })
    }
}

/// Copy of every variable's current value, keyed by name.
pub fn snapshot(varmap: &VarMap) -> Result<HashMap<String, Tensor>> {
    let data = varmap.data().lock().unwrap();
    data.iter()
        .map(|(k, v)| Ok((k.clone(), v.as_tensor().copy()?)))
        .collect()
}

/// Overwrite variables from `values`. Names missing from `values` are an error
/// unless they fall outside `prefix`.
pub fn restore(varmap: &VarMap, values: &HashMap<String, Tensor>, prefix: Option<&str>) -> Result<usize> {
    let data = varmap.data().lock().unwrap();
    let mut n = 0;
    for (name, var) in data.iter() {
        if let Some(p) = prefix {
            if !name.starts_with(p) {
                continue;
            }
        }
        let value = values
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        if value.shape() != var.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, expected {:?}",
                value.shape(),
                var.shape()
            )));
        }
        var.set(&value.to_dtype(var.dtype())?.to_device(var.device())?)?;
        n += 1;
    }
    Ok(n)
}

/// Sorted `(name, var)` pairs; optimiser state and gradient checks rely on a
/// stable order.
pub fn sorted_vars(varmap: &VarMap) -> Vec<(String, Var)> {
    let data = varmap.data().lock().unwrap();
    let mut vars: Vec<_> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
    vars.sort_by(|a, b| a.0.cmp(&b.0));
    vars
}
