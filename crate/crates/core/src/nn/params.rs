use std::path::Path;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::datamodel::{create_dir, read_array, write_array};
use crate::error::{Error, Result};

/// Named, seeded model parameters.
///
/// Parameters are initialised from a caller-supplied ChaCha stream so that
/// model construction is reproducible. Insertion order is the persistence
/// and optimiser order.
#[derive(Clone)]
pub struct ParamStore {
    dtype: DType,
    device: Device,
    entries: Vec<(String, Var)>,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("dtype", &self.dtype)
            .field("params", &self.entries.len())
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            dtype,
            device: Device::Cpu,
            entries: Vec::new(),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Registers a parameter drawn uniformly from `[-bound, bound]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n)
            .map(|_| if bound > 0.0 { rng.random_range(-bound..bound) } else { 0.0 })
            .collect();
        self.insert(name, Tensor::from_vec(data, shape, &self.device)?)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.insert(name, Tensor::zeros(shape, DType::F64, &self.device)?)
    }

    fn insert(&mut self, name: &str, init: Tensor) -> Result<Tensor> {
        if self.entries.iter().any(|(n, _)| n == name) {
            return Err(Error::validation("parameter", format!("duplicate name `{name}`")));
        }
        let var = Var::from_tensor(&init.to_dtype(self.dtype)?)?;
        let t = var.as_tensor().clone();
        self.entries.push((name.to_string(), var));
        Ok(t)
    }

    /// A store over the same variables as `parts`, names prefixed by
    /// position. Updates through either view are shared.
    pub fn merged(parts: &[&ParamStore]) -> Result<Self> {
        let dtype = parts.first().map_or(DType::F32, |p| p.dtype);
        let mut entries = Vec::new();
        for (i, p) in parts.iter().enumerate() {
            if p.dtype != dtype {
                return Err(Error::validation("parameter", "stores differ in dtype"));
            }
            entries.extend(p.entries.iter().map(|(n, v)| (format!("{i}.{n}"), v.clone())));
        }
        Ok(Self {
            dtype,
            device: Device::Cpu,
            entries,
        })
    }

    pub fn vars(&self) -> Vec<Var> {
        self.entries.iter().map(|(_, v)| v.clone()).collect()
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, v)| v)
    }

    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|(_, v)| v.elem_count()).sum()
    }

    /// Deep copy of current values, for best-epoch restore.
    pub fn snapshot(&self) -> Result<Vec<Tensor>> {
        self.entries
            .iter()
            .map(|(_, v)| Ok(v.as_tensor().copy()?.detach()))
            .collect()
    }

    pub fn restore(&self, snapshot: &[Tensor]) -> Result<()> {
        if snapshot.len() != self.entries.len() {
            return Err(Error::validation("snapshot", "parameter count mismatch"));
        }
        for ((_, v), t) in self.entries.iter().zip(snapshot) {
            v.set(t)?;
        }
        Ok(())
    }

    pub fn all_finite(&self) -> Result<bool> {
        for (_, v) in &self.entries {
            let s = v.as_tensor().to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
            if s.iter().any(|x| !x.is_finite()) {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// One float32 blob per parameter under `dir`, named after the parameter.
    pub fn save(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        for (name, v) in &self.entries {
            let values = v.as_tensor().to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
            write_array(&dir.join(format!("{name}.f32")), v.dims(), &values)?;
        }
        Ok(())
    }

    /// Overwrites every registered parameter from blobs written by [`save`].
    ///
    /// [`save`]: ParamStore::save
    pub fn load(&self, dir: &Path) -> Result<()> {
        for (name, v) in &self.entries {
            let path = dir.join(format!("{name}.f32"));
            let (shape, values) = read_array(&path)?;
            if shape != v.dims() {
                return Err(Error::validation(
                    path.display().to_string(),
                    format!("shape {shape:?} does not match parameter shape {:?}", v.dims()),
                ));
            }
            let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
            v.set(&t)?;
        }
        Ok(())
    }
}
