//! Small neural-network toolkit on top of candle: seeded parameter stores,
//! layers, losses and the shared training loop pieces.

mod layers;
mod params;
mod train;

use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::de::DeserializeOwned;
use serde::Serialize;

pub use layers::{leaky_relu, sigmoid, softmax_last, Activation, Init, Linear, Mlp};
pub use params::ParamStore;
pub use train::{fit, steps_per_epoch, stratified_holdout, Adam, EarlyStopping, TrainConfig, TrainHistory};

use crate::datamodel::{create_dir, read_json, write_json, Matrix};
use crate::error::{Error, Result};

pub fn matrix_tensor(m: &Matrix, dtype: DType) -> Result<Tensor> {
    Ok(Tensor::from_slice(m.as_slice(), m.shape(), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Stacks equal-length rows into a `rows x len` tensor.
pub fn rows_tensor<R: AsRef<[f32]>>(rows: &[R], dtype: DType) -> Result<Tensor> {
    let len = rows.first().map_or(0, |r| r.as_ref().len());
    let mut data = Vec::with_capacity(rows.len() * len);
    for r in rows {
        let r = r.as_ref();
        if r.len() != len {
            return Err(Error::validation("batch", "rows have different lengths"));
        }
        data.extend_from_slice(r);
    }
    Ok(Tensor::from_vec(data, (rows.len(), len), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn tensor_matrix(t: &Tensor) -> Result<Matrix> {
    let (r, c) = t.dims2()?;
    let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    Matrix::from_vec(r, c, data)
}

pub fn tensor_rows(t: &Tensor) -> Result<Vec<Vec<f32>>> {
    Ok(t.to_dtype(DType::F32)?.to_vec2::<f32>()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?[0])
}

pub fn mse(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    Ok((pred - target)?.sqr()?.mean_all()?)
}

/// Mean binary cross-entropy on logits, in the overflow-free form
/// `max(x, 0) − x·y + log(1 + exp(−|x|))`.
pub fn bce_with_logits(logits: &Tensor, targets: &Tensor) -> Result<Tensor> {
    let pos = logits.relu()?;
    let soft = ((logits.abs()?.neg()?.exp()? + 1.0)?).log()?;
    Ok(((pos - (logits * targets)?)? + soft)?.mean_all()?)
}

/// Writes a model directory: `architecture.json` plus one blob per parameter.
pub fn save_model<D: Serialize>(dir: &Path, descriptor: &D, store: &ParamStore) -> Result<()> {
    create_dir(dir)?;
    write_json(&dir.join("architecture.json"), descriptor)?;
    store.save(&dir.join("params"))
}

pub fn load_descriptor<D: DeserializeOwned>(dir: &Path) -> Result<D> {
    read_json(&dir.join("architecture.json"))
}

/// Fills an already constructed store from a directory written by [`save_model`].
pub fn load_params(dir: &Path, store: &ParamStore) -> Result<()> {
    store.load(&dir.join("params"))
}

/// Per-dimension standardisation constants frozen into a model.
#[derive(Clone, Debug, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f32>,
    pub scale: Vec<f32>,
}

impl Standardizer {
    pub fn identity(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            scale: vec![1.0; dim],
        }
    }

    /// Column means and standard deviations; near-constant columns keep
    /// unit scale.
    pub fn fit<R: AsRef<[f32]>>(rows: &[R]) -> Self {
        let dim = rows.first().map_or(0, |r| r.as_ref().len());
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0f64; dim];
        for r in rows {
            for (m, x) in mean.iter_mut().zip(r.as_ref()) {
                *m += *x as f64 / n;
            }
        }
        let mut var = vec![0f64; dim];
        for r in rows {
            for ((v, m), x) in var.iter_mut().zip(&mean).zip(r.as_ref()) {
                *v += (*x as f64 - m).powi(2) / n;
            }
        }
        Self {
            mean: mean.iter().map(|m| *m as f32).collect(),
            scale: var
                .iter()
                .map(|v| if v.sqrt() > 1e-6 { v.sqrt() as f32 } else { 1.0 })
                .collect(),
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn tensors(&self, dtype: DType) -> Result<(Tensor, Tensor)> {
        let d = self.dim();
        Ok((
            Tensor::from_slice(&self.mean, d, &Device::Cpu)?.to_dtype(dtype)?,
            Tensor::from_slice(&self.scale, d, &Device::Cpu)?.to_dtype(dtype)?,
        ))
    }

    pub fn to_array(&self) -> Vec<f32> {
        self.mean.iter().chain(&self.scale).copied().collect()
    }

    pub fn from_array(values: &[f32]) -> Result<Self> {
        if values.len() % 2 != 0 {
            return Err(Error::validation("standardizer", "odd length"));
        }
        let d = values.len() / 2;
        Ok(Self {
            mean: values[..d].to_vec(),
            scale: values[d..].to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bce_matches_naive_formula() {
        let logits = [-3.0f64, -0.2, 0.0, 1.7, 25.0];
        let targets = [0.0f64, 1.0, 1.0, 0.0, 1.0];
        let lt = Tensor::new(&logits, &Device::Cpu).unwrap();
        let tt = Tensor::new(&targets, &Device::Cpu).unwrap();
        let got = scalar(&bce_with_logits(&lt, &tt).unwrap()).unwrap();
        let expect: f64 = logits
            .iter()
            .zip(&targets)
            .map(|(x, y)| {
                let p = 1.0 / (1.0 + (-x).exp());
                -(y * p.ln() + (1.0 - y) * (1.0 - p).max(1e-300).ln())
            })
            .sum::<f64>()
            / 5.0;
        assert!((got - expect).abs() < 1e-9, "{got} vs {expect}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1.0f64, 2.0, -1e9], [1000.0, 1000.0, 999.0]], &Device::Cpu).unwrap();
        let s = softmax_last(&x).unwrap().to_vec2::<f64>().unwrap();
        for row in s {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn standardizer_round_trip() {
        let s = Standardizer::fit(&[vec![1.0f32, 5.0], vec![3.0, 5.0]]);
        assert_eq!(s.mean, vec![2.0, 5.0]);
        assert_eq!(s.scale, vec![1.0, 1.0]);
        assert_eq!(Standardizer::from_array(&s.to_array()).unwrap(), s);
    }
}
