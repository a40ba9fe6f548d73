use std::cell::Cell;

use candle_core::DType;
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{contrastive_loss, ContrastiveOptions, EdgeContrastiveModel, NodeAutoencoderModel, DEFAULT_TEMPERATURE};
use crate::datamodel::{Matrix, Modality, VoxelSource, EDGE_COUNT, NODE_COUNT, VOXEL_LEN};
use crate::error::{Error, Result};
use crate::nn::{fit, matrix_tensor, mse, scalar, steps_per_epoch, Activation, TrainConfig, TrainHistory};
use crate::synth::stream;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetgenConfig {
    pub node: TrainConfig,
    pub edge: TrainConfig,
    pub temperature: f64,
    pub symmetric: bool,
    pub include_positive: bool,
    pub activation: Activation,
    /// Node vectors held out for validation loss.
    pub node_val_size: usize,
    /// Validation batches (of `edge.batch_size` pairs) for loss and retrieval.
    pub edge_val_batches: usize,
}

impl Default for NetgenConfig {
    fn default() -> Self {
        let base = TrainConfig {
            batch_size: 64,
            steps_per_epoch: Some(25),
            ..TrainConfig::default()
        };
        Self {
            node: base.clone(),
            edge: base,
            temperature: DEFAULT_TEMPERATURE,
            symmetric: true,
            include_positive: true,
            activation: Activation::Relu,
            node_val_size: 512,
            edge_val_batches: 8,
        }
    }
}

impl NetgenConfig {
    pub fn options(&self) -> ContrastiveOptions {
        ContrastiveOptions {
            symmetric: self.symmetric,
            include_positive: self.include_positive,
        }
    }
}

/// A pool of node voxel vectors.
pub enum NodeVoxels<'a> {
    Matrix(Matrix),
    /// Every region of the listed `(subject, visit)` scans.
    Source {
        source: &'a dyn VoxelSource,
        scans: Vec<(usize, usize)>,
    },
}

impl NodeVoxels<'_> {
    pub fn len(&self) -> usize {
        match self {
            NodeVoxels::Matrix(m) => m.rows(),
            NodeVoxels::Source { scans, .. } => scans.len() * NODE_COUNT,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn rows(&self, idx: &[usize]) -> Result<Matrix> {
        match self {
            NodeVoxels::Matrix(m) => {
                if m.cols() != VOXEL_LEN {
                    return Err(Error::validation("node voxels", format!("width {} != {VOXEL_LEN}", m.cols())));
                }
                Ok(m.select_rows(idx))
            }
            NodeVoxels::Source { source, scans } => {
                let rows = idx
                    .iter()
                    .map(|&i| {
                        let (s, v) = scans[i / NODE_COUNT];
                        source.node_voxel(s, v, i % NODE_COUNT).map(|x| x.into_values())
                    })
                    .collect::<Result<Vec<_>>>()?;
                Matrix::from_rows(&rows)
            }
        }
    }
}

/// Aligned (T1, FA) tract vector pairs.
pub enum EdgePairs<'a> {
    Matrix { t1: Matrix, fa: Matrix },
    Source {
        source: &'a dyn VoxelSource,
        scans: Vec<(usize, usize)>,
    },
}

impl<'a> EdgePairs<'a> {
    pub fn from_matrices(t1: Matrix, fa: Matrix) -> Result<Self> {
        if t1.rows() != fa.rows() {
            return Err(Error::validation(
                "edge pairs",
                format!("{} T1 rows but {} FA rows; inputs are unpaired", t1.rows(), fa.rows()),
            ));
        }
        if t1.cols() != VOXEL_LEN || fa.cols() != VOXEL_LEN {
            return Err(Error::validation("edge pairs", format!("vectors must have length {VOXEL_LEN}")));
        }
        Ok(EdgePairs::Matrix { t1, fa })
    }

    pub fn from_source(source: &'a dyn VoxelSource, scans: Vec<(usize, usize)>) -> Result<Self> {
        if let Some(&(s, v)) = scans.iter().find(|&&(s, v)| !source.has_fa(s, v)) {
            return Err(Error::validation(
                "edge pairs",
                format!("scan ({s}, {v}) has no FA vectors to pair with"),
            ));
        }
        Ok(EdgePairs::Source { source, scans })
    }

    pub fn len(&self) -> usize {
        match self {
            EdgePairs::Matrix { t1, .. } => t1.rows(),
            EdgePairs::Source { scans, .. } => scans.len() * EDGE_COUNT,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Draws `n` pairs. For cohort sources the tracts are distinct so no
    /// batch contains two views of the same tract as false negatives.
    fn sample(&self, rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
        match self {
            EdgePairs::Matrix { t1, .. } => sample(rng, t1.rows(), n.min(t1.rows())).into_vec(),
            EdgePairs::Source { scans, .. } => sample(rng, EDGE_COUNT, n.min(EDGE_COUNT))
                .into_iter()
                .map(|e| rng.random_range(0..scans.len()) * EDGE_COUNT + e)
                .collect(),
        }
    }

    pub fn batch(&self, idx: &[usize]) -> Result<(Matrix, Matrix)> {
        match self {
            EdgePairs::Matrix { t1, fa } => Ok((t1.select_rows(idx), fa.select_rows(idx))),
            EdgePairs::Source { source, scans } => {
                let mut a = Vec::with_capacity(idx.len());
                let mut b = Vec::with_capacity(idx.len());
                for &i in idx {
                    let (s, v) = scans[i / EDGE_COUNT];
                    a.push(source.edge_voxel(s, v, i % EDGE_COUNT, Modality::T1)?.into_values());
                    b.push(source.edge_voxel(s, v, i % EDGE_COUNT, Modality::FA)?.into_values());
                }
                Ok((Matrix::from_rows(&a)?, Matrix::from_rows(&b)?))
            }
        }
    }
}

/// Mean squared reconstruction error of `model` on `x`.
pub fn reconstruction_loss(model: &NodeAutoencoderModel, x: &Matrix) -> Result<f64> {
    let mut total = 0.0;
    let mut start = 0;
    while start < x.rows() {
        let end = (start + 256).min(x.rows());
        let idx: Vec<usize> = (start..end).collect();
        let t = matrix_tensor(&x.select_rows(&idx), model.store().dtype())?;
        total += scalar(&mse(&model.reconstruct(&t)?, &t)?)? * (end - start) as f64;
        start = end;
    }
    Ok(total / x.rows().max(1) as f64)
}

fn batch_indices(rng: &mut ChaCha8Rng, n: usize, batch: usize, step: usize, order: &[usize], sampled: bool) -> Vec<usize> {
    if sampled {
        sample(rng, n, batch.min(n)).into_vec()
    } else {
        let start = (step * batch) % n.max(1);
        order[start..(start + batch).min(n)].to_vec()
    }
}

fn shuffled(rng: &mut ChaCha8Rng, n: usize) -> Vec<usize> {
    sample(rng, n, n).into_vec()
}

/// Trains the node autoencoder on a mean-squared reconstruction objective.
pub fn train_node_autoencoder(
    train: &NodeVoxels,
    val: Option<&NodeVoxels>,
    cfg: &TrainConfig,
    activation: Activation,
    val_size: usize,
) -> Result<(NodeAutoencoderModel, TrainHistory)> {
    if train.is_empty() {
        return Err(Error::Config("node autoencoder training set is empty".into()));
    }
    cfg.validate()?;
    let mut model = NodeAutoencoderModel::new(activation, cfg.seed, DType::F32)?;
    let mut rng = stream(cfg.seed, &[0x4e41, 1]);
    let val_x = match val.filter(|v| !v.is_empty()) {
        Some(v) => Some(v.rows(&sample(&mut rng, v.len(), val_size.min(v.len())).into_vec())?),
        None => None,
    };
    let n = train.len();
    let steps = steps_per_epoch(cfg, n);
    let sampled = cfg.steps_per_epoch.is_some();
    let history = {
        let m = &model;
        let last_train = Cell::new(f64::NAN);
        fit(
            m.store(),
            cfg,
            "node autoencoder",
            |_, opt| {
                let order = if sampled { Vec::new() } else { shuffled(&mut rng, n) };
                let mut sum = 0.0;
                for step in 0..steps {
                    let idx = batch_indices(&mut rng, n, cfg.batch_size, step, &order, sampled);
                    let x = matrix_tensor(&train.rows(&idx)?, m.store().dtype())?;
                    sum += opt.step(&mse(&m.reconstruct(&x)?, &x)?)?;
                }
                last_train.set(sum / steps as f64);
                Ok(last_train.get())
            },
            || match &val_x {
                Some(v) => reconstruction_loss(m, v),
                None => Ok(last_train.get()),
            },
        )?
    };
    model.mark_trained();
    Ok((model, history))
}

/// Top-1 cross-modal retrieval: the fraction of rows of `a` whose most
/// cosine-similar row of `b` is their own partner.
pub fn retrieval_accuracy(a: &Matrix, b: &Matrix) -> Result<f64> {
    if a.shape() != b.shape() || a.rows() == 0 {
        return Err(Error::validation("retrieval", "inputs must be non-empty and paired"));
    }
    let unit = |m: &Matrix| -> Vec<Vec<f64>> {
        (0..m.rows())
            .map(|i| {
                let r = m.row(i);
                let n = r.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt().max(1e-30);
                r.iter().map(|x| *x as f64 / n).collect()
            })
            .collect()
    };
    let (ua, ub) = (unit(a), unit(b));
    let hits = ua
        .iter()
        .enumerate()
        .filter(|(i, x)| {
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            for (j, y) in ub.iter().enumerate() {
                let s: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
                if s > best.0 {
                    best = (s, j);
                }
            }
            best.1 == *i
        })
        .count();
    Ok(hits as f64 / a.rows() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EdgeTrainReport {
    pub history: TrainHistory,
    /// Held-out top-1 retrieval per epoch.
    pub val_retrieval: Vec<f64>,
    /// Held-out retrieval of the restored best model.
    pub retrieval: f64,
}

/// Trains the dual encoder with the contrastive objective on minibatches of
/// `cfg.edge.batch_size` aligned pairs.
pub fn train_edge_contrastive(
    train: &EdgePairs,
    val: Option<&EdgePairs>,
    cfg: &NetgenConfig,
) -> Result<(EdgeContrastiveModel, EdgeTrainReport)> {
    let tc = &cfg.edge;
    if train.len() < 2 {
        return Err(Error::Config("contrastive training needs at least two pairs".into()));
    }
    tc.validate()?;
    let mut model = EdgeContrastiveModel::new(cfg.activation, cfg.temperature, tc.seed, DType::F32)?;
    let mut rng = stream(tc.seed, &[0x4543, 1]);
    let val_batches = match val.filter(|v| v.len() >= 2) {
        Some(v) => (0..cfg.edge_val_batches.max(1))
            .map(|_| {
                let idx = v.sample(&mut rng, tc.batch_size);
                v.batch(&idx)
            })
            .collect::<Result<Vec<_>>>()?,
        None => Vec::new(),
    };
    let dtype = model.store().dtype();
    let opts = cfg.options();
    let steps = steps_per_epoch(tc, train.len());
    let mut report = EdgeTrainReport::default();
    let evaluate = |m: &EdgeContrastiveModel| -> Result<(f64, f64)> {
        let mut loss = 0.0;
        let mut acc = 0.0;
        for (a, b) in &val_batches {
            let za = m.project_t1(&matrix_tensor(a, dtype)?)?;
            let zb = m.project_fa(&matrix_tensor(b, dtype)?)?;
            loss += scalar(&contrastive_loss(&za, &zb, m.temperature(), opts)?)?;
            acc += retrieval_accuracy(&crate::nn::tensor_matrix(&za)?, &crate::nn::tensor_matrix(&zb)?)?;
        }
        let k = val_batches.len().max(1) as f64;
        Ok((loss / k, acc / k))
    };
    report.history = {
        let m = &model;
        let last_train = Cell::new(f64::NAN);
        let retr = &mut report.val_retrieval;
        fit(
            m.store(),
            tc,
            "edge contrastive",
            |_, opt| {
                let mut sum = 0.0;
                for _ in 0..steps {
                    let idx = train.sample(&mut rng, tc.batch_size);
                    let (a, b) = train.batch(&idx)?;
                    let za = m.project_t1(&matrix_tensor(&a, dtype)?)?;
                    let zb = m.project_fa(&matrix_tensor(&b, dtype)?)?;
                    sum += opt.step(&contrastive_loss(&za, &zb, m.temperature(), opts)?)?;
                }
                last_train.set(sum / steps as f64);
                Ok(last_train.get())
            },
            || {
                if val_batches.is_empty() {
                    return Ok(last_train.get());
                }
                let (loss, acc) = evaluate(m)?;
                retr.push(acc);
                Ok(loss)
            },
        )?
    };
    if !val_batches.is_empty() {
        report.retrieval = evaluate(&model)?.1;
    }
    model.mark_trained();
    Ok((model, report))
}
