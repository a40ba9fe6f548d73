use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use super::{ENCODER_WIDTHS, PROJECTION_DIM};
use crate::datamodel::{Matrix, VOXEL_LEN};
use crate::error::{Error, Result};
use crate::nn::{
    load_descriptor, load_params, matrix_tensor, save_model, tensor_matrix, Activation, Init, Linear, Mlp,
    ParamStore,
};
use crate::synth::stream;

/// Rows per forward pass at inference; bounds peak memory.
const INFER_CHUNK: usize = 512;

fn check_input(x: &Matrix) -> Result<()> {
    if x.cols() != VOXEL_LEN {
        return Err(Error::validation(
            "voxels",
            format!("input width {} != {VOXEL_LEN}", x.cols()),
        ));
    }
    if !x.is_finite() {
        return Err(Error::validation("voxels", "input contains NaN or Inf"));
    }
    Ok(())
}

/// Applies `f` to row chunks of `x` and stacks the results.
fn chunked(x: &Matrix, dtype: DType, f: impl Fn(&Tensor) -> Result<Tensor>) -> Result<Matrix> {
    let mut data = Vec::new();
    let mut cols = 0;
    let mut start = 0;
    while start < x.rows() {
        let end = (start + INFER_CHUNK).min(x.rows());
        let idx: Vec<usize> = (start..end).collect();
        let y = tensor_matrix(&f(&matrix_tensor(&x.select_rows(&idx), dtype)?)?)?;
        cols = y.cols();
        data.extend(y.into_vec());
        start = end;
    }
    Matrix::from_vec(x.rows(), cols, data)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct NodeAeDescriptor {
    kind: String,
    encoder_widths: Vec<usize>,
    decoder_widths: Vec<usize>,
    activation: Activation,
}

/// Voxel autoencoder `3000 → 32 → 3000`; the bottleneck is the node feature.
#[derive(Clone, Debug)]
pub struct NodeAutoencoderModel {
    store: ParamStore,
    encoder: Mlp,
    decoder: Mlp,
    activation: Activation,
    trained: bool,
}

impl NodeAutoencoderModel {
    /// Freshly initialised, untrained model.
    pub fn new(activation: Activation, seed: u64, dtype: DType) -> Result<Self> {
        let mut rng = stream(seed, &[0x4e41]);
        let mut store = ParamStore::new(dtype);
        let encoder = Mlp::new(&mut store, "encoder", &ENCODER_WIDTHS, activation, &mut rng)?;
        let mut rev = ENCODER_WIDTHS;
        rev.reverse();
        let decoder = Mlp::new(&mut store, "decoder", &rev, activation, &mut rng)?;
        Ok(Self {
            store,
            encoder,
            decoder,
            activation,
            trained: false,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub(crate) fn mark_trained(&mut self) {
        self.trained = true;
    }

    pub fn encoder_widths(&self) -> Vec<usize> {
        self.encoder.widths()
    }

    pub fn decoder_widths(&self) -> Vec<usize> {
        self.decoder.widths()
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.forward(x)
    }

    pub fn reconstruct(&self, x: &Tensor) -> Result<Tensor> {
        self.decoder.forward(&self.encoder.forward(x)?)
    }

    fn ensure_trained(&self) -> Result<()> {
        if self.trained {
            Ok(())
        } else {
            Err(Error::State("node autoencoder has not been trained or loaded".into()))
        }
    }

    /// Bottleneck features for each row of `x`.
    pub fn encode_batch(&self, x: &Matrix) -> Result<Matrix> {
        self.ensure_trained()?;
        check_input(x)?;
        chunked(x, self.store.dtype(), |t| self.encode(t))
    }

    pub fn reconstruct_batch(&self, x: &Matrix) -> Result<Matrix> {
        self.ensure_trained()?;
        check_input(x)?;
        chunked(x, self.store.dtype(), |t| self.reconstruct(t))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.ensure_trained()?;
        let d = NodeAeDescriptor {
            kind: "node_autoencoder".into(),
            encoder_widths: self.encoder.widths(),
            decoder_widths: self.decoder.widths(),
            activation: self.activation,
        };
        save_model(dir, &d, &self.store)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let d: NodeAeDescriptor = load_descriptor(dir)?;
        if d.kind != "node_autoencoder" || d.encoder_widths != ENCODER_WIDTHS {
            return Err(Error::load(dir, "not a node autoencoder with the expected widths"));
        }
        let mut m = Self::new(d.activation, 0, DType::F32)?;
        load_params(dir, &m.store)?;
        m.trained = true;
        Ok(m)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EdgeDescriptor {
    kind: String,
    encoder_widths: Vec<usize>,
    projection_dim: usize,
    temperature: f64,
    activation: Activation,
}

/// Dual encoder with per-modality projection heads.
#[derive(Clone, Debug)]
pub struct EdgeContrastiveModel {
    store: ParamStore,
    enc_t1: Mlp,
    enc_fa: Mlp,
    proj_t1: Linear,
    proj_fa: Linear,
    temperature: f64,
    activation: Activation,
    trained: bool,
}

impl EdgeContrastiveModel {
    pub fn new(activation: Activation, temperature: f64, seed: u64, dtype: DType) -> Result<Self> {
        if !(temperature > 0.0 && temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
        }
        let mut rng = stream(seed, &[0x4543]);
        let mut store = ParamStore::new(dtype);
        let enc_t1 = Mlp::new(&mut store, "t1_encoder", &ENCODER_WIDTHS, activation, &mut rng)?;
        let enc_fa = Mlp::new(&mut store, "fa_encoder", &ENCODER_WIDTHS, activation, &mut rng)?;
        let f = ENCODER_WIDTHS[4];
        let proj_t1 = Linear::new(&mut store, "t1_projection", f, PROJECTION_DIM, true, Init::Default, &mut rng)?;
        let proj_fa = Linear::new(&mut store, "fa_projection", f, PROJECTION_DIM, true, Init::Default, &mut rng)?;
        Ok(Self {
            store,
            enc_t1,
            enc_fa,
            proj_t1,
            proj_fa,
            temperature,
            activation,
            trained: false,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub(crate) fn mark_trained(&mut self) {
        self.trained = true;
    }

    pub fn encoder_widths(&self) -> Vec<usize> {
        self.enc_t1.widths()
    }

    pub fn projection_dim(&self) -> usize {
        self.proj_t1.out_dim()
    }

    pub fn encode_t1(&self, x: &Tensor) -> Result<Tensor> {
        self.enc_t1.forward(x)
    }

    pub fn encode_fa(&self, x: &Tensor) -> Result<Tensor> {
        self.enc_fa.forward(x)
    }

    pub fn project_t1(&self, x: &Tensor) -> Result<Tensor> {
        self.proj_t1.forward(&self.encode_t1(x)?)
    }

    pub fn project_fa(&self, x: &Tensor) -> Result<Tensor> {
        self.proj_fa.forward(&self.encode_fa(x)?)
    }

    fn ensure_trained(&self) -> Result<()> {
        if self.trained {
            Ok(())
        } else {
            Err(Error::State("edge encoder has not been trained or loaded".into()))
        }
    }

    /// 32-wide T1 features (pre-projection) for each row of `x`.
    pub fn encode_t1_batch(&self, x: &Matrix) -> Result<Matrix> {
        self.ensure_trained()?;
        check_input(x)?;
        chunked(x, self.store.dtype(), |t| self.encode_t1(t))
    }

    pub fn project_t1_batch(&self, x: &Matrix) -> Result<Matrix> {
        self.ensure_trained()?;
        check_input(x)?;
        chunked(x, self.store.dtype(), |t| self.project_t1(t))
    }

    pub fn project_fa_batch(&self, x: &Matrix) -> Result<Matrix> {
        self.ensure_trained()?;
        check_input(x)?;
        chunked(x, self.store.dtype(), |t| self.project_fa(t))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.ensure_trained()?;
        let d = EdgeDescriptor {
            kind: "edge_contrastive".into(),
            encoder_widths: self.enc_t1.widths(),
            projection_dim: self.projection_dim(),
            temperature: self.temperature,
            activation: self.activation,
        };
        save_model(dir, &d, &self.store)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let d: EdgeDescriptor = load_descriptor(dir)?;
        if d.kind != "edge_contrastive" || d.encoder_widths != ENCODER_WIDTHS || d.projection_dim != PROJECTION_DIM {
            return Err(Error::load(dir, "not an edge encoder with the expected widths"));
        }
        let mut m = Self::new(d.activation, d.temperature, 0, DType::F32)?;
        load_params(dir, &m.store)?;
        m.trained = true;
        Ok(m)
    }
}

/// The two trained network-generation models.
#[derive(Clone, Debug)]
pub struct NetgenModels {
    pub node: NodeAutoencoderModel,
    pub edge: EdgeContrastiveModel,
}

impl NetgenModels {
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.node.save(&dir.join("node_autoencoder"))?;
        self.edge.save(&dir.join("edge_contrastive"))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Self {
            node: NodeAutoencoderModel::load(&dir.join("node_autoencoder"))?,
            edge: EdgeContrastiveModel::load(&dir.join("edge_contrastive"))?,
        })
    }
}
