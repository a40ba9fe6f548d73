//! Healthy-ageing trajectory model: a variational autoencoder conditioned
//! on a one-hot age gap, and a graph decoder that turns predicted features
//! back into a full network.

use std::cell::Cell;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    read_array, write_array, AtlasTopology, BrainNetwork, GraphFeature, Matrix, FEATURE_DIM,
    GRAPH_FEATURE_DIM, NODE_COUNT,
};
use crate::error::{Error, Result};
use crate::nn::{
    fit, load_descriptor, load_params, mse, rows_tensor, save_model, scalar, steps_per_epoch, Activation,
    Init, Linear, Mlp, ParamStore, Standardizer, TrainConfig, TrainHistory,
};
use crate::synth::stream;

pub const LATENT_DIM: usize = 16;
pub const GAP_WIDTH: usize = 16;
pub const NODE_DECODER_WIDTHS: [usize; 4] = [GRAPH_FEATURE_DIM, 512, 1024, NODE_COUNT * FEATURE_DIM];
pub const EDGE_DECODER_WIDTHS: [usize; 5] = [2 * FEATURE_DIM, 64, 128, 64, FEATURE_DIM];

/// One-hot encoding of an age gap `n` in visit intervals.
pub fn one_hot_gap(n: usize, width: usize) -> Result<Vec<f32>> {
    if n == 0 || n > width {
        return Err(Error::validation("gap", format!("{n} outside 1..={width}")));
    }
    let mut v = vec![0.0; width];
    v[n - 1] = 1.0;
    Ok(v)
}

/// `KL(N(μ, σ²) ‖ N(0, I))` summed over latent dimensions and averaged over
/// the batch.
pub fn kl_divergence(mu: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    let terms = ((logvar.exp()? + mu.sqr()?)? - logvar)?.affine(1.0, -1.0)?;
    Ok((terms.sum(1)?.mean_all()? * 0.5)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PredictMode {
    /// Decode the posterior mean; deterministic.
    Mean,
    /// Decode a reparameterised sample drawn from a seeded stream.
    Sample { seed: u64 },
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct VaeDescriptor {
    kind: String,
    encoder_widths: Vec<usize>,
    latent_dim: usize,
    gap_width: usize,
    decoder_widths: Vec<usize>,
    beta: f64,
    activation: Activation,
}

/// `F_t → (μ, log σ²) → z ‖ onehot(n) → F'_{t+n}`, in standardised units.
#[derive(Clone, Debug)]
pub struct AgingVaeModel {
    store: ParamStore,
    hidden: Linear,
    mu: Linear,
    logvar: Linear,
    decoder: Mlp,
    activation: Activation,
    beta: f64,
    norm: Standardizer,
    trained: bool,
}

impl AgingVaeModel {
    pub fn new(beta: f64, activation: Activation, seed: u64, dtype: DType) -> Result<Self> {
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::Config(format!("beta must be >= 0, got {beta}")));
        }
        let mut rng = stream(seed, &[0x5641]);
        let mut store = ParamStore::new(dtype);
        let hidden = Linear::new(&mut store, "encoder.0", GRAPH_FEATURE_DIM, 64, true, Init::He, &mut rng)?;
        let mu = Linear::new(&mut store, "encoder.mu", 64, LATENT_DIM, true, Init::Default, &mut rng)?;
        let logvar = Linear::new(&mut store, "encoder.logvar", 64, LATENT_DIM, true, Init::Default, &mut rng)?;
        let decoder = Mlp::new(&mut store, "decoder", &[LATENT_DIM + GAP_WIDTH, 64, GRAPH_FEATURE_DIM], activation, &mut rng)?;
        Ok(Self {
            store,
            hidden,
            mu,
            logvar,
            decoder,
            activation,
            beta,
            norm: Standardizer::identity(GRAPH_FEATURE_DIM),
            trained: false,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn normalization(&self) -> &Standardizer {
        &self.norm
    }

    pub fn set_normalization(&mut self, norm: Standardizer) {
        self.norm = norm;
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn set_trained(&mut self) {
        self.trained = true;
    }

    fn ensure_trained(&self) -> Result<()> {
        if self.trained {
            Ok(())
        } else {
            Err(Error::State("ageing model has not been trained or loaded".into()))
        }
    }

    /// Posterior parameters for standardised features `B x 256`.
    pub fn encode(&self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.activation.apply(&self.hidden.forward(x)?)?;
        Ok((self.mu.forward(&h)?, self.logvar.forward(&h)?))
    }

    /// Standardised prediction from latent `B x 16` and gap codes `B x 16`.
    pub fn decode(&self, z: &Tensor, gap: &Tensor) -> Result<Tensor> {
        self.decoder.forward(&Tensor::cat(&[z, gap], 1)?)
    }

    /// Standardised prediction, posterior mean and log-variance. `eps`
    /// (`B x 16` standard normal) selects sampling; `None` decodes the mean.
    pub fn forward(&self, x: &Tensor, gap: &Tensor, eps: Option<&Tensor>) -> Result<(Tensor, Tensor, Tensor)> {
        let (mu, logvar) = self.encode(x)?;
        let z = match eps {
            Some(e) => (&mu + (logvar.affine(0.5, 0.0)?.exp()? * e)?)?,
            None => mu.clone(),
        };
        Ok((self.decode(&z, gap)?, mu, logvar))
    }

    pub fn standardize(&self, rows: &[&[f32]]) -> Result<Tensor> {
        let (m, s) = self.norm.tensors(self.store.dtype())?;
        Ok(rows_tensor(rows, self.store.dtype())?.broadcast_sub(&m)?.broadcast_div(&s)?)
    }

    pub fn unstandardize(&self, t: &Tensor) -> Result<Tensor> {
        let (m, s) = self.norm.tensors(self.store.dtype())?;
        Ok(t.broadcast_mul(&s)?.broadcast_add(&m)?)
    }

    /// The objective `MSE + β·KL` on standardised inputs and targets.
    pub fn loss(&self, x: &Tensor, gap: &Tensor, target: &Tensor, eps: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
        let (pred, mu, logvar) = self.forward(x, gap, eps)?;
        let kl = kl_divergence(&mu, &logvar)?;
        let total = (mse(&pred, target)? + (&kl * self.beta)?)?;
        Ok((total, pred))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.ensure_trained()?;
        let d = VaeDescriptor {
            kind: "aging_vae".into(),
            encoder_widths: vec![GRAPH_FEATURE_DIM, 64],
            latent_dim: LATENT_DIM,
            gap_width: GAP_WIDTH,
            decoder_widths: self.decoder.widths(),
            beta: self.beta,
            activation: self.activation,
        };
        save_model(dir, &d, &self.store)?;
        write_array(&dir.join("feature_norm.f32"), &[2, GRAPH_FEATURE_DIM], &self.norm.to_array())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let d: VaeDescriptor = load_descriptor(dir)?;
        if d.kind != "aging_vae" || d.latent_dim != LATENT_DIM || d.gap_width != GAP_WIDTH {
            return Err(Error::load(dir, "not an ageing VAE with the expected widths"));
        }
        let mut m = Self::new(d.beta, d.activation, 0, DType::F32)?;
        load_params(dir, &m.store)?;
        m.norm = Standardizer::from_array(&read_array(&dir.join("feature_norm.f32"))?.1)?;
        m.trained = true;
        Ok(m)
    }
}

fn gap_tensor(gaps: &[usize], dtype: DType) -> Result<Tensor> {
    let rows = gaps.iter().map(|&n| one_hot_gap(n, GAP_WIDTH)).collect::<Result<Vec<_>>>()?;
    rows_tensor(&rows, dtype)
}

fn normal_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, dtype: DType) -> Result<Tensor> {
    let data: Vec<f32> = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(data, (rows, cols), &Device::Cpu)?.to_dtype(dtype)?)
}

/// Predicts `F'_{t+n}` for a batch of features and gaps.
pub fn vae_predict_batch(model: &AgingVaeModel, features: &[&[f32]], gaps: &[usize], mode: PredictMode) -> Result<Vec<Vec<f32>>> {
    model.ensure_trained()?;
    if features.len() != gaps.len() {
        return Err(Error::validation("gaps", "one gap per feature is required"));
    }
    if features.is_empty() {
        return Ok(Vec::new());
    }
    let dtype = model.store.dtype();
    let x = model.standardize(features)?;
    let gap = gap_tensor(gaps, dtype)?;
    let eps = match mode {
        PredictMode::Mean => None,
        PredictMode::Sample { seed } => Some(normal_tensor(&mut stream(seed, &[0x5641, 2]), features.len(), LATENT_DIM, dtype)?),
    };
    let (pred, _, _) = model.forward(&x, &gap, eps.as_ref())?;
    let out = model.unstandardize(&pred)?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
    for row in &out {
        crate::error::ensure_finite("predicted feature", row)?;
    }
    Ok(out)
}

/// Predicts the feature `n` visit intervals after `f`.
pub fn vae_predict(model: &AgingVaeModel, f: &GraphFeature, n: usize, mode: PredictMode) -> Result<GraphFeature> {
    let v = vae_predict_batch(model, &[f.values()], &[n], mode)?.remove(0);
    GraphFeature::new(v, f.subject_id.clone(), f.visit + n as u32)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct DecoderDescriptor {
    kind: String,
    node_widths: Vec<usize>,
    edge_widths: Vec<usize>,
    activation: Activation,
}

/// Node MLP `256 → 68·32` and a shared edge MLP on endpoint embeddings.
#[derive(Clone, Debug)]
pub struct GraphDecoderModel {
    store: ParamStore,
    node: Mlp,
    edge: Mlp,
    activation: Activation,
    feature_norm: Standardizer,
    node_norm: Standardizer,
    edge_norm: Standardizer,
    trained: bool,
}

/// Endpoint index tensors for a topology.
struct Endpoints {
    u: Tensor,
    v: Tensor,
}

impl Endpoints {
    fn new(t: &AtlasTopology) -> Result<Self> {
        let (u, v): (Vec<u32>, Vec<u32>) = t.edges().iter().map(|&(a, b)| (a as u32, b as u32)).unzip();
        let n = u.len();
        Ok(Self {
            u: Tensor::from_vec(u, n, &Device::Cpu)?,
            v: Tensor::from_vec(v, n, &Device::Cpu)?,
        })
    }
}

impl GraphDecoderModel {
    pub fn new(activation: Activation, seed: u64, dtype: DType) -> Result<Self> {
        let mut rng = stream(seed, &[0x4744]);
        let mut store = ParamStore::new(dtype);
        let node = Mlp::new(&mut store, "node", &NODE_DECODER_WIDTHS, activation, &mut rng)?;
        let edge = Mlp::new(&mut store, "edge", &EDGE_DECODER_WIDTHS, activation, &mut rng)?;
        Ok(Self {
            store,
            node,
            edge,
            activation,
            feature_norm: Standardizer::identity(GRAPH_FEATURE_DIM),
            node_norm: Standardizer::identity(FEATURE_DIM),
            edge_norm: Standardizer::identity(FEATURE_DIM),
            trained: false,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn set_trained(&mut self) {
        self.trained = true;
    }

    pub fn set_normalization(&mut self, feature: Standardizer, node: Standardizer, edge: Standardizer) {
        self.feature_norm = feature;
        self.node_norm = node;
        self.edge_norm = edge;
    }

    fn ensure_trained(&self) -> Result<()> {
        if self.trained {
            Ok(())
        } else {
            Err(Error::State("graph decoder has not been trained or loaded".into()))
        }
    }

    /// Standardised node `B x 68 x 32` and edge `B x M x 32` outputs for
    /// standardised features `B x 256`.
    fn forward(&self, f: &Tensor, ends: &Endpoints) -> Result<(Tensor, Tensor)> {
        let b = f.dims2()?.0;
        let nodes = self.node.forward(f)?.reshape((b, NODE_COUNT, FEATURE_DIM))?;
        let pair = Tensor::cat(&[&nodes.index_select(&ends.u, 1)?, &nodes.index_select(&ends.v, 1)?], 2)?;
        let edges = self.edge.forward(&pair)?;
        Ok((nodes, edges))
    }

    fn standardize_features(&self, rows: &[&[f32]]) -> Result<Tensor> {
        let (m, s) = self.feature_norm.tensors(self.store.dtype())?;
        Ok(rows_tensor(rows, self.store.dtype())?.broadcast_sub(&m)?.broadcast_div(&s)?)
    }

    /// Standardised node and edge targets `B x 68 x 32`, `B x M x 32`.
    fn targets(&self, graphs: &[&BrainNetwork]) -> Result<(Tensor, Tensor)> {
        let dtype = self.store.dtype();
        let stack = |pick: &dyn Fn(&BrainNetwork) -> &Matrix, norm: &Standardizer| -> Result<Tensor> {
            let (r, c) = pick(graphs[0]).shape();
            let mut data = Vec::with_capacity(graphs.len() * r * c);
            for g in graphs {
                data.extend_from_slice(pick(g).as_slice());
            }
            let (m, s) = norm.tensors(dtype)?;
            Ok(Tensor::from_vec(data, (graphs.len(), r, c), &Device::Cpu)?
                .to_dtype(dtype)?
                .broadcast_sub(&m)?
                .broadcast_div(&s)?)
        };
        Ok((stack(&|g| g.node_features(), &self.node_norm)?, stack(&|g| g.edge_features(), &self.edge_norm)?))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.ensure_trained()?;
        let d = DecoderDescriptor {
            kind: "graph_decoder".into(),
            node_widths: self.node.widths(),
            edge_widths: self.edge.widths(),
            activation: self.activation,
        };
        save_model(dir, &d, &self.store)?;
        write_array(&dir.join("feature_norm.f32"), &[2, GRAPH_FEATURE_DIM], &self.feature_norm.to_array())?;
        write_array(&dir.join("node_norm.f32"), &[2, FEATURE_DIM], &self.node_norm.to_array())?;
        write_array(&dir.join("edge_norm.f32"), &[2, FEATURE_DIM], &self.edge_norm.to_array())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let d: DecoderDescriptor = load_descriptor(dir)?;
        if d.kind != "graph_decoder" || d.node_widths != NODE_DECODER_WIDTHS || d.edge_widths != EDGE_DECODER_WIDTHS {
            return Err(Error::load(dir, "not a graph decoder with the expected widths"));
        }
        let mut m = Self::new(d.activation, 0, DType::F32)?;
        load_params(dir, &m.store)?;
        let norm = |name: &str| -> Result<Standardizer> { Standardizer::from_array(&read_array(&dir.join(name))?.1) };
        m.feature_norm = norm("feature_norm.f32")?;
        m.node_norm = norm("node_norm.f32")?;
        m.edge_norm = norm("edge_norm.f32")?;
        m.trained = true;
        Ok(m)
    }
}

/// Reconstructs a full network from a (predicted) feature. Edge `(u, v)`
/// is decoded from the concatenation of embedding `u` then embedding `v`.
pub fn decode_graph(decoder: &GraphDecoderModel, f: &GraphFeature, topology: std::sync::Arc<AtlasTopology>) -> Result<BrainNetwork> {
    decoder.ensure_trained()?;
    let ends = Endpoints::new(&topology)?;
    let x = decoder.standardize_features(&[f.values()])?;
    let (nodes, edges) = decoder.forward(&x, &ends)?;
    let undo = |t: &Tensor, norm: &Standardizer| -> Result<Matrix> {
        let (m, s) = norm.tensors(decoder.store.dtype())?;
        let t = t.squeeze(0)?.broadcast_mul(&s)?.broadcast_add(&m)?;
        crate::nn::tensor_matrix(&t)
    };
    let node_m = undo(&nodes, &decoder.node_norm)?;
    let edge_m = undo(&edges, &decoder.edge_norm)?;
    if !node_m.is_finite() || !edge_m.is_finite() {
        return Err(Error::Numerical("decoded network contains NaN or Inf".into()));
    }
    BrainNetwork::new(topology, node_m, edge_m, &f.subject_id, f.visit)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VaeConfig {
    pub train: TrainConfig,
    pub beta: f64,
    /// Weight of the graph reconstruction term.
    pub lambda_g: f64,
    pub activation: Activation,
    /// Graphs per step that receive the decoder loss; the full network
    /// reconstruction dominates the step cost.
    pub decoder_graphs_per_step: usize,
    /// Fraction of subjects held out for early stopping.
    pub val_fraction: f64,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                batch_size: 32,
                ..TrainConfig::default()
            },
            beta: 0.001,
            lambda_g: 1.0,
            activation: Activation::Relu,
            decoder_graphs_per_step: 4,
            val_fraction: 0.2,
        }
    }
}

/// One training subject for the ageing model: encoded features and the
/// networks they came from, ordered by visit.
pub struct TrajectorySubject<'a> {
    pub features: Vec<GraphFeature>,
    pub visit_indices: Vec<u32>,
    pub networks: Vec<&'a BrainNetwork>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct VaeTrainReport {
    pub history: TrainHistory,
    pub skipped_subjects: usize,
    pub training_pairs: usize,
}

/// Ordered visit pairs `(subject, t, t+n)` with `n ≥ 1`.
fn visit_pairs(subjects: &[&TrajectorySubject]) -> Vec<(usize, usize, usize, usize)> {
    let mut out = Vec::new();
    for (s, subj) in subjects.iter().enumerate() {
        let v = &subj.visit_indices;
        for a in 0..v.len() {
            for b in a + 1..v.len() {
                out.push((s, a, b, (v[b] - v[a]) as usize));
            }
        }
    }
    out
}

/// Trains the ageing VAE and the graph decoder together on healthy subjects.
///
/// The decoder sees the VAE's prediction detached, so its loss does not
/// pull on the trajectory model.
pub fn train_vae(subjects: &[TrajectorySubject], cfg: &VaeConfig) -> Result<(AgingVaeModel, GraphDecoderModel, VaeTrainReport)> {
    let tc = &cfg.train;
    tc.validate()?;
    if !(cfg.lambda_g >= 0.0) {
        return Err(Error::Config("lambda_g must be >= 0".into()));
    }
    for s in subjects {
        if s.features.len() != s.visit_indices.len() || s.networks.len() != s.features.len() {
            return Err(Error::validation("trajectory subject", "features, visits and networks must align"));
        }
        if s.visit_indices.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::validation("visit_indices", "must be strictly increasing"));
        }
    }
    let usable: Vec<&TrajectorySubject> = subjects.iter().filter(|s| s.features.len() >= 2).collect();
    let skipped = subjects.len() - usable.len();
    if skipped > 0 {
        log::info!("ageing model: skipped {skipped} single-visit subjects");
    }
    if usable.is_empty() {
        return Err(Error::Config("no subject has two or more visits".into()));
    }
    let mut rng = stream(tc.seed, &[0x5641, 1]);
    let n_val = ((usable.len() as f64 * cfg.val_fraction).round() as usize).min(usable.len() - 1);
    let perm = sample(&mut rng, usable.len(), usable.len()).into_vec();
    let mut val_subj: Vec<usize> = perm[..n_val].to_vec();
    let mut train_subj: Vec<usize> = perm[n_val..].to_vec();
    val_subj.sort_unstable();
    train_subj.sort_unstable();
    let train_set: Vec<&TrajectorySubject> = train_subj.iter().map(|&i| usable[i]).collect();
    let val_set: Vec<&TrajectorySubject> = val_subj.iter().map(|&i| usable[i]).collect();

    let dtype = DType::F32;
    let mut vae = AgingVaeModel::new(cfg.beta, cfg.activation, tc.seed, dtype)?;
    let mut dec = GraphDecoderModel::new(cfg.activation, tc.seed, dtype)?;
    let feats: Vec<&[f32]> = train_set.iter().flat_map(|s| s.features.iter().map(|f| f.values())).collect();
    let fnorm = Standardizer::fit(&feats);
    let nets: Vec<&BrainNetwork> = train_set.iter().flat_map(|s| s.networks.iter().copied()).collect();
    let node_rows: Vec<&[f32]> = nets.iter().flat_map(|g| (0..g.node_features().rows()).map(move |r| g.node_features().row(r))).collect();
    let edge_rows: Vec<&[f32]> = nets.iter().flat_map(|g| (0..g.edge_features().rows()).map(move |r| g.edge_features().row(r))).collect();
    vae.set_normalization(fnorm.clone());
    dec.set_normalization(fnorm, Standardizer::fit(&node_rows), Standardizer::fit(&edge_rows));
    drop((node_rows, edge_rows, nets, feats));

    let topology = usable[0].networks[0].topology().clone();
    let ends = Endpoints::new(&topology)?;
    let train_pairs = visit_pairs(&train_set);
    let val_pairs = visit_pairs(&val_set);
    let joint = ParamStore::merged(&[vae.store(), dec.store()])?;

    // (standardised input, gap code, standardised target) for a list of pairs.
    let batch = |set: &[&TrajectorySubject], pairs: &[(usize, usize, usize, usize)]| -> Result<(Tensor, Tensor, Tensor)> {
        let x: Vec<&[f32]> = pairs.iter().map(|p| set[p.0].features[p.1].values()).collect();
        let y: Vec<&[f32]> = pairs.iter().map(|p| set[p.0].features[p.2].values()).collect();
        let gaps: Vec<usize> = pairs.iter().map(|p| p.3).collect();
        Ok((vae.standardize(&x)?, gap_tensor(&gaps, dtype)?, vae.standardize(&y)?))
    };
    let graph_loss = |set: &[&TrajectorySubject], pairs: &[(usize, usize, usize, usize)], pred: &Tensor| -> Result<Tensor> {
        let graphs: Vec<&BrainNetwork> = pairs.iter().map(|p| set[p.0].networks[p.2]).collect();
        let (tn, te) = dec.targets(&graphs)?;
        // The decoder consumes predictions in its own standardised units,
        // which share the VAE's feature statistics.
        let (pn, pe) = dec.forward(pred, &ends)?;
        Ok((mse(&pn, &tn)? + mse(&pe, &te)?)?)
    };
    let val_graph_pairs: Vec<(usize, usize, usize, usize)> = {
        let k = val_pairs.len().min(16);
        let pick = sample(&mut rng, val_pairs.len(), k).into_vec();
        pick.into_iter().map(|i| val_pairs[i]).collect()
    };

    let steps = steps_per_epoch(tc, train_pairs.len());
    let last_train = Cell::new(f64::NAN);
    let history = fit(
        &joint,
        tc,
        "ageing model",
        |_, opt| {
            let order = sample(&mut rng, train_pairs.len(), train_pairs.len()).into_vec();
            let mut sum = 0.0;
            for step in 0..steps {
                let start = (step * tc.batch_size) % order.len();
                let idx = &order[start..(start + tc.batch_size).min(order.len())];
                let pairs: Vec<_> = idx.iter().map(|&i| train_pairs[i]).collect();
                let (x, gap, y) = batch(&train_set, &pairs)?;
                let eps = normal_tensor(&mut rng, pairs.len(), LATENT_DIM, dtype)?;
                let (mut loss, pred) = vae.loss(&x, &gap, &y, Some(&eps))?;
                if cfg.lambda_g > 0.0 {
                    let k = cfg.decoder_graphs_per_step.min(pairs.len());
                    if k > 0 {
                        let g = graph_loss(&train_set, &pairs[..k], &pred.narrow(0, 0, k)?.detach())?;
                        loss = (loss + (g * cfg.lambda_g)?)?;
                    }
                }
                sum += opt.step(&loss)?;
            }
            last_train.set(sum / steps as f64);
            Ok(last_train.get())
        },
        || {
            if val_pairs.is_empty() {
                return Ok(last_train.get());
            }
            let (x, gap, y) = batch(&val_set, &val_pairs)?;
            let (loss, _) = vae.loss(&x, &gap, &y, None)?;
            let mut total = scalar(&loss)?;
            if cfg.lambda_g > 0.0 && !val_graph_pairs.is_empty() {
                let (x, gap, _) = batch(&val_set, &val_graph_pairs)?;
                let (pred, _, _) = vae.forward(&x, &gap, None)?;
                total += cfg.lambda_g * scalar(&graph_loss(&val_set, &val_graph_pairs, &pred)?)?;
            }
            Ok(total)
        },
    )?;
    vae.trained = true;
    dec.trained = true;
    Ok((
        vae,
        dec,
        VaeTrainReport {
            history,
            skipped_subjects: skipped,
            training_pairs: train_pairs.len(),
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_hot_edges() {
        let a = one_hot_gap(1, 16).unwrap();
        assert_eq!(a[0], 1.0);
        assert_eq!(a.iter().sum::<f32>(), 1.0);
        let b = one_hot_gap(16, 16).unwrap();
        assert_eq!(b[15], 1.0);
        assert!(one_hot_gap(17, 16).is_err());
        assert!(one_hot_gap(0, 16).is_err());
    }

    #[test]
    fn kl_is_zero_at_standard_normal_and_positive_elsewhere() {
        let dev = Device::Cpu;
        let zero = Tensor::zeros((3, 4), DType::F64, &dev).unwrap();
        assert_eq!(scalar(&kl_divergence(&zero, &zero).unwrap()).unwrap(), 0.0);
        let mu = Tensor::new(&[[0.5f64, -1.0]], &dev).unwrap();
        let lv = Tensor::new(&[[0.3f64, -0.7]], &dev).unwrap();
        let got = scalar(&kl_divergence(&mu, &lv).unwrap()).unwrap();
        let expect: f64 = [(0.5f64, 0.3f64), (-1.0, -0.7)]
            .iter()
            .map(|(m, l)| 0.5 * (l.exp() + m * m - 1.0 - l))
            .sum();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn untrained_models_are_state_errors() {
        let vae = AgingVaeModel::new(0.001, Activation::Relu, 0, DType::F32).unwrap();
        let f = GraphFeature::new(vec![0.0; 256], "s", 0).unwrap();
        assert!(matches!(vae_predict(&vae, &f, 1, PredictMode::Mean), Err(Error::State(_))));
        let dec = GraphDecoderModel::new(Activation::Relu, 0, DType::F32).unwrap();
        assert!(matches!(decode_graph(&dec, &f, AtlasTopology::canonical()), Err(Error::State(_))));
    }
}
