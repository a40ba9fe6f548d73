//! Graph attention encoder: three edge-aware multi-head attention layers and
//! mean pooling to a 256-wide graph feature, pretrained on AD/CN labels.

use std::cell::Cell;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use rand::seq::index::sample;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    write_array, read_array, AtlasTopology, BrainNetwork, GraphFeature, FEATURE_DIM, GRAPH_FEATURE_DIM,
};
use crate::error::{Error, Result};
use crate::nn::{
    bce_with_logits, fit, leaky_relu, load_descriptor, load_params, save_model, scalar, sigmoid,
    softmax_last, steps_per_epoch, stratified_holdout, Activation, Init, Linear, ParamStore, Standardizer, TrainConfig,
    TrainHistory,
};
use crate::synth::stream;

/// Additive logit for node pairs that share no edge.
const MASKED: f64 = -1e9;
/// Graphs per forward pass at inference.
const INFER_CHUNK: usize = 32;

/// Dense lookup from node pairs to edge rows, with self-loops.
///
/// Cell `(i, j)` holds the row of the undirected edge `{i, j}` in the edge
/// feature matrix, or `edge_count` (a zero padding row) for self-loops and
/// non-adjacent pairs. Non-adjacent pairs are masked out of the softmax.
#[derive(Clone, Debug)]
pub struct GraphIndex {
    nodes: usize,
    edges: usize,
    cells: Tensor,
    mask: Tensor,
}

impl GraphIndex {
    pub fn new(nodes: usize, edges: &[(usize, usize)], dtype: DType) -> Result<Self> {
        crate::datamodel::check_edges(nodes, edges)
            .map_err(|v| Error::validation("edges", v.to_string()))?;
        let pad = edges.len() as u32;
        let mut cells = vec![pad; nodes * nodes];
        let mut mask = vec![MASKED; nodes * nodes];
        for i in 0..nodes {
            mask[i * nodes + i] = 0.0;
        }
        for (k, &(u, v)) in edges.iter().enumerate() {
            for (a, b) in [(u, v), (v, u)] {
                cells[a * nodes + b] = k as u32;
                mask[a * nodes + b] = 0.0;
            }
        }
        Ok(Self {
            nodes,
            edges: edges.len(),
            cells: Tensor::from_vec(cells, nodes * nodes, &Device::Cpu)?,
            mask: Tensor::from_vec(mask, (nodes, nodes), &Device::Cpu)?.to_dtype(dtype)?,
        })
    }

    pub fn for_topology(t: &AtlasTopology, dtype: DType) -> Result<Self> {
        Self::new(t.node_count(), t.edges(), dtype)
    }

    pub fn nodes(&self) -> usize {
        self.nodes
    }

    pub fn edges(&self) -> usize {
        self.edges
    }
}

/// One multi-head attention layer whose logits also see edge features:
///
/// ```text
/// e_ij^h  = LeakyReLU(a_dst^h · W^h x_i + a_src^h · W^h x_j + w_e^h · f_ij)
/// x'_i    = ‖_h Σ_j softmax_j(e_ij^h) W^h x_j + b
/// ```
#[derive(Clone, Debug)]
pub struct GatLayer {
    weight: Linear,
    edge: Linear,
    att_src: Tensor,
    att_dst: Tensor,
    bias: Tensor,
    heads: usize,
    head_dim: usize,
}

impl GatLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        edge_dim: usize,
        heads: usize,
        head_dim: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let out = heads * head_dim;
        let weight = Linear::new(store, &format!("{name}.weight"), in_dim, out, false, Init::Default, rng)?;
        let edge = Linear::new(store, &format!("{name}.edge"), edge_dim, heads, false, Init::Default, rng)?;
        let bound = (6.0 / (head_dim + 1) as f64).sqrt();
        let att_src = store.uniform(&format!("{name}.att_src"), &[heads, head_dim], bound, rng)?;
        let att_dst = store.uniform(&format!("{name}.att_dst"), &[heads, head_dim], bound, rng)?;
        let bias = store.zeros(&format!("{name}.bias"), &[out])?;
        Ok(Self {
            weight,
            edge,
            att_src,
            att_dst,
            bias,
            heads,
            head_dim,
        })
    }

    /// Builds a layer from explicit tensors: `weight` is `in x heads·head_dim`,
    /// `edge` is `edge_dim x heads`, attention vectors are `heads x head_dim`.
    pub fn from_tensors(weight: Tensor, edge: Tensor, att_src: Tensor, att_dst: Tensor, bias: Tensor) -> Result<Self> {
        let (heads, head_dim) = att_src.dims2()?;
        Ok(Self {
            weight: Linear::from_tensors(weight, None),
            edge: Linear::from_tensors(edge, None),
            att_src,
            att_dst,
            bias,
            heads,
            head_dim,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    /// `x` is `B x N x in`, `e` is `B x M x edge_dim`. Returns the layer
    /// output `B x N x out` and the attention `B x heads x N x N`, where
    /// row `i` of a head holds node `i`'s weights over its neighbours.
    pub fn forward(&self, x: &Tensor, e: &Tensor, index: &GraphIndex) -> Result<(Tensor, Tensor)> {
        let (b, n, _) = x.dims3()?;
        let (h, f) = (self.heads, self.head_dim);
        if n != index.nodes || e.dims3()?.1 != index.edges {
            return Err(Error::validation("graph", "feature counts do not match the graph index"));
        }
        let wx = self.weight.forward(x)?.reshape((b, n, h, f))?;
        let s_src = wx.broadcast_mul(&self.att_src.reshape((1, 1, h, f))?)?.sum(3)?.transpose(1, 2)?;
        let s_dst = wx.broadcast_mul(&self.att_dst.reshape((1, 1, h, f))?)?.sum(3)?.transpose(1, 2)?;
        let edge_logit = self.edge.forward(e)?;
        let padded = Tensor::cat(&[&edge_logit, &Tensor::zeros((b, 1, h), edge_logit.dtype(), edge_logit.device())?], 1)?;
        let cells = padded
            .index_select(&index.cells, 1)?
            .reshape((b, n, n, h))?
            .permute((0, 3, 1, 2))?;
        let logits = cells
            .broadcast_add(&s_dst.unsqueeze(3)?)?
            .broadcast_add(&s_src.unsqueeze(2)?)?;
        let logits = leaky_relu(&logits, 0.2)?.broadcast_add(&index.mask)?;
        let alpha = softmax_last(&logits.contiguous()?)?;
        let values = wx.transpose(1, 2)?.contiguous()?;
        let out = alpha
            .matmul(&values)?
            .transpose(1, 2)?
            .reshape((b, n, h * f))?
            .broadcast_add(&self.bias)?;
        Ok((out, alpha))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub train: TrainConfig,
    pub heads: usize,
    /// Widths of the two hidden attention layers.
    pub hidden: [usize; 2],
    pub activation: Activation,
    /// Fraction of the training cohort held out for early stopping.
    pub val_fraction: f64,
    /// Chance that a training graph borrows the node features of another
    /// graph in its batch, so the classifier cannot lean on node cues alone.
    pub node_swap: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                learning_rate: 2e-3,
                batch_size: 16,
                max_epochs: 300,
                min_delta: 1e-4,
                ..TrainConfig::default()
            },
            heads: 4,
            hidden: [64, 128],
            activation: Activation::Elu,
            val_fraction: 0.2,
            node_swap: 0.5,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct EncoderDescriptor {
    kind: String,
    widths: Vec<usize>,
    heads: usize,
    activation: Activation,
}

/// Three attention layers, mean pooling and a logistic head.
#[derive(Clone, Debug)]
pub struct GraphEncoderModel {
    store: ParamStore,
    layers: Vec<GatLayer>,
    head: Linear,
    activation: Activation,
    heads: usize,
    widths: Vec<usize>,
    node_norm: Standardizer,
    edge_norm: Standardizer,
    trained: bool,
}

impl GraphEncoderModel {
    pub fn new(heads: usize, hidden: [usize; 2], activation: Activation, seed: u64, dtype: DType) -> Result<Self> {
        let widths = vec![FEATURE_DIM, hidden[0], hidden[1], GRAPH_FEATURE_DIM];
        if heads == 0 || widths.iter().any(|w| w % heads != 0) {
            return Err(Error::Config(format!("layer widths {widths:?} must be divisible by {heads} heads")));
        }
        let mut rng = stream(seed, &[0x4741]);
        let mut store = ParamStore::new(dtype);
        let layers = (0..3)
            .map(|i| GatLayer::new(&mut store, &format!("gat{i}"), widths[i], FEATURE_DIM, heads, widths[i + 1] / heads, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let head = Linear::new(&mut store, "head", GRAPH_FEATURE_DIM, 1, true, Init::Default, &mut rng)?;
        Ok(Self {
            store,
            layers,
            head,
            activation,
            heads,
            widths,
            node_norm: Standardizer::identity(FEATURE_DIM),
            edge_norm: Standardizer::identity(FEATURE_DIM),
            trained: false,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn layers(&self) -> &[GatLayer] {
        &self.layers
    }

    pub fn head(&self) -> &Linear {
        &self.head
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    /// Marks the model usable without training (for tests and probes).
    pub fn set_trained(&mut self) {
        self.trained = true;
    }

    /// Replaces the classifier head, e.g. with zero weights.
    pub fn set_head(&mut self, head: Linear) {
        self.head = head;
    }

    pub fn set_normalization(&mut self, node: Standardizer, edge: Standardizer) {
        self.node_norm = node;
        self.edge_norm = edge;
    }

    fn ensure_trained(&self) -> Result<()> {
        if self.trained {
            Ok(())
        } else {
            Err(Error::State("graph encoder has not been trained or loaded".into()))
        }
    }

    /// Standardised `B x 68 x 32` node and `B x M x 32` edge tensors.
    pub fn prepare(&self, graphs: &[&BrainNetwork]) -> Result<(Tensor, Tensor)> {
        let dtype = self.store.dtype();
        let stack = |pick: &dyn Fn(&BrainNetwork) -> &crate::datamodel::Matrix, norm: &Standardizer| -> Result<Tensor> {
            let first = pick(graphs[0]);
            let (r, c) = first.shape();
            let mut data = Vec::with_capacity(graphs.len() * r * c);
            for g in graphs {
                data.extend_from_slice(pick(g).as_slice());
            }
            let t = Tensor::from_vec(data, (graphs.len(), r, c), &Device::Cpu)?.to_dtype(dtype)?;
            let (m, s) = norm.tensors(dtype)?;
            Ok(t.broadcast_sub(&m)?.broadcast_div(&s)?)
        };
        if graphs.is_empty() {
            return Err(Error::validation("graphs", "empty batch"));
        }
        Ok((
            stack(&|g| g.node_features(), &self.node_norm)?,
            stack(&|g| g.edge_features(), &self.edge_norm)?,
        ))
    }

    /// Pooled `B x 256` features and per-layer attention.
    pub fn forward(&self, x: &Tensor, e: &Tensor, index: &GraphIndex) -> Result<(Tensor, Vec<Tensor>)> {
        let mut h = x.clone();
        let mut attn = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let (out, a) = layer.forward(&h, e, index)?;
            h = if i + 1 < self.layers.len() { self.activation.apply(&out)? } else { out };
            attn.push(a);
        }
        Ok((h.mean(1)?, attn))
    }

    /// Classifier logits `B` for pooled features `B x 256`.
    pub fn logits(&self, pooled: &Tensor) -> Result<Tensor> {
        Ok(self.head.forward(pooled)?.squeeze(1)?)
    }

    fn index_for(&self, graphs: &[&BrainNetwork]) -> Result<GraphIndex> {
        let t = graphs[0].topology();
        if graphs.iter().any(|g| !std::sync::Arc::ptr_eq(g.topology(), t) && **g.topology() != **t) {
            return Err(Error::validation("topology", "a batch must share one topology"));
        }
        GraphIndex::for_topology(t, self.store.dtype())
    }

    /// Pooled features for a set of graphs sharing one topology.
    pub fn encode_batch(&self, graphs: &[&BrainNetwork]) -> Result<Vec<Vec<f32>>> {
        self.ensure_trained()?;
        if graphs.is_empty() {
            return Ok(Vec::new());
        }
        let index = self.index_for(graphs)?;
        let mut out = Vec::with_capacity(graphs.len());
        for chunk in graphs.chunks(INFER_CHUNK) {
            let (x, e) = self.prepare(chunk)?;
            let (pooled, _) = self.forward(&x, &e, &index)?;
            out.extend(pooled.to_dtype(DType::F32)?.to_vec2::<f32>()?);
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.ensure_trained()?;
        let d = EncoderDescriptor {
            kind: "graph_encoder".into(),
            widths: self.widths.clone(),
            heads: self.heads,
            activation: self.activation,
        };
        save_model(dir, &d, &self.store)?;
        write_array(&dir.join("node_norm.f32"), &[2, FEATURE_DIM], &self.node_norm.to_array())?;
        write_array(&dir.join("edge_norm.f32"), &[2, FEATURE_DIM], &self.edge_norm.to_array())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Self::load_as(dir, DType::F32)
    }

    /// Loads a saved encoder computing in `dtype`.
    pub fn load_as(dir: &Path, dtype: DType) -> Result<Self> {
        let d: EncoderDescriptor = load_descriptor(dir)?;
        if d.kind != "graph_encoder" || d.widths.len() != 4 || d.widths[3] != GRAPH_FEATURE_DIM {
            return Err(Error::load(dir, "not a graph encoder with a 256-wide output"));
        }
        let mut m = Self::new(d.heads, [d.widths[1], d.widths[2]], d.activation, 0, dtype)?;
        load_params(dir, &m.store)?;
        m.node_norm = Standardizer::from_array(&read_array(&dir.join("node_norm.f32"))?.1)?;
        m.edge_norm = Standardizer::from_array(&read_array(&dir.join("edge_norm.f32"))?.1)?;
        m.trained = true;
        Ok(m)
    }
}

/// The 256-wide feature `F` of one network.
pub fn encode_graph(model: &GraphEncoderModel, g: &BrainNetwork) -> Result<GraphFeature> {
    let v = model.encode_batch(&[g])?.remove(0);
    GraphFeature::new(v, g.subject_id(), g.visit())
}

/// AD probability: the logistic head applied to [`encode_graph`].
pub fn classify(model: &GraphEncoderModel, g: &BrainNetwork) -> Result<f64> {
    model.ensure_trained()?;
    let f = encode_graph(model, g)?;
    classify_feature(model, &f)
}

/// The logistic head on an already encoded feature.
pub fn classify_feature(model: &GraphEncoderModel, f: &GraphFeature) -> Result<f64> {
    let t = Tensor::from_slice(f.values(), (1, GRAPH_FEATURE_DIM), &Device::Cpu)?.to_dtype(model.store.dtype())?;
    scalar(&sigmoid(&model.logits(&t)?)?)
}

pub fn classify_batch(model: &GraphEncoderModel, graphs: &[&BrainNetwork]) -> Result<Vec<f64>> {
    let feats = model.encode_batch(graphs)?;
    feats
        .into_iter()
        .map(|v| {
            let t = Tensor::from_vec(v, (1, GRAPH_FEATURE_DIM), &Device::Cpu)?.to_dtype(model.store.dtype())?;
            scalar(&sigmoid(&model.logits(&t)?)?)
        })
        .collect()
}

/// Per-layer attention of one graph, each `heads x N x N`.
pub fn attention_weights(model: &GraphEncoderModel, g: &BrainNetwork) -> Result<Vec<Vec<Vec<Vec<f32>>>>> {
    model.ensure_trained()?;
    let index = GraphIndex::for_topology(g.topology(), model.store.dtype())?;
    let (x, e) = model.prepare(&[g])?;
    let (_, attn) = model.forward(&x, &e, &index)?;
    attn.iter()
        .map(|a| Ok(a.squeeze(0)?.to_dtype(DType::F32)?.to_vec3::<f32>()?))
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EncoderTrainReport {
    pub history: TrainHistory,
    /// Accuracy on the internal validation split at the restored epoch.
    pub val_accuracy: f64,
}

/// Trains on labelled networks (AD = `true`) with binary cross-entropy.
pub fn train_encoder(
    cohort: &[(&BrainNetwork, bool)],
    cfg: &EncoderConfig,
) -> Result<(GraphEncoderModel, EncoderTrainReport)> {
    let labels: Vec<bool> = cohort.iter().map(|(_, l)| *l).collect();
    if !labels.iter().any(|l| *l) || labels.iter().all(|l| *l) {
        return Err(Error::Config("encoder training needs both AD and CN examples".into()));
    }
    let tc = &cfg.train;
    tc.validate()?;
    if !(0.0..=1.0).contains(&cfg.node_swap) {
        return Err(Error::validation("node_swap", "must lie in [0, 1]"));
    }
    let mut model = GraphEncoderModel::new(cfg.heads, cfg.hidden, cfg.activation, tc.seed, DType::F32)?;
    let mut rng = stream(tc.seed, &[0x4741, 1]);
    let (train_idx, val_idx) = stratified_holdout(&labels, cfg.val_fraction, &mut rng);
    let node_rows: Vec<&[f32]> = train_idx
        .iter()
        .flat_map(|&i| (0..cohort[i].0.node_features().rows()).map(move |r| cohort[i].0.node_features().row(r)))
        .collect();
    let edge_rows: Vec<&[f32]> = train_idx
        .iter()
        .flat_map(|&i| (0..cohort[i].0.edge_features().rows()).map(move |r| cohort[i].0.edge_features().row(r)))
        .collect();
    model.set_normalization(Standardizer::fit(&node_rows), Standardizer::fit(&edge_rows));
    drop((node_rows, edge_rows));

    let graphs: Vec<&BrainNetwork> = cohort.iter().map(|(g, _)| *g).collect();
    let index = model.index_for(&graphs)?;
    let dtype = model.store.dtype();
    let (all_x, all_e) = model.prepare(&graphs)?;
    let all_y = Tensor::from_vec(
        labels.iter().map(|l| if *l { 1f32 } else { 0.0 }).collect::<Vec<_>>(),
        labels.len(),
        &Device::Cpu,
    )?
    .to_dtype(dtype)?;
    let pick = |idx: &[usize]| -> Result<(Tensor, Tensor, Tensor)> {
        let ids = Tensor::from_vec(idx.iter().map(|&i| i as u32).collect::<Vec<_>>(), idx.len(), &Device::Cpu)?;
        Ok((all_x.index_select(&ids, 0)?, all_e.index_select(&ids, 0)?, all_y.index_select(&ids, 0)?))
    };
    // Donor rows for node features: `k` keeps its own, anything else borrows.
    let swap_rows = |rng: &mut ChaCha8Rng, n: usize| -> Vec<u32> {
        (0..n)
            .map(|k| if n > 1 && rng.random_bool(cfg.node_swap) { rng.random_range(0..n) as u32 } else { k as u32 })
            .collect()
    };
    // Validation loss is measured under a fixed swap so that stopping waits
    // for the edge path; accuracy is reported on clean graphs.
    let val_donors = swap_rows(&mut rng, val_idx.len());
    let evaluate = |m: &GraphEncoderModel, idx: &[usize], donors: Option<&[u32]>| -> Result<(f64, f64)> {
        let mut loss = 0.0;
        let mut correct = 0usize;
        for (c, chunk) in idx.chunks(INFER_CHUNK).enumerate() {
            let (mut x, e, y) = pick(chunk)?;
            if let Some(d) = donors {
                let rows: Vec<usize> = d[c * INFER_CHUNK..c * INFER_CHUNK + chunk.len()].iter().map(|&r| idx[r as usize]).collect();
                x = pick(&rows)?.0;
            }
            let (pooled, _) = m.forward(&x, &e, &index)?;
            let logits = m.logits(&pooled)?;
            loss += scalar(&bce_with_logits(&logits, &y)?)? * chunk.len() as f64;
            let lv = logits.to_dtype(DType::F32)?.to_vec1::<f32>()?;
            correct += chunk.iter().zip(&lv).filter(|(i, l)| (**l > 0.0) == labels[**i]).count();
        }
        Ok((loss / idx.len() as f64, correct as f64 / idx.len() as f64))
    };

    let steps = steps_per_epoch(tc, train_idx.len());
    let last_train = Cell::new(f64::NAN);
    let history = {
        let m = &model;
        fit(
            m.store(),
            tc,
            "graph encoder",
            |_, opt| {
                let order: Vec<usize> = sample(&mut rng, train_idx.len(), train_idx.len())
                    .into_iter()
                    .map(|k| train_idx[k])
                    .collect();
                let mut sum = 0.0;
                for step in 0..steps {
                    let start = (step * tc.batch_size) % order.len();
                    let batch = &order[start..(start + tc.batch_size).min(order.len())];
                    let (mut x, e, y) = pick(batch)?;
                    if cfg.node_swap > 0.0 {
                        let donors = swap_rows(&mut rng, batch.len());
                        x = x.index_select(&Tensor::from_vec(donors, batch.len(), &Device::Cpu)?, 0)?;
                    }
                    let (pooled, _) = m.forward(&x, &e, &index)?;
                    sum += opt.step(&bce_with_logits(&m.logits(&pooled)?, &y)?)?;
                }
                last_train.set(sum / steps as f64);
                Ok(last_train.get())
            },
            || {
                if val_idx.is_empty() {
                    Ok(last_train.get())
                } else {
                    Ok(evaluate(m, &val_idx, Some(&val_donors))?.0)
                }
            },
        )?
    };
    let val_accuracy = if val_idx.is_empty() { f64::NAN } else { evaluate(&model, &val_idx, None)?.1 };
    model.trained = true;
    Ok((model, EncoderTrainReport { history, val_accuracy }))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor {
        let r = rows.len();
        let c = rows[0].len();
        Tensor::from_vec(rows.concat(), (r, c), &Device::Cpu).unwrap()
    }

    /// Two nodes joined by one edge, one head, identity weights.
    #[test]
    fn two_node_layer_matches_hand_computation() {
        let layer = GatLayer::from_tensors(
            t2(&[&[1.0, 0.0], &[0.0, 1.0]]),
            t2(&[&[0.5]]),
            t2(&[&[1.0, 0.0]]),
            t2(&[&[0.0, 1.0]]),
            Tensor::zeros(2, DType::F64, &Device::Cpu).unwrap(),
        )
        .unwrap();
        let index = GraphIndex::new(2, &[(0, 1)], DType::F64).unwrap();
        let x = Tensor::from_vec(vec![1.0f64, 2.0, 3.0, -1.0], (1, 2, 2), &Device::Cpu).unwrap();
        let e = Tensor::from_vec(vec![2.0f64], (1, 1, 1), &Device::Cpu).unwrap();
        let (out, alpha) = layer.forward(&x, &e, &index).unwrap();

        let lrelu = |v: f64| if v > 0.0 { v } else { 0.2 * v };
        let xs = [[1.0, 2.0], [3.0, -1.0]];
        // logit(i <- j) = a_dst·x_i + a_src·x_j + edge term (1.0 on the edge, 0 on self-loops)
        let logit = |i: usize, j: usize| lrelu(xs[i][1] + xs[j][0] + if i == j { 0.0 } else { 1.0 });
        let mut expect_out = [[0.0; 2]; 2];
        let mut expect_alpha = [[0.0; 2]; 2];
        for i in 0..2 {
            let z: f64 = (0..2).map(|j| logit(i, j).exp()).sum();
            for j in 0..2 {
                expect_alpha[i][j] = logit(i, j).exp() / z;
                for d in 0..2 {
                    expect_out[i][d] += expect_alpha[i][j] * xs[j][d];
                }
            }
        }
        let got_out = out.squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        let got_alpha = alpha.squeeze(0).unwrap().squeeze(0).unwrap().to_vec2::<f64>().unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((got_alpha[i][j] - expect_alpha[i][j]).abs() < 1e-12);
                assert!((got_out[i][j] - expect_out[i][j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn isolated_node_attends_to_itself() {
        let mut store = ParamStore::new(DType::F64);
        let mut rng = stream(1, &[]);
        let layer = GatLayer::new(&mut store, "g", 3, 2, 2, 2, &mut rng).unwrap();
        let index = GraphIndex::new(3, &[(0, 1)], DType::F64).unwrap();
        let x = Tensor::ones((1, 3, 3), DType::F64, &Device::Cpu).unwrap();
        let e = Tensor::ones((1, 1, 2), DType::F64, &Device::Cpu).unwrap();
        let (out, alpha) = layer.forward(&x, &e, &index).unwrap();
        let a = alpha.squeeze(0).unwrap().to_vec3::<f64>().unwrap();
        for head in &a {
            assert_eq!(head[2], vec![0.0, 0.0, 1.0]);
            assert_eq!(head[0][2], 0.0);
        }
        assert!(out.flatten_all().unwrap().to_vec1::<f64>().unwrap().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn untrained_model_is_a_state_error() {
        let m = GraphEncoderModel::new(4, [64, 128], Activation::Elu, 0, DType::F32).unwrap();
        let g = BrainNetwork::new(
            AtlasTopology::canonical(),
            crate::datamodel::Matrix::zeros(68, 32),
            crate::datamodel::Matrix::zeros(2227, 32),
            "s",
            0,
        )
        .unwrap();
        assert!(matches!(encode_graph(&m, &g), Err(Error::State(_))));
    }

    #[test]
    fn holdout_is_stratified_and_disjoint() {
        let labels: Vec<bool> = (0..20).map(|i| i % 4 == 0).collect();
        let (tr, va) = stratified_holdout(&labels, 0.2, &mut stream(3, &[]));
        assert_eq!(tr.len() + va.len(), 20);
        assert!(tr.iter().all(|i| !va.contains(i)));
        assert_eq!(va.iter().filter(|&&i| labels[i]).count(), 1);
        assert_eq!(va.iter().filter(|&&i| !labels[i]).count(), 3);
    }
}
