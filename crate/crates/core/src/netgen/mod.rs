//! Brain-network generation from voxel vectors.
//!
//! Node features come from the bottleneck of a voxel autoencoder. Edge
//! features come from the T1 branch of a dual encoder trained to align T1
//! and FA views of the same tract in a shared projection space.

mod models;
mod train;

use std::sync::Arc;

use candle_core::{DType, Device, Tensor, D};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use models::{EdgeContrastiveModel, NetgenModels, NodeAutoencoderModel};
pub use train::{
    reconstruction_loss, retrieval_accuracy, train_edge_contrastive, train_node_autoencoder,
    EdgePairs, EdgeTrainReport, NetgenConfig, NodeVoxels,
};

use crate::datamodel::{
    AtlasTopology, BrainNetwork, LongitudinalSubject, Matrix, Modality, Visit, VoxelKind,
    VoxelSource, VoxelVector, FEATURE_DIM, VOXEL_LEN,
};
use crate::error::{Error, Result};
use crate::nn::scalar;

pub const DEFAULT_TEMPERATURE: f64 = 0.01;
pub const PROJECTION_DIM: usize = 128;
pub const ENCODER_WIDTHS: [usize; 5] = [VOXEL_LEN, 1024, 512, 128, FEATURE_DIM];

/// Brings a raw voxel list to `target` entries: zero-pads short inputs and
/// draws an order-preserving uniform subsample from long ones.
pub fn pad_and_sample(raw: &[f32], target: usize, seed: u64) -> Result<Vec<f32>> {
    if let Some(i) = raw.iter().position(|v| !v.is_finite()) {
        return Err(Error::validation("voxels", format!("non-finite value at index {i}")));
    }
    if raw.len() <= target {
        let mut out = raw.to_vec();
        out.resize(target, 0.0);
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = sample(&mut rng, raw.len(), target).into_vec();
    keep.sort_unstable();
    Ok(keep.into_iter().map(|i| raw[i]).collect())
}

/// Variants of the contrastive objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ContrastiveOptions {
    /// Average the a→b and b→a directions.
    pub symmetric: bool,
    /// Keep the positive pair in the softmax denominator.
    pub include_positive: bool,
}

impl Default for ContrastiveOptions {
    fn default() -> Self {
        Self {
            symmetric: true,
            include_positive: true,
        }
    }
}

fn unit_rows(z: &Tensor, which: &str) -> Result<Tensor> {
    let norms = z.sqr()?.sum_keepdim(1)?.sqrt()?;
    let host = norms.to_dtype(DType::F64)?.flatten_all()?.to_vec1::<f64>()?;
    if let Some(i) = host.iter().position(|n| !(*n > 1e-12)) {
        return Err(Error::validation(
            which,
            format!("row {i} has norm {}; cosine similarity is undefined", host[i]),
        ));
    }
    Ok(z.broadcast_div(&norms)?)
}

fn logsumexp_rows(s: &Tensor) -> Result<Tensor> {
    let max = s.max_keepdim(D::Minus1)?.detach();
    Ok((s.broadcast_sub(&max)?.exp()?.sum_keepdim(D::Minus1)?.log()? + max)?.squeeze(D::Minus1)?)
}

/// Temperature-scaled cross-modal InfoNCE loss over a batch of aligned rows.
///
/// Row `i` of `za` is the positive for row `i` of `zb`; every other row of
/// the batch is a negative. Differentiable in both inputs.
pub fn contrastive_loss(za: &Tensor, zb: &Tensor, tau: f64, opts: ContrastiveOptions) -> Result<Tensor> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::validation("tau", format!("temperature must be > 0, got {tau}")));
    }
    let (n, d) = za.dims2()?;
    if zb.dims2()? != (n, d) {
        return Err(Error::validation(
            "batch",
            format!("shapes {:?} and {:?} are not paired", za.dims(), zb.dims()),
        ));
    }
    if n == 0 {
        return Err(Error::validation("batch", "empty batch"));
    }
    if n == 1 && !opts.include_positive {
        return Err(Error::validation("batch", "a single pair has no negatives"));
    }
    let a = unit_rows(za, "Z_a")?;
    let b = unit_rows(zb, "Z_b")?;
    let s = (a.matmul(&b.t()?)? / tau)?;
    let eye = Tensor::eye(n, s.dtype(), s.device())?;
    let positive = (&s * &eye)?.sum(1)?;
    let masked = |m: &Tensor| -> Result<Tensor> {
        if opts.include_positive {
            Ok(m.clone())
        } else {
            Ok((m + (&eye * -1e30)?)?)
        }
    };
    let forward = (logsumexp_rows(&masked(&s)?)? - &positive)?.mean_all()?;
    if !opts.symmetric {
        return Ok(forward);
    }
    let backward = (logsumexp_rows(&masked(&s.t()?)?)? - &positive)?.mean_all()?;
    Ok(((forward + backward)? * 0.5)?)
}

/// [`contrastive_loss`] on plain matrices, evaluated in double precision.
pub fn contrastive_loss_value(za: &Matrix, zb: &Matrix, tau: f64, opts: ContrastiveOptions) -> Result<f64> {
    let to = |m: &Matrix| -> Result<Tensor> {
        let data: Vec<f64> = m.as_slice().iter().map(|v| *v as f64).collect();
        Ok(Tensor::from_vec(data, m.shape(), &Device::Cpu)?)
    };
    scalar(&contrastive_loss(&to(za)?, &to(zb)?, tau, opts)?)
}

/// 32-wide node feature from the autoencoder bottleneck.
pub fn encode_node(model: &NodeAutoencoderModel, v: &VoxelVector) -> Result<Vec<f32>> {
    if v.kind != VoxelKind::Node {
        return Err(Error::validation("voxel kind", "encode_node expects a node vector"));
    }
    let m = Matrix::from_vec(1, VOXEL_LEN, v.values().to_vec())?;
    Ok(model.encode_batch(&m)?.into_vec())
}

/// 32-wide edge feature: the T1 encoder output before the projection head.
pub fn encode_edge(model: &EdgeContrastiveModel, v: &VoxelVector) -> Result<Vec<f32>> {
    if v.kind != VoxelKind::Edge || v.modality != Modality::T1 {
        return Err(Error::validation("voxel", "encode_edge expects a T1 edge vector"));
    }
    let m = Matrix::from_vec(1, VOXEL_LEN, v.values().to_vec())?;
    Ok(model.encode_t1_batch(&m)?.into_vec())
}

/// Packs per-region and per-tract features into a network over `topology`.
pub fn assemble_graph(
    topology: Arc<AtlasTopology>,
    node_features: Matrix,
    edge_features: Matrix,
    subject_id: &str,
    visit: u32,
) -> Result<BrainNetwork> {
    BrainNetwork::new(topology, node_features, edge_features, subject_id, visit)
}

/// Builds the network of one scan of `source`.
pub fn build_network(models: &NetgenModels, source: &dyn VoxelSource, subject: usize, visit: usize) -> Result<BrainNetwork> {
    let rec = &source.records()[subject];
    let nodes = models.node.encode_batch(&source.node_voxels(subject, visit)?)?;
    let edges = models.edge.encode_t1_batch(&source.edge_voxels(subject, visit, Modality::T1)?)?;
    assemble_graph(
        source.topology(),
        nodes,
        edges,
        &rec.subject_id,
        rec.visits[visit].visit_index,
    )
}

/// Builds every network of a cohort, one subject at a time.
pub fn build_graphs(models: &NetgenModels, source: &dyn VoxelSource) -> Result<Vec<LongitudinalSubject>> {
    build_graphs_for(models, source, &(0..source.records().len()).collect::<Vec<_>>())
}

pub fn build_graphs_for(
    models: &NetgenModels,
    source: &dyn VoxelSource,
    subjects: &[usize],
) -> Result<Vec<LongitudinalSubject>> {
    let mut out = Vec::with_capacity(subjects.len());
    for (k, &s) in subjects.iter().enumerate() {
        let rec = source
            .records()
            .get(s)
            .ok_or_else(|| Error::validation("subject", format!("index {s} out of range")))?;
        let visits = rec
            .visits
            .iter()
            .enumerate()
            .map(|(vi, v)| {
                Ok(Visit {
                    visit_index: v.visit_index,
                    age: v.age,
                    network: build_network(models, source, s, vi)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.push(LongitudinalSubject::new(
            rec.subject_id.clone(),
            rec.group,
            visits,
            rec.conversion_label,
        )?);
        if (k + 1) % 50 == 0 {
            log::info!("built networks for {}/{} subjects", k + 1, subjects.len());
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mat(rows: &[&[f32]]) -> Matrix {
        Matrix::from_rows(rows).unwrap()
    }

    #[test]
    fn short_input_is_zero_padded() {
        let raw: Vec<f32> = (0..1200).map(|i| i as f32 + 1.0).collect();
        let out = pad_and_sample(&raw, 3000, 0).unwrap();
        assert_eq!(out.len(), 3000);
        assert_eq!(&out[..1200], &raw[..]);
        assert!(out[1200..].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn exact_length_is_identity() {
        let raw: Vec<f32> = (0..3000).map(|i| (i as f32).sin()).collect();
        assert_eq!(pad_and_sample(&raw, 3000, 9).unwrap(), raw);
    }

    #[test]
    fn long_input_is_an_order_preserving_subset() {
        let raw: Vec<f32> = (0..5000).map(|i| i as f32).collect();
        let a = pad_and_sample(&raw, 3000, 4).unwrap();
        assert_eq!(a, pad_and_sample(&raw, 3000, 4).unwrap());
        assert_eq!(a.len(), 3000);
        // Values equal their source index, so a strictly increasing output is
        // an in-order subsequence without repeats.
        assert!(a.windows(2).all(|w| w[0] < w[1]));
        assert_ne!(a, pad_and_sample(&raw, 3000, 5).unwrap());
    }

    #[test]
    fn non_finite_voxels_are_rejected() {
        assert!(matches!(pad_and_sample(&[1.0, f32::INFINITY], 3000, 0), Err(Error::Validation { .. })));
    }

    #[test]
    fn single_pair_loss_is_zero() {
        let l = contrastive_loss_value(&mat(&[&[0.3, -2.0]]), &mat(&[&[5.0, 1.0]]), 0.01, Default::default()).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn two_orthogonal_pairs_hand_value() {
        let a = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let expect = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        let l = contrastive_loss_value(&a, &a, 1.0, Default::default()).unwrap();
        assert!((l - expect).abs() < 1e-12);
        assert!((expect - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn identical_rows_give_log_n() {
        let row: &[f32] = &[0.5, -1.0, 2.0];
        let a = mat(&[row; 6]);
        let l = contrastive_loss_value(&a, &a, 0.01, Default::default()).unwrap();
        assert!((l - 6f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn zero_row_is_a_validation_error() {
        let a = mat(&[&[1.0, 0.0], &[0.0, 0.0]]);
        let b = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(matches!(
            contrastive_loss_value(&a, &b, 0.1, Default::default()),
            Err(Error::Validation { .. })
        ));
        assert!(contrastive_loss_value(&b, &b, 0.0, Default::default()).is_err());
        assert!(contrastive_loss_value(&b, &mat(&[&[1.0, 0.0]]), 0.1, Default::default()).is_err());
    }

    #[test]
    fn one_directional_form_matches_hand_value() {
        // Similarities chosen so the two directions differ.
        let a = mat(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let b = mat(&[&[1.0, 0.0], &[1.0, 1.0]]);
        let opts = ContrastiveOptions {
            symmetric: false,
            include_positive: true,
        };
        let c = std::f64::consts::FRAC_1_SQRT_2;
        let row0 = -(1f64.exp() / (1f64.exp() + c.exp())).ln();
        let row1 = -(c.exp() / (0f64.exp() + c.exp())).ln();
        let l = contrastive_loss_value(&a, &b, 1.0, opts).unwrap();
        assert!((l - (row0 + row1) / 2.0).abs() < 1e-7, "{l}");
    }
}
