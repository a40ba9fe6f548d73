//! Residual networks between actual and healthily-aged predicted networks,
//! edge ranking and report export.

use std::fmt::Write as _;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::agingvae::{decode_graph, vae_predict, AgingVaeModel, GraphDecoderModel, PredictMode};
use crate::datamodel::{create_dir, write_json, AtlasTopology, BrainNetwork, LongitudinalSubject, Matrix};
use crate::error::{Error, Result};
use crate::graphencoder::{encode_graph, GraphEncoderModel};

pub const DEFAULT_FRACTION: f64 = 0.05;
pub const HISTOGRAM_BINS: usize = 20;

/// How per-dimension differences are averaged into one scalar.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Mean of absolute differences.
    #[default]
    MeanAbs,
    /// Absolute value of the mean signed difference; opposite-signed
    /// dimensions cancel.
    SignedMean,
}

/// What a residual network is compared against before ranking.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reference {
    /// Subtract the mean residual of healthy subjects over the same visit
    /// pair. The decoder's reconstruction error is shared by everyone and
    /// otherwise swamps the abnormal tracts.
    #[default]
    Healthy,
    /// Rank the raw residuals.
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualNetwork {
    pub edge: Vec<f64>,
    pub node: Vec<f64>,
    pub subject_id: String,
    pub visits: (u32, u32),
}

fn row_residuals(a: &Matrix, b: &Matrix, how: Averaging) -> Vec<f64> {
    (0..a.rows())
        .map(|r| {
            let (x, y) = (a.row(r), b.row(r));
            let n = x.len() as f64;
            match how {
                Averaging::MeanAbs => x.iter().zip(y).map(|(p, q)| (*p as f64 - *q as f64).abs()).sum::<f64>() / n,
                Averaging::SignedMean => (x.iter().zip(y).map(|(p, q)| *p as f64 - *q as f64).sum::<f64>() / n).abs(),
            }
        })
        .collect()
}

/// Per-edge and per-node residuals between two networks on the same
/// topology.
pub fn residual_network(actual: &BrainNetwork, predicted: &BrainNetwork, how: Averaging) -> Result<ResidualNetwork> {
    if actual.topology() != predicted.topology() {
        return Err(Error::validation("topology", "networks do not share a topology"));
    }
    Ok(ResidualNetwork {
        edge: row_residuals(actual.edge_features(), predicted.edge_features(), how),
        node: row_residuals(actual.node_features(), predicted.node_features(), how),
        subject_id: actual.subject_id().to_string(),
        visits: (predicted.visit(), actual.visit()),
    })
}

/// Elementwise mean of several residual networks.
/// `max(r − reference, 0)` per edge and node.
pub fn excess_over(r: &ResidualNetwork, reference: &ResidualNetwork) -> Result<ResidualNetwork> {
    if r.edge.len() != reference.edge.len() || r.node.len() != reference.node.len() {
        return Err(Error::validation("reference", "residual network lengths differ"));
    }
    let sub = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).max(0.0)).collect();
    Ok(ResidualNetwork {
        edge: sub(&r.edge, &reference.edge),
        node: sub(&r.node, &reference.node),
        subject_id: r.subject_id.clone(),
        visits: r.visits,
    })
}

pub fn mean_residual_network(items: &[ResidualNetwork], label: &str) -> Result<ResidualNetwork> {
    let first = items.first().ok_or_else(|| Error::validation("residual networks", "need at least one"))?;
    let avg = |pick: fn(&ResidualNetwork) -> &Vec<f64>| -> Result<Vec<f64>> {
        let len = pick(first).len();
        let mut acc = vec![0.0; len];
        for r in items {
            if pick(r).len() != len {
                return Err(Error::validation("residual networks", "length mismatch"));
            }
            for (a, v) in acc.iter_mut().zip(pick(r)) {
                *a += v;
            }
        }
        Ok(acc.into_iter().map(|a| a / items.len() as f64).collect())
    };
    Ok(ResidualNetwork {
        edge: avg(|r| &r.edge)?,
        node: avg(|r| &r.node)?,
        subject_id: label.to_string(),
        visits: first.visits,
    })
}

/// The `⌊fraction·M⌋` edges with the largest residuals, descending; ties go
/// to the lower index.
pub fn rank_edges(r: &ResidualNetwork, fraction: f64) -> Result<Vec<usize>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::validation("fraction", format!("{fraction} outside (0, 1]")));
    }
    if let Some(i) = r.edge.iter().position(|v| v.is_nan()) {
        return Err(Error::validation("residuals", format!("edge {i} is NaN")));
    }
    let k = (fraction * r.edge.len() as f64).floor() as usize;
    let mut idx: Vec<usize> = (0..r.edge.len()).collect();
    idx.sort_by(|&a, &b| r.edge[b].total_cmp(&r.edge[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Fraction of `ranked` that falls in `truth`.
pub fn precision_at(ranked: &[usize], truth: &[usize]) -> f64 {
    if ranked.is_empty() {
        return 0.0;
    }
    let set: std::collections::HashSet<usize> = truth.iter().copied().collect();
    ranked.iter().filter(|i| set.contains(i)).count() as f64 / ranked.len() as f64
}

/// Residual network of `subject` between visits `from` and `to`: the actual
/// network at `to` against the decoded healthy-ageing forecast from `from`.
pub fn subject_residual_network(
    subject: &LongitudinalSubject,
    from: usize,
    to: usize,
    encoder: &GraphEncoderModel,
    vae: &AgingVaeModel,
    decoder: &GraphDecoderModel,
    how: Averaging,
) -> Result<ResidualNetwork> {
    if from >= to || to >= subject.visits.len() {
        return Err(Error::validation("visit pair", format!("({from}, {to}) is not an ordered pair of visits")));
    }
    let (a, b) = (&subject.visits[from], &subject.visits[to]);
    let f = encode_graph(encoder, &a.network)?;
    let pred = vae_predict(vae, &f, (b.visit_index - a.visit_index) as usize, PredictMode::Mean)?;
    let decoded = decode_graph(decoder, &pred, Arc::clone(b.network.topology()))?;
    residual_network(&b.network, &decoded, how)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InterpretationSummary {
    pub subject_id: String,
    pub visits: (u32, u32),
    pub fraction: f64,
    pub ranked_edges: usize,
    pub max_residual: f64,
    pub mean_residual: f64,
    pub ranked_mean_residual: f64,
    pub precision_vs_truth: Option<f64>,
}

/// `(lower, upper, count)` bins over `[min, max]`.
pub fn histogram(values: &[f64], bins: usize) -> Vec<(f64, f64, usize)> {
    if values.is_empty() || bins == 0 {
        return Vec::new();
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let width = if hi > lo { (hi - lo) / bins as f64 } else { 1.0 };
    let mut counts = vec![0usize; bins];
    for v in values {
        let b = (((v - lo) / width) as usize).min(bins - 1);
        counts[b] += 1;
    }
    counts
        .into_iter()
        .enumerate()
        .map(|(i, c)| (lo + i as f64 * width, lo + (i + 1) as f64 * width, c))
        .collect()
}

/// Writes `ranked_edges.tsv`, `node_residuals.tsv`, `edge_histogram.tsv`
/// and `summary.json` into `dir`.
pub fn export_interpretation(
    r: &ResidualNetwork,
    ranked: &[usize],
    topology: &AtlasTopology,
    fraction: f64,
    truth: Option<&[usize]>,
    dir: &Path,
) -> Result<InterpretationSummary> {
    if r.edge.len() != topology.edge_count() || r.node.len() != topology.node_count() {
        return Err(Error::validation("residual network", "does not match the topology"));
    }
    if let Some(&bad) = ranked.iter().find(|&&i| i >= r.edge.len()) {
        return Err(Error::validation("ranked edges", format!("index {bad} out of range")));
    }
    create_dir(dir)?;
    let labels = topology.node_labels();
    let mut table = String::from("rank\tedge\tnode_u\tnode_v\tregion_u\tregion_v\tresidual\n");
    let mut in_top = vec![0usize; topology.node_count()];
    for (rank, &e) in ranked.iter().enumerate() {
        let (u, v) = topology.edges()[e];
        in_top[u] += 1;
        in_top[v] += 1;
        writeln!(table, "{}\t{e}\t{u}\t{v}\t{}\t{}\t{:.9e}", rank + 1, labels[u], labels[v], r.edge[e]).ok();
    }
    let write = |name: &str, text: &str| std::fs::write(dir.join(name), text).map_err(|e| Error::io(dir.join(name), e));
    write("ranked_edges.tsv", &table)?;

    // Per node: own residual, mean over incident edges, count among ranked edges.
    let mut incident = vec![(0.0f64, 0usize); topology.node_count()];
    for (e, &(u, v)) in topology.edges().iter().enumerate() {
        for n in [u, v] {
            incident[n].0 += r.edge[e];
            incident[n].1 += 1;
        }
    }
    let mut nodes = String::from("node\tregion\tnode_residual\tmean_incident_edge_residual\tranked_edge_count\n");
    for n in 0..topology.node_count() {
        let mean = if incident[n].1 > 0 { incident[n].0 / incident[n].1 as f64 } else { 0.0 };
        writeln!(nodes, "{n}\t{}\t{:.9e}\t{:.9e}\t{}", labels[n], r.node[n], mean, in_top[n]).ok();
    }
    write("node_residuals.tsv", &nodes)?;

    let mut hist = String::from("lower\tupper\tcount\n");
    for (lo, hi, c) in histogram(&r.edge, HISTOGRAM_BINS) {
        writeln!(hist, "{lo:.9e}\t{hi:.9e}\t{c}").ok();
    }
    write("edge_histogram.tsv", &hist)?;

    let mean = |v: &mut dyn Iterator<Item = f64>, n: usize| if n == 0 { 0.0 } else { v.sum::<f64>() / n as f64 };
    let summary = InterpretationSummary {
        subject_id: r.subject_id.clone(),
        visits: r.visits,
        fraction,
        ranked_edges: ranked.len(),
        max_residual: r.edge.iter().copied().fold(0.0, f64::max),
        mean_residual: mean(&mut r.edge.iter().copied(), r.edge.len()),
        ranked_mean_residual: mean(&mut ranked.iter().map(|&i| r.edge[i]), ranked.len()),
        precision_vs_truth: truth.map(|t| precision_at(ranked, t)),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{EDGE_COUNT, FEATURE_DIM, NODE_COUNT};

    fn net(edge: Matrix) -> BrainNetwork {
        BrainNetwork::new(AtlasTopology::canonical(), Matrix::zeros(NODE_COUNT, FEATURE_DIM), edge, "s", 0).unwrap()
    }

    #[test]
    fn constant_offset_on_one_edge() {
        let a = net(Matrix::zeros(EDGE_COUNT, FEATURE_DIM));
        let mut e = Matrix::zeros(EDGE_COUNT, FEATURE_DIM);
        e.row_mut(7).iter_mut().for_each(|v| *v = 2.0);
        let b = net(e);
        let r = residual_network(&a, &b, Averaging::MeanAbs).unwrap();
        assert_eq!(r.edge[7], 2.0);
        assert_eq!(r.edge.iter().filter(|v| **v != 0.0).count(), 1);
        assert!(r.node.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn signed_mean_cancels() {
        let a = net(Matrix::zeros(EDGE_COUNT, FEATURE_DIM));
        let mut e = Matrix::zeros(EDGE_COUNT, FEATURE_DIM);
        for (k, v) in e.row_mut(3).iter_mut().enumerate() {
            *v = if k % 2 == 0 { 1.0 } else { -1.0 };
        }
        let b = net(e);
        assert_eq!(residual_network(&a, &b, Averaging::SignedMean).unwrap().edge[3], 0.0);
        assert_eq!(residual_network(&a, &b, Averaging::MeanAbs).unwrap().edge[3], 1.0);
    }

    #[test]
    fn ties_rank_by_index() {
        let r = ResidualNetwork {
            edge: vec![1.0; EDGE_COUNT],
            node: vec![0.0; NODE_COUNT],
            subject_id: "s".into(),
            visits: (0, 3),
        };
        assert_eq!(rank_edges(&r, 0.05).unwrap(), (0..111).collect::<Vec<_>>());
        assert!(rank_edges(&r, 0.0).is_err());
        assert!(rank_edges(&r, 1.5).is_err());
        assert_eq!(rank_edges(&r, 1.0).unwrap().len(), EDGE_COUNT);
    }

    #[test]
    fn histogram_counts_everything() {
        let v: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let h = histogram(&v, 7);
        assert_eq!(h.iter().map(|b| b.2).sum::<usize>(), 100);
        assert_eq!(histogram(&[3.0, 3.0], 4)[0].2, 2);
    }
}
