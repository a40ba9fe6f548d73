//! Shared domain types, their invariants, and the on-disk dataset format.

mod array;
mod dataset;
mod topology;
mod voxel;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use array::{
    read_array, read_matrix, read_matrix_row, read_sidecar, sidecar_path, write_array,
    write_matrix, Matrix, ShapeSidecar,
};
pub(crate) use array::{create_dir, read_json, write_json};
pub use dataset::{load_dataset, save_dataset, DatasetManifest, DatasetSummary};
pub use topology::{check_edges, validate_topology, AtlasTopology, TopologyViolation};
pub(crate) use voxel::check_scan as voxel_check_scan;
pub use voxel::{
    load_voxel_dataset, save_voxel_dataset, DiskVoxelSource, Modality, VoxelKind, VoxelSource,
    VoxelVector,
};

use crate::error::{Error, Result};

pub const NODE_COUNT: usize = 68;
pub const EDGE_COUNT: usize = 2227;
pub const VOXEL_LEN: usize = 3000;
/// Width of every node and edge feature.
pub const FEATURE_DIM: usize = 32;
/// Width of the encoded graph feature.
pub const GRAPH_FEATURE_DIM: usize = 256;

#[derive(Clone, Debug, PartialEq)]
pub struct BrainNetwork {
    topology: Arc<AtlasTopology>,
    node_features: Matrix,
    edge_features: Matrix,
    subject_id: String,
    visit: u32,
}

impl BrainNetwork {
    pub fn new(
        topology: Arc<AtlasTopology>,
        node_features: Matrix,
        edge_features: Matrix,
        subject_id: impl Into<String>,
        visit: u32,
    ) -> Result<Self> {
        check_shape("node_features", &node_features, topology.node_count())?;
        check_shape("edge_features", &edge_features, topology.edge_count())?;
        Ok(Self {
            topology,
            node_features,
            edge_features,
            subject_id: subject_id.into(),
            visit,
        })
    }

    pub fn topology(&self) -> &Arc<AtlasTopology> {
        &self.topology
    }

    pub fn node_features(&self) -> &Matrix {
        &self.node_features
    }

    pub fn edge_features(&self) -> &Matrix {
        &self.edge_features
    }

    pub fn subject_id(&self) -> &str {
        &self.subject_id
    }

    pub fn visit(&self) -> u32 {
        self.visit
    }
}

fn check_shape(field: &str, m: &Matrix, rows: usize) -> Result<()> {
    if m.rows() != rows {
        return Err(Error::validation(
            format!("{field} rows"),
            format!("expected {rows}, got {}", m.rows()),
        ));
    }
    if m.cols() != FEATURE_DIM {
        return Err(Error::validation(
            format!("{field} columns"),
            format!("expected {FEATURE_DIM}, got {}", m.cols()),
        ));
    }
    if !m.is_finite() {
        return Err(Error::validation(field, "contains NaN or Inf"));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "CN")]
    Cn,
    #[serde(rename = "stableMCI")]
    StableMci,
    #[serde(rename = "convertedMCI")]
    ConvertedMci,
    #[serde(rename = "AD")]
    Ad,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Cn => "CN",
            Group::StableMci => "stableMCI",
            Group::ConvertedMci => "convertedMCI",
            Group::Ad => "AD",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "CN" => Ok(Group::Cn),
            "stableMCI" => Ok(Group::StableMci),
            "convertedMCI" => Ok(Group::ConvertedMci),
            "AD" => Ok(Group::Ad),
            other => Err(Error::validation("group", format!("unknown group `{other}`"))),
        }
    }

    pub fn is_mci(self) -> bool {
        matches!(self, Group::StableMci | Group::ConvertedMci)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct VisitInfo {
    pub visit_index: u32,
    /// Age in years.
    pub age: f64,
}

/// Subject metadata without imaging payload. Voxel sources and dataset
/// manifests are indexed by these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectRecord {
    pub subject_id: String,
    pub group: Group,
    pub visits: Vec<VisitInfo>,
    pub conversion_label: bool,
}

impl SubjectRecord {
    pub fn validate(&self) -> Result<()> {
        validate_subject_id(&self.subject_id)?;
        if self.visits.is_empty() {
            return Err(Error::validation(
                format!("{}.visits", self.subject_id),
                "at least one visit is required",
            ));
        }
        for w in self.visits.windows(2) {
            if w[1].visit_index <= w[0].visit_index {
                return Err(Error::validation(
                    format!("{}.visit_index", self.subject_id),
                    "visit indices must be strictly increasing",
                ));
            }
            if w[1].age < w[0].age {
                return Err(Error::validation(
                    format!("{}.age", self.subject_id),
                    "ages must be non-decreasing",
                ));
            }
        }
        if self.visits.iter().any(|v| !v.age.is_finite()) {
            return Err(Error::validation(format!("{}.age", self.subject_id), "non-finite age"));
        }
        if self.conversion_label && self.group != Group::ConvertedMci {
            return Err(Error::validation(
                format!("{}.conversion_label", self.subject_id),
                format!("conversion observed for group {}", self.group.as_str()),
            ));
        }
        Ok(())
    }

    /// True when this subject counts as positive for the stage's binary task:
    /// AD for AD/CN classification, conversion for MCI subjects.
    pub fn positive(&self) -> bool {
        self.group == Group::Ad || self.conversion_label
    }
}

/// Subject ids become part of array file names.
fn validate_subject_id(id: &str) -> Result<()> {
    if id.is_empty()
        || !id
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '.')
    {
        return Err(Error::validation(
            "subject_id",
            format!("`{id}` must be non-empty ASCII alphanumerics, '-' or '.'"),
        ));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq)]
pub struct Visit {
    pub visit_index: u32,
    pub age: f64,
    pub network: BrainNetwork,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LongitudinalSubject {
    pub subject_id: String,
    pub group: Group,
    pub visits: Vec<Visit>,
    pub conversion_label: bool,
}

impl LongitudinalSubject {
    pub fn new(
        subject_id: impl Into<String>,
        group: Group,
        visits: Vec<Visit>,
        conversion_label: bool,
    ) -> Result<Self> {
        let s = Self {
            subject_id: subject_id.into(),
            group,
            visits,
            conversion_label,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        self.record().validate()?;
        for v in &self.visits {
            if v.network.subject_id() != self.subject_id || v.network.visit() != v.visit_index {
                return Err(Error::validation(
                    format!("{}.visits", self.subject_id),
                    format!(
                        "network tagged ({}, {}) filed under visit {}",
                        v.network.subject_id(),
                        v.network.visit(),
                        v.visit_index
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn record(&self) -> SubjectRecord {
        SubjectRecord {
            subject_id: self.subject_id.clone(),
            group: self.group,
            visits: self
                .visits
                .iter()
                .map(|v| VisitInfo {
                    visit_index: v.visit_index,
                    age: v.age,
                })
                .collect(),
            conversion_label: self.conversion_label,
        }
    }

    pub fn positive(&self) -> bool {
        self.group == Group::Ad || self.conversion_label
    }
}

/// The encoded 256-wide representation of one network.
#[derive(Clone, Debug, PartialEq)]
pub struct GraphFeature {
    values: Vec<f32>,
    pub subject_id: String,
    pub visit: u32,
}

impl GraphFeature {
    pub fn new(values: Vec<f32>, subject_id: impl Into<String>, visit: u32) -> Result<Self> {
        if values.len() != GRAPH_FEATURE_DIM {
            return Err(Error::validation(
                "graph feature",
                format!("length {} != {GRAPH_FEATURE_DIM}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("graph feature contains NaN or Inf".into()));
        }
        Ok(Self {
            values,
            subject_id: subject_id.into(),
            visit,
        })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }
}

/// Residuals between actual and trajectory-predicted features, ordered by
/// the visit they describe.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualSequence {
    residuals: Vec<Vec<f32>>,
    visit_indices: Vec<u32>,
}

impl ResidualSequence {
    pub fn new(residuals: Vec<Vec<f32>>, visit_indices: Vec<u32>) -> Result<Self> {
        if residuals.is_empty() {
            return Err(Error::validation("residuals", "sequence must be non-empty"));
        }
        if residuals.len() != visit_indices.len() {
            return Err(Error::validation(
                "visit_indices",
                "one visit index per residual is required",
            ));
        }
        if let Some(r) = residuals.iter().find(|r| r.len() != GRAPH_FEATURE_DIM) {
            return Err(Error::validation(
                "residuals",
                format!("residual of length {} != {GRAPH_FEATURE_DIM}", r.len()),
            ));
        }
        Ok(Self {
            residuals,
            visit_indices,
        })
    }

    pub fn residuals(&self) -> &[Vec<f32>] {
        &self.residuals
    }

    pub fn visit_indices(&self) -> &[u32] {
        &self.visit_indices
    }

    pub fn len(&self) -> usize {
        self.residuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residuals.is_empty()
    }

    /// The first `len` residuals.
    pub fn prefix(&self, len: usize) -> Result<Self> {
        if len == 0 || len > self.len() {
            return Err(Error::validation(
                "prefix",
                format!("length {len} outside 1..={}", self.len()),
            ));
        }
        Self::new(self.residuals[..len].to_vec(), self.visit_indices[..len].to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn net(id: &str, visit: u32) -> BrainNetwork {
        BrainNetwork::new(
            AtlasTopology::canonical(),
            Matrix::zeros(NODE_COUNT, FEATURE_DIM),
            Matrix::zeros(EDGE_COUNT, FEATURE_DIM),
            id,
            visit,
        )
        .unwrap()
    }

    #[test]
    fn network_shape_errors_name_the_axis() {
        let err = BrainNetwork::new(
            AtlasTopology::canonical(),
            Matrix::zeros(67, FEATURE_DIM),
            Matrix::zeros(EDGE_COUNT, FEATURE_DIM),
            "s",
            0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("node_features rows"), "{err}");
        let err = BrainNetwork::new(
            AtlasTopology::canonical(),
            Matrix::zeros(NODE_COUNT, FEATURE_DIM),
            Matrix::zeros(EDGE_COUNT, 31),
            "s",
            0,
        )
        .unwrap_err();
        assert!(err.to_string().contains("edge_features columns"), "{err}");
    }

    #[test]
    fn subject_invariants() {
        let visits = |idx: &[u32], ages: &[f64]| -> Vec<Visit> {
            idx.iter()
                .zip(ages)
                .map(|(&i, &a)| Visit {
                    visit_index: i,
                    age: a,
                    network: net("s1", i),
                })
                .collect()
        };
        assert!(LongitudinalSubject::new("s1", Group::Cn, visits(&[0, 1], &[70.0, 70.5]), false).is_ok());
        assert!(LongitudinalSubject::new("s1", Group::Cn, visits(&[1, 1], &[70.0, 70.5]), false).is_err());
        assert!(LongitudinalSubject::new("s1", Group::Cn, visits(&[0, 1], &[70.5, 70.0]), false).is_err());
        assert!(LongitudinalSubject::new("s1", Group::StableMci, visits(&[0], &[70.0]), true).is_err());
        assert!(LongitudinalSubject::new("s1", Group::ConvertedMci, visits(&[0], &[70.0]), true).is_ok());
    }

    #[test]
    fn feature_and_residual_lengths() {
        assert!(GraphFeature::new(vec![0.0; 255], "s", 0).is_err());
        assert!(GraphFeature::new(vec![0.0; 256], "s", 0).is_ok());
        assert!(ResidualSequence::new(vec![], vec![]).is_err());
        assert!(ResidualSequence::new(vec![vec![0.0; 256]], vec![1]).is_ok());
        assert!(ResidualSequence::new(vec![vec![0.0; 10]], vec![1]).is_err());
    }
}
