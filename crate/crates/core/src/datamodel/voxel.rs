//! Voxel vectors and the sources that supply them.
//!
//! Voxel data for a whole cohort is far larger than the networks built from
//! it, so stages pull vectors on demand through [`VoxelSource`] instead of
//! holding them in memory. The synthetic generator implements the trait
//! directly; ingested data is read from disk row by row.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use super::array::{create_dir, read_json, read_matrix, read_matrix_row, read_sidecar, write_json, write_matrix};
use super::{AtlasTopology, Matrix, ShapeSidecar, SubjectRecord, VisitInfo, EDGE_COUNT, NODE_COUNT, VOXEL_LEN};
use crate::error::{Error, Result};
use crate::netgen::pad_and_sample;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    T1,
    FA,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VoxelKind {
    Node,
    Edge,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelVector {
    values: Vec<f32>,
    pub modality: Modality,
    pub kind: VoxelKind,
    /// Region id for nodes, tract id for edges.
    pub index: usize,
}

impl VoxelVector {
    pub fn new(values: Vec<f32>, modality: Modality, kind: VoxelKind, index: usize) -> Result<Self> {
        if values.len() != VOXEL_LEN {
            return Err(Error::validation(
                "voxel vector",
                format!("length {} != {VOXEL_LEN}", values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("voxel vector", "contains NaN or Inf"));
        }
        Ok(Self {
            values,
            modality,
            kind,
            index,
        })
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    pub fn into_values(self) -> Vec<f32> {
        self.values
    }
}

/// Random-access supply of voxel vectors for a cohort. `visit` arguments are
/// positions in the subject record's visit list.
pub trait VoxelSource: Send + Sync {
    fn topology(&self) -> Arc<AtlasTopology>;

    fn records(&self) -> &[SubjectRecord];

    /// All node vectors of one scan, `NODE_COUNT x VOXEL_LEN`.
    fn node_voxels(&self, subject: usize, visit: usize) -> Result<Matrix>;

    /// All tract vectors of one scan and modality, `EDGE_COUNT x VOXEL_LEN`.
    fn edge_voxels(&self, subject: usize, visit: usize, modality: Modality) -> Result<Matrix>;

    fn node_voxel(&self, subject: usize, visit: usize, region: usize) -> Result<VoxelVector>;

    fn edge_voxel(
        &self,
        subject: usize,
        visit: usize,
        tract: usize,
        modality: Modality,
    ) -> Result<VoxelVector>;

    /// Whether paired FA vectors exist for this scan.
    fn has_fa(&self, subject: usize, visit: usize) -> bool;

    /// Downcast hook for ground-truth queries.
    fn as_synthetic(&self) -> Option<&crate::synth::SyntheticCohort> {
        None
    }
}

pub(crate) fn check_scan(records: &[SubjectRecord], subject: usize, visit: usize) -> Result<()> {
    match records.get(subject) {
        None => Err(Error::validation(
            "subject",
            format!("index {subject} out of range ({} subjects)", records.len()),
        )),
        Some(r) if visit >= r.visits.len() => Err(Error::validation(
            "visit",
            format!("{} has {} visits, asked for {visit}", r.subject_id, r.visits.len()),
        )),
        _ => Ok(()),
    }
}

const VOXEL_FORMAT: &str = "trajnet-voxels";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct VoxelManifest {
    format: String,
    version: u32,
    topology: AtlasTopology,
    subjects: Vec<VoxelSubject>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct VoxelSubject {
    #[serde(flatten)]
    record: SubjectRecordHead,
    visits: Vec<VoxelVisit>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct SubjectRecordHead {
    subject_id: String,
    group: super::Group,
    conversion_label: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct VoxelVisit {
    visit_index: u32,
    age: f64,
    t1_node: String,
    t1_edge: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    fa_edge: Option<String>,
}

/// Materialises every voxel array of `source` into the ingestion layout.
pub fn save_voxel_dataset(source: &dyn VoxelSource, path: &Path) -> Result<()> {
    create_dir(&path.join("arrays"))?;
    let mut subjects = Vec::new();
    for (si, rec) in source.records().iter().enumerate() {
        let mut visits = Vec::new();
        for (vi, v) in rec.visits.iter().enumerate() {
            let name = |n: &str| format!("arrays/{}_{}_{n}.f32", rec.subject_id, v.visit_index);
            let t1_node = name("t1_node");
            let t1_edge = name("t1_edge");
            write_matrix(&path.join(&t1_node), &source.node_voxels(si, vi)?)?;
            write_matrix(&path.join(&t1_edge), &source.edge_voxels(si, vi, Modality::T1)?)?;
            let fa_edge = if source.has_fa(si, vi) {
                let f = name("fa_edge");
                write_matrix(&path.join(&f), &source.edge_voxels(si, vi, Modality::FA)?)?;
                Some(f)
            } else {
                None
            };
            visits.push(VoxelVisit {
                visit_index: v.visit_index,
                age: v.age,
                t1_node,
                t1_edge,
                fa_edge,
            });
        }
        subjects.push(VoxelSubject {
            record: SubjectRecordHead {
                subject_id: rec.subject_id.clone(),
                group: rec.group,
                conversion_label: rec.conversion_label,
            },
            visits,
        });
    }
    write_json(
        &path.join("manifest.json"),
        &VoxelManifest {
            format: VOXEL_FORMAT.into(),
            version: 1,
            topology: (*source.topology()).clone(),
            subjects,
        },
    )
}

#[derive(Clone, Debug)]
struct ScanFiles {
    t1_node: (PathBuf, ShapeSidecar),
    t1_edge: (PathBuf, ShapeSidecar),
    fa_edge: Option<(PathBuf, ShapeSidecar)>,
}

/// Voxel arrays read lazily from an ingestion directory. Arrays may have any
/// row width; rows are brought to `VOXEL_LEN` with [`pad_and_sample`].
pub struct DiskVoxelSource {
    root: PathBuf,
    topology: Arc<AtlasTopology>,
    records: Vec<SubjectRecord>,
    scans: Vec<Vec<ScanFiles>>,
    seed: u64,
    cache: Mutex<HashMap<PathBuf, Arc<Matrix>>>,
}

/// Opens and validates an ingestion directory: manifest, record invariants,
/// presence and row counts of every array.
pub fn load_voxel_dataset(path: &Path, seed: u64) -> Result<DiskVoxelSource> {
    let manifest: VoxelManifest = read_json(&path.join("manifest.json"))?;
    if manifest.format != VOXEL_FORMAT {
        return Err(Error::load(
            path.join("manifest.json"),
            format!("unexpected format `{}`", manifest.format),
        ));
    }
    let topology = Arc::new(manifest.topology);
    let mut records = Vec::new();
    let mut scans = Vec::new();
    for s in manifest.subjects {
        let record = SubjectRecord {
            subject_id: s.record.subject_id,
            group: s.record.group,
            conversion_label: s.record.conversion_label,
            visits: s
                .visits
                .iter()
                .map(|v| VisitInfo {
                    visit_index: v.visit_index,
                    age: v.age,
                })
                .collect(),
        };
        record.validate()?;
        let open = |rel: &str, rows: usize| -> Result<(PathBuf, ShapeSidecar)> {
            let p = path.join(rel);
            let side = read_sidecar(&p)?;
            if side.shape.len() != 2 || side.shape[0] != rows || side.shape[1] == 0 {
                return Err(Error::validation(
                    p.display().to_string(),
                    format!("expected {rows} rows of voxels, sidecar declares {:?}", side.shape),
                ));
            }
            let len = std::fs::metadata(&p).map_err(|e| Error::load(&p, e.to_string()))?.len();
            if len as usize != side.len() * 4 {
                return Err(Error::load(&p, format!("blob holds {len} bytes, sidecar needs {}", side.len() * 4)));
            }
            Ok((p, side))
        };
        let mut files = Vec::new();
        for v in &s.visits {
            files.push(ScanFiles {
                t1_node: open(&v.t1_node, NODE_COUNT)?,
                t1_edge: open(&v.t1_edge, EDGE_COUNT)?,
                fa_edge: v.fa_edge.as_deref().map(|f| open(f, EDGE_COUNT)).transpose()?,
            });
        }
        records.push(record);
        scans.push(files);
    }
    Ok(DiskVoxelSource {
        root: path.to_path_buf(),
        topology,
        records,
        scans,
        seed,
        cache: Mutex::new(HashMap::new()),
    })
}

impl DiskVoxelSource {
    pub fn root(&self) -> &Path {
        &self.root
    }

    fn file(&self, subject: usize, visit: usize, kind: VoxelKind, modality: Modality) -> Result<&(PathBuf, ShapeSidecar)> {
        check_scan(&self.records, subject, visit)?;
        let scan = &self.scans[subject][visit];
        match (kind, modality) {
            (VoxelKind::Node, Modality::T1) => Ok(&scan.t1_node),
            (VoxelKind::Edge, Modality::T1) => Ok(&scan.t1_edge),
            (VoxelKind::Edge, Modality::FA) => scan.fa_edge.as_ref().ok_or_else(|| {
                Error::validation(
                    "modality",
                    format!("{} visit {visit} has no FA arrays", self.records[subject].subject_id),
                )
            }),
            (VoxelKind::Node, Modality::FA) => Err(Error::validation("modality", "node vectors are T1 only")),
        }
    }

    fn row_seed(&self, subject: usize, visit: usize, kind: VoxelKind, modality: Modality, row: usize) -> u64 {
        crate::synth::stream_seed(
            self.seed,
            &[subject as u64, visit as u64, kind as u64, modality as u64, row as u64],
        )
    }

    fn fit_row(&self, raw: Vec<f32>, subject: usize, visit: usize, kind: VoxelKind, modality: Modality, row: usize) -> Result<Vec<f32>> {
        if raw.len() == VOXEL_LEN {
            Ok(raw)
        } else {
            pad_and_sample(&raw, VOXEL_LEN, self.row_seed(subject, visit, kind, modality, row))
        }
    }

    fn block(&self, subject: usize, visit: usize, kind: VoxelKind, modality: Modality) -> Result<Matrix> {
        let (p, side) = self.file(subject, visit, kind, modality)?;
        let m = read_matrix(p, Some((side.shape[0], side.shape[1])))?;
        if m.cols() == VOXEL_LEN {
            return Ok(m);
        }
        let rows = (0..m.rows())
            .map(|r| self.fit_row(m.row(r).to_vec(), subject, visit, kind, modality, r))
            .collect::<Result<Vec<_>>>()?;
        Matrix::from_rows(&rows)
    }

    fn single(&self, subject: usize, visit: usize, kind: VoxelKind, modality: Modality, row: usize) -> Result<VoxelVector> {
        let (p, side) = self.file(subject, visit, kind, modality)?;
        // Small arrays are cached whole; large ones are read a row at a time.
        let raw = if side.len() <= NODE_COUNT * VOXEL_LEN * 2 {
            let mut cache = self.cache.lock().expect("voxel cache poisoned");
            let m = match cache.get(p) {
                Some(m) => m.clone(),
                None => {
                    let m = Arc::new(read_matrix(p, None)?);
                    cache.insert(p.clone(), m.clone());
                    m
                }
            };
            if row >= m.rows() {
                return Err(Error::validation("row", format!("{row} out of range")));
            }
            m.row(row).to_vec()
        } else {
            read_matrix_row(p, side, row)?
        };
        let values = self.fit_row(raw, subject, visit, kind, modality, row)?;
        VoxelVector::new(values, modality, kind, row)
    }
}

impl VoxelSource for DiskVoxelSource {
    fn topology(&self) -> Arc<AtlasTopology> {
        self.topology.clone()
    }

    fn records(&self) -> &[SubjectRecord] {
        &self.records
    }

    fn node_voxels(&self, subject: usize, visit: usize) -> Result<Matrix> {
        self.block(subject, visit, VoxelKind::Node, Modality::T1)
    }

    fn edge_voxels(&self, subject: usize, visit: usize, modality: Modality) -> Result<Matrix> {
        self.block(subject, visit, VoxelKind::Edge, modality)
    }

    fn node_voxel(&self, subject: usize, visit: usize, region: usize) -> Result<VoxelVector> {
        self.single(subject, visit, VoxelKind::Node, Modality::T1, region)
    }

    fn edge_voxel(&self, subject: usize, visit: usize, tract: usize, modality: Modality) -> Result<VoxelVector> {
        self.single(subject, visit, VoxelKind::Edge, modality, tract)
    }

    fn has_fa(&self, subject: usize, visit: usize) -> bool {
        self.scans
            .get(subject)
            .and_then(|s| s.get(visit))
            .is_some_and(|s| s.fa_edge.is_some())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn voxel_vector_length_gate() {
        assert!(VoxelVector::new(vec![0.0; 2999], Modality::T1, VoxelKind::Node, 0).is_err());
        assert!(VoxelVector::new(vec![f32::NAN; 3000], Modality::T1, VoxelKind::Node, 0).is_err());
        assert!(VoxelVector::new(vec![0.0; 3000], Modality::FA, VoxelKind::Edge, 7).is_ok());
    }
}
