use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::array::{create_dir, read_json, read_matrix, write_json, write_matrix};
use super::{
    AtlasTopology, BrainNetwork, Group, LongitudinalSubject, Visit, EDGE_COUNT, FEATURE_DIM,
    NODE_COUNT,
};
use crate::error::{Error, Result};

pub const DATASET_FORMAT: &str = "trajnet-dataset";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format: String,
    pub version: u32,
    pub topology: AtlasTopology,
    pub subjects: Vec<ManifestSubject>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestSubject {
    pub subject_id: String,
    pub group: Group,
    pub conversion_label: bool,
    pub visits: Vec<ManifestVisit>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestVisit {
    pub visit_index: u32,
    pub age: f64,
    /// Paths relative to the dataset directory.
    pub node_features: String,
    pub edge_features: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub subjects: usize,
    pub networks: usize,
    pub array_files: usize,
}

fn array_name(subject: &str, visit: u32, name: &str) -> String {
    format!("arrays/{subject}_{visit}_{name}.f32")
}

/// Writes `manifest.json` plus one blob per feature matrix under `arrays/`.
pub fn save_dataset(subjects: &[LongitudinalSubject], path: &Path) -> Result<DatasetSummary> {
    for s in subjects {
        s.validate()?;
    }
    let topology = match subjects.iter().flat_map(|s| &s.visits).next() {
        Some(v) => v.network.topology().clone(),
        None => AtlasTopology::canonical(),
    };
    if subjects
        .iter()
        .flat_map(|s| &s.visits)
        .any(|v| **v.network.topology() != *topology)
    {
        return Err(Error::validation("topology", "all networks must share one topology"));
    }
    let mut ids = std::collections::HashSet::new();
    if let Some(dup) = subjects.iter().find(|s| !ids.insert(s.subject_id.as_str())) {
        return Err(Error::validation(
            "subject_id",
            format!("duplicate subject `{}`", dup.subject_id),
        ));
    }

    create_dir(&path.join("arrays"))?;
    let mut summary = DatasetSummary {
        subjects: subjects.len(),
        networks: 0,
        array_files: 0,
    };
    let mut entries = Vec::with_capacity(subjects.len());
    for s in subjects {
        let mut visits = Vec::with_capacity(s.visits.len());
        for v in &s.visits {
            let node = array_name(&s.subject_id, v.visit_index, "node_features");
            let edge = array_name(&s.subject_id, v.visit_index, "edge_features");
            write_matrix(&path.join(&node), v.network.node_features())?;
            write_matrix(&path.join(&edge), v.network.edge_features())?;
            summary.networks += 1;
            summary.array_files += 2;
            visits.push(ManifestVisit {
                visit_index: v.visit_index,
                age: v.age,
                node_features: node,
                edge_features: edge,
            });
        }
        entries.push(ManifestSubject {
            subject_id: s.subject_id.clone(),
            group: s.group,
            conversion_label: s.conversion_label,
            visits,
        });
    }
    let manifest = DatasetManifest {
        format: DATASET_FORMAT.into(),
        version: 1,
        topology: (*topology).clone(),
        subjects: entries,
    };
    write_json(&path.join("manifest.json"), &manifest)?;
    Ok(summary)
}

/// Reads a dataset written by [`save_dataset`], re-validating every invariant.
/// Any missing, truncated or mis-shaped blob fails the whole load.
pub fn load_dataset(path: &Path) -> Result<Vec<LongitudinalSubject>> {
    let manifest_path = path.join("manifest.json");
    let manifest: DatasetManifest = read_json(&manifest_path)?;
    if manifest.format != DATASET_FORMAT {
        return Err(Error::load(
            manifest_path,
            format!("unexpected format `{}`", manifest.format),
        ));
    }
    let topology = Arc::new(manifest.topology);
    let mut subjects = Vec::with_capacity(manifest.subjects.len());
    for s in manifest.subjects {
        let mut visits = Vec::with_capacity(s.visits.len());
        for v in s.visits {
            let nodes = read_matrix(&path.join(&v.node_features), Some((NODE_COUNT, FEATURE_DIM)))?;
            let edges = read_matrix(&path.join(&v.edge_features), Some((EDGE_COUNT, FEATURE_DIM)))?;
            let network =
                BrainNetwork::new(topology.clone(), nodes, edges, s.subject_id.clone(), v.visit_index)?;
            visits.push(Visit {
                visit_index: v.visit_index,
                age: v.age,
                network,
            });
        }
        subjects.push(LongitudinalSubject::new(
            s.subject_id,
            s.group,
            visits,
            s.conversion_label,
        )?);
    }
    Ok(subjects)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::{write_array, Matrix};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_subject(id: &str, group: Group, visits: u32, rng: &mut ChaCha8Rng) -> LongitudinalSubject {
        let topo = AtlasTopology::canonical();
        let mut m = |rows: usize| {
            let data = (0..rows * FEATURE_DIM)
                .map(|_| rng.random_range(-3.0f32..3.0))
                .collect();
            Matrix::from_vec(rows, FEATURE_DIM, data).unwrap()
        };
        let v = (0..visits)
            .map(|i| Visit {
                visit_index: i,
                age: 70.0 + 0.5 * i as f64,
                network: BrainNetwork::new(topo.clone(), m(NODE_COUNT), m(EDGE_COUNT), id, i).unwrap(),
            })
            .collect();
        LongitudinalSubject::new(id, group, v, group == Group::ConvertedMci).unwrap()
    }

    #[test]
    fn one_subject_four_visits_counts() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = random_subject("S1", Group::Cn, 4, &mut rng);
        let summary = save_dataset(&[s], dir.path()).unwrap();
        assert_eq!(summary.networks, 4);
        assert_eq!(summary.array_files, 8);
        let blobs = std::fs::read_dir(dir.path().join("arrays"))
            .unwrap()
            .filter(|e| e.as_ref().unwrap().path().extension().unwrap() == "f32")
            .count();
        assert_eq!(blobs, 8);
    }

    #[test]
    fn empty_dataset_is_valid() {
        let dir = tempfile::tempdir().unwrap();
        let summary = save_dataset(&[], dir.path()).unwrap();
        assert_eq!(summary.subjects, 0);
        assert!(load_dataset(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let subjects = vec![
            random_subject("A-1", Group::StableMci, 4, &mut rng),
            random_subject("B-2", Group::ConvertedMci, 3, &mut rng),
        ];
        save_dataset(&subjects, dir.path()).unwrap();
        let loaded = load_dataset(dir.path()).unwrap();
        assert_eq!(loaded, subjects);
        for (a, b) in loaded.iter().zip(&subjects) {
            for (va, vb) in a.visits.iter().zip(&b.visits) {
                let bits = |m: &Matrix| m.as_slice().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
                assert_eq!(bits(va.network.edge_features()), bits(vb.network.edge_features()));
                assert_eq!(bits(va.network.node_features()), bits(vb.network.node_features()));
            }
        }
    }

    #[test]
    fn wrong_sidecar_shape_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        save_dataset(&[random_subject("S1", Group::Cn, 1, &mut rng)], dir.path()).unwrap();
        let blob = dir.path().join("arrays/S1_0_node_features.f32");
        write_array(&blob, &[68, 31], &vec![0.0; 68 * 31]).unwrap();
        assert!(matches!(load_dataset(dir.path()), Err(Error::Validation { .. })));
    }

    #[test]
    fn truncated_blob_fails_whole_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let subjects = vec![
            random_subject("S1", Group::Cn, 2, &mut rng),
            random_subject("S2", Group::Cn, 2, &mut rng),
        ];
        save_dataset(&subjects, dir.path()).unwrap();
        let blob = dir.path().join("arrays/S2_1_edge_features.f32");
        let bytes = std::fs::read(&blob).unwrap();
        std::fs::write(&blob, &bytes[..bytes.len() / 2]).unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Load { path, .. }) => assert_eq!(path, blob),
            other => panic!("expected load error, got {other:?}"),
        }
    }
}
