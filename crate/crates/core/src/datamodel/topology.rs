//! The fixed node/edge skeleton shared by every subject's brain network.

use std::collections::HashSet;
use std::fmt;
use std::sync::{Arc, OnceLock};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EDGE_COUNT, NODE_COUNT};
use crate::error::{Error, Result};

/// Cortical and subcortical grey-matter regions, one hemisphere.
const REGIONS: [&str; 34] = [
    "bankssts",
    "caudalanteriorcingulate",
    "caudalmiddlefrontal",
    "cuneus",
    "entorhinal",
    "fusiform",
    "inferiorparietal",
    "inferiortemporal",
    "isthmuscingulate",
    "lateraloccipital",
    "lateralorbitofrontal",
    "lingual",
    "medialorbitofrontal",
    "middletemporal",
    "parahippocampal",
    "paracentral",
    "parsopercularis",
    "parsorbitalis",
    "parstriangularis",
    "pericalcarine",
    "postcentral",
    "posteriorcingulate",
    "precentral",
    "precuneus",
    "rostralanteriorcingulate",
    "rostralmiddlefrontal",
    "superiorfrontal",
    "superiorparietal",
    "superiortemporal",
    "supramarginal",
    "frontalpole",
    "temporalpole",
    "transversetemporal",
    "insula",
];

/// Seed of the frozen pair-removal used to derive the canonical edge set.
const CANONICAL_EDGE_SEED: u64 = 2227;

/// First violated invariant of a candidate topology.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum TopologyViolation {
    NodeCount { found: usize },
    EdgeCount { found: usize },
    EndpointOutOfRange { edge: (usize, usize) },
    NonCanonical { edge: (usize, usize) },
    DuplicateEdge { edge: (usize, usize) },
}

impl fmt::Display for TopologyViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TopologyViolation::NodeCount { found } => {
                write!(f, "node count {found}, expected {NODE_COUNT}")
            }
            TopologyViolation::EdgeCount { found } => {
                write!(f, "edge count {found}, expected {EDGE_COUNT}")
            }
            TopologyViolation::EndpointOutOfRange { edge } => {
                write!(f, "endpoint out of range in edge {edge:?}")
            }
            TopologyViolation::NonCanonical { edge } => {
                write!(f, "non-canonical ordering in edge {edge:?} (need u < v)")
            }
            TopologyViolation::DuplicateEdge { edge } => write!(f, "duplicate edge {edge:?}"),
        }
    }
}

/// Checks the structural invariants of an arbitrary-size graph skeleton:
/// endpoints in range, `u < v`, no duplicates. Returns the first violation.
pub fn check_edges(node_count: usize, edges: &[(usize, usize)]) -> std::result::Result<(), TopologyViolation> {
    let mut seen = HashSet::with_capacity(edges.len());
    for &(u, v) in edges {
        if u >= node_count || v >= node_count {
            return Err(TopologyViolation::EndpointOutOfRange { edge: (u, v) });
        }
        if u >= v {
            return Err(TopologyViolation::NonCanonical { edge: (u, v) });
        }
        if !seen.insert((u, v)) {
            return Err(TopologyViolation::DuplicateEdge { edge: (u, v) });
        }
    }
    Ok(())
}

/// Report-style validation of the 68-node / 2227-edge atlas invariants.
pub fn validate_topology(
    node_labels: &[String],
    edges: &[(usize, usize)],
) -> std::result::Result<(), TopologyViolation> {
    if node_labels.len() != NODE_COUNT {
        return Err(TopologyViolation::NodeCount {
            found: node_labels.len(),
        });
    }
    if edges.len() != EDGE_COUNT {
        return Err(TopologyViolation::EdgeCount { found: edges.len() });
    }
    check_edges(NODE_COUNT, edges)
}

/// Region labels plus the ordered tract list. The edge order is frozen at
/// construction; every edge-feature matrix is indexed by it.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawTopology")]
pub struct AtlasTopology {
    node_labels: Vec<String>,
    edges: Vec<(usize, usize)>,
}

#[derive(Deserialize)]
struct RawTopology {
    node_labels: Vec<String>,
    edges: Vec<(usize, usize)>,
}

impl TryFrom<RawTopology> for AtlasTopology {
    type Error = Error;

    fn try_from(raw: RawTopology) -> Result<Self> {
        AtlasTopology::new(raw.node_labels, raw.edges)
    }
}

impl AtlasTopology {
    pub fn new(node_labels: Vec<String>, edges: Vec<(usize, usize)>) -> Result<Self> {
        validate_topology(&node_labels, &edges)
            .map_err(|v| Error::validation("topology", v.to_string()))?;
        Ok(Self { node_labels, edges })
    }

    /// The standard skeleton: 68 bilateral regions and 2227 of the 2278
    /// possible region pairs, in lexicographic order.
    pub fn canonical() -> Arc<AtlasTopology> {
        static CANONICAL: OnceLock<Arc<AtlasTopology>> = OnceLock::new();
        CANONICAL
            .get_or_init(|| {
                let labels: Vec<String> = ["lh", "rh"]
                    .iter()
                    .flat_map(|h| REGIONS.iter().map(move |r| format!("{h}.{r}")))
                    .collect();
                let mut pairs: Vec<(usize, usize)> = (0..NODE_COUNT)
                    .flat_map(|u| (u + 1..NODE_COUNT).map(move |v| (u, v)))
                    .collect();
                let mut rng = ChaCha8Rng::seed_from_u64(CANONICAL_EDGE_SEED);
                pairs.shuffle(&mut rng);
                pairs.truncate(EDGE_COUNT);
                pairs.sort_unstable();
                Arc::new(AtlasTopology::new(labels, pairs).expect("canonical topology is valid"))
            })
            .clone()
    }

    pub fn node_labels(&self) -> &[String] {
        &self.node_labels
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn node_count(&self) -> usize {
        self.node_labels.len()
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    /// Relabels node `i` as `perm[i]`. Edges are re-canonicalised and
    /// re-sorted; the returned vector maps each new edge position to its
    /// position in `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<(AtlasTopology, Vec<usize>)> {
        let n = self.node_count();
        let mut check = perm.to_vec();
        check.sort_unstable();
        if check != (0..n).collect::<Vec<_>>() {
            return Err(Error::validation("permutation", "not a permutation of the nodes"));
        }
        let mut labels = vec![String::new(); n];
        for (i, l) in self.node_labels.iter().enumerate() {
            labels[perm[i]] = l.clone();
        }
        let mut mapped: Vec<((usize, usize), usize)> = self
            .edges
            .iter()
            .enumerate()
            .map(|(k, &(u, v))| {
                let (a, b) = (perm[u], perm[v]);
                ((a.min(b), a.max(b)), k)
            })
            .collect();
        mapped.sort_unstable();
        let edges = mapped.iter().map(|(e, _)| *e).collect();
        let origin = mapped.iter().map(|(_, k)| *k).collect();
        Ok((AtlasTopology::new(labels, edges)?, origin))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_passes_validation() {
        let t = AtlasTopology::canonical();
        assert_eq!(t.node_count(), 68);
        assert_eq!(t.edge_count(), 2227);
        assert_eq!(validate_topology(t.node_labels(), t.edges()), Ok(()));
    }

    #[test]
    fn duplicate_edge_is_reported() {
        let t = AtlasTopology::canonical();
        let mut edges = t.edges().to_vec();
        let has_35 = edges.contains(&(3, 5));
        let last = edges.len() - 1;
        edges[last] = (3, 5);
        if !has_35 {
            edges[last - 1] = (3, 5);
        }
        edges.sort_unstable();
        let v = validate_topology(t.node_labels(), &edges).unwrap_err();
        assert_eq!(v, TopologyViolation::DuplicateEdge { edge: (3, 5) });
        assert!(v.to_string().contains("duplicate edge"));
    }

    #[test]
    fn reversed_edge_is_non_canonical() {
        let t = AtlasTopology::canonical();
        let mut edges = t.edges().to_vec();
        edges[0] = (5, 3);
        let v = validate_topology(t.node_labels(), &edges).unwrap_err();
        assert!(v.to_string().contains("non-canonical ordering"));
    }

    #[test]
    fn wrong_counts_are_rejected() {
        let t = AtlasTopology::canonical();
        let edges = t.edges()[..2226].to_vec();
        assert_eq!(
            validate_topology(t.node_labels(), &edges),
            Err(TopologyViolation::EdgeCount { found: 2226 })
        );
        assert!(AtlasTopology::new(t.node_labels()[..67].to_vec(), t.edges().to_vec()).is_err());
    }

    #[test]
    fn permutation_preserves_edge_set() {
        let t = AtlasTopology::canonical();
        let perm: Vec<usize> = (0..68).rev().collect();
        let (p, origin) = t.permuted(&perm).unwrap();
        for (k, &(u, v)) in p.edges().iter().enumerate() {
            let (a, b) = t.edges()[origin[k]];
            let (pa, pb) = (perm[a], perm[b]);
            assert_eq!((pa.min(pb), pa.max(pb)), (u, v));
        }
    }
}
