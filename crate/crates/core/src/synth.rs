//! Synthetic cohorts with planted, queryable ground truth.
//!
//! Every tract `e` owns a latent vector `z_e` shared by the whole cohort.
//! Both modalities are fixed linear images of the same latent plus Gaussian
//! noise, so a cross-modal encoder has an exact alignment target:
//!
//! ```text
//! T1_e = A_t1 · z + noise      FA_e = A_fa · z + noise
//! z    = z_e + v·drift·d  [+ class_offset on abnormal tracts for AD]
//!                         [+ deviation·(v − onset)·u on abnormal tracts for converters, v ≥ onset]
//! ```
//!
//! Node vectors use a smooth cosine basis in place of `A`, so each region
//! produces a smooth voxel pattern. Randomness is split into independent
//! ChaCha streams keyed by (subject, visit, modality, kind, index); any
//! vector can be regenerated in isolation and parallel runs agree bit for
//! bit with serial ones.

use std::path::Path;
use std::sync::Arc;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::datamodel::{
    create_dir, read_json, read_matrix, write_json, write_matrix, AtlasTopology, Group, Matrix,
    Modality, SubjectRecord, VisitInfo, VoxelKind, VoxelSource, VoxelVector, EDGE_COUNT,
    NODE_COUNT, VOXEL_LEN,
};
use crate::error::{Error, Result};

/// Baseline age range in years.
const AGE_RANGE: (f64, f64) = (60.0, 85.0);
const REFERENCE_AGE: f64 = 72.5;
/// Fraction of regions that carry the AD class offset.
const CLASS_NODE_COUNT: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub latent_dim: usize,
    pub noise_std: f64,
    /// Latent drift per visit along the drift direction.
    pub drift_scale: f64,
    pub class_offset_scale: f64,
    pub abnormal_edge_count: usize,
    /// Latent deviation per visit after onset, for converters.
    pub deviation_scale: f64,
    pub onset_visit: u32,
    pub visits: u32,
    pub visit_interval_years: f64,
    pub baseline_cn: usize,
    pub baseline_ad: usize,
    pub longitudinal_cn: usize,
    pub stable_mci: usize,
    pub converted_mci: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            latent_dim: 8,
            noise_std: 0.05,
            drift_scale: 0.1,
            class_offset_scale: 0.5,
            abnormal_edge_count: 111,
            deviation_scale: 0.6,
            onset_visit: 1,
            visits: 4,
            visit_interval_years: 0.5,
            baseline_cn: 113,
            baseline_ad: 96,
            longitudinal_cn: 191,
            stable_mci: 126,
            converted_mci: 91,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let scales = [
            ("noise_std", self.noise_std),
            ("drift_scale", self.drift_scale),
            ("class_offset_scale", self.class_offset_scale),
            ("deviation_scale", self.deviation_scale),
            ("visit_interval_years", self.visit_interval_years),
        ];
        for (name, v) in scales {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be >= 1".into()));
        }
        if self.abnormal_edge_count > EDGE_COUNT {
            return Err(Error::Config(format!(
                "abnormal_edge_count {} exceeds {EDGE_COUNT}",
                self.abnormal_edge_count
            )));
        }
        if self.visits == 0 || self.onset_visit >= self.visits {
            return Err(Error::Config(format!(
                "onset_visit {} must lie in the {}-visit grid",
                self.onset_visit, self.visits
            )));
        }
        Ok(())
    }
}

/// The generator's hidden state, exposed to acceptance tests.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// `EDGE_COUNT x latent_dim`.
    pub edge_latents: Matrix,
    pub drift_direction: Vec<f32>,
    /// Sorted tract indices that carry the AD offset and the converter deviation.
    pub abnormal_edges: Vec<usize>,
    pub onset_visit: u32,
    pub class_offset: Vec<f32>,
    pub deviation_direction: Vec<f32>,
    pub class_nodes: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct TruthJson {
    drift_direction: Vec<f32>,
    abnormal_edges: Vec<usize>,
    onset_visit: u32,
    class_offset: Vec<f32>,
    deviation_direction: Vec<f32>,
    class_nodes: Vec<usize>,
}

impl GroundTruth {
    pub fn save(&self, dir: &Path) -> Result<()> {
        create_dir(dir)?;
        write_matrix(&dir.join("edge_latents.f32"), &self.edge_latents)?;
        write_json(
            &dir.join("truth.json"),
            &TruthJson {
                drift_direction: self.drift_direction.clone(),
                abnormal_edges: self.abnormal_edges.clone(),
                onset_visit: self.onset_visit,
                class_offset: self.class_offset.clone(),
                deviation_direction: self.deviation_direction.clone(),
                class_nodes: self.class_nodes.clone(),
            },
        )
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let t: TruthJson = read_json(&dir.join("truth.json"))?;
        Ok(Self {
            edge_latents: read_matrix(&dir.join("edge_latents.f32"), None)?,
            drift_direction: t.drift_direction,
            abnormal_edges: t.abnormal_edges,
            onset_visit: t.onset_visit,
            class_offset: t.class_offset,
            deviation_direction: t.deviation_direction,
            class_nodes: t.class_nodes,
        })
    }
}

/// SplitMix64 finaliser, used to derive independent stream seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Derives a stream seed from a master seed and a tag path.
pub fn stream_seed(master: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(mix(master), |acc, &t| mix(acc ^ mix(t)))
}

pub(crate) fn stream(master: u64, tags: &[u64]) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(stream_seed(master, tags))
}

mod tag {
    pub const WORLD: u64 = 1;
    pub const MAP_T1: u64 = 2;
    pub const MAP_FA: u64 = 3;
    pub const BASIS: u64 = 4;
    pub const EDGE_LATENT: u64 = 5;
    pub const NODE_LATENT: u64 = 6;
    pub const DIRECTIONS: u64 = 7;
    pub const ABNORMAL: u64 = 8;
    pub const SUBJECT: u64 = 9;
    pub const NOISE: u64 = 10;
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.iter().map(|x| (x / n) as f32).collect();
        }
    }
}

fn gaussian_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Matrix {
    let data = (0..rows * cols)
        .map(|_| (std * <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)) as f32)
        .collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

/// Cohort-independent generator state derived from the seed.
#[derive(Debug)]
pub struct SynthWorld {
    latent_dim: usize,
    /// `VOXEL_LEN x latent_dim` maps.
    map_t1: Matrix,
    map_fa: Matrix,
    node_basis: Matrix,
    edge_latents: Matrix,
    node_latents: Matrix,
    drift_direction: Vec<f32>,
    deviation_direction: Vec<f32>,
    class_offset: Vec<f32>,
    abnormal: Vec<bool>,
    abnormal_edges: Vec<usize>,
    class_node: Vec<bool>,
    class_nodes: Vec<usize>,
}

impl SynthWorld {
    pub fn new(cfg: &SynthConfig) -> Result<Self> {
        cfg.validate()?;
        let l = cfg.latent_dim;
        let s = cfg.seed;
        let map_std = (1.0 / l as f64).sqrt();
        let map_t1 = gaussian_matrix(&mut stream(s, &[tag::WORLD, tag::MAP_T1]), VOXEL_LEN, l, map_std);
        let map_fa = gaussian_matrix(&mut stream(s, &[tag::WORLD, tag::MAP_FA]), VOXEL_LEN, l, map_std);

        let mut rng = stream(s, &[tag::WORLD, tag::BASIS]);
        let freqs: Vec<f64> = (0..l).map(|j| (j + 1) as f64 + rng.random::<f64>()).collect();
        let phases: Vec<f64> = (0..l).map(|_| rng.random::<f64>() * std::f64::consts::TAU).collect();
        let amp = (2.0 / l as f64).sqrt();
        let mut node_basis = Matrix::zeros(VOXEL_LEN, l);
        for k in 0..VOXEL_LEN {
            let x = (k as f64 + 0.5) / VOXEL_LEN as f64;
            for j in 0..l {
                node_basis.row_mut(k)[j] =
                    (amp * (std::f64::consts::PI * freqs[j] * x + phases[j]).cos()) as f32;
            }
        }

        let edge_latents = gaussian_matrix(&mut stream(s, &[tag::WORLD, tag::EDGE_LATENT]), EDGE_COUNT, l, 1.0);
        let node_latents = gaussian_matrix(&mut stream(s, &[tag::WORLD, tag::NODE_LATENT]), NODE_COUNT, l, 1.0);

        let mut rng = stream(s, &[tag::WORLD, tag::DIRECTIONS]);
        let drift_direction = unit_vector(&mut rng, l);
        let deviation_direction = unit_vector(&mut rng, l);
        let class_offset = deviation_direction
            .iter()
            .map(|x| (cfg.class_offset_scale * *x as f64) as f32)
            .collect();

        let mut rng = stream(s, &[tag::WORLD, tag::ABNORMAL]);
        let mut abnormal_edges = sample(&mut rng, EDGE_COUNT, cfg.abnormal_edge_count).into_vec();
        abnormal_edges.sort_unstable();
        let mut abnormal = vec![false; EDGE_COUNT];
        abnormal_edges.iter().for_each(|&e| abnormal[e] = true);
        let mut class_nodes = sample(&mut rng, NODE_COUNT, CLASS_NODE_COUNT).into_vec();
        class_nodes.sort_unstable();
        let mut class_node = vec![false; NODE_COUNT];
        class_nodes.iter().for_each(|&r| class_node[r] = true);

        Ok(Self {
            latent_dim: l,
            map_t1,
            map_fa,
            node_basis,
            edge_latents,
            node_latents,
            drift_direction,
            deviation_direction,
            class_offset,
            abnormal,
            abnormal_edges,
            class_node,
            class_nodes,
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.latent_dim
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CohortKind {
    Baseline,
    Longitudinal,
}

/// A generated cohort. Voxel vectors are produced on demand.
#[derive(Clone, Debug)]
pub struct SyntheticCohort {
    cfg: SynthConfig,
    kind: CohortKind,
    world: Arc<SynthWorld>,
    topology: Arc<AtlasTopology>,
    records: Vec<SubjectRecord>,
}

fn make_records(cfg: &SynthConfig, kind: CohortKind) -> Vec<SubjectRecord> {
    let groups: Vec<(Group, usize, &str)> = match kind {
        CohortKind::Baseline => vec![(Group::Cn, cfg.baseline_cn, "CN"), (Group::Ad, cfg.baseline_ad, "AD")],
        CohortKind::Longitudinal => vec![
            (Group::Cn, cfg.longitudinal_cn, "CN"),
            (Group::StableMci, cfg.stable_mci, "sMCI"),
            (Group::ConvertedMci, cfg.converted_mci, "cMCI"),
        ],
    };
    let (prefix, visits) = match kind {
        CohortKind::Baseline => ("BL", 1),
        CohortKind::Longitudinal => ("LG", cfg.visits),
    };
    let mut records = Vec::new();
    for (group, n, short) in groups {
        for i in 0..n {
            let idx = records.len() as u64;
            let mut rng = stream(cfg.seed, &[tag::SUBJECT, kind as u64, idx]);
            let age0 = rng.random_range(AGE_RANGE.0..AGE_RANGE.1);
            records.push(SubjectRecord {
                subject_id: format!("{prefix}-{short}-{:04}", i + 1),
                group,
                visits: (0..visits)
                    .map(|v| VisitInfo {
                        visit_index: v,
                        age: age0 + v as f64 * cfg.visit_interval_years,
                    })
                    .collect(),
                conversion_label: group == Group::ConvertedMci,
            });
        }
    }
    records
}

/// Single-visit AD/CN cohort with paired T1/FA tract vectors.
pub fn gen_baseline_cohort(cfg: &SynthConfig) -> Result<(SyntheticCohort, GroundTruth)> {
    if cfg.baseline_cn == 0 || cfg.baseline_ad == 0 {
        return Err(Error::Config("baseline cohort needs at least one CN and one AD subject".into()));
    }
    SyntheticCohort::generate(cfg, CohortKind::Baseline)
}

/// Four-visit CN / stable MCI / converted MCI cohort, T1 only.
pub fn gen_longitudinal_cohort(cfg: &SynthConfig) -> Result<(SyntheticCohort, GroundTruth)> {
    if cfg.longitudinal_cn + cfg.stable_mci + cfg.converted_mci == 0 {
        return Err(Error::Config("longitudinal cohort is empty".into()));
    }
    SyntheticCohort::generate(cfg, CohortKind::Longitudinal)
}

/// The generator's ground truth for a cohort produced by this module.
pub fn planted_truth(cohort: &dyn VoxelSource) -> Result<GroundTruth> {
    cohort
        .as_synthetic()
        .map(SyntheticCohort::ground_truth)
        .ok_or_else(|| Error::Unsupported("ground truth exists only for synthetic cohorts".into()))
}

impl SyntheticCohort {
    pub fn generate(cfg: &SynthConfig, kind: CohortKind) -> Result<(Self, GroundTruth)> {
        let world = Arc::new(SynthWorld::new(cfg)?);
        let cohort = Self {
            cfg: cfg.clone(),
            kind,
            world,
            topology: AtlasTopology::canonical(),
            records: make_records(cfg, kind),
        };
        let truth = cohort.ground_truth();
        Ok((cohort, truth))
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }

    pub fn kind(&self) -> CohortKind {
        self.kind
    }

    pub fn ground_truth(&self) -> GroundTruth {
        let w = &self.world;
        GroundTruth {
            edge_latents: w.edge_latents.clone(),
            drift_direction: w.drift_direction.clone(),
            abnormal_edges: w.abnormal_edges.clone(),
            onset_visit: self.cfg.onset_visit,
            class_offset: w.class_offset.clone(),
            deviation_direction: w.deviation_direction.clone(),
            class_nodes: w.class_nodes.clone(),
        }
    }

    fn visit_info(&self, subject: usize, visit: usize) -> Result<(&SubjectRecord, u32)> {
        crate::datamodel::voxel_check_scan(&self.records, subject, visit)?;
        let r = &self.records[subject];
        Ok((r, r.visits[visit].visit_index))
    }

    /// Latent state of tract `tract` at the given scan.
    pub fn edge_latent(&self, subject: usize, visit: usize, tract: usize) -> Result<Vec<f32>> {
        let (rec, v) = self.visit_info(subject, visit)?;
        if tract >= EDGE_COUNT {
            return Err(Error::validation("tract", format!("{tract} out of range")));
        }
        let w = &self.world;
        let drift = self.cfg.drift_scale * v as f64;
        let mut z: Vec<f32> = w
            .edge_latents
            .row(tract)
            .iter()
            .zip(&w.drift_direction)
            .map(|(z, d)| (*z as f64 + drift * *d as f64) as f32)
            .collect();
        if w.abnormal[tract] {
            if rec.group == Group::Ad {
                z.iter_mut().zip(&w.class_offset).for_each(|(z, c)| *z += c);
            }
            if rec.group == Group::ConvertedMci && v >= self.cfg.onset_visit {
                let k = self.cfg.deviation_scale * (v - self.cfg.onset_visit) as f64;
                z.iter_mut()
                    .zip(&w.deviation_direction)
                    .for_each(|(z, u)| *z += (k * *u as f64) as f32);
            }
        }
        Ok(z)
    }

    /// Latent state of region `region` at the given scan.
    pub fn node_latent(&self, subject: usize, visit: usize, region: usize) -> Result<Vec<f32>> {
        let (rec, v) = self.visit_info(subject, visit)?;
        if region >= NODE_COUNT {
            return Err(Error::validation("region", format!("{region} out of range")));
        }
        let w = &self.world;
        let age_shift = (rec.visits[0].age - REFERENCE_AGE) / 10.0;
        let drift = self.cfg.drift_scale * (v as f64 + age_shift);
        let mut y: Vec<f32> = w
            .node_latents
            .row(region)
            .iter()
            .zip(&w.drift_direction)
            .map(|(y, d)| (*y as f64 + drift * *d as f64) as f32)
            .collect();
        if rec.group == Group::Ad && w.class_node[region] {
            y.iter_mut().zip(&w.class_offset).for_each(|(y, c)| *y += c);
        }
        Ok(y)
    }

    fn render(&self, map: &Matrix, latent: &[f32], noise: &[u64]) -> Vec<f32> {
        let mut rng = stream(self.cfg.seed, noise);
        let std = self.cfg.noise_std as f32;
        (0..VOXEL_LEN)
            .map(|k| {
                let signal: f32 = map.row(k).iter().zip(latent).map(|(a, z)| a * z).sum();
                let eps: f32 = StandardNormal.sample(&mut rng);
                signal + std * eps
            })
            .collect()
    }

    fn noise_tags(&self, subject: usize, visit: usize, kind: VoxelKind, modality: Modality, index: usize) -> [u64; 7] {
        [
            tag::NOISE,
            self.kind as u64,
            subject as u64,
            visit as u64,
            kind as u64,
            modality as u64,
            index as u64,
        ]
    }
}

impl VoxelSource for SyntheticCohort {
    fn topology(&self) -> Arc<AtlasTopology> {
        self.topology.clone()
    }

    fn records(&self) -> &[SubjectRecord] {
        &self.records
    }

    fn node_voxels(&self, subject: usize, visit: usize) -> Result<Matrix> {
        let rows = (0..NODE_COUNT)
            .map(|r| self.node_voxel(subject, visit, r).map(VoxelVector::into_values))
            .collect::<Result<Vec<_>>>()?;
        Matrix::from_rows(&rows)
    }

    fn edge_voxels(&self, subject: usize, visit: usize, modality: Modality) -> Result<Matrix> {
        let mut data = Vec::with_capacity(EDGE_COUNT * VOXEL_LEN);
        for e in 0..EDGE_COUNT {
            data.extend(self.edge_voxel(subject, visit, e, modality)?.into_values());
        }
        Matrix::from_vec(EDGE_COUNT, VOXEL_LEN, data)
    }

    fn node_voxel(&self, subject: usize, visit: usize, region: usize) -> Result<VoxelVector> {
        let y = self.node_latent(subject, visit, region)?;
        let tags = self.noise_tags(subject, visit, VoxelKind::Node, Modality::T1, region);
        VoxelVector::new(self.render(&self.world.node_basis, &y, &tags), Modality::T1, VoxelKind::Node, region)
    }

    fn edge_voxel(&self, subject: usize, visit: usize, tract: usize, modality: Modality) -> Result<VoxelVector> {
        if modality == Modality::FA && !self.has_fa(subject, visit) {
            return Err(Error::validation("modality", "longitudinal cohorts carry no FA vectors"));
        }
        let z = self.edge_latent(subject, visit, tract)?;
        let map = match modality {
            Modality::T1 => &self.world.map_t1,
            Modality::FA => &self.world.map_fa,
        };
        let tags = self.noise_tags(subject, visit, VoxelKind::Edge, modality, tract);
        VoxelVector::new(self.render(map, &z, &tags), modality, VoxelKind::Edge, tract)
    }

    fn has_fa(&self, _subject: usize, _visit: usize) -> bool {
        self.kind == CohortKind::Baseline
    }

    fn as_synthetic(&self) -> Option<&SyntheticCohort> {
        Some(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(seed: u64) -> SynthConfig {
        SynthConfig {
            seed,
            baseline_cn: 3,
            baseline_ad: 3,
            longitudinal_cn: 2,
            stable_mci: 2,
            converted_mci: 2,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let (a, ta) = gen_baseline_cohort(&small(7)).unwrap();
        let (b, tb) = gen_baseline_cohort(&small(7)).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a.records(), b.records());
        for e in [0, 17, 2226] {
            let x = a.edge_voxel(4, 0, e, Modality::FA).unwrap();
            let y = b.edge_voxel(4, 0, e, Modality::FA).unwrap();
            assert!(x.values().iter().zip(y.values()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        assert_eq!(a.node_voxels(2, 0).unwrap(), b.node_voxels(2, 0).unwrap());
    }

    #[test]
    fn random_access_matches_block_generation() {
        let (c, _) = gen_baseline_cohort(&small(1)).unwrap();
        let block = c.edge_voxels(1, 0, Modality::T1).unwrap();
        assert_eq!(block.row(99), c.edge_voxel(1, 0, 99, Modality::T1).unwrap().values());
    }

    #[test]
    fn noiseless_modalities_share_the_latent() {
        let cfg = SynthConfig { noise_std: 0.0, ..small(3) };
        let (c, t) = gen_baseline_cohort(&cfg).unwrap();
        let w = &c.world;
        let t1 = c.edge_voxel(0, 0, 5, Modality::T1).unwrap();
        let z = t.edge_latents.row(5);
        for k in [0, 1000, 2999] {
            let expect: f32 = w.map_t1.row(k).iter().zip(z).map(|(a, b)| a * b).sum();
            assert_eq!(t1.values()[k], expect);
        }
    }

    #[test]
    fn truth_sizes() {
        let (c, t) = gen_longitudinal_cohort(&small(2)).unwrap();
        assert_eq!(t.abnormal_edges.len(), 111);
        assert_eq!(planted_truth(&c).unwrap(), t);
        let cfg = SynthConfig { abnormal_edge_count: 0, ..small(2) };
        assert!(gen_longitudinal_cohort(&cfg).unwrap().1.abnormal_edges.is_empty());
    }

    #[test]
    fn abnormal_sets_differ_across_seeds() {
        let sets: Vec<Vec<usize>> = (0..20)
            .map(|s| SynthWorld::new(&small(s)).unwrap().abnormal_edges)
            .collect();
        for i in 0..sets.len() {
            for j in i + 1..sets.len() {
                assert_ne!(sets[i], sets[j], "seeds {i} and {j} collide");
            }
        }
    }

    #[test]
    fn group_structure_and_labels() {
        let (c, _) = gen_longitudinal_cohort(&small(4)).unwrap();
        assert_eq!(c.records().len(), 6);
        for r in c.records() {
            assert_eq!(r.visits.len(), 4);
            assert_eq!(r.conversion_label, r.group == Group::ConvertedMci);
            r.validate().unwrap();
        }
        assert!(c.edge_voxel(0, 0, 0, Modality::FA).is_err());
    }

    #[test]
    fn invalid_configs_are_rejected() {
        assert!(gen_baseline_cohort(&SynthConfig { baseline_ad: 0, ..small(0) }).is_err());
        assert!(SynthWorld::new(&SynthConfig { abnormal_edge_count: 2228, ..small(0) }).is_err());
        assert!(SynthWorld::new(&SynthConfig { noise_std: -1.0, ..small(0) }).is_err());
        assert!(SynthWorld::new(&SynthConfig { onset_visit: 4, ..small(0) }).is_err());
    }
}
