use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{compute_metrics, kfold_split, roc_auc, FoldReport, MetricsReport, RunConfig};
use crate::agingvae::{train_vae, vae_predict_batch, AgingVaeModel, GraphDecoderModel, PredictMode, TrajectorySubject};
use crate::conversion::{
    build_residual_sequences, predict_conversion_batch, train_conversion, ConversionModel,
};
use crate::datamodel::{
    create_dir, load_dataset, load_voxel_dataset, read_json, save_dataset, save_voxel_dataset, write_json, Group,
    LongitudinalSubject, ResidualSequence, VoxelSource,
};
use crate::error::{Error, Result};
use crate::graphencoder::{classify_batch, train_encoder, GraphEncoderModel};
use crate::interpret::{
    excess_over, export_interpretation, mean_residual_network, precision_at, rank_edges, subject_residual_network,
    InterpretationSummary, Reference, ResidualNetwork,
};
use crate::netgen::{
    build_graphs, reconstruction_loss, train_edge_contrastive, train_node_autoencoder, EdgePairs, NetgenModels,
    NodeVoxels,
};
use crate::synth::{stream, CohortKind, GroundTruth, SynthConfig, SyntheticCohort};

/// Pipeline stages, in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Ingest,
    TrainNetgen,
    BuildGraphs,
    TrainEncoder,
    TrainVae,
    TrainRnn,
    Predict,
    Interpret,
    Evaluate,
    Report,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::TrainNetgen => "train-netgen",
            Stage::BuildGraphs => "build-graphs",
            Stage::TrainEncoder => "train-encoder",
            Stage::TrainVae => "train-vae",
            Stage::TrainRnn => "train-rnn",
            Stage::Predict => "predict",
            Stage::Interpret => "interpret",
            Stage::Evaluate => "evaluate",
            Stage::Report => "report",
        }
    }

    /// Directory under the artifact root holding this stage's output.
    pub fn dir(self) -> &'static str {
        match self {
            Stage::Synth | Stage::Ingest => "cohorts",
            Stage::TrainNetgen => "netgen",
            Stage::BuildGraphs => "graphs",
            Stage::TrainEncoder => "encoder",
            Stage::TrainVae => "vae",
            Stage::TrainRnn => "rnn",
            Stage::Predict => "predictions",
            Stage::Interpret => "interpret",
            Stage::Evaluate => "evaluation",
            Stage::Report => "report",
        }
    }
}

/// Where a cohort's voxel data comes from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum CohortSource {
    /// Regenerated on demand from the generator settings.
    Synthetic { config: SynthConfig, kind: CohortKind },
    /// An ingestion directory in the voxel dataset format.
    Disk { path: PathBuf, seed: u64 },
}

impl CohortSource {
    pub fn open(&self) -> Result<Box<dyn VoxelSource>> {
        Ok(match self {
            CohortSource::Synthetic { config, kind } => Box::new(SyntheticCohort::generate(config, *kind)?.0),
            CohortSource::Disk { path, seed } => Box::new(load_voxel_dataset(path, *seed)?),
        })
    }
}

fn kind_name(kind: CohortKind) -> &'static str {
    match kind {
        CohortKind::Baseline => "baseline",
        CohortKind::Longitudinal => "longitudinal",
    }
}

/// An artifact root directory.
#[derive(Clone, Debug)]
pub struct Workspace {
    root: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct NetgenReport {
    node_history: crate::nn::TrainHistory,
    node_heldout_mse: f64,
    node_heldout_variance: f64,
    edge: crate::netgen::EdgeTrainReport,
    heldout_subjects: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct StageReport<T> {
    stage: String,
    seconds: f64,
    #[serde(flatten)]
    body: T,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct VaeStageBody {
    report: crate::agingvae::VaeTrainReport,
    train_subjects: Vec<String>,
    test_subjects: Vec<String>,
}

/// Ageing-model accuracy on withheld healthy subjects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VaeEvaluation {
    pub pairs: usize,
    /// Median over one-step pairs of `‖F' − F_{t+1}‖ / ‖F_{t+1} − F_t‖`.
    pub median_ratio: f64,
    pub median_error: f64,
    pub median_step: f64,
}

/// How well residual norms separate converters from stable subjects.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualSeparation {
    pub converters: usize,
    pub stable: usize,
    pub median_converter_norm: f64,
    pub median_stable_norm: f64,
    pub ratio: f64,
    pub auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub conversion: MetricsReport,
    pub shuffled_conversion: Option<MetricsReport>,
    pub encoder: Option<MetricsReport>,
    pub vae: Option<VaeEvaluation>,
    pub residuals: ResidualSeparation,
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|x| (*x as f64).powi(2)).sum::<f64>().sqrt()
}

fn diff_norm(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>().sqrt()
}

fn is_mci(s: &LongitudinalSubject) -> bool {
    s.group.is_mci()
}

impl Workspace {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    fn require(&self, stage: Stage, rel: &str) -> Result<PathBuf> {
        let p = self.path(rel);
        if p.exists() {
            Ok(p)
        } else {
            Err(Error::dependency(stage.name(), format!("missing {}", p.display())))
        }
    }

    fn begin(&self, stage: Stage, cfg: &RunConfig) -> Result<PathBuf> {
        let dir = self.path(stage.dir());
        create_dir(&dir)?;
        let snap = dir.join(format!("{}.config", stage.name()));
        std::fs::write(&snap, cfg.to_text()).map_err(|e| Error::io(&snap, e))?;
        log::info!("stage {} -> {}", stage.name(), dir.display());
        Ok(dir)
    }

    fn write_stage<T: Serialize>(&self, stage: Stage, started: Instant, body: T) -> Result<()> {
        let r = StageReport {
            stage: stage.name().to_string(),
            seconds: started.elapsed().as_secs_f64(),
            body,
        };
        write_json(&self.path(stage.dir()).join(format!("{}.json", stage.name())), &r)
    }

    fn cohort_file(&self, kind: CohortKind) -> PathBuf {
        self.path("cohorts").join(format!("{}.json", kind_name(kind)))
    }

    /// Registers synthetic cohorts and writes their ground truth. With
    /// `materialize`, voxel data is also written in the ingestion format.
    pub fn synth(&self, cfg: &RunConfig, materialize: bool) -> Result<()> {
        let started = Instant::now();
        let dir = self.begin(Stage::Synth, cfg)?;
        for kind in [CohortKind::Baseline, CohortKind::Longitudinal] {
            let (cohort, truth) = SyntheticCohort::generate(&cfg.synth, kind)?;
            truth.save(&self.path("truth"))?;
            let source = if materialize {
                let path = dir.join(format!("{}_voxels", kind_name(kind)));
                save_voxel_dataset(&cohort, &path)?;
                CohortSource::Disk { path, seed: cfg.seed }
            } else {
                CohortSource::Synthetic {
                    config: cfg.synth.clone(),
                    kind,
                }
            };
            write_json(&self.cohort_file(kind), &source)?;
            log::info!("{} cohort: {} subjects", kind_name(kind), cohort.records().len());
        }
        self.write_stage(Stage::Synth, started, serde_json::json!({ "materialized": materialize }))
    }

    /// Registers an ingestion directory as the baseline or longitudinal cohort.
    pub fn ingest(&self, cfg: &RunConfig, kind: CohortKind, path: &Path) -> Result<usize> {
        let started = Instant::now();
        self.begin(Stage::Ingest, cfg)?;
        let path = std::fs::canonicalize(path).map_err(|e| Error::io(path, e))?;
        let n = load_voxel_dataset(&path, cfg.seed)?.records().len();
        write_json(&self.cohort_file(kind), &CohortSource::Disk { path, seed: cfg.seed })?;
        self.write_stage(Stage::Ingest, started, serde_json::json!({ "kind": kind_name(kind), "subjects": n }))?;
        Ok(n)
    }

    fn cohort(&self, stage: Stage, kind: CohortKind) -> Result<Box<dyn VoxelSource>> {
        let f = self.cohort_file(kind);
        if !f.exists() {
            return Err(Error::dependency(
                "synth",
                format!("no {} cohort registered; run `synth` or `ingest` before `{}`", kind_name(kind), stage.name()),
            ));
        }
        read_json::<CohortSource>(&f)?.open()
    }

    /// Ground truth of the synthetic cohorts, when they are synthetic.
    pub fn truth(&self) -> Option<GroundTruth> {
        let p = self.path("truth");
        p.exists().then(|| GroundTruth::load(&p).ok()).flatten()
    }

    pub fn train_netgen(&self, cfg: &RunConfig) -> Result<NetgenModels> {
        let source = self.cohort(Stage::TrainNetgen, CohortKind::Baseline)?;
        let started = Instant::now();
        let dir = self.begin(Stage::TrainNetgen, cfg)?;
        let n = source.records().len();
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut stream(cfg.seed, &[0x4e47]));
        let n_val = (n / 5).max(1).min(n - 1);
        let (val, train) = order.split_at(n_val);
        let scans = |idx: &[usize]| -> Vec<(usize, usize)> {
            let mut v: Vec<(usize, usize)> = idx
                .iter()
                .flat_map(|&s| (0..source.records()[s].visits.len()).map(move |v| (s, v)))
                .collect();
            v.sort_unstable();
            v
        };
        let (train_scans, val_scans) = (scans(train), scans(val));
        let node_train = NodeVoxels::Source {
            source: source.as_ref(),
            scans: train_scans.clone(),
        };
        let node_val = NodeVoxels::Source {
            source: source.as_ref(),
            scans: val_scans.clone(),
        };
        let (node, node_history) = train_node_autoencoder(
            &node_train,
            Some(&node_val),
            &cfg.netgen.node,
            cfg.netgen.activation,
            cfg.netgen.node_val_size,
        )?;
        let held = {
            let mut rng = stream(cfg.seed, &[0x4e47, 1]);
            let k = cfg.netgen.node_val_size.min(node_val.len());
            node_val.rows(&rand::seq::index::sample(&mut rng, node_val.len(), k).into_vec())?
        };
        let node_heldout_mse = reconstruction_loss(&node, &held)?;
        let node_heldout_variance = {
            let (r, c) = held.shape();
            let mut total = 0.0;
            for j in 0..c {
                let col: Vec<f64> = (0..r).map(|i| held.row(i)[j] as f64).collect();
                let m = col.iter().sum::<f64>() / r as f64;
                total += col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / r as f64;
            }
            total / c as f64
        };
        let edge_train = EdgePairs::from_source(source.as_ref(), train_scans)?;
        let edge_val = EdgePairs::from_source(source.as_ref(), val_scans)?;
        let (edge, edge_report) = train_edge_contrastive(&edge_train, Some(&edge_val), &cfg.netgen)?;
        let models = NetgenModels { node, edge };
        models.save(&dir)?;
        log::info!(
            "netgen: node held-out mse {node_heldout_mse:.5} (variance {node_heldout_variance:.5}), edge retrieval {:.3}",
            edge_report.retrieval
        );
        self.write_stage(
            Stage::TrainNetgen,
            started,
            NetgenReport {
                node_history,
                node_heldout_mse,
                node_heldout_variance,
                edge: edge_report,
                heldout_subjects: val.iter().map(|&s| source.records()[s].subject_id.clone()).collect(),
            },
        )?;
        Ok(models)
    }

    fn netgen_models(&self, stage: Stage) -> Result<NetgenModels> {
        self.require(stage, "netgen/node_autoencoder/architecture.json")
            .map_err(|_| Error::dependency("train-netgen", format!("`{}` needs trained netgen models", stage.name())))?;
        NetgenModels::load(&self.path("netgen"))
    }

    /// Builds and persists the networks of every registered cohort.
    pub fn build_graphs(&self, cfg: &RunConfig) -> Result<()> {
        let models = self.netgen_models(Stage::BuildGraphs)?;
        let started = Instant::now();
        let dir = self.begin(Stage::BuildGraphs, cfg)?;
        let mut counts = serde_json::Map::new();
        for kind in [CohortKind::Baseline, CohortKind::Longitudinal] {
            if !self.cohort_file(kind).exists() {
                continue;
            }
            let source = self.cohort(Stage::BuildGraphs, kind)?;
            let subjects = build_graphs(&models, source.as_ref())?;
            let summary = save_dataset(&subjects, &dir.join(kind_name(kind)))?;
            counts.insert(kind_name(kind).into(), serde_json::to_value(summary).expect("summary serializes"));
        }
        if counts.is_empty() {
            return Err(Error::dependency("synth", "no cohort registered"));
        }
        self.write_stage(Stage::BuildGraphs, started, counts)
    }

    fn graphs(&self, stage: Stage, kind: CohortKind) -> Result<Vec<LongitudinalSubject>> {
        let rel = format!("graphs/{}/manifest.json", kind_name(kind));
        self.require(stage, &rel).map_err(|_| {
            Error::dependency("build-graphs", format!("`{}` needs {} networks", stage.name(), kind_name(kind)))
        })?;
        load_dataset(&self.path(&format!("graphs/{}", kind_name(kind))))
    }

    pub fn train_encoder(&self, cfg: &RunConfig) -> Result<GraphEncoderModel> {
        let subjects = self.graphs(Stage::TrainEncoder, CohortKind::Baseline)?;
        let started = Instant::now();
        let dir = self.begin(Stage::TrainEncoder, cfg)?;
        let cohort: Vec<_> = subjects.iter().map(|s| (&s.visits[0].network, s.group == Group::Ad)).collect();
        let (model, report) = train_encoder(&cohort, &cfg.encoder)?;
        model.save(&dir.join("model"))?;
        self.write_stage(Stage::TrainEncoder, started, report)?;
        Ok(model)
    }

    fn encoder(&self, stage: Stage) -> Result<GraphEncoderModel> {
        self.require(stage, "encoder/model/architecture.json")
            .map_err(|_| Error::dependency("train-encoder", format!("`{}` needs a trained graph encoder", stage.name())))?;
        GraphEncoderModel::load(&self.path("encoder/model"))
    }

    /// Splits longitudinal CN subjects into (train, test) by subject.
    fn vae_split<'a>(&self, cfg: &RunConfig, subjects: &'a [LongitudinalSubject]) -> (Vec<&'a LongitudinalSubject>, Vec<&'a LongitudinalSubject>) {
        let mut cn: Vec<&LongitudinalSubject> = subjects.iter().filter(|s| s.group == Group::Cn).collect();
        cn.shuffle(&mut stream(cfg.seed, &[0x5654]));
        let k = ((cn.len() as f64 * cfg.eval.vae_test_fraction).round() as usize).min(cn.len().saturating_sub(1));
        let test = cn.split_off(cn.len() - k);
        (cn, test)
    }

    pub fn train_vae(&self, cfg: &RunConfig) -> Result<(AgingVaeModel, GraphDecoderModel)> {
        let encoder = self.encoder(Stage::TrainVae)?;
        let subjects = self.graphs(Stage::TrainVae, CohortKind::Longitudinal)?;
        let started = Instant::now();
        let dir = self.begin(Stage::TrainVae, cfg)?;
        let (train, test) = self.vae_split(cfg, &subjects);
        let (vae, decoder, report) = fit_vae(&encoder, &train, cfg)?;
        vae.save(&dir.join("aging_vae"))?;
        decoder.save(&dir.join("graph_decoder"))?;
        self.write_stage(
            Stage::TrainVae,
            started,
            VaeStageBody {
                report,
                train_subjects: train.iter().map(|s| s.subject_id.clone()).collect(),
                test_subjects: test.iter().map(|s| s.subject_id.clone()).collect(),
            },
        )?;
        Ok((vae, decoder))
    }

    fn vae(&self, stage: Stage) -> Result<(AgingVaeModel, GraphDecoderModel)> {
        self.require(stage, "vae/aging_vae/architecture.json")
            .map_err(|_| Error::dependency("train-vae", format!("`{}` needs a trained ageing model", stage.name())))?;
        Ok((
            AgingVaeModel::load(&self.path("vae/aging_vae"))?,
            GraphDecoderModel::load(&self.path("vae/graph_decoder"))?,
        ))
    }

    /// Residual sequences of the longitudinal MCI subjects with labels.
    fn mci_residuals(
        &self,
        stage: Stage,
    ) -> Result<(Vec<LongitudinalSubject>, Vec<ResidualSequence>, GraphEncoderModel, AgingVaeModel)> {
        let encoder = self.encoder(stage)?;
        let (vae, _) = self.vae(stage)?;
        let subjects: Vec<LongitudinalSubject> = self
            .graphs(stage, CohortKind::Longitudinal)?
            .into_iter()
            .filter(|s| is_mci(s) && s.visits.len() >= 2)
            .collect();
        let refs: Vec<&LongitudinalSubject> = subjects.iter().collect();
        let seqs = build_residual_sequences(&refs, &encoder, &vae)?;
        Ok((subjects, seqs, encoder, vae))
    }

    pub fn train_rnn(&self, cfg: &RunConfig) -> Result<ConversionModel> {
        let (subjects, seqs, _, _) = self.mci_residuals(Stage::TrainRnn)?;
        let started = Instant::now();
        let dir = self.begin(Stage::TrainRnn, cfg)?;
        let data: Vec<(&ResidualSequence, bool)> = seqs.iter().zip(&subjects).map(|(r, s)| (r, s.conversion_label)).collect();
        let (model, report) = train_conversion(&data, &cfg.rnn)?;
        model.save(&dir.join("model"))?;
        self.write_stage(Stage::TrainRnn, started, report)?;
        Ok(model)
    }

    /// Conversion probabilities for every longitudinal MCI subject, written
    /// to `predictions/predictions.tsv`.
    pub fn predict(&self, cfg: &RunConfig) -> Result<Vec<(String, f64)>> {
        self.require(Stage::Predict, "rnn/model/architecture.json")
            .map_err(|_| Error::dependency("train-rnn", "`predict` needs a trained conversion model"))?;
        let model = ConversionModel::load(&self.path("rnn/model"))?;
        let (subjects, seqs, _, _) = self.mci_residuals(Stage::Predict)?;
        let started = Instant::now();
        let dir = self.begin(Stage::Predict, cfg)?;
        let prefixes: Vec<ResidualSequence> = seqs
            .iter()
            .map(|s| s.prefix(s.len().saturating_sub(1).max(1)))
            .collect::<Result<_>>()?;
        let refs: Vec<&ResidualSequence> = prefixes.iter().collect();
        let preds = predict_conversion_batch(&model, &refs)?;
        let mut tsv = String::from("subject\tgroup\tlabel\tp_conversion\tpredicted\n");
        let mut out = Vec::new();
        for (s, (_, p)) in subjects.iter().zip(&preds) {
            tsv.push_str(&format!(
                "{}\t{}\t{}\t{:.6}\t{}\n",
                s.subject_id,
                s.group.as_str(),
                s.conversion_label,
                p,
                *p >= cfg.rnn.threshold
            ));
            out.push((s.subject_id.clone(), *p));
        }
        let path = dir.join("predictions.tsv");
        std::fs::write(&path, tsv).map_err(|e| Error::io(&path, e))?;
        let labels: Vec<bool> = subjects.iter().map(|s| s.conversion_label).collect();
        let probs: Vec<f64> = preds.iter().map(|p| p.1).collect();
        let metrics = compute_metrics(&probs, &labels, cfg.rnn.threshold)?;
        self.write_stage(Stage::Predict, started, metrics)?;
        Ok(out)
    }

    /// Residual network of the converters (mean over subjects, or a single
    /// subject), ranked and exported.
    pub fn interpret(&self, cfg: &RunConfig, subject: Option<&str>) -> Result<InterpretationSummary> {
        let encoder = self.encoder(Stage::Interpret)?;
        let (vae, decoder) = self.vae(Stage::Interpret)?;
        let subjects = self.graphs(Stage::Interpret, CohortKind::Longitudinal)?;
        let started = Instant::now();
        let dir = self.begin(Stage::Interpret, cfg)?;
        let chosen: Vec<&LongitudinalSubject> = match subject {
            Some(id) => vec![subjects
                .iter()
                .find(|s| s.subject_id == id)
                .ok_or_else(|| Error::validation("subject", format!("`{id}` is not in the longitudinal cohort")))?],
            None => subjects.iter().filter(|s| s.group == Group::ConvertedMci).collect(),
        };
        if chosen.is_empty() {
            return Err(Error::validation("subjects", "no converters to interpret"));
        }
        let residual = |s: &LongitudinalSubject| -> Result<ResidualNetwork> {
            let last = s.visits.len() - 1;
            let from = match cfg.interpret.gap {
                None => 0,
                Some(g) => last
                    .checked_sub(g as usize)
                    .ok_or_else(|| Error::validation("interpret.gap", format!("{g} exceeds the visit count")))?,
            };
            subject_residual_network(s, from, last, &encoder, &vae, &decoder, cfg.interpret.averaging)
        };
        let reference = match cfg.interpret.reference {
            Reference::Raw => None,
            Reference::Healthy => {
                let healthy = subjects
                    .iter()
                    .filter(|s| s.group == Group::Cn)
                    .map(residual)
                    .collect::<Result<Vec<_>>>()?;
                if healthy.is_empty() {
                    return Err(Error::validation("interpret.reference", "no CN subjects to serve as the healthy reference"));
                }
                Some(mean_residual_network(&healthy, "healthy")?)
            }
        };
        let truth = self.truth();
        let mut nets = Vec::new();
        let mut per_subject = Vec::new();
        for s in &chosen {
            let r = residual(s)?;
            if let Some(t) = &truth {
                let own = match &reference {
                    Some(h) => excess_over(&r, h)?,
                    None => r.clone(),
                };
                per_subject.push(precision_at(&rank_edges(&own, cfg.interpret.fraction)?, &t.abnormal_edges));
            }
            nets.push(r);
        }
        let label = subject.unwrap_or("converters");
        let mut r = mean_residual_network(&nets, label)?;
        if let Some(h) = &reference {
            r = excess_over(&r, h)?;
        }
        let ranked = rank_edges(&r, cfg.interpret.fraction)?;
        let topology = chosen[0].visits[0].network.topology();
        let summary = export_interpretation(
            &r,
            &ranked,
            topology,
            cfg.interpret.fraction,
            truth.as_ref().map(|t| t.abnormal_edges.as_slice()),
            &dir,
        )?;
        self.write_stage(
            Stage::Interpret,
            started,
            serde_json::json!({
                "subjects": chosen.len(),
                "precision": summary.precision_vs_truth,
                "median_subject_precision": if per_subject.is_empty() { None } else { Some(median(&mut per_subject)) },
            }),
        )?;
        Ok(summary)
    }

    /// Cross-validated conversion metrics (plus the shuffled-label control),
    /// optional encoder cross-validation, ageing-model accuracy on withheld
    /// CN subjects and residual separation.
    pub fn evaluate(&self, cfg: &RunConfig) -> Result<EvaluationReport> {
        let (subjects, seqs, encoder, vae) = self.mci_residuals(Stage::Evaluate)?;
        let started = Instant::now();
        let dir = self.begin(Stage::Evaluate, cfg)?;
        let labels: Vec<bool> = subjects.iter().map(|s| s.conversion_label).collect();
        let conversion = cv_conversion(&seqs, &labels, cfg, "conversion")?;
        let shuffled_conversion = if cfg.eval.shuffle_control {
            let mut shuffled = labels.clone();
            shuffled.shuffle(&mut stream(cfg.seed, &[0x5348]));
            Some(cv_conversion(&seqs, &shuffled, cfg, "conversion (shuffled labels)")?)
        } else {
            None
        };
        let encoder_cv = if cfg.eval.encoder_cv {
            let baseline = self.graphs(Stage::Evaluate, CohortKind::Baseline)?;
            Some(cv_encoder(&baseline, cfg)?)
        } else {
            None
        };
        let longitudinal = self.graphs(Stage::Evaluate, CohortKind::Longitudinal)?;
        let (_, test) = self.vae_split(cfg, &longitudinal);
        let vae_eval = if test.is_empty() { None } else { Some(evaluate_vae(&encoder, &vae, &test)?) };
        let onset = self.truth().map(|t| t.onset_visit).unwrap_or(cfg.synth.onset_visit);
        let residuals = residual_separation(&subjects, &seqs, onset)?;
        let report = EvaluationReport {
            conversion,
            shuffled_conversion,
            encoder: encoder_cv,
            vae: vae_eval,
            residuals,
        };
        write_json(&dir.join("metrics.json"), &report)?;
        self.write_stage(Stage::Evaluate, started, serde_json::json!({}))?;
        Ok(report)
    }
}

/// Encodes subjects and trains the ageing model on them.
pub(crate) fn fit_vae(
    encoder: &GraphEncoderModel,
    train: &[&LongitudinalSubject],
    cfg: &RunConfig,
) -> Result<(AgingVaeModel, GraphDecoderModel, crate::agingvae::VaeTrainReport)> {
    let trajectories = trajectories(encoder, train)?;
    train_vae(&trajectories, &cfg.vae)
}

fn trajectories<'a>(encoder: &GraphEncoderModel, subjects: &[&'a LongitudinalSubject]) -> Result<Vec<TrajectorySubject<'a>>> {
    let nets: Vec<_> = subjects.iter().flat_map(|s| s.visits.iter().map(|v| &v.network)).collect();
    let feats = encoder.encode_batch(&nets)?;
    let mut it = feats.into_iter();
    subjects
        .iter()
        .map(|s| {
            let features = s
                .visits
                .iter()
                .map(|v| crate::datamodel::GraphFeature::new(it.next().expect("one feature per visit"), &s.subject_id, v.visit_index))
                .collect::<Result<Vec<_>>>()?;
            Ok(TrajectorySubject {
                features,
                visit_indices: s.visits.iter().map(|v| v.visit_index).collect(),
                networks: s.visits.iter().map(|v| &v.network).collect(),
            })
        })
        .collect()
}

/// One-step forecast error on `subjects` relative to the raw visit-to-visit
/// change.
pub(crate) fn evaluate_vae(encoder: &GraphEncoderModel, vae: &AgingVaeModel, subjects: &[&LongitudinalSubject]) -> Result<VaeEvaluation> {
    let traj = trajectories(encoder, subjects)?;
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut gaps = Vec::new();
    for t in &traj {
        for w in t.features.windows(2) {
            inputs.push(w[0].values());
            targets.push(w[1].values());
            gaps.push((w[1].visit - w[0].visit) as usize);
        }
    }
    let preds = vae_predict_batch(vae, &inputs, &gaps, PredictMode::Mean)?;
    let mut ratios = Vec::new();
    let mut errors = Vec::new();
    let mut steps = Vec::new();
    for ((x, y), p) in inputs.iter().zip(&targets).zip(&preds) {
        let e = diff_norm(p, y);
        let s = diff_norm(y, x);
        ratios.push(e / s.max(1e-12));
        errors.push(e);
        steps.push(s);
    }
    Ok(VaeEvaluation {
        pairs: ratios.len(),
        median_ratio: median(&mut ratios),
        median_error: median(&mut errors),
        median_step: median(&mut steps),
    })
}

/// Mean residual norm after `onset`, converters vs. non-converters.
pub(crate) fn residual_separation(subjects: &[LongitudinalSubject], seqs: &[ResidualSequence], onset: u32) -> Result<ResidualSeparation> {
    let mut scores = Vec::new();
    let mut labels = Vec::new();
    for (s, r) in subjects.iter().zip(seqs) {
        let after: Vec<f64> = r
            .residuals()
            .iter()
            .zip(r.visit_indices())
            .filter(|(_, v)| **v > onset)
            .map(|(x, _)| norm(x))
            .collect();
        if after.is_empty() {
            continue;
        }
        scores.push(after.iter().sum::<f64>() / after.len() as f64);
        labels.push(s.conversion_label);
    }
    let mut conv: Vec<f64> = scores.iter().zip(&labels).filter(|(_, l)| **l).map(|(s, _)| *s).collect();
    let mut stable: Vec<f64> = scores.iter().zip(&labels).filter(|(_, l)| !**l).map(|(s, _)| *s).collect();
    let auc = roc_auc(&scores, &labels)?;
    let (mc, ms) = (median(&mut conv), median(&mut stable));
    Ok(ResidualSeparation {
        converters: conv.len(),
        stable: stable.len(),
        median_converter_norm: mc,
        median_stable_norm: ms,
        ratio: mc / ms,
        auc,
    })
}

/// Stratified cross-validation of the conversion model.
pub(crate) fn cv_conversion(seqs: &[ResidualSequence], labels: &[bool], cfg: &RunConfig, task: &str) -> Result<MetricsReport> {
    let folds = kfold_split(labels, cfg.folds, cfg.seed)?;
    let mut out = Vec::new();
    for (k, (train, test)) in folds.iter().enumerate() {
        let data: Vec<(&ResidualSequence, bool)> = train.iter().map(|&i| (&seqs[i], labels[i])).collect();
        let mut rc = cfg.rnn.clone();
        rc.train.seed = crate::synth::stream_seed(rc.train.seed, &[k as u64]);
        let (model, report) = train_conversion(&data, &rc)?;
        let prefixes: Vec<ResidualSequence> = test
            .iter()
            .map(|&i| seqs[i].prefix(seqs[i].len().saturating_sub(1).max(1)))
            .collect::<Result<_>>()?;
        let refs: Vec<&ResidualSequence> = prefixes.iter().collect();
        let probs: Vec<f64> = predict_conversion_batch(&model, &refs)?.into_iter().map(|p| p.1).collect();
        let y: Vec<bool> = test.iter().map(|&i| labels[i]).collect();
        let metrics = compute_metrics(&probs, &y, cfg.rnn.threshold)?;
        log::info!("{task} fold {k}: accuracy {}", metrics.accuracy);
        out.push(FoldReport {
            fold: k,
            metrics,
            history: report.history,
        });
    }
    Ok(MetricsReport::new(task, out))
}

/// Stratified cross-validation of the AD/CN graph encoder.
pub(crate) fn cv_encoder(baseline: &[LongitudinalSubject], cfg: &RunConfig) -> Result<MetricsReport> {
    let labels: Vec<bool> = baseline.iter().map(|s| s.group == Group::Ad).collect();
    let folds = kfold_split(&labels, cfg.folds, cfg.seed)?;
    let mut out = Vec::new();
    for (k, (train, test)) in folds.iter().enumerate() {
        let cohort: Vec<_> = train.iter().map(|&i| (&baseline[i].visits[0].network, labels[i])).collect();
        let mut ec = cfg.encoder.clone();
        ec.train.seed = crate::synth::stream_seed(ec.train.seed, &[k as u64]);
        let (model, report) = train_encoder(&cohort, &ec)?;
        let nets: Vec<_> = test.iter().map(|&i| &baseline[i].visits[0].network).collect();
        let probs = classify_batch(&model, &nets)?;
        let y: Vec<bool> = test.iter().map(|&i| labels[i]).collect();
        let metrics = compute_metrics(&probs, &y, 0.5)?;
        log::info!("encoder fold {k}: accuracy {}", metrics.accuracy);
        out.push(FoldReport {
            fold: k,
            metrics,
            history: report.history,
        });
    }
    Ok(MetricsReport::new("AD/CN classification", out))
}

/// Runs every stage in order, registering synthetic cohorts first when
/// none are registered.
pub fn run_pipeline(cfg: &RunConfig, ws: &Workspace) -> Result<EvaluationReport> {
    cfg.validate()?;
    let have = |k| ws.cohort_file(k).exists();
    if !have(CohortKind::Baseline) || !have(CohortKind::Longitudinal) {
        ws.synth(cfg, false)?;
    }
    ws.train_netgen(cfg)?;
    ws.build_graphs(cfg)?;
    ws.train_encoder(cfg)?;
    ws.train_vae(cfg)?;
    ws.train_rnn(cfg)?;
    ws.predict(cfg)?;
    ws.interpret(cfg, None)?;
    let report = ws.evaluate(cfg)?;
    super::write_report(ws)?;
    Ok(report)
}
