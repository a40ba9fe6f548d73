//! Conversion prediction from longitudinal residuals: an LSTM consumes the
//! residual prefix, a residual head forecasts the next residual, and a
//! logistic head turns that forecast into a conversion probability.

use std::cell::Cell;
use std::path::Path;

use candle_core::{DType, Device, Tensor, D};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::agingvae::{vae_predict_batch, AgingVaeModel, PredictMode};
use crate::datamodel::{read_array, write_array, BrainNetwork, LongitudinalSubject, ResidualSequence, GRAPH_FEATURE_DIM};
use crate::error::{Error, Result};
use crate::graphencoder::GraphEncoderModel;
use crate::nn::{
    bce_with_logits, fit, load_descriptor, load_params, mse, rows_tensor, save_model, scalar, sigmoid,
    steps_per_epoch, stratified_holdout, Init, Linear, ParamStore, Standardizer, TrainConfig, TrainHistory,
};
use crate::synth::stream;

pub const DEFAULT_HIDDEN: usize = 64;

/// `actual − predicted`, elementwise.
pub fn compute_residual(actual: &[f32], predicted: &[f32]) -> Result<Vec<f32>> {
    if actual.len() != predicted.len() {
        return Err(Error::validation(
            "residual",
            format!("length mismatch {} vs {}", actual.len(), predicted.len()),
        ));
    }
    if actual.len() != GRAPH_FEATURE_DIM {
        return Err(Error::validation("residual", format!("length {} != {GRAPH_FEATURE_DIM}", actual.len())));
    }
    Ok(actual.iter().zip(predicted).map(|(a, p)| a - p).collect())
}

/// Residuals of every consecutive visit pair of `subject`.
pub fn build_residual_sequence(
    subject: &LongitudinalSubject,
    encoder: &GraphEncoderModel,
    vae: &AgingVaeModel,
) -> Result<ResidualSequence> {
    Ok(build_residual_sequences(&[subject], encoder, vae)?.remove(0))
}

/// Batched [`build_residual_sequence`].
pub fn build_residual_sequences(
    subjects: &[&LongitudinalSubject],
    encoder: &GraphEncoderModel,
    vae: &AgingVaeModel,
) -> Result<Vec<ResidualSequence>> {
    for s in subjects {
        if s.visits.len() < 2 {
            return Err(Error::validation(
                format!("{}.visits", s.subject_id),
                "at least two visits are needed for a residual",
            ));
        }
    }
    let nets: Vec<&BrainNetwork> = subjects.iter().flat_map(|s| s.visits.iter().map(|v| &v.network)).collect();
    let feats = encoder.encode_batch(&nets)?;
    let mut inputs = Vec::new();
    let mut gaps = Vec::new();
    let mut offset = 0;
    for s in subjects {
        for w in 0..s.visits.len() - 1 {
            inputs.push(feats[offset + w].as_slice());
            gaps.push((s.visits[w + 1].visit_index - s.visits[w].visit_index) as usize);
        }
        offset += s.visits.len();
    }
    let preds = vae_predict_batch(vae, &inputs, &gaps, PredictMode::Mean)?;
    let mut out = Vec::with_capacity(subjects.len());
    let (mut offset, mut p) = (0, 0);
    for s in subjects {
        let mut res = Vec::with_capacity(s.visits.len() - 1);
        for w in 1..s.visits.len() {
            res.push(compute_residual(&feats[offset + w], &preds[p])?);
            p += 1;
        }
        offset += s.visits.len();
        out.push(ResidualSequence::new(res, s.visits[1..].iter().map(|v| v.visit_index).collect())?);
    }
    Ok(out)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ConversionDescriptor {
    kind: String,
    input_dim: usize,
    hidden: usize,
}

/// Hidden and cell state of the recurrent core.
#[derive(Clone, Debug)]
pub struct LstmState {
    pub h: Tensor,
    pub c: Tensor,
}

#[derive(Clone, Debug)]
pub struct ConversionModel {
    store: ParamStore,
    input: Linear,
    recurrent: Linear,
    residual_head: Linear,
    conversion_head: Linear,
    hidden: usize,
    norm: Standardizer,
    trained: bool,
}

impl ConversionModel {
    pub fn new(hidden: usize, seed: u64, dtype: DType) -> Result<Self> {
        if hidden == 0 {
            return Err(Error::Config("hidden width must be >= 1".into()));
        }
        let mut rng = stream(seed, &[0x4c53]);
        let mut store = ParamStore::new(dtype);
        let d = GRAPH_FEATURE_DIM;
        let input = Linear::new(&mut store, "lstm.input", d, 4 * hidden, true, Init::Default, &mut rng)?;
        let recurrent = Linear::new(&mut store, "lstm.recurrent", hidden, 4 * hidden, false, Init::Default, &mut rng)?;
        let residual_head = Linear::new(&mut store, "residual_head", hidden, d, true, Init::Default, &mut rng)?;
        let conversion_head = Linear::new(&mut store, "conversion_head", d, 1, true, Init::Default, &mut rng)?;
        Ok(Self {
            store,
            input,
            recurrent,
            residual_head,
            conversion_head,
            hidden,
            norm: Standardizer::identity(d),
            trained: false,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn is_trained(&self) -> bool {
        self.trained
    }

    pub fn set_trained(&mut self) {
        self.trained = true;
    }

    pub fn normalization(&self) -> &Standardizer {
        &self.norm
    }

    pub fn set_normalization(&mut self, norm: Standardizer) {
        self.norm = norm;
    }

    /// Replaces the conversion head's weights.
    pub fn set_conversion_head(&mut self, head: Linear) -> Result<()> {
        if head.in_dim() != GRAPH_FEATURE_DIM || head.out_dim() != 1 {
            return Err(Error::validation("conversion head", "must map 256 -> 1"));
        }
        self.conversion_head = head;
        Ok(())
    }

    fn ensure_trained(&self) -> Result<()> {
        if self.trained {
            Ok(())
        } else {
            Err(Error::State("conversion model has not been trained or loaded".into()))
        }
    }

    pub fn initial_state(&self, batch: usize) -> Result<LstmState> {
        let z = Tensor::zeros((batch, self.hidden), self.store.dtype(), &Device::Cpu)?;
        Ok(LstmState { h: z.clone(), c: z })
    }

    /// One recurrence on standardised residuals `B x 256`.
    pub fn step(&self, state: &LstmState, x: &Tensor) -> Result<LstmState> {
        let gates = (self.input.forward(x)? + self.recurrent.forward(&state.h)?)?;
        let chunk = |k: usize| gates.narrow(D::Minus1, k * self.hidden, self.hidden);
        let i = sigmoid(&chunk(0)?)?;
        let f = sigmoid(&chunk(1)?)?;
        let g = chunk(2)?.tanh()?;
        let o = sigmoid(&chunk(3)?)?;
        let c = ((f * &state.c)? + (i * g)?)?;
        let h = (o * c.tanh()?)?;
        Ok(LstmState { h, c })
    }

    /// Standardised next-residual forecast and conversion logit.
    pub fn heads(&self, state: &LstmState) -> Result<(Tensor, Tensor)> {
        let r = self.residual_head.forward(&state.h)?;
        let logit = self.conversion_head.forward(&r)?.squeeze(D::Minus1)?;
        Ok((r, logit))
    }

    /// Runs equal-length standardised prefixes, one `B x 256` tensor per
    /// time step.
    pub fn run(&self, steps: &[Tensor]) -> Result<LstmState> {
        let b = steps.first().ok_or_else(|| Error::validation("prefix", "must be non-empty"))?.dims2()?.0;
        let mut s = self.initial_state(b)?;
        for x in steps {
            s = self.step(&s, x)?;
        }
        Ok(s)
    }

    pub fn standardize(&self, rows: &[&[f32]]) -> Result<Tensor> {
        let (m, s) = self.norm.tensors(self.store.dtype())?;
        Ok(rows_tensor(rows, self.store.dtype())?.broadcast_sub(&m)?.broadcast_div(&s)?)
    }

    fn unstandardize(&self, t: &Tensor) -> Result<Tensor> {
        let (m, s) = self.norm.tensors(self.store.dtype())?;
        Ok(t.broadcast_mul(&s)?.broadcast_add(&m)?)
    }

    /// Time-major standardised tensors for equal-length sequences.
    fn time_steps(&self, seqs: &[&ResidualSequence]) -> Result<Vec<Tensor>> {
        let len = seqs[0].len();
        (0..len)
            .map(|t| {
                let rows: Vec<&[f32]> = seqs.iter().map(|s| s.residuals()[t].as_slice()).collect();
                self.standardize(&rows)
            })
            .collect()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        self.ensure_trained()?;
        let d = ConversionDescriptor {
            kind: "conversion_lstm".into(),
            input_dim: GRAPH_FEATURE_DIM,
            hidden: self.hidden,
        };
        save_model(dir, &d, &self.store)?;
        write_array(&dir.join("residual_norm.f32"), &[2, GRAPH_FEATURE_DIM], &self.norm.to_array())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let d: ConversionDescriptor = load_descriptor(dir)?;
        if d.kind != "conversion_lstm" || d.input_dim != GRAPH_FEATURE_DIM {
            return Err(Error::load(dir, "not a conversion model with the expected widths"));
        }
        let mut m = Self::new(d.hidden, 0, DType::F32)?;
        load_params(dir, &m.store)?;
        m.norm = Standardizer::from_array(&read_array(&dir.join("residual_norm.f32"))?.1)?;
        m.trained = true;
        Ok(m)
    }
}

/// Probability from a logit, kept strictly inside (0, 1).
fn probability(logit: f64) -> f64 {
    (1.0 / (1.0 + (-logit).exp())).clamp(f64::EPSILON, 1.0 - f64::EPSILON)
}

/// Forecast of the next residual and the conversion probability.
pub fn predict_conversion(model: &ConversionModel, prefix: &ResidualSequence) -> Result<(Vec<f32>, f64)> {
    Ok(predict_conversion_batch(model, &[prefix])?.remove(0))
}

/// Batched [`predict_conversion`]; prefixes may differ in length.
pub fn predict_conversion_batch(model: &ConversionModel, prefixes: &[&ResidualSequence]) -> Result<Vec<(Vec<f32>, f64)>> {
    model.ensure_trained()?;
    let mut out = vec![None; prefixes.len()];
    for (_, idx) in by_length(prefixes) {
        let group: Vec<&ResidualSequence> = idx.iter().map(|&i| prefixes[i]).collect();
        for s in &group {
            if s.residuals().iter().any(|r| r.iter().any(|v| !v.is_finite())) {
                return Err(Error::validation("residuals", "contain NaN or Inf"));
            }
        }
        let state = model.run(&model.time_steps(&group)?)?;
        let (r, logit) = model.heads(&state)?;
        let r = model.unstandardize(&r)?.to_dtype(DType::F32)?.to_vec2::<f32>()?;
        let logit = logit.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        for (k, &i) in idx.iter().enumerate() {
            crate::error::ensure_finite("predicted residual", &r[k])?;
            if !logit[k].is_finite() {
                return Err(Error::Numerical("conversion logit is not finite".into()));
            }
            out[i] = Some((r[k].clone(), probability(logit[k])));
        }
    }
    Ok(out.into_iter().map(|o| o.expect("every prefix is in one length group")).collect())
}

/// Indices grouped by sequence length, in ascending length order.
fn by_length(seqs: &[&ResidualSequence]) -> Vec<(usize, Vec<usize>)> {
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, s) in seqs.iter().enumerate() {
        groups.entry(s.len()).or_default().push(i);
    }
    groups.into_iter().collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ConversionConfig {
    pub train: TrainConfig,
    pub hidden: usize,
    /// Weight of the next-residual forecasting term.
    pub lambda_r: f64,
    pub threshold: f64,
    pub val_fraction: f64,
}

impl Default for ConversionConfig {
    fn default() -> Self {
        Self {
            train: TrainConfig {
                batch_size: 16,
                ..TrainConfig::default()
            },
            hidden: DEFAULT_HIDDEN,
            lambda_r: 1.0,
            threshold: 0.5,
            val_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConversionTrainReport {
    pub history: TrainHistory,
    pub skipped_subjects: usize,
    pub val_accuracy: f64,
}

/// Trains on full residual sequences: all but the last residual form the
/// input prefix, the last one supervises the residual head.
pub fn train_conversion(data: &[(&ResidualSequence, bool)], cfg: &ConversionConfig) -> Result<(ConversionModel, ConversionTrainReport)> {
    let tc = &cfg.train;
    tc.validate()?;
    if !(cfg.lambda_r >= 0.0) || !(cfg.threshold > 0.0 && cfg.threshold < 1.0) {
        return Err(Error::Config("lambda_r must be >= 0 and threshold in (0, 1)".into()));
    }
    let usable: Vec<(&ResidualSequence, bool)> = data.iter().filter(|(s, _)| s.len() >= 2).copied().collect();
    let skipped = data.len() - usable.len();
    if skipped > 0 {
        log::info!("conversion model: skipped {skipped} subjects with fewer than two residuals");
    }
    let labels: Vec<bool> = usable.iter().map(|(_, l)| *l).collect();
    if !labels.iter().any(|l| *l) || labels.iter().all(|l| *l) {
        return Err(Error::Stratification("conversion training needs both converters and non-converters".into()));
    }
    let mut rng = stream(tc.seed, &[0x4c53, 1]);
    let (train_idx, val_idx) = stratified_holdout(&labels, cfg.val_fraction, &mut rng);

    let dtype = DType::F32;
    let mut model = ConversionModel::new(cfg.hidden, tc.seed, dtype)?;
    let rows: Vec<&[f32]> = train_idx.iter().flat_map(|&i| usable[i].0.residuals().iter().map(|r| r.as_slice())).collect();
    model.set_normalization(Standardizer::fit(&rows));

    // Prefix, target and label tensors for a set of same-length examples.
    let tensors = |idx: &[usize]| -> Result<(Vec<Tensor>, Tensor, Tensor)> {
        let seqs: Vec<&ResidualSequence> = idx.iter().map(|&i| usable[i].0).collect();
        let len = seqs[0].len();
        let steps: Vec<Tensor> = model.time_steps(&seqs)?.into_iter().take(len - 1).collect();
        let target: Vec<&[f32]> = seqs.iter().map(|s| s.residuals()[len - 1].as_slice()).collect();
        let y: Vec<f32> = idx.iter().map(|&i| if usable[i].1 { 1.0 } else { 0.0 }).collect();
        let n = y.len();
        Ok((steps, model.standardize(&target)?, Tensor::from_vec(y, n, &Device::Cpu)?.to_dtype(dtype)?))
    };
    let loss_of = |idx: &[usize]| -> Result<(Tensor, Tensor)> {
        let (steps, target, y) = tensors(idx)?;
        let (r, logit) = model.heads(&model.run(&steps)?)?;
        let mut loss = bce_with_logits(&logit, &y)?;
        if cfg.lambda_r > 0.0 {
            loss = (loss + (mse(&r, &target)? * cfg.lambda_r)?)?;
        }
        Ok((loss, logit))
    };
    let length_groups = |idx: &[usize]| -> Vec<Vec<usize>> {
        let seqs: Vec<&ResidualSequence> = idx.iter().map(|&i| usable[i].0).collect();
        by_length(&seqs).into_iter().map(|(_, g)| g.into_iter().map(|k| idx[k]).collect()).collect()
    };

    let steps = steps_per_epoch(tc, train_idx.len());
    let last_train = Cell::new(f64::NAN);
    let history = fit(
        model.store(),
        tc,
        "conversion model",
        |_, opt| {
            let order: Vec<usize> = sample(&mut rng, train_idx.len(), train_idx.len())
                .into_iter()
                .map(|k| train_idx[k])
                .collect();
            let mut sum = 0.0;
            for step in 0..steps {
                let start = (step * tc.batch_size) % order.len();
                let batch = &order[start..(start + tc.batch_size).min(order.len())];
                let mut total: Option<Tensor> = None;
                for g in length_groups(batch) {
                    let (l, _) = loss_of(&g)?;
                    let l = (l * (g.len() as f64 / batch.len() as f64))?;
                    total = Some(match total {
                        Some(t) => (t + l)?,
                        None => l,
                    });
                }
                sum += opt.step(&total.expect("batch is non-empty"))?;
            }
            last_train.set(sum / steps as f64);
            Ok(last_train.get())
        },
        || {
            if val_idx.is_empty() {
                return Ok(last_train.get());
            }
            let mut total = 0.0;
            for g in length_groups(&val_idx) {
                total += scalar(&loss_of(&g)?.0)? * g.len() as f64 / val_idx.len() as f64;
            }
            Ok(total)
        },
    )?;
    model.trained = true;

    let val_accuracy = if val_idx.is_empty() {
        f64::NAN
    } else {
        let prefixes: Vec<ResidualSequence> = val_idx
            .iter()
            .map(|&i| usable[i].0.prefix(usable[i].0.len() - 1))
            .collect::<Result<_>>()?;
        let refs: Vec<&ResidualSequence> = prefixes.iter().collect();
        let preds = predict_conversion_batch(&model, &refs)?;
        let hits = val_idx
            .iter()
            .zip(&preds)
            .filter(|(&i, (_, p))| (*p >= cfg.threshold) == usable[i].1)
            .count();
        hits as f64 / val_idx.len() as f64
    };
    Ok((
        model,
        ConversionTrainReport {
            history,
            skipped_subjects: skipped,
            val_accuracy,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(values: &[f32]) -> ResidualSequence {
        let r: Vec<Vec<f32>> = values.iter().map(|&v| vec![v; GRAPH_FEATURE_DIM]).collect();
        let idx = (1..=values.len() as u32).collect();
        ResidualSequence::new(r, idx).unwrap()
    }

    #[test]
    fn residual_arithmetic() {
        let a: Vec<f32> = (1..=256).map(|i| i as f32).collect();
        let b: Vec<f32> = a.iter().map(|v| v / 2.0).collect();
        let r = compute_residual(&a, &b).unwrap();
        assert_eq!(r, b);
        assert!(compute_residual(&a, &a).unwrap().iter().all(|v| *v == 0.0));
        assert!(compute_residual(&a, &a[..10]).is_err());
    }

    #[test]
    fn zero_conversion_head_gives_half() {
        let mut m = ConversionModel::new(8, 1, DType::F32).unwrap();
        let mut store = ParamStore::new(DType::F32);
        let mut rng = stream(0, &[]);
        let head = Linear::new(&mut store, "h", GRAPH_FEATURE_DIM, 1, true, Init::Zero, &mut rng).unwrap();
        m.set_conversion_head(head).unwrap();
        m.set_trained();
        for v in [-10.0, 0.0, 3.0, 10.0] {
            let (r, p) = predict_conversion(&m, &seq(&[v, -v])).unwrap();
            assert_eq!(r.len(), GRAPH_FEATURE_DIM);
            assert_eq!(p, 0.5);
        }
    }

    #[test]
    fn untrained_and_single_class() {
        let m = ConversionModel::new(8, 1, DType::F32).unwrap();
        assert!(matches!(predict_conversion(&m, &seq(&[1.0])), Err(Error::State(_))));
        let s = seq(&[0.0, 1.0, 2.0]);
        let data = vec![(&s, true), (&s, true)];
        assert!(matches!(
            train_conversion(&data, &ConversionConfig::default()),
            Err(Error::Stratification(_))
        ));
    }

    #[test]
    fn mixed_lengths_match_single_predictions() {
        let mut m = ConversionModel::new(8, 2, DType::F32).unwrap();
        m.set_trained();
        let a = seq(&[0.5, -1.0]);
        let b = seq(&[2.0]);
        let c = seq(&[0.1, 0.2, 0.3]);
        let batch = predict_conversion_batch(&m, &[&a, &b, &c]).unwrap();
        for (s, got) in [&a, &b, &c].into_iter().zip(batch) {
            let single = predict_conversion(&m, s).unwrap();
            assert_eq!(single.1, got.1);
            assert_eq!(single.0, got.0);
        }
    }
}
