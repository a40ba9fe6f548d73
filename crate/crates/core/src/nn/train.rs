use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::index::sample;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ParamStore;
use crate::error::{Error, Result};

/// Optimiser and stopping settings shared by every training stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    /// Minibatches per epoch for stages that sample from a large pool;
    /// `None` means one pass over the training set.
    pub steps_per_epoch: Option<usize>,
    /// Smallest drop in validation loss that resets the patience counter.
    pub min_delta: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 5e-4,
            max_epochs: 1000,
            patience: 20,
            batch_size: 32,
            steps_per_epoch: None,
            min_delta: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!("learning rate must be > 0, got {}", self.learning_rate)));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be >= 1".into()));
        }
        if !(self.min_delta >= 0.0 && self.min_delta.is_finite()) {
            return Err(Error::Config(format!("min_delta must be >= 0, got {}", self.min_delta)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch size and max epochs must be >= 1".into()));
        }
        Ok(())
    }
}

/// Adaptive-moment optimiser (Adam: AdamW with zero weight decay).
pub struct Adam {
    inner: AdamW,
}

impl Adam {
    pub fn new(vars: Vec<Var>, learning_rate: f64) -> Result<Self> {
        let params = ParamsAdamW {
            lr: learning_rate,
            weight_decay: 0.0,
            ..ParamsAdamW::default()
        };
        Ok(Self {
            inner: AdamW::new(vars, params)?,
        })
    }

    /// Backpropagates `loss` and applies one update. Returns the loss value.
    pub fn step(&mut self, loss: &Tensor) -> Result<f64> {
        let value = super::scalar(loss)?;
        if !value.is_finite() {
            return Err(Error::Numerical(format!("training loss diverged ({value})")));
        }
        self.inner.backward_step(loss)?;
        Ok(value)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn epochs(&self) -> usize {
        self.train_loss.len()
    }

    pub fn best_val_loss(&self) -> Option<f64> {
        self.val_loss.get(self.best_epoch).copied()
    }
}

/// Patience-based stopping on validation loss with best-epoch restore.
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    mark: f64,
    best: f64,
    best_epoch: usize,
    wait: usize,
    snapshot: Option<Vec<Tensor>>,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            min_delta: 0.0,
            mark: f64::INFINITY,
            best: f64::INFINITY,
            best_epoch: 0,
            wait: 0,
            snapshot: None,
        }
    }

    /// Improvements smaller than `delta` still update the restored
    /// parameters but do not reset patience.
    pub fn with_min_delta(mut self, delta: f64) -> Self {
        self.min_delta = delta;
        self
    }

    /// Records one epoch. Returns `true` when training should stop.
    pub fn observe(&mut self, epoch: usize, val_loss: f64, store: &ParamStore) -> Result<bool> {
        if !val_loss.is_finite() {
            return Err(Error::Numerical(format!("validation loss diverged ({val_loss})")));
        }
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = epoch;
            self.snapshot = Some(store.snapshot()?);
        }
        if val_loss < self.mark - self.min_delta {
            self.mark = val_loss;
            self.wait = 0;
        } else {
            self.wait += 1;
        }
        Ok(self.wait >= self.patience)
    }

    /// Restores the best parameters and fills in the history summary.
    pub fn finish(self, store: &ParamStore, history: &mut TrainHistory, stopped: bool) -> Result<()> {
        if let Some(s) = &self.snapshot {
            store.restore(s)?;
        }
        history.best_epoch = self.best_epoch;
        history.stopped_early = stopped;
        Ok(())
    }
}

/// Runs the shared epoch loop: one call of `epoch` per epoch (returning the
/// mean training loss), then `validate`, patience-based stopping and restore
/// of the best epoch's parameters.
pub fn fit(
    store: &ParamStore,
    cfg: &TrainConfig,
    stage: &str,
    mut epoch: impl FnMut(usize, &mut Adam) -> Result<f64>,
    mut validate: impl FnMut() -> Result<f64>,
) -> Result<TrainHistory> {
    cfg.validate()?;
    let mut opt = Adam::new(store.vars(), cfg.learning_rate)?;
    let mut stopper = EarlyStopping::new(cfg.patience).with_min_delta(cfg.min_delta);
    let mut history = TrainHistory::default();
    let mut stopped = false;
    for e in 0..cfg.max_epochs {
        let train = epoch(e, &mut opt)?;
        let val = validate()?;
        log::debug!("{stage} epoch {e}: train {train:.6} val {val:.6}");
        history.train_loss.push(train);
        history.val_loss.push(val);
        if stopper.observe(e, val, store)? {
            stopped = true;
            break;
        }
    }
    stopper.finish(store, &mut history, stopped)?;
    log::info!(
        "{stage}: {} epochs, best epoch {} (val {:.6})",
        history.epochs(),
        history.best_epoch,
        history.best_val_loss().unwrap_or(f64::NAN)
    );
    Ok(history)
}

/// Splits indices into (train, validation) keeping both classes in each
/// part when possible.
pub fn stratified_holdout(labels: &[bool], fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for class in [false, true] {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == class).collect();
        let k = ((members.len() as f64 * fraction).round() as usize).min(members.len().saturating_sub(1));
        let picked = sample(rng, members.len(), members.len()).into_vec();
        for (r, p) in picked.into_iter().enumerate() {
            if r < k {
                val.push(members[p]);
            } else {
                train.push(members[p]);
            }
        }
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

/// Number of minibatches per epoch for a training set of `n` items.
pub fn steps_per_epoch(cfg: &TrainConfig, n: usize) -> usize {
    cfg.steps_per_epoch.unwrap_or_else(|| n.div_ceil(cfg.batch_size)).max(1)
}
