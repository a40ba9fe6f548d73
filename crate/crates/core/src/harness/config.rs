use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::agingvae::VaeConfig;
use crate::conversion::ConversionConfig;
use crate::error::{Error, Result};
use crate::graphencoder::EncoderConfig;
use crate::interpret::{Averaging, Reference, DEFAULT_FRACTION};
use crate::netgen::NetgenConfig;
use crate::synth::{stream_seed, SynthConfig};

/// Keys without a section that set the same field in every stage.
pub const BROADCAST_KEYS: [&str; 3] = ["learning_rate", "max_epochs", "patience"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InterpretConfig {
    pub fraction: f64,
    pub averaging: Averaging,
    /// Visit gap between the forecast origin and the compared network;
    /// `None` uses baseline to final visit.
    pub gap: Option<u32>,
    pub reference: Reference,
}

impl Default for InterpretConfig {
    fn default() -> Self {
        Self {
            fraction: DEFAULT_FRACTION,
            averaging: Averaging::MeanAbs,
            gap: None,
            reference: Reference::Healthy,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Longitudinal CN subjects withheld from ageing-model training.
    pub vae_test_fraction: f64,
    /// Cross-validate the graph encoder on the baseline cohort.
    pub encoder_cv: bool,
    /// Repeat conversion cross-validation with shuffled labels.
    pub shuffle_control: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            vae_test_fraction: 0.2,
            encoder_cv: true,
            shuffle_control: true,
        }
    }
}

/// Every setting of a pipeline run. Per-stage seeds are derived from the
/// master `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub folds: usize,
    pub synth: SynthConfig,
    pub netgen: NetgenConfig,
    pub encoder: EncoderConfig,
    pub vae: VaeConfig,
    pub rnn: ConversionConfig,
    pub interpret: InterpretConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 0,
            folds: 5,
            synth: SynthConfig::default(),
            netgen: NetgenConfig::default(),
            encoder: EncoderConfig::default(),
            vae: VaeConfig::default(),
            rnn: ConversionConfig::default(),
            interpret: InterpretConfig::default(),
            eval: EvalConfig::default(),
        };
        c.derive_seeds();
        c
    }
}

fn parse_like(current: &Value, raw: &str, key: &str) -> Result<Value> {
    let raw = raw.trim();
    let bad = || Error::Config(format!("`{key}`: cannot parse `{raw}`"));
    if matches!(current, Value::Number(_)) && (raw.eq_ignore_ascii_case("none") || raw.eq_ignore_ascii_case("null")) {
        return Ok(Value::Null);
    }
    Ok(match current {
        Value::Bool(_) => Value::Bool(raw.parse().map_err(|_| bad())?),
        Value::Number(n) if n.is_u64() => match raw.parse::<u64>() {
            Ok(v) => Value::from(v),
            Err(_) => return Err(bad()),
        },
        Value::Number(_) => {
            let v: f64 = raw.parse().map_err(|_| bad())?;
            serde_json::Number::from_f64(v).map(Value::Number).ok_or_else(bad)?
        }
        Value::String(_) => Value::String(raw.to_string()),
        Value::Array(items) => {
            let proto = items.first().cloned().unwrap_or(Value::from(0u64));
            let parts = raw.trim_matches(|c| c == '[' || c == ']');
            Value::Array(
                parts
                    .split(',')
                    .map(|p| parse_like(&proto, p, key))
                    .collect::<Result<_>>()?,
            )
        }
        Value::Null | Value::Object(_) => {
            if raw.eq_ignore_ascii_case("none") || raw.eq_ignore_ascii_case("null") {
                Value::Null
            } else if let Ok(v) = raw.parse::<u64>() {
                Value::from(v)
            } else if let Ok(v) = raw.parse::<f64>() {
                serde_json::Number::from_f64(v).map(Value::Number).ok_or_else(bad)?
            } else {
                Value::String(raw.to_string())
            }
        }
    })
}

fn flatten(prefix: &str, v: &Value, out: &mut BTreeMap<String, String>) {
    match v {
        Value::Object(m) => {
            for (k, v) in m {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten(&key, v, out);
            }
        }
        Value::Array(items) => {
            let parts: Vec<String> = items.iter().map(scalar_text).collect();
            out.insert(prefix.to_string(), parts.join(","));
        }
        other => {
            out.insert(prefix.to_string(), scalar_text(other));
        }
    }
}

fn scalar_text(v: &Value) -> String {
    match v {
        Value::Null => "none".into(),
        Value::String(s) => s.clone(),
        other => other.to_string(),
    }
}

fn set_path(root: &mut Value, path: &[&str], raw: &str, key: &str) -> Result<()> {
    let mut node = root;
    for p in &path[..path.len() - 1] {
        node = node
            .as_object_mut()
            .and_then(|m| m.get_mut(*p))
            .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
    }
    let m: &mut Map<String, Value> = node
        .as_object_mut()
        .ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
    let last = path[path.len() - 1];
    let current = m.get(last).ok_or_else(|| Error::Config(format!("unknown key `{key}`")))?;
    let v = parse_like(current, raw, key)?;
    m.insert(last.to_string(), v);
    Ok(())
}

fn broadcast(v: &mut Value, field: &str, raw: &str, depth: usize, hits: &mut usize) -> Result<()> {
    if let Value::Object(m) = v {
        let keys: Vec<String> = m.keys().cloned().collect();
        for k in keys {
            if depth > 0 && k == field {
                let nv = parse_like(&m[&k], raw, field)?;
                m.insert(k, nv);
                *hits += 1;
            } else {
                broadcast(m.get_mut(&k).expect("key exists"), field, raw, depth + 1, hits)?;
            }
        }
    }
    Ok(())
}

impl RunConfig {
    /// Checks the cross-stage invariants.
    pub fn validate(&self) -> Result<()> {
        if self.folds < 2 {
            return Err(Error::Config(format!("folds must be >= 2, got {}", self.folds)));
        }
        self.synth.validate()?;
        for t in [&self.netgen.node, &self.netgen.edge, &self.encoder.train, &self.vae.train, &self.rnn.train] {
            t.validate()?;
        }
        let fr = self.interpret.fraction;
        if !(fr > 0.0 && fr <= 1.0) {
            return Err(Error::Config(format!("interpret.fraction must lie in (0, 1], got {fr}")));
        }
        let tf = self.eval.vae_test_fraction;
        if !(0.0..1.0).contains(&tf) {
            return Err(Error::Config(format!("eval.vae_test_fraction must lie in [0, 1), got {tf}")));
        }
        Ok(())
    }

    fn derive_seeds(&mut self) {
        let s = self.seed;
        self.synth.seed = s;
        self.netgen.node.seed = stream_seed(s, &[0x5354, 1]);
        self.netgen.edge.seed = stream_seed(s, &[0x5354, 2]);
        self.encoder.train.seed = stream_seed(s, &[0x5354, 3]);
        self.vae.train.seed = stream_seed(s, &[0x5354, 4]);
        self.rnn.train.seed = stream_seed(s, &[0x5354, 5]);
    }

    /// Applies one `key = value` setting. Dotted keys address a field;
    /// [`BROADCAST_KEYS`] set every stage at once.
    pub fn set(&mut self, key: &str, raw: &str) -> Result<()> {
        let key = key.trim();
        if key.ends_with(".seed") {
            return Err(Error::Config(format!("`{key}` is derived from the master `seed`")));
        }
        let mut v = serde_json::to_value(&*self).map_err(|e| Error::Config(e.to_string()))?;
        if BROADCAST_KEYS.contains(&key) {
            let mut hits = 0;
            broadcast(&mut v, key, raw, 0, &mut hits)?;
        } else {
            let path: Vec<&str> = key.split('.').collect();
            set_path(&mut v, &path, raw, key)?;
        }
        *self = serde_json::from_value(v).map_err(|e| Error::Config(format!("`{key}`: {e}")))?;
        self.derive_seeds();
        Ok(())
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Defaults, then the file (if any), then the overrides in order.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut c = Self::default();
        if let Some(p) = file {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            c.apply_text(&text)?;
        }
        for (k, v) in overrides {
            c.set(k, v)?;
        }
        c.validate()?;
        Ok(c)
    }

    /// Every field as sorted `key = value` lines.
    pub fn to_text(&self) -> String {
        let v = serde_json::to_value(self).expect("config serializes");
        let mut flat = BTreeMap::new();
        flatten("", &v, &mut flat);
        // Derived seeds are recorded as comments so the text reads back.
        flat.into_iter()
            .map(|(k, v)| if k.ends_with(".seed") { format!("# {k} = {v}\n") } else { format!("{k} = {v}\n") })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.set("vae.beta", "0.01").unwrap();
        c.set("netgen.edge.steps_per_epoch", "none").unwrap();
        c.set("encoder.hidden", "32,48").unwrap();
        c.set("interpret.averaging", "signed_mean").unwrap();
        c.set("seed", "7").unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&c.to_text()).unwrap_or_else(|e| panic!("{e}"));
        assert_eq!(back, c);
        assert_eq!(c.synth.seed, 7);
        assert_eq!(c.encoder.hidden, [32, 48]);
    }

    #[test]
    fn broadcast_sets_every_stage() {
        let mut c = RunConfig::default();
        c.set("learning_rate", "0.001").unwrap();
        for t in [&c.netgen.node, &c.netgen.edge, &c.encoder.train, &c.vae.train, &c.rnn.train] {
            assert_eq!(t.learning_rate, 0.001);
        }
    }

    #[test]
    fn bad_keys_and_values() {
        let mut c = RunConfig::default();
        assert!(matches!(c.set("vae.nope", "1"), Err(Error::Config(_))));
        assert!(matches!(c.set("folds", "two"), Err(Error::Config(_))));
        assert!(matches!(c.set("vae.train.seed", "3"), Err(Error::Config(_))));
        assert!(c.apply_text("no equals sign").is_err());
        c.set("folds", "1").unwrap();
        assert!(c.validate().is_err());
    }
}
