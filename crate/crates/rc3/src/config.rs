//! Run configuration: a TOML document with one table per section, layered as
//! built-in defaults < `RC3_SEED` < config file < command-line flags.

use std::collections::BTreeMap;
use std::path::Path;

use rc3_core::eval::{RetrievalOptions, Scorer};
use rc3_core::model::ModelConfig;
use rc3_core::synthdata::{ConceptWorld, CorpusSpec, WorldConfig};
use rc3_core::trainer::TrainConfig;
use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::error::{Error, Result};

pub const SECTIONS: [&str; 5] = ["model", "world", "data", "train", "eval"];

/// Evaluation and held-out set sizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub k_candidates: usize,
    pub n_queries: usize,
    pub scorer: Scorer,
    pub seed: u64,
    /// Held-out strict triplets; retrieval, matching and cloze draw from them.
    pub n_heldout: usize,
    /// Held-out weak triplets for the regularization probe.
    pub probe_weak: usize,
    /// Held-out strict triplets reported as probe controls.
    pub probe_controls: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        let r = RetrievalOptions::default();
        Self {
            k_candidates: r.k_candidates,
            n_queries: r.n_queries,
            scorer: r.scorer,
            seed: r.seed,
            n_heldout: 1000,
            probe_weak: 300,
            probe_controls: 100,
        }
    }
}

impl EvalConfig {
    pub fn retrieval(&self) -> RetrievalOptions {
        RetrievalOptions {
            k_candidates: self.k_candidates,
            n_queries: self.n_queries,
            scorer: self.scorer,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub model: ModelConfig,
    pub world: WorldConfig,
    pub data: CorpusSpec,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl Config {
    /// Checks every section and their mutual consistency; returns the world.
    pub fn validate(&self) -> Result<ConceptWorld> {
        self.model.validate()?;
        let world = ConceptWorld::new(&self.world, &self.model)?;
        self.data.validate(&world)?;
        self.train.validate()?;
        if self.eval.k_candidates < 2 {
            return Err(Error::Config(format!(
                "eval.k_candidates = {} must be at least 2",
                self.eval.k_candidates
            )));
        }
        Ok(world)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes to TOML")
    }

    /// Every `(section, key)` pair with its default value.
    pub fn fields() -> Vec<(&'static str, String, Value)> {
        let mut out = Vec::new();
        let base = defaults_table();
        for s in SECTIONS {
            if let Some(Value::Table(t)) = base.get(s) {
                out.extend(t.iter().map(|(k, v)| (s, k.clone(), v.clone())));
            }
        }
        out
    }
}

fn defaults_table() -> Table {
    Table::try_from(Config::default()).expect("config serializes to a table")
}

/// One command-line override, already keyed by section.
#[derive(Clone, Debug, PartialEq)]
pub struct Override {
    pub section: String,
    pub key: String,
    pub raw: String,
}

/// Resolves the layered configuration.
///
/// `file` is the parsed config document, `env_seed` the raw `RC3_SEED`
/// value, and `overrides` are applied in order, so later entries win.
pub fn resolve(file: Option<&str>, env_seed: Option<&str>, overrides: &[Override]) -> Result<Config> {
    let mut doc = defaults_table();
    if let Some(raw) = env_seed {
        let seed: u64 = raw
            .trim()
            .parse()
            .map_err(|_| Error::Config(format!("RC3_SEED = {raw:?} is not an unsigned integer")))?;
        let seed = Value::Integer(to_i64(seed, "RC3_SEED")?);
        for (_, section) in doc.iter_mut() {
            if let Value::Table(t) = section {
                if t.contains_key("seed") {
                    t.insert("seed".into(), seed.clone());
                }
            }
        }
    }
    if let Some(text) = file {
        let parsed: Table = toml::from_str(text).map_err(|e| Error::Config(format!("config file: {}", e.message())))?;
        merge(&mut doc, parsed)?;
    }
    for o in overrides {
        let default = defaults_table()
            .get(&o.section)
            .and_then(|s| s.get(&o.key))
            .cloned()
            .ok_or_else(|| Error::Usage(format!("no config field {}.{}", o.section, o.key)))?;
        let v = parse_like(&default, &o.raw)
            .map_err(|e| Error::Config(format!("{}.{} = {:?}: {e}", o.section, o.key, o.raw)))?;
        match doc.get_mut(&o.section) {
            Some(Value::Table(t)) => {
                t.insert(o.key.clone(), v);
            }
            _ => return Err(Error::Config(format!("section {} is not a table", o.section))),
        }
    }
    Value::Table(doc)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))
}

pub fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn to_i64(x: u64, what: &str) -> Result<i64> {
    i64::try_from(x).map_err(|_| Error::Config(format!("{what} = {x} exceeds the TOML integer range")))
}

fn merge(base: &mut Table, over: Table) -> Result<()> {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => merge(b, o)?,
            (Some(Value::Table(_)), _) => {
                return Err(Error::Config(format!("config file: [{k}] must be a table")));
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    Ok(())
}

/// Parses `raw` into a TOML value of the same kind as `like`. Arrays are
/// comma separated; an empty default array takes floats.
fn parse_like(like: &Value, raw: &str) -> std::result::Result<Value, String> {
    let raw = raw.trim();
    Ok(match like {
        Value::Integer(_) => {
            let x: u64 = raw.parse().map_err(|_| "expected an unsigned integer".to_string())?;
            Value::Integer(i64::try_from(x).map_err(|_| "integer out of range".to_string())?)
        }
        Value::Float(_) => Value::Float(raw.parse().map_err(|_| "expected a number".to_string())?),
        Value::Boolean(_) => Value::Boolean(match raw {
            "true" | "1" => true,
            "false" | "0" => false,
            _ => return Err("expected true or false".into()),
        }),
        Value::String(_) => Value::String(raw.to_string()),
        Value::Array(a) => {
            let elem = a.first().cloned().unwrap_or(Value::Float(0.0));
            if raw.is_empty() {
                Value::Array(Vec::new())
            } else {
                Value::Array(raw.split(',').map(|s| parse_like(&elem, s)).collect::<std::result::Result<_, _>>()?)
            }
        }
        other => return Err(format!("unsupported field kind {}", other.type_str())),
    })
}

/// Flag spelling of a config key.
pub fn kebab(s: &str) -> String {
    s.replace('_', "-")
}

/// Maps bare key names to every section that has them.
pub fn bare_keys() -> BTreeMap<String, Vec<&'static str>> {
    let mut m: BTreeMap<String, Vec<&'static str>> = BTreeMap::new();
    for (s, k, _) in Config::fields() {
        m.entry(k).or_default().push(s);
    }
    m
}
