//! Whole-run configuration: a TOML file, flat `section.key=value`
//! overrides on top, and the effective snapshot written next to outputs.
//!
//! ```
//! use priormap_core::config::RunConfig;
//!
//! let cfg = RunConfig::load(None, &["train.steps=20".into(), "decoder.layers=2".into()]).unwrap();
//! assert_eq!(cfg.train.steps, 20);
//! let again = RunConfig::from_toml(&cfg.to_toml()).unwrap();
//! assert_eq!(again, cfg);
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use toml::{Table, Value};

use crate::attention::{MsdaConfig, Variant};
use crate::decoder::DecoderConfig;
use crate::error::{Error, Result};
use crate::eval::EvalConfig;
use crate::loss::LossConfig;
use crate::matching::CostConfig;
use crate::rng;
use crate::synth::SceneConfig;
use crate::train::{Objective, TrainConfig};

/// File name of the effective-config snapshot in every output directory.
pub const SNAPSHOT_FILE: &str = "effective-config.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_count: usize,
    pub eval_count: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { train_count: 200, eval_count: 50 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PriorConfig {
    /// Cluster count of the K-Means fit; the largest `decoder.num_prior`
    /// clusters become priors.
    pub k: usize,
    pub max_iters: usize,
}

impl Default for PriorConfig {
    fn default() -> Self {
        Self { k: crate::prior::DEFAULT_K, max_iters: crate::prior::DEFAULT_MAX_ITERS }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub variants: Vec<Variant>,
    pub queries: usize,
    pub repeats: usize,
    pub attention: MsdaConfig,
    /// Level-0 grid of the synthetic pyramid.
    pub grid_h: usize,
    pub grid_w: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            variants: vec![Variant::Vanilla, Variant::ScaleThenSample],
            queries: 1000,
            repeats: 100,
            attention: MsdaConfig::default(),
            grid_h: 200,
            grid_w: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Every random stream of a run derives from this.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub data: DataConfig,
    pub scene: SceneConfig,
    pub prior: PriorConfig,
    pub decoder: DecoderConfig,
    pub cost: CostConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            data: DataConfig::default(),
            scene: SceneConfig::default(),
            prior: PriorConfig::default(),
            decoder: DecoderConfig::default(),
            cost: CostConfig::default(),
            loss: LossConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            bench: BenchConfig::default(),
        }
    }
}

fn toml_error(what: &str, e: impl std::fmt::Display) -> Error {
    Error::Config(format!("{what}: {e}"))
}

/// Parses the right-hand side of an override as a TOML value, falling back
/// to a bare string.
fn parse_value(raw: &str) -> Value {
    let raw = raw.trim();
    match format!("v = {raw}").parse::<Table>() {
        Ok(mut t) => t.remove("v").expect("key present"),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Sets `path` (dot-separated) in `table` to `value`, creating tables on
/// the way.
pub fn set_path(table: &mut Table, path: &str, value: Value) -> Result<()> {
    let keys: Vec<&str> = path.split('.').map(str::trim).collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(Error::Config(format!("malformed override key {path:?}")));
    }
    let (last, parents) = keys.split_last().expect("split yields one key");
    let mut cur = table;
    for k in parents {
        let entry = cur.entry(k.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| Error::Config(format!("override {path:?}: {k} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| toml_error("config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads `path` (or starts from defaults) and applies `key=value`
    /// overrides in order.
    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let mut table = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                text.parse::<Table>().map_err(|e| toml_error(&p.display().to_string(), e))?
            }
            None => Table::new(),
        };
        for o in overrides {
            let (k, v) = o.split_once('=').ok_or_else(|| Error::Config(format!("override {o:?} is not key=value")))?;
            set_path(&mut table, k, parse_value(v))?;
        }
        let cfg: RunConfig = Value::Table(table).try_into().map_err(|e| toml_error("config", e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.decoder.validate()?;
        self.cost.validate()?;
        self.loss.validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        self.bench.attention.validate()?;
        if self.decoder.num_points < 2 {
            return Err(Error::Config("decoder.num_points must be at least 2".into()));
        }
        if self.decoder.num_prior > self.prior.k {
            return Err(Error::Config(format!(
                "decoder.num_prior={} exceeds prior.k={}",
                self.decoder.num_prior, self.prior.k
            )));
        }
        if self.data.train_count == 0 {
            return Err(Error::Config("data.train_count must be at least 1".into()));
        }
        Ok(())
    }

    /// The effective configuration as TOML.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    /// Writes the snapshot into `dir`.
    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(SNAPSHOT_FILE);
        std::fs::write(&path, self.to_toml()).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Seed of the named sub-stream of this run.
    pub fn stream_seed(&self, name: &str) -> u64 {
        rng::derive_seed(self.seed, name)
    }

    /// Training settings with the seed drawn from the run seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig { seed: self.stream_seed("train"), ..self.train }
    }

    pub fn objective(&self) -> Objective {
        Objective { cost: self.cost, loss: self.loss }
    }

    pub fn train_dir(&self) -> PathBuf {
        self.out_dir.join(format!("train-{}", self.train.prior_mode))
    }

    pub fn data_dir(&self, split: &str) -> PathBuf {
        self.out_dir.join("data").join(split)
    }

    pub fn priors_path(&self) -> PathBuf {
        self.out_dir.join("priors").join("priors.json")
    }
}
