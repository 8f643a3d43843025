//! The canonical run configuration: one TOML file with eight sections
//! (data, tokenizer, tracker, masking, model, loss, train, probe),
//! every key defaulted so a partial file or no file at all is a valid
//! run. Unknown keys are rejected with their full dotted path, and
//! every subcommand writes the fully resolved configuration next to its
//! outputs, so any run is reproducible from that file plus its seeds.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tracklab_core::error::{Error, Result};
use tracklab_core::masking::MaskingConfig;
use tracklab_core::model::ModelConfig;
use tracklab_core::objectives::LossConfig;
use tracklab_core::tokenizer::TokenizerConfig;
use tracklab_core::tracks::NoiseMode;
use tracklab_core::training::data::{DataConfig, TrackNoise, TrackingPlan};
use tracklab_core::training::pretrain::{PretrainPlan, TrainConfig};
use tracklab_core::training::probe::ProbeConfig;

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub tokenizer: TokenizerConfig,
    pub tracker: TrackingPlan,
    pub masking: MaskingConfig,
    pub model: ModelConfig,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
}

impl RunConfig {
    pub fn plan(&self) -> PretrainPlan {
        PretrainPlan {
            data: self.data.clone(),
            tokenizer: self.tokenizer.clone(),
            tracking: self.tracker.clone(),
            masking: self.masking,
            model: self.model.clone(),
            loss: self.loss.clone(),
            train: self.train.clone(),
        }
    }

    pub fn from_plan(plan: &PretrainPlan, probe: ProbeConfig) -> RunConfig {
        RunConfig {
            data: plan.data.clone(),
            tokenizer: plan.tokenizer.clone(),
            tracker: plan.tracking.clone(),
            masking: plan.masking,
            model: plan.model.clone(),
            loss: plan.loss.clone(),
            train: plan.train.clone(),
            probe,
        }
    }

    pub fn parse(text: &str) -> Result<RunConfig> {
        let user: toml::Table = toml::from_str(text)
            .map_err(|e| Error::Config(format!("config does not parse: {e}")))?;
        let schema = to_table(&schema_instance())?;
        if let Some(path) = first_unknown_key(&user, &schema, "") {
            return Err(Error::Config(format!("unknown key '{path}'")));
        }
        let merged = merge(to_table(&RunConfig::default())?, user);
        toml::Value::Table(merged)
            .try_into()
            .map_err(|e| Error::Config(format!("config invalid: {e}")))
    }

    pub fn load(path: Option<&Path>) -> Result<RunConfig> {
        match path {
            None => Ok(RunConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| {
                    Error::Config(format!("cannot read config {}: {e}", p.display()))
                })?;
                RunConfig::parse(&text)
            }
        }
    }

    /// Writes the resolved configuration; re-parsing the emitted file
    /// yields an identical run plan.
    pub fn emit(&self, path: &Path) -> Result<()> {
        let text = toml::to_string_pretty(self)
            .map_err(|e| Error::Config(format!("config does not serialize: {e}")))?;
        std::fs::write(path, text)?;
        Ok(())
    }
}

fn to_table<T: Serialize>(value: &T) -> Result<toml::Table> {
    match toml::Value::try_from(value) {
        Ok(toml::Value::Table(t)) => Ok(t),
        Ok(_) => Err(Error::Config("config root is not a table".into())),
        Err(e) => Err(Error::Config(format!("config does not serialize: {e}"))),
    }
}

/// Defaults with every optional subtree present, so the key-existence
/// walk knows about keys a default config omits.
fn schema_instance() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.tracker.noise = Some(TrackNoise { mode: NoiseMode::Spatial, sigma: 0.0 });
    cfg.data.scene.forced_appearance = Some(0);
    cfg.data.scene.forced_motion = Some(0);
    cfg
}

/// Depth-first search for the first user key that does not exist in the
/// schema, returning its dotted path. Type mismatches are left for the
/// typed deserialization, which reports them with line numbers.
fn first_unknown_key(user: &toml::Table, schema: &toml::Table, prefix: &str) -> Option<String> {
    for (key, value) in user {
        let path =
            if prefix.is_empty() { key.clone() } else { format!("{prefix}.{key}") };
        match schema.get(key) {
            None => return Some(path),
            Some(toml::Value::Table(s)) => {
                if let toml::Value::Table(u) = value {
                    if let Some(found) = first_unknown_key(u, s, &path) {
                        return Some(found);
                    }
                }
            }
            Some(_) => {}
        }
    }
    None
}

/// Overlays `over` onto `base`; tables merge recursively, everything
/// else replaces.
fn merge(mut base: toml::Table, over: toml::Table) -> toml::Table {
    for (key, value) in over {
        match (base.remove(&key), value) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                base.insert(key, toml::Value::Table(merge(b, o)));
            }
            (_, v) => {
                base.insert(key, v);
            }
        }
    }
    base
}
