//! Config files: TOML, deserialized over stage-appropriate defaults so a
//! file only needs the keys it changes.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::Value;

use localdisc::data_pipeline::SyntheticSceneSpec;
use localdisc::losses::Stage;
use localdisc::networks::{BackboneConfig, SegmentationDecoderConfig};
use localdisc::training::{FinetuneConfig, PriorSpec, StageConfig};
use localdisc::{Error, Result};

/// Parse a TOML file, reporting syntax problems as config errors.
pub fn read_toml(path: &Path) -> Result<Value> {
    let text = fs::read_to_string(path).map_err(|e| {
        Error::Config(format!("cannot read config '{}': {e}", path.display()))
    })?;
    text.parse::<Value>()
        .map_err(|e| Error::Config(format!("config '{}': {e}", path.display())))
}

/// Overlay `over` onto `base`: tables merge key by key, anything else
/// replaces the base value.
fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Table(b), Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn to_value<T: Serialize>(v: &T) -> Result<Value> {
    Value::try_from(v).map_err(|e| Error::Serde(e.to_string()))
}

fn from_value<T: DeserializeOwned>(v: Value, what: &str) -> Result<T> {
    v.try_into()
        .map_err(|e| Error::Config(format!("{what}: {e}")))
}

/// The file's keys applied over `default`.
fn load_over<T: Serialize + DeserializeOwned>(
    user: Value,
    default: &T,
    what: &str,
) -> Result<T> {
    let mut base = to_value(default)?;
    merge(&mut base, user);
    from_value(base, what)
}

/// Stage defaults used when a config file omits a key.
fn stage_default(stage: Stage) -> Result<StageConfig> {
    match stage {
        Stage::Pretrain => Ok(StageConfig::pretrain(0)),
        Stage::Ld => Ok(StageConfig::local_discrimination(0)),
        Stage::Prior => Ok(StageConfig::prior(0)),
        Stage::Finetune => Err(Error::Config(
            "fine-tuning uses its own config format, not a stage config".into(),
        )),
    }
}

/// Load and validate a training-stage config for `stage`.
pub fn load_stage_config(path: &Path, stage: Stage) -> Result<StageConfig> {
    let user = read_toml(path)?;
    let cfg: StageConfig = load_over(user, &stage_default(stage)?, "stage config")?;
    cfg.validate_for(stage)?;
    Ok(cfg)
}

/// Load the `[prior]` section of an adversarial-stage config.
pub fn load_prior_spec(path: &Path, cluster_count: usize) -> Result<PriorSpec> {
    let user = read_toml(path)?;
    let section = user
        .get("prior")
        .cloned()
        .ok_or_else(|| {
            Error::Config(format!(
                "config '{}' has no [prior] section; the adversarial stage needs \
                 structure_names and either cluster_channels or warm_start = true",
                path.display()
            ))
        })?;
    let default = Value::Table(toml::Table::from_iter([
        ("structure_names".to_string(), Value::Array(vec![])),
        ("cluster_channels".to_string(), Value::Table(toml::Table::new())),
        ("source_kind".to_string(), Value::String("simulated".into())),
        ("warm_start".to_string(), Value::Boolean(false)),
    ]));
    let mut base = default;
    merge(&mut base, section);
    let spec: PriorSpec = from_value(base, "[prior] section")?;
    spec.validate(cluster_count)?;
    Ok(spec)
}

/// Fine-tuning config: the target structure plus the training schedule.
pub struct FinetuneFile {
    pub structure: String,
    pub train: FinetuneConfig,
}

pub fn load_finetune_config(path: &Path) -> Result<FinetuneFile> {
    let user = read_toml(path)?;
    let mut table = match user {
        Value::Table(t) => t,
        _ => return Err(Error::Config("fine-tuning config must be a TOML table".into())),
    };
    let structure = match table.remove("structure") {
        Some(Value::String(s)) => s,
        Some(_) => return Err(Error::Config("'structure' must be a string".into())),
        None => {
            return Err(Error::Config(format!(
                "config '{}' must name the target with structure = \"<name>\"",
                path.display()
            )))
        }
    };
    let train: FinetuneConfig =
        load_over(Value::Table(table), &FinetuneConfig::new(0), "fine-tuning config")?;
    train.validate()?;
    Ok(FinetuneFile { structure, train })
}

/// Synthetic-scene spec, default when no file is given.
pub fn load_scene_spec(path: Option<&Path>) -> Result<SyntheticSceneSpec> {
    let spec = match path {
        Some(p) => load_over(read_toml(p)?, &SyntheticSceneSpec::default(), "scene spec")?,
        None => SyntheticSceneSpec::default(),
    };
    spec.validate()?;
    Ok(spec)
}

/// Network shapes for evaluation, read from any training config: the
/// `[backbone]` and `[decoder]` sections over their defaults.
pub fn load_network_configs(path: &Path) -> Result<(BackboneConfig, SegmentationDecoderConfig)> {
    let user = read_toml(path)?;
    let backbone: BackboneConfig = match user.get("backbone") {
        Some(v) => load_over(v.clone(), &BackboneConfig::default(), "[backbone] section")?,
        None => BackboneConfig::default(),
    };
    backbone.validate()?;
    let decoder: SegmentationDecoderConfig = match user.get("decoder") {
        Some(v) => load_over(v.clone(), &SegmentationDecoderConfig::default(), "[decoder] section")?,
        None => SegmentationDecoderConfig::default(),
    };
    decoder.validate()?;
    Ok((backbone, decoder))
}

/// SHA-256 of a file's bytes, for the run manifest.
pub fn file_sha256(path: &Path) -> Result<String> {
    use sha2::{Digest, Sha256};
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:x}", Sha256::digest(&bytes)))
}
