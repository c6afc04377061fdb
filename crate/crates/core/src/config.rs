//! Experiment configuration: a TOML file with four tables.
//!
//! ```toml
//! condition = "retrieved_images"   # required
//! output_dir = "runs/demo"
//! precision = "f64"                # or "f32"
//!
//! [data]
//! train_src = "train.en"
//! train_tgt = "train.de"
//! # dev_*, test_*, min_freq, stopwords
//!
//! [retrieval]
//! m = 5
//! m_prime = 10
//! o = 128
//! image_backend = "local_index"    # or "fixture"
//! manifest = "index/manifest.jsonl"
//! item_dir = "index/items"
//!
//! [model]   # layer sizes
//! [train]   # optimizer and schedule
//! ```
//!
//! Relative paths resolve against the config file's directory. Any key can
//! be overridden with a dotted `section.key=value` assignment.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::Condition;
use crate::nn::ModelDims;
use crate::training::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    #[default]
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageBackendKind {
    /// Term-keyed manifest over a directory of feature files.
    #[default]
    LocalIndex,
    /// `{split}/{pair_id}_{rank}.mmtf` files.
    Fixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScorerKind {
    #[default]
    Cosine,
    /// `{split}.jsonl` score tables.
    Fixture,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RegionProviderKind {
    #[default]
    GridSlices,
    /// `{image_id}.mmtf` region matrices.
    Fixture,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_src: Option<PathBuf>,
    pub train_tgt: Option<PathBuf>,
    pub dev_src: Option<PathBuf>,
    pub dev_tgt: Option<PathBuf>,
    pub test_src: Option<PathBuf>,
    pub test_tgt: Option<PathBuf>,
    pub min_freq: usize,
    /// Replaces the bundled English stopword list.
    pub stopwords: Option<PathBuf>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_src: None,
            train_tgt: None,
            dev_src: None,
            dev_tgt: None,
            test_src: None,
            test_tgt: None,
            min_freq: 1,
            stopwords: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RetrievalConfig {
    pub m: usize,
    pub m_prime: usize,
    pub o: usize,
    pub image_backend: ImageBackendKind,
    pub manifest: Option<PathBuf>,
    pub item_dir: Option<PathBuf>,
    pub fixture_dir: Option<PathBuf>,
    pub scorer: ScorerKind,
    pub score_dir: Option<PathBuf>,
    /// Seed of the fixed cosine-scorer projection.
    pub scorer_seed: u64,
    pub region_provider: RegionProviderKind,
    pub region_dir: Option<PathBuf>,
    pub text_store: Option<PathBuf>,
}

impl Default for RetrievalConfig {
    fn default() -> Self {
        Self {
            m: 5,
            m_prime: 10,
            o: 128,
            image_backend: ImageBackendKind::default(),
            manifest: None,
            item_dir: None,
            fixture_dir: None,
            scorer: ScorerKind::default(),
            score_dir: None,
            scorer_seed: 0,
            region_provider: RegionProviderKind::default(),
            region_dir: None,
            text_store: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub condition: Option<Condition>,
    pub output_dir: PathBuf,
    pub precision: Precision,
    pub data: DataConfig,
    pub retrieval: RetrievalConfig,
    /// Vocabulary sizes are filled in from the data.
    pub model: ModelDims,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            condition: None,
            output_dir: PathBuf::from("runs"),
            precision: Precision::default(),
            data: DataConfig::default(),
            retrieval: RetrievalConfig::default(),
            model: ModelDims::default(),
            train: TrainConfig::default(),
        }
    }
}

fn need(value: &Option<PathBuf>, key: &str, why: &str) -> Result<()> {
    if value.is_none() {
        return Err(Error::Config(format!("{key} missing ({why})")));
    }
    Ok(())
}

impl ExperimentConfig {
    pub fn condition(&self) -> Result<Condition> {
        self.condition.ok_or_else(|| Error::Config("condition missing".into()))
    }

    /// Images retrieved per sentence before filtering.
    pub fn images_per_sentence(&self) -> usize {
        match self.condition {
            Some(c) if c.filters_images() => self.retrieval.m_prime,
            _ => self.retrieval.m,
        }
    }

    /// Field-level and cross-field checks. Does not touch the filesystem.
    pub fn validate(&self) -> Result<()> {
        let c = self.condition()?;
        let r = &self.retrieval;
        self.train.validate().map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("train.{msg}")),
            other => other,
        })?;
        if r.m == 0 {
            return Err(Error::Config("retrieval.m: must be at least 1".into()));
        }
        if r.o == 0 {
            return Err(Error::Config("retrieval.o: must be at least 1".into()));
        }
        if c.filters_images() && r.m_prime < r.m {
            return Err(Error::Config(format!(
                "retrieval.m_prime: {c} needs m_prime >= m, got m_prime={} m={}",
                r.m_prime, r.m
            )));
        }
        let dims = &self.model;
        for (key, v) in [
            ("embed", dims.embed),
            ("hidden", dims.hidden),
            ("decoder_hidden", dims.decoder_hidden),
            ("visual_dim", dims.visual_dim),
            ("grid_rows", dims.grid_rows),
            ("key_dim", dims.key_dim),
            ("region_dim", dims.region_dim),
            ("attention_dim", dims.attention_dim),
            ("readout", dims.readout),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model.{key}: must be at least 1")));
            }
        }
        if c.filters_regions() && r.region_provider == RegionProviderKind::GridSlices && r.o > dims.grid_rows {
            return Err(Error::Config(format!(
                "retrieval.o: grid slices need o <= model.grid_rows ({} > {})",
                r.o, dims.grid_rows
            )));
        }
        Ok(())
    }

    /// Checks that every path the condition needs is configured.
    pub fn validate_paths(&self) -> Result<()> {
        let c = self.condition()?;
        let d = &self.data;
        for (v, key) in [
            (&d.train_src, "data.train_src"),
            (&d.train_tgt, "data.train_tgt"),
            (&d.dev_src, "data.dev_src"),
            (&d.dev_tgt, "data.dev_tgt"),
        ] {
            need(v, key, "training data")?;
        }
        let r = &self.retrieval;
        match c {
            Condition::TextOnly | Condition::BlankImages | Condition::SupplementaryText => {}
            Condition::RandomImages => need(&r.item_dir, "retrieval.item_dir", "random_images samples from it")?,
            _ => match r.image_backend {
                ImageBackendKind::LocalIndex => {
                    need(&r.manifest, "retrieval.manifest", "local_index backend")?;
                    need(&r.item_dir, "retrieval.item_dir", "local_index backend")?;
                }
                ImageBackendKind::Fixture => need(&r.fixture_dir, "retrieval.fixture_dir", "fixture backend")?,
            },
        }
        if c.filters_images() && r.scorer == ScorerKind::Fixture {
            need(&r.score_dir, "retrieval.score_dir", "fixture scorer")?;
        }
        if c.filters_regions() && r.region_provider == RegionProviderKind::Fixture {
            need(&r.region_dir, "retrieval.region_dir", "fixture regions")?;
        }
        if c.uses_texts() {
            need(&r.text_store, "retrieval.text_store", "supplementary texts")?;
        }
        Ok(())
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut Option<PathBuf>| {
            if let Some(path) = p.as_mut() {
                if path.is_relative() {
                    *path = base.join(&*path);
                }
            }
        };
        let d = &mut self.data;
        for p in [
            &mut d.train_src,
            &mut d.train_tgt,
            &mut d.dev_src,
            &mut d.dev_tgt,
            &mut d.test_src,
            &mut d.test_tgt,
            &mut d.stopwords,
        ] {
            fix(p);
        }
        let r = &mut self.retrieval;
        for p in [
            &mut r.manifest,
            &mut r.item_dir,
            &mut r.fixture_dir,
            &mut r.score_dir,
            &mut r.region_dir,
            &mut r.text_store,
        ] {
            fix(p);
        }
        if self.output_dir.is_relative() {
            self.output_dir = base.join(&self.output_dir);
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

/// Applies a `section.key=value` assignment to a parsed document. Values
/// are read as TOML literals, falling back to bare strings.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let path: Vec<&str> = key.trim().split('.').collect();
    if path.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key `{key}` is malformed")));
    }
    let mut table = doc;
    for part in &path[..path.len() - 1] {
        let entry = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("`{part}` in `{key}` is not a table")))?;
    }
    table.insert(path[path.len() - 1].to_string(), parse_value(raw.trim()));
    Ok(())
}

/// Parses and validates config text with overrides applied on top.
pub fn parse_config_str(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut doc: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    for o in overrides {
        apply_override(&mut doc, o)?;
    }
    let cfg: ExperimentConfig = toml::Value::Table(doc)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Reads a config file; relative paths resolve against its directory.
pub fn parse_config(path: impl AsRef<Path>, overrides: &[String]) -> Result<ExperimentConfig> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut cfg = parse_config_str(&text, overrides)?;
    cfg.resolve_paths(path.parent().unwrap_or(Path::new(".")));
    Ok(cfg)
}
