//! Run configuration: schema, merging, validation and the resolved echo file.
//!
//! Values merge as defaults, then the config file, then command-line
//! overrides. Every key carries the layer it came from.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::backbone::{BackboneSpec, StubConfig};
use crate::data::BenchmarkFormat;
use crate::eval::EvalOptions;
use crate::optim::LrSchedule;
use crate::train::TrainConfig;
use crate::{Error, Result};

pub const ECHO_FILE: &str = "config.resolved.toml";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    Int,
    Float,
    Bool,
    Str,
    /// String path; empty means unset.
    Path,
    /// Integer or "auto".
    AutoInt,
    /// Float or "auto".
    AutoFloat,
    /// Float or "none".
    OptFloat,
    IntList,
    FloatList,
    StrList,
}

impl Kind {
    fn describe(self) -> &'static str {
        match self {
            Kind::Int => "a non-negative integer",
            Kind::Float => "a number",
            Kind::Bool => "a boolean",
            Kind::Str => "a string",
            Kind::Path => "a path string",
            Kind::AutoInt => "a non-negative integer or \"auto\"",
            Kind::AutoFloat => "a number or \"auto\"",
            Kind::OptFloat => "a number or \"none\"",
            Kind::IntList => "a list of non-negative integers",
            Kind::FloatList => "a list of numbers",
            Kind::StrList => "a list of strings",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Value {
    Int(u64),
    Float(f64),
    Bool(bool),
    Str(String),
    Auto,
    Unset,
    IntList(Vec<u64>),
    FloatList(Vec<f64>),
    StrList(Vec<String>),
}

impl Value {
    /// TOML literal.
    fn literal(&self) -> String {
        let tv = match self {
            Value::Int(v) => toml::Value::Integer(*v as i64),
            Value::Float(v) => toml::Value::Float(*v),
            Value::Bool(v) => toml::Value::Boolean(*v),
            Value::Str(s) => toml::Value::String(s.clone()),
            Value::Auto => toml::Value::String("auto".into()),
            Value::Unset => return "\"none\"".into(),
            Value::IntList(v) => toml::Value::Array(v.iter().map(|&x| toml::Value::Integer(x as i64)).collect()),
            Value::FloatList(v) => toml::Value::Array(v.iter().map(|&x| toml::Value::Float(x)).collect()),
            Value::StrList(v) => toml::Value::Array(v.iter().map(|x| toml::Value::String(x.clone())).collect()),
        };
        tv.to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Provenance {
    Default,
    File,
    Cli,
    Derived,
}

impl fmt::Display for Provenance {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Provenance::Default => "default",
            Provenance::File => "file",
            Provenance::Cli => "cli",
            Provenance::Derived => "derived",
        })
    }
}

pub struct KeySpec {
    pub key: &'static str,
    pub kind: Kind,
    pub help: &'static str,
    default: fn() -> Value,
}

macro_rules! key {
    ($k:literal, $kind:ident, $help:literal, $default:expr) => {
        KeySpec { key: $k, kind: Kind::$kind, help: $help, default: || $default }
    };
}

pub static SCHEMA: &[KeySpec] = &[
    key!("backbone.name", Str, "stub, vit-l-14 or vit-b-32", Value::Str("vit-l-14".into())),
    key!("backbone.weights_path", Path, "directory with model.safetensors, vocab.json, merges.txt", Value::Unset),
    key!("backbone.precision", Str, "f32 or f64", Value::Str("f32".into())),
    key!("backbone.stub_dim", Int, "stub feature width", Value::Int(16)),
    key!("backbone.stub_context", Int, "stub context length", Value::Int(16)),
    key!("backbone.stub_resolution", Int, "stub input resolution", Value::Int(8)),
    key!("backbone.stub_vocab", Int, "stub vocabulary size", Value::Int(512)),
    key!("backbone.stub_seed", Int, "stub weight seed", Value::Int(0)),
    key!("mask.tau", Float, "relevance threshold", Value::Float(0.3)),
    key!("mask.relevance_provider", Str, "auto, stub or gradient-attention", Value::Str("auto".into())),
    key!("mask.relevance_weights_path", Path, "ViT-B/32 directory for gradient-attention", Value::Unset),
    key!("mask.grid", AutoInt, "patch grid of the stub provider", Value::Auto),
    key!("mask.pos_tagger", Str, "lexicon or perceptron", Value::Str("lexicon".into())),
    key!("mask.pos_tagger_path", Path, "averaged perceptron model directory", Value::Unset),
    key!("inversion.hidden", AutoInt, "hidden width of phi, auto = 4 x token width", Value::Auto),
    key!("inversion.dropout", Float, "dropout after each hidden activation", Value::Float(0.0)),
    key!("inversion.layer_norm", Bool, "layer norm before each hidden activation", Value::Bool(false)),
    key!("loss.temperature", AutoFloat, "contrastive temperature, auto = 1 / logit scale", Value::Auto),
    key!("train.batch_size", Int, "pairs per step", Value::Int(128)),
    key!("train.epochs", Int, "passes over the data", Value::Int(10)),
    key!("train.learning_rate", Float, "AdamW learning rate", Value::Float(1e-4)),
    key!("train.weight_decay", Float, "decoupled weight decay", Value::Float(0.01)),
    key!("train.beta1", Float, "AdamW beta1", Value::Float(0.9)),
    key!("train.beta2", Float, "AdamW beta2", Value::Float(0.999)),
    key!("train.eps", Float, "AdamW epsilon", Value::Float(1e-8)),
    key!("train.clip_norm", OptFloat, "global gradient norm clip", Value::Unset),
    key!("train.lr_schedule", Str, "constant or cosine", Value::Str("constant".into())),
    key!("train.alpha", Float, "weight of the query-target loss", Value::Float(0.5)),
    key!("train.seed", Int, "seed for init, order, partners and dropout", Value::Int(0)),
    key!("train.checkpoint_dir", Path, "defaults to <run>/checkpoints", Value::Unset),
    key!("train.resume", Path, "checkpoint to resume from", Value::Unset),
    key!("data.manifest", Str, "pairs TSV/JSONL, or synthetic:<n>[:seed]", Value::Str(String::new())),
    key!("data.limit", Int, "maximum pairs read", Value::Int(250_000)),
    key!("data.cache_dir", Path, "image cache root", Value::Unset),
    key!("eval.benchmark", Str, "cirr, fashioniq or fixture", Value::Str("cirr".into())),
    key!("eval.root", Path, "benchmark root directory", Value::Unset),
    key!("eval.split", Str, "benchmark split", Value::Str("val".into())),
    key!("eval.checkpoint", Path, "trained phi checkpoint", Value::Unset),
    key!("eval.ks", IntList, "R@k cutoffs", Value::IntList(vec![1, 5, 10, 50])),
    key!("eval.subset_ks", IntList, "Rs@k cutoffs", Value::IntList(vec![1, 2, 3])),
    key!("eval.exclude_query_image", Bool, "drop the reference image from its ranking", Value::Bool(true)),
    key!("eval.categories", StrList, "FashionIQ categories, empty = all", Value::StrList(vec![])),
    key!("eval.fixture_size", Int, "triplets in the fixture benchmark", Value::Int(100)),
    key!("eval.grid_queries", Int, "rows in the result grid", Value::Int(4)),
    key!("eval.grid_top", Int, "retrieved images per grid row", Value::Int(3)),
    key!("ablation.taus", FloatList, "tau values to train and evaluate", Value::FloatList(vec![0.2, 0.3, 0.4])),
    key!("run.root", Str, "parent of run directories", Value::Str("runs".into())),
    key!("run.dir", Path, "explicit run directory", Value::Unset),
];

pub fn spec(key: &str) -> Option<&'static KeySpec> {
    SCHEMA.iter().find(|s| s.key == key)
}

fn type_error(key: &str, kind: Kind, got: impl fmt::Display) -> Error {
    Error::Config(format!("{key} expects {}, got {got}", kind.describe()))
}

fn from_toml(key: &str, kind: Kind, v: &toml::Value) -> Result<Value> {
    let bad = || type_error(key, kind, v);
    let uint = |x: &toml::Value| x.as_integer().and_then(|i| u64::try_from(i).ok());
    let num = |x: &toml::Value| x.as_float().or_else(|| x.as_integer().map(|i| i as f64));
    let word = v.as_str();
    Ok(match kind {
        Kind::Int => Value::Int(uint(v).ok_or_else(bad)?),
        Kind::Float => Value::Float(num(v).ok_or_else(bad)?),
        Kind::Bool => Value::Bool(v.as_bool().ok_or_else(bad)?),
        Kind::Str => Value::Str(word.ok_or_else(bad)?.to_string()),
        Kind::Path => match word.ok_or_else(bad)? {
            "" | "none" => Value::Unset,
            p => Value::Str(p.to_string()),
        },
        Kind::AutoInt if word == Some("auto") => Value::Auto,
        Kind::AutoInt => Value::Int(uint(v).ok_or_else(bad)?),
        Kind::AutoFloat if word == Some("auto") => Value::Auto,
        Kind::AutoFloat => Value::Float(num(v).ok_or_else(bad)?),
        Kind::OptFloat if word == Some("none") => Value::Unset,
        Kind::OptFloat => Value::Float(num(v).ok_or_else(bad)?),
        Kind::IntList | Kind::FloatList | Kind::StrList => {
            let items = v.as_array().ok_or_else(bad)?;
            match kind {
                Kind::IntList => Value::IntList(items.iter().map(uint).collect::<Option<_>>().ok_or_else(bad)?),
                Kind::FloatList => Value::FloatList(items.iter().map(num).collect::<Option<_>>().ok_or_else(bad)?),
                _ => Value::StrList(
                    items.iter().map(|x| x.as_str().map(String::from)).collect::<Option<_>>().ok_or_else(bad)?,
                ),
            }
        }
    })
}

fn from_text(key: &str, kind: Kind, raw: &str) -> Result<Value> {
    let bad = || type_error(key, kind, format!("{raw:?}"));
    let raw = raw.trim();
    let list = || raw.split(',').map(str::trim).filter(|s| !s.is_empty());
    Ok(match kind {
        Kind::Int => Value::Int(raw.parse().map_err(|_| bad())?),
        Kind::Float => Value::Float(raw.parse().map_err(|_| bad())?),
        Kind::Bool => Value::Bool(raw.parse().map_err(|_| bad())?),
        Kind::Str => Value::Str(raw.to_string()),
        Kind::Path => match raw {
            "" | "none" => Value::Unset,
            p => Value::Str(p.to_string()),
        },
        Kind::AutoInt if raw == "auto" => Value::Auto,
        Kind::AutoInt => Value::Int(raw.parse().map_err(|_| bad())?),
        Kind::AutoFloat if raw == "auto" => Value::Auto,
        Kind::AutoFloat => Value::Float(raw.parse().map_err(|_| bad())?),
        Kind::OptFloat if raw == "none" => Value::Unset,
        Kind::OptFloat => Value::Float(raw.parse().map_err(|_| bad())?),
        Kind::IntList => Value::IntList(list().map(|s| s.parse().map_err(|_| bad())).collect::<Result<_>>()?),
        Kind::FloatList => Value::FloatList(list().map(|s| s.parse().map_err(|_| bad())).collect::<Result<_>>()?),
        Kind::StrList => Value::StrList(list().map(String::from).collect()),
    })
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut Vec<(String, toml::Value)>) {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            toml::Value::Table(t) => flatten(&key, t, out),
            other => out.push((key, other.clone())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedConfig {
    entries: BTreeMap<&'static str, (Value, Provenance)>,
}

impl Default for ResolvedConfig {
    fn default() -> Self {
        Self { entries: SCHEMA.iter().map(|s| (s.key, ((s.default)(), Provenance::Default))).collect() }
    }
}

impl ResolvedConfig {
    /// Defaults, then `file`, then `overrides` (`key`, raw text), then derived
    /// values and validation.
    pub fn resolve(file: Option<&Path>, overrides: &[(String, String)]) -> Result<Self> {
        let mut cfg = Self::default();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path)
                .map_err(|e| Error::Config(format!("cannot read config file {}: {e}", path.display())))?;
            cfg.merge_toml(&text, Provenance::File)
                .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        }
        for (key, raw) in overrides {
            cfg.set_text(key, raw, Provenance::Cli)?;
        }
        cfg.derive()?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn merge_toml(&mut self, text: &str, provenance: Provenance) -> Result<()> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.message().to_string()))?;
        let mut flat = Vec::new();
        flatten("", &table, &mut flat);
        for (key, v) in flat {
            let s = spec(&key).ok_or_else(|| Error::Config(format!("unknown config key {key}")))?;
            let value = from_toml(&key, s.kind, &v)?;
            self.entries.insert(s.key, (value, provenance));
        }
        Ok(())
    }

    pub fn set_text(&mut self, key: &str, raw: &str, provenance: Provenance) -> Result<()> {
        let s = spec(key).ok_or_else(|| Error::Config(format!("unknown config key {key}")))?;
        let value = from_text(key, s.kind, raw)?;
        self.entries.insert(s.key, (value, provenance));
        Ok(())
    }

    /// Records a value computed at runtime, e.g. the temperature from loaded weights.
    pub fn set_derived(&mut self, key: &str, value: Value) {
        let s = spec(key).unwrap_or_else(|| panic!("unknown key {key}"));
        self.entries.insert(s.key, (value, Provenance::Derived));
    }

    pub fn value(&self, key: &str) -> &Value {
        &self.entries.get(key).unwrap_or_else(|| panic!("unknown key {key}")).0
    }

    pub fn provenance(&self, key: &str) -> Provenance {
        self.entries.get(key).unwrap_or_else(|| panic!("unknown key {key}")).1
    }

    fn wrong(&self, key: &str) -> ! {
        panic!("{key} holds {:?}", self.value(key))
    }

    pub fn int(&self, key: &str) -> u64 {
        match self.value(key) {
            Value::Int(v) => *v,
            _ => self.wrong(key),
        }
    }

    pub fn usize(&self, key: &str) -> usize {
        self.int(key) as usize
    }

    pub fn float(&self, key: &str) -> f64 {
        match self.value(key) {
            Value::Float(v) => *v,
            _ => self.wrong(key),
        }
    }

    pub fn opt_float(&self, key: &str) -> Option<f64> {
        match self.value(key) {
            Value::Float(v) => Some(*v),
            Value::Auto | Value::Unset => None,
            _ => self.wrong(key),
        }
    }

    pub fn opt_usize(&self, key: &str) -> Option<usize> {
        match self.value(key) {
            Value::Int(v) => Some(*v as usize),
            Value::Auto | Value::Unset => None,
            _ => self.wrong(key),
        }
    }

    pub fn bool(&self, key: &str) -> bool {
        match self.value(key) {
            Value::Bool(v) => *v,
            _ => self.wrong(key),
        }
    }

    pub fn str(&self, key: &str) -> &str {
        match self.value(key) {
            Value::Str(v) => v,
            _ => self.wrong(key),
        }
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        match self.value(key) {
            Value::Str(v) => Some(PathBuf::from(v)),
            Value::Unset => None,
            _ => self.wrong(key),
        }
    }

    /// Like [`path`](Self::path) but an unset value is a config error naming the key.
    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key).ok_or_else(|| Error::Config(format!("missing required key {key}")))
    }

    pub fn usize_list(&self, key: &str) -> Vec<usize> {
        match self.value(key) {
            Value::IntList(v) => v.iter().map(|&x| x as usize).collect(),
            _ => self.wrong(key),
        }
    }

    pub fn float_list(&self, key: &str) -> Vec<f64> {
        match self.value(key) {
            Value::FloatList(v) => v.clone(),
            _ => self.wrong(key),
        }
    }

    pub fn str_list(&self, key: &str) -> Vec<String> {
        match self.value(key) {
            Value::StrList(v) => v.clone(),
            _ => self.wrong(key),
        }
    }

    pub fn stub_config(&self) -> StubConfig {
        StubConfig {
            dim: self.usize("backbone.stub_dim"),
            context_length: self.usize("backbone.stub_context"),
            resolution: self.usize("backbone.stub_resolution"),
            vocab_size: self.usize("backbone.stub_vocab"),
            seed: self.int("backbone.stub_seed"),
        }
    }

    pub fn backbone_spec(&self) -> Result<BackboneSpec> {
        BackboneSpec::from_name(
            self.str("backbone.name"),
            self.path("backbone.weights_path").unwrap_or_default(),
            self.stub_config(),
        )
    }

    /// Fills "auto" values that follow from other keys.
    fn derive(&mut self) -> Result<()> {
        let dims = self.backbone_spec()?.dims();
        if self.value("inversion.hidden") == &Value::Auto {
            self.set_derived("inversion.hidden", Value::Int(4 * dims.token_dim as u64));
        }
        if self.str("mask.relevance_provider") == "auto" {
            let p = if self.str("backbone.name") == "stub" { "stub" } else { "gradient-attention" };
            self.set_derived("mask.relevance_provider", Value::Str(p.into()));
        }
        if self.value("mask.grid") == &Value::Auto {
            let grid = match self.str("mask.relevance_provider") {
                "stub" => crate::masking::relevance::StubRelevance::DEFAULT_GRID,
                _ => 7,
            };
            self.set_derived("mask.grid", Value::Int(grid as u64));
        }
        if self.value("loss.temperature") == &Value::Auto && self.str("backbone.name") == "stub" {
            let t = 1.0 / crate::backbone::StubBackbone::<f64>::LOGIT_SCALE;
            self.set_derived("loss.temperature", Value::Float(t));
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        let positive = ["train.batch_size", "train.epochs", "data.limit", "backbone.stub_dim", "backbone.stub_context", "backbone.stub_resolution", "backbone.stub_vocab", "eval.fixture_size", "eval.grid_top"];
        for k in positive {
            if self.int(k) == 0 {
                return err(format!("{k} must be at least 1"));
            }
        }
        let tau = self.float("mask.tau");
        if !(0.0..=1.0).contains(&tau) {
            return err(format!("mask.tau must lie in [0, 1], got {tau}"));
        }
        for t in self.float_list("ablation.taus") {
            if !(0.0..=1.0).contains(&t) {
                return err(format!("ablation.taus entries must lie in [0, 1], got {t}"));
            }
        }
        if self.float_list("ablation.taus").is_empty() {
            return err("ablation.taus must not be empty".into());
        }
        if !(self.float("train.learning_rate") > 0.0) {
            return err("train.learning_rate must be positive".into());
        }
        if !(self.float("train.alpha") >= 0.0) || !(self.float("train.weight_decay") >= 0.0) {
            return err("train.alpha and train.weight_decay must be non-negative".into());
        }
        for k in ["train.beta1", "train.beta2"] {
            if !(0.0..1.0).contains(&self.float(k)) {
                return err(format!("{k} must lie in [0, 1)"));
            }
        }
        if !(self.float("train.eps") > 0.0) {
            return err("train.eps must be positive".into());
        }
        if let Some(c) = self.opt_float("train.clip_norm") {
            if !(c > 0.0) {
                return err(format!("train.clip_norm must be positive, got {c}"));
            }
        }
        if let Some(t) = self.opt_float("loss.temperature") {
            if !(t > 0.0) {
                return err(format!("loss.temperature must be positive, got {t}"));
            }
        }
        let d = self.float("inversion.dropout");
        if !(0.0..1.0).contains(&d) {
            return err(format!("inversion.dropout must lie in [0, 1), got {d}"));
        }
        if self.opt_usize("inversion.hidden") == Some(0) || self.opt_usize("mask.grid") == Some(0) {
            return err("inversion.hidden and mask.grid must be at least 1".into());
        }
        if !matches!(self.str("backbone.precision"), "f32" | "f64") {
            return err(format!("backbone.precision must be f32 or f64, got {:?}", self.str("backbone.precision")));
        }
        if !matches!(self.str("mask.relevance_provider"), "stub" | "gradient-attention") {
            return err(format!("unknown mask.relevance_provider {:?}", self.str("mask.relevance_provider")));
        }
        if !matches!(self.str("mask.pos_tagger"), "lexicon" | "perceptron") {
            return err(format!("unknown mask.pos_tagger {:?}", self.str("mask.pos_tagger")));
        }
        LrSchedule::parse(self.str("train.lr_schedule"))?;
        BenchmarkFormat::parse(self.str("eval.benchmark"))?;
        let ks = self.usize_list("eval.ks");
        if ks.is_empty() || ks.contains(&0) || self.usize_list("eval.subset_ks").contains(&0) {
            return err("eval.ks must be non-empty and eval.ks / eval.subset_ks entries positive".into());
        }
        Ok(())
    }

    /// Training settings; `checkpoint_dir` fills an unset `train.checkpoint_dir`.
    pub fn train_config(&self, run_dir: &Path) -> Result<TrainConfig> {
        Ok(TrainConfig {
            batch_size: self.usize("train.batch_size"),
            epochs: u32::try_from(self.int("train.epochs"))
                .map_err(|_| Error::Config("train.epochs is too large".into()))?,
            learning_rate: self.float("train.learning_rate"),
            weight_decay: self.float("train.weight_decay"),
            beta1: self.float("train.beta1"),
            beta2: self.float("train.beta2"),
            eps: self.float("train.eps"),
            clip_norm: self.opt_float("train.clip_norm"),
            lr_schedule: LrSchedule::parse(self.str("train.lr_schedule"))?,
            alpha: self.float("train.alpha"),
            tau: self.float("mask.tau"),
            seed: self.int("train.seed"),
            temperature: self.opt_float("loss.temperature"),
            hidden: self.opt_usize("inversion.hidden"),
            dropout: self.float("inversion.dropout"),
            layer_norm: self.bool("inversion.layer_norm"),
            checkpoint_dir: self.path("train.checkpoint_dir").unwrap_or_else(|| run_dir.join("checkpoints")),
            resume: self.path("train.resume"),
            log_path: Some(run_dir.join("train.jsonl")),
            config_hash: self.hash(),
        })
    }

    pub fn eval_options(&self, run_dir: &Path) -> EvalOptions {
        EvalOptions {
            ks: self.usize_list("eval.ks"),
            subset_ks: self.usize_list("eval.subset_ks"),
            exclude_query_image: self.bool("eval.exclude_query_image"),
            index_dir: Some(run_dir.to_path_buf()),
        }
    }

    /// Key/value lines that determine results (run placement excluded).
    fn canonical(&self) -> String {
        self.entries
            .iter()
            .filter(|(k, _)| !k.starts_with("run."))
            .map(|(k, (v, _))| format!("{k}={}\n", v.literal()))
            .collect()
    }

    /// First 8 hex digits of the SHA-256 of the canonical settings.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.canonical().as_bytes()))[..8].to_string()
    }

    /// The resolved configuration as TOML, with provenance comments.
    pub fn echo(&self, code_version: &str) -> String {
        let mut out = format!(
            "# resolved configuration\n# code_version = {code_version}\n# seed = {}\n# config_hash = {}\n",
            self.int("train.seed"),
            self.hash()
        );
        let mut section = "";
        for (key, (v, p)) in &self.entries {
            let (sec, name) = key.split_once('.').expect("dotted key");
            if sec != section {
                out.push_str(&format!("\n[{sec}]\n"));
                section = sec;
            }
            out.push_str(&format!("{name} = {}  # {p}\n", v.literal()));
        }
        out
    }

    pub fn write_echo(&self, run_dir: &Path, code_version: &str) -> Result<PathBuf> {
        let path = run_dir.join(ECHO_FILE);
        std::fs::write(&path, self.echo(code_version)).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// `runs/<timestamp>-<hash8>` style directory name.
pub fn run_dir_name(timestamp: &str, hash: &str) -> String {
    format!("{timestamp}-{hash}")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn over(pairs: &[(&str, &str)]) -> Vec<(String, String)> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn defaults_carry_training_hyperparameters() {
        let c = ResolvedConfig::resolve(None, &[]).unwrap();
        assert_eq!(c.int("train.batch_size"), 128);
        assert_eq!(c.float("train.learning_rate"), 1e-4);
        assert_eq!(c.int("train.epochs"), 10);
        assert_eq!(c.float("train.alpha"), 0.5);
        assert_eq!(c.float("mask.tau"), 0.3);
        assert_eq!(c.opt_usize("inversion.hidden"), Some(3072));
        assert_eq!(c.provenance("inversion.hidden"), Provenance::Derived);
        assert_eq!(c.provenance("mask.tau"), Provenance::Default);
    }

    #[test]
    fn layers_and_provenance() {
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("fixture.cfg");
        std::fs::write(&f, "[mask]\ntau = 0.2\n[train]\nepochs = 3\nlearning_rate = 1\n").unwrap();
        let c = ResolvedConfig::resolve(Some(&f), &over(&[("mask.tau", "0.4")])).unwrap();
        assert_eq!((c.float("mask.tau"), c.provenance("mask.tau")), (0.4, Provenance::Cli));
        assert_eq!((c.int("train.epochs"), c.provenance("train.epochs")), (3, Provenance::File));
        assert_eq!(c.float("train.learning_rate"), 1.0);
        let empty = dir.path().join("empty.cfg");
        std::fs::write(&empty, "").unwrap();
        assert_eq!(ResolvedConfig::resolve(Some(&empty), &[]).unwrap(), ResolvedConfig::resolve(None, &[]).unwrap());
    }

    #[test]
    fn rejects_bad_values() {
        let e = ResolvedConfig::resolve(None, &over(&[("mask.tau", "1.5")])).unwrap_err();
        assert!(e.to_string().contains("mask.tau"), "{e}");
        let e = ResolvedConfig::resolve(None, &over(&[("train.epochs", "many")])).unwrap_err();
        assert!(e.to_string().contains("train.epochs expects a non-negative integer"), "{e}");
        let e = ResolvedConfig::resolve(None, &over(&[("mask.nope", "1")])).unwrap_err();
        assert!(e.to_string().contains("unknown config key mask.nope"));
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.toml");
        std::fs::write(&f, "[train]\nbatch_size = \"big\"\n").unwrap();
        let e = ResolvedConfig::resolve(Some(&f), &[]).unwrap_err();
        assert!(e.is_config() && e.to_string().contains("train.batch_size"), "{e}");
    }

    #[test]
    fn echo_reloads_to_the_same_settings() {
        let c = ResolvedConfig::resolve(
            None,
            &over(&[("backbone.name", "stub"), ("train.seed", "7"), ("eval.categories", "dress,shirt"), ("train.clip_norm", "1.5")]),
        )
        .unwrap();
        assert_eq!(c.opt_usize("inversion.hidden"), Some(64));
        assert_eq!(c.str("mask.relevance_provider"), "stub");
        let dir = tempfile::tempdir().unwrap();
        let path = c.write_echo(dir.path(), "0.1.0").unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.contains("tau = 0.3  # default"));
        assert!(text.contains("seed = 7  # cli"));
        let again = ResolvedConfig::resolve(Some(&path), &[]).unwrap();
        assert_eq!(again.canonical(), c.canonical());
        assert_eq!(again.hash(), c.hash());
    }
}
