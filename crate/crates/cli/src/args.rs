use std::path::PathBuf;

use cirmask::config;
use clap::{Parser, Subcommand};

/// Zero-shot composed image retrieval with masked textual inversion.
///
/// Any config key can be overridden as `--section.key value`.
#[derive(Debug, Parser)]
#[command(name = "cirmask", version)]
pub struct Cli {
    /// TOML config file layered over the defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train the inversion network.
    Train,
    /// Score a checkpoint on a benchmark.
    Evaluate,
    /// Rank a gallery for one reference image and text.
    Retrieve {
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        text: String,
        #[arg(long, default_value_t = 10)]
        top: usize,
    },
    /// Write masking previews for the first pairs of the manifest.
    PreviewMask {
        #[arg(long, default_value_t = 4)]
        count: usize,
    },
    /// Train and evaluate one model per tau.
    AblateTau,
    /// Download manifest URLs into the image cache.
    Ingest,
}

/// Short flags that map onto config keys.
const ALIASES: &[(&str, &str)] = &[
    ("seed", "train.seed"),
    ("tau", "mask.tau"),
    ("taus", "ablation.taus"),
    ("k", "eval.ks"),
    ("benchmark", "eval.benchmark"),
    ("split", "eval.split"),
    ("checkpoint", "eval.checkpoint"),
    ("manifest", "data.manifest"),
    ("backbone", "backbone.name"),
    ("run-dir", "run.dir"),
];

/// Pulls `--section.key value`, `--section.key=value` and alias flags out of
/// argv, returning the rest for clap.
pub fn split_overrides(args: impl IntoIterator<Item = String>) -> Result<(Vec<String>, Vec<(String, String)>), String> {
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    while let Some(arg) = it.next() {
        let Some(flag) = arg.strip_prefix("--") else {
            rest.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n, Some(v.to_string())),
            None => (flag, None),
        };
        let key = ALIASES
            .iter()
            .find(|(a, _)| *a == name)
            .map(|(_, k)| k.to_string())
            .or_else(|| name.contains('.').then(|| name.to_string()));
        let Some(key) = key else {
            rest.push(arg);
            continue;
        };
        if config::spec(&key).is_none() {
            return Err(format!("unknown config key {key}"));
        }
        let value = match inline {
            Some(v) => v,
            None => it.next().ok_or_else(|| format!("--{name} needs a value"))?,
        };
        overrides.push((key, value));
    }
    Ok((rest, overrides))
}
