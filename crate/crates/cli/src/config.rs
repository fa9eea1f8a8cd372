//! Plain-text `key = value` experiment configuration.

use std::fmt;
use std::path::{Path, PathBuf};

use softmine::trainer::TrainConfig;

/// A rejected configuration. Maps to exit code 2.
#[derive(Debug)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

pub fn config_error(msg: impl Into<String>) -> anyhow::Error {
    ConfigError(msg.into()).into()
}

/// Everything one `fit` run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub image: Option<PathBuf>,
    pub out: PathBuf,
    pub train: TrainConfig,
    pub dump_images: bool,
    /// Dump the walker pool every this many iterations; 0 disables.
    pub walker_dump_every: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            image: None,
            out: PathBuf::from("runs/fit"),
            train: TrainConfig::default(),
            dump_images: false,
            walker_dump_every: 0,
        }
    }
}

/// Keys accepted in config files and `--set`.
pub const KEYS: &[&str] = &[
    "image",
    "out",
    "iterations",
    "batch_size",
    "eval_every",
    "sampler",
    "alpha",
    "warmup_iters",
    "eps_q",
    "lmc_a",
    "lmc_b",
    "uniform_frac",
    "reinit",
    "reinit_frac",
    "edge_mix",
    "pool_size",
    "levels",
    "base_resolution",
    "growth",
    "features_per_level",
    "hidden_width",
    "lr",
    "lr_milestones",
    "lr_factor",
    "seed",
    "target_psnr",
    "reproducible",
    "snap_to_pixels",
    "dump_images",
    "walker_dump_every",
];

/// One `key = value` line with its position, for error messages.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub key: String,
    pub value: String,
    pub line: usize,
}

/// A parsed file: top-level entries followed by optional `[name]` sections.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Document {
    pub top: Vec<Entry>,
    pub sections: Vec<(String, Vec<Entry>)>,
}

pub fn parse_document(text: &str, origin: &str) -> anyhow::Result<Document> {
    let mut doc = Document::default();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let trimmed = raw.split('#').next().unwrap_or("").trim();
        if trimmed.is_empty() {
            continue;
        }
        if let Some(rest) = trimmed.strip_prefix('[') {
            let name = rest
                .strip_suffix(']')
                .map(str::trim)
                .filter(|n| !n.is_empty())
                .ok_or_else(|| {
                    config_error(format!(
                        "{origin}:{line}: malformed section header {trimmed:?}"
                    ))
                })?;
            if doc.sections.iter().any(|(n, _)| n == name) {
                return Err(config_error(format!(
                    "{origin}:{line}: duplicate section [{name}]"
                )));
            }
            doc.sections.push((name.to_string(), Vec::new()));
            continue;
        }
        let (key, value) = trimmed.split_once('=').ok_or_else(|| {
            config_error(format!(
                "{origin}:{line}: expected key = value, got {trimmed:?}"
            ))
        })?;
        let entry = Entry {
            key: key.trim().to_string(),
            value: value.trim().to_string(),
            line,
        };
        let scope = match doc.sections.last_mut() {
            Some((_, entries)) => entries,
            None => &mut doc.top,
        };
        if let Some(prev) = scope.iter().find(|e| e.key == entry.key) {
            return Err(config_error(format!(
                "{origin}:{line}: {} already set on line {}",
                entry.key, prev.line
            )));
        }
        scope.push(entry);
    }
    Ok(doc)
}

pub fn read_document(path: &Path) -> anyhow::Result<Document> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| config_error(format!("cannot read config {}: {e}", path.display())))?;
    parse_document(&text, &path.display().to_string())
}

/// Splits a `--set key=value` argument.
pub fn parse_override(arg: &str) -> anyhow::Result<Entry> {
    let (key, value) = arg
        .split_once('=')
        .ok_or_else(|| config_error(format!("--set expects key=value, got {arg:?}")))?;
    Ok(Entry {
        key: key.trim().to_string(),
        value: value.trim().to_string(),
        line: 0,
    })
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> anyhow::Result<T>
where
    T::Err: fmt::Display,
{
    value
        .parse()
        .map_err(|e| config_error(format!("bad value {value:?} for {key}: {e}")))
}

fn parse_bool(key: &str, value: &str) -> anyhow::Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(config_error(format!(
            "bad value {value:?} for {key}: expected true or false"
        ))),
    }
}

fn parse_list(key: &str, value: &str) -> anyhow::Result<Vec<u64>> {
    value
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| parse(key, s))
        .collect()
}

fn join(values: &[u64]) -> String {
    values
        .iter()
        .map(u64::to_string)
        .collect::<Vec<_>>()
        .join(",")
}

impl ExperimentConfig {
    pub fn set(&mut self, key: &str, value: &str) -> anyhow::Result<()> {
        let t = &mut self.train;
        match key {
            "image" => {
                self.image = match value {
                    "" | "none" => None,
                    v => Some(PathBuf::from(v)),
                }
            }
            "out" => self.out = PathBuf::from(value),
            "iterations" => t.iterations = parse(key, value)?,
            "batch_size" => t.batch_size = parse(key, value)?,
            "eval_every" => t.eval_every = parse(key, value)?,
            "sampler" => t.sampler = parse(key, value)?,
            "alpha" => t.mining.alpha_target = parse(key, value)?,
            "warmup_iters" => t.mining.warmup_iters = parse(key, value)?,
            "eps_q" => {
                let eps = parse(key, value)?;
                t.mining.eps_q = eps;
                t.lmc.eps_q = eps;
            }
            "lmc_a" => t.lmc.a = parse(key, value)?,
            "lmc_b" => t.lmc.b = parse(key, value)?,
            "uniform_frac" => t.lmc.uniform_frac = parse(key, value)?,
            "reinit" => t.reinit = parse_bool(key, value)?,
            "reinit_frac" => t.lmc.reinit_frac = parse(key, value)?,
            "edge_mix" => t.lmc.edge_mix = parse(key, value)?,
            "pool_size" => {
                t.lmc.pool_size = match value {
                    "" | "auto" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "levels" => t.encoding.levels = parse(key, value)?,
            "base_resolution" => t.encoding.base_resolution = parse(key, value)?,
            "growth" => t.encoding.growth = parse(key, value)?,
            "features_per_level" => t.encoding.features_per_level = parse(key, value)?,
            "hidden_width" => t.hidden_width = parse(key, value)?,
            "lr" => t.lr.base = parse(key, value)?,
            "lr_milestones" => t.lr.milestones = parse_list(key, value)?,
            "lr_factor" => t.lr.factor = parse(key, value)?,
            "seed" => t.seed = parse(key, value)?,
            "target_psnr" => {
                t.target_psnr = match value {
                    "" | "none" => None,
                    v => Some(parse(key, v)?),
                }
            }
            "reproducible" => t.reproducible = parse_bool(key, value)?,
            "snap_to_pixels" => t.snap_to_pixels = parse_bool(key, value)?,
            "dump_images" => self.dump_images = parse_bool(key, value)?,
            "walker_dump_every" => self.walker_dump_every = parse(key, value)?,
            other => return Err(config_error(format!("unknown config key {other:?}"))),
        }
        Ok(())
    }

    pub fn apply(&mut self, entries: &[Entry], origin: &str) -> anyhow::Result<()> {
        for e in entries {
            self.set(&e.key, &e.value).map_err(|err| {
                if e.line == 0 {
                    err
                } else {
                    config_error(format!("{origin}:{}: {err}", e.line))
                }
            })?;
        }
        Ok(())
    }

    /// Checks everything a run needs before it starts.
    pub fn validate(&self) -> anyhow::Result<()> {
        if self.image.is_none() {
            return Err(config_error("missing required key \"image\""));
        }
        self.train
            .validate()
            .map_err(|e| config_error(e.to_string()))
    }

    /// Every key with its resolved value, in schema order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let t = &self.train;
        let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
        KEYS.iter()
            .map(|&k| {
                let v = match k {
                    "image" => opt(self.image.as_ref().map(|p| p.display().to_string())),
                    "out" => self.out.display().to_string(),
                    "iterations" => t.iterations.to_string(),
                    "batch_size" => t.batch_size.to_string(),
                    "eval_every" => t.eval_every.to_string(),
                    "sampler" => t.sampler.as_str().to_string(),
                    "alpha" => t.mining.alpha_target.to_string(),
                    "warmup_iters" => t.mining.warmup_iters.to_string(),
                    "eps_q" => t.mining.eps_q.to_string(),
                    "lmc_a" => t.lmc.a.to_string(),
                    "lmc_b" => t.lmc.b.to_string(),
                    "uniform_frac" => t.lmc.uniform_frac.to_string(),
                    "reinit" => t.reinit.to_string(),
                    "reinit_frac" => t.lmc.reinit_frac.to_string(),
                    "edge_mix" => t.lmc.edge_mix.to_string(),
                    "pool_size" => t.lmc.pool_size.map_or("auto".into(), |p| p.to_string()),
                    "levels" => t.encoding.levels.to_string(),
                    "base_resolution" => t.encoding.base_resolution.to_string(),
                    "growth" => t.encoding.growth.to_string(),
                    "features_per_level" => t.encoding.features_per_level.to_string(),
                    "hidden_width" => t.hidden_width.to_string(),
                    "lr" => t.lr.base.to_string(),
                    "lr_milestones" => join(&t.lr.milestones),
                    "lr_factor" => t.lr.factor.to_string(),
                    "seed" => t.seed.to_string(),
                    "target_psnr" => opt(t.target_psnr.map(|v| v.to_string())),
                    "reproducible" => t.reproducible.to_string(),
                    "snap_to_pixels" => t.snap_to_pixels.to_string(),
                    "dump_images" => self.dump_images.to_string(),
                    "walker_dump_every" => self.walker_dump_every.to_string(),
                    _ => unreachable!("every schema key is rendered"),
                };
                (k, v)
            })
            .collect()
    }

    /// The resolved configuration as a config file that replays this run.
    pub fn to_metadata(&self) -> String {
        let mut s = format!("# softmine {}\n", env!("CARGO_PKG_VERSION"));
        for (k, v) in self.entries() {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }
}
