//! Sectioned `key = value` configuration text.
//!
//! ```text
//! # comment
//! include = presets/small.cfg
//! [train]
//! iters = 2000
//! ```
//!
//! Keys are addressed as `section.key`. An `include` line splices another
//! file (resolved relative to the including file) at that point; later
//! assignments override earlier ones.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use indexmap::IndexMap;

use crate::cond::ConditionSpec;
use crate::data::{Dataset, DatasetParams};
use crate::error::{Error, Result};
use crate::flow::{BlockKind, PredictorKind, TransporterConfig};
use crate::model::fm::{FmConfig, VelocityConfig};
use crate::model::ntm::NtmConfig;
use crate::model::train::{OptimConfig, TrainConfig, TrainMode};
use crate::sampling::DenoiserConfig;

const MAX_INCLUDE_DEPTH: usize = 8;

#[derive(Clone, Debug, PartialEq)]
struct Entry {
    value: String,
    line: usize,
    source: String,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigDoc {
    entries: IndexMap<String, Entry>,
}

fn config_err(source: &str, line: usize, msg: impl Display) -> Error {
    let msg = if source.is_empty() {
        msg.to_string()
    } else {
        format!("{source}: {msg}")
    };
    Error::Config { line, msg }
}

impl ConfigDoc {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parses text; `include` directives are rejected since there is no
    /// base directory.
    pub fn parse(text: &str) -> Result<Self> {
        let mut doc = Self::new();
        doc.read(text, "", None, 0)?;
        Ok(doc)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut doc = Self::new();
        doc.read_file(path, 0)?;
        Ok(doc)
    }

    fn read_file(&mut self, path: &Path, depth: usize) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        self.read(&text, &path.display().to_string(), Some(&dir), depth)
    }

    fn read(&mut self, text: &str, source: &str, dir: Option<&PathBuf>, depth: usize) -> Result<()> {
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let l = raw.split('#').next().unwrap_or("").trim();
            if l.is_empty() {
                continue;
            }
            if let Some(rest) = l.strip_prefix('[') {
                let name = rest
                    .strip_suffix(']')
                    .ok_or_else(|| config_err(source, line, "unterminated section header"))?
                    .trim();
                if name.is_empty() || name.contains(char::is_whitespace) {
                    return Err(config_err(source, line, format!("bad section name `{name}`")));
                }
                section = name.to_string();
                continue;
            }
            let (k, v) = l
                .split_once('=')
                .ok_or_else(|| config_err(source, line, format!("expected `key = value`, got `{l}`")))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(config_err(source, line, format!("bad key `{k}`")));
            }
            if k == "include" {
                let dir = dir.ok_or_else(|| config_err(source, line, "include needs a file context"))?;
                if depth >= MAX_INCLUDE_DEPTH {
                    return Err(config_err(source, line, "includes nested too deeply"));
                }
                let target = dir.join(v);
                if !target.is_file() {
                    return Err(config_err(
                        source,
                        line,
                        format!("included file `{}` not found", target.display()),
                    ));
                }
                self.read_file(&target, depth + 1)?;
                continue;
            }
            let key = if section.is_empty() {
                k.to_string()
            } else {
                format!("{section}.{k}")
            };
            self.entries.insert(
                key,
                Entry {
                    value: v.to_string(),
                    line,
                    source: source.to_string(),
                },
            );
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: impl Display) {
        self.entries.insert(
            key.to_string(),
            Entry {
                value: value.to_string(),
                line: 0,
                source: String::new(),
            },
        );
    }

    pub fn contains(&self, key: &str) -> bool {
        self.entries.contains_key(key)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(|e| e.value.as_str())
    }

    fn parse_value<T: FromStr>(&self, key: &str, e: &Entry, v: &str) -> Result<T>
    where
        T::Err: Display,
    {
        v.parse()
            .map_err(|err| config_err(&e.source, e.line, format!("`{key}`: cannot parse `{v}`: {err}")))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: Display,
    {
        match self.entries.get(key) {
            Some(e) => self.parse_value(key, e, &e.value).map(Some),
            None => Ok(None),
        }
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, key: &str) -> Result<T>
    where
        T::Err: Display,
    {
        self.get(key)?.ok_or_else(|| Error::MissingKey(key.to_string()))
    }

    /// Comma-separated list.
    pub fn get_list<T: FromStr>(&self, key: &str) -> Result<Option<Vec<T>>>
    where
        T::Err: Display,
    {
        let Some(e) = self.entries.get(key) else {
            return Ok(None);
        };
        e.value
            .split(',')
            .map(|s| s.trim())
            .filter(|s| !s.is_empty())
            .map(|s| self.parse_value(key, e, s))
            .collect::<Result<Vec<T>>>()
            .map(Some)
    }

    /// Line-numbered error for a semantically invalid value of `key`.
    pub fn invalid(&self, key: &str, msg: impl Display) -> Error {
        match self.entries.get(key) {
            Some(e) => config_err(&e.source, e.line, format!("`{key}`: {msg}")),
            None => Error::Config {
                line: 0,
                msg: format!("`{key}`: {msg}"),
            },
        }
    }

    /// Rejects keys under `sections` that are not in `known`.
    pub fn check_known(&self, sections: &[&str], known: &[&str]) -> Result<()> {
        for (k, e) in &self.entries {
            let sec = k.split_once('.').map_or("", |(s, _)| s);
            if sections.contains(&sec) && !known.contains(&k.as_str()) {
                return Err(config_err(&e.source, e.line, format!("unknown key `{k}`")));
            }
        }
        Ok(())
    }

    /// Canonical text: keys grouped by section in insertion order.
    pub fn to_text(&self) -> String {
        let mut groups: IndexMap<&str, Vec<(&str, &str)>> = IndexMap::new();
        for (k, e) in &self.entries {
            let (sec, name) = k.split_once('.').unwrap_or(("", k.as_str()));
            groups.entry(sec).or_default().push((name, &e.value));
        }
        let mut out = String::new();
        for (sec, kv) in groups {
            if !sec.is_empty() {
                if !out.is_empty() {
                    out.push('\n');
                }
                out.push_str(&format!("[{sec}]\n"));
            }
            for (k, v) in kv {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }

    /// Copy of the entries under `section`, as a standalone document.
    pub fn section(&self, section: &str) -> ConfigDoc {
        let prefix = format!("{section}.");
        ConfigDoc {
            entries: self
                .entries
                .iter()
                .filter(|(k, _)| k.starts_with(&prefix))
                .map(|(k, e)| (k.clone(), e.clone()))
                .collect(),
        }
    }

    pub fn merge(&mut self, other: &ConfigDoc) {
        for (k, e) in &other.entries {
            self.entries.insert(k.clone(), e.clone());
        }
    }
}

fn list_text<T: Display>(v: &[T]) -> String {
    v.iter().map(ToString::to_string).collect::<Vec<_>>().join(",")
}

pub fn cond_to_text(c: ConditionSpec) -> String {
    match c {
        ConditionSpec::None => "none".into(),
        ConditionSpec::Class { classes } => format!("class:{classes}"),
        ConditionSpec::Vector { dim } => format!("vector:{dim}"),
    }
}

pub fn cond_from_text(s: &str) -> Result<ConditionSpec> {
    let bad = || Error::invalid(format!("bad condition spec `{s}`"));
    if s == "none" {
        return Ok(ConditionSpec::None);
    }
    let (kind, n) = s.split_once(':').ok_or_else(bad)?;
    let n: usize = n.parse().map_err(|_| bad())?;
    match kind {
        "class" if n > 0 => Ok(ConditionSpec::Class { classes: n }),
        "vector" if n > 0 => Ok(ConditionSpec::Vector { dim: n }),
        _ => Err(bad()),
    }
}

fn cond_key(doc: &ConfigDoc, key: &str, default: ConditionSpec) -> Result<ConditionSpec> {
    match doc.raw(key) {
        Some(v) => cond_from_text(v).map_err(|e| doc.invalid(key, e)),
        None => Ok(default),
    }
}

pub const DATA_KEYS: &[&str] = &[
    "data.dataset",
    "data.mean",
    "data.std",
    "data.components",
    "data.radius",
    "data.noise",
];

/// Dataset described by the `[data]` section.
pub fn dataset_from(doc: &ConfigDoc) -> Result<Dataset> {
    let name: String = doc.require("data.dataset")?;
    let d = DatasetParams::default();
    let params = DatasetParams {
        mean: doc.get_or("data.mean", d.mean)?,
        std: doc.get_or("data.std", d.std)?,
        components: doc.get_or("data.components", d.components)?,
        radius: doc.get_or("data.radius", d.radius)?,
        noise: doc.get_or("data.noise", d.noise)?,
    };
    Dataset::by_name(&name, params).map_err(|e| doc.invalid("data.dataset", e))
}

pub fn dataset_to(doc: &mut ConfigDoc, ds: &Dataset) {
    let p = ds.params();
    doc.set("data.dataset", ds.kind());
    doc.set("data.mean", p.mean);
    doc.set("data.std", p.std);
    doc.set("data.components", p.components);
    doc.set("data.radius", p.radius);
    doc.set("data.noise", p.noise);
}

pub const FM_KEYS: &[&str] = &["fm.hidden", "fm.layers", "fm.cond", "fm.cond_width"];

pub fn fm_config_from(doc: &ConfigDoc, dim: usize, cond: ConditionSpec) -> Result<FmConfig> {
    let d = VelocityConfig::default();
    Ok(FmConfig {
        dim,
        net: VelocityConfig {
            hidden: doc.get_or("fm.hidden", d.hidden)?,
            layers: doc.get_or("fm.layers", d.layers)?,
            cond: cond_key(doc, "fm.cond", cond)?,
            cond_width: doc.get_or("fm.cond_width", d.cond_width)?,
        },
    })
}

pub fn fm_config_to(doc: &mut ConfigDoc, cfg: &FmConfig) {
    doc.set("fm.dim", cfg.dim);
    doc.set("fm.hidden", cfg.net.hidden);
    doc.set("fm.layers", cfg.net.layers);
    doc.set("fm.cond", cond_to_text(cfg.net.cond));
    doc.set("fm.cond_width", cfg.net.cond_width);
}

pub const MODEL_KEYS: &[&str] = &[
    "model.steps",
    "model.t_min_lo",
    "model.t_min_hi",
    "model.sample_t_min",
    "model.shift_seq_len",
    "model.cond",
    "model.cond_width",
    "transporter.blocks",
    "transporter.hidden",
    "transporter.layers",
    "transporter.kind",
    "transporter.skip_threshold",
    "predictor.kind",
    "predictor.hidden",
    "predictor.layers",
    "predictor.mean",
    "predictor.var",
];

pub fn ntm_config_from(doc: &ConfigDoc, dim: usize, cond: ConditionSpec) -> Result<NtmConfig> {
    let mut cfg = NtmConfig::new(dim);
    if let Some(steps) = doc.get_list::<usize>("model.steps")? {
        cfg.steps = steps;
    }
    cfg.t_min_range = (
        doc.get_or("model.t_min_lo", cfg.t_min_range.0)?,
        doc.get_or("model.t_min_hi", cfg.t_min_range.1)?,
    );
    cfg.sample_t_min = doc.get_or("model.sample_t_min", cfg.sample_t_min)?;
    cfg.shift_seq_len = doc.get("model.shift_seq_len")?;
    cfg.cond = cond_key(doc, "model.cond", cond)?;
    cfg.cond_width = doc.get_or("model.cond_width", cfg.cond_width)?;

    let t = TransporterConfig::default();
    let kind = match doc.raw("transporter.kind").unwrap_or("made") {
        "made" => BlockKind::Made,
        "attention" => BlockKind::Attention,
        other => return Err(doc.invalid("transporter.kind", format!("unknown kind `{other}`"))),
    };
    cfg.transporter = TransporterConfig {
        blocks: doc.get_or("transporter.blocks", t.blocks)?,
        hidden: doc.get_or("transporter.hidden", t.hidden)?,
        layers: doc.get_or("transporter.layers", t.layers)?,
        kind,
        steps_embedding: false,
        skip_threshold: doc.get_or("transporter.skip_threshold", t.skip_threshold)?,
    };
    cfg.predictor = match doc.raw("predictor.kind").unwrap_or("mlp") {
        "mlp" => {
            let PredictorKind::Mlp { hidden, layers } = PredictorKind::default() else {
                unreachable!("default predictor is an MLP")
            };
            PredictorKind::Mlp {
                hidden: doc.get_or("predictor.hidden", hidden)?,
                layers: doc.get_or("predictor.layers", layers)?,
            }
        }
        "gaussian" => PredictorKind::Gaussian {
            mean: doc
                .get_list("predictor.mean")?
                .ok_or_else(|| Error::MissingKey("predictor.mean".into()))?,
            var: doc
                .get_list("predictor.var")?
                .ok_or_else(|| Error::MissingKey("predictor.var".into()))?,
        },
        "posterior" => PredictorKind::Posterior {
            net: fm_config_from(doc, dim, cfg.cond)?.net,
        },
        other => return Err(doc.invalid("predictor.kind", format!("unknown kind `{other}`"))),
    };
    cfg.validate().map_err(|e| match e {
        Error::InvalidArgument(msg) => Error::Config { line: 0, msg },
        other => other,
    })?;
    Ok(cfg)
}

pub fn ntm_config_to(doc: &mut ConfigDoc, cfg: &NtmConfig) {
    doc.set("model.dim", cfg.dim);
    doc.set("model.steps", list_text(&cfg.steps));
    doc.set("model.t_min_lo", cfg.t_min_range.0);
    doc.set("model.t_min_hi", cfg.t_min_range.1);
    doc.set("model.sample_t_min", cfg.sample_t_min);
    if let Some(l) = cfg.shift_seq_len {
        doc.set("model.shift_seq_len", l);
    }
    doc.set("model.cond", cond_to_text(cfg.cond));
    doc.set("model.cond_width", cfg.cond_width);
    let t = &cfg.transporter;
    doc.set("transporter.blocks", t.blocks);
    doc.set("transporter.hidden", t.hidden);
    doc.set("transporter.layers", t.layers);
    doc.set(
        "transporter.kind",
        match t.kind {
            BlockKind::Made => "made",
            BlockKind::Attention => "attention",
        },
    );
    doc.set("transporter.skip_threshold", t.skip_threshold);
    match &cfg.predictor {
        PredictorKind::Mlp { hidden, layers } => {
            doc.set("predictor.kind", "mlp");
            doc.set("predictor.hidden", hidden);
            doc.set("predictor.layers", layers);
        }
        PredictorKind::Gaussian { mean, var } => {
            doc.set("predictor.kind", "gaussian");
            doc.set("predictor.mean", list_text(mean));
            doc.set("predictor.var", list_text(var));
        }
        PredictorKind::Posterior { net } => {
            doc.set("predictor.kind", "posterior");
            fm_config_to(
                doc,
                &FmConfig {
                    dim: cfg.dim,
                    net: net.clone(),
                },
            );
        }
    }
}

pub const TRAIN_KEYS: &[&str] = &[
    "mode",
    "lr",
    "min_lr",
    "warmup",
    "beta1",
    "beta2",
    "weight_decay",
    "grad_clip",
    "batch",
    "iters",
    "cfg_dropout",
    "lambda",
    "seed",
];

/// Training settings from `[section]`, on top of `base`.
pub fn train_config_from(doc: &ConfigDoc, section: &str, base: TrainConfig) -> Result<TrainConfig> {
    let k = |name: &str| format!("{section}.{name}");
    let o = base.optim;
    let mode_key = k("mode");
    let mode = match doc.raw(&mode_key) {
        None => base.mode,
        Some("end-to-end") => TrainMode::EndToEnd,
        Some("pair-wise") => TrainMode::Pairwise,
        Some(other) => return Err(doc.invalid(&mode_key, format!("unknown mode `{other}` (end-to-end | pair-wise)"))),
    };
    let cfg = TrainConfig {
        mode,
        optim: OptimConfig {
            lr: doc.get_or(&k("lr"), o.lr)?,
            min_lr: doc.get_or(&k("min_lr"), o.min_lr)?,
            warmup: doc.get_or(&k("warmup"), o.warmup)?,
            beta1: doc.get_or(&k("beta1"), o.beta1)?,
            beta2: doc.get_or(&k("beta2"), o.beta2)?,
            weight_decay: doc.get_or(&k("weight_decay"), o.weight_decay)?,
            grad_clip: doc.get_or(&k("grad_clip"), o.grad_clip)?,
        },
        batch: doc.get_or(&k("batch"), base.batch)?,
        iters: doc.get_or(&k("iters"), base.iters)?,
        cfg_dropout: doc.get_or(&k("cfg_dropout"), base.cfg_dropout)?,
        lambda: doc.get_or(&k("lambda"), base.lambda)?,
        seed: doc.get_or(&k("seed"), base.seed)?,
    };
    cfg.validate().map_err(|e| match e {
        Error::InvalidArgument(msg) => Error::Config {
            line: 0,
            msg: format!("[{section}] {msg}"),
        },
        other => other,
    })?;
    Ok(cfg)
}

pub fn train_config_to(doc: &mut ConfigDoc, section: &str, cfg: &TrainConfig) {
    let k = |name: &str| format!("{section}.{name}");
    doc.set(
        &k("mode"),
        match cfg.mode {
            TrainMode::EndToEnd => "end-to-end",
            TrainMode::Pairwise => "pair-wise",
        },
    );
    let o = &cfg.optim;
    doc.set(&k("lr"), o.lr);
    doc.set(&k("min_lr"), o.min_lr);
    doc.set(&k("warmup"), o.warmup);
    doc.set(&k("beta1"), o.beta1);
    doc.set(&k("beta2"), o.beta2);
    doc.set(&k("weight_decay"), o.weight_decay);
    doc.set(&k("grad_clip"), o.grad_clip);
    doc.set(&k("batch"), cfg.batch);
    doc.set(&k("iters"), cfg.iters);
    doc.set(&k("cfg_dropout"), cfg.cfg_dropout);
    doc.set(&k("lambda"), cfg.lambda);
    doc.set(&k("seed"), cfg.seed);
}

pub const DENOISER_KEYS: &[&str] = &["denoiser.hidden", "denoiser.cond", "denoiser.cond_width"];

pub fn denoiser_config_from(doc: &ConfigDoc, dim: usize, cond: ConditionSpec) -> Result<DenoiserConfig> {
    let d = DenoiserConfig::new(dim);
    Ok(DenoiserConfig {
        dim,
        hidden: doc.get_or("denoiser.hidden", d.hidden)?,
        cond: cond_key(doc, "denoiser.cond", cond)?,
        cond_width: doc.get_or("denoiser.cond_width", d.cond_width)?,
    })
}

pub fn denoiser_config_to(doc: &mut ConfigDoc, cfg: &DenoiserConfig) {
    doc.set("denoiser.dim", cfg.dim);
    doc.set("denoiser.hidden", cfg.hidden);
    doc.set("denoiser.cond", cond_to_text(cfg.cond));
    doc.set("denoiser.cond_width", cfg.cond_width);
}
