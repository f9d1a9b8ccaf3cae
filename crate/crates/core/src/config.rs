//! `key = value` run configuration.
//!
//! Lines are `dotted.key = value`; `#` starts a comment. Every problem found in
//! a file is reported together.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::data::{parse_class_map, BlobSpec, ClassMap, NoiseKind};
use crate::error::{Error, Result};
use crate::losses::RegConfig;
use crate::mixture::MixtureKind;
use crate::trainer::{Mode, Schedule, TrainConfig};

/// A recognised key with its default and accepted range.
#[derive(Debug, Clone, Copy)]
pub struct KeySpec {
    pub name: &'static str,
    pub default: &'static str,
    pub range: &'static str,
}

const fn key(name: &'static str, default: &'static str, range: &'static str) -> KeySpec {
    KeySpec { name, default, range }
}

pub const KEYS: &[KeySpec] = &[
    key("seed", "0", "u64; feeds every random stream"),
    key("mode", "crema", "crema | ce-baseline | selection-only | global-label-ablation"),
    key("output.dir", "out", "directory, created if missing"),
    key("output.checkpoint", "false", "true | false; save final network weights"),
    key("data.source", "blobs", "blobs | idx | csv"),
    key("data.train_images", "", "IDX image file (.gz allowed); data.source = idx"),
    key("data.train_labels", "", "IDX label file; data.source = idx"),
    key("data.test_images", "", "IDX image file; data.source = idx"),
    key("data.test_labels", "", "IDX label file; data.source = idx"),
    key("data.train_limit", "0", "keep the first N training samples; 0 = all"),
    key("data.test_limit", "0", "keep the first N test samples; 0 = all"),
    key("data.csv", "", "CSV with f0.. columns and a trailing `label`; data.source = csv"),
    key("data.test_csv", "", "optional held-out CSV; otherwise data.test_fraction is split off"),
    key("data.test_fraction", "0.2", "(0, 1); blobs and csv without data.test_csv"),
    key("blobs.classes", "4", ">= 2"),
    key("blobs.dims", "16", ">= 1"),
    key("blobs.per_class", "500", ">= 1"),
    key("blobs.center_scale", "4.0", ">= 0"),
    key("blobs.std", "1.0", "> 0"),
    key("noise.kind", "symmetric", "symmetric | pairflip | asymmetric"),
    key("noise.tau", "0.0", "[0, 1)"),
    key("noise.map", "", "src:dst,... or `cifar10`; required for asymmetric"),
    key("noise.seed", "derived", "u64; defaults to a stream of the top-level seed"),
    key("model.hidden", "256", "comma-separated widths, each >= 1; empty = linear"),
    key("model.slope", "0.01", "[0, 1) leaky-ReLU negative slope"),
    key("model.lr", "0.001", "> 0"),
    key("model.beta1", "0.9", "[0, 1)"),
    key("model.beta2", "0.999", "[0, 1)"),
    key("model.eps", "1e-8", "> 0"),
    key("model.batch_size", "64", ">= 1"),
    key("schedule.epochs", "30", "> schedule.warmup"),
    key("schedule.warmup", "5", ">= 0"),
    key("schedule.ramp", "10", ">= 1"),
    key("schedule.sigma", "1 - noise.tau", "(0, 1]; memory-rate floor"),
    key("reg.alpha_prior", "0.1", ">= 0"),
    key("reg.alpha_entropy", "0.1", ">= 0"),
    key("credibility.estimator", "gmm", "gmm | bmm"),
    key("credibility.window", "3", ">= 1"),
    key("labels.alpha", "5", ">= 0; initial label-logit scale, 0 = uniform"),
    key("labels.lambda", "100", ">= 0; label learning rate"),
    key("mixture.tol", "1e-4", "> 0"),
    key("mixture.max_iter", "100", ">= 1"),
];

/// Table of keys for `--help`.
pub fn keys_help() -> String {
    let mut s = String::from("config keys (key = value, # comments):\n");
    for k in KEYS {
        let _ = writeln!(s, "  {:<22} default {:<14} {}", k.name, k.default, k.range);
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Blobs {
        spec: BlobSpec,
        test_fraction: f64,
    },
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
        train_limit: usize,
        test_limit: usize,
    },
    Csv {
        path: PathBuf,
        test_path: Option<PathBuf>,
        test_fraction: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub tau: f64,
    pub map: Option<ClassMap>,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub checkpoint: bool,
    pub data: DataSource,
    pub noise: NoiseSpec,
    pub train: TrainConfig,
}

/// Raw `key -> (value, line)` pairs.
#[derive(Debug, Clone, Default)]
pub struct RawConfig {
    entries: BTreeMap<String, (String, usize)>,
}

impl RawConfig {
    /// Splits text into entries. Syntax errors, duplicates and unknown keys
    /// are all collected before returning.
    pub fn parse(text: &str) -> Result<Self> {
        let mut errs = Vec::new();
        let mut seen: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((k, v)) = line.split_once('=') else {
                errs.push(format!("line {line_no}: expected `key = value`, got `{line}`"));
                continue;
            };
            let k = k.trim().to_string();
            if k.is_empty() {
                errs.push(format!("line {line_no}: missing key"));
                continue;
            }
            seen.entry(k.clone()).or_default().push(line_no);
            entries.insert(k, (v.trim().to_string(), line_no));
        }
        for (k, lines) in &seen {
            if lines.len() > 1 {
                let l: Vec<String> = lines.iter().map(|n| n.to_string()).collect();
                errs.push(format!("duplicate key `{k}` on lines {}", l.join(", ")));
            }
            if !KEYS.iter().any(|s| s.name == k) {
                errs.push(unknown_key(k, lines[0]));
            }
        }
        if errs.is_empty() {
            Ok(Self { entries })
        } else {
            Err(Error::Config(errs))
        }
    }

    /// Applies `key=value` overrides, e.g. from the command line.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        if !KEYS.iter().any(|s| s.name == key) {
            return Err(Error::Config(vec![unknown_key(key, 0)]));
        }
        self.entries.insert(key.to_string(), (value.to_string(), 0));
        Ok(())
    }

    fn get(&self, key: &str) -> Option<(&str, usize)> {
        self.entries.get(key).map(|(v, l)| (v.as_str(), *l))
    }
}

fn unknown_key(k: &str, line: usize) -> String {
    let nearest = KEYS
        .iter()
        .map(|s| (strsim::levenshtein(k, s.name), s.name))
        .min()
        .map(|(_, n)| n)
        .unwrap_or("");
    let at = if line > 0 { format!("line {line}: ") } else { String::new() };
    format!("{at}unknown key `{k}` (did you mean `{nearest}`?)")
}

fn where_(key: &str, line: usize) -> String {
    if line > 0 {
        format!("line {line}: {key}")
    } else {
        key.to_string()
    }
}

/// Typed lookups that record failures instead of stopping.
struct Reader<'a> {
    raw: &'a RawConfig,
    errs: Vec<String>,
}

impl Reader<'_> {
    fn parse<T: FromStr>(&mut self, key: &str, default: T, what: &str) -> T {
        match self.raw.get(key) {
            None => default,
            Some((v, line)) => match v.parse() {
                Ok(x) => x,
                Err(_) => {
                    self.errs.push(format!("{}: `{v}` is not {what}", where_(key, line)));
                    default
                }
            },
        }
    }

    fn uint(&mut self, key: &str, default: usize, min: usize) -> usize {
        let v = self.parse(key, default, "a non-negative integer");
        if v < min {
            self.range(key, format!("{v} is below the minimum {min}"));
        }
        v
    }

    fn float(&mut self, key: &str, default: f64, lo: f64, hi: f64, lo_open: bool, hi_open: bool) -> f64 {
        let v: f64 = self.parse(key, default, "a number");
        let below = if lo_open { v <= lo } else { v < lo };
        let above = if hi_open { v >= hi } else { v > hi };
        if !v.is_finite() || below || above {
            let l = if lo_open { "(" } else { "[" };
            let h = if hi_open { ")" } else { "]" };
            let hi_s = if hi.is_infinite() { "inf".to_string() } else { hi.to_string() };
            self.range(key, format!("{v} outside {l}{lo}, {hi_s}{h}"));
        }
        v
    }

    fn string(&self, key: &str) -> Option<String> {
        self.raw.get(key).map(|(v, _)| v.to_string()).filter(|v| !v.is_empty())
    }

    fn range(&mut self, key: &str, msg: String) {
        let line = self.raw.get(key).map(|(_, l)| l).unwrap_or(0);
        self.errs.push(format!("{}: {msg}", where_(key, line)));
    }

    fn typed<T: FromStr<Err = Error>>(&mut self, key: &str, default: T) -> T {
        match self.raw.get(key) {
            None => default,
            Some((v, line)) => v.parse().unwrap_or_else(|e: Error| {
                self.errs.push(format!("{}: {}", where_(key, line), strip_kind(&e)));
                default
            }),
        }
    }

    fn existing_file(&mut self, key: &str) -> Option<PathBuf> {
        let p = PathBuf::from(self.string(key)?);
        if !p.is_file() {
            self.range(key, format!("file `{}` does not exist", p.display()));
        }
        Some(p)
    }

    fn required_file(&mut self, key: &str, source: &str) -> PathBuf {
        self.existing_file(key).unwrap_or_else(|| {
            self.errs.push(format!("{key} is required when data.source = {source}"));
            PathBuf::new()
        })
    }
}

fn strip_kind(e: &Error) -> String {
    match e {
        Error::Validation(m) => m.clone(),
        Error::Config(v) => v.join("; "),
        other => other.to_string(),
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_raw(&RawConfig::parse(&text)?)
    }

    pub fn parse(text: &str) -> Result<Self> {
        Self::from_raw(&RawConfig::parse(text)?)
    }

    pub fn from_raw(raw: &RawConfig) -> Result<Self> {
        let mut r = Reader {
            raw,
            errs: Vec::new(),
        };
        let seed: u64 = r.parse("seed", 0, "an unsigned integer");
        let mode: Mode = r.typed("mode", Mode::Crema);
        let output_dir = PathBuf::from(r.string("output.dir").unwrap_or_else(|| "out".into()));
        let checkpoint: bool = r.parse("output.checkpoint", false, "true or false");

        let source = r.string("data.source").unwrap_or_else(|| "blobs".into());
        let test_fraction = r.float("data.test_fraction", 0.2, 0.0, 1.0, true, true);
        let data = match source.as_str() {
            "blobs" => DataSource::Blobs {
                spec: BlobSpec {
                    num_classes: r.uint("blobs.classes", 4, 2),
                    dims: r.uint("blobs.dims", 16, 1),
                    samples_per_class: r.uint("blobs.per_class", 500, 1),
                    class_center_scale: r.float("blobs.center_scale", 4.0, 0.0, f64::INFINITY, false, true),
                    cluster_std: r.float("blobs.std", 1.0, 0.0, f64::INFINITY, true, true),
                    seed: crate::rng::substream_seed(seed, crate::rng::Stream::Data),
                },
                test_fraction,
            },
            "idx" => DataSource::Idx {
                train_images: r.required_file("data.train_images", "idx"),
                train_labels: r.required_file("data.train_labels", "idx"),
                test_images: r.required_file("data.test_images", "idx"),
                test_labels: r.required_file("data.test_labels", "idx"),
                train_limit: r.uint("data.train_limit", 0, 0),
                test_limit: r.uint("data.test_limit", 0, 0),
            },
            "csv" => DataSource::Csv {
                path: r.required_file("data.csv", "csv"),
                test_path: r.existing_file("data.test_csv"),
                test_fraction,
            },
            other => {
                r.range("data.source", format!("`{other}` is not one of blobs, idx, csv"));
                DataSource::Blobs {
                    spec: BlobSpec {
                        num_classes: 2,
                        dims: 1,
                        samples_per_class: 1,
                        class_center_scale: 0.0,
                        cluster_std: 1.0,
                        seed,
                    },
                    test_fraction,
                }
            }
        };

        let kind: NoiseKind = r.typed("noise.kind", NoiseKind::Symmetric);
        let tau = r.float("noise.tau", 0.0, 0.0, 1.0, false, true);
        let map = match r.string("noise.map") {
            None => None,
            Some(m) => match parse_class_map(&m) {
                Ok(m) => Some(m),
                Err(e) => {
                    r.range("noise.map", strip_kind(&e));
                    None
                }
            },
        };
        if kind == NoiseKind::Asymmetric && map.is_none() && r.string("noise.map").is_none() {
            r.errs.push("noise.kind = asymmetric requires noise.map".into());
        }
        let noise_seed: u64 = r.parse(
            "noise.seed",
            crate::rng::substream_seed(seed, crate::rng::Stream::Noise),
            "an unsigned integer",
        );

        let defaults = TrainConfig::default();
        let hidden = match r.string("model.hidden") {
            None if r.raw.get("model.hidden").is_some() => Vec::new(),
            None => defaults.hidden.clone(),
            Some(h) => {
                let parsed: std::result::Result<Vec<usize>, _> = h.split(',').map(|w| w.trim().parse::<usize>()).collect();
                match parsed {
                    Ok(v) if !v.contains(&0) => v,
                    _ => {
                        r.range("model.hidden", format!("`{h}` is not a list of positive widths"));
                        defaults.hidden.clone()
                    }
                }
            }
        };
        let warmup = r.uint("schedule.warmup", 5, 0);
        let epochs = r.uint("schedule.epochs", 30, 1);
        if epochs <= warmup {
            r.range("schedule.epochs", format!("{epochs} must exceed schedule.warmup = {warmup}"));
        }
        let sigma_default = if tau > 0.0 && tau < 1.0 { 1.0 - tau } else { 1.0 };
        let train = TrainConfig {
            mode,
            hidden,
            slope: r.float("model.slope", defaults.slope, 0.0, 1.0, false, true),
            lr: r.float("model.lr", defaults.lr, 0.0, f64::INFINITY, true, true),
            beta1: r.float("model.beta1", defaults.beta1, 0.0, 1.0, false, true),
            beta2: r.float("model.beta2", defaults.beta2, 0.0, 1.0, false, true),
            adam_eps: r.float("model.eps", defaults.adam_eps, 0.0, f64::INFINITY, true, true),
            batch_size: r.uint("model.batch_size", defaults.batch_size, 1),
            schedule: Schedule {
                total_epochs: epochs,
                warmup_epochs: warmup,
                ramp_epochs: r.uint("schedule.ramp", 10, 1),
                sigma: r.float("schedule.sigma", sigma_default, 0.0, 1.0, true, false),
            },
            reg: RegConfig {
                prior: None,
                alpha_prior: r.float("reg.alpha_prior", 0.1, 0.0, f64::INFINITY, false, true),
                alpha_entropy: r.float("reg.alpha_entropy", 0.1, 0.0, f64::INFINITY, false, true),
            },
            estimator: r.typed("credibility.estimator", MixtureKind::Gaussian),
            window: r.uint("credibility.window", defaults.window, 1),
            mixture_tol: r.float("mixture.tol", defaults.mixture_tol, 0.0, f64::INFINITY, true, true),
            mixture_max_iter: r.uint("mixture.max_iter", defaults.mixture_max_iter, 1),
            label_alpha: r.float("labels.alpha", defaults.label_alpha, 0.0, f64::INFINITY, false, true),
            label_lambda: r.float("labels.lambda", defaults.label_lambda, 0.0, f64::INFINITY, false, true),
            seed,
        };

        if r.errs.is_empty() {
            Ok(Self {
                seed,
                output_dir,
                checkpoint,
                data,
                noise: NoiseSpec {
                    kind,
                    tau,
                    map,
                    seed: noise_seed,
                },
                train,
            })
        } else {
            Err(Error::Config(r.errs))
        }
    }
}
