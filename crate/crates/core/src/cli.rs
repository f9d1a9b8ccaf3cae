//! Subcommands behind the `crema` binary: train, audit, inject, report.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use crate::config::{keys_help, DataSource, RawConfig, RunConfig};
use crate::credibility::CredibilityBank;
use crate::data::{
    empirical_transition, gen_blobs, inject_noise, load_csv, load_idx, make_transition, parse_class_map, split_ids,
    write_csv, BlobSpec, Dataset, NoiseKind, NoisyDataset, TransitionMatrix,
};
use crate::error::{validation, Error, Result};
use crate::mixture::{self, MixtureKind};
use crate::model::Checkpoint;
use crate::rng::{substream_seed, Stream};
use crate::trainer::{self, RunReport, METRICS_HEADER};

pub const METRICS_FILE: &str = "metrics.csv";
pub const LABELS_FILE: &str = "labels.csv";
pub const SUMMARY_FILE: &str = "summary.txt";

#[derive(Debug, Parser)]
#[command(name = "crema", version, about = "Co-training with sample credibility for noisy labels")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a network pair from a config file.
    Train {
        /// Config file of `key = value` lines.
        #[arg(long, short)]
        config: Option<PathBuf>,
        /// Override a config key, e.g. `--set noise.tau=0.4`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Fit credibility weights to a recorded per-epoch loss log.
    Audit {
        /// CSV with columns sample_id,epoch,loss_net1,loss_net2.
        #[arg(long)]
        log: PathBuf,
        #[arg(long, default_value = "gmm")]
        estimator: MixtureKind,
        #[arg(long, default_value_t = crate::credibility::DEFAULT_WINDOW)]
        window: usize,
        /// Output directory for posteriors.csv and credibility.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Corrupt a dataset's labels and write it as CSV.
    Inject {
        #[command(flatten)]
        source: InjectSource,
        #[arg(long, default_value = "symmetric")]
        kind: NoiseKind,
        #[arg(long, default_value_t = 0.0)]
        tau: f64,
        /// Class map `src:dst,...` or `cifar10`; needed for asymmetric noise.
        #[arg(long)]
        map: Option<String>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Render a metrics CSV as a text table, optionally an SVG chart.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

/// Dataset flags for `inject`.
#[derive(Debug, Clone, clap::Args)]
pub struct InjectSource {
    /// blobs, csv or idx.
    #[arg(long, default_value = "blobs")]
    pub source: String,
    #[arg(long)]
    pub csv: Option<PathBuf>,
    #[arg(long)]
    pub images: Option<PathBuf>,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 16)]
    pub dims: usize,
    #[arg(long, default_value_t = 250)]
    pub per_class: usize,
    #[arg(long, default_value_t = 4.0)]
    pub center_scale: f64,
    #[arg(long, default_value_t = 1.0)]
    pub std: f64,
}

/// Parses arguments, runs the command, and maps failures to a one-line
/// `crema: error: <kind>: <message>` on stderr. Returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cmd = Cli::command()
        .after_help(keys_help())
        .mut_subcommand("train", |c| c.after_help(keys_help()));
    let matches = match cmd.try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let code = e.exit_code();
            let _ = e.print();
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return 2;
        }
    };
    match dispatch(cli.command) {
        Ok(msg) => {
            if !msg.is_empty() {
                print!("{msg}");
            }
            0
        }
        Err(e) => {
            eprintln!("{}", error_line(&e));
            1
        }
    }
}

/// The single-line error form printed by the binary.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace('\n', " ");
    format!("crema: error: {}: {msg}", e.kind())
}

fn dispatch(cmd: Command) -> Result<String> {
    match cmd {
        Command::Train { config, overrides } => {
            let cfg = load_config(config.as_deref(), &overrides)?;
            let report = cmd_train(&cfg)?;
            Ok(report.summary())
        }
        Command::Audit {
            log,
            estimator,
            window,
            out,
        } => {
            let a = cmd_audit(&log, estimator, window, &out)?;
            Ok(format!("audited {} samples over {} epochs\n", a.sample_ids.len(), a.epochs.len()))
        }
        Command::Inject {
            source,
            kind,
            tau,
            map,
            seed,
            out,
        } => {
            let flipped = cmd_inject(&source, kind, tau, map.as_deref(), seed, &out)?;
            Ok(format!("wrote {} ({flipped} labels changed)\n", out.display()))
        }
        Command::Report { metrics, svg } => cmd_report(&metrics, svg.as_deref()),
    }
}

/// Reads a config file (if any) and applies `key=value` overrides.
pub fn load_config(path: Option<&Path>, overrides: &[String]) -> Result<RunConfig> {
    let text = match path {
        Some(p) => fs::read_to_string(p).map_err(|e| Error::Config(vec![format!("cannot read {}: {e}", p.display())]))?,
        None => String::new(),
    };
    let mut raw = RawConfig::parse(&text)?;
    let mut errs = Vec::new();
    for o in overrides {
        match o.split_once('=') {
            Some((k, v)) => {
                if let Err(Error::Config(e)) = raw.set(k.trim(), v.trim()) {
                    errs.extend(e);
                }
            }
            None => errs.push(format!("override `{o}` is not KEY=VALUE")),
        }
    }
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    RunConfig::from_raw(&raw)
}

fn with_classes(d: Dataset, c: usize) -> Result<Dataset> {
    if d.num_classes() == c {
        return Ok(d);
    }
    Dataset::new(d.features().clone(), d.labels().to_vec(), c)
}

/// Transition matrix measured from label pairs; classes never seen keep an
/// identity row.
fn measured_transition(truth: &[usize], observed: &[usize], c: usize) -> Result<TransitionMatrix> {
    let mut t = empirical_transition(truth, observed, c);
    for i in 0..c {
        if t.row(i).sum() == 0.0 {
            t[[i, i]] = 1.0;
        }
    }
    TransitionMatrix::new(t)
}

/// Builds the (noisy train, clean test) pair a config describes.
pub fn load_run_data(cfg: &RunConfig) -> Result<(NoisyDataset, Dataset)> {
    let split_seed = substream_seed(cfg.seed, Stream::Split);
    let noisy = |train: Dataset| -> Result<NoisyDataset> {
        let t = make_transition(cfg.noise.kind, cfg.noise.tau, train.num_classes(), cfg.noise.map.as_ref())?;
        inject_noise(&train, &t, cfg.noise.seed)
    };
    match &cfg.data {
        DataSource::Blobs { spec, test_fraction } => {
            let all = gen_blobs(spec)?;
            let (train, test) = all.split(*test_fraction, split_seed)?;
            Ok((noisy(train)?, test))
        }
        DataSource::Idx {
            train_images,
            train_labels,
            test_images,
            test_labels,
            train_limit,
            test_limit,
        } => {
            let train = load_idx(train_images, train_labels)?.take(*train_limit)?;
            let test = load_idx(test_images, test_labels)?.take(*test_limit)?;
            if train.dims() != test.dims() {
                return Err(Error::Consistency(format!(
                    "train images have {} pixels, test images {}",
                    train.dims(),
                    test.dims()
                )));
            }
            let c = train.num_classes().max(test.num_classes());
            Ok((noisy(with_classes(train, c)?)?, with_classes(test, c)?))
        }
        DataSource::Csv {
            path,
            test_path,
            test_fraction,
        } => {
            let data = load_csv(path)?;
            let (train_ids, test_ids) = match test_path {
                Some(_) => ((0..data.dataset.len()).collect(), Vec::new()),
                None => split_ids(data.dataset.len(), *test_fraction, split_seed)?,
            };
            let c_test;
            let test = match test_path {
                Some(p) => {
                    let t = load_csv(p)?;
                    let labels = t.true_labels.unwrap_or_else(|| t.dataset.labels().to_vec());
                    c_test = t.dataset.num_classes();
                    Dataset::new(t.dataset.features().clone(), labels, c_test)?
                }
                None => {
                    c_test = data.dataset.num_classes();
                    let labels = data.true_labels.as_deref().unwrap_or(data.dataset.labels());
                    let d = Dataset::new(data.dataset.features().clone(), labels.to_vec(), c_test)?;
                    d.subset(&test_ids)?
                }
            };
            let c = data.dataset.num_classes().max(c_test);
            let test = with_classes(test, c)?;
            if test.dims() != data.dataset.dims() {
                return Err(Error::Consistency("train and test CSVs have different feature columns".into()));
            }
            match &data.true_labels {
                Some(truth) => {
                    if cfg.noise.tau > 0.0 {
                        return Err(Error::Config(vec![format!(
                            "{} already carries a true_label column; set noise.tau = 0",
                            path.display()
                        )]));
                    }
                    let base = Dataset::new(data.dataset.features().clone(), truth.clone(), c)?.subset(&train_ids)?;
                    let observed: Vec<usize> = train_ids.iter().map(|&i| data.dataset.labels()[i]).collect();
                    let t = measured_transition(base.labels(), &observed, c)?;
                    Ok((NoisyDataset::from_parts(base, observed, t)?, test))
                }
                None => {
                    let train = with_classes(data.dataset.subset(&train_ids)?, c)?;
                    Ok((noisy(train)?, test))
                }
            }
        }
    }
}

/// Runs training and writes metrics, label export (when the mode learns
/// labels), summary, and optional checkpoints into the output directory.
/// Nothing is written when the data cannot be prepared.
pub fn cmd_train(cfg: &RunConfig) -> Result<RunReport> {
    cfg.train.validate()?;
    let (train, test) = load_run_data(cfg)?;
    fs::create_dir_all(&cfg.output_dir)?;
    let dir = &cfg.output_dir;
    let mut metrics = BufWriter::new(File::create(dir.join(METRICS_FILE))?);
    writeln!(metrics, "{METRICS_HEADER}")?;
    let result = trainer::run(&cfg.train, &train, &test, |m| {
        writeln!(metrics, "{}", m.csv_row())?;
        metrics.flush()?;
        Ok(())
    });
    metrics.flush()?;
    let out = result?;

    if let Some(store) = &out.state.labels {
        let mut w = BufWriter::new(File::create(dir.join(LABELS_FILE))?);
        store.export_csv(train.observed_labels(), &mut w)?;
        w.flush()?;
    }
    if cfg.checkpoint {
        for (k, (net, adam)) in out.state.nets.iter().zip(&out.state.adam).enumerate() {
            Checkpoint {
                params: net.clone(),
                adam: Some(adam.clone()),
            }
            .save(&dir.join(format!("net{}.ckpt", k + 1)))?;
        }
    }
    let mut summary = out.report.summary();
    summary.push_str(&format!(
        "train samples: {}  test samples: {}  observed noise: {:.4}\n",
        train.len(),
        test.len(),
        train.noise_fraction()
    ));
    fs::write(dir.join(SUMMARY_FILE), summary)?;
    Ok(out.report)
}

/// Result of auditing a loss log.
#[derive(Debug, Clone, PartialEq)]
pub struct Audit {
    pub sample_ids: Vec<u64>,
    pub epochs: Vec<u64>,
    /// `posteriors[e][k][i]`: epoch `e`, network `k`, sample `i`.
    pub posteriors: Vec<[Vec<f64>; 2]>,
    /// Final credibility weight per network and sample.
    pub weights: [Vec<f64>; 2],
}

/// Loss log rows grouped by epoch, then by sample id.
type LossLog = BTreeMap<u64, BTreeMap<u64, [f64; 2]>>;

fn read_loss_log(path: &Path) -> Result<LossLog> {
    let fmt = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| fmt(format!("missing column `{name}`")))
    };
    let (c_id, c_ep, c_1, c_2) = (col("sample_id")?, col("epoch")?, col("loss_net1")?, col("loss_net2")?);
    let mut log = LossLog::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let int = |c: usize| rec[c].parse::<u64>().map_err(|_| fmt(format!("line {row}: `{}` is not an integer", &rec[c])));
        let num = |c: usize| match rec[c].parse::<f64>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(fmt(format!("line {row}: `{}` is not a finite loss", &rec[c]))),
        };
        let (id, ep) = (int(c_id)?, int(c_ep)?);
        if log.entry(ep).or_default().insert(id, [num(c_1)?, num(c_2)?]).is_some() {
            return Err(fmt(format!("line {row}: sample {id} repeated in epoch {ep}")));
        }
    }
    if log.is_empty() {
        return Err(validation(format!("loss log {} is empty", path.display())));
    }
    Ok(log)
}

/// Fits per-epoch mixtures to the logged losses of each network and pushes
/// the posteriors through credibility banks, oldest epoch first.
pub fn audit_log(log: &LossLog, estimator: MixtureKind, window: usize) -> Result<Audit> {
    let all_ids: BTreeSet<u64> = log.values().flat_map(|m| m.keys().copied()).collect();
    let mut ragged = Vec::new();
    for (ep, rows) in log {
        let missing: Vec<String> = all_ids.iter().filter(|id| !rows.contains_key(id)).map(|id| id.to_string()).collect();
        if !missing.is_empty() {
            ragged.push(format!("epoch {ep} lacks samples {}", missing.join(" ")));
        }
    }
    if !ragged.is_empty() {
        return Err(Error::Consistency(ragged.join("; ")));
    }
    let n = all_ids.len();
    let mut banks = [CredibilityBank::new(n, window)?, CredibilityBank::new(n, window)?];
    let mut posteriors = Vec::with_capacity(log.len());
    for rows in log.values() {
        let mut per_net: [Vec<f64>; 2] = [Vec::new(), Vec::new()];
        for k in 0..2 {
            let losses: Vec<f64> = rows.values().map(|l| l[k]).collect();
            let (post, _, _) =
                mixture::clean_posteriors(estimator, &losses, mixture::DEFAULT_TOL, mixture::DEFAULT_MAX_ITER)?;
            banks[k].push_epoch(&post)?;
            per_net[k] = post;
        }
        posteriors.push(per_net);
    }
    Ok(Audit {
        sample_ids: all_ids.into_iter().collect(),
        epochs: log.keys().copied().collect(),
        posteriors,
        weights: [banks[0].weights()?, banks[1].weights()?],
    })
}

/// Audits a loss log and writes `posteriors.csv` and `credibility.csv` to `out`.
pub fn cmd_audit(log_path: &Path, estimator: MixtureKind, window: usize, out: &Path) -> Result<Audit> {
    let log = read_loss_log(log_path)?;
    let audit = audit_log(&log, estimator, window)?;
    fs::create_dir_all(out)?;
    let mut w = BufWriter::new(File::create(out.join("posteriors.csv"))?);
    writeln!(w, "sample_id,epoch,posterior_net1,posterior_net2")?;
    for (e, ep) in audit.epochs.iter().enumerate() {
        for (i, id) in audit.sample_ids.iter().enumerate() {
            let [p1, p2] = &audit.posteriors[e];
            writeln!(w, "{id},{ep},{:.9},{:.9}", p1[i], p2[i])?;
        }
    }
    w.flush()?;
    let mut w = BufWriter::new(File::create(out.join("credibility.csv"))?);
    writeln!(w, "sample_id,weight_net1,weight_net2")?;
    for (i, id) in audit.sample_ids.iter().enumerate() {
        writeln!(w, "{id},{:.9},{:.9}", audit.weights[0][i], audit.weights[1][i])?;
    }
    w.flush()?;
    Ok(audit)
}

fn inject_base(src: &InjectSource) -> Result<Dataset> {
    match src.source.as_str() {
        "blobs" => gen_blobs(&BlobSpec {
            num_classes: src.classes,
            dims: src.dims,
            samples_per_class: src.per_class,
            class_center_scale: src.center_scale,
            cluster_std: src.std,
            seed: 0,
        }),
        "csv" => {
            let p = src.csv.as_ref().ok_or_else(|| validation("--source csv needs --csv"))?;
            let d = load_csv(p)?;
            match d.true_labels {
                Some(t) => Dataset::new(d.dataset.features().clone(), t, d.dataset.num_classes()),
                None => Ok(d.dataset),
            }
        }
        "idx" => match (&src.images, &src.labels) {
            (Some(i), Some(l)) => load_idx(i, l),
            _ => Err(validation("--source idx needs --images and --labels")),
        },
        other => Err(validation(format!("unknown source `{other}` (expected blobs, csv or idx)"))),
    }
}

/// Writes the dataset with observed and true labels to `out`. Returns the
/// number of labels the noise changed.
pub fn cmd_inject(
    src: &InjectSource,
    kind: NoiseKind,
    tau: f64,
    map: Option<&str>,
    seed: u64,
    out: &Path,
) -> Result<usize> {
    let base = inject_base(src)?;
    let map = map.map(parse_class_map).transpose()?;
    let t = make_transition(kind, tau, base.num_classes(), map.as_ref())?;
    let noisy = inject_noise(&base, &t, seed)?;
    write_csv(out, noisy.features(), noisy.observed_labels(), Some(noisy.true_labels()))?;
    Ok(noisy.clean_mask().iter().filter(|c| !**c).count())
}

/// A metrics CSV read back for reporting.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsTable {
    pub header: Vec<String>,
    pub rows: Vec<Vec<String>>,
}

impl MetricsTable {
    pub fn read(path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
        let header: Vec<String> = rdr.headers()?.iter().map(String::from).collect();
        for needed in ["epoch", "acc_mean"] {
            if !header.iter().any(|h| h == needed) {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    msg: format!("missing column `{needed}`"),
                });
            }
        }
        let rows = rdr
            .records()
            .map(|r| r.map(|r| r.iter().map(String::from).collect()))
            .collect::<std::result::Result<Vec<Vec<String>>, _>>()?;
        Ok(Self { header, rows })
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let c = self.header.iter().position(|h| h == name)?;
        self.rows.iter().map(|r| r.get(c).and_then(|v| v.parse().ok())).collect()
    }

    /// Fixed-width text table.
    pub fn render(&self) -> String {
        let widths: Vec<usize> = (0..self.header.len())
            .map(|c| {
                self.rows
                    .iter()
                    .filter_map(|r| r.get(c))
                    .chain(std::iter::once(&self.header[c]))
                    .map(String::len)
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: &[String]| -> String {
            let parts: Vec<String> = cells.iter().zip(&widths).map(|(c, w)| format!("{c:>w$}")).collect();
            parts.join("  ").trim_end().to_string() + "\n"
        };
        let mut s = line(&self.header);
        let rule: Vec<String> = widths.iter().map(|w| "-".repeat(*w)).collect();
        s.push_str(&line(&rule));
        for r in &self.rows {
            s.push_str(&line(r));
        }
        s
    }
}

const SVG_SERIES: &[(&str, &str)] = &[
    ("acc_mean", "#1f77b4"),
    ("mean_w_clean", "#2ca02c"),
    ("mean_w_noisy", "#d62728"),
    ("clean_precision", "#9467bd"),
];

/// Line chart of accuracy and weight columns against epoch, all on a [0, 1] axis.
pub fn render_svg(table: &MetricsTable) -> Result<String> {
    let epochs = table.column("epoch").ok_or_else(|| validation("epoch column is not numeric"))?;
    let (w, h, pad) = (640.0, 360.0, 40.0);
    let (lo, hi) = epochs
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &e| (a.min(e), b.max(e)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let x = |e: f64| pad + (e - lo) / span * (w - 2.0 * pad);
    let y = |v: f64| h - pad - v.clamp(0.0, 1.0) * (h - 2.0 * pad);
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <line x1=\"{pad}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n\
         <line x1=\"{pad}\" y1=\"{pad}\" x2=\"{pad}\" y2=\"{b}\" stroke=\"black\"/>\n",
        b = h - pad,
        r = w - pad
    );
    for tick in [0.0, 0.5, 1.0] {
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{:.1}\" font-size=\"10\" text-anchor=\"end\">{tick:.1}</text>\n",
            pad - 4.0,
            y(tick) + 3.0
        ));
    }
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"10\" text-anchor=\"middle\">epoch {lo}..{hi}</text>\n",
        w / 2.0,
        h - 10.0
    ));
    let mut legend_y = pad;
    for (name, color) in SVG_SERIES {
        let Some(vals) = table.column(name) else { continue };
        let pts: Vec<String> = epochs.iter().zip(&vals).map(|(&e, &v)| format!("{:.1},{:.1}", x(e), y(v))).collect();
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>\n",
            pts.join(" ")
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{legend_y}\" font-size=\"10\" fill=\"{color}\">{name}</text>\n",
            w - pad - 90.0
        ));
        legend_y += 12.0;
    }
    s.push_str("</svg>\n");
    Ok(s)
}

/// Returns the text table; writes the SVG chart when `svg` is given.
pub fn cmd_report(metrics: &Path, svg: Option<&Path>) -> Result<String> {
    let table = MetricsTable::read(metrics)?;
    if table.rows.is_empty() {
        return Err(validation(format!("{} has no epochs", metrics.display())));
    }
    if let Some(p) = svg {
        fs::write(p, render_svg(&table)?)?;
    }
    let mut out = table.render();
    if let Some(acc) = table.column("acc_mean") {
        let tail = &acc[acc.len().saturating_sub(10)..];
        out.push_str(&format!(
            "last-10-epoch mean test accuracy: {:.4}\n",
            tail.iter().sum::<f64>() / tail.len() as f64
        ));
    }
    Ok(out)
}
