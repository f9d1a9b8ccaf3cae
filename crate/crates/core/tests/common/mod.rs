#![allow(dead_code)]

use std::path::PathBuf;

use crema_core::config::{DataSource, RawConfig, RunConfig};
use ndarray::Array2;
use rand::Rng as _;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal_matrix(r: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Array2<f64> {
    use rand_distr::{Distribution, StandardNormal};
    Array2::from_shape_fn((rows, cols), |_| {
        let z: f64 = StandardNormal.sample(r);
        scale * z
    })
}

/// Random probability vector with strictly positive entries.
pub fn prob_vec(r: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    let raw: Vec<f64> = (0..c).map(|_| -r.random::<f64>().max(1e-300).ln()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / s).collect()
}

pub fn prob_rows(r: &mut ChaCha8Rng, rows: usize, c: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows, c));
    for i in 0..rows {
        for (j, v) in prob_vec(r, c).into_iter().enumerate() {
            m[[i, j]] = v;
        }
    }
    m
}

/// Central differences of `f` at every entry of `x`.
pub fn fd_grad(x: &Array2<f64>, h: f64, mut f: impl FnMut(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut g = Array2::zeros(x.raw_dim());
    let mut xp = x.clone();
    for idx in ndarray::indices(x.raw_dim()) {
        let orig = xp[idx];
        xp[idx] = orig + h;
        let up = f(&xp);
        xp[idx] = orig - h;
        let down = f(&xp);
        xp[idx] = orig;
        g[idx] = (up - down) / (2.0 * h);
    }
    g
}

/// Largest entry-wise |a − n| / max(|a|, |n|, 1e-8).
pub fn max_rel_err(analytic: &Array2<f64>, numeric: &Array2<f64>) -> f64 {
    assert_eq!(analytic.dim(), numeric.dim());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-8))
        .fold(0.0, f64::max)
}

pub fn workspace_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

/// Directory of gzipped MNIST IDX files; `CREMA_MNIST_DIR` overrides the
/// bundled 10000/2000 subset.
pub fn mnist_dir() -> PathBuf {
    std::env::var_os("CREMA_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace_root().join("data/mnist-subset"))
}

pub fn mnist_config(extra: &str) -> RunConfig {
    let d = mnist_dir();
    let text = format!(
        "seed = 1\n\
         data.source = idx\n\
         data.train_images = {}\n\
         data.train_labels = {}\n\
         data.test_images = {}\n\
         data.test_labels = {}\n\
         data.train_limit = 10000\n\
         data.test_limit = 2000\n\
         noise.kind = symmetric\n\
         noise.tau = 0.5\n\
         model.hidden = 256\n\
         schedule.warmup = 5\n\
         schedule.epochs = 30\n",
        d.join("train-images-idx3-ubyte.gz").display(),
        d.join("train-labels-idx1-ubyte.gz").display(),
        d.join("t10k-images-idx3-ubyte.gz").display(),
        d.join("t10k-labels-idx1-ubyte.gz").display(),
    );
    with_overrides(&text, extra_lines(extra))
}

fn extra_lines(extra: &str) -> Vec<(String, String)> {
    extra
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let (k, v) = l.split_once('=').expect("key = value");
            (k.trim().to_string(), v.trim().to_string())
        })
        .collect()
}

/// Parses `base`, then lets `overrides` replace or add keys.
pub fn with_overrides(base: &str, overrides: Vec<(String, String)>) -> RunConfig {
    let mut raw = RawConfig::parse(base).expect("base config");
    for (k, v) in overrides {
        raw.set(&k, &v).expect("known key");
    }
    RunConfig::from_raw(&raw).expect("valid config")
}

/// Blobs with C=4, D=16 and 2000 training samples (500 held out for test).
pub fn blobs_config(tau: f64, epochs: usize, seed: u64, extra: &str) -> RunConfig {
    let text = format!(
        "seed = {seed}\n\
         data.source = blobs\n\
         blobs.classes = 4\n\
         blobs.dims = 16\n\
         blobs.per_class = 625\n\
         data.test_fraction = 0.2\n\
         noise.tau = {tau}\n\
         schedule.warmup = 5\n\
         schedule.epochs = {epochs}\n"
    );
    let c = with_overrides(&text, extra_lines(extra));
    assert!(matches!(c.data, DataSource::Blobs { .. }));
    c
}
