//! Dense multilayer perceptron with hand-derived gradients and Adam.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;

use crate::error::{validation, Error, Result};
use crate::rng::Rng;

pub const DEFAULT_SLOPE: f64 = 0.01;

/// Weights are stored fan_in × fan_out so a batch forward is `X · W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    sizes: Vec<usize>,
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
    slope: f64,
}

/// Gradients, shaped like [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub weights: Vec<Array2<f64>>,
    pub biases: Vec<Array1<f64>>,
}

impl Grads {
    pub fn zeros_like(p: &MlpParams) -> Self {
        Self {
            weights: p.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            biases: p.biases.iter().map(|b| Array1::zeros(b.raw_dim())).collect(),
        }
    }

    fn blocks(&self) -> impl Iterator<Item = (String, &[f64])> {
        let w = self
            .weights
            .iter()
            .enumerate()
            .map(|(l, w)| (format!("layer {l} weights"), w.as_slice().expect("standard layout")));
        let b = self
            .biases
            .iter()
            .enumerate()
            .map(|(l, b)| (format!("layer {l} biases"), b.as_slice().expect("standard layout")));
        w.chain(b)
    }
}

/// Per-layer values kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    input: Array2<f64>,
    /// Pre-activations `z_l` for every layer; the last one is the logits.
    pre: Vec<Array2<f64>>,
    /// Activations of the hidden layers.
    act: Vec<Array2<f64>>,
}

impl ForwardTrace {
    pub fn logits(&self) -> &Array2<f64> {
        self.pre.last().expect("at least one layer")
    }

    pub fn batch_size(&self) -> usize {
        self.input.nrows()
    }
}

fn leaky(z: f64, slope: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        slope * z
    }
}

/// Derivative at exactly 0 takes the negative-side slope.
fn leaky_grad(z: f64, slope: f64) -> f64 {
    if z > 0.0 {
        1.0
    } else {
        slope
    }
}

fn check_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.len() < 2 {
        return Err(validation("an MLP needs at least input and output sizes"));
    }
    if sizes.contains(&0) {
        return Err(validation(format!("layer sizes {sizes:?} contain a zero")));
    }
    Ok(())
}

impl MlpParams {
    /// Glorot-uniform weights in ±sqrt(6 / (fan_in + fan_out)), zero biases.
    pub fn init(sizes: &[usize], slope: f64, rng: &mut Rng) -> Result<Self> {
        check_sizes(sizes)?;
        let mut weights = Vec::with_capacity(sizes.len() - 1);
        let mut biases = Vec::with_capacity(sizes.len() - 1);
        for pair in sizes.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w = Array2::from_shape_simple_fn((fan_in, fan_out), || rng.random_range(-limit..limit));
            weights.push(w);
            biases.push(Array1::zeros(fan_out));
        }
        Ok(Self {
            sizes: sizes.to_vec(),
            weights,
            biases,
            slope,
        })
    }

    pub fn zeros(sizes: &[usize], slope: f64) -> Result<Self> {
        check_sizes(sizes)?;
        Ok(Self {
            sizes: sizes.to_vec(),
            weights: sizes.windows(2).map(|p| Array2::zeros((p[0], p[1]))).collect(),
            biases: sizes.windows(2).map(|p| Array1::zeros(p[1])).collect(),
            slope,
        })
    }

    /// Builds parameters from explicit layer blocks, checking that shapes chain.
    pub fn from_layers(weights: Vec<Array2<f64>>, biases: Vec<Array1<f64>>, slope: f64) -> Result<Self> {
        if weights.is_empty() || weights.len() != biases.len() {
            return Err(validation("need one bias vector per weight matrix"));
        }
        let mut sizes = vec![weights[0].nrows()];
        for (l, (w, b)) in weights.iter().zip(&biases).enumerate() {
            if w.nrows() != *sizes.last().expect("non-empty") || b.len() != w.ncols() {
                return Err(validation(format!("layer {l} shapes do not chain")));
            }
            sizes.push(w.ncols());
        }
        check_sizes(&sizes)?;
        let p = Self {
            sizes,
            weights,
            biases,
            slope,
        };
        if !p.is_finite() {
            return Err(Error::Numeric("parameters contain non-finite values".into()));
        }
        Ok(p)
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn slope(&self) -> f64 {
        self.slope
    }

    pub fn input_dim(&self) -> usize {
        self.sizes[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.sizes.last().expect("non-empty")
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(|w| w.len()).sum::<usize>() + self.biases.iter().map(|b| b.len()).sum::<usize>()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(|w| w.iter().all(|v| v.is_finite()))
            && self.biases.iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(validation(format!(
                "input has {} columns, network expects {}",
                x.ncols(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x: ArrayView2<f64>) -> Result<ForwardTrace> {
        self.check_input(&x)?;
        let n_layers = self.num_layers();
        let mut pre = Vec::with_capacity(n_layers);
        let mut act: Vec<Array2<f64>> = Vec::with_capacity(n_layers - 1);
        for l in 0..n_layers {
            let input = if l == 0 { x } else { act[l - 1].view() };
            let mut z = input.dot(&self.weights[l]);
            z += &self.biases[l];
            if l + 1 < n_layers {
                act.push(z.mapv(|v| leaky(v, self.slope)));
            }
            pre.push(z);
        }
        let trace = ForwardTrace {
            input: x.to_owned(),
            pre,
            act,
        };
        if trace.logits().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("forward pass produced non-finite logits".into()));
        }
        Ok(trace)
    }

    /// Logits only, without keeping a trace.
    pub fn logits(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let n_layers = self.num_layers();
        let mut h = x.to_owned();
        for l in 0..n_layers {
            let mut z = h.dot(&self.weights[l]);
            z += &self.biases[l];
            if l + 1 < n_layers {
                z.mapv_inplace(|v| leaky(v, self.slope));
            }
            h = z;
        }
        Ok(h)
    }

    /// Exact gradients of a scalar loss whose gradient w.r.t. the logits is `d_logits`.
    pub fn backward(&self, trace: &ForwardTrace, d_logits: ArrayView2<f64>) -> Result<Grads> {
        let n_layers = self.num_layers();
        if trace.pre.len() != n_layers || trace.input.ncols() != self.input_dim() {
            return Err(validation("trace was not produced by this network"));
        }
        if d_logits.dim() != trace.logits().dim() {
            return Err(validation(format!(
                "logit gradient is {:?}, logits are {:?}",
                d_logits.dim(),
                trace.logits().dim()
            )));
        }
        let mut grads = Grads::zeros_like(self);
        let mut dz = d_logits.to_owned();
        for l in (0..n_layers).rev() {
            let input = if l == 0 { trace.input.view() } else { trace.act[l - 1].view() };
            grads.weights[l] = input.t().dot(&dz);
            grads.biases[l] = dz.sum_axis(Axis(0));
            if l > 0 {
                let mut da = dz.dot(&self.weights[l].t());
                let slope = self.slope;
                ndarray::Zip::from(&mut da)
                    .and(&trace.pre[l - 1])
                    .for_each(|d, &z| *d *= leaky_grad(z, slope));
                dz = da;
            }
        }
        Ok(grads)
    }

    /// Argmax of the logits, ties to the smallest class id.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }
}

pub fn argmax_rows(m: &Array2<f64>) -> Vec<usize> {
    m.outer_iter()
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Bias-corrected Adam.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Grads,
    pub v: Grads,
    pub t: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(p: &MlpParams, lr: f64) -> Self {
        Self::with_hyper(p, lr, 0.9, 0.999, 1e-8)
    }

    pub fn with_hyper(p: &MlpParams, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            m: Grads::zeros_like(p),
            v: Grads::zeros_like(p),
            t: 0,
            lr,
            beta1,
            beta2,
            eps,
        }
    }

    /// One update of `p` from `grads`. Everything the update depends on is in
    /// `self`, `p` and `grads`.
    pub fn step(&mut self, p: &mut MlpParams, grads: &Grads) -> Result<()> {
        if grads.weights.len() != p.weights.len()
            || grads
                .weights
                .iter()
                .zip(&p.weights)
                .any(|(g, w)| g.dim() != w.dim())
            || grads.biases.iter().zip(&p.biases).any(|(g, b)| g.dim() != b.dim())
            || self.m.weights.len() != p.weights.len()
        {
            return Err(validation("gradient shapes do not match parameters"));
        }
        for (name, block) in grads.blocks() {
            if block.iter().any(|g| !g.is_finite()) {
                return Err(Error::Numeric(format!("non-finite gradient in {name}")));
            }
        }
        self.t += 1;
        let (b1, b2) = (self.beta1, self.beta2);
        let bc1 = 1.0 - b1.powi(self.t as i32);
        let bc2 = 1.0 - b2.powi(self.t as i32);
        let (lr, eps) = (self.lr, self.eps);
        let update = |param: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *param -= lr * m_hat / (v_hat.sqrt() + eps);
        };
        for l in 0..p.weights.len() {
            ndarray::Zip::from(&mut p.weights[l])
                .and(&grads.weights[l])
                .and(&mut self.m.weights[l])
                .and(&mut self.v.weights[l])
                .for_each(|w, &g, m, v| update(w, g, m, v));
            ndarray::Zip::from(&mut p.biases[l])
                .and(&grads.biases[l])
                .and(&mut self.m.biases[l])
                .and(&mut self.v.biases[l])
                .for_each(|b, &g, m, v| update(b, g, m, v));
        }
        Ok(())
    }
}

const CKPT_MAGIC: &[u8; 8] = b"CRMACKPT";
const CKPT_VERSION: u32 = 1;

/// Network parameters plus optimizer state, as stored on disk.
///
/// Layout (all integers u32 little-endian unless noted, all reals f64 LE):
///
/// ```text
/// magic "CRMACKPT" | version (=1) | slope | layer count L+1 | sizes...
/// for each layer: weights (fan_in*fan_out, row-major) | biases (fan_out)
/// adam flag (u8) ; if 1: t (u64) | lr | beta1 | beta2 | eps | m blocks | v blocks
/// ```
///
/// `m`/`v` blocks follow the same per-layer weights-then-biases order.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: MlpParams,
    pub adam: Option<AdamState>,
}

fn put_f64s<'a>(w: &mut impl Write, xs: impl IntoIterator<Item = &'a f64>) -> std::io::Result<()> {
    for x in xs {
        w.write_all(&x.to_le_bytes())?;
    }
    Ok(())
}

fn put_blocks(w: &mut impl Write, weights: &[Array2<f64>], biases: &[Array1<f64>]) -> std::io::Result<()> {
    for (wl, bl) in weights.iter().zip(biases) {
        put_f64s(w, wl.iter())?;
        put_f64s(w, bl.iter())?;
    }
    Ok(())
}

struct CkptReader<'a, R: Read> {
    r: R,
    path: &'a Path,
}

impl<R: Read> CkptReader<'_, R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.r.read_exact(&mut buf).map_err(|e| Error::Format {
            path: self.path.to_path_buf(),
            msg: format!("truncated checkpoint: {e}"),
        })?;
        Ok(buf)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }

    fn blocks(&mut self, sizes: &[usize]) -> Result<(Vec<Array2<f64>>, Vec<Array1<f64>>)> {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in sizes.windows(2) {
            let w: Vec<f64> = (0..pair[0] * pair[1]).map(|_| self.f64()).collect::<Result<_>>()?;
            let b: Vec<f64> = (0..pair[1]).map(|_| self.f64()).collect::<Result<_>>()?;
            weights.push(Array2::from_shape_vec((pair[0], pair[1]), w).expect("sized"));
            biases.push(Array1::from(b));
        }
        Ok((weights, biases))
    }
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        let p = &self.params;
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        w.write_all(&p.slope.to_le_bytes())?;
        w.write_all(&(p.sizes.len() as u32).to_le_bytes())?;
        for &s in &p.sizes {
            w.write_all(&(s as u32).to_le_bytes())?;
        }
        put_blocks(&mut w, &p.weights, &p.biases)?;
        match &self.adam {
            None => w.write_all(&[0u8])?,
            Some(a) => {
                w.write_all(&[1u8])?;
                w.write_all(&a.t.to_le_bytes())?;
                put_f64s(&mut w, [a.lr, a.beta1, a.beta2, a.eps].iter())?;
                put_blocks(&mut w, &a.m.weights, &a.m.biases)?;
                put_blocks(&mut w, &a.v.weights, &a.v.biases)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut r = CkptReader {
            r: BufReader::new(File::open(path)?),
            path,
        };
        let fmt = |msg: String| Error::Format {
            path: path.to_path_buf(),
            msg,
        };
        if &r.bytes::<8>()? != CKPT_MAGIC {
            return Err(fmt("not a checkpoint (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != CKPT_VERSION {
            return Err(fmt(format!("unsupported checkpoint version {version}")));
        }
        let slope = r.f64()?;
        let n = r.u32()? as usize;
        if !(2..=64).contains(&n) {
            return Err(fmt(format!("implausible layer count {n}")));
        }
        let sizes: Vec<usize> = (0..n).map(|_| r.u32().map(|s| s as usize)).collect::<Result<_>>()?;
        let (weights, biases) = r.blocks(&sizes)?;
        let params = MlpParams::from_layers(weights, biases, slope)?;
        let adam = match r.bytes::<1>()?[0] {
            0 => None,
            1 => {
                let t = u64::from_le_bytes(r.bytes()?);
                let (lr, beta1, beta2, eps) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
                let (mw, mb) = r.blocks(&sizes)?;
                let (vw, vb) = r.blocks(&sizes)?;
                Some(AdamState {
                    m: Grads { weights: mw, biases: mb },
                    v: Grads { weights: vw, biases: vb },
                    t,
                    lr,
                    beta1,
                    beta2,
                    eps,
                })
            }
            other => return Err(fmt(format!("bad optimizer flag {other}"))),
        };
        Ok(Self { params, adam })
    }
}
