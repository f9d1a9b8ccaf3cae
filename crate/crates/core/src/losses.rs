//! Divergences between probability vectors and the losses built from them.
//!
//! All logarithms are natural. Denominators inside logarithms are clamped
//! below by [`EPS`], and `0 · log 0` is taken as 0.

use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, Zip};

use crate::error::{validation, Error, Result};

pub const EPS: f64 = 1e-12;

/// A length-C vector of non-negative entries summing to 1 (within 1e-9).
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVec(Vec<f64>);

impl ProbVec {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        check_prob(&p)?;
        Ok(Self(p))
    }

    pub fn uniform(c: usize) -> Self {
        Self(vec![1.0 / c as f64; c])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

fn check_prob(p: &[f64]) -> Result<()> {
    if p.is_empty() {
        return Err(validation("probability vector is empty"));
    }
    if p.iter().any(|&v| !(v >= 0.0 && v.is_finite())) {
        return Err(validation("probability vector has negative or non-finite entries"));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > 1e-9 {
        return Err(validation(format!("probability vector sums to {s}")));
    }
    Ok(())
}

fn softmax_into(z: ArrayView1<f64>, mut out: ArrayViewMut1<f64>) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        sum += *o;
    }
    out.mapv_inplace(|v| v / sum);
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Result<ProbVec> {
    if logits.is_empty() {
        return Err(validation("softmax of an empty vector"));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("softmax input is not finite".into()));
    }
    let mut out = vec![0.0; logits.len()];
    softmax_into(ArrayView1::from(logits), ArrayViewMut1::from(out.as_mut_slice()));
    Ok(ProbVec(out))
}

/// Row-wise softmax of a B×C logit matrix.
pub fn softmax_rows(logits: ArrayView2<f64>) -> Result<Array2<f64>> {
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("softmax input is not finite".into()));
    }
    let mut out = Array2::zeros(logits.raw_dim());
    Zip::from(logits.rows())
        .and(out.rows_mut())
        .for_each(|z, o| softmax_into(z, o));
    Ok(out)
}

fn kl_raw(p: ArrayView1<f64>, q: ArrayView1<f64>) -> f64 {
    p.iter()
        .zip(q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &qi)| pi * (pi / qi.max(EPS)).ln())
        .sum()
}

fn js_raw(p: ArrayView1<f64>, q: ArrayView1<f64>) -> f64 {
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    let m = ArrayView1::from(&m);
    0.5 * kl_raw(p, m) + 0.5 * kl_raw(q, m)
}

/// ∂ js(a, b) / ∂ b_j = ½ ln(b_j / m_j); accumulates `scale` times that into `out`.
fn js_grad_second(a: ArrayView1<f64>, b: ArrayView1<f64>, scale: f64, out: &mut [f64]) {
    for ((o, &ai), &bi) in out.iter_mut().zip(a).zip(b) {
        let m = 0.5 * (ai + bi);
        *o += scale * 0.5 * (bi.max(EPS).ln() - m.max(EPS).ln());
    }
}

/// Chains a gradient w.r.t. softmax outputs `p` onto the logits:
/// `dz_j = p_j (g_j − Σ_k p_k g_k)`.
fn softmax_chain(p: ArrayView1<f64>, g: &[f64], mut dz: ArrayViewMut1<f64>) {
    let dot: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((d, &pj), &gj) in dz.iter_mut().zip(p).zip(g) {
        *d += pj * (gj - dot);
    }
}

/// Σ p log(p / q).
pub fn kl_div(p: &ProbVec, q: &ProbVec) -> Result<f64> {
    if p.len() != q.len() {
        return Err(validation("kl_div arguments differ in length"));
    }
    Ok(kl_raw(ArrayView1::from(&p.0), ArrayView1::from(&q.0)))
}

/// Jensen–Shannon divergence, in [0, ln 2].
pub fn js_div(p: &ProbVec, q: &ProbVec) -> Result<f64> {
    if p.len() != q.len() {
        return Err(validation("js_div arguments differ in length"));
    }
    Ok(js_raw(ArrayView1::from(&p.0), ArrayView1::from(&q.0)))
}

/// Prior-matching and entropy regularizers.
#[derive(Debug, Clone, PartialEq)]
pub struct RegConfig {
    /// Target class prior; `None` means uniform.
    pub prior: Option<ProbVec>,
    pub alpha_prior: f64,
    pub alpha_entropy: f64,
}

impl Default for RegConfig {
    fn default() -> Self {
        Self {
            prior: None,
            alpha_prior: 0.1,
            alpha_entropy: 0.1,
        }
    }
}

impl RegConfig {
    pub fn none() -> Self {
        Self {
            prior: None,
            alpha_prior: 0.0,
            alpha_entropy: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha_prior", self.alpha_prior), ("alpha_entropy", self.alpha_entropy)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(validation(format!("{name} = {v} must be finite and >= 0")));
            }
        }
        Ok(())
    }

    fn prior_for(&self, c: usize) -> Result<Vec<f64>> {
        match &self.prior {
            None => Ok(vec![1.0 / c as f64; c]),
            Some(p) if p.len() == c => Ok(p.0.clone()),
            Some(p) => Err(validation(format!("prior has {} classes, logits have {c}", p.len()))),
        }
    }

    fn is_zero(&self) -> bool {
        self.alpha_prior == 0.0 && self.alpha_entropy == 0.0
    }
}

/// A loss value with its gradients w.r.t. both networks' logits.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub d_logits1: Array2<f64>,
    pub d_logits2: Array2<f64>,
}

/// Label-learning loss value and gradients, including w.r.t. the soft labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelLossGrad {
    pub value: f64,
    pub d_logits1: Array2<f64>,
    pub d_logits2: Array2<f64>,
    pub d_soft: Array2<f64>,
}

fn check_pair(l1: &ArrayView2<f64>, l2: &ArrayView2<f64>) -> Result<()> {
    if l1.dim() != l2.dim() {
        return Err(validation(format!(
            "logit batches differ in shape: {:?} vs {:?}",
            l1.dim(),
            l2.dim()
        )));
    }
    Ok(())
}

fn check_targets(targets: &ArrayView2<f64>, shape: (usize, usize)) -> Result<()> {
    if targets.dim() != shape {
        return Err(validation(format!(
            "targets are {:?}, logits are {:?}",
            targets.dim(),
            shape
        )));
    }
    for (i, row) in targets.outer_iter().enumerate() {
        check_prob(row.as_slice().unwrap_or(&row.to_vec()))
            .map_err(|e| validation(format!("target row {i}: {e}")))?;
    }
    Ok(())
}

fn check_weights(w: &[f64], b: usize, name: &str) -> Result<()> {
    if w.len() != b {
        return Err(validation(format!("{name} has {} entries for a batch of {b}", w.len())));
    }
    if let Some((i, v)) = w.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(validation(format!("{name}[{i}] = {v} outside [0, 1]")));
    }
    Ok(())
}

/// Unweighted per-sample value of the three JS terms:
/// `js(t, p1) + js(t, p2) + js(p1, p2)`.
pub fn per_sample_loss(
    logits1: ArrayView2<f64>,
    logits2: ArrayView2<f64>,
    targets: ArrayView2<f64>,
) -> Result<Vec<f64>> {
    check_pair(&logits1, &logits2)?;
    check_targets(&targets, logits1.dim())?;
    let p1 = softmax_rows(logits1)?;
    let p2 = softmax_rows(logits2)?;
    Ok((0..targets.nrows())
        .map(|i| {
            let (t, a, b) = (targets.row(i), p1.row(i), p2.row(i));
            js_raw(t, a) + js_raw(t, b) + js_raw(a, b)
        })
        .collect())
}

/// Per-sample `js(t_i, softmax(logits_i))` for a single network.
pub fn supervised_losses(logits: ArrayView2<f64>, targets: ArrayView2<f64>) -> Result<Vec<f64>> {
    check_targets(&targets, logits.dim())?;
    let p = softmax_rows(logits)?;
    Ok(p.outer_iter()
        .zip(targets.outer_iter())
        .map(|(pi, ti)| js_raw(ti, pi))
        .collect())
}

/// Credibility-weighted co-training objective on a batch.
///
/// Per sample: `w2·js(t, p1) + w1·js(t, p2) + ½(w1 + w2)·js(p1, p2)`; each
/// network's supervision is weighted by its peer's credibility. The batch mean
/// of that is added to the regularizers of [`regularizer`].
pub fn joint_loss(
    logits1: ArrayView2<f64>,
    logits2: ArrayView2<f64>,
    targets: ArrayView2<f64>,
    w1: &[f64],
    w2: &[f64],
    reg: &RegConfig,
) -> Result<LossGrad> {
    check_pair(&logits1, &logits2)?;
    let (b, c) = logits1.dim();
    check_targets(&targets, (b, c))?;
    check_weights(w1, b, "w1")?;
    check_weights(w2, b, "w2")?;
    reg.validate()?;

    let mut out = LossGrad {
        value: 0.0,
        d_logits1: Array2::zeros((b, c)),
        d_logits2: Array2::zeros((b, c)),
    };
    if b == 0 {
        return Ok(out);
    }
    let p1 = softmax_rows(logits1)?;
    let p2 = softmax_rows(logits2)?;
    let inv_b = 1.0 / b as f64;
    let mut g1 = vec![0.0; c];
    let mut g2 = vec![0.0; c];
    let mut total = 0.0;
    for i in 0..b {
        let (t, a, bb) = (targets.row(i), p1.row(i), p2.row(i));
        let wm = 0.5 * (w1[i] + w2[i]);
        total += w2[i] * js_raw(t, a) + w1[i] * js_raw(t, bb) + wm * js_raw(a, bb);
        g1.fill(0.0);
        g2.fill(0.0);
        js_grad_second(t, a, w2[i] * inv_b, &mut g1);
        js_grad_second(bb, a, wm * inv_b, &mut g1);
        js_grad_second(t, bb, w1[i] * inv_b, &mut g2);
        js_grad_second(a, bb, wm * inv_b, &mut g2);
        softmax_chain(a, &g1, out.d_logits1.row_mut(i));
        softmax_chain(bb, &g2, out.d_logits2.row_mut(i));
    }
    out.value = total * inv_b;
    if !reg.is_zero() {
        let r = reg_terms(&p1, &p2, reg)?;
        out.value += r.value;
        out.d_logits1 += &r.d_logits1;
        out.d_logits2 += &r.d_logits2;
    }
    Ok(out)
}

/// `alpha_prior · Σ_j π_j ln(π_j / p̄_j) + alpha_entropy · mean(−Σ p ln p)`,
/// where p̄ and the mean run over the batch and both networks.
pub fn regularizer(logits1: ArrayView2<f64>, logits2: ArrayView2<f64>, reg: &RegConfig) -> Result<LossGrad> {
    check_pair(&logits1, &logits2)?;
    reg.validate()?;
    let p1 = softmax_rows(logits1)?;
    let p2 = softmax_rows(logits2)?;
    reg_terms(&p1, &p2, reg)
}

fn reg_terms(p1: &Array2<f64>, p2: &Array2<f64>, reg: &RegConfig) -> Result<LossGrad> {
    let (b, c) = p1.dim();
    let mut out = LossGrad {
        value: 0.0,
        d_logits1: Array2::zeros((b, c)),
        d_logits2: Array2::zeros((b, c)),
    };
    if b == 0 || reg.is_zero() {
        return Ok(out);
    }
    let prior = reg.prior_for(c)?;
    let inv = 1.0 / (2 * b) as f64;
    let mut mean = vec![0.0; c];
    for p in [p1, p2] {
        for row in p.outer_iter() {
            for (m, &v) in mean.iter_mut().zip(row) {
                *m += v * inv;
            }
        }
    }
    let mut value = 0.0;
    if reg.alpha_prior > 0.0 {
        value += reg.alpha_prior
            * prior
                .iter()
                .zip(&mean)
                .filter(|(&pi, _)| pi > 0.0)
                .map(|(&pi, &m)| pi * (pi / m.max(EPS)).ln())
                .sum::<f64>();
    }
    if reg.alpha_entropy > 0.0 {
        let ent: f64 = p1
            .iter()
            .chain(p2.iter())
            .filter(|&&v| v > 0.0)
            .map(|&v| -v * v.ln())
            .sum();
        value += reg.alpha_entropy * ent * inv;
    }
    out.value = value;

    let prior_grad: Vec<f64> = prior
        .iter()
        .zip(&mean)
        .map(|(&pi, &m)| -reg.alpha_prior * pi / m.max(EPS) * inv)
        .collect();
    let mut g = vec![0.0; c];
    for (p, d) in [(p1, &mut out.d_logits1), (p2, &mut out.d_logits2)] {
        for (row, drow) in p.outer_iter().zip(d.outer_iter_mut()) {
            for ((gj, &pj), &pg) in g.iter_mut().zip(row).zip(&prior_grad) {
                // the constant −1 of d(−p ln p)/dp vanishes through the softmax
                *gj = pg - reg.alpha_entropy * pj.max(EPS).ln() * inv;
            }
            softmax_chain(row, &g, drow);
        }
    }
    Ok(out)
}

/// Label-learning objective: batch mean of `js(p1, ỹ) + js(p2, ỹ)`.
///
/// `d_soft` is the gradient w.r.t. the entries of ỹ itself; chaining it onto
/// label logits is the label store's job.
pub fn label_loss(
    logits1: ArrayView2<f64>,
    logits2: ArrayView2<f64>,
    soft: ArrayView2<f64>,
) -> Result<LabelLossGrad> {
    check_pair(&logits1, &logits2)?;
    let (b, c) = logits1.dim();
    check_targets(&soft, (b, c))?;
    let mut out = LabelLossGrad {
        value: 0.0,
        d_logits1: Array2::zeros((b, c)),
        d_logits2: Array2::zeros((b, c)),
        d_soft: Array2::zeros((b, c)),
    };
    if b == 0 {
        return Ok(out);
    }
    let p1 = softmax_rows(logits1)?;
    let p2 = softmax_rows(logits2)?;
    let inv_b = 1.0 / b as f64;
    let mut g = vec![0.0; c];
    let mut total = 0.0;
    for i in 0..b {
        let (y, a, bb) = (soft.row(i), p1.row(i), p2.row(i));
        total += js_raw(a, y) + js_raw(bb, y);
        for (p, d) in [(a, &mut out.d_logits1), (bb, &mut out.d_logits2)] {
            g.fill(0.0);
            js_grad_second(y, p, inv_b, &mut g);
            softmax_chain(p, &g, d.row_mut(i));
        }
        let mut ds = out.d_soft.row_mut(i);
        let ds = ds.as_slice_mut().expect("standard layout");
        js_grad_second(a, y, inv_b, ds);
        js_grad_second(bb, y, inv_b, ds);
    }
    out.value = total * inv_b;
    Ok(out)
}

/// Mean cross-entropy against hard labels and its logit gradient.
pub fn cross_entropy(logits: ArrayView2<f64>, labels: &[usize]) -> Result<(f64, Array2<f64>)> {
    let (b, c) = logits.dim();
    if labels.len() != b {
        return Err(validation("one label per logit row required"));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return Err(validation(format!("label {y} out of range for {c} classes")));
    }
    let mut d = softmax_rows(logits)?;
    if b == 0 {
        return Ok((0.0, d));
    }
    let inv_b = 1.0 / b as f64;
    let mut total = 0.0;
    for (mut row, &y) in d.outer_iter_mut().zip(labels) {
        total -= row[y].max(EPS).ln();
        row[y] -= 1.0;
        row.mapv_inplace(|v| v * inv_b);
    }
    Ok((total * inv_b, d))
}

/// Row `i` is the one-hot vector of `labels[i]`.
pub fn one_hot(labels: &[usize], c: usize) -> Array2<f64> {
    let mut m = Array2::zeros((labels.len(), c));
    for (i, &y) in labels.iter().enumerate() {
        m[[i, y]] = 1.0;
    }
    m
}
