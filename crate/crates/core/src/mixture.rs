//! Two-component scalar mixtures (Gaussian or Beta) fitted by EM to
//! per-sample losses. The component with the smaller mean is the clean one.

use statrs::function::gamma::ln_gamma;

use crate::error::{validation, Result};

pub const VAR_FLOOR: f64 = 1e-6;
pub const BETA_PARAM_FLOOR: f64 = 0.1;
pub const DEFAULT_TOL: f64 = 1e-4;
pub const DEFAULT_MAX_ITER: usize = 100;
pub const MIN_SAMPLES: usize = 10;
const NORM_EPS: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MixtureKind {
    Gaussian,
    Beta,
}

impl std::str::FromStr for MixtureKind {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gmm" | "gaussian" => Ok(Self::Gaussian),
            "bmm" | "beta" => Ok(Self::Beta),
            other => Err(validation(format!("unknown estimator `{other}` (expected gmm or bmm)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Component {
    Gaussian { mean: f64, var: f64 },
    Beta { alpha: f64, beta: f64 },
}

impl Component {
    pub fn mean(&self) -> f64 {
        match *self {
            Component::Gaussian { mean, .. } => mean,
            Component::Beta { alpha, beta } => alpha / (alpha + beta),
        }
    }

    pub fn ln_pdf(&self, x: f64) -> f64 {
        match *self {
            Component::Gaussian { mean, var } => {
                -0.5 * (2.0 * std::f64::consts::PI * var).ln() - (x - mean).powi(2) / (2.0 * var)
            }
            Component::Beta { alpha, beta } => {
                let x = x.clamp(1e-12, 1.0 - 1e-12);
                (alpha - 1.0) * x.ln() + (beta - 1.0) * (1.0 - x).ln() - ln_gamma(alpha) - ln_gamma(beta)
                    + ln_gamma(alpha + beta)
            }
        }
    }
}

/// A fitted two-component mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct Mixture2 {
    pub kind: MixtureKind,
    pub components: [Component; 2],
    pub weights: [f64; 2],
    pub clean_component: usize,
    /// Set when the data collapsed to a single point; posteriors are then 0.5.
    pub degenerate: bool,
}

impl Mixture2 {
    fn new(kind: MixtureKind, components: [Component; 2], weights: [f64; 2]) -> Self {
        let clean_component = if components[1].mean() < components[0].mean() { 1 } else { 0 };
        Self {
            kind,
            components,
            weights,
            clean_component,
            degenerate: false,
        }
    }

    pub fn clean(&self) -> &Component {
        &self.components[self.clean_component]
    }

    pub fn noisy(&self) -> &Component {
        &self.components[1 - self.clean_component]
    }

    fn ln_joint(&self, x: f64) -> [f64; 2] {
        [0, 1].map(|k| self.weights[k].max(1e-300).ln() + self.components[k].ln_pdf(x))
    }

    /// Compensated sum, so that successive EM iterates compare reliably near
    /// convergence.
    pub fn log_likelihood(&self, values: &[f64]) -> f64 {
        neumaier_sum(values.iter().map(|&x| log_sum_exp(self.ln_joint(x))))
    }

    pub fn posteriors(&self, values: &[f64]) -> Vec<f64> {
        values.iter().map(|&v| posterior_clean(self, v)).collect()
    }
}

fn neumaier_sum(terms: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for t in terms {
        let s = sum + t;
        comp += if sum.abs() >= t.abs() { (sum - s) + t } else { (t - s) + sum };
        sum = s;
    }
    sum + comp
}

fn log_sum_exp([a, b]: [f64; 2]) -> f64 {
    let m = a.max(b);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Diagnostics of an EM run.
#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    pub iterations: usize,
    pub log_likelihood: f64,
    pub converged: bool,
    pub degenerate: bool,
    /// Log-likelihood at the initial parameters and after every M-step.
    pub history: Vec<f64>,
    /// Whether `history` never dropped by more than the kind's slack
    /// (1e-9 Gaussian, 1e-6 Beta).
    pub monotone: bool,
}

/// P(clean | value) = π_c f_c(v) / Σ_k π_k f_k(v), evaluated in log space.
/// Degenerate mixtures give 0.5.
pub fn posterior_clean(m: &Mixture2, value: f64) -> f64 {
    if m.degenerate {
        return 0.5;
    }
    let lj = m.ln_joint(value);
    let (lc, ln) = (lj[m.clean_component], lj[1 - m.clean_component]);
    if lc == f64::NEG_INFINITY && ln == f64::NEG_INFINITY {
        return 0.5;
    }
    (1.0 / (1.0 + (ln - lc).exp())).clamp(0.0, 1.0)
}

/// Min-max rescale into [1e-4, 1 − 1e-4]; a constant input maps to 0.5.
pub fn normalize_losses(values: &[f64]) -> Vec<f64> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = hi - lo;
    if !(span > 0.0) {
        return vec![0.5; values.len()];
    }
    values
        .iter()
        .map(|&v| ((v - lo) / span).clamp(NORM_EPS, 1.0 - NORM_EPS))
        .collect()
}

fn check_values(values: &[f64]) -> Result<()> {
    if values.len() < MIN_SAMPLES {
        return Err(validation(format!(
            "mixture fit needs at least {MIN_SAMPLES} values, got {}",
            values.len()
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(validation("mixture fit got non-finite values"));
    }
    Ok(())
}

fn is_constant(values: &[f64]) -> bool {
    values.iter().all(|&v| v == values[0])
}

fn weighted_moments(values: &[f64], resp: &[f64]) -> (f64, f64, f64) {
    let sw: f64 = resp.iter().sum();
    if sw <= 0.0 {
        return (0.0, 0.0, 0.0);
    }
    let mean = values.iter().zip(resp).map(|(x, r)| r * x).sum::<f64>() / sw;
    let var = values.iter().zip(resp).map(|(x, r)| r * (x - mean).powi(2)).sum::<f64>() / sw;
    (sw, mean, var)
}

fn beta_from_moments(mean: f64, var: f64) -> Component {
    let mean = mean.clamp(1e-6, 1.0 - 1e-6);
    let var = var.max(VAR_FLOOR);
    let common = (mean * (1.0 - mean) / var - 1.0).max(0.0);
    Component::Beta {
        alpha: (mean * common).max(BETA_PARAM_FLOOR),
        beta: ((1.0 - mean) * common).max(BETA_PARAM_FLOOR),
    }
}

fn component_from_moments(kind: MixtureKind, mean: f64, var: f64) -> Component {
    match kind {
        MixtureKind::Gaussian => Component::Gaussian {
            mean,
            var: var.max(VAR_FLOOR),
        },
        MixtureKind::Beta => beta_from_moments(mean, var),
    }
}

/// Median split: lower half seeds one component, upper half the other.
fn median_split_init(kind: MixtureKind, values: &[f64]) -> Mixture2 {
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let half = sorted.len() / 2;
    let moments = |xs: &[f64]| {
        let ones = vec![1.0; xs.len()];
        let (_, m, v) = weighted_moments(xs, &ones);
        component_from_moments(kind, m, v)
    };
    Mixture2::new(kind, [moments(&sorted[..half]), moments(&sorted[half..])], [0.5, 0.5])
}

fn degenerate(kind: MixtureKind, value: f64) -> Mixture2 {
    let c = component_from_moments(kind, value, VAR_FLOOR);
    let mut m = Mixture2::new(kind, [c, c], [0.5, 0.5]);
    m.degenerate = true;
    m
}

fn em(values: &[f64], init: Mixture2, tol: f64, max_iter: usize) -> (Mixture2, FitReport) {
    let kind = init.kind;
    let slack = match kind {
        MixtureKind::Gaussian => 1e-9,
        MixtureKind::Beta => 1e-6,
    };
    let mut m = init;
    let mut ll = m.log_likelihood(values);
    let mut history = vec![ll];
    let mut converged = false;
    let mut iterations = 0;
    let mut resp = vec![[0.0; 2]; values.len()];
    while iterations < max_iter {
        for (r, &x) in resp.iter_mut().zip(values) {
            let lj = m.ln_joint(x);
            let lse = log_sum_exp(lj);
            *r = if lse == f64::NEG_INFINITY {
                [0.5, 0.5]
            } else {
                lj.map(|l| (l - lse).exp())
            };
        }
        let mut comps = m.components;
        let mut weights = m.weights;
        for k in 0..2 {
            let rk: Vec<f64> = resp.iter().map(|r| r[k]).collect();
            let (sw, mean, var) = weighted_moments(values, &rk);
            // a component that lost all mass keeps its parameters
            if sw > 1e-12 {
                comps[k] = component_from_moments(kind, mean, var);
            }
            weights[k] = sw / values.len() as f64;
        }
        let s = weights[0] + weights[1];
        weights = [weights[0] / s, weights[1] / s];
        let next = Mixture2::new(kind, comps, weights);
        iterations += 1;
        let new_ll = next.log_likelihood(values);
        history.push(new_ll);
        let gain = new_ll - ll;
        // an inexact (moment-matched) M-step can lose likelihood; keep the better fit
        if gain >= 0.0 {
            m = next;
            ll = new_ll;
        }
        if gain < tol {
            converged = true;
            break;
        }
    }
    let monotone = history.windows(2).all(|w| w[1] >= w[0] - slack * w[0].abs().max(1.0));
    let report = FitReport {
        iterations,
        log_likelihood: ll,
        converged,
        degenerate: false,
        history,
        monotone,
    };
    (m, report)
}

fn fit(kind: MixtureKind, values: &[f64], init: Option<Mixture2>, tol: f64, max_iter: usize) -> Result<(Mixture2, FitReport)> {
    check_values(values)?;
    if kind == MixtureKind::Beta {
        if let Some(v) = values.iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
            return Err(validation(format!(
                "beta mixture needs values in (0, 1), got {v}; normalize first"
            )));
        }
    }
    if is_constant(values) {
        let m = degenerate(kind, values[0]);
        let ll = m.log_likelihood(values);
        return Ok((
            m,
            FitReport {
                iterations: 0,
                log_likelihood: ll,
                converged: false,
                degenerate: true,
                history: vec![ll],
                monotone: true,
            },
        ));
    }
    let init = match init {
        Some(m) if m.kind == kind => m,
        Some(_) => return Err(validation("initial mixture is of the wrong kind")),
        None => median_split_init(kind, values),
    };
    Ok(em(values, init, tol, max_iter))
}

/// Gaussian EM from a median-split initialization.
pub fn fit_gmm2(values: &[f64], tol: f64, max_iter: usize) -> Result<(Mixture2, FitReport)> {
    fit(MixtureKind::Gaussian, values, None, tol, max_iter)
}

/// Gaussian EM from given parameters.
pub fn fit_gmm2_from(values: &[f64], init: Mixture2, tol: f64, max_iter: usize) -> Result<(Mixture2, FitReport)> {
    fit(MixtureKind::Gaussian, values, Some(init), tol, max_iter)
}

/// Beta EM with a weighted method-of-moments M-step. Values must lie in (0, 1).
pub fn fit_bmm2(values: &[f64], tol: f64, max_iter: usize) -> Result<(Mixture2, FitReport)> {
    fit(MixtureKind::Beta, values, None, tol, max_iter)
}

pub fn fit_bmm2_from(values: &[f64], init: Mixture2, tol: f64, max_iter: usize) -> Result<(Mixture2, FitReport)> {
    fit(MixtureKind::Beta, values, Some(init), tol, max_iter)
}

/// Per-sample clean posteriors for raw losses. Beta fits see normalized
/// losses; a degenerate fit yields 0.5 everywhere.
pub fn clean_posteriors(
    kind: MixtureKind,
    losses: &[f64],
    tol: f64,
    max_iter: usize,
) -> Result<(Vec<f64>, Mixture2, FitReport)> {
    let values = match kind {
        MixtureKind::Gaussian => losses.to_vec(),
        MixtureKind::Beta => normalize_losses(losses),
    };
    let (m, report) = fit(kind, &values, None, tol, max_iter)?;
    let post = if report.degenerate {
        vec![0.5; values.len()]
    } else {
        m.posteriors(&values)
    };
    Ok((post, m, report))
}
