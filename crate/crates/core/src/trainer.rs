//! The co-training loop: warm-up, per-batch small-loss separation,
//! credibility-weighted updates on the clean subset, selective label learning
//! on the noisy subset, and the per-epoch credibility refresh.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;

use crate::credibility::CredibilityBank;
use crate::data::{Dataset, NoisyDataset, TrainView};
use crate::error::{validation, Error, Result};
use crate::labelstore::LabelStore;
use crate::losses::{self, one_hot, RegConfig};
use crate::mixture::{self, FitReport, MixtureKind};
use crate::model::{argmax_rows, AdamState, MlpParams};
use crate::rng::{stream_rng, Rng, Stream};

/// Training variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Full method: weighting, selective label learning.
    Crema,
    /// Two independent networks trained with plain cross-entropy.
    CeBaseline,
    /// Small-loss co-training with unit weights; the noisy subset is dropped.
    SelectionOnly,
    /// Like `Crema`, but label learning touches every sample of the batch.
    GlobalLabelAblation,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Crema => "crema",
            Mode::CeBaseline => "ce-baseline",
            Mode::SelectionOnly => "selection-only",
            Mode::GlobalLabelAblation => "global-label-ablation",
        }
    }

    fn uses_banks(self) -> bool {
        matches!(self, Mode::Crema | Mode::GlobalLabelAblation)
    }

    fn learns_labels(self) -> bool {
        matches!(self, Mode::Crema | Mode::GlobalLabelAblation)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crema" => Ok(Mode::Crema),
            "ce-baseline" => Ok(Mode::CeBaseline),
            "selection-only" => Ok(Mode::SelectionOnly),
            "global-label-ablation" => Ok(Mode::GlobalLabelAblation),
            other => Err(validation(format!(
                "unknown mode `{other}` (expected crema, ce-baseline, selection-only or global-label-ablation)"
            ))),
        }
    }
}

/// Epoch budget and memory-rate schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    pub ramp_epochs: usize,
    /// Floor of the memory rate, in (0, 1].
    pub sigma: f64,
}

impl Schedule {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if self.warmup_epochs >= self.total_epochs {
            errs.push(format!(
                "warm-up epochs ({}) must be fewer than total epochs ({})",
                self.warmup_epochs, self.total_epochs
            ));
        }
        if self.ramp_epochs < 1 {
            errs.push("ramp epochs must be >= 1".to_string());
        }
        if !(self.sigma > 0.0 && self.sigma <= 1.0) {
            errs.push(format!("sigma = {} outside (0, 1]", self.sigma));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }
}

/// R(t) = max(σ, 1 − (t / T_k)(1 − σ)).
pub fn memory_rate(t: usize, s: &Schedule) -> f64 {
    let r = 1.0 - (t as f64 / s.ramp_epochs as f64) * (1.0 - s.sigma);
    r.max(s.sigma)
}

/// Small-loss split of a batch.
///
/// Returns the positions (into `losses`) of the ⌈R·B⌉ smallest losses and of
/// the rest, both ascending. Equal losses go to the smaller sample id.
pub fn separate_batch(losses: &[f64], ids: &[usize], rate: f64) -> (Vec<usize>, Vec<usize>) {
    debug_assert_eq!(losses.len(), ids.len());
    let b = losses.len();
    // guard against 0.7 * 10 = 7.000000000000001 rounding up to 8
    let keep = ((rate * b as f64) - 1e-9).ceil().clamp(0.0, b as f64) as usize;
    let mut order: Vec<usize> = (0..b).collect();
    order.sort_by(|&i, &j| losses[i].total_cmp(&losses[j]).then(ids[i].cmp(&ids[j])));
    let mut clean = order[..keep].to_vec();
    let mut noisy = order[keep..].to_vec();
    clean.sort_unstable();
    noisy.sort_unstable();
    (clean, noisy)
}

/// Everything a training run needs besides data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub mode: Mode,
    pub hidden: Vec<usize>,
    pub slope: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub schedule: Schedule,
    pub reg: RegConfig,
    pub estimator: MixtureKind,
    pub window: usize,
    pub mixture_tol: f64,
    pub mixture_max_iter: usize,
    pub label_alpha: f64,
    pub label_lambda: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Crema,
            hidden: vec![256],
            slope: crate::model::DEFAULT_SLOPE,
            lr: 0.001,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 64,
            schedule: Schedule {
                total_epochs: 30,
                warmup_epochs: 5,
                ramp_epochs: 10,
                sigma: 1.0,
            },
            reg: RegConfig::default(),
            estimator: MixtureKind::Gaussian,
            window: crate::credibility::DEFAULT_WINDOW,
            mixture_tol: mixture::DEFAULT_TOL,
            mixture_max_iter: mixture::DEFAULT_MAX_ITER,
            label_alpha: crate::labelstore::DEFAULT_ALPHA,
            label_lambda: crate::labelstore::DEFAULT_LAMBDA,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut errs = Vec::new();
        if let Err(Error::Config(e)) = self.schedule.validate() {
            errs.extend(e);
        }
        if self.batch_size == 0 {
            errs.push("batch size must be positive".into());
        }
        if self.hidden.contains(&0) {
            errs.push("hidden widths must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            errs.push(format!("learning rate {} must be > 0", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            errs.push("Adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            errs.push("Adam epsilon must be > 0".into());
        }
        if !(self.slope >= 0.0 && self.slope < 1.0) {
            errs.push(format!("leaky-ReLU slope {} outside [0, 1)", self.slope));
        }
        if let Err(e) = self.reg.validate() {
            errs.push(e.to_string());
        }
        if self.window == 0 {
            errs.push("credibility window must be >= 1".into());
        }
        if !(self.mixture_tol > 0.0) || self.mixture_max_iter == 0 {
            errs.push("mixture tolerance and iteration cap must be positive".into());
        }
        if !(self.label_alpha >= 0.0 && self.label_alpha.is_finite()) {
            errs.push(format!("label alpha {} must be >= 0", self.label_alpha));
        }
        if !(self.label_lambda >= 0.0 && self.label_lambda.is_finite()) {
            errs.push(format!("label lambda {} must be >= 0", self.label_lambda));
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errs))
        }
    }

    pub fn layer_sizes(&self, input: usize, classes: usize) -> Vec<usize> {
        let mut sizes = vec![input];
        sizes.extend(&self.hidden);
        sizes.push(classes);
        sizes
    }
}

/// Mutable training state for the network pair.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub nets: [MlpParams; 2],
    pub adam: [AdamState; 2],
    /// One bank per network; absent in modes that do not weight samples.
    pub banks: Option<[CredibilityBank; 2]>,
    /// Absent in modes without label learning.
    pub labels: Option<LabelStore>,
    pub schedule: Schedule,
    pub reg: RegConfig,
    pub epoch: usize,
    /// Mixture diagnostics from the latest refresh, per network.
    pub last_fits: Option<[FitReport; 2]>,
    shuffle: Rng,
}

/// What one epoch did, without reference to true labels.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochOutcome {
    pub epoch: usize,
    pub warmup: bool,
    pub memory_rate: f64,
    pub train_loss: f64,
    /// `true` for samples that landed in the clean subset this epoch.
    pub selected_clean: Vec<bool>,
    /// Summed sizes of the per-batch clean and noisy subsets.
    pub num_clean: usize,
    pub num_noisy: usize,
}

/// Runs epochs of one mode over a training view.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    data: TrainView<'a>,
    pub state: TrainState,
    /// Credibility weights frozen at the start of the current epoch.
    weights: Option<[Vec<f64>; 2]>,
    eligible: Vec<bool>,
}

struct BatchTotals {
    loss: f64,
    clean_positions: Vec<usize>,
}

const EVAL_CHUNK: usize = 1024;

fn rows(m: &Array2<f64>, pos: &[usize]) -> Array2<f64> {
    m.select(Axis(0), pos)
}

fn scatter_add(dst: &mut Array2<f64>, pos: &[usize], src: &Array2<f64>) {
    for (k, &p) in pos.iter().enumerate() {
        let mut row = dst.row_mut(p);
        row += &src.row(k);
    }
}

/// Logits for every row of `x`, computed in chunks.
pub fn batched_logits(net: &MlpParams, x: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = x.nrows();
    let mut out = Array2::zeros((n, net.num_classes()));
    let mut start = 0;
    while start < n {
        let end = (start + EVAL_CHUNK).min(n);
        let l = net.logits(x.slice(s![start..end, ..]))?;
        out.slice_mut(s![start..end, ..]).assign(&l);
        start = end;
    }
    Ok(out)
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, data: TrainView<'a>) -> Result<Self> {
        cfg.validate()?;
        if data.is_empty() {
            return Err(validation("training set is empty"));
        }
        let sizes = cfg.layer_sizes(data.features.ncols(), data.num_classes);
        let nets = [0u64, 1].map(|k| MlpParams::init(&sizes, cfg.slope, &mut stream_rng(cfg.seed, Stream::Init, k)));
        let [n1, n2] = nets;
        let nets = [n1?, n2?];
        let adam = [0, 1].map(|k| AdamState::with_hyper(&nets[k], cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps));
        let banks = if cfg.mode.uses_banks() {
            Some([
                CredibilityBank::new(data.len(), cfg.window)?,
                CredibilityBank::new(data.len(), cfg.window)?,
            ])
        } else {
            None
        };
        let labels = if cfg.mode.learns_labels() {
            Some(LabelStore::init(data.observed, data.num_classes, cfg.label_alpha, cfg.label_lambda)?)
        } else {
            None
        };
        let state = TrainState {
            nets,
            adam,
            banks,
            labels,
            schedule: cfg.schedule,
            reg: cfg.reg.clone(),
            epoch: 0,
            last_fits: None,
            shuffle: stream_rng(cfg.seed, Stream::Shuffle, 0),
        };
        Ok(Self {
            eligible: vec![false; data.len()],
            cfg,
            data,
            state,
            weights: None,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn is_warmup(&self) -> bool {
        self.state.epoch < self.cfg.schedule.warmup_epochs
    }

    pub fn is_done(&self) -> bool {
        self.state.epoch >= self.cfg.schedule.total_epochs
    }

    /// Current supervision targets: corrected labels when the mode learns
    /// labels, observed labels otherwise.
    pub fn current_labels(&self) -> Vec<usize> {
        match &self.state.labels {
            Some(store) => store.hard_labels(),
            None => self.data.observed.to_vec(),
        }
    }

    /// Runs the next epoch, warm-up or not.
    pub fn step_epoch(&mut self) -> Result<EpochOutcome> {
        if self.is_warmup() {
            self.warmup_epoch()
        } else {
            self.train_epoch()
        }
    }

    /// All samples, observed labels, unit weights.
    pub fn warmup_epoch(&mut self) -> Result<EpochOutcome> {
        if !self.is_warmup() {
            return Err(Error::State(format!("epoch {} is past warm-up", self.state.epoch)));
        }
        self.run_epoch(true)
    }

    pub fn train_epoch(&mut self) -> Result<EpochOutcome> {
        if self.is_warmup() {
            return Err(Error::State(format!("epoch {} is still warm-up", self.state.epoch)));
        }
        self.run_epoch(false)
    }

    fn run_epoch(&mut self, warmup: bool) -> Result<EpochOutcome> {
        let n = self.data.len();
        let rate = if warmup {
            1.0
        } else {
            memory_rate(self.state.epoch, &self.cfg.schedule)
        };
        self.weights = match (&self.state.banks, warmup) {
            (Some([b1, b2]), false) => Some([b1.weights()?, b2.weights()?]),
            _ => None,
        };
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut self.state.shuffle);
        let labels = self.current_labels();
        let mut selected_clean = vec![false; n];
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        let (mut num_clean, mut num_noisy) = (0usize, 0usize);
        for ids in order.chunks(self.cfg.batch_size) {
            let totals = if self.cfg.mode == Mode::CeBaseline {
                self.ce_batch(ids)?
            } else {
                self.cotrain_batch(ids, &labels, rate, warmup)?
            };
            for &p in &totals.clean_positions {
                selected_clean[ids[p]] = true;
            }
            num_clean += totals.clean_positions.len();
            num_noisy += ids.len() - totals.clean_positions.len();
            loss_sum += totals.loss;
            batches += 1;
        }
        if self.cfg.mode.uses_banks() {
            self.refresh_banks()?;
        }
        let outcome = EpochOutcome {
            epoch: self.state.epoch,
            warmup,
            memory_rate: rate,
            train_loss: loss_sum / batches as f64,
            selected_clean,
            num_clean,
            num_noisy,
        };
        self.state.epoch += 1;
        Ok(outcome)
    }

    fn ce_batch(&mut self, ids: &[usize]) -> Result<BatchTotals> {
        let x = self.data.features.select(Axis(0), ids);
        let y: Vec<usize> = ids.iter().map(|&i| self.data.observed[i]).collect();
        let mut loss = 0.0;
        for k in 0..2 {
            let trace = self.state.nets[k].forward(x.view())?;
            let (v, d) = losses::cross_entropy(trace.logits().view(), &y)?;
            let g = self.state.nets[k].backward(&trace, d.view())?;
            self.state.adam[k].step(&mut self.state.nets[k], &g)?;
            loss += 0.5 * v;
        }
        Ok(BatchTotals {
            loss,
            clean_positions: (0..ids.len()).collect(),
        })
    }

    fn cotrain_batch(&mut self, ids: &[usize], labels: &[usize], rate: f64, warmup: bool) -> Result<BatchTotals> {
        let b = ids.len();
        let c = self.data.num_classes;
        let x = self.data.features.select(Axis(0), ids);
        let t1 = self.state.nets[0].forward(x.view())?;
        let t2 = self.state.nets[1].forward(x.view())?;
        let (l1, l2) = (t1.logits(), t2.logits());
        let batch_labels: Vec<usize> = ids.iter().map(|&i| labels[i]).collect();
        let targets = one_hot(&batch_labels, c);

        let (clean, noisy) = if warmup {
            ((0..b).collect(), Vec::new())
        } else {
            let per_sample = losses::per_sample_loss(l1.view(), l2.view(), targets.view())?;
            separate_batch(&per_sample, ids, rate)
        };

        let (w1, w2): (Vec<f64>, Vec<f64>) = match &self.weights {
            Some([a, b]) => clean.iter().map(|&p| (a[ids[p]], b[ids[p]])).unzip(),
            None => (vec![1.0; clean.len()], vec![1.0; clean.len()]),
        };
        let jl = losses::joint_loss(
            rows(l1, &clean).view(),
            rows(l2, &clean).view(),
            rows(&targets, &clean).view(),
            &w1,
            &w2,
            &RegConfig::none(),
        )?;
        let reg = losses::regularizer(l1.view(), l2.view(), &self.state.reg)?;

        let mut d1 = reg.d_logits1;
        let mut d2 = reg.d_logits2;
        scatter_add(&mut d1, &clean, &jl.d_logits1);
        scatter_add(&mut d2, &clean, &jl.d_logits2);
        let mut loss = jl.value + reg.value;

        let learn_labels = !warmup && self.cfg.mode.learns_labels();
        if learn_labels && !noisy.is_empty() {
            let store = self.state.labels.as_ref().expect("label store exists");
            let noisy_ids: Vec<usize> = noisy.iter().map(|&p| ids[p]).collect();
            let soft = store.soft_labels(&noisy_ids)?;
            let ll = losses::label_loss(rows(l1, &noisy).view(), rows(l2, &noisy).view(), soft.view())?;
            scatter_add(&mut d1, &noisy, &ll.d_logits1);
            scatter_add(&mut d2, &noisy, &ll.d_logits2);
            loss += ll.value;
            if self.cfg.mode == Mode::Crema {
                self.update_labels(&noisy_ids, ll.d_soft.view())?;
            }
        }
        if learn_labels && self.cfg.mode == Mode::GlobalLabelAblation {
            let store = self.state.labels.as_ref().expect("label store exists");
            let soft = store.soft_labels(ids)?;
            let ll = losses::label_loss(l1.view(), l2.view(), soft.view())?;
            self.update_labels(ids, ll.d_soft.view())?;
        }

        let g1 = self.state.nets[0].backward(&t1, d1.view())?;
        let g2 = self.state.nets[1].backward(&t2, d2.view())?;
        self.state.adam[0].step(&mut self.state.nets[0], &g1)?;
        self.state.adam[1].step(&mut self.state.nets[1], &g2)?;
        Ok(BatchTotals {
            loss,
            clean_positions: clean,
        })
    }

    fn update_labels(&mut self, ids: &[usize], d_soft: ArrayView2<f64>) -> Result<()> {
        for &i in ids {
            self.eligible[i] = true;
        }
        let store = self.state.labels.as_mut().expect("label store exists");
        let res = store.update_labels(ids, d_soft, &self.eligible);
        for &i in ids {
            self.eligible[i] = false;
        }
        res
    }

    /// Per-network supervised losses of every training sample against the
    /// current labels.
    pub fn network_losses(&self) -> Result<[Vec<f64>; 2]> {
        let targets = one_hot(&self.current_labels(), self.data.num_classes);
        let l1 = batched_logits(&self.state.nets[0], self.data.features.view())?;
        let l2 = batched_logits(&self.state.nets[1], self.data.features.view())?;
        Ok([
            losses::supervised_losses(l1.view(), targets.view())?,
            losses::supervised_losses(l2.view(), targets.view())?,
        ])
    }

    /// Full-dataset loss pass, mixture refit, and bank push for each network.
    fn refresh_banks(&mut self) -> Result<()> {
        let per_net = self.network_losses()?;
        let mut fits = Vec::with_capacity(2);
        let banks = self.state.banks.as_mut().expect("mode uses banks");
        for (bank, losses) in banks.iter_mut().zip(&per_net) {
            let (post, _, report) =
                mixture::clean_posteriors(self.cfg.estimator, losses, self.cfg.mixture_tol, self.cfg.mixture_max_iter)?;
            bank.push_epoch(&post)?;
            fits.push(report);
        }
        let [f1, f2]: [FitReport; 2] = fits.try_into().expect("two networks");
        self.state.last_fits = Some([f1, f2]);
        Ok(())
    }

    /// Mean credibility weight of each sample over both banks (1 without banks).
    pub fn mean_weights(&self) -> Result<Vec<f64>> {
        match &self.state.banks {
            Some([b1, b2]) if b1.stored() > 0 => {
                let (w1, w2) = (b1.weights()?, b2.weights()?);
                Ok(w1.iter().zip(&w2).map(|(a, b)| 0.5 * (a + b)).collect())
            }
            _ => Ok(vec![1.0; self.data.len()]),
        }
    }
}

/// Test accuracy of each network and their mean. Ties predict the smallest class.
pub fn evaluate(state: &TrainState, test: &Dataset) -> Result<(f64, f64, f64)> {
    evaluate_nets(&state.nets, test)
}

pub fn evaluate_nets(nets: &[MlpParams; 2], test: &Dataset) -> Result<(f64, f64, f64)> {
    if test.is_empty() {
        return Err(validation("test set is empty"));
    }
    let acc = |net: &MlpParams| -> Result<f64> {
        let pred = argmax_rows(&batched_logits(net, test.features().view())?);
        Ok(accuracy(&pred, test.labels()))
    };
    let a1 = acc(&nets[0])?;
    let a2 = acc(&nets[1])?;
    Ok((a1, a2, 0.5 * (a1 + a2)))
}

pub fn accuracy(pred: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    hits as f64 / truth.len() as f64
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// One row of the metrics CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mode: Mode,
    pub train_loss: f64,
    pub acc1: f64,
    pub acc2: f64,
    pub acc_mean: f64,
    /// Share of the selected clean subset whose observed label is correct.
    pub clean_precision: f64,
    /// Share of correctly-labelled samples that were selected as clean.
    pub clean_recall: f64,
    /// Share of mislabelled samples whose current label equals the truth.
    pub label_fix_acc: f64,
    pub mean_w_clean: f64,
    pub mean_w_noisy: f64,
}

pub const METRICS_HEADER: &str =
    "epoch,mode,train_loss,acc1,acc2,acc_mean,clean_precision,clean_recall,label_fix_acc,mean_w_clean,mean_w_noisy";

impl EpochMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.epoch,
            self.mode,
            self.train_loss,
            self.acc1,
            self.acc2,
            self.acc_mean,
            self.clean_precision,
            self.clean_recall,
            self.label_fix_acc,
            self.mean_w_clean,
            self.mean_w_noisy
        )
    }
}

/// Scores an epoch against the true labels. This is the only place training
/// results meet them.
pub fn epoch_metrics(trainer: &Trainer<'_>, outcome: &EpochOutcome, data: &NoisyDataset, test: &Dataset) -> Result<EpochMetrics> {
    let (acc1, acc2, acc_mean) = evaluate(&trainer.state, test)?;
    let is_clean = data.clean_mask();
    let selected = &outcome.selected_clean;
    let n_sel = selected.iter().filter(|&&s| s).count();
    let n_clean = is_clean.iter().filter(|&&c| c).count();
    let n_sel_clean = selected.iter().zip(&is_clean).filter(|(s, c)| **s && **c).count();

    let current = trainer.current_labels();
    let truth = data.true_labels();
    let noisy_ids: Vec<usize> = (0..data.len()).filter(|&i| !is_clean[i]).collect();
    let fixed = noisy_ids.iter().filter(|&&i| current[i] == truth[i]).count();

    let w = trainer.mean_weights()?;
    let mean_over = |want_clean: bool| {
        let (s, k) = w
            .iter()
            .zip(&is_clean)
            .filter(|(_, c)| **c == want_clean)
            .fold((0.0, 0usize), |(s, k), (w, _)| (s + w, k + 1));
        if k == 0 {
            0.0
        } else {
            s / k as f64
        }
    };
    Ok(EpochMetrics {
        epoch: outcome.epoch,
        mode: trainer.config().mode,
        train_loss: outcome.train_loss,
        acc1,
        acc2,
        acc_mean,
        clean_precision: ratio(n_sel_clean, n_sel),
        clean_recall: ratio(n_sel_clean, n_clean),
        label_fix_acc: ratio(fixed, noisy_ids.len()),
        mean_w_clean: mean_over(true),
        mean_w_noisy: mean_over(false),
    })
}

/// Per-epoch metrics plus the headline number.
#[derive(Debug, Clone, PartialEq)]
pub struct RunReport {
    pub mode: Mode,
    pub epochs: Vec<EpochMetrics>,
    /// Mean of `acc_mean` over the last (up to) 10 epochs.
    pub last10_acc: f64,
}

impl RunReport {
    pub fn from_epochs(mode: Mode, epochs: Vec<EpochMetrics>) -> Self {
        let tail = &epochs[epochs.len().saturating_sub(10)..];
        let last10_acc = if tail.is_empty() {
            0.0
        } else {
            tail.iter().map(|m| m.acc_mean).sum::<f64>() / tail.len() as f64
        };
        Self {
            mode,
            epochs,
            last10_acc,
        }
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        s.push_str("== run summary ==\n");
        s.push_str(&format!("mode: {}\n", self.mode));
        s.push_str(&format!("epochs: {}\n", self.epochs.len()));
        s.push_str(&format!("last-10-epoch mean test accuracy: {:.4}\n", self.last10_acc));
        if let Some(last) = self.epochs.last() {
            s.push_str(&format!(
                "final epoch: acc1 {:.4} acc2 {:.4} mean {:.4}\n",
                last.acc1, last.acc2, last.acc_mean
            ));
            s.push_str(&format!(
                "final clean precision {:.4} recall {:.4}; label fix accuracy {:.4}\n",
                last.clean_precision, last.clean_recall, last.label_fix_acc
            ));
            s.push_str(&format!(
                "final mean weight: clean {:.4} noisy {:.4}\n",
                last.mean_w_clean, last.mean_w_noisy
            ));
        }
        s
    }
}

/// The finished run: report plus final state.
pub struct RunOutput {
    pub report: RunReport,
    pub state: TrainState,
}

/// Trains for the whole schedule, calling `on_epoch` after every epoch.
pub fn run(
    cfg: &TrainConfig,
    train: &NoisyDataset,
    test: &Dataset,
    mut on_epoch: impl FnMut(&EpochMetrics) -> Result<()>,
) -> Result<RunOutput> {
    if test.is_empty() {
        return Err(validation("test set is empty"));
    }
    if test.dims() != train.features().ncols() {
        return Err(validation("train and test feature widths differ"));
    }
    let mut trainer = Trainer::new(cfg.clone(), train.train_view())?;
    let mut epochs = Vec::with_capacity(cfg.schedule.total_epochs);
    while !trainer.is_done() {
        let outcome = trainer.step_epoch()?;
        let m = epoch_metrics(&trainer, &outcome, train, test)?;
        on_epoch(&m)?;
        epochs.push(m);
    }
    Ok(RunOutput {
        report: RunReport::from_epochs(cfg.mode, epochs),
        state: trainer.state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sched(sigma: f64) -> Schedule {
        Schedule {
            total_epochs: 20,
            warmup_epochs: 2,
            ramp_epochs: 10,
            sigma,
        }
    }

    #[test]
    fn memory_rate_points() {
        let s = sched(0.5);
        assert_eq!(memory_rate(0, &s), 1.0);
        assert_eq!(memory_rate(10, &s), 0.5);
        assert_eq!(memory_rate(5, &s), 0.75);
        assert_eq!(memory_rate(50, &s), 0.5);
    }

    #[test]
    fn separation_examples() {
        let ids = [0, 1, 2, 3];
        assert_eq!(separate_batch(&[0.1, 0.2, 0.9, 1.5], &ids, 0.5), (vec![0, 1], vec![2, 3]));
        assert_eq!(separate_batch(&[0.1, 0.2, 0.9, 1.5], &ids, 1.0), (vec![0, 1, 2, 3], vec![]));
        assert_eq!(separate_batch(&[0.3; 4], &ids, 0.5), (vec![0, 1], vec![2, 3]));
        // ties go to the smaller sample id, not the smaller position
        assert_eq!(separate_batch(&[0.3; 4], &[9, 8, 7, 6], 0.5), (vec![2, 3], vec![0, 1]));
        assert_eq!(separate_batch(&[0.5; 10], &(0..10).collect::<Vec<_>>(), 0.7).0.len(), 7);
        assert_eq!(separate_batch(&[0.5; 3], &[0, 1, 2], 0.5).0.len(), 2);
    }

    #[test]
    fn schedule_validation() {
        assert!(sched(0.0).validate().is_err());
        assert!(sched(1.0).validate().is_ok());
        let bad = Schedule {
            warmup_epochs: 20,
            ..sched(0.5)
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn mode_round_trip() {
        for m in [Mode::Crema, Mode::CeBaseline, Mode::SelectionOnly, Mode::GlobalLabelAblation] {
            assert_eq!(m.as_str().parse::<Mode>().unwrap(), m);
        }
        assert!("bogus".parse::<Mode>().is_err());
    }

    #[test]
    fn accuracy_counts() {
        assert_eq!(accuracy(&[0, 1, 2, 2], &[0, 1, 1, 2]), 0.75);
    }
}
