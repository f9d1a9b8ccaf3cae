//! Per-sample soft labels stored as label logits.

use std::io::Write;

use ndarray::{Array2, ArrayView2, Axis};

use crate::error::{validation, Error, Result};
use crate::losses::softmax_rows;
use crate::model::argmax_rows;

pub const DEFAULT_ALPHA: f64 = 5.0;
pub const DEFAULT_LAMBDA: f64 = 100.0;

/// Soft labels `ỹ_i = softmax(logits_i)`, updated only on rows the caller
/// marks as eligible.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelStore {
    logits: Array2<f64>,
    lr: f64,
    alpha: f64,
}

impl LabelStore {
    /// Row `i` starts at `alpha · one_hot(observed[i])`.
    pub fn init(observed: &[usize], num_classes: usize, alpha: f64, lr: f64) -> Result<Self> {
        if num_classes == 0 {
            return Err(validation("num_classes must be positive"));
        }
        if let Some((i, y)) = observed.iter().enumerate().find(|(_, &y)| y >= num_classes) {
            return Err(validation(format!("label {y} of sample {i} not below {num_classes}")));
        }
        if !alpha.is_finite() || !lr.is_finite() || lr < 0.0 {
            return Err(validation("label alpha and lambda must be finite, lambda >= 0"));
        }
        let mut logits = Array2::zeros((observed.len(), num_classes));
        for (i, &y) in observed.iter().enumerate() {
            logits[[i, y]] = alpha;
        }
        Ok(Self { logits, lr, alpha })
    }

    pub fn len(&self) -> usize {
        self.logits.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.logits.nrows() == 0
    }

    pub fn num_classes(&self) -> usize {
        self.logits.ncols()
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn logits(&self) -> &Array2<f64> {
        &self.logits
    }

    fn check_ids(&self, ids: &[usize]) -> Result<()> {
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.len()) {
            return Err(validation(format!("sample id {bad} out of range ({} samples)", self.len())));
        }
        Ok(())
    }

    /// Softmax rows for `ids`, in order.
    pub fn soft_labels(&self, ids: &[usize]) -> Result<Array2<f64>> {
        self.check_ids(ids)?;
        softmax_rows(self.logits.select(Axis(0), ids).view())
    }

    /// Gradient step on the rows `ids`. `d_soft` holds ∂L/∂ỹ for those rows; it
    /// is chained through the softmax and applied to the logits. Every id must
    /// be set in `eligible`; all other rows stay bit-identical.
    pub fn update_labels(&mut self, ids: &[usize], d_soft: ArrayView2<f64>, eligible: &[bool]) -> Result<()> {
        self.check_ids(ids)?;
        if d_soft.dim() != (ids.len(), self.num_classes()) {
            return Err(validation(format!(
                "label gradient is {:?}, expected ({}, {})",
                d_soft.dim(),
                ids.len(),
                self.num_classes()
            )));
        }
        if eligible.len() != self.len() {
            return Err(validation("eligibility mask must cover every sample"));
        }
        if let Some(&bad) = ids.iter().find(|&&i| !eligible[i]) {
            return Err(Error::Contract(format!(
                "label update for sample {bad}, which is not in the noisy subset"
            )));
        }
        if d_soft.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite label gradient".into()));
        }
        let soft = self.soft_labels(ids)?;
        for (k, &i) in ids.iter().enumerate() {
            let y = soft.row(k);
            let g = d_soft.row(k);
            let dot: f64 = y.iter().zip(g).map(|(a, b)| a * b).sum();
            let mut row = self.logits.row_mut(i);
            for ((z, &yj), &gj) in row.iter_mut().zip(y).zip(g) {
                *z -= self.lr * yj * (gj - dot);
            }
        }
        Ok(())
    }

    /// Argmax of the soft label, ties to the smallest class id.
    pub fn hard_label(&self, id: usize) -> Result<usize> {
        self.check_ids(&[id])?;
        let row = self.logits.row(id).insert_axis(Axis(0)).to_owned();
        Ok(argmax_rows(&row)[0])
    }

    pub fn hard_labels(&self) -> Vec<usize> {
        argmax_rows(&self.logits)
    }

    /// `sample_id,observed_label,corrected_label,max_soft_prob`.
    pub fn export_csv(&self, observed: &[usize], w: &mut impl Write) -> Result<()> {
        if observed.len() != self.len() {
            return Err(validation("observed labels do not match the store"));
        }
        writeln!(w, "sample_id,observed_label,corrected_label,max_soft_prob")?;
        let soft = softmax_rows(self.logits.view())?;
        for (i, (row, &obs)) in soft.outer_iter().zip(observed).enumerate() {
            let hard = self.hard_label(i)?;
            writeln!(w, "{i},{obs},{hard},{:.6}", row[hard])?;
        }
        Ok(())
    }
}
