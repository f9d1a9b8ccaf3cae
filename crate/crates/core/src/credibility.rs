//! Sliding-window credibility bank.
//!
//! Each sample keeps the clean posteriors of its last `n` epochs. The
//! credibility weight is the stability of that window (one minus its
//! population standard deviation) times the geometric mean of the window,
//! i.e. `C · exp(mean log P)`.

use std::io::Write;

use crate::error::{validation, Error, Result};

pub const POSTERIOR_FLOOR: f64 = 1e-6;
pub const DEFAULT_WINDOW: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct CredibilityBank {
    window: usize,
    num_samples: usize,
    /// Row-major `num_samples × window` ring storage.
    buf: Vec<f64>,
    epochs_recorded: usize,
}

impl CredibilityBank {
    pub fn new(num_samples: usize, window: usize) -> Result<Self> {
        if window == 0 {
            return Err(validation("credibility window must be positive"));
        }
        Ok(Self {
            window,
            num_samples,
            buf: vec![0.0; num_samples * window],
            epochs_recorded: 0,
        })
    }

    pub fn window(&self) -> usize {
        self.window
    }

    pub fn num_samples(&self) -> usize {
        self.num_samples
    }

    pub fn epochs_recorded(&self) -> usize {
        self.epochs_recorded
    }

    /// Number of stored posteriors per sample.
    pub fn stored(&self) -> usize {
        self.epochs_recorded.min(self.window)
    }

    /// Appends one epoch of posteriors, evicting the oldest when full.
    pub fn push_epoch(&mut self, posteriors: &[f64]) -> Result<()> {
        if posteriors.len() != self.num_samples {
            return Err(validation(format!(
                "{} posteriors pushed into a bank of {} samples",
                posteriors.len(),
                self.num_samples
            )));
        }
        if let Some((i, p)) = posteriors.iter().enumerate().find(|(_, p)| !(0.0..=1.0).contains(*p)) {
            return Err(validation(format!("posterior {p} of sample {i} outside [0, 1]")));
        }
        let slot = self.epochs_recorded % self.window;
        for (i, &p) in posteriors.iter().enumerate() {
            self.buf[i * self.window + slot] = p;
        }
        self.epochs_recorded += 1;
        Ok(())
    }

    /// Stored posteriors of `sample_id`, most recent first.
    pub fn history(&self, sample_id: usize) -> Result<Vec<f64>> {
        if sample_id >= self.num_samples {
            return Err(validation(format!("sample id {sample_id} out of range")));
        }
        let m = self.stored();
        if m == 0 {
            return Err(Error::State("credibility bank is empty".into()));
        }
        let row = &self.buf[sample_id * self.window..(sample_id + 1) * self.window];
        let newest = (self.epochs_recorded - 1) % self.window;
        Ok((0..m)
            .map(|k| row[(newest + self.window - k) % self.window])
            .collect())
    }

    /// Σ log(max(P, 1e-6)) over the stored window.
    pub fn sequential_log_likelihood(&self, sample_id: usize) -> Result<f64> {
        Ok(seq_log_likelihood(&self.history(sample_id)?))
    }

    /// 1 − population standard deviation of the stored window.
    pub fn stability(&self, sample_id: usize) -> Result<f64> {
        Ok(stability_of(&self.history(sample_id)?))
    }

    pub fn credibility_weight(&self, sample_id: usize) -> Result<f64> {
        Ok(weight_of(&self.history(sample_id)?))
    }

    /// Weights of every sample.
    pub fn weights(&self) -> Result<Vec<f64>> {
        (0..self.num_samples).map(|i| self.credibility_weight(i)).collect()
    }

    /// Diagnostic dump: `sample_id,epoch_offset,posterior`, where offset 0 is
    /// the most recent epoch.
    pub fn dump_csv(&self, w: &mut impl Write) -> Result<()> {
        writeln!(w, "sample_id,epoch_offset,posterior")?;
        if self.stored() == 0 {
            return Ok(());
        }
        for i in 0..self.num_samples {
            for (k, p) in self.history(i)?.iter().enumerate() {
                writeln!(w, "{i},{k},{p:.9}")?;
            }
        }
        Ok(())
    }
}

fn seq_log_likelihood(h: &[f64]) -> f64 {
    h.iter().map(|p| p.max(POSTERIOR_FLOOR).ln()).sum()
}

fn stability_of(h: &[f64]) -> f64 {
    let m = h.len() as f64;
    let mean = h.iter().sum::<f64>() / m;
    let var = h.iter().map(|p| (p - mean).powi(2)).sum::<f64>() / m;
    1.0 - var.sqrt()
}

fn weight_of(h: &[f64]) -> f64 {
    if h.len() == 1 {
        // stability is 1 and the geometric mean is P itself
        return h[0];
    }
    let geo = (seq_log_likelihood(h) / h.len() as f64).exp();
    (stability_of(h) * geo).clamp(0.0, 1.0)
}
