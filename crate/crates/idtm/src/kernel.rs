//! Exponentially decayed historic topic-popularity counts.
//!
//! A topic's prior weight at epoch `t` is the windowed sum
//! `m'_kt = sum_{d=1..width} exp(-d/decay) * m_{k,t-d}` over its raw table
//! usage in the preceding `width` epochs. `DecayedCounts` maintains the same
//! quantity through an O(1)-per-topic recurrence as the sampler advances
//! through epochs.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayKernel {
    /// Window width in epochs.
    pub width: usize,
    /// Decay scale in epochs; the weight at lag `d` is `exp(-d/decay)`.
    pub decay: f64,
}

impl DecayKernel {
    pub fn new(width: usize, decay: f64) -> Result<Self> {
        if !(decay > 0.0) {
            return Err(Error::Config("kernel decay must be positive".into()));
        }
        Ok(DecayKernel { width, decay })
    }

    /// Kernel weight at lag `delta`; zero outside `1..=width`.
    pub fn weight(&self, delta: usize) -> f64 {
        if delta == 0 || delta > self.width {
            0.0
        } else {
            (-(delta as f64) / self.decay).exp()
        }
    }

    /// Exact windowed sum for one topic. `usage(s)` returns the topic's raw
    /// table count `m` at epoch `s`; epochs before 0 contribute nothing.
    pub fn prior_weight_direct(&self, t: usize, usage: impl Fn(usize) -> u32) -> f64 {
        let mut acc = 0.0;
        for delta in 1..=self.width.min(t) {
            let m = usage(t - delta);
            if m > 0 {
                acc += self.weight(delta) * m as f64;
            }
        }
        acc
    }
}

/// Recurrence-maintained `m'` values for all topics at one epoch.
///
/// Topic death must be exact, so the recurrence tracks how many window
/// entries are nonzero and pins `m'` to exactly 0 when the window empties
/// rather than relying on floating-point cancellation.
#[derive(Debug, Clone)]
pub struct DecayedCounts {
    kernel: DecayKernel,
    epoch: Option<usize>,
    values: Vec<f64>,
    window_nonzero: Vec<u32>,
}

impl DecayedCounts {
    pub fn new(kernel: DecayKernel) -> Self {
        DecayedCounts { kernel, epoch: None, values: Vec::new(), window_nonzero: Vec::new() }
    }

    pub fn kernel(&self) -> &DecayKernel {
        &self.kernel
    }

    pub fn reset(&mut self) {
        self.epoch = None;
        self.values.clear();
        self.window_nonzero.clear();
    }

    pub fn epoch(&self) -> Option<usize> {
        self.epoch
    }

    /// `m'` for topic `k` at the current epoch (0 for unknown topics).
    pub fn get(&self, k: usize) -> f64 {
        self.values.get(k).copied().unwrap_or(0.0)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    /// Advance to epoch `t`, given final raw usage `usage(k, s)` for all
    /// epochs `s < t`. Must be called for `t = 0, 1, 2, ...` in order.
    pub fn advance_epoch(
        &mut self,
        t: usize,
        n_topics: usize,
        usage: impl Fn(usize, usize) -> u32,
    ) -> Result<()> {
        match self.epoch {
            None if t == 0 => {}
            Some(prev) if t == prev + 1 => {}
            _ => {
                return Err(Error::State(format!(
                    "advance_epoch called out of order: at {:?}, requested {t}",
                    self.epoch
                )))
            }
        }
        self.values.resize(n_topics, 0.0);
        self.window_nonzero.resize(n_topics, 0);
        self.epoch = Some(t);
        if t == 0 || self.kernel.width == 0 {
            return Ok(());
        }
        let e1 = (-1.0 / self.kernel.decay).exp();
        let drop_lag = self.kernel.width + 1;
        let e_drop = (-(drop_lag as f64) / self.kernel.decay).exp();
        for k in 0..n_topics {
            let entering = usage(k, t - 1);
            let mut v = (self.values[k] + entering as f64) * e1;
            if entering > 0 {
                self.window_nonzero[k] += 1;
            }
            if t >= drop_lag {
                let leaving = usage(k, t - drop_lag);
                if leaving > 0 {
                    v -= e_drop * leaving as f64;
                    self.window_nonzero[k] -= 1;
                }
            }
            self.values[k] = if self.window_nonzero[k] == 0 { 0.0 } else { v };
        }
        Ok(())
    }
}
