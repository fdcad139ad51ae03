//! Schedules driving the alternation, masking and selective reweighting.

/// Exponential moving average of each frame's rendering loss.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameLossTracker {
    pub decay: f64,
    ema: Vec<f64>,
    seen: Vec<bool>,
}

impl FrameLossTracker {
    pub fn new(num_frames: usize) -> Self {
        Self { decay: 0.9, ema: vec![0.0; num_frames], seen: vec![false; num_frames] }
    }

    /// The first observation initialises the average.
    pub fn update(&mut self, frame: usize, loss: f64) {
        if self.seen[frame] {
            self.ema[frame] = self.decay * self.ema[frame] + (1.0 - self.decay) * loss;
        } else {
            self.ema[frame] = loss;
            self.seen[frame] = true;
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.ema
    }

    pub fn all_seen(&self) -> bool {
        self.seen.iter().all(|s| *s)
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        let n = values.len();
        Self { decay: 0.9, ema: values, seen: vec![true; n] }
    }
}

/// The `k` frames with the largest averaged loss, highest first; ties go to
/// the lower frame id.
pub fn select_outliers(tracker: &FrameLossTracker, k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..tracker.ema.len()).collect();
    order.sort_by(|&a, &b| tracker.ema[b].total_cmp(&tracker.ema[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// `w0 + l (1 - w0)`.
pub fn reweight_factor(progress: f64, w0: f64) -> f64 {
    w0 + progress * (1.0 - w0)
}

/// Geometric epochs `m2` to run after `m1` global epochs; the ratio falls
/// linearly from `start` to `end` and is rounded half up.
pub fn alternation_ratio(progress: f64, m1: usize, start: f64, end: f64) -> (usize, usize) {
    let ratio = start + (end - start) * progress.clamp(0.0, 1.0);
    (m1, (m1 as f64 * ratio + 0.5).floor() as usize)
}

/// Coarse-to-fine progress parameter in `[0, levels]`.
pub fn c2f_alpha(progress: f64, start: f64, end: f64, levels: usize) -> f64 {
    ((progress - start) / (end - start)).clamp(0.0, 1.0) * levels as f64
}
