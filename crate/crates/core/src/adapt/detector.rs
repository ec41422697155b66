use std::collections::VecDeque;

use crate::model::Modality;

/// Sliding-window z-score test on each modality's discrepancy series.
#[derive(Clone, Debug, PartialEq)]
pub struct ShiftDetector {
    pub window: usize,
    pub threshold: f64,
    /// Floor on the window standard deviation.
    pub eps: f64,
    audio: VecDeque<f64>,
    video: VecDeque<f64>,
}

impl ShiftDetector {
    pub fn new(window: usize, threshold: f64, eps: f64) -> Self {
        assert!(window >= 2, "detector window must hold at least 2 values");
        Self {
            window,
            threshold,
            eps,
            audio: VecDeque::with_capacity(window),
            video: VecDeque::with_capacity(window),
        }
    }

    pub fn buffer(&self, m: Modality) -> &VecDeque<f64> {
        match m {
            Modality::Audio => &self.audio,
            Modality::Video => &self.video,
        }
    }

    /// Scores `value` against the current window of modality `m`, then pushes it.
    ///
    /// Fires only when the window is full and
    /// `(value − mean) / max(std, eps) > threshold`, with the sample standard
    /// deviation of the window.
    pub fn observe(&mut self, m: Modality, value: f64) -> bool {
        let (window, threshold, eps) = (self.window, self.threshold, self.eps);
        let buf = match m {
            Modality::Audio => &mut self.audio,
            Modality::Video => &mut self.video,
        };
        let fired = buf.len() == window && {
            let n = buf.len() as f64;
            let mean = buf.iter().sum::<f64>() / n;
            let var = buf.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
            (value - mean) / var.sqrt().max(eps) > threshold
        };
        if buf.len() == window {
            buf.pop_front();
        }
        buf.push_back(value);
        fired
    }

    /// Observes one value per modality; returns the audio and video decisions.
    pub fn detect(&mut self, disc_a: f64, disc_v: f64) -> [bool; 2] {
        [self.observe(Modality::Audio, disc_a), self.observe(Modality::Video, disc_v)]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fires_on_jump_after_constant_window() {
        let mut d = ShiftDetector::new(10, 5.0, 1e-6);
        for _ in 0..10 {
            assert!(!d.observe(Modality::Audio, 1.0));
        }
        assert!(d.observe(Modality::Audio, 1.0 + 6e-6));
    }

    #[test]
    fn constant_stream_never_fires() {
        let mut d = ShiftDetector::new(10, 5.0, 1e-6);
        for _ in 0..50 {
            assert_eq!(d.detect(0.7, 0.7), [false, false]);
        }
    }

    #[test]
    fn silent_during_warm_up() {
        let mut d = ShiftDetector::new(5, 5.0, 1e-6);
        for i in 0..4 {
            assert!(!d.observe(Modality::Video, 10f64.powi(i * 3)));
        }
        assert_eq!(d.buffer(Modality::Video).len(), 4);
    }

    #[test]
    fn buffer_bounded_and_modalities_independent() {
        let mut d = ShiftDetector::new(3, 5.0, 1e-6);
        for i in 0..10 {
            d.observe(Modality::Audio, i as f64);
        }
        assert_eq!(d.buffer(Modality::Audio).iter().copied().collect::<Vec<_>>(), vec![7.0, 8.0, 9.0]);
        assert!(d.buffer(Modality::Video).is_empty());
    }

    #[test]
    fn exact_z_score_threshold() {
        // window {0, 2}: mean 1, sample std sqrt(2)
        let mut d = ShiftDetector::new(2, 1.0, 1e-9);
        d.observe(Modality::Audio, 0.0);
        d.observe(Modality::Audio, 2.0);
        let mut e = d.clone();
        assert!(!d.observe(Modality::Audio, 1.0 + 2f64.sqrt() * 0.999));
        assert!(e.observe(Modality::Audio, 1.0 + 2f64.sqrt() * 1.001));
    }
}
