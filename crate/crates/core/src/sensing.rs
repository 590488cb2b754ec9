//! Stimuli for the state machine: windowed latency estimates, logistic
//! condition probabilities and the filtered spaciousness of the surroundings.

use alloc::collections::VecDeque;
use alloc::vec::Vec;
use core::fmt;

use crate::plant::Vec3;

/// Logistic condition `P(t) = 1 / (1 + exp(mu * (rho - t)))` with its
/// decision threshold.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SigmoidParams {
    /// Slope, per stimulus unit. Positive.
    pub mu: f64,
    /// Midpoint in stimulus units.
    pub rho: f64,
    /// Decision threshold in `(0, 1)`.
    pub th: f64,
}

impl SigmoidParams {
    /// Checks `mu > 0` and `0 < th < 1`.
    pub fn validate(&self) -> Result<(), SensingError> {
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return Err(SensingError::InvalidSigmoid("mu must be positive"));
        }
        if !self.rho.is_finite() {
            return Err(SensingError::InvalidSigmoid("rho must be finite"));
        }
        if !(self.th > 0.0 && self.th < 1.0) {
            return Err(SensingError::InvalidSigmoid("threshold must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Invalid sensing parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SensingError {
    /// Sigmoid parameters out of range.
    InvalidSigmoid(&'static str),
    /// Latency weights do not sum to one.
    WeightsNotConvex(f64, f64),
    /// EMA coefficients do not sum to one or are out of range.
    InvalidEma(f64, f64),
    /// Risk thresholds not ordered.
    InvalidBands(f64, f64),
    /// Window size of zero.
    EmptyWindow,
}

impl fmt::Display for SensingError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SensingError::InvalidSigmoid(why) => write!(f, "invalid sigmoid: {why}"),
            SensingError::WeightsNotConvex(a, b) => {
                write!(f, "latency weights must sum to 1, got {a} + {b}")
            }
            SensingError::InvalidEma(a, b) => {
                write!(
                    f,
                    "EMA coefficients must be in [0, 1] and sum to 1, got {a} + {b}"
                )
            }
            SensingError::InvalidBands(hr, mr) => {
                write!(
                    f,
                    "high-risk bound {hr} m must be below middle-risk bound {mr} m"
                )
            }
            SensingError::EmptyWindow => f.write_str("window size must be at least 1"),
        }
    }
}

impl core::error::Error for SensingError {}

const SUM_TOLERANCE: f64 = 1e-9;

/// Evaluates the logistic condition at stimulus `t`.
pub fn sigmoid_prob(t: f64, p: &SigmoidParams) -> f64 {
    1.0 / (1.0 + libm::exp(p.mu * (p.rho - t)))
}

/// Probability of cluttered space given spaciousness `s`: the same logistic
/// form mirrored so that it rises as the free space shrinks, crossing 0.5 at
/// `s = rho`.
pub fn clutter_prob(s: f64, p: &SigmoidParams) -> f64 {
    1.0 / (1.0 + libm::exp(p.mu * (s - p.rho)))
}

/// One latency observation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LatencySample {
    /// Measured latency (ms).
    pub value: f64,
    /// When the measured data left the sender (ms).
    pub sent_at: f64,
}

/// Fixed-capacity ring of the most recent samples.
#[derive(Debug, Clone)]
pub struct SampleWindow {
    capacity: usize,
    samples: VecDeque<LatencySample>,
}

impl SampleWindow {
    /// A window keeping the last `capacity` samples.
    pub fn new(capacity: usize) -> Result<Self, SensingError> {
        if capacity == 0 {
            return Err(SensingError::EmptyWindow);
        }
        Ok(SampleWindow {
            capacity,
            samples: VecDeque::with_capacity(capacity),
        })
    }

    /// Window size `N`.
    pub fn capacity(&self) -> usize {
        self.capacity
    }

    /// Samples held.
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    /// True before the first sample.
    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Pushes a sample, evicting the oldest when full.
    pub fn push(&mut self, sample: LatencySample) {
        if self.samples.len() == self.capacity {
            self.samples.pop_front();
        }
        self.samples.push_back(sample);
    }

    /// Retained samples, oldest first.
    pub fn iter(&self) -> impl Iterator<Item = &LatencySample> {
        self.samples.iter()
    }

    /// Mean of the most recent `min(N, len)` samples; `None` when empty.
    pub fn mean(&self) -> Option<f64> {
        window_mean(self, self.capacity)
    }

    /// True when the window is full and every sample was sent at or after
    /// `since_ms`.
    pub fn fresh_since(&self, since_ms: f64) -> bool {
        self.samples.len() == self.capacity
            && self.samples.front().is_some_and(|s| s.sent_at >= since_ms)
    }
}

/// Arithmetic mean of the last `min(n, available)` samples. `None` stands
/// for "no estimate" when the window is empty or `n` is zero.
pub fn window_mean(window: &SampleWindow, n: usize) -> Option<f64> {
    let take = n.min(window.samples.len());
    if take == 0 {
        return None;
    }
    let skip = window.samples.len() - take;
    let sum: f64 = window.samples.iter().skip(skip).map(|s| s.value).sum();
    Some(sum / take as f64)
}

/// Camera and control latency windows with their mixing weights.
#[derive(Debug, Clone)]
pub struct LatencyWindows {
    /// Camera-frame latency samples.
    pub cam: SampleWindow,
    /// Control round-trip samples.
    pub cc: SampleWindow,
    w1: f64,
    w2: f64,
}

impl LatencyWindows {
    /// Windows of sizes `n1`, `n2` mixed with `w1 + w2 = 1`.
    pub fn new(n1: usize, n2: usize, w1: f64, w2: f64) -> Result<Self, SensingError> {
        if !(w1 >= 0.0 && w2 >= 0.0) || libm::fabs(w1 + w2 - 1.0) > SUM_TOLERANCE {
            return Err(SensingError::WeightsNotConvex(w1, w2));
        }
        Ok(LatencyWindows {
            cam: SampleWindow::new(n1)?,
            cc: SampleWindow::new(n2)?,
            w1,
            w2,
        })
    }

    /// `(w1, w2)`.
    pub fn weights(&self) -> (f64, f64) {
        (self.w1, self.w2)
    }

    /// Current `(t1, t2)` estimates when both windows hold samples.
    pub fn estimates(&self) -> Option<(f64, f64)> {
        Some((self.cam.mean()?, self.cc.mean()?))
    }

    /// Both windows full of samples sent at or after `since_ms`.
    pub fn fresh_since(&self, since_ms: f64) -> bool {
        self.cam.fresh_since(since_ms) && self.cc.fresh_since(since_ms)
    }
}

/// Weighted latency condition `w1 * P_cam(t1) + w2 * P_cc(t2)`.
pub fn latency_condition(
    t1: f64,
    t2: f64,
    windows: &LatencyWindows,
    cam_p: &SigmoidParams,
    cc_p: &SigmoidParams,
) -> f64 {
    windows.w1 * sigmoid_prob(t1, cam_p) + windows.w2 * sigmoid_prob(t2, cc_p)
}

/// Sensed points around the UAV.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    /// Points in metres.
    pub points: Vec<Vec3>,
    /// UAV centre of mass.
    pub center: Vec3,
}

impl PointCloud {
    /// `n` points spread over a sphere of radius `radius` around `center`
    /// (golden-spiral directions), each radius perturbed by `noise()`.
    pub fn sphere(center: Vec3, radius: f64, n: usize, mut noise: impl FnMut() -> f64) -> Self {
        let golden = core::f64::consts::PI * (3.0 - libm::sqrt(5.0));
        let points = (0..n)
            .map(|i| {
                let z = 1.0 - 2.0 * (i as f64 + 0.5) / n as f64;
                let ring = libm::sqrt(1.0 - z * z);
                let phi = golden * i as f64;
                let r = (radius + noise()).max(0.0);
                center + Vec3::new(ring * libm::cos(phi), ring * libm::sin(phi), z) * r
            })
            .collect();
        PointCloud { points, center }
    }
}

/// Mean Euclidean distance from the centre to the points; `None` for an
/// empty cloud.
pub fn spaciousness(cloud: &PointCloud) -> Option<f64> {
    if cloud.points.is_empty() {
        return None;
    }
    let sum: f64 = cloud
        .points
        .iter()
        .map(|p| (*p - cloud.center).norm())
        .sum();
    Some(sum / cloud.points.len() as f64)
}

/// Environmental risk band.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum RiskLevel {
    /// Open space.
    Low,
    /// Moderately cluttered.
    Middle,
    /// Cluttered.
    High,
}

/// Exponentially filtered spaciousness and its risk bands.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskState {
    alpha: f64,
    beta: f64,
    s: Option<f64>,
    hr_threshold: f64,
    mr_threshold: f64,
}

impl RiskState {
    /// Filter with `alpha + beta = 1`; the first sample seeds the estimate.
    pub fn new(
        alpha: f64,
        beta: f64,
        hr_threshold: f64,
        mr_threshold: f64,
    ) -> Result<Self, SensingError> {
        if !(0.0..=1.0).contains(&alpha)
            || !(0.0..=1.0).contains(&beta)
            || libm::fabs(alpha + beta - 1.0) > SUM_TOLERANCE
        {
            return Err(SensingError::InvalidEma(alpha, beta));
        }
        #[allow(clippy::neg_cmp_op_on_partial_ord)] // rejects NaN bounds too
        if !(hr_threshold < mr_threshold) {
            return Err(SensingError::InvalidBands(hr_threshold, mr_threshold));
        }
        Ok(RiskState {
            alpha,
            beta,
            s: None,
            hr_threshold,
            mr_threshold,
        })
    }

    /// Same filter starting from `s0` instead of the first sample.
    pub fn with_initial(mut self, s0: f64) -> Self {
        self.s = Some(s0);
        self
    }

    /// Filtered spaciousness, if any sample has been seen.
    pub fn spaciousness(&self) -> Option<f64> {
        self.s
    }

    /// Band for a spaciousness value: high at or below the first bound,
    /// middle up to and including the second, low above.
    pub fn classify(&self, s: f64) -> RiskLevel {
        if s <= self.hr_threshold {
            RiskLevel::High
        } else if s <= self.mr_threshold {
            RiskLevel::Middle
        } else {
            RiskLevel::Low
        }
    }
}

/// Folds a new spaciousness sample into the filter.
pub fn risk_update(state: &mut RiskState, sample: f64) -> RiskLevel {
    let s = match state.s {
        Some(prev) => state.alpha * prev + state.beta * sample,
        None => sample,
    };
    state.s = Some(s);
    state.classify(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn push_all(w: &mut SampleWindow, values: &[f64]) {
        for (i, &v) in values.iter().enumerate() {
            w.push(LatencySample {
                value: v,
                sent_at: i as f64,
            });
        }
    }

    #[test]
    fn sigmoid_midpoint_and_offset() {
        let p = SigmoidParams {
            mu: 5.0,
            rho: 27.0,
            th: 0.5,
        };
        assert_eq!(sigmoid_prob(27.0, &p), 0.5);
        let want = 1.0 / (1.0 + (-5.0f64).exp());
        assert!((sigmoid_prob(28.0, &p) - want).abs() < 1e-15);
        assert!((want - 0.9933).abs() < 1e-4);
    }

    #[test]
    fn sigmoid_saturates_without_nan() {
        let p = SigmoidParams {
            mu: 5.0,
            rho: 27.0,
            th: 0.5,
        };
        assert_eq!(sigmoid_prob(-1e6, &p), 0.0);
        assert_eq!(sigmoid_prob(1e6, &p), 1.0);
    }

    #[test]
    fn clutter_probability_crosses_half_at_rho() {
        let p = SigmoidParams {
            mu: 5.0,
            rho: 3.0,
            th: 0.5,
        };
        assert_eq!(clutter_prob(3.0, &p), 0.5);
        assert!(clutter_prob(2.5, &p) > 0.5);
        assert!(clutter_prob(4.0, &p) < 0.5);
    }

    #[test]
    fn window_mean_cases() {
        let mut w = SampleWindow::new(3).unwrap();
        assert_eq!(w.mean(), None);
        push_all(&mut w, &[10.0, 20.0, 30.0]);
        assert_eq!(w.mean(), Some(20.0));
        assert_eq!(window_mean(&w, 1), Some(30.0));
        assert_eq!(window_mean(&w, 0), None);
        w.push(LatencySample {
            value: 60.0,
            sent_at: 5.0,
        });
        assert_eq!(w.mean(), Some(110.0 / 3.0));
    }

    #[test]
    fn freshness_needs_full_window_of_new_samples() {
        let mut w = SampleWindow::new(2).unwrap();
        w.push(LatencySample {
            value: 1.0,
            sent_at: 9.0,
        });
        assert!(!w.fresh_since(5.0));
        w.push(LatencySample {
            value: 1.0,
            sent_at: 11.0,
        });
        assert!(w.fresh_since(5.0));
        assert!(!w.fresh_since(10.0));
    }

    #[test]
    fn weights_must_sum_to_one() {
        assert_eq!(
            LatencyWindows::new(10, 50, 0.5, 0.6).unwrap_err(),
            SensingError::WeightsNotConvex(0.5, 0.6)
        );
        assert!(LatencyWindows::new(10, 50, 0.35, 0.65).is_ok());
        assert_eq!(
            LatencyWindows::new(0, 50, 0.35, 0.65).unwrap_err(),
            SensingError::EmptyWindow
        );
    }

    #[test]
    fn latency_condition_at_midpoints() {
        let w = LatencyWindows::new(10, 50, 0.35, 0.65).unwrap();
        let cam = SigmoidParams {
            mu: 3.0,
            rho: 61.0,
            th: 0.5,
        };
        let cc = SigmoidParams {
            mu: 5.0,
            rho: 27.0,
            th: 0.5,
        };
        assert!((latency_condition(61.0, 27.0, &w, &cam, &cc) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn spaciousness_of_simple_clouds() {
        let axes = PointCloud {
            points: alloc::vec![
                Vec3::new(1.0, 0.0, 0.0),
                Vec3::new(0.0, 2.0, 0.0),
                Vec3::new(0.0, 0.0, 3.0)
            ],
            center: Vec3::ZERO,
        };
        assert!((spaciousness(&axes).unwrap() - 2.0).abs() < 1e-15);
        let ball = PointCloud::sphere(Vec3::new(1.0, -2.0, 0.5), 4.0, 200, || 0.0);
        assert!((spaciousness(&ball).unwrap() - 4.0).abs() < 1e-12);
        let empty = PointCloud {
            points: Vec::new(),
            center: Vec3::ZERO,
        };
        assert_eq!(spaciousness(&empty), None);
    }

    #[test]
    fn risk_fixed_points_and_bands() {
        let base = RiskState::new(0.8, 0.2, 3.0, 5.0).unwrap();
        let mut hr = base.with_initial(2.0);
        assert_eq!(risk_update(&mut hr, 2.0), RiskLevel::High);
        assert_eq!(hr.spaciousness(), Some(2.0));
        let mut mr = base.with_initial(4.0);
        assert_eq!(risk_update(&mut mr, 4.0), RiskLevel::Middle);
        assert_eq!(base.classify(3.0), RiskLevel::High);
        assert_eq!(base.classify(5.0), RiskLevel::Middle);
        assert_eq!(base.classify(5.000001), RiskLevel::Low);
    }

    #[test]
    fn risk_decay_crosses_high_band_on_seventh_step() {
        // 2 + 4 * 0.8^n <= 3  <=>  n >= 7
        let mut r = RiskState::new(0.8, 0.2, 3.0, 5.0)
            .unwrap()
            .with_initial(6.0);
        let levels: Vec<RiskLevel> = (0..8).map(|_| risk_update(&mut r, 2.0)).collect();
        assert!(levels[..6].iter().all(|l| *l != RiskLevel::High));
        assert_eq!(levels[6], RiskLevel::High);
    }

    #[test]
    fn first_sample_seeds_filter() {
        let mut r = RiskState::new(0.8, 0.2, 3.0, 5.0).unwrap();
        assert_eq!(risk_update(&mut r, 7.5), RiskLevel::Low);
        assert_eq!(r.spaciousness(), Some(7.5));
        assert!(RiskState::new(0.7, 0.2, 3.0, 5.0).is_err());
        assert!(RiskState::new(0.8, 0.2, 5.0, 3.0).is_err());
    }
}
