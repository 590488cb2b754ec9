//! Delayed closed-loop UAV proxy: a per-axis double integrator steered by a
//! PD controller that only ever sees the state as it was when the last
//! uplink snapshot left the vehicle.

use alloc::collections::VecDeque;
use core::ops::{Add, Mul, Sub};

/// A 3D vector in metres (or m/s, m/s²).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Vec3 {
    /// x component.
    pub x: f64,
    /// y component.
    pub y: f64,
    /// z component.
    pub z: f64,
}

impl Vec3 {
    /// The origin.
    pub const ZERO: Vec3 = Vec3 {
        x: 0.0,
        y: 0.0,
        z: 0.0,
    };

    /// Builds a vector.
    pub const fn new(x: f64, y: f64, z: f64) -> Self {
        Vec3 { x, y, z }
    }

    /// Euclidean length.
    pub fn norm(self) -> f64 {
        libm::sqrt(self.x * self.x + self.y * self.y + self.z * self.z)
    }

    /// True when all components are finite.
    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    /// Scales the vector down so its norm is at most `limit`.
    pub fn clamp_norm(self, limit: f64) -> Self {
        let n = self.norm();
        if n > limit && n > 0.0 {
            self * (limit / n)
        } else {
            self
        }
    }
}

impl Add for Vec3 {
    type Output = Vec3;
    fn add(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl Sub for Vec3 {
    type Output = Vec3;
    fn sub(self, o: Vec3) -> Vec3 {
        Vec3::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl Mul<f64> for Vec3 {
    type Output = Vec3;
    fn mul(self, k: f64) -> Vec3 {
        Vec3::new(self.x * k, self.y * k, self.z * k)
    }
}

/// Desired path handed down by the mission planner.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Reference {
    /// Hold a fixed point.
    Hover(Vec3),
    /// Horizontal circle, counter-clockwise, starting on the +x side.
    Circle {
        /// Circle centre.
        center: Vec3,
        /// Radius (m).
        radius_m: f64,
        /// Time per revolution (s).
        period_s: f64,
    },
}

impl Reference {
    /// Reference position and velocity at `t_ms`.
    pub fn at(&self, t_ms: f64) -> (Vec3, Vec3) {
        match *self {
            Reference::Hover(p) => (p, Vec3::ZERO),
            Reference::Circle {
                center,
                radius_m,
                period_s,
            } => {
                let w = core::f64::consts::TAU / period_s;
                let a = w * t_ms / 1000.0;
                let (s, c) = (libm::sin(a), libm::cos(a));
                (
                    center + Vec3::new(radius_m * c, radius_m * s, 0.0),
                    Vec3::new(-radius_m * w * s, radius_m * w * c, 0.0),
                )
            }
        }
    }
}

/// Vehicle state together with the reference it is tracking.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlantState {
    /// Position (m).
    pub position: Vec3,
    /// Velocity (m/s).
    pub velocity: Vec3,
    /// Reference position (m).
    pub reference: Vec3,
    /// Reference velocity (m/s).
    pub reference_velocity: Vec3,
    /// `|position - reference|` (m).
    pub tracking_error: f64,
}

impl PlantState {
    /// At rest on the reference at `t_ms`.
    pub fn at_rest_on(reference: &Reference, t_ms: f64) -> Self {
        let (r, _) = reference.at(t_ms);
        let mut s = PlantState {
            position: r,
            velocity: Vec3::ZERO,
            reference: r,
            reference_velocity: Vec3::ZERO,
            tracking_error: 0.0,
        };
        s.retarget(reference, t_ms);
        s
    }

    /// Moves the reference to its value at `t_ms` and recomputes the error.
    pub fn retarget(&mut self, reference: &Reference, t_ms: f64) {
        let (r, v) = reference.at(t_ms);
        self.reference = r;
        self.reference_velocity = v;
        self.tracking_error = (self.position - r).norm();
    }
}

/// Edge (and onboard fallback) controller parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ControllerConfig {
    /// Control period T_MPC (ms).
    pub period_ms: f64,
    /// Plant integration step (ms).
    pub dt_ms: f64,
    /// Proportional gain (1/s²).
    pub kp: f64,
    /// Derivative gain (1/s).
    pub kd: f64,
    /// Acceleration limit (m/s²).
    pub command_limit: f64,
    /// Tracking error above which the loop is declared unstable (m).
    pub divergence_m: f64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            period_ms: 50.0,
            dt_ms: 10.0,
            kp: 4.0,
            kd: 3.0,
            command_limit: 5.0,
            divergence_m: 10.0,
        }
    }
}

impl ControllerConfig {
    /// Checks positivity of periods, gains and limits.
    pub fn validate(&self) -> Result<(), &'static str> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.period_ms) || !positive(self.dt_ms) {
            return Err("controller period and plant step must be positive");
        }
        if !positive(self.kp) || !positive(self.kd) {
            return Err("controller gains must be positive");
        }
        if !positive(self.command_limit) || !positive(self.divergence_m) {
            return Err("command limit and divergence threshold must be positive");
        }
        Ok(())
    }

    /// True when `state` counts as diverged.
    #[allow(clippy::neg_cmp_op_on_partial_ord)] // NaN error counts as diverged
    pub fn diverged(&self, state: &PlantState) -> bool {
        !(state.tracking_error <= self.divergence_m)
            || !state.position.is_finite()
            || !state.velocity.is_finite()
    }
}

fn pd(target: Vec3, target_velocity: Vec3, state: &PlantState, config: &ControllerConfig) -> Vec3 {
    let u = (target - state.position) * config.kp + (target_velocity - state.velocity) * config.kd;
    u.clamp_norm(config.command_limit)
}

/// Edge controller: PD on the delayed state's error against the reference
/// it carried. Holds (zero command) until the first state arrives.
pub fn controller_tick(delayed_state: Option<&PlantState>, config: &ControllerConfig) -> Vec3 {
    match delayed_state {
        Some(s) => pd(s.reference, s.reference_velocity, s, config),
        None => Vec3::ZERO,
    }
}

/// Onboard fallback: PD toward `hold` on the undelayed local state.
pub fn onboard_fallback_tick(state: &PlantState, hold: Vec3, config: &ControllerConfig) -> Vec3 {
    pd(hold, Vec3::ZERO, state, config)
}

/// Advances the double integrator by `dt_ms` under constant `command`,
/// then moves the reference to `t_ms` (the end of the step).
pub fn plant_step(
    state: &PlantState,
    command: Vec3,
    dt_ms: f64,
    reference: &Reference,
    t_ms: f64,
) -> PlantState {
    let dt = dt_ms / 1000.0;
    let mut next = *state;
    next.position = state.position + state.velocity * dt + command * (0.5 * dt * dt);
    next.velocity = state.velocity + command * dt;
    next.retarget(reference, t_ms);
    next
}

/// Outcome of a closed loop run with prescribed network delays.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LoopOutcome {
    /// Largest tracking error over the whole run (m).
    pub max_error: f64,
    /// Largest tracking error after the warm-up (m).
    pub steady_max_error: f64,
    /// Tracking error at the end (m).
    pub final_error: f64,
    /// Time divergence was first detected (ms).
    pub diverged_at: Option<f64>,
}

/// Runs the loop with state snapshots every `snapshot_ms`, the controller
/// every `config.period_ms`, and one-way delays given by `delays(t_ms)` as
/// `(uplink, downlink)` in ms. Nothing else touches the network.
pub fn fixed_delay_loop(
    config: &ControllerConfig,
    reference: &Reference,
    duration_ms: f64,
    warmup_ms: f64,
    snapshot_ms: f64,
    mut delays: impl FnMut(f64) -> (f64, f64),
) -> LoopOutcome {
    let steps = libm::round(duration_ms / config.dt_ms) as u64;
    let snap_every = (libm::round(snapshot_ms / config.dt_ms) as u64).max(1);
    let ctrl_every = (libm::round(config.period_ms / config.dt_ms) as u64).max(1);

    let mut state = PlantState::at_rest_on(reference, 0.0);
    // (arrival at edge, snapshot)
    let mut uplink: VecDeque<(f64, PlantState)> = VecDeque::new();
    // (arrival at UAV, command)
    let mut downlink: VecDeque<(f64, Vec3)> = VecDeque::new();
    let mut latest: Option<PlantState> = None;
    let mut applied = Vec3::ZERO;
    let mut out = LoopOutcome {
        max_error: 0.0,
        steady_max_error: 0.0,
        final_error: 0.0,
        diverged_at: None,
    };

    for k in 0..steps {
        let t = k as f64 * config.dt_ms;
        let (ul, dl) = delays(t);
        while uplink.front().is_some_and(|(at, _)| *at <= t) {
            latest = uplink.pop_front().map(|(_, s)| s);
        }
        while downlink.front().is_some_and(|(at, _)| *at <= t) {
            applied = downlink.pop_front().expect("peeked").1;
        }
        if k % snap_every == 0 {
            uplink.push_back((t + ul, state));
        }
        if k % ctrl_every == 0 {
            let u = controller_tick(latest.as_ref(), config);
            // FIFO link: a shorter delay never overtakes an earlier packet
            let at = downlink
                .back()
                .map_or(t + dl, |(last, _)| (t + dl).max(*last));
            downlink.push_back((at, u));
        }
        state = plant_step(&state, applied, config.dt_ms, reference, t + config.dt_ms);
        let e = state.tracking_error;
        out.max_error = out.max_error.max(e);
        if t >= warmup_ms {
            out.steady_max_error = out.steady_max_error.max(e);
        }
        if out.diverged_at.is_none() && config.diverged(&state) {
            out.diverged_at = Some(t + config.dt_ms);
        }
        out.final_error = e;
    }
    out
}
