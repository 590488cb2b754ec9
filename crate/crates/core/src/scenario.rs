//! Scenario description and the deterministic tick loop that ties the cell,
//! the sensing pipeline, the state machine and the vehicle together.
//!
//! One UAV shares the uplink with another user. All UAV uplink traffic
//! (camera frames and control-state snapshots) rides one flow; the edge
//! answers every control snapshot with a small downlink command carrying its
//! most recent control output. Round trips are measured per snapshot.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::net::{measure_rtt, CellModel, SourceId, StepOutput, TrafficSource};
use crate::pfsm::{
    apply_action, emit_signals, rate_adapt_step, Fault, PfsmState, SignalDraws, SignalInputs,
    SignalMode, SignalSet, Supervisor,
};
use crate::plant::{
    controller_tick, onboard_fallback_tick, plant_step, ControllerConfig, PlantState, Reference,
    Vec3,
};
use crate::rng::{SimRng, Stream};
use crate::sched::{Direction, Enqueued, FlowId, LinkConfig, Packet, PacketKind, SchedError};
use crate::sensing::{
    clutter_prob, latency_condition, risk_update, spaciousness, LatencySample, LatencyWindows,
    PointCloud, RiskLevel, RiskState, SensingError, SigmoidParams,
};

/// When the UAV flow gets priority.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum QosMode {
    /// Equal priority throughout.
    Never,
    /// Prioritized throughout.
    Always,
    /// Chosen by the state machine.
    Dynamic,
}

/// Camera stream.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraConfig {
    /// Nominal bit rate (bits/s).
    pub rate_bps: f64,
    /// Lowest rate adaptation may reach (bits/s).
    pub floor_bps: f64,
    /// Frames per second.
    pub frame_hz: f64,
    /// Packet size (bits).
    pub packet_bits: u64,
}

/// Control-state uplink and command downlink.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlConfig {
    /// Snapshots per second.
    pub hz: f64,
    /// Snapshot packet size (bits).
    pub packet_bits: u64,
    /// Command packet size (bits).
    pub command_bits: u64,
}

/// The other user's uplink traffic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BackgroundConfig {
    /// Offered rate (bits/s).
    pub rate_bps: f64,
    /// Packet size (bits).
    pub packet_bits: u64,
    /// Active from (ms).
    pub start_ms: f64,
    /// Active until (ms).
    pub end_ms: f64,
    /// Queue limit of the background flow (bits); `None` is unbounded.
    pub buffer_bits: Option<u64>,
}

/// State machine and sensing parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PfsmParams {
    /// Camera frame latency condition (ms).
    pub camera: SigmoidParams,
    /// Control round-trip condition (ms).
    pub control: SigmoidParams,
    /// Clutter condition on spaciousness (m).
    pub clutter: SigmoidParams,
    /// Latency weights `(camera, control)`.
    pub weights: (f64, f64),
    /// Window sizes `(camera, control)` in samples.
    pub windows: (usize, usize),
    /// EMA coefficients `(alpha, beta)`.
    pub ema: (f64, f64),
    /// Risk bounds `(high, middle)` in metres.
    pub risk_bounds: (f64, f64),
    /// Threshold on the combined latency condition.
    pub latency_threshold: f64,
    /// Evaluation period (ms).
    pub eval_ms: f64,
    /// Rate adaptation multiplier.
    pub rate_factor: f64,
    /// Rate adaptation period (ms).
    pub rate_period_ms: f64,
    /// No round trip for this long raises `LINK_LOST` (ms).
    pub link_loss_ms: f64,
    /// Latency signal emission.
    pub signal_mode: SignalMode,
}

impl Default for PfsmParams {
    fn default() -> Self {
        PfsmParams {
            camera: SigmoidParams {
                mu: 3.0,
                rho: 61.0,
                th: 0.5,
            },
            control: SigmoidParams {
                mu: 5.0,
                rho: 27.0,
                th: 0.5,
            },
            clutter: SigmoidParams {
                mu: 5.0,
                rho: 3.0,
                th: 0.5,
            },
            weights: (0.35, 0.65),
            windows: (10, 50),
            ema: (0.8, 0.2),
            risk_bounds: (3.0, 5.0),
            latency_threshold: 0.5,
            eval_ms: 100.0,
            rate_factor: 0.8,
            rate_period_ms: 1000.0,
            link_loss_ms: 500.0,
            signal_mode: SignalMode::Deterministic,
        }
    }
}

/// Piecewise-constant spaciousness around the vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct Environment {
    /// `(from_ms, spaciousness_m)`, sorted by time; the first entry applies
    /// before its own start too.
    pub segments: Vec<(f64, f64)>,
    /// Standard deviation of per-point radius noise (m).
    pub noise_m: f64,
    /// Points per synthetic cloud.
    pub points: usize,
}

impl Environment {
    /// Constant spaciousness.
    pub fn constant(spaciousness_m: f64) -> Self {
        Environment {
            segments: alloc::vec![(0.0, spaciousness_m)],
            noise_m: 0.0,
            points: 64,
        }
    }

    /// Target spaciousness at `t_ms`.
    pub fn at(&self, t_ms: f64) -> f64 {
        let mut s = self.segments.first().map_or(f64::INFINITY, |seg| seg.1);
        for &(from, value) in &self.segments {
            if from <= t_ms {
                s = value;
            }
        }
        s
    }
}

/// A complete run description.
#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioConfig {
    /// Simulated time (ms).
    pub duration_ms: f64,
    /// Seed for every random stream.
    pub seed: u64,
    /// Trace interval (ms).
    pub report_ms: f64,
    /// Uplink.
    pub uplink: LinkConfig,
    /// Downlink.
    pub downlink: LinkConfig,
    /// Uniform propagation jitter half-width (ms).
    pub jitter_ms: f64,
    /// UAV camera.
    pub camera: CameraConfig,
    /// UAV control loop traffic.
    pub control: ControlConfig,
    /// Other user, if any.
    pub background: Option<BackgroundConfig>,
    /// QoS policy.
    pub qos: QosMode,
    /// UAV flow slope when prioritized.
    pub qos_slope: f64,
    /// Slope of unprioritized flows.
    pub default_slope: f64,
    /// Sensing and state machine parameters.
    pub pfsm: PfsmParams,
    /// Surroundings.
    pub environment: Environment,
    /// Radio outages `[start, end)` in ms.
    pub outages: Vec<(f64, f64)>,
    /// Controller and plant.
    pub plant: ControllerConfig,
    /// Path to follow.
    pub reference: Reference,
}

impl ScenarioConfig {
    /// The unloaded baseline: 47 Mbps of UAV traffic on an 81.3 Mbps uplink.
    pub fn baseline() -> Self {
        let uplink = LinkConfig {
            capacity_bps: 81.3e6,
            tti_ms: 0.5,
            base_delay_ms: 13.16,
            buffer_cap_bits: None,
        };
        ScenarioConfig {
            duration_ms: 120_000.0,
            seed: 1,
            report_ms: 100.0,
            uplink,
            downlink: LinkConfig {
                capacity_bps: 1400e6,
                ..uplink
            },
            jitter_ms: 0.0,
            camera: CameraConfig {
                rate_bps: 45.8e6,
                floor_bps: 5e6,
                frame_hz: 30.0,
                packet_bits: 12_000,
            },
            control: ControlConfig {
                hz: 100.0,
                packet_bits: 12_000,
                command_bits: 2000,
            },
            background: None,
            qos: QosMode::Never,
            qos_slope: 8.0,
            default_slope: 1.0,
            pfsm: PfsmParams::default(),
            environment: Environment::constant(10.0),
            outages: Vec::new(),
            plant: ControllerConfig::default(),
            reference: Reference::Circle {
                center: Vec3::new(0.0, 0.0, 2.0),
                radius_m: 1.0,
                period_s: 20.0,
            },
        }
    }

    /// Checks every invariant a run relies on.
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = |v: f64| v > 0.0 && v.is_finite();
        let check = |ok: bool, field: &'static str, reason: &'static str| {
            if ok {
                Ok(())
            } else {
                Err(ConfigError::Invalid { field, reason })
            }
        };
        check(
            positive(self.duration_ms),
            "duration_ms",
            "must be positive",
        )?;
        check(positive(self.report_ms), "report_ms", "must be positive")?;
        self.uplink.validate().map_err(|source| ConfigError::Link {
            field: "uplink",
            source,
        })?;
        self.downlink
            .validate()
            .map_err(|source| ConfigError::Link {
                field: "downlink",
                source,
            })?;
        check(
            self.uplink.tti_ms == self.downlink.tti_ms,
            "downlink.tti_ms",
            "must equal uplink.tti_ms",
        )?;
        let tti = self.uplink.tti_ms;
        for (field, v) in [
            ("report_ms", self.report_ms),
            ("plant.dt_ms", self.plant.dt_ms),
            ("plant.period_ms", self.plant.period_ms),
            ("pfsm.eval_ms", self.pfsm.eval_ms),
        ] {
            if !is_multiple(v, tti) {
                return Err(ConfigError::NotTtiMultiple(field));
            }
        }
        self.plant
            .validate()
            .map_err(|reason| ConfigError::Invalid {
                field: "plant",
                reason,
            })?;
        check(
            is_multiple(self.plant.period_ms, self.plant.dt_ms),
            "plant.period_ms",
            "must be a multiple of plant.dt_ms",
        )?;
        check(positive(self.control.hz), "control.hz", "must be positive")?;
        check(
            is_multiple(1000.0 / self.control.hz, self.plant.dt_ms),
            "control.hz",
            "control period must be a multiple of plant.dt_ms",
        )?;
        check(
            self.control.packet_bits > 0,
            "control.packet_bits",
            "must be positive",
        )?;
        check(
            self.control.command_bits > 0,
            "control.command_bits",
            "must be positive",
        )?;
        let c = &self.camera;
        check(positive(c.rate_bps), "camera.rate_bps", "must be positive")?;
        check(positive(c.frame_hz), "camera.frame_hz", "must be positive")?;
        check(c.packet_bits > 0, "camera.packet_bits", "must be positive")?;
        check(
            c.floor_bps > 0.0 && c.floor_bps <= c.rate_bps,
            "camera.floor_bps",
            "must lie in (0, rate_bps]",
        )?;
        if let Some(bg) = &self.background {
            check(
                positive(bg.rate_bps),
                "background.rate_bps",
                "must be positive",
            )?;
            check(
                bg.packet_bits > 0,
                "background.packet_bits",
                "must be positive",
            )?;
            check(
                bg.start_ms >= 0.0,
                "background.start_ms",
                "must be non-negative",
            )?;
            check(
                bg.start_ms < bg.end_ms,
                "background.end_ms",
                "must be later than start_ms",
            )?;
            check(
                bg.buffer_bits != Some(0),
                "background.buffer_bits",
                "must be positive when set",
            )?;
        }
        check(positive(self.qos_slope), "qos_slope", "must be positive")?;
        check(
            positive(self.default_slope),
            "default_slope",
            "must be positive",
        )?;
        check(
            self.jitter_ms >= 0.0 && self.jitter_ms.is_finite(),
            "jitter_ms",
            "must be non-negative",
        )?;
        let p = &self.pfsm;
        let sensing = |field: &'static str| move |source| ConfigError::Sensing { field, source };
        p.camera.validate().map_err(sensing("pfsm.camera"))?;
        p.control.validate().map_err(sensing("pfsm.control"))?;
        p.clutter.validate().map_err(sensing("pfsm.clutter"))?;
        check(
            p.windows.0 > 0 && p.windows.1 > 0,
            "pfsm.windows",
            "window sizes must be positive",
        )?;
        LatencyWindows::new(p.windows.0, p.windows.1, p.weights.0, p.weights.1)
            .map_err(sensing("pfsm.weights"))?;
        RiskState::new(p.ema.0, p.ema.1, 1.0, 2.0).map_err(sensing("pfsm.ema"))?;
        RiskState::new(0.5, 0.5, p.risk_bounds.0, p.risk_bounds.1)
            .map_err(sensing("pfsm.risk_bounds"))?;
        check(
            p.latency_threshold > 0.0 && p.latency_threshold < 1.0,
            "pfsm.latency_threshold",
            "must lie in (0, 1)",
        )?;
        check(
            p.rate_factor > 0.0 && p.rate_factor < 1.0,
            "pfsm.rate_factor",
            "must lie in (0, 1)",
        )?;
        check(
            positive(p.rate_period_ms),
            "pfsm.rate_period_ms",
            "must be positive",
        )?;
        check(
            positive(p.link_loss_ms),
            "pfsm.link_loss_ms",
            "must be positive",
        )?;
        let env = &self.environment;
        check(
            !env.segments.is_empty(),
            "environment.segments",
            "needs at least one segment",
        )?;
        check(env.points > 0, "environment.points", "must be positive")?;
        check(
            env.segments.windows(2).all(|w| w[1].0 >= w[0].0),
            "environment.segments",
            "must be sorted by start time",
        )?;
        check(
            env.segments.iter().all(|s| s.1 > 0.0 && s.1.is_finite()),
            "environment.segments",
            "spaciousness must be positive",
        )?;
        check(
            env.noise_m >= 0.0 && env.noise_m.is_finite(),
            "environment.noise_m",
            "must be non-negative",
        )?;
        check(
            self.outages.iter().all(|o| o.0 >= 0.0 && o.0 < o.1),
            "outages",
            "each must satisfy 0 <= start < end",
        )?;
        Ok(())
    }
}

fn is_multiple(value: f64, unit: f64) -> bool {
    let n = libm::round(value / unit);
    n >= 1.0 && libm::fabs(n * unit - value) < 1e-9
}

/// A configuration that cannot run. Each variant names the offending
/// field as a dotted path.
#[derive(Debug, Clone, PartialEq)]
pub enum ConfigError {
    /// A value out of range.
    Invalid {
        /// Offending field.
        field: &'static str,
        /// What is wrong with it.
        reason: &'static str,
    },
    /// An interval that is not a whole number of TTIs.
    NotTtiMultiple(&'static str),
    /// Link parameters.
    Link {
        /// `uplink` or `downlink`.
        field: &'static str,
        /// Cause.
        source: SchedError,
    },
    /// Sensing parameters.
    Sensing {
        /// Offending field.
        field: &'static str,
        /// Cause.
        source: SensingError,
    },
}

impl ConfigError {
    /// Dotted path of the offending field.
    pub fn field(&self) -> &'static str {
        match self {
            ConfigError::Invalid { field, .. }
            | ConfigError::Link { field, .. }
            | ConfigError::Sensing { field, .. } => field,
            ConfigError::NotTtiMultiple(field) => field,
        }
    }
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Invalid { field, reason } => write!(f, "{field}: {reason}"),
            ConfigError::NotTtiMultiple(field) => {
                write!(f, "{field}: must be a whole number of TTIs")
            }
            ConfigError::Link { field, source } => write!(f, "{field}: {source}"),
            ConfigError::Sensing { field, source } => write!(f, "{field}: {source}"),
        }
    }
}

impl core::error::Error for ConfigError {}

/// Why a run stopped early.
#[derive(Debug, Clone, PartialEq)]
pub enum RunError {
    /// Rejected before the first tick.
    Config(ConfigError),
    /// A contract violation at `tick` (time `at_ms`).
    Fault {
        /// TTI index.
        tick: u64,
        /// Simulated time (ms).
        at_ms: f64,
        /// What went wrong.
        kind: FaultKind,
    },
}

/// Contract violations detected inside the loop.
#[derive(Debug, Clone, PartialEq)]
pub enum FaultKind {
    /// The cell rejected an operation.
    Sched(SchedError),
    /// The state machine left its table.
    Pfsm(Fault),
}

impl fmt::Display for RunError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RunError::Config(e) => write!(f, "invalid scenario: {e}"),
            RunError::Fault { tick, at_ms, kind } => {
                write!(f, "contract violation at tick {tick} (t = {at_ms:.1} ms): ")?;
                match kind {
                    FaultKind::Sched(e) => write!(f, "{e}"),
                    FaultKind::Pfsm(e) => write!(f, "{e}"),
                }
            }
        }
    }
}

impl core::error::Error for RunError {}

impl From<ConfigError> for RunError {
    fn from(e: ConfigError) -> Self {
        RunError::Config(e)
    }
}

/// One reporting interval ending at `time_ms`.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct TraceRecord {
    /// End of the interval (ms).
    pub time_ms: f64,
    /// State after this interval's evaluation.
    pub state: PfsmState,
    /// Signals of this interval's evaluation.
    pub signals: SignalSet,
    /// Bits queued in the UAV uplink flow.
    pub ul_buffer_bits: u64,
    /// Age of the oldest queued UAV packet (ms).
    pub ul_hol_delay_ms: f64,
    /// Mean round trip of commands received in the interval (ms).
    pub rtt_ms: Option<f64>,
    /// Mean latency of frames completed in the interval (ms).
    pub cam_latency_ms: Option<f64>,
    /// Camera rate in effect (Mbps).
    pub cam_rate_mbps: f64,
    /// UAV bits received at the edge (Mbps).
    pub uav_goodput_mbps: f64,
    /// Background bits received (Mbps).
    pub bg_goodput_mbps: f64,
    /// Filtered spaciousness (m).
    pub s_k: f64,
    /// Combined latency condition, once estimates exist.
    pub p_lat: Option<f64>,
    /// Clutter condition.
    pub p_cs: f64,
    /// Distance to the reference (m).
    pub tracking_error: f64,
}

#[cfg(feature = "serde")]
impl serde::Serialize for SignalSet {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

/// A stretch of the run with constant background activity and state.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct Phase {
    /// Start (ms).
    pub start_ms: f64,
    /// End (ms).
    pub end_ms: f64,
    /// State throughout.
    pub state: PfsmState,
    /// Background user active.
    pub background: bool,
    /// Trace rows in the phase.
    pub rows: usize,
    /// Mean of the rows' round trips, over rows that have one (ms).
    pub mean_rtt_ms: Option<f64>,
    /// Mean UAV goodput (Mbps).
    pub mean_uav_goodput_mbps: f64,
    /// Mean background goodput (Mbps).
    pub mean_bg_goodput_mbps: f64,
    /// Largest tracking error (m).
    pub max_tracking_error: f64,
}

/// A stay in full onboard autonomy.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct FallbackEpisode {
    /// Entry time (ms).
    pub entered_at_ms: f64,
    /// Exit time, if the run left autonomy (ms).
    pub exited_at_ms: Option<f64>,
    /// Position held.
    pub hold: Vec3,
    /// Time from entry after which the distance to `hold` stayed below
    /// the settling tolerance (ms), if it did by the episode's end.
    pub settled_after_ms: Option<f64>,
}

/// Distance to the hold point that counts as settled (m).
pub const HOLD_TOLERANCE_M: f64 = 0.05;

/// State change of the machine.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct Transition {
    /// Evaluation time (ms).
    pub at_ms: f64,
    /// State left.
    pub from: PfsmState,
    /// State entered.
    pub to: PfsmState,
}

/// Whether the loop stayed under control.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum Verdict {
    /// Tracking error never crossed the divergence threshold.
    Stable,
    /// It did.
    Unstable,
}

/// Per-phase aggregates of a run.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize))]
pub struct RunSummary {
    /// Phases in time order.
    pub phases: Vec<Phase>,
    /// Time spent in each state (ms), keyed by state name.
    pub dwell_ms: BTreeMap<String, f64>,
    /// State changes.
    pub transitions: Vec<Transition>,
    /// Autonomy episodes.
    pub fallbacks: Vec<FallbackEpisode>,
    /// Largest tracking error (m).
    pub max_tracking_error: f64,
    /// First time the divergence threshold was crossed (ms).
    pub diverged_at_ms: Option<f64>,
    /// Stability verdict.
    pub verdict: Verdict,
}

struct Snapshot {
    packet: Packet,
    state: PlantState,
}

struct Interval {
    rtt_sum: f64,
    rtt_n: u32,
    cam_sum: f64,
    cam_n: u32,
    uav_bits: u64,
    bg_bits: u64,
}

impl Interval {
    fn new() -> Self {
        Interval {
            rtt_sum: 0.0,
            rtt_n: 0,
            cam_sum: 0.0,
            cam_n: 0,
            uav_bits: 0,
            bg_bits: 0,
        }
    }
}

fn mean(sum: f64, n: u32) -> Option<f64> {
    (n > 0).then(|| sum / n as f64)
}

fn ticks(ms: f64, tti: f64) -> u64 {
    libm::round(ms / tti) as u64
}

/// Runs a scenario to completion.
pub fn run(config: &ScenarioConfig) -> Result<(Vec<TraceRecord>, RunSummary), RunError> {
    config.validate()?;
    Sim::new(config)?.run()
}

struct Sim<'a> {
    cfg: &'a ScenarioConfig,
    cell: CellModel,
    out: StepOutput,
    uav_ul: FlowId,
    uav_dl: FlowId,
    camera: SourceId,
    bg_window: Option<(f64, f64)>,

    plant: PlantState,
    applied: Vec3,
    queued_commands: Vec<Vec3>,
    current_snapshot: PlantState,
    edge_state: Option<PlantState>,
    edge_command: Vec3,
    in_transit: BTreeMap<u64, Snapshot>,
    command_payload: BTreeMap<u64, Vec3>,
    hold: Vec3,
    max_error: f64,
    diverged_at: Option<f64>,

    windows: LatencyWindows,
    risk: RiskState,
    env_rng: SimRng,
    draws: SignalDraws,
    supervisor: Supervisor,
    state: PfsmState,
    previous_high: bool,
    last_signals: SignalSet,
    last_rtt_at: f64,
    last_rate_step: f64,
    cam_rate: f64,

    interval: Interval,
    traces: Vec<TraceRecord>,
    transitions: Vec<Transition>,
    fallbacks: Vec<FallbackEpisode>,
    last_unsettled: f64,
}

impl<'a> Sim<'a> {
    fn new(cfg: &'a ScenarioConfig) -> Result<Self, RunError> {
        let fault = |e: SchedError| RunError::Fault {
            tick: 0,
            at_ms: 0.0,
            kind: FaultKind::Sched(e),
        };
        let mut cell = CellModel::new(cfg.uplink, cfg.downlink)
            .map_err(fault)?
            .with_jitter(cfg.jitter_ms, cfg.seed);
        let initial_slope = match cfg.qos {
            QosMode::Always => cfg.qos_slope,
            _ => cfg.default_slope,
        };
        let uav_ul = cell
            .add_flow(Direction::Uplink, initial_slope)
            .map_err(fault)?;
        let uav_dl = cell
            .add_flow(Direction::Downlink, initial_slope)
            .map_err(fault)?;
        let cam = &cfg.camera;
        let camera = cell.add_source(
            TrafficSource::cbr_frames(cam.rate_bps, cam.frame_hz, cam.packet_bits)
                .with_floor(cam.floor_bps),
            uav_ul,
        );
        cell.add_source(
            TrafficSource::periodic_small(cfg.control.hz, cfg.control.packet_bits),
            uav_ul,
        );
        let mut bg_window = None;
        if let Some(bg) = &cfg.background {
            let flow = cell
                .add_flow(Direction::Uplink, cfg.default_slope)
                .map_err(fault)?;
            cell.set_buffer_cap(flow, bg.buffer_bits);
            cell.add_source(
                TrafficSource::onoff_background(bg.rate_bps, bg.packet_bits)
                    .with_window(bg.start_ms, bg.end_ms),
                flow,
            );
            bg_window = Some((bg.start_ms, bg.end_ms));
        }
        let p = &cfg.pfsm;
        let windows = LatencyWindows::new(p.windows.0, p.windows.1, p.weights.0, p.weights.1)
            .map_err(|source| ConfigError::Sensing {
                field: "pfsm.weights",
                source,
            })?;
        let risk = RiskState::new(p.ema.0, p.ema.1, p.risk_bounds.0, p.risk_bounds.1).map_err(
            |source| ConfigError::Sensing {
                field: "pfsm.ema",
                source,
            },
        )?;
        let plant = PlantState::at_rest_on(&cfg.reference, 0.0);
        let state = match cfg.qos {
            QosMode::Always => PfsmState::Q3,
            _ => PfsmState::Q1,
        };
        Ok(Sim {
            cfg,
            cell,
            out: StepOutput::default(),
            uav_ul,
            uav_dl,
            camera,
            bg_window,
            plant,
            applied: Vec3::ZERO,
            queued_commands: Vec::new(),
            current_snapshot: plant,
            edge_state: None,
            edge_command: Vec3::ZERO,
            in_transit: BTreeMap::new(),
            command_payload: BTreeMap::new(),
            hold: plant.position,
            max_error: plant.tracking_error,
            diverged_at: None,
            windows,
            risk,
            env_rng: SimRng::new(cfg.seed, Stream::Environment),
            draws: SignalDraws::new(cfg.seed),
            supervisor: Supervisor::new(0.0),
            state,
            previous_high: false,
            last_signals: SignalSet::from_parts(false, RiskLevel::Low, false),
            last_rtt_at: 0.0,
            last_rate_step: 0.0,
            cam_rate: cam.rate_bps,
            interval: Interval::new(),
            traces: Vec::new(),
            transitions: Vec::new(),
            fallbacks: Vec::new(),
            last_unsettled: 0.0,
        })
    }

    fn run(mut self) -> Result<(Vec<TraceRecord>, RunSummary), RunError> {
        let tti = self.cell.tti_ms();
        let total = ticks(self.cfg.duration_ms, tti);
        let plant_every = ticks(self.cfg.plant.dt_ms, tti);
        let ctrl_every = ticks(self.cfg.plant.period_ms, tti);
        let eval_every = ticks(self.cfg.pfsm.eval_ms, tti);
        let report_every = ticks(self.cfg.report_ms, tti);

        for tick in 0..total {
            let now = tick as f64 * tti;
            let fault = |kind| RunError::Fault {
                tick,
                at_ms: now,
                kind,
            };
            self.apply_outages(now);
            if tick % ctrl_every == 0 {
                self.edge_command = controller_tick(self.edge_state.as_ref(), &self.cfg.plant);
            }
            if tick % plant_every == 0 {
                self.advance_plant(now);
            }
            self.cell
                .step(&mut self.out)
                .map_err(|e| fault(FaultKind::Sched(e)))?;
            self.absorb_step().map_err(|e| fault(FaultKind::Sched(e)))?;

            let end = now + tti;
            if (tick + 1) % eval_every == 0 {
                self.evaluate(end).map_err(|e| fault(FaultKind::Pfsm(e)))?;
            }
            if (tick + 1) % report_every == 0 {
                self.report(end);
            }
        }
        let summary = self.summarize();
        Ok((self.traces, summary))
    }

    fn apply_outages(&mut self, now: f64) {
        let down = self.cfg.outages.iter().any(|&(a, b)| now >= a && now < b);
        if down == self.cell.link_up() {
            self.cell.set_link_up(!down);
        }
    }

    // Steps the vehicle over [now, now + dt] with whatever arrived before
    // `now`; the snapshot taken here is what a control packet created at
    // `now` carries.
    fn advance_plant(&mut self, now: f64) {
        let cfg = &self.cfg.plant;
        if let Some(u) = self.queued_commands.drain(..).next_back() {
            if self.state != PfsmState::QA {
                self.applied = u;
            }
        }
        if self.state == PfsmState::QA {
            self.applied = onboard_fallback_tick(&self.plant, self.hold, cfg);
            if (self.plant.position - self.hold).norm() >= HOLD_TOLERANCE_M {
                self.last_unsettled = now;
            }
        }
        self.current_snapshot = self.plant;
        self.plant = plant_step(
            &self.plant,
            self.applied,
            cfg.dt_ms,
            &self.cfg.reference,
            now + cfg.dt_ms,
        );
        self.max_error = self.max_error.max(self.plant.tracking_error);
        if self.diverged_at.is_none() && cfg.diverged(&self.plant) {
            self.diverged_at = Some(now + cfg.dt_ms);
        }
    }

    fn absorb_step(&mut self) -> Result<(), SchedError> {
        let out = core::mem::take(&mut self.out);
        for p in &out.emitted {
            if p.kind == PacketKind::ControlState {
                self.in_transit.insert(
                    p.id,
                    Snapshot {
                        packet: *p,
                        state: self.current_snapshot,
                    },
                );
            }
        }
        for d in &out.delivered {
            match (d.direction, d.packet.kind) {
                (Direction::Uplink, PacketKind::ControlState) => {
                    self.interval.uav_bits += d.packet.size;
                    if let Some(snap) = self.in_transit.get(&d.packet.id) {
                        self.edge_state = Some(snap.state);
                    }
                    let echo = PacketKind::Command {
                        echo_of: d.packet.id,
                    };
                    let sent = self.cell.enqueue(
                        self.uav_dl,
                        echo,
                        self.cfg.control.command_bits,
                        d.arrived_at,
                    )?;
                    match sent {
                        Enqueued::Accepted(id) => {
                            self.command_payload.insert(id, self.edge_command);
                        }
                        Enqueued::Dropped(_) => {
                            self.in_transit.remove(&d.packet.id);
                        }
                    }
                }
                (
                    Direction::Uplink,
                    PacketKind::Camera {
                        captured_at, last, ..
                    },
                ) => {
                    self.interval.uav_bits += d.packet.size;
                    if last {
                        let latency = d.arrived_at - captured_at;
                        self.windows.cam.push(LatencySample {
                            value: latency,
                            sent_at: captured_at,
                        });
                        self.interval.cam_sum += latency;
                        self.interval.cam_n += 1;
                    }
                }
                (Direction::Uplink, _) => self.interval.bg_bits += d.packet.size,
                (Direction::Downlink, PacketKind::Command { echo_of }) => {
                    if let Some(u) = self.command_payload.remove(&d.packet.id) {
                        self.queued_commands.push(u);
                    }
                    if let Some(snap) = self.in_transit.remove(&echo_of) {
                        if let Some(s) = measure_rtt(&snap.packet, d) {
                            self.windows.cc.push(LatencySample {
                                value: s.rtt,
                                sent_at: s.sent_at,
                            });
                            self.interval.rtt_sum += s.rtt;
                            self.interval.rtt_n += 1;
                            self.last_rtt_at = s.echoed_at;
                        }
                    }
                }
                (Direction::Downlink, _) => {}
            }
        }
        self.out = out;
        // snapshots lost with a flushed buffer never come back
        let horizon = self.cell.clock() - 10_000.0;
        while let Some(entry) = self.in_transit.first_entry() {
            if entry.get().packet.created_at >= horizon {
                break;
            }
            entry.remove();
        }
        Ok(())
    }

    fn sample_environment(&mut self, now: f64) -> (f64, RiskLevel) {
        let env = &self.cfg.environment;
        let target = env.at(now);
        let noise = env.noise_m;
        let rng = &mut self.env_rng;
        let cloud = PointCloud::sphere(self.plant.position, target, env.points, || {
            if noise > 0.0 {
                noise * rng.gaussian()
            } else {
                0.0
            }
        });
        let sample = spaciousness(&cloud).unwrap_or(target);
        let level = risk_update(&mut self.risk, sample);
        (self.risk.spaciousness().unwrap_or(sample), level)
    }

    fn p_lat(&self) -> Option<f64> {
        let (t1, t2) = self.windows.estimates()?;
        Some(latency_condition(
            t1,
            t2,
            &self.windows,
            &self.cfg.pfsm.camera,
            &self.cfg.pfsm.control,
        ))
    }

    fn evaluate(&mut self, now: f64) -> Result<(), Fault> {
        let p = self.cfg.pfsm;
        let (_, risk) = self.sample_environment(now);
        let link_ok = now - self.last_rtt_at <= p.link_loss_ms;
        let inputs = SignalInputs {
            p_lat: self.p_lat(),
            previous_high: self.previous_high,
            risk,
            link_ok,
        };
        let signals = emit_signals(&inputs, p.latency_threshold, p.signal_mode, &mut self.draws);
        self.previous_high = signals.high_latency();
        self.last_signals = signals;
        if self.cfg.qos != QosMode::Dynamic {
            return Ok(());
        }
        let fresh = self
            .windows
            .fresh_since(self.supervisor.action_changed_at());
        let at_floor = self.cam_rate <= self.cfg.camera.floor_bps;
        let step = self.supervisor.evaluate(signals, fresh, at_floor, now)?;
        if step.to != step.from {
            self.enter(step.from, step.to, now);
        }
        let action = step.action;
        let due = now - self.last_rate_step >= p.rate_period_ms - 1e-9;
        if action.offload && (step.action_changed && action.rate_adaptation || due) {
            let next = rate_adapt_step(
                self.cam_rate,
                self.cfg.camera.rate_bps,
                self.cfg.camera.floor_bps,
                action.rate_adaptation,
                !signals.high_latency(),
                p.rate_factor,
            );
            if next != self.cam_rate {
                self.cam_rate = self.cell.source_mut(self.camera).set_rate(next).rate_bps;
            }
            self.last_rate_step = now;
        }
        Ok(())
    }

    fn enter(&mut self, from: PfsmState, to: PfsmState, now: f64) {
        self.transitions.push(Transition {
            at_ms: now,
            from,
            to,
        });
        self.state = to;
        let slope = if apply_action(to).qos_enabled {
            self.cfg.qos_slope
        } else {
            self.cfg.default_slope
        };
        // slopes were validated positive, so this cannot fail
        let _ = self.cell.set_priority(self.uav_ul, slope);
        let _ = self.cell.set_priority(self.uav_dl, slope);
        if to == PfsmState::QA {
            self.hold = self.plant.position;
            self.last_unsettled = now;
            self.cell.source_mut(self.camera).set_enabled(false);
            self.fallbacks.push(FallbackEpisode {
                entered_at_ms: now,
                exited_at_ms: None,
                hold: self.hold,
                settled_after_ms: None,
            });
        } else if from == PfsmState::QA {
            self.close_fallback(now);
            self.queued_commands.clear();
            self.cell.source_mut(self.camera).set_enabled(true);
        }
    }

    fn close_fallback(&mut self, now: f64) {
        let last_unsettled = self.last_unsettled;
        if let Some(ep) = self.fallbacks.last_mut() {
            if ep.exited_at_ms.is_none() {
                ep.exited_at_ms = Some(now);
                let settled = (self.plant.position - ep.hold).norm() < HOLD_TOLERANCE_M;
                ep.settled_after_ms = settled.then(|| (last_unsettled - ep.entered_at_ms).max(0.0));
            }
        }
    }

    fn report(&mut self, now: f64) {
        let secs = self.cfg.report_ms / 1000.0;
        let iv = core::mem::replace(&mut self.interval, Interval::new());
        let flow = self.cell.flow(self.uav_ul);
        let s_k = self.risk.spaciousness().unwrap_or(f64::NAN);
        self.traces.push(TraceRecord {
            time_ms: now,
            state: self.state,
            signals: self.last_signals,
            ul_buffer_bits: flow.buffered_bits(),
            ul_hol_delay_ms: flow.head_of_line_delay(now),
            rtt_ms: mean(iv.rtt_sum, iv.rtt_n),
            cam_latency_ms: mean(iv.cam_sum, iv.cam_n),
            cam_rate_mbps: self.cam_rate / 1e6,
            uav_goodput_mbps: iv.uav_bits as f64 / secs / 1e6,
            bg_goodput_mbps: iv.bg_bits as f64 / secs / 1e6,
            s_k,
            p_lat: self.p_lat(),
            p_cs: clutter_prob(s_k, &self.cfg.pfsm.clutter),
            tracking_error: self.plant.tracking_error,
        });
    }

    fn background_during(&self, end: f64) -> bool {
        let start = end - self.cfg.report_ms;
        self.bg_window.is_some_and(|(a, b)| start >= a && start < b)
    }

    fn summarize(&mut self) -> RunSummary {
        let end = self.cfg.duration_ms;
        if self.state == PfsmState::QA {
            self.close_fallback(end);
        }
        let mut phases: Vec<Phase> = Vec::new();
        let mut dwell_ms = BTreeMap::new();
        for s in PfsmState::ALL {
            dwell_ms.insert(String::from(s.name()), 0.0);
        }
        let mut rtt_acc = (0.0, 0u32);
        for r in &self.traces {
            let bg = self.background_during(r.time_ms);
            *dwell_ms.entry(String::from(r.state.name())).or_insert(0.0) += self.cfg.report_ms;
            let extend = phases
                .last()
                .is_some_and(|ph| ph.state == r.state && ph.background == bg);
            if !extend {
                if let Some(ph) = phases.last_mut() {
                    ph.mean_rtt_ms = mean(rtt_acc.0, rtt_acc.1);
                }
                rtt_acc = (0.0, 0);
                phases.push(Phase {
                    start_ms: r.time_ms - self.cfg.report_ms,
                    end_ms: r.time_ms,
                    state: r.state,
                    background: bg,
                    rows: 0,
                    mean_rtt_ms: None,
                    mean_uav_goodput_mbps: 0.0,
                    mean_bg_goodput_mbps: 0.0,
                    max_tracking_error: 0.0,
                });
            }
            let ph = phases.last_mut().expect("pushed above");
            let n = ph.rows as f64;
            ph.mean_uav_goodput_mbps =
                (ph.mean_uav_goodput_mbps * n + r.uav_goodput_mbps) / (n + 1.0);
            ph.mean_bg_goodput_mbps = (ph.mean_bg_goodput_mbps * n + r.bg_goodput_mbps) / (n + 1.0);
            ph.max_tracking_error = ph.max_tracking_error.max(r.tracking_error);
            ph.rows += 1;
            ph.end_ms = r.time_ms;
            if let Some(v) = r.rtt_ms {
                rtt_acc.0 += v;
                rtt_acc.1 += 1;
            }
        }
        if let Some(ph) = phases.last_mut() {
            ph.mean_rtt_ms = mean(rtt_acc.0, rtt_acc.1);
        }
        RunSummary {
            phases,
            dwell_ms,
            transitions: core::mem::take(&mut self.transitions),
            fallbacks: core::mem::take(&mut self.fallbacks),
            max_tracking_error: self.max_error,
            diverged_at_ms: self.diverged_at,
            verdict: if self.diverged_at.is_some() {
                Verdict::Unstable
            } else {
                Verdict::Stable
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn short(duration_ms: f64) -> ScenarioConfig {
        ScenarioConfig {
            duration_ms,
            ..ScenarioConfig::baseline()
        }
    }

    #[test]
    fn one_record_per_interval() {
        let (traces, summary) = run(&short(2000.0)).unwrap();
        assert_eq!(traces.len(), 20);
        assert!(traces.windows(2).all(|w| w[1].time_ms > w[0].time_ms));
        assert_eq!(traces[0].time_ms, 100.0);
        assert_eq!(summary.phases.len(), 1);
        assert_eq!(summary.dwell_ms["q1"], 2000.0);
    }

    #[test]
    fn unloaded_link_carries_offered_load() {
        let (traces, summary) = run(&short(3000.0)).unwrap();
        let tail = &traces[10..];
        let uav: f64 = tail.iter().map(|r| r.uav_goodput_mbps).sum::<f64>() / tail.len() as f64;
        assert!((uav - 47.0).abs() < 1.0, "{uav}");
        assert!(tail.iter().all(|r| r.bg_goodput_mbps == 0.0));
        assert_eq!(summary.verdict, Verdict::Stable);
    }

    #[test]
    fn invalid_config_is_rejected_before_running() {
        let mut cfg = short(1000.0);
        cfg.report_ms = 0.3;
        assert_eq!(
            run(&cfg).unwrap_err(),
            RunError::Config(ConfigError::NotTtiMultiple("report_ms"))
        );
        let mut cfg = short(1000.0);
        cfg.pfsm.weights = (0.5, 0.6);
        assert!(matches!(
            run(&cfg).unwrap_err(),
            RunError::Config(ConfigError::Sensing {
                field: "pfsm.weights",
                source: SensingError::WeightsNotConvex(..)
            })
        ));
    }

    #[test]
    fn environment_profile_lookup() {
        let env = Environment {
            segments: alloc::vec![(0.0, 4.0), (80_000.0, 6.0)],
            noise_m: 0.0,
            points: 8,
        };
        assert_eq!(env.at(0.0), 4.0);
        assert_eq!(env.at(79_999.0), 4.0);
        assert_eq!(env.at(80_000.0), 6.0);
    }
}
