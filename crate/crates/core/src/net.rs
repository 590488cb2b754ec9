//! The cell: traffic sources feeding QoS flows, one scheduler per direction,
//! and propagation to the far end.
//!
//! A [`CellModel`] is stepped one TTI at a time. Each step the sources emit
//! what falls due in `[clock, clock + tti)`, both links run one scheduling
//! round over packets created by the TTI start, and every sent packet lands
//! at the far end `base_delay` after its last bit left.

use alloc::collections::BinaryHeap;
use alloc::vec::Vec;
use core::cmp::Ordering;

use crate::rng::{SimRng, Stream};
use crate::sched::{
    schedule_tti, Allocation, Departure, Direction, Enqueued, FlowId, LinkConfig, Packet,
    PacketKind, QosFlow, SchedError,
};

/// How a source shapes its traffic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SourceKind {
    /// Frames at `frame_hz`, each of `rate / frame_hz` bits, sent as
    /// `packet_bits` packets paced evenly over the frame interval.
    CbrFrames {
        /// Frames per second.
        frame_hz: f64,
        /// Packet (MTU) size in bits.
        packet_bits: u64,
    },
    /// Fixed-size packets at a fixed rate (control state).
    PeriodicSmall {
        /// Packets per second.
        hz: f64,
        /// Packet size in bits.
        packet_bits: u64,
    },
    /// Constant-rate packet stream of another user.
    OnOffBackground {
        /// Packet size in bits.
        packet_bits: u64,
    },
}

/// Result of a rate change request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateChange {
    /// Rate now in effect (bits/s).
    pub rate_bps: f64,
    /// True when the request was below the floor and got clamped.
    pub clamped: bool,
}

#[derive(Debug, Clone, Copy)]
struct FramePlan {
    start: f64,
    bits: u64,
    packets: u64,
    next: u64,
}

/// A traffic generator. Inactive or disabled sources emit nothing.
#[derive(Debug, Clone)]
pub struct TrafficSource {
    kind: SourceKind,
    rate_bps: f64,
    floor_bps: f64,
    window: (f64, f64),
    enabled: bool,
    seq: u64,
    next_at: f64,
    frame: Option<FramePlan>,
}

impl TrafficSource {
    /// Camera-style frame source at `rate_bps`.
    pub fn cbr_frames(rate_bps: f64, frame_hz: f64, packet_bits: u64) -> Self {
        Self::new(
            SourceKind::CbrFrames {
                frame_hz,
                packet_bits,
            },
            rate_bps,
        )
    }

    /// Fixed-size periodic packets; the rate follows from `hz * packet_bits`.
    pub fn periodic_small(hz: f64, packet_bits: u64) -> Self {
        Self::new(
            SourceKind::PeriodicSmall { hz, packet_bits },
            hz * packet_bits as f64,
        )
    }

    /// Constant-rate background stream.
    pub fn onoff_background(rate_bps: f64, packet_bits: u64) -> Self {
        Self::new(SourceKind::OnOffBackground { packet_bits }, rate_bps)
    }

    fn new(kind: SourceKind, rate_bps: f64) -> Self {
        TrafficSource {
            kind,
            rate_bps,
            floor_bps: 0.0,
            window: (0.0, f64::INFINITY),
            enabled: true,
            seq: 0,
            next_at: f64::NAN,
            frame: None,
        }
    }

    /// Restricts emission to `[start_ms, end_ms)`.
    pub fn with_window(mut self, start_ms: f64, end_ms: f64) -> Self {
        self.window = (start_ms, end_ms);
        self
    }

    /// Lowest rate [`set_rate`](Self::set_rate) will accept.
    pub fn with_floor(mut self, floor_bps: f64) -> Self {
        self.floor_bps = floor_bps;
        self
    }

    /// Shaping parameters.
    pub fn kind(&self) -> SourceKind {
        self.kind
    }

    /// Current rate in bits/s.
    pub fn rate_bps(&self) -> f64 {
        self.rate_bps
    }

    /// Rate floor in bits/s.
    pub fn floor_bps(&self) -> f64 {
        self.floor_bps
    }

    /// Active window `[start, end)` in ms.
    pub fn window(&self) -> (f64, f64) {
        self.window
    }

    /// True when `t_ms` is inside the active window.
    pub fn is_active_at(&self, t_ms: f64) -> bool {
        t_ms >= self.window.0 && t_ms < self.window.1
    }

    /// Whether the source is switched on.
    pub fn is_enabled(&self) -> bool {
        self.enabled
    }

    /// Switches emission on or off. Frame sources finish the frame in
    /// progress and resume on the next frame boundary.
    pub fn set_enabled(&mut self, enabled: bool) {
        self.enabled = enabled;
    }

    /// Changes the rate; frame sources apply it from the next frame. Rates
    /// below the floor are clamped and flagged.
    pub fn set_rate(&mut self, rate_bps: f64) -> RateChange {
        let clamped = rate_bps < self.floor_bps;
        self.rate_bps = if clamped { self.floor_bps } else { rate_bps };
        if let SourceKind::PeriodicSmall { hz, packet_bits } = &mut self.kind {
            *hz = self.rate_bps / *packet_bits as f64;
        }
        RateChange {
            rate_bps: self.rate_bps,
            clamped,
        }
    }

    /// Emits every packet due before `end_ms` through `emit(kind, bits, at)`.
    pub fn emit_until(&mut self, end_ms: f64, mut emit: impl FnMut(PacketKind, u64, f64)) {
        match self.kind {
            SourceKind::CbrFrames {
                frame_hz,
                packet_bits,
            } => self.emit_frames(end_ms, frame_hz, packet_bits, &mut emit),
            SourceKind::PeriodicSmall { packet_bits, .. } => {
                self.emit_constant(end_ms, packet_bits, PacketKind::ControlState, &mut emit)
            }
            SourceKind::OnOffBackground { packet_bits } => {
                self.emit_constant(end_ms, packet_bits, PacketKind::Background, &mut emit)
            }
        }
    }

    fn emit_constant(
        &mut self,
        end_ms: f64,
        packet_bits: u64,
        kind: PacketKind,
        emit: &mut impl FnMut(PacketKind, u64, f64),
    ) {
        if self.next_at.is_nan() {
            self.next_at = self.window.0;
        }
        while self.next_at < end_ms && self.next_at < self.window.1 {
            if self.rate_bps <= 0.0 {
                self.next_at = end_ms;
                break;
            }
            if self.enabled {
                emit(kind, packet_bits, self.next_at);
            }
            self.seq += 1;
            self.next_at += packet_bits as f64 * 1000.0 / self.rate_bps;
        }
    }

    fn emit_frames(
        &mut self,
        end_ms: f64,
        frame_hz: f64,
        packet_bits: u64,
        emit: &mut impl FnMut(PacketKind, u64, f64),
    ) {
        let period = 1000.0 / frame_hz;
        loop {
            let plan = match self.frame {
                Some(plan) => plan,
                None => {
                    let start = self.window.0 + self.seq as f64 * period;
                    if start >= end_ms || start >= self.window.1 {
                        return;
                    }
                    let bits = libm::round(self.rate_bps * period / 1000.0) as u64;
                    if !self.enabled || bits == 0 {
                        self.seq += 1;
                        continue;
                    }
                    let packets = bits.div_ceil(packet_bits);
                    let plan = FramePlan {
                        start,
                        bits,
                        packets,
                        next: 0,
                    };
                    self.frame = Some(plan);
                    plan
                }
            };
            let at = plan.start + plan.next as f64 * period / plan.packets as f64;
            if at >= end_ms {
                return;
            }
            let last = plan.next + 1 == plan.packets;
            let size = if last {
                plan.bits - (plan.packets - 1) * packet_bits
            } else {
                packet_bits
            };
            emit(
                PacketKind::Camera {
                    frame: self.seq,
                    captured_at: plan.start,
                    last,
                },
                size,
                at,
            );
            if last {
                self.frame = None;
                self.seq += 1;
            } else {
                self.frame = Some(FramePlan {
                    next: plan.next + 1,
                    ..plan
                });
            }
        }
    }
}

/// A packet that reached the far end of its link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Delivery {
    /// The packet as sent.
    pub packet: Packet,
    /// Direction it travelled.
    pub direction: Direction,
    /// When its last bit left the transmitter (ms).
    pub departed_at: f64,
    /// When it arrived (ms).
    pub arrived_at: f64,
}

/// One control/command round trip.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RttSample {
    /// Control packet creation time (ms).
    pub sent_at: f64,
    /// Command arrival time at the UAV (ms).
    pub echoed_at: f64,
    /// `ul_delay + dl_delay` (ms).
    pub rtt: f64,
    /// Control creation to edge arrival (ms).
    pub ul_delay: f64,
    /// Command creation at the edge to UAV arrival (ms).
    pub dl_delay: f64,
}

/// Pairs a control packet with the command that answers it.
///
/// The edge answers on arrival, so the command's creation time is the
/// control packet's arrival time. Returns `None` when the command does not
/// echo this control packet.
pub fn measure_rtt(control: &Packet, command: &Delivery) -> Option<RttSample> {
    match command.packet.kind {
        PacketKind::Command { echo_of } if echo_of == control.id => {
            let ul_delay = command.packet.created_at - control.created_at;
            let dl_delay = command.arrived_at - command.packet.created_at;
            Some(RttSample {
                sent_at: control.created_at,
                echoed_at: command.arrived_at,
                rtt: ul_delay + dl_delay,
                ul_delay,
                dl_delay,
            })
        }
        _ => None,
    }
}

/// Handle to a source registered with a cell.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SourceId(pub usize);

#[derive(Debug, Clone, Copy)]
struct InFlight {
    arrive_at: f64,
    seq: u64,
    delivery: Delivery,
}

impl PartialEq for InFlight {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for InFlight {}

impl PartialOrd for InFlight {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for InFlight {
    // min-heap on (arrival, send order)
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .arrive_at
            .total_cmp(&self.arrive_at)
            .then(other.seq.cmp(&self.seq))
    }
}

/// Scratch buffers filled by [`CellModel::step`].
#[derive(Debug, Clone, Default)]
pub struct StepOutput {
    /// Packets the sources emitted this TTI, in creation order.
    pub emitted: Vec<Packet>,
    /// Packets that reached the far end this TTI, in arrival order.
    pub delivered: Vec<Delivery>,
    /// Uplink scheduling result.
    pub uplink: Allocation,
    /// Downlink scheduling result.
    pub downlink: Allocation,
}

/// Uplink and downlink of one cell with their flows and sources.
#[derive(Debug, Clone)]
pub struct CellModel {
    uplink: LinkConfig,
    downlink: LinkConfig,
    ul_flows: Vec<QosFlow>,
    dl_flows: Vec<QosFlow>,
    slots: Vec<(Direction, usize)>,
    caps: Vec<Option<u64>>,
    sources: Vec<(TrafficSource, FlowId)>,
    tick: u64,
    link_up: bool,
    in_flight: BinaryHeap<InFlight>,
    sent: u64,
    jitter: Option<(f64, SimRng)>,
    departures: Vec<Departure>,
    pending: Vec<(f64, usize, PacketKind, u64)>,
}

impl CellModel {
    /// An empty cell. Both directions must share one TTI.
    pub fn new(uplink: LinkConfig, downlink: LinkConfig) -> Result<Self, SchedError> {
        uplink.validate()?;
        downlink.validate()?;
        if uplink.tti_ms != downlink.tti_ms {
            return Err(SchedError::InvalidLink(
                "uplink and downlink must share the TTI",
            ));
        }
        Ok(CellModel {
            uplink,
            downlink,
            ul_flows: Vec::new(),
            dl_flows: Vec::new(),
            slots: Vec::new(),
            caps: Vec::new(),
            sources: Vec::new(),
            tick: 0,
            link_up: true,
            in_flight: BinaryHeap::new(),
            sent: 0,
            jitter: None,
            departures: Vec::new(),
            pending: Vec::new(),
        })
    }

    /// Adds uniform `±half_width_ms` jitter to every propagation delay.
    pub fn with_jitter(mut self, half_width_ms: f64, seed: u64) -> Self {
        if half_width_ms > 0.0 {
            self.jitter = Some((half_width_ms, SimRng::new(seed, Stream::Jitter)));
        }
        self
    }

    /// Current time (ms): start of the next TTI.
    pub fn clock(&self) -> f64 {
        self.tick as f64 * self.uplink.tti_ms
    }

    /// The TTI length (ms).
    pub fn tti_ms(&self) -> f64 {
        self.uplink.tti_ms
    }

    /// Link parameters for `direction`.
    pub fn link(&self, direction: Direction) -> &LinkConfig {
        match direction {
            Direction::Uplink => &self.uplink,
            Direction::Downlink => &self.downlink,
        }
    }

    /// Registers a flow.
    pub fn add_flow(&mut self, direction: Direction, slope: f64) -> Result<FlowId, SchedError> {
        let id = FlowId(self.slots.len() as u32);
        let flow = QosFlow::new(id, direction, slope)?;
        let flows = self.flows_mut(direction);
        flows.push(flow);
        let idx = flows.len() - 1;
        self.slots.push((direction, idx));
        self.caps.push(self.link(direction).buffer_cap_bits);
        Ok(id)
    }

    /// Overrides the link's buffer cap for one flow.
    pub fn set_buffer_cap(&mut self, flow: FlowId, cap_bits: Option<u64>) {
        self.caps[flow.0 as usize] = cap_bits;
    }

    /// Attaches a source feeding `flow`.
    pub fn add_source(&mut self, source: TrafficSource, flow: FlowId) -> SourceId {
        self.sources.push((source, flow));
        SourceId(self.sources.len() - 1)
    }

    fn flows_mut(&mut self, direction: Direction) -> &mut Vec<QosFlow> {
        match direction {
            Direction::Uplink => &mut self.ul_flows,
            Direction::Downlink => &mut self.dl_flows,
        }
    }

    /// The flow with id `id`.
    ///
    /// # Panics
    /// If `id` was not issued by this cell.
    pub fn flow(&self, id: FlowId) -> &QosFlow {
        let (dir, idx) = self.slots[id.0 as usize];
        match dir {
            Direction::Uplink => &self.ul_flows[idx],
            Direction::Downlink => &self.dl_flows[idx],
        }
    }

    fn flow_mut(&mut self, id: FlowId) -> &mut QosFlow {
        let (dir, idx) = self.slots[id.0 as usize];
        &mut self.flows_mut(dir)[idx]
    }

    /// Flows of one direction.
    pub fn flows(&self, direction: Direction) -> &[QosFlow] {
        match direction {
            Direction::Uplink => &self.ul_flows,
            Direction::Downlink => &self.dl_flows,
        }
    }

    /// The source with id `id`.
    pub fn source(&self, id: SourceId) -> &TrafficSource {
        &self.sources[id.0].0
    }

    /// Mutable access to a source (rate changes, enabling).
    pub fn source_mut(&mut self, id: SourceId) -> &mut TrafficSource {
        &mut self.sources[id.0].0
    }

    /// Changes a flow's slope from the next TTI on.
    pub fn set_priority(&mut self, flow: FlowId, slope: f64) -> Result<(), SchedError> {
        self.flow_mut(flow).set_priority(slope)
    }

    /// Whether the radio link is available.
    pub fn link_up(&self) -> bool {
        self.link_up
    }

    /// Takes the radio link down or up. Going down drops every queued bit;
    /// while down, offered packets are dropped and nothing is scheduled.
    /// Packets already propagating still arrive.
    pub fn set_link_up(&mut self, up: bool) {
        if self.link_up && !up {
            self.ul_flows
                .iter_mut()
                .chain(self.dl_flows.iter_mut())
                .for_each(QosFlow::flush);
        }
        self.link_up = up;
    }

    /// Offers a packet to `flow` directly (edge-originated traffic).
    pub fn enqueue(
        &mut self,
        flow: FlowId,
        kind: PacketKind,
        size: u64,
        created_at: f64,
    ) -> Result<Enqueued, SchedError> {
        let cap = self.caps[flow.0 as usize];
        let up = self.link_up;
        let f = self.flow_mut(flow);
        if !up {
            if size == 0 {
                return Err(SchedError::EmptyPacket);
            }
            return Ok(Enqueued::Dropped(f.reject(size)));
        }
        f.enqueue(kind, size, created_at, cap)
    }

    /// Advances one TTI.
    pub fn step(&mut self, out: &mut StepOutput) -> Result<(), SchedError> {
        out.emitted.clear();
        out.delivered.clear();
        let start = self.clock();
        let end = start + self.tti_ms();

        let pending = &mut self.pending;
        pending.clear();
        for (i, (source, _)) in self.sources.iter_mut().enumerate() {
            source.emit_until(end, |kind, size, at| pending.push((at, i, kind, size)));
        }
        // sources sharing a flow must interleave by creation time
        pending.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut emitted = core::mem::take(&mut self.pending);
        for &(at, i, kind, size) in &emitted {
            let flow = self.sources[i].1;
            if let Enqueued::Accepted(id) = self.enqueue(flow, kind, size, at)? {
                out.emitted.push(Packet {
                    id,
                    flow,
                    size,
                    created_at: at,
                    kind,
                });
            }
        }
        emitted.clear();
        self.pending = emitted;

        if self.link_up {
            out.uplink = self.schedule(Direction::Uplink, start);
            out.downlink = self.schedule(Direction::Downlink, start);
        } else {
            out.uplink = Allocation {
                tti_start: start,
                grants: Vec::new(),
            };
            out.downlink = Allocation {
                tti_start: start,
                grants: Vec::new(),
            };
        }

        while let Some(top) = self.in_flight.peek() {
            if top.arrive_at >= end {
                break;
            }
            out.delivered
                .push(self.in_flight.pop().expect("peeked").delivery);
        }
        self.tick += 1;
        Ok(())
    }

    fn schedule(&mut self, direction: Direction, start: f64) -> Allocation {
        let link = *self.link(direction);
        let mut departures = core::mem::take(&mut self.departures);
        departures.clear();
        let flows = match direction {
            Direction::Uplink => &mut self.ul_flows,
            Direction::Downlink => &mut self.dl_flows,
        };
        let alloc = schedule_tti(&link, flows, start, &mut departures);
        for d in &departures {
            let mut delay = link.base_delay_ms;
            if let Some((half, rng)) = &mut self.jitter {
                delay = (delay + rng.symmetric(*half)).max(0.0);
            }
            let arrive_at = d.completed_at + delay;
            self.in_flight.push(InFlight {
                arrive_at,
                seq: self.sent,
                delivery: Delivery {
                    packet: d.packet,
                    direction,
                    departed_at: d.completed_at,
                    arrived_at: arrive_at,
                },
            });
            self.sent += 1;
        }
        self.departures = departures;
        alloc
    }
}
