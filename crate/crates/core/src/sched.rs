//! Resource-fair scheduling with relative-priority QoS flows.
//!
//! Every backlogged flow accumulates weight linearly in time, `w = R * k`,
//! where `R` is the flow's priority slope and `k` the number of TTIs since it
//! was last selected. Each TTI the flow with the largest weight is granted the
//! TTI and its weight drops back to zero. Capacity the selected flow cannot
//! use (its buffer drained) is handed to the remaining backlogged flows in
//! weight order without touching their weights.
//!
//! Ties are broken toward the higher slope, then the lower flow id, so a run
//! is a pure function of its inputs.

use alloc::collections::VecDeque;
use alloc::vec::Vec;
use core::cmp::Ordering;
use core::fmt;

/// Identifies a flow within a cell. Unique across both directions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct FlowId(pub u32);

/// Link direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum Direction {
    /// UAV to edge.
    Uplink,
    /// Edge to UAV.
    Downlink,
}

/// What a packet carries.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum PacketKind {
    /// UAV state snapshot sent to the edge controller.
    ControlState,
    /// Edge command answering the control packet with id `echo_of`.
    Command {
        /// Id of the control packet this command answers.
        echo_of: u64,
    },
    /// Part of a camera frame.
    Camera {
        /// Frame sequence number.
        frame: u64,
        /// Capture time of the frame (ms).
        captured_at: f64,
        /// Set on the frame's final packet.
        last: bool,
    },
    /// Traffic of another user in the cell.
    Background,
}

/// A unit of data queued in a flow.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Packet {
    /// Per-flow sequence number, strictly increasing.
    pub id: u64,
    /// Owning flow.
    pub flow: FlowId,
    /// Size in bits, always positive.
    pub size: u64,
    /// Creation time (ms).
    pub created_at: f64,
    /// Payload type.
    pub kind: PacketKind,
}

/// Static description of one link direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LinkConfig {
    /// Capacity in bits per second.
    pub capacity_bps: f64,
    /// TTI duration in ms.
    pub tti_ms: f64,
    /// One-way propagation plus core delay in ms.
    pub base_delay_ms: f64,
    /// Per-flow buffer limit in bits; `None` means unbounded.
    pub buffer_cap_bits: Option<u64>,
}

impl LinkConfig {
    /// Bits a single TTI can carry.
    pub fn quantum_bits(&self) -> u64 {
        libm::round(self.capacity_bps * self.tti_ms / 1000.0) as u64
    }

    /// Checks `capacity > 0`, `tti > 0` and `base_delay >= 0`.
    pub fn validate(&self) -> Result<(), SchedError> {
        if !(self.capacity_bps > 0.0 && self.capacity_bps.is_finite()) {
            return Err(SchedError::InvalidLink("capacity must be positive"));
        }
        if !(self.tti_ms > 0.0 && self.tti_ms.is_finite()) {
            return Err(SchedError::InvalidLink("tti must be positive"));
        }
        if !(self.base_delay_ms >= 0.0 && self.base_delay_ms.is_finite()) {
            return Err(SchedError::InvalidLink("base delay must be non-negative"));
        }
        if self.quantum_bits() == 0 {
            return Err(SchedError::InvalidLink(
                "capacity x tti rounds to zero bits",
            ));
        }
        Ok(())
    }
}

/// Scheduler contract violations.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SchedError {
    /// A priority slope was zero, negative or not finite.
    NonPositiveSlope(f64),
    /// A packet of zero bits was offered.
    EmptyPacket,
    /// A packet older than the flow's tail was offered.
    OutOfOrder {
        /// Flow that rejected the packet.
        flow: FlowId,
        /// Creation time of the offered packet.
        created_at: f64,
        /// Creation time of the current tail.
        tail: f64,
    },
    /// Link parameters out of range.
    InvalidLink(&'static str),
}

impl fmt::Display for SchedError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SchedError::NonPositiveSlope(s) => write!(f, "priority slope must be > 0, got {s}"),
            SchedError::EmptyPacket => f.write_str("packet size must be > 0 bits"),
            SchedError::OutOfOrder { flow, created_at, tail } => write!(
                f,
                "flow {} is FIFO by creation time: packet at {created_at} ms behind tail at {tail} ms",
                flow.0
            ),
            SchedError::InvalidLink(why) => write!(f, "invalid link: {why}"),
        }
    }
}

impl core::error::Error for SchedError {}

/// What happened to an offered packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Enqueued {
    /// Appended to the buffer with this id.
    Accepted(u64),
    /// Tail-dropped (buffer cap reached or link down).
    Dropped(u64),
}

/// A schedulable data flow with its FIFO transmit buffer.
#[derive(Debug, Clone)]
pub struct QosFlow {
    id: FlowId,
    direction: Direction,
    slope: f64,
    pending_slope: Option<f64>,
    weight: f64,
    ttis_since_service: u64,
    // weight carried over a slope change, and TTIs accumulated since then
    base_weight: f64,
    since_base: u64,
    buffer: VecDeque<Packet>,
    // bits of the head packet already sent
    head_sent: u64,
    // leading packets created at or before the last TTI start
    eligible: usize,
    eligible_bits: u64,
    buffered_bits: u64,
    next_id: u64,
    enqueued_bits: u64,
    delivered_bits: u64,
    dropped_bits: u64,
}

impl QosFlow {
    /// A flow with an empty buffer and zero weight.
    pub fn new(id: FlowId, direction: Direction, slope: f64) -> Result<Self, SchedError> {
        check_slope(slope)?;
        Ok(QosFlow {
            id,
            direction,
            slope,
            pending_slope: None,
            weight: 0.0,
            ttis_since_service: 0,
            base_weight: 0.0,
            since_base: 0,
            buffer: VecDeque::new(),
            head_sent: 0,
            eligible: 0,
            eligible_bits: 0,
            buffered_bits: 0,
            next_id: 0,
            enqueued_bits: 0,
            delivered_bits: 0,
            dropped_bits: 0,
        })
    }

    /// Flow identifier.
    pub fn id(&self) -> FlowId {
        self.id
    }

    /// Link direction.
    pub fn direction(&self) -> Direction {
        self.direction
    }

    /// Current priority slope `R`.
    pub fn priority_slope(&self) -> f64 {
        self.slope
    }

    /// Current accumulated weight.
    pub fn weight(&self) -> f64 {
        self.weight
    }

    /// TTIs since the flow was last selected while backlogged.
    pub fn ttis_since_service(&self) -> u64 {
        self.ttis_since_service
    }

    /// Bits waiting in the buffer, including the unsent part of the head.
    pub fn buffered_bits(&self) -> u64 {
        self.buffered_bits
    }

    /// Number of packets in the buffer.
    pub fn queued_packets(&self) -> usize {
        self.buffer.len()
    }

    /// Total bits ever accepted or dropped at enqueue.
    pub fn enqueued_bits(&self) -> u64 {
        self.enqueued_bits
    }

    /// Total bits sent by the scheduler.
    pub fn delivered_bits(&self) -> u64 {
        self.delivered_bits
    }

    /// Total bits dropped (tail-drop or flush).
    pub fn dropped_bits(&self) -> u64 {
        self.dropped_bits
    }

    /// Oldest packet still queued.
    pub fn head(&self) -> Option<&Packet> {
        self.buffer.front()
    }

    /// Appends a packet, tail-dropping it when `cap` would be exceeded.
    pub fn enqueue(
        &mut self,
        kind: PacketKind,
        size: u64,
        created_at: f64,
        cap: Option<u64>,
    ) -> Result<Enqueued, SchedError> {
        if size == 0 {
            return Err(SchedError::EmptyPacket);
        }
        if let Some(tail) = self.buffer.back() {
            if created_at < tail.created_at {
                return Err(SchedError::OutOfOrder {
                    flow: self.id,
                    created_at,
                    tail: tail.created_at,
                });
            }
        }
        let id = self.next_id;
        self.next_id += 1;
        self.enqueued_bits += size;
        if cap.is_some_and(|cap| self.buffered_bits + size > cap) {
            self.dropped_bits += size;
            return Ok(Enqueued::Dropped(id));
        }
        self.buffer.push_back(Packet {
            id,
            flow: self.id,
            size,
            created_at,
            kind,
        });
        self.buffered_bits += size;
        Ok(Enqueued::Accepted(id))
    }

    /// Counts an offered packet as dropped without queueing it.
    pub fn reject(&mut self, size: u64) -> u64 {
        let id = self.next_id;
        self.next_id += 1;
        self.enqueued_bits += size;
        self.dropped_bits += size;
        id
    }

    /// Drops everything queued. Weight returns to zero.
    pub fn flush(&mut self) {
        self.dropped_bits += self.buffered_bits;
        self.buffer.clear();
        self.buffered_bits = 0;
        self.head_sent = 0;
        self.eligible = 0;
        self.eligible_bits = 0;
        self.reset_weight();
    }

    fn reset_weight(&mut self) {
        self.weight = 0.0;
        self.ttis_since_service = 0;
        self.base_weight = 0.0;
        self.since_base = 0;
    }

    /// Queues a slope change for the next TTI boundary. The accumulated
    /// weight is kept; only the growth rate changes.
    pub fn set_priority(&mut self, new_slope: f64) -> Result<(), SchedError> {
        check_slope(new_slope)?;
        self.pending_slope = Some(new_slope);
        Ok(())
    }

    /// `now - created_at` of the oldest queued packet, 0 when empty.
    pub fn head_of_line_delay(&self, now_ms: f64) -> f64 {
        self.buffer.front().map_or(0.0, |p| now_ms - p.created_at)
    }

    fn refresh(&mut self, tti_start: f64) {
        if let Some(slope) = self.pending_slope.take() {
            self.slope = slope;
            self.base_weight = self.weight;
            self.since_base = 0;
        }
        while let Some(p) = self.buffer.get(self.eligible) {
            if p.created_at > tti_start {
                break;
            }
            self.eligible_bits += p.size;
            self.eligible += 1;
        }
    }

    fn eligible_bits(&self) -> u64 {
        self.eligible_bits - if self.eligible > 0 { self.head_sent } else { 0 }
    }

    /// Sends up to `budget` eligible bits starting `offset_bits` into the TTI.
    fn serve(
        &mut self,
        budget: u64,
        tti_start: f64,
        offset_bits: u64,
        bits_per_ms: f64,
        departures: &mut Vec<Departure>,
    ) -> u64 {
        let mut used = 0;
        while used < budget && self.eligible > 0 {
            let head = self.buffer[0];
            let remaining = head.size - self.head_sent;
            let take = remaining.min(budget - used);
            used += take;
            if take == remaining {
                self.buffer.pop_front();
                self.eligible -= 1;
                self.eligible_bits -= head.size;
                self.head_sent = 0;
                let completed_at = tti_start + (offset_bits + used) as f64 / bits_per_ms;
                departures.push(Departure {
                    packet: head,
                    completed_at,
                });
            } else {
                self.head_sent += take;
            }
        }
        self.buffered_bits -= used;
        self.delivered_bits += used;
        used
    }
}

fn check_slope(slope: f64) -> Result<(), SchedError> {
    if slope > 0.0 && slope.is_finite() {
        Ok(())
    } else {
        Err(SchedError::NonPositiveSlope(slope))
    }
}

/// Sets the flow's weight to `R * k` and returns it.
pub fn accumulate_weight(flow: &mut QosFlow, ttis_since_service: u64) -> f64 {
    flow.ttis_since_service = ttis_since_service;
    flow.base_weight = 0.0;
    flow.since_base = ttis_since_service;
    flow.weight = flow.slope * ttis_since_service as f64;
    flow.weight
}

/// Bits granted to one flow in one TTI.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Grant {
    /// Receiving flow.
    pub flow: FlowId,
    /// Bits sent.
    pub bits: u64,
    /// True for the flow that won the weight comparison.
    pub primary: bool,
}

/// Result of one TTI.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Allocation {
    /// Start of the TTI (ms).
    pub tti_start: f64,
    /// Grants in service order; empty when nothing was backlogged.
    pub grants: Vec<Grant>,
}

impl Allocation {
    /// Sum of granted bits.
    pub fn total_bits(&self) -> u64 {
        self.grants.iter().map(|g| g.bits).sum()
    }

    /// The flow that won the TTI, if any.
    pub fn primary(&self) -> Option<FlowId> {
        self.grants.iter().find(|g| g.primary).map(|g| g.flow)
    }
}

/// A packet whose last bit left the transmitter.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Departure {
    /// The packet.
    pub packet: Packet,
    /// Time its last bit was sent (ms).
    pub completed_at: f64,
}

fn rank(a: &QosFlow, b: &QosFlow) -> Ordering {
    b.weight
        .total_cmp(&a.weight)
        .then(b.slope.total_cmp(&a.slope))
        .then(a.id.cmp(&b.id))
}

/// Runs one TTI starting at `tti_start` over `flows`.
///
/// Packets created after `tti_start` are not yet eligible. Backlogged flows
/// grow their weight by their slope, the heaviest flow is selected and
/// reset, and leftover capacity fills the others in rank order. Fully sent
/// packets are appended to `departures`.
pub fn schedule_tti(
    link: &LinkConfig,
    flows: &mut [QosFlow],
    tti_start: f64,
    departures: &mut Vec<Departure>,
) -> Allocation {
    let mut backlogged: Vec<usize> = Vec::new();
    for (i, flow) in flows.iter_mut().enumerate() {
        flow.refresh(tti_start);
        if flow.eligible_bits() > 0 {
            flow.ttis_since_service += 1;
            flow.since_base += 1;
            flow.weight = flow.base_weight + flow.slope * flow.since_base as f64;
            backlogged.push(i);
        } else {
            flow.reset_weight();
        }
    }
    backlogged.sort_by(|&a, &b| rank(&flows[a], &flows[b]));

    let bits_per_ms = link.capacity_bps / 1000.0;
    let mut remaining = link.quantum_bits();
    let mut grants = Vec::new();
    for (n, &i) in backlogged.iter().enumerate() {
        if remaining == 0 {
            break;
        }
        let flow = &mut flows[i];
        let offset = link.quantum_bits() - remaining;
        let sent = flow.serve(remaining, tti_start, offset, bits_per_ms, departures);
        remaining -= sent;
        let primary = n == 0;
        if primary {
            flow.reset_weight();
        }
        grants.push(Grant {
            flow: flow.id,
            bits: sent,
            primary,
        });
    }
    Allocation { tti_start, grants }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn link() -> LinkConfig {
        LinkConfig {
            capacity_bps: 81.3e6,
            tti_ms: 0.5,
            base_delay_ms: 13.0,
            buffer_cap_bits: None,
        }
    }

    fn backlog(flow: &mut QosFlow, bits: u64) {
        flow.enqueue(PacketKind::Background, bits, 0.0, None)
            .unwrap();
    }

    #[test]
    fn weight_is_slope_times_elapsed_ttis() {
        let mut f = QosFlow::new(FlowId(0), Direction::Uplink, 1.0).unwrap();
        assert_eq!(accumulate_weight(&mut f, 5), 5.0);
        let mut g = QosFlow::new(FlowId(1), Direction::Uplink, 3.0).unwrap();
        assert_eq!(accumulate_weight(&mut g, 0), 0.0);
        assert_eq!(g.weight(), 0.0);
    }

    #[test]
    fn double_slope_doubles_weight_at_equal_time() {
        let mut a = QosFlow::new(FlowId(0), Direction::Uplink, 2.0).unwrap();
        let mut b = QosFlow::new(FlowId(1), Direction::Uplink, 1.0).unwrap();
        for t in [1, 7, 400] {
            assert_eq!(
                accumulate_weight(&mut a, t),
                2.0 * accumulate_weight(&mut b, t)
            );
        }
    }

    #[test]
    fn single_backlogged_flow_gets_full_quantum() {
        let mut flows = [QosFlow::new(FlowId(0), Direction::Uplink, 1.0).unwrap()];
        backlog(&mut flows[0], 1_000_000);
        let mut deps = Vec::new();
        let a = schedule_tti(&link(), &mut flows, 0.0, &mut deps);
        assert_eq!(a.total_bits(), 40_650);
        assert_eq!(flows[0].weight(), 0.0);
    }

    #[test]
    fn empty_buffers_give_empty_allocation() {
        let mut flows = [
            QosFlow::new(FlowId(0), Direction::Uplink, 1.0).unwrap(),
            QosFlow::new(FlowId(1), Direction::Uplink, 4.0).unwrap(),
        ];
        let mut deps = Vec::new();
        let a = schedule_tti(&link(), &mut flows, 0.0, &mut deps);
        assert!(a.grants.is_empty());
        assert!(flows.iter().all(|f| f.weight() == 0.0));
    }

    #[test]
    fn equal_slopes_alternate() {
        let mut flows = [
            QosFlow::new(FlowId(0), Direction::Uplink, 1.0).unwrap(),
            QosFlow::new(FlowId(1), Direction::Uplink, 1.0).unwrap(),
        ];
        backlog(&mut flows[0], u32::MAX as u64);
        backlog(&mut flows[1], u32::MAX as u64);
        let mut deps = Vec::new();
        let order: Vec<u32> = (0..6)
            .map(|k| {
                schedule_tti(&link(), &mut flows, k as f64 * 0.5, &mut deps)
                    .primary()
                    .unwrap()
                    .0
            })
            .collect();
        assert_eq!(order, [0, 1, 0, 1, 0, 1]);
    }

    #[test]
    fn packets_created_after_tti_start_wait() {
        let mut flows = [QosFlow::new(FlowId(0), Direction::Uplink, 1.0).unwrap()];
        flows[0]
            .enqueue(PacketKind::ControlState, 12_000, 0.2, None)
            .unwrap();
        let mut deps = Vec::new();
        assert!(schedule_tti(&link(), &mut flows, 0.0, &mut deps)
            .grants
            .is_empty());
        let a = schedule_tti(&link(), &mut flows, 0.5, &mut deps);
        assert_eq!(a.total_bits(), 12_000);
        assert_eq!(deps.len(), 1);
        let expect = 0.5 + 12_000.0 / 81_300.0;
        assert!((deps[0].completed_at - expect).abs() < 1e-12);
    }

    #[test]
    fn leftover_capacity_backfills_without_reset() {
        let mut flows = [
            QosFlow::new(FlowId(0), Direction::Uplink, 8.0).unwrap(),
            QosFlow::new(FlowId(1), Direction::Uplink, 1.0).unwrap(),
        ];
        flows[0]
            .enqueue(PacketKind::ControlState, 10_000, 0.0, None)
            .unwrap();
        backlog(&mut flows[1], 1_000_000);
        let mut deps = Vec::new();
        let a = schedule_tti(&link(), &mut flows, 0.0, &mut deps);
        assert_eq!(a.primary(), Some(FlowId(0)));
        assert_eq!(a.total_bits(), 40_650);
        assert_eq!(
            a.grants[1],
            Grant {
                flow: FlowId(1),
                bits: 30_650,
                primary: false
            }
        );
        assert_eq!(flows[0].weight(), 0.0);
        assert_eq!(flows[1].weight(), 1.0);
    }

    #[test]
    fn head_of_line_delay_is_age_of_oldest() {
        let mut f = QosFlow::new(FlowId(0), Direction::Uplink, 1.0).unwrap();
        assert_eq!(f.head_of_line_delay(55.0), 0.0);
        f.enqueue(
            PacketKind::Camera {
                frame: 0,
                captured_at: 100.0,
                last: true,
            },
            8,
            100.0,
            None,
        )
        .unwrap();
        f.enqueue(PacketKind::ControlState, 8, 110.0, None).unwrap();
        assert_eq!(f.head_of_line_delay(127.0), 27.0);
    }

    #[test]
    fn slope_change_lands_on_next_tti_and_keeps_weight() {
        let mut flows = [
            QosFlow::new(FlowId(0), Direction::Uplink, 1.0).unwrap(),
            QosFlow::new(FlowId(1), Direction::Uplink, 1.0).unwrap(),
        ];
        backlog(&mut flows[0], u32::MAX as u64);
        backlog(&mut flows[1], u32::MAX as u64);
        let mut deps = Vec::new();
        schedule_tti(&link(), &mut flows, 0.0, &mut deps);
        // flow 1 was not served and carries weight 1
        flows[1].set_priority(8.0).unwrap();
        assert_eq!(flows[1].priority_slope(), 1.0);
        assert_eq!(flows[1].weight(), 1.0);
        schedule_tti(&link(), &mut flows, 0.5, &mut deps);
        assert_eq!(flows[1].priority_slope(), 8.0);
    }

    #[test]
    fn rejects_bad_input() {
        assert!(QosFlow::new(FlowId(0), Direction::Uplink, 0.0).is_err());
        let mut f = QosFlow::new(FlowId(0), Direction::Uplink, 1.0).unwrap();
        assert_eq!(
            f.set_priority(-1.0),
            Err(SchedError::NonPositiveSlope(-1.0))
        );
        assert_eq!(
            f.enqueue(PacketKind::Background, 0, 0.0, None),
            Err(SchedError::EmptyPacket)
        );
        f.enqueue(PacketKind::Background, 1, 5.0, None).unwrap();
        assert!(matches!(
            f.enqueue(PacketKind::Background, 1, 4.0, None),
            Err(SchedError::OutOfOrder { .. })
        ));
    }

    #[test]
    fn tail_drop_respects_cap_and_conserves_bits() {
        let mut f = QosFlow::new(FlowId(0), Direction::Uplink, 1.0).unwrap();
        for _ in 0..5 {
            f.enqueue(PacketKind::Background, 400, 0.0, Some(1000))
                .unwrap();
        }
        assert_eq!(f.buffered_bits(), 800);
        assert_eq!(f.dropped_bits(), 1200);
        assert_eq!(
            f.enqueued_bits(),
            f.buffered_bits() + f.delivered_bits() + f.dropped_bits()
        );
    }
}
