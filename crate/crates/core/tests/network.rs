use dynqos_core::net::{measure_rtt, CellModel, StepOutput, TrafficSource};
use dynqos_core::sched::{Direction, LinkConfig, PacketKind};

const UL: LinkConfig = LinkConfig {
    capacity_bps: 81.3e6,
    tti_ms: 0.5,
    base_delay_ms: 13.65,
    buffer_cap_bits: None,
};
const DL: LinkConfig = LinkConfig {
    capacity_bps: 1400e6,
    ..UL
};

fn uav_sources(cell: &mut CellModel, slope: f64) -> dynqos_core::FlowId {
    let f = cell.add_flow(Direction::Uplink, slope).unwrap();
    cell.add_source(TrafficSource::cbr_frames(45.8e6, 30.0, 12_000), f);
    cell.add_source(TrafficSource::periodic_small(100.0, 12_000), f);
    f
}

/// Delivered uplink Mbps per flow over `[from_ms, to_ms)`.
fn goodput(cell: &mut CellModel, from_ms: f64, to_ms: f64, flows: usize) -> Vec<f64> {
    let mut out = StepOutput::default();
    let mut bits = vec![0u64; flows];
    while cell.clock() < to_ms {
        cell.step(&mut out).unwrap();
        for d in &out.delivered {
            if d.direction == Direction::Uplink && d.arrived_at >= from_ms {
                bits[d.packet.flow.0 as usize] += d.packet.size;
            }
        }
    }
    bits.iter()
        .map(|&b| b as f64 / (to_ms - from_ms) * 1000.0 / 1e6)
        .collect()
}

#[test]
fn uav_alone_gets_its_offered_rate() {
    let mut cell = CellModel::new(UL, DL).unwrap();
    uav_sources(&mut cell, 1.0);
    let g = goodput(&mut cell, 1000.0, 11_000.0, 1);
    assert!((g[0] - 47.0).abs() < 1.0, "{g:?}");
}

#[test]
fn equal_slopes_split_capacity_under_overload() {
    let mut cell = CellModel::new(UL, DL).unwrap();
    uav_sources(&mut cell, 1.0);
    let bg = cell.add_flow(Direction::Uplink, 1.0).unwrap();
    cell.add_source(TrafficSource::onoff_background(80e6, 12_000), bg);
    let g = goodput(&mut cell, 1000.0, 11_000.0, 2);
    for v in g {
        assert!((v - 40.65).abs() < 0.5, "{v}");
    }
}

#[test]
fn backlog_grows_at_offered_minus_capacity() {
    // 127 Mbps into one 81.3 Mbps flow
    let mut cell = CellModel::new(UL, DL).unwrap();
    let f = uav_sources(&mut cell, 1.0);
    cell.add_source(TrafficSource::onoff_background(80e6, 12_000), f);
    let mut out = StepOutput::default();
    let mut samples = Vec::new();
    let mut last_hol = 0.0;
    while cell.clock() < 10_000.0 {
        cell.step(&mut out).unwrap();
        let now = cell.clock();
        if now >= 1000.0 && (now % 100.0) == 0.0 {
            let flow = cell.flow(f);
            let hol = flow.head_of_line_delay(now);
            assert!(
                hol > last_hol,
                "head-of-line delay fell at {now}: {hol} <= {last_hol}"
            );
            last_hol = hol;
            samples.push((now, flow.buffered_bits() as f64, hol));
        }
    }
    let (t0, b0, h0) = samples[0];
    let (t1, b1, h1) = *samples.last().unwrap();
    let offered = 45.8e6 + 1.2e6 + 80e6;
    let growth = (b1 - b0) / (t1 - t0) * 1000.0;
    let expected = offered - 81.3e6;
    assert!(
        (growth / expected - 1.0).abs() < 0.02,
        "backlog grows at {growth:.0} b/s"
    );
    // the head waits for the backlog ahead of it: delay ~ backlog / capacity
    let hol_slope = (h1 - h0) / (t1 - t0);
    let expected_slope = 1.0 - 81.3e6 / offered;
    assert!(
        (hol_slope / expected_slope - 1.0).abs() < 0.05,
        "hol slope {hol_slope}"
    );
}

#[test]
fn underloaded_flow_delay_stays_bounded() {
    let mut cell = CellModel::new(UL, DL).unwrap();
    let f = uav_sources(&mut cell, 1.0);
    let mut out = StepOutput::default();
    let mut worst: f64 = 0.0;
    while cell.clock() < 20_000.0 {
        cell.step(&mut out).unwrap();
        if cell.clock() > 1000.0 {
            worst = worst.max(cell.flow(f).head_of_line_delay(cell.clock()));
        }
    }
    // one packet's pacing interval plus a TTI of scheduling
    let frame_packet_gap = 1000.0 / 30.0 / (45.8e6_f64 / 30.0 / 12_000.0).ceil();
    assert!(
        worst <= frame_packet_gap + 2.0 * UL.tti_ms,
        "worst hol {worst}"
    );
}

#[test]
fn round_trip_is_additive_and_calibrated() {
    let mut cell = CellModel::new(UL, DL).unwrap();
    let up = uav_sources(&mut cell, 1.0);
    let down = cell.add_flow(Direction::Downlink, 1.0).unwrap();
    let mut out = StepOutput::default();
    let mut sent = std::collections::BTreeMap::new();
    let mut rtts = Vec::new();
    while cell.clock() < 5000.0 {
        cell.step(&mut out).unwrap();
        let delivered = std::mem::take(&mut out.delivered);
        for p in &out.emitted {
            if p.kind == PacketKind::ControlState && p.flow == up {
                sent.insert(p.id, *p);
            }
        }
        for d in &delivered {
            match d.packet.kind {
                PacketKind::ControlState => {
                    let echo = PacketKind::Command {
                        echo_of: d.packet.id,
                    };
                    cell.enqueue(down, echo, 2000, d.arrived_at).unwrap();
                }
                PacketKind::Command { echo_of } => {
                    let s = measure_rtt(&sent[&echo_of], d).unwrap();
                    assert_eq!(s.rtt, s.ul_delay + s.dl_delay);
                    assert!(s.rtt >= 2.0 * UL.base_delay_ms);
                    rtts.push(s.rtt);
                }
                _ => {}
            }
        }
    }
    let mean = rtts.iter().sum::<f64>() / rtts.len() as f64;
    // two base delays plus sub-millisecond queueing and serialization
    assert!(rtts.len() > 450);
    assert!(mean > 27.3 && mean < 28.3, "mean rtt {mean}");
}

#[test]
fn repeated_reductions_reach_floor_on_the_eleventh() {
    let mut src = TrafficSource::cbr_frames(47e6, 30.0, 12_000).with_floor(5e6);
    let mut steps = 0;
    loop {
        steps += 1;
        let c = src.set_rate(src.rate_bps() * 0.8);
        if c.clamped {
            assert_eq!(c.rate_bps, 5e6);
            break;
        }
    }
    // 47 * 0.8^10 = 5.05 Mbps is still above the floor
    assert_eq!(steps, 11);
    let direct = (1..=10).fold(47e6, |r, _| r * 0.8);
    assert!(direct > 5e6 && direct * 0.8 < 5e6);
}

#[test]
fn deterministic_replay() {
    let run = || {
        let mut cell = CellModel::new(UL, DL).unwrap().with_jitter(0.5, 7);
        uav_sources(&mut cell, 1.0);
        let mut out = StepOutput::default();
        let mut trace = Vec::new();
        while cell.clock() < 2000.0 {
            cell.step(&mut out).unwrap();
            trace.extend(
                out.delivered
                    .iter()
                    .map(|d| (d.packet.id, d.arrived_at.to_bits())),
            );
        }
        trace
    };
    assert_eq!(run(), run());
}
