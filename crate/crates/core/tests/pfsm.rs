use dynqos_core::pfsm::{
    emit_signals, GuardContext, SignalDraws, SignalInputs, SignalMode, PERSIST_EVALUATIONS,
};
use dynqos_core::sensing::RiskLevel;
use dynqos_core::{PfsmState, SignalSet, Supervisor, TransitionTable};
use proptest::prelude::*;
use PfsmState::*;

/// Allowed successors, written out independently of the library table.
fn allowed(from: PfsmState) -> &'static [PfsmState] {
    match from {
        Q1 => &[Q1, Q2, Q3, Q4],
        Q2 => &[Q2, Q1, Q5],
        Q3 => &[Q3, Q1, Q5, Q6],
        Q4 => &[Q4, Q1, Q6, QA],
        Q5 => &[Q5, Q1, QA],
        Q6 => &[Q6, Q1, QA],
        QA => &[QA, Q1],
    }
}

fn risk_of(i: u8) -> RiskLevel {
    match i % 3 {
        0 => RiskLevel::Low,
        1 => RiskLevel::Middle,
        _ => RiskLevel::High,
    }
}

const RISKS: [RiskLevel; 3] = [RiskLevel::Low, RiskLevel::Middle, RiskLevel::High];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn generated_traces_stay_inside_the_table(
        steps in prop::collection::vec((any::<bool>(), 0u8..3, any::<bool>(), any::<bool>(), any::<bool>()), 1..400),
    ) {
        let mut sup = Supervisor::new(0.0);
        for (i, &(hl, r, lost, fresh, floor)) in steps.iter().enumerate() {
            let signals = SignalSet::from_parts(hl || lost, risk_of(r), lost);
            prop_assert!(signals.is_well_formed());
            let step = sup.evaluate(signals, fresh, floor, i as f64 * 100.0).unwrap();
            prop_assert!(
                allowed(step.from).contains(&step.to),
                "{} -> {} on {}", step.from, step.to, signals
            );
            prop_assert_eq!(step.to, sup.state());
            prop_assert_eq!(step.action.offload, step.to != QA);
            prop_assert!(!step.action.rate_adaptation || step.action.offload);
        }
    }

    #[test]
    fn guards_are_total_over_well_formed_signals(
        s in 0usize..7, hl in any::<bool>(), r in 0u8..3, lost in any::<bool>(),
        persists in any::<bool>(), at_floor in any::<bool>(),
    ) {
        let from = PfsmState::ALL[s];
        let signals = SignalSet::from_parts(hl || lost, risk_of(r), lost);
        let to = TransitionTable
            .transition(from, signals, GuardContext { hl_persists: persists, at_floor })
            .unwrap();
        prop_assert!(allowed(from).contains(&to));
    }
}

#[test]
fn emitted_signals_are_well_formed() {
    let mut draws = SignalDraws::new(3);
    for p in [None, Some(0.0), Some(0.3), Some(0.5), Some(1.0)] {
        for risk in RISKS {
            for link_ok in [true, false] {
                for previous_high in [true, false] {
                    for mode in [SignalMode::Deterministic, SignalMode::Stochastic] {
                        let inputs = SignalInputs {
                            p_lat: p,
                            previous_high,
                            risk,
                            link_ok,
                        };
                        let s = emit_signals(&inputs, 0.5, mode, &mut draws);
                        assert!(s.is_well_formed(), "{s}");
                        assert_eq!(s.risk(), Some(risk));
                        assert_eq!(s.link_lost(), !link_ok);
                    }
                }
            }
        }
    }
}

#[test]
fn malformed_signals_are_rejected() {
    let bad = [
        SignalSet::empty(),
        SignalSet::LL,
        SignalSet::LR,
        SignalSet::LL.union(SignalSet::HL).union(SignalSet::LR),
        SignalSet::LL.union(SignalSet::LR).union(SignalSet::HR),
    ];
    for s in bad {
        assert!(!s.is_well_formed());
        assert!(TransitionTable
            .transition(Q1, s, GuardContext::default())
            .is_err());
    }
}

/// Drives the table from `start` with a lost link until it settles.
fn walk_lost(start: PfsmState, risk: RiskLevel, ctx: GuardContext) -> Vec<PfsmState> {
    let lost = SignalSet::from_parts(true, risk, true);
    let mut path = vec![start];
    let mut s = start;
    for _ in 0..6 {
        let next = TransitionTable.transition(s, lost, ctx).unwrap();
        assert!(allowed(s).contains(&next), "{s} -> {next}");
        path.push(next);
        s = next;
    }
    path
}

#[test]
fn sustained_link_loss_reaches_autonomy_from_every_state() {
    for start in PfsmState::ALL {
        for risk in RISKS {
            for persists in [false, true] {
                for at_floor in [false, true] {
                    let ctx = GuardContext {
                        hl_persists: persists,
                        at_floor,
                    };
                    let path = walk_lost(start, risk, ctx);
                    let first = path.iter().position(|&s| s == QA);
                    assert!(
                        matches!(first, Some(i) if i <= 3),
                        "{start} {risk:?}: {path:?}"
                    );
                    assert!(path[first.unwrap()..].iter().all(|&s| s == QA));
                }
            }
        }
    }
}

#[test]
fn supervisor_reaches_autonomy_without_fresh_evidence() {
    // a dead link delivers no new samples, so persistence never builds
    for risk in RISKS {
        let mut sup = Supervisor::new(0.0);
        let lost = SignalSet::from_parts(true, risk, true);
        for i in 0..4 {
            sup.evaluate(lost, false, false, i as f64 * 100.0).unwrap();
        }
        assert_eq!(sup.state(), QA, "{risk:?}");
        assert!(!sup.action().offload);
    }
}

#[test]
fn restored_link_with_low_latency_returns_to_q1() {
    for risk in RISKS {
        let ok = SignalSet::from_parts(false, risk, false);
        assert_eq!(
            TransitionTable
                .transition(QA, ok, GuardContext::default())
                .unwrap(),
            Q1
        );
        let still_slow = SignalSet::from_parts(true, risk, false);
        assert_eq!(
            TransitionTable
                .transition(QA, still_slow, GuardContext::default())
                .unwrap(),
            QA
        );
    }
    let mut sup = Supervisor::new(0.0);
    for i in 0..3 {
        sup.evaluate(
            SignalSet::from_parts(true, RiskLevel::Low, true),
            false,
            false,
            i as f64 * 100.0,
        )
        .unwrap();
    }
    assert_eq!(sup.state(), QA);
    let step = sup
        .evaluate(
            SignalSet::from_parts(false, RiskLevel::Low, false),
            true,
            false,
            400.0,
        )
        .unwrap();
    assert_eq!(step.to, Q1);
    assert!(step.action.offload && step.action_changed);
}

#[test]
fn qos_is_engaged_before_rate_adaptation_under_middle_risk() {
    let mr = |hl| SignalSet::from_parts(hl, RiskLevel::Middle, false);
    // low latency, then latency stays high with fresh evidence
    let mut sup = Supervisor::new(0.0);
    let mut visited = vec![sup.state()];
    for i in 0..5 {
        sup.evaluate(mr(false), true, false, i as f64 * 100.0)
            .unwrap();
    }
    for i in 5..20 {
        let step = sup
            .evaluate(mr(true), true, false, i as f64 * 100.0)
            .unwrap();
        if visited.last() != Some(&step.to) {
            visited.push(step.to);
        }
    }
    assert_eq!(&visited[..3], &[Q1, Q3, Q5], "{visited:?}");
    let q3 = visited.iter().position(|&s| s == Q3).unwrap();
    let adapting = visited.iter().position(|&s| matches!(s, Q5 | Q6)).unwrap();
    assert!(q3 < adapting);
}

#[test]
fn escalation_waits_for_persistent_fresh_latency() {
    let hl = SignalSet::from_parts(true, RiskLevel::Middle, false);
    let mut sup = Supervisor::new(0.0);
    assert_eq!(sup.evaluate(hl, true, false, 100.0).unwrap().to, Q3);
    // stale windows never escalate
    for i in 2..10 {
        assert_eq!(
            sup.evaluate(hl, false, false, i as f64 * 100.0).unwrap().to,
            Q3
        );
    }
    for k in 1..PERSIST_EVALUATIONS {
        assert_eq!(
            sup.evaluate(hl, true, false, (10 + k) as f64 * 100.0)
                .unwrap()
                .to,
            Q3
        );
    }
    assert_eq!(sup.evaluate(hl, true, false, 2000.0).unwrap().to, Q5);
}

#[test]
fn stochastic_high_latency_frequency_matches_probability() {
    const DRAWS: usize = 100_000;
    let mut draws = SignalDraws::new(11);
    let inputs = SignalInputs {
        p_lat: Some(0.5),
        previous_high: false,
        risk: RiskLevel::Low,
        link_ok: true,
    };
    let high = (0..DRAWS)
        .filter(|_| emit_signals(&inputs, 0.5, SignalMode::Stochastic, &mut draws).high_latency())
        .count();
    let freq = high as f64 / DRAWS as f64;
    assert!((freq - 0.5).abs() <= 0.01, "HL frequency {freq}");
}

#[test]
fn stochastic_replay_is_deterministic() {
    let trace = |seed| {
        let mut draws = SignalDraws::new(seed);
        let mut sup = Supervisor::new(0.0);
        let mut out = Vec::new();
        for i in 0..2000u32 {
            let p = (i % 17) as f64 / 16.0;
            let inputs = SignalInputs {
                p_lat: Some(p),
                previous_high: false,
                risk: risk_of((i / 50) as u8),
                link_ok: i % 400 < 350,
            };
            let s = emit_signals(&inputs, 0.5, SignalMode::Stochastic, &mut draws);
            let step = sup
                .evaluate(s, i % 3 != 0, i % 7 == 0, i as f64 * 100.0)
                .unwrap();
            out.push((s.bits(), step.to));
        }
        out
    };
    assert_eq!(trace(5), trace(5));
    assert_ne!(trace(5), trace(6));
}
