//! The QoS-selecting state machine.
//!
//! Condition probabilities become signals (`HL`/`LL`, `HR`/`MR`/`LR`,
//! `LINK_LOST`), signals drive the state graph, and each state maps to an
//! action: offload with or without priority, camera rate adaptation, or full
//! onboard autonomy.
//!
//! Successor sets are fixed:
//!
//! | state | action                               | successors          |
//! |-------|--------------------------------------|---------------------|
//! | q1    | offload, no QoS                      | q1 q2 q3 q4         |
//! | q2    | offload, QoS                         | q1 q2 q5            |
//! | q3    | offload, QoS                         | q1 q3 q5 q6         |
//! | q4    | offload, no QoS, rate adaptation     | q1 q4 q6 qA         |
//! | q5    | offload, QoS, rate adaptation        | q5 q1 qA            |
//! | q6    | offload, QoS, rate adaptation        | q6 q1 qA            |
//! | qA    | onboard autonomy                     | qA q1               |
//!
//! Any transition outside these sets is reported as a [`Fault`].

use core::fmt;

use crate::rng::{SimRng, Stream};
use crate::sensing::RiskLevel;

/// Machine state. `QA` is the seventh state, full onboard autonomy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub enum PfsmState {
    /// Offload, default priority.
    #[cfg_attr(feature = "serde", serde(rename = "q1"))]
    Q1,
    /// Offload with QoS, entered on high risk.
    #[cfg_attr(feature = "serde", serde(rename = "q2"))]
    Q2,
    /// Offload with QoS, entered on high latency.
    #[cfg_attr(feature = "serde", serde(rename = "q3"))]
    Q3,
    /// Offload, default priority, rate adaptation.
    #[cfg_attr(feature = "serde", serde(rename = "q4"))]
    Q4,
    /// Offload with QoS and rate adaptation, from q2/q3.
    #[cfg_attr(feature = "serde", serde(rename = "q5"))]
    Q5,
    /// Offload with QoS and rate adaptation, from q3/q4.
    #[cfg_attr(feature = "serde", serde(rename = "q6"))]
    Q6,
    /// Full onboard autonomy.
    #[cfg_attr(feature = "serde", serde(rename = "qA"))]
    QA,
}

impl PfsmState {
    /// Every state, in table order.
    pub const ALL: [PfsmState; 7] = [
        PfsmState::Q1,
        PfsmState::Q2,
        PfsmState::Q3,
        PfsmState::Q4,
        PfsmState::Q5,
        PfsmState::Q6,
        PfsmState::QA,
    ];

    /// Short name (`q1` .. `q6`, `qA`).
    pub fn name(self) -> &'static str {
        match self {
            PfsmState::Q1 => "q1",
            PfsmState::Q2 => "q2",
            PfsmState::Q3 => "q3",
            PfsmState::Q4 => "q4",
            PfsmState::Q5 => "q5",
            PfsmState::Q6 => "q6",
            PfsmState::QA => "qA",
        }
    }
}

impl fmt::Display for PfsmState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A set of transition signals.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct SignalSet(u8);

impl SignalSet {
    /// Low latency.
    pub const LL: SignalSet = SignalSet(1);
    /// High latency.
    pub const HL: SignalSet = SignalSet(1 << 1);
    /// Low risk.
    pub const LR: SignalSet = SignalSet(1 << 2);
    /// Middle risk.
    pub const MR: SignalSet = SignalSet(1 << 3);
    /// High risk.
    pub const HR: SignalSet = SignalSet(1 << 4);
    /// No control round trip completed recently.
    pub const LINK_LOST: SignalSet = SignalSet(1 << 5);

    const NAMES: [(SignalSet, &'static str); 6] = [
        (SignalSet::LL, "LL"),
        (SignalSet::HL, "HL"),
        (SignalSet::LR, "LR"),
        (SignalSet::MR, "MR"),
        (SignalSet::HR, "HR"),
        (SignalSet::LINK_LOST, "LINK_LOST"),
    ];

    /// The empty set.
    pub const fn empty() -> Self {
        SignalSet(0)
    }

    /// Raw bits.
    pub const fn bits(self) -> u8 {
        self.0
    }

    /// Set union.
    pub const fn union(self, other: SignalSet) -> Self {
        SignalSet(self.0 | other.0)
    }

    /// True when every flag of `other` is present.
    pub const fn contains(self, other: SignalSet) -> bool {
        self.0 & other.0 == other.0
    }

    /// Builds a well-formed set.
    pub fn from_parts(high_latency: bool, risk: RiskLevel, link_lost: bool) -> Self {
        let mut s = if high_latency {
            SignalSet::HL
        } else {
            SignalSet::LL
        };
        s = s.union(match risk {
            RiskLevel::Low => SignalSet::LR,
            RiskLevel::Middle => SignalSet::MR,
            RiskLevel::High => SignalSet::HR,
        });
        if link_lost {
            s = s.union(SignalSet::LINK_LOST);
        }
        s
    }

    /// Exactly one latency flag and exactly one risk flag.
    pub fn is_well_formed(self) -> bool {
        let lat = [SignalSet::LL, SignalSet::HL]
            .iter()
            .filter(|f| self.contains(**f))
            .count();
        let risk = [SignalSet::LR, SignalSet::MR, SignalSet::HR]
            .iter()
            .filter(|f| self.contains(**f))
            .count();
        lat == 1 && risk == 1 && self.0 < 1 << 6
    }

    /// True when `HL` is set.
    pub fn high_latency(self) -> bool {
        self.contains(SignalSet::HL)
    }

    /// True when `LINK_LOST` is set.
    pub fn link_lost(self) -> bool {
        self.contains(SignalSet::LINK_LOST)
    }

    /// Risk band, when exactly one risk flag is present.
    pub fn risk(self) -> Option<RiskLevel> {
        match (
            self.contains(SignalSet::LR),
            self.contains(SignalSet::MR),
            self.contains(SignalSet::HR),
        ) {
            (true, false, false) => Some(RiskLevel::Low),
            (false, true, false) => Some(RiskLevel::Middle),
            (false, false, true) => Some(RiskLevel::High),
            _ => None,
        }
    }
}

impl fmt::Display for SignalSet {
    /// `|`-separated flag names, e.g. `HL|MR`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for (flag, name) in SignalSet::NAMES {
            if self.contains(flag) {
                if !first {
                    f.write_str("|")?;
                }
                f.write_str(name)?;
                first = false;
            }
        }
        Ok(())
    }
}

/// How the latency signal is drawn from `P_lat`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "lowercase"))]
pub enum SignalMode {
    /// `HL` iff `P_lat >= th`.
    #[default]
    Deterministic,
    /// `HL` with probability `P_lat`.
    Stochastic,
}

/// Seeded uniform draws for stochastic signal emission.
#[derive(Debug, Clone)]
pub struct SignalDraws(SimRng);

impl SignalDraws {
    /// A stream determined by `seed`.
    pub fn new(seed: u64) -> Self {
        SignalDraws(SimRng::new(seed, Stream::Signals))
    }

    fn next(&mut self) -> f64 {
        self.0.unit()
    }
}

/// Inputs to one signal emission.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SignalInputs {
    /// Combined latency condition; `None` while no estimate exists.
    pub p_lat: Option<f64>,
    /// Latency signal of the previous emission, held when `p_lat` is `None`.
    pub previous_high: bool,
    /// Risk band from the spaciousness filter.
    pub risk: RiskLevel,
    /// False once no round trip completed within the loss timeout.
    pub link_ok: bool,
}

/// Turns condition probabilities into a signal set.
///
/// A lost link asserts `LINK_LOST` together with `HL`: no round trip within
/// the timeout is itself a latency far above any threshold.
pub fn emit_signals(
    inputs: &SignalInputs,
    th_lat: f64,
    mode: SignalMode,
    draws: &mut SignalDraws,
) -> SignalSet {
    let high = if !inputs.link_ok {
        true
    } else {
        match inputs.p_lat {
            None => inputs.previous_high,
            Some(p) => match mode {
                SignalMode::Deterministic => p >= th_lat,
                SignalMode::Stochastic => draws.next() < p,
            },
        }
    };
    SignalSet::from_parts(high, inputs.risk, !inputs.link_ok)
}

/// A contract violation inside the machine.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    /// Signal set missing a latency or risk flag, or carrying two.
    MalformedSignals(SignalSet),
    /// A guard produced a successor outside the table.
    IllegalTransition {
        /// Source state.
        from: PfsmState,
        /// Offending target.
        to: PfsmState,
    },
}

impl fmt::Display for Fault {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fault::MalformedSignals(s) => write!(f, "malformed signal set {{{s}}}"),
            Fault::IllegalTransition { from, to } => {
                write!(f, "transition {from} -> {to} is not in the state table")
            }
        }
    }
}

impl core::error::Error for Fault {}

/// Facts the guards need beyond the current signal set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GuardContext {
    /// `HL` held for consecutive evaluations on post-action evidence.
    pub hl_persists: bool,
    /// The camera rate sits at its floor.
    pub at_floor: bool,
}

/// The successor sets plus the guard map choosing among them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct TransitionTable;

impl TransitionTable {
    /// Allowed next states of `state`.
    pub fn successors(&self, state: PfsmState) -> &'static [PfsmState] {
        use PfsmState::*;
        match state {
            Q1 => &[Q1, Q2, Q3, Q4],
            Q2 => &[Q1, Q2, Q5],
            Q3 => &[Q1, Q3, Q5, Q6],
            Q4 => &[Q1, Q4, Q6, QA],
            Q5 => &[Q5, Q1, QA],
            Q6 => &[Q6, Q1, QA],
            QA => &[QA, Q1],
        }
    }

    /// True when `from -> to` is in the table.
    pub fn allows(&self, from: PfsmState, to: PfsmState) -> bool {
        self.successors(from).contains(&to)
    }

    /// Applies the guard map.
    pub fn transition(
        &self,
        current: PfsmState,
        signals: SignalSet,
        ctx: GuardContext,
    ) -> Result<PfsmState, Fault> {
        use PfsmState::*;
        let risk = match signals.risk() {
            Some(r) if signals.is_well_formed() => r,
            _ => return Err(Fault::MalformedSignals(signals)),
        };
        let hl = signals.high_latency();
        let lost = signals.link_lost();
        let escalated = if risk == RiskLevel::High { Q6 } else { Q5 };
        let next = match current {
            Q1 => match (hl, risk) {
                (_, RiskLevel::High) => Q2,
                (false, _) => Q1,
                (true, RiskLevel::Middle) => Q3,
                (true, RiskLevel::Low) => Q4,
            },
            Q2 => {
                if lost || (hl && ctx.hl_persists) {
                    Q5
                } else if !hl && risk != RiskLevel::High {
                    Q1
                } else {
                    Q2
                }
            }
            Q3 => {
                if lost || (hl && ctx.hl_persists) {
                    escalated
                } else if !hl && risk == RiskLevel::Low {
                    Q1
                } else {
                    Q3
                }
            }
            Q4 => {
                if lost || (hl && ctx.at_floor) {
                    QA
                } else if !hl {
                    Q1
                } else if ctx.hl_persists {
                    Q6
                } else {
                    Q4
                }
            }
            Q5 | Q6 => {
                if lost || (hl && ctx.at_floor) {
                    QA
                } else if !hl {
                    Q1
                } else {
                    current
                }
            }
            QA => {
                if !lost && !hl {
                    Q1
                } else {
                    QA
                }
            }
        };
        if self.allows(current, next) {
            Ok(next)
        } else {
            Err(Fault::IllegalTransition {
                from: current,
                to: next,
            })
        }
    }
}

/// What a state asks the vehicle and network to do.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ActionCommand {
    /// Prioritized QoS flow in use.
    pub qos_enabled: bool,
    /// Camera rate is being reduced periodically.
    pub rate_adaptation: bool,
    /// Control runs at the edge.
    pub offload: bool,
}

/// Action of each state.
pub fn apply_action(state: PfsmState) -> ActionCommand {
    let (qos_enabled, rate_adaptation, offload) = match state {
        PfsmState::Q1 => (false, false, true),
        PfsmState::Q2 | PfsmState::Q3 => (true, false, true),
        PfsmState::Q4 => (false, true, true),
        PfsmState::Q5 | PfsmState::Q6 => (true, true, true),
        PfsmState::QA => (false, false, false),
    };
    ActionCommand {
        qos_enabled,
        rate_adaptation,
        offload,
    }
}

/// One periodic camera-rate update: multiply by `factor` while adapting,
/// divide by it while recovering under low latency, otherwise hold. The
/// result stays within `[floor, nominal]`.
pub fn rate_adapt_step(
    current: f64,
    nominal: f64,
    floor: f64,
    adapting: bool,
    low_latency: bool,
    factor: f64,
) -> f64 {
    if adapting {
        (current * factor).max(floor)
    } else if low_latency {
        (current / factor).min(nominal)
    } else {
        current
    }
}

/// One evaluation's outcome.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Step {
    /// State before.
    pub from: PfsmState,
    /// State after.
    pub to: PfsmState,
    /// Signals evaluated.
    pub signals: SignalSet,
    /// Action of `to`.
    pub action: ActionCommand,
    /// True when the action differs from the previous one.
    pub action_changed: bool,
}

/// Runs the machine across evaluations, tracking `HL` persistence.
///
/// `HL` persists once it has been raised on two consecutive evaluations
/// whose latency evidence was gathered entirely after the last action
/// change (the caller reports this as `fresh`).
#[derive(Debug, Clone)]
pub struct Supervisor {
    table: TransitionTable,
    state: PfsmState,
    hl_streak: u32,
    action_changed_at: f64,
}

/// Consecutive fresh `HL` evaluations that count as persistent.
pub const PERSIST_EVALUATIONS: u32 = 2;

impl Supervisor {
    /// Starts in `q1` at time `now_ms`.
    pub fn new(now_ms: f64) -> Self {
        Supervisor {
            table: TransitionTable,
            state: PfsmState::Q1,
            hl_streak: 0,
            action_changed_at: now_ms,
        }
    }

    /// Current state.
    pub fn state(&self) -> PfsmState {
        self.state
    }

    /// Current action.
    pub fn action(&self) -> ActionCommand {
        apply_action(self.state)
    }

    /// Time of the last action change (ms).
    pub fn action_changed_at(&self) -> f64 {
        self.action_changed_at
    }

    /// The table in use.
    pub fn table(&self) -> &TransitionTable {
        &self.table
    }

    /// Evaluates once at `now_ms`.
    pub fn evaluate(
        &mut self,
        signals: SignalSet,
        fresh: bool,
        at_floor: bool,
        now_ms: f64,
    ) -> Result<Step, Fault> {
        if signals.high_latency() && fresh {
            self.hl_streak += 1;
        } else {
            self.hl_streak = 0;
        }
        let ctx = GuardContext {
            hl_persists: self.hl_streak >= PERSIST_EVALUATIONS,
            at_floor,
        };
        let from = self.state;
        let to = self.table.transition(from, signals, ctx)?;
        let before = apply_action(from);
        let action = apply_action(to);
        if to != from {
            self.hl_streak = 0;
            self.state = to;
        }
        let action_changed = action != before;
        if action_changed {
            self.action_changed_at = now_ms;
        }
        Ok(Step {
            from,
            to,
            signals,
            action,
            action_changed,
        })
    }
}
