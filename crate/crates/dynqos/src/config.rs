//! TOML scenario files.
//!
//! Every key is optional except `duration_ms`; omitted keys take the
//! unloaded-baseline value. Runs with `qos = "dynamic"` must spell out the
//! `[pfsm]` and `[environment]` sections. Key names match the dotted field
//! paths used by [`ScenarioConfig::validate`], so a rejected value can be
//! traced back to the line that set it.

use std::fmt;
use std::ops::Range;
use std::path::Path;

use dynqos_core::pfsm::SignalMode;
use dynqos_core::plant::Reference;
use dynqos_core::scenario::{BackgroundConfig, Environment, QosMode};
use dynqos_core::sensing::SigmoidParams;
use dynqos_core::{LinkConfig, ScenarioConfig, Vec3};
use serde::Deserialize;
use toml::de::{DeTable, DeValue};

/// A problem in a scenario file, located as precisely as the input allows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Diagnostic {
    /// File path or other label of the input.
    pub origin: String,
    /// 1-based line, when known.
    pub line: Option<usize>,
    /// 1-based column, when known.
    pub column: Option<usize>,
    /// What is wrong.
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.origin)?;
        if let Some(line) = self.line {
            write!(f, ":{line}")?;
            if let Some(col) = self.column {
                write!(f, ":{col}")?;
            }
        }
        write!(f, ": {}", self.message)
    }
}

impl std::error::Error for Diagnostic {}

/// A validated scenario and its display name.
#[derive(Debug, Clone, PartialEq)]
pub struct Scenario {
    /// `name` key, or the origin when absent.
    pub name: String,
    /// Ready-to-run configuration.
    pub config: ScenarioConfig,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct File {
    name: Option<String>,
    #[allow(dead_code)]
    description: Option<String>,
    duration_ms: f64,
    seed: Option<u64>,
    report_ms: Option<f64>,
    jitter_ms: Option<f64>,
    qos: Option<QosMode>,
    qos_slope: Option<f64>,
    default_slope: Option<f64>,
    outages: Option<Vec<[f64; 2]>>,
    uplink: Option<LinkSection>,
    downlink: Option<LinkSection>,
    camera: Option<CameraSection>,
    control: Option<ControlSection>,
    background: Option<BackgroundSection>,
    pfsm: Option<PfsmSection>,
    environment: Option<EnvironmentSection>,
    plant: Option<PlantSection>,
    reference: Option<ReferenceSection>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkSection {
    capacity_bps: Option<f64>,
    tti_ms: Option<f64>,
    base_delay_ms: Option<f64>,
    buffer_cap_bits: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CameraSection {
    rate_bps: Option<f64>,
    floor_bps: Option<f64>,
    frame_hz: Option<f64>,
    packet_bits: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ControlSection {
    hz: Option<f64>,
    packet_bits: Option<u64>,
    command_bits: Option<u64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct BackgroundSection {
    rate_bps: f64,
    packet_bits: Option<u64>,
    start_ms: f64,
    end_ms: Option<f64>,
    buffer_bits: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SigmoidSection {
    mu: Option<f64>,
    rho: Option<f64>,
    th: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PfsmSection {
    camera: Option<SigmoidSection>,
    control: Option<SigmoidSection>,
    clutter: Option<SigmoidSection>,
    weights: Option<[f64; 2]>,
    windows: Option<[usize; 2]>,
    ema: Option<[f64; 2]>,
    risk_bounds: Option<[f64; 2]>,
    latency_threshold: Option<f64>,
    eval_ms: Option<f64>,
    rate_factor: Option<f64>,
    rate_period_ms: Option<f64>,
    link_loss_ms: Option<f64>,
    signal_mode: Option<SignalMode>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnvironmentSection {
    segments: Option<Vec<[f64; 2]>>,
    noise_m: Option<f64>,
    points: Option<usize>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct PlantSection {
    period_ms: Option<f64>,
    dt_ms: Option<f64>,
    kp: Option<f64>,
    kd: Option<f64>,
    command_limit: Option<f64>,
    divergence_m: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "lowercase")]
enum ReferenceKind {
    Hover,
    Circle,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReferenceSection {
    kind: ReferenceKind,
    center: [f64; 3],
    radius_m: Option<f64>,
    period_s: Option<f64>,
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn merge_link(link: &mut LinkConfig, s: Option<LinkSection>) {
    let Some(s) = s else { return };
    set(&mut link.capacity_bps, s.capacity_bps);
    set(&mut link.tti_ms, s.tti_ms);
    set(&mut link.base_delay_ms, s.base_delay_ms);
    if s.buffer_cap_bits.is_some() {
        link.buffer_cap_bits = s.buffer_cap_bits;
    }
}

fn merge_sigmoid(p: &mut SigmoidParams, s: Option<SigmoidSection>) {
    let Some(s) = s else { return };
    set(&mut p.mu, s.mu);
    set(&mut p.rho, s.rho);
    set(&mut p.th, s.th);
}

/// Field paths whose absence is an error rather than a default.
fn missing(file: &File) -> Option<&'static str> {
    if file.qos == Some(QosMode::Dynamic) {
        if file.pfsm.is_none() {
            return Some("pfsm");
        }
        if file.environment.is_none() {
            return Some("environment");
        }
    }
    None
}

fn into_config(file: File) -> ScenarioConfig {
    let mut c = ScenarioConfig::baseline();
    c.duration_ms = file.duration_ms;
    set(&mut c.seed, file.seed);
    set(&mut c.report_ms, file.report_ms);
    set(&mut c.jitter_ms, file.jitter_ms);
    set(&mut c.qos, file.qos);
    set(&mut c.qos_slope, file.qos_slope);
    set(&mut c.default_slope, file.default_slope);
    if let Some(o) = file.outages {
        c.outages = o.into_iter().map(|[a, b]| (a, b)).collect();
    }
    merge_link(&mut c.uplink, file.uplink);
    merge_link(&mut c.downlink, file.downlink);
    if let Some(s) = file.camera {
        set(&mut c.camera.rate_bps, s.rate_bps);
        set(&mut c.camera.floor_bps, s.floor_bps);
        set(&mut c.camera.frame_hz, s.frame_hz);
        set(&mut c.camera.packet_bits, s.packet_bits);
    }
    if let Some(s) = file.control {
        set(&mut c.control.hz, s.hz);
        set(&mut c.control.packet_bits, s.packet_bits);
        set(&mut c.control.command_bits, s.command_bits);
    }
    c.background = file.background.map(|b| BackgroundConfig {
        rate_bps: b.rate_bps,
        packet_bits: b.packet_bits.unwrap_or(12_000),
        start_ms: b.start_ms,
        end_ms: b.end_ms.unwrap_or(f64::INFINITY),
        buffer_bits: b.buffer_bits,
    });
    if let Some(s) = file.pfsm {
        let p = &mut c.pfsm;
        merge_sigmoid(&mut p.camera, s.camera);
        merge_sigmoid(&mut p.control, s.control);
        merge_sigmoid(&mut p.clutter, s.clutter);
        if let Some([a, b]) = s.weights {
            p.weights = (a, b);
        }
        if let Some([a, b]) = s.windows {
            p.windows = (a, b);
        }
        if let Some([a, b]) = s.ema {
            p.ema = (a, b);
        }
        if let Some([a, b]) = s.risk_bounds {
            p.risk_bounds = (a, b);
        }
        set(&mut p.latency_threshold, s.latency_threshold);
        set(&mut p.eval_ms, s.eval_ms);
        set(&mut p.rate_factor, s.rate_factor);
        set(&mut p.rate_period_ms, s.rate_period_ms);
        set(&mut p.link_loss_ms, s.link_loss_ms);
        set(&mut p.signal_mode, s.signal_mode);
    }
    if let Some(s) = file.environment {
        let e: &mut Environment = &mut c.environment;
        if let Some(seg) = s.segments {
            e.segments = seg.into_iter().map(|[t, v]| (t, v)).collect();
        }
        set(&mut e.noise_m, s.noise_m);
        set(&mut e.points, s.points);
    }
    if let Some(s) = file.plant {
        let p = &mut c.plant;
        set(&mut p.period_ms, s.period_ms);
        set(&mut p.dt_ms, s.dt_ms);
        set(&mut p.kp, s.kp);
        set(&mut p.kd, s.kd);
        set(&mut p.command_limit, s.command_limit);
        set(&mut p.divergence_m, s.divergence_m);
    }
    if let Some(r) = file.reference {
        let [x, y, z] = r.center;
        let center = Vec3::new(x, y, z);
        c.reference = match r.kind {
            ReferenceKind::Hover => Reference::Hover(center),
            ReferenceKind::Circle => Reference::Circle {
                center,
                radius_m: r.radius_m.unwrap_or(1.0),
                period_s: r.period_s.unwrap_or(20.0),
            },
        };
    }
    c
}

/// 1-based line and column of a byte offset.
fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before
        .rfind('\n')
        .map_or(before.len(), |nl| before.len() - nl - 1)
        + 1;
    (line, col)
}

/// Span of the deepest existing key along a dotted path.
fn locate(text: &str, path: &str) -> Option<Range<usize>> {
    let root = DeTable::parse(text).ok()?;
    let mut table: &DeTable = root.get_ref();
    let mut found = None;
    for part in path.split('.') {
        let (key, value) = table.iter().find(|(k, _)| &**k.get_ref() == part)?;
        found = Some(key.span());
        match value.get_ref() {
            DeValue::Table(t) => table = t,
            _ => break,
        }
    }
    found
}

impl Diagnostic {
    fn at(origin: &str, text: &str, span: Option<Range<usize>>, message: String) -> Self {
        let (line, column) = match span {
            Some(s) => {
                let (l, c) = line_col(text, s.start);
                (Some(l), Some(c))
            }
            None => (None, None),
        };
        Diagnostic {
            origin: origin.to_owned(),
            line,
            column,
            message,
        }
    }
}

/// Parses and validates scenario text. `origin` labels diagnostics.
pub fn load_str(text: &str, origin: &str) -> Result<Scenario, Diagnostic> {
    let file: File = toml::from_str(text)
        .map_err(|e| Diagnostic::at(origin, text, e.span(), e.message().to_owned()))?;
    if let Some(section) = missing(&file) {
        return Err(Diagnostic::at(
            origin,
            text,
            locate(text, "qos"),
            format!("qos = \"dynamic\" requires a [{section}] section"),
        ));
    }
    let name = file.name.clone().unwrap_or_else(|| origin.to_owned());
    let config = into_config(file);
    config.validate().map_err(|e| {
        let field = e.field();
        // point at the key itself, or at the closest enclosing section
        let mut path = field;
        let span = loop {
            if let Some(s) = locate(text, path) {
                break Some(s);
            }
            match path.rfind('.') {
                Some(i) => path = &path[..i],
                None => break None,
            }
        };
        Diagnostic::at(origin, text, span, e.to_string())
    })?;
    Ok(Scenario { name, config })
}

/// Reads and loads a scenario file.
pub fn load_path(path: &Path) -> Result<Scenario, Diagnostic> {
    let origin = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|e| Diagnostic {
        origin: origin.clone(),
        line: None,
        column: None,
        message: format!("cannot read: {e}"),
    })?;
    load_str(&text, &origin)
}

/// Returns `text` with the key at dotted `path` set to `value`, a TOML
/// literal such as `27`, `"stochastic"` or `[0.5, 0.5]`. Missing tables
/// along the path are created.
pub fn override_key(text: &str, path: &str, value: &str) -> Result<String, String> {
    let mut doc: toml::Table = toml::from_str(text).map_err(|e| e.message().to_owned())?;
    let parsed: toml::Table = toml::from_str(&format!("v = {value}"))
        .map_err(|_| format!("`{value}` is not a TOML value"))?;
    let new = parsed
        .get("v")
        .cloned()
        .ok_or_else(|| format!("`{value}` is not a TOML value"))?;
    let mut parts: Vec<&str> = path.split('.').collect();
    let leaf = parts
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or("empty parameter path")?;
    let mut table = &mut doc;
    for part in parts {
        let entry = table
            .entry(part.to_owned())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        table = entry
            .as_table_mut()
            .ok_or_else(|| format!("`{part}` in `{path}` is not a table"))?;
    }
    table.insert(leaf.to_owned(), new);
    toml::to_string(&doc).map_err(|e| e.to_string())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_file_takes_baseline_values() {
        let s = load_str("duration_ms = 1000\n", "mem").unwrap();
        let mut expected = ScenarioConfig::baseline();
        expected.duration_ms = 1000.0;
        assert_eq!(s.config, expected);
        assert_eq!(s.name, "mem");
    }

    #[test]
    fn duration_is_required() {
        let e = load_str("seed = 3\n", "mem").unwrap_err();
        assert!(e.message.contains("duration_ms"), "{e}");
    }

    #[test]
    fn unknown_keys_are_rejected_with_their_line() {
        let e = load_str("duration_ms = 1000\n\n[camera]\nrate_mbps = 3\n", "mem").unwrap_err();
        assert_eq!(e.line, Some(4), "{e}");
        assert!(e.message.contains("rate_mbps"), "{e}");
    }

    #[test]
    fn invalid_values_point_at_their_key() {
        let text = "duration_ms = 1000\nqos = \"never\"\n[pfsm]\nweights = [0.5, 0.6]\n";
        let e = load_str(text, "w.toml").unwrap_err();
        assert_eq!(e.line, Some(4), "{e}");
        assert!(e.message.contains("sum to 1"), "{e}");
        assert!(e.to_string().starts_with("w.toml:4:1: pfsm.weights"), "{e}");
    }

    #[test]
    fn defaulted_field_errors_fall_back_to_the_section() {
        let text = "duration_ms = 1000\n[camera]\nfloor_bps = 9e7\n";
        let e = load_str(text, "mem").unwrap_err();
        assert_eq!(e.line, Some(3), "{e}");
        let text = "duration_ms = 1000\n[plant]\nkp = 1.0\ndt_ms = 0.3\n";
        let e = load_str(text, "mem").unwrap_err();
        assert_eq!(e.line, Some(4), "{e}");
        // period_ms is defaulted; its complaint lands on the section header
        let text = "duration_ms = 1000\n[plant]\nkp = 1.0\ndt_ms = 7\n";
        let e = load_str(text, "mem").unwrap_err();
        assert_eq!(e.line, Some(2), "{e}");
        assert!(e.message.starts_with("plant.period_ms"), "{e}");
    }

    #[test]
    fn dynamic_runs_need_pfsm_and_environment() {
        let e = load_str("duration_ms = 1000\nqos = \"dynamic\"\n", "mem").unwrap_err();
        assert_eq!(e.line, Some(2));
        assert!(e.message.contains("[pfsm]"), "{e}");
        let e = load_str("duration_ms = 1000\nqos = \"dynamic\"\n[pfsm]\n", "mem").unwrap_err();
        assert!(e.message.contains("[environment]"), "{e}");
        let ok =
            "duration_ms = 1000\nqos = \"dynamic\"\n[pfsm]\n[environment]\nsegments = [[0, 4]]\n";
        assert_eq!(load_str(ok, "mem").unwrap().config.environment.at(0.0), 4.0);
    }

    #[test]
    fn syntax_errors_carry_a_position() {
        let e = load_str("duration_ms = 1000\nseed = = 2\n", "mem").unwrap_err();
        assert_eq!(e.line, Some(2), "{e}");
    }

    #[test]
    fn sections_merge_onto_the_baseline() {
        let text = r#"
            name = "x"
            duration_ms = 5000
            [downlink]
            base_delay_ms = 20
            [background]
            rate_bps = 8e7
            start_ms = 1000
            [reference]
            kind = "hover"
            center = [1, 2, 3]
        "#;
        let s = load_str(text, "mem").unwrap();
        assert_eq!(s.name, "x");
        assert_eq!(s.config.downlink.base_delay_ms, 20.0);
        assert_eq!(s.config.downlink.capacity_bps, 1400e6);
        let bg = s.config.background.unwrap();
        assert_eq!(
            (bg.rate_bps, bg.packet_bits, bg.end_ms),
            (8e7, 12_000, f64::INFINITY)
        );
        assert_eq!(
            s.config.reference,
            Reference::Hover(Vec3::new(1.0, 2.0, 3.0))
        );
    }

    #[test]
    fn override_creates_and_replaces_keys() {
        let text = "duration_ms = 1000\n[pfsm.control]\nrho = 27\n";
        let t = override_key(text, "pfsm.control.rho", "30").unwrap();
        assert_eq!(load_str(&t, "m").unwrap().config.pfsm.control.rho, 30.0);
        let t = override_key(text, "camera.rate_bps", "2e7").unwrap();
        assert_eq!(load_str(&t, "m").unwrap().config.camera.rate_bps, 2e7);
        assert!(override_key(text, "duration_ms.x", "1").is_err());
        assert!(override_key(text, "seed", "=").is_err());
    }
}
