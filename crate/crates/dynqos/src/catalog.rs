//! Scenario files shipped with the binary.

use crate::config::{load_str, Diagnostic, Scenario};

/// `(name, TOML text)` of every bundled scenario.
pub const BUNDLED: [(&str, &str); 5] = [
    (
        "no_qos_no_bg",
        include_str!("../scenarios/no_qos_no_bg.toml"),
    ),
    ("no_qos_bg", include_str!("../scenarios/no_qos_bg.toml")),
    (
        "priority_qos_bg",
        include_str!("../scenarios/priority_qos_bg.toml"),
    ),
    (
        "dynamic_qos_bg",
        include_str!("../scenarios/dynamic_qos_bg.toml"),
    ),
    ("link_outage", include_str!("../scenarios/link_outage.toml")),
];

/// TOML text of a bundled scenario.
pub fn text(name: &str) -> Option<&'static str> {
    BUNDLED.iter().find(|(n, _)| *n == name).map(|(_, t)| *t)
}

/// Loads a bundled scenario; `None` for unknown names.
pub fn load(name: &str) -> Option<Result<Scenario, Diagnostic>> {
    text(name).map(|t| load_str(t, &format!("<bundled {name}>")))
}
