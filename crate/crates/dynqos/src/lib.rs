//! Scenario files, trace emission and batch runs on top of `dynqos-core`.

pub mod catalog;
pub mod config;
pub mod emit;
pub mod sweep;

pub use config::{load_path, load_str, Diagnostic, Scenario};

use dynqos_core::pfsm::SignalMode;
use dynqos_core::ScenarioConfig;

/// Command-line settings that take precedence over the scenario file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Overrides {
    /// Replaces `seed`.
    pub seed: Option<u64>,
    /// Replaces `pfsm.signal_mode`.
    pub mode: Option<SignalMode>,
}

impl Overrides {
    /// Applies the overrides in place.
    pub fn apply(&self, config: &mut ScenarioConfig) {
        if let Some(seed) = self.seed {
            config.seed = seed;
        }
        if let Some(mode) = self.mode {
            config.pfsm.signal_mode = mode;
        }
    }
}

/// Resolves `arg` as a file path, or as a bundled scenario name when no
/// such file exists. Returns the TOML text and a label for diagnostics.
pub fn resolve(arg: &str) -> Result<(String, String), Diagnostic> {
    let path = std::path::Path::new(arg);
    if !path.exists() {
        if let Some(text) = catalog::text(arg) {
            return Ok((text.to_owned(), format!("<bundled {arg}>")));
        }
    }
    let text = std::fs::read_to_string(path).map_err(|e| Diagnostic {
        origin: arg.to_owned(),
        line: None,
        column: None,
        message: format!("cannot read: {e}"),
    })?;
    Ok((text, arg.to_owned()))
}
