//! Named experiment presets shipped with the library.

use crate::cli_io::config::{ConfigError, ExperimentConfig};

/// Which pipeline a preset is meant to drive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PresetKind {
    Train,
    Curriculum,
    Climb,
    Ttt,
}

#[derive(Debug, Clone, Copy)]
pub struct ExperimentPreset {
    pub name: &'static str,
    /// Short experiment tag shared by related presets.
    pub figure: &'static str,
    pub kind: PresetKind,
    pub text: &'static str,
}

macro_rules! preset {
    ($name:literal, $figure:literal, $kind:ident) => {
        ExperimentPreset {
            name: $name,
            figure: $figure,
            kind: PresetKind::$kind,
            text: include_str!(concat!("../../presets/", $name, ".cfg")),
        }
    };
}

pub const PRESETS: &[ExperimentPreset] = &[
    preset!("fig2-analog", "fig2", Train),
    preset!("fig4-analog", "fig4", Climb),
    preset!("fig5-analog", "fig5", Train),
    preset!("fig6-analog", "fig6", Train),
    preset!("fig7-analog", "fig7", Train),
    preset!("fig8-analog", "fig8", Train),
    preset!("fig9-analog", "fig9", Train),
    preset!("fig11-analog", "fig11", Curriculum),
    preset!("fig13-analog", "fig13", Train),
    preset!("fig15-analog", "fig15", Ttt),
];

pub fn find(name: &str) -> Result<&'static ExperimentPreset, ConfigError> {
    PRESETS
        .iter()
        .find(|p| p.name == name)
        .ok_or_else(|| ConfigError::UnknownPreset(name.to_string()))
}

/// Defaults overlaid with the preset's entries.
pub fn load(name: &str) -> Result<ExperimentConfig, ConfigError> {
    ExperimentConfig::from_text(find(name)?.text)
}
