//! Run configuration: TOML schema, defaults, validation and named presets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::anneal::{AnnealSchedule, KmcParams};
use crate::radialdose::DoseKernel;
use crate::stopping::StoppingTable;
use crate::ttmd::TrackMdParams;
use crate::units::DIAMOND_A0_NM;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid value for `{field}`: {reason}")]
    Invalid { field: String, reason: String },
    #[error("unknown preset `{0}` (known: desk-U, desk-Au, paper-U, paper-Au, dilute-chain)")]
    UnknownPreset(String),
    #[error("bad override `{0}`, expected key=value")]
    Override(String),
}

fn invalid(field: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid { field: field.to_string(), reason: reason.into() }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IonConfig {
    /// Bundled table name (`U`, `Au`); ignored when `table_path` is set.
    pub table: String,
    pub table_path: Option<PathBuf>,
    pub fluence_cm2: f64,
}

impl Default for IonConfig {
    fn default() -> Self {
        Self { table: "U".into(), table_path: None, fluence_cm2: 1e12 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TargetConfig {
    pub nitrogen_ppm: f64,
    pub a0_nm: f64,
    pub refractive_index: f64,
}

impl Default for TargetConfig {
    fn default() -> Self {
        Self { nitrogen_ppm: 100.0, a0_nm: DIAMOND_A0_NM, refractive_index: 2.4 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlabLayout {
    EqualWidth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrackConfig {
    pub segments: usize,
    pub layout: SlabLayout,
    /// Vacancy clustering distance, nm.
    pub cluster_cutoff_nm: f64,
    /// Coordination cutoff used for the disorder fraction, nm.
    pub bond_cutoff_nm: f64,
    /// Disorder fraction above which a segment is flagged amorphous.
    pub amorphous_threshold: f64,
}

impl Default for TrackConfig {
    fn default() -> Self {
        Self {
            segments: 10,
            layout: SlabLayout::EqualWidth,
            cluster_cutoff_nm: DIAMOND_A0_NM / std::f64::consts::SQRT_2,
            bond_cutoff_nm: 0.19,
            amorphous_threshold: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnealConfig {
    pub replicas: usize,
    pub params: KmcParams,
    pub schedule: AnnealSchedule,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        Self { replicas: 20, params: KmcParams::default(), schedule: AnnealSchedule::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChainConfig {
    pub detection_efficiency: f64,
    pub field_um: f64,
    pub length_um: f64,
    pub capture_radius_nm: f64,
    pub efficiency: f64,
    /// Dipolar coupling constant, kHz·nm³.
    pub j0_khz_nm3: f64,
}

impl Default for ChainConfig {
    fn default() -> Self {
        Self {
            detection_efficiency: 0.75,
            field_um: 4.0,
            length_um: 10.0,
            capture_radius_nm: crate::chain::DEFAULT_CAPTURE_RADIUS_NM,
            efficiency: 0.175,
            j0_khz_nm3: crate::chain::DEFAULT_J0_KHZ_NM3,
        }
    }
}

/// Everything a run needs. Every section is optional in the file and falls
/// back to the documented defaults; the seed is always explicit in the
/// resolved config and manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub ion: IonConfig,
    pub target: TargetConfig,
    pub track: TrackConfig,
    pub md: TrackMdParams,
    pub dose: DoseKernel,
    pub anneal: AnnealConfig,
    pub chain: ChainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "custom".into(),
            seed: 42,
            ion: IonConfig::default(),
            target: TargetConfig::default(),
            track: TrackConfig::default(),
            md: TrackMdParams::default(),
            dose: DoseKernel::default(),
            anneal: AnnealConfig::default(),
            chain: ChainConfig::default(),
        }
    }
}

const PRESETS: [(&str, &str); 5] = [
    ("desk-U", include_str!("../data/presets/desk-U.toml")),
    ("desk-Au", include_str!("../data/presets/desk-Au.toml")),
    ("paper-U", include_str!("../data/presets/paper-U.toml")),
    ("paper-Au", include_str!("../data/presets/paper-Au.toml")),
    ("dilute-chain", include_str!("../data/presets/dilute-chain.toml")),
];

pub fn preset_names() -> Vec<&'static str> {
    PRESETS.iter().map(|p| p.0).collect()
}

/// Source text of a named preset (case-insensitive).
pub fn preset_text(name: &str) -> Result<&'static str, ConfigError> {
    PRESETS
        .iter()
        .find(|p| p.0.eq_ignore_ascii_case(name))
        .map(|p| p.1)
        .ok_or_else(|| ConfigError::UnknownPreset(name.to_string()))
}

pub fn preset(name: &str) -> Result<RunConfig, ConfigError> {
    parse_config(preset_text(name)?, &[])
}

pub fn load_config(path: &Path) -> Result<RunConfig, ConfigError> {
    load_config_with(path, &[])
}

pub fn load_config_with(path: &Path, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    let mut cfg = parse_config(&text, overrides)?;
    // relative table paths are resolved against the config file
    if let (Some(p), Some(dir)) = (cfg.ion.table_path.as_mut(), path.parent()) {
        if p.is_relative() {
            *p = dir.join(&*p);
        }
    }
    Ok(cfg)
}

fn line_col(text: &str, offset: usize) -> (usize, usize) {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let column = before.rfind('\n').map_or(before.len(), |i| before.len() - i - 1) + 1;
    (line, column)
}

/// Parses config text, applies dotted `key=value` overrides and validates.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<RunConfig, ConfigError> {
    let parse_err = |e: toml::de::Error| {
        let (line, column) = e.span().map_or((0, 0), |s| line_col(text, s.start));
        ConfigError::Parse { line, column, message: e.message().to_string() }
    };
    let cfg: RunConfig = if overrides.is_empty() {
        toml::from_str(text).map_err(parse_err)?
    } else {
        let mut table: toml::Table = toml::from_str(text).map_err(parse_err)?;
        for o in overrides {
            apply_override(&mut table, o)?;
        }
        table.try_into().map_err(|e: toml::de::Error| ConfigError::Parse {
            line: 0,
            column: 0,
            message: format!("after overrides: {}", e.message()),
        })?
    };
    cfg.validate()?;
    Ok(cfg)
}

fn apply_override(table: &mut toml::Table, spec: &str) -> Result<(), ConfigError> {
    let (key, raw) = spec.split_once('=').ok_or_else(|| ConfigError::Override(spec.to_string()))?;
    let key = key.trim();
    if key.is_empty() {
        return Err(ConfigError::Override(spec.to_string()));
    }
    let value = parse_value(raw.trim());
    let parts: Vec<&str> = key.split('.').collect();
    let mut cur = table;
    for part in &parts[..parts.len() - 1] {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry.as_table_mut().ok_or_else(|| invalid(key, "path runs through a non-table value"))?;
    }
    cur.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> toml::Value {
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let positive = [
            ("ion.fluence_cm2", self.ion.fluence_cm2),
            ("target.a0_nm", self.target.a0_nm),
            ("target.refractive_index", self.target.refractive_index),
            ("track.cluster_cutoff_nm", self.track.cluster_cutoff_nm),
            ("track.bond_cutoff_nm", self.track.bond_cutoff_nm),
            ("chain.detection_efficiency", self.chain.detection_efficiency),
            ("chain.field_um", self.chain.field_um),
            ("chain.length_um", self.chain.length_um),
            ("chain.capture_radius_nm", self.chain.capture_radius_nm),
            ("chain.j0_khz_nm3", self.chain.j0_khz_nm3),
        ];
        for (field, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(invalid(field, format!("must be positive, got {v}")));
            }
        }
        if !(self.target.nitrogen_ppm >= 0.0 && self.target.nitrogen_ppm.is_finite()) {
            return Err(invalid("target.nitrogen_ppm", "must be non-negative"));
        }
        if self.track.segments == 0 {
            return Err(invalid("track.segments", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.track.amorphous_threshold) {
            return Err(invalid("track.amorphous_threshold", "must lie in [0, 1]"));
        }
        if !(self.chain.detection_efficiency <= 1.0) {
            return Err(invalid("chain.detection_efficiency", "must not exceed 1"));
        }
        if !(0.0..=1.0).contains(&self.chain.efficiency) {
            return Err(invalid("chain.efficiency", "must lie in [0, 1]"));
        }
        if self.anneal.replicas == 0 {
            return Err(invalid("anneal.replicas", "must be at least 1"));
        }
        self.md.validate().map_err(|e| invalid("md", e.to_string()))?;
        self.anneal.params.validate().map_err(|e| invalid("anneal.params", e.to_string()))?;
        self.anneal.schedule.validate().map_err(|e| invalid("anneal.schedule", e.to_string()))?;
        if self.ion.table_path.is_none() && StoppingTable::by_name(&self.ion.table).is_none() {
            return Err(invalid("ion.table", format!("no bundled table named `{}`", self.ion.table)));
        }
        Ok(())
    }

    pub fn stopping_table(&self) -> Result<StoppingTable, ConfigError> {
        match &self.ion.table_path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io { path: p.clone(), source })?;
                crate::stopping::parse_stopping_table(&text).map_err(|e| invalid("ion.table_path", e.to_string()))
            }
            None => StoppingTable::by_name(&self.ion.table)
                .ok_or_else(|| invalid("ion.table", format!("no bundled table named `{}`", self.ion.table))),
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }
}
