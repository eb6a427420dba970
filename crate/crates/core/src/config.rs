//! Experiment configuration: a TOML file with optional `key=value`
//! overrides, validated before any run.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::PhysicsConstants;
use crate::event::{BeamGeometry, DetectorPlane, SimulationError, SimulationSetup};
use crate::kaon::{
    BranchingTable, DecayMode, InitialKaonState, KaonMixing, KaonSpecies, Species, SpeciesTable,
    KL_LIFETIME, KS_LIFETIME,
};
use crate::reconstruction::{RetrodictionContext, Timing};
use crate::vec2::Vec2;

pub const SEED_ENV: &str = "KAONLAB_SEED";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("config parse error: {0}")]
    Parse(String),
    #[error("bad override `{0}`: {1}")]
    Override(String, String),
    #[error("invalid config: {0}")]
    Invalid(String),
}

impl From<SimulationError> for ConfigError {
    fn from(e: SimulationError) -> Self {
        ConfigError::Invalid(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstantsConfig {
    pub hbar: f64,
    pub kaon_mass_kg: f64,
    pub pion_mass_kg: f64,
    /// Kinetic energy release in K → π⁺π⁻; derived from the masses when absent.
    pub q_value_j: Option<f64>,
}

impl Default for ConstantsConfig {
    fn default() -> Self {
        let c = PhysicsConstants::default();
        Self {
            hbar: c.hbar,
            kaon_mass_kg: c.kaon_mass,
            pion_mass_kg: c.pion_mass,
            q_value_j: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PacketConfig {
    pub sigma0_m: f64,
    pub bohmian_offsets: bool,
    pub kaon_spreading: bool,
}

impl Default for PacketConfig {
    fn default() -> Self {
        Self {
            sigma0_m: 1e-15,
            bohmian_offsets: true,
            kaon_spreading: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamConfig {
    pub source: [f64; 2],
    pub direction: [f64; 2],
    pub speed_m_per_s: f64,
    pub fiducial_length_m: f64,
}

impl Default for BeamConfig {
    fn default() -> Self {
        Self {
            source: [0.0, 0.0],
            direction: [1.0, 0.0],
            speed_m_per_s: 3.0e8,
            fiducial_length_m: 10.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    pub id: u32,
    pub anchor: [f64; 2],
    pub normal: [f64; 2],
    pub extent_m: f64,
    #[serde(default)]
    pub timing_resolution_s: f64,
    #[serde(default)]
    pub momentum_resolution: f64,
}

fn default_detectors() -> Vec<DetectorConfig> {
    [(0, 1.0), (1, -1.0)]
        .into_iter()
        .map(|(id, y)| DetectorConfig {
            id,
            anchor: [15.0, y],
            normal: [0.0, y],
            extent_m: 1e3,
            timing_resolution_s: 0.0,
            momentum_resolution: 0.0,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MixingConfig {
    pub p_re: f64,
    pub p_im: f64,
    pub q_re: f64,
    pub q_im: f64,
}

impl Default for MixingConfig {
    fn default() -> Self {
        Self {
            p_re: 1.0 + 2.228e-3,
            p_im: 0.0,
            q_re: 1.0 - 2.228e-3,
            q_im: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StateConfig {
    pub a_re: f64,
    pub a_im: f64,
    pub b_re: f64,
    pub b_im: f64,
}

impl Default for StateConfig {
    fn default() -> Self {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        Self {
            a_re: h,
            a_im: 0.0,
            b_re: h,
            b_im: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesConfig {
    pub lifetime_s: f64,
    pub branching: BTreeMap<String, f64>,
}

impl SpeciesConfig {
    fn from_species(s: &KaonSpecies, lifetime_s: f64) -> Self {
        Self {
            lifetime_s,
            branching: s
                .branching
                .0
                .iter()
                .map(|(m, p)| (m.name().to_string(), *p))
                .collect(),
        }
    }

    fn build(&self, label: Species, template: &KaonSpecies) -> Result<KaonSpecies, ConfigError> {
        let mut entries = Vec::new();
        for (name, p) in &self.branching {
            let mode = DecayMode::ALL
                .into_iter()
                .find(|m| m.name() == name)
                .ok_or_else(|| {
                    ConfigError::Invalid(format!(
                        "species.{label}.branching: unknown mode `{name}`"
                    ))
                })?;
            entries.push((mode, *p));
        }
        KaonSpecies::from_lifetime(
            label,
            self.lifetime_s,
            template.mass_phase,
            BranchingTable::new(entries),
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeciesTableConfig {
    #[serde(rename = "KS")]
    pub short: SpeciesConfig,
    #[serde(rename = "KL")]
    pub long: SpeciesConfig,
}

impl Default for SpeciesTableConfig {
    fn default() -> Self {
        let t = SpeciesTable::default();
        Self {
            short: SpeciesConfig::from_species(&t.short, KS_LIFETIME),
            long: SpeciesConfig::from_species(&t.long, KL_LIFETIME),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModeSelection {
    Classical,
    Bohmian,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReconstructionConfig {
    pub mode: ModeSelection,
    pub timing: Timing,
    pub n_samples: usize,
    /// Emission-time bracket tolerance relative to the search window.
    pub t1_tol: f64,
    /// Classification threshold in units of the K_S lifetime.
    pub theta: f64,
}

impl Default for ReconstructionConfig {
    fn default() -> Self {
        Self {
            mode: ModeSelection::Both,
            timing: Timing::Timed,
            n_samples: 100,
            t1_tol: 1e-15,
            theta: 20.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    pub events: String,
    pub results: String,
    pub summary: String,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("out"),
            events: "events.jsonl".into(),
            results: "results.csv".into(),
            summary: "summary.txt".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub events: u64,
    pub constants: ConstantsConfig,
    pub packet: PacketConfig,
    pub beam: BeamConfig,
    pub detectors: Vec<DetectorConfig>,
    pub mixing: MixingConfig,
    pub state: StateConfig,
    pub species: SpeciesTableConfig,
    pub reconstruction: ReconstructionConfig,
    pub output: OutputConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 20_240_601,
            events: 10_000,
            constants: ConstantsConfig::default(),
            packet: PacketConfig::default(),
            beam: BeamConfig::default(),
            detectors: default_detectors(),
            mixing: MixingConfig::default(),
            state: StateConfig::default(),
            species: SpeciesTableConfig::default(),
            reconstruction: ReconstructionConfig::default(),
            output: OutputConfig::default(),
        }
    }
}

fn parse_override_value(raw: &str) -> toml::Value {
    // Bare words that are not TOML literals are taken as strings.
    toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Sets `key` (dotted, array elements by index) to the literal `raw`.
pub fn apply_override(doc: &mut toml::Table, assignment: &str) -> Result<(), ConfigError> {
    let bad = |why: &str| ConfigError::Override(assignment.to_string(), why.to_string());
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| bad("expected key=value"))?;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(bad("empty key segment"));
    }
    let value = parse_override_value(raw.trim());
    let (last, path) = parts.split_last().expect("non-empty");
    let mut cursor: &mut toml::Value = doc
        .entry(path.first().copied().unwrap_or(last).to_string())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    if path.is_empty() {
        *cursor = value;
        return Ok(());
    }
    for seg in &path[1..] {
        cursor = step(cursor, seg).ok_or_else(|| bad("path does not exist"))?;
    }
    match cursor {
        toml::Value::Table(t) => {
            t.insert(last.to_string(), value);
        }
        toml::Value::Array(a) => {
            let i: usize = last.parse().map_err(|_| bad("array index expected"))?;
            *a.get_mut(i)
                .ok_or_else(|| bad("array index out of range"))? = value;
        }
        _ => return Err(bad("not a table")),
    }
    Ok(())
}

fn step<'a>(v: &'a mut toml::Value, seg: &str) -> Option<&'a mut toml::Value> {
    match v {
        toml::Value::Table(t) => Some(
            t.entry(seg.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new())),
        ),
        toml::Value::Array(a) => seg.parse::<usize>().ok().and_then(|i| a.get_mut(i)),
        _ => None,
    }
}

impl ExperimentConfig {
    /// Parses TOML text; keys left out take their defaults.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut doc: toml::Table =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        // Overrides of defaulted sections need the defaults to be present.
        let defaults = toml::Table::try_from(Self::default())
            .map_err(|e| ConfigError::Parse(e.to_string()))?;
        for (k, v) in defaults {
            doc.entry(k).or_insert(v);
        }
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: Self = toml::Value::Table(doc)
            .try_into()
            .map_err(|e: toml::de::Error| ConfigError::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                path: p.to_path_buf(),
                source,
            })?,
            None => String::new(),
        };
        let mut cfg = Self::from_toml_str(&text, overrides)?;
        if let Ok(seed) = std::env::var(SEED_ENV) {
            cfg.seed = seed.trim().parse().map_err(|_| {
                ConfigError::Invalid(format!("{SEED_ENV}={seed} is not an unsigned integer"))
            })?;
        }
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |m: String| Err(ConfigError::Invalid(m));
        if !self.constants().is_valid() {
            return invalid("constants must be positive and finite".into());
        }
        if self.q_value() <= 0.0 {
            return invalid(format!(
                "q_value_j must be positive, got {}",
                self.q_value()
            ));
        }
        if !(self.reconstruction.theta > 0.0) {
            return invalid("reconstruction.theta must be positive".into());
        }
        if self.reconstruction.n_samples == 0 {
            return invalid("reconstruction.n_samples must be at least 1".into());
        }
        if !(self.reconstruction.t1_tol > 0.0 && self.reconstruction.t1_tol < 1.0) {
            return invalid("reconstruction.t1_tol must lie in (0, 1)".into());
        }
        let mut ids: Vec<u32> = self.detectors.iter().map(|d| d.id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.detectors.len() {
            return invalid("detector ids must be unique".into());
        }
        self.mixing()?;
        self.simulation_setup()?.validate()?;
        Ok(())
    }

    pub fn constants(&self) -> PhysicsConstants {
        PhysicsConstants {
            hbar: self.constants.hbar,
            kaon_mass: self.constants.kaon_mass_kg,
            pion_mass: self.constants.pion_mass_kg,
        }
    }

    pub fn q_value(&self) -> f64 {
        self.constants
            .q_value_j
            .unwrap_or_else(|| self.constants().two_pion_q())
    }

    pub fn mixing(&self) -> Result<KaonMixing, ConfigError> {
        let m = &self.mixing;
        KaonMixing::new(
            Complex64::new(m.p_re, m.p_im),
            Complex64::new(m.q_re, m.q_im),
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn species_table(&self) -> Result<SpeciesTable, ConfigError> {
        let defaults = SpeciesTable::default();
        Ok(SpeciesTable {
            long: self.species.long.build(Species::Long, &defaults.long)?,
            short: self.species.short.build(Species::Short, &defaults.short)?,
        })
    }

    pub fn short_lifetime(&self) -> f64 {
        self.species.short.lifetime_s
    }

    pub fn beam(&self) -> BeamGeometry {
        let b = &self.beam;
        BeamGeometry {
            source: b.source.into(),
            direction: b.direction.into(),
            speed: b.speed_m_per_s,
            fiducial_length: b.fiducial_length_m,
        }
    }

    pub fn simulation_setup(&self) -> Result<SimulationSetup, ConfigError> {
        let s = &self.state;
        let state = InitialKaonState::new(
            Complex64::new(s.a_re, s.a_im),
            Complex64::new(s.b_re, s.b_im),
        )
        .map_err(|e| ConfigError::Invalid(e.to_string()))?;
        Ok(SimulationSetup {
            constants: self.constants(),
            sigma0: self.packet.sigma0_m,
            beam: self.beam(),
            detectors: self
                .detectors
                .iter()
                .map(|d| DetectorPlane {
                    id: d.id,
                    anchor: d.anchor.into(),
                    normal: Vec2::from(d.normal),
                    extent: d.extent_m,
                    timing_resolution: d.timing_resolution_s,
                    momentum_resolution: d.momentum_resolution,
                })
                .collect(),
            state,
            species: self.species_table()?,
            q_value: self.q_value(),
            bohmian_offsets: self.packet.bohmian_offsets,
            kaon_spreading: self.packet.kaon_spreading,
        })
    }

    pub fn retrodiction_context(&self) -> RetrodictionContext {
        let c = self.constants();
        RetrodictionContext {
            beam: self.beam(),
            kaon_mass: c.kaon_mass,
            pion_mass: c.pion_mass,
            sigma0: self.packet.sigma0_m,
            hbar: c.hbar,
            timing: self.reconstruction.timing,
            t1_tol: self.reconstruction.t1_tol,
        }
    }

    pub fn output_path(&self, name: &str) -> PathBuf {
        self.output.dir.join(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = ExperimentConfig::default();
        cfg.validate().unwrap();
        let back = ExperimentConfig::from_toml_str(&cfg.to_toml_string(), &[]).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(ExperimentConfig::from_toml_str("", &[]).unwrap(), cfg);
    }

    #[test]
    fn shipped_default_file_matches_defaults() {
        let text = include_str!("../../../configs/default.toml");
        assert_eq!(ExperimentConfig::from_toml_str(text, &[]).unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(matches!(
            ExperimentConfig::from_toml_str("bogus = 1", &[]),
            Err(ConfigError::Parse(_))
        ));
        assert!(ExperimentConfig::from_toml_str("[beam]\nspeed = 1.0", &[]).is_err());
        let r =
            ExperimentConfig::from_toml_str("", &["species.KL.branching.warp_drive=0.1".into()]);
        assert!(matches!(r, Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn overrides_apply() {
        let cfg = ExperimentConfig::from_toml_str(
            "seed = 1",
            &[
                "packet.sigma0_m=2e-15".into(),
                "species.KS.lifetime_s=0.9e-10".into(),
                "reconstruction.mode=classical".into(),
                "detectors.1.extent_m=50".into(),
                "mixing.p_re=1.1".into(),
                "mixing.q_re=0.9".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.packet.sigma0_m, 2e-15);
        assert_eq!(cfg.short_lifetime(), 0.9e-10);
        assert_eq!(cfg.reconstruction.mode, ModeSelection::Classical);
        assert_eq!(cfg.detectors[1].extent_m, 50.0);
        assert!((cfg.mixing().unwrap().overlap_ls() - 0.198_019_801_980_198).abs() < 1e-12);
        assert!(ExperimentConfig::from_toml_str("", &["nonsense".into()]).is_err());
    }

    #[test]
    fn branching_must_sum_to_one() {
        let r = ExperimentConfig::from_toml_str("", &["species.KS.branching.pi_pi=0.5".into()]);
        assert!(matches!(r, Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn infeasible_geometry_is_a_config_error() {
        let r = ExperimentConfig::from_toml_str(
            "[[detectors]]\nid = 0\nanchor = [0.0, -5.0]\nnormal = [0.0, -1.0]\nextent_m = 10.0\n",
            &[],
        );
        assert!(r.is_ok());
        let r = ExperimentConfig::from_toml_str(
            "[[detectors]]\nid = 0\nanchor = [0.0, 5.0]\nnormal = [0.0, -1.0]\nextent_m = 10.0\n",
            &[],
        );
        assert!(matches!(r, Err(ConfigError::Invalid(m)) if m.contains("intercept")));
    }

    #[test]
    fn defaults_match_reference_values() {
        let cfg = ExperimentConfig::default();
        assert_eq!(cfg.short_lifetime(), KS_LIFETIME);
        assert_eq!(cfg.species.long.lifetime_s, KL_LIFETIME);
        assert_eq!(cfg.beam.fiducial_length_m, 10.0);
        assert_eq!(cfg.reconstruction.theta, 20.0);
    }
}
