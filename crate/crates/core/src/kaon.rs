//! Neutral-kaon state algebra: K_L/K_S mixing, overlap, exponential decay,
//! branching tables, and the unitarity residual of a linear measurement.

use std::collections::BTreeMap;
use std::fmt;

use num_complex::Complex64;
use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// K_S mean lifetime (s).
pub const KS_LIFETIME: f64 = 1e-10;

/// K_L mean lifetime (s), PDG 5.116×10⁻⁸ s. External reference value.
pub const KL_LIFETIME: f64 = 5.116e-8;

/// Tolerance on branching-table normalization.
pub const BRANCHING_SUM_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, PartialEq)]
pub enum KaonError {
    #[error("mixing parameters p and q both vanish")]
    DegenerateMixing,
    #[error("negative time {0} s")]
    NegativeTime(f64),
    #[error("invalid species {label}: {reason}")]
    InvalidSpecies { label: Species, reason: String },
    #[error("initial state amplitudes both vanish")]
    DegenerateState,
    #[error("overlap magnitude {0} exceeds 1")]
    OverlapOutOfRange(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Species {
    #[serde(rename = "KL")]
    Long,
    #[serde(rename = "KS")]
    Short,
}

impl fmt::Display for Species {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Species::Long => "KL",
            Species::Short => "KS",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayMode {
    /// Charged two-pion final state π⁺π⁻, the one the detectors key on.
    PiPi,
    Pi0Pi0,
    PiENu,
    PiMuNu,
    ThreePi,
    Other,
}

impl DecayMode {
    pub const ALL: [DecayMode; 6] = [
        DecayMode::PiPi,
        DecayMode::Pi0Pi0,
        DecayMode::PiENu,
        DecayMode::PiMuNu,
        DecayMode::ThreePi,
        DecayMode::Other,
    ];

    pub fn name(self) -> &'static str {
        match self {
            DecayMode::PiPi => "pi_pi",
            DecayMode::Pi0Pi0 => "pi0_pi0",
            DecayMode::PiENu => "pi_e_nu",
            DecayMode::PiMuNu => "pi_mu_nu",
            DecayMode::ThreePi => "three_pi",
            DecayMode::Other => "other",
        }
    }

    pub fn is_charged_two_pion(self) -> bool {
        self == DecayMode::PiPi
    }
}

impl fmt::Display for DecayMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// CP mixing parameters of K_L = (pK⁰ − qK̄⁰)/N and K_S = (pK⁰ + qK̄⁰)/N.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KaonMixing {
    pub p: Complex64,
    pub q: Complex64,
}

impl KaonMixing {
    pub fn new(p: Complex64, q: Complex64) -> Result<Self, KaonError> {
        if p.norm_sqr() + q.norm_sqr() <= 0.0 {
            return Err(KaonError::DegenerateMixing);
        }
        Ok(Self { p, q })
    }

    pub fn real(p: f64, q: f64) -> Result<Self, KaonError> {
        Self::new(Complex64::new(p, 0.0), Complex64::new(q, 0.0))
    }

    fn norm(&self) -> f64 {
        (self.p.norm_sqr() + self.q.norm_sqr()).sqrt()
    }

    /// (K⁰, K̄⁰) components of the normalized K_L.
    pub fn long_state(&self) -> [Complex64; 2] {
        let n = self.norm();
        [self.p / n, -self.q / n]
    }

    /// (K⁰, K̄⁰) components of the normalized K_S.
    pub fn short_state(&self) -> [Complex64; 2] {
        let n = self.norm();
        [self.p / n, self.q / n]
    }

    /// ⟨K_L|K_S⟩ = (|p|² − |q|²)/(|p|² + |q|²). Zero iff CP is conserved.
    pub fn overlap_ls(&self) -> f64 {
        let pp = self.p.norm_sqr();
        let qq = self.q.norm_sqr();
        (pp - qq) / (pp + qq)
    }
}

pub fn overlap_ls(mixing: &KaonMixing) -> Result<f64, KaonError> {
    if mixing.p.norm_sqr() + mixing.q.norm_sqr() <= 0.0 {
        return Err(KaonError::DegenerateMixing);
    }
    Ok(mixing.overlap_ls())
}

/// Decay mode → probability, kept sorted by mode for reproducible sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchingTable(pub BTreeMap<DecayMode, f64>);

impl BranchingTable {
    pub fn new(entries: impl IntoIterator<Item = (DecayMode, f64)>) -> Self {
        Self(entries.into_iter().collect())
    }

    pub fn probability(&self, mode: DecayMode) -> f64 {
        self.0.get(&mode).copied().unwrap_or(0.0)
    }

    pub fn total(&self) -> f64 {
        self.0.values().sum()
    }

    /// Inverse-CDF draw; `u` in [0, 1).
    pub fn select(&self, u: f64) -> DecayMode {
        let mut acc = 0.0;
        let mut last = DecayMode::Other;
        for (&mode, &p) in &self.0 {
            if p <= 0.0 {
                continue;
            }
            acc += p;
            last = mode;
            if u < acc {
                return mode;
            }
        }
        last
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KaonSpecies {
    pub label: Species,
    /// Decay width Γ = 1/lifetime (1/s).
    pub width: f64,
    /// Rest-energy phase rate in exp(−imt) (1/s). Stored, not used by the sampler.
    pub mass_phase: f64,
    pub branching: BranchingTable,
}

impl KaonSpecies {
    pub fn from_lifetime(
        label: Species,
        lifetime: f64,
        mass_phase: f64,
        branching: BranchingTable,
    ) -> Result<Self, KaonError> {
        let s = Self {
            label,
            width: 1.0 / lifetime,
            mass_phase,
            branching,
        };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<(), KaonError> {
        let invalid = |reason: String| KaonError::InvalidSpecies {
            label: self.label,
            reason,
        };
        if !(self.width > 0.0 && self.width.is_finite()) {
            return Err(invalid(format!(
                "decay width {} must be positive",
                self.width
            )));
        }
        if let Some((m, p)) = self.branching.0.iter().find(|(_, p)| !(**p >= 0.0)) {
            return Err(invalid(format!("branching ratio for {m} is {p}")));
        }
        let total = self.branching.total();
        if (total - 1.0).abs() > BRANCHING_SUM_TOLERANCE {
            return Err(invalid(format!("branching ratios sum to {total}")));
        }
        Ok(())
    }

    pub fn lifetime(&self) -> f64 {
        1.0 / self.width
    }

    /// Survival probability e^{−Γt}.
    pub fn survival_probability(&self, t: f64) -> Result<f64, KaonError> {
        if t < 0.0 {
            return Err(KaonError::NegativeTime(t));
        }
        Ok((-self.width * t).exp())
    }

    /// Amplitude factor exp(−Γt/2)·exp(−imt).
    pub fn amplitude_factor(&self, t: f64) -> Complex64 {
        Complex64::from_polar((-0.5 * self.width * t).exp(), -self.mass_phase * t)
    }

    /// K_S defaults: 10⁻¹⁰ s lifetime; π⁺π⁻ 69.2%, π⁰π⁰ 30.8% (PDG, rounded).
    pub fn default_short() -> Self {
        Self::from_lifetime(
            Species::Short,
            KS_LIFETIME,
            rest_phase_rate(),
            BranchingTable::new([(DecayMode::PiPi, 0.692), (DecayMode::Pi0Pi0, 0.308)]),
        )
        .expect("valid defaults")
    }

    /// K_L defaults: πeν 39%, πμν 27%, 3π 33%, ππ 10⁻³; the remaining
    /// 0.9% of the listed approximate ratios goes to `other`.
    pub fn default_long() -> Self {
        Self::from_lifetime(
            Species::Long,
            KL_LIFETIME,
            rest_phase_rate(),
            BranchingTable::new([
                (DecayMode::PiENu, 0.39),
                (DecayMode::PiMuNu, 0.27),
                (DecayMode::ThreePi, 0.33),
                (DecayMode::PiPi, 0.001),
                (DecayMode::Other, 0.009),
            ]),
        )
        .expect("valid defaults")
    }
}

fn rest_phase_rate() -> f64 {
    crate::constants::mev_to_joule(crate::constants::KAON_MASS_MEV) / crate::constants::HBAR
}

pub fn survival_probability(species: &KaonSpecies, t: f64) -> Result<f64, KaonError> {
    species.survival_probability(t)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeciesTable {
    pub long: KaonSpecies,
    pub short: KaonSpecies,
}

impl Default for SpeciesTable {
    fn default() -> Self {
        Self {
            long: KaonSpecies::default_long(),
            short: KaonSpecies::default_short(),
        }
    }
}

impl SpeciesTable {
    pub fn get(&self, s: Species) -> &KaonSpecies {
        match s {
            Species::Long => &self.long,
            Species::Short => &self.short,
        }
    }
}

/// a|K_L⟩ + b|K_S⟩ with |a|² + |b|² = 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitialKaonState {
    pub a: Complex64,
    pub b: Complex64,
}

impl InitialKaonState {
    /// Normalizes the supplied amplitudes.
    pub fn new(a: Complex64, b: Complex64) -> Result<Self, KaonError> {
        let n = (a.norm_sqr() + b.norm_sqr()).sqrt();
        if !(n > 0.0) {
            return Err(KaonError::DegenerateState);
        }
        Ok(Self { a: a / n, b: b / n })
    }

    pub fn long_probability(&self) -> f64 {
        self.a.norm_sqr()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecaySample {
    pub parent: Species,
    pub time: f64,
    pub mode: DecayMode,
}

/// Draws parent species, proper decay time and mode. Interference between
/// the K_L and K_S components is not modelled.
pub fn sample_decay<R: Rng + ?Sized>(
    state: &InitialKaonState,
    species: &SpeciesTable,
    rng: &mut R,
) -> DecaySample {
    let parent = if rng.random::<f64>() < state.long_probability() {
        Species::Long
    } else {
        Species::Short
    };
    let sp = species.get(parent);
    let time = Exp::new(sp.width).expect("positive width").sample(rng);
    let mode = sp.branching.select(rng.random::<f64>());
    DecaySample { parent, time, mode }
}

/// Overlaps entering a linear, unitary measurement of a two-state system.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MeasurementModel {
    pub system_overlap: Complex64,
    pub apparatus_overlap: Complex64,
    pub a: Complex64,
    pub b: Complex64,
}

impl MeasurementModel {
    pub fn new(
        system_overlap: Complex64,
        apparatus_overlap: Complex64,
        a: Complex64,
        b: Complex64,
    ) -> Result<Self, KaonError> {
        for o in [system_overlap, apparatus_overlap] {
            if o.norm() > 1.0 + 1e-12 {
                return Err(KaonError::OverlapOutOfRange(o.norm()));
            }
        }
        Ok(Self {
            system_overlap,
            apparatus_overlap,
            a,
            b,
        })
    }
}

/// a*·b·⟨ψ₁|ψ₂⟩·(1 − ⟨A₁|A₂⟩).
///
/// Unitarity requires a*b⟨ψ₁|ψ₂⟩ = a*b⟨ψ₁|ψ₂⟩⟨A₁|A₂⟩, so any nonzero value
/// rules out a linear unitary measurement that separates the two states.
pub fn unitarity_residual(model: &MeasurementModel) -> Complex64 {
    model.a.conj() * model.b * model.system_overlap * (1.0 - model.apparatus_overlap)
}
