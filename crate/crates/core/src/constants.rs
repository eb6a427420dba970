use serde::{Deserialize, Serialize};

/// Reduced Planck constant, CODATA 2018 exact value (J·s).
pub const HBAR: f64 = 1.054_571_817e-34;

/// Kilograms per MeV/c².
pub const KG_PER_MEV: f64 = 1.782_661_921e-30;

/// Joules per MeV.
pub const JOULE_PER_MEV: f64 = 1.602_176_634e-13;

/// Neutral kaon mass, 497.611 MeV/c² (PDG). Not a value taken from the
/// decay-time analysis itself; override through config if needed.
pub const KAON_MASS_MEV: f64 = 497.611;

/// Charged pion mass, 139.570 MeV/c² (PDG).
pub const PION_MASS_MEV: f64 = 139.570_39;

pub fn mev_to_kg(mev: f64) -> f64 {
    mev * KG_PER_MEV
}

pub fn mev_to_joule(mev: f64) -> f64 {
    mev * JOULE_PER_MEV
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicsConstants {
    pub hbar: f64,
    pub kaon_mass: f64,
    pub pion_mass: f64,
}

impl Default for PhysicsConstants {
    fn default() -> Self {
        Self {
            hbar: HBAR,
            kaon_mass: mev_to_kg(KAON_MASS_MEV),
            pion_mass: mev_to_kg(PION_MASS_MEV),
        }
    }
}

impl PhysicsConstants {
    pub fn is_valid(&self) -> bool {
        [self.hbar, self.kaon_mass, self.pion_mass]
            .iter()
            .all(|v| v.is_finite() && *v > 0.0)
    }

    /// Kinetic energy released in K → ππ with equal pion masses.
    pub fn two_pion_q(&self) -> f64 {
        (self.kaon_mass - 2.0 * self.pion_mass) * (299_792_458.0f64).powi(2)
    }
}
