//! Monte Carlo decay events in the lab plane.
//!
//! A kaon leaves the source along the beam, decays after an exponential
//! proper time, and in the π⁺π⁻ channel each pion rides a free Gaussian
//! packet anchored at the decay vertex. Pions are transported with the
//! componentwise free-trajectory law to the first detector plane they
//! cross.

use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bohm::{guarded_normal, PlanarTrajectorySpec};
use crate::constants::PhysicsConstants;
use crate::kaon::{sample_decay, DecayMode, InitialKaonState, Species, SpeciesTable};
use crate::optimize;
use crate::rng::{Domain, StreamFactory};
use crate::vec2::Vec2;

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("no detector plane can intercept pions from the beam line")]
    GeometryInfeasible,
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
    #[error("kinetic energy release must be positive, got {0} J")]
    NegativeQ(f64),
    #[error("events file line {line}: {source}")]
    Parse {
        line: usize,
        source: serde_json::Error,
    },
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error, PartialEq)]
pub enum TransportError {
    #[error("trajectory never crosses the plane")]
    NoCrossing,
    #[error("crossing at {offset} m from the anchor is outside the extent {extent} m")]
    MissedExtent { offset: f64, extent: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BeamGeometry {
    pub source: Vec2,
    pub direction: Vec2,
    /// Kaon lab speed (m/s).
    pub speed: f64,
    pub fiducial_length: f64,
}

impl BeamGeometry {
    pub fn validate(&self) -> Result<(), SimulationError> {
        if !(self.speed > 0.0 && self.speed.is_finite()) {
            return Err(SimulationError::InvalidGeometry(
                "kaon speed must be positive".into(),
            ));
        }
        if !(self.fiducial_length > 0.0) {
            return Err(SimulationError::InvalidGeometry(
                "fiducial length must be positive".into(),
            ));
        }
        if (self.direction.norm() - 1.0).abs() > 1e-12 {
            return Err(SimulationError::InvalidGeometry(
                "beam direction must be a unit vector".into(),
            ));
        }
        Ok(())
    }
}

/// A straight detector in the lab plane. Pions are registered when they
/// cross from the side opposite `normal` to the side `normal` points to,
/// within `extent` of `anchor` along the plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectorPlane {
    pub id: u32,
    pub anchor: Vec2,
    pub normal: Vec2,
    /// Half-length along the plane (m).
    pub extent: f64,
    /// Gaussian arrival-time noise (s).
    pub timing_resolution: f64,
    /// Gaussian relative noise on the momentum magnitude.
    pub momentum_resolution: f64,
}

impl DetectorPlane {
    pub fn validate(&self) -> Result<(), SimulationError> {
        if !(self.extent > 0.0) {
            return Err(SimulationError::InvalidGeometry(format!(
                "detector {} extent must be positive",
                self.id
            )));
        }
        if !(self.timing_resolution >= 0.0 && self.momentum_resolution >= 0.0) {
            return Err(SimulationError::InvalidGeometry(format!(
                "detector {} resolutions must be ≥ 0",
                self.id
            )));
        }
        if (self.normal.norm() - 1.0).abs() > 1e-12 {
            return Err(SimulationError::InvalidGeometry(format!(
                "detector {} normal must be a unit vector",
                self.id
            )));
        }
        Ok(())
    }

    pub fn signed_distance(&self, p: Vec2) -> f64 {
        self.normal.dot(p - self.anchor)
    }
}

/// Earliest crossing of `plane` by the free trajectory, with the crossing
/// time found by bracketing and bisection.
pub fn transport_to_plane(
    spec: &PlanarTrajectorySpec,
    plane: &DetectorPlane,
) -> Result<(f64, Vec2), TransportError> {
    let n = plane.normal;
    let a = n.dot(spec.velocity);
    let b = n.dot(spec.offset);
    let base = plane.signed_distance(spec.origin);
    let g = |dt: f64| base + a * dt + b * spec.spread_factor(dt);
    let g0 = g(0.0);
    if g0 >= 0.0 {
        return Err(TransportError::NoCrossing);
    }
    let kappa = spec.spread_factor_rate(f64::INFINITY);
    let kappa = if kappa.is_finite() {
        kappa
    } else {
        spec.hbar / (2.0 * spec.mass * spec.sigma0 * spec.sigma0)
    };
    let asymptotic = a + b * kappa;
    let upper = if b >= 0.0 {
        if asymptotic <= 0.0 {
            return Err(TransportError::NoCrossing);
        }
        // s(Δ) ≤ 1 + κΔ bounds g from above, so this is a lower bound on the crossing.
        let mut hi = -g0 / asymptotic;
        let mut found = false;
        for _ in 0..200 {
            if g(hi) >= 0.0 {
                found = true;
                break;
            }
            hi *= 2.0;
        }
        if !found {
            return Err(TransportError::NoCrossing);
        }
        hi
    } else {
        if a <= 0.0 {
            return Err(TransportError::NoCrossing);
        }
        if asymptotic > 0.0 {
            // s(Δ) ≤ 1 + κΔ with b < 0 bounds g from below.
            -g0 / asymptotic
        } else {
            // Concave with an interior maximum where s'(Δ) = −a/b.
            let rho = (-a / b) / kappa;
            let tau = rho / (1.0 - rho * rho).sqrt();
            let peak = tau / kappa;
            if !(g(peak) >= 0.0) {
                return Err(TransportError::NoCrossing);
            }
            peak
        }
    };
    let dt =
        optimize::bisect(g, 0.0, upper, 1e-15 * upper, 400).ok_or(TransportError::NoCrossing)?;
    let t2 = spec.emission_time + dt;
    let hit = spec.position(t2).map_err(|_| TransportError::NoCrossing)?;
    let along = n.perp().dot(hit - plane.anchor);
    if along.abs() > plane.extent {
        return Err(TransportError::MissedExtent {
            offset: along,
            extent: plane.extent,
        });
    }
    Ok((t2, hit))
}

/// Nonrelativistic two-body decay into equal-mass pions.
///
/// In the pion-pair centre-of-momentum frame both pions carry |p*| = √(m_π·Q)
/// back to back along a uniformly random direction; the pair is then
/// boosted so that p₁ + p₂ equals the kaon momentum exactly.
pub fn two_body_decay<R: Rng + ?Sized>(
    kaon_momentum: Vec2,
    pion_mass: f64,
    q: f64,
    rng: &mut R,
) -> Result<(Vec2, Vec2), SimulationError> {
    if !(q > 0.0) {
        return Err(SimulationError::NegativeQ(q));
    }
    let p_star = (pion_mass * q).sqrt();
    let phi = rng.random::<f64>() * std::f64::consts::TAU;
    let rest = Vec2::new(phi.cos(), phi.sin()) * p_star;
    let half = kaon_momentum * 0.5;
    let p1 = half + rest;
    // Exact bookkeeping: the second momentum is the remainder.
    let p2 = kaon_momentum - p1;
    Ok((p1, p2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LostReason {
    /// Decay beyond the fiducial length.
    BeyondFiducial,
    /// A pion's packet centre reaches no detector.
    CentralMiss,
    /// The pion itself (with its offset) reaches no detector.
    PionMissed,
}

impl fmt::Display for LostReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LostReason::BeyondFiducial => "beyond_fiducial",
            LostReason::CentralMiss => "central_miss",
            LostReason::PionMissed => "pion_missed",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    #[serde(rename = "det")]
    pub detector: u32,
    pub t2: f64,
    pub pos: Vec2,
    /// Measured momentum (kg·m/s).
    pub p: Vec2,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub vertex: Vec2,
    pub t1: f64,
    pub parent: Species,
    pub mode: DecayMode,
    pub offsets: [Vec2; 2],
    /// Pre-noise pion momenta; not part of the events file.
    #[serde(skip)]
    pub momenta: Option<[Vec2; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecayEvent {
    pub id: u64,
    pub truth: Truth,
    pub hits: Vec<Hit>,
    pub lost: bool,
    pub lost_reason: Option<LostReason>,
}

impl DecayEvent {
    /// Detected π⁺π⁻ event with one hit per pion.
    pub fn is_detected_two_pion(&self) -> bool {
        !self.lost && self.truth.mode.is_charged_two_pion() && self.hits.len() == 2
    }
}

/// Everything needed to generate events.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulationSetup {
    pub constants: PhysicsConstants,
    /// Initial density width of every pion packet (m).
    pub sigma0: f64,
    pub beam: BeamGeometry,
    pub detectors: Vec<DetectorPlane>,
    pub state: InitialKaonState,
    pub species: SpeciesTable,
    /// Kinetic energy released in K → ππ (J).
    pub q_value: f64,
    /// Sample pion offsets from |ψ₀|²; false pins every pion to its packet centre.
    pub bohmian_offsets: bool,
    /// Also spread the kaon packet along its flight when placing the vertex.
    pub kaon_spreading: bool,
}

impl SimulationSetup {
    pub fn validate(&self) -> Result<(), SimulationError> {
        self.beam.validate()?;
        for d in &self.detectors {
            d.validate()?;
        }
        if !(self.sigma0 > 0.0) {
            return Err(SimulationError::InvalidGeometry(
                "sigma0 must be positive".into(),
            ));
        }
        if !(self.q_value > 0.0) {
            return Err(SimulationError::NegativeQ(self.q_value));
        }
        // Some plane must have the source line strictly on its near side.
        let reachable = self.detectors.iter().any(|d| {
            let s0 = d.signed_distance(self.beam.source);
            let s1 = d.signed_distance(
                self.beam.source + self.beam.direction * self.beam.fiducial_length,
            );
            s0 < 0.0 || s1 < 0.0
        });
        if !reachable {
            return Err(SimulationError::GeometryInfeasible);
        }
        Ok(())
    }

    pub fn kaon_momentum(&self) -> Vec2 {
        self.beam.direction * (self.constants.kaon_mass * self.beam.speed)
    }

    fn pion_spec(
        &self,
        vertex: Vec2,
        t1: f64,
        momentum: Vec2,
        offset: Vec2,
    ) -> PlanarTrajectorySpec {
        PlanarTrajectorySpec {
            origin: vertex,
            velocity: momentum * (1.0 / self.constants.pion_mass),
            offset,
            sigma0: self.sigma0,
            mass: self.constants.pion_mass,
            hbar: self.constants.hbar,
            emission_time: t1,
        }
    }

    /// Earliest detector crossing over all planes.
    pub fn first_crossing(&self, spec: &PlanarTrajectorySpec) -> Option<(u32, f64, Vec2)> {
        self.detectors
            .iter()
            .filter_map(|d| transport_to_plane(spec, d).ok().map(|(t, p)| (d.id, t, p)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
    }

    fn detector(&self, id: u32) -> &DetectorPlane {
        self.detectors
            .iter()
            .find(|d| d.id == id)
            .expect("known detector")
    }
}

/// Generates event `id` from its own random stream.
pub fn generate_event<R: Rng + ?Sized>(
    setup: &SimulationSetup,
    id: u64,
    rng: &mut R,
) -> DecayEvent {
    let decay = sample_decay(&setup.state, &setup.species, rng);
    let beam = &setup.beam;
    let mut vertex = beam.source + beam.direction * (beam.speed * decay.time);
    if setup.kaon_spreading {
        let kaon = PlanarTrajectorySpec {
            origin: Vec2::ZERO,
            velocity: Vec2::ZERO,
            offset: Vec2::ZERO,
            sigma0: setup.sigma0,
            mass: setup.constants.kaon_mass,
            hbar: setup.constants.hbar,
            emission_time: 0.0,
        };
        let (zx, _) = guarded_normal(rng);
        let (zy, _) = guarded_normal(rng);
        vertex += Vec2::new(zx, zy) * (setup.sigma0 * kaon.spread_factor(decay.time));
    }
    let mut event = DecayEvent {
        id,
        truth: Truth {
            vertex,
            t1: decay.time,
            parent: decay.parent,
            mode: decay.mode,
            offsets: [Vec2::ZERO; 2],
            momenta: None,
        },
        hits: Vec::new(),
        lost: false,
        lost_reason: None,
    };
    if (vertex - beam.source).dot(beam.direction) > beam.fiducial_length {
        event.lost = true;
        event.lost_reason = Some(LostReason::BeyondFiducial);
        return event;
    }
    if !decay.mode.is_charged_two_pion() {
        return event;
    }
    let (p1, p2) = two_body_decay(
        setup.kaon_momentum(),
        setup.constants.pion_mass,
        setup.q_value,
        rng,
    )
    .expect("validated Q");
    event.truth.momenta = Some([p1, p2]);
    let mut offsets = [Vec2::ZERO; 2];
    if setup.bohmian_offsets {
        for o in offsets.iter_mut() {
            let (zx, _) = guarded_normal(rng);
            let (zy, _) = guarded_normal(rng);
            *o = Vec2::new(zx, zy) * setup.sigma0;
        }
    }
    event.truth.offsets = offsets;
    for (p, offset) in [p1, p2].into_iter().zip(offsets) {
        let central = setup.pion_spec(vertex, decay.time, p, Vec2::ZERO);
        if setup.first_crossing(&central).is_none() {
            event.lost = true;
            event.lost_reason.get_or_insert(LostReason::CentralMiss);
            continue;
        }
        let actual = setup.pion_spec(vertex, decay.time, p, offset);
        match setup.first_crossing(&actual) {
            Some((det, t2, pos)) => {
                let d = setup.detector(det);
                let t2 = if d.timing_resolution > 0.0 {
                    t2 + Normal::new(0.0, d.timing_resolution)
                        .expect("finite")
                        .sample(rng)
                } else {
                    t2
                };
                let p = if d.momentum_resolution > 0.0 {
                    p * (1.0
                        + Normal::new(0.0, d.momentum_resolution)
                            .expect("finite")
                            .sample(rng))
                } else {
                    p
                };
                event.hits.push(Hit {
                    detector: det,
                    t2,
                    pos,
                    p,
                });
            }
            None => {
                event.lost = true;
                event.lost_reason.get_or_insert(LostReason::PionMissed);
            }
        }
    }
    event
}

/// Generates events `0..n`, each from its own stream; output is sorted by id.
pub fn simulate(setup: &SimulationSetup, n: u64, seed: u64) -> Vec<DecayEvent> {
    let streams = StreamFactory::new(seed);
    let mut events: Vec<DecayEvent> = (0..n)
        .into_par_iter()
        .map(|id| generate_event(setup, id, &mut streams.stream(Domain::Simulation, id)))
        .collect();
    events.sort_by_key(|e| e.id);
    events
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct EventAccounting {
    pub generated: usize,
    pub detected_two_pion: usize,
    pub other_mode: usize,
    pub lost_beyond_fiducial: usize,
    pub lost_central_miss: usize,
    pub lost_pion_missed: usize,
}

impl EventAccounting {
    pub fn tally(events: &[DecayEvent]) -> Self {
        let mut acc = Self {
            generated: events.len(),
            ..Self::default()
        };
        for e in events {
            match e.lost_reason {
                Some(LostReason::BeyondFiducial) => acc.lost_beyond_fiducial += 1,
                Some(LostReason::CentralMiss) => acc.lost_central_miss += 1,
                Some(LostReason::PionMissed) => acc.lost_pion_missed += 1,
                None if e.is_detected_two_pion() => acc.detected_two_pion += 1,
                None => acc.other_mode += 1,
            }
        }
        acc
    }

    pub fn lost(&self) -> usize {
        self.lost_beyond_fiducial + self.lost_central_miss + self.lost_pion_missed
    }

    pub fn is_balanced(&self) -> bool {
        self.generated == self.detected_two_pion + self.other_mode + self.lost()
    }
}

pub fn write_events(path: &Path, events: &[DecayEvent]) -> Result<(), SimulationError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for e in events {
        serde_json::to_writer(&mut out, e)
            .map_err(|source| SimulationError::Parse { line: 0, source })?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_events(path: &Path) -> Result<Vec<DecayEvent>, SimulationError> {
    let reader = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(
            serde_json::from_str(&line).map_err(|source| SimulationError::Parse {
                line: i + 1,
                source,
            })?,
        );
    }
    Ok(events)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kaon::KS_LIFETIME;
    use approx::assert_relative_eq;
    use num_complex::Complex64;

    fn plane(id: u32, anchor: Vec2, normal: Vec2, extent: f64) -> DetectorPlane {
        DetectorPlane {
            id,
            anchor,
            normal,
            extent,
            timing_resolution: 0.0,
            momentum_resolution: 0.0,
        }
    }

    fn spec(velocity: Vec2, offset: Vec2) -> PlanarTrajectorySpec {
        PlanarTrajectorySpec {
            origin: Vec2::ZERO,
            velocity,
            offset,
            sigma0: 1.0,
            mass: 0.5,
            hbar: 1.0,
            emission_time: 0.25,
        }
    }

    #[test]
    fn central_crossing_time_is_distance_over_speed() {
        let d = plane(0, Vec2::new(0.0, 3.0), Vec2::new(0.0, 1.0), 100.0);
        let (t2, hit) = transport_to_plane(&spec(Vec2::new(0.0, 2.0), Vec2::ZERO), &d).unwrap();
        assert_relative_eq!(t2, 0.25 + 1.5, max_relative = 1e-14);
        assert_relative_eq!(hit.y, 3.0, max_relative = 1e-14);
    }

    #[test]
    fn offset_along_plane_shifts_hit() {
        let d = plane(0, Vec2::new(0.0, 300.0), Vec2::new(0.0, 1.0), 1e6);
        let off = Vec2::new(0.01, 0.0);
        let (t2, hit) = transport_to_plane(&spec(Vec2::new(0.0, 2.0), off), &d).unwrap();
        assert_relative_eq!(t2, 150.25, max_relative = 1e-14);
        // Displacement X₀·s(Δ) from the closed form.
        let s = (1.0f64 + 150.0 * 150.0).sqrt();
        assert_relative_eq!(hit.x, 0.01 * s, max_relative = 1e-12);
    }

    #[test]
    fn narrow_extent_misses() {
        let d = plane(0, Vec2::new(0.0, 300.0), Vec2::new(0.0, 1.0), 1.0);
        let r = transport_to_plane(&spec(Vec2::new(0.0, 2.0), Vec2::new(0.01, 0.0)), &d);
        assert!(matches!(r, Err(TransportError::MissedExtent { .. })));
    }

    #[test]
    fn receding_and_reversing_trajectories_do_not_cross() {
        let d = plane(0, Vec2::new(0.0, 3.0), Vec2::new(0.0, 1.0), 100.0);
        assert_eq!(
            transport_to_plane(&spec(Vec2::new(0.0, -1.0), Vec2::ZERO), &d),
            Err(TransportError::NoCrossing)
        );
        // Offset pulling away faster than the packet moves: κ = 1, b = −3.
        assert_eq!(
            transport_to_plane(&spec(Vec2::new(0.0, 1.0), Vec2::new(0.0, -3.0)), &d),
            Err(TransportError::NoCrossing)
        );
        // Offset pulling away but the packet still gets there.
        let (t2, hit) =
            transport_to_plane(&spec(Vec2::new(0.0, 4.0), Vec2::new(0.0, -1.0)), &d).unwrap();
        assert!(t2 > 0.25);
        assert!((hit.y - 3.0).abs() < 1e-12);
    }

    #[test]
    fn crossing_found_when_convex_and_concave() {
        let d = plane(0, Vec2::new(0.0, 50.0), Vec2::new(0.0, 1.0), 1e3);
        for off in [0.5, -0.2, 2.0] {
            let s = spec(Vec2::new(0.3, 1.0), Vec2::new(0.0, off));
            let (t2, hit) = transport_to_plane(&s, &d).unwrap();
            assert!((hit.y - 50.0).abs() < 1e-10, "offset {off} hit {hit:?}");
            // Earliest: just before t2 the particle is below the plane.
            assert!(s.position(t2 - 1e-6 * (t2 - 0.25)).unwrap().y < 50.0);
        }
    }

    #[test]
    fn two_body_at_rest_and_boosted() {
        let mut rng = StreamFactory::new(3).stream(Domain::Validation, 0);
        let m = 2.488e-28;
        let q = 3.5e-11;
        let (p1, p2) = two_body_decay(Vec2::ZERO, m, q, &mut rng).unwrap();
        assert_eq!(p1, -p2);
        assert_relative_eq!(p1.norm_sq() / (2.0 * m), q / 2.0, max_relative = 1e-12);
        let pk = Vec2::new(2.66e-19, 1e-21);
        let (p1, p2) = two_body_decay(pk, m, q, &mut rng).unwrap();
        assert!((p1 + p2 - pk).norm() <= 1e-15 * pk.norm());
        let rest = p1 - pk * 0.5;
        assert_relative_eq!(rest.norm_sq() / (2.0 * m), q / 2.0, max_relative = 1e-12);
        assert!(matches!(
            two_body_decay(pk, m, -1.0, &mut rng),
            Err(SimulationError::NegativeQ(_))
        ));
    }

    pub(crate) fn test_setup(speed: f64, bohmian: bool) -> SimulationSetup {
        SimulationSetup {
            constants: PhysicsConstants::default(),
            sigma0: 1e-15,
            beam: BeamGeometry {
                source: Vec2::ZERO,
                direction: Vec2::new(1.0, 0.0),
                speed,
                fiducial_length: 10.0,
            },
            detectors: vec![
                plane(0, Vec2::new(15.0, 1.0), Vec2::new(0.0, 1.0), 1e3),
                plane(1, Vec2::new(15.0, -1.0), Vec2::new(0.0, -1.0), 1e3),
            ],
            state: InitialKaonState::new(Complex64::new(0.0, 0.0), Complex64::new(1.0, 0.0))
                .unwrap(),
            species: SpeciesTable::default(),
            q_value: PhysicsConstants::default().two_pion_q(),
            bohmian_offsets: bohmian,
            kaon_spreading: false,
        }
    }

    fn force_pipi(setup: &mut SimulationSetup) {
        setup.species.short.branching = crate::kaon::BranchingTable::new([(DecayMode::PiPi, 1.0)]);
    }

    #[test]
    fn kaon_at_rest_gives_mirror_hits() {
        let mut s = test_setup(1e-30, false);
        force_pipi(&mut s);
        s.detectors = vec![
            plane(0, Vec2::new(0.0, 1.0), Vec2::new(0.0, 1.0), 1e3),
            plane(1, Vec2::new(0.0, -1.0), Vec2::new(0.0, -1.0), 1e3),
        ];
        let mut rng = StreamFactory::new(5).stream(Domain::Simulation, 0);
        let e = generate_event(&s, 0, &mut rng);
        assert!(e.is_detected_two_pion(), "{e:?}");
        let [p1, p2] = e.truth.momenta.unwrap();
        assert!((p1 + p2).norm() < 1e-9 * p1.norm());
        let (h1, h2) = (e.hits[0], e.hits[1]);
        assert!((h1.pos + h2.pos - e.truth.vertex * 2.0).norm() < 1e-9);
        assert_relative_eq!(h1.t2, h2.t2, max_relative = 1e-12);
    }

    #[test]
    fn classical_limit_hits_lie_on_straight_lines() {
        let mut s = test_setup(3e8, false);
        force_pipi(&mut s);
        let events = simulate(&s, 50, 17);
        for e in events.iter().filter(|e| e.is_detected_two_pion()) {
            for h in &e.hits {
                let v = h.p * (1.0 / s.constants.pion_mass);
                let along = e.truth.vertex + v * (h.t2 - e.truth.t1);
                assert!((along - h.pos).norm() < 1e-9, "{along:?} vs {:?}", h.pos);
                assert!(
                    (h.pos - e.truth.vertex).cross(v).abs()
                        < 1e-9 * (h.pos - e.truth.vertex).norm() * v.norm()
                );
            }
        }
    }

    #[test]
    fn momentum_conservation_every_event() {
        let mut s = test_setup(3e8, true);
        force_pipi(&mut s);
        let pk = s.kaon_momentum();
        for e in simulate(&s, 200, 4) {
            if let Some([p1, p2]) = e.truth.momenta {
                assert!((p1 + p2 - pk).norm() <= 1e-9 * pk.norm());
            }
        }
    }

    #[test]
    fn determinism_and_accounting() {
        let mut s = test_setup(3e8, true);
        s.state =
            InitialKaonState::new(Complex64::new(1.0, 0.0), Complex64::new(1.0, 0.0)).unwrap();
        let a = simulate(&s, 500, 99);
        let b = simulate(&s, 500, 99);
        assert_eq!(a, b);
        let acc = EventAccounting::tally(&a);
        assert!(acc.is_balanced(), "{acc:?}");
        assert!(acc.lost_beyond_fiducial > 0);
        assert!(acc.detected_two_pion > 0);
    }

    #[test]
    fn short_tail_beyond_ten_lifetimes() {
        let s = test_setup(3e8, false);
        let n = 10_000;
        let events = simulate(&s, n, 2024);
        let beyond = events
            .iter()
            .filter(|e| e.truth.parent == Species::Short && e.truth.t1 > 10.0 * KS_LIFETIME)
            .count();
        let p = (-10.0f64).exp();
        let se = (p * (1.0 - p) / n as f64).sqrt();
        assert!((beyond as f64 / n as f64 - p).abs() <= 3.0 * se + 1.0 / n as f64);
    }

    #[test]
    fn geometry_validation() {
        let mut s = test_setup(3e8, false);
        assert!(s.validate().is_ok());
        s.detectors = vec![plane(0, Vec2::new(0.0, -5.0), Vec2::new(0.0, -1.0), 10.0)];
        s.detectors[0].anchor = Vec2::new(0.0, 5.0);
        assert!(matches!(
            s.validate(),
            Err(SimulationError::GeometryInfeasible)
        ));
        let mut s = test_setup(0.0, false);
        assert!(s.validate().is_err());
        s.beam.speed = 1.0;
        s.beam.direction = Vec2::new(1.0, 1.0);
        assert!(s.validate().is_err());
    }

    #[test]
    fn jsonl_roundtrip_and_schema() {
        let mut s = test_setup(3e8, true);
        force_pipi(&mut s);
        let events = simulate(&s, 20, 8);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("events.jsonl");
        write_events(&path, &events).unwrap();
        let back = read_events(&path).unwrap();
        assert_eq!(back.len(), events.len());
        for (a, b) in events.iter().zip(&back) {
            assert_eq!(a.truth.vertex, b.truth.vertex);
            assert_eq!(a.truth.t1, b.truth.t1);
            assert_eq!(a.hits, b.hits);
        }
        let first = std::fs::read_to_string(&path).unwrap();
        let v: serde_json::Value = serde_json::from_str(first.lines().next().unwrap()).unwrap();
        for key in ["id", "truth", "hits", "lost", "lost_reason"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        for key in ["vertex", "t1", "parent", "mode", "offsets"] {
            assert!(v["truth"].get(key).is_some(), "missing truth.{key}");
        }
        assert!(v["truth"]["parent"] == "KS" || v["truth"]["parent"] == "KL");
    }

    proptest::proptest! {
        #[test]
        fn two_body_conserves_momentum(px in -1e-18f64..1e-18, py in -1e-18f64..1e-18, q in 1e-13f64..1e-10, seed in 0u64..1000) {
            let mut rng = StreamFactory::new(seed).stream(Domain::Validation, 9);
            let pk = Vec2::new(px, py);
            let m = 2.488e-28;
            let (p1, p2) = two_body_decay(pk, m, q, &mut rng).unwrap();
            let scale = pk.norm().max(p1.norm());
            proptest::prop_assert!((p1 + p2 - pk).norm() <= 1e-15 * scale);
            let rest = p1 - pk * 0.5;
            proptest::prop_assert!((rest.norm_sq() / m / q - 1.0).abs() < 1e-12);
        }
    }
}
