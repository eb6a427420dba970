//! Bohmian trajectories: the guidance law on a grid wavefunction, the
//! closed-form free-packet trajectory and its inversion, and ensembles of
//! initial offsets drawn from |ψ₀|².

use std::io::Write;
use std::path::Path;

use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::gaussian_packet::{GaussianPacket, PacketError};
use crate::quantum::{
    self, GridWaveFunction, PolarFields, PotentialSpec, Propagator, QuantumError,
};
use crate::rng::{Domain, StreamFactory};
use crate::vec2::Vec2;

/// Offsets are drawn within ±10σ₀; anything outside is re-drawn.
pub const OFFSET_GUARD_SIGMAS: f64 = 10.0;

#[derive(Debug, Error)]
pub enum BohmError {
    #[error("elapsed time must be positive, got {0} s")]
    NonPositiveElapsed(f64),
    #[error("offset {offset} m exceeds the ±{OFFSET_GUARD_SIGMAS}σ₀ guard (σ₀ = {sigma0} m)")]
    OffsetOutOfRange { offset: f64, sigma0: f64 },
    #[error(transparent)]
    Packet(#[from] PacketError),
    #[error(transparent)]
    Quantum(#[from] QuantumError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryState {
    pub position: f64,
    pub time: f64,
}

/// A particle riding a free Gaussian packet, `initial_offset` away from the
/// packet centre at `emission_time`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FreeTrajectorySpec {
    pub packet: GaussianPacket,
    pub initial_offset: f64,
    pub emission_time: f64,
}

impl FreeTrajectorySpec {
    pub fn new(
        packet: GaussianPacket,
        initial_offset: f64,
        emission_time: f64,
    ) -> Result<Self, BohmError> {
        if !(initial_offset.abs() <= OFFSET_GUARD_SIGMAS * packet.sigma0) {
            return Err(BohmError::OffsetOutOfRange {
                offset: initial_offset,
                sigma0: packet.sigma0,
            });
        }
        Ok(Self {
            packet,
            initial_offset,
            emission_time,
        })
    }

    pub fn emission_center(&self) -> f64 {
        self.packet.center_at(self.emission_time)
    }
}

/// Particle position at `t2`: the classical line of the packet centre plus
/// the initial offset stretched by the spreading factor s(t₂ − t₁).
pub fn free_position(spec: &FreeTrajectorySpec, t2: f64) -> Result<f64, BohmError> {
    let elapsed = t2 - spec.emission_time;
    if elapsed < 0.0 {
        return Err(PacketError::NegativeElapsed {
            t: t2,
            t0: spec.emission_time,
        }
        .into());
    }
    Ok(spec.emission_center()
        + spec.packet.velocity * elapsed
        + spec.initial_offset * spec.packet.spread_factor(elapsed))
}

/// Offset X₀ that puts the particle at `hit_position` at `hit_time`, given
/// emission at `emission_time`. Exact inverse of [`free_position`].
pub fn invert_offset(
    hit_position: f64,
    hit_time: f64,
    packet: &GaussianPacket,
    emission_time: f64,
) -> Result<f64, BohmError> {
    let elapsed = hit_time - emission_time;
    if !(elapsed > 0.0) {
        return Err(BohmError::NonPositiveElapsed(elapsed));
    }
    let center = packet.center_at(emission_time);
    Ok((hit_position - center - packet.velocity * elapsed) / packet.spread_factor(elapsed))
}

/// v = (1/m)∂S/∂x at `x`, linearly interpolated.
pub fn guidance_velocity(polar: &PolarFields, x: f64, mass: f64) -> Result<f64, QuantumError> {
    Ok(polar.phase_gradient_at(x)? / mass)
}

/// Co-evolves ψ and one particle; see [`integrate_trajectories`].
pub fn integrate_trajectory(
    psi0: &GridWaveFunction,
    potential: &PotentialSpec,
    start: TrajectoryState,
    dt: f64,
    n_steps: usize,
) -> Result<Vec<TrajectoryState>, BohmError> {
    let mut paths = integrate_trajectories(psi0, potential, &[start.position], dt, n_steps)?;
    Ok(paths.pop().expect("one path"))
}

/// Co-evolves ψ with Crank–Nicolson and transports every particle with the
/// explicit midpoint rule on the guidance field. The midpoint field uses
/// ψ averaged between the two solver steps.
///
/// All particles start at `psi0.time`. Returns one path of `n_steps + 1`
/// states per start position.
pub fn integrate_trajectories(
    psi0: &GridWaveFunction,
    potential: &PotentialSpec,
    starts: &[f64],
    dt: f64,
    n_steps: usize,
) -> Result<Vec<Vec<TrajectoryState>>, BohmError> {
    let threshold = quantum::DEFAULT_NODE_THRESHOLD;
    let mass = psi0.mass;
    let mut psi = psi0.clone();
    let mut paths: Vec<Vec<TrajectoryState>> = starts
        .iter()
        .map(|&x| {
            let mut p = Vec::with_capacity(n_steps + 1);
            p.push(TrajectoryState {
                position: x,
                time: psi0.time,
            });
            p
        })
        .collect();
    let mut polar = quantum::polar_decompose(&psi, threshold);
    for &x in starts {
        guidance_velocity(&polar, x, mass)?;
    }
    if n_steps == 0 {
        return Ok(paths);
    }
    let prop = Propagator::new(psi.grid, potential, mass, psi.hbar, dt)?;
    let mut scratch = vec![Complex64::new(0.0, 0.0); psi.amplitudes.len()];
    let mut mid = psi.clone();
    for step in 0..n_steps {
        let old = psi.amplitudes.clone();
        prop.step(&mut psi.amplitudes, &mut scratch);
        psi.time = psi0.time + (step + 1) as f64 * dt;
        for ((m, a), b) in mid.amplitudes.iter_mut().zip(&old).zip(&psi.amplitudes) {
            *m = (a + b) * 0.5;
        }
        let mid_polar = quantum::polar_decompose(&mid, threshold);
        for path in paths.iter_mut() {
            let x = path.last().expect("non-empty").position;
            let k1 = guidance_velocity(&polar, x, mass)?;
            let k2 = guidance_velocity(&mid_polar, x + 0.5 * dt * k1, mass)?;
            path.push(TrajectoryState {
                position: x + dt * k2,
                time: psi.time,
            });
        }
        polar = quantum::polar_decompose(&psi, threshold);
    }
    let norm = psi.norm();
    if (norm - psi0.norm()).abs() > quantum::NORM_ABORT {
        return Err(QuantumError::NormDrift(norm).into());
    }
    Ok(paths)
}

/// Initial offsets drawn from |ψ₀|², one counter-based stream per member.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryEnsemble {
    pub packet: GaussianPacket,
    pub members: Vec<FreeTrajectorySpec>,
    pub seed: u64,
    /// Draws rejected by the ±10σ₀ guard.
    pub redraws: usize,
}

impl TrajectoryEnsemble {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn offsets(&self) -> Vec<f64> {
        self.members.iter().map(|m| m.initial_offset).collect()
    }

    /// Every member transported to `t`.
    pub fn positions_at(&self, t: f64) -> Result<Vec<f64>, BohmError> {
        self.members.iter().map(|m| free_position(m, t)).collect()
    }
}

/// Draws one guarded standard-normal deviate; returns it with the number
/// of rejected draws.
pub fn guarded_normal<R: rand::Rng + ?Sized>(rng: &mut R) -> (f64, usize) {
    let mut rejected = 0;
    loop {
        let z: f64 = StandardNormal.sample(rng);
        if z.abs() <= OFFSET_GUARD_SIGMAS {
            return (z, rejected);
        }
        rejected += 1;
    }
}

pub fn sample_ensemble(packet: &GaussianPacket, n: usize, seed: u64) -> TrajectoryEnsemble {
    let streams = StreamFactory::new(seed);
    let mut redraws = 0;
    let members = (0..n as u64)
        .map(|i| {
            let mut rng = streams.stream(Domain::Ensemble, i);
            let (z, rejected) = guarded_normal(&mut rng);
            redraws += rejected;
            FreeTrajectorySpec {
                packet: *packet,
                initial_offset: z * packet.sigma0,
                emission_time: packet.t0,
            }
        })
        .collect();
    TrajectoryEnsemble {
        packet: *packet,
        members,
        seed,
        redraws,
    }
}

/// Planar free trajectory: the 1D law applied independently per axis with
/// a shared σ₀ and mass. The packet centre sits at `origin` at
/// `emission_time` and the particle at `origin + offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlanarTrajectorySpec {
    pub origin: Vec2,
    pub velocity: Vec2,
    pub offset: Vec2,
    pub sigma0: f64,
    pub mass: f64,
    pub hbar: f64,
    pub emission_time: f64,
}

impl PlanarTrajectorySpec {
    fn axis_packet(&self) -> GaussianPacket {
        GaussianPacket {
            center: 0.0,
            velocity: 0.0,
            sigma0: self.sigma0,
            mass: self.mass,
            t0: self.emission_time,
            hbar: self.hbar,
        }
    }

    pub fn spread_factor(&self, elapsed: f64) -> f64 {
        self.axis_packet().spread_factor(elapsed)
    }

    pub fn spread_factor_rate(&self, elapsed: f64) -> f64 {
        self.axis_packet().spread_factor_rate(elapsed)
    }

    /// The 1D specification along `axis` (0 = x, 1 = y).
    pub fn axis(&self, axis: usize) -> FreeTrajectorySpec {
        let pick = |v: Vec2| if axis == 0 { v.x } else { v.y };
        FreeTrajectorySpec {
            packet: GaussianPacket {
                center: pick(self.origin),
                velocity: pick(self.velocity),
                ..self.axis_packet()
            },
            initial_offset: pick(self.offset),
            emission_time: self.emission_time,
        }
    }

    pub fn position(&self, t: f64) -> Result<Vec2, BohmError> {
        Ok(Vec2::new(
            free_position(&self.axis(0), t)?,
            free_position(&self.axis(1), t)?,
        ))
    }
}

/// Writes `trajectory_id,t_s,x_m` rows (plus `y_m` for planar paths).
pub fn write_trajectories_csv(
    path: &Path,
    paths: &[Vec<(f64, Vec2)>],
    planar: bool,
) -> Result<(), BohmError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    if planar {
        writeln!(out, "trajectory_id,t_s,x_m,y_m")?;
    } else {
        writeln!(out, "trajectory_id,t_s,x_m")?;
    }
    for (id, p) in paths.iter().enumerate() {
        for (t, pos) in p {
            if planar {
                writeln!(out, "{id},{t},{},{}", pos.x, pos.y)?;
            } else {
                writeln!(out, "{id},{t},{}", pos.x)?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quantum::{prepare_gaussian, SpatialGrid};
    use crate::stats;
    use approx::assert_relative_eq;

    fn natural(center: f64, velocity: f64) -> GaussianPacket {
        GaussianPacket::with_hbar(center, velocity, 1.0, 0.5, 1.0).unwrap()
    }

    #[test]
    fn free_position_examples() {
        let p = GaussianPacket::with_hbar(0.0, 5.0, 1e-3, 1.0, 1e-6).unwrap();
        let centre = FreeTrajectorySpec::new(p, 0.0, 0.0).unwrap();
        assert_eq!(free_position(&centre, 2.0).unwrap(), 10.0);
        let off = FreeTrajectorySpec::new(p, 4e-3, 0.0).unwrap();
        assert_eq!(free_position(&off, 0.0).unwrap(), 4e-3);
        let unit = FreeTrajectorySpec::new(p, p.sigma0, 0.0).unwrap();
        let t = p.spreading_time();
        assert_relative_eq!(
            free_position(&unit, t).unwrap(),
            5.0 * t + 2f64.sqrt() * p.sigma0,
            max_relative = 1e-14
        );
        assert!(free_position(&unit, -1.0).is_err());
    }

    #[test]
    fn offset_guard() {
        let p = natural(0.0, 0.0);
        assert!(FreeTrajectorySpec::new(p, 10.0, 0.0).is_ok());
        assert!(matches!(
            FreeTrajectorySpec::new(p, 10.5, 0.0),
            Err(BohmError::OffsetOutOfRange { .. })
        ));
    }

    #[test]
    fn invert_offset_examples() {
        let p = natural(1.0, 2.0);
        let spec = FreeTrajectorySpec::new(p, 0.7, 0.0).unwrap();
        let hit = free_position(&spec, 3.0).unwrap();
        assert_relative_eq!(
            invert_offset(hit, 3.0, &p, 0.0).unwrap(),
            0.7,
            max_relative = 1e-12
        );
        assert_eq!(invert_offset(1.0 + 2.0 * 3.0, 3.0, &p, 0.0).unwrap(), 0.0);
        assert!(matches!(
            invert_offset(1.0, 0.0, &p, 0.0),
            Err(BohmError::NonPositiveElapsed(_))
        ));
    }

    #[test]
    fn invert_offset_high_precision_values() {
        // Frozen from a 50-digit evaluation of (hit − c − vΔ)/√(1+(ħΔ/2mσ₀²)²).
        let p = GaussianPacket::with_hbar(0.3, 2.5e8, 1e-15, 2.488e-28, 1.054_571_817e-34).unwrap();
        let cases = [
            (0.0, -5.190_353_005_612_324e-16),
            (1e-9, -4.456_363_691_687_349e-16),
            (5e-9, 1.415_550_819_712_452e-16),
            (9e-9, 5.426_278_142_231_066e-15),
            (9.999e-9, 6.604_724_199_641_683e-12),
        ];
        for (t1, expect) in cases {
            let p = GaussianPacket {
                center: 0.3 - 2.5e8 * t1,
                ..p
            };
            // Anchor so that center_at(t1) = 0.3.
            let got = invert_offset(1.7, 1e-8, &p, t1).unwrap();
            assert!(
                (got - expect).abs() < 1e-9 * expect.abs(),
                "t1={t1} got {got} want {expect}"
            );
        }
    }

    #[test]
    fn guidance_velocity_examples() {
        let g = SpatialGrid::centered(0.0, 12.0, 1201).unwrap();
        let still =
            quantum::polar_decompose(&prepare_gaussian(g, &natural(0.0, 0.0)).unwrap(), 1e-8);
        assert_eq!(guidance_velocity(&still, 0.37, 0.5).unwrap(), 0.0);
        let moving =
            quantum::polar_decompose(&prepare_gaussian(g, &natural(0.0, 1.3)).unwrap(), 1e-8);
        for x in [-2.0, 0.0, 1.1, 3.3] {
            assert_relative_eq!(
                guidance_velocity(&moving, x, 0.5).unwrap(),
                1.3,
                max_relative = 1e-6
            );
        }
        assert!(matches!(
            guidance_velocity(&moving, 20.0, 0.5),
            Err(QuantumError::OutOfGrid(_))
        ));
        assert!(matches!(
            guidance_velocity(&moving, 11.9, 0.5),
            Err(QuantumError::NodeRegion(_))
        ));
    }

    #[test]
    fn guidance_matches_closed_form_velocity_field() {
        let packet = natural(0.0, 0.8);
        let g = SpatialGrid::centered(0.0, 30.0, 2401).unwrap();
        let psi = quantum::evolve(
            &prepare_gaussian(g, &packet).unwrap(),
            &PotentialSpec::Free,
            2e-3,
            500,
        )
        .unwrap();
        let polar = quantum::polar_decompose(&psi, 1e-8);
        let t = psi.time;
        let x = packet.center_at(t) + packet.spread_at(t).unwrap();
        // dσ/dt / σ from differentiating the trajectory law in t₂.
        let sigma = packet.spread_at(t).unwrap();
        let tau = packet.tau(t);
        let dsigma = packet.sigma0 * packet.spreading_rate() * tau / (1.0 + tau * tau).sqrt();
        let expect = 0.8 + (x - packet.center_at(t)) * dsigma / sigma;
        assert_relative_eq!(
            guidance_velocity(&polar, x, 0.5).unwrap(),
            expect,
            max_relative = 1e-3
        );
    }

    #[test]
    fn integrated_paths_follow_closed_form() {
        let packet = natural(-4.0, 1.0);
        let g = SpatialGrid::centered(0.0, 40.0, 3201).unwrap();
        let psi0 = prepare_gaussian(g, &packet).unwrap();
        let dt = 2e-3;
        let steps = 1000;
        let starts = [-4.0, -3.0];
        let paths =
            integrate_trajectories(&psi0, &PotentialSpec::Free, &starts, dt, steps).unwrap();
        for (path, &x0) in paths.iter().zip(&starts) {
            let spec = FreeTrajectorySpec::new(packet, x0 - packet.center, 0.0).unwrap();
            for s in path.iter().step_by(50) {
                let want = free_position(&spec, s.time).unwrap();
                let tol = 1e-3 * packet.spread_at(s.time).unwrap();
                assert!(
                    (s.position - want).abs() < tol,
                    "t={} got {} want {}",
                    s.time,
                    s.position,
                    want
                );
            }
        }
        let single = integrate_trajectory(
            &psi0,
            &PotentialSpec::Free,
            TrajectoryState {
                position: -4.0,
                time: 0.0,
            },
            dt,
            10,
        )
        .unwrap();
        assert_eq!(single.len(), 11);
    }

    #[test]
    fn integrator_converges_at_second_order() {
        let packet = natural(0.0, 0.5);
        let g = SpatialGrid::centered(0.0, 30.0, 2401).unwrap();
        let psi0 = prepare_gaussian(g, &packet).unwrap();
        let spec = FreeTrajectorySpec::new(packet, 1.0, 0.0).unwrap();
        let err = |dt: f64| {
            let n = (1.0 / dt).round() as usize;
            let p = integrate_trajectories(&psi0, &PotentialSpec::Free, &[1.0], dt, n).unwrap();
            let last = p[0].last().unwrap();
            (last.position - free_position(&spec, last.time).unwrap()).abs()
        };
        let (e1, e2, e3) = (err(0.04), err(0.02), err(0.01));
        // Time discretization dominates at these step sizes.
        assert!(e1 / e2 > 3.0 && e2 / e3 > 3.0, "errors {e1} {e2} {e3}");
    }

    #[test]
    fn ensemble_determinism_and_moments() {
        let p = GaussianPacket::new(0.0, 0.0, 1e-15, 2.5e-28).unwrap();
        let a = sample_ensemble(&p, 1000, 7);
        let b = sample_ensemble(&p, 1000, 7);
        assert_eq!(a, b);
        assert_ne!(a.offsets(), sample_ensemble(&p, 1000, 8).offsets());
        let big = sample_ensemble(&p, 100_000, 11);
        let offsets = big.offsets();
        // Standard error of the sample std is σ/√(2n) ≈ 0.22%.
        assert!((stats::std_dev(&offsets) / p.sigma0 - 1.0).abs() < 0.01);
        let ks = stats::ks_test(&offsets, |x| stats::normal_cdf(x / p.sigma0), 0.01);
        assert!(ks.passes(), "{ks:?}");
        assert!(offsets.iter().all(|o| o.abs() <= 10.0 * p.sigma0));
    }

    #[test]
    fn planar_spec_is_componentwise() {
        let spec = PlanarTrajectorySpec {
            origin: Vec2::new(1.0, 2.0),
            velocity: Vec2::new(3.0, -1.0),
            offset: Vec2::new(0.5, -0.25),
            sigma0: 1.0,
            mass: 0.5,
            hbar: 1.0,
            emission_time: 0.5,
        };
        let p = spec.position(1.5).unwrap();
        let s = 2f64.sqrt();
        assert_relative_eq!(p.x, 1.0 + 3.0 + 0.5 * s, max_relative = 1e-14);
        assert_relative_eq!(p.y, 2.0 - 1.0 - 0.25 * s, max_relative = 1e-14);
    }

    #[test]
    fn trajectory_csv() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let paths = vec![vec![(0.0, Vec2::new(1.0, 2.0)), (1.0, Vec2::new(2.0, 3.0))]];
        write_trajectories_csv(&path, &paths, true).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text, "trajectory_id,t_s,x_m,y_m\n0,0,1,2\n0,1,2,3\n");
    }

    proptest::proptest! {
        #[test]
        fn inverse_roundtrip(x0 in -10.0f64..10.0, dt in 1e-6f64..1e3, v in -5.0f64..5.0) {
            let p = GaussianPacket::with_hbar(0.3, v, 1.0, 0.5, 1.0).unwrap();
            let spec = FreeTrajectorySpec::new(p, x0, 0.0).unwrap();
            let hit = free_position(&spec, dt).unwrap();
            let back = invert_offset(hit, dt, &p, 0.0).unwrap();
            proptest::prop_assert!((back - x0).abs() <= 1e-12 * x0.abs().max(1e-3) + 1e-12 * (hit.abs() / p.spread_factor(dt)));
        }

        #[test]
        fn closed_form_never_crosses(a in -10.0f64..10.0, b in -10.0f64..10.0, t in 0.0f64..1e6) {
            proptest::prop_assume!(a != b);
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            let p = natural(0.0, 1.0);
            let s_lo = FreeTrajectorySpec::new(p, lo, 0.0).unwrap();
            let s_hi = FreeTrajectorySpec::new(p, hi, 0.0).unwrap();
            proptest::prop_assert!(free_position(&s_lo, t).unwrap() < free_position(&s_hi, t).unwrap());
        }
    }
}
