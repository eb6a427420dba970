//! Oracle suites: the grid solver against the closed-form packet,
//! trajectory transport and equivariance, and the simulate/reconstruct
//! roundtrip.

use rand::Rng;
use rayon::prelude::*;

use crate::bohm::{self, free_position, invert_offset, FreeTrajectorySpec};
use crate::config::ExperimentConfig;
use crate::event;
use crate::gaussian_packet::GaussianPacket;
use crate::quantum::{self, PotentialSpec, QuantumError, SpatialGrid};
use crate::reconstruction::{self, ReconstructionError};
use crate::rng::{Domain, StreamFactory};
use crate::stats::{self, KsOutcome};

/// Unit packet in natural units: ħ = 1, m = ½, σ₀ = 1, so τ equals t.
pub fn natural_packet(center: f64, velocity: f64) -> GaussianPacket {
    GaussianPacket::with_hbar(center, velocity, 1.0, 0.5, 1.0).expect("valid")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub metric: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl Check {
    pub fn at_most(name: impl Into<String>, metric: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            metric,
            threshold,
            passed: metric <= threshold,
        }
    }

    pub fn at_least(name: impl Into<String>, metric: f64, threshold: f64) -> Self {
        Self {
            name: name.into(),
            metric,
            threshold,
            passed: metric >= threshold,
        }
    }
}

/// Relative error of the grid-solver position std against σ(t) at each τ.
pub fn solver_std_errors(taus: &[f64]) -> Result<Vec<(f64, f64)>, QuantumError> {
    let packet = natural_packet(0.0, 0.0);
    let grid = SpatialGrid::centered(0.0, 30.0, 2401)?;
    let dt = 2e-3;
    let mut psi = quantum::prepare_gaussian(grid, &packet)?;
    let mut sorted = taus.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut out = Vec::new();
    for tau in sorted {
        let steps = ((tau - psi.time) / dt).round() as usize;
        psi = quantum::evolve(&psi, &PotentialSpec::Free, dt, steps)?;
        let want = packet.spread_at(psi.time)?;
        out.push((tau, (psi.std_position() / want - 1.0).abs()));
    }
    Ok(out)
}

/// Largest |x_numeric − x_closed| / σ(t) over the path of each start offset
/// (in units of σ₀), integrating up to `tau_max`.
pub fn trajectory_error(offsets: &[f64], tau_max: f64) -> Result<f64, bohm::BohmError> {
    let packet = natural_packet(-3.0, 1.0);
    let grid = SpatialGrid::centered(0.0, 40.0, 3201)?;
    let psi0 = quantum::prepare_gaussian(grid, &packet)?;
    let dt = 2e-3;
    let steps = (tau_max / dt).round() as usize;
    let starts: Vec<f64> = offsets
        .iter()
        .map(|o| packet.center + o * packet.sigma0)
        .collect();
    let paths = bohm::integrate_trajectories(&psi0, &PotentialSpec::Free, &starts, dt, steps)?;
    let mut worst: f64 = 0.0;
    for (path, &o) in paths.iter().zip(offsets) {
        let spec = FreeTrajectorySpec::new(packet, o * packet.sigma0, 0.0)?;
        for s in path {
            let err =
                (s.position - free_position(&spec, s.time)?).abs() / packet.spread_at(s.time)?;
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Largest error of invert_offset(free_position(X₀)) relative to
/// max(|X₀|, σ₀), over random natural-unit specifications.
pub fn inversion_roundtrip_error(n: usize, seed: u64) -> f64 {
    let mut rng = StreamFactory::new(seed).stream(Domain::Validation, 1);
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let packet = natural_packet(rng.random_range(-1.0..1.0), rng.random_range(-2.0..2.0));
        let x0 = rng.random_range(-3.0..3.0) * packet.sigma0;
        let t1 = rng.random_range(0.0..1.0);
        let dt = 10f64.powf(rng.random_range(-3.0..1.0));
        let spec = FreeTrajectorySpec {
            packet,
            initial_offset: x0,
            emission_time: t1,
        };
        let hit = free_position(&spec, t1 + dt).unwrap();
        let back = invert_offset(hit, t1 + dt, &packet, t1).unwrap();
        worst = worst.max((back - x0).abs() / x0.abs().max(packet.sigma0));
    }
    worst
}

/// KS test of closed-form-transported |ψ₀|² samples against the analytic
/// density at `tau`.
pub fn equivariance_ks(n: usize, tau: f64, seed: u64) -> KsOutcome {
    let packet = natural_packet(0.5, 1.5);
    let t = tau / packet.spreading_rate();
    let ensemble = bohm::sample_ensemble(&packet, n, seed);
    let positions = ensemble.positions_at(t).expect("t ≥ t0");
    let (c, s) = (packet.center_at(t), packet.spread_at(t).unwrap());
    stats::ks_test(&positions, |x| stats::normal_cdf((x - c) / s), 0.01)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NonCrossing {
    pub closed_form_preserved: f64,
    /// Most negative gap (in units of σ(t)) between numerically transported ordered pairs.
    pub integrator_worst_gap: f64,
}

/// Ordering of random offset pairs over many times, closed form and
/// integrated guidance.
pub fn non_crossing(
    n_pairs: usize,
    n_times: usize,
    seed: u64,
) -> Result<NonCrossing, bohm::BohmError> {
    let packet = natural_packet(0.0, 0.7);
    let mut rng = StreamFactory::new(seed).stream(Domain::Validation, 2);
    let pairs: Vec<(f64, f64)> = (0..n_pairs)
        .map(|_| {
            let a = rng.random_range(-3.0..3.0);
            let b = rng.random_range(-3.0..3.0);
            if a < b {
                (a, b)
            } else {
                (b, a)
            }
        })
        .filter(|(a, b)| a < b)
        .collect();
    let t_max = 3.0;
    let times: Vec<f64> = (1..=n_times)
        .map(|i| t_max * i as f64 / n_times as f64)
        .collect();
    let mut total = 0usize;
    let mut kept = 0usize;
    for &(a, b) in &pairs {
        let sa = FreeTrajectorySpec::new(packet, a, 0.0)?;
        let sb = FreeTrajectorySpec::new(packet, b, 0.0)?;
        for &t in &times {
            total += 1;
            if free_position(&sa, t)? < free_position(&sb, t)? {
                kept += 1;
            }
        }
    }
    let grid = SpatialGrid::centered(2.0, 30.0, 2401)?;
    let psi0 = quantum::prepare_gaussian(grid, &packet)?;
    let dt = 2e-3;
    let steps = (t_max / dt).round() as usize;
    let stride = steps / n_times;
    let starts: Vec<f64> = pairs.iter().flat_map(|&(a, b)| [a, b]).collect();
    let paths = bohm::integrate_trajectories(&psi0, &PotentialSpec::Free, &starts, dt, steps)?;
    let mut worst = f64::INFINITY;
    for pair in paths.chunks(2) {
        for k in (stride..=steps).step_by(stride.max(1)) {
            let (lo, hi) = (pair[0][k], pair[1][k]);
            let gap = (hi.position - lo.position) / packet.spread_at(lo.time)?;
            worst = worst.min(gap);
        }
    }
    Ok(NonCrossing {
        closed_form_preserved: kept as f64 / total.max(1) as f64,
        integrator_worst_gap: worst,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Roundtrip {
    pub solvable: usize,
    pub recovered: usize,
    pub worst_vertex_error: f64,
    pub worst_t1_rel_error: f64,
}

/// Reconstructs each detected event with its own truth offsets.
pub fn event_roundtrip(
    cfg: &ExperimentConfig,
    n_events: u64,
    vertex_tol: f64,
    t1_tol: f64,
) -> Result<Roundtrip, crate::config::ConfigError> {
    let setup = cfg.simulation_setup()?;
    let ctx = cfg.retrodiction_context();
    let events: Vec<_> = event::simulate(&setup, n_events, cfg.seed)
        .into_iter()
        .filter(|e| e.is_detected_two_pion())
        .collect();
    let outcomes: Vec<Option<(f64, f64)>> = events
        .par_iter()
        .map(
            |e| match reconstruction::retrodict_with_offsets(e, &[e.truth.offsets], &ctx) {
                Ok(r) => Some((
                    (r.vertex - e.truth.vertex).norm(),
                    ((r.t1_estimate() - e.truth.t1) / e.truth.t1).abs(),
                )),
                Err(ReconstructionError::ParallelLines(_)) => None,
                Err(_) => Some((f64::INFINITY, f64::INFINITY)),
            },
        )
        .collect();
    let mut rt = Roundtrip {
        solvable: 0,
        recovered: 0,
        worst_vertex_error: 0.0,
        worst_t1_rel_error: 0.0,
    };
    for (dv, dt) in outcomes.into_iter().flatten() {
        rt.solvable += 1;
        if dv <= vertex_tol && dt <= t1_tol {
            rt.recovered += 1;
        }
        rt.worst_vertex_error = rt.worst_vertex_error.max(dv);
        rt.worst_t1_rel_error = rt.worst_t1_rel_error.max(dt);
    }
    Ok(rt)
}

/// The quick suites behind the `validate` subcommand.
pub fn run_all(seed: u64) -> Vec<Check> {
    let mut checks = Vec::new();
    match solver_std_errors(&[0.5, 1.0, 2.0]) {
        Ok(errs) => {
            for (tau, e) in errs {
                checks.push(Check::at_most(
                    format!("solver std vs analytic, tau={tau}"),
                    e,
                    1e-3,
                ));
            }
        }
        Err(e) => checks.push(Check::at_most(
            format!("solver std vs analytic ({e})"),
            f64::INFINITY,
            1e-3,
        )),
    }
    let traj = trajectory_error(&[0.0, 1.0, -1.0, 2.0, -2.0], 3.0).unwrap_or(f64::INFINITY);
    checks.push(Check::at_most(
        "integrated trajectory vs closed form / sigma(t)",
        traj,
        1e-3,
    ));
    checks.push(Check::at_most(
        "invert_offset roundtrip relative error",
        inversion_roundtrip_error(10_000, seed),
        1e-12,
    ));
    let ks = equivariance_ks(10_000, 2.0, seed);
    checks.push(Check::at_most(
        "equivariance KS statistic (1% critical)",
        ks.statistic,
        ks.critical,
    ));
    match non_crossing(200, 100, seed) {
        Ok(nc) => {
            checks.push(Check::at_least(
                "closed-form ordering preserved",
                nc.closed_form_preserved,
                1.0,
            ));
            checks.push(Check::at_least(
                "integrated ordering gap / sigma(t)",
                nc.integrator_worst_gap,
                -1e-6,
            ));
        }
        Err(_) => checks.push(Check::at_least("non-crossing", f64::NEG_INFINITY, 0.0)),
    }
    let cfg = ExperimentConfig {
        seed,
        ..ExperimentConfig::default()
    };
    match event_roundtrip(&cfg, 1000, 1e-9, 1e-9) {
        Ok(rt) => checks.push(Check::at_least(
            "simulate/reconstruct roundtrip recovered fraction",
            rt.recovered as f64 / rt.solvable.max(1) as f64,
            1.0,
        )),
        Err(_) => checks.push(Check::at_least("simulate/reconstruct roundtrip", 0.0, 1.0)),
    }
    checks
}
