//! Retrodiction of decay vertices and decay times from detector hits.
//!
//! Classical mode intersects straight back-propagated tracks. Bohmian mode
//! samples pion offsets, inverts the free-trajectory law for each hit, and
//! finds the emission time at which the two retrodicted pions coincide.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::bohm::guarded_normal;
use crate::event::{BeamGeometry, DecayEvent, Hit};
use crate::gaussian_packet::GaussianPacket;
use crate::optimize;
use crate::rng::{Domain, StreamFactory};
use crate::stats;
use crate::vec2::Vec2;

/// Tracks closer than this in sin(angle) have no usable intersection.
pub const PARALLEL_SIN_THRESHOLD: f64 = 1e-6;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ReconstructionError {
    #[error("event needs exactly two hits, found {0}")]
    MissingHits(usize),
    #[error("pion tracks are parallel (sin angle {0:e})")]
    ParallelLines(f64),
    #[error("vertex lies behind the source (flight time {0:e} s)")]
    VertexBehindSource(f64),
    #[error("no interior minimum in the emission-time window")]
    NoMinimumInWindow,
    #[error("every sample failed")]
    AllSamplesFailed,
    #[error("empty sample cloud")]
    EmptyCloud,
    #[error("n_samples must be at least 1")]
    NoSamples,
}

impl ReconstructionError {
    pub fn code(&self) -> &'static str {
        match self {
            Self::MissingHits(_) => "missing_hits",
            Self::ParallelLines(_) => "parallel_lines",
            Self::VertexBehindSource(_) => "vertex_behind_source",
            Self::NoMinimumInWindow => "no_minimum_in_window",
            Self::AllSamplesFailed => "all_samples_failed",
            Self::EmptyCloud => "empty_cloud",
            Self::NoSamples => "no_samples",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Classical,
    Bohmian,
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Mode::Classical => "classical",
            Mode::Bohmian => "bohmian",
        })
    }
}

impl std::str::FromStr for Mode {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "classical" => Ok(Mode::Classical),
            "bohmian" => Ok(Mode::Bohmian),
            other => Err(format!(
                "unknown mode `{other}` (expected classical or bohmian)"
            )),
        }
    }
}

/// Whether arrival times enter the inversion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Timing {
    #[default]
    Timed,
    Untimed,
}

/// Packet and beam parameters shared by every event.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrodictionContext {
    pub beam: BeamGeometry,
    pub kaon_mass: f64,
    pub pion_mass: f64,
    pub sigma0: f64,
    pub hbar: f64,
    pub timing: Timing,
    /// Golden-section bracket tolerance relative to the search window.
    pub t1_tol: f64,
}

impl RetrodictionContext {
    fn packet(&self) -> GaussianPacket {
        GaussianPacket {
            center: 0.0,
            velocity: 0.0,
            sigma0: self.sigma0,
            mass: self.pion_mass,
            t0: 0.0,
            hbar: self.hbar,
        }
    }
}

/// One candidate: a pair of offsets, the emission time found for it, and
/// the vertex it implies.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrodictionHypothesis {
    pub offsets: [Vec2; 2],
    pub t1: f64,
    pub vertex: Vec2,
    /// Distance between the two retrodicted pion positions at `t1`.
    pub miss: f64,
    pub iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TimeSpread {
    pub mean: f64,
    pub std: f64,
    pub q01: f64,
    pub q05: f64,
    pub q50: f64,
    pub q95: f64,
    pub q99: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionResult {
    pub event_id: u64,
    pub mode: Mode,
    pub vertex: Vec2,
    pub vertex_std: Vec2,
    pub cloud: Vec<Vec2>,
    pub t1_samples: Vec<f64>,
    pub kaon_momentum: Vec2,
    pub n_failed: usize,
    pub residual: f64,
    pub iterations: usize,
}

impl ReconstructionResult {
    pub fn t1_estimate(&self) -> f64 {
        stats::mean(&self.t1_samples)
    }
}

fn two_hits(hits: &[Hit]) -> Result<[Hit; 2], ReconstructionError> {
    match hits {
        [a, b] => Ok([*a, *b]),
        other => Err(ReconstructionError::MissingHits(other.len())),
    }
}

fn check_not_parallel(h: &[Hit; 2]) -> Result<(), ReconstructionError> {
    let sin = h[0].p.normalized().cross(h[1].p.normalized());
    if !(sin.abs() >= PARALLEL_SIN_THRESHOLD) {
        return Err(ReconstructionError::ParallelLines(sin));
    }
    Ok(())
}

/// Intersection of the lines `a + s·u` and `b + r·w`.
pub fn line_intersection(a: Vec2, u: Vec2, b: Vec2, w: Vec2) -> Result<Vec2, ReconstructionError> {
    let (u, w) = (u.normalized(), w.normalized());
    let sin = u.cross(w);
    if !(sin.abs() >= PARALLEL_SIN_THRESHOLD) {
        return Err(ReconstructionError::ParallelLines(sin));
    }
    let s = (b - a).cross(w) / sin;
    Ok(a + u * s)
}

/// Straight-line retrodiction.
pub fn classical_retrodict(
    event: &DecayEvent,
    ctx: &RetrodictionContext,
) -> Result<ReconstructionResult, ReconstructionError> {
    let h = two_hits(&event.hits)?;
    let vertex = line_intersection(h[0].pos, h[0].p, h[1].pos, h[1].p)?;
    let pk = h[0].p + h[1].p;
    let speed = pk.norm() / ctx.kaon_mass;
    let t1 = (vertex - ctx.beam.source).dot(ctx.beam.direction) / speed;
    if t1 < 0.0 {
        return Err(ReconstructionError::VertexBehindSource(t1));
    }
    let residual = h
        .iter()
        .map(|hit| {
            let v = hit.p * (1.0 / ctx.pion_mass);
            (hit.pos - v * (hit.t2 - t1) - vertex).norm()
        })
        .fold(0.0, f64::max);
    Ok(ReconstructionResult {
        event_id: event.id,
        mode: Mode::Classical,
        vertex,
        vertex_std: Vec2::ZERO,
        cloud: vec![vertex],
        t1_samples: vec![t1],
        kaon_momentum: pk,
        n_failed: 0,
        residual,
        iterations: 0,
    })
}

/// Retrodicted pion position at emission time `t1`: the free-trajectory
/// law inverted for the packet centre at `t1`.
fn retrodicted(
    hit: &Hit,
    offset: Vec2,
    t1: f64,
    ctx: &RetrodictionContext,
    packet: &GaussianPacket,
) -> Vec2 {
    let v = hit.p * (1.0 / ctx.pion_mass);
    let elapsed = hit.t2 - t1;
    hit.pos - v * elapsed - offset * packet.spread_factor(elapsed)
}

/// Emission time and vertex for one offset pair, using arrival times.
fn solve_timed(
    h: &[Hit; 2],
    offsets: [Vec2; 2],
    ctx: &RetrodictionContext,
) -> Result<RetrodictionHypothesis, ReconstructionError> {
    let packet = ctx.packet();
    let hi = h[0].t2.min(h[1].t2);
    if !(hi > 0.0) {
        return Err(ReconstructionError::NoMinimumInWindow);
    }
    let gap = |t: f64| {
        retrodicted(&h[0], offsets[0], t, ctx, &packet)
            - retrodicted(&h[1], offsets[1], t, ctx, &packet)
    };
    let tol = ctx.t1_tol * hi;
    let m = optimize::golden_section(|t| gap(t).norm_sq(), 0.0, hi, tol, 400);
    if m.x <= 2.0 * tol || m.x >= hi - 2.0 * tol {
        return Err(ReconstructionError::NoMinimumInWindow);
    }
    let v1 = retrodicted(&h[0], offsets[0], m.x, ctx, &packet);
    let v2 = retrodicted(&h[1], offsets[1], m.x, ctx, &packet);
    Ok(RetrodictionHypothesis {
        offsets,
        t1: m.x,
        vertex: (v1 + v2) * 0.5,
        miss: (v1 - v2).norm(),
        iterations: m.iterations,
    })
}

/// Ignores arrival times: solves for the two flight times that make the
/// retrodicted positions coincide, then dates the vertex by the kaon's
/// flight from the source.
fn solve_untimed(
    h: &[Hit; 2],
    offsets: [Vec2; 2],
    ctx: &RetrodictionContext,
) -> Result<RetrodictionHypothesis, ReconstructionError> {
    let packet = ctx.packet();
    let v = [
        h[0].p * (1.0 / ctx.pion_mass),
        h[1].p * (1.0 / ctx.pion_mass),
    ];
    // Far from emission the offset term grows linearly, so the tracks are
    // nearly straight with velocity v + O·κ.
    let kappa = packet.spreading_rate();
    let w = [v[0] + offsets[0] * kappa, v[1] + offsets[1] * kappa];
    let start = line_intersection(h[0].pos, w[0], h[1].pos, w[1])?;
    let mut d = [
        (h[0].pos - start).dot(w[0]) / w[0].norm_sq(),
        (h[1].pos - start).dot(w[1]) / w[1].norm_sq(),
    ];
    let back = |i: usize, d: f64| h[i].pos - v[i] * d - offsets[i] * packet.spread_factor(d);
    let scale = (h[0].pos - start).norm().max((h[1].pos - start).norm());
    let mut iterations = 0;
    loop {
        let f = back(0, d[0]) - back(1, d[1]);
        if f.norm() <= 1e-15 * scale || iterations >= 100 {
            break;
        }
        let a0 = -(v[0] + offsets[0] * packet.spread_factor_rate(d[0]));
        let a1 = v[1] + offsets[1] * packet.spread_factor_rate(d[1]);
        let det = a0.cross(a1);
        if det == 0.0 || !det.is_finite() {
            return Err(ReconstructionError::NoMinimumInWindow);
        }
        let step0 = f.cross(a1) / det;
        let step1 = a0.cross(f) / det;
        d[0] -= step0;
        d[1] -= step1;
        iterations += 1;
        if step0.abs() <= 1e-15 * d[0].abs() && step1.abs() <= 1e-15 * d[1].abs() {
            break;
        }
    }
    if !(d[0] > 0.0 && d[1] > 0.0) {
        return Err(ReconstructionError::NoMinimumInWindow);
    }
    let (v1, v2) = (back(0, d[0]), back(1, d[1]));
    let vertex = (v1 + v2) * 0.5;
    let speed = (h[0].p + h[1].p).norm() / ctx.kaon_mass;
    let t1 = (vertex - ctx.beam.source).dot(ctx.beam.direction) / speed;
    if !(t1 > 0.0) {
        return Err(ReconstructionError::NoMinimumInWindow);
    }
    Ok(RetrodictionHypothesis {
        offsets,
        t1,
        vertex,
        miss: (v1 - v2).norm(),
        iterations,
    })
}

pub fn retrodict_hypothesis(
    event: &DecayEvent,
    offsets: [Vec2; 2],
    ctx: &RetrodictionContext,
) -> Result<RetrodictionHypothesis, ReconstructionError> {
    let h = two_hits(&event.hits)?;
    check_not_parallel(&h)?;
    match ctx.timing {
        Timing::Timed => solve_timed(&h, offsets, ctx),
        Timing::Untimed => solve_untimed(&h, offsets, ctx),
    }
}

/// Aggregates hypotheses for the given offset pairs into a result.
pub fn retrodict_with_offsets(
    event: &DecayEvent,
    offsets: &[[Vec2; 2]],
    ctx: &RetrodictionContext,
) -> Result<ReconstructionResult, ReconstructionError> {
    if offsets.is_empty() {
        return Err(ReconstructionError::NoSamples);
    }
    let h = two_hits(&event.hits)?;
    check_not_parallel(&h)?;
    let mut cloud = Vec::with_capacity(offsets.len());
    let mut times = Vec::with_capacity(offsets.len());
    let mut misses = Vec::with_capacity(offsets.len());
    let mut iterations = 0;
    let mut n_failed = 0;
    for &pair in offsets {
        match retrodict_hypothesis(event, pair, ctx) {
            Ok(hyp) => {
                cloud.push(hyp.vertex);
                times.push(hyp.t1);
                misses.push(hyp.miss);
                iterations = iterations.max(hyp.iterations);
            }
            Err(ReconstructionError::NoMinimumInWindow) => n_failed += 1,
            Err(e) => return Err(e),
        }
    }
    if cloud.is_empty() {
        return Err(ReconstructionError::AllSamplesFailed);
    }
    let xs: Vec<f64> = cloud.iter().map(|v| v.x).collect();
    let ys: Vec<f64> = cloud.iter().map(|v| v.y).collect();
    Ok(ReconstructionResult {
        event_id: event.id,
        mode: Mode::Bohmian,
        vertex: Vec2::new(stats::mean(&xs), stats::mean(&ys)),
        vertex_std: Vec2::new(stats::std_dev(&xs), stats::std_dev(&ys)),
        cloud,
        t1_samples: times,
        kaon_momentum: h[0].p + h[1].p,
        n_failed,
        residual: stats::median(&misses),
        iterations,
    })
}

/// Offsets for the retrodiction ensemble of one event, independent per
/// pion and per sample.
pub fn sample_offsets(event_id: u64, n_samples: usize, sigma0: f64, seed: u64) -> Vec<[Vec2; 2]> {
    let mut rng = StreamFactory::new(seed).stream(Domain::Reconstruction, event_id);
    let mut draw = || {
        let (x, _) = guarded_normal(&mut rng);
        let (y, _) = guarded_normal(&mut rng);
        Vec2::new(x, y) * sigma0
    };
    (0..n_samples).map(|_| [draw(), draw()]).collect()
}

pub fn bohmian_retrodict(
    event: &DecayEvent,
    ctx: &RetrodictionContext,
    n_samples: usize,
    seed: u64,
) -> Result<ReconstructionResult, ReconstructionError> {
    if n_samples == 0 {
        return Err(ReconstructionError::NoSamples);
    }
    retrodict_with_offsets(
        event,
        &sample_offsets(event.id, n_samples, ctx.sigma0, seed),
        ctx,
    )
}

pub fn retrodict(
    event: &DecayEvent,
    ctx: &RetrodictionContext,
    mode: Mode,
    n_samples: usize,
    seed: u64,
) -> Result<ReconstructionResult, ReconstructionError> {
    match mode {
        Mode::Classical => classical_retrodict(event, ctx),
        Mode::Bohmian => bohmian_retrodict(event, ctx, n_samples, seed),
    }
}

/// Reconstructs every event in parallel; output order follows the input.
pub fn retrodict_all(
    events: &[DecayEvent],
    ctx: &RetrodictionContext,
    mode: Mode,
    n_samples: usize,
    seed: u64,
) -> Vec<Result<ReconstructionResult, ReconstructionError>> {
    events
        .par_iter()
        .map(|e| retrodict(e, ctx, mode, n_samples, seed))
        .collect()
}

pub fn decay_time_spread(result: &ReconstructionResult) -> Result<TimeSpread, ReconstructionError> {
    time_spread(&result.t1_samples)
}

pub fn time_spread(samples: &[f64]) -> Result<TimeSpread, ReconstructionError> {
    if samples.is_empty() {
        return Err(ReconstructionError::EmptyCloud);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    let q = |p| stats::quantile_sorted(&sorted, p);
    Ok(TimeSpread {
        mean: stats::mean(samples),
        std: stats::std_dev(samples),
        q01: q(0.01),
        q05: q(0.05),
        q50: q(0.5),
        q95: q(0.95),
        q99: q(0.99),
    })
}
