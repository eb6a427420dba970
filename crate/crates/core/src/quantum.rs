//! Grid-based Schrödinger evolution on a uniform 1D grid.
//!
//! Crank–Nicolson with a tridiagonal (Thomas) solve and hard-wall
//! boundaries. Internally the equation is rescaled to grid units,
//! ξ = x/dx and τ = ħt/(2m·dx²), which turns it into iψ_τ = −ψ_ξξ + Uψ with
//! U = V·2m·dx²/ħ². This keeps packets with σ₀ ~ 10⁻¹⁵ m well inside
//! normal floating-point range.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::sync::Arc;

use num_complex::Complex64;
use thiserror::Error;

use crate::gaussian_packet::{GaussianPacket, PacketError};

/// Default node threshold as a fraction of max |ψ|.
pub const DEFAULT_NODE_THRESHOLD: f64 = 1e-8;

/// Norm tolerance for a healthy wavefunction.
pub const NORM_TOLERANCE: f64 = 1e-6;

/// Norm deviation that aborts an evolution.
pub const NORM_ABORT: f64 = 1e-4;

#[derive(Debug, Error)]
pub enum QuantumError {
    #[error("invalid grid: {0}")]
    InvalidGrid(&'static str),
    #[error("packet width {sigma} m is below 4 grid spacings ({dx} m)")]
    GridTooCoarse { sigma: f64, dx: f64 },
    #[error("packet needs a 5σ margin inside [{x_min}, {x_max}] m")]
    PacketOutsideGrid { x_min: f64, x_max: f64 },
    #[error("unstable or invalid time step {0} s")]
    StabilityViolation(f64),
    #[error("norm drifted to {0}")]
    NormDrift(f64),
    #[error("wavefunctions live on different grids or time spacings")]
    GridMismatch,
    #[error("potential is not finite at x = {0} m")]
    NonFinitePotential(f64),
    #[error("position {0} m lies in a node region")]
    NodeRegion(f64),
    #[error("position {0} m lies outside the grid")]
    OutOfGrid(f64),
    #[error(transparent)]
    Packet(#[from] PacketError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpatialGrid {
    x_min: f64,
    x_max: f64,
    n_points: usize,
}

impl SpatialGrid {
    pub fn new(x_min: f64, x_max: f64, n_points: usize) -> Result<Self, QuantumError> {
        if !(x_min.is_finite() && x_max.is_finite()) || x_max <= x_min {
            return Err(QuantumError::InvalidGrid("x_max must exceed x_min"));
        }
        if n_points < 16 {
            return Err(QuantumError::InvalidGrid("at least 16 points required"));
        }
        Ok(Self {
            x_min,
            x_max,
            n_points,
        })
    }

    /// Grid of `n_points` covering `center ± half_width`.
    pub fn centered(center: f64, half_width: f64, n_points: usize) -> Result<Self, QuantumError> {
        Self::new(center - half_width, center + half_width, n_points)
    }

    pub fn x_min(&self) -> f64 {
        self.x_min
    }

    pub fn x_max(&self) -> f64 {
        self.x_max
    }

    pub fn len(&self) -> usize {
        self.n_points
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn dx(&self) -> f64 {
        (self.x_max - self.x_min) / (self.n_points - 1) as f64
    }

    pub fn x(&self, i: usize) -> f64 {
        self.x_min + i as f64 * self.dx()
    }

    pub fn points(&self) -> impl Iterator<Item = f64> + '_ {
        (0..self.n_points).map(move |i| self.x(i))
    }

    pub fn contains(&self, x: f64) -> bool {
        x >= self.x_min && x <= self.x_max
    }

    /// Trapezoid-rule integral of samples on this grid.
    pub fn integrate(&self, f: &[f64]) -> f64 {
        debug_assert_eq!(f.len(), self.n_points);
        let inner: f64 = f[1..f.len() - 1].iter().sum();
        (inner + 0.5 * (f[0] + f[f.len() - 1])) * self.dx()
    }

    /// Cell index and fractional position for linear interpolation.
    fn locate(&self, x: f64) -> Option<(usize, f64)> {
        if !self.contains(x) {
            return None;
        }
        let u = (x - self.x_min) / self.dx();
        let i = (u.floor() as usize).min(self.n_points - 2);
        Some((i, u - i as f64))
    }
}

/// Potential energy V(x) in joules.
#[derive(Clone, Default)]
pub enum PotentialSpec {
    #[default]
    Free,
    /// ½mω²(x − center)².
    Harmonic {
        center: f64,
        omega: f64,
        mass: f64,
    },
    Custom(Arc<dyn Fn(f64) -> f64 + Send + Sync>),
}

impl fmt::Debug for PotentialSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Free => write!(f, "Free"),
            Self::Harmonic {
                center,
                omega,
                mass,
            } => f
                .debug_struct("Harmonic")
                .field("center", center)
                .field("omega", omega)
                .field("mass", mass)
                .finish(),
            Self::Custom(_) => write!(f, "Custom(..)"),
        }
    }
}

impl PotentialSpec {
    pub fn eval(&self, x: f64) -> f64 {
        match self {
            Self::Free => 0.0,
            Self::Harmonic {
                center,
                omega,
                mass,
            } => 0.5 * mass * omega * omega * (x - center).powi(2),
            Self::Custom(f) => f(x),
        }
    }

    fn sample(&self, grid: &SpatialGrid) -> Result<Vec<f64>, QuantumError> {
        grid.points()
            .map(|x| {
                let v = self.eval(x);
                if v.is_finite() {
                    Ok(v)
                } else {
                    Err(QuantumError::NonFinitePotential(x))
                }
            })
            .collect()
    }
}

/// Wavefunction snapshot of one particle on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct GridWaveFunction {
    pub grid: SpatialGrid,
    pub amplitudes: Vec<Complex64>,
    pub time: f64,
    pub mass: f64,
    pub hbar: f64,
}

impl GridWaveFunction {
    /// Wraps raw amplitudes; no normalization is applied.
    pub fn from_amplitudes(
        grid: SpatialGrid,
        amplitudes: Vec<Complex64>,
        time: f64,
        mass: f64,
        hbar: f64,
    ) -> Result<Self, QuantumError> {
        if amplitudes.len() != grid.len() {
            return Err(QuantumError::GridMismatch);
        }
        Ok(Self {
            grid,
            amplitudes,
            time,
            mass,
            hbar,
        })
    }

    pub fn density(&self) -> Vec<f64> {
        self.amplitudes.iter().map(|a| a.norm_sqr()).collect()
    }

    pub fn norm(&self) -> f64 {
        self.grid.integrate(&self.density())
    }

    pub fn mean_position(&self) -> f64 {
        let rho = self.density();
        let first: Vec<f64> = self.grid.points().zip(&rho).map(|(x, r)| x * r).collect();
        self.grid.integrate(&first) / self.grid.integrate(&rho)
    }

    pub fn std_position(&self) -> f64 {
        let rho = self.density();
        let mean = self.mean_position();
        let second: Vec<f64> = self
            .grid
            .points()
            .zip(&rho)
            .map(|(x, r)| (x - mean).powi(2) * r)
            .collect();
        (self.grid.integrate(&second) / self.grid.integrate(&rho)).sqrt()
    }

    /// Linear interpolation of ψ at `x`.
    pub fn interpolate(&self, x: f64) -> Option<Complex64> {
        let (i, f) = self.grid.locate(x)?;
        Some(self.amplitudes[i] * (1.0 - f) + self.amplitudes[i + 1] * f)
    }

    /// Writes `x_m,rho_per_m,re_psi,im_psi` rows.
    pub fn write_csv(&self, path: &Path) -> Result<(), QuantumError> {
        let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(out, "x_m,rho_per_m,re_psi,im_psi")?;
        for (x, a) in self.grid.points().zip(&self.amplitudes) {
            writeln!(out, "{},{},{},{}", x, a.norm_sqr(), a.re, a.im)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Samples the analytic packet at `packet.t0` and renormalizes.
pub fn prepare_gaussian(
    grid: SpatialGrid,
    packet: &GaussianPacket,
) -> Result<GridWaveFunction, QuantumError> {
    packet.validate()?;
    let dx = grid.dx();
    if packet.sigma0 < 4.0 * dx {
        return Err(QuantumError::GridTooCoarse {
            sigma: packet.sigma0,
            dx,
        });
    }
    let margin = 5.0 * packet.sigma0;
    if packet.center - margin < grid.x_min() || packet.center + margin > grid.x_max() {
        return Err(QuantumError::PacketOutsideGrid {
            x_min: grid.x_min(),
            x_max: grid.x_max(),
        });
    }
    let amplitudes = grid
        .points()
        .map(|x| packet.amplitude_at(x, packet.t0))
        .collect::<Result<Vec<_>, _>>()?;
    let mut psi =
        GridWaveFunction::from_amplitudes(grid, amplitudes, packet.t0, packet.mass, packet.hbar)?;
    let scale = psi.norm().sqrt().recip();
    psi.amplitudes.iter_mut().for_each(|a| *a *= scale);
    Ok(psi)
}

/// Crank–Nicolson propagator for a fixed grid, potential and time step.
///
/// The left-hand matrix is factorized once; each step is one tridiagonal
/// multiply and one forward/back substitution.
#[derive(Debug, Clone)]
pub struct Propagator {
    grid: SpatialGrid,
    dt: f64,
    /// i·dτ/2
    half_step: Complex64,
    /// 2 + U_j
    h_diag: Vec<f64>,
    /// Thomas-algorithm super-diagonal after elimination.
    c_prime: Vec<Complex64>,
    /// Reciprocal pivots.
    inv_pivot: Vec<Complex64>,
}

impl Propagator {
    pub fn new(
        grid: SpatialGrid,
        potential: &PotentialSpec,
        mass: f64,
        hbar: f64,
        dt: f64,
    ) -> Result<Self, QuantumError> {
        if !(dt.is_finite() && dt > 0.0) {
            return Err(QuantumError::StabilityViolation(dt));
        }
        let dx = grid.dx();
        let time_unit = 2.0 * mass * dx * dx / hbar;
        let dtau = dt / time_unit;
        if !(dtau.is_finite() && dtau > 0.0) {
            return Err(QuantumError::StabilityViolation(dt));
        }
        let energy_unit = hbar / time_unit;
        let h_diag: Vec<f64> = potential
            .sample(&grid)?
            .into_iter()
            .map(|v| 2.0 + v / energy_unit)
            .collect();
        let half_step = Complex64::new(0.0, 0.5 * dtau);
        let n = grid.len();
        // LHS: diag 1 + iα(2+U), off-diagonal −iα.
        let off = -half_step;
        let mut c_prime = vec![Complex64::new(0.0, 0.0); n];
        let mut inv_pivot = vec![Complex64::new(0.0, 0.0); n];
        let mut prev_c = Complex64::new(0.0, 0.0);
        for j in 0..n {
            let diag = 1.0 + half_step * h_diag[j];
            let pivot = diag - off * prev_c;
            inv_pivot[j] = pivot.inv();
            c_prime[j] = off * inv_pivot[j];
            prev_c = c_prime[j];
        }
        Ok(Self {
            grid,
            dt,
            half_step,
            h_diag,
            c_prime,
            inv_pivot,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn grid(&self) -> &SpatialGrid {
        &self.grid
    }

    /// Advances `psi` in place by one step. `scratch` must have grid length.
    pub fn step(&self, psi: &mut [Complex64], scratch: &mut [Complex64]) {
        let n = psi.len();
        let a = self.half_step;
        // rhs = (1 − iαH)ψ with Hψ_j = (2+U_j)ψ_j − ψ_{j−1} − ψ_{j+1}
        for j in 0..n {
            let left = if j > 0 {
                psi[j - 1]
            } else {
                Complex64::new(0.0, 0.0)
            };
            let right = if j + 1 < n {
                psi[j + 1]
            } else {
                Complex64::new(0.0, 0.0)
            };
            let h_psi = psi[j] * self.h_diag[j] - left - right;
            scratch[j] = psi[j] - a * h_psi;
        }
        let off = -a;
        let mut prev = Complex64::new(0.0, 0.0);
        for (s, inv) in scratch.iter_mut().zip(&self.inv_pivot) {
            let d = (*s - off * prev) * inv;
            *s = d;
            prev = d;
        }
        psi[n - 1] = scratch[n - 1];
        for j in (0..n - 1).rev() {
            psi[j] = scratch[j] - self.c_prime[j] * psi[j + 1];
        }
    }
}

/// Evolves `psi` by `n_steps` Crank–Nicolson steps of size `dt`.
pub fn evolve(
    psi: &GridWaveFunction,
    potential: &PotentialSpec,
    dt: f64,
    n_steps: usize,
) -> Result<GridWaveFunction, QuantumError> {
    if n_steps == 0 {
        return Ok(psi.clone());
    }
    let prop = Propagator::new(psi.grid, potential, psi.mass, psi.hbar, dt)?;
    let mut out = psi.clone();
    let mut scratch = vec![Complex64::new(0.0, 0.0); out.amplitudes.len()];
    for _ in 0..n_steps {
        prop.step(&mut out.amplitudes, &mut scratch);
    }
    out.time = psi.time + n_steps as f64 * dt;
    let norm = out.norm();
    if !norm.is_finite() || (norm - psi.norm()).abs() > NORM_ABORT {
        return Err(QuantumError::NormDrift(norm));
    }
    Ok(out)
}

/// R = |ψ| and ∂S/∂x on the grid, with node points flagged.
#[derive(Debug, Clone, PartialEq)]
pub struct PolarFields {
    pub grid: SpatialGrid,
    pub amplitude: Vec<f64>,
    /// ∂S/∂x in kg·m/s; zero at flagged nodes.
    pub phase_gradient: Vec<f64>,
    pub node: Vec<bool>,
}

impl PolarFields {
    /// Linear interpolation of ∂S/∂x at `x`.
    pub fn phase_gradient_at(&self, x: f64) -> Result<f64, QuantumError> {
        let (i, f) = self.grid.locate(x).ok_or(QuantumError::OutOfGrid(x))?;
        if self.node[i] || self.node[i + 1] {
            return Err(QuantumError::NodeRegion(x));
        }
        Ok(self.phase_gradient[i] * (1.0 - f) + self.phase_gradient[i + 1] * f)
    }
}

/// Polar decomposition ψ = R·e^{iS/ħ}.
///
/// ∂S/∂x is the central difference of the phase taken locally as
/// ħ·arg(ψ_{j+1}·ψ*_{j−1})/(2dx), which is Im(ψ'/ψ) to second order and
/// needs no global phase unwrapping. It is exact for quadratic phases.
pub fn polar_decompose(psi: &GridWaveFunction, node_threshold: f64) -> PolarFields {
    let n = psi.amplitudes.len();
    let dx = psi.grid.dx();
    let amplitude: Vec<f64> = psi.amplitudes.iter().map(|a| a.norm()).collect();
    let max_amp = amplitude.iter().cloned().fold(0.0, f64::max);
    let cutoff = node_threshold * max_amp;
    let node: Vec<bool> = amplitude
        .iter()
        .map(|&r| !(r >= cutoff && r > 0.0))
        .collect();
    let phase_gradient = (0..n)
        .map(|j| {
            if node[j] {
                return 0.0;
            }
            let (lo, hi, span) = match j {
                0 => (0, 1, dx),
                j if j == n - 1 => (n - 2, n - 1, dx),
                j => (j - 1, j + 1, 2.0 * dx),
            };
            let z = psi.amplitudes[hi] * psi.amplitudes[lo].conj();
            if z.norm() == 0.0 {
                0.0
            } else {
                psi.hbar * z.arg() / span
            }
        })
        .collect();
    PolarFields {
        grid: psi.grid,
        amplitude,
        phase_gradient,
        node,
    }
}

/// max |∂ρ/∂t + ∂(ρv)/∂x| over interior points, from three snapshots
/// equally spaced in time.
pub fn continuity_residual(
    prev: &GridWaveFunction,
    current: &GridWaveFunction,
    next: &GridWaveFunction,
) -> Result<f64, QuantumError> {
    if prev.grid != current.grid || current.grid != next.grid {
        return Err(QuantumError::GridMismatch);
    }
    let dt_back = current.time - prev.time;
    let dt_fwd = next.time - current.time;
    if !(dt_back > 0.0) || (dt_back - dt_fwd).abs() > 1e-9 * dt_back {
        return Err(QuantumError::GridMismatch);
    }
    let dx = current.grid.dx();
    let polar = polar_decompose(current, DEFAULT_NODE_THRESHOLD);
    let flux: Vec<f64> = polar
        .amplitude
        .iter()
        .zip(&polar.phase_gradient)
        .map(|(r, g)| r * r * g / current.mass)
        .collect();
    let n = current.grid.len();
    let mut worst = 0.0f64;
    for j in 1..n - 1 {
        let drho =
            (next.amplitudes[j].norm_sqr() - prev.amplitudes[j].norm_sqr()) / (2.0 * dt_back);
        let dflux = (flux[j + 1] - flux[j - 1]) / (2.0 * dx);
        worst = worst.max((drho + dflux).abs());
    }
    Ok(worst)
}
