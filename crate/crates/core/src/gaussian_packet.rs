//! Closed-form free Gaussian wave packet.
//!
//! `sigma0` is the standard deviation of the initial position density
//! |ψ₀|², so the spreading law below is exactly the density width.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::constants::HBAR;
use crate::stats;

#[derive(Debug, Error, PartialEq)]
pub enum PacketError {
    #[error("time {t} s precedes packet preparation time {t0} s")]
    NegativeElapsed { t: f64, t0: f64 },
    #[error("quantile {0} outside (0, 1)")]
    QuantileOutOfRange(f64),
    #[error("invalid packet: {0}")]
    Invalid(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianPacket {
    /// Density centre at `t0` (m).
    pub center: f64,
    /// Group velocity (m/s).
    pub velocity: f64,
    /// Initial density standard deviation (m).
    pub sigma0: f64,
    pub mass: f64,
    pub t0: f64,
    pub hbar: f64,
}

impl GaussianPacket {
    pub fn new(center: f64, velocity: f64, sigma0: f64, mass: f64) -> Result<Self, PacketError> {
        Self::with_hbar(center, velocity, sigma0, mass, HBAR)
    }

    /// Packet with an explicit ħ, for natural-unit work.
    pub fn with_hbar(
        center: f64,
        velocity: f64,
        sigma0: f64,
        mass: f64,
        hbar: f64,
    ) -> Result<Self, PacketError> {
        let p = Self {
            center,
            velocity,
            sigma0,
            mass,
            t0: 0.0,
            hbar,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn starting_at(mut self, t0: f64) -> Self {
        self.t0 = t0;
        self
    }

    pub fn validate(&self) -> Result<(), PacketError> {
        if !(self.sigma0 > 0.0 && self.sigma0.is_finite()) {
            return Err(PacketError::Invalid("sigma0 must be positive"));
        }
        if !(self.mass > 0.0 && self.mass.is_finite()) {
            return Err(PacketError::Invalid("mass must be positive"));
        }
        if !(self.hbar > 0.0) {
            return Err(PacketError::Invalid("hbar must be positive"));
        }
        if !(self.center.is_finite() && self.velocity.is_finite() && self.t0.is_finite()) {
            return Err(PacketError::Invalid("non-finite kinematics"));
        }
        Ok(())
    }

    /// ħ/(2mσ₀²), the inverse of the spreading time scale (1/s).
    pub fn spreading_rate(&self) -> f64 {
        self.hbar / (2.0 * self.mass * self.sigma0 * self.sigma0)
    }

    /// Time for the width to grow by √2: 2mσ₀²/ħ.
    pub fn spreading_time(&self) -> f64 {
        1.0 / self.spreading_rate()
    }

    /// Dimensionless elapsed time τ = ħΔ/(2mσ₀²).
    pub fn tau(&self, elapsed: f64) -> f64 {
        self.spreading_rate() * elapsed
    }

    /// Width growth factor s(Δ) = √(1 + τ²).
    pub fn spread_factor(&self, elapsed: f64) -> f64 {
        1.0f64.hypot(self.tau(elapsed))
    }

    /// ds/dΔ.
    pub fn spread_factor_rate(&self, elapsed: f64) -> f64 {
        let k = self.spreading_rate();
        let tau = k * elapsed;
        k * tau / 1.0f64.hypot(tau)
    }

    fn elapsed(&self, t: f64) -> Result<f64, PacketError> {
        if t < self.t0 {
            Err(PacketError::NegativeElapsed { t, t0: self.t0 })
        } else {
            Ok(t - self.t0)
        }
    }

    pub fn center_at(&self, t: f64) -> f64 {
        self.center + self.velocity * (t - self.t0)
    }

    /// Density standard deviation σ(t) = σ₀√(1 + (ħ(t−t₀)/(2mσ₀²))²).
    pub fn spread_at(&self, t: f64) -> Result<f64, PacketError> {
        Ok(self.sigma0 * self.spread_factor(self.elapsed(t)?))
    }

    /// Normalized free-packet solution ψ(x, t), real and positive at the
    /// centre at `t0`.
    pub fn amplitude_at(&self, x: f64, t: f64) -> Result<Complex64, PacketError> {
        let dt = self.elapsed(t)?;
        let alpha = Complex64::new(1.0, self.tau(dt));
        let k = self.mass * self.velocity / self.hbar;
        let y = x - self.center_at(t);
        let norm = (2.0 * std::f64::consts::PI * self.sigma0 * self.sigma0).powf(-0.25);
        let envelope = (-(y * y) / (4.0 * self.sigma0 * self.sigma0 * alpha)).exp();
        let carrier_phase = k * (x - self.center) - 0.5 * self.hbar * k * k * dt / self.mass;
        Ok(norm / alpha.sqrt() * envelope * Complex64::from_polar(1.0, carrier_phase))
    }

    pub fn density_at(&self, x: f64, t: f64) -> Result<f64, PacketError> {
        let sigma = self.spread_at(t)?;
        let y = x - self.center_at(t);
        Ok((-0.5 * (y / sigma).powi(2)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt()))
    }

    /// Position below which a fraction `q` of the density lies.
    pub fn density_quantile(&self, t: f64, q: f64) -> Result<f64, PacketError> {
        if !(q > 0.0 && q < 1.0) {
            return Err(PacketError::QuantileOutOfRange(q));
        }
        Ok(self.center_at(t) + self.spread_at(t)? * stats::normal_quantile(q))
    }

    /// Closed-form guidance velocity (1/m)∂S/∂x of the free packet.
    pub fn velocity_field(&self, x: f64, t: f64) -> Result<f64, PacketError> {
        let dt = self.elapsed(t)?;
        let tau = self.tau(dt);
        let rate = self.spreading_rate() * tau / (1.0 + tau * tau);
        Ok(self.velocity + (x - self.center_at(t)) * rate)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn unit_packet() -> GaussianPacket {
        GaussianPacket::with_hbar(0.0, 0.0, 1.0, 0.5, 1.0).unwrap()
    }

    #[test]
    fn spread_at_zero_elapsed_is_sigma0() {
        let p = GaussianPacket::new(0.0, 0.0, 1e-15, 8.87e-28).unwrap();
        assert_eq!(p.spread_at(0.0).unwrap(), 1e-15);
    }

    #[test]
    fn spread_at_unit_tau_is_root_two() {
        let p = GaussianPacket::new(0.0, 3.0, 2e-12, 2.5e-28).unwrap();
        let t = 2.0 * p.mass * p.sigma0 * p.sigma0 / p.hbar;
        assert_relative_eq!(
            p.spread_at(t).unwrap(),
            2f64.sqrt() * p.sigma0,
            max_relative = 1e-14
        );
    }

    #[test]
    fn negative_elapsed_rejected() {
        let p = unit_packet().starting_at(1.0);
        assert_eq!(
            p.spread_at(0.5),
            Err(PacketError::NegativeElapsed { t: 0.5, t0: 1.0 })
        );
        assert!(p.amplitude_at(0.0, 0.0).is_err());
    }

    #[test]
    fn invalid_packets_rejected() {
        assert!(GaussianPacket::new(0.0, 0.0, 0.0, 1.0).is_err());
        assert!(GaussianPacket::new(0.0, 0.0, 1.0, -1.0).is_err());
    }

    #[test]
    fn amplitude_is_real_positive_at_center_initially() {
        let p = GaussianPacket::with_hbar(0.3, 2.0, 0.7, 1.3, 1.0).unwrap();
        let a = p.amplitude_at(0.3, 0.0).unwrap();
        assert!(a.re > 0.0);
        assert!(a.im.abs() < 1e-15);
    }

    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn amplitude_normalized_and_symmetric() {
        let p = GaussianPacket::with_hbar(1.0, 0.8, 0.5, 1.0, 1.0).unwrap();
        for &t in &[0.0, 0.3, 2.0] {
            let c = p.center_at(t);
            let s = p.spread_at(t).unwrap();
            let norm = simpson(
                |x| p.amplitude_at(x, t).unwrap().norm_sqr(),
                c - 10.0 * s,
                c + 10.0 * s,
                4000,
            );
            assert!((norm - 1.0).abs() < 1e-8, "norm {norm}");
            for d in [0.1, 0.7, 2.3] {
                let l = p.amplitude_at(c - d, t).unwrap().norm();
                let r = p.amplitude_at(c + d, t).unwrap().norm();
                assert_relative_eq!(l, r, max_relative = 1e-12);
            }
            // Moments of |ψ|² agree with the spreading law.
            let m1 = simpson(
                |x| x * p.amplitude_at(x, t).unwrap().norm_sqr(),
                c - 10.0 * s,
                c + 10.0 * s,
                4000,
            );
            let m2 = simpson(
                |x| (x - m1).powi(2) * p.amplitude_at(x, t).unwrap().norm_sqr(),
                c - 10.0 * s,
                c + 10.0 * s,
                4000,
            );
            assert!((m1 - c).abs() < 1e-9 * s);
            assert_relative_eq!(m2.sqrt(), s, max_relative = 1e-6);
        }
    }

    #[test]
    fn density_matches_amplitude_modulus() {
        let p = GaussianPacket::with_hbar(0.0, 1.5, 0.4, 2.0, 1.0).unwrap();
        for &x in &[-1.0, 0.0, 0.9, 3.1] {
            assert_relative_eq!(
                p.density_at(x, 1.7).unwrap(),
                p.amplitude_at(x, 1.7).unwrap().norm_sqr(),
                max_relative = 1e-12
            );
        }
    }

    #[test]
    fn quantiles() {
        let p = GaussianPacket::with_hbar(2.0, 1.0, 0.5, 1.0, 1.0).unwrap();
        let t = 1.3;
        let c = p.center_at(t);
        let s = p.spread_at(t).unwrap();
        assert!((p.density_quantile(t, 0.5).unwrap() - c).abs() < 1e-14);
        // Φ(1) from the complementary error function.
        let phi1 = 0.841_344_746_068_542_9;
        assert!((p.density_quantile(t, phi1).unwrap() - (c + s)).abs() < 1e-6 * s);
        for q in [0.01, 0.2, 0.4] {
            let lo = p.density_quantile(t, q).unwrap();
            let hi = p.density_quantile(t, 1.0 - q).unwrap();
            assert!(((lo + hi) / 2.0 - c).abs() < 1e-12);
        }
        assert_eq!(
            p.density_quantile(t, 0.0),
            Err(PacketError::QuantileOutOfRange(0.0))
        );
        assert_eq!(
            p.density_quantile(t, 1.0),
            Err(PacketError::QuantileOutOfRange(1.0))
        );
    }

    #[test]
    fn asymptotic_linear_growth() {
        let p = GaussianPacket::new(0.0, 0.0, 1e-15, 8.87e-28).unwrap();
        for &tau in &[1.1e3, 1e5, 1e12] {
            let dt = tau * p.spreading_time();
            let ratio = p.spread_at(dt).unwrap() * 2.0 * p.mass * p.sigma0 / (p.hbar * dt);
            assert!((ratio - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn velocity_field_is_time_derivative_of_trajectory() {
        let p = unit_packet();
        let t = 1.0;
        let x = p.center_at(t) + p.spread_at(t).unwrap();
        let h = 1e-6;
        let ds = (p.spread_at(t + h).unwrap() - p.spread_at(t - h).unwrap()) / (2.0 * h);
        let expect = p.velocity + (x - p.center_at(t)) * ds / p.spread_at(t).unwrap();
        assert_relative_eq!(p.velocity_field(x, t).unwrap(), expect, max_relative = 1e-8);
    }

    proptest::proptest! {
        #[test]
        fn spread_monotone_convex(sigma in 1e-16f64..1e-10, m in 1e-29f64..1e-26,
                                  a in 0.0f64..1e-6, b in 0.0f64..1e-6) {
            let p = GaussianPacket::new(0.0, 0.0, sigma, m).unwrap();
            let (lo, hi) = if a < b { (a, b) } else { (b, a) };
            proptest::prop_assume!(hi > lo);
            let s_lo = p.spread_at(lo).unwrap();
            let s_hi = p.spread_at(hi).unwrap();
            proptest::prop_assert!(s_hi >= s_lo);
            let s_mid = p.spread_at(0.5 * (lo + hi)).unwrap();
            proptest::prop_assert!(s_mid <= 0.5 * (s_lo + s_hi) * (1.0 + 1e-12));
        }
    }
}
