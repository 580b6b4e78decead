//! Closed-form two-level emission model: a data qubit exchange-coupled at
//! rate J to an emitter that decays into the waveguide at rate Gamma. Used as
//! an oracle for the full simulation and as the fit model for extracting J.

use crate::cxmat::{expm2, mat2_mul_vec};
use crate::error::{Error, Result};
use num_complex::Complex64 as C64;

#[derive(Debug, Clone, Copy)]
pub struct TwoLevelParams {
    /// Exchange coupling (rad/s).
    pub j: f64,
    /// Emitter amplitude decay into the waveguide is gamma/2; gamma is the
    /// energy decay rate (rad/s).
    pub gamma: f64,
    /// Initial excited-state amplitude of the data qubit.
    pub alpha_amp: C64,
    /// Frame frequency; the returned field carries exp(+i omega t).
    pub omega: f64,
}

impl TwoLevelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0) || !self.gamma.is_finite() {
            return Err(Error::InvalidParam(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.j < 0.0 || !self.j.is_finite() {
            return Err(Error::InvalidParam(format!("j must be >= 0, got {}", self.j)));
        }
        if self.alpha_amp.norm() > 1.0 + 1e-12 {
            return Err(Error::InvalidParam("initial amplitude exceeds 1".into()));
        }
        Ok(())
    }
}

/// Emitted-field amplitude sqrt(Gamma) psi_E(t) exp(i omega t) for the
/// two-level cascade, evaluated through the exponential of the 2x2
/// non-Hermitian generator. The matrix-exponential route is exact on both
/// sides of the critical point 16 J^2 = Gamma^2. Returns 0 for t < 0.
pub fn two_level_field(p: &TwoLevelParams, t: f64) -> C64 {
    if t < 0.0 {
        return C64::new(0.0, 0.0);
    }
    let z = C64::new(0.0, 0.0);
    // Generator of d/dt (psi_D, psi_E): [[0, -iJ], [-iJ, -Gamma/2]] times t.
    let m = [
        [z, C64::new(0.0, -p.j * t)],
        [C64::new(0.0, -p.j * t), C64::new(-0.5 * p.gamma * t, 0.0)],
    ];
    let u = expm2(m);
    let psi = mat2_mul_vec(&u, [p.alpha_amp, z]);
    let frame = C64::new(0.0, p.omega * t).exp();
    psi[1] * p.gamma.sqrt() * frame
}

/// Convenience sampling of `two_level_field` on a time grid.
pub fn two_level_field_samples(p: &TwoLevelParams, tgrid: &[f64]) -> Vec<C64> {
    tgrid.iter().map(|&t| two_level_field(p, t)).collect()
}

/// Long-time amplitude decay rate of the emitted field,
/// (Gamma - sqrt(Gamma^2 - 16 J^2)) / 4, defined for J <= Gamma/4.
/// This is the amplitude rate; intensity decays at twice this value.
pub fn gamma_eff(j: f64, gamma: f64) -> Result<f64> {
    if !(gamma > 0.0) || j < 0.0 {
        return Err(Error::InvalidParam("need gamma > 0 and j >= 0".into()));
    }
    let disc = gamma * gamma - 16.0 * j * j;
    if disc < 0.0 {
        return Err(Error::InvalidParam(format!(
            "j = {:.4} Gamma exceeds Gamma/4: oscillatory regime has no single decay rate",
            j / gamma
        )));
    }
    Ok((gamma - disc.sqrt()) / 4.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    MonotoneDecay,
    Critical,
    Oscillatory,
}

/// Classifies the emission regime by J against Gamma/4. The critical band is
/// a 1e-12 relative window around the exact threshold.
pub fn regime_classify(j: f64, gamma: f64) -> Regime {
    let thr = gamma / 4.0;
    if (j - thr).abs() <= 1e-12 * gamma {
        Regime::Critical
    } else if j < thr {
        Regime::MonotoneDecay
    } else {
        Regime::Oscillatory
    }
}
