//! Static device physics: coupler frequency versus flux, static and
//! parametric exchange couplings, Purcell decay of the data qubit, hybridized
//! mode frequencies, and calibration of the ac flux amplitude scale.

use crate::error::{Error, Result};
use crate::fitting;
use nalgebra::DMatrix;

/// Circuit constants. Frequencies and rates are angular (rad/s), times are
/// seconds, fluxes are in units of the flux quantum.
#[derive(Debug, Clone, PartialEq)]
pub struct DeviceParams {
    pub omega_d: f64,
    pub omega_e: f64,
    /// Coupler frequency at zero flux bias.
    pub omega_c0: f64,
    pub alpha_d: f64,
    pub alpha_c: f64,
    pub alpha_e: f64,
    pub g_d: f64,
    pub g_e: f64,
    /// Direct always-on qubit-qubit coupling.
    pub g_de: f64,
    /// Emitter decay rate into the waveguide.
    pub gamma_e: f64,
    /// Data-qubit intrinsic decay rate.
    pub gamma_d: f64,
    pub t1_d: f64,
    pub t2_d: f64,
    /// dc operating flux.
    pub phi_dc_op: f64,
    /// Dimensionless calibration factor between nominal and delivered ac
    /// flux amplitude.
    pub k_scale: f64,
}

impl DeviceParams {
    /// Reference parameter set of the simulated device. The emitter
    /// anharmonicity is not independently known and is taken equal to the
    /// data qubit's.
    pub fn reference() -> Self {
        use crate::units::{ghz, khz, mhz, us};
        DeviceParams {
            omega_d: ghz(4.771),
            omega_e: ghz(4.953),
            omega_c0: ghz(7.735),
            alpha_d: mhz(-224.0),
            alpha_c: mhz(-62.0),
            alpha_e: mhz(-224.0),
            g_d: mhz(33.85),
            g_e: mhz(34.28),
            g_de: mhz(0.070),
            gamma_e: mhz(8.0),
            gamma_d: khz(5.63),
            t1_d: us(28.3),
            t2_d: us(13.3),
            phi_dc_op: 0.295,
            k_scale: 0.782,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("omega_d", self.omega_d),
            ("omega_e", self.omega_e),
            ("omega_c0", self.omega_c0),
            ("gamma_e", self.gamma_e),
            ("t1_d", self.t1_d),
            ("t2_d", self.t2_d),
            ("k_scale", self.k_scale),
        ];
        for (name, v) in positive {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::InvalidParam(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [("alpha_d", self.alpha_d), ("alpha_c", self.alpha_c), ("alpha_e", self.alpha_e)] {
            if !(v < 0.0) || !v.is_finite() {
                return Err(Error::InvalidParam(format!("{name} must be negative, got {v}")));
            }
        }
        for (name, v) in [("g_d", self.g_d), ("g_e", self.g_e), ("g_de", self.g_de), ("gamma_d", self.gamma_d)] {
            if v < 0.0 || !v.is_finite() {
                return Err(Error::InvalidParam(format!("{name} must be nonnegative, got {v}")));
            }
        }
        if self.omega_c0 <= self.omega_d.max(self.omega_e) {
            return Err(Error::InvalidParam(
                "omega_c0 must sit above both qubit frequencies".into(),
            ));
        }
        if !(0.0..0.5).contains(&self.phi_dc_op) {
            return Err(Error::InvalidParam(format!(
                "phi_dc_op must lie in [0, 0.5), got {}",
                self.phi_dc_op
            )));
        }
        if self.t2_d > 2.0 * self.t1_d * (1.0 + 1e-9) {
            return Err(Error::InvalidParam("T2 cannot exceed 2 T1".into()));
        }
        Ok(())
    }

    /// Pure-dephasing rate of the data qubit, 1/T2 - 1/(2 T1), clipped at 0.
    pub fn gamma_phi(&self) -> f64 {
        (1.0 / self.t2_d - 0.5 / self.t1_d).max(0.0)
    }
}

/// Coupler frequency under a flux bias: omega_C0 sqrt|cos(pi phi)|.
/// Total function of phi; zero at half-integer flux (the cusp).
pub fn coupler_freq_of_flux(phi: f64, params: &DeviceParams) -> f64 {
    params.omega_c0 * (std::f64::consts::PI * phi).cos().abs().sqrt()
}

const AVG_SAMPLES: usize = 4096;

/// One-period time average of the coupler frequency under a pure ac drive
/// phi(t) = phi_ac cos(theta). Independent of the modulation frequency.
/// Midpoint quadrature over the period; the integrand is smooth and periodic
/// for phi_ac < 0.5, so convergence is spectral.
pub fn time_averaged_coupler_freq(phi_ac: f64, params: &DeviceParams) -> Result<f64> {
    time_averaged_coupler_freq_with_dc(0.0, phi_ac, params)
}

/// Same average with the dc offset folded in.
pub fn time_averaged_coupler_freq_with_dc(
    phi_dc: f64,
    phi_ac: f64,
    params: &DeviceParams,
) -> Result<f64> {
    if phi_ac < 0.0 || !phi_ac.is_finite() {
        return Err(Error::InvalidParam(format!("phi_ac must be >= 0, got {phi_ac}")));
    }
    let total = phi_dc.abs() + phi_ac;
    if total >= 0.5 {
        return Err(Error::FluxRange { total });
    }
    let mut acc = 0.0;
    for j in 0..AVG_SAMPLES {
        let theta = (j as f64 + 0.5) / AVG_SAMPLES as f64 * std::f64::consts::TAU;
        acc += coupler_freq_of_flux(phi_dc + phi_ac * theta.cos(), params);
    }
    Ok(acc / AVG_SAMPLES as f64)
}

/// Static exchange coupling mediated by the coupler,
/// (g_D g_E / 2)(1/Delta_D + 1/Delta_E) with Delta_i = omega_C - omega_i.
pub fn static_coupling_jdc(omega_c: f64, params: &DeviceParams) -> Result<f64> {
    let delta_d = omega_c - params.omega_d;
    let delta_e = omega_c - params.omega_e;
    // Below about 1 MHz detuning the perturbative formula is meaningless.
    let floor = crate::units::mhz(1.0);
    if delta_d.abs() < floor || delta_e.abs() < floor {
        return Err(Error::ResonantDenominator(format!(
            "coupler at {:.6} GHz is degenerate with a qubit",
            crate::units::to_ghz(omega_c)
        )));
    }
    Ok(params.g_d * params.g_e / 2.0 * (1.0 / delta_d + 1.0 / delta_e))
}

const FD_STEP: f64 = 1e-5;

/// Parametric exchange coupling in the linear small-signal model,
/// J = (phi_ac / 2) d J_dc / d phi at the dc operating point. The flux
/// derivative is a central finite difference with step 1e-5.
pub fn parametric_j_linear(phi_ac: f64, params: &DeviceParams, phi_dc: f64) -> Result<f64> {
    if phi_ac < 0.0 || !phi_ac.is_finite() {
        return Err(Error::InvalidParam(format!("phi_ac must be >= 0, got {phi_ac}")));
    }
    if phi_dc.abs() + FD_STEP >= 0.5 {
        return Err(Error::FluxRange { total: phi_dc.abs() + FD_STEP });
    }
    let jp = static_coupling_jdc(coupler_freq_of_flux(phi_dc + FD_STEP, params), params)?;
    let jm = static_coupling_jdc(coupler_freq_of_flux(phi_dc - FD_STEP, params), params)?;
    Ok(phi_ac / 2.0 * (jp - jm) / (2.0 * FD_STEP))
}

/// Residual Purcell decay of the data qubit through the damped emitter,
/// ((g_DE + J_dc) / Delta_DE)^2 Gamma_E.
pub fn purcell_rate(g_de: f64, j_dc: f64, delta_de: f64, gamma_e: f64) -> Result<f64> {
    if delta_de.abs() < 1e3 {
        return Err(Error::ResonantDenominator(
            "qubit-qubit detuning is zero in the Purcell estimate".into(),
        ));
    }
    let ratio = (g_de + j_dc) / delta_de;
    Ok(ratio * ratio * gamma_e)
}

/// Hybridized mode frequencies with the coupler parked at an explicit
/// frequency: eigenvalues of the 3x3 single-excitation matrix with diagonal
/// (omega_D, omega_E, omega_c) and all three couplings. Sorted ascending,
/// so with the coupler above both qubits the order is (D-like, E-like,
/// C-like).
pub fn eigenmode_frequencies_at_coupler(omega_c: f64, params: &DeviceParams) -> [f64; 3] {
    let m = DMatrix::<f64>::from_row_slice(
        3,
        3,
        &[
            params.omega_d, params.g_de,    params.g_d,
            params.g_de,    params.omega_e, params.g_e,
            params.g_d,     params.g_e,     omega_c,
        ],
    );
    let mut ev: Vec<f64> = m.symmetric_eigen().eigenvalues.iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    [ev[0], ev[1], ev[2]]
}

/// Hybridized mode frequencies at a dc flux bias.
pub fn eigenmode_frequencies(phi_dc: f64, params: &DeviceParams) -> [f64; 3] {
    eigenmode_frequencies_at_coupler(coupler_freq_of_flux(phi_dc, params), params)
}

/// Splitting between the two qubit-like dressed modes at the dc operating
/// point (coupler above both qubits, so the lowest two branches are
/// qubit-like). This is the natural default modulation frequency.
pub fn dressed_qubit_splitting(phi_dc: f64, params: &DeviceParams) -> f64 {
    let ev = eigenmode_frequencies(phi_dc, params);
    ev[1] - ev[0]
}

#[derive(Debug, Clone, Copy)]
pub struct KFit {
    pub k: f64,
    /// Root-mean-square residual of the fit, rad/s.
    pub residual_rms: f64,
}

/// Fits the scalar amplitude calibration factor k so that the time-averaged
/// coupler frequency at k times the nominal ac amplitude matches the
/// observations. `pairs` holds (nominal amplitude, observed average
/// frequency).
pub fn calibrate_k(pairs: &[(f64, f64)], params: &DeviceParams) -> Result<KFit> {
    if pairs.len() < 3 {
        return Err(Error::DegenerateInput(format!(
            "calibrate_k needs at least 3 pairs, got {}",
            pairs.len()
        )));
    }
    let mut amps: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    amps.sort_by(f64::total_cmp);
    if amps.windows(2).any(|w| w[0] == w[1]) {
        return Err(Error::DegenerateInput("duplicate ac amplitudes".into()));
    }
    let max_amp = amps.last().copied().unwrap_or(0.0);
    if !(max_amp > 0.0) {
        return Err(Error::DegenerateInput("all ac amplitudes are zero".into()));
    }
    let k_hi = 0.4999 / max_amp;
    let cost = |k: f64| -> f64 {
        pairs
            .iter()
            .map(|&(a, obs)| {
                let model = time_averaged_coupler_freq(k * a, params).unwrap_or(f64::INFINITY);
                let r = model - obs;
                r * r
            })
            .sum()
    };
    let (k, c) = fitting::golden_section_min(&cost, 1e-6, k_hi, 1e-12, 400);
    if !c.is_finite() {
        return Err(Error::FitFailure("calibration cost is not finite".into()));
    }
    // An optimum pinned to the bracket edge means the data is inconsistent
    // with any deliverable amplitude scale.
    if k >= k_hi * (1.0 - 1e-6) {
        return Err(Error::FitFailure(format!(
            "k ran into the flux-range bound {k_hi:.4}; residual rms {:.3e} rad/s",
            (c / pairs.len() as f64).sqrt()
        )));
    }
    Ok(KFit { k, residual_rms: (c / pairs.len() as f64).sqrt() })
}
