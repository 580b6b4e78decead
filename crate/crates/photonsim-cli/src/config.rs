//! Experiment configs: JSON schema, unit conversion at the boundary, and
//! the pre-run checks behind the `verify` subcommand.
//!
//! Configs carry frequencies in GHz/MHz/kHz and times in ns/us; everything
//! is converted once, here, to the angular rad/s and seconds the library
//! uses. The run block is a tagged map (`"kind": "purcell"`, plus the
//! kind's own fields); unknown keys anywhere are rejected.

use std::path::PathBuf;

use num_complex::Complex64 as C64;
use photonsim::device::DeviceParams;
use photonsim::measurement::MAX_MODE_DIM;
use photonsim::units::{ghz, khz, mhz, us};
use serde::Deserialize;
use serde_json::{Map, Value};

/// A named check failure, stable enough to grep for in scripts.
#[derive(Debug, Clone, serde::Serialize)]
pub struct Violation {
    pub name: &'static str,
    pub message: String,
}

fn violation(name: &'static str, message: impl Into<String>) -> Violation {
    Violation { name, message: message.into() }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    #[serde(default)]
    device: DeviceConfig,
    #[serde(default = "default_seed")]
    seed: u64,
    #[serde(default)]
    output_dir: Option<PathBuf>,
    run: RawRun,
}

#[derive(Debug, Deserialize)]
struct RawRun {
    kind: String,
    #[serde(flatten)]
    rest: Map<String, Value>,
}

fn default_seed() -> u64 {
    1
}

#[derive(Debug)]
pub struct ExperimentConfig {
    pub device: DeviceConfig,
    pub seed: u64,
    pub output_dir: Option<PathBuf>,
    pub run: RunConfig,
}

impl ExperimentConfig {
    /// Parses config JSON, rejecting unknown keys both at the top level and
    /// inside the run block. Returns a plain message suitable for the error
    /// report; the caller decides the exit code.
    pub fn from_json(text: &str) -> Result<ExperimentConfig, String> {
        let raw: RawConfig =
            serde_json::from_str(text).map_err(|e| format!("config schema: {e}"))?;
        let run = RunConfig::from_raw(&raw.run.kind, raw.run.rest)?;
        Ok(ExperimentConfig {
            device: raw.device,
            seed: raw.seed,
            output_dir: raw.output_dir,
            run,
        })
    }

    /// Dry-run checks: schema already passed, so this validates physical
    /// ranges. Returns every violation rather than stopping at the first.
    pub fn check(&self) -> Vec<Violation> {
        let mut v = Vec::new();
        let params = self.device.to_params();
        if let Err(e) = params.validate() {
            v.push(violation("device_params", e.to_string()));
        }
        self.run.check(&params, &mut v);
        v
    }
}

/// Device constants in config units; any field left out falls back to the
/// reference device.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceConfig {
    pub omega_d_ghz: Option<f64>,
    pub omega_e_ghz: Option<f64>,
    pub omega_c0_ghz: Option<f64>,
    pub alpha_d_mhz: Option<f64>,
    pub alpha_c_mhz: Option<f64>,
    pub alpha_e_mhz: Option<f64>,
    pub g_d_mhz: Option<f64>,
    pub g_e_mhz: Option<f64>,
    pub g_de_mhz: Option<f64>,
    pub gamma_e_mhz: Option<f64>,
    pub gamma_d_khz: Option<f64>,
    pub t1_us: Option<f64>,
    pub t2_us: Option<f64>,
    pub phi_dc: Option<f64>,
    pub k_scale: Option<f64>,
}

impl DeviceConfig {
    pub fn to_params(&self) -> DeviceParams {
        let r = DeviceParams::reference();
        DeviceParams {
            omega_d: self.omega_d_ghz.map_or(r.omega_d, ghz),
            omega_e: self.omega_e_ghz.map_or(r.omega_e, ghz),
            omega_c0: self.omega_c0_ghz.map_or(r.omega_c0, ghz),
            alpha_d: self.alpha_d_mhz.map_or(r.alpha_d, mhz),
            alpha_c: self.alpha_c_mhz.map_or(r.alpha_c, mhz),
            alpha_e: self.alpha_e_mhz.map_or(r.alpha_e, mhz),
            g_d: self.g_d_mhz.map_or(r.g_d, mhz),
            g_e: self.g_e_mhz.map_or(r.g_e, mhz),
            g_de: self.g_de_mhz.map_or(r.g_de, mhz),
            gamma_e: self.gamma_e_mhz.map_or(r.gamma_e, mhz),
            gamma_d: self.gamma_d_khz.map_or(r.gamma_d, khz),
            t1_d: self.t1_us.map_or(r.t1_d, us),
            t2_d: self.t2_us.map_or(r.t2_d, us),
            phi_dc_op: self.phi_dc.unwrap_or(r.phi_dc_op),
            k_scale: self.k_scale.unwrap_or(r.k_scale),
        }
    }
}

#[derive(Debug)]
pub enum RunConfig {
    Purcell(PurcellCfg),
    SweepDc(SweepDcCfg),
    ConstantDrive(ConstantDriveCfg),
    CalibrateK(CalibrateKCfg),
    Shape(ShapeCfg),
    Compensate(ShapeCfg),
    TomographyState(TomographyStateCfg),
    TomographyProcess(TomographyProcessCfg),
}

pub const RUN_KINDS: [&str; 8] = [
    "purcell",
    "sweep-dc",
    "constant-drive",
    "calibrate-k",
    "shape",
    "compensate",
    "tomography-state",
    "tomography-process",
];

impl RunConfig {
    fn from_raw(kind: &str, rest: Map<String, Value>) -> Result<RunConfig, String> {
        let body = Value::Object(rest);
        let wrap = |e: serde_json::Error| format!("run kind {kind:?}: {e}");
        Ok(match kind {
            "purcell" => RunConfig::Purcell(serde_json::from_value(body).map_err(wrap)?),
            "sweep-dc" => RunConfig::SweepDc(serde_json::from_value(body).map_err(wrap)?),
            "constant-drive" => {
                RunConfig::ConstantDrive(serde_json::from_value(body).map_err(wrap)?)
            }
            "calibrate-k" => RunConfig::CalibrateK(serde_json::from_value(body).map_err(wrap)?),
            "shape" => RunConfig::Shape(serde_json::from_value(body).map_err(wrap)?),
            "compensate" => RunConfig::Compensate(serde_json::from_value(body).map_err(wrap)?),
            "tomography-state" => {
                RunConfig::TomographyState(serde_json::from_value(body).map_err(wrap)?)
            }
            "tomography-process" => {
                RunConfig::TomographyProcess(serde_json::from_value(body).map_err(wrap)?)
            }
            other => {
                return Err(format!(
                    "unknown run kind {other:?}; expected one of {}",
                    RUN_KINDS.join(", ")
                ))
            }
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            RunConfig::Purcell(_) => "purcell",
            RunConfig::SweepDc(_) => "sweep-dc",
            RunConfig::ConstantDrive(_) => "constant-drive",
            RunConfig::CalibrateK(_) => "calibrate-k",
            RunConfig::Shape(_) => "shape",
            RunConfig::Compensate(_) => "compensate",
            RunConfig::TomographyState(_) => "tomography-state",
            RunConfig::TomographyProcess(_) => "tomography-process",
        }
    }

    fn check(&self, params: &DeviceParams, v: &mut Vec<Violation>) {
        match self {
            RunConfig::Purcell(_) => {}
            RunConfig::SweepDc(c) => c.check(v),
            RunConfig::ConstantDrive(c) => c.check(params, v),
            RunConfig::CalibrateK(c) => c.check(params, v),
            RunConfig::Shape(c) | RunConfig::Compensate(c) => c.check(params, v),
            RunConfig::TomographyState(c) => c.check(v),
            RunConfig::TomographyProcess(c) => c.check(v),
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PurcellCfg {}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepDcCfg {
    #[serde(default)]
    pub phi_start: f64,
    #[serde(default = "default_phi_stop")]
    pub phi_stop: f64,
    #[serde(default = "default_points")]
    pub points: i64,
}

fn default_phi_stop() -> f64 {
    0.45
}

fn default_points() -> i64 {
    181
}

impl SweepDcCfg {
    fn check(&self, v: &mut Vec<Violation>) {
        if !(self.phi_start >= 0.0 && self.phi_start < self.phi_stop && self.phi_stop < 0.5) {
            v.push(violation(
                "flux_budget",
                format!(
                    "dc sweep range [{}, {}] must satisfy 0 <= start < stop < 0.5",
                    self.phi_start, self.phi_stop
                ),
            ));
        }
        if self.points < 2 || self.points > 100_000 {
            v.push(violation(
                "grid",
                format!("points must be in [2, 100000], got {}", self.points),
            ));
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstantDriveCfg {
    /// Delivered ac flux amplitudes, one simulation per entry.
    pub phi_ac: Vec<f64>,
    #[serde(default = "default_duration_ns")]
    pub duration_ns: f64,
    #[serde(default = "default_sample_ns")]
    pub sample_ns: f64,
    /// Modulation frequency override; the default is the dressed qubit
    /// splitting under the time-averaged coupler shift.
    #[serde(default)]
    pub omega_m_ghz: Option<f64>,
    #[serde(default = "default_levels")]
    pub levels: [i64; 3],
}

fn default_duration_ns() -> f64 {
    600.0
}

fn default_sample_ns() -> f64 {
    2.0
}

fn default_levels() -> [i64; 3] {
    [3, 3, 3]
}

fn check_levels(levels: &[i64; 3], v: &mut Vec<Violation>) {
    if levels.iter().any(|&l| !(2..=5).contains(&l)) {
        v.push(violation(
            "hilbert_levels",
            format!("levels per mode must be in [2, 5], got {levels:?}"),
        ));
    }
}

impl ConstantDriveCfg {
    fn check(&self, params: &DeviceParams, v: &mut Vec<Violation>) {
        if self.phi_ac.is_empty() {
            v.push(violation("grid", "phi_ac needs at least one amplitude"));
        }
        for &a in &self.phi_ac {
            if !(a > 0.0) || !a.is_finite() {
                v.push(violation(
                    "amplitude_nonpositive",
                    format!("phi_ac entries must be positive, got {a}"),
                ));
            } else if params.phi_dc_op.abs() + a >= 0.5 {
                v.push(violation(
                    "flux_budget",
                    format!(
                        "phi_dc + phi_ac = {} reaches the half-quantum cusp",
                        params.phi_dc_op.abs() + a
                    ),
                ));
            }
        }
        if !(self.duration_ns > 0.0) || !(self.sample_ns > 0.0) || self.sample_ns > self.duration_ns
        {
            v.push(violation(
                "grid",
                format!(
                    "need 0 < sample_ns <= duration_ns, got {} and {}",
                    self.sample_ns, self.duration_ns
                ),
            ));
        }
        if let Some(f) = self.omega_m_ghz {
            if !(f > 0.0) || !f.is_finite() {
                v.push(violation("grid", format!("omega_m_ghz must be positive, got {f}")));
            }
        }
        check_levels(&self.levels, v);
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrateKCfg {
    /// Nominal ac amplitudes for the synthetic calibration sweep.
    #[serde(default = "default_cal_amplitudes")]
    pub amplitudes: Vec<f64>,
    /// Explicit (nominal amplitude, observed average frequency in GHz)
    /// pairs; overrides the synthetic sweep when present.
    #[serde(default)]
    pub pairs: Option<Vec<(f64, f64)>>,
}

fn default_cal_amplitudes() -> Vec<f64> {
    vec![0.02, 0.04, 0.06, 0.08, 0.10]
}

impl CalibrateKCfg {
    fn check(&self, params: &DeviceParams, v: &mut Vec<Violation>) {
        let amps: Vec<f64> = match &self.pairs {
            Some(p) => p.iter().map(|&(a, _)| a).collect(),
            None => self.amplitudes.clone(),
        };
        if amps.len() < 3 {
            v.push(violation(
                "calibration_points",
                format!("need at least 3 calibration amplitudes, got {}", amps.len()),
            ));
        }
        // the averaged-frequency calibration runs at zero dc bias, so the
        // budget is the delivered ac amplitude alone
        for &a in &amps {
            if !(a > 0.0) || !a.is_finite() {
                v.push(violation(
                    "amplitude_nonpositive",
                    format!("calibration amplitudes must be positive, got {a}"),
                ));
            } else if params.k_scale * a >= 0.5 {
                v.push(violation(
                    "flux_budget",
                    format!("delivered amplitude {} overruns the flux budget", params.k_scale * a),
                ));
            }
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShapeCfg {
    /// Target effective decay as a fraction of the emitter rate.
    #[serde(default = "default_gamma_fraction")]
    pub gamma_eff_fraction: f64,
    /// Peak ac flux the programmed envelope is rescaled to. Without it the
    /// envelope is the literal small-signal inversion of the target.
    #[serde(default)]
    pub flux_peak: Option<f64>,
    #[serde(default)]
    pub window_ns: Option<[f64; 2]>,
    #[serde(default)]
    pub dt_ns: Option<f64>,
    #[serde(default)]
    pub omega_m_ghz: Option<f64>,
    #[serde(default = "default_levels")]
    pub levels: [i64; 3],
}

fn default_gamma_fraction() -> f64 {
    0.25
}

impl ShapeCfg {
    fn check(&self, params: &DeviceParams, v: &mut Vec<Violation>) {
        if !(self.gamma_eff_fraction > 0.0) || !self.gamma_eff_fraction.is_finite() {
            v.push(violation(
                "gamma_eff_nonpositive",
                format!("gamma_eff_fraction must be positive, got {}", self.gamma_eff_fraction),
            ));
        } else if self.gamma_eff_fraction > 1.0 {
            v.push(violation(
                "gamma_eff_above_emitter_cap",
                format!(
                    "gamma_eff_fraction = {} asks for an effective decay above the emitter \
                     rate; emission through the emitter requires gamma_eff <= gamma_e",
                    self.gamma_eff_fraction
                ),
            ));
        }
        match self.flux_peak {
            Some(pk) => {
                if !(pk > 0.0) || !pk.is_finite() || params.phi_dc_op.abs() + pk >= 0.5 {
                    v.push(violation(
                        "flux_budget",
                        format!("flux_peak = {pk} must be positive and keep phi_dc + peak below 0.5"),
                    ));
                }
            }
            None => {
                // Literal inversion feasibility: peak target J over the
                // small-signal slope must stay inside the flux budget.
                if self.gamma_eff_fraction > 0.0 && self.gamma_eff_fraction <= 1.0 {
                    if let Some(peak) = self.literal_peak_flux(params) {
                        if params.phi_dc_op.abs() + peak >= 0.5 {
                            v.push(violation(
                                "flux_budget",
                                format!(
                                    "literal inversion of this target needs a peak ac flux of \
                                     {peak:.4}, past the half-quantum cusp; set flux_peak to \
                                     program the shape at a fixed amplitude"
                                ),
                            ));
                        }
                    }
                }
            }
        }
        if let Some([w0, w1]) = self.window_ns {
            if !(w0 < 0.0 && w1 > 0.0) {
                v.push(violation(
                    "grid",
                    format!("window_ns = [{w0}, {w1}] must straddle the envelope anchor at 0"),
                ));
            }
        }
        if let Some(dt) = self.dt_ns {
            if !(dt > 0.0) || !dt.is_finite() {
                v.push(violation("grid", format!("dt_ns must be positive, got {dt}")));
            }
        }
        if let Some(f) = self.omega_m_ghz {
            if !(f > 0.0) || !f.is_finite() {
                v.push(violation("grid", format!("omega_m_ghz must be positive, got {f}")));
            }
        }
        check_levels(&self.levels, v);
    }

    /// Peak flux demanded by the literal small-signal inversion, evaluated
    /// on a coarse grid of the target envelope. None if the slope itself is
    /// unusable (that surfaces as a run error with more context).
    fn literal_peak_flux(&self, params: &DeviceParams) -> Option<f64> {
        use photonsim::device::parametric_j_linear;
        use photonsim::shaping::envelope_value;
        let geff = self.gamma_eff_fraction * params.gamma_e;
        let slope = parametric_j_linear(1.0, params, params.phi_dc_op).ok()?;
        if !(slope > 0.0) {
            return None;
        }
        let (w0, w1) = match self.window_ns {
            Some([a, b]) => (a * 1e-9, b * 1e-9),
            None => (-5.0 / geff, 8.0 / geff),
        };
        let mut peak_j: f64 = 0.0;
        for k in 0..=256 {
            let t = w0 + (w1 - w0) * k as f64 / 256.0;
            peak_j = peak_j.max(envelope_value(geff, params.gamma_e, t));
        }
        Some(peak_j / slope)
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TomographyStateCfg {
    pub state: StateSpec,
    #[serde(default = "default_shots")]
    pub shots: i64,
    #[serde(default = "default_n_added")]
    pub n_added: f64,
    #[serde(default = "default_dim")]
    pub dim: i64,
    /// Optional preparation-angle sweep writing corrected field moments
    /// per angle.
    #[serde(default)]
    pub moment_thetas_deg: Option<Vec<f64>>,
    /// Also dump the raw shot sets in the packed binary format.
    #[serde(default)]
    pub write_shots: bool,
}

fn default_shots() -> i64 {
    500_000
}

fn default_n_added() -> f64 {
    1.5
}

fn default_dim() -> i64 {
    3
}

fn check_tomo_common(shots: i64, n_added: f64, dim: i64, v: &mut Vec<Violation>) {
    if shots <= 0 {
        v.push(violation(
            "negative_shot_count",
            format!("shots must be positive, got {shots}"),
        ));
    }
    if !(n_added >= 0.0) || !n_added.is_finite() {
        v.push(violation(
            "added_noise_negative",
            format!("n_added must be >= 0, got {n_added}"),
        ));
    }
    if !(2..=MAX_MODE_DIM as i64).contains(&dim) {
        v.push(violation(
            "mode_dimension",
            format!("dim must be in [2, {MAX_MODE_DIM}], got {dim}"),
        ));
    }
}

impl TomographyStateCfg {
    fn check(&self, v: &mut Vec<Violation>) {
        check_tomo_common(self.shots, self.n_added, self.dim, v);
        if self.state.to_ket().is_none() {
            v.push(violation(
                "state_name",
                "state must be zero, one, plus, minus, plus-i, minus-i, or Bloch angles \
                 {theta_deg, phi_deg}"
                    .to_string(),
            ));
        }
        if let Some(ts) = &self.moment_thetas_deg {
            if ts.is_empty() || ts.iter().any(|t| !t.is_finite()) {
                v.push(violation("grid", "moment_thetas_deg must be finite and nonempty"));
            }
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TomographyProcessCfg {
    #[serde(default = "default_shots")]
    pub shots: i64,
    #[serde(default = "default_n_added")]
    pub n_added: f64,
    #[serde(default = "default_dim")]
    pub dim: i64,
    /// Storage wait before emission; applies the device T1/T2 damping to
    /// every input state. Omit for the ideal channel.
    #[serde(default)]
    pub delay_ns: Option<f64>,
}

impl TomographyProcessCfg {
    fn check(&self, v: &mut Vec<Violation>) {
        check_tomo_common(self.shots, self.n_added, self.dim, v);
        if let Some(d) = self.delay_ns {
            if !(d >= 0.0) || !d.is_finite() {
                v.push(violation("delay_negative", format!("delay_ns must be >= 0, got {d}")));
            }
        }
    }
}

/// Qubit preparation: a cardinal-state name or explicit Bloch angles.
#[derive(Debug, Clone, Deserialize)]
#[serde(untagged)]
pub enum StateSpec {
    Named(String),
    Bloch {
        theta_deg: f64,
        #[serde(default)]
        phi_deg: f64,
    },
}

impl StateSpec {
    pub fn to_ket(&self) -> Option<[C64; 2]> {
        let f = std::f64::consts::FRAC_1_SQRT_2;
        let r = |x: f64| C64::new(x, 0.0);
        match self {
            StateSpec::Named(name) => match name.as_str() {
                "zero" => Some([r(1.0), r(0.0)]),
                "one" => Some([r(0.0), r(1.0)]),
                "plus" => Some([r(f), r(f)]),
                "minus" => Some([r(f), r(-f)]),
                "plus-i" => Some([r(f), C64::new(0.0, f)]),
                "minus-i" => Some([r(f), C64::new(0.0, -f)]),
                _ => None,
            },
            StateSpec::Bloch { theta_deg, phi_deg } => {
                if !theta_deg.is_finite() || !phi_deg.is_finite() {
                    return None;
                }
                let th = theta_deg.to_radians();
                let ph = phi_deg.to_radians();
                Some([r((th / 2.0).cos()), C64::from_polar((th / 2.0).sin(), ph)])
            }
        }
    }
}
