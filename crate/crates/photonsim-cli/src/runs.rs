//! Experiment execution: each run kind turns a validated config into data
//! files plus a summary map of scalar results.

use num_complex::Complex64 as C64;
use photonsim::analytic::{gamma_eff, regime_classify, Regime};

fn regime_str(r: Regime) -> &'static str {
    match r {
        Regime::MonotoneDecay => "monotone",
        Regime::Critical => "critical",
        Regime::Oscillatory => "oscillatory",
    }
}
use photonsim::device::{
    calibrate_k, coupler_freq_of_flux, dressed_qubit_splitting, eigenmode_frequencies,
    eigenmode_frequencies_at_coupler, parametric_j_linear, purcell_rate, static_coupling_jdc,
    time_averaged_coupler_freq, time_averaged_coupler_freq_with_dc, DeviceParams,
};
use photonsim::dynamics::{
    count_envelope_peaks, extract_j_fit, lindblad_evolve, output_field_record, smooth_record,
    DensityMatrix, FieldRecord, FluxDrive, Sampled,
};
use photonsim::error::{Error, Result};
use photonsim::hilbert::HilbertSpec;
use photonsim::io;
use photonsim::measurement::{g2_zero, moments_from_shots, synth_shots, Histogram2d, ShotSet};
use photonsim::shaping::{
    compensate_iq, emit_shaped, fit_sech, phase_profile, rise_time_10pct, symmetry, EmitSetup,
    JModel, ShapeSpec,
};
use photonsim::tomography::{
    apply_choi, bin_shots, build_povm, cardinal_states, choi_to_ptm, damping_channel,
    default_povm_grid, process_fidelity, process_tomography, qubit_truncate, reconstruct_state,
    state_fidelity, ChoiMatrix, Povm, SolverReport,
};
use photonsim::units::{ghz, ns, to_ghz, to_khz, to_mhz, to_ns};
use serde_json::{json, Map, Value};

use crate::artifacts::{fmt, Outputs};
use crate::config::{
    CalibrateKCfg, ConstantDriveCfg, ExperimentConfig, RunConfig, ShapeCfg, SweepDcCfg,
    TomographyProcessCfg, TomographyStateCfg,
};

pub fn execute(cfg: &ExperimentConfig, params: &DeviceParams, seed: u64, out: &Outputs) -> Result<()> {
    let results = match &cfg.run {
        RunConfig::Purcell(_) => purcell(params, out)?,
        RunConfig::SweepDc(c) => sweep_dc(c, params, out)?,
        RunConfig::ConstantDrive(c) => constant_drive(c, params, out)?,
        RunConfig::CalibrateK(c) => calibrate(c, params, out)?,
        RunConfig::Shape(c) => shape(c, params, out)?,
        RunConfig::Compensate(c) => compensate(c, params, out)?,
        RunConfig::TomographyState(c) => tomography_state(c, params, seed, out)?,
        RunConfig::TomographyProcess(c) => tomography_process(c, params, seed, out)?,
    };
    out.summary(cfg.run.kind(), results)?;
    Ok(())
}

fn hilbert_of(levels: &[i64; 3]) -> HilbertSpec {
    HilbertSpec {
        levels_d: levels[0] as usize,
        levels_c: levels[1] as usize,
        levels_e: levels[2] as usize,
    }
}

/// Equal superposition on the data qubit, everything else in vacuum; the
/// standard initial state for emission runs.
fn superposition_state(spec: &HilbertSpec) -> Result<DensityMatrix> {
    let dim = spec.dim();
    let mut ket = vec![C64::new(0.0, 0.0); dim];
    let amp = C64::new(std::f64::consts::FRAC_1_SQRT_2, 0.0);
    ket[spec.index(0, 0, 0)] = amp;
    ket[spec.index(1, 0, 0)] = amp;
    DensityMatrix::pure(&ket)
}

fn solver_entry(report: &SolverReport) -> Value {
    json!({
        "iterations": report.iterations,
        "objective": report.objective,
        "converged": report.converged,
    })
}

// ---------------------------------------------------------------------------
// purcell
// ---------------------------------------------------------------------------

/// Residual decay of the data qubit through the damped emitter at the
/// static operating point; pure closed forms, summary only.
fn purcell(params: &DeviceParams, out: &Outputs) -> Result<Map<String, Value>> {
    let _ = out;
    params.validate()?;
    let omega_c = coupler_freq_of_flux(params.phi_dc_op, params);
    let j_dc = static_coupling_jdc(omega_c, params)?;
    let delta = dressed_qubit_splitting(params.phi_dc_op, params);
    let kappa = purcell_rate(params.g_de, j_dc, delta, params.gamma_e)?;
    let mut r = Map::new();
    r.insert("phi_dc".into(), json!(params.phi_dc_op));
    r.insert("omega_c_ghz".into(), json!(to_ghz(omega_c)));
    r.insert("j_dc_mhz".into(), json!(to_mhz(j_dc)));
    r.insert("delta_de_mhz".into(), json!(to_mhz(delta)));
    r.insert("kappa_p_khz".into(), json!(to_khz(kappa)));
    r.insert("purcell_lifetime_ms".into(), json!(1e3 / kappa));
    Ok(r)
}

// ---------------------------------------------------------------------------
// sweep-dc
// ---------------------------------------------------------------------------

fn sweep_dc(cfg: &SweepDcCfg, params: &DeviceParams, out: &Outputs) -> Result<Map<String, Value>> {
    params.validate()?;
    let n = cfg.points as usize;
    let mut branches: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut rows = Vec::with_capacity(n);
    let mut ordered = true;
    for k in 0..n {
        let phi = cfg.phi_start + (cfg.phi_stop - cfg.phi_start) * k as f64 / (n - 1) as f64;
        let ev = eigenmode_frequencies(phi, params);
        ordered &= ev[0] < ev[1] && ev[1] < ev[2];
        for (b, &v) in branches.iter_mut().zip(&ev) {
            b.push(v);
        }
        rows.push(vec![
            fmt(phi),
            fmt(to_ghz(ev[0])),
            fmt(to_ghz(ev[1])),
            fmt(to_ghz(ev[2])),
            fmt(to_ghz(coupler_freq_of_flux(phi, params))),
        ]);
    }
    out.table_csv(
        "branches.csv",
        &["phi", "lower_ghz", "middle_ghz", "upper_ghz", "bare_coupler_ghz"],
        &rows,
        &[],
    )?;

    let monotone: Vec<bool> = branches
        .iter()
        .map(|b| b.windows(2).all(|w| w[1] <= w[0] * (1.0 + 1e-12)))
        .collect();
    let mut r = Map::new();
    r.insert("points".into(), json!(n));
    r.insert("phi_start".into(), json!(cfg.phi_start));
    r.insert("phi_stop".into(), json!(cfg.phi_stop));
    r.insert("interlaced_everywhere".into(), json!(ordered));
    r.insert("branches_monotone_decreasing".into(), json!(monotone));
    for (name, b) in ["lower", "middle", "upper"].iter().zip(&branches) {
        r.insert(
            format!("{name}_range_ghz"),
            json!([to_ghz(*b.last().unwrap()), to_ghz(b[0])]),
        );
    }
    Ok(r)
}

// ---------------------------------------------------------------------------
// constant-drive
// ---------------------------------------------------------------------------

fn constant_drive(
    cfg: &ConstantDriveCfg,
    params: &DeviceParams,
    out: &Outputs,
) -> Result<Map<String, Value>> {
    params.validate()?;
    let spec = hilbert_of(&cfg.levels);
    spec.validate()?;
    let rho0 = superposition_state(&spec)?;
    let dt = ns(cfg.sample_ns);
    let t_end = ns(cfg.duration_ns);
    let n_out = (t_end / dt).ceil() as usize + 1;
    let tgrid: Vec<f64> = (0..n_out).map(|k| (dt * k as f64).min(t_end)).collect();
    let opts = Default::default();

    let mut rows = Vec::new();
    let mut runs = Vec::new();
    for (i, &amp) in cfg.phi_ac.iter().enumerate() {
        let wbar = time_averaged_coupler_freq_with_dc(params.phi_dc_op, amp, params)?;
        let ev = eigenmode_frequencies_at_coupler(wbar, params);
        let omega_m = cfg.omega_m_ghz.map(ghz).unwrap_or(ev[1] - ev[0]);
        let frame = ev[1];
        let drive = FluxDrive {
            phi_dc: params.phi_dc_op,
            envelope: Sampled::constant(amp),
            omega_m,
            phase: None,
        };
        let traj = lindblad_evolve(&rho0, params, &drive, &spec, &tgrid, &opts)?;
        let record = output_field_record(&traj, params, &spec, frame)?;
        out.field_csv(
            &format!("field_{i:02}.csv"),
            &record,
            &[
                ("phi_ac", fmt(amp)),
                ("omega_m_mhz", fmt(to_mhz(omega_m))),
            ],
        )?;

        // strip the dressed-state beat at omega_m before fitting or counting
        let smooth = smooth_record(&record, 4.0 * 2.0 * std::f64::consts::PI / omega_m)?;
        let j_lin = parametric_j_linear(amp, params, params.phi_dc_op)?;
        let fit = extract_j_fit(&smooth, params.gamma_e);
        let peaks = count_envelope_peaks(&smooth, 0.05, 0.1)?;
        let (j_cell, sig_cell, res_cell, fit_entry) = match &fit {
            Ok(f) => (
                fmt(to_mhz(f.j)),
                fmt(to_mhz(f.sigma_j)),
                fmt(f.residual_rel_peak),
                json!({
                    "j_mhz": to_mhz(f.j),
                    "sigma_j_mhz": to_mhz(f.sigma_j),
                    "residual_rel_peak": f.residual_rel_peak,
                }),
            ),
            Err(e) => (String::new(), String::new(), String::new(), json!({"error": e.to_string()})),
        };
        let j_for_regime = fit.as_ref().map(|f| f.j).unwrap_or(j_lin);
        let regime = regime_classify(j_for_regime, params.gamma_e);
        let geff = gamma_eff(j_for_regime, params.gamma_e).ok();
        rows.push(vec![
            fmt(amp),
            j_cell,
            sig_cell,
            fmt(to_mhz(j_lin)),
            res_cell,
            geff.map(|g| fmt(to_khz(g))).unwrap_or_default(),
            regime_str(regime).into(),
            peaks.to_string(),
        ]);
        runs.push(json!({
            "phi_ac": amp,
            "omega_m_mhz": to_mhz(omega_m),
            "frame_ghz": to_ghz(frame),
            "fit": fit_entry,
            "j_linear_mhz": to_mhz(j_lin),
            "gamma_eff_khz": geff.map(to_khz),
            "regime": regime_str(regime),
            "emission_peaks": peaks,
            "energy": record.energy(),
        }));
    }
    out.table_csv(
        "j_table.csv",
        &[
            "phi_ac",
            "j_fit_mhz",
            "sigma_j_mhz",
            "j_linear_mhz",
            "fit_residual_rel_peak",
            "gamma_eff_khz",
            "regime",
            "emission_peaks",
        ],
        &rows,
        &[],
    )?;

    let mut r = Map::new();
    r.insert("duration_ns".into(), json!(cfg.duration_ns));
    r.insert("levels".into(), json!(cfg.levels));
    r.insert("runs".into(), Value::Array(runs));
    Ok(r)
}

// ---------------------------------------------------------------------------
// calibrate-k
// ---------------------------------------------------------------------------

fn calibrate(cfg: &CalibrateKCfg, params: &DeviceParams, out: &Outputs) -> Result<Map<String, Value>> {
    params.validate()?;
    let pairs: Vec<(f64, f64)> = match &cfg.pairs {
        Some(p) => p.iter().map(|&(a, f)| (a, ghz(f))).collect(),
        None => cfg
            .amplitudes
            .iter()
            .map(|&a| Ok((a, time_averaged_coupler_freq(params.k_scale * a, params)?)))
            .collect::<Result<_>>()?,
    };
    let fit = calibrate_k(&pairs, params)?;
    let mut rows = Vec::with_capacity(pairs.len());
    for &(a, w) in &pairs {
        let modeled = time_averaged_coupler_freq(fit.k * a, params)?;
        rows.push(vec![fmt(a), fmt(to_ghz(w)), fmt(to_ghz(modeled))]);
    }
    out.table_csv(
        "calibration.csv",
        &["nominal_amp", "observed_ghz", "fitted_ghz"],
        &rows,
        &[("k", fmt(fit.k))],
    )?;
    let mut r = Map::new();
    r.insert("k".into(), json!(fit.k));
    r.insert("residual_rms_khz".into(), json!(to_khz(fit.residual_rms)));
    r.insert("points".into(), json!(pairs.len()));
    r.insert("synthetic_truth_k".into(), match &cfg.pairs {
        Some(_) => Value::Null,
        None => json!(params.k_scale),
    });
    Ok(r)
}

// ---------------------------------------------------------------------------
// shape / compensate
// ---------------------------------------------------------------------------

fn build_emit(cfg: &ShapeCfg, params: &DeviceParams) -> Result<EmitSetup> {
    let geff = cfg.gamma_eff_fraction * params.gamma_e;
    let mut shape = ShapeSpec::standard(geff, params.gamma_e)?;
    if let Some([w0, w1]) = cfg.window_ns {
        shape.window = (ns(w0), ns(w1));
    }
    if let Some(dt) = cfg.dt_ns {
        shape.dt = ns(dt);
    }
    shape.validate()?;
    let mut setup = EmitSetup::new(shape, params.phi_dc_op);
    setup.hilbert = hilbert_of(&cfg.levels);
    setup.flux_peak = cfg.flux_peak;
    setup.omega_m = cfg.omega_m_ghz.map(ghz);
    Ok(setup)
}

fn sampled_csv(out: &Outputs, name: &str, s: &Sampled, column: &str, scale: f64) -> Result<()> {
    let rows: Vec<Vec<String>> = s
        .values
        .iter()
        .enumerate()
        .map(|(k, &v)| vec![fmt(to_ns(s.t0 + k as f64 * s.dt)), fmt(v * scale)])
        .collect();
    out.table_csv(name, &["t_ns", column], &rows, &[])
}

fn amplitude_only(record: &FieldRecord) -> FieldRecord {
    FieldRecord {
        t_ns: record.t_ns.clone(),
        amp: record.amp.iter().map(|a| C64::new(a.norm(), 0.0)).collect(),
        frame: record.frame,
    }
}

fn emission_entry(record: &FieldRecord) -> Result<Map<String, Value>> {
    let fit = fit_sech(record)?;
    let mut m = Map::new();
    m.insert("energy".into(), json!(record.energy()));
    m.insert("tau_ns".into(), json!(to_ns(fit.tau)));
    m.insert("sech_center_ns".into(), json!(to_ns(fit.center)));
    m.insert("sech_residual_rel_peak".into(), json!(fit.residual));
    m.insert("symmetry".into(), json!(symmetry(record)?));
    m.insert("symmetry_amplitude".into(), json!(symmetry(&amplitude_only(record))?));
    m.insert("rise_time_ns".into(), json!(to_ns(rise_time_10pct(record)?)));
    Ok(m)
}

fn shape(cfg: &ShapeCfg, params: &DeviceParams, out: &Outputs) -> Result<Map<String, Value>> {
    let setup = build_emit(cfg, params)?;
    let res = emit_shaped(params, &setup, &JModel::Linear)?;
    out.field_csv(
        "record.csv",
        &res.record,
        &[("omega_m_mhz", fmt(to_mhz(res.omega_m)))],
    )?;
    sampled_csv(out, "flux_envelope.csv", &res.flux_envelope, "phi_ac", 1.0)?;
    sampled_csv(out, "j_target.csv", &res.j_target, "j_mhz", to_mhz(1.0))?;

    let mut r = Map::new();
    r.insert("gamma_eff_target_khz".into(), json!(to_khz(setup.shape.gamma_eff_target)));
    r.insert("omega_m_mhz".into(), json!(to_mhz(res.omega_m)));
    r.insert("frame_ghz".into(), json!(to_ghz(res.frame)));
    r.insert("peak_flux".into(), json!(res.flux_envelope.max_abs()));
    for (k, v) in emission_entry(&res.record)? {
        r.insert(k, v);
    }
    Ok(r)
}

fn compensate(cfg: &ShapeCfg, params: &DeviceParams, out: &Outputs) -> Result<Map<String, Value>> {
    let setup = build_emit(cfg, params)?;
    let first = emit_shaped(params, &setup, &JModel::Linear)?;

    // feed-forward: measure the emitted chirp, negate it on the drive
    let theta = phase_profile(&first.record, 0.05)?;
    let comp = Sampled {
        t0: theta.t0,
        dt: theta.dt,
        values: theta.values.iter().map(|v| -v).collect(),
    };
    let mut setup2 = setup.clone();
    setup2.drive_phase = Some(comp.clone());
    let second = emit_shaped(params, &setup2, &JModel::Linear)?;

    // square-pulse reference at the same peak amplitude and tone
    let spec = &setup.hilbert;
    let rho0 = superposition_state(spec)?;
    let tgrid: Vec<f64> = first.record.times_s();
    let flat_drive = FluxDrive {
        phi_dc: params.phi_dc_op,
        envelope: Sampled::constant(first.flux_envelope.max_abs()),
        omega_m: first.omega_m,
        phase: None,
    };
    let traj = lindblad_evolve(&rho0, params, &flat_drive, spec, &tgrid, &setup.ode)?;
    let unshaped = output_field_record(&traj, params, spec, first.frame)?;

    out.field_csv("record_uncompensated.csv", &first.record, &[])?;
    out.field_csv("record_compensated.csv", &second.record, &[])?;
    out.field_csv("record_unshaped.csv", &unshaped, &[])?;
    let iq = compensate_iq(&first.flux_envelope, &comp)?;
    out.iq_csv(
        "drive_iq.csv",
        &iq,
        &[("omega_m_mhz", fmt(to_mhz(first.omega_m)))],
    )?;

    let s_unc = symmetry(&first.record)?;
    let s_comp = symmetry(&second.record)?;
    let s_flat = symmetry(&unshaped)?;
    let mut r = Map::new();
    r.insert("symmetry_uncompensated".into(), json!(s_unc));
    r.insert("symmetry_compensated".into(), json!(s_comp));
    r.insert("symmetry_unshaped".into(), json!(s_flat));
    r.insert(
        "ordering_ok".into(),
        json!(s_comp > s_flat && s_flat > s_unc),
    );
    r.insert("compensation_gain".into(), json!(s_comp - s_unc));
    r.insert("omega_m_mhz".into(), json!(to_mhz(first.omega_m)));
    r.insert("peak_flux".into(), json!(first.flux_envelope.max_abs()));
    let comp_entry = emission_entry(&second.record)?;
    r.insert("compensated".into(), Value::Object(comp_entry));
    Ok(r)
}

// ---------------------------------------------------------------------------
// tomography
// ---------------------------------------------------------------------------

/// Embeds a qubit density matrix into the mode space as the lowest two Fock
/// levels.
fn embed(rho: &DensityMatrix, dim: usize) -> DensityMatrix {
    let mut m = photonsim::cxmat::CMat::zeros(dim, dim);
    for r in 0..2 {
        for c in 0..2 {
            m[(r, c)] = rho.get(r, c);
        }
    }
    DensityMatrix::from_cmat(&m)
}

struct TomoPipeline {
    povm: Povm,
    n_added: f64,
    shots: usize,
}

struct TomoRun {
    rho: DensityMatrix,
    report: SolverReport,
    on: ShotSet,
    off: ShotSet,
    hist_on: Histogram2d,
    hist_off: Histogram2d,
}

impl TomoPipeline {
    fn new(n_added: f64, dim: usize, shots: usize) -> Result<TomoPipeline> {
        let (half, nbins) = default_povm_grid(n_added, dim);
        let povm = build_povm(half, nbins, n_added, dim)?;
        Ok(TomoPipeline { povm, n_added, shots })
    }

    /// Synthesize, bin, reconstruct; keeps the raw shot sets around for
    /// moment checks or dumping.
    fn run(&self, target: &DensityMatrix, seed: u64) -> Result<TomoRun> {
        let (on, off) = synth_shots(target, self.n_added, self.shots, seed)?;
        let hist_on = bin_shots(&on, &self.povm)?;
        let hist_off = bin_shots(&off, &self.povm)?;
        let (rho, report) = reconstruct_state(&hist_on, &hist_off, &self.povm)?;
        Ok(TomoRun { rho, report, on, off, hist_on, hist_off })
    }
}

fn tomography_state(
    cfg: &TomographyStateCfg,
    params: &DeviceParams,
    seed: u64,
    out: &Outputs,
) -> Result<Map<String, Value>> {
    let _ = params;
    let dim = cfg.dim as usize;
    let ket2 = cfg
        .state
        .to_ket()
        .ok_or_else(|| Error::InvalidParam("unknown state name".into()))?;
    let mut ket = vec![C64::new(0.0, 0.0); dim];
    ket[0] = ket2[0];
    ket[1] = ket2[1];
    let target = DensityMatrix::pure(&ket)?;

    let pipe = TomoPipeline::new(cfg.n_added, dim, cfg.shots as usize)?;
    let run = pipe.run(&target, seed)?;
    let TomoRun { rho, report, on, off, hist_on, hist_off } = run;
    out.histogram_csv("histogram_on.csv", &hist_on, &[("shot_kind", "on".into())])?;
    out.histogram_csv("histogram_off.csv", &hist_off, &[("shot_kind", "off".into())])?;
    if cfg.write_shots {
        out.shots_bin("shots_on.pfsh", &on)?;
        out.shots_bin("shots_off.pfsh", &off)?;
    }

    let fidelity = state_fidelity(&rho, &target)?;
    let qubit = qubit_truncate(&rho)?;
    let qubit_target = qubit_truncate(&target)?;
    let qubit_fidelity = state_fidelity(&qubit, &qubit_target)?;

    let mut meta = out.metadata(&[("content", "reconstructed density matrix".into())]);
    meta.extend(io::solver_metadata(&report));
    let doc = io::density_to_json(&rho, &meta)?;
    out.matrix_json("density.json", &doc)?;

    let moments = moments_from_shots(&on, &off, 2)?;
    let a = moments.get(0, 1).unwrap_or_default();
    let n_occ = moments.get(1, 1).unwrap_or_default().re;
    let g2 = g2_zero(&moments).ok();

    let mut r = Map::new();
    r.insert("dim".into(), json!(dim));
    r.insert("shots".into(), json!(cfg.shots));
    r.insert("n_added".into(), json!(cfg.n_added));
    r.insert("efficiency".into(), json!(0.5 / (0.5 + cfg.n_added)));
    r.insert("fidelity".into(), json!(fidelity));
    r.insert("qubit_fidelity".into(), json!(qubit_fidelity));
    r.insert("population_0".into(), json!(rho.population(0)));
    r.insert("population_1".into(), json!(rho.population(1)));
    r.insert("moment_a".into(), json!([a.re, a.im]));
    r.insert("moment_n".into(), json!(n_occ));
    r.insert("g2_zero".into(), match g2 {
        Some((v, s)) => json!({"value": v, "sigma": s}),
        None => Value::Null,
    });
    r.insert("solver".into(), solver_entry(&report));

    if let Some(thetas) = &cfg.moment_thetas_deg {
        let mut rows = Vec::with_capacity(thetas.len());
        for (k, &deg) in thetas.iter().enumerate() {
            let th = deg.to_radians();
            let mut kt = vec![C64::new(0.0, 0.0); dim];
            kt[0] = C64::new((th / 2.0).cos(), 0.0);
            kt[1] = C64::new((th / 2.0).sin(), 0.0);
            let rho_th = DensityMatrix::pure(&kt)?;
            let (on_k, off_k) =
                synth_shots(&rho_th, cfg.n_added, cfg.shots as usize, seed + 1 + k as u64)?;
            let m = moments_from_shots(&on_k, &off_k, 2)?;
            let a1 = m.get(0, 1).unwrap_or_default();
            let s1 = m.sigma(0, 1).unwrap_or(f64::NAN);
            let occ = m.get(1, 1).unwrap_or_default().re;
            let s_occ = m.sigma(1, 1).unwrap_or(f64::NAN);
            rows.push(vec![
                fmt(deg),
                fmt(a1.re),
                fmt(a1.im),
                fmt(s1),
                fmt(occ),
                fmt(s_occ),
            ]);
        }
        out.table_csv(
            "moments.csv",
            &["theta_deg", "re_a", "im_a", "sigma_a", "n", "sigma_n"],
            &rows,
            &[],
        )?;
        r.insert("moment_sweep_points".into(), json!(thetas.len()));
    }
    Ok(r)
}

const CARDINAL_NAMES: [&str; 6] = ["zero", "one", "plus", "minus", "plus_i", "minus_i"];

fn tomography_process(
    cfg: &TomographyProcessCfg,
    params: &DeviceParams,
    seed: u64,
    out: &Outputs,
) -> Result<Map<String, Value>> {
    let dim = cfg.dim as usize;
    let channel = match cfg.delay_ns {
        Some(d) => Some(damping_channel(params.t1_d, params.t2_d, ns(d))?),
        None => None,
    };
    let pipe = TomoPipeline::new(cfg.n_added, dim, cfg.shots as usize)?;

    let mut recon = Vec::with_capacity(6);
    let mut per_state = Map::new();
    for (k, card) in cardinal_states().iter().enumerate() {
        let sent = match &channel {
            Some(ch) => apply_choi(ch, card)?,
            None => card.clone(),
        };
        let run = pipe.run(&embed(&sent, dim), seed.wrapping_mul(1000).wrapping_add(k as u64))?;
        let qubit = qubit_truncate(&run.rho)?;
        let f = state_fidelity(&qubit, &sent)?;
        let mut meta = out.metadata(&[("input_state", CARDINAL_NAMES[k].into())]);
        meta.extend(io::solver_metadata(&run.report));
        let doc = io::density_to_json(&run.rho, &meta)?;
        out.matrix_json(&format!("density_{}.json", CARDINAL_NAMES[k]), &doc)?;
        per_state.insert(
            CARDINAL_NAMES[k].into(),
            json!({"fidelity": f, "solver_iterations": run.report.iterations}),
        );
        recon.push(qubit);
    }

    let (choi, report) = process_tomography(&recon)?;
    let ptm = choi_to_ptm(&choi);
    let f_identity = process_fidelity(&choi, &ChoiMatrix::identity_channel())?;
    let f_model = match &channel {
        Some(ch) => Some(process_fidelity(&choi, ch)?),
        None => None,
    };

    let mut choi_meta = out.metadata(&[("content", "reconstructed Choi matrix".into())]);
    choi_meta.extend(io::solver_metadata(&report));
    out.matrix_json("choi.json", &io::choi_to_json(&choi, &choi_meta)?)?;
    out.matrix_json(
        "ptm.json",
        &io::ptm_to_json(&ptm, &out.metadata(&[("content", "Pauli transfer matrix".into())])),
    )?;

    let mut r = Map::new();
    r.insert("dim".into(), json!(dim));
    r.insert("shots_per_setting".into(), json!(cfg.shots));
    r.insert("n_added".into(), json!(cfg.n_added));
    r.insert("delay_ns".into(), json!(cfg.delay_ns));
    r.insert("process_fidelity_identity".into(), json!(f_identity));
    r.insert("process_fidelity_damping_model".into(), match f_model {
        Some(f) => json!(f),
        None => Value::Null,
    });
    r.insert("tp_defect".into(), json!(choi.tp_defect()));
    r.insert("state_fidelities".into(), Value::Object(per_state));
    r.insert("solver".into(), solver_entry(&report));
    Ok(r)
}
