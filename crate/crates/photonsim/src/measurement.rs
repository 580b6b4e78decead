//! Amplification-chain model between the emitted field and the digitizer:
//! temporal mode matching, synthetic heterodyne shots carrying an added
//! noise mode, histograms, and moment deconvolution down to g2(0).
//!
//! The measured operator is S = a + h^dag, where a is the temporal photon
//! mode selected by a real template f(t) and h is an effective noise mode
//! with thermal occupation n_added. Heterodyne samples of S are then
//! distributed as the Husimi Q function of the mode state convolved with a
//! circular Gaussian of per-quadrature variance n_added/2; the off set
//! (signal blanked) is the same density with the mode in vacuum, so its
//! per-quadrature variance is (1 + n_added)/2. Measurement efficiency maps
//! to the added noise as eta = (1/2)/(1/2 + n_added).

use std::collections::BTreeMap;

use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rayon::prelude::*;

use crate::dynamics::{DensityMatrix, FieldRecord};
use crate::error::{Error, Result};

/// Largest Fock dimension the gridded sampling density is tuned for.
pub const MAX_MODE_DIM: usize = 5;

const GRID_BINS: usize = 1024;
const MASS_TOL: f64 = 1e-6;
const JACKKNIFE_BLOCKS: usize = 100;
const DRAW_BLOCK: usize = 1 << 16;

fn fact(n: usize) -> f64 {
    const T: [f64; 5] = [1.0, 1.0, 2.0, 6.0, 24.0];
    T[n]
}

fn binom(n: usize, k: usize) -> f64 {
    const T: [[f64; 5]; 5] = [
        [1.0, 0.0, 0.0, 0.0, 0.0],
        [1.0, 1.0, 0.0, 0.0, 0.0],
        [1.0, 2.0, 1.0, 0.0, 0.0],
        [1.0, 3.0, 3.0, 1.0, 0.0],
        [1.0, 4.0, 6.0, 4.0, 1.0],
    ];
    T[n][k]
}

// ---------------------------------------------------------------------------
// Temporal mode matching
// ---------------------------------------------------------------------------

/// Real temporal template defining the measured photon mode.
#[derive(Debug, Clone)]
pub struct MatchTemplate {
    /// Sample times in nanoseconds, uniform grid.
    pub t_ns: Vec<f64>,
    /// Template values in 1/sqrt(s). Unit L2 norm, so the matched mode
    /// operator obeys the bosonic commutation relation.
    pub f: Vec<f64>,
}

fn uniform_dt_s(t_ns: &[f64]) -> Result<f64> {
    let n = t_ns.len();
    if n < 2 {
        return Err(Error::InvalidParam("template needs at least two samples".into()));
    }
    let dt = (t_ns[n - 1] - t_ns[0]) / (n - 1) as f64;
    if !(dt > 0.0) {
        return Err(Error::GridMismatch("template times must be increasing".into()));
    }
    for w in t_ns.windows(2) {
        if ((w[1] - w[0]) - dt).abs() > 1e-6 * dt {
            return Err(Error::GridMismatch(format!(
                "template grid is not uniform near t = {} ns",
                w[0]
            )));
        }
    }
    Ok(dt * 1e-9)
}

/// Trapezoid sum of `values` against a uniform step (ends half-weighted).
fn trapz(values: impl Iterator<Item = f64>, dt: f64, n: usize) -> f64 {
    let mut acc = 0.0;
    for (i, v) in values.enumerate() {
        let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        acc += w * v;
    }
    acc * dt
}

impl MatchTemplate {
    pub fn validate(&self) -> Result<()> {
        if self.t_ns.len() != self.f.len() {
            return Err(Error::DimensionMismatch { expected: self.t_ns.len(), got: self.f.len() });
        }
        let dt = uniform_dt_s(&self.t_ns)?;
        if self.f.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParam("template contains a non-finite value".into()));
        }
        let n = self.f.len();
        let norm2 = trapz(self.f.iter().map(|v| v * v), dt, n);
        if (norm2 - 1.0).abs() > 1e-10 {
            return Err(Error::InvalidParam(format!(
                "template L2 norm squared is {norm2}, expected 1"
            )));
        }
        Ok(())
    }

    /// Linear interpolation on the template grid, zero outside it.
    fn value_at_ns(&self, t: f64) -> f64 {
        let n = self.t_ns.len();
        let t0 = self.t_ns[0];
        let dt = (self.t_ns[n - 1] - t0) / (n - 1) as f64;
        let x = (t - t0) / dt;
        if !(0.0..=(n - 1) as f64).contains(&x) {
            return 0.0;
        }
        let i = (x.floor() as usize).min(n - 2);
        let frac = x - i as f64;
        self.f[i] * (1.0 - frac) + self.f[i + 1] * frac
    }
}

/// Builds the real matched template f(t) proportional to |amp(t)|, unit L2
/// norm under the same trapezoid rule `validate` checks. The phase of the
/// record is discarded; two records differing by a global phase give the
/// same template.
pub fn template_from_field(record: &FieldRecord) -> Result<MatchTemplate> {
    record.validate()?;
    let dt = record.dt_s()?;
    let n = record.amp.len();
    let mags: Vec<f64> = record.amp.iter().map(|a| a.norm()).collect();
    let norm2 = trapz(mags.iter().map(|m| m * m), dt, n);
    if norm2 < 1e-300 {
        return Err(Error::DegenerateInput(
            "cannot build a matched template from an all-zero record".into(),
        ));
    }
    let s = norm2.sqrt().recip();
    Ok(MatchTemplate { t_ns: record.t_ns.clone(), f: mags.iter().map(|m| m * s).collect() })
}

/// Matched-filter amplitude: the trapezoid quadrature of amp(t) f(t) dt over
/// the record grid, with the template linearly interpolated (zero outside its
/// span). For a unit-energy real record matched against its own template this
/// returns 1.
pub fn mode_match(record: &FieldRecord, template: &MatchTemplate) -> Result<C64> {
    record.validate()?;
    template.validate()?;
    let dt = record.dt_s()?;
    let lo = record.t_ns[0].max(template.t_ns[0]);
    let hi = record.t_ns[record.t_ns.len() - 1].min(template.t_ns[template.t_ns.len() - 1]);
    if lo >= hi {
        return Err(Error::GridMismatch(
            "record and template supports are disjoint".into(),
        ));
    }
    let n = record.amp.len();
    let mut acc = C64::new(0.0, 0.0);
    for i in 0..n {
        let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
        acc += w * record.amp[i] * template.value_at_ns(record.t_ns[i]);
    }
    Ok(acc * dt)
}

// ---------------------------------------------------------------------------
// Heterodyne sampling density
// ---------------------------------------------------------------------------

/// One POVM element entry of noisy heterodyne detection in the Fock basis:
/// E(S)_{jk} for added-noise occupation n_added. Completeness is
/// integral of E(S) d^2 S = identity; tomography consumes this directly.
pub(crate) fn povm_element(j: usize, k: usize, s: C64, n_added: f64) -> C64 {
    let npan = 1.0 + n_added;
    let mu = n_added / npan;
    let w = s / npan;
    let wc = w.conj();
    let mut inner = C64::new(0.0, 0.0);
    let mut mu_l = 1.0;
    for l in 0..=j.min(k) {
        let pw = w.powu((j - l) as u32) * wc.powu((k - l) as u32);
        inner += binom(j, l) * binom(k, l) * fact(l) * mu_l * pw;
        mu_l *= mu;
    }
    let pref = (-(s.norm_sqr()) / npan).exp() / (std::f64::consts::PI * npan);
    pref / (fact(j) * fact(k)).sqrt() * inner
}

/// Gridded sampling density for inverse-CDF shot drawing. Bins are square,
/// row-major with x fastest, centers at -half + (i + 1/2) step.
#[derive(Debug)]
struct SamplingGrid {
    half: f64,
    step: f64,
    nbins: usize,
    /// Probability density at each bin center; kept for the moment and
    /// normalization checks in the tests.
    #[cfg_attr(not(test), allow(dead_code))]
    prob: Vec<f64>,
    /// Normalized cumulative bin weights; last entry is exactly 1.
    cum: Vec<f64>,
}

/// Evaluates the noisy-heterodyne density of `rho` over a square grid and
/// prepares its cumulative table. The density is the explicit
/// polynomial-times-Gaussian closed form of Q_rho convolved with the noise
/// Gaussian; if more than `MASS_TOL` of its mass falls outside the grid (or
/// between bins too coarse to resolve it) the build fails rather than
/// silently clipping.
fn heterodyne_grid(rho: &DensityMatrix, n_added: f64, half: f64, nbins: usize) -> Result<SamplingGrid> {
    let d = rho.dim;
    let npan = 1.0 + n_added;
    let mu = n_added / npan;
    let step = 2.0 * half / nbins as f64;
    let mut mu_pows = [0.0f64; MAX_MODE_DIM];
    let mut m = 1.0;
    for p in mu_pows.iter_mut().take(d) {
        *p = m;
        m *= mu;
    }
    // nonzero density-matrix entries, hoisted out of the pixel loop
    let entries: Vec<(usize, usize, C64)> = (0..d)
        .flat_map(|j| (0..d).map(move |k| (j, k)))
        .filter_map(|(j, k)| {
            let r = rho.get(j, k);
            (r.norm_sqr() > 1e-300).then(|| (j, k, r / (fact(j) * fact(k)).sqrt()))
        })
        .collect();
    let rows: Vec<Vec<f64>> = (0..nbins)
        .into_par_iter()
        .map(|iy| {
            let y = -half + (iy as f64 + 0.5) * step;
            let mut row = Vec::with_capacity(nbins);
            let mut wp = [C64::new(0.0, 0.0); MAX_MODE_DIM];
            let mut wcp = [C64::new(0.0, 0.0); MAX_MODE_DIM];
            for ix in 0..nbins {
                let x = -half + (ix as f64 + 0.5) * step;
                let w = C64::new(x, y) / npan;
                let mut acc_w = C64::new(1.0, 0.0);
                let mut acc_wc = C64::new(1.0, 0.0);
                for p in 0..d {
                    wp[p] = acc_w;
                    wcp[p] = acc_wc;
                    acc_w *= w;
                    acc_wc *= w.conj();
                }
                let mut acc = C64::new(0.0, 0.0);
                for &(j, k, r) in &entries {
                    let mut inner = C64::new(0.0, 0.0);
                    for l in 0..=j.min(k) {
                        inner += binom(j, l) * binom(k, l) * fact(l) * mu_pows[l]
                            * wcp[j - l]
                            * wp[k - l];
                    }
                    acc += r * inner;
                }
                let p = acc.re * (-(x * x + y * y) / npan).exp()
                    / (std::f64::consts::PI * npan);
                row.push(p.max(0.0));
            }
            row
        })
        .collect();
    let prob: Vec<f64> = rows.into_iter().flatten().collect();
    let area = step * step;
    let mass: f64 = prob.iter().sum::<f64>() * area;
    if (mass - 1.0).abs() > MASS_TOL {
        return Err(Error::UnderResolvedGrid { mass, tol: MASS_TOL });
    }
    let total: f64 = prob.iter().sum();
    let mut cum = Vec::with_capacity(prob.len());
    let mut run = 0.0;
    for p in &prob {
        run += p / total;
        cum.push(run);
    }
    if let Some(last) = cum.last_mut() {
        *last = 1.0;
    }
    Ok(SamplingGrid { half, step, nbins, prob, cum })
}

/// Splitmix-style stream derivation so parallel shot blocks get independent,
/// platform-stable ChaCha seeds from one master seed.
fn derive_stream(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Inverse-CDF draw over the gridded density with uniform in-bin jitter.
/// Per shot the stream yields (bin u, x jitter, y jitter) in that order;
/// blocks of 2^16 shots run on independent derived streams so the result is
/// identical however many threads execute them.
fn sample_shots(grid: &SamplingGrid, base_seed: u64, n_shots: usize) -> Vec<C64> {
    let nblocks = (n_shots + DRAW_BLOCK - 1) / DRAW_BLOCK;
    let blocks: Vec<Vec<C64>> = (0..nblocks)
        .into_par_iter()
        .map(|b| {
            let start = b * DRAW_BLOCK;
            let count = DRAW_BLOCK.min(n_shots - start);
            let mut rng = ChaCha12Rng::seed_from_u64(derive_stream(base_seed, b as u64));
            let mut out = Vec::with_capacity(count);
            for _ in 0..count {
                let u: f64 = rng.gen();
                let idx = grid.cum.partition_point(|&c| c <= u).min(grid.cum.len() - 1);
                let ix = idx % grid.nbins;
                let iy = idx / grid.nbins;
                let jx: f64 = rng.gen();
                let jy: f64 = rng.gen();
                out.push(C64::new(
                    -grid.half + (ix as f64 + jx) * grid.step,
                    -grid.half + (iy as f64 + jy) * grid.step,
                ));
            }
            out
        })
        .collect();
    blocks.concat()
}

// ---------------------------------------------------------------------------
// Shot sets
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShotKind {
    /// Signal present: mode prepared in the requested state.
    On,
    /// Signal blanked: mode in vacuum, noise only.
    Off,
}

impl ShotKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ShotKind::On => "on",
            ShotKind::Off => "off",
        }
    }
}

/// Complex-plane samples of the measured operator S. Immutable after
/// creation; `seed` records the stream that produced the samples.
#[derive(Debug, Clone)]
pub struct ShotSet {
    pub samples: Vec<C64>,
    pub kind: ShotKind,
    pub seed: u64,
}

impl ShotSet {
    pub fn n_shots(&self) -> usize {
        self.samples.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.samples.is_empty() {
            return Err(Error::DegenerateInput("shot set is empty".into()));
        }
        if self.samples.iter().any(|s| !s.re.is_finite() || !s.im.is_finite()) {
            return Err(Error::InvalidParam("shot set contains a non-finite sample".into()));
        }
        Ok(())
    }
}

/// Draws an interleaved pair of shot sets: `on` measures `rho` through the
/// noisy chain, `off` measures vacuum through the same chain. Both grids
/// share the extent +-6 sigma_total with sigma_total^2 = (dim + n_added)/2,
/// generous for any state the truncation can hold; the mass check inside the
/// grid build is the backstop. Fixed seed gives identical output on every
/// platform (ChaCha streams, no threading dependence).
pub fn synth_shots(
    rho: &DensityMatrix,
    n_added: f64,
    n_shots: usize,
    seed: u64,
) -> Result<(ShotSet, ShotSet)> {
    rho.validate()?;
    if rho.dim > MAX_MODE_DIM {
        return Err(Error::InvalidParam(format!(
            "mode density matrix has {} Fock levels; the gridded sampling density supports at most {MAX_MODE_DIM}",
            rho.dim
        )));
    }
    if !n_added.is_finite() || n_added < 0.0 {
        return Err(Error::InvalidParam(format!("n_added must be >= 0, got {n_added}")));
    }
    if n_shots == 0 {
        return Err(Error::InvalidParam("n_shots must be positive".into()));
    }
    let half = 6.0 * ((rho.dim as f64 + n_added) / 2.0).sqrt();
    let on_grid = heterodyne_grid(rho, n_added, half, GRID_BINS)?;
    let off_grid = heterodyne_grid(&DensityMatrix::ground(rho.dim), n_added, half, GRID_BINS)?;
    let off_seed = derive_stream(seed, 0x0FF5_E7);
    let on_samples = sample_shots(&on_grid, seed, n_shots);
    let off_samples = sample_shots(&off_grid, off_seed, n_shots);
    Ok((
        ShotSet { samples: on_samples, kind: ShotKind::On, seed },
        ShotSet { samples: off_samples, kind: ShotKind::Off, seed: off_seed },
    ))
}

// ---------------------------------------------------------------------------
// Histograms
// ---------------------------------------------------------------------------

/// 2D histogram of complex samples, row-major with x fastest.
#[derive(Debug, Clone)]
pub struct Histogram2d {
    pub x0: f64,
    pub y0: f64,
    pub dx: f64,
    pub dy: f64,
    pub nx: usize,
    pub ny: usize,
    pub counts: Vec<u64>,
}

impl Histogram2d {
    pub fn center_x(&self, ix: usize) -> f64 {
        self.x0 + (ix as f64 + 0.5) * self.dx
    }

    pub fn center_y(&self, iy: usize) -> f64 {
        self.y0 + (iy as f64 + 0.5) * self.dy
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Empirical probability density at a bin (counts per shot per area).
    pub fn density(&self, ix: usize, iy: usize) -> f64 {
        let n = self.total() as f64;
        self.counts[iy * self.nx + ix] as f64 / (n * self.dx * self.dy)
    }
}

/// Bins every sample; the range is taken from the data itself so no shot is
/// ever dropped (the max-edge sample lands in the last bin).
pub fn histogram_shots(shots: &ShotSet, nx: usize, ny: usize) -> Result<Histogram2d> {
    shots.validate()?;
    if nx == 0 || ny == 0 {
        return Err(Error::InvalidParam("histogram needs at least one bin per axis".into()));
    }
    let (mut xmin, mut xmax) = (f64::INFINITY, f64::NEG_INFINITY);
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for s in &shots.samples {
        xmin = xmin.min(s.re);
        xmax = xmax.max(s.re);
        ymin = ymin.min(s.im);
        ymax = ymax.max(s.im);
    }
    let mut dx = (xmax - xmin) / nx as f64;
    let mut x0 = xmin;
    if dx <= 0.0 {
        dx = 1.0;
        x0 = xmin - 0.5 * nx as f64;
    }
    let mut dy = (ymax - ymin) / ny as f64;
    let mut y0 = ymin;
    if dy <= 0.0 {
        dy = 1.0;
        y0 = ymin - 0.5 * ny as f64;
    }
    let mut counts = vec![0u64; nx * ny];
    for s in &shots.samples {
        let ix = (((s.re - x0) / dx) as usize).min(nx - 1);
        let iy = (((s.im - y0) / dy) as usize).min(ny - 1);
        counts[iy * nx + ix] += 1;
    }
    Ok(Histogram2d { x0, y0, dx, dy, nx, ny, counts })
}

// ---------------------------------------------------------------------------
// Moments
// ---------------------------------------------------------------------------

/// Normally ordered signal moments <(a^dag)^n a^m> with jackknife standard
/// errors. Hermitian symmetry (n,m) = conj (m,n) holds by construction.
#[derive(Debug, Clone)]
pub struct MomentSet {
    max_order: u8,
    moments: BTreeMap<(u8, u8), C64>,
    sigma: BTreeMap<(u8, u8), f64>,
}

fn moment_pairs(max_order: u8) -> Vec<(u8, u8)> {
    let mut v = Vec::new();
    for k in 1..=max_order {
        for n in 0..=k {
            v.push((n, k - n));
        }
    }
    v
}

impl MomentSet {
    pub fn new(
        moments: BTreeMap<(u8, u8), C64>,
        sigma: BTreeMap<(u8, u8), f64>,
        max_order: u8,
    ) -> Result<Self> {
        if !(1..=4).contains(&max_order) {
            return Err(Error::InvalidParam(format!(
                "moment order must be between 1 and 4, got {max_order}"
            )));
        }
        for &(n, m) in moments.keys() {
            let k = n + m;
            if k == 0 || k > max_order {
                return Err(Error::InvalidParam(format!(
                    "moment key ({n},{m}) outside order range 1..={max_order}"
                )));
            }
        }
        for pair in moment_pairs(max_order) {
            let v = moments.get(&pair).ok_or_else(|| {
                Error::InvalidParam(format!("missing moment ({},{})", pair.0, pair.1))
            })?;
            if !v.re.is_finite() || !v.im.is_finite() {
                return Err(Error::InvalidParam(format!(
                    "moment ({},{}) is not finite",
                    pair.0, pair.1
                )));
            }
            let s = sigma.get(&pair).ok_or_else(|| {
                Error::InvalidParam(format!("missing sigma for moment ({},{})", pair.0, pair.1))
            })?;
            if !s.is_finite() || *s < 0.0 {
                return Err(Error::InvalidParam(format!(
                    "sigma for moment ({},{}) must be finite and nonnegative",
                    pair.0, pair.1
                )));
            }
            let twin = moments[&(pair.1, pair.0)];
            if (*v - twin.conj()).norm() > 1e-9 * (1.0 + v.norm()) {
                return Err(Error::InvalidParam(format!(
                    "moments ({},{}) and ({},{}) are not conjugate partners",
                    pair.0, pair.1, pair.1, pair.0
                )));
            }
        }
        if max_order >= 2 {
            let n_ph = moments[&(1, 1)];
            let s = sigma[&(1, 1)];
            if n_ph.im.abs() > 1e-9 * (1.0 + n_ph.re.abs()) {
                return Err(Error::InvalidParam(format!(
                    "<a^dag a> has imaginary part {}",
                    n_ph.im
                )));
            }
            if n_ph.re < -3.0 * s - 1e-12 {
                return Err(Error::InvalidParam(format!(
                    "<a^dag a> = {} is negative beyond 3 sigma = {}",
                    n_ph.re,
                    3.0 * s
                )));
            }
        }
        Ok(MomentSet { max_order, moments, sigma })
    }

    pub fn max_order(&self) -> u8 {
        self.max_order
    }

    pub fn get(&self, n: u8, m: u8) -> Option<C64> {
        self.moments.get(&(n, m)).copied()
    }

    pub fn sigma(&self, n: u8, m: u8) -> Option<f64> {
        self.sigma.get(&(n, m)).copied()
    }

    /// Deterministic iteration over (key, moment, sigma), for serialization.
    pub fn entries(&self) -> impl Iterator<Item = ((u8, u8), C64, f64)> + '_ {
        self.moments.iter().map(|(&k, &v)| (k, v, self.sigma[&k]))
    }

    /// Rescales the mode amplitude so that photon-number-like quantities pick
    /// up `number_scale`: moment (n,m) is multiplied by number_scale^((n+m)/2),
    /// sigmas the same way.
    pub fn rescaled(&self, number_scale: f64) -> Result<MomentSet> {
        if !(number_scale.is_finite() && number_scale > 0.0) {
            return Err(Error::InvalidParam(format!(
                "moment rescale factor must be positive, got {number_scale}"
            )));
        }
        let mut moments = BTreeMap::new();
        let mut sigma = BTreeMap::new();
        for (&(n, m), &v) in &self.moments {
            let f = number_scale.powf(f64::from(n + m) / 2.0);
            moments.insert((n, m), v * f);
            sigma.insert((n, m), self.sigma[&(n, m)] * f);
        }
        MomentSet::new(moments, sigma, self.max_order)
    }
}

/// Per-block sums of the raw monomials conj(s)^n s^m for each requested pair.
fn raw_block_sums(
    samples: &[C64],
    pairs: &[(u8, u8)],
    nblocks: usize,
    max_order: u8,
) -> (Vec<Vec<C64>>, Vec<usize>) {
    let n = samples.len();
    let mut sums = vec![vec![C64::new(0.0, 0.0); pairs.len()]; nblocks];
    let mut lens = vec![0usize; nblocks];
    for b in 0..nblocks {
        let lo = b * n / nblocks;
        let hi = (b + 1) * n / nblocks;
        lens[b] = hi - lo;
        let acc = &mut sums[b];
        for s in &samples[lo..hi] {
            let mut sp = [C64::new(1.0, 0.0); 5];
            let mut cp = [C64::new(1.0, 0.0); 5];
            for p in 1..=max_order as usize {
                sp[p] = sp[p - 1] * s;
                cp[p] = cp[p - 1] * s.conj();
            }
            for (i, &(pn, pm)) in pairs.iter().enumerate() {
                acc[i] += cp[pn as usize] * sp[pm as usize];
            }
        }
    }
    (sums, lens)
}

/// Order-by-order deconvolution of S = a + h^dag: the off set supplies the
/// anti-normally ordered noise moments <h^p (h^dag)^q>, with <h> pinned to
/// zero, and each signal moment is what remains of the matching raw on-set
/// moment after all lower-order signal-noise cross terms are subtracted.
fn invert_moments(
    raw_on: &BTreeMap<(u8, u8), C64>,
    raw_off: &BTreeMap<(u8, u8), C64>,
    max_order: u8,
) -> BTreeMap<(u8, u8), C64> {
    let noise = |p: u8, q: u8| -> C64 {
        if p == 0 && q == 0 {
            C64::new(1.0, 0.0)
        } else if p + q == 1 {
            C64::new(0.0, 0.0)
        } else {
            raw_off[&(p, q)]
        }
    };
    let mut a: BTreeMap<(u8, u8), C64> = BTreeMap::new();
    a.insert((0, 0), C64::new(1.0, 0.0));
    for k in 1..=max_order {
        for n in 0..=k {
            let m = k - n;
            let mut val = raw_on[&(n, m)];
            for i in 0..=n {
                for j in 0..=m {
                    if i == n && j == m {
                        continue;
                    }
                    val -= binom(n as usize, i as usize)
                        * binom(m as usize, j as usize)
                        * a[&(i, j)]
                        * noise(n - i, m - j);
                }
            }
            a.insert((n, m), val);
        }
        // the two triangles agree only to rounding (different subtraction
        // order); pin the mirror to the exact conjugate before the next
        // order consumes these values
        for n in 0..=k {
            let m = k - n;
            if n < m {
                let v = a[&(m, n)].conj();
                a.insert((n, m), v);
            }
        }
    }
    a.remove(&(0, 0));
    a
}

/// Estimates the signal moments <(a^dag)^n a^m> for n+m <= max_order from an
/// on/off shot pair. Standard errors come from a 100-block delete-one
/// jackknife run through the full inversion, so they carry the noise
/// subtraction's error amplification.
pub fn moments_from_shots(on: &ShotSet, off: &ShotSet, max_order: u8) -> Result<MomentSet> {
    on.validate()?;
    off.validate()?;
    if !(1..=4).contains(&max_order) {
        return Err(Error::InvalidParam(format!(
            "moment order must be between 1 and 4, got {max_order}"
        )));
    }
    let need = if max_order >= 3 { 1000 } else { 100 };
    if on.n_shots() < need || off.n_shots() < need {
        return Err(Error::NoConvergence(format!(
            "order-{max_order} moment inversion needs at least {need} shots per set \
             (got {} on, {} off); draw more shots",
            on.n_shots(),
            off.n_shots()
        )));
    }
    let pairs = moment_pairs(max_order);
    let nb = JACKKNIFE_BLOCKS;
    let (on_sums, on_lens) = raw_block_sums(&on.samples, &pairs, nb, max_order);
    let (off_sums, off_lens) = raw_block_sums(&off.samples, &pairs, nb, max_order);
    let total = |sums: &[Vec<C64>]| -> Vec<C64> {
        let mut t = vec![C64::new(0.0, 0.0); pairs.len()];
        for blk in sums {
            for (ti, v) in t.iter_mut().zip(blk) {
                *ti += v;
            }
        }
        t
    };
    let on_tot = total(&on_sums);
    let off_tot = total(&off_sums);
    let means = |tot: &[C64], count: usize| -> BTreeMap<(u8, u8), C64> {
        pairs.iter().copied().zip(tot.iter().map(|v| v / count as f64)).collect()
    };
    let full =
        invert_moments(&means(&on_tot, on.n_shots()), &means(&off_tot, off.n_shots()), max_order);

    // delete-one-block replicates through the same inversion
    let mut reps: Vec<BTreeMap<(u8, u8), C64>> = Vec::with_capacity(nb);
    for b in 0..nb {
        let drop_block = |tot: &[C64], sums: &[Vec<C64>], n: usize, len_b: usize| {
            let count = n - len_b;
            pairs
                .iter()
                .copied()
                .zip(tot.iter().zip(&sums[b]).map(|(t, blk)| (t - blk) / count as f64))
                .collect::<BTreeMap<_, _>>()
        };
        let ron = drop_block(&on_tot, &on_sums, on.n_shots(), on_lens[b]);
        let roff = drop_block(&off_tot, &off_sums, off.n_shots(), off_lens[b]);
        reps.push(invert_moments(&ron, &roff, max_order));
    }
    let mut sigma = BTreeMap::new();
    for &pair in &pairs {
        let vals: Vec<C64> = reps.iter().map(|r| r[&pair]).collect();
        let mean = vals.iter().sum::<C64>() / nb as f64;
        let var: f64 = vals
            .iter()
            .map(|v| {
                let d = v - mean;
                d.re * d.re + d.im * d.im
            })
            .sum::<f64>()
            * (nb - 1) as f64
            / nb as f64;
        sigma.insert(pair, var.sqrt());
    }
    MomentSet::new(full, sigma, max_order)
}

/// Number scale that pins the reference <a^dag a> to the emitted-photon
/// expectation Gamma_eff/(Gamma_eff + Gamma_D) of an unshaped |e> run; apply
/// with `MomentSet::rescaled`.
pub fn gain_normalization(m_ref: &MomentSet, gamma_eff: f64, gamma_d: f64) -> Result<f64> {
    if !(gamma_eff.is_finite() && gamma_eff > 0.0) {
        return Err(Error::InvalidParam(format!(
            "gamma_eff must be positive, got {gamma_eff}"
        )));
    }
    if !(gamma_d.is_finite() && gamma_d >= 0.0) {
        return Err(Error::InvalidParam(format!("gamma_d must be >= 0, got {gamma_d}")));
    }
    let n_ref = m_ref
        .get(1, 1)
        .ok_or_else(|| Error::InvalidParam("reference moments lack <a^dag a>".into()))?;
    if n_ref.re <= 0.0 {
        return Err(Error::DegenerateInput(format!(
            "reference <a^dag a> = {} is not positive",
            n_ref.re
        )));
    }
    let target = gamma_eff / (gamma_eff + gamma_d);
    Ok(target / n_ref.re)
}

/// Glauber g2(0) = <a^dag a^dag a a> / <a^dag a>^2 with the uncertainty
/// propagated from the two moments (covariance neglected).
pub fn g2_zero(m: &MomentSet) -> Result<(f64, f64)> {
    if m.max_order() < 4 {
        return Err(Error::InvalidParam(
            "g2(0) needs order-4 moments; rerun moments_from_shots with max_order = 4".into(),
        ));
    }
    let n_ph = m.get(1, 1).expect("validated moment set has (1,1)");
    let s_n = m.sigma(1, 1).unwrap_or(0.0);
    if n_ph.re <= 3.0 * s_n {
        return Err(Error::DegenerateInput(format!(
            "<a^dag a> = {} +- {} is not resolved above noise; g2(0) undefined",
            n_ph.re, s_n
        )));
    }
    let m22 = m.get(2, 2).expect("validated moment set has (2,2)");
    let s22 = m.sigma(2, 2).unwrap_or(0.0);
    let n2 = n_ph.re * n_ph.re;
    let g2 = m22.re / n2;
    let s_g2 = ((s22 / n2).powi(2) + (2.0 * m22.re * s_n / (n2 * n_ph.re)).powi(2)).sqrt();
    Ok((g2, s_g2))
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    fn sech_record(phase: f64) -> FieldRecord {
        let n = 601;
        let t_ns: Vec<f64> = (0..n).map(|i| -300.0 + i as f64).collect();
        let rot = C64::from_polar(1.0, phase);
        let amp: Vec<C64> = t_ns.iter().map(|t| rot * (t / 60.0).cosh().recip()).collect();
        FieldRecord { t_ns, amp, frame: 0.0 }
    }

    #[test]
    fn template_is_unit_norm_and_phase_blind() {
        let tm = template_from_field(&sech_record(0.3)).unwrap();
        tm.validate().unwrap();
        let tm2 = template_from_field(&sech_record(-1.1)).unwrap();
        for (a, b) in tm.f.iter().zip(&tm2.f) {
            assert!((a - b).abs() <= 1e-13 * a.abs().max(1.0));
        }
        let dead = FieldRecord {
            t_ns: vec![0.0, 1.0, 2.0],
            amp: vec![C64::new(0.0, 0.0); 3],
            frame: 0.0,
        };
        assert!(matches!(template_from_field(&dead), Err(Error::DegenerateInput(_))));
    }

    #[test]
    fn mode_match_scores_overlap_and_rejects_disjoint_grids() {
        let tm = template_from_field(&sech_record(0.0)).unwrap();
        // a record equal to its own unit-norm template scores exactly 1
        let unit = FieldRecord {
            t_ns: tm.t_ns.clone(),
            amp: tm.f.iter().map(|&v| C64::new(v, 0.0)).collect(),
            frame: 0.0,
        };
        let mm = mode_match(&unit, &tm).unwrap();
        assert!((mm.re - 1.0).abs() < 1e-10 && mm.im.abs() < 1e-14, "got {mm}");

        // flipping the sign of the right half makes it orthogonal on the
        // symmetric grid (the center sample sits at t = 0)
        let odd = FieldRecord {
            t_ns: tm.t_ns.clone(),
            amp: tm
                .t_ns
                .iter()
                .zip(&tm.f)
                .map(|(&t, &v)| C64::new(v * if t == 0.0 { 0.0 } else { t.signum() }, 0.0))
                .collect(),
            frame: 0.0,
        };
        assert!(mode_match(&odd, &tm).unwrap().norm() < 1e-10);

        // resampling path: coarse template against a fine chirped record,
        // checked against a dense manual quadrature of the same integrand
        let coarse = FieldRecord {
            t_ns: (0..81).map(|i| -300.0 + 7.5 * i as f64).collect(),
            amp: (0..81)
                .map(|i| C64::new(((-300.0 + 7.5 * i as f64) / 60.0).cosh().recip(), 0.0))
                .collect(),
            frame: 0.0,
        };
        let ctm = template_from_field(&coarse).unwrap();
        let fine = sech_record(0.0);
        let got = mode_match(&fine, &ctm).unwrap();
        let n = fine.t_ns.len();
        let mut oracle = C64::new(0.0, 0.0);
        for i in 0..n {
            let w = if i == 0 || i == n - 1 { 0.5 } else { 1.0 };
            oracle += w * fine.amp[i] * ctm.value_at_ns(fine.t_ns[i]);
        }
        oracle *= fine.dt_s().unwrap();
        assert!((got - oracle).norm() <= 0.02 * oracle.norm());

        let mut far = sech_record(0.0);
        for t in &mut far.t_ns {
            *t += 1.0e6;
        }
        assert!(matches!(mode_match(&far, &tm), Err(Error::GridMismatch(_))));
    }

    #[test]
    fn sampling_density_normalizes_and_reproduces_known_moments() {
        // vacuum, no added noise: the density is the vacuum Husimi function
        let vac = DensityMatrix::ground(2);
        let g = heterodyne_grid(&vac, 0.0, 6.0, GRID_BINS).unwrap();
        let ic = GRID_BINS / 2;
        let x = -g.half + (ic as f64 + 0.5) * g.step;
        let want = (-(2.0 * x * x)).exp() / PI;
        let got = g.prob[ic * GRID_BINS + ic];
        assert!((got - want).abs() < 1e-12, "center density {got} vs {want}");

        // |1>, n_added = 1.5: <|S|^2> = <a^dag a> + <h h^dag> = 2 + n_added
        let one = DensityMatrix::pure(&[C64::new(0.0, 0.0), C64::new(1.0, 0.0)]).unwrap();
        let n_added = 1.5;
        let half = 6.0 * ((2.0 + n_added) / 2.0f64).sqrt();
        let g1 = heterodyne_grid(&one, n_added, half, GRID_BINS).unwrap();
        let mut m2 = 0.0;
        for iy in 0..GRID_BINS {
            let y = -g1.half + (iy as f64 + 0.5) * g1.step;
            for ix in 0..GRID_BINS {
                let x = -g1.half + (ix as f64 + 0.5) * g1.step;
                m2 += g1.prob[iy * GRID_BINS + ix] * (x * x + y * y);
            }
        }
        m2 *= g1.step * g1.step;
        assert!((m2 - (2.0 + n_added)).abs() < 5e-3, "second moment {m2}");
        assert!(g1.prob.iter().all(|&p| p >= 0.0));

        // a grid that cuts the tails gets caught by the mass check
        match heterodyne_grid(&vac, 0.0, 1.0, GRID_BINS) {
            Err(Error::UnderResolvedGrid { mass, .. }) => assert!(mass < 1.0 - 1e-6),
            other => panic!("expected UnderResolvedGrid, got {other:?}"),
        }
    }

    #[test]
    fn shots_are_reproducible_and_match_calibrated_widths() {
        let one = DensityMatrix::pure(&[C64::new(0.0, 0.0), C64::new(1.0, 0.0)]).unwrap();
        let n_added = 1.5;
        let n = 200_000;
        let (on, off) = synth_shots(&one, n_added, n, 7).unwrap();
        let (on2, off2) = synth_shots(&one, n_added, n, 7).unwrap();
        assert_eq!(on.samples, on2.samples);
        assert_eq!(off.samples, off2.samples);
        assert_eq!(on.kind, ShotKind::On);
        assert_eq!(off.kind, ShotKind::Off);
        assert_ne!(on.seed, off.seed);

        // off set: noise only, per-quadrature variance (1 + n_added)/2
        let want_var = (1.0 + n_added) / 2.0;
        for quad in [
            off.samples.iter().map(|s| s.re).collect::<Vec<_>>(),
            off.samples.iter().map(|s| s.im).collect::<Vec<_>>(),
        ] {
            let mean: f64 = quad.iter().sum::<f64>() / n as f64;
            let var: f64 = quad.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            assert!((var - want_var).abs() < 0.015, "off variance {var} vs {want_var}");
        }

        // the single photon shows up as one extra unit of |S|^2
        let pwr = |s: &ShotSet| s.samples.iter().map(|v| v.norm_sqr()).sum::<f64>() / n as f64;
        let diff = pwr(&on) - pwr(&off);
        assert!((diff - 1.0).abs() < 0.03, "photon number from power diff: {diff}");

        // vacuum signal: sample mean stays within the CLT band
        let vac = DensityMatrix::ground(2);
        let (von, _) = synth_shots(&vac, 0.0, 100_000, 21).unwrap();
        let mean = von.samples.iter().sum::<C64>() / 100_000.0;
        assert!(mean.norm() < 5.0 / (100_000.0f64).sqrt(), "vacuum mean {mean}");

        assert!(matches!(
            synth_shots(&one, -0.1, 100, 1),
            Err(Error::InvalidParam(_))
        ));
        assert!(matches!(synth_shots(&one, 1.0, 0, 1), Err(Error::InvalidParam(_))));
    }

    #[test]
    fn histograms_keep_every_shot() {
        let one = DensityMatrix::pure(&[C64::new(0.0, 0.0), C64::new(1.0, 0.0)]).unwrap();
        let (on, _) = synth_shots(&one, 0.5, 50_000, 3).unwrap();
        let h = histogram_shots(&on, 64, 48).unwrap();
        assert_eq!(h.total(), 50_000);
        let mut integral = 0.0;
        for iy in 0..h.ny {
            for ix in 0..h.nx {
                integral += h.density(ix, iy) * h.dx * h.dy;
            }
        }
        assert!((integral - 1.0).abs() < 1e-12);

        // degenerate cloud: every sample identical still bins cleanly
        let point = ShotSet {
            samples: vec![C64::new(0.3, -0.2); 1000],
            kind: ShotKind::Off,
            seed: 0,
        };
        let hp = histogram_shots(&point, 8, 8).unwrap();
        assert_eq!(hp.total(), 1000);
        assert_eq!(*hp.counts.iter().max().unwrap(), 1000);
    }

    #[test]
    fn moment_inversion_recovers_fock_and_superposition_states() {
        let one = DensityMatrix::pure(&[C64::new(0.0, 0.0), C64::new(1.0, 0.0)]).unwrap();
        let (on, off) = synth_shots(&one, 1.5, 500_000, 11).unwrap();
        let m = moments_from_shots(&on, &off, 4).unwrap();
        let n_ph = m.get(1, 1).unwrap();
        assert!((n_ph.re - 1.0).abs() <= 0.02, "<a^dag a> = {}", n_ph.re);
        assert!(n_ph.im.abs() < 1e-15);
        let s = m.sigma(1, 1).unwrap();
        assert!((0.002..0.02).contains(&s), "jackknife sigma {s}");
        assert!((n_ph.re - 1.0).abs() <= 3.5 * s);
        assert!(m.get(0, 1).unwrap().norm() <= 0.01);
        // hermitian symmetry is exact, not just approximate
        assert_eq!(m.get(2, 1).unwrap(), m.get(1, 2).unwrap().conj());
        assert_eq!(m.sigma(2, 1), m.sigma(1, 2));

        // g2 of the photon at this shot count: consistent with zero
        let (g2, sg) = g2_zero(&m).unwrap();
        assert!(g2.abs() <= 3.5 * sg, "g2 = {g2} +- {sg}");
        assert!(g2.abs() < 0.3);

        let plus =
            DensityMatrix::pure(&[C64::new(1.0, 0.0), C64::new(1.0, 0.0)]).unwrap();
        let (on, off) = synth_shots(&plus, 1.5, 500_000, 13).unwrap();
        let m = moments_from_shots(&on, &off, 4).unwrap();
        let a = m.get(0, 1).unwrap();
        assert!((a.re - 0.5).abs() <= 0.01 && a.im.abs() <= 0.01, "<a> = {a}");
        assert!((m.get(1, 1).unwrap().re - 0.5).abs() <= 0.02);

        let starved = ShotSet { samples: vec![C64::new(0.0, 0.0); 50], kind: ShotKind::On, seed: 0 };
        assert!(matches!(
            moments_from_shots(&starved, &off, 4),
            Err(Error::NoConvergence(_))
        ));
    }

    #[test]
    fn null_signal_yields_null_moments() {
        let vac = DensityMatrix::ground(3);
        let (on, off) = synth_shots(&vac, 1.5, 200_000, 17).unwrap();
        let m = moments_from_shots(&on, &off, 4).unwrap();
        for k in 1..=4u8 {
            for n in 0..=k {
                let v = m.get(n, k - n).unwrap();
                let s = m.sigma(n, k - n).unwrap();
                assert!(
                    v.norm() <= 3.5 * s,
                    "moment ({n},{}) = {v} exceeds 3.5 sigma = {}",
                    k - n,
                    3.5 * s
                );
            }
        }
        assert!(m.get(1, 1).unwrap().re.abs() < 0.02);
    }

    fn coherent_moments(alpha: C64, sig: f64) -> MomentSet {
        let mut moments = BTreeMap::new();
        let mut sigma = BTreeMap::new();
        for pair in moment_pairs(4) {
            let v = alpha.conj().powu(pair.0 as u32) * alpha.powu(pair.1 as u32);
            moments.insert(pair, v);
            sigma.insert(pair, sig);
        }
        MomentSet::new(moments, sigma, 4).unwrap()
    }

    #[test]
    fn g2_matches_closed_form_oracles() {
        // coherent state factorizes: g2 = 1 exactly
        let coh = coherent_moments(C64::new(0.6, 0.3), 1e-4);
        let (g2, sg) = g2_zero(&coh).unwrap();
        assert!((g2 - 1.0).abs() < 1e-12, "coherent g2 = {g2}");
        assert!(sg > 0.0);

        // ideal single photon: <a^dag a^dag a a> = 0
        let mut moments = BTreeMap::new();
        let mut sigma = BTreeMap::new();
        for pair in moment_pairs(4) {
            moments.insert(pair, C64::new(0.0, 0.0));
            sigma.insert(pair, 1e-3);
        }
        moments.insert((1, 1), C64::new(1.0, 0.0));
        let ideal = MomentSet::new(moments.clone(), sigma.clone(), 4).unwrap();
        let (g2, sg) = g2_zero(&ideal).unwrap();
        assert_eq!(g2, 0.0);
        assert!((sg - 1e-3).abs() < 1e-12);

        // no photons resolved: denominator undefined
        moments.insert((1, 1), C64::new(0.0, 0.0));
        let empty = MomentSet::new(moments, sigma, 4).unwrap();
        assert!(matches!(g2_zero(&empty), Err(Error::DegenerateInput(_))));

        // order-2 set cannot produce g2
        let mut m2 = BTreeMap::new();
        let mut s2 = BTreeMap::new();
        for pair in moment_pairs(2) {
            m2.insert(pair, C64::new(0.0, 0.0));
            s2.insert(pair, 1e-3);
        }
        m2.insert((1, 1), C64::new(1.0, 0.0));
        let low = MomentSet::new(m2, s2, 2).unwrap();
        assert!(matches!(g2_zero(&low), Err(Error::InvalidParam(_))));

        // construction rejects a lopsided pair
        let mut bad = BTreeMap::new();
        let mut bs = BTreeMap::new();
        for pair in moment_pairs(1) {
            bad.insert(pair, C64::new(0.0, 0.0));
            bs.insert(pair, 0.0);
        }
        bad.insert((0, 1), C64::new(0.5, 0.0));
        assert!(MomentSet::new(bad, bs, 1).is_err());
    }

    #[test]
    fn gain_scale_hits_the_reference_target() {
        let m = coherent_moments(C64::new(0.3, -0.6), 1e-4); // <a^dag a> = 0.45
        let scale = gain_normalization(&m, 2.0e6 * 2.0 * PI, 0.0).unwrap();
        let fixed = m.rescaled(scale).unwrap();
        assert!((fixed.get(1, 1).unwrap().re - 1.0).abs() < 1e-12);
        // fourth-order moment picks up the square of the number scale
        let want22 = m.get(2, 2).unwrap() * scale * scale;
        assert!((fixed.get(2, 2).unwrap() - want22).norm() < 1e-12);

        // device-rate target: Gamma_eff/(Gamma_eff + Gamma_D)
        let g_eff = 2.0 * PI * 2.0e6;
        let g_d = 2.0 * PI * 5.63e3;
        let unit = coherent_moments(C64::new(1.0, 0.0), 1e-4); // <a^dag a> = 1
        let s = gain_normalization(&unit, g_eff, g_d).unwrap();
        assert!((s - g_eff / (g_eff + g_d)).abs() < 1e-12);
        assert!((s - 0.9972).abs() < 1e-3, "normalization target {s}");

        let vac = coherent_moments(C64::new(0.0, 0.0), 1e-4);
        assert!(matches!(
            gain_normalization(&vac, g_eff, g_d),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(
            gain_normalization(&unit, -1.0, 0.0),
            Err(Error::InvalidParam(_))
        ));
    }
}
