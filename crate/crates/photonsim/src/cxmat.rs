//! Dense complex linear algebra helpers on top of nalgebra: Hermitian
//! eigendecomposition with deterministic phase fixing, matrix square roots,
//! projection onto the density-matrix cone, Uhlmann fidelity, and a
//! closed-form 2x2 matrix exponential.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64 as C64;

pub type CMat = DMatrix<C64>;
pub type CVec = DVector<C64>;

pub fn identity(n: usize) -> CMat {
    CMat::identity(n, n)
}

/// (m + m†)/2, used to scrub asymmetry from roundoff before eigensolves.
pub fn hermitize(m: &CMat) -> CMat {
    (m + m.adjoint()).scale(0.5)
}

/// Eigendecomposition of a Hermitian matrix. Eigenvalues are returned in
/// ascending order; each eigenvector is rotated so its largest-modulus entry
/// is real and positive, which makes results reproducible across runs.
pub fn hermitian_eigen(m: &CMat) -> (Vec<f64>, CMat) {
    let n = m.nrows();
    assert_eq!(n, m.ncols(), "hermitian_eigen needs a square matrix");
    let se = hermitize(m).symmetric_eigen();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| se.eigenvalues[a].total_cmp(&se.eigenvalues[b]));
    let mut vals = Vec::with_capacity(n);
    let mut vecs = CMat::zeros(n, n);
    for (dst, &src) in order.iter().enumerate() {
        vals.push(se.eigenvalues[src]);
        let col = se.eigenvectors.column(src);
        let mut pivot = 0usize;
        for i in 1..n {
            if col[i].norm_sqr() > col[pivot].norm_sqr() {
                pivot = i;
            }
        }
        let p = col[pivot];
        let rot = if p.norm() > 0.0 { p.conj() / p.norm() } else { C64::new(1.0, 0.0) };
        for i in 0..n {
            vecs[(i, dst)] = col[i] * rot;
        }
    }
    (vals, vecs)
}

/// Rebuild sum_k f(lambda_k) |v_k><v_k| from a Hermitian matrix.
pub fn hermitian_fn(m: &CMat, f: impl Fn(f64) -> f64) -> CMat {
    let n = m.nrows();
    let (vals, vecs) = hermitian_eigen(m);
    let mut out = CMat::zeros(n, n);
    for k in 0..n {
        let fv = f(vals[k]);
        if fv == 0.0 {
            continue;
        }
        let v = vecs.column(k);
        for i in 0..n {
            for j in 0..n {
                out[(i, j)] += v[i] * v[j].conj() * fv;
            }
        }
    }
    out
}

/// Square root of a positive semidefinite matrix. Eigenvalues below a
/// relative floor are treated as exact zeros: sqrt amplifies roundoff-level
/// eigenvalues to sqrt(eps) otherwise, which ruins rank-deficient inputs.
pub fn sqrtm_psd(m: &CMat) -> CMat {
    let floor = 1e-12 * m.norm();
    hermitian_fn(m, move |x| if x > floor { x.sqrt() } else { 0.0 })
}

/// Nearest density matrix in the spectral sense: clip negative eigenvalues,
/// then rescale to unit trace. Falls back to the maximally mixed state if
/// everything was clipped.
pub fn psd_project_unit_trace(m: &CMat) -> CMat {
    let n = m.nrows();
    let clipped = hermitian_fn(m, |x| x.max(0.0));
    let tr = clipped.trace().re;
    if tr <= 0.0 {
        return identity(n).scale(1.0 / n as f64);
    }
    clipped.scale(1.0 / tr)
}

/// Uhlmann fidelity F(rho, sigma) = (Tr sqrt(sqrt(rho) sigma sqrt(rho)))^2.
pub fn fidelity(rho: &CMat, sigma: &CMat) -> f64 {
    assert_eq!(rho.nrows(), sigma.nrows(), "fidelity needs equal dimensions");
    let s = sqrtm_psd(rho);
    let inner = &s * sigma * &s;
    let (vals, _) = hermitian_eigen(&inner);
    // same relative floor as sqrtm_psd: null-space eigenvalues of the inner
    // product sit at roundoff level and must not leak sqrt(eps) into the sum
    let floor = 1e-12 * vals.last().copied().unwrap_or(0.0).max(0.0);
    let root_sum: f64 = vals.iter().map(|&x| if x > floor { x.sqrt() } else { 0.0 }).sum();
    root_sum * root_sum
}

fn sinhc(q: C64) -> C64 {
    if q.norm() < 1e-3 {
        let q2 = q * q;
        C64::new(1.0, 0.0) + q2 / 6.0 + q2 * q2 / 120.0
    } else {
        q.sinh() / q
    }
}

/// Closed-form exponential of a 2x2 complex matrix,
/// exp(M) = e^mu (cosh(q) I + sinhc(q) (M - mu I)) with mu the mean of the
/// diagonal and q^2 = ((m00-m11)/2)^2 + m01 m10. Valid on both sides of the
/// branch point because cosh and sinhc are even in q.
pub fn expm2(m: [[C64; 2]; 2]) -> [[C64; 2]; 2] {
    let mu = (m[0][0] + m[1][1]) * 0.5;
    let d = (m[0][0] - m[1][1]) * 0.5;
    let q = (d * d + m[0][1] * m[1][0]).sqrt();
    let emu = mu.exp();
    let ch = q.cosh();
    let sc = sinhc(q);
    [
        [emu * (ch + sc * d), emu * sc * m[0][1]],
        [emu * sc * m[1][0], emu * (ch - sc * d)],
    ]
}

/// Apply a 2x2 matrix to a 2-vector.
pub fn mat2_mul_vec(m: &[[C64; 2]; 2], v: [C64; 2]) -> [C64; 2] {
    [m[0][0] * v[0] + m[0][1] * v[1], m[1][0] * v[0] + m[1][1] * v[1]]
}
