//! Small complex linear-algebra and DSP kernels used across the pipeline.
//!
//! Matrices are dense and row-major. Radar captures are stored one antenna
//! per row so per-channel filtering works on contiguous slices.

use std::cell::RefCell;
use std::f64::consts::PI;
use std::ops::{Index, IndexMut};
use std::sync::Arc;

use nalgebra::DMatrix;
use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};

pub type C64 = Complex64;
pub type ComplexVector = Vec<C64>;

pub const DEFAULT_EIG_TOL: f64 = 1e-9;
pub const DEFAULT_EIG_MAX_ITER: usize = 10_000;
pub const DEFAULT_FIR_TAPS: usize = 129;

#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix {
    rows: usize,
    cols: usize,
    data: Vec<C64>,
}

impl ComplexMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![C64::new(0.0, 0.0); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = C64::new(1.0, 0.0);
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn from_row_major(rows: usize, cols: usize, data: Vec<C64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimensionMismatch {
                expected: rows * cols,
                got: data.len(),
            });
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: Vec<Vec<C64>>) -> Result<Self> {
        let n_rows = rows.len();
        let n_cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n_rows * n_cols);
        for r in rows {
            if r.len() != n_cols {
                return Err(Error::DimensionMismatch {
                    expected: n_cols,
                    got: r.len(),
                });
            }
            data.extend(r);
        }
        Ok(Self {
            rows: n_rows,
            cols: n_cols,
            data,
        })
    }

    /// `v v*`
    pub fn outer(v: &[C64]) -> Self {
        Self::from_fn(v.len(), v.len(), |i, j| v[i] * v[j].conj())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn is_square(&self) -> bool {
        self.rows == self.cols
    }

    pub fn as_slice(&self) -> &[C64] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[C64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [C64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> ComplexVector {
        (0..self.rows).map(|i| self[(i, j)]).collect()
    }

    pub fn adjoint(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self[(j, i)].conj())
    }

    pub fn scale(&self, s: f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|x| x * s).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    pub fn sub(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols));
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
        }
    }

    pub fn matmul(&self, other: &Self) -> Self {
        assert_eq!(self.cols, other.rows, "inner dimensions differ");
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, a) in self.row(i).iter().enumerate() {
                if a.re == 0.0 && a.im == 0.0 {
                    continue;
                }
                for (o, b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        out
    }

    pub fn mul_vec(&self, v: &[C64]) -> ComplexVector {
        assert_eq!(self.cols, v.len());
        (0..self.rows)
            .map(|i| self.row(i).iter().zip(v).map(|(a, b)| a * b).sum())
            .collect()
    }

    /// `x* A x`
    pub fn quadratic_form(&self, x: &[C64]) -> C64 {
        let ax = self.mul_vec(x);
        x.iter().zip(&ax).map(|(a, b)| a.conj() * b).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
    }

    pub fn trace(&self) -> C64 {
        (0..self.rows.min(self.cols)).map(|i| self[(i, i)]).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|x| x.re.is_finite() && x.im.is_finite())
    }

    /// `‖A − A*‖_F ≤ rel_tol·‖A‖_F`
    pub fn is_hermitian(&self, rel_tol: f64) -> bool {
        if !self.is_square() {
            return false;
        }
        let mut diff = 0.0;
        for i in 0..self.rows {
            for j in i..self.cols {
                diff += 2.0 * (self[(i, j)] - self[(j, i)].conj()).norm_sqr();
            }
        }
        diff.sqrt() <= rel_tol * self.frobenius_norm().max(f64::MIN_POSITIVE)
    }

    pub fn hermitian_part(&self) -> Self {
        Self::from_fn(self.rows, self.cols, |i, j| {
            (self[(i, j)] + self[(j, i)].conj()) * 0.5
        })
    }

    /// `(1/n) Y Y*` over the columns of `self`.
    pub fn sample_covariance(&self) -> Self {
        self.sample_covariance_strided(1)
    }

    /// Sample covariance over every `stride`-th column.
    pub fn sample_covariance_strided(&self, stride: usize) -> Self {
        let stride = stride.max(1);
        let n = self.rows;
        let used = self.cols.div_ceil(stride);
        let inv = if used > 0 { 1.0 / used as f64 } else { 0.0 };
        let picked: Vec<Vec<C64>> = (0..n).map(|i| self.row(i).iter().step_by(stride).copied().collect()).collect();
        let mut out = Self::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut acc = C64::new(0.0, 0.0);
                for (a, b) in picked[i].iter().zip(&picked[j]) {
                    acc += a * b.conj();
                }
                acc *= inv;
                out[(i, j)] = acc;
                out[(j, i)] = acc.conj();
            }
        }
        out
    }

    pub(crate) fn to_nalgebra(&self) -> DMatrix<C64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.data)
    }
}

impl Index<(usize, usize)> for ComplexMatrix {
    type Output = C64;

    fn index(&self, (i, j): (usize, usize)) -> &C64 {
        &self.data[i * self.cols + j]
    }
}

impl IndexMut<(usize, usize)> for ComplexMatrix {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut C64 {
        &mut self.data[i * self.cols + j]
    }
}

pub fn norm(v: &[C64]) -> f64 {
    v.iter().map(|x| x.norm_sqr()).sum::<f64>().sqrt()
}

/// `a* b`
pub fn inner(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Rotates `v` so its first non-negligible entry is real and nonnegative.
pub fn fix_phase(v: &mut [C64]) {
    let scale = v.iter().map(|x| x.norm()).fold(0.0, f64::max);
    if scale == 0.0 {
        return;
    }
    if let Some(first) = v.iter().find(|x| x.norm() > 1e-12 * scale).copied() {
        let rot = first.conj() / first.norm();
        for x in v.iter_mut() {
            *x *= rot;
        }
    }
}

/// Unitary-scaled DFT matrix: column `j` is `exp(j2π·m·j/n)/√n` over rows `m`.
pub fn dft_matrix(n: usize) -> ComplexMatrix {
    let s = 1.0 / (n as f64).sqrt();
    ComplexMatrix::from_fn(n, n, |m, j| {
        let k = (m * j) % n;
        C64::from_polar(s, 2.0 * PI * k as f64 / n as f64)
    })
}

fn chebyshev_poly(order: usize, x: f64) -> f64 {
    let order_f = order as f64;
    if x > 1.0 {
        (order_f * x.acosh()).cosh()
    } else if x < -1.0 {
        let sign = if order.is_multiple_of(2) { 1.0 } else { -1.0 };
        sign * (order_f * (-x).acosh()).cosh()
    } else {
        (order_f * x.acos()).cos()
    }
}

/// Dolph–Chebyshev window with equiripple sidelobes `attenuation_db` below
/// the mainlobe, normalized to unit peak.
pub fn chebyshev_window(n: usize, attenuation_db: f64) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::invalid(format!("chebyshev window needs n >= 2, got {n}")));
    }
    if !(attenuation_db > 0.0) {
        return Err(Error::invalid(format!(
            "chebyshev attenuation must be positive, got {attenuation_db}"
        )));
    }
    let order = n - 1;
    let ripple = 10f64.powf(attenuation_db / 20.0);
    let beta = (ripple.acosh() / order as f64).cosh();
    let nf = n as f64;

    let mut p: Vec<C64> = (0..n)
        .map(|k| C64::new(chebyshev_poly(order, beta * (PI * k as f64 / nf).cos()), 0.0))
        .collect();
    if n.is_multiple_of(2) {
        for (k, pk) in p.iter_mut().enumerate() {
            *pk *= C64::from_polar(1.0, PI * k as f64 / nf);
        }
    }
    // n is small here, a direct DFT keeps this independent of the FFT plan cache.
    let spectrum: Vec<f64> = (0..n)
        .map(|m| {
            p.iter()
                .enumerate()
                .map(|(k, pk)| pk * C64::from_polar(1.0, -2.0 * PI * ((k * m) % n) as f64 / nf))
                .sum::<C64>()
                .re
        })
        .collect();

    let mut w = Vec::with_capacity(n);
    if n % 2 == 1 {
        let half = n.div_ceil(2);
        w.extend(spectrum[1..half].iter().rev());
        w.extend(&spectrum[..half]);
    } else {
        let half = n / 2 + 1;
        w.extend(spectrum[1..half].iter().rev());
        w.extend(&spectrum[1..half]);
    }
    let peak = w.iter().cloned().fold(f64::MIN, f64::max);
    Ok(w.into_iter().map(|x| x / peak).collect())
}

/// Dominant eigenpair of a Hermitian matrix by power iteration.
///
/// Returns a unit-norm eigenvector with the phase convention of [`fix_phase`]
/// and its eigenvalue. The stopping rule is `‖Rv − λv‖ ≤ tol·‖R‖_F` with `λ`
/// the Rayleigh quotient.
pub fn dominant_eigenvector(r: &ComplexMatrix, tol: f64, max_iter: usize) -> Result<(ComplexVector, f64)> {
    if !r.is_square() || r.rows() == 0 {
        return Err(Error::invalid(format!(
            "dominant_eigenvector needs a nonempty square matrix, got {}x{}",
            r.rows(),
            r.cols()
        )));
    }
    if !r.is_hermitian(tol.max(1e-6)) {
        return Err(Error::invalid("dominant_eigenvector needs a Hermitian matrix"));
    }
    let n = r.rows();
    let r_norm = r.frobenius_norm();
    if r_norm == 0.0 {
        let mut e = vec![C64::new(0.0, 0.0); n];
        e[0] = C64::new(1.0, 0.0);
        return Ok((e, 0.0));
    }

    // Start from the largest column: never orthogonal to the dominant
    // eigenvector of a nonzero PSD matrix.
    let start = (0..n)
        .max_by(|&a, &b| {
            let na: f64 = (0..n).map(|i| r[(i, a)].norm_sqr()).sum();
            let nb: f64 = (0..n).map(|i| r[(i, b)].norm_sqr()).sum();
            na.partial_cmp(&nb).unwrap().then(b.cmp(&a))
        })
        .unwrap();
    let mut v = r.column(start);
    let nv = norm(&v);
    for x in v.iter_mut() {
        *x /= nv;
    }

    let mut residual = f64::INFINITY;
    for _ in 0..max_iter {
        let w = r.mul_vec(&v);
        let lambda = inner(&v, &w).re;
        residual = w
            .iter()
            .zip(&v)
            .map(|(wi, vi)| (wi - vi * lambda).norm_sqr())
            .sum::<f64>()
            .sqrt();
        if residual <= tol * r_norm {
            fix_phase(&mut v);
            return Ok((v, lambda));
        }
        let nw = norm(&w);
        if nw == 0.0 {
            fix_phase(&mut v);
            return Ok((v, 0.0));
        }
        v = w.into_iter().map(|x| x / nw).collect();
    }
    Err(Error::ConvergenceFailure {
        iterations: max_iter,
        residual: residual / r_norm,
    })
}

/// Full eigendecomposition of a Hermitian matrix: eigenvalues ascending and
/// the matching unit eigenvectors as columns.
pub fn hermitian_eigen(r: &ComplexMatrix) -> (Vec<f64>, ComplexMatrix) {
    let eig = r.hermitian_part().to_nalgebra().symmetric_eigen();
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].partial_cmp(&eig.eigenvalues[b]).unwrap());
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let vectors = ComplexMatrix::from_fn(r.rows(), r.rows(), |i, j| eig.eigenvectors[(i, order[j])]);
    (values, vectors)
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

pub(crate) fn fft_plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

/// Unnormalized forward DFT, `X[k] = Σ x[n] e^{−j2πkn/N}`.
pub fn fft(x: &[C64]) -> ComplexVector {
    let mut buf = x.to_vec();
    if !buf.is_empty() {
        fft_plan(buf.len(), false).process(&mut buf);
    }
    buf
}

/// Windowed-sinc lowpass with a Hamming window, normalized to unit DC gain.
pub fn design_lowpass(n_taps: usize, cutoff_hz: f64, sample_rate_hz: f64) -> Result<Vec<f64>> {
    if n_taps < 3 || n_taps.is_multiple_of(2) {
        return Err(Error::invalid(format!("lowpass needs an odd tap count >= 3, got {n_taps}")));
    }
    if !(cutoff_hz > 0.0 && cutoff_hz < sample_rate_hz / 2.0) {
        return Err(Error::invalid(format!(
            "cutoff {cutoff_hz} Hz outside (0, {}) Hz",
            sample_rate_hz / 2.0
        )));
    }
    let fc = cutoff_hz / sample_rate_hz;
    let mid = (n_taps - 1) as f64 / 2.0;
    let mut h: Vec<f64> = (0..n_taps)
        .map(|i| {
            let t = i as f64 - mid;
            let sinc = if t == 0.0 {
                2.0 * fc
            } else {
                (2.0 * PI * fc * t).sin() / (PI * t)
            };
            let hamming = 0.54 - 0.46 * (2.0 * PI * i as f64 / (n_taps - 1) as f64).cos();
            sinc * hamming
        })
        .collect();
    let dc: f64 = h.iter().sum();
    for x in h.iter_mut() {
        *x /= dc;
    }
    Ok(h)
}

/// Lowpass-filters every row with the default 129-tap design.
pub fn fir_lowpass(x: &ComplexMatrix, cutoff_hz: f64, sample_rate_hz: f64) -> Result<ComplexMatrix> {
    fir_lowpass_with_taps(x, cutoff_hz, sample_rate_hz, DEFAULT_FIR_TAPS)
}

/// Lowpass-filters every row with the same linear-phase FIR.
///
/// Output rows have the input length: the full convolution is trimmed by the
/// `(n_taps − 1)/2` group delay on each side. Convolution runs through a
/// zero-padded FFT so long filters stay cheap.
pub fn fir_lowpass_with_taps(
    x: &ComplexMatrix,
    cutoff_hz: f64,
    sample_rate_hz: f64,
    n_taps: usize,
) -> Result<ComplexMatrix> {
    let taps = design_lowpass(n_taps, cutoff_hz, sample_rate_hz)?;
    Ok(filter_rows(x, &taps))
}

pub(crate) fn filter_rows(x: &ComplexMatrix, taps: &[f64]) -> ComplexMatrix {
    let len = x.cols();
    let mut out = ComplexMatrix::zeros(x.rows(), len);
    if len == 0 {
        return out;
    }
    let delay = (taps.len() - 1) / 2;
    let n_fft = (len + taps.len() - 1).next_power_of_two();
    let fwd = fft_plan(n_fft, false);
    let inv = fft_plan(n_fft, true);

    let mut h: Vec<C64> = vec![C64::new(0.0, 0.0); n_fft];
    for (hi, t) in h.iter_mut().zip(taps) {
        *hi = C64::new(*t, 0.0);
    }
    fwd.process(&mut h);
    let scale = 1.0 / n_fft as f64;
    for hi in h.iter_mut() {
        *hi *= scale;
    }

    let mut buf = vec![C64::new(0.0, 0.0); n_fft];
    for row in 0..x.rows() {
        buf[..len].copy_from_slice(x.row(row));
        buf[len..].fill(C64::new(0.0, 0.0));
        fwd.process(&mut buf);
        for (b, hi) in buf.iter_mut().zip(&h) {
            *b *= hi;
        }
        inv.process(&mut buf);
        out.row_mut(row).copy_from_slice(&buf[delay..delay + len]);
    }
    out
}

/// Power in dB, floored at −300 dB.
pub fn db(p: f64) -> f64 {
    10.0 * p.max(1e-30).log10()
}

pub fn from_db(d: f64) -> f64 {
    10f64.powf(d / 10.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_psd(n: usize, seed: u64) -> ComplexMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = ComplexMatrix::from_fn(n, n, |_, _| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
        a.matmul(&a.adjoint())
    }

    /// Cyclic complex Jacobi eigensolver, test oracle only.
    fn jacobi_eigen(r: &ComplexMatrix) -> (Vec<f64>, ComplexMatrix) {
        let n = r.rows();
        let mut a = r.clone();
        let mut v = ComplexMatrix::identity(n);
        for _sweep in 0..100 {
            let off: f64 = (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .filter(|(i, j)| i != j)
                .map(|(i, j)| a[(i, j)].norm_sqr())
                .sum();
            if off.sqrt() < 1e-14 * a.frobenius_norm() {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = a[(p, q)];
                    if apq.norm() < 1e-300 {
                        continue;
                    }
                    let app = a[(p, p)].re;
                    let aqq = a[(q, q)].re;
                    let phase = apq / apq.norm();
                    let theta = 0.5 * (2.0 * apq.norm()).atan2(aqq - app);
                    let (c, s) = (theta.cos(), theta.sin());
                    // G acts on columns p, q.
                    let g_pp = C64::new(c, 0.0);
                    let g_pq = phase * s;
                    let g_qp = -phase.conj() * s;
                    let g_qq = C64::new(c, 0.0);
                    for k in 0..n {
                        let akp = a[(k, p)];
                        let akq = a[(k, q)];
                        a[(k, p)] = akp * g_pp + akq * g_qp;
                        a[(k, q)] = akp * g_pq + akq * g_qq;
                    }
                    for k in 0..n {
                        let apk = a[(p, k)];
                        let aqk = a[(q, k)];
                        a[(p, k)] = g_pp.conj() * apk + g_qp.conj() * aqk;
                        a[(q, k)] = g_pq.conj() * apk + g_qq.conj() * aqk;
                    }
                    for k in 0..n {
                        let vkp = v[(k, p)];
                        let vkq = v[(k, q)];
                        v[(k, p)] = vkp * g_pp + vkq * g_qp;
                        v[(k, q)] = vkp * g_pq + vkq * g_qq;
                    }
                }
            }
        }
        ((0..n).map(|i| a[(i, i)].re).collect(), v)
    }

    #[test]
    fn dft_small_cases() {
        let f1 = dft_matrix(1);
        assert!((f1[(0, 0)] - C64::new(1.0, 0.0)).norm() < 1e-15);
        let f2 = dft_matrix(2);
        let s = 1.0 / 2f64.sqrt();
        let expect = [[s, s], [s, -s]];
        for i in 0..2 {
            for j in 0..2 {
                assert!((f2[(i, j)] - C64::new(expect[i][j], 0.0)).norm() < 1e-15);
            }
        }
    }

    #[test]
    fn dft_64_is_unitary() {
        let f = dft_matrix(64);
        let g = f.adjoint().matmul(&f);
        assert!(g.sub(&ComplexMatrix::identity(64)).frobenius_norm() < 1e-12);
    }

    #[test]
    fn chebyshev_two_taps() {
        let w = chebyshev_window(2, 35.0).unwrap();
        assert!((w[0] - 1.0).abs() < 1e-12 && (w[1] - 1.0).abs() < 1e-12);
        assert!(chebyshev_window(1, 35.0).is_err());
        assert!(chebyshev_window(8, 0.0).is_err());
    }

    #[test]
    fn chebyshev_symmetric_and_sidelobes() {
        for n in [63, 64] {
            let w = chebyshev_window(n, 35.0).unwrap();
            for i in 0..n {
                assert!((w[i] - w[n - 1 - i]).abs() < 1e-12);
            }
            assert!((w.iter().cloned().fold(0.0, f64::max) - 1.0).abs() < 1e-12);
            // Zero-padded spectrum, mainlobe located by walking down to the first null.
            let pad = 64 * n;
            let mut buf = vec![C64::new(0.0, 0.0); pad];
            for (b, wi) in buf.iter_mut().zip(&w) {
                *b = C64::new(*wi, 0.0);
            }
            let spec: Vec<f64> = fft(&buf).iter().map(|x| x.norm_sqr()).collect();
            let peak = spec[0];
            let mut edge = 1;
            while spec[edge + 1] < spec[edge] {
                edge += 1;
            }
            let worst = spec[edge..pad - edge].iter().cloned().fold(0.0, f64::max);
            assert!(db(worst / peak) <= -35.0 + 1e-3, "n={n}: sidelobe {} dB", db(worst / peak));
        }
    }

    #[test]
    fn eig_rank_one_and_diagonal() {
        let v: Vec<C64> = [1.0, 2.0, -1.0, 0.5].iter().enumerate().map(|(i, x)| C64::from_polar(*x, 0.3 * i as f64)).collect();
        let nv = norm(&v);
        let v: Vec<C64> = v.into_iter().map(|x| x / nv).collect();
        let r = ComplexMatrix::outer(&v);
        let (u, lambda) = dominant_eigenvector(&r, DEFAULT_EIG_TOL, DEFAULT_EIG_MAX_ITER).unwrap();
        assert!((lambda - 1.0).abs() < 1e-9);
        let mut expect = v.clone();
        fix_phase(&mut expect);
        for (a, b) in u.iter().zip(&expect) {
            assert!((a - b).norm() < 1e-9);
        }

        let d = ComplexMatrix::from_fn(2, 2, |i, j| if i == j { C64::new(2.0 - i as f64, 0.0) } else { C64::new(0.0, 0.0) });
        let (u, lambda) = dominant_eigenvector(&d, DEFAULT_EIG_TOL, DEFAULT_EIG_MAX_ITER).unwrap();
        assert!((lambda - 2.0).abs() < 1e-12);
        assert!((u[0] - C64::new(1.0, 0.0)).norm() < 1e-12 && u[1].norm() < 1e-12);
    }

    #[test]
    fn eig_matches_jacobi_oracle() {
        for seed in 0..10 {
            let r = random_psd(8, seed);
            let (u, lambda) = dominant_eigenvector(&r, DEFAULT_EIG_TOL, DEFAULT_EIG_MAX_ITER).unwrap();
            let residual = norm(&r.mul_vec(&u).iter().zip(&u).map(|(a, b)| a - b * lambda).collect::<Vec<_>>());
            assert!(residual <= DEFAULT_EIG_TOL * r.frobenius_norm());

            let (vals, vecs) = jacobi_eigen(&r);
            let top = (0..8).max_by(|&a, &b| vals[a].partial_cmp(&vals[b]).unwrap()).unwrap();
            assert!((vals[top] - lambda).abs() < 1e-8 * lambda.abs().max(1.0));
            let mut oracle = vecs.column(top);
            fix_phase(&mut oracle);
            for (a, b) in u.iter().zip(&oracle) {
                assert!((a - b).norm() < 1e-6, "seed {seed}");
            }

            let (nvals, _) = hermitian_eigen(&r);
            let mut jv = vals.clone();
            jv.sort_by(|a, b| a.partial_cmp(b).unwrap());
            for (a, b) in nvals.iter().zip(&jv) {
                assert!((a - b).abs() < 1e-9 * lambda);
            }
        }
    }

    #[test]
    fn eig_reports_non_convergence() {
        // ±1 eigenvalues: power iteration oscillates forever.
        let r = ComplexMatrix::from_fn(2, 2, |i, j| if i == j { C64::new(if i == 0 { 1.0 } else { -1.0 }, 0.0) } else { C64::new(0.0, 0.0) });
        let r = {
            let q = dft_matrix(2);
            q.matmul(&r).matmul(&q.adjoint())
        };
        match dominant_eigenvector(&r, 1e-12, 50) {
            Err(Error::ConvergenceFailure { iterations, .. }) => assert_eq!(iterations, 50),
            other => panic!("expected convergence failure, got {other:?}"),
        }
    }

    fn tone(len: usize, freq: f64, fs: f64, amp: f64) -> Vec<C64> {
        (0..len).map(|i| C64::from_polar(amp, 2.0 * PI * freq * i as f64 / fs)).collect()
    }

    fn direct_same_filter(x: &[C64], taps: &[f64]) -> Vec<C64> {
        let delay = (taps.len() - 1) / 2;
        (0..x.len())
            .map(|i| {
                let mut acc = C64::new(0.0, 0.0);
                for (j, t) in taps.iter().enumerate() {
                    let k = i as isize + delay as isize - j as isize;
                    if k >= 0 && (k as usize) < x.len() {
                        acc += x[k as usize] * t;
                    }
                }
                acc
            })
            .collect()
    }

    #[test]
    fn fir_dc_gain_is_unity() {
        let x = ComplexMatrix::from_fn(2, 1000, |_, _| C64::new(1.0, 0.0));
        let y = fir_lowpass(&x, 10.0, 100.0).unwrap();
        for r in 0..2 {
            for v in &y.row(r)[64..1000 - 64] {
                assert!((v - C64::new(1.0, 0.0)).norm() < 1e-6);
            }
        }
    }

    #[test]
    fn fir_stopband_and_passband() {
        let fs = 1000.0;
        let len = 8192;
        let x = ComplexMatrix::from_rows(vec![tone(len, 0.9 * fs / 2.0, fs, 1.0)]).unwrap();
        let y = fir_lowpass(&x, 0.1 * fs / 2.0, fs).unwrap();
        let p_in: f64 = x.row(0)[64..len - 64].iter().map(|v| v.norm_sqr()).sum();
        let p_out: f64 = y.row(0)[64..len - 64].iter().map(|v| v.norm_sqr()).sum();
        assert!(db(p_out / p_in) <= -40.0, "rejection {} dB", db(p_out / p_in));

        let inband = tone(len, 0.02 * fs / 2.0, fs, 1.0);
        let outband = tone(len, 0.8 * fs / 2.0, fs, 1.0);
        let mix: Vec<C64> = inband.iter().zip(&outband).map(|(a, b)| a + b).collect();
        let y = fir_lowpass(&ComplexMatrix::from_rows(vec![mix]).unwrap(), 0.1 * fs / 2.0, fs).unwrap();
        // Project onto the in-band tone to measure its amplitude.
        let seg = 64..len - 64;
        let amp = inner(&inband[seg.clone()], &y.row(0)[seg.clone()]).norm() / seg.len() as f64;
        assert!((20.0 * amp.log10()).abs() < 0.5);
    }

    #[test]
    fn fir_matches_direct_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x: Vec<C64> = (0..300).map(|_| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).collect();
        let taps = design_lowpass(31, 0.1, 1.0).unwrap();
        let fast = filter_rows(&ComplexMatrix::from_rows(vec![x.clone()]).unwrap(), &taps);
        let slow = direct_same_filter(&x, &taps);
        for (a, b) in fast.row(0).iter().zip(&slow) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    #[test]
    fn fir_rejects_bad_cutoff() {
        let x = ComplexMatrix::zeros(1, 10);
        assert!(fir_lowpass(&x, 0.0, 100.0).is_err());
        assert!(fir_lowpass(&x, 50.0, 100.0).is_err());
        assert!(fir_lowpass_with_taps(&x, 10.0, 100.0, 64).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;
        use rand::Rng;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(32))]

            #[test]
            fn dft_unitary(n in 1usize..40) {
                let f = dft_matrix(n);
                let err = f.adjoint().matmul(&f).sub(&ComplexMatrix::identity(n)).frobenius_norm();
                prop_assert!(err <= 1e-10 * n as f64);
            }

            #[test]
            fn fir_is_linear(seed in 0u64..1000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let mut gen = || ComplexMatrix::from_fn(2, 200, |_, _| C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5));
                let x = gen();
                let y = gen();
                let lhs = fir_lowpass(&x.scale(a).add(&y.scale(b)), 10.0, 100.0).unwrap();
                let rhs = fir_lowpass(&x, 10.0, 100.0).unwrap().scale(a).add(&fir_lowpass(&y, 10.0, 100.0).unwrap().scale(b));
                prop_assert!(lhs.sub(&rhs).frobenius_norm() <= 1e-10 * rhs.frobenius_norm().max(1e-12));
            }

            #[test]
            fn eig_residual_bound(seed in 0u64..500, n in 2usize..10) {
                let r = random_psd(n, seed);
                if let Ok((u, lambda)) = dominant_eigenvector(&r, DEFAULT_EIG_TOL, DEFAULT_EIG_MAX_ITER) {
                    let res = norm(&r.mul_vec(&u).iter().zip(&u).map(|(a, b)| a - b * lambda).collect::<Vec<_>>());
                    prop_assert!(res <= DEFAULT_EIG_TOL * r.frobenius_norm());
                    prop_assert!((norm(&u) - 1.0).abs() < 1e-12);
                }
            }
        }
    }
}
