//! Covariance featurization: Toeplitz/PSD projection, angular power spectra
//! and covariance vectors.

use crate::channel::SpatialCovariance;
use crate::error::{Error, Result};
use crate::numerics::{chebyshev_window, dft_matrix, fft, hermitian_eigen, ComplexMatrix, C64};

pub const DEFAULT_PROJECTION_TOL: f64 = 1e-8;
pub const DEFAULT_PROJECTION_MAX_ITER: usize = 200;
pub const APS_WINDOW_ATTENUATION_DB: f64 = 35.0;

/// Outcome of [`toeplitz_psd_project`].
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub covariance: SpatialCovariance,
    pub converged: bool,
    pub iterations: usize,
}

/// Averages each diagonal of a square matrix into a Hermitian Toeplitz matrix.
pub fn toeplitz_average(x: &ComplexMatrix) -> ComplexMatrix {
    let n = x.rows();
    let col: Vec<C64> = (0..n)
        .map(|k| {
            let mut acc = C64::new(0.0, 0.0);
            for i in 0..n - k {
                acc += x[(i + k, i)] + x[(i, i + k)].conj();
            }
            acc / (2.0 * (n - k) as f64)
        })
        .collect();
    toeplitz_from_column(&col)
}

fn toeplitz_from_column(col: &[C64]) -> ComplexMatrix {
    let n = col.len();
    ComplexMatrix::from_fn(n, n, |i, j| {
        if i == j {
            C64::new(col[0].re, 0.0)
        } else if i > j {
            col[i - j]
        } else {
            col[j - i].conj()
        }
    })
}

/// Clips negative eigenvalues of a Hermitian matrix to zero. Also returns the
/// most negative eigenvalue before clipping.
fn psd_clip(x: &ComplexMatrix) -> (ComplexMatrix, f64) {
    let (vals, vecs) = hermitian_eigen(x);
    let min = vals.first().copied().unwrap_or(0.0);
    if min >= 0.0 {
        return (x.clone(), min);
    }
    let n = x.rows();
    let mut out = ComplexMatrix::zeros(n, n);
    for (k, &lam) in vals.iter().enumerate() {
        if lam <= 0.0 {
            continue;
        }
        let v = vecs.column(k);
        for i in 0..n {
            let vi = v[i] * lam;
            for j in 0..n {
                out[(i, j)] += vi * v[j].conj();
            }
        }
    }
    (out, min)
}

/// Projects `R̂ − σ_n² I` onto the Toeplitz-Hermitian-PSD cone by alternating
/// diagonal averaging and eigenvalue clipping.
///
/// The returned matrix is exactly Hermitian Toeplitz. It is PSD within
/// `tol·‖X‖_F` when `converged` is set; otherwise it is the last iterate.
pub fn toeplitz_psd_project(r_hat: &SpatialCovariance, noise_power_w: f64, tol: f64, max_iter: usize) -> Projection {
    let n = r_hat.n();
    let shifted = r_hat.matrix().sub(&ComplexMatrix::identity(n).scale(noise_power_w));
    let mut t = toeplitz_average(&shifted);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iter {
        let (p, min_eig) = psd_clip(&t);
        let scale = t.frobenius_norm().max(f64::MIN_POSITIVE);
        if min_eig >= -tol * scale {
            converged = true;
            break;
        }
        t = toeplitz_average(&p);
        iterations += 1;
    }
    if !converged {
        let (_, min_eig) = psd_clip(&t);
        converged = min_eig >= -tol * t.frobenius_norm().max(f64::MIN_POSITIVE);
    }
    Projection {
        covariance: SpatialCovariance::from_hermitian(t),
        converged,
        iterations,
    }
}

/// Angular power spectrum: nonnegative power per direction.
#[derive(Debug, Clone, PartialEq)]
pub struct Aps {
    pub bins: Vec<f64>,
}

impl Aps {
    pub fn new(bins: Vec<f64>) -> Result<Self> {
        if bins.iter().any(|b| !b.is_finite() || *b < 0.0) {
            return Err(Error::invalid("APS bins must be finite and nonnegative"));
        }
        Ok(Self { bins })
    }

    pub fn len(&self) -> usize {
        self.bins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bins.is_empty()
    }

    pub fn total(&self) -> f64 {
        self.bins.iter().sum()
    }

    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, b) in self.bins.iter().enumerate() {
            if *b > self.bins[best] {
                best = i;
            }
        }
        best
    }
}

fn clamp_bins(bins: Vec<f64>) -> Aps {
    Aps {
        bins: bins.into_iter().map(|b| b.max(0.0)).collect(),
    }
}

/// `diag(F* R F)` with the unitary DFT matrix.
pub fn aps_from_covariance(r: &SpatialCovariance) -> Aps {
    aps_from_matrix(r.matrix())
}

pub(crate) fn aps_from_matrix(r: &ComplexMatrix) -> Aps {
    let n = r.rows();
    let f = dft_matrix(n);
    let rf = r.matmul(&f);
    let bins = (0..n)
        .map(|j| (0..n).map(|m| f[(m, j)].conj() * rf[(m, j)]).sum::<C64>().re)
        .collect();
    clamp_bins(bins)
}

/// Taper applied before the vector periodogram.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ApsWindow {
    Chebyshev { attenuation_db: f64 },
    Rectangular,
}

impl Default for ApsWindow {
    fn default() -> Self {
        ApsWindow::Chebyshev {
            attenuation_db: APS_WINDOW_ATTENUATION_DB,
        }
    }
}

impl ApsWindow {
    pub fn taps(&self, n: usize) -> Vec<f64> {
        match *self {
            ApsWindow::Chebyshev { attenuation_db } if n >= 2 => {
                chebyshev_window(n, attenuation_db).expect("positive attenuation")
            }
            _ => vec![1.0; n],
        }
    }
}

/// Windowed periodogram `|DFT(c ⊙ v)|²`.
pub fn aps_from_vector(v: &[C64], window: ApsWindow) -> Aps {
    let c = window.taps(v.len());
    let x: Vec<C64> = v.iter().zip(&c).map(|(a, w)| a * *w).collect();
    clamp_bins(fft(&x).iter().map(|z| z.norm_sqr()).collect())
}

/// First column of a Hermitian Toeplitz covariance.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceVector {
    pub entries: Vec<C64>,
}

impl CovarianceVector {
    pub fn new(entries: Vec<C64>) -> Result<Self> {
        match entries.first() {
            Some(e) if e.im.abs() <= 1e-12 * e.norm().max(1.0) && e.re >= 0.0 => Ok(Self { entries }),
            Some(_) => Err(Error::invalid("covariance vector entry 0 must be real and nonnegative")),
            None => Err(Error::invalid("covariance vector must be nonempty")),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Extracts the first column, rejecting matrices whose diagonals deviate from
/// their mean by more than `1e-8·‖R‖_F`.
pub fn cov_vector(r_tilde: &SpatialCovariance) -> Result<CovarianceVector> {
    let m = r_tilde.matrix();
    let n = m.rows();
    if n == 0 {
        return Err(Error::invalid("empty covariance"));
    }
    let avg = toeplitz_average(m);
    let dev = m.sub(&avg).frobenius_norm();
    if dev > 1e-8 * m.frobenius_norm().max(f64::MIN_POSITIVE) {
        return Err(Error::invalid(format!("covariance is not Toeplitz (deviation {dev:.3e})")));
    }
    let mut entries = avg.column(0);
    entries[0] = C64::new(entries[0].re.max(0.0), 0.0);
    Ok(CovarianceVector { entries })
}

/// Hermitian Toeplitz matrix with first column `r`; PSD is not enforced.
pub fn reconstruct_toeplitz(r: &CovarianceVector) -> SpatialCovariance {
    SpatialCovariance::from_hermitian(toeplitz_from_column(&r.entries))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{steering_vector, UlaConfig};
    use crate::numerics::hermitian_eigen;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_hermitian(n: usize, seed: u64) -> ComplexMatrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = ComplexMatrix::from_fn(n, n, |_, _| C64::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
        a.hermitian_part()
    }

    fn is_toeplitz(m: &ComplexMatrix) -> bool {
        let n = m.rows();
        (1..n).all(|i| (1..n).all(|j| (m[(i, j)] - m[(i - 1, j - 1)]).norm() <= 1e-12 * m.frobenius_norm().max(1.0)))
    }

    #[test]
    fn projection_fixed_point() {
        let a = steering_vector(&UlaConfig::half_wavelength(6), 0.4);
        let r = SpatialCovariance::new(ComplexMatrix::outer(&a).add(&ComplexMatrix::identity(6).scale(0.5))).unwrap();
        let p = toeplitz_psd_project(&r, 0.0, 1e-8, 200);
        assert!(p.converged);
        assert!(p.covariance.matrix().sub(r.matrix()).frobenius_norm() < 1e-8 * r.matrix().frobenius_norm());
    }

    #[test]
    fn projection_of_identity_minus_noise_is_zero() {
        let r = SpatialCovariance::new(ComplexMatrix::identity(5)).unwrap();
        let p = toeplitz_psd_project(&r, 1.0, 1e-8, 200);
        assert!(p.covariance.matrix().frobenius_norm() < 1e-12);
    }

    #[test]
    fn projection_of_random_hermitian_matches_long_run() {
        for seed in 0..5 {
            let a = random_hermitian(8, seed);
            let r = SpatialCovariance::new(a.clone()).unwrap();
            let p = toeplitz_psd_project(&r, 0.0, 1e-8, 200);
            let oracle = toeplitz_psd_project(&r, 0.0, 1e-12, 100_000);
            let x = p.covariance.matrix();
            assert!(is_toeplitz(x));
            let (vals, _) = hermitian_eigen(x);
            assert!(vals[0] >= -1e-6 * x.frobenius_norm(), "min eig {}", vals[0]);
            let d = x.sub(&a).frobenius_norm();
            let d_oracle = oracle.covariance.matrix().sub(&a).frobenius_norm();
            assert!((d - d_oracle).abs() <= 0.01 * d_oracle, "seed {seed}: {d} vs {d_oracle}");
        }
    }

    #[test]
    fn aps_of_identity_and_dft_column() {
        let aps = aps_from_covariance(&SpatialCovariance::new(ComplexMatrix::identity(8)).unwrap());
        for b in &aps.bins {
            assert!((b - 1.0).abs() < 1e-12);
        }
        let f = dft_matrix(8);
        let col = f.column(3);
        let aps = aps_from_covariance(&SpatialCovariance::new(ComplexMatrix::outer(&col)).unwrap());
        for (i, b) in aps.bins.iter().enumerate() {
            assert!((b - if i == 3 { 1.0 } else { 0.0 }).abs() < 1e-12);
        }
        let v = aps_from_vector(&col, ApsWindow::Rectangular);
        for (i, b) in v.bins.iter().enumerate() {
            assert!((b - if i == 3 { 8.0 } else { 0.0 }).abs() < 1e-10);
        }
        assert!(aps_from_vector(&[C64::new(0.0, 0.0); 8], ApsWindow::default()).total() == 0.0);
    }

    #[test]
    fn aps_argmax_is_nearest_dft_direction() {
        let n = 16;
        let f = dft_matrix(n);
        for k in 0..40 {
            let theta = -1.4 + 2.8 * k as f64 / 39.0;
            let a = steering_vector(&UlaConfig::half_wavelength(n), theta);
            let aps = aps_from_covariance(&SpatialCovariance::new(ComplexMatrix::outer(&a)).unwrap());
            let brute = (0..n)
                .max_by(|&x, &y| {
                    let g = |j: usize| crate::numerics::inner(&f.column(j), &a).norm();
                    g(x).total_cmp(&g(y))
                })
                .unwrap();
            assert_eq!(aps.argmax(), brute);
            assert_eq!(aps_from_vector(&a, ApsWindow::default()).argmax(), aps.argmax());
        }
    }

    #[test]
    fn windowed_sidelobes_are_low() {
        let n = 64;
        // Exactly on a DFT bin the periodogram has only the mainlobe; use a
        // zero-padded grid to see sidelobes.
        let a = steering_vector(&UlaConfig::half_wavelength(n), 0.3);
        let w = ApsWindow::default().taps(n);
        let mut x = vec![C64::new(0.0, 0.0); 16 * n];
        for i in 0..n {
            x[i] = a[i] * w[i];
        }
        let p: Vec<f64> = fft(&x).iter().map(|z| z.norm_sqr()).collect();
        let peak_i = (0..p.len()).max_by(|&i, &j| p[i].total_cmp(&p[j])).unwrap();
        // Walk down the mainlobe to the first nulls.
        let m = p.len();
        let mut lo = peak_i;
        while p[(lo + m - 1) % m] < p[lo] {
            lo = (lo + m - 1) % m;
        }
        let mut hi = peak_i;
        while p[(hi + 1) % m] < p[hi] {
            hi = (hi + 1) % m;
        }
        let side = (0..m)
            .filter(|&i| {
                let inside = if lo <= hi { i >= lo && i <= hi } else { i >= lo || i <= hi };
                !inside
            })
            .map(|i| p[i])
            .fold(0.0, f64::max);
        // The continuous peak is the coherent window sum.
        let true_peak = w.iter().sum::<f64>().powi(2);
        assert!(p[peak_i] <= true_peak * (1.0 + 1e-12));
        assert!(10.0 * (side / true_peak).log10() <= -35.0 + 1e-3);
        let aps = aps_from_vector(&a, ApsWindow::default());
        let pk = true_peak;
        let worst = aps
            .bins
            .iter()
            .enumerate()
            .filter(|(i, _)| (*i as isize - aps.argmax() as isize).rem_euclid(n as isize) > 3 && (aps.argmax() as isize - *i as isize).rem_euclid(n as isize) > 3)
            .map(|(_, b)| *b)
            .fold(0.0, f64::max);
        assert!(10.0 * (worst / pk).log10() <= -35.0 + 1e-3);
    }

    #[test]
    fn cov_vector_cases() {
        let e = cov_vector(&SpatialCovariance::new(ComplexMatrix::identity(4)).unwrap()).unwrap();
        assert_eq!(e.entries, vec![C64::new(1.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0), C64::new(0.0, 0.0)]);

        let theta = 0.6f64;
        let arr = UlaConfig::half_wavelength(5);
        let a = steering_vector(&arr, theta);
        let r = SpatialCovariance::new(ComplexMatrix::outer(&a).scale(2.0)).unwrap();
        let v = cov_vector(&r).unwrap();
        for (n, x) in v.entries.iter().enumerate() {
            let expect = C64::from_polar(2.0, n as f64 * std::f64::consts::PI * theta.sin());
            assert!((x - expect).norm() < 1e-12);
        }
        let back = reconstruct_toeplitz(&v);
        assert!(back.matrix().sub(r.matrix()).frobenius_norm() <= 1e-12);

        let mut bad = ComplexMatrix::identity(3);
        bad[(1, 1)] = C64::new(3.0, 0.0);
        assert!(cov_vector(&SpatialCovariance::new(bad).unwrap()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn herm(n: usize) -> impl Strategy<Value = ComplexMatrix> {
            proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), n * n)
                .prop_map(move |v| ComplexMatrix::from_row_major(n, n, v.into_iter().map(|(a, b)| C64::new(a, b)).collect()).unwrap().hermitian_part())
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(24))]

            #[test]
            fn projection_idempotent_and_in_cone(a in herm(6)) {
                let r = SpatialCovariance::new(a).unwrap();
                let p1 = toeplitz_psd_project(&r, 0.0, 1e-8, 200);
                let p2 = toeplitz_psd_project(&p1.covariance, 0.0, 1e-8, 200);
                let x = p1.covariance.matrix();
                let scale = x.frobenius_norm().max(1e-12);
                prop_assert!(is_toeplitz(x));
                if p1.converged {
                    let (vals, _) = hermitian_eigen(x);
                    prop_assert!(vals[0] >= -1e-8 * scale);
                    prop_assert!(p2.covariance.matrix().sub(x).frobenius_norm() <= 2e-8 * scale);
                }
            }

            #[test]
            fn aps_conserves_trace(a in herm(8)) {
                let r = SpatialCovariance::new(a.matmul(&a.adjoint())).unwrap();
                let aps = aps_from_covariance(&r);
                prop_assert!((aps.total() - r.trace()).abs() <= 1e-10 * r.trace().max(1.0));
            }

            #[test]
            fn cov_vector_round_trip(v in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 2..10)) {
                let mut e: Vec<C64> = v.into_iter().map(|(a, b)| C64::new(a, b)).collect();
                e[0] = C64::new(e[0].re.abs(), 0.0);
                let cv = CovarianceVector::new(e).unwrap();
                let back = cov_vector(&reconstruct_toeplitz(&cv)).unwrap();
                for (x, y) in back.entries.iter().zip(&cv.entries) {
                    prop_assert!((x - y).norm() <= 1e-12);
                }
            }
        }
    }
}
