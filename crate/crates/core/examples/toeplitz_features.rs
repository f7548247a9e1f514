//! Turns a noisy sample covariance into the three radar features: the
//! Toeplitz-projected covariance vector, its APS, and the dominant eigenvector.

use num_complex::Complex64 as C64;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;
use rand_chacha::ChaCha8Rng;
use radarlink::channel::{steering_vector, SpatialCovariance, UlaConfig};
use radarlink::features::{aps_from_vector, cov_vector, toeplitz_psd_project, ApsWindow};
use radarlink::numerics::{hermitian_eigen, ComplexMatrix};
use radarlink::scenario::dominant_unit_eigvec;

fn main() -> radarlink::Result<()> {
    let n = 16;
    let array = UlaConfig::half_wavelength(n);
    let a = steering_vector(&array, 0.4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noise = 0.5;
    // 64 snapshots of one source plus white noise.
    let snaps = 64;
    let x = ComplexMatrix::from_fn(n, snaps, |i, _| {
        let w = C64::new(rng.sample(StandardNormal), rng.sample(StandardNormal)) * (noise / 2.0f64).sqrt();
        a[i] + w
    });
    let r = SpatialCovariance::new(x.sample_covariance())?;
    let (vals, _) = hermitian_eigen(r.matrix());
    println!("sample covariance eigenvalues: min {:.3}, max {:.3}", vals[0], vals[n - 1]);

    let proj = toeplitz_psd_project(&r, noise, 1e-8, 200);
    println!("projection converged {} after {} iterations", proj.converged, proj.iterations);
    let cv = cov_vector(&proj.covariance)?;
    println!("covariance vector head: {:.3?}", &cv.entries[..3]);

    let v = dominant_unit_eigvec(proj.covariance.matrix());
    let aps = aps_from_vector(&v, ApsWindow::default());
    println!("eigenvector APS peaks at bin {} of {}", aps.argmax(), aps.len());
    Ok(())
}
