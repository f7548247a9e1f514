//! Geometric wideband MIMO channel: ULA steering vectors, clustered rays,
//! delay-domain taps with a rectangular pulse, per-subcarrier matrices and
//! the subcarrier-averaged spatial covariance at the RSU.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::numerics::{ComplexMatrix, ComplexVector, C64};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UlaConfig {
    pub n_elements: usize,
    /// Element spacing in wavelengths.
    pub spacing_wavelengths: f64,
}

impl UlaConfig {
    pub fn new(n_elements: usize, spacing_wavelengths: f64) -> Result<Self> {
        if n_elements == 0 || !(spacing_wavelengths > 0.0) {
            return Err(Error::invalid(format!(
                "ULA needs n_elements >= 1 and spacing > 0, got {n_elements}, {spacing_wavelengths}"
            )));
        }
        Ok(Self {
            n_elements,
            spacing_wavelengths,
        })
    }

    pub fn half_wavelength(n_elements: usize) -> Self {
        Self {
            n_elements,
            spacing_wavelengths: 0.5,
        }
    }
}

/// `[1, e^{j2πΔ sinθ}, …, e^{j(N−1)2πΔ sinθ}]`
pub fn steering_vector(array: &UlaConfig, angle_rad: f64) -> ComplexVector {
    let step = 2.0 * PI * array.spacing_wavelengths * angle_rad.sin();
    (0..array.n_elements)
        .map(|n| C64::from_polar(1.0, step * n as f64))
        .collect()
}

/// Wraps an angle into `[0, 2π)`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = a.rem_euclid(2.0 * PI);
    if w >= 2.0 * PI {
        0.0
    } else {
        w
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ray {
    pub gain: C64,
    pub rel_delay_s: f64,
    pub rel_aoa_rad: f64,
    pub rel_aod_rad: f64,
}

/// One scattering cluster. Angles follow the RSU-side convention: the AoA is
/// the angle of the ray at the RSU array, the AoD the angle at the vehicle.
#[derive(Debug, Clone, PartialEq)]
pub struct PathCluster {
    pub mean_delay_s: f64,
    pub mean_aoa_rad: f64,
    pub mean_aod_rad: f64,
    pub rays: Vec<Ray>,
}

impl PathCluster {
    /// A cluster holding a single ray with zero offsets.
    pub fn single(gain: C64, delay_s: f64, aoa_rad: f64, aod_rad: f64) -> Self {
        Self {
            mean_delay_s: delay_s,
            mean_aoa_rad: wrap_angle(aoa_rad),
            mean_aod_rad: wrap_angle(aod_rad),
            rays: vec![Ray {
                gain,
                rel_delay_s: 0.0,
                rel_aoa_rad: 0.0,
                rel_aod_rad: 0.0,
            }],
        }
    }

    fn validate(&self, index: usize) -> Result<()> {
        if self.rays.is_empty() {
            return Err(Error::invalid(format!("cluster {index} has no rays")));
        }
        if self.mean_delay_s < 0.0 || self.rays.iter().any(|r| self.mean_delay_s + r.rel_delay_s < 0.0) {
            return Err(Error::invalid(format!("cluster {index} has a negative delay")));
        }
        Ok(())
    }
}

/// Delay-domain channel. Taps that are identically zero are not stored.
#[derive(Debug, Clone, PartialEq)]
pub struct WidebandChannel {
    n_taps: usize,
    tap_interval_s: f64,
    n_rx: usize,
    n_tx: usize,
    taps: BTreeMap<usize, ComplexMatrix>,
}

impl WidebandChannel {
    pub fn zeros(n_taps: usize, tap_interval_s: f64, n_rx: usize, n_tx: usize) -> Self {
        Self {
            n_taps,
            tap_interval_s,
            n_rx,
            n_tx,
            taps: BTreeMap::new(),
        }
    }

    pub fn from_taps(taps: Vec<ComplexMatrix>, tap_interval_s: f64) -> Result<Self> {
        let first = taps.first().ok_or_else(|| Error::invalid("channel needs at least one tap"))?;
        let (n_rx, n_tx) = (first.rows(), first.cols());
        let mut ch = Self::zeros(taps.len(), tap_interval_s, n_rx, n_tx);
        for (d, t) in taps.into_iter().enumerate() {
            if t.rows() != n_rx || t.cols() != n_tx {
                return Err(Error::invalid(format!("tap {d} has shape {}x{}", t.rows(), t.cols())));
            }
            if !t.is_finite() {
                return Err(Error::invalid(format!("tap {d} is not finite")));
            }
            if t.as_slice().iter().any(|x| x.norm_sqr() > 0.0) {
                ch.taps.insert(d, t);
            }
        }
        Ok(ch)
    }

    pub fn n_taps(&self) -> usize {
        self.n_taps
    }

    pub fn tap_interval_s(&self) -> f64 {
        self.tap_interval_s
    }

    /// Vehicle-side dimension `N_V`.
    pub fn n_rx(&self) -> usize {
        self.n_rx
    }

    /// RSU-side dimension `N_RSU`.
    pub fn n_tx(&self) -> usize {
        self.n_tx
    }

    pub fn tap(&self, d: usize) -> ComplexMatrix {
        self.taps
            .get(&d)
            .cloned()
            .unwrap_or_else(|| ComplexMatrix::zeros(self.n_rx, self.n_tx))
    }

    pub fn nonzero_taps(&self) -> impl Iterator<Item = (usize, &ComplexMatrix)> {
        self.taps.iter().map(|(d, m)| (*d, m))
    }
}

/// Builds `H[d] = Σ_c Σ_r α p(dT_c − τ_c − τ_r) a_V(φ) a_RSU*(θ)` with a
/// rectangular pulse: a ray with delay `τ` contributes to tap `⌊τ/T_c⌋` only,
/// i.e. `p(x) = 1` for `x ∈ (−T_c, 0]`.
pub fn channel_taps(
    clusters: &[PathCluster],
    arrays: (UlaConfig, UlaConfig),
    d_taps: usize,
    tap_interval_s: f64,
) -> Result<WidebandChannel> {
    let (vehicle, rsu) = arrays;
    if d_taps == 0 {
        return Err(Error::invalid("channel needs at least one tap"));
    }
    if !(tap_interval_s > 0.0) {
        return Err(Error::invalid("tap interval must be positive"));
    }
    let mut ch = WidebandChannel::zeros(d_taps, tap_interval_s, vehicle.n_elements, rsu.n_elements);
    let span = d_taps as f64 * tap_interval_s;
    for (ci, c) in clusters.iter().enumerate() {
        c.validate(ci)?;
        for (ri, r) in c.rays.iter().enumerate() {
            let delay = c.mean_delay_s + r.rel_delay_s;
            if delay >= span {
                return Err(Error::OutOfRange(format!(
                    "cluster {ci} ray {ri}: delay {delay:.3e} s beyond tap span {span:.3e} s"
                )));
            }
            let d = (delay / tap_interval_s).floor() as usize;
            if d >= d_taps {
                return Err(Error::OutOfRange(format!(
                    "cluster {ci} ray {ri}: delay {delay:.3e} s lands on tap {d} of {d_taps}"
                )));
            }
            let a_v = steering_vector(&vehicle, c.mean_aod_rad + r.rel_aod_rad);
            let a_rsu = steering_vector(&rsu, c.mean_aoa_rad + r.rel_aoa_rad);
            let tap = ch
                .taps
                .entry(d)
                .or_insert_with(|| ComplexMatrix::zeros(vehicle.n_elements, rsu.n_elements));
            for i in 0..vehicle.n_elements {
                let gi = r.gain * a_v[i];
                for (j, a) in a_rsu.iter().enumerate() {
                    tap[(i, j)] += gi * a.conj();
                }
            }
        }
    }
    Ok(ch)
}

/// `H[k] = Σ_d H[d] e^{−j2πkd/K}`
pub fn channel_freq(ch: &WidebandChannel, k: usize, k_total: usize) -> Result<ComplexMatrix> {
    if k >= k_total {
        return Err(Error::OutOfRange(format!("subcarrier {k} outside [0, {k_total})")));
    }
    let mut h = ComplexMatrix::zeros(ch.n_rx, ch.n_tx);
    for (d, tap) in ch.nonzero_taps() {
        let phase = C64::from_polar(1.0, -2.0 * PI * ((k * d) % k_total) as f64 / k_total as f64);
        for i in 0..ch.n_rx {
            for (o, t) in h.row_mut(i).iter_mut().zip(tap.row(i)) {
                *o += t * phase;
            }
        }
    }
    Ok(h)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpatialCovariance {
    matrix: ComplexMatrix,
}

impl SpatialCovariance {
    /// Wraps a matrix after checking Hermitian symmetry (relative 1e-10).
    pub fn new(matrix: ComplexMatrix) -> Result<Self> {
        if !matrix.is_square() {
            return Err(Error::invalid("covariance must be square"));
        }
        if !matrix.is_finite() {
            return Err(Error::invalid("covariance has non-finite entries"));
        }
        if !matrix.is_hermitian(1e-10) {
            return Err(Error::invalid("covariance is not Hermitian"));
        }
        Ok(Self { matrix })
    }

    /// Wraps a matrix that is Hermitian by construction, symmetrizing away
    /// rounding noise.
    pub(crate) fn from_hermitian(matrix: ComplexMatrix) -> Self {
        Self {
            matrix: matrix.hermitian_part(),
        }
    }

    pub fn zeros(n: usize) -> Self {
        Self {
            matrix: ComplexMatrix::zeros(n, n),
        }
    }

    pub fn n(&self) -> usize {
        self.matrix.rows()
    }

    pub fn matrix(&self) -> &ComplexMatrix {
        &self.matrix
    }

    pub fn into_matrix(self) -> ComplexMatrix {
        self.matrix
    }

    pub fn trace(&self) -> f64 {
        self.matrix.trace().re
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            matrix: self.matrix.scale(s),
        }
    }
}

/// `R = (1/(K·N_V)) Σ_k H*[k] H[k]`, computed exactly in the delay domain:
/// taps are folded modulo `K`, after which Parseval gives
/// `Σ_k H*[k]H[k] = K Σ_d H*[d]H[d]`.
pub fn comm_covariance(ch: &WidebandChannel, k_total: usize) -> Result<SpatialCovariance> {
    if k_total == 0 {
        return Err(Error::invalid("k_total must be >= 1"));
    }
    let mut folded: BTreeMap<usize, ComplexMatrix> = BTreeMap::new();
    for (d, tap) in ch.nonzero_taps() {
        let slot = folded
            .entry(d % k_total)
            .or_insert_with(|| ComplexMatrix::zeros(ch.n_rx, ch.n_tx));
        *slot = slot.add(tap);
    }
    let mut r = ComplexMatrix::zeros(ch.n_tx, ch.n_tx);
    for tap in folded.values() {
        r = r.add(&tap.adjoint().matmul(tap));
    }
    Ok(SpatialCovariance::from_hermitian(r.scale(1.0 / ch.n_rx as f64)))
}
