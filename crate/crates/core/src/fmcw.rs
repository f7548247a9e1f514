//! FMCW radar waveforms and the passive-array reception model.
//!
//! Everything is complex baseband. The carrier only enters through the
//! per-element delay `τ'_n`, which turns into the array phase progression.
//! Element `n` sees the extra delay `τ'_n = −nΔ sinθ / f_c`, so a single
//! path snapshot is the steering vector `a(θ)` of [`crate::channel`].

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::channel::{steering_vector, SpatialCovariance, UlaConfig};
use crate::error::{Error, Result};
use crate::numerics::{ComplexMatrix, C64};

pub const CAPTURE_MAGIC: &[u8; 4] = b"FMCW";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FmcwParams {
    pub chirp_rate_hz_per_s: f64,
    pub bandwidth_hz: f64,
    /// Chirp start frequency after downconversion.
    pub start_freq_hz: f64,
    pub time_offset_s: f64,
    pub phase_offset_rad: f64,
    pub power_w: f64,
}

impl FmcwParams {
    pub fn new(chirp_rate_hz_per_s: f64, bandwidth_hz: f64, time_offset_s: f64, phase_offset_rad: f64, power_w: f64) -> Result<Self> {
        let p = Self {
            chirp_rate_hz_per_s,
            bandwidth_hz,
            start_freq_hz: 0.0,
            time_offset_s,
            phase_offset_rad,
            power_w,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.chirp_rate_hz_per_s > 0.0 && self.bandwidth_hz > 0.0) {
            return Err(Error::invalid("chirp rate and bandwidth must be positive"));
        }
        let period = self.chirp_period_s();
        if !(self.time_offset_s >= 0.0 && self.time_offset_s < period) {
            return Err(Error::invalid(format!(
                "time offset {} s outside [0, {period}) s",
                self.time_offset_s
            )));
        }
        if !(self.power_w >= 0.0) {
            return Err(Error::invalid("radar power must be nonnegative"));
        }
        Ok(())
    }

    /// `T = B/β`
    pub fn chirp_period_s(&self) -> f64 {
        self.bandwidth_hz / self.chirp_rate_hz_per_s
    }

    /// Phase of the chirp at time `t'` into the current period.
    fn phase_at(&self, t_in_chirp: f64) -> f64 {
        2.0 * PI * (self.start_freq_hz * t_in_chirp + 0.5 * self.chirp_rate_hz_per_s * t_in_chirp * t_in_chirp) + self.phase_offset_rad
    }
}

/// Transmitted chirp at time `t`, repeating every `T`.
pub fn fmcw_sample(p: &FmcwParams, t: f64) -> C64 {
    let t_in = (t - p.time_offset_s).rem_euclid(p.chirp_period_s());
    C64::from_polar(p.power_w.sqrt(), p.phase_at(t_in))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadarPath {
    pub gain: C64,
    pub delay_s: f64,
    pub aoa_rad: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RadarPathSet {
    paths: Vec<RadarPath>,
}

impl RadarPathSet {
    pub fn new(paths: Vec<RadarPath>) -> Result<Self> {
        if paths.is_empty() {
            return Err(Error::invalid("radar path set needs at least one path"));
        }
        if paths.iter().any(|p| !(p.delay_s >= 0.0)) {
            return Err(Error::invalid("radar path delays must be nonnegative"));
        }
        Ok(Self { paths })
    }

    pub fn single(gain: C64, delay_s: f64, aoa_rad: f64) -> Self {
        Self {
            paths: vec![RadarPath { gain, delay_s, aoa_rad }],
        }
    }

    pub fn paths(&self) -> &[RadarPath] {
        &self.paths
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self {
            paths: self
                .paths
                .iter()
                .map(|p| RadarPath {
                    gain: p.gain * s,
                    ..*p
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaptureConfig {
    pub sample_rate_hz: f64,
    pub n_samples: usize,
    /// RF carrier of the radar band; sets the per-element phase.
    pub carrier_hz: f64,
}

impl CaptureConfig {
    pub fn sample_interval_s(&self) -> f64 {
        1.0 / self.sample_rate_hz
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RxCapture {
    pub samples: ComplexMatrix,
    pub sample_rate_hz: f64,
}

impl RxCapture {
    pub fn n_antennas(&self) -> usize {
        self.samples.rows()
    }

    pub fn n_samples(&self) -> usize {
        self.samples.cols()
    }

    pub fn zeros(n_antennas: usize, n_samples: usize, sample_rate_hz: f64) -> Self {
        Self {
            samples: ComplexMatrix::zeros(n_antennas, n_samples),
            sample_rate_hz,
        }
    }

    pub fn power(&self) -> f64 {
        let n = (self.n_antennas() * self.n_samples()).max(1) as f64;
        self.samples.as_slice().iter().map(|x| x.norm_sqr()).sum::<f64>() / n
    }
}

/// Per-element delay offset `τ'_n / n` for a path arriving from `aoa_rad`.
fn element_delay_step(array: &UlaConfig, aoa_rad: f64, carrier_hz: f64) -> f64 {
    -array.spacing_wavelengths * aoa_rad.sin() / carrier_hz
}

/// Adds one radar path to `out` without noise.
fn add_path(out: &mut ComplexMatrix, p: &FmcwParams, path: &RadarPath, array: &UlaConfig, cfg: &CaptureConfig) {
    let n_ant = array.n_elements;
    let period = p.chirp_period_s();
    let ts = cfg.sample_interval_s();
    let step = element_delay_step(array, path.aoa_rad, cfg.carrier_hz);
    let max_offset = step.abs() * (n_ant.saturating_sub(1)) as f64;
    let amp = path.gain * p.power_w.sqrt();
    // Carrier phase of τ'_n plus the constant quadratic term of the chirp
    // expansion s(t' − τ') = s(t')·e^{−j2π(f_r + βt')τ'}·e^{jπβτ'^2}.
    let fixed: Vec<C64> = (0..n_ant)
        .map(|n| {
            let tau_n = step * n as f64;
            C64::from_polar(1.0, -2.0 * PI * cfg.carrier_hz * tau_n + PI * p.chirp_rate_hz_per_s * tau_n * tau_n)
        })
        .collect();
    let n_samples = out.cols();
    let mut column = vec![C64::new(0.0, 0.0); n_ant];
    for i in 0..n_samples {
        let t = i as f64 * ts - path.delay_s - p.time_offset_s;
        let t_in = t.rem_euclid(period);
        if t_in < max_offset || t_in > period - max_offset {
            // Some element straddles the chirp wrap: evaluate each directly.
            for (n, c) in column.iter_mut().enumerate() {
                let tau_n = step * n as f64;
                let t_n = (t - tau_n).rem_euclid(period);
                *c = amp * C64::from_polar(1.0, p.phase_at(t_n) - 2.0 * PI * cfg.carrier_hz * tau_n);
            }
        } else {
            let base = amp * C64::from_polar(1.0, p.phase_at(t_in));
            let w = C64::from_polar(1.0, -2.0 * PI * (p.start_freq_hz + p.chirp_rate_hz_per_s * t_in) * step);
            let mut wn = C64::new(1.0, 0.0);
            for (c, f) in column.iter_mut().zip(&fixed) {
                *c = base * wn * f;
                wn *= w;
            }
        }
        for (n, c) in column.iter().enumerate() {
            out[(n, i)] += c;
        }
    }
}

/// Superimposed reception of several radars on the passive ULA, plus
/// circular white Gaussian noise of `noise_power_w` per complex sample.
pub fn synthesize_rx(
    radars: &[(FmcwParams, RadarPathSet)],
    array: &UlaConfig,
    capture: &CaptureConfig,
    noise_power_w: f64,
    seed: u64,
) -> Result<RxCapture> {
    if radars.is_empty() {
        return Err(Error::invalid("synthesize_rx needs at least one radar"));
    }
    if capture.n_samples == 0 || !(capture.sample_rate_hz > 0.0) {
        return Err(Error::invalid("capture needs samples and a positive sample rate"));
    }
    let mut samples = ComplexMatrix::zeros(array.n_elements, capture.n_samples);
    for (p, paths) in radars {
        p.validate()?;
        for path in paths.paths() {
            if path.gain.norm_sqr() == 0.0 || p.power_w == 0.0 {
                continue;
            }
            add_path(&mut samples, p, path, array, capture);
        }
    }
    add_noise(&mut samples, noise_power_w, seed);
    Ok(RxCapture {
        samples,
        sample_rate_hz: capture.sample_rate_hz,
    })
}

/// Noise-only capture, also what a scene without radars produces.
pub fn noise_capture(array: &UlaConfig, capture: &CaptureConfig, noise_power_w: f64, seed: u64) -> RxCapture {
    let mut samples = ComplexMatrix::zeros(array.n_elements, capture.n_samples);
    add_noise(&mut samples, noise_power_w, seed);
    RxCapture {
        samples,
        sample_rate_hz: capture.sample_rate_hz,
    }
}

fn add_noise(samples: &mut ComplexMatrix, noise_power_w: f64, seed: u64) {
    if noise_power_w <= 0.0 {
        return;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sigma = (noise_power_w / 2.0).sqrt();
    for r in 0..samples.rows() {
        for x in samples.row_mut(r) {
            let re: f64 = StandardNormal.sample(&mut rng);
            let im: f64 = StandardNormal.sample(&mut rng);
            *x += C64::new(sigma * re, sigma * im);
        }
    }
}

/// Ground-truth isolated covariance: a unit delta through the radar channel,
/// sampled on the capture grid, `R = (1/I) Y̌ Y̌*`.
///
/// Each path lands on the sample nearest its delay; paths sharing a sample
/// add coherently.
pub fn ideal_isolated_covariance(paths: &RadarPathSet, array: &UlaConfig, capture: &CaptureConfig) -> SpatialCovariance {
    let n = array.n_elements;
    let mut columns: Vec<(i64, Vec<C64>)> = Vec::new();
    for p in paths.paths() {
        let idx = (p.delay_s * capture.sample_rate_hz).round() as i64;
        let a = steering_vector(array, p.aoa_rad);
        match columns.iter_mut().find(|(i, _)| *i == idx) {
            Some((_, col)) => {
                for (c, ai) in col.iter_mut().zip(&a) {
                    *c += p.gain * ai;
                }
            }
            None => columns.push((idx, a.iter().map(|ai| p.gain * ai).collect())),
        }
    }
    let inv = 1.0 / capture.n_samples.max(1) as f64;
    let mut r = ComplexMatrix::zeros(n, n);
    for (_, col) in &columns {
        r = r.add(&ComplexMatrix::outer(col).scale(inv));
    }
    SpatialCovariance::from_hermitian(r)
}

pub fn write_capture<W: Write>(mut w: W, capture: &RxCapture) -> std::io::Result<()> {
    w.write_all(CAPTURE_MAGIC)?;
    w.write_all(&(capture.n_antennas() as u32).to_le_bytes())?;
    w.write_all(&(capture.n_samples() as u64).to_le_bytes())?;
    w.write_all(&capture.sample_rate_hz.to_le_bytes())?;
    let mut buf = Vec::with_capacity(capture.n_samples() * 16);
    for r in 0..capture.n_antennas() {
        buf.clear();
        for x in capture.samples.row(r) {
            buf.extend_from_slice(&x.re.to_le_bytes());
            buf.extend_from_slice(&x.im.to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_capture<R: Read>(mut r: R) -> std::io::Result<RxCapture> {
    use std::io::{Error as IoError, ErrorKind};
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CAPTURE_MAGIC {
        return Err(IoError::new(ErrorKind::InvalidData, "bad capture magic"));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    r.read_exact(&mut b4)?;
    let n_ant = u32::from_le_bytes(b4) as usize;
    r.read_exact(&mut b8)?;
    let n_samples = u64::from_le_bytes(b8) as usize;
    r.read_exact(&mut b8)?;
    let fs = f64::from_le_bytes(b8);
    let mut data = Vec::with_capacity(n_ant * n_samples);
    for _ in 0..n_ant * n_samples {
        r.read_exact(&mut b8)?;
        let re = f64::from_le_bytes(b8);
        r.read_exact(&mut b8)?;
        let im = f64::from_le_bytes(b8);
        data.push(C64::new(re, im));
    }
    let samples = ComplexMatrix::from_row_major(n_ant, n_samples, data).map_err(|e| IoError::new(ErrorKind::InvalidData, e.to_string()))?;
    Ok(RxCapture {
        samples,
        sample_rate_hz: fs,
    })
}

pub fn save_capture(path: &Path, capture: &RxCapture) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_capture(std::io::BufWriter::new(f), capture).map_err(|e| Error::io(path, e))
}

pub fn load_capture(path: &Path) -> Result<RxCapture> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_capture(std::io::BufReader::new(f)).map_err(|e| Error::io(path, e))
}
