//! The FMCW mixing filter bank.
//!
//! Each block dechirps the capture with a reference chirp, correlates over
//! every lag of one chirp period, runs a max-CFAR detector on the
//! antenna-max lag power and isolates a spatial covariance for each hit.
//!
//! Block chirp periods are whole numbers of samples (`L`), so the reference
//! is exactly periodic on the sample grid. The per-lag correction is then the
//! exact ratio between the lag-delayed reference and the undelayed one, and
//! the correlator reduces to a circular cross-correlation of the capture
//! folded modulo `L`.

use std::f64::consts::PI;
use std::io::Write;

use rayon::prelude::*;

use crate::channel::SpatialCovariance;
use crate::error::{Error, Result};
use crate::fmcw::RxCapture;
use crate::numerics::{db, design_lowpass, fft_plan, filter_rows, ComplexMatrix, C64};

pub const DEFAULT_BANK_BLOCKS: usize = 51;
pub const DEFAULT_ISOLATION_TAPS: usize = 8191;
pub const DEFAULT_ISOLATION_BANDWIDTH_HZ: f64 = 0.2e6;
pub const DEFAULT_COVARIANCE_STRIDE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixingBlockConfig {
    pub chirp_rate_hz_per_s: f64,
    pub chirp_period_s: f64,
    pub bandwidth_hz: f64,
}

impl MixingBlockConfig {
    pub fn new(chirp_rate_hz_per_s: f64, bandwidth_hz: f64) -> Result<Self> {
        if !(chirp_rate_hz_per_s > 0.0 && bandwidth_hz > 0.0) {
            return Err(Error::invalid("block chirp rate and bandwidth must be positive"));
        }
        Ok(Self {
            chirp_rate_hz_per_s,
            chirp_period_s: bandwidth_hz / chirp_rate_hz_per_s,
            bandwidth_hz,
        })
    }

    /// Block whose period is exactly `period_samples` samples.
    pub fn with_period_samples(period_samples: usize, bandwidth_hz: f64, sample_rate_hz: f64) -> Result<Self> {
        if period_samples == 0 {
            return Err(Error::invalid("block period must be at least one sample"));
        }
        Self::new(bandwidth_hz * sample_rate_hz / period_samples as f64, bandwidth_hz)
    }

    /// Samples per chirp period, `L`.
    pub fn period_samples(&self, sample_rate_hz: f64) -> usize {
        (self.chirp_period_s * sample_rate_hz).round().max(1.0) as usize
    }

    /// One period of the sampled conjugate reference chirp `s_ref(iT_r)`.
    pub fn reference(&self, sample_rate_hz: f64) -> Vec<C64> {
        let l = self.period_samples(sample_rate_hz);
        let k = self.chirp_rate_hz_per_s / (sample_rate_hz * sample_rate_hz);
        (0..l)
            .map(|m| {
                let m = m as f64;
                // Reduce cycles before scaling by 2π to keep the phase exact.
                let cycles = (0.5 * k * m * m).fract();
                C64::from_polar(1.0, -2.0 * PI * cycles)
            })
            .collect()
    }
}

fn is_13_smooth(mut n: usize) -> bool {
    for p in [2, 3, 5, 7, 11, 13] {
        while n.is_multiple_of(p) {
            n /= p;
        }
    }
    n == 1
}

/// Nearest 13-smooth sample count within 0.5% of `ideal`, else the rounded
/// value. Smooth lengths keep the per-block FFTs on fast kernels.
fn fft_friendly_period(ideal: f64) -> usize {
    let base = ideal.round().max(1.0) as usize;
    let reach = (ideal * 0.005) as usize;
    let mut best: Option<usize> = None;
    for n in base.saturating_sub(reach).max(1)..=base + reach {
        let closer = best.is_none_or(|b| (n as f64 - ideal).abs() < (b as f64 - ideal).abs());
        if is_13_smooth(n) && closer {
            best = Some(n);
        }
    }
    best.unwrap_or(base)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BankConfig {
    pub blocks: Vec<MixingBlockConfig>,
}

impl BankConfig {
    pub fn new(blocks: Vec<MixingBlockConfig>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::invalid("bank needs at least one block"));
        }
        if blocks.windows(2).any(|w| w[1].chirp_rate_hz_per_s <= w[0].chirp_rate_hz_per_s) {
            return Err(Error::invalid("bank chirp rates must be strictly increasing"));
        }
        Ok(Self { blocks })
    }

    /// `n` blocks uniformly spaced over `[min_rate, max_rate]`, each snapped
    /// to a nearby rate whose period is a whole, FFT-friendly number of samples.
    pub fn uniform(n: usize, min_rate: f64, max_rate: f64, bandwidth_hz: f64, sample_rate_hz: f64) -> Result<Self> {
        if n == 0 || !(min_rate > 0.0) || !(max_rate >= min_rate) || (n > 1 && max_rate == min_rate) {
            return Err(Error::invalid("uniform bank needs n >= 1 and 0 < min_rate < max_rate"));
        }
        let blocks = (0..n)
            .map(|i| {
                let rate = if n == 1 {
                    min_rate
                } else {
                    min_rate + (max_rate - min_rate) * i as f64 / (n - 1) as f64
                };
                let period = fft_friendly_period(bandwidth_hz * sample_rate_hz / rate);
                MixingBlockConfig::with_period_samples(period, bandwidth_hz, sample_rate_hz)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(blocks)
    }

    /// 51 blocks over 1–6 MHz/µs with a 100 MHz chirp sampled at 250 MHz.
    pub fn desk_default() -> Self {
        Self::uniform(DEFAULT_BANK_BLOCKS, 1e12, 6e12, 100e6, 250e6).expect("static bank is valid")
    }

    pub fn len(&self) -> usize {
        self.blocks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.blocks.is_empty()
    }

    /// Index of the block with the nearest chirp rate.
    pub fn nearest_block(&self, rate: f64) -> usize {
        let mut best = 0;
        for (i, b) in self.blocks.iter().enumerate() {
            if (b.chirp_rate_hz_per_s - rate).abs() < (self.blocks[best].chirp_rate_hz_per_s - rate).abs() {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorrelatorOutput {
    pub c: ComplexMatrix,
    pub lag_interval_s: f64,
}

impl CorrelatorOutput {
    pub fn n_lags(&self) -> usize {
        self.c.cols()
    }

    /// `max_n |C[n,l]|²` for every lag.
    pub fn antenna_max_power(&self) -> Vec<f64> {
        let mut p = vec![0.0f64; self.n_lags()];
        for n in 0..self.c.rows() {
            for (pl, c) in p.iter_mut().zip(self.c.row(n)) {
                *pl = pl.max(c.norm_sqr());
            }
        }
        p
    }

    /// `mean_n |C[n,l]|²` for every lag.
    pub fn antenna_mean_power(&self) -> Vec<f64> {
        let mut p = vec![0.0f64; self.n_lags()];
        for n in 0..self.c.rows() {
            for (pl, c) in p.iter_mut().zip(self.c.row(n)) {
                *pl += c.norm_sqr();
            }
        }
        let inv = 1.0 / self.c.rows().max(1) as f64;
        p.iter_mut().for_each(|x| *x *= inv);
        p
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CfarConfig {
    pub n_guard: usize,
    pub n_floor: usize,
    pub threshold_factor: f64,
}

impl CfarConfig {
    pub fn new(n_guard: usize, n_floor: usize, threshold_factor: f64) -> Result<Self> {
        if n_guard < 1 || n_floor < 1 {
            return Err(Error::invalid("CFAR needs at least one guard and one floor cell"));
        }
        if !(threshold_factor > 1.0) {
            return Err(Error::invalid("CFAR threshold factor must exceed 1"));
        }
        Ok(Self {
            n_guard,
            n_floor,
            threshold_factor,
        })
    }

    /// Guard covers the multipath spread plus 4 lags; floor is twice the guard.
    pub fn for_spread(max_multipath_spread_s: f64, sample_rate_hz: f64) -> Self {
        let n_guard = (max_multipath_spread_s * sample_rate_hz).ceil().max(0.0) as usize + 4;
        Self {
            n_guard,
            n_floor: 2 * n_guard,
            threshold_factor: 10.0,
        }
    }
}

/// Lowpass applied to a lag-corrected block output before covariance estimation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LowpassConfig {
    pub bandwidth_hz: f64,
    pub n_taps: usize,
    /// The covariance uses every `covariance_stride`-th filtered sample. The
    /// filtered signal is heavily oversampled, so striding loses little.
    pub covariance_stride: usize,
}

impl LowpassConfig {
    pub fn new(bandwidth_hz: f64, n_taps: usize) -> Self {
        Self {
            bandwidth_hz,
            n_taps,
            covariance_stride: 1,
        }
    }

    pub fn with_stride(self, covariance_stride: usize) -> Self {
        Self {
            covariance_stride: covariance_stride.max(1),
            ..self
        }
    }
}

impl Default for LowpassConfig {
    fn default() -> Self {
        Self::new(DEFAULT_ISOLATION_BANDWIDTH_HZ, DEFAULT_ISOLATION_TAPS).with_stride(DEFAULT_COVARIANCE_STRIDE)
    }
}

/// CFAR hit on one lag.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CfarHit {
    pub lag: usize,
    pub cut_power: f64,
    pub guard_power: f64,
    pub floor_power: f64,
}

/// Bank hit before covariance isolation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BankHit {
    pub block_index: usize,
    pub lag_index: usize,
    pub peak_power_w: f64,
    pub floor_power_w: f64,
    /// Median antenna-mean lag power of the block divided by the sample
    /// count: a per-sample noise-plus-interference estimate.
    pub noise_floor_w: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub block_index: usize,
    pub lag_index: usize,
    pub peak_power_w: f64,
    pub floor_power_w: f64,
    /// Noise power on the diagonal of `isolated_covariance`, estimated from
    /// the correlator floor and the lowpass noise gain.
    pub noise_power_w: f64,
    pub isolated_covariance: SpatialCovariance,
}

/// `Y_mix = Y ⊙ s_ref`, row by row.
pub fn mix(capture: &RxCapture, block: &MixingBlockConfig) -> ComplexMatrix {
    let r = block.reference(capture.sample_rate_hz);
    let l = r.len();
    let mut out = capture.samples.clone();
    for n in 0..out.rows() {
        for (i, x) in out.row_mut(n).iter_mut().enumerate() {
            *x *= r[i % l];
        }
    }
    out
}

/// Lag-correction row `[S_corr]_{l,·}`: `s_ref((i − l)T_r) / s_ref(iT_r)`.
pub fn correction(block: &MixingBlockConfig, sample_rate_hz: f64, lag: usize, n_samples: usize) -> Vec<C64> {
    let r = block.reference(sample_rate_hz);
    let l = r.len();
    let lag = lag % l;
    (0..n_samples)
        .map(|i| {
            let m = i % l;
            r[(m + l - lag) % l] * r[m].conj()
        })
        .collect()
}

/// Correlator output for every lag of one block period.
///
/// Evaluated as a circular cross-correlation of the folded capture with the
/// reference, which equals the per-lag multiply-accumulate of
/// [`correlate_direct`].
pub fn correlate(mixed: &ComplexMatrix, block: &MixingBlockConfig, sample_rate_hz: f64) -> Result<CorrelatorOutput> {
    let r = block.reference(sample_rate_hz);
    let mut raw = mixed.clone();
    for n in 0..raw.rows() {
        for (i, x) in raw.row_mut(n).iter_mut().enumerate() {
            *x *= r[i % r.len()].conj();
        }
    }
    correlate_raw(&raw, block, sample_rate_hz)
}

/// Correlator on the unmixed capture; `correlate(mix(y)) == correlate_raw(y)`.
fn correlate_raw(y: &ComplexMatrix, block: &MixingBlockConfig, sample_rate_hz: f64) -> Result<CorrelatorOutput> {
    let r = block.reference(sample_rate_hz);
    let l = r.len();
    if y.cols() < l {
        return Err(Error::invalid(format!(
            "capture of {} samples shorter than the {l}-sample block period",
            y.cols()
        )));
    }
    let fwd = fft_plan(l, false);
    let inv = fft_plan(l, true);
    // C[l] = Σ_m F[m] r[m − l] = (F ⋆ h)[l] with h[j] = r[−j].
    let mut h: Vec<C64> = (0..l).map(|j| r[(l - j) % l]).collect();
    fwd.process(&mut h);
    let scale = 1.0 / l as f64;

    let mut c = ComplexMatrix::zeros(y.rows(), l);
    let mut buf = vec![C64::new(0.0, 0.0); l];
    for n in 0..y.rows() {
        buf.fill(C64::new(0.0, 0.0));
        for chunk in y.row(n).chunks(l) {
            for (b, x) in buf.iter_mut().zip(chunk) {
                *b += x;
            }
        }
        fwd.process(&mut buf);
        for (b, hk) in buf.iter_mut().zip(&h) {
            *b *= hk * scale;
        }
        inv.process(&mut buf);
        c.row_mut(n).copy_from_slice(&buf);
    }
    Ok(CorrelatorOutput {
        c,
        lag_interval_s: 1.0 / sample_rate_hz,
    })
}

/// Reference correlator: explicit multiply-accumulate against `S_corr` for
/// every lag. `O(N·L·I)`, meant for checking [`correlate`].
pub fn correlate_direct(mixed: &ComplexMatrix, block: &MixingBlockConfig, sample_rate_hz: f64) -> CorrelatorOutput {
    let l = block.period_samples(sample_rate_hz);
    let mut c = ComplexMatrix::zeros(mixed.rows(), l);
    for lag in 0..l {
        let s = correction(block, sample_rate_hz, lag, mixed.cols());
        for n in 0..mixed.rows() {
            c[(n, lag)] = mixed.row(n).iter().zip(&s).map(|(a, b)| a * b).sum();
        }
    }
    CorrelatorOutput {
        c,
        lag_interval_s: 1.0 / sample_rate_hz,
    }
}

/// Max-CFAR over antenna-max lag power.
pub fn cfar_detect(c: &CorrelatorOutput, cfg: &CfarConfig) -> Result<Vec<usize>> {
    Ok(cfar_detect_power(&c.antenna_max_power(), cfg)?.into_iter().map(|h| h.lag).collect())
}

/// Max-CFAR on a precomputed lag power profile.
///
/// Guard ring: offsets `1..=n_guard` either side. Floor ring: the next
/// `n_floor` offsets beyond the guard. Indices wrap modulo `L`.
pub fn cfar_detect_power(power: &[f64], cfg: &CfarConfig) -> Result<Vec<CfarHit>> {
    let l = power.len();
    let span = cfg.n_guard + cfg.n_floor;
    if l <= 2 * span {
        return Err(Error::invalid(format!(
            "{l} lags too few for guard {} and floor {}",
            cfg.n_guard, cfg.n_floor
        )));
    }
    let at = |i: isize| power[i.rem_euclid(l as isize) as usize];
    let mut hits = Vec::new();
    'lag: for (lag, &cut) in power.iter().enumerate() {
        let li = lag as isize;
        let mut guard = 0.0f64;
        for d in 1..=cfg.n_guard as isize {
            let g = at(li - d).max(at(li + d));
            if g >= cut {
                continue 'lag;
            }
            guard = guard.max(g);
        }
        let mut floor = 0.0f64;
        for d in (cfg.n_guard + 1) as isize..=span as isize {
            floor = floor.max(at(li - d)).max(at(li + d));
            if cut <= cfg.threshold_factor * floor {
                continue 'lag;
            }
        }
        hits.push(CfarHit {
            lag,
            cut_power: cut,
            guard_power: guard,
            floor_power: floor,
        });
    }
    Ok(hits)
}

fn lowpass_taps(lowpass: &LowpassConfig, sample_rate_hz: f64) -> Result<Vec<f64>> {
    design_lowpass(lowpass.n_taps, lowpass.bandwidth_hz, sample_rate_hz)
}

/// Lag-corrected, lowpassed block output `Ŷ_l`.
pub fn isolate_signal(
    mixed: &ComplexMatrix,
    lag: usize,
    block: &MixingBlockConfig,
    sample_rate_hz: f64,
    lowpass: &LowpassConfig,
) -> Result<ComplexMatrix> {
    let taps = lowpass_taps(lowpass, sample_rate_hz)?;
    Ok(isolate_with_taps(mixed, lag, block, sample_rate_hz, &taps))
}

fn isolate_with_taps(mixed: &ComplexMatrix, lag: usize, block: &MixingBlockConfig, sample_rate_hz: f64, taps: &[f64]) -> ComplexMatrix {
    let s = correction(block, sample_rate_hz, lag, mixed.cols());
    let mut y = mixed.clone();
    for n in 0..y.rows() {
        for (x, si) in y.row_mut(n).iter_mut().zip(&s) {
            *x *= si;
        }
    }
    filter_rows(&y, taps)
}

/// `R̂_l = (1/I) Ŷ_l Ŷ_l*` over the strided samples of the filtered output.
pub fn isolate_covariance(
    mixed: &ComplexMatrix,
    lag: usize,
    block: &MixingBlockConfig,
    sample_rate_hz: f64,
    lowpass: &LowpassConfig,
) -> Result<SpatialCovariance> {
    let y = isolate_signal(mixed, lag, block, sample_rate_hz, lowpass)?;
    Ok(SpatialCovariance::from_hermitian(y.sample_covariance_strided(lowpass.covariance_stride)))
}

/// Correlator output of one bank block applied to a capture.
pub fn block_output(capture: &RxCapture, block: &MixingBlockConfig) -> Result<CorrelatorOutput> {
    correlate_raw(&capture.samples, block, capture.sample_rate_hz)
}

fn median(mut v: Vec<f64>) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn scan_block(capture: &RxCapture, bank: &BankConfig, b: usize, cfar: &CfarConfig) -> Result<Vec<BankHit>> {
    let out = block_output(capture, &bank.blocks[b])?;
    let power = out.antenna_max_power();
    let hits = cfar_detect_power(&power, cfar)?;
    if hits.is_empty() {
        return Ok(Vec::new());
    }
    let noise_floor_w = median(out.antenna_mean_power()) / capture.n_samples() as f64;
    Ok(hits
        .into_iter()
        .map(|h| BankHit {
            block_index: b,
            lag_index: h.lag,
            peak_power_w: h.cut_power,
            floor_power_w: h.floor_power,
            noise_floor_w,
        })
        .collect())
}

/// Detection pass over the listed blocks (all blocks when `None`), followed
/// by the adjacent-block merge. No covariances are formed.
pub fn scan_bank(capture: &RxCapture, bank: &BankConfig, cfar: &CfarConfig, blocks: Option<&[usize]>) -> Result<Vec<BankHit>> {
    let all: Vec<usize>;
    let idx = match blocks {
        Some(b) => b,
        None => {
            all = (0..bank.len()).collect();
            &all
        }
    };
    if let Some(&b) = idx.iter().find(|&&b| b >= bank.len()) {
        return Err(Error::OutOfRange(format!("block {b} of a {}-block bank", bank.len())));
    }
    let per_block: Vec<Vec<BankHit>> = idx
        .par_iter()
        .map(|&b| scan_block(capture, bank, b, cfar))
        .collect::<Result<_>>()?;
    let mut hits: Vec<BankHit> = per_block.into_iter().flatten().collect();
    hits.sort_by_key(|h| (h.block_index, h.lag_index));
    hits.dedup_by_key(|h| (h.block_index, h.lag_index));
    Ok(merge_adjacent(hits, cfar.n_guard))
}

/// Drops a hit when a neighbouring block has a stronger hit within `window`
/// lags. Equal peaks keep the lower block.
fn merge_adjacent(hits: Vec<BankHit>, window: usize) -> Vec<BankHit> {
    let beaten = |h: &BankHit, o: &BankHit| {
        o.block_index.abs_diff(h.block_index) == 1
            && o.lag_index.abs_diff(h.lag_index) <= window
            && (o.peak_power_w > h.peak_power_w || (o.peak_power_w == h.peak_power_w && o.block_index < h.block_index))
    };
    hits.iter()
        .filter(|h| !hits.iter().any(|o| beaten(h, o)))
        .copied()
        .collect()
}

/// Forms the isolated covariance of one bank hit.
pub fn isolate_hit(capture: &RxCapture, bank: &BankConfig, hit: &BankHit, lowpass: &LowpassConfig) -> Result<Detection> {
    let taps = lowpass_taps(lowpass, capture.sample_rate_hz)?;
    isolate_hit_with_taps(capture, bank, hit, &taps, lowpass.covariance_stride)
}

fn isolate_hit_with_taps(capture: &RxCapture, bank: &BankConfig, hit: &BankHit, taps: &[f64], stride: usize) -> Result<Detection> {
    let block = bank
        .blocks
        .get(hit.block_index)
        .ok_or_else(|| Error::OutOfRange(format!("block {}", hit.block_index)))?;
    let fs = capture.sample_rate_hz;
    let mixed = mix(capture, block);
    let y = isolate_with_taps(&mixed, hit.lag_index, block, fs, taps);
    let noise_gain: f64 = taps.iter().map(|t| t * t).sum();
    Ok(Detection {
        block_index: hit.block_index,
        lag_index: hit.lag_index,
        peak_power_w: hit.peak_power_w,
        floor_power_w: hit.floor_power_w,
        noise_power_w: hit.noise_floor_w * noise_gain,
        isolated_covariance: SpatialCovariance::from_hermitian(y.sample_covariance_strided(stride)),
    })
}

/// Full bank: mix, correlate, detect, merge, then isolate every surviving hit.
pub fn run_bank(capture: &RxCapture, bank: &BankConfig, cfar: &CfarConfig, lowpass: &LowpassConfig) -> Result<Vec<Detection>> {
    let taps = lowpass_taps(lowpass, capture.sample_rate_hz)?;
    scan_bank(capture, bank, cfar, None)?
        .par_iter()
        .map(|h| isolate_hit_with_taps(capture, bank, h, &taps, lowpass.covariance_stride))
        .collect()
}

/// Writes `block,lag,power_db` rows of the antenna-max `|C|²`.
pub fn write_lag_power_csv<W: Write>(w: W, rows: &[(usize, Vec<f64>)]) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    let to_err = |e: csv::Error| Error::invalid(format!("csv write failed: {e}"));
    wr.write_record(["block", "lag", "power_db"]).map_err(to_err)?;
    for (block, power) in rows {
        for (lag, p) in power.iter().enumerate() {
            wr.write_record([block.to_string(), lag.to_string(), format!("{:.4}", db(*p))])
                .map_err(to_err)?;
        }
    }
    wr.flush().map_err(|e| Error::invalid(format!("csv flush failed: {e}")))?;
    Ok(())
}
