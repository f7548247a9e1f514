//! Beam training: phase-quantized DFT codebooks, assisted search spaces,
//! exhaustive selection over a search space, SINR, training overhead and the
//! resulting effective rates.

use std::f64::consts::PI;

use crate::channel::{steering_vector, UlaConfig};
use crate::error::{Error, Result};
use crate::features::reconstruct_toeplitz;
use crate::neural::Feature;
use crate::numerics::{dft_matrix, inner, ComplexMatrix, C64};

pub const BOLTZMANN_DBM_PER_HZ: f64 = -174.0;
pub const DEFAULT_R_MIN_BPS: f64 = 100e6;

/// Unit-norm beams with entries `e^{jζ}/√N`, `ζ` on a `2^n_bits` grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    pub beams: Vec<Vec<C64>>,
    pub n_bits: u32,
}

impl Codebook {
    pub fn len(&self) -> usize {
        self.beams.len()
    }

    pub fn is_empty(&self) -> bool {
        self.beams.is_empty()
    }

    pub fn n_elements(&self) -> usize {
        self.beams.first().map_or(0, Vec::len)
    }

    /// Unquantized pointing angle of beam `i`, `arcsin((2i+1−N)/N)`.
    pub fn angle(&self, i: usize) -> f64 {
        beam_angle(i, self.len())
    }
}

fn beam_angle(i: usize, n: usize) -> f64 {
    ((2.0 * i as f64 + 1.0 - n as f64) / n as f64).asin()
}

/// Half-wavelength codebook of `n` beams, each steered to
/// `arcsin((2i−n−1)/n)` (1-based `i`) and phase-quantized to `n_bits`.
pub fn build_codebook(n: usize, n_bits: u32) -> Result<Codebook> {
    if n == 0 || n_bits == 0 || n_bits > 16 {
        return Err(Error::invalid(format!("codebook needs n >= 1 and 1 <= n_bits <= 16, got {n}, {n_bits}")));
    }
    let levels = 1usize << n_bits;
    let step = 2.0 * PI / levels as f64;
    let amp = 1.0 / (n as f64).sqrt();
    let array = UlaConfig::half_wavelength(n);
    let beams = (0..n)
        .map(|i| {
            steering_vector(&array, beam_angle(i, n))
                .into_iter()
                .map(|a| {
                    let q = (a.arg() / step).round().rem_euclid(levels as f64) as usize;
                    C64::from_polar(amp, q as f64 * step)
                })
                .collect()
        })
        .collect();
    Ok(Codebook { beams, n_bits })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ProtocolVariant {
    Exhaustive,
    Narrow,
    Wide,
}

impl ProtocolVariant {
    pub const ALL: [ProtocolVariant; 3] = [ProtocolVariant::Exhaustive, ProtocolVariant::Narrow, ProtocolVariant::Wide];

    pub fn name(self) -> &'static str {
        match self {
            ProtocolVariant::Exhaustive => "exhaustive",
            ProtocolVariant::Narrow => "narrow",
            ProtocolVariant::Wide => "wide",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown protocol `{s}` (expected exhaustive, narrow or wide)")))
    }
}

/// SS/CSI-RS layout of the downlink beam-management frame.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProtocolConfig {
    pub ss_block_symbols: usize,
    pub ss_subcarrier_fraction: f64,
    pub csirs_block_symbols: usize,
    pub csirs_subcarrier_fraction: f64,
    pub csirs_blocks_per_coherence: usize,
    pub beams_per_block: usize,
    /// UE-side beams searched per RSU beam.
    pub ue_beams: usize,
    pub search_exhaustive: usize,
    pub search_narrow: usize,
    pub search_wide: usize,
    /// Denominator of the effective training time. `1` counts every SS block
    /// symbol once; `beams_per_block` applies the extra per-beam division.
    pub training_divisor: f64,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        Self {
            ss_block_symbols: 4,
            ss_subcarrier_fraction: 1.0,
            csirs_block_symbols: 1,
            csirs_subcarrier_fraction: 0.25,
            csirs_blocks_per_coherence: 4,
            beams_per_block: 4,
            ue_beams: 16,
            search_exhaustive: 64,
            search_narrow: 4,
            search_wide: 12,
            training_divisor: 1.0,
        }
    }
}

impl ProtocolConfig {
    pub fn search_size(&self, v: ProtocolVariant) -> usize {
        match v {
            ProtocolVariant::Exhaustive => self.search_exhaustive,
            ProtocolVariant::Narrow => self.search_narrow,
            ProtocolVariant::Wide => self.search_wide,
        }
    }

    /// `search_size · N_V / beams_per_block`
    pub fn ss_blocks(&self, v: ProtocolVariant) -> usize {
        (self.search_size(v) * self.ue_beams).div_ceil(self.beams_per_block)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: &str| Err(Error::Config { key: k.into(), message: m.into() });
        if self.beams_per_block == 0 {
            return bad("beams_per_block", "must be >= 1");
        }
        if self.ue_beams == 0 {
            return bad("ue_beams", "must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.csirs_subcarrier_fraction) || !(0.0..=1.0).contains(&self.ss_subcarrier_fraction) {
            return bad("subcarrier_fraction", "must lie in [0, 1]");
        }
        if self.search_narrow == 0 || self.search_narrow > self.search_wide || self.search_wide > self.search_exhaustive {
            return bad("search_sizes", "need 1 <= narrow <= wide <= exhaustive");
        }
        if !(self.training_divisor > 0.0) {
            return bad("training_divisor", "must be > 0");
        }
        Ok(())
    }
}

/// OFDM symbol with a cyclic prefix of `cp_samples` at rate `K·Δf`.
pub fn symbol_duration(k_subcarriers: usize, spacing_hz: f64, cp_samples: usize) -> f64 {
    (k_subcarriers + cp_samples) as f64 / (k_subcarriers as f64 * spacing_hz)
}

/// `T_sym (N_SS·N_sym,SS·frac_SS + ν·N_CSI·N_sym,CSI) / divisor`, with
/// `N_CSI = blocks_per_coherence × tracked users`.
pub fn training_time(proto: &ProtocolConfig, variant: ProtocolVariant, symbol_s: f64, n_tracked: usize) -> f64 {
    let ss = (proto.ss_blocks(variant) * proto.ss_block_symbols) as f64 * proto.ss_subcarrier_fraction;
    let n_csi = (proto.csirs_blocks_per_coherence * n_tracked) as f64;
    let csi = proto.csirs_subcarrier_fraction * n_csi * proto.csirs_block_symbols as f64;
    symbol_s * (ss + csi) / proto.training_divisor
}

/// `max(0, 1 − T_train/T_coh)·B_sc·s`
pub fn effective_rate(spectral_eff: f64, t_train: f64, t_coh: f64, spacing_hz: f64) -> f64 {
    if !(t_coh > 0.0) || t_train >= t_coh {
        return 0.0;
    }
    (1.0 - t_train / t_coh) * spacing_hz * spectral_eff
}

/// Fraction of rates strictly below `r_min_bps`.
pub fn outage(rates: &[f64], r_min_bps: f64) -> Result<f64> {
    if rates.is_empty() {
        return Err(Error::invalid("outage needs at least one rate"));
    }
    Ok(rates.iter().filter(|&&r| r < r_min_bps).count() as f64 / rates.len() as f64)
}

/// Thermal noise `N₀ + NF + 10log10(B)` in dBm.
pub fn noise_power_dbm(n0_dbm_per_hz: f64, noise_figure_db: f64, bandwidth_hz: f64) -> f64 {
    n0_dbm_per_hz + noise_figure_db + 10.0 * bandwidth_hz.log10()
}

/// Total power split evenly over `k` subcarriers, in dBm.
pub fn per_subcarrier_power_dbm(total_dbm: f64, k: usize) -> f64 {
    total_dbm - 10.0 * (k as f64).log10()
}

pub fn dbm_to_w(dbm: f64) -> f64 {
    10f64.powf((dbm - 30.0) / 10.0)
}

/// Indices of the `k` largest scores; ties go to the lower index.
fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx.sort_unstable();
    idx
}

/// Per-beam score implied by a predicted feature.
///
/// The APS is read as the covariance `F diag(p) F*` and scored like the
/// matrix variants, which maps DFT bins onto the offset codebook grid.
pub fn beam_scores(predicted: &Feature, codebook: &Codebook) -> Result<Vec<f64>> {
    let n = codebook.n_elements();
    let check = |len: usize| {
        if len != n {
            Err(Error::DimensionMismatch { expected: n, got: len })
        } else {
            Ok(())
        }
    };
    Ok(match predicted {
        Feature::Aps(aps) => {
            check(aps.len())?;
            let f = dft_matrix(n);
            codebook
                .beams
                .iter()
                .map(|b| {
                    aps.bins
                        .iter()
                        .enumerate()
                        .map(|(j, p)| p * inner(&f.column(j), b).norm_sqr())
                        .sum()
                })
                .collect()
        }
        Feature::Eigvec(v) => {
            check(v.len())?;
            codebook.beams.iter().map(|b| inner(b, v).norm_sqr()).collect()
        }
        Feature::CovVec(r) => {
            check(r.len())?;
            let rt = reconstruct_toeplitz(r);
            codebook.beams.iter().map(|b| rt.matrix().quadratic_form(b).re).collect()
        }
    })
}

/// The `k` codebook beams ranked highest by the prediction, in ascending
/// index order.
pub fn assisted_search_space(predicted: &Feature, codebook: &Codebook, k: usize) -> Result<Vec<usize>> {
    if k == 0 || k > codebook.len() {
        return Err(Error::invalid(format!("search size {k} outside [1, {}]", codebook.len())));
    }
    Ok(top_k(&beam_scores(predicted, codebook)?, k))
}

/// Per-subcarrier gains `|w_j* H[k] f_i|²` for every RSU beam `i` and UE
/// beam `j`, indexed `[k][i * n_ue + j]`.
pub fn beam_gain_table(channels: &[ComplexMatrix], rsu: &Codebook, ue: &Codebook) -> Result<Vec<Vec<f64>>> {
    let f = ComplexMatrix::from_fn(rsu.n_elements(), rsu.len(), |r, i| rsu.beams[i][r]);
    let w_h = ComplexMatrix::from_fn(ue.len(), ue.n_elements(), |j, r| ue.beams[j][r].conj());
    channels
        .iter()
        .map(|h| {
            if h.rows() != ue.n_elements() || h.cols() != rsu.n_elements() {
                return Err(Error::DimensionMismatch {
                    expected: ue.n_elements() * rsu.n_elements(),
                    got: h.rows() * h.cols(),
                });
            }
            let g = w_h.matmul(&h.matmul(&f));
            let mut out = vec![0.0; rsu.len() * ue.len()];
            for i in 0..rsu.len() {
                for j in 0..ue.len() {
                    out[i * ue.len() + j] = g[(j, i)].norm_sqr();
                }
            }
            Ok(out)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BeamPair {
    pub rsu: usize,
    pub ue: usize,
    pub score: f64,
}

/// Best pair over `rsu_space × ue_space` by `Σ_k log2(1 + snr_scale·|w*H[k]f|²)`.
/// Ties go to the lowest `(rsu, ue)`.
pub fn beam_select_from_table(table: &[Vec<f64>], n_ue: usize, rsu_space: &[usize], ue_space: &[usize], snr_scale: f64) -> Result<BeamPair> {
    if rsu_space.is_empty() || ue_space.is_empty() {
        return Err(Error::invalid("beam search spaces must be nonempty"));
    }
    let mut best: Option<BeamPair> = None;
    for &i in rsu_space {
        for &j in ue_space {
            let score: f64 = table.iter().map(|g| (snr_scale * g[i * n_ue + j]).ln_1p()).sum::<f64>() / std::f64::consts::LN_2;
            let better = match best {
                None => true,
                Some(b) => score > b.score || (score == b.score && (i, j) < (b.rsu, b.ue)),
            };
            if better {
                best = Some(BeamPair { rsu: i, ue: j, score });
            }
        }
    }
    Ok(best.expect("spaces are nonempty"))
}

pub fn beam_select(
    channels: &[ComplexMatrix],
    rsu: &Codebook,
    ue: &Codebook,
    rsu_space: &[usize],
    ue_space: &[usize],
    snr_scale: f64,
) -> Result<BeamPair> {
    if rsu_space.iter().any(|&i| i >= rsu.len()) || ue_space.iter().any(|&j| j >= ue.len()) {
        return Err(Error::OutOfRange("beam index outside the codebook".into()));
    }
    beam_select_from_table(&beam_gain_table(channels, rsu, ue)?, ue.len(), rsu_space, ue_space, snr_scale)
}

/// `SINR_i[k] = P_sig P_t / (P_int P_t + P_n)` with
/// `P_sig = |w_i* H_i[k] f_i|²` and `P_int = Σ_{l≠i} |w_i* H_i[k] f_l|²`.
///
/// `channels[i][k]` is user `i`'s channel on the `k`-th evaluated subcarrier.
/// Users whose selection is `None` carry no stream: they neither interfere
/// nor receive.
pub fn sinr(
    selections: &[Option<(usize, usize)>],
    channels: &[Vec<ComplexMatrix>],
    rsu: &Codebook,
    ue: &Codebook,
    p_t_w: f64,
    p_n_w: f64,
) -> Result<Vec<Vec<f64>>> {
    if selections.len() != channels.len() {
        return Err(Error::DimensionMismatch {
            expected: selections.len(),
            got: channels.len(),
        });
    }
    let mut out = Vec::with_capacity(channels.len());
    for (i, sel) in selections.iter().enumerate() {
        let Some((_, ue_i)) = *sel else {
            out.push(vec![0.0; channels[i].len()]);
            continue;
        };
        let w = &ue.beams[ue_i];
        let mut s = Vec::with_capacity(channels[i].len());
        for h in &channels[i] {
            let wh: Vec<C64> = (0..h.cols()).map(|c| (0..h.rows()).map(|r| w[r].conj() * h[(r, c)]).sum()).collect();
            let gain = |l: usize| -> f64 {
                let (f_l, _) = selections[l].expect("checked by caller");
                wh.iter().zip(&rsu.beams[f_l]).map(|(a, b)| a * b).sum::<C64>().norm_sqr()
            };
            let p_sig = gain(i);
            let p_int: f64 = (0..selections.len()).filter(|&l| l != i && selections[l].is_some()).map(gain).sum();
            s.push(p_sig * p_t_w / (p_int * p_t_w + p_n_w));
        }
        out.push(s);
    }
    Ok(out)
}

/// `Σ_k log2(1 + SINR[k])`, each evaluated subcarrier standing for
/// `stride` physical ones.
pub fn spectral_efficiency(sinr: &[f64], stride: usize) -> f64 {
    stride as f64 * sinr.iter().map(|s| s.log2_1p()).sum::<f64>()
}

trait Log2p1 {
    fn log2_1p(self) -> f64;
}

impl Log2p1 for f64 {
    fn log2_1p(self) -> f64 {
        self.ln_1p() / std::f64::consts::LN_2
    }
}
