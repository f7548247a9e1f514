//! Scene generation and the Monte Carlo link-configuration campaign.
//!
//! Geometry is a top view of a four-lane road with heights used only for
//! blockage. The RSU sits on the near roadside (`y < 0`) with its ULAs along
//! `x`, broadside `+y`. Every vehicle drives towards `+x` and exposes one
//! communication ULA on its RSU-facing side and one corner radar. Rays are
//! produced by an image-source model (line of sight plus single bounces off
//! two walls and off vehicle faces) and shared between the radar and
//! communication bands.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use rayon::prelude::*;

use crate::beam::{
    assisted_search_space, beam_gain_table, beam_select_from_table, build_codebook, dbm_to_w, effective_rate, noise_power_dbm,
    per_subcarrier_power_dbm, sinr, spectral_efficiency, symbol_duration, training_time, Codebook, ProtocolConfig,
    ProtocolVariant, BOLTZMANN_DBM_PER_HZ, DEFAULT_R_MIN_BPS,
};
use crate::channel::{channel_freq, channel_taps, comm_covariance, PathCluster, UlaConfig, WidebandChannel};
use crate::detection::{isolate_hit, scan_bank, BankConfig, BankHit, CfarConfig, Detection, LowpassConfig};
use crate::error::{Error, Result};
use crate::features::{aps_from_covariance, cov_vector, toeplitz_psd_project, Aps, CovarianceVector};
use crate::fmcw::{noise_capture, synthesize_rx, CaptureConfig, FmcwParams, RadarPath, RadarPathSet, RxCapture};
use crate::neural::{predict_variant, Feature, MlpModel, Variant};
use crate::numerics::{fix_phase, hermitian_eigen, ComplexMatrix, C64};

pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;

/// Physical and processing parameters of one scene.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneConfig {
    pub lane_speeds_kmh: Vec<f64>,
    pub lane_width_m: f64,
    pub truck_fraction: f64,
    /// Length of road, centred on the RSU, from which active cars are drawn.
    pub coverage_m: f64,
    /// Length of road populated with vehicles (blockers included).
    pub road_length_m: f64,
    pub n_active: usize,
    /// Length, width, height.
    pub car_dims_m: [f64; 3],
    pub truck_dims_m: [f64; 3],
    pub rsu_y_m: f64,
    pub rsu_height_m: f64,
    pub near_wall_y_m: f64,
    pub far_wall_y_m: f64,
    pub wall_height_m: f64,
    pub wall_reflection_db: f64,
    pub vehicle_reflection_db: f64,
    pub comm_height_m: f64,
    pub radar_height_m: f64,
    pub radar_yaw_deg: f64,
    pub comm_carrier_hz: f64,
    pub radar_carrier_hz: f64,
    /// Per-ray log-normal spread of radar gains relative to the shared ray.
    pub mismatch_sigma_db: f64,
    /// Strongest radar paths kept per vehicle.
    pub max_radar_paths: usize,
    pub n_rsu: usize,
    pub n_ue: usize,
    pub sample_rate_hz: f64,
    pub n_samples: usize,
    pub radar_bandwidth_hz: f64,
    pub n_bank_blocks: usize,
    pub min_chirp_rate_hz_per_s: f64,
    pub max_chirp_rate_hz_per_s: f64,
    pub radar_tx_power_w: f64,
    /// Per-sample receiver noise at the RSU radar array.
    pub radar_noise_w: f64,
    pub cfar_spread_s: f64,
    pub cfar_threshold: f64,
    pub lowpass_bandwidth_hz: f64,
    pub lowpass_taps: usize,
    pub covariance_stride: usize,
    pub n_subcarriers: usize,
    pub subcarrier_spacing_hz: f64,
    pub cp_samples: usize,
    pub n_channel_taps: usize,
    pub comm_tx_power_dbm: f64,
    pub noise_figure_db: f64,
    /// Every `subcarrier_stride`-th subcarrier is evaluated for rates.
    pub subcarrier_stride: usize,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            lane_speeds_kmh: vec![60.0, 50.0, 25.0, 15.0],
            lane_width_m: 3.5,
            truck_fraction: 0.2,
            coverage_m: 60.0,
            road_length_m: 200.0,
            n_active: 4,
            car_dims_m: [5.0, 2.0, 1.6],
            truck_dims_m: [13.0, 2.6, 3.0],
            rsu_y_m: -3.0,
            rsu_height_m: 5.0,
            near_wall_y_m: -6.0,
            far_wall_y_m: 20.0,
            wall_height_m: 10.0,
            wall_reflection_db: -8.0,
            vehicle_reflection_db: -3.0,
            comm_height_m: 1.6,
            radar_height_m: 0.75,
            radar_yaw_deg: 10.0,
            comm_carrier_hz: 73e9,
            radar_carrier_hz: 76e9,
            mismatch_sigma_db: 3.0,
            max_radar_paths: 6,
            n_rsu: 64,
            n_ue: 16,
            sample_rate_hz: 250e6,
            n_samples: 1 << 15,
            radar_bandwidth_hz: 100e6,
            n_bank_blocks: 51,
            min_chirp_rate_hz_per_s: 1e12,
            max_chirp_rate_hz_per_s: 6e12,
            radar_tx_power_w: 1e-2,
            radar_noise_w: 1e-11,
            cfar_spread_s: 200e-9,
            cfar_threshold: 10.0,
            lowpass_bandwidth_hz: crate::detection::DEFAULT_ISOLATION_BANDWIDTH_HZ,
            lowpass_taps: crate::detection::DEFAULT_ISOLATION_TAPS,
            covariance_stride: crate::detection::DEFAULT_COVARIANCE_STRIDE,
            n_subcarriers: 2048,
            subcarrier_spacing_hz: 240e3,
            cp_samples: 511,
            n_channel_taps: 512,
            comm_tx_power_dbm: 24.0,
            noise_figure_db: 10.0,
            subcarrier_stride: 16,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, m: String| Err(Error::Config { key: k.into(), message: m });
        let pos = |v: f64| v > 0.0 && v.is_finite();
        if self.lane_speeds_kmh.is_empty() || !self.lane_speeds_kmh.iter().all(|&s| pos(s)) {
            return bad("lane_speeds_kmh", "need at least one positive speed".into());
        }
        if !(0.0..=1.0).contains(&self.truck_fraction) {
            return bad("truck_fraction", format!("{} outside [0, 1]", self.truck_fraction));
        }
        if !pos(self.coverage_m) {
            return bad("coverage_m", "must be > 0".into());
        }
        if !(self.road_length_m >= self.coverage_m) {
            return bad("road_length_m", "must be >= coverage_m".into());
        }
        if self.n_active == 0 {
            return bad("n_active", "must be >= 1".into());
        }
        for (k, d) in [("car_dims_m", self.car_dims_m), ("truck_dims_m", self.truck_dims_m)] {
            if !d.iter().all(|&v| pos(v)) {
                return bad(k, "dimensions must be > 0".into());
            }
        }
        if !(self.rsu_y_m < 0.0 && self.near_wall_y_m < self.rsu_y_m) {
            return bad("rsu_y_m", "need near_wall_y_m < rsu_y_m < 0".into());
        }
        let road_edge = self.lane_width_m * self.lane_speeds_kmh.len() as f64;
        if !(self.far_wall_y_m > road_edge) {
            return bad("far_wall_y_m", format!("must exceed the road edge at {road_edge} m"));
        }
        for (k, v) in [
            ("lane_width_m", self.lane_width_m),
            ("rsu_height_m", self.rsu_height_m),
            ("wall_height_m", self.wall_height_m),
            ("comm_height_m", self.comm_height_m),
            ("radar_height_m", self.radar_height_m),
            ("comm_carrier_hz", self.comm_carrier_hz),
            ("radar_carrier_hz", self.radar_carrier_hz),
            ("sample_rate_hz", self.sample_rate_hz),
            ("radar_bandwidth_hz", self.radar_bandwidth_hz),
            ("subcarrier_spacing_hz", self.subcarrier_spacing_hz),
            ("radar_noise_w", self.radar_noise_w),
            ("cfar_spread_s", self.cfar_spread_s),
            ("lowpass_bandwidth_hz", self.lowpass_bandwidth_hz),
        ] {
            if !pos(v) {
                return bad(k, format!("{v} must be > 0"));
            }
        }
        if !(0.0..=45.0).contains(&self.radar_yaw_deg) {
            return bad("radar_yaw_deg", "must lie in [0, 45]".into());
        }
        if !(self.mismatch_sigma_db >= 0.0) {
            return bad("mismatch_sigma_db", "must be >= 0".into());
        }
        if !(self.radar_tx_power_w >= 0.0) {
            return bad("radar_tx_power_w", "must be >= 0".into());
        }
        if self.max_radar_paths == 0 {
            return bad("max_radar_paths", "must be >= 1".into());
        }
        if self.n_rsu < 2 || self.n_ue < 1 {
            return bad("n_rsu", "need n_rsu >= 2 and n_ue >= 1".into());
        }
        if self.n_samples < 1024 {
            return bad("n_samples", "must be >= 1024".into());
        }
        if self.n_bank_blocks < 2 || !(pos(self.min_chirp_rate_hz_per_s) && self.max_chirp_rate_hz_per_s > self.min_chirp_rate_hz_per_s) {
            return bad("chirp_rate", "need n_bank_blocks >= 2 and 0 < min < max".into());
        }
        let longest = self.radar_bandwidth_hz / self.min_chirp_rate_hz_per_s * self.sample_rate_hz;
        if longest > self.n_samples as f64 {
            return bad("n_samples", format!("capture shorter than the slowest chirp period ({longest:.0} samples)"));
        }
        if !(self.cfar_threshold > 1.0) {
            return bad("cfar_threshold", "must be > 1".into());
        }
        if self.lowpass_taps.is_multiple_of(2) || self.lowpass_taps < 3 {
            return bad("lowpass_taps", "must be odd and >= 3".into());
        }
        if 2.0 * self.lowpass_bandwidth_hz >= self.sample_rate_hz {
            return bad("lowpass_bandwidth_hz", "must be below half the sample rate".into());
        }
        if self.covariance_stride == 0 {
            return bad("covariance_stride", "must be >= 1".into());
        }
        if self.n_subcarriers == 0 || self.n_channel_taps == 0 {
            return bad("n_subcarriers", "need subcarriers and channel taps".into());
        }
        if self.subcarrier_stride == 0 || !self.n_subcarriers.is_multiple_of(self.subcarrier_stride) {
            return bad("subcarrier_stride", "must divide n_subcarriers".into());
        }
        Ok(())
    }

    pub fn bank(&self) -> Result<BankConfig> {
        BankConfig::uniform(
            self.n_bank_blocks,
            self.min_chirp_rate_hz_per_s,
            self.max_chirp_rate_hz_per_s,
            self.radar_bandwidth_hz,
            self.sample_rate_hz,
        )
    }

    pub fn cfar(&self) -> Result<CfarConfig> {
        let base = CfarConfig::for_spread(self.cfar_spread_s, self.sample_rate_hz);
        CfarConfig::new(base.n_guard, base.n_floor, self.cfar_threshold)
    }

    pub fn lowpass(&self) -> LowpassConfig {
        LowpassConfig::new(self.lowpass_bandwidth_hz, self.lowpass_taps).with_stride(self.covariance_stride)
    }

    pub fn capture(&self) -> CaptureConfig {
        CaptureConfig {
            sample_rate_hz: self.sample_rate_hz,
            n_samples: self.n_samples,
            carrier_hz: self.radar_carrier_hz,
        }
    }

    pub fn rsu_array(&self) -> UlaConfig {
        UlaConfig::half_wavelength(self.n_rsu)
    }

    pub fn ue_array(&self) -> UlaConfig {
        UlaConfig::half_wavelength(self.n_ue)
    }

    pub fn tap_interval_s(&self) -> f64 {
        1.0 / (self.n_subcarriers as f64 * self.subcarrier_spacing_hz)
    }

    pub fn symbol_s(&self) -> f64 {
        symbol_duration(self.n_subcarriers, self.subcarrier_spacing_hz, self.cp_samples)
    }

    /// Per-subcarrier transmit power in watts.
    pub fn p_t_w(&self) -> f64 {
        dbm_to_w(per_subcarrier_power_dbm(self.comm_tx_power_dbm, self.n_subcarriers))
    }

    /// Per-subcarrier noise power in watts.
    pub fn p_n_w(&self) -> f64 {
        dbm_to_w(noise_power_dbm(BOLTZMANN_DBM_PER_HZ, self.noise_figure_db, self.subcarrier_spacing_hz))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VehicleKind {
    Car,
    Truck,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Vehicle {
    pub kind: VehicleKind,
    pub lane: usize,
    /// Centre of the footprint.
    pub x_m: f64,
    pub y_m: f64,
    pub length_m: f64,
    pub width_m: f64,
    pub height_m: f64,
}

impl Vehicle {
    fn x_range(&self) -> (f64, f64) {
        (self.x_m - self.length_m / 2.0, self.x_m + self.length_m / 2.0)
    }

    fn y_range(&self) -> (f64, f64) {
        (self.y_m - self.width_m / 2.0, self.y_m + self.width_m / 2.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Placement {
    pub vehicles: Vec<Vehicle>,
    /// Indices into `vehicles` of the radar/communication-equipped cars.
    pub active: Vec<usize>,
}

/// Vehicles in one lane: bumper gaps `max(2, d)`, `d ~ Exp(0.5/s)`.
fn drop_lane(cfg: &SceneConfig, lane: usize, rng: &mut ChaCha8Rng) -> Vec<Vehicle> {
    let exp = Exp::new(0.5 / cfg.lane_speeds_kmh[lane]).expect("validated speed");
    let half = cfg.road_length_m / 2.0;
    let y = cfg.lane_width_m * (lane as f64 + 0.5);
    let mut out = Vec::new();
    let mut rear = -half - rng.random::<f64>() * cfg.road_length_m.min(100.0);
    loop {
        let kind = if rng.random::<f64>() < cfg.truck_fraction {
            VehicleKind::Truck
        } else {
            VehicleKind::Car
        };
        let [l, w, h] = match kind {
            VehicleKind::Car => cfg.car_dims_m,
            VehicleKind::Truck => cfg.truck_dims_m,
        };
        if rear + l > half {
            break;
        }
        if rear >= -half {
            out.push(Vehicle {
                kind,
                lane,
                x_m: rear + l / 2.0,
                y_m: y,
                length_m: l,
                width_m: w,
                height_m: h,
            });
        }
        let gap = exp.sample(rng).max(2.0);
        rear += l + gap;
    }
    out
}

/// Draws lanes until the coverage area holds at least `n_active` cars, then
/// picks the active ones uniformly.
pub fn drop_vehicles(cfg: &SceneConfig, seed: u64) -> Result<Placement> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for _ in 0..10_000 {
        let vehicles: Vec<Vehicle> = (0..cfg.lane_speeds_kmh.len()).flat_map(|l| drop_lane(cfg, l, &mut rng)).collect();
        let mut cars: Vec<usize> = (0..vehicles.len())
            .filter(|&i| vehicles[i].kind == VehicleKind::Car && vehicles[i].x_m.abs() <= cfg.coverage_m / 2.0)
            .collect();
        if cars.len() < cfg.n_active {
            continue;
        }
        for i in 0..cfg.n_active {
            let j = rng.random_range(i..cars.len());
            cars.swap(i, j);
        }
        let mut active = cars[..cfg.n_active].to_vec();
        active.sort_unstable();
        return Ok(Placement { vehicles, active });
    }
    Err(Error::Config {
        key: "n_active".into(),
        message: format!("coverage of {} m rarely holds {} cars", cfg.coverage_m, cfg.n_active),
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct P3 {
    x: f64,
    y: f64,
    z: f64,
}

impl P3 {
    fn dist(self, o: P3) -> f64 {
        ((self.x - o.x).powi(2) + (self.y - o.y).powi(2) + (self.z - o.z).powi(2)).sqrt()
    }

    fn lerp(self, o: P3, t: f64) -> P3 {
        P3 {
            x: self.x + t * (o.x - self.x),
            y: self.y + t * (o.y - self.y),
            z: self.z + t * (o.z - self.z),
        }
    }
}

/// Liang–Barsky clip of `p→q` against the footprint, then a height test at
/// the clipped ends (height is linear along the segment).
fn segment_hits_box(p: P3, q: P3, v: &Vehicle) -> bool {
    let (x0, x1) = v.x_range();
    let (y0, y1) = v.y_range();
    let (dx, dy) = (q.x - p.x, q.y - p.y);
    let mut t0: f64 = 0.0;
    let mut t1: f64 = 1.0;
    for (pk, qk) in [(-dx, p.x - x0), (dx, x1 - p.x), (-dy, p.y - y0), (dy, y1 - p.y)] {
        if pk == 0.0 {
            if qk < 0.0 {
                return false;
            }
        } else {
            let r = qk / pk;
            if pk < 0.0 {
                t0 = t0.max(r);
            } else {
                t1 = t1.min(r);
            }
        }
    }
    if t1 - t0 <= 1e-9 {
        return false;
    }
    p.lerp(q, t0).z.min(p.lerp(q, t1).z) < v.height_m
}

fn blocked(p: P3, q: P3, vehicles: &[Vehicle], exclude: &[usize]) -> bool {
    vehicles
        .iter()
        .enumerate()
        .any(|(i, v)| !exclude.contains(&i) && segment_hits_box(p, q, v))
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Axis {
    X,
    Y,
}

/// Reflecting rectangle in a plane `axis = coord`, facing `normal_sign`.
#[derive(Debug, Clone, Copy)]
struct Face {
    axis: Axis,
    coord: f64,
    normal_sign: f64,
    extent: (f64, f64),
    height: f64,
    reflector: Option<usize>,
    amplitude: f64,
}

fn faces(cfg: &SceneConfig, vehicles: &[Vehicle], owner: usize) -> Vec<Face> {
    let wall = |coord: f64, sign: f64| Face {
        axis: Axis::Y,
        coord,
        normal_sign: sign,
        extent: (-cfg.road_length_m / 2.0, cfg.road_length_m / 2.0),
        height: cfg.wall_height_m,
        reflector: None,
        amplitude: 10f64.powf(cfg.wall_reflection_db / 20.0),
    };
    let mut out = vec![wall(cfg.near_wall_y_m, 1.0), wall(cfg.far_wall_y_m, -1.0)];
    let amp = 10f64.powf(cfg.vehicle_reflection_db / 20.0);
    let me = vehicles[owner];
    for (i, v) in vehicles.iter().enumerate() {
        if i == owner || (v.x_m - me.x_m).abs() > cfg.coverage_m {
            continue;
        }
        let (x0, x1) = v.x_range();
        let (y0, y1) = v.y_range();
        for (axis, coord, sign, extent) in [
            (Axis::X, x0, -1.0, (y0, y1)),
            (Axis::X, x1, 1.0, (y0, y1)),
            (Axis::Y, y0, -1.0, (x0, x1)),
            (Axis::Y, y1, 1.0, (x0, x1)),
        ] {
            out.push(Face {
                axis,
                coord,
                normal_sign: sign,
                extent,
                height: v.height_m,
                reflector: Some(i),
                amplitude: amp,
            });
        }
    }
    out
}

fn along(p: P3, axis: Axis) -> f64 {
    match axis {
        Axis::X => p.x,
        Axis::Y => p.y,
    }
}

fn across(p: P3, axis: Axis) -> f64 {
    match axis {
        Axis::X => p.y,
        Axis::Y => p.x,
    }
}

/// Specular point on the face plane for `p → face → q`, if both ends are in
/// front of it. `strict` also requires the point to lie on the face.
fn reflection_point(p: P3, q: P3, f: &Face, strict: bool) -> Option<P3> {
    let (pa, qa) = (along(p, f.axis), along(q, f.axis));
    if f.normal_sign * (pa - f.coord) <= 0.0 || f.normal_sign * (qa - f.coord) <= 0.0 {
        return None;
    }
    let image = match f.axis {
        Axis::X => P3 { x: 2.0 * f.coord - q.x, ..q },
        Axis::Y => P3 { y: 2.0 * f.coord - q.y, ..q },
    };
    let t = (f.coord - pa) / (along(image, f.axis) - pa);
    let r = p.lerp(image, t);
    if strict {
        let c = across(r, f.axis);
        if c < f.extent.0 || c > f.extent.1 || r.z < 0.0 || r.z > f.height {
            return None;
        }
    }
    Some(r)
}

/// One band's view of a ray.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RayLeg {
    pub length_m: f64,
    /// Arrival angle at the RSU from broadside.
    pub rsu_angle_rad: f64,
    /// Departure direction at the vehicle (top view, radians from `+x`).
    pub departure_rad: f64,
    /// Reflection amplitude (1 for line of sight).
    pub amplitude: f64,
}

fn leg(p: P3, first_hop: P3, last_hop: P3, q: P3, amplitude: f64) -> RayLeg {
    let length_m = if first_hop == q { p.dist(q) } else { p.dist(first_hop) + first_hop.dist(q) };
    RayLeg {
        length_m,
        rsu_angle_rad: (last_hop.x - q.x).atan2(last_hop.y - q.y),
        departure_rad: (first_hop.y - p.y).atan2(first_hop.x - p.x),
        amplitude,
    }
}

/// Array mounted on a vehicle: position and boresight (radians from `+x`).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Mount {
    pos: P3,
    pub boresight_rad: f64,
}

const OUTSIDE: f64 = 1e-6;

/// Communication arrays: near side, far side, front, rear.
fn comm_mounts(cfg: &SceneConfig, v: &Vehicle) -> [Mount; 4] {
    let (x0, x1) = v.x_range();
    let (y0, y1) = v.y_range();
    let z = cfg.comm_height_m;
    [
        (v.x_m, y0 - OUTSIDE, -PI / 2.0),
        (v.x_m, y1 + OUTSIDE, PI / 2.0),
        (x1 + OUTSIDE, v.y_m, 0.0),
        (x0 - OUTSIDE, v.y_m, PI),
    ]
    .map(|(x, y, b)| Mount {
        pos: P3 { x, y, z },
        boresight_rad: b,
    })
}

/// Corner radars, each yawed from the side normal towards its own end.
fn radar_mounts(cfg: &SceneConfig, v: &Vehicle) -> [Mount; 4] {
    let yaw = cfg.radar_yaw_deg.to_radians();
    let z = cfg.radar_height_m;
    [(1.0, -1.0), (-1.0, -1.0), (1.0, 1.0), (-1.0, 1.0)].map(|(sx, sy): (f64, f64)| Mount {
        pos: P3 {
            x: v.x_m + sx * (v.length_m / 2.0 + OUTSIDE),
            y: v.y_m + sy * (v.width_m / 2.0 + OUTSIDE),
            z,
        },
        boresight_rad: sy * (PI / 2.0 - sx * yaw),
    })
}

fn rsu_point(cfg: &SceneConfig) -> P3 {
    P3 {
        x: 0.0,
        y: cfg.rsu_y_m,
        z: cfg.rsu_height_m,
    }
}

/// True when nothing blocks the segment from the RSU-facing side of the
/// vehicle to the RSU.
pub fn los_flag(cfg: &SceneConfig, vehicles: &[Vehicle], owner: usize) -> bool {
    let near = comm_mounts(cfg, &vehicles[owner])[0];
    !blocked(near.pos, rsu_point(cfg), vehicles, &[owner])
}

/// Line of sight and single-bounce rays from `p` to the RSU.
fn trace_from(cfg: &SceneConfig, vehicles: &[Vehicle], owner: usize, p: P3, faces: &[Face]) -> Vec<RayLeg> {
    let q = rsu_point(cfg);
    let mut rays = Vec::new();
    if !blocked(p, q, vehicles, &[owner]) {
        rays.push(leg(p, q, p, q, 1.0));
    }
    for f in faces {
        let Some(r) = reflection_point(p, q, f, true) else {
            continue;
        };
        let mut skip = vec![owner];
        skip.extend(f.reflector);
        if blocked(p, r, vehicles, &skip) || blocked(r, q, vehicles, &skip) {
            continue;
        }
        rays.push(leg(p, r, r, q, f.amplitude));
    }
    rays
}

/// Amplitude of a cosine power pattern (120° half-power beamwidth).
fn pattern(off_boresight: f64) -> f64 {
    let c = off_boresight.cos();
    if c > 0.0 {
        c.sqrt()
    } else {
        0.0
    }
}

fn wrap_pi(a: f64) -> f64 {
    (a + PI).rem_euclid(2.0 * PI) - PI
}

/// Free-space gain with both element patterns; reflections flip the sign.
fn band_gain(l: &RayLeg, carrier_hz: f64, tx_boresight: f64) -> C64 {
    let lambda = SPEED_OF_LIGHT / carrier_hz;
    let g = l.amplitude * lambda / (4.0 * PI * l.length_m) * pattern(l.rsu_angle_rad) * pattern(wrap_pi(l.departure_rad - tx_boresight));
    let sign = if l.amplitude < 1.0 { -1.0 } else { 1.0 };
    C64::from_polar(sign * g, -2.0 * PI * (l.length_m / lambda).fract())
}

/// Propagation of one active vehicle in both bands.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedVehicle {
    pub vehicle_index: usize,
    pub los: bool,
    /// `None` when no radar ray reaches the RSU array.
    pub radar_paths: Option<RadarPathSet>,
    /// Index of the communication array in use (near, far, front, rear).
    pub comm_array: usize,
    pub comm_clusters: Vec<PathCluster>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedScene {
    pub placement: Placement,
    pub vehicles: Vec<PairedVehicle>,
}

/// Image-source propagation for every active vehicle. Both bands see the
/// same placement and reflectors. The vehicle links through whichever of its
/// four communication arrays collects the most power; all four corner radars
/// transmit, and radar gains get an independent log-normal perturbation.
pub fn generate_paired_propagation(placement: &Placement, cfg: &SceneConfig, seed: u64) -> Result<PairedScene> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mismatch = Normal::new(0.0, cfg.mismatch_sigma_db).map_err(|e| Error::invalid(e.to_string()))?;
    let mut out = Vec::with_capacity(placement.active.len());
    for &vi in &placement.active {
        let v = &placement.vehicles[vi];
        let fs = faces(cfg, &placement.vehicles, vi);

        let mut best: Option<(f64, usize, Vec<PathCluster>)> = None;
        for (ai, m) in comm_mounts(cfg, v).iter().enumerate() {
            let mut clusters = Vec::new();
            let mut power = 0.0;
            for l in trace_from(cfg, &placement.vehicles, vi, m.pos, &fs) {
                let g = band_gain(&l, cfg.comm_carrier_hz, m.boresight_rad);
                if g.norm_sqr() > 0.0 {
                    power += g.norm_sqr();
                    let aod = wrap_pi(l.departure_rad - m.boresight_rad);
                    clusters.push(PathCluster::single(g, l.length_m / SPEED_OF_LIGHT, l.rsu_angle_rad, aod));
                }
            }
            if best.as_ref().is_none_or(|b| power > b.0) {
                best = Some((power, ai, clusters));
            }
        }
        let (_, comm_array, comm_clusters) = best.expect("four mounts");

        let mut radar = Vec::new();
        for m in radar_mounts(cfg, v) {
            for l in trace_from(cfg, &placement.vehicles, vi, m.pos, &fs) {
                let pert = 10f64.powf(mismatch.sample(&mut rng) / 20.0);
                let g = band_gain(&l, cfg.radar_carrier_hz, m.boresight_rad) * pert;
                if g.norm_sqr() > 0.0 {
                    radar.push(RadarPath {
                        gain: g,
                        delay_s: l.length_m / SPEED_OF_LIGHT,
                        aoa_rad: l.rsu_angle_rad,
                    });
                }
            }
        }
        radar.sort_by(|a, b| b.gain.norm_sqr().total_cmp(&a.gain.norm_sqr()));
        radar.truncate(cfg.max_radar_paths);
        out.push(PairedVehicle {
            vehicle_index: vi,
            los: los_flag(cfg, &placement.vehicles, vi),
            radar_paths: if radar.is_empty() { None } else { Some(RadarPathSet::new(radar)?) },
            comm_array,
            comm_clusters,
        });
    }
    Ok(PairedScene {
        placement: placement.clone(),
        vehicles: out,
    })
}

/// Chirp settings of one radar, drawn on the bank grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RadarDraw {
    pub block_index: usize,
    pub params: FmcwParams,
}

pub fn draw_radar(bank: &BankConfig, cfg: &SceneConfig, rng: &mut impl Rng) -> Result<RadarDraw> {
    let block_index = rng.random_range(0..bank.len());
    let b = bank.blocks[block_index];
    let offset = rng.random::<f64>() * b.chirp_period_s;
    let phase = rng.random::<f64>() * 2.0 * PI;
    Ok(RadarDraw {
        block_index,
        params: FmcwParams::new(b.chirp_rate_hz_per_s, b.bandwidth_hz, offset, phase, cfg.radar_tx_power_w)?,
    })
}

/// Everything drawn for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneDraw {
    pub scene: PairedScene,
    pub radars: Vec<RadarDraw>,
    pub initial_user: usize,
    pub noise_seed: u64,
}

/// Deterministic scene for `seed`: placement, propagation, radar settings.
pub fn draw_scene(cfg: &SceneConfig, bank: &BankConfig, seed: u64) -> Result<SceneDraw> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let placement = drop_vehicles(cfg, rng.next_u64())?;
    let scene = generate_paired_propagation(&placement, cfg, rng.next_u64())?;
    let radars = (0..scene.vehicles.len()).map(|_| draw_radar(bank, cfg, &mut rng)).collect::<Result<Vec<_>>>()?;
    let initial_user = rng.random_range(0..scene.vehicles.len());
    Ok(SceneDraw {
        scene,
        radars,
        initial_user,
        noise_seed: rng.next_u64(),
    })
}

/// Passive-array capture of all radars in the scene.
pub fn scene_capture(cfg: &SceneConfig, draw: &SceneDraw) -> Result<RxCapture> {
    let emitters: Vec<(FmcwParams, RadarPathSet)> = draw
        .scene
        .vehicles
        .iter()
        .zip(&draw.radars)
        .filter_map(|(v, r)| v.radar_paths.clone().map(|p| (r.params, p)))
        .collect();
    if emitters.is_empty() {
        return Ok(noise_capture(&cfg.rsu_array(), &cfg.capture(), cfg.radar_noise_w, draw.noise_seed));
    }
    synthesize_rx(&emitters, &cfg.rsu_array(), &cfg.capture(), cfg.radar_noise_w, draw.noise_seed)
}

/// Lag at which the strongest radar path should peak in `block`.
fn expected_lag(bank: &BankConfig, block: usize, radar: &RadarDraw, paths: &RadarPathSet, fs: f64) -> usize {
    let l = bank.blocks[block].period_samples(fs);
    let delay = paths.paths()[0].delay_s;
    (((radar.params.time_offset_s + delay) * fs).round() as usize) % l
}

fn neighbour_blocks(bank: &BankConfig, b: usize) -> Vec<usize> {
    (b.saturating_sub(1)..=(b + 1).min(bank.len() - 1)).collect()
}

/// Ground-truth association: the hit within one block and `n_guard` lags of
/// the expected peak, closest lag first, then strongest.
fn associate(hits: &[BankHit], bank: &BankConfig, radar: &RadarDraw, paths: &RadarPathSet, fs: f64, tol: usize) -> Option<BankHit> {
    hits.iter()
        .filter(|h| h.block_index.abs_diff(radar.block_index) <= 1)
        .filter_map(|h| {
            let l = bank.blocks[h.block_index].period_samples(fs);
            let e = expected_lag(bank, h.block_index, radar, paths, fs);
            let d = h.lag_index.abs_diff(e);
            let d = d.min(l - d.min(l));
            (d <= tol).then_some((d, h))
        })
        .min_by(|a, b| a.0.cmp(&b.0).then(b.1.peak_power_w.total_cmp(&a.1.peak_power_w)))
        .map(|(_, h)| *h)
}

/// Scans the blocks around each listed user's chirp rate and returns the
/// hit associated with each user; `None` marks a missed detection.
pub fn associate_users(cfg: &SceneConfig, bank: &BankConfig, draw: &SceneDraw, capture: &RxCapture, users: &[usize]) -> Result<Vec<Option<BankHit>>> {
    let cfar = cfg.cfar()?;
    let mut blocks: Vec<usize> = users.iter().flat_map(|&u| neighbour_blocks(bank, draw.radars[u].block_index)).collect();
    blocks.sort_unstable();
    blocks.dedup();
    if blocks.is_empty() {
        return Ok(vec![]);
    }
    let hits = scan_bank(capture, bank, &cfar, Some(&blocks))?;
    Ok(users
        .iter()
        .map(|&u| {
            let paths = draw.scene.vehicles[u].radar_paths.as_ref()?;
            associate(&hits, bank, &draw.radars[u], paths, cfg.sample_rate_hz, cfar.n_guard)
        })
        .collect())
}

/// Detects and isolates the listed users; `None` marks a missed detection.
pub fn detect_users(cfg: &SceneConfig, bank: &BankConfig, draw: &SceneDraw, capture: &RxCapture, users: &[usize]) -> Result<Vec<Option<Detection>>> {
    let lowpass = cfg.lowpass();
    associate_users(cfg, bank, draw, capture, users)?
        .into_iter()
        .map(|h| h.map(|h| isolate_hit(capture, bank, &h, &lowpass)).transpose())
        .collect()
}

/// Correlator power of one synthesized scene, for lag-domain plots.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoOutput {
    /// Bank block of each radar in the scene.
    pub radar_blocks: Vec<usize>,
    /// `(block, antenna-max |C|² per lag)`.
    pub rows: Vec<(usize, Vec<f64>)>,
}

/// Synthesizes a scene with `n_radars` active vehicles (noise only when 0)
/// and returns correlator power for every block, or only for the radar
/// blocks and their neighbours (first, middle and last block when empty).
pub fn detect_demo(cfg: &SceneConfig, n_radars: usize, all_blocks: bool, seed: u64) -> Result<DemoOutput> {
    cfg.validate()?;
    let bank = cfg.bank()?;
    let (capture, radar_blocks) = if n_radars == 0 {
        (noise_capture(&cfg.rsu_array(), &cfg.capture(), cfg.radar_noise_w, seed), Vec::new())
    } else {
        let sc = SceneConfig {
            n_active: n_radars,
            ..cfg.clone()
        };
        let draw = draw_scene(&sc, &bank, seed)?;
        (scene_capture(&sc, &draw)?, draw.radars.iter().map(|r| r.block_index).collect())
    };
    let mut blocks: Vec<usize> = if all_blocks {
        (0..bank.len()).collect()
    } else if radar_blocks.is_empty() {
        vec![0, bank.len() / 2, bank.len() - 1]
    } else {
        radar_blocks.iter().flat_map(|&b| neighbour_blocks(&bank, b)).collect()
    };
    blocks.sort_unstable();
    blocks.dedup();
    let rows = blocks
        .par_iter()
        .map(|&b| Ok((b, crate::detection::block_output(&capture, &bank.blocks[b])?.antenna_max_power())))
        .collect::<Result<_>>()?;
    Ok(DemoOutput { radar_blocks, rows })
}

/// Radar-side features of one isolated covariance, normalized to unit
/// per-element power.
#[derive(Debug, Clone, PartialEq)]
pub struct RadarFeatures {
    pub aps: Aps,
    pub eigvec: Vec<C64>,
    pub covvec: CovarianceVector,
}

pub fn dominant_unit_eigvec(r: &ComplexMatrix) -> Vec<C64> {
    let (_, vecs) = hermitian_eigen(r);
    let mut v = vecs.column(r.rows() - 1);
    fix_phase(&mut v);
    v
}

pub fn radar_features(det: &Detection) -> Result<RadarFeatures> {
    let r = &det.isolated_covariance;
    let tr = r.trace();
    if !(tr > 0.0) {
        return Err(Error::invalid("isolated covariance has zero power"));
    }
    let s = r.n() as f64 / tr;
    let rn = r.scaled(s);
    let proj = toeplitz_psd_project(
        &rn,
        det.noise_power_w * s,
        crate::features::DEFAULT_PROJECTION_TOL,
        crate::features::DEFAULT_PROJECTION_MAX_ITER,
    );
    Ok(RadarFeatures {
        aps: aps_from_covariance(&rn),
        eigvec: dominant_unit_eigvec(rn.matrix()),
        covvec: cov_vector(&proj.covariance)?,
    })
}

/// Communication-side ground truth, normalized like the radar features.
#[derive(Debug, Clone, PartialEq)]
pub struct CommTargets {
    pub aps: Aps,
    pub eigvec: Vec<C64>,
}

pub fn comm_channel(cfg: &SceneConfig, v: &PairedVehicle) -> Result<WidebandChannel> {
    channel_taps(&v.comm_clusters, (cfg.ue_array(), cfg.rsu_array()), cfg.n_channel_taps, cfg.tap_interval_s())
}

pub fn comm_targets(cfg: &SceneConfig, ch: &WidebandChannel) -> Result<Option<CommTargets>> {
    let r = comm_covariance(ch, cfg.n_subcarriers)?;
    let tr = r.trace();
    if !(tr > 0.0) {
        return Ok(None);
    }
    let rn = r.scaled(r.n() as f64 / tr);
    Ok(Some(CommTargets {
        aps: aps_from_covariance(&rn),
        eigvec: dominant_unit_eigvec(rn.matrix()),
    }))
}

/// Source of the assisted search space.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PredictorKind {
    /// APS of the isolated radar covariance, no translation.
    Radar,
    Net(Variant),
}

impl PredictorKind {
    pub const ALL: [PredictorKind; 4] = [
        PredictorKind::Radar,
        PredictorKind::Net(Variant::Aps),
        PredictorKind::Net(Variant::Eigvec),
        PredictorKind::Net(Variant::CovVec),
    ];

    pub fn name(self) -> &'static str {
        match self {
            PredictorKind::Radar => "radar",
            PredictorKind::Net(v) => v.name(),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        if s == "radar" {
            return Ok(PredictorKind::Radar);
        }
        Variant::parse(s).map(PredictorKind::Net)
    }
}

/// Predicted communication feature for the initial-access user.
pub fn predict(kind: PredictorKind, radar: &RadarFeatures, models: &BTreeMap<Variant, MlpModel>) -> Result<Feature> {
    match kind {
        PredictorKind::Radar => Ok(Feature::Aps(radar.aps.clone())),
        PredictorKind::Net(v) => {
            let m = models
                .get(&v)
                .ok_or_else(|| Error::invalid(format!("no trained {} model supplied", v.name())))?;
            if m.variant != v {
                return Err(Error::invalid(format!("model for {} holds a {} network", v.name(), m.variant.name())));
            }
            let input = match v {
                Variant::Aps => Feature::Aps(radar.aps.clone()),
                Variant::Eigvec => Feature::Eigvec(radar.eigvec.clone()),
                Variant::CovVec => Feature::CovVec(radar.covvec.clone()),
            };
            predict_variant(m, &input)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignConfig {
    pub scene: SceneConfig,
    pub protocol: ProtocolConfig,
    pub n_trials: usize,
    pub t_coh_s: Vec<f64>,
    /// Assisted protocols; exhaustive is always evaluated.
    pub protocols: Vec<ProtocolVariant>,
    pub predictors: Vec<PredictorKind>,
    pub r_min_bps: f64,
    pub seed: u64,
}

impl Default for CampaignConfig {
    fn default() -> Self {
        Self {
            scene: SceneConfig::default(),
            protocol: ProtocolConfig::default(),
            n_trials: 100,
            t_coh_s: log_sweep(1e-3, 100e-3, 11),
            protocols: vec![ProtocolVariant::Narrow, ProtocolVariant::Wide],
            predictors: PredictorKind::ALL.to_vec(),
            r_min_bps: DEFAULT_R_MIN_BPS,
            seed: 0,
        }
    }
}

/// `n` log-spaced points from `lo` to `hi`.
pub fn log_sweep(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![lo];
    }
    (0..n).map(|i| lo * (hi / lo).powf(i as f64 / (n - 1) as f64)).collect()
}

impl CampaignConfig {
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.protocol.validate()?;
        let bad = |k: &str, m: &str| Err(Error::Config { key: k.into(), message: m.into() });
        if self.n_trials == 0 {
            return bad("n_trials", "must be >= 1");
        }
        if self.t_coh_s.is_empty() || !self.t_coh_s.iter().all(|&t| t > 0.0 && t.is_finite()) {
            return bad("t_coh_s", "need at least one positive coherence time");
        }
        if self.protocols.contains(&ProtocolVariant::Exhaustive) {
            return bad("protocols", "list assisted protocols only (narrow, wide)");
        }
        if !(self.r_min_bps >= 0.0) {
            return bad("r_min_bps", "must be >= 0");
        }
        if self.protocol.search_exhaustive != self.scene.n_rsu || self.protocol.ue_beams != self.scene.n_ue {
            return bad("search_exhaustive", "exhaustive search must cover n_rsu and ue_beams must equal n_ue");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UserOutcome {
    pub vehicle_index: usize,
    pub los: bool,
}

/// One (protocol, predictor) evaluation of a trial.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupOutcome {
    pub protocol: ProtocolVariant,
    /// `None` for exhaustive search.
    pub predictor: Option<PredictorKind>,
    pub t_train_s: f64,
    /// `(rsu beam, ue beam)` per user; `None` if the link was not set up.
    pub selections: Vec<Option<(usize, usize)>>,
    pub spectral_eff: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub trial_id: usize,
    pub initial_user: usize,
    pub detected: bool,
    pub users: Vec<UserOutcome>,
    pub groups: Vec<GroupOutcome>,
}

impl TrialOutcome {
    pub fn rate(&self, g: &GroupOutcome, user: usize, t_coh: f64, spacing_hz: f64) -> f64 {
        effective_rate(g.spectral_eff[user], g.t_train_s, t_coh, spacing_hz)
    }
}

/// Shared, trial-independent state.
pub struct TrialContext {
    pub bank: BankConfig,
    pub rsu_codebook: Codebook,
    pub ue_codebook: Codebook,
}

impl TrialContext {
    pub fn new(cfg: &SceneConfig) -> Result<Self> {
        Ok(Self {
            bank: cfg.bank()?,
            rsu_codebook: build_codebook(cfg.n_rsu, 2)?,
            ue_codebook: build_codebook(cfg.n_ue, 2)?,
        })
    }
}

/// One environment: detect the initial-access vehicle, predict, select beams
/// for every protocol/predictor pair and compute spectral efficiencies.
pub fn run_trial(cfg: &CampaignConfig, ctx: &TrialContext, models: &BTreeMap<Variant, MlpModel>, trial_id: usize) -> Result<TrialOutcome> {
    let sc = &cfg.scene;
    let draw = draw_scene(sc, &ctx.bank, cfg.seed.wrapping_add(trial_id as u64))?;
    let n_users = draw.scene.vehicles.len();
    let iu = draw.initial_user;

    let stride = sc.subcarrier_stride;
    let ks: Vec<usize> = (0..sc.n_subcarriers).step_by(stride).collect();
    let mut channels = Vec::with_capacity(n_users);
    for v in &draw.scene.vehicles {
        let ch = comm_channel(sc, v)?;
        channels.push(ks.iter().map(|&k| channel_freq(&ch, k, sc.n_subcarriers)).collect::<Result<Vec<_>>>()?);
    }
    let (rsu_cb, ue_cb) = (&ctx.rsu_codebook, &ctx.ue_codebook);
    let tables: Vec<Vec<Vec<f64>>> = channels.iter().map(|h| beam_gain_table(h, rsu_cb, ue_cb)).collect::<Result<_>>()?;
    let snr_scale = sc.p_t_w() / sc.p_n_w();
    let all_rsu: Vec<usize> = (0..rsu_cb.len()).collect();
    let all_ue: Vec<usize> = (0..ue_cb.len()).collect();
    let oracle: Vec<(usize, usize)> = tables
        .iter()
        .map(|t| beam_select_from_table(t, ue_cb.len(), &all_rsu, &all_ue, snr_scale).map(|p| (p.rsu, p.ue)))
        .collect::<Result<_>>()?;

    let wants_radar = !cfg.protocols.is_empty() && !cfg.predictors.is_empty();
    let features = if wants_radar {
        let capture = scene_capture(sc, &draw)?;
        match detect_users(sc, &ctx.bank, &draw, &capture, &[iu])?.pop().flatten() {
            Some(det) => Some(radar_features(&det)?),
            None => None,
        }
    } else {
        None
    };

    let evaluate = |protocol: ProtocolVariant, predictor: Option<PredictorKind>, initial: Option<(usize, usize)>| -> Result<GroupOutcome> {
        let mut selections: Vec<Option<(usize, usize)>> = oracle.iter().copied().map(Some).collect();
        selections[iu] = initial;
        let s = sinr(&selections, &channels, rsu_cb, ue_cb, sc.p_t_w(), sc.p_n_w())?;
        Ok(GroupOutcome {
            protocol,
            predictor,
            t_train_s: training_time(&cfg.protocol, protocol, sc.symbol_s(), n_users - 1),
            spectral_eff: s
                .iter()
                .zip(&selections)
                .map(|(x, sel)| if sel.is_some() { spectral_efficiency(x, stride) } else { 0.0 })
                .collect(),
            selections,
        })
    };

    let mut groups = vec![evaluate(ProtocolVariant::Exhaustive, None, Some(oracle[iu]))?];
    for &protocol in &cfg.protocols {
        let k = cfg.protocol.search_size(protocol);
        for &pk in &cfg.predictors {
            let initial = match &features {
                Some(f) => {
                    let space = assisted_search_space(&predict(pk, f, models)?, rsu_cb, k)?;
                    let p = beam_select_from_table(&tables[iu], ue_cb.len(), &space, &all_ue, snr_scale)?;
                    Some((p.rsu, p.ue))
                }
                None => None,
            };
            groups.push(evaluate(protocol, Some(pk), initial)?);
        }
    }
    Ok(TrialOutcome {
        trial_id,
        initial_user: iu,
        detected: features.is_some(),
        users: draw
            .scene
            .vehicles
            .iter()
            .map(|v| UserOutcome {
                vehicle_index: v.vehicle_index,
                los: v.los,
            })
            .collect(),
        groups,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub protocol: ProtocolVariant,
    pub predictor: Option<PredictorKind>,
    pub t_coh_s: f64,
    pub mean_sum_rate_bps: f64,
    /// Outage of the initial-access vehicle; `NaN` when no such trial occurred.
    pub outage_los: f64,
    pub outage_nlos: f64,
    pub missed_detection: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CampaignReport {
    pub trials: Vec<TrialOutcome>,
    pub aggregates: Vec<Aggregate>,
}

/// Trials run in parallel on the current rayon pool and are collected in
/// trial order, so results do not depend on the worker count.
pub fn run_campaign(cfg: &CampaignConfig, models: &BTreeMap<Variant, MlpModel>) -> Result<CampaignReport> {
    cfg.validate()?;
    for p in &cfg.predictors {
        if let PredictorKind::Net(v) = p {
            if !models.contains_key(v) {
                return Err(Error::invalid(format!("predictor {} requested without a checkpoint", v.name())));
            }
        }
    }
    let ctx = TrialContext::new(&cfg.scene)?;
    let trials: Vec<TrialOutcome> = (0..cfg.n_trials)
        .into_par_iter()
        .map(|t| run_trial(cfg, &ctx, models, t))
        .collect::<Result<_>>()?;
    let aggregates = aggregate(cfg, &trials);
    Ok(CampaignReport { trials, aggregates })
}

pub fn aggregate(cfg: &CampaignConfig, trials: &[TrialOutcome]) -> Vec<Aggregate> {
    let mut out = Vec::new();
    let Some(first) = trials.first() else {
        return out;
    };
    let spacing = cfg.scene.subcarrier_spacing_hz;
    let missed = trials.iter().filter(|t| !t.detected).count() as f64 / trials.len() as f64;
    for (gi, g0) in first.groups.iter().enumerate() {
        for &t_coh in &cfg.t_coh_s {
            let mut sum = 0.0;
            let (mut los, mut nlos) = ((0usize, 0usize), (0usize, 0usize));
            for t in trials {
                let g = &t.groups[gi];
                for u in 0..t.users.len() {
                    sum += t.rate(g, u, t_coh, spacing);
                }
                let slot = if t.users[t.initial_user].los { &mut los } else { &mut nlos };
                slot.1 += 1;
                if t.rate(g, t.initial_user, t_coh, spacing) < cfg.r_min_bps {
                    slot.0 += 1;
                }
            }
            let frac = |(a, b): (usize, usize)| if b == 0 { f64::NAN } else { a as f64 / b as f64 };
            out.push(Aggregate {
                protocol: g0.protocol,
                predictor: g0.predictor,
                t_coh_s: t_coh,
                mean_sum_rate_bps: sum / trials.len() as f64,
                outage_los: frac(los),
                outage_nlos: frac(nlos),
                missed_detection: if g0.predictor.is_some() { missed } else { 0.0 },
            });
        }
    }
    out
}

fn predictor_name(p: Option<PredictorKind>) -> &'static str {
    p.map_or("none", PredictorKind::name)
}

/// Per-user rows, preceded by `# ` header lines.
pub fn write_results_csv<W: std::io::Write>(w: W, cfg: &CampaignConfig, report: &CampaignReport, header: &[String]) -> Result<()> {
    let mut w = w;
    let io = |e: std::io::Error| Error::invalid(format!("results write failed: {e}"));
    for line in header {
        writeln!(w, "# {line}").map_err(io)?;
    }
    let mut wr = csv::Writer::from_writer(w);
    let ce = |e: csv::Error| Error::invalid(format!("results write failed: {e}"));
    wr.write_record([
        "trial_id",
        "user_id",
        "protocol_variant",
        "predictor_variant",
        "t_coh_s",
        "rate_bps",
        "los_flag",
        "detected_flag",
        "selected_rsu_beam",
        "selected_ue_beam",
    ])
    .map_err(ce)?;
    for t in &report.trials {
        for g in &t.groups {
            for &t_coh in &cfg.t_coh_s {
                for (u, user) in t.users.iter().enumerate() {
                    let (rsu, ue) = g.selections[u].map_or((String::from("-1"), String::from("-1")), |(a, b)| (a.to_string(), b.to_string()));
                    let detected = u != t.initial_user || t.detected;
                    wr.write_record([
                        t.trial_id.to_string(),
                        u.to_string(),
                        g.protocol.name().to_string(),
                        predictor_name(g.predictor).to_string(),
                        format!("{t_coh:e}"),
                        format!("{:.6e}", t.rate(g, u, t_coh, cfg.scene.subcarrier_spacing_hz)),
                        u8::from(user.los).to_string(),
                        u8::from(detected).to_string(),
                        rsu,
                        ue,
                    ])
                    .map_err(ce)?;
                }
            }
        }
    }
    wr.flush().map_err(io)?;
    Ok(())
}

/// Aggregate block: sum rate, outage split by LOS, missed detection.
pub fn write_summary_csv<W: std::io::Write>(w: W, report: &CampaignReport, header: &[String]) -> Result<()> {
    let mut w = w;
    let io = |e: std::io::Error| Error::invalid(format!("summary write failed: {e}"));
    for line in header {
        writeln!(w, "# {line}").map_err(io)?;
    }
    let mut wr = csv::Writer::from_writer(w);
    let ce = |e: csv::Error| Error::invalid(format!("summary write failed: {e}"));
    wr.write_record(["protocol_variant", "predictor_variant", "t_coh_s", "mean_sum_rate_bps", "outage_los", "outage_nlos", "missed_detection"])
        .map_err(ce)?;
    for a in &report.aggregates {
        wr.write_record([
            a.protocol.name().to_string(),
            predictor_name(a.predictor).to_string(),
            format!("{:e}", a.t_coh_s),
            format!("{:.6e}", a.mean_sum_rate_bps),
            format!("{:.4}", a.outage_los),
            format!("{:.4}", a.outage_nlos),
            format!("{:.4}", a.missed_detection),
        ])
        .map_err(ce)?;
    }
    wr.flush().map_err(io)?;
    Ok(())
}
