//! Wideband channel from two path clusters, its spatial covariance, and the
//! angular power spectrum seen at the RSU.
//!
//! Run with `cargo run --release --example channel_covariance`.

use num_complex::Complex64 as C64;
use radarlink::channel::{channel_taps, comm_covariance, PathCluster, UlaConfig};
use radarlink::features::aps_from_covariance;
use radarlink::scenario::dominant_unit_eigvec;

fn main() -> radarlink::Result<()> {
    let rsu = UlaConfig::half_wavelength(64);
    let ue = UlaConfig::half_wavelength(16);
    let tap = 1.0 / (2048.0 * 240e3);
    let clusters = [
        PathCluster::single(C64::new(1.0, 0.0), 40e-9, 0.35, -0.2),
        PathCluster::single(C64::new(0.0, 0.3), 95e-9, -0.6, 0.5),
    ];
    let ch = channel_taps(&clusters, (ue, rsu), 512, tap)?;
    println!("nonzero taps: {:?}", ch.nonzero_taps().map(|(d, _)| d).collect::<Vec<_>>());

    let r = comm_covariance(&ch, 2048)?;
    let aps = aps_from_covariance(&r);
    println!("trace {:.3}, APS total {:.3}", r.trace(), aps.total());
    let mut bins: Vec<(usize, f64)> = aps.bins.iter().copied().enumerate().collect();
    bins.sort_by(|a, b| b.1.total_cmp(&a.1));
    for (i, p) in bins.iter().take(4) {
        println!("  bin {i:2}: {:.3}", p / aps.total());
    }
    let v = dominant_unit_eigvec(r.matrix());
    // The phase step between elements recovers sin(angle) for a half-wave ULA.
    let step = (v[1] * v[0].conj()).arg();
    println!("dominant direction {:.3} rad", (step / std::f64::consts::PI).asin());
    Ok(())
}
