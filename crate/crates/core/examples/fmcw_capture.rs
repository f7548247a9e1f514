//! Two FMCW radars seen by the passive RSU array, written to and read back
//! from the binary capture format.

use num_complex::Complex64 as C64;
use radarlink::fmcw::{load_capture, save_capture, synthesize_rx, FmcwParams, RadarPathSet};
use radarlink::scenario::SceneConfig;

fn main() -> radarlink::Result<()> {
    let cfg = SceneConfig::default();
    let bank = cfg.bank()?;
    let radars: Vec<(FmcwParams, RadarPathSet)> = [(5, 1.1e-6, 0.2), (40, 3.7e-6, -0.4)]
        .into_iter()
        .map(|(block, offset, aoa)| {
            let b = bank.blocks[block];
            let p = FmcwParams::new(b.chirp_rate_hz_per_s, b.bandwidth_hz, offset, 0.0, cfg.radar_tx_power_w)?;
            println!("block {block}: {:.2} MHz/us, period {:.2} us", b.chirp_rate_hz_per_s / 1e12, p.chirp_period_s() * 1e6);
            Ok((p, RadarPathSet::single(C64::new(3e-4, 0.0), 120e-9, aoa)))
        })
        .collect::<radarlink::Result<_>>()?;
    let cap = synthesize_rx(&radars, &cfg.rsu_array(), &cfg.capture(), cfg.radar_noise_w, 7)?;
    println!(
        "{} antennas x {} samples, mean power {:.3e} W (noise {:.1e} W)",
        cap.n_antennas(),
        cap.n_samples(),
        cap.power(),
        cfg.radar_noise_w
    );

    let dir = tempfile::tempdir().map_err(|e| radarlink::Error::io(std::env::temp_dir(), e))?;
    let path = dir.path().join("capture.bin");
    save_capture(&path, &cap)?;
    let back = load_capture(&path)?;
    println!("round trip through {} exact: {}", path.display(), back == cap);
    Ok(())
}

