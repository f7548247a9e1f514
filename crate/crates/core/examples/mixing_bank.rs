//! Detects every radar of a random street scene with the mixing bank and
//! compares the hits with the drawn chirp rates.

use radarlink::detection::run_bank;
use radarlink::scenario::{draw_scene, scene_capture, SceneConfig};

fn main() -> radarlink::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(12);
    let cfg = SceneConfig::default();
    let bank = cfg.bank()?;
    let draw = draw_scene(&cfg, &bank, seed)?;
    for (i, (r, v)) in draw.radars.iter().zip(&draw.scene.vehicles).enumerate() {
        let paths = v.radar_paths.as_ref().map_or(0, |p| p.paths().len());
        println!("radar {i}: block {:2}, {paths} paths, los {}", r.block_index, v.los);
    }
    let cap = scene_capture(&cfg, &draw)?;
    let t = std::time::Instant::now();
    let dets = run_bank(&cap, &bank, &cfg.cfar()?, &cfg.lowpass())?;
    println!("full-bank scan of {} blocks: {:.1?}", bank.len(), t.elapsed());
    for d in &dets {
        println!(
            "hit block {:2} lag {:5}: {:.1} dB over floor, noise {:.2e} W",
            d.block_index,
            d.lag_index,
            10.0 * (d.peak_power_w / d.floor_power_w).log10(),
            d.noise_power_w
        );
    }
    Ok(())
}
