//! Drops traffic on the four-lane street and prints what the image-source
//! tracer finds for each equipped car.

use std::f64::consts::PI;

use radarlink::scenario::{drop_vehicles, generate_paired_propagation, SceneConfig, VehicleKind};

/// Angles printed in (-pi, pi].
fn signed(a: f64) -> f64 {
    PI - (PI - a).rem_euclid(2.0 * PI)
}

fn main() -> radarlink::Result<()> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    let cfg = SceneConfig::default();
    let placement = drop_vehicles(&cfg, seed)?;
    let trucks = placement.vehicles.iter().filter(|v| v.kind == VehicleKind::Truck).count();
    println!("{} vehicles ({trucks} trucks) on {} m of road", placement.vehicles.len(), cfg.road_length_m);

    let scene = generate_paired_propagation(&placement, &cfg, seed)?;
    for pv in &scene.vehicles {
        let v = &placement.vehicles[pv.vehicle_index];
        println!("car at x = {:6.1} m, lane {}: los {}, comm array {}", v.x_m, v.lane, pv.los, pv.comm_array);
        for c in &pv.comm_clusters {
            println!(
                "  comm  {:6.1} ns  aoa {:+.2}  aod {:+.2}  |g| {:.2e}",
                c.mean_delay_s * 1e9,
                signed(c.mean_aoa_rad),
                signed(c.mean_aod_rad),
                c.rays[0].gain.norm()
            );
        }
        match &pv.radar_paths {
            Some(ps) => {
                for p in ps.paths() {
                    println!("  radar {:6.1} ns  aoa {:+.2}  |g| {:.2e}", p.delay_s * 1e9, signed(p.aoa_rad), p.gain.norm());
                }
            }
            None => println!("  no radar path reaches the RSU"),
        }
    }
    Ok(())
}
