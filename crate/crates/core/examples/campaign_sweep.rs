//! A short Monte Carlo campaign with the radar-only predictor: mean sum-rate
//! and initial-access outage per strategy and coherence time.

use std::collections::BTreeMap;

use radarlink::scenario::{log_sweep, run_campaign, CampaignConfig, PredictorKind};

fn main() -> radarlink::Result<()> {
    let trials: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(8);
    let cfg = CampaignConfig {
        n_trials: trials,
        t_coh_s: log_sweep(1e-3, 1e-1, 5),
        predictors: vec![PredictorKind::Radar],
        seed: 9,
        ..CampaignConfig::default()
    };
    let report = run_campaign(&cfg, &BTreeMap::new())?;
    let missed = report.trials.iter().filter(|t| !t.detected).count();
    println!("{trials} trials, initial user missed by the radar in {missed}");
    // Outage columns are NaN when no trial had a LOS (or NLOS) initial user.
    println!("{:>10} {:>9} {:>9} {:>14} {:>8} {:>8}", "strategy", "predictor", "t_coh ms", "sum rate Mb/s", "P_o LOS", "P_o NLOS");
    for a in &report.aggregates {
        println!(
            "{:>10} {:>9} {:>9.1} {:>14.2} {:>8.2} {:>8.2}",
            a.protocol.name(),
            a.predictor.map_or("-", |p| p.name()),
            a.t_coh_s * 1e3,
            a.mean_sum_rate_bps / 1e6,
            a.outage_los,
            a.outage_nlos
        );
    }
    Ok(())
}
