//! Generates a small paired dataset, trains the covariance-vector network and
//! compares its validation loss with feeding the radar feature through as is.
//!
//! `cargo run --release --example train_translator -- 40` uses 40 scenes.

use radarlink::dataset::{build_datasets, draw_split, input_feature};
use radarlink::features::Aps;
use radarlink::neural::{evaluate, input_scale, loss_covvec, train, Feature, MlpModel, TrainConfig, Variant};
use radarlink::scenario::SceneConfig;

fn main() -> radarlink::Result<()> {
    let scenes: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(30);
    let cfg = SceneConfig::default();
    let data = build_datasets(&cfg, scenes, 2024)?;
    println!("{} pairs from {scenes} scenes, {} undetected vehicles", data.len(), data.discarded);

    let ds = data.get(Variant::CovVec);
    let split = draw_split(ds.records.len(), 0.25, 2024);
    let (tr, va) = ds.split(&split)?;
    let mut model = MlpModel::new(Variant::CovVec, cfg.n_rsu, 1);
    model.norm_const = input_scale(&tr);
    let tcfg = TrainConfig {
        max_epochs: 60,
        seed: 1,
        ..TrainConfig::default()
    };
    let (best, history) = train(&model, &tr, &va, &tcfg, Variant::CovVec.loss())?;
    for h in history.iter().step_by(10) {
        println!("epoch {:3}: train {:.3e}  val {:.3e}  lr {:.1e}", h.epoch, h.train_loss, h.val_loss, h.lr);
    }

    let net = evaluate(&best, &va, Variant::CovVec.loss())?;
    let mut raw = 0.0;
    for p in &va {
        if let Feature::CovVec(r) = input_feature(Variant::CovVec, &p.input)? {
            raw += loss_covvec(&r, &Aps::new(p.target.clone())?);
        }
    }
    raw /= va.len() as f64;
    println!("validation loss: network {net:.3e}, raw radar {raw:.3e}");
    Ok(())
}
