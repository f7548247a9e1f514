//! Flat key/value run configuration.
//!
//! One TOML table holds every key. Each key belongs to exactly one of the
//! scene, protocol, training or run sections; unknown keys are rejected.
//! `seed` is shared: the training seed always follows the run seed.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::beam::{ProtocolConfig, ProtocolVariant, DEFAULT_R_MIN_BPS};
use crate::dataset::DEFAULT_VAL_FRACTION;
use crate::error::{Error, Result};
use crate::neural::TrainConfig;
use crate::scenario::{log_sweep, CampaignConfig, PredictorKind, SceneConfig};

/// Keys that are not part of the physical scene or the learning setup.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSettings {
    pub seed: u64,
    pub n_scenes: usize,
    pub val_fraction: f64,
    pub n_trials: usize,
    pub t_coh_min_s: f64,
    pub t_coh_max_s: f64,
    pub t_coh_points: usize,
    pub protocols: Vec<String>,
    pub predictors: Vec<String>,
    pub r_min_bps: f64,
    pub demo_radars: usize,
    pub demo_all_blocks: bool,
}

impl Default for RunSettings {
    fn default() -> Self {
        Self {
            seed: 1,
            n_scenes: 100,
            val_fraction: DEFAULT_VAL_FRACTION,
            n_trials: 100,
            t_coh_min_s: 1e-3,
            t_coh_max_s: 100e-3,
            t_coh_points: 11,
            protocols: vec!["narrow".into(), "wide".into()],
            predictors: PredictorKind::ALL.iter().map(|p| p.name().to_string()).collect(),
            r_min_bps: DEFAULT_R_MIN_BPS,
            demo_radars: 2,
            demo_all_blocks: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunConfig {
    pub scene: SceneConfig,
    pub protocol: ProtocolConfig,
    pub train: TrainConfig,
    pub run: RunSettings,
}

fn cfg_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

fn key_set<T: Serialize>(v: &T) -> Vec<String> {
    toml::Table::try_from(v).map(|t| t.keys().cloned().collect()).unwrap_or_default()
}

fn section<T: for<'de> Deserialize<'de>>(name: &str, t: toml::Table) -> Result<T> {
    toml::Value::Table(t).try_into().map_err(|e: toml::de::Error| cfg_err(name, e.to_string()))
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text.parse().map_err(|e: toml::de::Error| cfg_err("<file>", e.to_string()))?;
        let d = RunConfig::default();
        let scene_keys = key_set(&d.scene);
        let protocol_keys = key_set(&d.protocol);
        let train_keys: Vec<String> = key_set(&d.train).into_iter().filter(|k| k != "seed").collect();
        let run_keys = key_set(&d.run);
        let mut parts: [toml::Table; 4] = Default::default();
        for (k, v) in table {
            let slot = [&scene_keys, &protocol_keys, &train_keys, &run_keys]
                .iter()
                .position(|ks| ks.contains(&k))
                .ok_or_else(|| cfg_err(&k, "unknown key"))?;
            parts[slot].insert(k, v);
        }
        let [scene, protocol, train, run] = parts;
        let mut cfg = RunConfig {
            scene: section("scene", scene)?,
            protocol: section("protocol", protocol)?,
            train: section("train", train)?,
            run: section("run", run)?,
        };
        cfg.train.seed = cfg.run.seed;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text)
    }

    pub fn set_seed(&mut self, seed: u64) {
        self.run.seed = seed;
        self.train.seed = seed;
    }

    /// Checks every section; nothing runs on an invalid configuration.
    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.protocol.validate()?;
        self.train.validate()?;
        let r = &self.run;
        if r.n_scenes == 0 {
            return Err(cfg_err("n_scenes", "must be >= 1"));
        }
        if !(0.0..1.0).contains(&r.val_fraction) {
            return Err(cfg_err("val_fraction", "allowed range [0, 1)"));
        }
        if !(r.t_coh_min_s > 0.0 && r.t_coh_max_s >= r.t_coh_min_s && r.t_coh_max_s.is_finite()) {
            return Err(cfg_err("t_coh_min_s", "need 0 < t_coh_min_s <= t_coh_max_s"));
        }
        if r.t_coh_points == 0 {
            return Err(cfg_err("t_coh_points", "must be >= 1"));
        }
        self.protocols()?;
        self.predictors()?;
        self.campaign()?.validate()
    }

    pub fn protocols(&self) -> Result<Vec<ProtocolVariant>> {
        self.run
            .protocols
            .iter()
            .map(|s| match ProtocolVariant::parse(s) {
                Ok(ProtocolVariant::Exhaustive) | Err(_) => Err(cfg_err("protocols", format!("`{s}` is not one of narrow, wide"))),
                Ok(v) => Ok(v),
            })
            .collect()
    }

    pub fn predictors(&self) -> Result<Vec<PredictorKind>> {
        self.run
            .predictors
            .iter()
            .map(|s| PredictorKind::parse(s).map_err(|_| cfg_err("predictors", format!("`{s}` is not one of radar, aps, eigvec, covvec"))))
            .collect()
    }

    pub fn campaign(&self) -> Result<CampaignConfig> {
        Ok(CampaignConfig {
            scene: self.scene.clone(),
            protocol: self.protocol.clone(),
            n_trials: self.run.n_trials,
            t_coh_s: log_sweep(self.run.t_coh_min_s, self.run.t_coh_max_s, self.run.t_coh_points),
            protocols: self.protocols()?,
            predictors: self.predictors()?,
            r_min_bps: self.run.r_min_bps,
            seed: self.run.seed,
        })
    }

    /// Effective configuration as sorted `key = value` lines.
    pub fn echo_lines(&self) -> Vec<String> {
        let mut all = toml::Table::new();
        for t in [
            toml::Table::try_from(&self.scene),
            toml::Table::try_from(&self.protocol),
            toml::Table::try_from(&self.train),
            toml::Table::try_from(&self.run),
        ]
        .into_iter()
        .flatten()
        {
            all.extend(t);
        }
        all.iter().map(|(k, v)| format!("{k} = {v}")).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_gives_defaults() {
        let c = RunConfig::from_toml_str("").unwrap();
        assert_eq!(c.scene, SceneConfig::default());
        assert_eq!(c.run.seed, c.train.seed);
        c.validate().unwrap();
    }

    #[test]
    fn keys_route_to_sections() {
        let c = RunConfig::from_toml_str("seed = 7\nn_trials = 5\nlr = 0.01\nsearch_wide = 10\ncoverage_m = 40.0\n").unwrap();
        assert_eq!((c.run.seed, c.train.seed), (7, 7));
        assert_eq!(c.run.n_trials, 5);
        assert_eq!(c.train.lr, 0.01);
        assert_eq!(c.protocol.search_wide, 10);
        assert_eq!(c.scene.coverage_m, 40.0);
    }

    #[test]
    fn bad_keys_name_the_key() {
        let e = RunConfig::from_toml_str("bogus_key = 1").unwrap_err();
        assert!(e.to_string().contains("bogus_key"));
        let e = RunConfig::from_toml_str("n_trials = \"many\"").unwrap_err();
        assert!(matches!(e, Error::Config { .. }));
        let c = RunConfig::from_toml_str("truck_fraction = 1.5").unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("truck_fraction"));
        let c = RunConfig::from_toml_str("protocols = [\"exhaustive\"]").unwrap();
        assert!(c.validate().unwrap_err().to_string().contains("protocols"));
    }

    #[test]
    fn echo_round_trips() {
        let c = RunConfig::from_toml_str("seed = 3\nn_scenes = 9\nlane_speeds_kmh = [30.0, 20.0]").unwrap();
        let text = c.echo_lines().join("\n");
        assert_eq!(RunConfig::from_toml_str(&text).unwrap(), c);
    }
}
