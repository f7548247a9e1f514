//! Radar/communication feature pairs for training, and their file formats.

use std::io::{BufRead, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::beam::{beam_scores, Codebook};
use crate::error::{Error, Result};
use crate::features::{Aps, CovarianceVector};
use crate::neural::{pack_complex, unpack_complex, DatasetPair, Feature, PackMode, Variant};
use crate::numerics::C64;
use crate::scenario::{comm_channel, comm_targets, detect_users, draw_scene, radar_features, scene_capture, SceneConfig};

const DATASET_MAGIC: &[u8; 4] = b"RCPD";

/// Default share of records assigned to validation.
pub const DEFAULT_VAL_FRACTION: f64 = 0.2;

/// All records of one feature variant.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub variant: Variant,
    pub feature_dim: usize,
    pub records: Vec<DatasetPair>,
}

impl Dataset {
    pub fn new(variant: Variant, n: usize) -> Self {
        Self {
            variant,
            feature_dim: variant.feature_dim(n),
            records: Vec::new(),
        }
    }

    pub fn target_dim(&self) -> usize {
        self.variant.target_dim(self.variant.array_size(self.feature_dim))
    }

    fn check(&self) -> Result<()> {
        let td = self.target_dim();
        for r in &self.records {
            if r.input.len() != self.feature_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.feature_dim,
                    got: r.input.len(),
                });
            }
            if r.target.len() != td {
                return Err(Error::DimensionMismatch { expected: td, got: r.target.len() });
            }
        }
        Ok(())
    }

    /// Splits by the manifest flags (`true` = validation).
    pub fn split(&self, is_val: &[bool]) -> Result<(Vec<DatasetPair>, Vec<DatasetPair>)> {
        if is_val.len() != self.records.len() {
            return Err(Error::DimensionMismatch {
                expected: self.records.len(),
                got: is_val.len(),
            });
        }
        let (val, train): (Vec<_>, Vec<_>) = self.records.iter().zip(is_val).partition(|(_, &v)| v);
        Ok((train.into_iter().map(|(r, _)| r.clone()).collect(), val.into_iter().map(|(r, _)| r.clone()).collect()))
    }
}

pub fn write_dataset<W: Write>(mut w: W, ds: &Dataset) -> Result<()> {
    ds.check()?;
    let io = |e: std::io::Error| Error::invalid(format!("dataset write failed: {e}"));
    w.write_all(DATASET_MAGIC).map_err(io)?;
    w.write_all(&ds.variant.id().to_le_bytes()).map_err(io)?;
    w.write_all(&(ds.records.len() as u32).to_le_bytes()).map_err(io)?;
    w.write_all(&(ds.feature_dim as u32).to_le_bytes()).map_err(io)?;
    let mut buf = Vec::new();
    for r in &ds.records {
        buf.clear();
        for x in r.input.iter().chain(&r.target) {
            buf.extend_from_slice(&x.to_le_bytes());
        }
        buf.push(u8::from(r.los));
        buf.extend_from_slice(&r.trial_id.to_le_bytes());
        buf.extend_from_slice(&r.vehicle_id.to_le_bytes());
        w.write_all(&buf).map_err(io)?;
    }
    Ok(())
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Dataset> {
    let fmt = |m: String| Error::Format {
        path: "<dataset>".into(),
        message: m,
    };
    let io = |e: std::io::Error| fmt(e.to_string());
    let mut b4 = [0u8; 4];
    r.read_exact(&mut b4).map_err(io)?;
    if &b4 != DATASET_MAGIC {
        return Err(fmt("bad dataset magic".into()));
    }
    let mut u32s = [0u32; 3];
    for v in &mut u32s {
        r.read_exact(&mut b4).map_err(io)?;
        *v = u32::from_le_bytes(b4);
    }
    let variant = Variant::from_id(u32s[0]).map_err(|_| fmt(format!("unknown variant id {}", u32s[0])))?;
    let feature_dim = u32s[2] as usize;
    if feature_dim == 0 || variant.feature_dim(variant.array_size(feature_dim)) != feature_dim {
        return Err(fmt(format!("feature_dim {feature_dim} invalid for {}", variant.name())));
    }
    let mut ds = Dataset {
        variant,
        feature_dim,
        records: Vec::with_capacity(u32s[1] as usize),
    };
    let td = ds.target_dim();
    let mut rec = vec![0u8; 8 * (feature_dim + td) + 9];
    for _ in 0..u32s[1] {
        r.read_exact(&mut rec).map_err(io)?;
        let f = |i: usize| f64::from_le_bytes(rec[8 * i..8 * i + 8].try_into().expect("8 bytes"));
        let tail = 8 * (feature_dim + td);
        let u = |o: usize| u32::from_le_bytes(rec[o..o + 4].try_into().expect("4 bytes"));
        ds.records.push(DatasetPair {
            input: (0..feature_dim).map(f).collect(),
            target: (feature_dim..feature_dim + td).map(f).collect(),
            los: rec[tail] != 0,
            trial_id: u(tail + 1),
            vehicle_id: u(tail + 5),
        });
    }
    let mut extra = [0u8; 1];
    if r.read(&mut extra).map_err(io)? != 0 {
        return Err(fmt("trailing bytes after the last record".into()));
    }
    Ok(ds)
}

pub fn save_dataset(path: &Path, ds: &Dataset) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_dataset(&mut w, ds)?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_dataset(std::io::BufReader::new(f)).map_err(|e| match e {
        Error::Format { message, .. } => Error::Format {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

/// Uniform train/validation draw, one flag per record (`true` = validation).
pub fn draw_split(n: usize, val_fraction: f64, seed: u64) -> Vec<bool> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_5b11);
    (0..n).map(|_| rng.random::<f64>() < val_fraction).collect()
}

pub fn write_split_manifest<W: Write>(mut w: W, is_val: &[bool]) -> std::io::Result<()> {
    for (i, &v) in is_val.iter().enumerate() {
        writeln!(w, "{i} {}", if v { "val" } else { "train" })?;
    }
    Ok(())
}

pub fn read_split_manifest<R: BufRead>(r: R) -> Result<Vec<bool>> {
    let fmt = |m: String| Error::Format {
        path: "<manifest>".into(),
        message: m,
    };
    let mut out = Vec::new();
    for (ln, line) in r.lines().enumerate() {
        let line = line.map_err(|e| fmt(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut it = line.split_whitespace();
        let idx: usize = it
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| fmt(format!("line {}: missing record index", ln + 1)))?;
        if idx != out.len() {
            return Err(fmt(format!("line {}: expected index {}, found {idx}", ln + 1, out.len())));
        }
        out.push(match it.next() {
            Some("train") => false,
            Some("val") => true,
            other => return Err(fmt(format!("line {}: bad split tag {other:?}", ln + 1))),
        });
    }
    Ok(out)
}

/// Radar feature stored in a record input.
pub fn input_feature(variant: Variant, input: &[f64]) -> Result<Feature> {
    Ok(match variant {
        Variant::Aps => Feature::Aps(Aps::new(input.to_vec())?),
        Variant::Eigvec => Feature::Eigvec(unpack_complex(input, PackMode::MagPhase)?),
        Variant::CovVec => Feature::CovVec(CovarianceVector::new(unpack_complex(input, PackMode::RealImag)?)?),
    })
}

/// Beam alignment `|b_s* v|² / max_i |b_i* v|²`, where `b_s` is the beam the
/// prediction ranks first and `v` the true dominant eigenvector.
pub fn beam_alignment(predicted: &Feature, v: &[C64], codebook: &Codebook) -> Result<f64> {
    let scores = beam_scores(predicted, codebook)?;
    let best = (0..scores.len()).max_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(b.cmp(&a))).ok_or_else(|| Error::invalid("empty codebook"))?;
    let gains = beam_scores(&Feature::Eigvec(v.to_vec()), codebook)?;
    let top = gains.iter().cloned().fold(0.0, f64::max);
    Ok(if top > 0.0 { gains[best] / top } else { 0.0 })
}

/// Datasets for all three variants, aligned record for record.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedDatasets {
    pub aps: Dataset,
    pub eigvec: Dataset,
    pub covvec: Dataset,
    /// Active vehicles whose radar was not detected, dropped from the data.
    pub discarded: usize,
}

impl PairedDatasets {
    pub fn get(&self, v: Variant) -> &Dataset {
        match v {
            Variant::Aps => &self.aps,
            Variant::Eigvec => &self.eigvec,
            Variant::CovVec => &self.covvec,
        }
    }

    pub fn len(&self) -> usize {
        self.aps.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

struct SceneRecords {
    rows: Vec<[DatasetPair; 3]>,
    discarded: usize,
}

fn scene_records(cfg: &SceneConfig, bank: &crate::detection::BankConfig, seed: u64, scene_id: u32) -> Result<SceneRecords> {
    let draw = draw_scene(cfg, bank, seed)?;
    let capture = scene_capture(cfg, &draw)?;
    let users: Vec<usize> = (0..draw.scene.vehicles.len()).collect();
    let dets = detect_users(cfg, bank, &draw, &capture, &users)?;
    let mut rows = Vec::new();
    let mut discarded = 0;
    for (u, det) in dets.into_iter().enumerate() {
        let v = &draw.scene.vehicles[u];
        let Some(det) = det else {
            discarded += 1;
            continue;
        };
        let Some(t) = comm_targets(cfg, &comm_channel(cfg, v)?)? else {
            discarded += 1;
            continue;
        };
        let rf = radar_features(&det)?;
        let pair = |input: Vec<f64>, target: Vec<f64>| DatasetPair {
            input,
            target,
            los: v.los,
            trial_id: scene_id,
            vehicle_id: v.vehicle_index as u32,
        };
        rows.push([
            pair(Feature::Aps(rf.aps.clone()).to_input(), t.aps.bins.clone()),
            pair(Feature::Eigvec(rf.eigvec).to_input(), pack_complex(&t.eigvec, PackMode::RealImag)),
            pair(Feature::CovVec(rf.covvec).to_input(), t.aps.bins),
        ]);
    }
    Ok(SceneRecords { rows, discarded })
}

/// Runs `n_scenes` scenes seeded `seed + scene index` and featurizes every
/// detected active vehicle. Scenes run in parallel; output order is fixed.
pub fn build_datasets(cfg: &SceneConfig, n_scenes: usize, seed: u64) -> Result<PairedDatasets> {
    cfg.validate()?;
    let bank = cfg.bank()?;
    let scenes: Vec<SceneRecords> = (0..n_scenes)
        .into_par_iter()
        .map(|i| scene_records(cfg, &bank, seed.wrapping_add(i as u64), i as u32))
        .collect::<Result<_>>()?;
    let n = cfg.n_rsu;
    let mut out = PairedDatasets {
        aps: Dataset::new(Variant::Aps, n),
        eigvec: Dataset::new(Variant::Eigvec, n),
        covvec: Dataset::new(Variant::CovVec, n),
        discarded: 0,
    };
    for s in scenes {
        out.discarded += s.discarded;
        for [a, e, c] in s.rows {
            out.aps.records.push(a);
            out.eigvec.records.push(e);
            out.covvec.records.push(c);
        }
    }
    Ok(out)
}

/// Paths written by [`generate_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFiles {
    pub variants: Vec<PathBuf>,
    pub manifest: PathBuf,
}

pub fn dataset_path(dir: &Path, v: Variant) -> PathBuf {
    dir.join(format!("{}.rcpd", v.name()))
}

pub fn manifest_path(dir: &Path) -> PathBuf {
    dir.join("split.txt")
}

/// Builds the datasets and writes one file per variant plus the split
/// manifest into `out_dir` (created if missing).
pub fn generate_dataset(cfg: &SceneConfig, n_scenes: usize, seed: u64, val_fraction: f64, out_dir: &Path) -> Result<(PairedDatasets, DatasetFiles)> {
    if !(0.0..1.0).contains(&val_fraction) {
        return Err(Error::Config {
            key: "val_fraction".into(),
            message: format!("{val_fraction} outside [0, 1)"),
        });
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let data = build_datasets(cfg, n_scenes, seed)?;
    let mut variants = Vec::new();
    for v in [Variant::Aps, Variant::Eigvec, Variant::CovVec] {
        let p = dataset_path(out_dir, v);
        save_dataset(&p, data.get(v))?;
        variants.push(p);
    }
    let manifest = manifest_path(out_dir);
    let split = draw_split(data.len(), val_fraction, seed);
    let f = std::fs::File::create(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let mut w = std::io::BufWriter::new(f);
    write_split_manifest(&mut w, &split).map_err(|e| Error::io(&manifest, e))?;
    w.flush().map_err(|e| Error::io(&manifest, e))?;
    Ok((data, DatasetFiles { variants, manifest }))
}

pub fn load_split_manifest(path: &Path) -> Result<Vec<bool>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_split_manifest(std::io::BufReader::new(f)).map_err(|e| match e {
        Error::Format { message, .. } => Error::Format {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(variant: Variant, n: usize, records: usize) -> Dataset {
        let mut ds = Dataset::new(variant, n);
        for i in 0..records {
            ds.records.push(DatasetPair {
                input: (0..ds.feature_dim).map(|j| (i * 7 + j) as f64 * 0.25).collect(),
                target: (0..ds.target_dim()).map(|j| -(j as f64) - i as f64).collect(),
                los: i % 2 == 0,
                trial_id: i as u32,
                vehicle_id: 3 * i as u32,
            });
        }
        ds
    }

    #[test]
    fn dataset_round_trip_all_variants() {
        for v in [Variant::Aps, Variant::Eigvec, Variant::CovVec] {
            let ds = toy(v, 8, 5);
            let mut buf = Vec::new();
            write_dataset(&mut buf, &ds).unwrap();
            assert_eq!(&buf[..4], b"RCPD");
            let expect = 16 + 5 * (8 * (ds.feature_dim + ds.target_dim()) + 9);
            assert_eq!(buf.len(), expect);
            assert_eq!(read_dataset(&buf[..]).unwrap(), ds);
        }
    }

    #[test]
    fn dataset_rejects_bad_input() {
        let ds = toy(Variant::Aps, 4, 2);
        let mut buf = Vec::new();
        write_dataset(&mut buf, &ds).unwrap();
        assert!(read_dataset(&buf[..buf.len() - 1]).is_err());
        let mut extra = buf.clone();
        extra.push(0);
        assert!(read_dataset(&extra[..]).is_err());
        buf[0] = b'X';
        assert!(read_dataset(&buf[..]).is_err());
        let mut bad = toy(Variant::Aps, 4, 1);
        bad.records[0].target.pop();
        assert!(write_dataset(Vec::new(), &bad).is_err());
    }

    #[test]
    fn manifest_round_trip_and_ratio() {
        let split = draw_split(5000, 0.2, 9);
        assert_eq!(split, draw_split(5000, 0.2, 9));
        let frac = split.iter().filter(|&&v| v).count() as f64 / 5000.0;
        assert!((frac - 0.2).abs() < 0.02);
        let mut buf = Vec::new();
        write_split_manifest(&mut buf, &split).unwrap();
        assert_eq!(read_split_manifest(&buf[..]).unwrap(), split);
        assert!(read_split_manifest(&b"0 train\n2 val\n"[..]).is_err());
        assert!(read_split_manifest(&b"0 test\n"[..]).is_err());
    }

    #[test]
    fn alignment_is_one_for_the_true_vector() {
        let cb = crate::beam::build_codebook(16, 2).unwrap();
        let v = crate::channel::steering_vector(&crate::channel::UlaConfig::half_wavelength(16), 0.3);
        let v: Vec<C64> = v.iter().map(|x| x / 4.0).collect();
        assert!((beam_alignment(&Feature::Eigvec(v.clone()), &v, &cb).unwrap() - 1.0).abs() < 1e-12);
        let off = crate::channel::steering_vector(&crate::channel::UlaConfig::half_wavelength(16), -0.6);
        let a = beam_alignment(&Feature::Eigvec(off), &v, &cb).unwrap();
        assert!((0.0..0.5).contains(&a));
    }

    #[test]
    fn input_feature_decodes_each_variant() {
        let v = vec![C64::new(0.5, 0.0), C64::new(0.1, -0.2)];
        let cv = Feature::CovVec(CovarianceVector::new(v.clone()).unwrap());
        assert_eq!(input_feature(Variant::CovVec, &cv.to_input()).unwrap(), cv);
        let ev = input_feature(Variant::Eigvec, &Feature::Eigvec(v.clone()).to_input()).unwrap();
        let Feature::Eigvec(back) = ev else { panic!() };
        assert!(back.iter().zip(&v).all(|(a, b)| (a - b).norm() < 1e-12));
        assert!(input_feature(Variant::Aps, &[1.0, -1.0]).is_err());
    }

    #[test]
    fn split_partitions_records() {
        let ds = toy(Variant::CovVec, 4, 6);
        let flags = [true, false, false, true, false, false];
        let (train, val) = ds.split(&flags).unwrap();
        assert_eq!((train.len(), val.len()), (4, 2));
        assert_eq!(val[1].trial_id, 3);
        assert!(ds.split(&flags[..5]).is_err());
    }
}
